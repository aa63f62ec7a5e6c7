use serde::{Deserialize, Serialize};

use super::{esl_value, player_weights, support, Allocation, EslFamily, Game, EFFICIENCY_TOL};
use crate::coalition::Coalition;
use crate::error::{Error, Result};
use crate::metrics::{CharacteristicEvaluator, MetricKind};

/// Weights `(group coalition, w)` with `phi_g = sum w * v(group coalition)`
/// for the two levels of a binary attribute.
pub fn group_linear_weights(family: EslFamily) -> [Vec<(Coalition, f64)>; 2] {
    [player_weights(family, 2, 0), player_weights(family, 2, 1)]
}

/// First-stage allocation over the two levels of `attribute`, using the
/// predictions of feature coalition `features`.
pub fn group_values(
    ev: &CharacteristicEvaluator<'_>,
    kind: MetricKind,
    family: EslFamily,
    attribute: usize,
    features: Coalition,
) -> Result<Allocation> {
    let labels = ev.labels();
    let game = Game::new(2, |groups: Coalition| {
        ev.characteristic(labels.attribute_mask(attribute, groups), features, kind)
    })?;
    esl_value(&game, family)
}

/// Contributions `C^k_g` of each feature to each group value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureContributionMatrix {
    pub family: EslFamily,
    pub features: Vec<String>,
    /// `values[g][k]`.
    pub values: Vec<Vec<f64>>,
    pub group_totals: Vec<f64>,
}

impl FeatureContributionMatrix {
    /// Builds a matrix from per-group columns, deriving the totals.
    pub fn from_columns(family: EslFamily, features: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.iter().any(|col| col.len() != features.len()) {
            return Err(Error::Shape("every group column needs one entry per feature".into()));
        }
        let group_totals = values.iter().map(|col| col.iter().sum()).collect();
        Ok(FeatureContributionMatrix { family, features, values, group_totals })
    }

    pub fn contribution(&self, group: usize, feature: usize) -> f64 {
        self.values[group][feature]
    }

    pub fn max_efficiency_gap(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.group_totals)
            .map(|(col, t)| (col.iter().sum::<f64>() - t).abs())
            .fold(0.0, f64::max)
    }
}

/// Applies the family over features to the game `S -> phi_g(S)` for each
/// level `g` of `attribute`.
pub fn two_stage(
    ev: &CharacteristicEvaluator<'_>,
    kind: MetricKind,
    family: EslFamily,
    attribute: usize,
) -> Result<FeatureContributionMatrix> {
    let n = ev.features();
    ev.table().require(&support(family, n))?;
    let mut values = Vec::with_capacity(2);
    let mut group_totals = Vec::with_capacity(2);
    for g in 0..2 {
        let game = Game::new(n, |features: Coalition| {
            Ok(group_values(ev, kind, family, attribute, features)?.values[g])
        })?;
        let alloc = esl_value(&game, family)?;
        group_totals.push(alloc.total);
        values.push(alloc.values);
    }
    let matrix = FeatureContributionMatrix {
        family,
        features: ev.table().universe().to_vec(),
        values,
        group_totals,
    };
    let gap = matrix.max_efficiency_gap();
    if gap > EFFICIENCY_TOL {
        return Err(Error::NumericalConsistency(format!("feature contributions miss group totals by {gap:e}")));
    }
    Ok(matrix)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapAttribution {
    /// `C^k_1 - C^k_2` per feature.
    pub per_feature: Vec<f64>,
    /// `phi_1 - phi_2`.
    pub total: f64,
}

pub fn gap_attribution(matrix: &FeatureContributionMatrix) -> Result<GapAttribution> {
    if matrix.values.len() != 2 {
        return Err(Error::Shape(format!("gap attribution needs 2 groups, got {}", matrix.values.len())));
    }
    let per_feature = matrix.values[0].iter().zip(&matrix.values[1]).map(|(a, b)| a - b).collect();
    Ok(GapAttribution { per_feature, total: matrix.group_totals[0] - matrix.group_totals[1] })
}
