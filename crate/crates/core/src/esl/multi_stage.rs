use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{esl_value, player_weights, EslFamily, Game};
use crate::coalition::Coalition;
use crate::error::{Error, Result};
use crate::metrics::{CharacteristicEvaluator, MetricKind};

/// Nested value of the intersection cell fixed by `prefix` (levels of the
/// first `prefix.len()` attributes) as a linear form over atomic-cell
/// unions. Attributes beyond the prefix are left unrestricted.
///
/// Nesting one binary ESL inside another multiplies their group weights, so
/// the cell value is `sum prod_j w_{l_j}(S_j) * v(S_1 x .. x S_d x rest)`.
pub fn cell_form(family: EslFamily, attributes: usize, prefix: &[u8]) -> Vec<(u32, f64)> {
    debug_assert!(prefix.len() <= attributes);
    let weights = [player_weights(family, 2, 0), player_weights(family, 2, 1)];
    let cells = 1u32 << attributes;
    let mut form: BTreeMap<u32, f64> = BTreeMap::new();
    let mut stack: Vec<(usize, u32, f64)> = vec![(0, (0..cells).fold(0, |m, c| m | (1 << c)), 1.0)];
    while let Some((depth, mask, coef)) = stack.pop() {
        if depth == prefix.len() {
            *form.entry(mask).or_insert(0.0) += coef;
            continue;
        }
        for &(levels, w) in &weights[prefix[depth] as usize] {
            let keep = (0..cells)
                .filter(|c| mask & (1 << c) != 0 && levels.contains(((c >> depth) & 1) as usize))
                .fold(0u32, |m, c| m | (1 << c));
            stack.push((depth + 1, keep, coef * w));
        }
    }
    form.into_iter().filter(|(_, w)| *w != 0.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionCell {
    /// Level index (0 or 1) of each attribute fixed so far.
    pub levels: Vec<u8>,
    /// `None` when a characteristic it depends on is undefined.
    pub value: Option<f64>,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStageResult {
    pub family: EslFamily,
    pub attributes: usize,
    /// `levels[d]` holds the `2^(d+1)` cells after fixing attributes
    /// `0..=d`, in lexicographic level order.
    pub levels: Vec<Vec<IntersectionCell>>,
    pub total: f64,
}

impl MultiStageResult {
    /// The finest cells.
    pub fn leaves(&self) -> &[IntersectionCell] {
        self.levels.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Largest `|sum(children) - parent|` over all defined parents.
    pub fn max_efficiency_gap(&self) -> f64 {
        let mut gap = 0.0f64;
        if let Some(first) = self.levels.first() {
            if let (Some(a), Some(b)) = (first[0].value, first[1].value) {
                gap = gap.max((a + b - self.total).abs());
            }
        }
        for d in 1..self.levels.len() {
            for (p, parent) in self.levels[d - 1].iter().enumerate() {
                if let (Some(pv), Some(a), Some(b)) =
                    (parent.value, self.levels[d][2 * p].value, self.levels[d][2 * p + 1].value)
                {
                    gap = gap.max((a + b - pv).abs());
                }
            }
        }
        gap
    }
}

fn prefixes(depth: usize) -> Vec<Vec<u8>> {
    (0..1u32 << depth)
        .map(|code| (0..depth).map(|j| ((code >> (depth - 1 - j)) & 1) as u8).collect())
        .collect()
}

fn evaluate_form(
    ev: &CharacteristicEvaluator<'_>,
    form: &[(u32, f64)],
    features: Coalition,
    kind: MetricKind,
) -> Result<f64> {
    form.iter().try_fold(0.0, |acc, &(mask, w)| Ok(acc + w * ev.characteristic(mask, features, kind)?))
}

/// Nested allocation over every attribute, in the label order, for the
/// predictions of `features`.
pub fn multi_stage(
    ev: &CharacteristicEvaluator<'_>,
    kind: MetricKind,
    family: EslFamily,
    features: Coalition,
) -> Result<MultiStageResult> {
    let attributes = ev.labels().attributes;
    let all = (1u32 << ev.labels().cells()) - 1;
    let total = ev.characteristic(all, features, kind)?;
    let mut levels = Vec::with_capacity(attributes);
    for depth in 1..=attributes {
        let cells = prefixes(depth)
            .into_iter()
            .map(|prefix| {
                let form = cell_form(family, attributes, &prefix);
                match evaluate_form(ev, &form, features, kind) {
                    Ok(v) => Ok(IntersectionCell { levels: prefix, value: Some(v), reason: None }),
                    Err(e) if e.is_hypothesis_level() => {
                        Ok(IntersectionCell { levels: prefix, value: None, reason: Some(e.to_string()) })
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        levels.push(cells);
    }
    Ok(MultiStageResult { family, attributes, levels, total })
}

/// Feature contributions to one intersection cell: the family applied over
/// features to `S -> cell value(S)`.
pub fn multi_stage_contributions(
    ev: &CharacteristicEvaluator<'_>,
    kind: MetricKind,
    family: EslFamily,
    prefix: &[u8],
) -> Result<Vec<f64>> {
    let attributes = ev.labels().attributes;
    if prefix.is_empty() || prefix.len() > attributes {
        return Err(Error::Domain(format!("cell prefix of length {} for {attributes} attributes", prefix.len())));
    }
    let form = cell_form(family, attributes, prefix);
    let game = Game::new(ev.features(), |s: Coalition| evaluate_form(ev, &form, s, kind))?;
    Ok(esl_value(&game, family)?.values)
}
