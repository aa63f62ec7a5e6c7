//! Stratified nonparametric bootstrap over fixed predictions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esl::{group_values, two_stage, EslFamily};
use crate::metrics::{Baseline, CharacteristicEvaluator, GroupedLabels, MetricKind};
use crate::model::CoalitionPredictionTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replications: usize,
    pub alpha: f64,
    pub master_seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { replications: 1000, alpha: 0.05, master_seed: 0 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::Config(format!("{} bootstrap replications, need at least 2", self.replications)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Statistic on the original sample.
    pub estimate: f64,
    /// Valid replicate values in replicate order.
    pub replicates: Vec<f64>,
    pub mean: f64,
    pub ci: (f64, f64),
    pub failures: usize,
    pub alpha: f64,
}

impl BootstrapResult {
    pub fn excludes_zero(&self) -> bool {
        !(self.ci.0 <= 0.0 && 0.0 <= self.ci.1)
    }
}

/// Row indices per `(cell, label)` stratum, skipping strata with no rows.
pub fn strata_from_labels(labels: &GroupedLabels) -> Vec<Vec<usize>> {
    let mut strata = vec![Vec::new(); labels.strata()];
    for i in 0..labels.len() {
        strata[labels.stratum(i)].push(i);
    }
    strata.retain(|s| !s.is_empty());
    strata
}

/// Draws each stratum's rows with replacement from that stratum. Position
/// `j` of the output holds the draw replacing row `j`.
pub fn stratified_resample(strata: &[Vec<usize>], seed: u64) -> Result<Vec<usize>> {
    let n: usize = strata.iter().map(Vec::len).sum();
    let mut out = vec![usize::MAX; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (s, rows) in strata.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::Stratum(format!("stratum {s} has no rows")));
        }
        for &row in rows {
            let slot = out
                .get_mut(row)
                .ok_or_else(|| Error::Stratum(format!("row {row} is outside the {n} stratified rows")))?;
            if *slot != usize::MAX {
                return Err(Error::Stratum(format!("row {row} belongs to two strata")));
            }
            *slot = rows[rng.gen_range(0..rows.len())];
        }
    }
    Ok(out)
}

/// Multiplicity of every row in a resample.
pub fn multiplicities(indices: &[usize]) -> Vec<u32> {
    let mut w = vec![0u32; indices.len()];
    for &i in indices {
        w[i] += 1;
    }
    w
}

/// Nearest-rank percentile interval of sorted values.
pub fn percentile_ci(sorted: &[f64], alpha: f64) -> (f64, f64) {
    let m = sorted.len() as f64;
    let rank = |q: f64| ((q * m).ceil() as usize).clamp(1, sorted.len()) - 1;
    (sorted[rank(alpha / 2.0)], sorted[rank(1.0 - alpha / 2.0)])
}

/// Bootstraps a vector of statistics computed from row multiplicities.
/// A replicate in which any statistic is undefined is dropped as a whole.
pub fn bootstrap_many<F>(strata: &[Vec<usize>], statistic: F, config: &BootstrapConfig) -> Result<Vec<BootstrapResult>>
where
    F: Fn(&[u32]) -> Result<Vec<f64>> + Sync,
{
    config.validate()?;
    let n: usize = strata.iter().map(Vec::len).sum();
    let original = statistic(&vec![1; n])?;
    let outcomes: Vec<Option<Vec<f64>>> = (0..config.replications)
        .into_par_iter()
        .map(|b| {
            let idx = stratified_resample(strata, config.master_seed.wrapping_add(b as u64))?;
            match statistic(&multiplicities(&idx)) {
                Ok(v) if v.len() == original.len() && v.iter().all(|x| x.is_finite()) => Ok(Some(v)),
                Ok(v) if v.len() != original.len() => {
                    Err(Error::Shape(format!("replicate {b} returned {} statistics, expected {}", v.len(), original.len())))
                }
                Ok(_) => Ok(None),
                Err(e) if e.is_hypothesis_level() => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    if failures * 10 > config.replications {
        return Err(Error::Unstable { failures, replicates: config.replications });
    }
    let valid: Vec<&Vec<f64>> = outcomes.iter().flatten().collect();
    Ok(original
        .iter()
        .enumerate()
        .map(|(j, &estimate)| {
            let replicates: Vec<f64> = valid.iter().map(|v| v[j]).collect();
            let mean = replicates.iter().sum::<f64>() / replicates.len() as f64;
            let mut sorted = replicates.clone();
            sorted.sort_by(f64::total_cmp);
            BootstrapResult { estimate, ci: percentile_ci(&sorted, config.alpha), replicates, mean, failures, alpha: config.alpha }
        })
        .collect())
}

pub fn bootstrap_ci<F>(strata: &[Vec<usize>], statistic: F, config: &BootstrapConfig) -> Result<BootstrapResult>
where
    F: Fn(&[u32]) -> Result<f64> + Sync,
{
    let mut r = bootstrap_many(strata, |w| Ok(vec![statistic(w)?]), config)?;
    Ok(r.remove(0))
}

/// `[phi_1 - phi_2, C^1_1 - C^1_2, .., C^N_1 - C^N_2]` on the weighted sample.
/// The baseline is held fixed across replicates.
pub fn gap_statistics<'a>(
    table: &'a CoalitionPredictionTable,
    labels: &'a GroupedLabels,
    baseline: Baseline,
    kind: MetricKind,
    family: EslFamily,
    attribute: usize,
) -> impl Fn(&[u32]) -> Result<Vec<f64>> + Sync + 'a {
    move |weights: &[u32]| {
        let ev = CharacteristicEvaluator::new(table, labels, baseline)?.with_weights(weights)?;
        let first = group_values(&ev, kind, family, attribute, table.full())?;
        let matrix = two_stage(&ev, kind, family, attribute)?;
        let mut out = vec![first.values[0] - first.values[1]];
        out.extend(matrix.values[0].iter().zip(&matrix.values[1]).map(|(a, b)| a - b));
        Ok(out)
    }
}

/// One row per valid replicate, one column per statistic.
pub fn write_replicates(path: impl AsRef<Path>, names: &[String], results: &[BootstrapResult]) -> Result<()> {
    if names.len() != results.len() {
        return Err(Error::Shape(format!("{} names for {} statistics", names.len(), results.len())));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["replicate".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    let rows = results.first().map_or(0, |r| r.replicates.len());
    for b in 0..rows {
        let mut rec = vec![b.to_string()];
        rec.extend(results.iter().map(|r| format!("{:.12e}", r.replicates[b])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
