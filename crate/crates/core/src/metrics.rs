//! Confusion counts, the five rate metrics and the baseline-normalized
//! characteristic functions over group coalitions.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::coalition::Coalition;
use crate::error::{Error, Result};
use crate::model::CoalitionPredictionTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Sr,
    Tpr,
    Fpr,
    Ppv,
    Npv,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] =
        [MetricKind::Sr, MetricKind::Tpr, MetricKind::Fpr, MetricKind::Ppv, MetricKind::Npv];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Sr => "SR",
            MetricKind::Tpr => "TPR",
            MetricKind::Fpr => "FPR",
            MetricKind::Ppv => "PPV",
            MetricKind::Npv => "NPV",
        }
    }

    /// Whether a row with label `y` and prediction `y_hat` enters the
    /// denominator (`.0`) and the numerator (`.1`) of the rate.
    #[inline]
    pub fn indicators(self, y: u8, y_hat: u8) -> (bool, bool) {
        let (y, p) = (y == 1, y_hat == 1);
        match self {
            MetricKind::Sr => (true, p),
            MetricKind::Tpr => (y, y && p),
            MetricKind::Fpr => (!y, !y && p),
            MetricKind::Ppv => (p, p && y),
            // P(Y = 1 | Y_hat = 0)
            MetricKind::Npv => (!p, !p && y),
        }
    }

    /// The rate depends on the predictions only through its numerator.
    pub fn has_fixed_denominator(self) -> bool {
        matches!(self, MetricKind::Sr | MetricKind::Tpr | MetricKind::Fpr)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sr" => Ok(MetricKind::Sr),
            "tpr" => Ok(MetricKind::Tpr),
            "fpr" => Ok(MetricKind::Fpr),
            "ppv" => Ok(MetricKind::Ppv),
            "npv" => Ok(MetricKind::Npv),
            other => Err(Error::Domain(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn actual_pos(&self) -> u64 {
        self.tp + self.fn_
    }
    pub fn actual_neg(&self) -> u64 {
        self.fp + self.tn
    }
    pub fn pred_pos(&self) -> u64 {
        self.tp + self.fp
    }
    pub fn pred_neg(&self) -> u64 {
        self.fn_ + self.tn
    }
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    #[inline]
    pub fn add(&mut self, y: u8, y_hat: u8, weight: u64) {
        match (y == 1, y_hat == 1) {
            (true, true) => self.tp += weight,
            (false, true) => self.fp += weight,
            (false, false) => self.tn += weight,
            (true, false) => self.fn_ += weight,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// `(numerator, denominator)` of `kind`.
    pub fn fraction(&self, kind: MetricKind) -> (u64, u64) {
        match kind {
            MetricKind::Sr => (self.pred_pos(), self.total()),
            MetricKind::Tpr => (self.tp, self.actual_pos()),
            MetricKind::Fpr => (self.fp, self.actual_neg()),
            MetricKind::Ppv => (self.tp, self.pred_pos()),
            MetricKind::Npv => (self.fn_, self.pred_neg()),
        }
    }
}

/// Counts over the rows where `mask` is true.
pub fn confusion(y_true: &[u8], y_hat: &[u8], mask: &[bool]) -> Result<ConfusionCounts> {
    if y_true.len() != y_hat.len() || y_true.len() != mask.len() {
        return Err(Error::Shape(format!(
            "confusion inputs have lengths {}, {}, {}",
            y_true.len(),
            y_hat.len(),
            mask.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for ((&y, &p), &m) in y_true.iter().zip(y_hat).zip(mask) {
        if m {
            c.add(y, p, 1);
        }
    }
    Ok(c)
}

pub fn metric_value(c: &ConfusionCounts, kind: MetricKind) -> Result<f64> {
    let (num, den) = c.fraction(kind);
    if den == 0 {
        return Err(Error::UndefinedMetric { kind, context: "the given counts".into() });
    }
    Ok(num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum BaselineMode {
    Half,
    Prevalence,
    Fixed(f64),
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "half" => Ok(BaselineMode::Half),
            "prevalence" => Ok(BaselineMode::Prevalence),
            other => other
                .parse::<f64>()
                .map(BaselineMode::Fixed)
                .map_err(|_| Error::Config(format!("baseline `{other}` is not half, prevalence or a number"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mode: BaselineMode,
    pub value: f64,
}

impl Baseline {
    pub fn half() -> Baseline {
        Baseline { mode: BaselineMode::Half, value: 0.5 }
    }

    pub fn fixed(value: f64) -> Result<Baseline> {
        Baseline::resolve(BaselineMode::Fixed(value), &[])
    }

    /// Prevalence is taken over `y_true`.
    pub fn resolve(mode: BaselineMode, y_true: &[u8]) -> Result<Baseline> {
        let value = match mode {
            BaselineMode::Half => 0.5,
            BaselineMode::Fixed(x) => x,
            BaselineMode::Prevalence => {
                if y_true.is_empty() {
                    return Err(Error::Config("prevalence baseline needs labels".into()));
                }
                y_true.iter().filter(|&&y| y == 1).count() as f64 / y_true.len() as f64
            }
        };
        if !(value > 0.0 && value < 1.0) {
            return Err(Error::Config(format!("baseline {value} must lie strictly inside (0, 1)")));
        }
        Ok(Baseline { mode, value })
    }
}

/// Labels and group membership of the audited instances. Each instance
/// belongs to one atomic cell; with `s` binary attributes bit `j` of the
/// cell index is the level (0 or 1) of attribute `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedLabels {
    pub y: Vec<u8>,
    pub cell: Vec<u32>,
    pub attributes: usize,
}

impl GroupedLabels {
    /// `levels[j][i]` in `{0, 1}` is the level of attribute `j` for row `i`.
    pub fn new(y: Vec<u8>, levels: &[Vec<u8>]) -> Result<GroupedLabels> {
        if levels.is_empty() || levels.len() > 5 {
            return Err(Error::Domain(format!(
                "between 1 and 5 binary sensitive attributes are supported, got {}",
                levels.len()
            )));
        }
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(Error::Label(format!("label {bad} is not 0 or 1")));
        }
        let mut cell = vec![0u32; y.len()];
        for (j, col) in levels.iter().enumerate() {
            if col.len() != y.len() {
                return Err(Error::Shape(format!(
                    "attribute {j} has {} rows, labels have {}",
                    col.len(),
                    y.len()
                )));
            }
            for (c, &l) in cell.iter_mut().zip(col) {
                if l > 1 {
                    return Err(Error::Domain(format!("group level index {l} is not 0 or 1")));
                }
                *c |= (l as u32) << j;
            }
        }
        Ok(GroupedLabels { y, cell, attributes: levels.len() })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn cells(&self) -> usize {
        1 << self.attributes
    }

    /// Bootstrap / variance stratum: `(cell, label)`.
    pub fn stratum(&self, i: usize) -> usize {
        self.cell[i] as usize * 2 + self.y[i] as usize
    }

    pub fn strata(&self) -> usize {
        self.cells() * 2
    }

    /// Cells whose level on `attribute` lies in `levels` (a coalition over
    /// `{0, 1}`).
    pub fn attribute_mask(&self, attribute: usize, levels: Coalition) -> u32 {
        (0..self.cells() as u32)
            .filter(|c| levels.contains(((c >> attribute) & 1) as usize))
            .fold(0, |m, c| m | (1 << c))
    }

    pub fn level(&self, attribute: usize, i: usize) -> u8 {
        ((self.cell[i] >> attribute) & 1) as u8
    }
}

type CellCounts = Arc<Vec<ConfusionCounts>>;

/// Memoized evaluator of `v(cells, features) = metric / baseline` backed by
/// a prediction table. Row multiplicities (for bootstrap resamples) are
/// optional.
pub struct CharacteristicEvaluator<'a> {
    table: &'a CoalitionPredictionTable,
    labels: &'a GroupedLabels,
    baseline: f64,
    weights: Option<&'a [u32]>,
    counts: RwLock<HashMap<Coalition, CellCounts>>,
    memo: RwLock<HashMap<(u32, Coalition, MetricKind), Option<f64>>>,
    evaluations: AtomicUsize,
}

impl<'a> CharacteristicEvaluator<'a> {
    pub fn new(
        table: &'a CoalitionPredictionTable,
        labels: &'a GroupedLabels,
        baseline: Baseline,
    ) -> Result<Self> {
        if table.instances() != labels.len() {
            return Err(Error::Shape(format!(
                "prediction table has {} instances, labels have {}",
                table.instances(),
                labels.len()
            )));
        }
        Ok(CharacteristicEvaluator {
            table,
            labels,
            baseline: baseline.value,
            weights: None,
            counts: RwLock::new(HashMap::new()),
            memo: RwLock::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
        })
    }

    pub fn with_weights(mut self, weights: &'a [u32]) -> Result<Self> {
        if weights.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} multiplicities for {} instances",
                weights.len(),
                self.labels.len()
            )));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn table(&self) -> &CoalitionPredictionTable {
        self.table
    }

    pub fn labels(&self) -> &GroupedLabels {
        self.labels
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn features(&self) -> usize {
        self.table.universe().len()
    }

    fn cell_counts(&self, features: Coalition) -> Result<CellCounts> {
        if let Some(c) = self.counts.read().expect("counts poisoned").get(&features) {
            return Ok(c.clone());
        }
        let y_hat = self.table.get(features)?;
        let mut per_cell = vec![ConfusionCounts::default(); self.labels.cells()];
        let y = &self.labels.y;
        let cell = &self.labels.cell;
        match self.weights {
            None => {
                for i in 0..y.len() {
                    per_cell[cell[i] as usize].add(y[i], y_hat[i], 1);
                }
            }
            Some(w) => {
                for i in 0..y.len() {
                    if w[i] > 0 {
                        per_cell[cell[i] as usize].add(y[i], y_hat[i], w[i] as u64);
                    }
                }
            }
        }
        let per_cell = Arc::new(per_cell);
        self.counts
            .write()
            .expect("counts poisoned")
            .entry(features)
            .or_insert_with(|| per_cell.clone());
        Ok(per_cell)
    }

    /// Pooled counts over the cells in `cells` (bitmask over atomic cells).
    pub fn counts(&self, cells: u32, features: Coalition) -> Result<ConfusionCounts> {
        let per_cell = self.cell_counts(features)?;
        let mut total = ConfusionCounts::default();
        for (c, counts) in per_cell.iter().enumerate() {
            if cells & (1 << c) != 0 {
                total.merge(counts);
            }
        }
        Ok(total)
    }

    pub fn metric(&self, cells: u32, features: Coalition, kind: MetricKind) -> Result<f64> {
        let c = self.counts(cells, features)?;
        metric_value(&c, kind).map_err(|_| self.undefined(cells, features, kind))
    }

    fn undefined(&self, cells: u32, features: Coalition, kind: MetricKind) -> Error {
        Error::UndefinedMetric {
            kind,
            context: format!(
                "cells {:#b}, features [{}]",
                cells,
                features.label(self.table.universe())
            ),
        }
    }

    /// `metric / baseline`, or 0 for the empty group coalition.
    pub fn characteristic(&self, cells: u32, features: Coalition, kind: MetricKind) -> Result<f64> {
        if cells == 0 {
            return Ok(0.0);
        }
        let key = (cells, features, kind);
        let cached = self.memo.read().expect("memo poisoned").get(&key).copied();
        let v = match cached {
            Some(v) => v,
            None => {
                let c = self.counts(cells, features)?;
                let v = metric_value(&c, kind).ok().map(|m| m / self.baseline);
                let mut memo = self.memo.write().expect("memo poisoned");
                if let std::collections::hash_map::Entry::Vacant(e) = memo.entry(key) {
                    e.insert(v);
                    self.evaluations.fetch_add(1, Ordering::Relaxed);
                }
                v
            }
        };
        v.ok_or_else(|| self.undefined(cells, features, kind))
    }

    /// Distinct `(cells, features, kind)` characteristic values computed.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(cols: &[(u32, &[u8])], universe: &[&str]) -> CoalitionPredictionTable {
        let n = cols[0].1.len();
        let mut t = CoalitionPredictionTable::new(
            universe.iter().map(|s| s.to_string()).collect(),
            (0..n).collect(),
        )
        .unwrap();
        for (c, col) in cols {
            t.insert(Coalition(*c), col.to_vec()).unwrap();
        }
        t
    }

    #[test]
    fn confusion_direct_counts() {
        let c = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0], &[true; 4]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let empty = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0], &[false; 4]).unwrap();
        assert_eq!(empty, ConfusionCounts::default());
        assert!(confusion(&[1], &[1, 0], &[true]).is_err());
    }

    #[test]
    fn masked_counts_match_filtering() {
        let y = [1, 0, 1, 1, 0, 1];
        let p = [1, 1, 0, 1, 0, 0];
        let g = [1, 2, 1, 2, 1, 1];
        let mask: Vec<bool> = g.iter().map(|&v| v == 1).collect();
        let got = confusion(&y, &p, &mask).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for i in 0..6 {
            if g[i] != 1 {
                continue;
            }
            match (y[i], p[i]) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (0, 0) => tn += 1,
                _ => fn_ += 1,
            }
        }
        assert_eq!(got, ConfusionCounts { tp, fp, tn, fn_ });
    }

    #[test]
    fn metric_values_and_orientation() {
        let c = ConfusionCounts { tp: 1, fp: 2, tn: 3, fn_: 1 };
        assert_eq!(metric_value(&c, MetricKind::Tpr).unwrap(), 0.5);
        assert_eq!(metric_value(&c, MetricKind::Fpr).unwrap(), 0.4);
        assert_eq!(metric_value(&c, MetricKind::Sr).unwrap(), 3.0 / 7.0);
        assert_eq!(metric_value(&c, MetricKind::Ppv).unwrap(), 1.0 / 3.0);
        assert_eq!(metric_value(&c, MetricKind::Npv).unwrap(), 0.25);
        let none = ConfusionCounts { tp: 0, fp: 0, tn: 3, fn_: 1 };
        assert!(matches!(
            metric_value(&none, MetricKind::Ppv),
            Err(Error::UndefinedMetric { kind: MetricKind::Ppv, .. })
        ));
        let pooled = ConfusionCounts { tp: 805, fp: 0, tn: 0, fn_: 195 };
        assert!((metric_value(&pooled, MetricKind::Tpr).unwrap() - 0.805).abs() < 1e-15);
    }

    #[test]
    fn indicators_agree_with_fractions() {
        for kind in MetricKind::ALL {
            let mut c = ConfusionCounts::default();
            let (mut num, mut den) = (0, 0);
            for (y, p) in [(1, 1), (1, 0), (0, 1), (0, 0), (1, 1), (0, 1)] {
                c.add(y, p, 1);
                let (d, a) = kind.indicators(y, p);
                den += d as u64;
                num += a as u64;
            }
            assert_eq!(c.fraction(kind), (num, den), "{kind}");
        }
    }

    #[test]
    fn baseline_resolution() {
        assert_eq!(Baseline::resolve(BaselineMode::Half, &[]).unwrap().value, 0.5);
        assert_eq!(Baseline::resolve(BaselineMode::Prevalence, &[1, 0, 0, 0]).unwrap().value, 0.25);
        assert!(Baseline::resolve(BaselineMode::Prevalence, &[1, 1]).is_err());
        assert!(Baseline::fixed(0.0).is_err());
        assert_eq!("0.3".parse::<BaselineMode>().unwrap(), BaselineMode::Fixed(0.3));
        assert!("median".parse::<BaselineMode>().is_err());
    }

    #[test]
    fn characteristic_empty_coalition_scale_and_pooling() {
        let y = vec![1, 1, 0, 1, 1, 0];
        let groups = vec![vec![0, 0, 0, 1, 1, 1]];
        let labels = GroupedLabels::new(y, &groups).unwrap();
        let t = table(&[(0b1, &[1, 0, 1, 1, 1, 0])], &["x"]);
        let full = Coalition::full(1);
        let half = CharacteristicEvaluator::new(&t, &labels, Baseline::half()).unwrap();
        let quarter = CharacteristicEvaluator::new(&t, &labels, Baseline::fixed(0.25).unwrap()).unwrap();
        for kind in MetricKind::ALL {
            assert_eq!(half.characteristic(0, full, kind).unwrap(), 0.0);
        }
        let all = labels.attribute_mask(0, Coalition(0b11));
        assert_eq!(all, 0b11);
        let v = half.characteristic(all, full, MetricKind::Tpr).unwrap();
        assert_eq!(v, 2.0 * 0.75);
        let w = quarter.characteristic(all, full, MetricKind::Tpr).unwrap();
        assert_eq!(w, 2.0 * v);
        let a = half.counts(0b01, full).unwrap();
        let b = half.counts(0b10, full).unwrap();
        let p = half.counts(0b11, full).unwrap();
        assert_eq!(a.tp + b.tp, p.tp);
        assert_eq!(a.actual_pos() + b.actual_pos(), p.actual_pos());
    }

    #[test]
    fn characteristic_memo_counts_distinct_keys() {
        let labels = GroupedLabels::new(vec![1, 0, 1, 0], &[vec![0, 0, 1, 1]]).unwrap();
        let t = table(&[(0b1, &[1, 0, 1, 1])], &["x"]);
        let ev = CharacteristicEvaluator::new(&t, &labels, Baseline::half()).unwrap();
        let full = Coalition::full(1);
        for _ in 0..3 {
            ev.characteristic(0b11, full, MetricKind::Sr).unwrap();
            ev.characteristic(0b01, full, MetricKind::Sr).unwrap();
        }
        assert_eq!(ev.evaluations(), 2);
        // group 1 has no negatives
        let only_pos = GroupedLabels::new(vec![1, 1, 0, 0], &[vec![0, 0, 1, 1]]).unwrap();
        let ev = CharacteristicEvaluator::new(&t, &only_pos, Baseline::half()).unwrap();
        let err = ev.characteristic(0b01, full, MetricKind::Fpr).unwrap_err();
        assert!(err.is_hypothesis_level());
        assert!(ev.characteristic(0b01, Coalition(0b10), MetricKind::Fpr).is_err());
    }

    #[test]
    fn weighted_counts_equal_duplicated_rows() {
        let labels = GroupedLabels::new(vec![1, 0, 1], &[vec![0, 1, 1]]).unwrap();
        let t = table(&[(0b1, &[1, 1, 0])], &["x"]);
        let w = [2u32, 0, 3];
        let ev = CharacteristicEvaluator::new(&t, &labels, Baseline::half())
            .unwrap()
            .with_weights(&w)
            .unwrap();
        let c = ev.counts(0b11, Coalition(1)).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 0, tn: 0, fn_: 3 });
    }

    #[test]
    fn grouped_labels_cells() {
        let l = GroupedLabels::new(vec![0, 1, 1, 0], &[vec![0, 1, 0, 1], vec![0, 0, 1, 1]]).unwrap();
        assert_eq!(l.cell, vec![0, 1, 2, 3]);
        assert_eq!(l.attribute_mask(0, Coalition(0b01)), 0b0101);
        assert_eq!(l.attribute_mask(1, Coalition(0b10)), 0b1100);
        assert_eq!(l.stratum(1), 3);
        assert!(GroupedLabels::new(vec![2], &[vec![0]]).is_err());
        assert!(GroupedLabels::new(vec![1], &[vec![0, 1]]).is_err());
    }
}
