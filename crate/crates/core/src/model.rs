//! Per-coalition predictions: a class-weighted logistic regression retrained
//! on every requested feature subset, or predictions imported from a file.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coalition::{non_empty_subsets, Coalition, MAX_PLAYERS};
use crate::dataset::{EncodedMatrix, EncodedSplit};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub class_weighted: bool,
    pub threshold: f64,
    /// Recorded for provenance; training starts from zeros and is
    /// deterministic.
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            learning_rate: 0.5,
            epochs: 300,
            l2: 0.0,
            class_weighted: true,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::Config("learning rate must be positive and l2 non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub coalition: Coalition,
    /// Encoded columns the weights apply to.
    pub columns: Vec<usize>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-row training weight `n / (2 n_c)` for class `c`, or 1.
pub fn class_weights(labels: &[u8], class_weighted: bool) -> Vec<f64> {
    if !class_weighted {
        return vec![1.0; labels.len()];
    }
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let (wp, wn) = (n / (2.0 * pos), n / (2.0 * (n - pos)));
    labels.iter().map(|&y| if y == 1 { wp } else { wn }).collect()
}

/// Columns of `x` belonging to the features in `coalition`.
pub fn coalition_columns(x: &EncodedMatrix, coalition: Coalition) -> Vec<usize> {
    (0..x.n_cols()).filter(|&j| coalition.contains(x.column_map[j])).collect()
}

fn gather(x: &EncodedMatrix, columns: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.n_rows() * columns.len());
    for i in 0..x.n_rows() {
        let row = x.row(i);
        out.extend(columns.iter().map(|&j| row[j]));
    }
    out
}

/// Full-batch gradient descent on the weighted logistic loss.
pub fn train(
    x: &EncodedMatrix,
    coalition: Coalition,
    labels: &[u8],
    config: &ClassifierConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    let degenerate = |reason: String| Error::DegenerateModel { coalition: coalition.to_string(), reason };
    if labels.len() != x.n_rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.n_rows())));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(degenerate("training labels contain a single class".into()));
    }
    let columns = coalition_columns(x, coalition);
    let d = columns.len();
    let xs = gather(x, &columns);
    let w_row = class_weights(labels, config.class_weighted);
    let total_w: f64 = w_row.iter().sum();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut grad = vec![0.0; d];
    for _ in 0..config.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for i in 0..labels.len() {
            let row = &xs[i * d..(i + 1) * d];
            let z = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let r = w_row[i] * (sigmoid(z) - labels[i] as f64);
            gb += r;
            for (g, a) in grad.iter_mut().zip(row) {
                *g += r * a;
            }
        }
        for (wj, g) in w.iter_mut().zip(&grad) {
            *wj -= config.learning_rate * (g / total_w + config.l2 * *wj);
        }
        b -= config.learning_rate * gb / total_w;
    }
    if !b.is_finite() || w.iter().any(|v| !v.is_finite()) {
        return Err(degenerate("training diverged to non-finite weights".into()));
    }
    Ok(TrainedModel { weights: w, intercept: b, coalition, columns })
}

impl TrainedModel {
    pub fn probabilities(&self, x: &EncodedMatrix) -> Result<Vec<f64>> {
        if self.columns.iter().any(|&j| j >= x.n_cols())
            || self.columns != coalition_columns(x, self.coalition)
        {
            return Err(Error::Shape(format!(
                "matrix columns do not match the model trained on coalition {}",
                self.coalition
            )));
        }
        Ok((0..x.n_rows())
            .map(|i| {
                let row = x.row(i);
                sigmoid(self.intercept + self.columns.iter().zip(&self.weights).map(|(&j, w)| row[j] * w).sum::<f64>())
            })
            .collect())
    }
}

/// `1` iff `sigmoid(score) >= t`.
pub fn predict(model: &TrainedModel, x: &EncodedMatrix, t: f64) -> Result<Vec<u8>> {
    Ok(model.probabilities(x)?.into_iter().map(|p| (p >= t) as u8).collect())
}

/// Which feature coalitions to train or require.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoalitionRequest {
    All,
    FullOnly,
    /// Singletons plus the full set.
    EqualSurplus,
    Explicit(Vec<Coalition>),
}

impl CoalitionRequest {
    pub fn resolve(&self, n: usize) -> Result<Vec<Coalition>> {
        if n == 0 {
            return Err(Error::Domain("feature universe is empty".into()));
        }
        if n > MAX_PLAYERS {
            return Err(Error::Domain(format!("{n} features exceed the limit of {MAX_PLAYERS}")));
        }
        let full = Coalition::full(n);
        let mut out: Vec<Coalition> = match self {
            CoalitionRequest::All => non_empty_subsets(n).collect(),
            CoalitionRequest::FullOnly => vec![full],
            CoalitionRequest::EqualSurplus => (0..n).map(Coalition::singleton).chain([full]).collect(),
            CoalitionRequest::Explicit(list) => {
                if let Some(bad) = list.iter().find(|c| !c.is_subset_of(full)) {
                    return Err(Error::Domain(format!("coalition {bad} lies outside the {n}-feature universe")));
                }
                list.iter().copied().filter(|c| !c.is_empty()).chain([full]).collect()
            }
        };
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// Test-split predictions keyed by feature coalition.
#[derive(Clone, Debug, PartialEq)]
pub struct CoalitionPredictionTable {
    universe: Vec<String>,
    instance_ids: Vec<usize>,
    entries: BTreeMap<Coalition, Vec<u8>>,
}

impl CoalitionPredictionTable {
    pub fn new(universe: Vec<String>, instance_ids: Vec<usize>) -> Result<Self> {
        if universe.is_empty() || universe.len() > MAX_PLAYERS {
            return Err(Error::Domain(format!(
                "feature universe must have 1..={MAX_PLAYERS} names, got {}",
                universe.len()
            )));
        }
        Ok(CoalitionPredictionTable { universe, instance_ids, entries: BTreeMap::new() })
    }

    /// Each key may be written once.
    pub fn insert(&mut self, coalition: Coalition, y_hat: Vec<u8>) -> Result<()> {
        if coalition.is_empty() || !coalition.is_subset_of(self.full()) {
            return Err(Error::Domain(format!("coalition {coalition} is empty or outside the universe")));
        }
        if y_hat.len() != self.instance_ids.len() {
            return Err(Error::Shape(format!(
                "column for {coalition} has {} entries, expected {}",
                y_hat.len(),
                self.instance_ids.len()
            )));
        }
        if let Some(v) = y_hat.iter().find(|&&v| v > 1) {
            return Err(Error::Value(format!("prediction {v} is not 0 or 1")));
        }
        if self.entries.contains_key(&coalition) {
            return Err(Error::Domain(format!("coalition {coalition} inserted twice")));
        }
        self.entries.insert(coalition, y_hat);
        Ok(())
    }

    pub fn get(&self, coalition: Coalition) -> Result<&[u8]> {
        self.entries.get(&coalition).map(Vec::as_slice).ok_or_else(|| {
            Error::Completeness(format!(
                "prediction table lacks coalition [{}]",
                coalition.label(&self.universe)
            ))
        })
    }

    pub fn contains(&self, coalition: Coalition) -> bool {
        self.entries.contains_key(&coalition)
    }

    pub fn universe(&self) -> &[String] {
        &self.universe
    }

    pub fn instance_ids(&self) -> &[usize] {
        &self.instance_ids
    }

    pub fn instances(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn full(&self) -> Coalition {
        Coalition::full(self.universe.len())
    }

    pub fn coalitions(&self) -> impl Iterator<Item = Coalition> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Verifies that the full coalition is present.
    pub fn check_complete(&self) -> Result<()> {
        self.get(self.full()).map(|_| ())
    }

    /// Fails with the first coalition in `needed` that is missing.
    pub fn require(&self, needed: &[Coalition]) -> Result<()> {
        needed.iter().try_for_each(|&c| self.get(c).map(|_| ()))
    }
}

/// Trains one model per requested coalition and predicts the test split.
pub fn build_coalition_table(
    encoded: &EncodedSplit,
    train_labels: &[u8],
    test_ids: &[usize],
    universe: &[String],
    config: &ClassifierConfig,
    request: &CoalitionRequest,
) -> Result<CoalitionPredictionTable> {
    if universe != encoded.encoder.features.as_slice() {
        return Err(Error::Domain("feature universe differs from the encoded features".into()));
    }
    let coalitions = request.resolve(universe.len())?;
    let columns: Vec<(Coalition, Vec<u8>)> = coalitions
        .par_iter()
        .map(|&c| {
            let model = train(&encoded.train, c, train_labels, config).map_err(|e| match e {
                Error::DegenerateModel { reason, .. } => {
                    Error::DegenerateModel { coalition: format!("[{}]", c.label(universe)), reason }
                }
                e => e,
            })?;
            Ok((c, predict(&model, &encoded.test, config.threshold)?))
        })
        .collect::<Result<_>>()?;
    let mut table = CoalitionPredictionTable::new(universe.to_vec(), test_ids.to_vec())?;
    for (c, col) in columns {
        table.insert(c, col)?;
    }
    Ok(table)
}

fn parse_coalition(raw: &str, universe: &[String]) -> Result<Coalition> {
    let mut c = Coalition::EMPTY;
    for name in raw.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let k = universe
            .iter()
            .position(|u| u == name)
            .ok_or_else(|| Error::Domain(format!("feature `{name}` is not in the universe")))?;
        c = c.with(k);
    }
    Ok(c)
}

fn parse_binary(raw: &str, what: &str) -> Result<u8> {
    match raw.trim().parse::<f64>() {
        Ok(0.0) => Ok(0),
        Ok(1.0) => Ok(1),
        _ => Err(Error::Value(format!("{what} `{raw}` is not 0 or 1"))),
    }
}

/// Reads a `coalition,row_id,y_hat` table. Without `universe` the feature
/// order is the sorted set of names found in the file.
pub fn import_predictions(path: impl AsRef<Path>, universe: Option<&[String]>) -> Result<CoalitionPredictionTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("prediction table lacks column `{name}`")))
    };
    let (ci, ri, yi) = (col("coalition")?, col("row_id")?, col("y_hat")?);
    let mut raw: Vec<(String, usize, u8)> = Vec::new();
    for record in reader.records() {
        let r = record?;
        let row_id = r[ri]
            .parse::<usize>()
            .map_err(|_| Error::Schema(format!("row_id `{}` is not a non-negative integer", &r[ri])))?;
        raw.push((r[ci].to_string(), row_id, parse_binary(&r[yi], "prediction")?));
    }
    let universe: Vec<String> = match universe {
        Some(u) => u.to_vec(),
        None => {
            let mut names: Vec<String> = raw
                .iter()
                .flat_map(|(c, _, _)| c.split(';').map(|s| s.trim().to_string()))
                .filter(|s| !s.is_empty())
                .collect();
            names.sort();
            names.dedup();
            names
        }
    };
    let mut ids: Vec<usize> = raw.iter().map(|(_, id, _)| *id).collect();
    ids.sort_unstable();
    ids.dedup();
    let pos: HashMap<usize, usize> = ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();

    let mut columns: BTreeMap<Coalition, Vec<Option<u8>>> = BTreeMap::new();
    for (c, id, y) in raw {
        let coalition = parse_coalition(&c, &universe)?;
        let column = columns.entry(coalition).or_insert_with(|| vec![None; ids.len()]);
        let slot = &mut column[pos[&id]];
        if slot.is_some() {
            return Err(Error::Value(format!("duplicate prediction for coalition `{c}`, row {id}")));
        }
        *slot = Some(y);
    }
    let mut table = CoalitionPredictionTable::new(universe, ids.clone())?;
    for (c, column) in columns {
        if c.is_empty() {
            continue;
        }
        let filled: Option<Vec<u8>> = column.iter().copied().collect();
        let filled = filled.ok_or_else(|| {
            Error::Completeness(format!("coalition [{}] does not cover every row", c.label(table.universe())))
        })?;
        table.insert(c, filled)?;
    }
    table.check_complete()?;
    Ok(table)
}

pub fn write_predictions(table: &CoalitionPredictionTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["coalition", "row_id", "y_hat"])?;
    for c in table.coalitions() {
        let label = c.label(table.universe());
        for (id, y) in table.instance_ids().iter().zip(table.get(c)?) {
            w.write_record([label.as_str(), &id.to_string(), &y.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Labels and group levels keyed by row id, as read from a labels file.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelsFile {
    pub row_ids: Vec<usize>,
    pub y: Vec<u8>,
    pub group_names: Vec<String>,
    /// Level names per group column, in code order.
    pub levels: Vec<[String; 2]>,
    /// Zero-based level index per group column and row.
    pub codes: Vec<Vec<u8>>,
}

/// Reads `row_id,<label>,<group columns>`; rows are returned sorted by id.
pub fn load_labels(
    path: impl AsRef<Path>,
    label_col: &str,
    group_cols: &[String],
    positive_label: Option<&str>,
) -> Result<LabelsFile> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("labels file lacks column `{name}`")))
    };
    let ri = col("row_id")?;
    let yi = col(label_col)?;
    let gi: Vec<usize> = group_cols.iter().map(|g| col(g)).collect::<Result<_>>()?;
    let mut rows: Vec<(usize, u8, Vec<String>)> = Vec::new();
    for record in reader.records() {
        let r = record?;
        let id = r[ri]
            .parse::<usize>()
            .map_err(|_| Error::Schema(format!("row_id `{}` is not a non-negative integer", &r[ri])))?;
        let y = match positive_label {
            Some(p) => (&r[yi] == p) as u8,
            None => parse_binary(&r[yi], "label").map_err(|e| Error::Label(e.to_string()))?,
        };
        rows.push((id, y, gi.iter().map(|&g| r[g].to_string()).collect()));
    }
    rows.sort_by_key(|r| r.0);
    if rows.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Schema("labels file repeats a row_id".into()));
    }
    let mut levels = Vec::new();
    let mut codes = Vec::new();
    for (j, name) in group_cols.iter().enumerate() {
        let mut order: Vec<String> = Vec::new();
        for r in &rows {
            if !order.contains(&r.2[j]) {
                order.push(r.2[j].clone());
            }
        }
        if order.len() != 2 {
            return Err(Error::Cardinality { column: name.clone(), levels: order.len() });
        }
        codes.push(rows.iter().map(|r| (r.2[j] != order[0]) as u8).collect());
        levels.push([order[0].clone(), order[1].clone()]);
    }
    Ok(LabelsFile {
        row_ids: rows.iter().map(|r| r.0).collect(),
        y: rows.iter().map(|r| r.1).collect(),
        group_names: group_cols.to_vec(),
        levels,
        codes,
    })
}
