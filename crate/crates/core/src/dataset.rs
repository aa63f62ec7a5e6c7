//! Tabular data with a binary label and binary sensitive attributes:
//! loading, validation, splitting and train-fitted encoding.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens treated as a missing value (after trimming).
pub const MISSING: [&str; 3] = ["", "?", "NA"];

/// Name of the one-hot category that collects missing categorical values.
pub const MISSING_CATEGORY: &str = "<missing>";

fn is_missing(s: &str) -> bool {
    MISSING.contains(&s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub stage: String,
    pub message: String,
}

impl Warning {
    pub fn new(stage: &str, message: impl Into<String>) -> Warning {
        Warning { stage: stage.to_string(), message: message.into() }
    }
}

/// Column roles. An empty `features` list means "every other column".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub label: String,
    pub groups: Vec<String>,
    pub features: Vec<String>,
    /// Label value mapped to 1; all other non-missing values map to 0.
    pub positive_label: Option<String>,
    /// Explicit `(level 1, level 2)` per group column.
    pub group_levels: BTreeMap<String, (String, String)>,
    /// Forced kinds; unlisted features are probed.
    pub kinds: BTreeMap<String, FeatureKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl Column {
    pub fn kind(&self) -> FeatureKind {
        match self {
            Column::Numeric(_) => FeatureKind::Numeric,
            Column::Categorical(_) => FeatureKind::Categorical,
        }
    }

    fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    fn render(&self, i: usize) -> String {
        match self {
            Column::Numeric(v) => v[i].map(|x| x.to_string()).unwrap_or_default(),
            Column::Categorical(v) => v[i].clone().unwrap_or_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub column: Column,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupColumn {
    pub name: String,
    /// Original level names for codes 1 and 2.
    pub levels: [String; 2],
    /// Per-row code in `{1, 2}`.
    pub codes: Vec<u8>,
}

impl GroupColumn {
    /// Zero-based level index per row.
    pub fn level_indices(&self) -> Vec<u8> {
        self.codes.iter().map(|c| c - 1).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Feature>,
    pub label_column: String,
    pub labels: Vec<u8>,
    pub groups: Vec<GroupColumn>,
    /// Rows discarded for a missing label or group value.
    pub dropped_rows: usize,
    pub warnings: Vec<Warning>,
}

impl Dataset {
    pub fn row_count(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    /// A schema that reloads this dataset unchanged from [`write_csv`] output.
    pub fn schema(&self) -> Schema {
        Schema {
            label: self.label_column.clone(),
            groups: self.groups.iter().map(|g| g.name.clone()).collect(),
            features: self.feature_names(),
            positive_label: None,
            group_levels: self
                .groups
                .iter()
                .map(|g| (g.name.clone(), (g.levels[0].clone(), g.levels[1].clone())))
                .collect(),
            kinds: self.features.iter().map(|f| (f.name.clone(), f.column.kind())).collect(),
        }
    }

    /// Validates the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::Schema("dataset has no rows".into()));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(Error::Label("labels must be 0 or 1".into()));
        }
        let mut names = HashSet::new();
        for name in self
            .features
            .iter()
            .map(|f| &f.name)
            .chain(std::iter::once(&self.label_column))
            .chain(self.groups.iter().map(|g| &g.name))
        {
            if !names.insert(name.as_str()) {
                return Err(Error::Schema(format!("column `{name}` has more than one role")));
            }
        }
        for f in &self.features {
            if f.column.len() != n {
                return Err(Error::Shape(format!("feature `{}` has {} rows, expected {n}", f.name, f.column.len())));
            }
        }
        for g in &self.groups {
            if g.codes.len() != n {
                return Err(Error::Shape(format!("group `{}` has {} rows, expected {n}", g.name, g.codes.len())));
            }
            let seen: HashSet<u8> = g.codes.iter().copied().collect();
            if seen.len() != 2 || !seen.iter().all(|c| *c == 1 || *c == 2) {
                return Err(Error::Cardinality { column: g.name.clone(), levels: seen.len() });
            }
        }
        Ok(())
    }
}

fn parse_label(raw: &str, positive: Option<&str>) -> Result<u8> {
    match positive {
        Some(p) => Ok((raw == p) as u8),
        None => match raw {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::Label(format!(
                "label value `{other}` is not 0 or 1 (set a positive label to map it)"
            ))),
        },
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let position = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("declared column `{name}` not found in header")))
    };
    if schema.groups.is_empty() {
        return Err(Error::Schema("at least one group column is required".into()));
    }
    let label_idx = position(&schema.label)?;
    let group_idx: Vec<usize> = schema.groups.iter().map(|g| position(g)).collect::<Result<_>>()?;
    let feature_names: Vec<String> = if schema.features.is_empty() {
        headers
            .iter()
            .filter(|h| **h != schema.label && !schema.groups.contains(h))
            .cloned()
            .collect()
    } else {
        schema.features.clone()
    };
    let feature_idx: Vec<usize> = feature_names.iter().map(|f| position(f)).collect::<Result<_>>()?;
    if feature_names.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut labels = Vec::new();
    let mut raw_groups: Vec<Vec<String>> = vec![Vec::new(); group_idx.len()];
    let mut raw_features: Vec<Vec<Option<String>>> = vec![Vec::new(); feature_idx.len()];
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record?;
        let label_raw = record.get(label_idx).unwrap_or("");
        let group_raw: Vec<&str> = group_idx.iter().map(|&i| record.get(i).unwrap_or("")).collect();
        if is_missing(label_raw) || group_raw.iter().any(|g| is_missing(g)) {
            dropped += 1;
            continue;
        }
        labels.push(parse_label(label_raw, schema.positive_label.as_deref())?);
        for (dst, g) in raw_groups.iter_mut().zip(&group_raw) {
            dst.push(g.to_string());
        }
        for (dst, &i) in raw_features.iter_mut().zip(&feature_idx) {
            let v = record.get(i).unwrap_or("");
            dst.push((!is_missing(v)).then(|| v.to_string()));
        }
    }

    let mut warnings = Vec::new();
    if dropped > 0 {
        warnings.push(Warning::new("dataset", format!("dropped {dropped} rows with a missing label or group value")));
    }

    let mut groups = Vec::with_capacity(raw_groups.len());
    for (name, raw) in schema.groups.iter().zip(raw_groups) {
        let mut order: Vec<String> = Vec::new();
        for v in &raw {
            if !order.contains(v) {
                order.push(v.clone());
            }
        }
        if order.len() != 2 {
            return Err(Error::Cardinality { column: name.clone(), levels: order.len() });
        }
        let levels = match schema.group_levels.get(name) {
            Some((a, b)) => {
                let wanted: HashSet<&String> = [a, b].into_iter().collect();
                let found: HashSet<&String> = order.iter().collect();
                if wanted != found {
                    return Err(Error::Schema(format!(
                        "group `{name}` levels {order:?} do not match the declared ({a}, {b})"
                    )));
                }
                [a.clone(), b.clone()]
            }
            None => [order[0].clone(), order[1].clone()],
        };
        let codes = raw.iter().map(|v| if *v == levels[0] { 1 } else { 2 }).collect();
        groups.push(GroupColumn { name: name.clone(), levels, codes });
    }

    let features = feature_names
        .into_iter()
        .zip(raw_features)
        .map(|(name, raw)| {
            let numeric_probe = raw.iter().flatten().all(|v| v.parse::<f64>().is_ok())
                && raw.iter().any(|v| v.is_some());
            let kind = schema.kinds.get(&name).copied().unwrap_or(if numeric_probe {
                FeatureKind::Numeric
            } else {
                FeatureKind::Categorical
            });
            let column = match kind {
                FeatureKind::Numeric => Column::Numeric(
                    raw.iter()
                        .map(|v| match v {
                            None => Ok(None),
                            Some(s) => s.parse::<f64>().map(Some).map_err(|_| {
                                Error::Schema(format!("feature `{name}` declared numeric but holds `{s}`"))
                            }),
                        })
                        .collect::<Result<_>>()?,
                ),
                FeatureKind::Categorical => Column::Categorical(raw),
            };
            Ok(Feature { name, column })
        })
        .collect::<Result<Vec<_>>>()?;

    let ds = Dataset {
        features,
        label_column: schema.label.clone(),
        labels,
        groups,
        dropped_rows: dropped,
        warnings,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes features, label (as 0/1) and group levels (original names).
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<&str> = data.features.iter().map(|f| f.name.as_str()).collect();
    header.push(&data.label_column);
    header.extend(data.groups.iter().map(|g| g.name.as_str()));
    w.write_record(&header)?;
    for i in 0..data.row_count() {
        let mut row: Vec<String> = data.features.iter().map(|f| f.column.render(i)).collect();
        row.push(data.labels[i].to_string());
        row.extend(data.groups.iter().map(|g| g.levels[(g.codes[i] - 1) as usize].clone()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPair {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
    pub warnings: Vec<Warning>,
}

/// Seeded split stratified on `(label, first group)`. Every stratum with at
/// least two rows lands in both sides; singleton strata go to train.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Split(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let n = data.row_count();
    if n < 2 {
        return Err(Error::Split(format!("{n} rows cannot fill both splits")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();

    let mut strata: BTreeMap<(u8, u8), Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        strata.entry((data.labels[i], data.groups[0].codes[i])).or_default().push(i);
    }
    for rows in strata.values_mut() {
        rows.shuffle(&mut rng);
    }

    let eligible: Vec<(u8, u8)> = strata.iter().filter(|(_, r)| r.len() >= 2).map(|(k, _)| *k).collect();
    for (key, rows) in &strata {
        if rows.len() == 1 {
            warnings.push(Warning::new(
                "split",
                format!("stratum (label {}, group {}) has a single row; placed in train", key.0, key.1),
            ));
        }
    }

    let (mut train, mut test) = (Vec::new(), Vec::new());
    let stratified = !eligible.is_empty();
    if stratified {
        let lo: usize = eligible.len();
        let hi: usize = eligible.iter().map(|k| strata[k].len() - 1).sum();
        let target = ((n as f64 * test_fraction).round() as usize).clamp(lo, hi);
        let quota: Vec<f64> = eligible.iter().map(|k| strata[k].len() as f64 * test_fraction).collect();
        let mut alloc: Vec<usize> = eligible
            .iter()
            .zip(&quota)
            .map(|(k, q)| (q.floor() as usize).clamp(1, strata[k].len() - 1))
            .collect();
        let mut total: usize = alloc.iter().sum();
        while total < target {
            let j = (0..alloc.len())
                .filter(|&j| alloc[j] < strata[&eligible[j]].len() - 1)
                .max_by(|&a, &b| (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(b.cmp(&a)))
                .expect("target bounded by capacity");
            alloc[j] += 1;
            total += 1;
        }
        while total > target {
            let j = (0..alloc.len())
                .filter(|&j| alloc[j] > 1)
                .min_by(|&a, &b| (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(a.cmp(&b)))
                .expect("target bounded below by stratum count");
            alloc[j] -= 1;
            total -= 1;
        }
        let take: HashMap<(u8, u8), usize> = eligible.iter().copied().zip(alloc).collect();
        for (key, rows) in &strata {
            let k = take.get(key).copied().unwrap_or(0);
            test.extend_from_slice(&rows[..k]);
            train.extend_from_slice(&rows[k..]);
        }
    } else {
        warnings.push(Warning::new("split", "no stratum has two rows; falling back to an unstratified split"));
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        let k = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        test.extend_from_slice(&rows[..k]);
        train.extend_from_slice(&rows[k..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split("split left one side empty".into()));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPair { train, test, seed, stratified, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureEncoding {
    Numeric { mean: f64, std: f64, median: f64 },
    /// One column per category in recorded order.
    Categorical { categories: Vec<String> },
    /// Zero train variance or no observed values: contributes no columns.
    Dropped,
}

/// Encoding constants fitted on the train split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub features: Vec<String>,
    pub encodings: Vec<FeatureEncoding>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedMatrix {
    /// Source row index of each matrix row.
    pub rows: Vec<usize>,
    /// Row-major values.
    pub values: Vec<f64>,
    pub column_names: Vec<String>,
    /// Encoded column to source feature index.
    pub column_map: Vec<usize>,
    /// `(mean, std)` for numeric encoded columns.
    pub standardization: Vec<Option<(f64, f64)>>,
    pub unseen_categories: usize,
}

impl EncodedMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_cols();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols() + j]
    }
}

impl Encoder {
    pub fn fit(data: &Dataset, train: &[usize]) -> (Encoder, Vec<Warning>) {
        let mut warnings = Vec::new();
        let encodings = data
            .features
            .iter()
            .map(|f| match &f.column {
                Column::Numeric(v) => {
                    let mut seen: Vec<f64> = train.iter().filter_map(|&i| v[i]).collect();
                    if seen.is_empty() {
                        warnings.push(Warning::new("encode", format!("numeric `{}` has no train values; dropped", f.name)));
                        return FeatureEncoding::Dropped;
                    }
                    seen.sort_by(f64::total_cmp);
                    let m = seen.len();
                    let median = if m % 2 == 1 { seen[m / 2] } else { 0.5 * (seen[m / 2 - 1] + seen[m / 2]) };
                    let filled: Vec<f64> = train.iter().map(|&i| v[i].unwrap_or(median)).collect();
                    let mean = filled.iter().sum::<f64>() / filled.len() as f64;
                    let var = filled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / filled.len() as f64;
                    let std = var.sqrt();
                    if !(std > 1e-12) {
                        warnings.push(Warning::new("encode", format!("numeric `{}` has zero train variance; dropped", f.name)));
                        FeatureEncoding::Dropped
                    } else {
                        FeatureEncoding::Numeric { mean, std, median }
                    }
                }
                Column::Categorical(v) => {
                    let mut categories: Vec<String> = Vec::new();
                    for &i in train {
                        let c = v[i].as_deref().unwrap_or(MISSING_CATEGORY);
                        if !categories.iter().any(|k| k == c) {
                            categories.push(c.to_string());
                        }
                    }
                    if categories.is_empty() {
                        FeatureEncoding::Dropped
                    } else {
                        FeatureEncoding::Categorical { categories }
                    }
                }
            })
            .collect();
        (Encoder { features: data.feature_names(), encodings }, warnings)
    }

    pub fn transform(&self, data: &Dataset, rows: &[usize]) -> EncodedMatrix {
        let mut column_names = Vec::new();
        let mut column_map = Vec::new();
        let mut standardization = Vec::new();
        for (k, (name, enc)) in self.features.iter().zip(&self.encodings).enumerate() {
            match enc {
                FeatureEncoding::Numeric { mean, std, .. } => {
                    column_names.push(name.clone());
                    column_map.push(k);
                    standardization.push(Some((*mean, *std)));
                }
                FeatureEncoding::Categorical { categories } => {
                    for c in categories {
                        column_names.push(format!("{name}={c}"));
                        column_map.push(k);
                        standardization.push(None);
                    }
                }
                FeatureEncoding::Dropped => {}
            }
        }
        let d = column_names.len();
        let mut values = vec![0.0; rows.len() * d];
        let mut unseen = 0usize;
        for (r, &i) in rows.iter().enumerate() {
            let out = &mut values[r * d..(r + 1) * d];
            let mut j = 0;
            for (f, enc) in data.features.iter().zip(&self.encodings) {
                match (enc, &f.column) {
                    (FeatureEncoding::Numeric { mean, std, median }, Column::Numeric(v)) => {
                        out[j] = (v[i].unwrap_or(*median) - mean) / std;
                        j += 1;
                    }
                    (FeatureEncoding::Categorical { categories }, Column::Categorical(v)) => {
                        let c = v[i].as_deref().unwrap_or(MISSING_CATEGORY);
                        match categories.iter().position(|k| k == c) {
                            Some(p) => out[j + p] = 1.0,
                            None => unseen += 1,
                        }
                        j += categories.len();
                    }
                    (FeatureEncoding::Dropped, _) => {}
                    _ => unreachable!("encoder fitted on a different dataset"),
                }
            }
        }
        EncodedMatrix {
            rows: rows.to_vec(),
            values,
            column_names,
            column_map,
            standardization,
            unseen_categories: unseen,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncodedSplit {
    pub encoder: Encoder,
    pub train: EncodedMatrix,
    pub test: EncodedMatrix,
    pub warnings: Vec<Warning>,
}

pub fn encode(data: &Dataset, split: &SplitPair) -> Result<EncodedSplit> {
    let n = data.row_count();
    if split.train.iter().chain(&split.test).any(|&i| i >= n) {
        return Err(Error::Split("split indexes rows outside the dataset".into()));
    }
    let (encoder, mut warnings) = Encoder::fit(data, &split.train);
    let train = encoder.transform(data, &split.train);
    let test = encoder.transform(data, &split.test);
    if test.unseen_categories > 0 {
        warnings.push(Warning::new(
            "encode",
            format!("{} test values fell in categories unseen during training", test.unseen_categories),
        ));
    }
    Ok(EncodedSplit { encoder, train, test, warnings })
}
