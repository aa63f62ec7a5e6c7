#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use esl_audit::coalition::non_empty_subsets;
use esl_audit::model::CoalitionPredictionTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Four-feature table where `hours` and `age` carry most of the signal and
/// the `sex = M` rows get a higher score.
pub fn write_census_like(dir: &Path, rows: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("age,educ,hours,marital,sex,income\n");
    for _ in 0..rows {
        let male = rng.gen_bool(0.6);
        let age: f64 = rng.gen_range(18.0..70.0);
        let educ: u32 = rng.gen_range(6..17);
        let hours: f64 = rng.gen_range(10.0..60.0) + if male { 6.0 } else { 0.0 };
        let married = rng.gen_bool(if male { 0.6 } else { 0.35 });
        let score = 0.04 * (age - 40.0) + 0.2 * (educ as f64 - 10.0) + 0.06 * (hours - 38.0)
            + if married { 0.8 } else { -0.4 }
            + rng.gen_range(-1.5..1.5);
        let y = if score > 0.0 { ">50K" } else { "<=50K" };
        let marital = if married { "married" } else { "single" };
        let sex = if male { "M" } else { "F" };
        writeln!(out, "{age:.1},{educ},{hours:.1},{marital},{sex},{y}").unwrap();
    }
    let path = dir.join("census_like.csv");
    std::fs::write(&path, out).unwrap();
    path
}

/// Predictions for every coalition plus a labels file in which both groups
/// have exactly the same true positive rate for every coalition.
pub fn write_equalized(dir: &Path, features: &[&str]) -> (PathBuf, PathBuf) {
    // group 1: 300 positives, 200 negatives; group 2: 150 positives, 250 negatives
    let mut rows = Vec::new();
    for (g, pos, neg) in [("M", 300usize, 200usize), ("F", 150, 250)] {
        for i in 0..pos {
            rows.push((g, 1u8, i, pos));
        }
        for i in 0..neg {
            rows.push((g, 0u8, i, neg));
        }
    }
    let n = features.len();
    let names: Vec<String> = features.iter().map(|s| s.to_string()).collect();
    let mut preds = String::from("coalition,row_id,y_hat\n");
    for c in non_empty_subsets(n) {
        let tpr = 0.5 + 0.4 * c.len() as f64 / n as f64;
        let fpr = 0.3 - 0.05 * c.len() as f64 / n as f64;
        let label = c.label(&names);
        // the first round(rate * 150) of every 150 rows are predicted positive
        let hits = |rate: f64, i: usize| i % 150 < (rate * 150.0).round() as usize;
        for (id, (_, y, i, _)) in rows.iter().enumerate() {
            let yhat = if *y == 1 { hits(tpr, *i) } else { hits(fpr, *i) };
            writeln!(preds, "{label},{id},{}", yhat as u8).unwrap();
        }
    }
    let mut labels = String::from("row_id,income,sex\n");
    for (id, (g, y, _, _)) in rows.iter().enumerate() {
        writeln!(labels, "{id},{y},{g}").unwrap();
    }
    let (p, l) = (dir.join("predictions.csv"), dir.join("labels.csv"));
    std::fs::write(&p, preds).unwrap();
    std::fs::write(&l, labels).unwrap();
    (p, l)
}

/// Two-feature table with latent uniforms shared across coalitions:
/// `y_hat_S = [u < tpr_g(S)]` for positives and `[u < fpr]` for negatives.
pub fn nested_threshold_table(
    y: &[u8],
    group: &[u8],
    tpr: &dyn Fn(u32, u8) -> f64,
    fpr: f64,
    n_features: usize,
    seed: u64,
) -> CoalitionPredictionTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = y.iter().map(|_| rng.gen()).collect();
    let names = (0..n_features).map(|k| format!("x{}", k + 1)).collect();
    let mut t = CoalitionPredictionTable::new(names, (0..y.len()).collect()).unwrap();
    for c in non_empty_subsets(n_features) {
        let col = (0..y.len())
            .map(|i| (u[i] < if y[i] == 1 { tpr(c.0, group[i]) } else { fpr }) as u8)
            .collect();
        t.insert(c, col).unwrap();
    }
    t
}
