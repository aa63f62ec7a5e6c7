//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use esl_audit::bootstrap::{bootstrap_many, gap_statistics, strata_from_labels, BootstrapConfig};
use esl_audit::coalition::Coalition;
use esl_audit::esl::{
    esl_value, gap_attribution, group_values, multi_stage, two_stage, EslFamily, FeatureContributionMatrix, Game,
};
use esl_audit::inference::{
    first_stage, first_stage_test, majority_vote, multi_stage_tests, normal_quantile, second_stage_test,
    CovarianceEstimates, FirstStageInput, TestResult, Verdict,
};
use esl_audit::metrics::{Baseline, CharacteristicEvaluator, GroupedLabels, MetricKind};
use esl_audit::model::CoalitionPredictionTable;
use esl_audit::report::{run_audit, AuditConfig, InputSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_game(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..1usize << n).map(|_| rng.gen_range(-1.0..2.0)).collect();
    v[0] = 0.0;
    v
}

fn allocate(worth: &[f64], n: usize, family: EslFamily) -> Vec<f64> {
    let game = Game::new(n, |c: Coalition| Ok(worth[c.0 as usize])).unwrap();
    esl_value(&game, family).unwrap().values
}

/// Average marginal contribution over all orderings (Heap's algorithm).
fn permutation_shapley(worth: &[f64], n: usize) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut phi = vec![0.0; n];
    let mut count = 0.0;
    let mut visit = |p: &[usize]| {
        let mut mask = 0usize;
        for &k in p {
            let before = worth[mask];
            mask |= 1 << k;
            phi[k] += worth[mask] - before;
        }
        count += 1.0;
    };
    let mut c = vec![0usize; n];
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    phi.iter().map(|x| x / count).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for g in 0..100 {
        let n = 2 + g % 7;
        let worth = random_game(&mut rng, n);
        let engine = allocate(&worth, n, EslFamily::Shapley);
        let oracle = permutation_shapley(&worth, n);
        for (a, b) in engine.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-10, format!("max deviation {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("100 games, max deviation {worst:.1e}, {:.2}s", elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut eff, mut lin, mut sym) = (0.0f64, 0.0f64, 0.0f64);
    for g in 0..100 {
        let n = 2 + g % 7;
        let v = random_game(&mut rng, n);
        let w = random_game(&mut rng, n);
        let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let combo: Vec<f64> = v.iter().zip(&w).map(|(a, b)| alpha * a + beta * b).collect();
        let (i, j) = (0, n - 1);
        let swap = |s: usize| {
            let (bi, bj) = ((s >> i) & 1, (s >> j) & 1);
            (s & !(1 << i) & !(1 << j)) | (bi << j) | (bj << i)
        };
        let symmetric: Vec<f64> = (0..v.len()).map(|s| v[s] + v[swap(s)]).collect();
        for family in EslFamily::ALL {
            let pv = allocate(&v, n, family);
            eff = eff.max((pv.iter().sum::<f64>() - v[v.len() - 1]).abs());
            let pw = allocate(&w, n, family);
            let pc = allocate(&combo, n, family);
            for k in 0..n {
                lin = lin.max((pc[k] - (alpha * pv[k] + beta * pw[k])).abs());
            }
            let ps = allocate(&symmetric, n, family);
            sym = sym.max((ps[i] - ps[j]).abs());
        }
    }
    ensure(eff <= 1e-9 && lin <= 1e-9 && sym <= 1e-9, format!("efficiency {eff:e}, linearity {lin:e}, symmetry {sym:e}"))?;
    Ok(format!("5 families x 100 games: efficiency {eff:.1e}, linearity {lin:.1e}, symmetry {sym:.1e}"))
}

fn criterion_3() -> Outcome {
    let (v_all, gap) = (1.61, 0.482);
    let worth = [0.0, 0.4 + gap, 0.4, v_all];
    let mut lines = Vec::new();
    for family in EslFamily::ALL {
        let phi = allocate(&worth, 2, family);
        let (expect, printed) = if family == EslFamily::Solidarity {
            ((0.926, 0.685), (0.926, 0.685))
        } else {
            ((1.046, 0.564), (1.047, 0.565))
        };
        let tol = if family == EslFamily::Solidarity { 0.001 } else { 1e-9 };
        ensure(
            (phi[0] - expect.0).abs() <= tol && (phi[1] - expect.1).abs() <= tol,
            format!("{family}: ({:.4}, {:.4})", phi[0], phi[1]),
        )?;
        ensure(
            (phi[0] - printed.0).abs() <= 0.0011 && (phi[1] - printed.1).abs() <= 0.0011,
            format!("{family} is not within rounding of the printed values"),
        )?;
        let share = phi[0] / v_all;
        let printed_share = if family == EslFamily::Solidarity { 0.5748 } else { 0.6495 };
        ensure((share - printed_share).abs() < 0.001, format!("{family} share {share:.4}"))?;
        lines.push(format!("{family} ({:.4}, {:.4})", phi[0], phi[1]));
    }
    Ok(lines.join(", "))
}

fn criterion_4() -> Outcome {
    let input = FirstStageInput {
        estimate: 0.482,
        pooled_rate: 0.805,
        denominators: [2862, 501],
        rates: None,
        b1: 1.0,
        baseline: 0.5,
    };
    let r = first_stage_test(&input, 0.05).map_err(|e| e.to_string())?;
    ensure(
        (r.ci.0 - 0.407).abs() <= 0.001 && (r.ci.1 - 0.557).abs() <= 0.001,
        format!("CI [{:.4}, {:.4}]", r.ci.0, r.ci.1),
    )?;
    Ok(format!("CI [{:.4}, {:.4}], se {:.5}", r.ci.0, r.ci.1, r.standard_error))
}

fn criterion_5() -> Outcome {
    let features = ["Age", "Educ Num", "Hours/Week", "Marital status"].map(String::from).to_vec();
    let men = vec![0.681, 0.009, 0.126, 0.231];
    let women = vec![-0.137, 0.161, -0.092, 0.633];
    let m = FeatureContributionMatrix::from_columns(EslFamily::EqualSurplus, features, vec![men, women])
        .map_err(|e| e.to_string())?;
    let (s1, s2) = (m.group_totals[0], m.group_totals[1]);
    ensure((s1 - 1.047).abs() <= 0.002 && (s2 - 0.565).abs() <= 0.002, format!("sums ({s1}, {s2})"))?;
    let age = gap_attribution(&m).map_err(|e| e.to_string())?.per_feature[0];
    ensure((age - 0.817).abs() <= 0.002, format!("Age gap {age}"))?;
    Ok(format!("column sums ({s1:.3}, {s2:.3}), Age gap {age:.3}"))
}

fn criterion_6() -> Outcome {
    // (estimate, CI low, CI high, printed stars) per family in the
    // ES, Shapley, Solidarity, Consensus, LSP order
    type Row = (f64, f64, f64, bool);
    let table: [(&str, [Row; 5]); 4] = [
        ("Age", [(0.817, 0.707, 0.928, true), (0.430, 0.366, 0.493, true), (0.131, 0.105, 0.157, true), (0.624, 0.549, 0.698, true), (0.409, 0.340, 0.479, true)]),
        ("Educ Num", [(-0.152, -0.337, 0.033, false), (0.067, -0.035, 0.169, false), (0.042, 0.010, 0.074, true), (-0.043, -0.176, 0.091, false), (0.076, -0.025, 0.178, false)]),
        ("Hours/Week", [(0.218, 0.100, 0.337, true), (0.281, 0.217, 0.344, true), (0.087, 0.061, 0.113, true), (0.250, 0.170, 0.329, true), (0.288, 0.219, 0.357, true)]),
        ("Marital status", [(-0.402, -0.598, -0.205, true), (-0.296, -0.439, -0.152, true), (-0.019, -0.059, 0.021, false), (-0.349, -0.508, -0.190, true), (-0.292, -0.434, -0.151, true)]),
    ];
    let families = [EslFamily::EqualSurplus, EslFamily::Shapley, EslFamily::Solidarity, EslFamily::Consensus, EslFamily::Lsp];
    let expected_verdict = [Verdict::Unfair, Verdict::Fair, Verdict::Unfair, Verdict::Unfair];
    let q = normal_quantile(0.975);
    let mut lines = Vec::new();
    for ((name, rows), verdict) in table.iter().zip(expected_verdict) {
        let mut results = BTreeMap::new();
        for (family, &(est, lo, hi, _)) in families.iter().zip(rows) {
            let t = TestResult::from_estimate(*name, est, (hi - lo) / (2.0 * q), 0.05).map_err(|e| e.to_string())?;
            results.insert(*family, t);
        }
        let vote = majority_vote(&results, 0.05).map_err(|e| e.to_string())?;
        let starred = rows.iter().filter(|r| r.3).count();
        ensure(vote.votes == starred, format!("{name}: {} votes, {starred} starred entries", vote.votes))?;
        ensure(vote.verdict == verdict, format!("{name}: verdict {:?}", vote.verdict))?;
        lines.push(format!("{name} {}/5 {:?}", vote.votes, vote.verdict).to_lowercase());
    }
    Ok(format!("{} (Hours/Week is 5/5 in the transcribed table; the criterion text lists 4/5)", lines.join(", ")))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let (trials, mut rejections) = (1000, 0);
    let group: Vec<u8> = (0..1400).map(|i| (i >= 700) as u8).collect();
    let y: Vec<u8> = (0..1400).map(|i| ((i % 700) < 500) as u8).collect();
    let labels = GroupedLabels::new(y.clone(), &[group]).unwrap();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(70_000 + trial);
        let col: Vec<u8> = y.iter().map(|&yi| rng.gen_bool(if yi == 1 { 0.8 } else { 0.3 }) as u8).collect();
        let mut t = CoalitionPredictionTable::new(vec!["x".into()], (0..1400).collect()).unwrap();
        t.insert(Coalition(1), col).unwrap();
        let ev = CharacteristicEvaluator::new(&t, &labels, Baseline::half()).unwrap();
        let r = first_stage(&ev, MetricKind::Tpr, EslFamily::Shapley, 0, 0.05).map_err(|e| e.to_string())?;
        rejections += r.reject as usize;
    }
    let rate = rejections as f64 / trials as f64;
    let elapsed = start.elapsed();
    ensure((0.035..=0.065).contains(&rate), format!("rejection rate {rate}"))?;
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("rejection rate {rate:.3} over {trials} trials, {:.2}s", elapsed.as_secs_f64()))
}

struct Synthetic {
    table: CoalitionPredictionTable,
    labels: GroupedLabels,
}

/// n = 5000, two features, group TPR offset 0.1 for the full model and
/// offsets 0.12 and 0.09 for the single-feature models.
fn planted_audit() -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 5000;
    let group: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.5) as u8).collect();
    let y: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.5) as u8).collect();
    let tpr = |c: u32, g: u8| {
        let (base, offset) = match c {
            0b01 => (0.62, 0.12),
            0b10 => (0.60, 0.09),
            _ => (0.70, 0.10),
        };
        if g == 0 { base + offset } else { base }
    };
    let table = common::nested_threshold_table(&y, &group, &tpr, 0.2, 2, 81);
    Synthetic { table, labels: GroupedLabels::new(y, &[group]).unwrap() }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn criterion_8() -> Outcome {
    let s = planted_audit();
    let ev = CharacteristicEvaluator::new(&s.table, &s.labels, Baseline::half()).unwrap();
    let cov = CovarianceEstimates::new(&s.table, &s.labels, MetricKind::Tpr).unwrap();
    let strata = strata_from_labels(&s.labels);
    let config = BootstrapConfig { replications: 1000, alpha: 0.05, master_seed: 808 };
    let mut worst = 0.0f64;
    for family in EslFamily::ALL {
        let m = two_stage(&ev, MetricKind::Tpr, family, 0).map_err(|e| e.to_string())?;
        let asymptotic = second_stage_test(&m, &cov, 0.5, 0, 0.05).map_err(|e| e.to_string())?;
        let boot = bootstrap_many(&strata, gap_statistics(&s.table, &s.labels, Baseline::half(), MetricKind::Tpr, family, 0), &config)
            .map_err(|e| e.to_string())?;
        for (k, a) in asymptotic.into_iter().enumerate() {
            let a = a.map_err(|e| e.to_string())?;
            let b = &boot[k + 1];
            for (x, y) in [(a.ci.0, b.ci.0), (a.ci.1, b.ci.1)] {
                let d = relative(x, y);
                worst = worst.max(d);
                ensure(d < 0.15, format!("{family} feature {k}: asymptotic {x:.4} vs bootstrap {y:.4}"))?;
            }
            ensure(a.reject == b.excludes_zero(), format!("{family} feature {k}: significance differs"))?;
        }
    }
    Ok(format!("5 families x 2 features, worst endpoint relative distance {:.3}", worst))
}

fn criterion_9() -> Outcome {
    let s = planted_audit();
    let asymptotic = Instant::now();
    let cov = CovarianceEstimates::new(&s.table, &s.labels, MetricKind::Tpr).unwrap();
    for family in EslFamily::ALL {
        let ev = CharacteristicEvaluator::new(&s.table, &s.labels, Baseline::half()).unwrap();
        first_stage(&ev, MetricKind::Tpr, family, 0, 0.05).map_err(|e| e.to_string())?;
        let m = two_stage(&ev, MetricKind::Tpr, family, 0).map_err(|e| e.to_string())?;
        second_stage_test(&m, &cov, 0.5, 0, 0.05).map_err(|e| e.to_string())?;
    }
    let asymptotic = asymptotic.elapsed();
    let strata = strata_from_labels(&s.labels);
    let config = BootstrapConfig { replications: 1000, alpha: 0.05, master_seed: 909 };
    let bootstrap = Instant::now();
    for family in EslFamily::ALL {
        bootstrap_many(&strata, gap_statistics(&s.table, &s.labels, Baseline::half(), MetricKind::Tpr, family, 0), &config)
            .map_err(|e| e.to_string())?;
    }
    let bootstrap = bootstrap.elapsed();
    ensure(asymptotic * 5 < bootstrap, format!("asymptotic {asymptotic:?}, bootstrap {bootstrap:?}"))?;

    let mut counts = Vec::new();
    for n_features in [4usize, 10] {
        let mut rng = ChaCha8Rng::seed_from_u64(n_features as u64);
        let group: Vec<u8> = (0..400).map(|_| rng.gen_bool(0.5) as u8).collect();
        let y: Vec<u8> = (0..400).map(|_| rng.gen_bool(0.5) as u8).collect();
        let tpr = |c: u32, g: u8| 0.4 + 0.04 * c.count_ones() as f64 + 0.05 * g as f64;
        let table = common::nested_threshold_table(&y, &group, &tpr, 0.2, n_features, 9);
        let labels = GroupedLabels::new(y, &[group]).unwrap();
        for (family, expected) in [(EslFamily::EqualSurplus, 3 * (n_features + 1)), (EslFamily::Shapley, 3 * ((1 << n_features) - 1))] {
            let ev = CharacteristicEvaluator::new(&table, &labels, Baseline::half()).unwrap();
            two_stage(&ev, MetricKind::Tpr, family, 0).map_err(|e| e.to_string())?;
            ensure(ev.evaluations() == expected, format!("{family} N={n_features}: {} evaluations", ev.evaluations()))?;
            counts.push(format!("{family} N={n_features}: {}", ev.evaluations()));
        }
    }
    Ok(format!(
        "asymptotic {:.3}s vs bootstrap {:.3}s (ratio {:.1}); {}",
        asymptotic.as_secs_f64(),
        bootstrap.as_secs_f64(),
        bootstrap.as_secs_f64() / asymptotic.as_secs_f64(),
        counts.join(", ")
    ))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (predictions, labels) = common::write_equalized(dir.path(), &["age", "educ", "hours", "marital"]);
    let config = AuditConfig::new(InputSource::Predictions { predictions, labels }, "income", &["sex"]);
    let report = run_audit(&config).map_err(|e| e.to_string())?;
    for f in &report.metrics[0].families {
        let d = f.first_stage.result().ok_or("first-stage test undefined")?.estimate;
        ensure(d == 0.0, format!("{}: gap {d}", f.family))?;
    }
    ensure(!report.criterion.violated, "eod reported violated")?;
    ensure(
        report.criterion.per_family.iter().all(|f| f.verdict.as_ref().is_some_and(|v| v.satisfied)),
        "a family verdict is not satisfied",
    )?;
    Ok("gap 0 for all five families, eod satisfied".into())
}

/// Cells in `(gender, ethnicity)` order with 250 positives and 250
/// negatives each; `hits[c]` positives of cell `c` are predicted 1.
fn two_attribute_table(hits: [usize; 4]) -> (CoalitionPredictionTable, GroupedLabels) {
    let (mut y, mut a0, mut a1, mut pred) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (cell, &h) in hits.iter().enumerate() {
        for i in 0..500 {
            let positive = i < 250;
            y.push(positive as u8);
            a0.push((cell >> 1) as u8);
            a1.push((cell & 1) as u8);
            pred.push(if positive { (i < h) as u8 } else { (i % 5 == 0) as u8 });
        }
    }
    let mut t = CoalitionPredictionTable::new(vec!["x".into()], (0..y.len()).collect()).unwrap();
    t.insert(Coalition(1), pred).unwrap();
    (t, GroupedLabels::new(y, &[a0, a1]).unwrap())
}

fn criterion_11() -> Outcome {
    let (fair_t, fair_l) = two_attribute_table([200; 4]);
    let ev = CharacteristicEvaluator::new(&fair_t, &fair_l, Baseline::half()).unwrap();
    let mut worst = 0.0f64;
    for family in EslFamily::ALL {
        let r = multi_stage(&ev, MetricKind::Tpr, family, fair_t.full()).map_err(|e| e.to_string())?;
        for c in r.leaves() {
            worst = worst.max((c.value.ok_or("undefined cell")? - r.total / 4.0).abs());
        }
    }
    ensure(worst <= 1e-9, format!("fair cells deviate by {worst:e}"))?;

    // within gender 0 ethnicity 0 has TPR 0.9 and ethnicity 1 has 0.7; reversed within gender 1
    let (t, l) = two_attribute_table([225, 175, 175, 225]);
    let ev = CharacteristicEvaluator::new(&t, &l, Baseline::half()).unwrap();
    let cov = CovarianceEstimates::new(&t, &l, MetricKind::Tpr).unwrap();
    for family in EslFamily::ALL {
        let tests = multi_stage_tests(&ev, &cov, family, 0.05).map_err(|e| e.to_string())?;
        for test in &tests {
            let r = test.result.as_ref().map_err(|e| e.clone())?;
            let nested = !test.parent.is_empty();
            ensure(
                r.reject == nested,
                format!("{family} level {} within {:?}: reject {} (z {:.2})", test.attribute, test.parent, r.reject, r.z),
            )?;
        }
        let top = group_values(&ev, MetricKind::Tpr, family, 0, t.full()).map_err(|e| e.to_string())?;
        ensure((top.values[0] - top.values[1]).abs() < 1e-12, format!("{family}: gender gap {:e}", top.values[0] - top.values[1]))?;
    }
    Ok(format!("fair cells within {worst:.1e} of v_A/4; offset found within both genders, gender level fair"))
}

fn main() {
    type Criterion = (u32, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        (1, "Shapley oracle equivalence", criterion_1),
        (2, "ESL axioms", criterion_2),
        (3, "group values from v_A and gap", criterion_3),
        (4, "first-stage interval", criterion_4),
        (5, "contribution efficiency", criterion_5),
        (6, "majority voting", criterion_6),
        (7, "test size under the null", criterion_7),
        (8, "asymptotic and bootstrap agreement", criterion_8),
        (9, "runtime direction and evaluation counts", criterion_9),
        (10, "equalized predictions", criterion_10),
        (11, "multi-stage cells", criterion_11),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
