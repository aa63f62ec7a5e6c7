//! Asymptotic Z tests for group values and feature contributions, criterion
//! verdicts and majority voting across ESL families.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::coalition::Coalition;
use crate::error::{Error, Result};
use crate::esl::{
    cell_form, group_linear_weights, group_values, player_weights, support, EslFamily, FeatureContributionMatrix,
};
use crate::metrics::{CharacteristicEvaluator, GroupedLabels, MetricKind};
use crate::model::CoalitionPredictionTable;

/// Tolerance below zero within which an assembled variance is clamped.
pub const VARIANCE_CLAMP: f64 = 1e-9;

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// `2 (1 - Phi(|z|))`, evaluated without cancellation.
pub fn two_sided_p(z: f64) -> f64 {
    if z == 0.0 { 1.0 } else { erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub hypothesis: String,
    pub estimate: f64,
    pub standard_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    pub reject: bool,
    /// Per-group (unpooled) standard error and interval, where computed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unpooled_standard_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unpooled_ci: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} must lie in (0, 1)")))
    }
}

impl TestResult {
    /// Z test of `estimate = 0` with standard error `se`.
    pub fn from_estimate(hypothesis: impl Into<String>, estimate: f64, se: f64, alpha: f64) -> Result<TestResult> {
        check_alpha(alpha)?;
        let hypothesis = hypothesis.into();
        if !estimate.is_finite() || !se.is_finite() || se < 0.0 {
            return Err(Error::UndefinedTest(format!("{hypothesis}: estimate {estimate}, standard error {se}")));
        }
        let q = normal_quantile(1.0 - alpha / 2.0);
        let z = if se > 0.0 {
            estimate / se
        } else if estimate == 0.0 {
            0.0
        } else {
            return Err(Error::DegenerateVariance(format!(
                "{hypothesis}: zero standard error with non-zero estimate {estimate}"
            )));
        };
        let ci = (estimate - q * se, estimate + q * se);
        Ok(TestResult {
            hypothesis,
            estimate,
            standard_error: se,
            z,
            p_value: two_sided_p(z),
            ci,
            alpha,
            reject: !(ci.0 <= 0.0 && 0.0 <= ci.1),
            unpooled_standard_error: None,
            unpooled_ci: None,
            note: None,
        })
    }

    /// Rejection at an arbitrary level.
    pub fn rejects_at(&self, alpha: f64) -> bool {
        if (alpha - self.alpha).abs() < f64::EPSILON {
            self.reject
        } else {
            self.p_value < alpha
        }
    }

    pub fn stars(&self) -> &'static str {
        match self.p_value {
            p if p < 0.001 => "***",
            p if p < 0.01 => "**",
            p if p < 0.05 => "*",
            _ => "",
        }
    }
}

/// Inputs of the group-value difference test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStageInput {
    /// `phi_1 - phi_2`.
    pub estimate: f64,
    /// Metric on the pooled groups.
    pub pooled_rate: f64,
    /// Each group's metric denominator.
    pub denominators: [u64; 2],
    /// Per-group metric values, for the unpooled interval.
    pub rates: Option<[f64; 2]>,
    pub b1: f64,
    pub baseline: f64,
}

/// `Z = D / se` with `se = (b1 / baseline) sqrt(p(1-p)(1/n_1 + 1/n_2))` at the
/// pooled rate `p`. At baseline 1/2 this is `sqrt(4 b1^2 p(1-p)(...))`.
pub fn first_stage_test(input: &FirstStageInput, alpha: f64) -> Result<TestResult> {
    let [n1, n2] = input.denominators;
    if n1 == 0 || n2 == 0 {
        return Err(Error::UndefinedTest(format!("group metric denominators are ({n1}, {n2})")));
    }
    let p = input.pooled_rate;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::DegenerateVariance(format!("pooled rate {p} leaves no sampling variance")));
    }
    let scale = input.b1 / input.baseline;
    let inv = 1.0 / n1 as f64 + 1.0 / n2 as f64;
    let se = scale.abs() * (p * (1.0 - p) * inv).sqrt();
    let mut result = TestResult::from_estimate("phi_1 - phi_2", input.estimate, se, alpha)?;
    if let Some([p1, p2]) = input.rates {
        let var = p1 * (1.0 - p1) / n1 as f64 + p2 * (1.0 - p2) / n2 as f64;
        let se_u = scale.abs() * var.sqrt();
        let q = normal_quantile(1.0 - alpha / 2.0);
        result.unpooled_standard_error = Some(se_u);
        result.unpooled_ci = Some((input.estimate - q * se_u, input.estimate + q * se_u));
    }
    Ok(result)
}

/// Builds the test inputs for levels of `attribute` from an evaluator and
/// runs the test.
pub fn first_stage(
    ev: &CharacteristicEvaluator<'_>,
    kind: MetricKind,
    family: EslFamily,
    attribute: usize,
    alpha: f64,
) -> Result<TestResult> {
    let full = ev.table().full();
    let alloc = group_values(ev, kind, family, attribute, full)?;
    let labels = ev.labels();
    let m1 = labels.attribute_mask(attribute, Coalition(0b01));
    let m2 = labels.attribute_mask(attribute, Coalition(0b10));
    let c1 = ev.counts(m1, full)?;
    let c2 = ev.counts(m2, full)?;
    let (num1, den1) = c1.fraction(kind);
    let (num2, den2) = c2.fraction(kind);
    let pooled = ev.metric(m1 | m2, full, kind).map_err(|_| {
        Error::UndefinedTest(format!("{kind} is undefined on the pooled groups"))
    })?;
    let rates = (den1 > 0 && den2 > 0).then(|| [num1 as f64 / den1 as f64, num2 as f64 / den2 as f64]);
    let input = FirstStageInput {
        estimate: alloc.values[0] - alloc.values[1],
        pooled_rate: pooled,
        denominators: [den1, den2],
        rates,
        b1: family.coefficient(1, 2),
        baseline: ev.baseline(),
    };
    let mut r = first_stage_test(&input, alpha)?;
    r.hypothesis = format!("{family} {kind}: phi_1 = phi_2");
    Ok(r)
}

/// A metric rate on a union of atomic cells for one feature coalition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Leaf {
    pub cells: u32,
    pub features: Coalition,
}

/// Sparse coefficients on leaf rates.
pub type LinearWeights = Vec<(Leaf, f64)>;

#[derive(Clone, Copy, Debug)]
struct LeafStat {
    rate: f64,
    denominator: f64,
}

/// Plug-in covariances of leaf rates under sampling stratified by
/// `(cell, label)`. Cells are independent, so rates on disjoint cell sets
/// never covary; within a cell the covariance is the centred cross-product
/// of the ratio residuals `a_i - p d_i`.
pub struct CovarianceEstimates<'a> {
    pub kind: MetricKind,
    table: &'a CoalitionPredictionTable,
    labels: &'a GroupedLabels,
    strata_sizes: Vec<usize>,
    stats: RwLock<HashMap<Leaf, LeafStat>>,
}

impl<'a> CovarianceEstimates<'a> {
    pub fn new(table: &'a CoalitionPredictionTable, labels: &'a GroupedLabels, kind: MetricKind) -> Result<Self> {
        if table.instances() != labels.len() {
            return Err(Error::Shape("prediction table and labels differ in length".into()));
        }
        let mut strata_sizes = vec![0usize; labels.strata()];
        for i in 0..labels.len() {
            strata_sizes[labels.stratum(i)] += 1;
        }
        Ok(CovarianceEstimates { kind, table, labels, strata_sizes, stats: RwLock::new(HashMap::new()) })
    }

    fn stat(&self, leaf: Leaf) -> Result<LeafStat> {
        if let Some(s) = self.stats.read().expect("stats poisoned").get(&leaf) {
            return Ok(*s);
        }
        let y_hat = self.table.get(leaf.features)?;
        let (mut num, mut den) = (0u64, 0u64);
        for (i, &p) in y_hat.iter().enumerate() {
            if leaf.cells & (1 << self.labels.cell[i]) != 0 {
                let (d, a) = self.kind.indicators(self.labels.y[i], p);
                den += d as u64;
                num += a as u64;
            }
        }
        if den == 0 {
            return Err(Error::UndefinedMetric {
                kind: self.kind,
                context: format!("cells {:#b}, features [{}]", leaf.cells, leaf.features.label(self.table.universe())),
            });
        }
        let s = LeafStat { rate: num as f64 / den as f64, denominator: den as f64 };
        self.stats.write().expect("stats poisoned").insert(leaf, s);
        Ok(s)
    }

    pub fn rate(&self, leaf: Leaf) -> Result<f64> {
        Ok(self.stat(leaf)?.rate)
    }

    /// Per-row influence of `rate(leaf)`, centred within each stratum.
    fn residual_into(&self, leaf: Leaf, coef: f64, out: &mut [f64], sums: &mut [f64]) -> Result<()> {
        let s = self.stat(leaf)?;
        let y_hat = self.table.get(leaf.features)?;
        sums.iter_mut().for_each(|v| *v = 0.0);
        let mut raw = vec![0.0; self.labels.len()];
        for i in 0..self.labels.len() {
            if leaf.cells & (1 << self.labels.cell[i]) != 0 {
                let (d, a) = self.kind.indicators(self.labels.y[i], y_hat[i]);
                let x = (a as u8 as f64 - s.rate * d as u8 as f64) / s.denominator;
                raw[i] = x;
                sums[self.labels.stratum(i)] += x;
            }
        }
        for (i, x) in raw.into_iter().enumerate() {
            let st = self.labels.stratum(i);
            out[i] += coef * (x - sums[st] / self.strata_sizes[st] as f64);
        }
        Ok(())
    }

    /// Influence vectors for several linear combinations at once.
    pub fn influences(&self, lambdas: &[&LinearWeights]) -> Result<Vec<Vec<f64>>> {
        let n = self.labels.len();
        let mut out = vec![vec![0.0; n]; lambdas.len()];
        let mut sums = vec![0.0; self.labels.strata()];
        for (j, lambda) in lambdas.iter().enumerate() {
            for &(leaf, coef) in lambda.iter() {
                if coef != 0.0 {
                    self.residual_into(leaf, coef, &mut out[j], &mut sums)?;
                }
            }
        }
        Ok(out)
    }

    /// `lambda_a' Sigma lambda_b`.
    pub fn quadratic_form(&self, a: &LinearWeights, b: &LinearWeights) -> Result<f64> {
        let psi = self.influences(&[a, b])?;
        Ok(dot(&psi[0], &psi[1]))
    }

    pub fn covariance(&self, a: Leaf, b: Leaf) -> Result<f64> {
        self.quadratic_form(&vec![(a, 1.0)], &vec![(b, 1.0)])
    }

    /// Joint frequency of the numerator events of two coalitions among rows
    /// of `cells` that enter the denominator of both.
    pub fn joint_probability(&self, cells: u32, s: Coalition, t: Coalition) -> Result<f64> {
        let (ps, pt) = (self.table.get(s)?, self.table.get(t)?);
        let (mut both, mut den) = (0u64, 0u64);
        for i in 0..self.labels.len() {
            if cells & (1 << self.labels.cell[i]) == 0 {
                continue;
            }
            let (ds, a_s) = self.kind.indicators(self.labels.y[i], ps[i]);
            let (dt, a_t) = self.kind.indicators(self.labels.y[i], pt[i]);
            if ds && dt {
                den += 1;
                both += (a_s && a_t) as u64;
            }
        }
        if den == 0 {
            return Err(Error::UndefinedMetric { kind: self.kind, context: format!("cells {cells:#b}") });
        }
        Ok(both as f64 / den as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Coefficients of `C^k_g` on the leaf rates for the levels of `attribute`.
pub fn contribution_weights(
    labels: &GroupedLabels,
    family: EslFamily,
    n_features: usize,
    feature: usize,
    group: usize,
    attribute: usize,
    baseline: f64,
) -> LinearWeights {
    let groups = &group_linear_weights(family)[group];
    let mut out = Vec::new();
    for (s, wf) in player_weights(family, n_features, feature) {
        for &(t, wg) in groups {
            out.push((Leaf { cells: labels.attribute_mask(attribute, t), features: s }, wf * wg / baseline));
        }
    }
    out
}

/// Coefficients of `C^k_1 - C^k_2` written directly through group rates;
/// the pooled terms cancel.
pub fn gap_weights(
    labels: &GroupedLabels,
    family: EslFamily,
    n_features: usize,
    feature: usize,
    attribute: usize,
    baseline: f64,
) -> LinearWeights {
    let scale = family.coefficient(1, 2) / baseline;
    let m1 = labels.attribute_mask(attribute, Coalition(0b01));
    let m2 = labels.attribute_mask(attribute, Coalition(0b10));
    let mut out = Vec::new();
    for (s, w) in player_weights(family, n_features, feature) {
        out.push((Leaf { cells: m1, features: s }, w * scale));
        out.push((Leaf { cells: m2, features: s }, -w * scale));
    }
    out
}

fn clamp_variance(v: f64, what: &str) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -VARIANCE_CLAMP {
        Ok(0.0)
    } else {
        Err(Error::NumericalConsistency(format!("{what}: assembled variance {v:e} is negative")))
    }
}

/// Marks tests on metrics whose denominators depend on the predictions.
pub fn extrapolation_note(kind: MetricKind) -> Option<String> {
    (!kind.has_fixed_denominator())
        .then(|| "appendix-extrapolated: covariance recipe extended to prediction-dependent denominators".to_string())
}

/// One contribution-gap test per feature. Entries are `Err` when that
/// feature's hypothesis is undefined.
pub fn second_stage_test(
    matrix: &FeatureContributionMatrix,
    cov: &CovarianceEstimates<'_>,
    baseline: f64,
    attribute: usize,
    alpha: f64,
) -> Result<Vec<Result<TestResult>>> {
    check_alpha(alpha)?;
    if matrix.values.len() != 2 {
        return Err(Error::Shape("second-stage tests need exactly two groups".into()));
    }
    let family = matrix.family;
    let n = matrix.features.len();
    cov.table.require(&support(family, n))?;
    let labels = cov.labels;
    Ok((0..n)
        .map(|k| {
            let name = &matrix.features[k];
            let l1 = contribution_weights(labels, family, n, k, 0, attribute, baseline);
            let l2 = contribution_weights(labels, family, n, k, 1, attribute, baseline);
            let ld = gap_weights(labels, family, n, k, attribute, baseline);
            let psi = cov.influences(&[&l1, &l2, &ld])?;
            let (v1, v2, c12) = (dot(&psi[0], &psi[0]), dot(&psi[1], &psi[1]), dot(&psi[0], &psi[1]));
            let assembled = v1 + v2 - 2.0 * c12;
            let direct = dot(&psi[2], &psi[2]);
            if (assembled - direct).abs() > 1e-9 * (1.0 + direct.abs()) {
                return Err(Error::NumericalConsistency(format!(
                    "feature `{name}`: variance {assembled:e} disagrees with the gap form {direct:e}"
                )));
            }
            let var = clamp_variance(assembled, name)?;
            let estimate = matrix.values[0][k] - matrix.values[1][k];
            let mut r = TestResult::from_estimate(
                format!("{family} {}: C_1 = C_2 for `{name}`", cov.kind),
                estimate,
                var.sqrt(),
                alpha,
            )?;
            r.note = extrapolation_note(cov.kind);
            Ok(r)
        })
        .collect())
}

/// Sibling tests at every nesting level: within each parent cell, the
/// difference of its two children, with a plug-in standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTest {
    /// Levels of the enclosing cell (empty at the top level).
    pub parent: Vec<u8>,
    pub attribute: usize,
    pub result: std::result::Result<TestResult, String>,
}

pub fn multi_stage_tests(
    ev: &CharacteristicEvaluator<'_>,
    cov: &CovarianceEstimates<'_>,
    family: EslFamily,
    alpha: f64,
) -> Result<Vec<CellTest>> {
    let attributes = ev.labels().attributes;
    let full = ev.table().full();
    let baseline = ev.baseline();
    let mut out = Vec::new();
    for depth in 0..attributes {
        for code in 0..1u32 << depth {
            let parent: Vec<u8> = (0..depth).map(|j| ((code >> (depth - 1 - j)) & 1) as u8).collect();
            let mut p0 = parent.clone();
            p0.push(0);
            let mut p1 = parent.clone();
            p1.push(1);
            let mut lambda: BTreeMap<Leaf, f64> = BTreeMap::new();
            for (mask, w) in cell_form(family, attributes, &p0) {
                *lambda.entry(Leaf { cells: mask, features: full }).or_insert(0.0) += w / baseline;
            }
            for (mask, w) in cell_form(family, attributes, &p1) {
                *lambda.entry(Leaf { cells: mask, features: full }).or_insert(0.0) -= w / baseline;
            }
            let lambda: LinearWeights = lambda.into_iter().collect();
            let result = (|| {
                let estimate = lambda.iter().try_fold(0.0, |acc, &(leaf, w)| Ok::<f64, Error>(acc + w * cov.rate(leaf)?))?;
                let var = clamp_variance(cov.quadratic_form(&lambda, &lambda)?, "cell difference")?;
                let label = if parent.is_empty() {
                    format!("{family} {}: attribute {depth} levels equal", cov.kind)
                } else {
                    format!("{family} {}: attribute {depth} levels equal within {:?}", cov.kind, parent)
                };
                TestResult::from_estimate(label, estimate, var.sqrt(), alpha)
            })();
            let result = match result {
                Ok(r) => Ok(r),
                Err(e) if e.is_hypothesis_level() => Err(e.to_string()),
                Err(e) => return Err(e),
            };
            out.push(CellTest { parent, attribute: depth, result });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Independence,
    Separation,
    Sufficiency,
    Eod,
}

impl Criterion {
    pub fn metrics(self) -> &'static [MetricKind] {
        match self {
            Criterion::Independence => &[MetricKind::Sr],
            Criterion::Separation => &[MetricKind::Tpr, MetricKind::Fpr],
            Criterion::Sufficiency => &[MetricKind::Ppv, MetricKind::Npv],
            Criterion::Eod => &[MetricKind::Tpr],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Independence => "independence",
            Criterion::Separation => "separation",
            Criterion::Sufficiency => "sufficiency",
            Criterion::Eod => "eod",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "independence" => Ok(Criterion::Independence),
            "separation" => Ok(Criterion::Separation),
            "sufficiency" => Ok(Criterion::Sufficiency),
            "eod" => Ok(Criterion::Eod),
            other => Err(Error::Config(format!("unknown criterion `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionVerdict {
    pub criterion: Criterion,
    pub satisfied: bool,
    pub violated_by: Vec<MetricKind>,
    pub alpha: f64,
}

/// Satisfied iff no constituent test rejects at `alpha`.
pub fn criterion_verdict(
    results: &BTreeMap<MetricKind, TestResult>,
    criterion: Criterion,
    alpha: f64,
) -> Result<CriterionVerdict> {
    check_alpha(alpha)?;
    let mut violated_by = Vec::new();
    for &kind in criterion.metrics() {
        let r = results.get(&kind).ok_or_else(|| {
            Error::IncompleteCriterion(format!("{criterion} needs a {kind} result"))
        })?;
        if r.rejects_at(alpha) {
            violated_by.push(kind);
        }
    }
    Ok(CriterionVerdict { criterion, satisfied: violated_by.is_empty(), violated_by, alpha })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Fair,
    Unfair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteVerdict {
    pub rejections: BTreeMap<EslFamily, bool>,
    pub votes: usize,
    pub threshold: usize,
    pub verdict: Verdict,
}

pub const VOTE_THRESHOLD: usize = 3;

/// Unfair iff at least three of the five families reject.
pub fn majority_vote(results: &BTreeMap<EslFamily, TestResult>, alpha: f64) -> Result<VoteVerdict> {
    check_alpha(alpha)?;
    let mut rejections = BTreeMap::new();
    for family in EslFamily::ALL {
        let r = results
            .get(&family)
            .ok_or_else(|| Error::IncompleteVote(format!("no result for {family}")))?;
        rejections.insert(family, r.rejects_at(alpha));
    }
    let votes = rejections.values().filter(|&&r| r).count();
    let verdict = if votes >= VOTE_THRESHOLD { Verdict::Unfair } else { Verdict::Fair };
    Ok(VoteVerdict { rejections, votes, threshold: VOTE_THRESHOLD, verdict })
}
