//! Audit configuration, orchestration across stages, and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bootstrap::{bootstrap_many, gap_statistics, strata_from_labels, BootstrapConfig, BootstrapResult};
use crate::coalition::MAX_PLAYERS;
use crate::dataset::{encode, load_csv, split, Schema, Warning};
use crate::error::{Error, Result};
use crate::esl::{group_values, multi_stage, two_stage, EslFamily, MultiStageResult, EFFICIENCY_TOL};
use crate::inference::{
    criterion_verdict, first_stage, majority_vote, multi_stage_tests, second_stage_test, CellTest, Criterion,
    CovarianceEstimates, CriterionVerdict, TestResult, Verdict, VoteVerdict,
};
use crate::metrics::{Baseline, BaselineMode, CharacteristicEvaluator, GroupedLabels, MetricKind};
use crate::model::{
    build_coalition_table, import_predictions, load_labels, ClassifierConfig, CoalitionPredictionTable,
    CoalitionRequest,
};

pub const SCHEMA_VERSION: &str = "esl-audit-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSource {
    /// Raw rows; one classifier is trained per feature coalition.
    Dataset { path: PathBuf },
    /// `coalition,row_id,y_hat` predictions plus a `row_id` labels file.
    Predictions { predictions: PathBuf, labels: PathBuf },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub input: InputSource,
    pub label_col: String,
    /// The first column is the audited attribute; all of them, in order,
    /// drive the nested intersectional breakdown.
    pub group_cols: Vec<String>,
    pub positive_label: Option<String>,
    /// Empty means every non-role column, or the prediction table's features.
    pub features: Vec<String>,
    pub criterion: Criterion,
    /// Empty means the criterion's own metrics.
    pub metrics: Vec<MetricKind>,
    pub families: Vec<EslFamily>,
    pub baseline: BaselineMode,
    pub threshold: f64,
    pub alpha: f64,
    pub test_fraction: f64,
    pub bootstrap: Option<usize>,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
}

impl AuditConfig {
    pub fn new(input: InputSource, label_col: &str, group_cols: &[&str]) -> AuditConfig {
        AuditConfig {
            input,
            label_col: label_col.to_string(),
            group_cols: group_cols.iter().map(|s| s.to_string()).collect(),
            positive_label: None,
            features: Vec::new(),
            criterion: Criterion::Eod,
            metrics: Vec::new(),
            families: EslFamily::ALL.to_vec(),
            baseline: BaselineMode::Half,
            threshold: 0.5,
            alpha: 0.05,
            test_fraction: 0.3,
            bootstrap: None,
            seed: 0,
            classifier: ClassifierConfig::default(),
            out: None,
            format: OutputFormat::Json,
        }
    }

    pub fn resolved_metrics(&self) -> Vec<MetricKind> {
        let mut m = if self.metrics.is_empty() { self.criterion.metrics().to_vec() } else { self.metrics.clone() };
        m.sort();
        m.dedup();
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("at least one ESL family is required".into()));
        }
        if self.group_cols.is_empty() || self.group_cols.len() > 5 {
            return Err(Error::Config(format!("{} group columns given, expected 1 to 5", self.group_cols.len())));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test fraction {} must lie in (0, 1)", self.test_fraction)));
        }
        if self.features.len() > MAX_PLAYERS {
            return Err(Error::Config(format!("{} features exceed the limit of {MAX_PLAYERS}", self.features.len())));
        }
        if matches!(self.bootstrap, Some(b) if b < 2) {
            return Err(Error::Config("bootstrap needs at least 2 replications".into()));
        }
        if let BaselineMode::Fixed(x) = self.baseline {
            Baseline::fixed(x)?;
        }
        ClassifierConfig { threshold: self.threshold, ..self.classifier.clone() }.validate()
    }

    /// SHA-256 of the configuration, ignoring where and how output is written.
    pub fn hash(&self) -> String {
        let canonical = AuditConfig { out: None, format: OutputFormat::Json, ..self.clone() };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn coalition_request(&self) -> CoalitionRequest {
        if self.families.iter().all(|&f| f == EslFamily::EqualSurplus) {
            CoalitionRequest::EqualSurplus
        } else {
            CoalitionRequest::All
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Undefined,
}

/// A test result, or the reason it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Hypothesis {
    Defined(TestResult),
    Undefined { status: Status, reason: String },
}

impl Hypothesis {
    fn from_result(r: Result<TestResult>) -> Result<Hypothesis> {
        match r {
            Ok(t) => Ok(Hypothesis::Defined(t)),
            Err(e) if e.is_hypothesis_level() => Ok(Hypothesis::undefined(e.to_string())),
            Err(e) => Err(e),
        }
    }

    fn undefined(reason: impl Into<String>) -> Hypothesis {
        Hypothesis::Undefined { status: Status::Undefined, reason: reason.into() }
    }

    pub fn result(&self) -> Option<&TestResult> {
        match self {
            Hypothesis::Defined(t) => Some(t),
            Hypothesis::Undefined { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAllocation {
    pub levels: [String; 2],
    pub values: [f64; 2],
    /// `phi_g / v_A`.
    pub shares: [f64; 2],
    pub total: f64,
    pub efficiency_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub estimate: f64,
    pub mean: f64,
    pub ci: (f64, f64),
    pub failures: usize,
    pub replications: usize,
    #[serde(skip)]
    pub replicates: Vec<f64>,
}

impl BootstrapSummary {
    fn new(r: BootstrapResult, replications: usize) -> BootstrapSummary {
        BootstrapSummary {
            estimate: r.estimate,
            mean: r.mean,
            ci: r.ci,
            failures: r.failures,
            replications,
            replicates: r.replicates,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub feature: String,
    /// `C^k_g` for both groups.
    pub contributions: Option<[f64; 2]>,
    pub gap: Option<f64>,
    pub test: Hypothesis,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bootstrap: Option<BootstrapSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStageSection {
    pub attributes: Vec<String>,
    pub result: MultiStageResult,
    pub tests: Vec<CellTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySection {
    pub family: EslFamily,
    pub group_values: Option<GroupAllocation>,
    pub first_stage: Hypothesis,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub first_stage_bootstrap: Option<BootstrapSummary>,
    pub features: Vec<FeatureRow>,
    /// Characteristic evaluations used by both stages.
    pub evaluations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub multi_stage: Option<MultiStageSection>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bootstrap_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVote {
    pub feature: String,
    pub vote: Option<VoteVerdict>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSection {
    pub metric: MetricKind,
    pub families: Vec<FamilySection>,
    /// Majority votes across all five families; empty unless all ran.
    pub group_vote: Option<VoteVerdict>,
    pub feature_votes: Vec<FeatureVote>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyCriterion {
    pub family: EslFamily,
    pub verdict: Option<CriterionVerdict>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionSummary {
    pub criterion: Criterion,
    pub metrics: Vec<MetricKind>,
    pub per_family: Vec<FamilyCriterion>,
    pub violated: bool,
    pub rule: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub name: String,
    pub levels: [String; 2],
    pub counts: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub instances: usize,
    pub features: Vec<String>,
    pub attributes: Vec<AttributeSummary>,
    pub baseline: Baseline,
    pub coalitions: usize,
    pub predictions: String,
    pub dropped_rows: usize,
    pub warnings: Vec<Warning>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<StageTiming>,
    /// Group values, decompositions and asymptotic tests.
    pub asymptotic_seconds: f64,
    pub bootstrap_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub split_seed: u64,
    pub bootstrap_seed: Option<u64>,
    pub config_hash: String,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: String,
    pub config: AuditConfig,
    pub data: DataSummary,
    pub metrics: Vec<MetricSection>,
    pub criterion: CriterionSummary,
    pub timings: Timings,
    pub provenance: Provenance,
}

impl AuditReport {
    pub fn exit_code(&self) -> i32 {
        if self.criterion.violated {
            2
        } else {
            0
        }
    }
}

struct Audited {
    table: CoalitionPredictionTable,
    labels: GroupedLabels,
    attributes: Vec<AttributeSummary>,
    dropped_rows: usize,
    warnings: Vec<Warning>,
    retrained: bool,
}

struct Stopwatch {
    stages: Vec<StageTiming>,
}

impl Stopwatch {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        self.stages.push(StageTiming { stage: stage.to_string(), seconds: start.elapsed().as_secs_f64() });
        out
    }

    fn seconds(&self, stages: &[&str]) -> f64 {
        self.stages.iter().filter(|s| stages.contains(&s.stage.as_str())).map(|s| s.seconds).sum()
    }
}

fn attribute_summaries(names: &[String], levels: &[[String; 2]], codes: &[Vec<u8>]) -> Vec<AttributeSummary> {
    names
        .iter()
        .zip(levels)
        .zip(codes)
        .map(|((name, levels), codes)| {
            let ones = codes.iter().filter(|&&c| c == 1).count();
            AttributeSummary { name: name.clone(), levels: levels.clone(), counts: [codes.len() - ones, ones] }
        })
        .collect()
}

fn load_dataset(config: &AuditConfig, path: &Path, watch: &mut Stopwatch) -> Result<Audited> {
    let schema = Schema {
        label: config.label_col.clone(),
        groups: config.group_cols.clone(),
        features: config.features.clone(),
        positive_label: config.positive_label.clone(),
        ..Schema::default()
    };
    let (data, pair, encoded) = watch.run("dataset", || {
        let data = load_csv(path, &schema)?;
        let pair = split(&data, config.test_fraction, config.seed)?;
        let encoded = encode(&data, &pair)?;
        Ok((data, pair, encoded))
    })?;
    let universe = data.feature_names();
    let table = watch.run("model", || {
        let classifier = ClassifierConfig { threshold: config.threshold, ..config.classifier.clone() };
        let train_y: Vec<u8> = pair.train.iter().map(|&i| data.labels[i]).collect();
        build_coalition_table(&encoded, &train_y, &pair.test, &universe, &classifier, &config.coalition_request())
    })?;
    let codes: Vec<Vec<u8>> =
        data.groups.iter().map(|g| pair.test.iter().map(|&i| g.codes[i] - 1).collect()).collect();
    let labels = watch.run("metrics", || {
        GroupedLabels::new(pair.test.iter().map(|&i| data.labels[i]).collect(), &codes)
    })?;
    let levels: Vec<[String; 2]> = data.groups.iter().map(|g| g.levels.clone()).collect();
    let mut warnings = data.warnings.clone();
    warnings.extend(pair.warnings.iter().cloned());
    warnings.extend(encoded.warnings.iter().cloned());
    Ok(Audited {
        attributes: attribute_summaries(&config.group_cols, &levels, &codes),
        table,
        labels,
        dropped_rows: data.dropped_rows,
        warnings,
        retrained: true,
    })
}

fn load_imported(config: &AuditConfig, predictions: &Path, labels: &Path, watch: &mut Stopwatch) -> Result<Audited> {
    let (table, file) = watch.run("dataset", || {
        let universe = (!config.features.is_empty()).then_some(config.features.as_slice());
        let table = import_predictions(predictions, universe)?;
        let file = load_labels(labels, &config.label_col, &config.group_cols, config.positive_label.as_deref())?;
        if table.instance_ids() != file.row_ids.as_slice() {
            return Err(Error::Shape("prediction rows and labels rows have different ids".into()));
        }
        table.require(&config.coalition_request().resolve(table.universe().len())?)?;
        Ok((table, file))
    })?;
    let labels = watch.run("metrics", || GroupedLabels::new(file.y.clone(), &file.codes))?;
    Ok(Audited {
        attributes: attribute_summaries(&config.group_cols, &file.levels, &file.codes),
        table,
        labels,
        dropped_rows: 0,
        warnings: Vec::new(),
        retrained: false,
    })
}

fn family_section(
    audited: &Audited,
    baseline: Baseline,
    kind: MetricKind,
    family: EslFamily,
    cov: &CovarianceEstimates<'_>,
    alpha: f64,
) -> Result<FamilySection> {
    let (table, labels) = (&audited.table, &audited.labels);
    let ev = CharacteristicEvaluator::new(table, labels, baseline)?;
    let features = table.universe();
    let group_values = match group_values(&ev, kind, family, 0, table.full()) {
        Ok(a) => {
            let gap = a.efficiency_gap();
            if gap > EFFICIENCY_TOL {
                return Err(Error::NumericalConsistency(format!("{family} {kind} group values miss v_A by {gap:e}")));
            }
            let shares = a.shares();
            Some(GroupAllocation {
                levels: audited.attributes[0].levels.clone(),
                values: [a.values[0], a.values[1]],
                shares: [shares[0], shares[1]],
                total: a.total,
                efficiency_gap: gap,
            })
        }
        Err(e) if e.is_hypothesis_level() => None,
        Err(e) => return Err(e),
    };
    let first = Hypothesis::from_result(first_stage(&ev, kind, family, 0, alpha))?;
    let rows = match two_stage(&ev, kind, family, 0) {
        Ok(matrix) => {
            let tests = second_stage_test(&matrix, cov, baseline.value, 0, alpha)?;
            features
                .iter()
                .enumerate()
                .zip(tests)
                .map(|((k, name), t)| {
                    let c = [matrix.values[0][k], matrix.values[1][k]];
                    Ok(FeatureRow {
                        feature: name.clone(),
                        contributions: Some(c),
                        gap: Some(c[0] - c[1]),
                        test: Hypothesis::from_result(t)?,
                        bootstrap: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Err(e) if e.is_hypothesis_level() => features
            .iter()
            .map(|name| FeatureRow {
                feature: name.clone(),
                contributions: None,
                gap: None,
                test: Hypothesis::undefined(e.to_string()),
                bootstrap: None,
            })
            .collect(),
        Err(e) => return Err(e),
    };
    let evaluations = ev.evaluations();
    let multi = if labels.attributes > 1 {
        Some(MultiStageSection {
            attributes: audited.attributes.iter().map(|a| a.name.clone()).collect(),
            result: multi_stage(&ev, kind, family, table.full())?,
            tests: multi_stage_tests(&ev, cov, family, alpha)?,
        })
    } else {
        None
    };
    Ok(FamilySection {
        family,
        group_values,
        first_stage: first,
        first_stage_bootstrap: None,
        features: rows,
        evaluations,
        multi_stage: multi,
        bootstrap_error: None,
    })
}

fn votes(section: &mut MetricSection, alpha: f64) {
    let complete = EslFamily::ALL.iter().all(|f| section.families.iter().any(|s| s.family == *f));
    if !complete {
        return;
    }
    let collect = |pick: &dyn Fn(&FamilySection) -> &Hypothesis| -> std::result::Result<BTreeMap<EslFamily, TestResult>, String> {
        section
            .families
            .iter()
            .map(|s| match pick(s) {
                Hypothesis::Defined(t) => Ok((s.family, t.clone())),
                Hypothesis::Undefined { reason, .. } => Err(format!("{}: {reason}", s.family)),
            })
            .collect()
    };
    section.group_vote = collect(&|s| &s.first_stage).ok().and_then(|m| majority_vote(&m, alpha).ok());
    let n = section.families[0].features.len();
    section.feature_votes = (0..n)
        .map(|k| {
            let feature = section.families[0].features[k].feature.clone();
            match collect(&|s| &s.features[k].test) {
                Ok(m) => match majority_vote(&m, alpha) {
                    Ok(v) => FeatureVote { feature, vote: Some(v), reason: None },
                    Err(e) => FeatureVote { feature, vote: None, reason: Some(e.to_string()) },
                },
                Err(reason) => FeatureVote { feature, vote: None, reason: Some(reason) },
            }
        })
        .collect();
}

fn criterion_summary(config: &AuditConfig, sections: &[MetricSection]) -> CriterionSummary {
    let metrics = config.criterion.metrics().to_vec();
    let per_family: Vec<FamilyCriterion> = config
        .families
        .iter()
        .map(|&family| {
            let mut results = BTreeMap::new();
            for s in sections {
                if let Some(Hypothesis::Defined(t)) =
                    s.families.iter().find(|f| f.family == family).map(|f| &f.first_stage)
                {
                    results.insert(s.metric, t.clone());
                }
            }
            match criterion_verdict(&results, config.criterion, config.alpha) {
                Ok(v) => FamilyCriterion { family, verdict: Some(v), reason: None },
                Err(e) => FamilyCriterion { family, verdict: None, reason: Some(e.to_string()) },
            }
        })
        .collect();
    let all_families = EslFamily::ALL.iter().all(|f| config.families.contains(f));
    let (violated, rule) = if all_families {
        let violated = sections
            .iter()
            .filter(|s| metrics.contains(&s.metric))
            .any(|s| matches!(&s.group_vote, Some(v) if v.verdict == Verdict::Unfair));
        (violated, "violated when a constituent metric's group gap is rejected by at least 3 of 5 families".into())
    } else {
        let violated = per_family.iter().any(|f| matches!(&f.verdict, Some(v) if !v.satisfied));
        (violated, "violated when any selected family rejects a constituent metric's group gap".into())
    };
    CriterionSummary { criterion: config.criterion, metrics, per_family, violated, rule }
}

fn notes(config: &AuditConfig, audited: &Audited, baseline: &Baseline) -> Vec<String> {
    let mut notes = vec![
        format!(
            "characteristic v = metric / baseline with baseline {} ({:?}); v of the empty group coalition is 0",
            baseline.value, baseline.mode
        ),
        "scaling: at baseline 1/2, v = 2 * metric, so phi_1 - phi_2 = b1 (v_1 - v_2) = 2 b1 (p_1 - p_2); \
         tables that halve the metric report values smaller by a factor of 2"
            .into(),
        "NPV is evaluated as P(Y = 1 | Y_hat = 0)".into(),
        "group-gap standard error uses the pooled rate; the per-group (unpooled) interval is reported alongside".into(),
    ];
    notes.push(if audited.retrained {
        format!("one classifier retrained per feature coalition ({} coalitions)", audited.table.len())
    } else {
        format!("predictions imported for {} coalitions", audited.table.len())
    });
    if config.bootstrap.is_some() {
        notes.push("bootstrap resamples rows within (group cell, label) strata; models and baseline are held fixed".into());
    }
    notes
}

/// Runs every stage and assembles the report.
pub fn run_audit(config: &AuditConfig) -> Result<AuditReport> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let mut watch = Stopwatch { stages: Vec::new() };
    let audited = match &config.input {
        InputSource::Dataset { path } => load_dataset(config, path, &mut watch)?,
        InputSource::Predictions { predictions, labels } => load_imported(config, predictions, labels, &mut watch)?,
    };
    let baseline =
        watch.run("metrics", || Baseline::resolve(config.baseline, &audited.labels.y))?;
    let metrics = config.resolved_metrics();
    let mut sections: Vec<MetricSection> = watch.run("esl+inference", || {
        metrics
            .iter()
            .map(|&kind| {
                let cov = CovarianceEstimates::new(&audited.table, &audited.labels, kind)?;
                let families = config
                    .families
                    .iter()
                    .map(|&f| family_section(&audited, baseline, kind, f, &cov, config.alpha))
                    .collect::<Result<Vec<_>>>()?;
                let mut s = MetricSection { metric: kind, families, group_vote: None, feature_votes: Vec::new() };
                votes(&mut s, config.alpha);
                Ok(s)
            })
            .collect()
    })?;
    let asymptotic_seconds = watch.seconds(&["esl+inference"]);
    let bootstrap_seconds = match config.bootstrap {
        Some(b) => {
            watch.run("bootstrap", || {
                let strata = strata_from_labels(&audited.labels);
                let bc = BootstrapConfig { replications: b, alpha: config.alpha, master_seed: config.seed };
                for section in &mut sections {
                    for fam in &mut section.families {
                        let stat =
                            gap_statistics(&audited.table, &audited.labels, baseline, section.metric, fam.family, 0);
                        match bootstrap_many(&strata, stat, &bc) {
                            Ok(results) => {
                                let mut it = results.into_iter().map(|r| BootstrapSummary::new(r, b));
                                fam.first_stage_bootstrap = it.next();
                                for (row, r) in fam.features.iter_mut().zip(it) {
                                    row.bootstrap = Some(r);
                                }
                            }
                            Err(e) if e.is_hypothesis_level() || matches!(e, Error::Unstable { .. }) => {
                                fam.bootstrap_error = Some(e.to_string());
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
                Ok(())
            })?;
            Some(watch.seconds(&["bootstrap"]))
        }
        None => None,
    };
    let criterion = criterion_summary(config, &sections);
    let mut warnings = audited.warnings.clone();
    if !metrics.iter().all(|m| config.criterion.metrics().contains(m)) {
        warnings.push(Warning::new("config", "metrics outside the criterion are reported but not part of its verdict"));
    }
    Ok(AuditReport {
        schema_version: SCHEMA_VERSION.into(),
        config: config.clone(),
        data: DataSummary {
            instances: audited.labels.len(),
            features: audited.table.universe().to_vec(),
            attributes: audited.attributes.clone(),
            baseline,
            coalitions: audited.table.len(),
            predictions: if audited.retrained { "retrained".into() } else { "imported".into() },
            dropped_rows: audited.dropped_rows,
            warnings,
        },
        metrics: sections,
        criterion,
        timings: Timings { stages: watch.stages.clone(), asymptotic_seconds, bootstrap_seconds },
        provenance: Provenance {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            split_seed: config.seed,
            bootstrap_seed: config.bootstrap.map(|_| config.seed),
            config_hash: config.hash(),
            notes: notes(config, &audited, &baseline),
        },
    })
}

/// `x` rounded to 12 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x.is_finite() && x != 0.0 {
        format!("{x:.11e}").parse().unwrap_or(x)
    } else {
        x
    }
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_sig(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

pub fn to_json(report: &AuditReport) -> Result<String> {
    let mut v = serde_json::to_value(report)?;
    round_value(&mut v);
    Ok(serde_json::to_string_pretty(&v)?)
}

/// The JSON report without its timing block.
pub fn deterministic_json(report: &AuditReport) -> Result<String> {
    let mut v = serde_json::to_value(report)?;
    if let Value::Object(map) = &mut v {
        map.remove("timings");
    }
    round_value(&mut v);
    Ok(serde_json::to_string_pretty(&v)?)
}

fn num(x: f64) -> String {
    format!("{}", round_sig(x))
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn test_fields(h: &Hypothesis) -> Vec<String> {
    match h {
        Hypothesis::Defined(t) => vec![
            "defined".into(),
            num(t.estimate),
            num(t.standard_error),
            num(t.z),
            num(t.p_value),
            num(t.ci.0),
            num(t.ci.1),
            t.reject.to_string(),
            t.stars().into(),
            t.note.clone().unwrap_or_default(),
        ],
        Hypothesis::Undefined { reason, .. } => {
            let mut f = vec!["undefined".to_string()];
            f.extend(std::iter::repeat_n(String::new(), 8));
            f.push(reason.clone());
            f
        }
    }
}

fn write_table(dir: &Path, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(path)
}

/// Writes the report in the requested format plus a JSON-lines warning log.
/// Returns the files written.
pub fn emit(report: &AuditReport, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let log = dir.join("audit_log.jsonl");
    let mut f = fs::File::create(&log)?;
    for w in &report.data.warnings {
        writeln!(f, "{}", serde_json::to_string(w)?)?;
    }
    written.push(log);
    match format {
        OutputFormat::Json => {
            let path = dir.join("report.json");
            fs::write(&path, to_json(report)?)?;
            written.push(path);
        }
        OutputFormat::Csv => written.extend(emit_csv(report, dir)?),
    }
    Ok(written)
}

fn emit_csv(report: &AuditReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let test_header =
        ["status", "estimate", "std_error", "z", "p_value", "ci_low", "ci_high", "reject", "stars", "note"];
    let (mut groups, mut contributions, mut tests, mut votes, mut boot, mut cells) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in &report.metrics {
        let m = s.metric.to_string();
        for fam in &s.families {
            let f = fam.family.to_string();
            if let Some(g) = &fam.group_values {
                for i in 0..2 {
                    groups.push(vec![m.clone(), f.clone(), (i + 1).to_string(), g.levels[i].clone(), num(g.values[i]), num(g.shares[i]), num(g.total)]);
                }
            }
            let mut row = vec![m.clone(), f.clone(), "group".into(), String::new()];
            row.extend(test_fields(&fam.first_stage));
            tests.push(row);
            if let Some(b) = &fam.first_stage_bootstrap {
                boot.push(vec![m.clone(), f.clone(), String::new(), num(b.estimate), num(b.mean), num(b.ci.0), num(b.ci.1), b.failures.to_string()]);
            }
            for r in &fam.features {
                for g in 0..2 {
                    contributions.push(vec![m.clone(), f.clone(), r.feature.clone(), (g + 1).to_string(), opt(r.contributions.map(|c| c[g]))]);
                }
                let mut row = vec![m.clone(), f.clone(), "feature".into(), r.feature.clone()];
                row.extend(test_fields(&r.test));
                tests.push(row);
                if let Some(b) = &r.bootstrap {
                    boot.push(vec![m.clone(), f.clone(), r.feature.clone(), num(b.estimate), num(b.mean), num(b.ci.0), num(b.ci.1), b.failures.to_string()]);
                }
            }
            if let Some(ms) = &fam.multi_stage {
                for level in &ms.result.levels {
                    for c in level {
                        let levels: Vec<String> = c.levels.iter().map(u8::to_string).collect();
                        cells.push(vec![m.clone(), f.clone(), levels.join(";"), opt(c.value), c.reason.clone().unwrap_or_default()]);
                    }
                }
            }
        }
        if let Some(v) = &s.group_vote {
            votes.push(vec![m.clone(), String::new(), v.votes.to_string(), format!("{:?}", v.verdict).to_lowercase(), String::new()]);
        }
        for fv in &s.feature_votes {
            match &fv.vote {
                Some(v) => votes.push(vec![m.clone(), fv.feature.clone(), v.votes.to_string(), format!("{:?}", v.verdict).to_lowercase(), String::new()]),
                None => votes.push(vec![m.clone(), fv.feature.clone(), String::new(), "undefined".into(), fv.reason.clone().unwrap_or_default()]),
            }
        }
    }
    let mut written = vec![
        write_table(dir, "group_values.csv", &["metric", "family", "group", "level", "value", "share", "v_all"], groups)?,
        write_table(dir, "contributions.csv", &["metric", "family", "feature", "group", "contribution"], contributions)?,
    ];
    let mut header = vec!["metric", "family", "stage", "feature"];
    header.extend(test_header);
    written.push(write_table(dir, "tests.csv", &header, tests)?);
    written.push(write_table(dir, "votes.csv", &["metric", "feature", "votes", "verdict", "reason"], votes)?);
    let mut timing_rows: Vec<Vec<String>> =
        report.timings.stages.iter().map(|s| vec![s.stage.clone(), num(s.seconds), String::new()]).collect();
    for s in &report.metrics {
        for fam in &s.families {
            timing_rows.push(vec![format!("evaluations {} {}", s.metric, fam.family), String::new(), fam.evaluations.to_string()]);
        }
    }
    written.push(write_table(dir, "timings.csv", &["stage", "seconds", "evaluations"], timing_rows)?);
    if !boot.is_empty() {
        written.push(write_table(
            dir,
            "bootstrap.csv",
            &["metric", "family", "feature", "estimate", "mean", "ci_low", "ci_high", "failures"],
            boot,
        )?);
        let mut reps = Vec::new();
        for s in &report.metrics {
            for fam in &s.families {
                let named = fam.first_stage_bootstrap.iter().map(|b| ("group".to_string(), b));
                let named = named.chain(fam.features.iter().filter_map(|r| r.bootstrap.as_ref().map(|b| (r.feature.clone(), b))));
                for (stat, b) in named {
                    for (i, x) in b.replicates.iter().enumerate() {
                        reps.push(vec![s.metric.to_string(), fam.family.to_string(), stat.clone(), i.to_string(), num(*x)]);
                    }
                }
            }
        }
        written.push(write_table(dir, "bootstrap_replicates.csv", &["metric", "family", "statistic", "replicate", "value"], reps)?);
    }
    if !cells.is_empty() {
        written.push(write_table(dir, "intersections.csv", &["metric", "family", "levels", "value", "reason"], cells)?);
    }
    Ok(written)
}
