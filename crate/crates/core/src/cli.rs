//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::esl::EslFamily;
use crate::inference::Criterion;
use crate::metrics::{BaselineMode, MetricKind};
use crate::model::ClassifierConfig;
use crate::report::{emit, run_audit, AuditConfig, AuditReport, Hypothesis, InputSource, OutputFormat};

#[derive(Debug, Parser)]
#[command(name = "esl-audit", version, about = "Group-fairness audits with ESL game values")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a fairness audit and write a report.
    Audit(AuditArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CriterionArg {
    Independence,
    Separation,
    Sufficiency,
    Eod,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// CSV with features, label and group columns.
    #[arg(long, conflicts_with_all = ["predictions", "labels"], required_unless_present = "predictions")]
    pub data: Option<PathBuf>,
    /// Per-coalition predictions (`coalition,row_id,y_hat`).
    #[arg(long, requires = "labels")]
    pub predictions: Option<PathBuf>,
    /// `row_id`, label and group columns matching `--predictions`.
    #[arg(long, requires = "predictions")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub label_col: String,
    #[arg(long, required_unless_present = "group_cols")]
    pub group_col: Option<String>,
    /// Several binary attributes, outermost first.
    #[arg(long, value_delimiter = ',', conflicts_with = "group_col")]
    pub group_cols: Vec<String>,
    #[arg(long)]
    pub positive_label: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    #[arg(long, value_enum, default_value = "eod")]
    pub criterion: CriterionArg,
    /// sr, tpr, fpr, ppv, npv, comma-separated, or auto.
    #[arg(long, default_value = "auto")]
    pub metric: String,
    /// shapley, solidarity, consensus, equal_surplus, lsp, comma-separated, or all.
    #[arg(long, default_value = "all")]
    pub esl: String,
    /// half, prevalence or a number in (0, 1).
    #[arg(long, default_value = "half")]
    pub baseline: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.3)]
    pub test_fraction: f64,
    /// Bootstrap replications; off when absent.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub learning_rate: f64,
    #[arg(long, default_value = "esl-audit-out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
}

fn parse_list<T>(raw: &str, all: &[T], parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>>
where
    T: Copy,
{
    match raw.trim() {
        "all" => Ok(all.to_vec()),
        "auto" => Ok(Vec::new()),
        list => list.split(',').map(|s| parse(s.trim())).collect(),
    }
}

impl AuditArgs {
    pub fn to_config(&self) -> Result<AuditConfig> {
        let input = match (&self.data, &self.predictions, &self.labels) {
            (Some(path), None, None) => InputSource::Dataset { path: path.clone() },
            (None, Some(p), Some(l)) => InputSource::Predictions { predictions: p.clone(), labels: l.clone() },
            _ => return Err(Error::Config("give either --data or both --predictions and --labels".into())),
        };
        let group_cols = match &self.group_col {
            Some(g) => vec![g.clone()],
            None => self.group_cols.clone(),
        };
        let metrics = parse_list(&self.metric, &MetricKind::ALL, |s| s.parse())?;
        if self.esl.trim() == "auto" {
            return Err(Error::Config("--esl takes a family list or `all`".into()));
        }
        let families = parse_list(&self.esl, &EslFamily::ALL, |s| s.parse())?;
        Ok(AuditConfig {
            input,
            label_col: self.label_col.clone(),
            group_cols,
            positive_label: self.positive_label.clone(),
            features: self.features.clone(),
            criterion: match self.criterion {
                CriterionArg::Independence => Criterion::Independence,
                CriterionArg::Separation => Criterion::Separation,
                CriterionArg::Sufficiency => Criterion::Sufficiency,
                CriterionArg::Eod => Criterion::Eod,
            },
            metrics,
            families,
            baseline: self.baseline.parse::<BaselineMode>()?,
            threshold: self.threshold,
            alpha: self.alpha,
            test_fraction: self.test_fraction,
            bootstrap: self.bootstrap,
            seed: self.seed,
            classifier: ClassifierConfig {
                epochs: self.epochs,
                learning_rate: self.learning_rate,
                threshold: self.threshold,
                seed: self.seed,
                ..ClassifierConfig::default()
            },
            out: Some(self.out.clone()),
            format: match self.format {
                FormatArg::Json => OutputFormat::Json,
                FormatArg::Csv => OutputFormat::Csv,
            },
        })
    }
}

/// One line per (metric, family) plus the criterion outcome.
pub fn summary(report: &AuditReport) -> String {
    let mut out = String::new();
    for s in &report.metrics {
        for f in &s.families {
            let line = match &f.first_stage {
                Hypothesis::Defined(t) => format!(
                    "{} {:<13} gap {:>9.4}  CI [{:.4}, {:.4}]  p {:.3e}{}\n",
                    s.metric,
                    f.family.to_string(),
                    t.estimate,
                    t.ci.0,
                    t.ci.1,
                    t.p_value,
                    t.stars()
                ),
                Hypothesis::Undefined { reason, .. } => format!("{} {:<13} undefined: {reason}\n", s.metric, f.family.to_string()),
            };
            out.push_str(&line);
        }
    }
    out.push_str(&format!(
        "{}: {}\n",
        report.criterion.criterion,
        if report.criterion.violated { "violated" } else { "not violated" }
    ));
    out
}

/// Parses arguments, runs the audit and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let Command::Audit(args) = cli.command;
    let outcome = args.to_config().and_then(|config| {
        let report = run_audit(&config)?;
        let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("."));
        emit(&report, &dir, config.format).map_err(|e| Error::Stage { stage: "report", source: Box::new(e) })?;
        Ok(report)
    });
    match outcome {
        Ok(report) => {
            print!("{}", summary(&report));
            report.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
