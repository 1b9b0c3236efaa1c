//! Config-driven experiments: pretraining plus a set of methods over seeds,
//! written out as CSV.
//!
//! Configs are TOML. Top-level keys:
//!
//! ```toml
//! methods = ["baseline", "cjdot", "mjdot", "wjdot"]   # default: all four
//! pretrain = "erm"                                    # or "mtl"
//! seeds = [0, 1, 2]
//! output_dir = "out"
//! standardize = true                                  # z-score with source statistics
//!
//! [benchmark]          # synthetic data; its `seed` is replaced by each run seed
//! n_sources = 4
//! # ... any BenchmarkSpec field
//!
//! [data]               # or files in the dataset CSV format, instead of [benchmark]
//! sources = ["s0.csv", "s1.csv"]
//! target = "t.csv"             # labels present but never read by the adaptation
//! target_test = "t_test.csv"
//!
//! [train]              # TrainConfig; its `seed` is replaced by each run seed
//! [wjdot]              # WjdotConfig
//!
//! [scores]             # optional group partition over source indices
//! group_a = [0, 1]
//! group_b = [2, 3]
//! true_group = "group_b"       # optional
//! ```
//!
//! Relative data paths are resolved against the config file's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::baselines::{run_baseline, run_cjdot, run_mjdot, run_wjdot, BaselineResult, Method};
use crate::datagen::{generate, load_dataset, BenchmarkSpec};
use crate::measures::{check_compatible, FeatureSet, LabeledDataset, Standardizer};
use crate::model::{pretrain_erm, pretrain_mtl, EmbedClassifier, TrainConfig};
use crate::scores::{group_scores, Diagnosis, GroupPartition, GroupScores};
use crate::wjdot::{TraceRow, WjdotConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pretrain {
    #[default]
    Erm,
    Mtl,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub sources: Vec<PathBuf>,
    pub target: PathBuf,
    pub target_test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoresConfig {
    pub group_a: Vec<usize>,
    pub group_b: Vec<usize>,
    pub true_group: Option<Diagnosis>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub pretrain: Pretrain,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub standardize: bool,
    pub benchmark: Option<BenchmarkSpec>,
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub wjdot: WjdotConfig,
    pub scores: Option<ScoresConfig>,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// Parses TOML; errors carry the line of the offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Parse {
                line,
                message: e.message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::parse(&fs::read_to_string(path)?)?;
        if let (Some(data), Some(dir)) = (&mut cfg.data, path.parent()) {
            for p in data.sources.iter_mut().chain([&mut data.target, &mut data.target_test]) {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let config = |m: &str| Err(Error::Config(m.into()));
        if self.methods.is_empty() {
            return config("methods: at least one method is required");
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return config("methods: duplicate entries");
        }
        if self.seeds.is_empty() {
            return config("seeds: at least one seed is required");
        }
        let n_sources = match (&self.benchmark, &self.data) {
            (Some(b), None) => {
                b.validate()?;
                b.n_sources
            }
            (None, Some(d)) => {
                if d.sources.is_empty() {
                    return config("data.sources: at least one source is required");
                }
                d.sources.len()
            }
            _ => return config("exactly one of [benchmark] and [data] is required"),
        };
        self.wjdot.validate()?;
        if let Some(s) = &self.scores {
            GroupPartition::new(s.group_a.clone(), s.group_b.clone(), n_sources)
                .map_err(|e| Error::Config(format!("scores: {e}")))?;
        }
        Ok(())
    }

    fn partition(&self, n_sources: usize) -> Result<Option<GroupPartition>> {
        self.scores
            .as_ref()
            .map(|s| GroupPartition::new(s.group_a.clone(), s.group_b.clone(), n_sources))
            .transpose()
    }
}

/// Overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for the seed fan-out; `None` or 1 runs seeds in order on the caller's thread.
    pub threads: Option<usize>,
    /// Forces `wjdot.strict`.
    pub strict: bool,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub seed: u64,
    pub method: Method,
    pub accuracy: f64,
    pub error_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub seed: u64,
    pub target: String,
    pub scores: GroupScores,
    pub true_group: Option<Diagnosis>,
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: Vec<MetricRow>,
    pub alpha_trace: Vec<TraceRow>,
    pub scores: Option<ScoreRow>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub output_dir: PathBuf,
    pub n_sources: usize,
    pub seeds: Vec<SeedOutcome>,
}

struct Data {
    sources: Vec<LabeledDataset>,
    target: LabeledDataset,
    target_test: LabeledDataset,
}

fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<Data> {
    let mut data = if let Some(spec) = &cfg.benchmark {
        let b = generate(&BenchmarkSpec { seed, ..spec.clone() })?;
        Data {
            sources: b.sources,
            target: b.target,
            target_test: b.target_test,
        }
    } else {
        let paths = cfg.data.as_ref().expect("validated: benchmark or data");
        let sources = paths
            .sources
            .iter()
            .map(|p| load_dataset(p, None))
            .collect::<Result<Vec<_>>>()?;
        let c = sources.iter().map(|s| s.n_classes()).max().unwrap_or(1);
        // re-read with a common class count so all domains agree
        let sources = if sources.iter().all(|s| s.n_classes() == c) {
            sources
        } else {
            paths
                .sources
                .iter()
                .map(|p| load_dataset(p, Some(c)))
                .collect::<Result<_>>()?
        };
        Data {
            sources,
            target: load_dataset(&paths.target, Some(c))?,
            target_test: load_dataset(&paths.target_test, Some(c))?,
        }
    };
    let mut all = data.sources.clone();
    all.push(data.target.clone());
    all.push(data.target_test.clone());
    check_compatible(&all).map_err(|e| Error::Config(format!("datasets disagree: {e}")))?;
    if cfg.standardize {
        let st = Standardizer::fit(&data.sources)?;
        for d in data.sources.iter_mut().chain([&mut data.target, &mut data.target_test]) {
            st.apply(d)?;
        }
    }
    Ok(data)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let data = load_data(cfg, seed)?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let erm = |sources: &[LabeledDataset]| pretrain_erm(sources, &train).map(|p| p.model);
    let model: EmbedClassifier = match cfg.pretrain {
        Pretrain::Erm => erm(&data.sources)?,
        Pretrain::Mtl => pretrain_mtl(&data.sources, &train)?.model,
    };
    let target = data.target.without_labels();
    let mut metrics = Vec::new();
    let mut alpha_trace = Vec::new();
    let mut scores = None;
    for &method in &cfg.methods {
        let result: BaselineResult = match method {
            Method::Baseline if cfg.pretrain == Pretrain::Mtl => run_baseline(&erm(&data.sources)?, &data.target_test)?,
            Method::Baseline => run_baseline(&model, &data.target_test)?,
            Method::Cjdot => run_cjdot(&data.sources, &target, &model, &cfg.wjdot, &data.target_test)?,
            Method::Mjdot => run_mjdot(&data.sources, &target, &model, &cfg.wjdot, &data.target_test)?,
            Method::Wjdot => run_wjdot(&data.sources, &target, &model, &cfg.wjdot, &data.target_test)?,
        };
        if method == Method::Wjdot {
            let fit = result.adaptation.as_ref().expect("wjdot always adapts");
            alpha_trace = fit.alpha.trace.clone();
            if let Some(part) = cfg.partition(data.sources.len())? {
                scores = Some(ScoreRow {
                    seed,
                    target: data.target.domain().to_string(),
                    scores: group_scores(&fit.alpha.alpha, &part)?,
                    true_group: cfg.scores.as_ref().and_then(|s| s.true_group),
                });
            }
        }
        metrics.push(MetricRow {
            seed,
            method,
            accuracy: result.metrics.accuracy,
            error_rate: result.metrics.error_rate,
        });
    }
    Ok(SeedOutcome {
        seed,
        metrics,
        alpha_trace,
        scores,
    })
}

/// Runs every seed and writes `metrics.csv`, plus `alpha_trace.csv` when
/// WJDOT is among the methods and `scores.csv` when a partition is also set.
///
/// A solver failure writes `failed_trace.csv` (seed, iter, objective, alpha...)
/// into the output directory before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutput> {
    let mut cfg = cfg.clone();
    if opts.strict {
        cfg.wjdot.strict = true;
    }
    if let Some(dir) = &opts.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::Config(format!("output_dir {}: {e}", cfg.output_dir.display())))?;

    let run = |&seed: &u64| run_seed(&cfg, seed).map_err(|e| (seed, e));
    let outcomes: std::result::Result<Vec<SeedOutcome>, (u64, Error)> = match opts.threads {
        Some(n) if n > 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| cfg.seeds.par_iter().map(run).collect()),
        _ => cfg.seeds.iter().map(run).collect(),
    };
    let seeds = match outcomes {
        Ok(s) => s,
        Err((seed, e)) => {
            if let Error::Solver {
                objective_trace,
                alpha_trace,
                ..
            } = &e
            {
                let path = cfg.output_dir.join("failed_trace.csv");
                write_failed_trace(&path, seed, objective_trace, alpha_trace)?;
                log::error!("solver failed on seed {seed}; trace written to {}", path.display());
            }
            return Err(e);
        }
    };

    let n_sources = match (&cfg.benchmark, &cfg.data) {
        (Some(b), _) => b.n_sources,
        (_, Some(d)) => d.sources.len(),
        _ => unreachable!("validated"),
    };
    let out = ExperimentOutput {
        output_dir: cfg.output_dir.clone(),
        n_sources,
        seeds,
    };
    out.write(&cfg)?;
    Ok(out)
}

fn write_failed_trace(path: &Path, seed: u64, objective: &[f64], alpha: &[Vec<f64>]) -> Result<()> {
    let j = alpha.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trace_header(j))?;
    for (it, (obj, a)) in objective.iter().zip(alpha).enumerate() {
        w.write_record(trace_record(seed, it, *obj, a))?;
    }
    w.flush()?;
    Ok(())
}

fn trace_header(j: usize) -> Vec<String> {
    let mut h = vec!["seed".to_string(), "iter".into(), "objective".into()];
    h.extend((0..j).map(|k| format!("alpha_{k}")));
    h
}

fn trace_record(seed: u64, iter: usize, objective: f64, alpha: &[f64]) -> Vec<String> {
    let mut r = vec![seed.to_string(), iter.to_string(), objective.to_string()];
    r.extend(alpha.iter().map(f64::to_string));
    r
}

impl ExperimentOutput {
    pub fn metrics(&self) -> impl Iterator<Item = &MetricRow> {
        self.seeds.iter().flat_map(|s| &s.metrics)
    }

    fn write(&self, cfg: &ExperimentConfig) -> Result<()> {
        let mut w = csv::Writer::from_path(self.output_dir.join("metrics.csv"))?;
        w.write_record(["seed", "method", "accuracy", "error_rate"])?;
        for m in self.metrics() {
            w.write_record([
                m.seed.to_string(),
                m.method.to_string(),
                m.accuracy.to_string(),
                m.error_rate.to_string(),
            ])?;
        }
        w.flush()?;

        if cfg.methods.contains(&Method::Wjdot) {
            let mut w = csv::Writer::from_path(self.output_dir.join("alpha_trace.csv"))?;
            w.write_record(trace_header(self.n_sources))?;
            for s in &self.seeds {
                for row in &s.alpha_trace {
                    w.write_record(trace_record(s.seed, row.iteration, row.objective, &row.alpha))?;
                }
            }
            w.flush()?;
            if cfg.scores.is_some() {
                let mut w = csv::Writer::from_path(self.output_dir.join("scores.csv"))?;
                w.write_record(["seed", "target", "hs", "ds", "diagnosis", "true_group"])?;
                for r in self.seeds.iter().filter_map(|s| s.scores.as_ref()) {
                    w.write_record([
                        r.seed.to_string(),
                        r.target.clone(),
                        r.scores.score_a.to_string(),
                        r.scores.score_b.to_string(),
                        r.scores.diagnosis.to_string(),
                        r.true_group.map_or(String::new(), |g| g.to_string()),
                    ])?;
                }
                w.flush()?;
            }
        }
        Ok(())
    }
}

/// Per-method mean and population standard deviation over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub n: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub error_rate_mean: f64,
    pub error_rate_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reads a `metrics.csv`; methods keep their order of first appearance.
pub fn summarize_metrics(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    #[derive(Deserialize)]
    struct Row {
        #[allow(dead_code)]
        seed: u64,
        method: String,
        accuracy: f64,
        error_rate: f64,
    }
    let mut order = Vec::new();
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (k, row) in csv::Reader::from_path(path)?.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(k + 2, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let g = groups.entry(row.method.clone()).or_insert_with(|| {
            order.push(row.method.clone());
            Default::default()
        });
        g.0.push(row.accuracy);
        g.1.push(row.error_rate);
    }
    if order.is_empty() {
        return Err(Error::Input("metrics file has no data rows".into()));
    }
    Ok(order
        .into_iter()
        .map(|method| {
            let (acc, err) = &groups[&method];
            let (accuracy_mean, accuracy_std) = mean_std(acc);
            let (error_rate_mean, error_rate_std) = mean_std(err);
            SummaryRow {
                n: acc.len(),
                method,
                accuracy_mean,
                accuracy_std,
                error_rate_mean,
                error_rate_std,
            }
        })
        .collect())
}

pub fn write_summary(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record([
        "method",
        "n",
        "accuracy_mean",
        "accuracy_std",
        "error_rate_mean",
        "error_rate_std",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.n.to_string(),
            r.accuracy_mean.to_string(),
            r.accuracy_std.to_string(),
            r.error_rate_mean.to_string(),
            r.error_rate_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned text table, accuracies in percent.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(0)
        .max("method".len());
    let mut out = format!(
        "{:<width$}  {:>5}  {:>16}  {:>16}\n",
        "method", "n", "accuracy", "error_rate"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>7.2} ± {:>6.2}  {:>7.2} ± {:>6.2}",
            r.method,
            r.n,
            100.0 * r.accuracy_mean,
            100.0 * r.accuracy_std,
            100.0 * r.error_rate_mean,
            100.0 * r.error_rate_std,
        );
    }
    out
}

/// Summarizes `metrics_path`, writes `summary.csv` beside it and returns the table.
pub fn summarize(metrics_path: impl AsRef<Path>) -> Result<String> {
    let path = metrics_path.as_ref();
    let rows = summarize_metrics(path)?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    write_summary(&rows, dir.join("summary.csv"))?;
    Ok(format_summary(&rows))
}

/// Exit code of the command-line runner for an error: 3 for adaptation or
/// training failures, 2 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Solver { .. } | Error::Training { .. } => 3,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
methods = ["baseline"]
seeds = [3]
output_dir = "OUT"

[benchmark]
n_sources = 2
n_per_source = 20
dim = 2
n_classes = 2
n_target = 20
target_shift = { kind = "translation", magnitude = 1.0, seed = 7 }

[train]
hidden = []
embed_dim = 2
epochs = 3
"#;

    fn small(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::parse(&SMALL.replace("OUT", &dir.display().to_string())).unwrap()
    }

    #[test]
    fn defaults_and_fields() {
        let cfg = small(Path::new("x"));
        assert_eq!(cfg.methods, vec![Method::Baseline]);
        assert_eq!(cfg.pretrain, Pretrain::Erm);
        assert!(cfg.standardize);
        assert_eq!(cfg.wjdot, WjdotConfig::default());
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn parse_errors_point_at_the_line() {
        let bad = SMALL.replace("epochs = 3", "epochs = 3\nepohcs = 4");
        match ExperimentConfig::parse(&bad) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 18);
                assert!(message.contains("epohcs"), "{message}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
        assert!(matches!(
            ExperimentConfig::parse(&SMALL.replace("seeds = [3]", "seeds = []")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse(&SMALL.replace("[\"baseline\"]", "[\"iwerm\"]")),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(ExperimentConfig::parse(&SMALL.replace("[\"baseline\"]", "[\"wjdot\", \"wjdot\"]")).is_err());
        let partition = format!("{SMALL}\n[scores]\ngroup_a = [0]\ngroup_b = [0]\n");
        assert!(matches!(ExperimentConfig::parse(&partition), Err(Error::Config(_))));
    }

    #[test]
    fn one_seed_one_method_is_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&small(dir.path()), &RunOptions::default()).unwrap();
        assert_eq!(out.metrics().count(), 1);
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("seed,method,accuracy,error_rate\n3,baseline,"));
        assert!(!dir.path().join("alpha_trace.csv").exists());
    }

    #[test]
    fn output_dir_override() {
        let dir = tempfile::tempdir().unwrap();
        let elsewhere = dir.path().join("elsewhere");
        let opts = RunOptions {
            output_dir: Some(elsewhere.clone()),
            ..RunOptions::default()
        };
        run_experiment(&small(&dir.path().join("unused")), &opts).unwrap();
        assert!(elsewhere.join("metrics.csv").exists());
        assert!(!dir.path().join("unused").exists());
    }

    fn write_metrics(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("metrics.csv");
        fs::write(&p, format!("seed,method,accuracy,error_rate\n{body}")).unwrap();
        p
    }

    #[test]
    fn population_std() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_metrics(dir.path(), "0,wjdot,0.9,0.1\n1,wjdot,1,0\n0,baseline,0.5,0.5\n");
        let rows = summarize_metrics(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].method.as_str(), rows[0].n), ("wjdot", 2));
        assert!((rows[0].accuracy_mean - 0.95).abs() < 1e-12);
        assert!((rows[0].accuracy_std - 0.05).abs() < 1e-12);
        assert_eq!(rows[1].accuracy_std, 0.0);
        let table = summarize(&p).unwrap();
        assert!(table.contains("95.00 ±   5.00"), "{table}");
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 3);
    }

    #[test]
    fn empty_metrics_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_metrics(dir.path(), "");
        assert!(matches!(summarize(&p), Err(Error::Input(_))));
        assert_eq!(exit_code(&summarize(&p).unwrap_err()), 2);
    }
}
