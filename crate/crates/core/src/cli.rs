//! Command-line front end: `select`, `train`, `tune`, `eval`, `synth`.
//!
//! Machine-readable JSON goes to stdout or the configured output file;
//! human summaries go to stderr. Exit codes: 0 success, 1 runtime or IO
//! failure, 2 configuration or validation failure. `PRPL_THREADS` caps the
//! worker pool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::classifier::{load_head, save_head, TrainConfig};
use crate::diagnostics::{estimate_divergence, evaluate_accuracy, tune, GridCell, TuneGrid};
use crate::error::{Error, Result};
use crate::exec;
use crate::feature_store::{
    load_feature_set, save_feature_set, synth_gaussian_domains, synth_output_paths,
    DatasetManifest, FeatureSet, SynthSpec,
};
use crate::pseudo::{recurrent_fit, RecurrentConfig};
use crate::selector::{select_best, SelectionMetric};

#[derive(Debug, Parser)]
#[command(
    name = "prpl",
    version,
    about = "Feature-space unsupervised domain adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank extractors in a manifest by source/target distance.
    Select {
        manifest: PathBuf,
        #[arg(long, default_value = "mean_l2")]
        metric: String,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
    },
    /// Run recurrent pseudo-label training from a JSON config.
    Train { config: PathBuf },
    /// Grid-search T and the threshold schedule by divergence.
    Tune { config: PathBuf },
    /// Accuracy of a saved head on a labeled feature file.
    Eval {
        head: PathBuf,
        features: PathBuf,
        #[arg(long)]
        l2_normalize: bool,
    },
    /// Write a synthetic shifted-Gaussian source/target pair.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: u32,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        n_source: usize,
        #[arg(long, default_value_t = 100)]
        n_target: usize,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        shift: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_prefix: PathBuf,
    },
}

/// Where the training data comes from: two feature files, or a manifest
/// plus domain names (the extractor is selected unless pinned).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSection {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub path: Option<PathBuf>,
    pub source_domain: Option<String>,
    pub target_domain: Option<String>,
    pub extractor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrentSection {
    #[serde(rename = "T")]
    pub iterations: usize,
    pub p_schedule: Vec<f64>,
}

impl Default for RecurrentSection {
    fn default() -> Self {
        Self {
            iterations: 3,
            p_schedule: vec![0.5, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub report: Option<PathBuf>,
    pub head: Option<PathBuf>,
}

/// JSON run configuration shared by `train` and `tune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub manifest: ManifestSection,
    #[serde(default)]
    pub selection: Option<SelectionSection>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub recurrent: RecurrentSection,
    #[serde(default)]
    pub tune: Option<TuneGrid>,
    #[serde(default)]
    pub output: OutputSection,
}

enum DataSource {
    Files {
        source: PathBuf,
        target: PathBuf,
    },
    Manifest {
        path: PathBuf,
        source_domain: String,
        target_domain: String,
        extractor: Option<String>,
        metric: SelectionMetric,
    },
}

/// A config file that passed schema and range validation, with relative
/// paths resolved against the config's directory.
struct ValidatedConfig {
    data: DataSource,
    recurrent: RecurrentConfig,
    grid: Option<TuneGrid>,
    output: OutputSection,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn load_config(path: &Path) -> Result<ValidatedConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).with_path(path))?;
    let cfg: RunConfigFile =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));

    let m = &cfg.manifest;
    let data = match (&m.source, &m.target, &m.path) {
        (Some(s), Some(t), None) => {
            if m.source_domain.is_some() || m.target_domain.is_some() || m.extractor.is_some() {
                return Err(invalid(
                    "manifest.source/target cannot be combined with domain or extractor keys",
                ));
            }
            DataSource::Files {
                source: resolve(base, s),
                target: resolve(base, t),
            }
        }
        (None, None, Some(p)) => {
            let (Some(sd), Some(td)) = (&m.source_domain, &m.target_domain) else {
                return Err(invalid(
                    "manifest.path requires source_domain and target_domain",
                ));
            };
            let metric = match &cfg.selection {
                Some(sel) => SelectionMetric::from_name(&sel.metric)?,
                None => SelectionMetric::MeanL2,
            };
            DataSource::Manifest {
                path: resolve(base, p),
                source_domain: sd.clone(),
                target_domain: td.clone(),
                extractor: m.extractor.clone(),
                metric,
            }
        }
        _ => return Err(invalid(
            "manifest needs either {source, target} files or {path, source_domain, target_domain}",
        )),
    };
    let recurrent = RecurrentConfig::new(
        cfg.recurrent.iterations,
        cfg.recurrent.p_schedule.clone(),
        cfg.train.clone(),
    )?;
    if let Some(grid) = &cfg.tune {
        if grid.cells.is_empty() {
            return Err(invalid("tune.cells is empty"));
        }
        for cell in &grid.cells {
            RecurrentConfig::new(cell.iterations, cell.p_schedule.clone(), cfg.train.clone())?;
        }
    }
    let output = OutputSection {
        report: cfg.output.report.as_ref().map(|p| resolve(base, p)),
        head: cfg.output.head.as_ref().map(|p| resolve(base, p)),
    };
    Ok(ValidatedConfig {
        data,
        recurrent,
        grid: cfg.tune,
        output,
    })
}

fn load_pair(data: &DataSource) -> Result<(FeatureSet, FeatureSet)> {
    match data {
        DataSource::Files { source, target } => {
            Ok((load_feature_set(source)?, load_feature_set(target)?))
        }
        DataSource::Manifest {
            path,
            source_domain,
            target_domain,
            extractor,
            metric,
        } => {
            let manifest = DatasetManifest::load(path)?;
            let chosen = match extractor {
                Some(x) => x.clone(),
                None => {
                    let report = select_best(&manifest, source_domain, target_domain, metric)?;
                    eprintln!("selected extractor {} ({})", report.chosen, report.metric);
                    report.chosen
                }
            };
            let lookup = |domain: &str| {
                manifest.path_for(&chosen, domain).ok_or_else(|| {
                    Error::InvalidManifest(format!("no {domain:?} file for extractor {chosen:?}"))
                })
            };
            Ok((
                load_feature_set(lookup(source_domain)?)?,
                load_feature_set(lookup(target_domain)?)?,
            ))
        }
    }
}

fn write_json_output(json: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, format!("{json}\n")).map_err(|e| Error::from(e).with_path(p)),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{json}")?;
            Ok(())
        }
    }
}

fn cmd_select(manifest: &Path, metric: &str, source: &str, target: &str) -> Result<()> {
    let metric = SelectionMetric::from_name(metric)?;
    let manifest = DatasetManifest::load(manifest)?;
    let report = select_best(&manifest, source, target, &metric)?;
    for (id, d) in &report.distances {
        eprintln!("{id:>24}  {d:.6e}");
    }
    eprintln!("chosen: {}", report.chosen);
    write_json_output(&serde_json::to_string_pretty(&report)?, None)
}

fn cmd_train(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let report_path = cfg
        .output
        .report
        .clone()
        .ok_or_else(|| invalid("output.report is required for train"))?;
    let (source, target) = load_pair(&cfg.data)?;
    // Ground truth on the target only feeds the reported accuracy.
    let (head, report) = recurrent_fit(&source, &target, &cfg.recurrent)?;
    for s in &report.stages {
        eprintln!(
            "t={} p={:.2} confident={} N_U={} L_S={:.4} L_MMD={:.4} Ma={:.4} Co={}{}",
            s.t,
            s.threshold,
            s.n_confident,
            s.n_updated,
            s.loss_source,
            s.loss_mmd,
            s.dist_marginal,
            s.dist_conditional.map_or("-".into(), |v| format!("{v:.4}")),
            s.accuracy.map_or(String::new(), |a| format!(" acc={a:.4}")),
        );
    }
    if let Ok(div) = estimate_divergence(&report) {
        eprintln!("d_H ~= {:.6}", div.d_h);
    }
    write_json_output(&report.to_json()?, Some(&report_path))?;
    if let Some(head_path) = &cfg.output.head {
        save_head(&head, head_path)?;
    }
    Ok(())
}

fn cmd_tune(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let grid = cfg
        .grid
        .clone()
        .ok_or_else(|| invalid("tune section with cells is required"))?;
    let (source, target) = load_pair(&cfg.data)?;
    let outcome = tune(
        &source,
        &target.to_unlabeled(),
        &grid,
        cfg.recurrent.train(),
    )?;
    for row in &outcome.table.cells {
        eprintln!(
            "T={} p={:?} d_H={}",
            row.iterations,
            row.p_schedule,
            row.d_h.map_or("n/a".into(), |v| format!("{v:.6}"))
        );
    }
    let GridCell {
        iterations,
        p_schedule,
    } = &outcome.table.chosen;
    eprintln!("chosen: T={iterations} p={p_schedule:?}");
    write_json_output(
        &serde_json::to_string_pretty(&outcome.table)?,
        cfg.output.report.as_deref(),
    )
}

fn cmd_eval(head: &Path, features: &Path, l2_normalize: bool) -> Result<()> {
    let head = load_head(head)?;
    let mut fs = load_feature_set(features)?;
    if l2_normalize {
        let mut x = fs.to_f64();
        crate::classifier::l2_normalize_rows(&mut x);
        fs = FeatureSet::new(
            fs.extractor_id(),
            fs.domain_id(),
            x.mapv(|v| v as f32),
            fs.labels().map(<[u32]>::to_vec),
            fs.num_classes(),
        )?;
    }
    let accuracy = evaluate_accuracy(&head, &fs)?;
    write_json_output(
        &serde_json::json!({ "accuracy": accuracy, "n": fs.n() }).to_string(),
        None,
    )
}

fn cmd_synth(spec: &SynthSpec, seed: u64, out_prefix: &Path) -> Result<()> {
    let (source, target) = synth_gaussian_domains(spec, seed)?;
    let (sp, tp) = synth_output_paths(out_prefix);
    save_feature_set(&source, &sp)?;
    save_feature_set(&target, &tp)?;
    write_json_output(
        &serde_json::json!({ "source": sp, "target": tp, "seed": seed }).to_string(),
        None,
    )
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Select {
            manifest,
            metric,
            source,
            target,
        } => cmd_select(&manifest, &metric, &source, &target),
        Command::Train { config } => cmd_train(&config),
        Command::Tune { config } => cmd_tune(&config),
        Command::Eval {
            head,
            features,
            l2_normalize,
        } => cmd_eval(&head, &features, l2_normalize),
        Command::Synth {
            classes,
            dim,
            n_source,
            n_target,
            separation,
            shift,
            sigma,
            seed,
            out_prefix,
        } => {
            let spec = SynthSpec {
                num_classes: classes,
                d: dim,
                n_per_class_source: n_source,
                n_per_class_target: n_target,
                class_mean_separation: separation,
                domain_shift: shift,
                noise_sigma: sigma,
            };
            cmd_synth(&spec, seed, &out_prefix)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        2
    } else {
        1
    }
}

/// Parses arguments, runs the command, reports errors; returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    if let Some(threads) = std::env::var("PRPL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
    {
        exec::init_threads(threads);
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
