//! The `sfm-domset` command line: config handling and the pipeline subcommands.
//!
//! Every command writes deterministic files for a fixed config and seed.
//! Wall-clock timings go to opt-in sidecars (`--timing`, `--csv`).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::{CorrespondenceError, ProviderConfig};
use crate::domgraph::{
    best_dominating_set, build_graph, is_dominating, random_baseline_samples, DomGraphError, DomsetFile, EdgeMetric,
    GraphFile, GraphKey,
};
use crate::eval::{compare, evaluate, load_report, report_to_csv, save_comparison, save_report, EvalError};
use crate::geometry::{EstimatorConfig, GeometryError};
use crate::model::{load_native, load_reconstruction_text, save_native, ModelError};
use crate::synth::{generate_scene, load_queries, scene_to_native_files, SynthConfig, SynthError, MODEL_FILE};
use crate::{Bbox3, BboxPolicy, ImageId, SfmModel};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// 1 for bad input, 2 for filesystem trouble, 3 for broken invariants.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Io { .. } => 2,
            Self::Internal(_) => 3,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { path, source } => Self::io(&path, source),
            ModelError::MissingFile(path) => Self::io(&path, "file not found"),
            other => Self::Validation(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { path, source } => Self::io(&path, source),
            SynthError::Model(m) => m.into(),
            other => Self::Validation(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { path, source } => Self::io(&path, source),
            other => Self::Validation(other.to_string()),
        }
    }
}

impl From<DomGraphError> for CliError {
    fn from(e: DomGraphError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<CorrespondenceError> for CliError {
    fn from(e: CorrespondenceError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        Self::Validation(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BboxConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Experiment settings shared by all subcommands. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Edge threshold on the error ratio.
    pub threshold: f64,
    pub edge_metric: EdgeMetric,
    pub domset_iterations: usize,
    /// Seeds the dominating-set search and the random baselines.
    pub seed: u64,
    /// How many same-size random samples `domset` draws.
    pub random_baselines: usize,
    pub provider: ProviderConfig,
    pub estimator: EstimatorConfig,
    /// Scene units per meter.
    pub unit_scale: f64,
    pub bbox_policy: BboxPolicy,
    /// Replaces the bounding box of every loaded model.
    pub bbox: Option<BboxConfig>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            edge_metric: EdgeMetric::default(),
            domset_iterations: 1000,
            seed: 0,
            random_baselines: 0,
            provider: ProviderConfig::default(),
            estimator: EstimatorConfig::default(),
            unit_scale: 1.0,
            bbox_policy: BboxPolicy::default(),
            bbox: None,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Sets every seed in the config, so one number reseeds a whole run.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.rng_seed = seed;
        self.provider.noise.rng_seed = seed;
        self.estimator.rng_seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: &str| Err(CliError::Validation(format!("config: {field}: {msg}")));
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return bad("threshold", "must be finite and >= 0");
        }
        if self.domset_iterations == 0 {
            return bad("domset_iterations", "must be >= 1");
        }
        if !(self.unit_scale.is_finite() && self.unit_scale > 0.0) {
            return bad("unit_scale", "must be finite and > 0");
        }
        self.provider.validate()?;
        self.estimator.validate()?;
        self.bbox_override()?;
        Ok(())
    }

    fn bbox_override(&self) -> Result<Option<Bbox3>, CliError> {
        self.bbox
            .map(|b| Bbox3::new(b.min.into(), b.max.into()))
            .transpose()
            .map_err(|e| CliError::Validation(format!("config: bbox: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sfm-domset",
    version,
    about = "Compress SfM models with localizability-graph dominating sets"
)]
pub struct Cli {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene (model.json + queries.json).
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the localizability graph of a model.
    Graph {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rebuild even if `out` already holds a graph for the same model and settings.
        #[arg(long)]
        force: bool,
    },
    /// Extract the dominating set (and random baselines) from a graph.
    Domset {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep only the points observed by the dominating set.
    Filter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        domset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use random baseline `i` from the domset file instead of the dominating set.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Localize queries against a model and score them.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Variant name recorded in the report (default: model directory name).
        #[arg(long)]
        name: Option<String>,
        /// Also write per-query rows, timings included.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write a `<out stem>.timing.json` sidecar.
        #[arg(long)]
        timing: bool,
    },
    /// Compare a full-model report with a dominating-set report.
    Compare {
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        domset: PathBuf,
        #[arg(long, num_args = 1..)]
        random: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Loads `model.json` from a directory (or a JSON file directly), falling back to
/// reconstruction text files.
pub fn load_model(path: &Path, bbox_override: Option<Bbox3>) -> Result<SfmModel, CliError> {
    let model = if path.is_file() {
        load_native(path)?
    } else if path.join(MODEL_FILE).is_file() {
        load_native(path.join(MODEL_FILE))?
    } else if path.is_dir() {
        return Ok(load_reconstruction_text(path, bbox_override)?);
    } else {
        return Err(CliError::io(path, "no such file or directory"));
    };
    Ok(match bbox_override {
        Some(b) => model.with_bbox(b)?,
        None => model,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut text = text.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Parses arguments, configures logging and threads, and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new().filter_level(cli.log_level).try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread cap not applied: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.reseed(seed);
    }
    config.validate()?;
    match &cli.command {
        Command::Synth { out } => cmd_synth(&config, out),
        Command::Graph { model, out, force } => cmd_graph(&config, model, out, *force),
        Command::Domset { graph, out } => cmd_domset(&config, graph, out),
        Command::Filter {
            model,
            domset,
            out,
            sample,
        } => cmd_filter(&config, model, domset, out, *sample),
        Command::Eval {
            model,
            queries,
            out,
            name,
            csv,
            timing,
        } => cmd_eval(&config, model, queries, out, name.as_deref(), csv.as_deref(), *timing),
        Command::Compare {
            full,
            domset,
            random,
            out,
        } => cmd_compare(full, domset, random, out),
    }
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scene = generate_scene(&config.synth)?;
    scene_to_native_files(&scene, out)?;
    log::info!(
        "wrote {} images, {} points, {} queries to {}",
        scene.model.num_images(),
        scene.model.num_points(),
        scene.queries.len(),
        out.display()
    );
    Ok(())
}

/// Builds the graph unless `out` already holds one with the same key.
pub fn cmd_graph(config: &RunConfig, model_path: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let model = load_model(model_path, config.bbox_override()?)?;
    let key = GraphKey {
        model_digest: model.digest(),
        threshold: config.threshold,
        metric: config.edge_metric,
        provider: config.provider.clone(),
        estimator: config.estimator,
        seed: config.seed,
    };
    if !force && out.is_file() {
        match read_json::<GraphFile>(out) {
            Ok(cached) if cached.key() == key => {
                log::info!("{} is up to date, skipping graph construction", out.display());
                return Ok(());
            }
            Ok(_) => log::info!("{} was built for other inputs, rebuilding", out.display()),
            Err(e) => log::warn!("ignoring unreadable cache: {e}"),
        }
    }
    let provider = config.provider.build()?;
    let build = build_graph(
        &model,
        provider.as_ref(),
        &config.estimator,
        config.threshold,
        config.edge_metric,
    )?;
    let n = model.num_images();
    if build.attempts() != n * n.saturating_sub(1) {
        return Err(CliError::Internal(format!(
            "{} pair attempts for {n} images",
            build.attempts()
        )));
    }
    log::info!("graph: {} nodes, {} edges", n, build.graph.num_edges());
    write_text(out, &GraphFile::new(key, &build).to_json())
}

pub fn cmd_domset(config: &RunConfig, graph_path: &Path, out: &Path) -> Result<(), CliError> {
    let file: GraphFile = read_json(graph_path)?;
    let graph = file.graph()?;
    let set = best_dominating_set(&graph, config.domset_iterations, config.seed)?;
    if !is_dominating(&graph, &set.members)? {
        return Err(CliError::Internal("best dominating set does not dominate".into()));
    }
    let samples = if config.random_baselines > 0 {
        random_baseline_samples(&graph, set.members.len(), config.random_baselines, config.seed)?
    } else {
        Vec::new()
    };
    log::info!(
        "dominating set of size {} out of {} nodes",
        set.members.len(),
        graph.nodes().len()
    );
    write_text(out, &DomsetFile::new(file.model_digest, set, samples).to_json())
}

pub fn cmd_filter(
    config: &RunConfig,
    model_path: &Path,
    domset_path: &Path,
    out: &Path,
    sample: Option<usize>,
) -> Result<(), CliError> {
    let model = load_model(model_path, config.bbox_override()?)?;
    let file: DomsetFile = read_json(domset_path)?;
    let digest = model.digest();
    if digest != file.model_digest {
        return Err(CliError::Validation(format!(
            "{} was computed for model {}, but {} has digest {}; \
             re-run `sfm-domset graph` and `sfm-domset domset` on this model first",
            domset_path.display(),
            file.model_digest,
            model_path.display(),
            digest
        )));
    }
    let members: &BTreeSet<ImageId> = match sample {
        None => &file.members,
        Some(i) => file.random_samples.get(i).ok_or_else(|| {
            CliError::Validation(format!(
                "{} holds {} random samples, no sample {i}",
                domset_path.display(),
                file.random_samples.len()
            ))
        })?,
    };
    let filtered = model.filter_by_dominating_set(members, config.bbox_policy)?;
    log::info!(
        "kept {}/{} images and {}/{} points",
        filtered.num_images(),
        model.num_images(),
        filtered.num_points(),
        model.num_points()
    );
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    save_native(&filtered, out.join(MODEL_FILE))?;
    Ok(())
}

pub fn cmd_eval(
    config: &RunConfig,
    model_path: &Path,
    queries_path: &Path,
    out: &Path,
    name: Option<&str>,
    csv: Option<&Path>,
    timing: bool,
) -> Result<(), CliError> {
    let model = load_model(model_path, config.bbox_override()?)?;
    let queries = load_queries(queries_path)?;
    let provider = config.provider.build()?;
    let default_name = model_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut report = evaluate(
        name.unwrap_or(&default_name),
        &model,
        &queries,
        provider.as_ref(),
        &config.estimator,
        config.unit_scale,
    )?;
    if let Some(csv) = csv {
        write_text(csv, &report_to_csv(&report))?;
    }
    if !timing {
        report.timing = None;
    }
    log::info!("{}: 5deg-5cm {:.3}", report.variant_name, report.success.deg5_cm5);
    write_parent(out)?;
    save_report(&report, out)?;
    Ok(())
}

pub fn cmd_compare(full: &Path, domset: &Path, random: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let full = load_report(full)?;
    let domset = load_report(domset)?;
    let random = random.iter().map(|p| load_report(p)).collect::<Result<Vec<_>, _>>()?;
    let report = compare(&full, &domset, &random)?;
    write_parent(out)?;
    save_comparison(&report, out)?;
    Ok(())
}

fn write_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e)),
        None => Ok(()),
    }
}
