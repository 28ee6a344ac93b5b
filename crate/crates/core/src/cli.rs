//! The `deformcast` command line: run configuration, the six pipeline
//! commands and their on-disk artifacts.
//!
//! Every command reads an optional TOML [`RunConfig`], writes its artifacts
//! into the output directory and records wall-clock timestamps only in a
//! separate `manifest_<command>.json`, so repeated runs with the same config
//! and seed reproduce every other file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::cube_io::{self, CubeFile};
use crate::error::{Error, Result};
use crate::eval::{self, BaselineKind, Evaluation, MetricsReport, EVENT_HALF_WINDOW};
use crate::features::{self, Modality, SplitSpec};
use crate::ingest::{self, TileId, MAX_MISSING_FRACTION};
use crate::model::{ModelConfig, NeuralModel};
use crate::raster::{self, DisplacementCube, GridSpec};
use crate::stgcn::StgcnConfig;
use crate::synth::{self, RegimeSpec};
use crate::training::{self, LossWeights, TrainConfig};
use crate::transformer::TransformerConfig;

pub const THREADS_ENV: &str = "DEFORM_THREADS";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Parser)]
#[command(
    name = "deformcast",
    version,
    about = "Single-step ground-deformation nowcasting from InSAR time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run seed, overriding `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tile: truth cube, parameter maps and an L3 CSV.
    Synth(CommonArgs),
    /// Load an L3 CSV (or the synthetic points), rasterise it and fit the training-window features.
    Ingest(CommonArgs),
    /// Train a Transformer or STGCN and write its checkpoint and training log.
    Train(CommonArgs),
    /// Score a checkpoint or a baseline on the test epochs of the configured tile.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Apply a checkpoint unchanged to another tile with the source normalisation.
    Transfer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target tile as a `DEFCUBE1` displacement cube or an L3 CSV.
        #[arg(long)]
        target: PathBuf,
    },
    /// Merge metrics JSON files into one comparison CSV.
    Report {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Train(_) => "train",
            Command::Eval { .. } => "eval",
            Command::Transfer { .. } => "transfer",
            Command::Report { .. } => "report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// L3 CSV or `DEFCUBE1` displacement cube; the `[synth]` tile when absent.
    pub input: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub train_fraction: f64,
    pub max_missing_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            input: None,
            height: 64,
            width: 64,
            train_fraction: features::DEFAULT_TRAIN_FRACTION,
            max_missing_fraction: MAX_MISSING_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `transformer`, `stgcn`, `linear`, `seasonal` or `persistence`.
    pub kind: String,
    /// `multimodal` or `unimodal`.
    pub modality: String,
    pub history: usize,
    /// Grid, channel and history fields are filled in from the run.
    pub transformer: TransformerConfig,
    pub stgcn: StgcnConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: "transformer".into(),
            modality: "multimodal".into(),
            history: 8,
            transformer: TransformerConfig {
                embed_dim: 64,
                layers: 2,
                heads: 4,
                patch_size: 8,
                dropout: 0.0,
                ..TransformerConfig::default()
            },
            stgcn: StgcnConfig {
                hidden: vec![16],
                ..StgcnConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// `composite`, `mae_only` or `smoothl1_only`.
    pub preset: String,
    pub rel: Option<f64>,
    pub corr: Option<f64>,
    pub grad: Option<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            preset: "composite".into(),
            rel: None,
            corr: None,
            grad: None,
        }
    }
}

/// Everything a command needs. The run seed drives synthesis, initialisation,
/// shuffling and dropout; the seeds inside `[synth]` and `[optim]` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub synth: RegimeSpec,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optim: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out: PathBuf::from("deformcast-out"),
            data: DataConfig::default(),
            synth: RegimeSpec::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            optim: TrainConfig {
                max_epochs: 1000,
                max_steps: Some(300),
                batch_size: 4,
                peak_lr: 2e-3,
                ..TrainConfig::default()
            },
        }
    }
}

const MODEL_KINDS: [&str; 5] = ["transformer", "stgcn", "linear", "seasonal", "persistence"];

fn collect(problems: &mut Vec<String>, field: &str, result: Result<()>) {
    match result {
        Ok(()) => {}
        Err(Error::Config(list)) => problems.extend(list.into_iter().map(|p| format!("{field}: {p}"))),
        Err(e) => problems.push(format!("{field}: {e}")),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(list) => {
                Error::Config(list.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config TOML: {e}")))
    }

    /// Checks every field and reports all problems together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match &self.data.input {
            Some(p) if !p.exists() => problems.push(format!("data.input: {} does not exist", p.display())),
            Some(_) => {}
            None => collect(&mut problems, "synth", self.synth_spec().validate()),
        }
        if self.data.height < 2 || self.data.width < 2 {
            problems.push(format!(
                "data: grid must be at least 2x2, got {}x{}",
                self.data.height, self.data.width
            ));
        }
        collect(
            &mut problems,
            "data.train_fraction",
            SplitSpec::new(self.data.train_fraction).map(|_| ()),
        );
        if !(0.0..=1.0).contains(&self.data.max_missing_fraction) {
            problems.push(format!(
                "data.max_missing_fraction: must be in [0, 1], got {}",
                self.data.max_missing_fraction
            ));
        }
        if !MODEL_KINDS.contains(&self.model.kind.as_str()) {
            problems.push(format!(
                "model.kind: {:?} is not one of {}",
                self.model.kind,
                MODEL_KINDS.join(", ")
            ));
        }
        if self.modality().is_err() {
            problems.push(format!(
                "model.modality: {:?} is not multimodal or unimodal",
                self.model.modality
            ));
        }
        if self.model.history == 0 {
            problems.push("model.history: must be at least 1".into());
        }
        if let (Ok(Some(config)), true) = (self.model_config(), self.data.height >= 2 && self.data.width >= 2) {
            let check = match &config {
                ModelConfig::Transformer(c) => c.validate(),
                ModelConfig::Stgcn(c) => c.validate(),
            };
            collect(&mut problems, &format!("model.{}", config.name()), check);
        }
        match LossWeights::preset(&self.loss.preset) {
            Ok(_) => collect(&mut problems, "loss", self.loss_weights().and_then(|w| w.validate())),
            Err(e) => problems.push(format!("loss.preset: {e}")),
        }
        collect(&mut problems, "optim", self.optim.validate());
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn split(&self) -> Result<SplitSpec> {
        SplitSpec::new(self.data.train_fraction)
    }

    pub fn modality(&self) -> Result<Modality> {
        match self.model.modality.as_str() {
            "multimodal" => Ok(Modality::Multimodal),
            "unimodal" => Ok(Modality::Unimodal),
            other => Err(Error::Invalid(format!("unknown modality {other:?}"))),
        }
    }

    /// Synthetic tile spec with the run seed and the data grid.
    pub fn synth_spec(&self) -> RegimeSpec {
        RegimeSpec {
            seed: self.seed,
            height: self.data.height,
            width: self.data.width,
            ..self.synth.clone()
        }
    }

    /// Learned-model architecture, or `None` for a baseline kind.
    pub fn model_config(&self) -> Result<Option<ModelConfig>> {
        let channels = self.modality()?.channels();
        let (h, w, l) = (self.data.height, self.data.width, self.model.history);
        Ok(match self.model.kind.as_str() {
            "transformer" => Some(ModelConfig::Transformer(TransformerConfig {
                height: h,
                width: w,
                history_length: l,
                input_channels: channels,
                ..self.model.transformer.clone()
            })),
            "stgcn" => Some(ModelConfig::Stgcn(StgcnConfig {
                height: h,
                width: w,
                history_length: l,
                input_channels: channels,
                ..self.model.stgcn.clone()
            })),
            _ => None,
        })
    }

    pub fn baseline_kind(&self) -> Option<BaselineKind> {
        match self.model.kind.as_str() {
            "persistence" => Some(BaselineKind::Persistence),
            "linear" => Some(BaselineKind::Linear),
            "seasonal" => Some(BaselineKind::Seasonal),
            _ => None,
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        let mut w = LossWeights::preset(&self.loss.preset)?;
        w.rel = self.loss.rel.unwrap_or(w.rel);
        w.corr = self.loss.corr.unwrap_or(w.corr);
        w.grad = self.loss.grad.unwrap_or(w.grad);
        Ok(w)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.optim.clone()
        }
    }
}

/// Files a command wrote and a short human summary.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub summary: Vec<String>,
}

impl Outcome {
    fn file(&mut self, p: PathBuf) {
        self.outputs.push(p);
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    started_utc: String,
    finished_utc: String,
    seed: Option<u64>,
    config: Option<String>,
    outputs: Vec<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(vec![format!("{THREADS_ENV}: expected a positive integer, got {v:?}")]))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    Ok(cfg)
}

/// Runs one command inside a pool capped by `DEFORM_THREADS` and writes its manifest.
pub fn run(command: &Command) -> Result<Outcome> {
    let started = now();
    let pool = thread_pool()?;
    let (outcome, out_dir, seed, config) = pool.install(|| -> Result<_> {
        Ok(match command {
            Command::Report { out, metrics } => {
                fs::create_dir_all(out)?;
                (cmd_report(metrics, out)?, out.clone(), None, None)
            }
            Command::Synth(a)
            | Command::Ingest(a)
            | Command::Train(a)
            | Command::Eval { common: a, .. }
            | Command::Transfer { common: a, .. } => {
                let cfg = resolve(a)?;
                let outcome = match command {
                    Command::Synth(_) => cmd_synth(&cfg)?,
                    Command::Ingest(_) => cmd_ingest(&cfg)?,
                    Command::Train(_) => cmd_train(&cfg)?,
                    Command::Eval { checkpoint, .. } => cmd_eval(&cfg, checkpoint.as_deref())?,
                    Command::Transfer { checkpoint, target, .. } => cmd_transfer(&cfg, checkpoint, target)?,
                    Command::Report { .. } => unreachable!(),
                };
                let config = a.config.as_ref().map(|p| p.display().to_string());
                (outcome, cfg.out.clone(), Some(cfg.seed), config)
            }
        })
    })?;
    let manifest = Manifest {
        command: command.name(),
        started_utc: started,
        finished_utc: now(),
        seed,
        config,
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(out_dir.join(format!("manifest_{}.json", command.name())), text + "\n")?;
    Ok(outcome)
}

/// One-line error report: `error code=<category> message="<text>"`.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error code={} message={:?}", e.code(), msg)
}

/// Tile label of a tile-aligned grid.
fn tile_label(grid: &GridSpec) -> String {
    let (x, y) = grid.origin_m;
    let whole = |v: f64| v >= 0.0 && (v / ingest::TILE_SIZE_M).fract() == 0.0;
    if whole(x) && whole(y) {
        TileId::new((x / ingest::TILE_SIZE_M) as u32, (y / ingest::TILE_SIZE_M) as u32).to_string()
    } else {
        String::new()
    }
}

/// Loaded, densified and rasterised L3 CSV plus an ingest summary.
fn ingest_csv(path: &Path, cfg: &RunConfig) -> Result<(DisplacementCube, serde_json::Value)> {
    let loaded = ingest::load_l3_csv(path)?;
    let dense = ingest::densify(&loaded.series, cfg.data.max_missing_fraction)?;
    let grid = GridSpec::for_tile(loaded.series.tile, cfg.data.height, cfg.data.width)?;
    let cube = raster::rasterize_cube(&dense, &grid)?;
    let summary = serde_json::json!({
        "tile": loaded.series.tile.to_string(),
        "epochs": loaded.series.calendar.len(),
        "points_loaded": loaded.series.points.len(),
        "points_kept": dense.points.len(),
        "skipped_rows": loaded.skipped.iter().map(|s| serde_json::json!({"row": s.row, "reason": s.reason})).collect::<Vec<_>>(),
    });
    Ok((cube, summary))
}

fn is_cube_file(path: &Path) -> bool {
    let mut magic = [0u8; 8];
    fs::File::open(path)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut magic))
        .is_ok()
        && magic == *cube_io::CUBE_MAGIC.as_bytes()
}

/// Displacement cube named by `path`: a `DEFCUBE1` file or an L3 CSV.
pub fn load_tile(path: &Path, cfg: &RunConfig) -> Result<DisplacementCube> {
    if is_cube_file(path) {
        cube_io::load_displacement_cube(path)
    } else {
        ingest_csv(path, cfg).map(|(cube, _)| cube)
    }
}

/// Displacement cube of the run: the configured input or the synthetic truth.
pub fn run_cube(cfg: &RunConfig) -> Result<DisplacementCube> {
    match &cfg.data.input {
        Some(p) => load_tile(p, cfg),
        None => Ok(synth::generate_tile(&cfg.synth_spec())?.truth),
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Outcome> {
    let spec = cfg.synth_spec();
    let tile = synth::generate_tile(&spec)?;
    let mut out = Outcome::default();
    let truth = cfg.out.join("truth.cube");
    cube_io::save_displacement_cube(&tile.truth, &truth)?;
    out.file(truth);
    let maps = [
        &tile.maps.velocity,
        &tile.maps.amplitude,
        &tile.maps.phase,
        &tile.maps.step,
    ];
    let fields = CubeFile {
        epochs: 1,
        grid: tile.truth.grid,
        dates: None,
        channels: ["velocity_mm_yr", "amplitude_mm", "phase_rad", "step_mm"]
            .map(String::from)
            .to_vec(),
        data: maps.iter().flat_map(|m| m.iter().copied()).collect(),
    };
    let fields_path = cfg.out.join("truth_fields.cube");
    cube_io::write_cube_file(&fields_path, &fields)?;
    out.file(fields_path);
    let csv = cfg.out.join(spec.tile_id()?.l3_file_name());
    ingest::write_l3_csv(&tile.points, &csv)?;
    out.file(csv);
    let spec_path = cfg.out.join("synth_spec.toml");
    fs::write(
        &spec_path,
        toml::to_string(&spec).map_err(|e| Error::Format(format!("synth spec: {e}")))?,
    )?;
    out.file(spec_path);
    out.summary.push(format!(
        "{} epochs, {} points",
        tile.truth.epochs(),
        tile.points.points.len()
    ));
    Ok(out)
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<Outcome> {
    let (cube, summary) = match &cfg.data.input {
        Some(p) if is_cube_file(p) => (
            cube_io::load_displacement_cube(p)?,
            serde_json::json!({ "source": p.display().to_string() }),
        ),
        Some(p) => ingest_csv(p, cfg)?,
        None => {
            let tile = synth::generate_tile(&cfg.synth_spec())?;
            let dense = ingest::densify(&tile.points, cfg.data.max_missing_fraction)?;
            let cube = raster::rasterize_cube(&dense, &tile.truth.grid)?;
            let summary = serde_json::json!({
                "tile": cfg.synth.tile,
                "epochs": cube.epochs(),
                "points_loaded": tile.points.points.len(),
                "points_kept": dense.points.len(),
                "skipped_rows": [],
            });
            (cube, summary)
        }
    };
    let split = cfg.split()?;
    let prepared = features::prepare(&cube, &split)?;
    let mut out = Outcome::default();
    for (name, result) in [
        (
            "displacement.cube",
            cube_io::save_displacement_cube(&cube, cfg.out.join("displacement.cube")),
        ),
        (
            "statics.cube",
            cube_io::save_static_maps(&prepared.statics, &cube.grid, cfg.out.join("statics.cube")),
        ),
        (
            "norm_stats.cube",
            cube_io::save_norm_stats(&prepared.stats, &cube.grid, cfg.out.join("norm_stats.cube")),
        ),
    ] {
        result?;
        out.file(cfg.out.join(name));
    }
    let path = cfg.out.join("ingest.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text + "\n")?;
    out.file(path);
    out.summary.push(format!(
        "{} epochs on a {}x{} grid",
        cube.epochs(),
        cube.grid.height,
        cube.grid.width
    ));
    Ok(out)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let config = cfg.model_config()?.ok_or_else(|| {
        Error::Config(vec![format!(
            "model.kind: train needs transformer or stgcn, got {:?}",
            cfg.model.kind
        )])
    })?;
    let cube = run_cube(cfg)?;
    let split = cfg.split()?;
    let prepared = features::prepare(&cube, &split)?;
    let samples = features::make_windows(&prepared.cube, config.history(), &split)?;
    let mut model = NeuralModel::new(&config, cfg.seed)?;
    let fit = training::fit(
        &mut model,
        &prepared.cube,
        &samples,
        &cfg.loss_weights()?,
        &cfg.train_config(),
    )?;
    let tile: TileId = tile_label(&cube.grid).parse().unwrap_or(TileId::new(0, 0));
    let ck = ModelCheckpoint::new(tile, cube.grid, &model, fit.ema.clone(), prepared.stats)?;
    let mut out = Outcome::default();
    let ck_path = cfg.out.join(CHECKPOINT_FILE);
    ck.save(&ck_path)?;
    out.file(ck_path);
    let log_path = cfg.out.join(TRAINING_LOG_FILE);
    fs::write(&log_path, training::log_csv(&fit.log))?;
    out.file(log_path);
    out.summary.push(format!(
        "{} steps, best epoch {}, {:?}",
        fit.steps, fit.best_epoch, fit.status
    ));
    Ok(out)
}

/// Metrics JSON/CSV, heatmaps and event diagnostics of one evaluation under `stem`.
fn write_evaluation(dir: &Path, stem: &str, eval: &Evaluation, out: &mut Outcome) -> Result<()> {
    let (json, csv) = eval.report.save(dir, stem)?;
    out.file(json);
    out.file(csv);
    let heat = dir.join(format!("heatmaps_{stem}"));
    eval::write_heatmaps(eval, &heat)?;
    out.file(heat);
    let len = eval.target_epochs.len();
    if len >= 3 {
        let half = EVENT_HALF_WINDOW.min((len - 2) / 2);
        let diag = eval::event_centred_diagnostics(&eval.pred_mm, &eval.truth_mm, half)?;
        let path = dir.join(format!("event_{stem}.csv"));
        fs::write(&path, diag.to_csv())?;
        out.file(path);
    }
    out.summary.push(format!(
        "{stem}: rmse {:.4} mm, r2 {:.4}",
        eval.report.rmse_mm, eval.report.r2
    ));
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Outcome> {
    let cube = run_cube(cfg)?;
    let split = cfg.split()?;
    let tile = tile_label(&cube.grid);
    let mut out = Outcome::default();
    let eval = match cfg.baseline_kind() {
        Some(kind) => {
            let history = cfg.model.history;
            let e = eval::evaluate_baseline(kind, &cube, &split, history)?;
            Evaluation {
                report: e.report.labelled(kind.name(), &tile),
                ..e
            }
        }
        None => {
            let path = checkpoint
                .map(Path::to_path_buf)
                .unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
            let ck = ModelCheckpoint::load(&path)?;
            let e = eval::evaluate_model(&ck, &cube, &split)?;
            let name = format!("{}_{}", ck.config.name(), modality_name(&ck.config)?);
            Evaluation {
                report: e.report.labelled(&name, &tile),
                ..e
            }
        }
    };
    let stem = format!("metrics_{}", eval.report.model);
    write_evaluation(&cfg.out, &stem, &eval, &mut out)?;
    Ok(out)
}

fn modality_name(config: &ModelConfig) -> Result<&'static str> {
    Ok(match config.modality()? {
        Modality::Multimodal => "multimodal",
        Modality::Unimodal => "unimodal",
    })
}

pub fn cmd_transfer(cfg: &RunConfig, checkpoint: &Path, target: &Path) -> Result<Outcome> {
    let ck = ModelCheckpoint::load(checkpoint)?;
    let cube = load_tile(target, cfg)?;
    let split = cfg.split()?;
    let tile = tile_label(&cube.grid);
    let e = eval::cross_site_evaluate(&ck, &cube, &split)?;
    let name = format!("{}_{}_from_{}", ck.config.name(), modality_name(&ck.config)?, ck.tile);
    let model_eval = Evaluation {
        report: e.report.labelled(&name, &tile),
        ..e
    };
    let p = eval::evaluate_baseline(BaselineKind::Persistence, &cube, &split, ck.config.history())?;
    let persistence = Evaluation {
        report: p.report.labelled("persistence", &tile),
        ..p
    };
    let mut out = Outcome::default();
    write_evaluation(&cfg.out, "transfer_model", &model_eval, &mut out)?;
    write_evaluation(&cfg.out, "transfer_persistence", &persistence, &mut out)?;
    Ok(out)
}

pub fn cmd_report(metrics: &[PathBuf], out_dir: &Path) -> Result<Outcome> {
    let reports = metrics
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            MetricsReport::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out_dir.join(COMPARISON_FILE);
    fs::write(&path, eval::comparison_csv(&reports))?;
    let mut out = Outcome::default();
    out.file(path);
    out.summary.push(format!("{} models compared", reports.len()));
    Ok(out)
}
