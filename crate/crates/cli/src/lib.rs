//! Library side of the `gs4d` binary: argument definitions, run config and
//! the five commands. Every command returns the JSON document it prints.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gs4d_core::codec::{self, CodecError};
use gs4d_core::dataset::{self, DatasetError, Motion, SynthParams};
use gs4d_core::image::Image;
use gs4d_core::model::ModelError;
use gs4d_core::train::{self, ChunkSpec, EvalSummary, IterationRecord, TrainError};
use serde_json::{json, Value};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Something the caller can fix: flags, config, paths, input files.
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    pub fn to_json(&self) -> Value {
        let kind = match self {
            CliError::Input(_) => "input",
            CliError::Internal(_) => "internal",
        };
        json!({ "error": kind, "code": self.exit_code(), "message": self.to_string() })
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Raster(_) => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        // streams come from the caller, so a bad one is bad input
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptyFrames(_) => CliError::Input(e.to_string()),
            TrainError::Dataset(d) => d.into(),
            TrainError::Model(m) => m.into(),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gs4d", version, about = "Streaming 4D Gaussian splatting with low-rank plane updates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-view dataset.
    Synth(SynthArgs),
    /// Train chunk by chunk and write the stream.
    Train(TrainArgs),
    /// Render one camera at one chunk and time.
    Render(RenderArgs),
    /// Score every chunk of a stream on the held-out views.
    Eval(EvalArgs),
    /// Bandwidth figures of a stream.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub gaussians: usize,
    /// static, oscillate or drift
    #[arg(long, default_value = "oscillate")]
    pub motion: Motion,
    #[arg(long, default_value_t = 6)]
    pub cameras: usize,
    #[arg(long, default_value_t = 100)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 1)]
    pub sh_degree: usize,
    #[arg(long, default_value_t = 0.1)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0.02)]
    pub point_noise: f64,
    /// Held-out camera ids, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "00")]
    pub held_out: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_stream: PathBuf,
    /// Number of chunks to train; 0 trains all of them.
    #[arg(long, default_value_t = 0)]
    pub chunks: usize,
    /// Per-iteration metrics as JSON lines.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub stream: PathBuf,
    /// Dataset holding the camera poses.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub chunk: u32,
    /// Time within the chunk, in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub time: f64,
    #[arg(long)]
    pub camera: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Held-out camera ids, comma separated; defaults to the dataset's list.
    #[arg(long, value_delimiter = ',')]
    pub held_out: Option<Vec<String>>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(cli: &Cli) -> Result<Value, CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} {} does not exist", path.display())))
    }
}

fn read_stream(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Input(format!("stream {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Value, CliError> {
    let params = SynthParams {
        seed: a.seed,
        n_gaussians: a.gaussians,
        motion: a.motion,
        n_cameras: a.cameras,
        timesteps: a.timesteps,
        image_size: (a.width, a.height),
        sh_degree: a.sh_degree,
        amplitude: a.amplitude,
        point_noise: a.point_noise,
        held_out: a.held_out.clone(),
    };
    if params.n_cameras == 0 || params.timesteps == 0 || a.width == 0 || a.height == 0 {
        return Err(CliError::Input("cameras, timesteps, width and height must be >= 1".into()));
    }
    if !(0.0..=0.1).contains(&params.amplitude) {
        return Err(CliError::Input("amplitude must lie in [0, 0.1]".into()));
    }
    let (gt, ds) = dataset::synth_scene(&params)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    ds.write(&a.out)?;
    gt.write(&a.out.join(dataset::GROUND_TRUTH_FILE))?;
    Ok(json!({
        "command": "synth",
        "config": to_value(&params),
        "out": a.out,
        "cameras": ds.cameras.iter().map(|c| c.id.clone()).collect::<Vec<_>>(),
        "timesteps": ds.timesteps,
    }))
}

pub fn cmd_train(a: &TrainArgs) -> Result<Value, CliError> {
    let cfg = a.config.resolve()?;
    require(&a.data, "dataset")?;
    let ds = dataset::load_multiview(&a.data)?;
    let mut lines = String::new();
    let mut sink = |r: &IterationRecord| {
        let line = serde_json::to_string(r).expect("record serializes");
        log::info!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    };
    let out = train::train_stream(&ds, &cfg.model, &cfg.train, a.chunks, &mut sink)?;
    write_file(&a.out_stream, &out.stream)?;
    if let Some(p) = &a.metrics {
        write_file(p, lines.as_bytes())?;
    }
    Ok(json!({
        "command": "train",
        "config": cfg.to_json(),
        "data": a.data,
        "stream": a.out_stream,
        "stream_bytes": out.stream.len(),
        "chunks": to_value(&out.reports),
    }))
}

pub fn cmd_render(a: &RenderArgs) -> Result<Value, CliError> {
    let cfg = a.config.resolve()?;
    require(&a.stream, "stream")?;
    require(&a.data, "dataset")?;
    if !(0.0..=1.0).contains(&a.time) {
        return Err(CliError::Input(format!("--time must lie in [0, 1], got {}", a.time)));
    }
    let ds = dataset::load_multiview(&a.data)?;
    let cam = &ds.cameras[ds.camera_index(&a.camera)?].camera;
    let model = codec::reconstruct_state(&read_stream(&a.stream)?, a.chunk)?;
    let render = model.render(cam, &cfg.train.settings_for(cam), a.time)?;
    let img = Image::from_render(&render);
    img.save_png(&a.out).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(json!({
        "command": "render",
        "config": cfg.to_json(),
        "stream": a.stream,
        "chunk": a.chunk,
        "time": a.time,
        "camera": a.camera,
        "out": a.out,
        "width": img.width,
        "height": img.height,
    }))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Value, CliError> {
    let cfg = a.config.resolve()?;
    require(&a.stream, "stream")?;
    require(&a.data, "dataset")?;
    let mut ds = dataset::load_multiview(&a.data)?;
    if let Some(h) = &a.held_out {
        ds = ds.with_held_out(h.clone())?;
    }
    let (_, eval_views) = dataset::split_train_eval(&ds, &ds.held_out)?;
    let chunks = codec::parse_stream(&read_stream(&a.stream)?)?;
    let mut summaries: Vec<EvalSummary> = Vec::new();
    for c in &chunks {
        let model = codec::reconstruct_from_chunks(&chunks, c.header.chunk_index)?;
        let spec = ChunkSpec {
            index: c.header.chunk_index,
            start: c.header.frame_start as usize,
            count: c.header.frame_count as usize,
        };
        summaries.push(train::evaluate(&model, &ds, &eval_views, &spec, &cfg.train)?);
    }
    let all: Vec<_> = summaries.iter().flat_map(|s| &s.views).collect();
    let n = all.len().max(1) as f64;
    let doc = json!({
        "command": "eval",
        "config": cfg.to_json(),
        "stream": a.stream,
        "data": a.data,
        "held_out": ds.held_out,
        "chunks": to_value(&summaries),
        "views": all.len(),
        "mean_psnr": all.iter().map(|v| v.psnr).sum::<f64>() / n,
        "mean_dssim": all.iter().map(|v| v.dssim).sum::<f64>() / n,
    });
    if let Some(p) = &a.out {
        write_file(p, serde_json::to_string_pretty(&doc).expect("json").as_bytes())?;
    }
    Ok(doc)
}

pub fn cmd_report(a: &ReportArgs) -> Result<Value, CliError> {
    let cfg = a.config.resolve()?;
    require(&a.stream, "stream")?;
    let report = codec::bandwidth_report(&read_stream(&a.stream)?)?;
    Ok(json!({
        "command": "report",
        "config": cfg.to_json(),
        "stream": a.stream,
        "report": to_value(&report),
    }))
}
