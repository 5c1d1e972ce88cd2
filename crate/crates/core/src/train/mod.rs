//! Continual optimization: chunk 0 fits every parameter, later chunks fit only
//! rank-λ factors on the plane channels.

pub mod adam;
pub mod densify;
pub mod loss;

use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{self, CodecError, Precision};
use crate::dataset::{DatasetError, MultiViewDataset, ViewRef};
use crate::deform::{DeformError, DeformField};
use crate::gaussian::GaussianPrimitive;
use crate::image::Image;
use crate::lowrank::{compose_adaptation, factor_init, FactorTarget, LowRankError, LowRankFactor};
use crate::model::{ModelConfig, ModelError, SceneModel, SeedPoint};
use crate::par::Execution;
use crate::raster::{rasterize, rasterize_backward, GaussianGrad, RasterError, RenderSettings};
use adam::Adam;
use densify::{densify_and_prune, DensifySettings, GradAccumulator};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training frames in chunk {0}")]
    EmptyFrames(u32),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LearningRates {
    pub center_init: f64,
    pub center_final: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub embedding: f64,
    pub planes: f64,
    pub decoder: f64,
    pub factors: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center_init: 1.6e-4,
            center_final: 1.6e-6,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            sh_dc: 2.5e-3,
            sh_rest: 1.25e-4,
            embedding: 1e-3,
            planes: 1.6e-3,
            decoder: 1.6e-4,
            factors: 5e-3,
        }
    }
}

impl LearningRates {
    fn all(&self) -> [(&'static str, f64); 11] {
        [
            ("lr_center_init", self.center_init),
            ("lr_center_final", self.center_final),
            ("lr_rotation", self.rotation),
            ("lr_log_scale", self.log_scale),
            ("lr_opacity", self.opacity),
            ("lr_sh_dc", self.sh_dc),
            ("lr_sh_rest", self.sh_rest),
            ("lr_embedding", self.embedding),
            ("lr_planes", self.planes),
            ("lr_decoder", self.decoder),
            ("lr_factors", self.factors),
        ]
    }

    /// Exponential decay from `center_init` to `center_final` over `total` steps.
    pub fn center_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.center_init;
        }
        let f = (step as f64 / total as f64).min(1.0);
        (self.center_init.ln() * (1.0 - f) + self.center_final.ln() * f).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub chunk_length: usize,
    pub base_iterations: usize,
    pub delta_iterations: usize,
    /// Base-chunk iterations that fit the canonical Gaussians before the
    /// deformation field is switched on.
    pub static_warmup: usize,
    pub lr: LearningRates,
    pub w_ssim: f64,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub densify: DensifySettings,
    /// Initial isotropic scale of seeded Gaussians.
    pub initial_scale: f64,
    /// Seed points drawn when the dataset has no point cloud.
    pub random_points: usize,
    pub seed: u64,
    /// Emit an iteration record every this many iterations (0 = never).
    pub log_interval: usize,
    pub background: [f64; 3],
    pub tile_size: usize,
    pub cull_sigma: Option<f64>,
    pub precision: Precision,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            chunk_length: 50,
            base_iterations: 5000,
            delta_iterations: 2000,
            static_warmup: 500,
            lr: LearningRates::default(),
            w_ssim: 0.2,
            densify_from: 500,
            densify_until: 3500,
            densify_interval: 100,
            densify: DensifySettings {
                grad_threshold: 2e-4,
                dense_scale: 0.05,
                opacity_threshold: 0.005,
                max_gaussians: 20_000,
            },
            initial_scale: 0.05,
            random_points: 1000,
            seed: 0,
            log_interval: 100,
            background: [0.0; 3],
            tile_size: 16,
            cull_sigma: None,
            precision: Precision::F32,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.chunk_length < 1 {
            return fail("chunk_length must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.w_ssim) {
            return fail(format!("w_ssim must lie in [0, 1], got {}", self.w_ssim));
        }
        for (name, v) in self.lr.all() {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.initial_scale > 0.0) {
            return fail("initial_scale must be positive".into());
        }
        if self.densify_interval == 0 {
            return fail("densify_interval must be >= 1".into());
        }
        if self.background.iter().any(|c| !c.is_finite()) {
            return fail("background must be finite".into());
        }
        if self.tile_size < 1 {
            return fail("tile_size must be >= 1".into());
        }
        if self.cull_sigma.is_some_and(|s| !(s > 0.0)) {
            return fail("cull_sigma must be positive".into());
        }
        Ok(())
    }

    pub fn settings_for(&self, camera: &crate::gaussian::Camera) -> RenderSettings {
        let mut s = RenderSettings::for_camera(camera);
        s.background = self.background;
        s.tile_size = self.tile_size;
        s.cull_sigma = self.cull_sigma;
        s.execution = self.execution;
        s
    }
}

/// A contiguous frame window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ChunkSpec {
    pub index: u32,
    pub start: usize,
    pub count: usize,
}

impl ChunkSpec {
    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && t < self.start + self.count
    }

    /// Time normalized to `[0, 1]` within the chunk.
    pub fn normalized_time(&self, t: usize) -> f64 {
        (t as f64 - self.start as f64) / (self.count.max(2) - 1) as f64
    }
}

/// Splits `timesteps` frames into chunks of `chunk_length` (the last may be shorter).
pub fn chunk_specs(timesteps: usize, chunk_length: usize) -> Vec<ChunkSpec> {
    let len = chunk_length.max(1);
    (0..timesteps.div_ceil(len))
        .map(|i| ChunkSpec {
            index: i as u32,
            start: i * len,
            count: len.min(timesteps - i * len),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub chunk: u32,
    pub iteration: usize,
    pub loss: f64,
    pub psnr: f64,
    pub dssim: f64,
    pub wall_ms: u64,
}

/// Sink for per-iteration metrics.
pub type MetricsSink<'a> = &'a mut dyn FnMut(&IterationRecord);

struct ChunkViews {
    views: Vec<(ViewRef, Image)>,
}

fn load_views(dataset: &MultiViewDataset, views: &[ViewRef], spec: &ChunkSpec) -> Result<ChunkViews, TrainError> {
    let mut out = Vec::new();
    for v in views.iter().filter(|v| spec.contains(v.timestep)) {
        out.push((*v, dataset.frame(*v)?));
    }
    if out.is_empty() {
        return Err(TrainError::EmptyFrames(spec.index));
    }
    Ok(ChunkViews { views: out })
}

/// Initial model from the dataset's point cloud, or from uniform random points
/// inside the model bounds when there is none.
pub fn initial_model(
    dataset: &MultiViewDataset,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<SceneModel, TrainError> {
    let points = match &dataset.points {
        Some(p) if !p.is_empty() => p.clone(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
            let b = model_config.bounds;
            (0..cfg.random_points)
                .map(|_| SeedPoint {
                    position: Vector3::from_fn(|k, _| rng.random_range(b.min[k]..b.max[k])),
                    color: [0.5; 3],
                })
                .collect()
        }
    };
    Ok(SceneModel::initialize(model_config, &points, cfg.initial_scale, cfg.seed)?)
}

fn record(chunk: u32, iteration: usize, lv: &loss::LossValue, render: &[f64], gt: &[f64], start: &Instant) -> IterationRecord {
    IterationRecord {
        chunk,
        iteration,
        loss: lv.loss,
        psnr: loss::psnr(render, gt),
        dssim: (1.0 - lv.ssim) / 2.0,
        wall_ms: start.elapsed().as_millis() as u64,
    }
}

/// Optimizer state for the per-Gaussian parameter groups.
struct GaussianOptim {
    center: Adam,
    rotation: Adam,
    log_scale: Adam,
    opacity: Adam,
    sh_dc: Adam,
    sh_rest: Adam,
    embedding: Adam,
}

impl GaussianOptim {
    fn new(n: usize, sh_count: usize, de: usize) -> Self {
        Self {
            center: Adam::new(3 * n),
            rotation: Adam::new(4 * n),
            log_scale: Adam::new(3 * n),
            opacity: Adam::new(n),
            sh_dc: Adam::new(3 * n),
            sh_rest: Adam::new(3 * (sh_count - 1) * n),
            embedding: Adam::new(de * n),
        }
    }

    fn remap(&mut self, sources: &[Option<usize>], sh_count: usize, de: usize) {
        self.center.remap_rows(sources, 3);
        self.rotation.remap_rows(sources, 4);
        self.log_scale.remap_rows(sources, 3);
        self.opacity.remap_rows(sources, 1);
        self.sh_dc.remap_rows(sources, 3);
        self.sh_rest.remap_rows(sources, 3 * (sh_count - 1));
        self.embedding.remap_rows(sources, de);
    }
}

/// Runs Adam on one per-Gaussian group. `param` exposes the group's slice of a
/// Gaussian and `grad` writes the matching gradient entries.
fn step_group(
    adam: &mut Adam,
    lr: f64,
    gs: &mut [GaussianPrimitive],
    width: usize,
    param: impl Fn(&mut GaussianPrimitive) -> &mut [f64],
    grad: impl Fn(usize, &mut [f64]),
) {
    if width == 0 {
        return;
    }
    let mut flat = Vec::with_capacity(width * gs.len());
    for g in gs.iter_mut() {
        flat.extend_from_slice(param(g));
    }
    let mut grads = vec![0.0; flat.len()];
    for (i, chunk) in grads.chunks_exact_mut(width).enumerate() {
        grad(i, chunk);
    }
    adam.update(&mut flat, &grads, lr);
    for (g, vals) in gs.iter_mut().zip(flat.chunks_exact(width)) {
        param(g).copy_from_slice(vals);
    }
}

fn step_gaussians(
    opt: &mut GaussianOptim,
    lr: &LearningRates,
    center_lr: f64,
    gs: &mut [GaussianPrimitive],
    grads: &[GaussianGrad],
    embedding_grads: Option<&[Vec<f64>]>,
) {
    let sh_rest = gs.first().map_or(0, |g| 3 * (g.sh_coeffs.len() - 1));
    let de = gs.first().map_or(0, |g| g.embedding.len());
    step_group(&mut opt.center, center_lr, gs, 3, |g| g.center.as_mut_slice(), |i, o| {
        o.copy_from_slice(grads[i].center.as_slice())
    });
    step_group(&mut opt.rotation, lr.rotation, gs, 4, |g| g.rotation.as_mut_slice(), |i, o| {
        o.copy_from_slice(grads[i].rotation.as_slice())
    });
    step_group(&mut opt.log_scale, lr.log_scale, gs, 3, |g| g.log_scale.as_mut_slice(), |i, o| {
        o.copy_from_slice(grads[i].log_scale.as_slice())
    });
    step_group(&mut opt.opacity, lr.opacity, gs, 1, |g| std::slice::from_mut(&mut g.opacity_logit), |i, o| {
        o[0] = grads[i].opacity_logit
    });
    step_group(&mut opt.sh_dc, lr.sh_dc, gs, 3, |g| &mut g.sh_coeffs[0][..], |i, o| {
        o.copy_from_slice(&grads[i].sh_coeffs[0])
    });
    step_group(&mut opt.sh_rest, lr.sh_rest, gs, sh_rest, |g| g.sh_coeffs[1..].as_flattened_mut(), |i, o| {
        o.copy_from_slice(grads[i].sh_coeffs[1..].as_flattened())
    });
    if let Some(eg) = embedding_grads {
        step_group(&mut opt.embedding, lr.embedding, gs, de, |g| &mut g.embedding[..], |i, o| {
            o.copy_from_slice(&eg[i])
        });
    }
}

struct FieldOptim {
    planes: Vec<Adam>,
    decoder: Adam,
}

impl FieldOptim {
    fn new(field: &DeformField) -> Self {
        Self {
            planes: field.triplane.channels.iter().map(|m| Adam::new(m.len())).collect(),
            decoder: Adam::new(field.decoder.parameter_count()),
        }
    }
}

/// Fits every parameter of `model` to the training views of `spec`.
pub fn train_base_chunk(
    mut model: SceneModel,
    dataset: &MultiViewDataset,
    train_views: &[ViewRef],
    spec: &ChunkSpec,
    cfg: &TrainConfig,
    sink: MetricsSink,
) -> Result<SceneModel, TrainError> {
    cfg.validate()?;
    model.validate()?;
    let data = load_views(dataset, train_views, spec)?;
    if cfg.base_iterations == 0 {
        return Ok(model);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (spec.index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let sh_count = model.config.sh_count();
    let de = model.config.embedding_dim;
    let mut gopt = GaussianOptim::new(model.gaussians.len(), sh_count, de);
    let mut fopt = FieldOptim::new(&model.field);
    let mut stats = GradAccumulator::new(model.gaussians.len());
    for it in 0..cfg.base_iterations {
        let (view, gt_img) = &data.views[rng.random_range(0..data.views.len())];
        let cam = &dataset.cameras[view.camera].camera;
        let settings = cfg.settings_for(cam);
        let gt = gt_img.to_f64();
        let t = spec.normalized_time(view.timestep);
        let deforming = it >= cfg.static_warmup;
        let (scene, cache) = if deforming {
            let (d, c) = model.field.deform(&model.gaussians, t)?;
            (d, Some(c))
        } else {
            (model.gaussians.clone(), None)
        };
        let out = rasterize(&scene, cam, &settings)?;
        let lv = loss::loss(&out.color, &gt, out.width, out.height, cfg.w_ssim);
        let grads = rasterize_backward(&scene, cam, &settings, &out, &lv.grad)?;
        for (i, g) in grads.iter().enumerate() {
            let n = g.mean2d.norm();
            if n > 0.0 {
                stats.add(i, n);
            }
        }
        let center_lr = cfg.lr.center_at(it, cfg.base_iterations);
        match cache {
            Some(cache) => {
                let fg = model.field.backward(&model.gaussians, &cache, &grads)?;
                step_gaussians(&mut gopt, &cfg.lr, center_lr, &mut model.gaussians, &fg.gaussians, Some(&fg.embeddings));
                for ((ch, adam), g) in model.field.triplane.channels.iter_mut().zip(&mut fopt.planes).zip(&fg.planes) {
                    adam.update(ch.as_mut_slice(), g.as_slice(), cfg.lr.planes);
                }
                let mut flat = model.field.decoder.flatten();
                fopt.decoder.update(&mut flat, &fg.decoder.flatten(), cfg.lr.decoder);
                model.field.decoder.unflatten_into(&flat);
            }
            None => step_gaussians(&mut gopt, &cfg.lr, center_lr, &mut model.gaussians, &grads, None),
        }
        let step = it + 1;
        if step >= cfg.densify_from && step <= cfg.densify_until && step % cfg.densify_interval == 0 {
            let outcome = densify_and_prune(&mut model.gaussians, &stats, &cfg.densify, &mut rng);
            gopt.remap(&outcome.sources, sh_count, de);
            stats = GradAccumulator::new(model.gaussians.len());
            log::debug!(
                "chunk {} iter {step}: cloned {}, split {}, pruned {}, now {} Gaussians",
                spec.index,
                outcome.cloned,
                outcome.split,
                outcome.pruned,
                model.gaussians.len()
            );
        }
        if cfg.log_interval > 0 && (it % cfg.log_interval == 0 || step == cfg.base_iterations) {
            sink(&record(spec.index, it, &lv, &out.color, &gt, &start));
        }
    }
    Ok(model)
}

/// Plane channels of `base` with every factor added.
pub fn adapted_field(base: &DeformField, factors: &[LowRankFactor]) -> Result<DeformField, TrainError> {
    let mut field = base.clone();
    let features = field.triplane.features;
    for f in factors {
        let idx = f.target.flat_index(features);
        let ch = field
            .triplane
            .channels
            .get_mut(idx)
            .ok_or_else(|| LowRankError::Shape(format!("no plane channel {idx}")))?;
        *ch = compose_adaptation(ch, f)?;
    }
    Ok(field)
}

/// One factor per plane channel, `U` random and `V = 0`.
pub fn initial_factors(model: &SceneModel, chunk_index: u32, seed: u64) -> Result<Vec<LowRankFactor>, TrainError> {
    let r = model.config.plane_resolution;
    let f = model.config.plane_features;
    let mut out = Vec::with_capacity(3 * f);
    for (p, plane) in crate::deform::PlaneAxis::ALL.iter().enumerate() {
        for c in 0..f {
            let s = seed
                .wrapping_mul(0x2545_f491_4f6c_dd1d)
                .wrapping_add(((chunk_index as u64) << 32) | (p * f + c) as u64);
            out.push(factor_init(r, r, model.config.rank, s)?.with_target(FactorTarget::new(*plane, c), chunk_index));
        }
    }
    Ok(out)
}

/// Fits rank-λ factors for chunk `spec.index` on top of `state`; nothing in
/// `state` changes. The factors come back rounded to the stream precision.
pub fn train_delta_chunk(
    state: &SceneModel,
    dataset: &MultiViewDataset,
    train_views: &[ViewRef],
    spec: &ChunkSpec,
    cfg: &TrainConfig,
    sink: MetricsSink,
) -> Result<Vec<LowRankFactor>, TrainError> {
    cfg.validate()?;
    state.validate()?;
    if spec.index == 0 {
        return Err(TrainError::Config("delta training needs chunk index >= 1".into()));
    }
    let data = load_views(dataset, train_views, spec)?;
    let mut factors = initial_factors(state, spec.index, cfg.seed)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (spec.index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut u_opt: Vec<Adam> = factors.iter().map(|f| Adam::new(f.u.len())).collect();
    let mut v_opt: Vec<Adam> = factors.iter().map(|f| Adam::new(f.v.len())).collect();
    let features = state.config.plane_features;
    for it in 0..cfg.delta_iterations {
        let (view, gt_img) = &data.views[rng.random_range(0..data.views.len())];
        let cam = &dataset.cameras[view.camera].camera;
        let settings = cfg.settings_for(cam);
        let gt = gt_img.to_f64();
        let field = adapted_field(&state.field, &factors)?;
        let (scene, cache) = field.deform(&state.gaussians, spec.normalized_time(view.timestep))?;
        let out = rasterize(&scene, cam, &settings)?;
        let lv = loss::loss(&out.color, &gt, out.width, out.height, cfg.w_ssim);
        let grads = rasterize_backward(&scene, cam, &settings, &out, &lv.grad)?;
        let fg = field.backward(&state.gaussians, &cache, &grads)?;
        for (k, f) in factors.iter_mut().enumerate() {
            let g: &DMatrix<f64> = &fg.planes[f.target.flat_index(features)];
            let du = g * &f.v;
            let dv = g.transpose() * &f.u;
            u_opt[k].update(f.u.as_mut_slice(), du.as_slice(), cfg.lr.factors);
            v_opt[k].update(f.v.as_mut_slice(), dv.as_slice(), cfg.lr.factors);
        }
        if cfg.log_interval > 0 && (it % cfg.log_interval == 0 || it + 1 == cfg.delta_iterations) {
            sink(&record(spec.index, it, &lv, &out.color, &gt, &start));
        }
    }
    codec::quantize_factors(&mut factors, cfg.precision);
    Ok(factors)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub camera: String,
    pub timestep: usize,
    pub psnr: f64,
    pub dssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub chunk: u32,
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_dssim: f64,
}

/// Renders `model` at every view of `views` inside `spec` and scores it
/// against the dataset frames. Renders are quantized to 8 bits first.
pub fn evaluate(
    model: &SceneModel,
    dataset: &MultiViewDataset,
    views: &[ViewRef],
    spec: &ChunkSpec,
    cfg: &TrainConfig,
) -> Result<EvalSummary, TrainError> {
    let mut out = Vec::new();
    let mut cache: Option<(usize, Vec<GaussianPrimitive>)> = None;
    let mut sorted: Vec<ViewRef> = views.iter().copied().filter(|v| spec.contains(v.timestep)).collect();
    sorted.sort_by_key(|v| (v.timestep, v.camera));
    for v in sorted {
        if cache.as_ref().map(|c| c.0) != Some(v.timestep) {
            cache = Some((v.timestep, model.deformed(spec.normalized_time(v.timestep))?));
        }
        let scene = &cache.as_ref().expect("filled above").1;
        let cam = &dataset.cameras[v.camera];
        let render = rasterize(scene, &cam.camera, &cfg.settings_for(&cam.camera))?;
        let img = Image::from_render(&render).quantized().to_f64();
        let gt = dataset.frame(v)?.to_f64();
        out.push(ViewMetrics {
            camera: cam.id.clone(),
            timestep: v.timestep,
            psnr: loss::psnr(&img, &gt),
            dssim: loss::dssim(&img, &gt, render.width, render.height),
        });
    }
    let n = out.len().max(1) as f64;
    Ok(EvalSummary {
        chunk: spec.index,
        mean_psnr: out.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_dssim: out.iter().map(|m| m.dssim).sum::<f64>() / n,
        views: out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChunkReport {
    pub chunk: u32,
    pub frame_start: usize,
    pub frame_count: usize,
    pub iterations: usize,
    pub gaussians: usize,
    pub bytes: usize,
    pub final_loss: Option<f64>,
    pub eval: Option<EvalSummary>,
    /// Delta chunks only: the previous state scored on this chunk before adaptation.
    pub baseline_eval: Option<EvalSummary>,
    pub wall_ms: u64,
}

/// Output of [`train_stream`].
#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub stream: Vec<u8>,
    pub reports: Vec<ChunkReport>,
    /// Receiver-side state after the last chunk.
    pub state: SceneModel,
}

/// Trains chunk 0 and `chunks - 1` delta chunks, encoding each as it finishes.
/// Eval views (possibly empty) are scored after every chunk.
pub fn train_stream(
    dataset: &MultiViewDataset,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    chunks: usize,
    sink: MetricsSink,
) -> Result<StreamOutput, TrainError> {
    cfg.validate()?;
    model_config.validate()?;
    let (train_views, eval_views) = crate::dataset::split_train_eval(dataset, &dataset.held_out)?;
    let specs = chunk_specs(dataset.timesteps, cfg.chunk_length);
    let n = if chunks == 0 { specs.len() } else { chunks.min(specs.len()) };
    let mut stream = Vec::new();
    let mut reports = Vec::new();
    let mut state: Option<SceneModel> = None;
    for spec in &specs[..n] {
        let t0 = Instant::now();
        let mut last_loss = None;
        let mut wrapped = |r: &IterationRecord| {
            last_loss = Some(r.loss);
            sink(r);
        };
        let mut baseline_eval = None;
        let (bytes, iterations) = if spec.index == 0 {
            let init = initial_model(dataset, model_config, cfg)?;
            let mut m = train_base_chunk(init, dataset, &train_views, spec, cfg, &mut wrapped)?;
            m.quantize_f32();
            let b = codec::encode_base_chunk(&m, spec.start as u32, spec.count as u32)?;
            state = Some(m);
            (b, cfg.base_iterations)
        } else {
            let prev = state.as_mut().expect("chunk 0 runs first");
            if !eval_views.is_empty() {
                baseline_eval = Some(evaluate(prev, dataset, &eval_views, spec, cfg)?);
            }
            let f = train_delta_chunk(prev, dataset, &train_views, spec, cfg, &mut wrapped)?;
            let b = codec::encode_delta_chunk(&f, spec.index, spec.start as u32, spec.count as u32, cfg.precision)?;
            codec::apply_delta(prev, &f)?;
            (b, cfg.delta_iterations)
        };
        let model = state.as_ref().expect("state set above");
        let eval = if eval_views.is_empty() {
            None
        } else {
            Some(evaluate(model, dataset, &eval_views, spec, cfg)?)
        };
        reports.push(ChunkReport {
            chunk: spec.index,
            frame_start: spec.start,
            frame_count: spec.count,
            iterations,
            gaussians: model.gaussians.len(),
            bytes: bytes.len(),
            final_loss: last_loss,
            eval,
            baseline_eval,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
        stream.extend(bytes);
    }
    Ok(StreamOutput {
        stream,
        reports,
        state: state.expect("at least one chunk"),
    })
}
