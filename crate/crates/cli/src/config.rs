//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Command-line `--set key=value`
//! overrides are applied after the file, in order.

use std::collections::BTreeMap;
use std::path::Path;

use gs4d_core::codec::Precision;
use gs4d_core::deform::Aabb;
use gs4d_core::model::ModelConfig;
use gs4d_core::train::TrainConfig;
use gs4d_core::Execution;
use nalgebra::Vector3;

use crate::CliError;

/// Model, training and render settings in one place.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Input(format!("{key}: cannot parse {v:?}")))
}

fn triple(key: &str, v: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(CliError::Input(format!("{key}: expected three comma-separated numbers, got {v:?}")));
    }
    Ok([num(key, parts[0])?, num(key, parts[1])?, num(key, parts[2])?])
}

fn show_triple(v: [f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn vec3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl RunConfig {
    /// Defaults, then `path` (if any), then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "sh_degree" => m.sh_degree = num(key, v)?,
            "embedding_dim" => m.embedding_dim = num(key, v)?,
            "plane_resolution" => m.plane_resolution = num(key, v)?,
            "plane_features" => m.plane_features = num(key, v)?,
            "time_freqs" => m.time_freqs = num(key, v)?,
            "hidden_width" => m.hidden_width = num(key, v)?,
            "rank" => m.rank = num(key, v)?,
            "bounds_min" | "bounds_max" => {
                let x = Vector3::from(triple(key, v)?);
                let (lo, hi) = if key == "bounds_min" { (x, m.bounds.max) } else { (m.bounds.min, x) };
                // checked properly in validate
                m.bounds = Aabb { min: lo, max: hi };
            }
            "chunk_length" => t.chunk_length = num(key, v)?,
            "base_iterations" => t.base_iterations = num(key, v)?,
            "delta_iterations" => t.delta_iterations = num(key, v)?,
            "static_warmup" => t.static_warmup = num(key, v)?,
            "lr_center_init" => t.lr.center_init = num(key, v)?,
            "lr_center_final" => t.lr.center_final = num(key, v)?,
            "lr_rotation" => t.lr.rotation = num(key, v)?,
            "lr_log_scale" => t.lr.log_scale = num(key, v)?,
            "lr_opacity" => t.lr.opacity = num(key, v)?,
            "lr_sh_dc" => t.lr.sh_dc = num(key, v)?,
            "lr_sh_rest" => t.lr.sh_rest = num(key, v)?,
            "lr_embedding" => t.lr.embedding = num(key, v)?,
            "lr_planes" => t.lr.planes = num(key, v)?,
            "lr_decoder" => t.lr.decoder = num(key, v)?,
            "lr_factors" => t.lr.factors = num(key, v)?,
            "w_ssim" => t.w_ssim = num(key, v)?,
            "densify_from" => t.densify_from = num(key, v)?,
            "densify_until" => t.densify_until = num(key, v)?,
            "densify_interval" => t.densify_interval = num(key, v)?,
            "densify_grad_threshold" => t.densify.grad_threshold = num(key, v)?,
            "densify_dense_scale" => t.densify.dense_scale = num(key, v)?,
            "prune_opacity" => t.densify.opacity_threshold = num(key, v)?,
            "max_gaussians" => t.densify.max_gaussians = num(key, v)?,
            "initial_scale" => t.initial_scale = num(key, v)?,
            "random_points" => t.random_points = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "log_interval" => t.log_interval = num(key, v)?,
            "background" => t.background = triple(key, v)?,
            "precision" => {
                t.precision = match v {
                    "f32" => Precision::F32,
                    "f16" => Precision::F16,
                    _ => return Err(CliError::Input(format!("precision: expected f32 or f16, got {v:?}"))),
                }
            }
            "execution" => {
                t.execution = match v {
                    "parallel" => Execution::Parallel,
                    "sequential" => Execution::Sequential,
                    _ => return Err(CliError::Input(format!("execution: expected parallel or sequential, got {v:?}"))),
                }
            }
            "tile_size" => t.tile_size = num(key, v)?,
            "cull_sigma" => {
                t.cull_sigma = match v {
                    "none" | "" => None,
                    _ => Some(num(key, v)?),
                }
            }
            _ => return Err(CliError::Input(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let input = |e: &dyn std::fmt::Display| CliError::Input(e.to_string());
        self.model.validate().map_err(|e| input(&e))?;
        self.train.validate().map_err(|e| input(&e))?;
        Ok(())
    }

    /// Every key with its resolved value, in the same syntax `set` accepts.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let t = &self.train;
        let mut e = BTreeMap::new();
        let mut put = |k: &'static str, v: String| {
            e.insert(k, v);
        };
        put("sh_degree", m.sh_degree.to_string());
        put("embedding_dim", m.embedding_dim.to_string());
        put("plane_resolution", m.plane_resolution.to_string());
        put("plane_features", m.plane_features.to_string());
        put("time_freqs", m.time_freqs.to_string());
        put("hidden_width", m.hidden_width.to_string());
        put("rank", m.rank.to_string());
        put("bounds_min", show_triple(vec3(&m.bounds.min)));
        put("bounds_max", show_triple(vec3(&m.bounds.max)));
        put("chunk_length", t.chunk_length.to_string());
        put("base_iterations", t.base_iterations.to_string());
        put("delta_iterations", t.delta_iterations.to_string());
        put("static_warmup", t.static_warmup.to_string());
        put("lr_center_init", t.lr.center_init.to_string());
        put("lr_center_final", t.lr.center_final.to_string());
        put("lr_rotation", t.lr.rotation.to_string());
        put("lr_log_scale", t.lr.log_scale.to_string());
        put("lr_opacity", t.lr.opacity.to_string());
        put("lr_sh_dc", t.lr.sh_dc.to_string());
        put("lr_sh_rest", t.lr.sh_rest.to_string());
        put("lr_embedding", t.lr.embedding.to_string());
        put("lr_planes", t.lr.planes.to_string());
        put("lr_decoder", t.lr.decoder.to_string());
        put("lr_factors", t.lr.factors.to_string());
        put("w_ssim", t.w_ssim.to_string());
        put("densify_from", t.densify_from.to_string());
        put("densify_until", t.densify_until.to_string());
        put("densify_interval", t.densify_interval.to_string());
        put("densify_grad_threshold", t.densify.grad_threshold.to_string());
        put("densify_dense_scale", t.densify.dense_scale.to_string());
        put("prune_opacity", t.densify.opacity_threshold.to_string());
        put("max_gaussians", t.densify.max_gaussians.to_string());
        put("initial_scale", t.initial_scale.to_string());
        put("random_points", t.random_points.to_string());
        put("seed", t.seed.to_string());
        put("log_interval", t.log_interval.to_string());
        put("background", show_triple(t.background));
        put(
            "precision",
            match t.precision {
                Precision::F32 => "f32",
                Precision::F16 => "f16",
            }
            .into(),
        );
        put(
            "execution",
            match t.execution {
                Execution::Parallel => "parallel",
                Execution::Sequential => "sequential",
            }
            .into(),
        );
        put("tile_size", t.tile_size.to_string());
        put("cull_sigma", t.cull_sigma.map_or("none".into(), |s| s.to_string()));
        e
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.entries()).expect("string map")
    }

    /// The flat text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
