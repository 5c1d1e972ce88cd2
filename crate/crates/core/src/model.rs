//! Model hyperparameters and the full scene state at one chunk.

use nalgebra::{Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::deform::{Aabb, DeformDecoder, DeformError, DeformField, TriPlane};
use crate::gaussian::{logit, Camera, GaussianPrimitive};
use crate::raster::{rasterize, RasterError, RenderOutput, RenderSettings};
use crate::sh;

/// Standard deviation of freshly drawn embeddings.
pub const EMBEDDING_INIT_STD: f64 = 0.01;
/// Plane features start uniform in `[-PLANE_INIT_RANGE, PLANE_INIT_RANGE]`.
pub const PLANE_INIT_RANGE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub sh_degree: usize,
    pub embedding_dim: usize,
    pub plane_resolution: usize,
    pub plane_features: usize,
    /// Frequency bands of the time encoding; 0 disables it.
    pub time_freqs: usize,
    pub hidden_width: usize,
    /// Rank λ of delta-chunk factors.
    pub rank: usize,
    pub bounds: Aabb,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sh_degree: 1,
            embedding_dim: 16,
            plane_resolution: 64,
            plane_features: 8,
            time_freqs: 4,
            hidden_width: 256,
            rank: 3,
            bounds: Aabb {
                min: Vector3::repeat(-1.5),
                max: Vector3::repeat(1.5),
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.sh_degree > sh::MAX_DEGREE {
            return fail(format!("sh_degree {} exceeds {}", self.sh_degree, sh::MAX_DEGREE));
        }
        if self.plane_resolution < 2 {
            return fail("plane_resolution must be >= 2".into());
        }
        if self.plane_features < 1 || self.hidden_width < 1 {
            return fail("plane_features and hidden_width must be >= 1".into());
        }
        if self.time_freqs > 16 {
            return fail("time_freqs must be <= 16".into());
        }
        if self.rank < 1 || self.rank > self.plane_resolution {
            return fail(format!("rank must be in 1..={}", self.plane_resolution));
        }
        if (0..3).any(|a| !(self.bounds.max[a] - self.bounds.min[a] > 0.0)) {
            return fail("bounds must have positive extent".into());
        }
        Ok(())
    }

    pub fn decoder_input_width(&self) -> usize {
        3 * self.plane_features + self.embedding_dim + 2 * self.time_freqs
    }

    pub fn sh_count(&self) -> usize {
        sh::coeff_count(self.sh_degree)
    }
}

/// A seed point: position and linear RGB color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

/// Canonical Gaussians plus the deformation field.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub config: ModelConfig,
    pub gaussians: Vec<GaussianPrimitive>,
    pub field: DeformField,
}

impl SceneModel {
    /// Gaussians at `points`, isotropic with `initial_scale`, opacity 0.1; the
    /// field starts as the identity deformation.
    pub fn initialize(
        config: &ModelConfig,
        points: &[SeedPoint],
        initial_scale: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid normal");
        let sh_count = config.sh_count();
        let gaussians = points
            .iter()
            .map(|p| {
                let mut sh_coeffs = vec![[0.0; 3]; sh_count];
                for ch in 0..3 {
                    sh_coeffs[0][ch] = sh::dc_from_color(p.color[ch]);
                }
                GaussianPrimitive {
                    center: p.position,
                    rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                    log_scale: Vector3::repeat(initial_scale.ln()),
                    opacity_logit: logit(0.1),
                    sh_coeffs,
                    embedding: (0..config.embedding_dim).map(|_| normal.sample(&mut rng)).collect(),
                }
            })
            .collect();
        let triplane = TriPlane::random(
            config.plane_resolution,
            config.plane_features,
            config.bounds,
            PLANE_INIT_RANGE,
            &mut rng,
        )?;
        let decoder = DeformDecoder::init(config.decoder_input_width(), config.hidden_width, &mut rng);
        Ok(Self {
            config: config.clone(),
            gaussians,
            field: DeformField {
                triplane,
                decoder,
                time_freqs: config.time_freqs,
            },
        })
    }

    /// Shape checks between the config, the Gaussians and the field.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let c = &self.config;
        let tp = &self.field.triplane;
        if tp.resolution != c.plane_resolution || tp.features != c.plane_features || tp.channels.len() != 3 * c.plane_features {
            return Err(ModelError::Config("tri-plane shape differs from config".into()));
        }
        if self.field.time_freqs != c.time_freqs
            || self.field.decoder.input_width() != c.decoder_input_width()
            || self.field.decoder.hidden_width() != c.hidden_width
        {
            return Err(ModelError::Config("decoder shape differs from config".into()));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.sh_coeffs.len() != c.sh_count() || g.embedding.len() != c.embedding_dim {
                return Err(ModelError::Config(format!("Gaussian {i} has the wrong SH or embedding length")));
            }
        }
        Ok(())
    }

    /// Deformed Gaussians at normalized time `t`.
    pub fn deformed(&self, t: f64) -> Result<Vec<GaussianPrimitive>, ModelError> {
        Ok(self.field.deform(&self.gaussians, t)?.0)
    }

    pub fn render(&self, camera: &Camera, settings: &RenderSettings, t: f64) -> Result<RenderOutput, ModelError> {
        let g = self.deformed(t)?;
        Ok(rasterize(&g, camera, settings)?)
    }

    /// Rounds every parameter to the nearest f32, matching what a receiver
    /// decodes from the stream.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        for g in &mut self.gaussians {
            g.center.iter_mut().for_each(q);
            g.rotation.iter_mut().for_each(q);
            g.log_scale.iter_mut().for_each(q);
            q(&mut g.opacity_logit);
            g.sh_coeffs.iter_mut().flatten().for_each(q);
            g.embedding.iter_mut().for_each(q);
        }
        self.field.triplane.channels.iter_mut().for_each(|m| m.iter_mut().for_each(q));
        let mut flat = self.field.decoder.flatten();
        flat.iter_mut().for_each(q);
        self.field.decoder.unflatten_into(&flat);
        let b = &mut self.field.triplane.bounds;
        b.min.iter_mut().for_each(q);
        b.max.iter_mut().for_each(q);
        self.config.bounds = *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(n: usize) -> Vec<SeedPoint> {
        (0..n)
            .map(|i| SeedPoint {
                position: Vector3::new(i as f64 * 0.1, 0.0, 0.0),
                color: [0.2, 0.5, 0.8],
            })
            .collect()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            plane_resolution: 8,
            plane_features: 2,
            hidden_width: 16,
            embedding_dim: 4,
            time_freqs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.decoder_input_width(), 24 + 16 + 8);
    }

    #[test]
    fn initialize_is_identity_and_seeded() {
        let m = SceneModel::initialize(&small(), &points(5), 0.05, 3).unwrap();
        m.validate().unwrap();
        let again = SceneModel::initialize(&small(), &points(5), 0.05, 3).unwrap();
        assert_eq!(m, again);
        let d = m.deformed(0.7).unwrap();
        for (a, b) in d.iter().zip(&m.gaussians) {
            assert_eq!(a.center, b.center);
            assert_eq!(a.sh_coeffs, b.sh_coeffs);
        }
        let c = sh::eval_sh(&m.gaussians[0].sh_coeffs, &Vector3::z(), 1).unwrap();
        assert!((c[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn validate_catches_mismatch() {
        let mut m = SceneModel::initialize(&small(), &points(2), 0.05, 3).unwrap();
        m.gaussians[1].embedding.push(0.0);
        assert!(m.validate().is_err());
        let mut bad = small();
        bad.rank = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut m = SceneModel::initialize(&small(), &points(3), 0.05, 4).unwrap();
        m.quantize_f32();
        let once = m.clone();
        m.quantize_f32();
        assert_eq!(m, once);
    }
}
