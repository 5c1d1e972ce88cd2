//! Gradient-driven clone / split and low-opacity pruning.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::gaussian::{rotation_matrix, GaussianPrimitive};

/// Scale divisor applied to both children of a split.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Clone, Debug, PartialEq)]
pub struct DensifySettings {
    /// Mean screen-space position gradient norm that triggers densification.
    pub grad_threshold: f64,
    /// Gaussians whose largest scale is at most this are cloned, larger ones split.
    pub dense_scale: f64,
    pub opacity_threshold: f64,
    /// No new Gaussians are added beyond this count.
    pub max_gaussians: usize,
}

/// Accumulated screen-space gradient norms between densification steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradAccumulator {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn add(&mut self, i: usize, norm: f64) {
        self.sum[i] += norm;
        self.count[i] += 1;
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyOutcome {
    /// For every output Gaussian, the input it inherits optimizer state from;
    /// `None` for fresh children.
    pub sources: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small high-gradient Gaussians, splits large ones into two children
/// sampled inside the parent, then prunes those below the opacity threshold.
pub fn densify_and_prune(
    gaussians: &mut Vec<GaussianPrimitive>,
    stats: &GradAccumulator,
    settings: &DensifySettings,
    rng: &mut impl Rng,
) -> DensifyOutcome {
    let n = gaussians.len();
    let mut out: Vec<GaussianPrimitive> = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    let mut appended = Vec::new();
    let mut appended_sources = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    let mut budget = settings.max_gaussians.saturating_sub(n);
    for (i, g) in gaussians.iter().enumerate() {
        let hot = stats.mean(i) >= settings.grad_threshold && budget > 0;
        if !hot {
            out.push(g.clone());
            sources.push(Some(i));
            continue;
        }
        budget -= 1;
        let scale = g.scale();
        if scale.max() <= settings.dense_scale {
            cloned += 1;
            out.push(g.clone());
            sources.push(Some(i));
            appended.push(g.clone());
            appended_sources.push(None);
        } else {
            split += 1;
            let rot = g.unit_rotation().map(|q| rotation_matrix(&q)).unwrap_or_else(|_| nalgebra::Matrix3::identity());
            for child in 0..2 {
                let local = Vector3::from_fn(|k, _| { let z: f64 = StandardNormal.sample(rng); scale[k] * z });
                let mut c = g.clone();
                c.center = g.center + rot * local;
                c.log_scale = g.log_scale.map(|s| s - SPLIT_SCALE_DIVISOR.ln());
                if child == 0 {
                    out.push(c);
                    sources.push(None);
                } else {
                    appended.push(c);
                    appended_sources.push(None);
                }
            }
        }
    }
    out.extend(appended);
    sources.extend(appended_sources);
    let before_prune = out.len();
    let keep: Vec<bool> = out.iter().map(|g| g.opacity() >= settings.opacity_threshold).collect();
    let mut kept = Vec::with_capacity(out.len());
    let mut kept_sources = Vec::with_capacity(out.len());
    for ((g, s), k) in out.into_iter().zip(sources).zip(&keep) {
        if *k {
            kept.push(g);
            kept_sources.push(s);
        }
    }
    *gaussians = kept;
    DensifyOutcome {
        pruned: before_prune - gaussians.len(),
        sources: kept_sources,
        cloned,
        split,
    }
}
