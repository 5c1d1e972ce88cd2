//! Deformation field: tri-plane local features, per-Gaussian embeddings and a
//! frequency-encoded time input, decoded by a small MLP into per-Gaussian
//! parameter offsets.
//!
//! Offsets are applied additively in the unconstrained parameterization
//! (center, quaternion then renormalize, log-scale, opacity logit, degree-0
//! SH), so a deformed Gaussian can never leave its valid range.

mod decoder;
mod triplane;

use nalgebra::{DMatrix, Vector3, Vector4};
use thiserror::Error;

use crate::gaussian::{normalize_quaternion, normalize_vjp, GaussianPrimitive, GeometryError};
use crate::raster::GaussianGrad;

pub use decoder::{DecoderCache, DecoderGrad, DeformDecoder};
pub use triplane::{Aabb, PlaneAxis, TriPlane};

/// Total width of the decoder output heads.
pub const OUTPUT_WIDTH: usize = 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeformError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("plane resolution {0} is below the minimum of 2")]
    InvalidResolution(usize),
    #[error("bounds must have positive extent on every axis")]
    InvalidBounds,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Per-Gaussian parameter offsets produced by the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeformOutput {
    pub d_center: Vector3<f64>,
    pub d_rotation: Vector4<f64>,
    pub d_log_scale: Vector3<f64>,
    pub d_opacity_logit: f64,
    pub d_sh0: [f64; 3],
}

impl DeformOutput {
    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), OUTPUT_WIDTH);
        Self {
            d_center: Vector3::new(v[0], v[1], v[2]),
            d_rotation: Vector4::new(v[3], v[4], v[5], v[6]),
            d_log_scale: Vector3::new(v[7], v[8], v[9]),
            d_opacity_logit: v[10],
            d_sh0: [v[11], v[12], v[13]],
        }
    }

    pub fn to_array(&self) -> [f64; OUTPUT_WIDTH] {
        let mut a = [0.0; OUTPUT_WIDTH];
        a[0..3].copy_from_slice(self.d_center.as_slice());
        a[3..7].copy_from_slice(self.d_rotation.as_slice());
        a[7..10].copy_from_slice(self.d_log_scale.as_slice());
        a[10] = self.d_opacity_logit;
        a[11..14].copy_from_slice(&self.d_sh0);
        a
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// `(sin(2^k pi t), cos(2^k pi t))` for `k = 0..levels`.
pub fn freq_encode(t: f64, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * levels);
    for k in 0..levels {
        let w = (1u64 << k) as f64 * std::f64::consts::PI;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// Derivative of [`freq_encode`] with respect to `t`.
pub fn freq_encode_grad(t: f64, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * levels);
    for k in 0..levels {
        let w = (1u64 << k) as f64 * std::f64::consts::PI;
        out.push(w * (w * t).cos());
        out.push(-w * (w * t).sin());
    }
    out
}

pub fn sample_triplane(planes: &TriPlane, x: &Vector3<f64>) -> Vec<f64> {
    planes.sample(x)
}

/// Runs the decoder on `[features, embedding, t_enc]`.
pub fn decode_deformation(
    features: &[f64],
    embedding: &[f64],
    t_enc: &[f64],
    decoder: &DeformDecoder,
) -> Result<DeformOutput, DeformError> {
    let mut input = Vec::with_capacity(features.len() + embedding.len() + t_enc.len());
    input.extend_from_slice(features);
    input.extend_from_slice(embedding);
    input.extend_from_slice(t_enc);
    decoder.forward(&input)
}

pub fn apply_deformation(g: &GaussianPrimitive, d: &DeformOutput) -> Result<GaussianPrimitive, DeformError> {
    let mut out = g.clone();
    out.center += d.d_center;
    out.rotation = normalize_quaternion(&(g.rotation + d.d_rotation))?;
    out.log_scale += d.d_log_scale;
    out.opacity_logit += d.d_opacity_logit;
    if let Some(c0) = out.sh_coeffs.first_mut() {
        for ch in 0..3 {
            c0[ch] += d.d_sh0[ch];
        }
    }
    Ok(out)
}

/// Tri-plane, decoder, and time-encoding depth: everything needed to deform a
/// canonical Gaussian set at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformField {
    pub triplane: TriPlane,
    pub decoder: DeformDecoder,
    pub time_freqs: usize,
}

/// State kept from [`DeformField::deform`] for the reverse pass.
#[derive(Clone, Debug)]
pub struct DeformCache {
    pub t: f64,
    pub decoder: DecoderCache,
}

/// Gradients of a loss through [`DeformField::deform`].
#[derive(Clone, Debug)]
pub struct DeformGrads {
    /// With respect to the canonical Gaussians; the center gradient includes
    /// the path through the plane sampling position.
    pub gaussians: Vec<GaussianGrad>,
    pub embeddings: Vec<Vec<f64>>,
    /// One matrix per plane channel, same layout as [`TriPlane::channels`].
    pub planes: Vec<DMatrix<f64>>,
    pub decoder: DecoderGrad,
    pub time: f64,
}

impl DeformField {
    pub fn input_width(&self, embedding_dim: usize) -> usize {
        self.triplane.output_width() + embedding_dim + 2 * self.time_freqs
    }

    fn check(&self, gaussians: &[GaussianPrimitive]) -> Result<(), DeformError> {
        let want = self.decoder.input_width();
        for (i, g) in gaussians.iter().enumerate() {
            let got = self.input_width(g.embedding.len());
            if got != want {
                return Err(DeformError::Shape(format!(
                    "Gaussian {i}: decoder input width {want} but features+embedding+time give {got}"
                )));
            }
        }
        Ok(())
    }

    /// Decoder offsets for every Gaussian at time `t`, plus the cache for backward.
    pub fn decode_all(
        &self,
        gaussians: &[GaussianPrimitive],
        t: f64,
    ) -> Result<(Vec<DeformOutput>, DeformCache), DeformError> {
        self.check(gaussians)?;
        let width = self.decoder.input_width();
        let t_enc = freq_encode(t, self.time_freqs);
        let mut input = DMatrix::zeros(width, gaussians.len());
        for (i, g) in gaussians.iter().enumerate() {
            let feat = self.triplane.sample(&g.center);
            let mut col = input.column_mut(i);
            let mut r = 0;
            for v in feat.iter().chain(&g.embedding).chain(&t_enc) {
                col[r] = *v;
                r += 1;
            }
        }
        let cache = self.decoder.forward_batch(input)?;
        let outs = cache
            .output
            .column_iter()
            .map(|c| DeformOutput::from_slice(c.as_slice()))
            .collect();
        Ok((outs, DeformCache { t, decoder: cache }))
    }

    /// Deformed copies of `gaussians` at time `t`.
    pub fn deform(
        &self,
        gaussians: &[GaussianPrimitive],
        t: f64,
    ) -> Result<(Vec<GaussianPrimitive>, DeformCache), DeformError> {
        let (outs, cache) = self.decode_all(gaussians, t)?;
        let deformed = gaussians
            .iter()
            .zip(&outs)
            .map(|(g, d)| apply_deformation(g, d))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((deformed, cache))
    }

    /// Pulls gradients with respect to the deformed Gaussians back through
    /// apply, decode and sample.
    pub fn backward(
        &self,
        gaussians: &[GaussianPrimitive],
        cache: &DeformCache,
        deformed_grads: &[GaussianGrad],
    ) -> Result<DeformGrads, DeformError> {
        if deformed_grads.len() != gaussians.len() || cache.decoder.input.ncols() != gaussians.len() {
            return Err(DeformError::Shape("gradient count does not match the Gaussian count".into()));
        }
        let n = gaussians.len();
        let mut base = Vec::with_capacity(n);
        let mut d_out = DMatrix::zeros(OUTPUT_WIDTH, n);
        for (i, (g, dg)) in gaussians.iter().zip(deformed_grads).enumerate() {
            let out = cache.decoder.output.column(i);
            let summed = g.rotation + Vector4::new(out[3], out[4], out[5], out[6]);
            let g_rot = normalize_vjp(&summed, &dg.rotation);
            let mut bg = dg.clone();
            bg.rotation = g_rot;
            let mut col = d_out.column_mut(i);
            for k in 0..3 {
                col[k] = dg.center[k];
                col[7 + k] = dg.log_scale[k];
                col[11 + k] = dg.sh_coeffs.first().map_or(0.0, |c| c[k]);
            }
            for k in 0..4 {
                col[3 + k] = g_rot[k];
            }
            col[10] = dg.opacity_logit;
            base.push(bg);
        }
        let (decoder, dx) = self.decoder.backward_batch(&cache.decoder, &d_out);
        let nf = self.triplane.output_width();
        let mut planes = vec![DMatrix::zeros(self.triplane.resolution, self.triplane.resolution); nf];
        let t_grad = freq_encode_grad(cache.t, self.time_freqs);
        let mut time = 0.0;
        let mut embeddings = Vec::with_capacity(n);
        for (i, g) in gaussians.iter().enumerate() {
            let col = dx.column(i);
            let gx = self.triplane.sample_backward(&g.center, &col.as_slice()[..nf], &mut planes);
            base[i].center += gx;
            let de = g.embedding.len();
            embeddings.push(col.as_slice()[nf..nf + de].to_vec());
            time += col.as_slice()[nf + de..]
                .iter()
                .zip(&t_grad)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        Ok(DeformGrads {
            gaussians: base,
            embeddings,
            planes,
            decoder,
            time,
        })
    }
}

#[cfg(test)]
mod tests;
