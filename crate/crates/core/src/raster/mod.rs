//! Tile-based differentiable rasterizer.
//!
//! The forward pass projects every Gaussian to a splat, sorts splats globally
//! by camera-space depth (index as tie-break), bins them into screen tiles, and
//! composites each pixel front to back:
//!
//! ```text
//! C(p) = sum_i T_i a_i c_i + T_final * background
//! a_i  = min(max_alpha, o_i * exp(-1/2 d^T Q_i d)),  T_i = prod_{j<i} (1 - a_j)
//! ```
//!
//! where `Q_i` is the inverse of the projected 2D covariance. Contributions with
//! `a_i < alpha_cutoff` are skipped and a pixel stops once `T` drops below
//! `transmittance_floor`.
//!
//! The splat footprint used for binning is the exact ellipse on which
//! `o_i * G` reaches the cutoff, so tiling never changes which splats
//! contribute to a pixel. Pass `cull_sigma` to clip footprints further.

mod project;

use std::hash::{Hash, Hasher};

use nalgebra::{Vector2, Vector3, Vector4};
use thiserror::Error;

use crate::gaussian::{Camera, GaussianPrimitive};
use crate::par::{self, Execution};
use crate::sh;
use project::{Splat, SplatGrad};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("invalid render settings: {0}")]
    InvalidSettings(String),
    #[error("Gaussian {index} is malformed: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("backward pass does not match the forward pass: {0}")]
    InconsistentState(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
    pub tile_size: usize,
    pub near_plane: f64,
    pub background: [f64; 3],
    pub alpha_cutoff: f64,
    pub transmittance_floor: f64,
    pub max_alpha: f64,
    /// Optional clip of each footprint to `k` standard deviations of the
    /// larger projected axis.
    pub cull_sigma: Option<f64>,
    pub execution: Execution,
}

impl RenderSettings {
    pub fn new(image_size: (usize, usize)) -> Self {
        Self {
            image_size,
            tile_size: 16,
            near_plane: 0.01,
            background: [0.0; 3],
            alpha_cutoff: 1.0 / 255.0,
            transmittance_floor: 1e-4,
            max_alpha: 0.99,
            cull_sigma: None,
            execution: Execution::default(),
        }
    }

    pub fn for_camera(camera: &Camera) -> Self {
        Self::new(camera.image_size)
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        let bad = |m: &str| Err(RasterError::InvalidSettings(m.to_string()));
        if self.tile_size < 1 {
            return bad("tile_size must be >= 1");
        }
        if self.image_size.0 < 1 || self.image_size.1 < 1 {
            return bad("image_size must be >= 1");
        }
        if !(0.0 < self.alpha_cutoff && self.alpha_cutoff < self.max_alpha && self.max_alpha < 1.0) {
            return bad("require 0 < alpha_cutoff < max_alpha < 1");
        }
        if !(self.near_plane > 0.0) {
            return bad("near_plane must be > 0");
        }
        if !(self.transmittance_floor >= 0.0 && self.transmittance_floor < 1.0) {
            return bad("transmittance_floor must be in [0, 1)");
        }
        if let Some(k) = self.cull_sigma {
            if !(k > 0.0) {
                return bad("cull_sigma must be > 0");
            }
        }
        Ok(())
    }
}

/// Result of a forward pass. Buffers are row-major; `color` is interleaved RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub final_transmittance: Vec<f64>,
    pub contributor_count: Vec<u32>,
    /// Fingerprint of the scene, camera and settings that produced this output.
    pub scene_digest: u64,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }
}

/// Gradient of a scalar loss with respect to one Gaussian's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub center: Vector3<f64>,
    /// With respect to the stored (unnormalized) quaternion.
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh_coeffs: Vec<[f64; 3]>,
    /// With respect to the projected pixel-space mean; used by density control.
    pub mean2d: Vector2<f64>,
}

impl GaussianGrad {
    pub fn zeros(sh_count: usize) -> Self {
        Self {
            center: Vector3::zeros(),
            rotation: Vector4::zeros(),
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            sh_coeffs: vec![[0.0; 3]; sh_count],
            mean2d: Vector2::zeros(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.center == Vector3::zeros()
            && self.rotation == Vector4::zeros()
            && self.log_scale == Vector3::zeros()
            && self.opacity_logit == 0.0
            && self.sh_coeffs.iter().all(|c| *c == [0.0; 3])
    }
}

/// One blended contribution at a pixel, as recorded by [`pixel_trace`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub gaussian: usize,
    pub alpha: f64,
    pub transmittance_before: f64,
}

struct Prepared {
    splats: Vec<Splat>,
    /// Per-tile lists of indices into `splats`, each in depth order.
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
}

fn validate_scene(gaussians: &[GaussianPrimitive]) -> Result<(), RasterError> {
    for (index, g) in gaussians.iter().enumerate() {
        if sh::degree_for_count(g.sh_coeffs.len()).is_none() {
            return Err(RasterError::InvalidGaussian {
                index,
                reason: format!("{} SH coefficients is not (L+1)^2 for L <= 3", g.sh_coeffs.len()),
            });
        }
    }
    Ok(())
}

fn digest(gaussians: &[GaussianPrimitive], camera: &Camera, settings: &RenderSettings) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    let mut put = |v: f64| v.to_bits().hash(&mut h);
    for g in gaussians {
        g.center.iter().for_each(|&v| put(v));
        g.rotation.iter().for_each(|&v| put(v));
        g.log_scale.iter().for_each(|&v| put(v));
        put(g.opacity_logit);
        g.sh_coeffs.iter().flatten().for_each(|&v| put(v));
    }
    camera.world_to_camera.iter().for_each(|&v| put(v));
    camera.focal.iter().for_each(|&v| put(v));
    camera.principal_point.iter().for_each(|&v| put(v));
    settings.background.iter().for_each(|&v| put(v));
    for v in [settings.near_plane, settings.alpha_cutoff, settings.transmittance_floor, settings.max_alpha] {
        put(v);
    }
    settings.cull_sigma.map(|v| v.to_bits()).hash(&mut h);
    (gaussians.len(), settings.image_size, settings.tile_size).hash(&mut h);
    h.finish()
}

fn prepare(gaussians: &[GaussianPrimitive], camera: &Camera, settings: &RenderSettings) -> Prepared {
    let projected = par::map_indexed(settings.execution, gaussians.len(), |i| {
        project::project(i, &gaussians[i], camera, settings)
    });
    let mut splats: Vec<Splat> = projected.into_iter().flatten().collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let (w, h) = settings.image_size;
    let ts = settings.tile_size;
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        // Pixel centers sit at integer + 0.5.
        let x0 = (s.bbox[0] - 0.5).ceil().max(0.0);
        let y0 = (s.bbox[1] - 0.5).ceil().max(0.0);
        let x1 = (s.bbox[2] - 0.5).floor().min(w as f64 - 1.0);
        let y1 = (s.bbox[3] - 0.5).floor().min(h as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / ts, x1 as usize / ts);
        let (ty0, ty1) = (y0 as usize / ts, y1 as usize / ts);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    Prepared {
        splats,
        tiles,
        tiles_x,
        tiles_y,
    }
}

/// Composites one pixel, calling `visit(list_pos, alpha, raw_alpha, gauss, t_before)`
/// for each blended splat. Returns `(color, final_T, count)`.
#[inline]
fn shade_pixel(
    splats: &[Splat],
    list: &[u32],
    px: usize,
    py: usize,
    settings: &RenderSettings,
    mut visit: impl FnMut(usize, f64, f64, f64, f64),
) -> ([f64; 3], f64, u32) {
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let mut count = 0;
    for (pos, &si) in list.iter().enumerate() {
        let s = &splats[si as usize];
        if !s.covers(x, y) {
            continue;
        }
        let dx = x - s.mean.x;
        let dy = y - s.mean.y;
        let power = s.conic[(0, 0)] * dx * dx + 2.0 * s.conic[(0, 1)] * dx * dy + s.conic[(1, 1)] * dy * dy;
        let gauss = (-0.5 * power).exp();
        let raw = s.opacity * gauss;
        if raw < settings.alpha_cutoff {
            continue;
        }
        let alpha = raw.min(settings.max_alpha);
        for ch in 0..3 {
            rgb[ch] += t * alpha * s.color[ch];
        }
        visit(pos, alpha, raw, gauss, t);
        t *= 1.0 - alpha;
        count += 1;
        if t < settings.transmittance_floor {
            break;
        }
    }
    for ch in 0..3 {
        rgb[ch] += t * settings.background[ch];
    }
    (rgb, t, count)
}

fn tile_pixels(p: &Prepared, settings: &RenderSettings, tile: usize) -> impl Iterator<Item = (usize, usize)> {
    let ts = settings.tile_size;
    let (w, h) = settings.image_size;
    let (tx, ty) = (tile % p.tiles_x, tile / p.tiles_x);
    let xs = tx * ts..((tx + 1) * ts).min(w);
    let ys = ty * ts..((ty + 1) * ts).min(h);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

/// Forward pass.
pub fn rasterize(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput, RasterError> {
    settings.validate()?;
    validate_scene(gaussians)?;
    let prep = prepare(gaussians, camera, settings);
    let n_tiles = prep.tiles_x * prep.tiles_y;
    let shaded = par::map_indexed(settings.execution, n_tiles, |tile| {
        tile_pixels(&prep, settings, tile)
            .map(|(x, y)| {
                let (rgb, t, n) = shade_pixel(&prep.splats, &prep.tiles[tile], x, y, settings, |_, _, _, _, _| {});
                (x, y, rgb, t, n)
            })
            .collect::<Vec<_>>()
    });
    let (w, h) = settings.image_size;
    let mut out = RenderOutput {
        width: w,
        height: h,
        color: vec![0.0; 3 * w * h],
        final_transmittance: vec![1.0; w * h],
        contributor_count: vec![0; w * h],
        scene_digest: digest(gaussians, camera, settings),
    };
    for (x, y, rgb, t, n) in shaded.into_iter().flatten() {
        let i = y * w + x;
        out.color[3 * i..3 * i + 3].copy_from_slice(&rgb);
        out.final_transmittance[i] = t;
        out.contributor_count[i] = n;
    }
    Ok(out)
}

/// Per-splat alpha trace at one pixel, in compositing order.
pub fn pixel_trace(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    settings: &RenderSettings,
    x: usize,
    y: usize,
) -> Result<Vec<TraceEntry>, RasterError> {
    settings.validate()?;
    validate_scene(gaussians)?;
    let prep = prepare(gaussians, camera, settings);
    let tile = (y / settings.tile_size) * prep.tiles_x + x / settings.tile_size;
    let list = &prep.tiles[tile];
    let mut trace = Vec::new();
    shade_pixel(&prep.splats, list, x, y, settings, |pos, alpha, _, _, t| {
        trace.push(TraceEntry {
            gaussian: prep.splats[list[pos] as usize].index,
            alpha,
            transmittance_before: t,
        })
    });
    Ok(trace)
}

/// Reverse pass for `L = sum(upstream * color)`.
///
/// `forward` must be the output of [`rasterize`] on the same inputs. Returns
/// one gradient per input Gaussian (zero for culled ones). Per-tile partial
/// sums are reduced in tile order, so the result does not depend on
/// [`Execution`].
pub fn rasterize_backward(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    settings: &RenderSettings,
    forward: &RenderOutput,
    upstream: &[f64],
) -> Result<Vec<GaussianGrad>, RasterError> {
    settings.validate()?;
    validate_scene(gaussians)?;
    let (w, h) = settings.image_size;
    if forward.width != w || forward.height != h {
        return Err(RasterError::InconsistentState("image size differs from the forward pass".into()));
    }
    if forward.scene_digest != digest(gaussians, camera, settings) {
        return Err(RasterError::InconsistentState(
            "scene, camera or settings changed since the forward pass".into(),
        ));
    }
    if upstream.len() != 3 * w * h {
        return Err(RasterError::InconsistentState(format!(
            "upstream gradient has {} entries, expected {}",
            upstream.len(),
            3 * w * h
        )));
    }
    let prep = prepare(gaussians, camera, settings);
    let n_tiles = prep.tiles_x * prep.tiles_y;
    let partials = par::map_indexed(settings.execution, n_tiles, |tile| {
        let list = &prep.tiles[tile];
        let mut acc = vec![SplatGrad::default(); list.len()];
        let mut touched = vec![false; list.len()];
        let mut contribs: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
        for (x, y) in tile_pixels(&prep, settings, tile) {
            let i = y * w + x;
            let up = [upstream[3 * i], upstream[3 * i + 1], upstream[3 * i + 2]];
            if up == [0.0; 3] {
                continue;
            }
            contribs.clear();
            shade_pixel(&prep.splats, list, x, y, settings, |pos, a, raw, g, t| {
                contribs.push((pos, a, raw, g, t))
            });
            let mut accum = settings.background;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for &(pos, alpha, raw, gauss, t) in contribs.iter().rev() {
                let s = &prep.splats[list[pos] as usize];
                let sg = &mut acc[pos];
                touched[pos] = true;
                let mut dalpha = 0.0;
                for ch in 0..3 {
                    sg.color[ch] += up[ch] * t * alpha;
                    dalpha += up[ch] * t * (s.color[ch] - accum[ch]);
                    accum[ch] = alpha * s.color[ch] + (1.0 - alpha) * accum[ch];
                }
                if raw < settings.max_alpha {
                    sg.opacity += dalpha * gauss;
                    let dpower = -0.5 * gauss * s.opacity * dalpha;
                    let dx = px - s.mean.x;
                    let dy = py - s.mean.y;
                    let q = &s.conic;
                    sg.mean[0] -= dpower * 2.0 * (q[(0, 0)] * dx + q[(0, 1)] * dy);
                    sg.mean[1] -= dpower * 2.0 * (q[(0, 1)] * dx + q[(1, 1)] * dy);
                    sg.conic[0] += dpower * dx * dx;
                    sg.conic[1] += dpower * dx * dy;
                    sg.conic[2] += dpower * dy * dy;
                }
            }
        }
        list.iter()
            .zip(acc)
            .zip(touched)
            .filter(|(_, t)| *t)
            .map(|((&si, g), _)| (si, g))
            .collect::<Vec<_>>()
    });
    let mut per_splat = vec![SplatGrad::default(); prep.splats.len()];
    for (si, g) in partials.into_iter().flatten() {
        per_splat[si as usize].add(&g);
    }
    let mut slot_of = vec![usize::MAX; gaussians.len()];
    for (si, s) in prep.splats.iter().enumerate() {
        slot_of[s.index] = si;
    }
    Ok(par::map_indexed(settings.execution, gaussians.len(), |i| {
        let g = &gaussians[i];
        match slot_of[i] {
            usize::MAX => GaussianGrad::zeros(g.sh_coeffs.len()),
            si => project::backward(g, camera, &per_splat[si]),
        }
    }))
}
