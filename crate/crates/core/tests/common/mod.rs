//! Independent oracles and random-scene generators shared by the integration
//! and acceptance suites.
#![allow(dead_code)]

use gs4d_core::gaussian::{Camera, GaussianPrimitive};
use gs4d_core::raster::RenderSettings;
use gs4d_core::sh;
use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ring_camera(rng: &mut ChaCha8Rng, size: usize) -> Camera {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let eye = Vector3::new(3.0 * theta.cos(), 3.0 * theta.sin(), rng.random_range(-0.8..0.8));
    Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), size as f64 * 1.6, (size, size)).unwrap()
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, degree: usize) -> GaussianPrimitive {
    GaussianPrimitive {
        center: Vector3::from_fn(|_, _| rng.random_range(-0.35..0.35)),
        rotation: Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        log_scale: Vector3::from_fn(|_, _| rng.random_range(-2.3..-1.0)),
        opacity_logit: rng.random_range(-0.8..2.0),
        sh_coeffs: (0..sh::coeff_count(degree))
            .map(|k| {
                let amp = if k == 0 { 1.0 } else { 0.15 };
                [0; 3].map(|_| rng.random_range(-amp..amp))
            })
            .collect(),
        embedding: Vec::new(),
    }
}

pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> Vec<GaussianPrimitive> {
    (0..n).map(|_| random_gaussian(rng, degree)).collect()
}

/// Per-pixel evaluation of the blend equation with one global depth sort and
/// no tiling or footprint culling. Returns `(rgb, transmittance, count)` per pixel.
pub fn brute_force_render(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    s: &RenderSettings,
) -> Vec<([f64; 3], f64, u32)> {
    struct P {
        depth: f64,
        idx: usize,
        mean: [f64; 2],
        q: [f64; 3],
        o: f64,
        c: [f64; 3],
    }
    let w = camera.rotation();
    let t = camera.translation();
    let cam_pos = camera.position();
    let mut ps = Vec::new();
    for (idx, g) in gaussians.iter().enumerate() {
        let pc = w * g.center + t;
        if pc.z <= s.near_plane {
            continue;
        }
        let qn = g.rotation / g.rotation.norm();
        let (qw, qx, qy, qz) = (qn[0], qn[1], qn[2], qn[3]);
        let r = [
            [1.0 - 2.0 * (qy * qy + qz * qz), 2.0 * (qx * qy - qw * qz), 2.0 * (qx * qz + qw * qy)],
            [2.0 * (qx * qy + qw * qz), 1.0 - 2.0 * (qx * qx + qz * qz), 2.0 * (qy * qz - qw * qx)],
            [2.0 * (qx * qz - qw * qy), 2.0 * (qy * qz + qw * qx), 1.0 - 2.0 * (qx * qx + qy * qy)],
        ];
        let sc: Vec<f64> = g.log_scale.iter().map(|v| (2.0 * v).exp()).collect();
        let mut sigma = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    sigma[i][j] += r[i][k] * sc[k] * r[j][k];
                }
            }
        }
        let (fx, fy) = (camera.focal.x, camera.focal.y);
        let jac = [
            [fx / pc.z, 0.0, -fx * pc.x / (pc.z * pc.z)],
            [0.0, fy / pc.z, -fy * pc.y / (pc.z * pc.z)],
        ];
        let mut m = [[0.0; 3]; 2];
        for a in 0..2 {
            for b in 0..3 {
                for k in 0..3 {
                    m[a][b] += jac[a][k] * w[(k, b)];
                }
            }
        }
        let mut cov = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for k in 0..3 {
                    for l in 0..3 {
                        cov[a][b] += m[a][k] * sigma[k][l] * m[b][l];
                    }
                }
            }
        }
        cov[0][0] += 0.3;
        cov[1][1] += 0.3;
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let q = [cov[1][1] / det, -cov[0][1] / det, cov[0][0] / det];
        let dir = (g.center - cam_pos).normalize();
        let degree = sh::degree_for_count(g.sh_coeffs.len()).unwrap();
        let c = sh::eval_sh(&g.sh_coeffs, &dir, degree).unwrap();
        ps.push(P {
            depth: pc.z,
            idx,
            mean: [fx * pc.x / pc.z + camera.principal_point.x, fy * pc.y / pc.z + camera.principal_point.y],
            q,
            o: 1.0 / (1.0 + (-g.opacity_logit).exp()),
            c,
        });
    }
    ps.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.idx.cmp(&b.idx)));
    let (wd, ht) = s.image_size;
    let mut out = Vec::with_capacity(wd * ht);
    for py in 0..ht {
        for px in 0..wd {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut tr = 1.0;
            let mut rgb = [0.0; 3];
            let mut n = 0;
            for p in &ps {
                let dx = x - p.mean[0];
                let dy = y - p.mean[1];
                let power = p.q[0] * dx * dx + 2.0 * p.q[1] * dx * dy + p.q[2] * dy * dy;
                let a = p.o * (-0.5 * power).exp();
                if a < s.alpha_cutoff {
                    continue;
                }
                let a = a.min(s.max_alpha);
                for ch in 0..3 {
                    rgb[ch] += tr * a * p.c[ch];
                }
                tr *= 1.0 - a;
                n += 1;
                if tr < s.transmittance_floor {
                    break;
                }
            }
            for ch in 0..3 {
                rgb[ch] += tr * s.background[ch];
            }
            out.push((rgb, tr, n));
        }
    }
    out
}

/// Relative/absolute agreement rule used by every finite-difference check.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff < abs || diff / analytic.abs().max(numeric.abs()) < rel
}

/// Flat view of every differentiable parameter of a Gaussian, in the order
/// center, rotation, log_scale, opacity_logit, sh.
pub fn params_of(g: &GaussianPrimitive) -> Vec<f64> {
    let mut v: Vec<f64> = g.center.iter().copied().collect();
    v.extend(g.rotation.iter());
    v.extend(g.log_scale.iter());
    v.push(g.opacity_logit);
    v.extend(g.sh_coeffs.iter().flatten());
    v
}

pub fn set_param(g: &mut GaussianPrimitive, k: usize, value: f64) {
    match k {
        0..=2 => g.center[k] = value,
        3..=6 => g.rotation[k - 3] = value,
        7..=9 => g.log_scale[k - 7] = value,
        10 => g.opacity_logit = value,
        _ => {
            let j = k - 11;
            g.sh_coeffs[j / 3][j % 3] = value;
        }
    }
}

pub fn param_group(k: usize) -> &'static str {
    match k {
        0..=2 => "center",
        3..=6 => "rotation",
        7..=9 => "log_scale",
        10 => "opacity_logit",
        _ => "sh_coeffs",
    }
}
