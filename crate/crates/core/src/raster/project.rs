//! Per-Gaussian projection to an image-plane splat and its reverse-mode
//! counterpart.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use super::{GaussianGrad, RenderSettings};
use crate::gaussian::{
    self, logistic, normalize_quaternion, normalize_vjp, rotation_matrix, rotation_matrix_vjp,
    Camera, GaussianPrimitive, LOW_PASS,
};
use crate::sh;

/// A Gaussian after projection, ready for blending.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub depth: f64,
    pub mean: Vector2<f64>,
    /// Inverse of the 2D covariance.
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Pixel-coordinate box `[xmin, ymin, xmax, ymax]` outside of which the
    /// splat is ignored.
    pub bbox: [f64; 4],
}

impl Splat {
    #[inline]
    pub fn covers(&self, x: f64, y: f64) -> bool {
        x >= self.bbox[0] && x <= self.bbox[2] && y >= self.bbox[1] && y <= self.bbox[3]
    }
}

/// Upstream gradient of one splat's image-plane quantities.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct SplatGrad {
    pub mean: [f64; 2],
    /// `dL/dQ` entries `(00, 01, 11)`; the off-diagonal value applies to both
    /// `Q01` and `Q10`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    pub fn add(&mut self, o: &SplatGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Projects one Gaussian. Returns `None` when it cannot contribute to any pixel.
pub(crate) fn project(
    index: usize,
    g: &GaussianPrimitive,
    camera: &Camera,
    settings: &RenderSettings,
) -> Option<Splat> {
    let w = camera.rotation();
    let p = w * g.center + camera.translation();
    let j = gaussian::compute_jacobian(&p, &camera.focal, settings.near_plane).ok()?;
    let sigma = g.covariance().ok()?;
    let mut cov = gaussian::project_covariance(&sigma, &w, &j);
    cov[(0, 0)] += LOW_PASS;
    cov[(1, 1)] += LOW_PASS;
    let conic = cov.try_inverse()?;
    let opacity = logistic(g.opacity_logit);
    if !(opacity >= settings.alpha_cutoff) {
        return None;
    }
    // Mahalanobis radius at which opacity * G falls to the cutoff.
    let m = 2.0 * (opacity / settings.alpha_cutoff).ln();
    let mut hx = (m * cov[(0, 0)]).sqrt();
    let mut hy = (m * cov[(1, 1)]).sqrt();
    if let Some(k) = settings.cull_sigma {
        let tr = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
        let det = cov.determinant();
        let lmax = tr + (tr * tr - det).max(0.0).sqrt();
        let r = k * lmax.sqrt();
        hx = hx.min(r);
        hy = hy.min(r);
    }
    let pad = 1e-7 * (1.0 + hx.max(hy));
    let mean = camera.project(&p);
    let dir = (g.center - camera.position()).normalize();
    let raw = sh::eval_raw(&g.sh_coeffs, &dir);
    let color = raw.map(|v| (v + sh::COLOR_OFFSET).max(0.0));
    let splat = Splat {
        index,
        depth: p.z,
        mean,
        conic,
        opacity,
        color,
        bbox: [mean.x - hx - pad, mean.y - hy - pad, mean.x + hx + pad, mean.y + hy + pad],
    };
    if !(splat.mean.x.is_finite() && splat.mean.y.is_finite()) {
        return None;
    }
    Some(splat)
}

/// Chains an accumulated [`SplatGrad`] back to the Gaussian's parameters.
pub(crate) fn backward(g: &GaussianPrimitive, camera: &Camera, sg: &SplatGrad) -> GaussianGrad {
    let mut out = GaussianGrad::zeros(g.sh_coeffs.len());
    let w = camera.rotation();
    let p = w * g.center + camera.translation();
    let (fx, fy) = (camera.focal.x, camera.focal.y);
    let (x, y, z) = (p.x, p.y, p.z);
    let j = nalgebra::Matrix2x3::new(fx / z, 0.0, -fx * x / (z * z), 0.0, fy / z, -fy * y / (z * z));
    let q = normalize_quaternion(&g.rotation).expect("projected Gaussians have valid rotations");
    let r = rotation_matrix(&q);
    let d = g.log_scale.map(|s| (2.0 * s).exp());
    let sigma = r * Matrix3::from_diagonal(&d) * r.transpose();
    let m = j * w;
    let mut cov = m * sigma * m.transpose();
    cov[(0, 0)] += LOW_PASS;
    cov[(1, 1)] += LOW_PASS;
    let conic = cov.try_inverse().expect("projected covariance is invertible");

    // conic -> covariance
    let gq = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    let gcov = -(conic * gq * conic);
    // covariance -> (M, Sigma)
    let gsigma = m.transpose() * gcov * m;
    let gm = (gcov + gcov.transpose()) * m * sigma;
    let gj = gm * w.transpose();

    let mut gp = Vector3::zeros();
    let z2 = z * z;
    let z3 = z2 * z;
    gp.x += gj[(0, 2)] * (-fx / z2);
    gp.y += gj[(1, 2)] * (-fy / z2);
    gp.z += gj[(0, 0)] * (-fx / z2)
        + gj[(0, 2)] * (2.0 * fx * x / z3)
        + gj[(1, 1)] * (-fy / z2)
        + gj[(1, 2)] * (2.0 * fy * y / z3);
    let (du, dv) = (sg.mean[0], sg.mean[1]);
    gp.x += du * fx / z;
    gp.y += dv * fy / z;
    gp.z += du * (-fx * x / z2) + dv * (-fy * y / z2);
    out.center += w.transpose() * gp;
    out.mean2d = Vector2::new(du, dv);

    // Sigma = R D R^T
    let gsigma_sym = (gsigma + gsigma.transpose()) * 0.5;
    let rtgr = r.transpose() * gsigma_sym * r;
    for k in 0..3 {
        out.log_scale[k] = rtgr[(k, k)] * 2.0 * d[k];
    }
    let gr = gsigma_sym * r * Matrix3::from_diagonal(&d) * 2.0;
    out.rotation = normalize_vjp(&g.rotation, &rotation_matrix_vjp(&q, &gr));

    let o = logistic(g.opacity_logit);
    out.opacity_logit = sg.opacity * o * (1.0 - o);

    // color -> SH coefficients and view direction
    let v = g.center - camera.position();
    let dir = v.normalize();
    let degree = sh::degree_for_count(g.sh_coeffs.len()).expect("valid SH count");
    let mut basis = [0.0; 16];
    sh::basis(degree, &dir, &mut basis);
    let raw = sh::eval_raw(&g.sh_coeffs, &dir);
    let mut gc = [0.0; 3];
    for ch in 0..3 {
        if raw[ch] + sh::COLOR_OFFSET > 0.0 {
            gc[ch] = sg.color[ch];
        }
    }
    for (k, coeff_grad) in out.sh_coeffs.iter_mut().enumerate() {
        for ch in 0..3 {
            coeff_grad[ch] = basis[k] * gc[ch];
        }
    }
    if degree > 0 {
        let mut bg = [[0.0; 3]; 16];
        sh::basis_grad(degree, &dir, &mut bg);
        let mut gdir = Vector3::zeros();
        for (k, c) in g.sh_coeffs.iter().enumerate() {
            let s = c[0] * gc[0] + c[1] * gc[1] + c[2] * gc[2];
            gdir += Vector3::from(bg[k]) * s;
        }
        out.center += normalize_vjp(&v, &gdir);
    }
    out
}
