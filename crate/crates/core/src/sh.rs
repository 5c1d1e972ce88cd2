//! Real spherical harmonics up to degree 3, in the basis ordering and sign
//! convention used by 3D Gaussian splatting renderers.

use nalgebra::Vector3;
use thiserror::Error;

pub const MAX_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Offset added to the SH sum before clamping.
pub const COLOR_OFFSET: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShError {
    #[error("SH degree {0} exceeds the supported maximum of 3")]
    DegreeTooHigh(usize),
    #[error("expected {expected} SH coefficients for degree {degree}, got {got}")]
    CoefficientCount { degree: usize, expected: usize, got: usize },
}

pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree implied by a coefficient count, if it is a perfect square of a
/// supported degree.
pub fn degree_for_count(count: usize) -> Option<usize> {
    (0..=MAX_DEGREE).find(|&d| coeff_count(d) == count)
}

/// Basis values at `dir` (assumed unit length); writes `coeff_count(degree)` entries.
pub fn basis(degree: usize, dir: &Vector3<f64>, out: &mut [f64]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = C0;
    if degree < 1 {
        return;
    }
    out[1] = -C1 * y;
    out[2] = C1 * z;
    out[3] = -C1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = C2[0] * xy;
    out[5] = C2[1] * yz;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * xz;
    out[8] = C2[4] * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * xy * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
}

/// Partial derivatives of each basis polynomial with respect to `(x, y, z)`,
/// treating the components as independent.
pub fn basis_grad(degree: usize, dir: &Vector3<f64>, out: &mut [[f64; 3]]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = [0.0; 3];
    if degree < 1 {
        return;
    }
    out[1] = [0.0, -C1, 0.0];
    out[2] = [0.0, 0.0, C1];
    out[3] = [-C1, 0.0, 0.0];
    if degree < 2 {
        return;
    }
    out[4] = [C2[0] * y, C2[0] * x, 0.0];
    out[5] = [0.0, C2[1] * z, C2[1] * y];
    out[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
    out[7] = [C2[3] * z, 0.0, C2[3] * x];
    out[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    if degree < 3 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[9] = [6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    out[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
    out[11] = [
        -2.0 * C3[2] * x * y,
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * C3[2] * y * z,
    ];
    out[12] = [
        -6.0 * C3[3] * x * z,
        -6.0 * C3[3] * y * z,
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    out[13] = [
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * C3[4] * x * y,
        8.0 * C3[4] * x * z,
    ];
    out[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
    out[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0];
}

/// Unclamped SH sum per channel (without the 0.5 offset).
pub fn eval_raw(coeffs: &[[f64; 3]], dir: &Vector3<f64>) -> [f64; 3] {
    let degree = degree_for_count(coeffs.len()).expect("coefficient count is a supported square");
    let mut b = [0.0; 16];
    basis(degree, dir, &mut b);
    let mut rgb = [0.0; 3];
    for (bk, c) in b.iter().zip(coeffs) {
        for ch in 0..3 {
            rgb[ch] += bk * c[ch];
        }
    }
    rgb
}

/// View-dependent color: SH sum plus 0.5, clamped at zero from below.
pub fn eval_sh(coeffs: &[[f64; 3]], dir: &Vector3<f64>, degree: usize) -> Result<[f64; 3], ShError> {
    if degree > MAX_DEGREE {
        return Err(ShError::DegreeTooHigh(degree));
    }
    let expected = coeff_count(degree);
    if coeffs.len() != expected {
        return Err(ShError::CoefficientCount {
            degree,
            expected,
            got: coeffs.len(),
        });
    }
    let raw = eval_raw(coeffs, dir);
    Ok(raw.map(|v| (v + COLOR_OFFSET).max(0.0)))
}

/// Degree-0 coefficient that yields `color` for every direction.
pub fn dc_from_color(color: f64) -> f64 {
    (color - COLOR_OFFSET) / C0
}
