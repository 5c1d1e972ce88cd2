//! Rank-λ adaptation of plane channels: truncated SVD, `U Vᵀ` factors and
//! their cumulative composition across chunks.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::deform::PlaneAxis;

/// Standard deviation of the initial `U` entries.
pub const FACTOR_INIT_STD: f64 = 0.01;

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 80;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowRankError {
    #[error("rank {rank} outside 1..={max}")]
    InvalidRank { rank: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Which plane channel a factor adapts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FactorTarget {
    pub plane: PlaneAxis,
    pub channel: usize,
}

impl FactorTarget {
    pub fn new(plane: PlaneAxis, channel: usize) -> Self {
        Self { plane, channel }
    }

    /// Index into `TriPlane::channels` for `features` channels per plane.
    pub fn flat_index(&self, features: usize) -> usize {
        self.plane as usize * features + self.channel
    }
}

/// `U` (m×λ) and `V` (n×λ) with the adaptation `U Vᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactor {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub target: FactorTarget,
    pub chunk_index: u32,
}

impl LowRankFactor {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>, target: FactorTarget, chunk_index: u32) -> Result<Self, LowRankError> {
        if u.ncols() != v.ncols() {
            return Err(LowRankError::Shape(format!(
                "U has rank {} but V has rank {}",
                u.ncols(),
                v.ncols()
            )));
        }
        let max = u.nrows().min(v.nrows());
        if u.ncols() == 0 || u.ncols() > max {
            return Err(LowRankError::InvalidRank { rank: u.ncols(), max });
        }
        Ok(Self { u, v, target, chunk_index })
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.nrows(), self.v.nrows())
    }

    pub fn product(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    pub fn with_target(mut self, target: FactorTarget, chunk_index: u32) -> Self {
        self.target = target;
        self.chunk_index = chunk_index;
        self
    }
}

/// Top-λ singular triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdTruncation {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl SvdTruncation {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }

    /// Folds the singular values into `U`, giving the identity-Σ factor form.
    pub fn into_factor(self, target: FactorTarget, chunk_index: u32) -> LowRankFactor {
        let mut u = self.u;
        for (j, s) in self.singular_values.iter().enumerate() {
            u.column_mut(j).scale_mut(*s);
        }
        LowRankFactor {
            u,
            v: self.v,
            target,
            chunk_index,
        }
    }
}

/// Full thin SVD by one-sided Jacobi rotations. Returns `(U, σ, V)` with
/// `U` m×k, `V` n×k, `k = min(m, n)` and σ sorted nonincreasing.
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    if a.nrows() < a.ncols() {
        let (u, s, v) = jacobi_svd(&a.transpose());
        return (v, s, u);
    }
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (wp, wq) = (w[(r, p)], w[(r, q)]);
                    w[(r, p)] = c * wp - s * wq;
                    w[(r, q)] = s * wp + c * wq;
                }
                for r in 0..n {
                    let (vp, vq) = (v[(r, p)], v[(r, q)]);
                    v[(r, p)] = c * vp - s * vq;
                    v[(r, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let mut u = DMatrix::zeros(m, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        vs.set_column(k, &v.column(j));
        if s > scale * f64::EPSILON * (m as f64) && s > 0.0 {
            u.set_column(k, &(w.column(j) / s));
            sigma.push(s);
        } else {
            sigma.push(0.0);
        }
    }
    complete_orthonormal(&mut u, &sigma);
    (u, sigma, vs)
}

/// Fills the columns of `u` belonging to zero singular values with unit
/// vectors orthogonal to everything before them.
fn complete_orthonormal(u: &mut DMatrix<f64>, sigma: &[f64]) {
    let m = u.nrows();
    let mut basis = 0;
    for k in 0..u.ncols() {
        if sigma[k] > 0.0 {
            continue;
        }
        while basis < m {
            let mut c = nalgebra::DVector::zeros(m);
            c[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for j in 0..k {
                    let d = u.column(j).dot(&c);
                    c -= u.column(j) * d;
                }
            }
            let norm = c.norm();
            if norm > 1e-8 {
                u.set_column(k, &(c / norm));
                break;
            }
        }
    }
}

pub fn truncated_svd(a: &DMatrix<f64>, rank: usize) -> Result<SvdTruncation, LowRankError> {
    let max = a.nrows().min(a.ncols());
    if rank == 0 || rank > max {
        return Err(LowRankError::InvalidRank { rank, max });
    }
    let (u, s, v) = jacobi_svd(a);
    Ok(SvdTruncation {
        u: u.columns(0, rank).into_owned(),
        singular_values: s[..rank].to_vec(),
        v: v.columns(0, rank).into_owned(),
    })
}

/// `A + U Vᵀ`.
pub fn compose_adaptation(a: &DMatrix<f64>, factor: &LowRankFactor) -> Result<DMatrix<f64>, LowRankError> {
    if factor.shape() != a.shape() {
        return Err(LowRankError::Shape(format!(
            "matrix is {:?} but factor is {:?}",
            a.shape(),
            factor.shape()
        )));
    }
    let mut out = a.clone();
    out.gemm(1.0, &factor.u, &factor.v.transpose(), 1.0);
    Ok(out)
}

/// `U ~ N(0, 0.01²)`, `V = 0`: the initial adaptation is exactly zero.
pub fn factor_init(m: usize, n: usize, rank: usize, seed: u64) -> Result<LowRankFactor, LowRankError> {
    let max = m.min(n);
    if rank == 0 || rank > max {
        return Err(LowRankError::InvalidRank { rank, max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, FACTOR_INIT_STD).expect("valid normal");
    let u = DMatrix::from_fn(m, rank, |_, _| normal.sample(&mut rng));
    Ok(LowRankFactor {
        u,
        v: DMatrix::zeros(n, rank),
        target: FactorTarget::new(PlaneAxis::XY, 0),
        chunk_index: 1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StorageSaving {
    /// Scalars saved, `m n − λ (m + n)`; negative when λ is large.
    pub saved: i64,
    pub ratio: f64,
}

pub fn storage_saving(m: usize, n: usize, rank: usize) -> StorageSaving {
    let full = (m * n) as i64;
    let saved = full - (rank * (m + n)) as i64;
    StorageSaving {
        saved,
        ratio: saved as f64 / full as f64,
    }
}
