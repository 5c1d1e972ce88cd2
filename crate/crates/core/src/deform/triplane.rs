use nalgebra::{DMatrix, Vector3};
use rand::Rng;

use super::DeformError;

/// The three axis-aligned planes, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlaneAxis {
    XY = 0,
    XZ = 1,
    YZ = 2,
}

impl PlaneAxis {
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::XY, PlaneAxis::XZ, PlaneAxis::YZ];

    /// World axes mapped to the plane's `(column, row)` coordinates.
    pub fn axes(self) -> (usize, usize) {
        match self {
            PlaneAxis::XY => (0, 1),
            PlaneAxis::XZ => (0, 2),
            PlaneAxis::YZ => (1, 2),
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self, DeformError> {
        if (0..3).any(|a| !(max[a] - min[a] > 0.0)) {
            return Err(DeformError::InvalidBounds);
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }
}

/// Three `R x R` feature planes with `F` channels each. Channel `f` of plane
/// `p` is the matrix `channels[p * F + f]`, indexed `(row, col)` by the
/// plane's second and first world axis respectively.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    pub resolution: usize,
    pub features: usize,
    pub bounds: Aabb,
    pub channels: Vec<DMatrix<f64>>,
}

/// Bilinear footprint of a point on one plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PlaneSample {
    pub row: usize,
    pub col: usize,
    /// Weights of `(row, col)`, `(row, col+1)`, `(row+1, col)`, `(row+1, col+1)`.
    pub weights: [f64; 4],
    pub frac: (f64, f64),
    /// `d(col coordinate)/dx` and `d(row coordinate)/dx` along the plane's axes;
    /// zero where the point was clamped.
    pub dgrid: (f64, f64),
}

impl TriPlane {
    pub fn zeros(resolution: usize, features: usize, bounds: Aabb) -> Result<Self, DeformError> {
        if resolution < 2 {
            return Err(DeformError::InvalidResolution(resolution));
        }
        if features < 1 {
            return Err(DeformError::Shape("plane feature count must be >= 1".into()));
        }
        Ok(Self {
            resolution,
            features,
            bounds,
            channels: vec![DMatrix::zeros(resolution, resolution); 3 * features],
        })
    }

    /// Features drawn uniformly from `[-range, range]`.
    pub fn random(
        resolution: usize,
        features: usize,
        bounds: Aabb,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, DeformError> {
        let mut tp = Self::zeros(resolution, features, bounds)?;
        for ch in &mut tp.channels {
            for v in ch.iter_mut() {
                *v = rng.random_range(-range..=range);
            }
        }
        Ok(tp)
    }

    pub fn channel(&self, plane: PlaneAxis, feature: usize) -> &DMatrix<f64> {
        &self.channels[plane as usize * self.features + feature]
    }

    pub fn channel_mut(&mut self, plane: PlaneAxis, feature: usize) -> &mut DMatrix<f64> {
        &mut self.channels[plane as usize * self.features + feature]
    }

    pub fn output_width(&self) -> usize {
        3 * self.features
    }

    fn grid_coord(&self, x: &Vector3<f64>, axis: usize) -> (f64, f64) {
        let ext = self.bounds.extent()[axis];
        let n = (x[axis] - self.bounds.min[axis]) / ext;
        let scale = (self.resolution - 1) as f64;
        if n <= 0.0 {
            (0.0, 0.0)
        } else if n >= 1.0 {
            (scale, 0.0)
        } else {
            (n * scale, scale / ext)
        }
    }

    pub(crate) fn locate(&self, x: &Vector3<f64>, plane: PlaneAxis) -> PlaneSample {
        let (ua, va) = plane.axes();
        let (gu, du) = self.grid_coord(x, ua);
        let (gv, dv) = self.grid_coord(x, va);
        let last = self.resolution - 2;
        let col = (gu.floor() as usize).min(last);
        let row = (gv.floor() as usize).min(last);
        let fu = gu - col as f64;
        let fv = gv - row as f64;
        PlaneSample {
            row,
            col,
            weights: [(1.0 - fv) * (1.0 - fu), (1.0 - fv) * fu, fv * (1.0 - fu), fv * fu],
            frac: (fu, fv),
            dgrid: (du, dv),
        }
    }

    /// Bilinear sample of all channels at `x`, concatenated in plane order
    /// XY, XZ, YZ. Points outside the bounds are clamped to the boundary.
    pub fn sample(&self, x: &Vector3<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_width());
        for plane in PlaneAxis::ALL {
            let s = self.locate(x, plane);
            for f in 0..self.features {
                let m = self.channel(plane, f);
                let w = s.weights;
                out.push(
                    w[0] * m[(s.row, s.col)]
                        + w[1] * m[(s.row, s.col + 1)]
                        + w[2] * m[(s.row + 1, s.col)]
                        + w[3] * m[(s.row + 1, s.col + 1)],
                );
            }
        }
        out
    }

    /// Scatters `grad` (one entry per output feature) into per-channel node
    /// gradients and returns `dL/dx` through the interpolation weights.
    pub(crate) fn sample_backward(
        &self,
        x: &Vector3<f64>,
        grad: &[f64],
        node_grads: &mut [DMatrix<f64>],
    ) -> Vector3<f64> {
        let mut gx = Vector3::zeros();
        for plane in PlaneAxis::ALL {
            let s = self.locate(x, plane);
            let (ua, va) = plane.axes();
            let (fu, fv) = s.frac;
            for f in 0..self.features {
                let k = plane as usize * self.features + f;
                let g = grad[k];
                if g == 0.0 {
                    continue;
                }
                let nm = &mut node_grads[k];
                nm[(s.row, s.col)] += g * s.weights[0];
                nm[(s.row, s.col + 1)] += g * s.weights[1];
                nm[(s.row + 1, s.col)] += g * s.weights[2];
                nm[(s.row + 1, s.col + 1)] += g * s.weights[3];
                let m = &self.channels[k];
                let a = m[(s.row, s.col)];
                let b = m[(s.row, s.col + 1)];
                let c = m[(s.row + 1, s.col)];
                let d = m[(s.row + 1, s.col + 1)];
                let dfu = (1.0 - fv) * (b - a) + fv * (d - c);
                let dfv = (1.0 - fu) * (c - a) + fu * (d - b);
                gx[ua] += g * dfu * s.dgrid.0;
                gx[va] += g * dfv * s.dgrid.1;
            }
        }
        gx
    }
}
