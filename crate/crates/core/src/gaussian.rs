//! Gaussian primitives, pinhole cameras, and the covariance math that turns a
//! 3D anisotropic Gaussian into a 2D image-plane splat.
//!
//! Quaternions are stored as `(w, x, y, z)` and normalized on use. Scales are
//! stored as logs and opacity as a logit so the optimizer works in an
//! unconstrained space.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3, Vector4};
use thiserror::Error;

/// Anti-aliasing floor added to both diagonal entries of every projected
/// covariance.
pub const LOW_PASS: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate rotation: quaternion has zero norm")]
    DegenerateRotation,
    #[error("point at depth {depth} is not in front of the near plane {near}")]
    BehindCamera { depth: f64, near: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// One splat of the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    /// `(w, x, y, z)`, not necessarily unit length.
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// `(L+1)^2` RGB coefficient triples, degree-major.
    pub sh_coeffs: Vec<[f64; 3]>,
    pub embedding: Vec<f64>,
}

impl GaussianPrimitive {
    /// An axis-aligned isotropic Gaussian with the given degree-0 color.
    pub fn isotropic(center: Vector3<f64>, scale: f64, opacity: f64, sh_degree: usize) -> Self {
        Self {
            center,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            sh_coeffs: vec![[0.0; 3]; crate::sh::coeff_count(sh_degree)],
            embedding: Vec::new(),
        }
    }

    pub fn opacity(&self) -> f64 {
        logistic(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_rotation(&self) -> Result<Vector4<f64>, GeometryError> {
        normalize_quaternion(&self.rotation)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>, GeometryError> {
        build_covariance(&self.rotation, &self.log_scale)
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn normalize_quaternion(q: &Vector4<f64>) -> Result<Vector4<f64>, GeometryError> {
    let n = q.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(GeometryError::DegenerateRotation);
    }
    Ok(q / n)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to `dL/dq` for a unit quaternion `q` (no normalization).
pub fn rotation_matrix_vjp(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let gx = 2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)]
        - w * g[(1, 2)]
        + z * g[(2, 0)]
        + w * g[(2, 1)]
        - 2.0 * x * g[(2, 2)]);
    let gy = 2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
        + z * g[(1, 2)]
        - w * g[(2, 0)]
        + z * g[(2, 1)]
        - 2.0 * y * g[(2, 2)]);
    let gz = 2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
        - 2.0 * z * g[(1, 1)]
        + y * g[(1, 2)]
        + x * g[(2, 0)]
        + y * g[(2, 1)]);
    Vector4::new(gw, gx, gy, gz)
}

/// Pulls a gradient with respect to `v / |v|` back to `v`.
pub fn normalize_vjp<const D: usize>(
    raw: &nalgebra::SVector<f64, D>,
    grad_unit: &nalgebra::SVector<f64, D>,
) -> nalgebra::SVector<f64, D> {
    let n = raw.norm();
    let u = raw / n;
    (grad_unit - u * u.dot(grad_unit)) / n
}

/// `R S S^T R^T` with `S = diag(exp(log_scale))`.
pub fn build_covariance(
    rotation: &Vector4<f64>,
    log_scale: &Vector3<f64>,
) -> Result<Matrix3<f64>, GeometryError> {
    let q = normalize_quaternion(rotation)?;
    let r = rotation_matrix(&q);
    let s2 = Matrix3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    let sigma = r * s2 * r.transpose();
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// Local affine approximation of the pinhole projection at a camera-space point.
pub fn compute_jacobian(
    p: &Vector3<f64>,
    focal: &Vector2<f64>,
    near: f64,
) -> Result<Matrix2x3<f64>, GeometryError> {
    let z = p.z;
    if z <= near || !z.is_finite() {
        return Err(GeometryError::BehindCamera { depth: z, near });
    }
    let (fx, fy) = (focal.x, focal.y);
    Ok(Matrix2x3::new(
        fx / z,
        0.0,
        -fx * p.x / (z * z),
        0.0,
        fy / z,
        -fy * p.y / (z * z),
    ))
}

/// `J W Σ W^T J^T`, symmetrized. The low-pass floor is not applied here.
pub fn project_covariance(
    sigma: &Matrix3<f64>,
    w_rot: &Matrix3<f64>,
    j: &Matrix2x3<f64>,
) -> Matrix2<f64> {
    let m = j * w_rot;
    let c = m * sigma * m.transpose();
    (c + c.transpose()) * 0.5
}

/// Pinhole camera in OpenCV convention: +x right, +y down, +z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub world_to_camera: Matrix4<f64>,
    pub focal: Vector2<f64>,
    pub principal_point: Vector2<f64>,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl Camera {
    pub fn new(
        world_to_camera: Matrix4<f64>,
        focal: Vector2<f64>,
        principal_point: Vector2<f64>,
        image_size: (usize, usize),
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            world_to_camera,
            focal,
            principal_point,
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` pointing roughly up in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        image_size: (usize, usize),
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("up parallel to view".into()))?;
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(
            w2c,
            Vector2::new(focal, focal),
            Vector2::new(image_size.0 as f64 / 2.0, image_size.1 as f64 / 2.0),
            image_size,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation block is not orthonormal (max deviation {err:e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidCamera(
                "rotation block has determinant != +1".into(),
            ));
        }
        let bottom = self.world_to_camera.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(GeometryError::InvalidCamera(
                "last row of world_to_camera must be (0, 0, 0, 1)".into(),
            ));
        }
        if !(self.focal.x > 0.0 && self.focal.y > 0.0) {
            return Err(GeometryError::InvalidCamera("focal must be positive".into()));
        }
        if self.image_size.0 < 1 || self.image_size.1 < 1 {
            return Err(GeometryError::InvalidCamera("image size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Pixel coordinates of a camera-space point; pixel `(i, j)` has its
    /// center at `(i + 0.5, j + 0.5)`.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.focal.x * p_cam.x / p_cam.z + self.principal_point.x,
            self.focal.y * p_cam.y / p_cam.z + self.principal_point.y,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_quat(rng: &mut impl Rng) -> Vector4<f64> {
        Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0))
    }

    // Oracle: explicit R, S, product written out entry by entry.
    fn naive_covariance(q: &Vector4<f64>, s: &Vector3<f64>) -> [[f64; 3]; 3] {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let r = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        let sc = [s[0].exp(), s[1].exp(), s[2].exp()];
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                m[i][k] = r[i][k] * sc[k];
            }
        }
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += m[i][k] * m[j][k];
                }
            }
        }
        out
    }

    #[test]
    fn identity_covariance() {
        let c = build_covariance(&Vector4::new(1.0, 0.0, 0.0, 0.0), &Vector3::zeros()).unwrap();
        assert!((c - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn scaled_axis_covariance() {
        let c = build_covariance(
            &Vector4::new(1.0, 0.0, 0.0, 0.0),
            &Vector3::new(2f64.ln(), 0.0, 0.0),
        )
        .unwrap();
        let want = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((c - want).abs().max() < 1e-12);
    }

    #[test]
    fn zero_quaternion_is_degenerate() {
        assert_eq!(
            build_covariance(&Vector4::zeros(), &Vector3::zeros()),
            Err(GeometryError::DegenerateRotation)
        );
    }

    #[test]
    fn covariance_matches_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let q = rand_quat(&mut rng);
            let s = Vector3::from_fn(|_, _| rng.random_range(-2.0..1.0));
            let c = build_covariance(&q, &s).unwrap();
            let o = naive_covariance(&q, &s);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((c[(i, j)] - o[i][j]).abs() < 1e-12);
                }
            }
            assert!((c - c.transpose()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn jacobian_examples() {
        let j = compute_jacobian(&Vector3::new(0.0, 0.0, 1.0), &Vector2::new(1.0, 1.0), 0.01).unwrap();
        assert_eq!(j, Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0));
        let j = compute_jacobian(&Vector3::new(0.0, 0.0, 2.0), &Vector2::new(2.0, 2.0), 0.01).unwrap();
        assert_eq!(j, Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0));
        assert!(matches!(
            compute_jacobian(&Vector3::new(0.0, 0.0, 0.005), &Vector2::new(1.0, 1.0), 0.01),
            Err(GeometryError::BehindCamera { .. })
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..50 {
            let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..4.0));
            let f = Vector2::new(rng.random_range(50.0..200.0), rng.random_range(50.0..200.0));
            let proj = |p: Vector3<f64>| Vector2::new(f.x * p.x / p.z, f.y * p.y / p.z);
            let j = compute_jacobian(&p, &f, 0.01).unwrap();
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let d = (proj(p + e) - proj(p - e)) / (2.0 * h);
                for r in 0..2 {
                    let scale = j[(r, k)].abs().max(1.0);
                    assert!((d[r] - j[(r, k)]).abs() / scale < 1e-5, "{} vs {}", d[r], j[(r, k)]);
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let j = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let p = project_covariance(&Matrix3::identity(), &Matrix3::identity(), &j);
        assert_eq!(p, Matrix2::identity());
        let sigma = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        let p = project_covariance(&sigma, &Matrix3::identity(), &j);
        assert_eq!(p, Matrix2::new(4.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn projection_matches_triple_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let sigma = a * a.transpose();
            let w = rotation_matrix(&normalize_quaternion(&rand_quat(&mut rng)).unwrap());
            let j = Matrix2x3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let got = project_covariance(&sigma, &w, &j);
            let mut want = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    for i in 0..3 {
                        for k in 0..3 {
                            for l in 0..3 {
                                for m in 0..3 {
                                    want[r][c] += j[(r, i)] * w[(i, k)] * sigma[(k, l)] * w[(m, l)] * j[(c, m)];
                                }
                            }
                        }
                    }
                }
            }
            for r in 0..2 {
                for c in 0..2 {
                    assert!((got[(r, c)] - want[r][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotation_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..20 {
            let q = rand_quat(&mut rng);
            let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let loss = |q: &Vector4<f64>| rotation_matrix(&normalize_quaternion(q).unwrap()).component_mul(&g).sum();
            let unit = normalize_quaternion(&q).unwrap();
            let analytic = normalize_vjp(&q, &rotation_matrix_vjp(&unit, &g));
            for k in 0..4 {
                let mut e = Vector4::zeros();
                e[k] = h;
                let fd = (loss(&(q + e)) - loss(&(q - e))) / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-6, "{fd} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn look_at_is_valid_and_centers_target() {
        let cam = Camera::look_at(
            Vector3::new(3.0, 0.5, 0.2),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            100.0,
            (64, 48),
        )
        .unwrap();
        let p = cam.project(&cam.to_camera(&Vector3::zeros()));
        assert!((p - Vector2::new(32.0, 24.0)).norm() < 1e-12);
        assert!((cam.position() - Vector3::new(3.0, 0.5, 0.2)).norm() < 1e-12);
    }

    #[test]
    fn non_rigid_camera_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(Camera::new(m, Vector2::new(1.0, 1.0), Vector2::zeros(), (4, 4)).is_err());
    }

    proptest! {
        #[test]
        fn spectrum_bounded_below(
            q in prop::array::uniform4(-1.0f64..1.0),
            s in prop::array::uniform3(-2.0f64..1.0),
        ) {
            let q = Vector4::from(q);
            prop_assume!(q.norm() > 1e-3);
            let s = Vector3::from(s);
            let c = build_covariance(&q, &s).unwrap();
            let eig = c.symmetric_eigenvalues();
            let floor = (2.0 * s.min()).exp() - 1e-9;
            prop_assert!(eig.iter().all(|&e| e >= floor));
        }

        #[test]
        fn sign_flip_invariant(
            q in prop::array::uniform4(-1.0f64..1.0),
            s in prop::array::uniform3(-2.0f64..1.0),
        ) {
            let q = Vector4::from(q);
            prop_assume!(q.norm() > 1e-3);
            let s = Vector3::from(s);
            prop_assert_eq!(build_covariance(&q, &s).unwrap(), build_covariance(&-q, &s).unwrap());
        }

        #[test]
        fn normalized_rotation_is_unit(q in prop::array::uniform4(-10.0f64..10.0)) {
            let q = Vector4::from(q);
            prop_assume!(q.norm() > 1e-6);
            prop_assert!((normalize_quaternion(&q).unwrap().norm() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn projection_is_linear(
            a in prop::array::uniform9(-1.0f64..1.0),
            b in prop::array::uniform9(-1.0f64..1.0),
            j in prop::array::uniform6(-2.0f64..2.0),
            wa in -3.0f64..3.0,
            wb in -3.0f64..3.0,
        ) {
            let a = Matrix3::from_row_slice(&a);
            let b = Matrix3::from_row_slice(&b);
            let (a, b) = (a + a.transpose(), b + b.transpose());
            let j = Matrix2x3::from_row_slice(&j);
            let w = rotation_matrix(&Vector4::new(0.8, 0.2, -0.4, 0.4).normalize());
            let lhs = project_covariance(&(a * wa + b * wb), &w, &j);
            let rhs = project_covariance(&a, &w, &j) * wa + project_covariance(&b, &w, &j) * wb;
            prop_assert!((lhs - rhs).abs().max() < 1e-9);
        }
    }
}
