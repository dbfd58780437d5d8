//! SE(3)/SO(3) arithmetic and twist algebra shared by every estimator.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose`] `T_ab` maps coordinates of a point expressed in frame `b`
//!   into frame `a`: `p_a = R_ab * p_b + t_ab`.
//! * A [`Twist`] is a 6-DOF body velocity, ordered linear-first
//!   `(v_x, v_y, v_z, w_roll, w_pitch, w_yaw)` in a vehicle frame with
//!   x forward, y left, z up. All selection matrices index against this
//!   ordering.
//! * Body-velocity kinematics follow the right-increment convention: the
//!   world pose of a vehicle with constant twist `w` evolves as
//!   `T_wv(t + dt) = T_wv(t) * exp((dt * w)^)`.

use nalgebra::{Matrix3, Matrix4, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Mat6 = Matrix6<f64>;

/// Index of the first angular component inside a twist vector.
pub const ANGULAR_OFFSET: usize = 3;

/// Rotation angle below which Taylor expansions replace the trigonometric
/// closed forms.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Determinant drift past which a rotation is re-orthonormalized.
const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    /// The SE(3) logarithm is ill-conditioned for rotations at or past pi.
    #[error("rotation angle {angle} rad too close to pi for a stable logarithm")]
    LogNearPi { angle: f64 },
}

/// 6-DOF body velocity: linear (m/s) then angular (rad/s), vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vec3,
    pub angular: Vec3,
}

impl Twist {
    pub const fn new(linear: Vec3, angular: Vec3) -> Self {
        Self { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            linear: Vec3::new(v[0], v[1], v[2]),
            angular: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            linear: self.linear * s,
            angular: self.angular * s,
        }
    }
}

/// Rigid transform on SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Composition `self * other`; transforms `other`-frame coordinates into
    /// the frame `self` maps into. Re-orthonormalizes when determinant drift
    /// exceeds the invariant tolerance.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            rotation = orthonormalize(&rotation);
        }
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Applies the transform to a point.
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotates a direction (no translation).
    pub fn rotate(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn to_homogeneous(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 12-number form of the upper 3x4 block, the result-file
    /// serialization of a pose.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        Self {
            rotation: Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vec3::new(v[3], v[7], v[11]),
        }
    }
}

/// 6x6 map carrying twists across a rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointMap(pub Mat6);

impl AdjointMap {
    pub fn apply(&self, w: &Twist) -> Twist {
        Twist::from_vector(&(self.0 * w.to_vector()))
    }

    pub fn matrix(&self) -> &Mat6 {
        &self.0
    }
}

/// Skew-symmetric (cross-product) matrix of a 3-vector.
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee_so3(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

fn orthonormalize(r: &Mat3) -> Mat3 {
    // Polar factor via SVD: nearest rotation in Frobenius norm.
    let svd = r.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut q = u * vt;
    if q.determinant() < 0.0 {
        let mut u_fix = u;
        u_fix.column_mut(2).neg_mut();
        q = u_fix * vt;
    }
    q
}

/// Coefficients for the Rodrigues-style closed forms, with Taylor branches
/// below [`SMALL_ANGLE`].
fn so3_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

fn so3_exp(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let (a, b, _) = so3_coeffs(theta);
    let k = hat(phi);
    Mat3::identity() + a * k + b * (k * k)
}

/// SO(3) left Jacobian.
pub fn so3_left_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let (_, b, c) = so3_coeffs(theta);
    let k = hat(phi);
    Mat3::identity() + b * k + c * (k * k)
}

/// SE(3) exponential map of a twist-times-seconds vector.
pub fn exp_map(xi: &Twist) -> Pose {
    let rotation = so3_exp(&xi.angular);
    let v = so3_left_jacobian(&xi.angular);
    Pose {
        rotation,
        translation: v * xi.linear,
    }
}

/// SE(3) logarithm; inverse of [`exp_map`] for rotation angles below pi.
pub fn log_map(pose: &Pose) -> Result<Twist, GeomError> {
    let angle = pose.rotation_angle();
    if angle >= std::f64::consts::PI - 1e-6 {
        return Err(GeomError::LogNearPi { angle });
    }
    let skew = (pose.rotation - pose.rotation.transpose()) * 0.5;
    let w = vee_so3(&skew); // = sin(theta) * axis
    let phi = if angle < SMALL_ANGLE {
        // sin(theta)/theta ~ 1 - theta^2/6
        w * (1.0 + angle * angle / 6.0)
    } else {
        w * (angle / angle.sin())
    };
    let v_inv = so3_left_jacobian_inv(&phi);
    Ok(Twist {
        linear: v_inv * pose.translation,
        angular: phi,
    })
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = hat(phi);
    let coeff = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Mat3::identity() - 0.5 * k + coeff * (k * k)
}

/// Adjoint of a pose: carries a twist expressed in the source frame of
/// `T_ab` (frame `b`) into frame `a`.
pub fn adjoint(pose: &Pose) -> AdjointMap {
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&pose.rotation);
    m.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(hat(&pose.translation) * pose.rotation));
    AdjointMap(m)
}

/// se(3) adjoint of an algebra element ("curly hat"): `ad(a) b = [a, b]`.
pub fn ad(xi: &Vec6) -> Mat6 {
    let rho = Vec3::new(xi[0], xi[1], xi[2]);
    let phi = Vec3::new(xi[3], xi[4], xi[5]);
    let mut m = Mat6::zeros();
    let ph = hat(&phi);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ph);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ph);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&rho));
    m
}

/// SE(3) right Jacobian, summed as `sum_n (-ad(xi))^n / (n+1)!` to machine
/// precision. In-frame arguments stay well inside the series' comfortable
/// convergence range.
pub fn se3_right_jacobian(xi: &Vec6) -> Mat6 {
    jacobian_series(&(-ad(xi)))
}

/// SE(3) left Jacobian.
pub fn se3_left_jacobian(xi: &Vec6) -> Mat6 {
    jacobian_series(&ad(xi))
}

fn jacobian_series(a: &Mat6) -> Mat6 {
    let mut sum = Mat6::identity();
    let mut term = Mat6::identity();
    for n in 1..60 {
        term = (term * a) / (n as f64 + 1.0);
        sum += term;
        if term.norm() < 1e-18 {
            break;
        }
    }
    sum
}

/// Inverse of the SE(3) right Jacobian.
pub fn se3_right_jacobian_inv(xi: &Vec6) -> Mat6 {
    se3_right_jacobian(xi)
        .try_inverse()
        .expect("right Jacobian is invertible for |phi| < 2*pi")
}

/// Directional-derivative matrix of `xi -> J_r(xi) * u` with respect to
/// `xi`, for fixed `u`.
///
/// From the series `J_r(xi) u = sum_n A^n u / (n+1)!` with `A = -ad(xi)`,
/// the derivative in direction `d` is
/// `sum_n 1/(n+1)! sum_{k<n} A^k ad(A^{n-1-k} u) d`
/// using `ad(d) w = -ad(w) d`.
pub fn se3_right_jacobian_dir(xi: &Vec6, u: &Vec6) -> Mat6 {
    let a = -ad(xi);
    // Adaptive truncation: terms decay like |A|^n / (n+1)!.
    let mut powers: Vec<Mat6> = vec![Mat6::identity()];
    let mut vecs: Vec<Vec6> = vec![*u];
    let a_norm = a.norm().max(1e-30);
    let mut n_terms = 8usize;
    let mut factor = 1.0;
    for n in 8..60 {
        factor *= a_norm / (n as f64);
        n_terms = n;
        if factor < 1e-18 {
            break;
        }
    }
    for k in 1..=n_terms {
        powers.push(powers[k - 1] * a);
        vecs.push(a * vecs[k - 1]);
    }
    let mut out = Mat6::zeros();
    let mut inv_fact = 0.5; // 1/2! for n = 1
    for n in 1..=n_terms {
        let mut inner = Mat6::zeros();
        for k in 0..n {
            inner += powers[k] * ad(&vecs[n - 1 - k]);
        }
        out += inner * inv_fact;
        inv_fact /= n as f64 + 2.0;
    }
    out
}

/// 4x6 "dot" operator of a homogeneous point `(p, 1)` satisfying
/// `xi^ * (p, 1) = dot(p) * xi`. Only the top three rows are nonzero.
pub fn point_dot(p: &Vec3) -> SMatrix<f64, 4, 6> {
    let mut m = SMatrix::<f64, 4, 6>::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Mat3::identity());
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(p)));
    m
}

/// Composition of a pose with the exponential of a perturbation applied on
/// the right, `T * exp(xi^)`.
pub fn compose_exp(pose: &Pose, xi: &Vec6) -> Pose {
    pose.compose(&exp_map(&Twist::from_vector(xi)))
}

/// Rotation from intrinsic x-y-z angles: `R = Rx(roll) Ry(pitch) Rz(yaw)`.
pub fn rpy_to_rotation(roll: f64, pitch: f64, yaw: f64) -> Mat3 {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    let ry = Mat3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rz = Mat3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Intrinsic x-y-z decomposition `(roll, pitch, yaw)`; inverse of
/// [`rpy_to_rotation`] away from the `|pitch| = pi/2` singularity.
pub fn rotation_to_rpy(r: &Mat3) -> (f64, f64, f64) {
    let pitch = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let roll = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let yaw = (-r[(0, 1)]).atan2(r[(0, 0)]);
    (roll, pitch, yaw)
}

/// `ln(a^-1 * b)` as a 6-vector.
pub fn relative_log(a: &Pose, b: &Pose) -> Result<Vec6, GeomError> {
    Ok(log_map(&a.inverse().compose(b))?.to_vector())
}
