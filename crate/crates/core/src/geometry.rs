//! Rigid-body and camera geometry.
//!
//! Conventions used throughout the crate:
//!
//! * Quaternions are stored and serialized scalar-first (`qw qx qy qz`) and kept
//!   on the `w >= 0` hemisphere.
//! * Tangent vectors are ordered rotation first: `[ω; v]`.
//! * `a ⊖ b = log(b⁻¹ · a)`, so `b · exp(a ⊖ b) = a`.
//! * World frame: x forward, y left, z up (opposite to gravity).

use std::fmt;
use std::ops::Mul;

use nalgebra::{
    Matrix2x3, Matrix3, Matrix4, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3,
    Vector6,
};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

/// Below this rotation angle the exponential uses its Taylor expansion.
pub const EXP_SMALL_ANGLE: f64 = 1e-8;
/// Relative rotations closer than this to π make the logarithm ill-conditioned.
pub const LOG_PI_MARGIN: f64 = 1e-9;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Iteration cap for eigen and singular value decompositions.
pub const MAX_DECOMP_ITER: usize = 1000;

/// Closed-form quaternion of a rotation matrix, renormalized so that small
/// departures from orthonormality are absorbed.
pub fn rotation_to_quaternion(r: &Mat3) -> UnitQuaternion<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    UnitQuaternion::new_normalize(q.into_inner())
}

/// SO(3) exponential of a rotation vector.
pub fn so3_exp(omega: &Vec3) -> UnitQuaternion<f64> {
    let theta = omega.norm();
    let (w, k) = if theta < EXP_SMALL_ANGLE {
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    canonical(UnitQuaternion::new_normalize(Quaternion::new(
        w,
        k * omega.x,
        k * omega.y,
        k * omega.z,
    )))
}

/// SO(3) logarithm; the result has norm in `[0, π]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    let q = canonical(*q);
    let v = q.imag();
    let s = v.norm();
    let w = q.w;
    if s < EXP_SMALL_ANGLE {
        // 2·atan(s/w)/s ≈ 2/w · (1 − s²/(3w²))
        return v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w));
    }
    let theta = 2.0 * s.atan2(w);
    v * (theta / s)
}

/// Normalizes only when the norm has drifted, so already-unit quaternions pass
/// through bit-identical.
fn renormalize(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    if (q.norm_squared() - 1.0).abs() > 1e-14 {
        UnitQuaternion::new_normalize(q)
    } else {
        UnitQuaternion::new_unchecked(q)
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// `(1 − cos θ)/θ²` and `(θ − sin θ)/θ³`, the V-matrix coefficients.
fn v_coefficients(theta: f64) -> (f64, f64) {
    if theta < EXP_SMALL_ANGLE {
        (
            0.5 - theta * theta / 24.0,
            1.0 / 6.0 - theta * theta / 120.0,
        )
    } else {
        let h = (0.5 * theta).sin() / (0.5 * theta);
        (0.5 * h * h, (theta - theta.sin()) / (theta * theta * theta))
    }
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let (a, b) = v_coefficients(omega.norm());
    let w = skew(omega);
    Mat3::identity() + w * a + w * w * b
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let w = skew(omega);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let one_minus_cos = 2.0 * (0.5 * theta).sin().powi(2);
        (1.0 - theta * theta.sin() / (2.0 * one_minus_cos)) / (theta * theta)
    };
    Mat3::identity() - w * 0.5 + w * w * c
}

/// Translational coupling block of the SE(3) left Jacobian.
fn se3_q_block(omega: &Vec3, v: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < 1e-2 {
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let p = skew(omega);
    let r = skew(v);
    let prp = p * r * p;
    r * 0.5
        + (p * r + r * p + prp) * c1
        + (p * p * r + r * p * p - prp * 3.0) * c2
        + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3) for the `[ω; v]` ordering:
/// `exp(ξ + δ) ≈ exp(J_l(ξ) δ) · exp(ξ)`.
pub fn se3_left_jacobian(xi: &Twist) -> Mat6 {
    let j = so3_left_jacobian(&xi.rotational);
    let q = se3_q_block(&xi.rotational, &xi.translational);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out
}

/// Inverse of the SE(3) left Jacobian.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Mat6 {
    let ji = so3_left_jacobian_inv(&xi.rotational);
    let q = se3_q_block(&xi.rotational, &xi.translational);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ji * q * ji));
    out
}

/// Inverse of the SE(3) right Jacobian: `log(exp(ξ)·exp(δ)) ≈ ξ + J_r⁻¹(ξ) δ`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Mat6 {
    se3_left_jacobian_inv(&(-*xi))
}

/// A tangent vector of SE(3): rotation (rad) and translation (m) parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rotational: Vec3,
    pub translational: Vec3,
}

impl Twist {
    pub fn new(rotational: Vec3, translational: Vec3) -> Self {
        Self {
            rotational,
            translational,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            rotational: Vec3::new(v[0], v[1], v[2]),
            translational: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        let (r, t) = (&self.rotational, &self.translational);
        Vec6::new(r.x, r.y, r.z, t.x, t.y, t.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.rotational * s, self.translational * s)
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.rotational, -self.translational)
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, o: Twist) -> Twist {
        Twist::new(
            self.rotational + o.rotational,
            self.translational + o.translational,
        )
    }
}

impl std::ops::Sub for Twist {
    type Output = Twist;
    fn sub(self, o: Twist) -> Twist {
        Twist::new(
            self.rotational - o.rotational,
            self.translational - o.translational,
        )
    }
}

/// A rigid transform. Maps points from its child frame into its parent frame.
#[derive(Clone, Copy, PartialEq)]
pub struct Se3Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl fmt::Debug for Se3Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation;
        write!(
            f,
            "Se3Pose(q=[{:.9}, {:.9}, {:.9}, {:.9}], t=[{:.9}, {:.9}, {:.9}])",
            q.w, q.i, q.j, q.k, self.translation.x, self.translation.y, self.translation.z
        )
    }
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: canonical(renormalize(rotation.into_inner())),
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Builds a pose from a scalar-first quaternion, normalizing it.
    pub fn from_wxyz(q: [f64; 4], translation: Vec3) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = quat.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidQuaternion(format!("norm {n}")));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidQuaternion("non-finite translation".into()));
        }
        // Near-unit input is kept verbatim so text round trips are exact.
        let unit = if (n - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(quat)
        } else {
            UnitQuaternion::new_normalize(quat)
        };
        Ok(Self::new(unit, translation))
    }

    /// Scalar-first quaternion coefficients.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation;
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Builds a pose from a homogeneous matrix whose upper-left block is a rotation.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Mat3 = m.fixed_view::<3, 3>(0, 0).into();
        let rot = rotation_to_quaternion(&r);
        Self::new(rot, m.fixed_view::<3, 1>(0, 3).into())
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self {
            rotation: canonical(inv),
            translation: -(inv * self.translation),
        }
    }

    pub fn compose(&self, other: &Se3Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.translation + self.rotation * other.translation,
        )
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }

    /// SE(3) exponential map.
    pub fn exp(xi: &Twist) -> Self {
        let rotation = so3_exp(&xi.rotational);
        let v = so3_left_jacobian(&xi.rotational);
        Self {
            rotation,
            translation: v * xi.translational,
        }
    }

    /// SE(3) logarithm. Fails when the rotation angle is within 1e-9 of π.
    pub fn log(&self) -> Result<Twist> {
        let omega = so3_log(&self.rotation);
        let angle = omega.norm();
        if (std::f64::consts::PI - angle).abs() < LOG_PI_MARGIN {
            return Err(Error::IllConditionedLog { angle });
        }
        let v_inv = so3_left_jacobian_inv(&omega);
        Ok(Twist::new(omega, v_inv * self.translation))
    }

    /// 6×6 adjoint for the `[ω; v]` ordering: `T·exp(ξ)·T⁻¹ = exp(Ad_T ξ)`.
    pub fn adjoint(&self) -> Mat6 {
        let r = self.rotation_matrix();
        let mut ad = Mat6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.translation) * r));
        ad
    }

    /// Right-multiplicative retraction: `self · exp(δ)`.
    pub fn retract(&self, delta: &Twist) -> Self {
        self.compose(&Se3Pose::exp(delta))
    }
}

impl Mul for Se3Pose {
    type Output = Se3Pose;
    fn mul(self, rhs: Se3Pose) -> Se3Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Se3Pose> for &'a Se3Pose {
    type Output = Se3Pose;
    fn mul(self, rhs: &'a Se3Pose) -> Se3Pose {
        self.compose(rhs)
    }
}

/// The generalized minus `a ⊖ b = log(b⁻¹ · a)`.
pub fn generalized_minus(a: &Se3Pose, b: &Se3Pose) -> Result<Twist> {
    b.inverse().compose(a).log()
}

/// Pinhole camera with two-term radial distortion applied to normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub width: u32,
    pub height: u32,
}

/// Number of intrinsic parameters exposed to optimization (fx, fy, cx, cy, k1, k2).
pub const INTRINSIC_PARAMS: usize = 6;

impl CameraIntrinsics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        k1: f64,
        k2: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            k1,
            k2,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics(
                "image size must be non-zero".into(),
            ));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> [f64; INTRINSIC_PARAMS] {
        [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2]
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        Self {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
            k1: p[4],
            k2: p[5],
            ..*self
        }
    }

    pub fn in_bounds(&self, px: &Vec2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    fn distortion(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Projects a camera-frame point to pixels.
    pub fn project(&self, p: &Vec3) -> Result<Vec2> {
        if p.z <= 1e-9 {
            return Err(Error::BehindCamera { z: p.z });
        }
        let (x, y) = (p.x / p.z, p.y / p.z);
        let d = self.distortion(x * x + y * y);
        Ok(Vec2::new(
            self.fx * d * x + self.cx,
            self.fy * d * y + self.cy,
        ))
    }

    /// Projection plus its Jacobians w.r.t. the camera-frame point and the
    /// intrinsic parameters `[fx, fy, cx, cy, k1, k2]`.
    pub fn project_with_jacobians(
        &self,
        p: &Vec3,
    ) -> Result<(Vec2, Matrix2x3<f64>, nalgebra::Matrix2x6<f64>)> {
        if p.z <= 1e-9 {
            return Err(Error::BehindCamera { z: p.z });
        }
        let iz = 1.0 / p.z;
        let (x, y) = (p.x * iz, p.y * iz);
        let r2 = x * x + y * y;
        let d = self.distortion(r2);
        let dd_dr2 = self.k1 + 2.0 * self.k2 * r2;
        let px = Vec2::new(self.fx * d * x + self.cx, self.fy * d * y + self.cy);

        // d(u,v)/d(x,y)
        let du_dx = self.fx * (d + 2.0 * x * x * dd_dr2);
        let du_dy = self.fx * 2.0 * x * y * dd_dr2;
        let dv_dx = self.fy * 2.0 * x * y * dd_dr2;
        let dv_dy = self.fy * (d + 2.0 * y * y * dd_dr2);
        let dn = nalgebra::Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
        let duv_dn = nalgebra::Matrix2::new(du_dx, du_dy, dv_dx, dv_dy);
        let j_point = duv_dn * dn;

        let r4 = r2 * r2;
        #[rustfmt::skip]
        let j_intr = nalgebra::Matrix2x6::new(
            d * x, 0.0, 1.0, 0.0, self.fx * x * r2, self.fx * x * r4,
            0.0, d * y, 0.0, 1.0, self.fy * y * r2, self.fy * y * r4,
        );
        Ok((px, j_point, j_intr))
    }

    /// Normalized (undistorted) image coordinates of a pixel, by fixed-point
    /// iteration on the radial model.
    pub fn undistort(&self, px: &Vec2) -> Vec2 {
        let xd = (px.x - self.cx) / self.fx;
        let yd = (px.y - self.cy) / self.fy;
        let (mut x, mut y) = (xd, yd);
        for _ in 0..100 {
            let d = self.distortion(x * x + y * y);
            let (nx, ny) = (xd / d, yd / d);
            let step = (nx - x).abs() + (ny - y).abs();
            x = nx;
            y = ny;
            if step < 1e-15 {
                break;
            }
        }
        // Newton polish on the radial equation.
        for _ in 0..3 {
            let r2 = x * x + y * y;
            let d = self.distortion(r2);
            let dd = self.k1 + 2.0 * self.k2 * r2;
            let f = nalgebra::Vector2::new(x * d - xd, y * d - yd);
            let j = nalgebra::Matrix2::new(
                d + 2.0 * x * x * dd,
                2.0 * x * y * dd,
                2.0 * x * y * dd,
                d + 2.0 * y * y * dd,
            );
            if let Some(ji) = j.try_inverse() {
                let s = ji * f;
                x -= s.x;
                y -= s.y;
            }
        }
        Vec2::new(x, y)
    }

    /// Camera-frame point at depth `depth` along the ray of `px`.
    pub fn unproject(&self, px: &Vec2, depth: f64) -> Vec3 {
        let n = self.undistort(px);
        Vec3::new(n.x * depth, n.y * depth, depth)
    }

    /// Unit bearing vector of a pixel.
    pub fn bearing(&self, px: &Vec2) -> Vec3 {
        let n = self.undistort(px);
        Vec3::new(n.x, n.y, 1.0).normalize()
    }
}

/// Pose of a sensor in the platform (base) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RigExtrinsic {
    pub sensor_id: String,
    pub pose: Se3Pose,
    pub translation_fixed: bool,
}
