//! Rotation parameterizations, rigid-body composition and trajectory chaining.
//!
//! Euler triples are `(roll, pitch, yaw)` about `(x, y, z)`, composed as
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Rotation as an Euler triple plus translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub euler: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(euler: [f64; 3], translation: [f64; 3]) -> Self {
        Pose {
            euler: euler.into(),
            translation: translation.into(),
        }
    }

    pub fn identity() -> Self {
        Pose::new([0.0; 3], [0.0; 3])
    }

    pub fn to_se3(&self) -> Se3 {
        Se3 {
            rotation: euler_to_rotation(&self.euler),
            translation: self.translation,
        }
    }

    /// Euler decomposition of `se3`; gimbal-locked rotations use the yaw = 0 convention.
    pub fn from_se3(se3: &Se3) -> Self {
        Pose {
            euler: rotation_to_euler(&se3.rotation).euler,
            translation: se3.translation,
        }
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Se3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Se3 {
            rotation,
            translation,
        }
    }

    /// Planar pose: yaw about z, translation in the x/y plane.
    pub fn planar(yaw: f64, x: f64, y: f64) -> Self {
        Se3 {
            rotation: euler_to_rotation(&Vector3::new(0.0, 0.0, yaw)),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Motion from `self` to `other` expressed in `self`'s frame: `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Se3) -> Se3 {
        self.inverse().compose(other)
    }

    /// Row-major 3×4 `[R|t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Self {
        Se3 {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn max_abs_diff(&self, other: &Se3) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

pub fn euler_to_rotation(euler: &Vector3<f64>) -> Matrix3<f64> {
    rot_z(euler[2]) * rot_y(euler[1]) * rot_x(euler[0])
}

/// Partial derivatives of [`euler_to_rotation`] with respect to roll, pitch, yaw.
pub(crate) fn euler_to_rotation_jacobian(euler: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (r, p, y) = (euler[0], euler[1], euler[2]);
    [
        rot_z(y) * rot_y(p) * d_rot_x(r),
        rot_z(y) * d_rot_y(p) * rot_x(r),
        d_rot_z(y) * rot_y(p) * rot_x(r),
    ]
}

/// Result of decomposing a rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EulerDecomposition {
    pub euler: Vector3<f64>,
    /// Pitch is at ±π/2; roll and yaw are not separable and yaw was set to 0.
    pub degenerate: bool,
}

const GIMBAL_TOL: f64 = 1e-9;

pub fn rotation_to_euler(r: &Matrix3<f64>) -> EulerDecomposition {
    let r20 = r[(2, 0)];
    if r20.abs() > 1.0 - GIMBAL_TOL {
        let pitch = if r20 < 0.0 {
            std::f64::consts::FRAC_PI_2
        } else {
            -std::f64::consts::FRAC_PI_2
        };
        let roll = (-r[(1, 2)]).atan2(r[(1, 1)]);
        return EulerDecomposition {
            euler: Vector3::new(roll, pitch, 0.0),
            degenerate: true,
        };
    }
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let pitch = (-r20).asin();
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    EulerDecomposition {
        euler: Vector3::new(roll, pitch, yaw),
        degenerate: false,
    }
}

/// Pulls a gradient on the Euler triple back onto the matrix entries of `r`
/// (away from gimbal lock).
pub(crate) fn rotation_to_euler_vjp(r: &Matrix3<f64>, g: &Vector3<f64>) -> Matrix3<f64> {
    let mut out = Matrix3::zeros();
    // roll = atan2(r21, r22)
    let (a, b) = (r[(2, 1)], r[(2, 2)]);
    let n = a * a + b * b;
    if n > 0.0 {
        out[(2, 1)] += g[0] * b / n;
        out[(2, 2)] -= g[0] * a / n;
    }
    // pitch = asin(-r20)
    let c = (1.0 - r[(2, 0)] * r[(2, 0)]).max(0.0).sqrt();
    if c > 0.0 {
        out[(2, 0)] -= g[1] / c;
    }
    // yaw = atan2(r10, r00)
    let (a, b) = (r[(1, 0)], r[(0, 0)]);
    let n = a * a + b * b;
    if n > 0.0 {
        out[(1, 0)] += g[2] * b / n;
        out[(0, 0)] -= g[2] * a / n;
    }
    out
}

/// Geodesic angle of a rotation, in `[0, π]`.
///
/// Uses atan2 of the skew and trace parts; acos of the trace alone loses
/// about 1e-8 rad near the identity.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (0.5 * skew.norm()).atan2(0.5 * (r.trace() - 1.0))
}

/// Wraps an angle into `(-π, π]`; angles already in range are returned unchanged.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// Ordered absolute poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<Se3>,
}

impl Trajectory {
    pub fn new(poses: Vec<Se3>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::InvalidArgument("trajectory must contain at least one pose".into()));
        }
        Ok(Trajectory { poses })
    }

    /// Chains body-frame relative motions from `origin`: `T_i = T_{i-1} ∘ rel_i`.
    pub fn accumulate(relatives: &[Se3], origin: Se3) -> Self {
        let mut poses = Vec::with_capacity(relatives.len() + 1);
        poses.push(origin);
        for rel in relatives {
            let next = poses.last().expect("non-empty").compose(rel);
            poses.push(next);
        }
        Trajectory { poses }
    }

    pub fn from_relative_poses(relatives: &[Pose], origin: Se3) -> Self {
        let rels: Vec<Se3> = relatives.iter().map(Pose::to_se3).collect();
        Self::accumulate(&rels, origin)
    }

    /// Inverse of [`Trajectory::accumulate`]: per-step motions `T_{i-1}⁻¹ ∘ T_i`.
    pub fn relatives(&self) -> Vec<Se3> {
        self.poses.windows(2).map(|w| w[0].between(&w[1])).collect()
    }

    pub fn poses(&self) -> &[Se3] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn first(&self) -> &Se3 {
        &self.poses[0]
    }

    /// Left-multiplies every pose by `t`.
    pub fn transformed(&self, t: &Se3) -> Self {
        Trajectory {
            poses: self.poses.iter().map(|p| t.compose(p)).collect(),
        }
    }

    /// Cumulative arc length of the positions, starting at 0.
    pub fn path_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.poses.len());
        out.push(0.0);
        for w in self.poses.windows(2) {
            acc += (w[1].translation - w[0].translation).norm();
            out.push(acc);
        }
        out
    }
}
