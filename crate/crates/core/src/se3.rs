//! Rigid-body algebra: unit quaternions, rotation matrices, poses and twists.
//!
//! Quaternions are stored scalar-first `(w, x, y, z)` and map to rotation
//! matrices through
//!
//! ```text
//! R(ρ) = (w² − v·v) I + 2 v vᵀ + 2 w [v]×,    v = (x, y, z)
//! ```
//!
//! The quaternion-rate map [`UnitQuaternion::rate_map`] takes an angular
//! velocity expressed in the frame named by the leading superscript of the
//! relative rotation. For the grasp rotation `ᵒR_g` that is the object frame:
//! `ᵒρ̇_g = T(ᵒρ_g) ᵒω_g`, which in quaternion algebra is `ρ̇ = ½ (0, ω) ⊗ ρ`.

use std::fmt;
use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Matrix3x4, Matrix4x3, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

/// Allowed deviation from unit norm for quaternions and orthonormality for rotations.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Slack accepted when reading human-written poses from files or the wire.
const PARSE_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Se3Error {
    #[error("quaternion norm {0} is not unit")]
    NonUnitQuaternion(f64),
    #[error("matrix is not a rotation (orthogonality error {orthogonality:.3e}, det {determinant:.12})")]
    NotARotation { orthogonality: f64, determinant: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Skew-symmetric matrix such that `skew(a) * b = a × b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]; reads the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// The rotation polynomial evaluated on a raw 4-vector, without normalization.
pub fn rotation_polynomial(c: &Vector4<f64>) -> Matrix3<f64> {
    let w = c[0];
    let v = Vector3::new(c[1], c[2], c[3]);
    Matrix3::identity() * (w * w - v.dot(&v)) + v * v.transpose() * 2.0 + skew(&v) * (2.0 * w)
}

/// Partial derivatives of [`rotation_polynomial`] with respect to `w, x, y, z`.
pub fn rotation_polynomial_partials(c: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let w = c[0];
    let v = Vector3::new(c[1], c[2], c[3]);
    let dw = Matrix3::identity() * (2.0 * w) + skew(&v) * 2.0;
    let axis_partial = |k: usize| {
        let e = Vector3::ith(k, 1.0);
        Matrix3::identity() * (-2.0 * v[k])
            + (e * v.transpose() + v * e.transpose()) * 2.0
            + skew(&e) * (2.0 * w)
    };
    [dw, axis_partial(0), axis_partial(1), axis_partial(2)]
}

/// Unit quaternion `(w, x, y, z)`; serialized as `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuaternion {
    coords: Vector4<f64>,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self { coords: Vector4::new(1.0, 0.0, 0.0, 0.0) }
    }

    /// Checked constructor: the input must already be unit within [`UNIT_TOLERANCE`].
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, Se3Error> {
        Self::from_coords(Vector4::new(w, x, y, z))
    }

    pub fn from_coords(coords: Vector4<f64>) -> Result<Self, Se3Error> {
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(Se3Error::NonFinite("quaternion"));
        }
        let n = coords.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Se3Error::NonUnitQuaternion(n));
        }
        Ok(Self { coords: coords / n })
    }

    /// Projects any finite non-zero 4-vector onto S³.
    pub fn normalize(coords: Vector4<f64>) -> Result<Self, Se3Error> {
        let n = coords.norm();
        if !n.is_finite() {
            return Err(Se3Error::NonFinite("quaternion"));
        }
        if n < 1e-12 {
            return Err(Se3Error::NonUnitQuaternion(n));
        }
        Ok(Self { coords: coords / n })
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        Self::from_rotation_vector(&(axis * (angle / n)))
    }

    /// Exponential map of a rotation vector `θ·axis`.
    pub fn from_rotation_vector(rv: &Vector3<f64>) -> Self {
        let theta = rv.norm();
        let half = 0.5 * theta;
        // sin(θ/2)/θ with its Taylor expansion near zero
        let k = if theta < 1e-6 { 0.5 - theta * theta / 48.0 } else { half.sin() / theta };
        let c = Vector4::new(half.cos(), rv.x * k, rv.y * k, rv.z * k);
        Self { coords: c / c.norm() }
    }

    /// Logarithm map; the returned angle lies in `[0, π]`.
    pub fn rotation_vector(&self) -> Vector3<f64> {
        let c = if self.coords[0] < 0.0 { -self.coords } else { self.coords };
        let v = Vector3::new(c[1], c[2], c[3]);
        let n = v.norm();
        if n < 1e-12 {
            return v * (2.0 / c[0]);
        }
        v * (2.0 * n.atan2(c[0]) / n)
    }

    pub fn w(&self) -> f64 {
        self.coords[0]
    }
    pub fn x(&self) -> f64 {
        self.coords[1]
    }
    pub fn y(&self) -> f64 {
        self.coords[2]
    }
    pub fn z(&self) -> f64 {
        self.coords[3]
    }

    pub fn coords(&self) -> Vector4<f64> {
        self.coords
    }

    pub fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.coords[1], self.coords[2], self.coords[3])
    }

    pub fn conjugate(&self) -> Self {
        Self { coords: Vector4::new(self.coords[0], -self.coords[1], -self.coords[2], -self.coords[3]) }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.coords.dot(&other.coords)
    }

    pub fn to_rotation(&self) -> Rotation {
        Rotation(rotation_polynomial(&self.coords))
    }

    /// Shepperd's method, picking the numerically largest pivot.
    pub fn from_rotation(r: &Rotation) -> Self {
        let m = &r.0;
        let tr = m.trace();
        let c = if tr > m[(0, 0)] && tr > m[(1, 1)] && tr > m[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            Vector4::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Vector4::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Vector4::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Vector4::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        Self { coords: c / c.norm() }
    }

    /// `T(ρ)`: maps an angular velocity in the leading frame to the quaternion rate.
    pub fn rate_map(&self) -> Matrix4x3<f64> {
        let w = self.coords[0];
        let v = self.vector_part();
        let lower = Matrix3::identity() * w - skew(&v);
        let mut t = Matrix4x3::zeros();
        t.fixed_view_mut::<1, 3>(0, 0).copy_from(&(-v.transpose()));
        t.fixed_view_mut::<3, 3>(1, 0).copy_from(&lower);
        t * 0.5
    }

    /// `T†(ρ) = 4 Tᵀ(ρ)`, exact because `TᵀT = ¼ I`.
    pub fn rate_map_pinv(&self) -> Matrix3x4<f64> {
        self.rate_map().transpose() * 4.0
    }

    /// `∂R/∂w, ∂R/∂x, ∂R/∂y, ∂R/∂z` of the rotation polynomial at this quaternion.
    pub fn rotation_partials(&self) -> [Matrix3<f64>; 4] {
        rotation_polynomial_partials(&self.coords)
    }

    /// First-order step `ρ + T(ρ) ω dt` followed by renormalization.
    pub fn integrate(&self, omega: &Vector3<f64>, dt: f64) -> Self {
        let c = self.coords + self.rate_map() * omega * dt;
        Self { coords: c / c.norm() }
    }

    /// Rotates `p` by this quaternion.
    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.to_rotation().0 * p
    }
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = Se3Error;

    fn try_from(q: [f64; 4]) -> Result<Self, Se3Error> {
        let c = Vector4::from(q);
        let n = c.norm();
        if !n.is_finite() || (n - 1.0).abs() > PARSE_NORM_TOLERANCE {
            return Err(Se3Error::NonUnitQuaternion(n));
        }
        // keep already-unit input bit-exact so serialized poses round-trip
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(Self { coords: c });
        }
        UnitQuaternion::normalize(c)
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        let c = q.coords;
        [c[0], c[1], c[2], c[3]]
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Neg for UnitQuaternion {
    type Output = Self;
    fn neg(self) -> Self {
        Self { coords: -self.coords }
    }
}

impl Mul for UnitQuaternion {
    type Output = Self;

    /// Hamilton product; `(a * b).to_rotation() = a.to_rotation() * b.to_rotation()`.
    fn mul(self, rhs: Self) -> Self {
        let (aw, av) = (self.coords[0], self.vector_part());
        let (bw, bv) = (rhs.coords[0], rhs.vector_part());
        let w = aw * bw - av.dot(&bv);
        let v = bv * aw + av * bw + av.cross(&bv);
        let c = Vector4::new(w, v.x, v.y, v.z);
        Self { coords: c / c.norm() }
    }
}

/// Proper orthonormal 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn new(m: Matrix3<f64>) -> Result<Self, Se3Error> {
        if !m.iter().all(|c| c.is_finite()) {
            return Err(Se3Error::NonFinite("rotation"));
        }
        let orthogonality = (m.transpose() * m - Matrix3::identity()).abs().max();
        let determinant = m.determinant();
        if orthogonality > UNIT_TOLERANCE || (determinant - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Se3Error::NotARotation { orthogonality, determinant });
        }
        Ok(Self(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        UnitQuaternion::from_axis_angle(axis, angle).to_rotation()
    }

    pub fn exp(rv: &Vector3<f64>) -> Self {
        UnitQuaternion::from_rotation_vector(rv).to_rotation()
    }

    pub fn log(&self) -> Vector3<f64> {
        UnitQuaternion::from_rotation(self).rotation_vector()
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion {
        UnitQuaternion::from_rotation(self)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rigid transform; serialized as `{"t":[x,y,z],"q":[w,x,y,z]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    t: [f64; 3],
    q: [f64; 4],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Se3Error;

    fn try_from(r: PoseRepr) -> Result<Self, Se3Error> {
        if !r.t.iter().all(|c| c.is_finite()) {
            return Err(Se3Error::NonFinite("translation"));
        }
        Ok(Pose::new(Vector3::from(r.t), UnitQuaternion::try_from(r.q)?))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr { t: p.translation.into(), q: p.rotation.into() }
    }
}

impl Pose {
    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion) -> Self {
        Self { translation, rotation }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::identity())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(t, UnitQuaternion::identity())
    }

    pub fn rotation_matrix(&self) -> Rotation {
        self.rotation.to_rotation()
    }

    /// `self ∘ other`: rotation `R_a R_b`, translation `t_a + R_a t_b`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.translation + self.rotation.rotate(&other.translation),
            self.rotation * other.rotation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.conjugate();
        Pose::new(-inv.rotate(&self.translation), inv)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + self.rotation.rotate(p)
    }

    /// Largest of the translation distance and the rotation angle between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let dt = (self.translation - other.translation).norm();
        let dr = (self.rotation.conjugate() * other.rotation).rotation_vector().norm();
        (dt, dr)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.rotation.coords();
        write!(
            f,
            "t=({:.6}, {:.6}, {:.6}) q=({:.6}, {:.6}, {:.6}, {:.6})",
            self.translation.x, self.translation.y, self.translation.z, c[0], c[1], c[2], c[3]
        )
    }
}

/// Frame a twist is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Base,
    Object,
    Gripper,
    Master,
}

/// Stacked linear and angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
    pub frame: Frame,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>, frame: Frame) -> Self {
        Self { linear, angular, frame }
    }

    pub fn zero(frame: Frame) -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), frame)
    }

    pub fn from_vector(v: &Vector6<f64>, frame: Frame) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into(), frame)
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.linear);
        v.fixed_rows_mut::<3>(3).copy_from(&self.angular);
        v
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    /// Re-expresses the twist through a rotation into `frame`.
    pub fn rotated(&self, r: &Rotation, frame: Frame) -> Twist {
        Twist::new(r.matrix() * self.linear, r.matrix() * self.angular, frame)
    }
}
