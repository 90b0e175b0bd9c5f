//! Rigid-body algebra for poses in millimetres.
//!
//! Poses compose as `a ∘ b` (apply `b`, then `a`). Pose differences are
//! right (body-frame) deltas: `target = base ∘ (exp(ω), t)`, where the delta
//! carries the rotation vector `ω` of the relative rotation and the
//! translation `t` of the relative transform, both expressed in the base
//! pose's frame. Scaling a delta shrinks its rotation geodesically and its
//! translation linearly, so `scale_delta(d, α)` moves exactly the fraction
//! `α` of the way along each component.

use std::fmt;

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};

/// Distance from π (rad) below which a rotation axis is considered ambiguous.
pub const AXIS_AMBIGUITY_EPS: f64 = 1e-9;

/// Element of SO(3), stored as a unit quaternion with non-negative scalar part.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.0.quaternion();
        write!(f, "Rotation(w={:.9}, x={:.9}, y={:.9}, z={:.9})", q.w, q.i, q.j, q.k)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Builds a rotation from a quaternion `(w, x, y, z)`, normalizing it.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidInput(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        // already-unit input is kept bit-exact so serialized poses round-trip
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(Self::canonical(UnitQuaternion::new_unchecked(q)));
        }
        Ok(Self::canonical(UnitQuaternion::new_normalize(q)))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self::canonical(q)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix_unchecked(*m);
        Self::canonical(UnitQuaternion::from_rotation_matrix(&r))
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        exp_rotation(&(axis * (angle / n)))
    }

    pub fn rx(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn ry(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rz(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// Fixed-axis roll (x), pitch (y), yaw (z) composition `Rz·Ry·Rx`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::rz(yaw).compose(&Self::ry(pitch)).compose(&Self::rx(roll))
    }

    fn canonical(q: UnitQuaternion<f64>) -> Self {
        if q.w < 0.0 {
            Self(UnitQuaternion::new_unchecked(-q.into_inner()))
        } else {
            Self(q)
        }
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// Components `(w, x, y, z)` with `w >= 0`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Self::canonical(UnitQuaternion::new_normalize(
            self.0.into_inner() * other.0.into_inner(),
        ))
    }

    pub fn inverse(&self) -> Rotation {
        Self::canonical(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_vector(v)
    }

    /// Rotation angle in `[0, π]` radians.
    pub fn angle(&self) -> f64 {
        let q = self.0.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }
}

/// Rodrigues exponential: rotation vector (rad) to rotation.
pub fn exp_rotation(v: &Vector3<f64>) -> Rotation {
    let theta = v.norm();
    let half = 0.5 * theta;
    // sin(θ/2)/θ, with its series near zero
    let k = if theta < 1e-6 {
        0.5 - theta * theta / 48.0
    } else {
        half.sin() / theta
    };
    let q = Quaternion::new(half.cos(), k * v.x, k * v.y, k * v.z);
    Rotation::canonical(UnitQuaternion::new_normalize(q))
}

/// Logarithm on the canonical branch (angle < π).
pub fn log_rotation(r: &Rotation) -> Result<Vector3<f64>> {
    let q = r.0.quaternion();
    let (w, imag) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let s = imag.norm();
    let theta = 2.0 * s.atan2(w);
    if std::f64::consts::PI - theta < AXIS_AMBIGUITY_EPS {
        return Err(Error::AmbiguousAxis);
    }
    if s < 1e-12 {
        // θ/sin(θ/2) → 2/w as s → 0
        return Ok(imag * (2.0 / w));
    }
    Ok(imag * (theta / s))
}

/// Rigid transform: `x ↦ R·x + t`, translation in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "PoseRepr", try_from = "PoseRepr")]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    /// Unit quaternion `(w, x, y, z)`.
    rotation: [f64; 4],
    translation_mm: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            rotation: p.rotation.wxyz(),
            translation_mm: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;

    fn try_from(r: PoseRepr) -> Result<Self> {
        let [w, x, y, z] = r.rotation;
        let t = Vector3::from(r.translation_mm);
        if !t.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(Pose::new(Rotation::from_wxyz(w, x, y, z)?, t))
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation.compose(&other.rotation),
            self.rotation.rotate(&other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(r_inv, -r_inv.rotate(&self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Free-function form of [`Pose::compose`].
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Free-function form of [`Pose::inverse`].
pub fn inverse(a: &Pose) -> Pose {
    a.inverse()
}

/// Body-frame increment between two poses.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseDelta {
    /// Axis-angle rotation, rad, magnitude < π.
    pub rotation_vector: Vector3<f64>,
    /// Translation, mm.
    pub translation: Vector3<f64>,
}

impl PoseDelta {
    pub fn new(rotation_vector: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation_vector,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn angle(&self) -> f64 {
        self.rotation_vector.norm()
    }
}

/// `target ⊖ base`: the delta `d` with `apply_delta(base, d) == target`.
pub fn pose_diff(target: &Pose, base: &Pose) -> Result<PoseDelta> {
    let rel = base.inverse().compose(target);
    Ok(PoseDelta::new(log_rotation(&rel.rotation)?, rel.translation))
}

/// `base ⊕ d = base ∘ (exp(ω), t)`.
pub fn apply_delta(base: &Pose, d: &PoseDelta) -> Pose {
    base.compose(&Pose::new(exp_rotation(&d.rotation_vector), d.translation))
}

/// Scales a delta by `alpha ∈ (0, 1]`.
pub fn scale_delta(d: &PoseDelta, alpha: f64) -> Result<PoseDelta> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid_param("alpha", format!("{alpha} is outside (0, 1]")));
    }
    Ok(PoseDelta::new(d.rotation_vector * alpha, d.translation * alpha))
}

/// Angle of the relative rotation `a⁻¹·b`, in degrees within `[0, 180]`.
pub fn rotation_angle_deg(a: &Rotation, b: &Rotation) -> f64 {
    a.inverse().compose(b).angle().to_degrees()
}
