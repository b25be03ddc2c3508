//! Rigid transforms with a configurable rotation origin.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

/// Rigid map `x -> R(x - origin) + origin + translation`.
///
/// `euler` holds rotation angles in radians about the x, y and z axes; the
/// rotation is composed intrinsically Z-Y-X, i.e. `R = Rz(ez) * Ry(ey) * Rx(ex)`.
/// The rotation origin is purely representational: two transforms with
/// different origins are considered equal when they map points identically.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub origin: [f64; 3],
    pub euler: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            origin: [0.0; 3],
            euler: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Self {
            origin: [0.0; 3],
            euler: [0.0; 3],
            translation: t,
        }
    }

    /// Builds a transform from an explicit rotation matrix acting about `origin`.
    pub fn from_rotation(rotation: &Rotation3<f64>, origin: [f64; 3], translation: [f64; 3]) -> Self {
        let (ex, ey, ez) = rotation.euler_angles();
        Self {
            origin,
            euler: [ex, ey, ez],
            translation,
        }
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.euler[0], self.euler[1], self.euler[2])
    }

    /// Returns the transform as `x -> A x + b`.
    pub fn as_affine(&self) -> (Rotation3<f64>, Vector3<f64>) {
        let r = self.rotation();
        let o = Vector3::from(self.origin);
        let t = Vector3::from(self.translation);
        let b = o + t - r * o;
        (r, b)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let (r, b) = self.as_affine();
        (r * Vector3::from(p) + b).into()
    }

    /// `self.compose(inner)` applies `inner` first: `(self ∘ inner)(x) = self(inner(x))`.
    ///
    /// The result is normalized to a zero rotation origin.
    pub fn compose(&self, inner: &Self) -> Self {
        let (r1, b1) = self.as_affine();
        let (r2, b2) = inner.as_affine();
        let r = r1 * r2;
        let b = r1 * b2 + b1;
        Self::from_rotation(&r, [0.0; 3], b.into())
    }

    /// Inverse map, normalized to a zero rotation origin.
    pub fn inverse(&self) -> Self {
        let (r, b) = self.as_affine();
        let ri = r.inverse();
        let bi = -(ri * b);
        Self::from_rotation(&ri, [0.0; 3], bi.into())
    }
}
