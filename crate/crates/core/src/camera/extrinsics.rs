use nalgebra::{Isometry3, Matrix4, Quaternion, Translation3, UnitQuaternion, Vector3};

use super::CameraError;

/// Accepted deviation of a stored quaternion from unit norm before it is
/// renormalized.
pub const QUATERNION_NORM_TOL: f64 = 1e-6;

/// Rigid transform `x_parent = R x_child + t`. For cameras the parent is the
/// world (rig) frame and `t` is the camera center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self::identity()
    }
}

impl Extrinsics {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Extrinsics { rotation, translation }
    }

    pub fn identity() -> Self {
        Extrinsics::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    /// Builds from a stored `(w, x, y, z)` quaternion, rejecting values that
    /// are not unit to within [`QUATERNION_NORM_TOL`].
    pub fn from_wxyz(q: [f64; 4], translation: [f64; 3]) -> Result<Self, CameraError> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(CameraError::NonUnitQuaternion { norm });
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(CameraError::InvalidExtrinsics("non-finite translation".into()));
        }
        // Already-unit values are kept bit-exact so save/load is stable.
        let rotation = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(quat)
        } else {
            UnitQuaternion::from_quaternion(quat)
        };
        Ok(Extrinsics::new(
            rotation,
            Vector3::from(translation),
        ))
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Extrinsics) -> Extrinsics {
        Extrinsics::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Extrinsics {
        let r_inv = self.rotation.inverse();
        Extrinsics::new(r_inv, -(r_inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Maps a parent-frame point into the child frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        self.to_isometry().to_homogeneous()
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Extrinsics::new(iso.rotation, iso.translation.vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_extrinsics() -> impl Strategy<Value = Extrinsics> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-5.0f64..5.0),
        )
            .prop_map(|(r, t)| {
                Extrinsics::new(
                    UnitQuaternion::from_scaled_axis(Vector3::from(r)),
                    Vector3::from(t),
                )
            })
    }

    fn max_abs_diff(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
        (a - b).abs().max()
    }

    proptest! {
        #[test]
        fn inverse_composes_to_identity(e in arb_extrinsics()) {
            let id = Matrix4::identity();
            prop_assert!(max_abs_diff(&e.compose(&e.inverse()).to_matrix(), &id) < 1e-9);
            prop_assert!(max_abs_diff(&e.inverse().compose(&e).to_matrix(), &id) < 1e-9);
        }

        #[test]
        fn composition_is_associative(a in arb_extrinsics(), b in arb_extrinsics(), c in arb_extrinsics()) {
            let left = a.compose(&b).compose(&c).to_matrix();
            let right = a.compose(&b.compose(&c)).to_matrix();
            prop_assert!(max_abs_diff(&left, &right) < 1e-9);
        }

        #[test]
        fn compose_matches_matrix_product(a in arb_extrinsics(), b in arb_extrinsics()) {
            let prod = a.to_matrix() * b.to_matrix();
            prop_assert!(max_abs_diff(&a.compose(&b).to_matrix(), &prod) < 1e-9);
        }
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        assert!(Extrinsics::from_wxyz([1.0, 0.1, 0.0, 0.0], [0.0; 3]).is_err());
        let e = Extrinsics::from_wxyz([1.0 + 1e-8, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0]).unwrap();
        assert!((e.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_round_trip() {
        let e = Extrinsics::new(
            UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
            Vector3::new(0.5, -1.0, 2.0),
        );
        let p = Vector3::new(0.1, 0.2, 0.3);
        assert!((e.inverse_transform_point(&e.transform_point(&p)) - p).norm() < 1e-12);
    }
}
