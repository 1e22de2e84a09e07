use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};

use super::{HandError, HandModel, HandPose};
use crate::detections::LANDMARKS_PER_HAND;

/// Per-bone world frames and per-DoF world axes for one pose.
#[derive(Debug, Clone)]
pub struct Chain {
    /// World frame at each joint before the joint's own rotation.
    pub pre: Vec<Isometry3<f64>>,
    /// World frame at each joint after its rotation; children hang off this.
    pub post: Vec<Isometry3<f64>>,
    /// World rotation axis of every DoF, in pose order.
    pub dof_axes: Vec<Vector3<f64>>,
    /// Bone owning every DoF.
    pub dof_bone: Vec<usize>,
    pub landmarks: [Vector3<f64>; LANDMARKS_PER_HAND],
}

impl Chain {
    pub fn joint_position(&self, bone: usize) -> Vector3<f64> {
        self.post[bone].translation.vector
    }
}

pub fn evaluate_chain(model: &HandModel, pose: &HandPose) -> Result<Chain, HandError> {
    let skel = &model.skeleton;
    if pose.angles.len() != skel.dof_count() {
        return Err(HandError::DimensionMismatch {
            expected: skel.dof_count(),
            found: pose.angles.len(),
        });
    }
    // The chain is built in the wrist frame and moved to the world once, so a
    // change of global pose acts on every output as a single rigid transform.
    let global = pose.global.to_isometry();
    let n = skel.bones().len();
    let mut pre: Vec<Isometry3<f64>> = Vec::with_capacity(n);
    let mut post: Vec<Isometry3<f64>> = Vec::with_capacity(n);
    let mut dof_axes = Vec::with_capacity(skel.dof_count());
    let mut dof_bone = Vec::with_capacity(skel.dof_count());
    let mut k = 0;
    for (i, bone) in skel.bones().iter().enumerate() {
        let offset = model.profile.scale(i) * bone.rest_offset;
        let at_joint = match bone.parent {
            Some(p) => post[p] * Translation3::from(offset),
            None => Isometry3::from_parts(Translation3::from(offset), UnitQuaternion::identity()),
        };
        let mut frame: Isometry3<f64> = at_joint;
        for axis in &bone.axes {
            dof_axes.push(pose.global.rotation * (frame.rotation * axis.into_inner()));
            dof_bone.push(i);
            frame *= UnitQuaternion::from_axis_angle(axis, pose.angles[k]);
            k += 1;
        }
        pre.push(at_joint);
        post.push(frame);
    }
    let mut landmarks = [Vector3::zeros(); LANDMARKS_PER_HAND];
    for (slot, lm) in landmarks.iter_mut().zip(skel.landmarks()) {
        let local = match lm.bone {
            Some(b) => post[b].transform_point(&(model.profile.scale(b) * lm.point).into()).coords,
            None => model.profile.global_scale.unwrap_or(1.0) * lm.point,
        };
        *slot = pose.global.transform_point(&local);
    }
    for frame in pre.iter_mut().chain(post.iter_mut()) {
        *frame = global * *frame;
    }
    Ok(Chain {
        pre,
        post,
        dof_axes,
        dof_bone,
        landmarks,
    })
}

/// The 21 landmark positions of `pose`.
pub fn forward_kinematics(model: &HandModel, pose: &HandPose) -> Result<[Vector3<f64>; LANDMARKS_PER_HAND], HandError> {
    Ok(evaluate_chain(model, pose)?.landmarks)
}

/// Skinning transforms, one per bone: the motion of the segment that ends at
/// the bone's joint relative to the rest pose of the same profile. The
/// segment is rigid with the parent side of the joint, so the frame used is
/// the one before the joint's own rotation.
pub fn bone_transforms(model: &HandModel, pose: &HandPose) -> Result<Vec<Isometry3<f64>>, HandError> {
    let current = evaluate_chain(model, pose)?;
    let rest = evaluate_chain(model, &HandPose::rest(&model.skeleton))?;
    Ok(current
        .pre
        .iter()
        .zip(&rest.pre)
        .map(|(c, r)| c * r.inverse())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Extrinsics;
    use crate::detections::Hand;
    use crate::hand::SubjectProfile;
    use nalgebra::{Matrix4, Rotation3, Vector4};
    use proptest::prelude::*;

    fn right() -> HandModel {
        HandModel::default_for(Hand::Right)
    }

    #[test]
    fn rest_pose_gives_rest_landmarks() {
        let m = right();
        let lm = forward_kinematics(&m, &HandPose::rest(&m.skeleton)).unwrap();
        // Rest landmarks are cumulative offsets along each finger.
        let bones = m.skeleton.bones();
        for f in 0..5 {
            let mut acc = Vector3::zeros();
            for k in 0..4 {
                acc += bones[4 * f + k].rest_offset;
                assert_eq!(lm[1 + 4 * f + k], acc);
            }
        }
        assert_eq!(lm[0], Vector3::zeros());
    }

    #[test]
    fn translation_shifts_every_landmark() {
        let m = right();
        let t = Vector3::new(0.3, -0.2, 0.9);
        let mut pose = HandPose::rest(&m.skeleton);
        let rest = forward_kinematics(&m, &pose).unwrap();
        pose.global = Extrinsics::new(UnitQuaternion::identity(), t);
        let moved = forward_kinematics(&m, &pose).unwrap();
        for (a, b) in rest.iter().zip(&moved) {
            assert_eq!(b, &(a + t));
        }
    }

    #[test]
    fn index_mcp_flexion_matches_matrix_chain() {
        let m = right();
        let mut pose = HandPose::rest(&m.skeleton);
        // Index finger bones are 4..8; MCP DoF order is abduction, flexion.
        let flex = m.skeleton.dof_offset(4) + 1;
        pose.angles[flex] = std::f64::consts::FRAC_PI_2;
        let lm = forward_kinematics(&m, &pose).unwrap();

        let off = |b: usize| m.skeleton.bones()[b].rest_offset;
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2).to_homogeneous();
        let mut t: Matrix4<f64> = Matrix4::new_translation(&off(4)) * rx;
        let origin = Vector4::new(0.0, 0.0, 0.0, 1.0);
        assert!(((t * origin).xyz() - lm[5]).norm() < 1e-12);
        for k in 5..8 {
            t *= Matrix4::new_translation(&off(k));
            assert!(((t * origin).xyz() - lm[k + 1]).norm() < 1e-12);
        }
        // Flexion bends toward the palm (+z).
        assert!(lm[8].z > 0.05);
        let rest = forward_kinematics(&m, &HandPose::rest(&m.skeleton)).unwrap();
        for i in (0..21).filter(|i| !(5..=8).contains(i)) {
            assert_eq!(lm[i], rest[i]);
        }
    }

    #[test]
    fn left_is_mirror_of_right() {
        let r = right();
        let l = HandModel::default_for(Hand::Left);
        let mut pose = HandPose::rest(&r.skeleton);
        for (i, a) in pose.angles.iter_mut().enumerate() {
            *a = 0.05 * i as f64;
        }
        let lr = forward_kinematics(&r, &pose).unwrap();
        let ll = forward_kinematics(&l, &pose).unwrap();
        for (a, b) in lr.iter().zip(&ll) {
            assert!((Vector3::new(-a.x, a.y, a.z) - b).norm() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = right();
        let pose = HandPose {
            global: Extrinsics::identity(),
            angles: vec![0.0; 3],
        };
        assert!(matches!(
            forward_kinematics(&m, &pose),
            Err(HandError::DimensionMismatch { expected: 20, found: 3 })
        ));
    }

    #[test]
    fn rest_bone_transforms_are_identity() {
        let m = right();
        for t in bone_transforms(&m, &HandPose::rest(&m.skeleton)).unwrap() {
            assert!((t.to_homogeneous() - Matrix4::identity()).abs().max() < 1e-15);
        }
    }

    fn arb_angles() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.5f64..1.5, 20)
    }

    proptest! {
        #[test]
        fn rigid_equivariance(
            angles in arb_angles(),
            r in prop::array::uniform3(-3.0f64..3.0),
            t in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let m = right();
            let base = HandPose { global: Extrinsics::identity(), angles: angles.clone() };
            let g = Extrinsics::new(UnitQuaternion::from_scaled_axis(Vector3::from(r)), Vector3::from(t));
            let moved = HandPose { global: g, angles };
            let a = forward_kinematics(&m, &base).unwrap();
            let b = forward_kinematics(&m, &moved).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((g.transform_point(p) - q).norm() < 1e-9);
            }
        }

        #[test]
        fn bone_lengths_preserved(angles in arb_angles(), scales in prop::collection::vec(0.5f64..2.0, 20)) {
            let skel = m_skel();
            let profile = SubjectProfile { subject_id: "p".into(), bone_scales: scales.clone(), global_scale: Some(1.1) };
            let model = HandModel::new(skel, profile).unwrap();
            let lm = forward_kinematics(&model, &HandPose { global: Extrinsics::identity(), angles }).unwrap();
            for (i, bone) in model.skeleton.bones().iter().enumerate() {
                let parent_lm = bone.parent.map_or(0, |p| p + 1);
                let expected = scales[i] * 1.1 * bone.rest_offset.norm();
                prop_assert!(((lm[i + 1] - lm[parent_lm]).norm() - expected).abs() < 1e-9);
            }
        }
    }

    fn m_skel() -> crate::hand::HandSkeleton {
        crate::hand::HandSkeleton::default_right()
    }
}
