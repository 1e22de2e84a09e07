//! Parametric hand: skeleton, forward kinematics, linear blend skinning and
//! inverse kinematics against triangulated landmarks.

mod fk;
mod ik;
mod skeleton;
mod skinning;

use thiserror::Error;

use crate::camera::Extrinsics;

pub use fk::{bone_transforms, evaluate_chain, forward_kinematics, Chain};
pub use ik::{
    fit_frame, fit_hand, format_pose_line, load_poses, parse_poses, poses_header, poses_to_text, residual_jacobian,
    save_poses, FitResult, FramePoses, IkConfig, MIN_TARGETS,
};
pub use skeleton::{Bone, HandModel, HandSkeleton, Landmark, SubjectProfile, PALM_LANDMARKS, SCALE_RANGE};
pub use skinning::{skin_vertices, SkinnedMesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandError {
    #[error("pose has {found} angles, skeleton has {expected} DoF")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("invalid subject profile: {0}")]
    InvalidProfile(String),
    #[error("invalid skinned mesh: {0}")]
    InvalidMesh(String),
    #[error("{found} valid targets, need at least {required}")]
    TooFewTargets { found: usize, required: usize },
    #[error("non-finite residual")]
    NonFiniteResidual,
}

/// World-from-wrist transform plus joint angles in skeleton DoF order.
#[derive(Debug, Clone, PartialEq)]
pub struct HandPose {
    pub global: Extrinsics,
    pub angles: Vec<f64>,
}

impl HandPose {
    pub fn rest(skel: &HandSkeleton) -> Self {
        HandPose {
            global: Extrinsics::identity(),
            angles: vec![0.0; skel.dof_count()],
        }
    }

    pub fn clamped(&self, skel: &HandSkeleton) -> Self {
        HandPose {
            global: self.global,
            angles: self
                .angles
                .iter()
                .zip(skel.dof_limits())
                .map(|(&a, (lo, hi))| a.clamp(lo, hi))
                .collect(),
        }
    }

    pub fn within_limits(&self, skel: &HandSkeleton) -> bool {
        self.angles
            .iter()
            .zip(skel.dof_limits())
            .all(|(&a, (lo, hi))| (lo..=hi).contains(&a))
    }
}
