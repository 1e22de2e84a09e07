//! Camera models, rigid transforms and rig calibration.
//!
//! Camera frames follow the usual vision convention (x right, y down, z along
//! the optical axis). The rig frame is right-handed with z up, in meters.

mod extrinsics;
mod intrinsics;
mod rig;

pub use extrinsics::{Extrinsics, QUATERNION_NORM_TOL};
pub use intrinsics::{CameraKind, Intrinsics, THETA_CAP};
pub use rig::{
    HeadsetPoseStream, Mount, RigCalibration, RigCamera, CALIBRATION_SCHEMA_VERSION,
    HEADSET_SCHEMA_VERSION,
};

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

/// Half-line in the world frame with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldRay {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl WorldRay {
    /// Perpendicular distance from `point` to the supporting line.
    pub fn distance_to(&self, point: &Vector3<f64>) -> f64 {
        (point - self.origin).cross(&self.dir).norm()
    }
}

/// Lifts a full-image pixel to a world ray through the camera center.
pub fn pixel_ray_to_world(
    intr: &Intrinsics,
    pose: &Extrinsics,
    pixel: &Vector2<f64>,
) -> Result<WorldRay, CameraError> {
    let dir = pose.transform_vector(&intr.unproject(pixel)?);
    Ok(WorldRay {
        origin: pose.translation,
        dir: dir.normalize(),
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera")]
    PointBehindCamera,
    #[error("point is outside the field of view")]
    OutsideFieldOfView,
    #[error("pixel is outside the image")]
    OutsideImage,
    #[error("distortion inversion did not converge at radius {radius}")]
    NoConvergence { radius: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("distortion polynomial is not increasing near theta = {theta} rad")]
    NonMonotoneDistortion { theta: f64 },
    #[error("quaternion norm {norm} is not 1")]
    NonUnitQuaternion { norm: f64 },
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("duplicate camera id {0:?}")]
    DuplicateCameraId(String),
    #[error("invalid camera id {0:?}")]
    InvalidCameraId(String),
    #[error("invalid frame rate {0}")]
    InvalidFrameRate(f64),
    #[error("unknown camera {0:?}")]
    UnknownCamera(String),
    #[error("no headset pose for egocentric camera {camera:?} at frame {frame_index}")]
    MissingHeadsetPose { camera: String, frame_index: u64 },
    #[error("headset stream frame {frame_index} is out of order")]
    UnorderedHeadsetStream { frame_index: u64 },
}

/// World-from-camera pose of `camera_id` at `frame_index`.
///
/// Egocentric cameras ride on the headset, so their pose is the per-frame
/// rig-from-headset sample composed with the stored headset-from-camera
/// extrinsics.
pub fn camera_world_pose(
    calib: &RigCalibration,
    camera_id: &str,
    frame_index: u64,
    headset: &HeadsetPoseStream,
) -> Result<Extrinsics, CameraError> {
    let cam = calib
        .camera(camera_id)
        .ok_or_else(|| CameraError::UnknownCamera(camera_id.to_string()))?;
    match cam.mount {
        Mount::Exocentric => Ok(cam.extrinsics),
        Mount::Egocentric => {
            let rig_from_headset =
                headset
                    .pose_at(frame_index)
                    .ok_or_else(|| CameraError::MissingHeadsetPose {
                        camera: camera_id.to_string(),
                        frame_index,
                    })?;
            Ok(rig_from_headset.compose(&cam.extrinsics))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, UnitQuaternion, Vector3};

    fn rig() -> RigCalibration {
        let intr = Intrinsics::fisheye(300.0, 300.0, 320.0, 240.0, [0.0; 4], 640, 480).unwrap();
        let exo = Extrinsics::new(
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let ego = Extrinsics::new(
            UnitQuaternion::from_euler_angles(-0.4, 0.0, 0.2),
            Vector3::new(0.08, 0.03, -0.01),
        );
        RigCalibration::new(
            vec![
                RigCamera { id: "exo".into(), intrinsics: intr.clone(), extrinsics: exo, mount: Mount::Exocentric },
                RigCamera { id: "ego".into(), intrinsics: intr, extrinsics: ego, mount: Mount::Egocentric },
            ],
            60.0,
        )
        .unwrap()
    }

    #[test]
    fn exocentric_pose_is_static() {
        let rig = rig();
        let pose = camera_world_pose(&rig, "exo", 17, &HeadsetPoseStream::default()).unwrap();
        assert_eq!(pose, rig.camera("exo").unwrap().extrinsics);
    }

    #[test]
    fn egocentric_identity_headset() {
        let rig = rig();
        let stream = HeadsetPoseStream::new(vec![(5, Extrinsics::identity())]).unwrap();
        let pose = camera_world_pose(&rig, "ego", 5, &stream).unwrap();
        let stored = rig.camera("ego").unwrap().extrinsics;
        assert!((pose.to_matrix() - stored.to_matrix()).abs().max() < 1e-15);
    }

    #[test]
    fn egocentric_rotated_headset_matches_matrix_product() {
        let rig = rig();
        // 90 degrees about rig z plus an offset, written out as a 4x4 matrix.
        #[rustfmt::skip]
        let headset_m = Matrix4::new(
            0.0, -1.0, 0.0, 0.1,
            1.0,  0.0, 0.0, 0.0,
            0.0,  0.0, 1.0, 0.45,
            0.0,  0.0, 0.0, 1.0,
        );
        let headset = Extrinsics::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2),
            Vector3::new(0.1, 0.0, 0.45),
        );
        let stream = HeadsetPoseStream::new(vec![(0, headset)]).unwrap();
        let pose = camera_world_pose(&rig, "ego", 0, &stream).unwrap();
        let expected = headset_m * rig.camera("ego").unwrap().extrinsics.to_matrix();
        assert!((pose.to_matrix() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn missing_headset_pose() {
        let rig = rig();
        let stream = HeadsetPoseStream::new(vec![(0, Extrinsics::identity())]).unwrap();
        assert!(matches!(
            camera_world_pose(&rig, "ego", 1, &stream),
            Err(CameraError::MissingHeadsetPose { .. })
        ));
        assert!(matches!(
            camera_world_pose(&rig, "nope", 0, &stream),
            Err(CameraError::UnknownCamera(_))
        ));
    }
}
