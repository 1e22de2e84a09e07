//! Perspective crops: a virtual pinhole camera sharing the physical camera's
//! center, aimed at a hand and zoomed so the whole keypoint cluster fits.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, Extrinsics, Intrinsics, WorldRay};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CropError {
    #[error("no keypoint could be unprojected through the source camera")]
    NoValidKeypoints,
    #[error("keypoint cluster spans {angle_deg:.1} degrees, wider than the {max_deg} degree crop limit")]
    ClusterTooWide { angle_deg: f64, max_deg: f64 },
    #[error("invalid crop configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    /// Scale applied to the angular radius of the keypoint cluster.
    pub padding: f64,
    /// Minimum distance in pixels between any keypoint and the crop border.
    pub margin_px: f64,
    /// Lower clamp on the angular radius, degrees.
    pub alpha_min_deg: f64,
    /// Upper clamp on the angular radius, degrees.
    pub alpha_max_deg: f64,
    pub out_size: u32,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            padding: 1.5,
            margin_px: 8.0,
            alpha_min_deg: 3.0,
            alpha_max_deg: 80.0,
            out_size: 256,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<(), CropError> {
        let bad = |m: &str| Err(CropError::InvalidConfig(m.to_string()));
        if !(self.padding >= 1.0) {
            return bad("padding must be >= 1");
        }
        if !(self.margin_px >= 0.0 && self.margin_px < self.out_size as f64 / 2.0) {
            return bad("margin_px must lie in [0, out_size / 2)");
        }
        if !(self.alpha_min_deg > 0.0 && self.alpha_min_deg < self.alpha_max_deg && self.alpha_max_deg < 90.0) {
            return bad("need 0 < alpha_min_deg < alpha_max_deg < 90");
        }
        if self.out_size < 2 {
            return bad("out_size must be at least 2");
        }
        Ok(())
    }
}

/// Pinhole camera sharing the center of a physical camera.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualCamera {
    rotation: UnitQuaternion<f64>,
    intr: Intrinsics,
    source_camera_id: String,
}

impl VirtualCamera {
    /// `rotation` maps virtual-camera directions into the physical camera frame.
    /// The crop is square with the principal point at its center.
    pub fn new(
        rotation: UnitQuaternion<f64>,
        focal: f64,
        out_size: u32,
        source_camera_id: String,
    ) -> Result<Self, CameraError> {
        let c = (out_size as f64 - 1.0) / 2.0;
        let intr = Intrinsics::pinhole(focal, focal, c, c, out_size, out_size)?;
        Ok(VirtualCamera {
            rotation,
            intr,
            source_camera_id,
        })
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intr
    }

    pub fn focal(&self) -> f64 {
        self.intr.fx()
    }

    pub fn center(&self) -> f64 {
        self.intr.cx()
    }

    pub fn source_camera_id(&self) -> &str {
        &self.source_camera_id
    }

    /// Optical axis of the virtual camera in the physical camera frame.
    pub fn axis(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }

    /// Projects a direction given in the physical camera frame into the crop.
    pub fn project_camera_ray(&self, ray: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        self.intr.project(&self.rotation.inverse_transform_vector(ray))
    }

    /// Projects a world point seen by a camera at `cam_pose` into the crop.
    pub fn project_world(&self, point: &Vector3<f64>, cam_pose: &Extrinsics) -> Result<Vector2<f64>, CameraError> {
        self.project_camera_ray(&cam_pose.inverse_transform_point(point))
    }

    /// Unprojects a crop pixel into a unit direction in the physical camera frame.
    pub fn unproject_to_camera(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, CameraError> {
        Ok(self.rotation * self.intr.unproject(pixel)?)
    }
}

/// Builds the virtual camera framing one hand's keypoints.
///
/// Rays are averaged on the sphere to find the crop axis; the crop focal
/// length is chosen so that a cone of half-angle `padding * spread`, clamped
/// to `[alpha_min, alpha_max]`, fills the crop minus `margin_px`. The crop's
/// up-vector follows the source camera's to keep roll at zero.
pub fn make_virtual_camera(
    keypoints: &[Vector2<f64>],
    src: &Intrinsics,
    source_camera_id: String,
    cfg: &CropConfig,
) -> Result<VirtualCamera, CropError> {
    cfg.validate()?;
    let rays: Vec<Vector3<f64>> = keypoints.iter().filter_map(|p| src.unproject(p).ok()).collect();
    if rays.is_empty() {
        return Err(CropError::NoValidKeypoints);
    }
    let sum: Vector3<f64> = rays.iter().sum();
    let axis = sum
        .try_normalize(1e-12)
        .ok_or(CropError::NoValidKeypoints)?;

    let spread = rays.iter().map(|r| angle_between(&axis, r)).fold(0.0, f64::max);
    let alpha_min = cfg.alpha_min_deg.to_radians();
    let alpha_max = cfg.alpha_max_deg.to_radians();
    if spread > alpha_max {
        return Err(CropError::ClusterTooWide {
            angle_deg: spread.to_degrees(),
            max_deg: cfg.alpha_max_deg,
        });
    }
    let alpha = (cfg.padding * spread).clamp(alpha_min, alpha_max);

    let rotation = roll_free_rotation(&axis);
    let focal = (cfg.out_size as f64 / 2.0 - cfg.margin_px) / alpha.tan();
    Ok(VirtualCamera::new(rotation, focal, cfg.out_size, source_camera_id)?)
}

/// Rotation whose z column is `axis` and whose y column is the source
/// camera's y axis made orthogonal to it. Falls back to the source x axis
/// when `axis` is within one degree of the y axis.
fn roll_free_rotation(axis: &Vector3<f64>) -> UnitQuaternion<f64> {
    let z = *axis;
    let (x, y) = if z.y.abs() < 1f64.to_radians().cos() {
        let y = (Vector3::y() - z * z.y).normalize();
        (y.cross(&z), y)
    } else {
        let x = (Vector3::x() - z * z.x).normalize();
        (x, z.cross(&x))
    };
    let m = Matrix3::from_columns(&[x, y, z]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Angle between two unit vectors, accurate near 0 and pi.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Lifts a crop-space pixel to a world ray from the physical camera center.
pub fn crop_ray_to_world(
    pixel: &Vector2<f64>,
    virt: &VirtualCamera,
    cam_pose: &Extrinsics,
) -> Result<WorldRay, CameraError> {
    let dir = cam_pose.transform_vector(&virt.unproject_to_camera(pixel)?);
    Ok(WorldRay {
        origin: cam_pose.translation,
        dir: dir.normalize(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::pixel_ray_to_world;

    fn fisheye() -> Intrinsics {
        Intrinsics::fisheye(471.15, 497.77, 639.5, 511.5, [0.02, -0.005, 0.0008, 0.0], 1280, 1024).unwrap()
    }

    #[test]
    fn single_keypoint_at_principal_point() {
        let src = fisheye();
        let cfg = CropConfig::default();
        let virt = make_virtual_camera(&[Vector2::new(639.5, 511.5)], &src, "a".into(), &cfg).unwrap();
        assert!((virt.axis() - Vector3::z()).norm() < 1e-15);
        let expected = (128.0 - 8.0) / 3f64.to_radians().tan();
        assert!((virt.focal() - expected).abs() < 1e-9);
        assert_eq!(virt.center(), 127.5);
    }

    #[test]
    fn symmetric_pair_sets_alpha() {
        let src = fisheye();
        let cfg = CropConfig::default();
        let ten = 10f64.to_radians();
        let pts: Vec<_> = [ten, -ten]
            .iter()
            .map(|a| src.project(&Vector3::new(a.sin(), 0.0, a.cos())).unwrap())
            .collect();
        let virt = make_virtual_camera(&pts, &src, "a".into(), &cfg).unwrap();
        assert!((virt.axis() - Vector3::z()).norm() < 1e-12);
        let alpha = ((128.0 - 8.0) / virt.focal()).atan();
        assert!((alpha - 1.5 * ten).abs() < 1e-9, "alpha {alpha}");
    }

    #[test]
    fn no_valid_keypoints() {
        let src = fisheye();
        let pts = vec![Vector2::new(-50.0, 0.0), Vector2::new(f64::NAN, 3.0)];
        assert_eq!(
            make_virtual_camera(&pts, &src, "a".into(), &CropConfig::default()).unwrap_err(),
            CropError::NoValidKeypoints
        );
    }

    #[test]
    fn up_vector_fallback_near_source_y() {
        let axis = Vector3::new(0.0, 0.9999, 0.01).normalize();
        let r = roll_free_rotation(&axis);
        let m = r.to_rotation_matrix();
        assert!((m * Vector3::z() - axis).norm() < 1e-12);
        assert!((m.matrix().determinant() - 1.0).abs() < 1e-12);
        assert!((m * Vector3::x()).y.abs() < 1e-12);
    }

    #[test]
    fn zero_roll_relative_to_source() {
        let axis = Vector3::new(0.3, -0.2, 0.9).normalize();
        let m = roll_free_rotation(&axis).to_rotation_matrix();
        // Virtual x axis has no component along the source y axis.
        assert!((m * Vector3::x()).y.abs() < 1e-12);
        assert!((m * Vector3::y()).y > 0.0);
    }

    #[test]
    fn crop_center_is_virtual_axis() {
        let src = fisheye();
        let pts = vec![Vector2::new(900.0, 300.0), Vector2::new(950.0, 340.0)];
        let virt = make_virtual_camera(&pts, &src, "a".into(), &CropConfig::default()).unwrap();
        let pose = Extrinsics::new(
            UnitQuaternion::from_euler_angles(0.2, -0.5, 1.0),
            Vector3::new(0.3, 0.1, 0.6),
        );
        let ray = crop_ray_to_world(&Vector2::new(127.5, 127.5), &virt, &pose).unwrap();
        assert!((ray.dir - pose.rotation * virt.axis()).norm() < 1e-12);
        assert_eq!(ray.origin, pose.translation);
    }

    #[test]
    fn identity_crop_is_plain_pinhole() {
        let virt = VirtualCamera::new(UnitQuaternion::identity(), 200.0, 256, "a".into()).unwrap();
        let px = Vector2::new(40.0, 200.0);
        let ray = crop_ray_to_world(&px, &virt, &Extrinsics::identity()).unwrap();
        let plain = virt.intrinsics().unproject(&px).unwrap();
        assert!((ray.dir - plain).norm() < 1e-15);
    }

    #[test]
    fn crop_round_trip_and_shared_center() {
        let src = fisheye();
        let pose = Extrinsics::new(
            UnitQuaternion::from_euler_angles(-0.3, 0.4, 0.1),
            Vector3::new(0.35, 0.2, 0.65),
        );
        let point = pose.transform_point(&Vector3::new(0.1, -0.05, 0.6));
        let near = [Vector3::new(0.12, -0.02, 0.58), Vector3::new(0.08, -0.07, 0.62)];
        let pts: Vec<_> = near.iter().map(|p| src.project(p).unwrap()).collect();
        let virt = make_virtual_camera(&pts, &src, "a".into(), &CropConfig::default()).unwrap();

        let crop_px = virt.project_world(&point, &pose).unwrap();
        let ray = crop_ray_to_world(&crop_px, &virt, &pose).unwrap();
        assert!(ray.distance_to(&point) < 1e-9);

        let fisheye_px = src.project(&pose.inverse_transform_point(&point)).unwrap();
        let direct = pixel_ray_to_world(&src, &pose, &fisheye_px).unwrap();
        assert_eq!(direct.origin, ray.origin);
        assert!(angle_between(&direct.dir, &ray.dir) < 1e-9);
    }

    #[test]
    fn too_wide_cluster_rejected() {
        let src = Intrinsics::fisheye(300.0, 300.0, 639.5, 511.5, [0.0; 4], 1280, 1024).unwrap();
        let a = 85f64.to_radians();
        let pts: Vec<_> = [a, -a]
            .iter()
            .map(|t| src.project(&Vector3::new(t.sin(), 0.0, t.cos())).unwrap())
            .collect();
        assert!(matches!(
            make_virtual_camera(&pts, &src, "a".into(), &CropConfig::default()),
            Err(CropError::ClusterTooWide { .. })
        ));
    }

    #[test]
    fn deterministic_parameters() {
        let src = fisheye();
        let pts = vec![Vector2::new(700.0, 400.0), Vector2::new(760.0, 420.0), Vector2::new(720.0, 480.0)];
        let a = make_virtual_camera(&pts, &src, "a".into(), &CropConfig::default()).unwrap();
        let b = make_virtual_camera(&pts, &src, "a".into(), &CropConfig::default()).unwrap();
        assert_eq!(a.rotation().coords, b.rotation().coords);
        assert_eq!(a.focal().to_bits(), b.focal().to_bits());
    }
}
