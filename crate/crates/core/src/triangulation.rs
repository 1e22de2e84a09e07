//! Robust multi-view triangulation of the 42 hand landmarks.
//!
//! Observations are bearing rays in the world frame, so detections from the
//! fisheye images and from pinhole crops are scored with one angular metric.

use std::path::Path;

use log::debug;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{
    camera_world_pose, pixel_ray_to_world, CameraError, HeadsetPoseStream, RigCalibration, WorldRay,
};
use crate::crop::{angle_between, crop_ray_to_world};
use crate::detections::{DetectionSpace, Detector, FrameDetections, LANDMARKS_PER_HAND};
use crate::textfmt::{self, FormatError, Fields};

pub const JOINTS_PER_FRAME: usize = 2 * LANDMARKS_PER_HAND;
pub const KEYPOINTS_SCHEMA_VERSION: u32 = 1;

/// Largest accepted condition number of the 3x3 normal matrix.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriangulationError {
    #[error("rays are too close to parallel (condition number {condition:.3e})")]
    DegenerateGeometry { condition: f64 },
    #[error("best consensus has {found} inliers, need {required}")]
    InsufficientInliers { found: usize, required: usize },
    #[error("camera {0:?} is not in the calibration")]
    MissingCalibration(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaySource {
    pub camera_id: String,
    pub detector: Detector,
}

/// A weighted bearing observation of one landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub dir: Vector3<f64>,
    pub weight: f64,
    pub source: RaySource,
}

impl Ray {
    pub fn new(world: WorldRay, weight: f64, source: RaySource) -> Self {
        Ray {
            origin: world.origin,
            dir: world.dir,
            weight,
            source,
        }
    }

    /// Angle between the ray direction and the direction from the ray origin
    /// to `point`.
    pub fn angular_residual(&self, point: &Vector3<f64>) -> f64 {
        let v = point - self.origin;
        if v.norm_squared() == 0.0 {
            return std::f64::consts::PI;
        }
        angle_between(&self.dir, &v)
    }
}

/// Weighted least-squares intersection of rays: minimizes
/// `sum w |(I - d d^T)(x - o)|^2` through the 3x3 normal equations.
pub fn triangulate_rays(rays: &[Ray]) -> Result<Vector3<f64>, TriangulationError> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for ray in rays {
        let proj = Matrix3::identity() - ray.dir * ray.dir.transpose();
        a += ray.weight * proj;
        b += ray.weight * (proj * ray.origin);
    }
    solve_normal_equations(&a, &b)
}

fn solve_normal_equations(a: &Matrix3<f64>, b: &Vector3<f64>) -> Result<Vector3<f64>, TriangulationError> {
    let eig = SymmetricEigen::new(*a);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(TriangulationError::DegenerateGeometry { condition });
    }
    // Solve through the eigendecomposition already at hand.
    let coeffs = eig.eigenvectors.transpose() * b;
    let scaled = coeffs.component_div(&eig.eigenvalues);
    Ok(eig.eigenvectors * scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Angular inlier threshold, radians.
    pub inlier_angle_rad: f64,
    /// Hypothesis budget; all pairs are enumerated when they fit in it.
    pub max_iters: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            inlier_angle_rad: 2e-3,
            max_iters: 256,
            min_inliers: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub point: Vector3<f64>,
    /// Indices into the input rays, ascending.
    pub inliers: Vec<usize>,
    /// RMS angular residual of the inliers at `point`, radians.
    pub residual_rms: f64,
}

struct Hypothesis {
    inliers: Vec<usize>,
    rms: f64,
}

impl Hypothesis {
    fn beats(&self, other: &Hypothesis) -> bool {
        if self.inliers.len() != other.inliers.len() {
            return self.inliers.len() > other.inliers.len();
        }
        if self.rms != other.rms {
            return self.rms < other.rms;
        }
        self.inliers.first() < other.inliers.first()
    }
}

fn score(rays: &[Ray], point: &Vector3<f64>, threshold: f64) -> Hypothesis {
    let mut inliers = Vec::new();
    let mut sum_sq = 0.0;
    for (i, ray) in rays.iter().enumerate() {
        let r = ray.angular_residual(point);
        if r < threshold {
            inliers.push(i);
            sum_sq += r * r;
        }
    }
    let rms = if inliers.is_empty() {
        f64::INFINITY
    } else {
        (sum_sq / inliers.len() as f64).sqrt()
    };
    Hypothesis { inliers, rms }
}

fn rms_residual(rays: &[Ray], indices: &[usize], point: &Vector3<f64>) -> f64 {
    let sum_sq: f64 = indices
        .iter()
        .map(|&i| rays[i].angular_residual(point).powi(2))
        .sum();
    (sum_sq / indices.len().max(1) as f64).sqrt()
}

/// Pair-sampling RANSAC over rays with a confidence-weighted refit.
///
/// Pairs are enumerated exhaustively when there are at most `max_iters` of
/// them, otherwise `max_iters` pairs are drawn from a generator seeded with
/// `cfg.seed`. Hypotheses are triangulated with unit weights and scored by
/// inlier count, then RMS angular residual, then lowest first inlier.
pub fn triangulate_ransac(rays: &[Ray], cfg: &RansacConfig) -> Result<RansacResult, TriangulationError> {
    let n = rays.len();
    let pair_count = n * n.saturating_sub(1) / 2;
    let mut best: Option<Hypothesis> = None;
    let mut consider = |i: usize, j: usize| {
        let pair = [unit_weight(&rays[i]), unit_weight(&rays[j])];
        let Ok(point) = triangulate_rays(&pair) else {
            return;
        };
        let hyp = score(rays, &point, cfg.inlier_angle_rad);
        if best.as_ref().is_none_or(|b| hyp.beats(b)) {
            best = Some(hyp);
        }
    };
    if pair_count <= cfg.max_iters {
        for i in 0..n {
            for j in i + 1..n {
                consider(i, j);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.max_iters {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            consider(i.min(j), i.max(j));
        }
    }
    let found = best.as_ref().map_or(0, |b| b.inliers.len());
    let required = cfg.min_inliers.max(2);
    let Some(best) = best.filter(|_| found >= required) else {
        return Err(TriangulationError::InsufficientInliers { found, required });
    };
    let consensus: Vec<Ray> = best.inliers.iter().map(|&i| rays[i].clone()).collect();
    let point = triangulate_rays(&consensus)?;
    let residual_rms = rms_residual(rays, &best.inliers, &point);
    Ok(RansacResult {
        point,
        inliers: best.inliers,
        residual_rms,
    })
}

fn unit_weight(ray: &Ray) -> Ray {
    Ray { weight: 1.0, ..ray.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint3 {
    pub position: Vector3<f64>,
    pub valid: bool,
    pub inlier_count: u32,
    /// Radians.
    pub residual_rms: f64,
}

impl Joint3 {
    pub const INVALID: Joint3 = Joint3 {
        position: Vector3::new(0.0, 0.0, 0.0),
        valid: false,
        inlier_count: 0,
        residual_rms: 0.0,
    };

    pub fn valid_at(position: Vector3<f64>) -> Self {
        Joint3 {
            position,
            valid: true,
            inlier_count: 0,
            residual_rms: 0.0,
        }
    }
}

/// The 42 landmarks of one frame: 21 left-hand joints then 21 right-hand
/// joints, each in the detection landmark order.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints3D {
    pub frame_index: u64,
    pub joints: [Joint3; JOINTS_PER_FRAME],
}

impl Keypoints3D {
    pub fn invalid(frame_index: u64) -> Self {
        Keypoints3D {
            frame_index,
            joints: [Joint3::INVALID; JOINTS_PER_FRAME],
        }
    }

    pub fn hand(&self, hand: crate::detections::Hand) -> &[Joint3] {
        let o = hand.joint_offset();
        &self.joints[o..o + LANDMARKS_PER_HAND]
    }

    pub fn valid_count(&self) -> usize {
        self.joints.iter().filter(|j| j.valid).count()
    }
}

/// Mixes frame and landmark into a per-task RANSAC seed so results do not
/// depend on processing order.
fn landmark_seed(seed: u64, frame_index: u64, joint: usize) -> u64 {
    let mut z = seed ^ frame_index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (joint as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lifts every valid keypoint of a filtered frame to a world ray, grouped by
/// joint index (0..42). Keypoints that fall outside their image are skipped.
pub fn lift_frame_rays(
    frame: &FrameDetections,
    calib: &RigCalibration,
    headset: &HeadsetPoseStream,
) -> Result<Vec<Vec<Ray>>, TriangulationError> {
    let mut per_joint: Vec<Vec<Ray>> = vec![Vec::new(); JOINTS_PER_FRAME];
    for det in &frame.detections {
        let cam = calib
            .camera(&det.camera_id)
            .ok_or_else(|| TriangulationError::MissingCalibration(det.camera_id.clone()))?;
        let pose = camera_world_pose(calib, &det.camera_id, frame.frame_index, headset)?;
        let offset = det.hand.joint_offset();
        for (j, kp) in det.keypoints.iter().enumerate() {
            let Some(kp) = kp else { continue };
            let lifted = match &det.space {
                DetectionSpace::FullImage => pixel_ray_to_world(&cam.intrinsics, &pose, &kp.pixel),
                DetectionSpace::Crop(virt) => crop_ray_to_world(&kp.pixel, virt, &pose),
            };
            match lifted {
                Ok(world) => per_joint[offset + j].push(Ray::new(
                    world,
                    kp.confidence,
                    RaySource {
                        camera_id: det.camera_id.clone(),
                        detector: det.detector,
                    },
                )),
                Err(e) => debug!(
                    "frame {} camera {} joint {}: dropped keypoint ({e})",
                    frame.frame_index,
                    det.camera_id,
                    offset + j
                ),
            }
        }
    }
    Ok(per_joint)
}

/// Triangulates each of the 42 landmarks independently. Landmarks without a
/// consensus are marked invalid rather than failing the frame.
pub fn triangulate_frame(
    frame: &FrameDetections,
    calib: &RigCalibration,
    headset: &HeadsetPoseStream,
    cfg: &RansacConfig,
) -> Result<Keypoints3D, TriangulationError> {
    let per_joint = lift_frame_rays(frame, calib, headset)?;
    let mut out = Keypoints3D::invalid(frame.frame_index);
    for (j, rays) in per_joint.iter().enumerate() {
        let joint_cfg = RansacConfig {
            seed: landmark_seed(cfg.seed, frame.frame_index, j),
            ..*cfg
        };
        match triangulate_ransac(rays, &joint_cfg) {
            Ok(res) => {
                out.joints[j] = Joint3 {
                    position: res.point,
                    valid: true,
                    inlier_count: res.inliers.len() as u32,
                    residual_rms: res.residual_rms,
                };
            }
            Err(e) => debug!("frame {} joint {j}: {e}", frame.frame_index),
        }
    }
    Ok(out)
}

pub fn keypoints_header() -> String {
    textfmt::header_line("keypoints3d", KEYPOINTS_SCHEMA_VERSION) + "\n"
}

pub fn format_keypoints(kp: &Keypoints3D) -> String {
    let mut out = kp.frame_index.to_string();
    for j in &kp.joints {
        textfmt::push_floats(&mut out, j.position.as_slice());
        out.push_str(if j.valid { " 1" } else { " 0" });
        out.push_str(&format!(" {}", j.inlier_count));
        textfmt::push_floats(&mut out, &[j.residual_rms]);
    }
    out
}

pub fn keypoints_to_text(frames: &[Keypoints3D]) -> String {
    let mut out = keypoints_header();
    for kp in frames {
        out.push_str(&format_keypoints(kp));
        out.push('\n');
    }
    out
}

pub fn parse_keypoints(text: &str, path: &str) -> Result<Vec<Keypoints3D>, FormatError> {
    let mut frames: Vec<Keypoints3D> = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if textfmt::is_skippable(line) {
            continue;
        }
        if !header_seen {
            textfmt::check_header(path, line, "keypoints3d", KEYPOINTS_SCHEMA_VERSION)?;
            header_seen = true;
            continue;
        }
        let mut f = Fields::new(path, lineno, line);
        let frame_index = f.next_u64("frame_index")?;
        if let Some(prev) = frames.last() {
            if frame_index <= prev.frame_index {
                return Err(f.err(format!("frame_index {frame_index} out of order")));
            }
        }
        let mut kp = Keypoints3D::invalid(frame_index);
        for joint in kp.joints.iter_mut() {
            let x = f.next_f64("x")?;
            let y = f.next_f64("y")?;
            let z = f.next_f64("z")?;
            let valid = f.next_bool01("valid")?;
            let inliers = f.next_u64("inlier_count")?;
            let rms = f.next_f64("residual_rms")?;
            *joint = Joint3 {
                position: Vector3::new(x, y, z),
                valid,
                inlier_count: u32::try_from(inliers).map_err(|_| f.err("inlier_count too large"))?,
                residual_rms: rms,
            };
        }
        f.finish()?;
        frames.push(kp);
    }
    Ok(frames)
}

pub fn load_keypoints(path: impl AsRef<Path>) -> Result<Vec<Keypoints3D>, FormatError> {
    let path = path.as_ref();
    parse_keypoints(&textfmt::read_to_string(path)?, &path.display().to_string())
}

pub fn save_keypoints(path: impl AsRef<Path>, frames: &[Keypoints3D]) -> Result<(), FormatError> {
    textfmt::write_string(path.as_ref(), &keypoints_to_text(frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;

    fn ray(origin: [f64; 3], dir: [f64; 3]) -> Ray {
        Ray {
            origin: Vector3::from(origin),
            dir: Vector3::from(dir).normalize(),
            weight: 1.0,
            source: RaySource {
                camera_id: "c".into(),
                detector: Detector::BodyStage,
            },
        }
    }

    /// Rays from points scattered on a sphere around `target`.
    fn rays_through(target: Vector3<f64>, n: usize) -> Vec<Ray> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 2.399_963;
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let origin = target + 0.8 * Vector3::new(r * a.cos(), r * a.sin(), z);
                let d = target - origin;
                ray(origin.into(), d.into())
            })
            .collect()
    }

    #[test]
    fn orthogonal_rays_intersect() {
        let p = triangulate_rays(&[ray([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]), ray([1.0, -1.0, 0.0], [0.0, 1.0, 0.0])])
            .unwrap();
        assert!((p - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    /// Closed-form midpoint of the common perpendicular of two lines.
    fn skew_midpoint(o1: Vector3<f64>, d1: Vector3<f64>, o2: Vector3<f64>, d2: Vector3<f64>) -> Vector3<f64> {
        let w = o1 - o2;
        let (a, b, c) = (d1.dot(&d1), d1.dot(&d2), d2.dot(&d2));
        let (d, e) = (d1.dot(&w), d2.dot(&w));
        let den = a * c - b * b;
        let s = (b * e - c * d) / den;
        let t = (a * e - b * d) / den;
        0.5 * ((o1 + s * d1) + (o2 + t * d2))
    }

    #[test]
    fn skew_rays_meet_at_common_perpendicular_midpoint() {
        // x axis and the line x=0, z=1 along +y: closest points (0,0,0) and (0,0,1).
        let p = triangulate_rays(&[ray([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]), ray([0.0, 1.0, 1.0], [0.0, 1.0, 0.0])])
            .unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 0.5)).norm() < 1e-12);
        let cases = [
            ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 0.0]),
            ([0.3, -1.0, 2.0], [1.0, 2.0, 0.5], [-0.4, 0.7, 0.1], [-0.3, 0.2, 1.0]),
            ([1.0, 1.0, 1.0], [0.0, 0.0, 1.0], [2.0, -3.0, 0.0], [1.0, 1.0, 0.0]),
        ];
        for (o1, d1, o2, d2) in cases {
            let (r1, r2) = (ray(o1, d1), ray(o2, d2));
            let p = triangulate_rays(&[r1.clone(), r2.clone()]).unwrap();
            let m = skew_midpoint(r1.origin, r1.dir, r2.origin, r2.dir);
            assert!((p - m).norm() < 1e-12, "{p} vs {m}");
        }
    }

    #[test]
    fn parallel_rays_are_degenerate() {
        let r = triangulate_rays(&[ray([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]), ray([1.0, 0.0, 0.0], [0.0, 0.0, 1.0])]);
        assert!(matches!(r, Err(TriangulationError::DegenerateGeometry { .. })));
    }

    #[test]
    fn noiseless_consensus() {
        let target = Vector3::new(0.4, -0.1, 0.2);
        let rays = rays_through(target, 10);
        let res = triangulate_ransac(&rays, &RansacConfig::default()).unwrap();
        assert!((res.point - target).norm() < 1e-9);
        assert_eq!(res.inliers, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn single_ray_is_insufficient() {
        let rays = rays_through(Vector3::zeros(), 1);
        assert!(matches!(
            triangulate_ransac(&rays, &RansacConfig::default()),
            Err(TriangulationError::InsufficientInliers { found: 0, .. })
        ));
    }

    #[test]
    fn sampled_mode_is_seed_deterministic() {
        let target = Vector3::new(0.1, 0.2, 0.3);
        let rays = rays_through(target, 30);
        let cfg = RansacConfig { max_iters: 50, seed: 11, ..Default::default() };
        let a = triangulate_ransac(&rays, &cfg).unwrap();
        let b = triangulate_ransac(&rays, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((a.point - target).norm() < 1e-9);
    }

    proptest! {
        #[test]
        fn rigid_motion_equivariance(
            rot in prop::array::uniform3(-3.0f64..3.0),
            t in prop::array::uniform3(-2.0f64..2.0),
            target in prop::array::uniform3(-0.5f64..0.5),
        ) {
            let target = Vector3::from(target);
            let rays = rays_through(target, 8);
            let q = UnitQuaternion::from_scaled_axis(Vector3::from(rot));
            let t = Vector3::from(t);
            let moved: Vec<Ray> = rays
                .iter()
                .map(|r| Ray { origin: q * r.origin + t, dir: q * r.dir, ..r.clone() })
                .collect();
            let a = triangulate_ransac(&rays, &RansacConfig::default()).unwrap();
            let b = triangulate_ransac(&moved, &RansacConfig::default()).unwrap();
            prop_assert!((q * a.point + t - b.point).norm() < 1e-9);
            prop_assert_eq!(a.inliers, b.inliers);
        }
    }

    #[test]
    fn keypoints_text_round_trip() {
        let mut kp = Keypoints3D::invalid(12);
        kp.joints[3] = Joint3 {
            position: Vector3::new(0.1, -0.2, 0.30000000000000004),
            valid: true,
            inlier_count: 7,
            residual_rms: 1.25e-4,
        };
        let text = keypoints_to_text(&[kp.clone()]);
        let parsed = parse_keypoints(&text, "k").unwrap();
        assert_eq!(parsed, vec![kp]);
        assert_eq!(keypoints_to_text(&parsed), text);
    }

    #[test]
    fn seeds_differ_per_joint() {
        assert_ne!(landmark_seed(0, 0, 0), landmark_seed(0, 0, 1));
        assert_ne!(landmark_seed(0, 1, 0), landmark_seed(0, 0, 0));
    }
}
