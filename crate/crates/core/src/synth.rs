//! Synthetic rig-and-hand simulator.
//!
//! Ground-truth hand poses are pushed through the rig model to produce
//! detections for both detector stages, with pixel noise, outliers, dropout
//! and a confidence model. Everything is driven by one seeded RNG stream.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{camera_world_pose, Extrinsics, HeadsetPoseStream, RigCalibration};
use crate::crop::{angle_between, make_virtual_camera, CropConfig};
use crate::detections::{
    save_detections, DetectionSpace, Detector, FrameDetections, Hand, HandDetection, Keypoint2, DEFAULT_CONFIDENCE_THRESHOLD,
    LANDMARKS_PER_HAND,
};
use crate::hand::{forward_kinematics, save_poses, FitResult, FramePoses, HandModel, HandPose};
use crate::textfmt::{self, Fields, FormatError};
use crate::triangulation::{Joint3, Keypoints3D, JOINTS_PER_FRAME};

pub const GT_SCHEMA_VERSION: u32 = 1;
const FIXTURE_RIG: &str = include_str!("../data/rig_fixture.toml");

/// The bundled 10-camera rig: eight exocentric fisheyes around a working
/// volume centered 0.5 m in front of the wearer plus two headset cameras.
pub fn fixture_rig() -> RigCalibration {
    RigCalibration::from_toml_str(FIXTURE_RIG, "rig_fixture.toml").expect("bundled rig is valid")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Static,
    SinusoidalJoints,
    RandomWalkGlobal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub pixel_sigma: f64,
    pub outlier_fraction: f64,
    /// Pixel displacement of an outlier, applied in a uniformly random
    /// direction.
    pub outlier_magnitude: f64,
    pub dropout_fraction: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            pixel_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_magnitude: 20.0,
            dropout_fraction: 0.0,
        }
    }
}

/// Confidences are drawn from Gaussians clipped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceModel {
    pub inlier_mean: f64,
    pub outlier_mean: f64,
    pub spread: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            inlier_mean: 0.85,
            outlier_mean: 0.15,
            spread: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub motion: Motion,
    pub noise: NoiseConfig,
    pub confidence: ConfidenceModel,
    pub seed: u64,
    /// Also emit hand-stage detections in perspective crops.
    pub emit_crops: bool,
    /// Condition tags assigned to consecutive equal blocks of frames.
    pub conditions: Vec<String>,
    pub crop: CropConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 100,
            motion: Motion::SinusoidalJoints,
            noise: NoiseConfig::default(),
            confidence: ConfidenceModel::default(),
            seed: 0,
            emit_crops: true,
            conditions: vec!["no_interaction".into()],
            crop: CropConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        let n = &self.noise;
        if self.frames == 0 {
            return bad("frames must be at least 1");
        }
        if !(n.pixel_sigma >= 0.0 && n.pixel_sigma.is_finite()) {
            return bad("pixel_sigma must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&n.outlier_fraction) || !(0.0..=1.0).contains(&n.dropout_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(n.outlier_magnitude >= 0.0 && n.outlier_magnitude.is_finite()) {
            return bad("outlier_magnitude must be finite and non-negative");
        }
        let c = &self.confidence;
        if !(c.spread >= 0.0 && c.spread.is_finite() && c.inlier_mean.is_finite() && c.outlier_mean.is_finite()) {
            return bad("confidence model must be finite with non-negative spread");
        }
        if self.conditions.is_empty() || self.conditions.iter().any(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return bad("conditions must be non-empty tags without whitespace");
        }
        self.crop.validate().map_err(|e| SynthError::InvalidConfig(e.to_string()))
    }

    pub fn condition_for(&self, frame: usize) -> &str {
        &self.conditions[frame * self.conditions.len() / self.frames]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtFrame {
    pub keypoints: Keypoints3D,
    pub condition: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    /// Per frame, left then right.
    pub gt_poses: Vec<[HandPose; 2]>,
    pub gt: Vec<GtFrame>,
    pub detections: Vec<FrameDetections>,
    pub headset: HeadsetPoseStream,
}

impl SynthSequence {
    pub fn gt_poses_as_fits(&self) -> Vec<FramePoses> {
        let fit = |p: &HandPose| FitResult {
            pose: p.clone(),
            final_rms: 0.0,
            iterations: 0,
            objective_trace: Vec::new(),
        };
        self.gt_poses
            .iter()
            .zip(&self.gt)
            .map(|(p, g)| FramePoses {
                frame_index: g.keypoints.frame_index,
                left: Some(fit(&p[0])),
                right: Some(fit(&p[1])),
            })
            .collect()
    }
}

/// Palm-down hands in front of the wearer, fingers along rig +x.
fn base_global(hand: Hand) -> Extrinsics {
    // Columns are the hand axes in rig coordinates: radial, distal, palmar.
    let m = Matrix3::from_columns(&[Vector3::y(), Vector3::x(), -Vector3::z()]);
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    let y = match hand {
        Hand::Left => 0.10,
        Hand::Right => -0.10,
    };
    Extrinsics::new(rot, Vector3::new(0.40, y, -0.02))
}

fn headset_pose(motion: Motion, frame: usize) -> Extrinsics {
    let base = Vector3::new(0.05, 0.0, 0.35);
    if motion == Motion::Static {
        return Extrinsics::new(UnitQuaternion::identity(), base);
    }
    let f = frame as f64;
    let sway = Vector3::new(0.01 * (TAU * f / 240.0).sin(), 0.01 * (TAU * f / 300.0).sin(), 0.0);
    let yaw = 0.05 * (TAU * f / 200.0).sin();
    Extrinsics::new(UnitQuaternion::from_euler_angles(0.0, 0.0, yaw), base + sway)
}

struct JointWave {
    center: f64,
    amplitude: f64,
    period: f64,
    phase: f64,
}

struct HandMotion {
    base: HandPose,
    waves: Vec<JointWave>,
    walk_t: Vector3<f64>,
    walk_r: Vector3<f64>,
}

impl HandMotion {
    fn new(model: &HandModel, hand: Hand, rng: &mut ChaCha8Rng) -> Self {
        let limits = model.skeleton.dof_limits();
        let angles = limits
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random_range(0.25..0.55))
            .collect();
        let waves = limits
            .iter()
            .map(|&(lo, hi)| JointWave {
                center: lo + (hi - lo) * 0.45,
                amplitude: (hi - lo) * 0.25,
                period: rng.random_range(60.0..180.0),
                phase: rng.random_range(0.0..TAU),
            })
            .collect();
        HandMotion {
            base: HandPose {
                global: base_global(hand),
                angles,
            },
            waves,
            walk_t: Vector3::zeros(),
            walk_r: Vector3::zeros(),
        }
    }

    fn pose(&mut self, motion: Motion, frame: usize, rng: &mut ChaCha8Rng) -> HandPose {
        match motion {
            Motion::Static => self.base.clone(),
            Motion::SinusoidalJoints => HandPose {
                global: self.base.global,
                angles: self
                    .waves
                    .iter()
                    .map(|w| w.center + w.amplitude * (TAU * frame as f64 / w.period + w.phase).sin())
                    .collect(),
            },
            Motion::RandomWalkGlobal => {
                if frame > 0 {
                    let step_t = Normal::new(0.0, 0.0015).expect("valid sigma");
                    let step_r = Normal::new(0.0, 0.01).expect("valid sigma");
                    for i in 0..3 {
                        let t = self.walk_t[i] + step_t.sample(rng);
                        // Reflect at the edge of a 5 cm box.
                        self.walk_t[i] = if t.abs() > 0.05 { t.signum() * 0.1 - t } else { t };
                        self.walk_r[i] += step_r.sample(rng);
                    }
                    if self.walk_r.norm() > 0.4 {
                        self.walk_r *= 0.4 / self.walk_r.norm();
                    }
                }
                let g = self.base.global;
                HandPose {
                    global: Extrinsics::new(
                        UnitQuaternion::from_scaled_axis(self.walk_r) * g.rotation,
                        g.translation + self.walk_t,
                    ),
                    angles: self.base.angles.clone(),
                }
            }
        }
    }
}

struct Perturber<'a> {
    cfg: &'a SynthConfig,
    noise: Option<Normal<f64>>,
    inlier_conf: Option<Normal<f64>>,
    outlier_conf: Option<Normal<f64>>,
}

impl<'a> Perturber<'a> {
    fn new(cfg: &'a SynthConfig) -> Self {
        let normal = |m: f64, s: f64| (s > 0.0).then(|| Normal::new(m, s).expect("finite parameters"));
        Perturber {
            cfg,
            noise: normal(0.0, cfg.noise.pixel_sigma),
            inlier_conf: normal(cfg.confidence.inlier_mean, cfg.confidence.spread),
            outlier_conf: normal(cfg.confidence.outlier_mean, cfg.confidence.spread),
        }
    }

    /// Noise, outlier displacement, dropout and confidence for one keypoint.
    /// Draws a fixed number of variates so the stream stays aligned.
    fn perturb(&self, pixel: Vector2<f64>, rng: &mut ChaCha8Rng) -> Option<Keypoint2> {
        let n = &self.cfg.noise;
        let (dx, dy) = match &self.noise {
            Some(d) => (d.sample(rng), d.sample(rng)),
            None => (0.0, 0.0),
        };
        let is_outlier = rng.random::<f64>() < n.outlier_fraction;
        let dir = rng.random_range(0.0..TAU);
        let dropped = rng.random::<f64>() < n.dropout_fraction;
        let (dist, mean) = if is_outlier {
            (&self.outlier_conf, self.cfg.confidence.outlier_mean)
        } else {
            (&self.inlier_conf, self.cfg.confidence.inlier_mean)
        };
        let confidence = dist.as_ref().map_or(mean, |d| d.sample(rng)).clamp(0.0, 1.0);
        if dropped {
            return None;
        }
        let mut p = pixel + Vector2::new(dx, dy);
        if is_outlier {
            p += n.outlier_magnitude * Vector2::new(dir.cos(), dir.sin());
        }
        Some(Keypoint2 { pixel: p, confidence })
    }
}

/// Generates a complete synthetic dataset for `rig`.
pub fn generate_sequence(cfg: &SynthConfig, rig: &RigCalibration) -> Result<SynthSequence, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let models = [HandModel::default_for(Hand::Left), HandModel::default_for(Hand::Right)];
    let mut motions = [
        HandMotion::new(&models[0], Hand::Left, &mut rng),
        HandMotion::new(&models[1], Hand::Right, &mut rng),
    ];
    let headset = HeadsetPoseStream::new(
        (0..cfg.frames)
            .map(|f| (f as u64, headset_pose(cfg.motion, f)))
            .collect(),
    )
    .expect("frames are increasing");
    let perturber = Perturber::new(cfg);
    let mut gt_poses = Vec::with_capacity(cfg.frames);
    let mut gt = Vec::with_capacity(cfg.frames);
    let mut detections = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let frame_index = f as u64;
        let poses = [
            motions[0].pose(cfg.motion, f, &mut rng),
            motions[1].pose(cfg.motion, f, &mut rng),
        ];
        let mut kp = Keypoints3D::invalid(frame_index);
        let mut landmarks = [[Vector3::zeros(); LANDMARKS_PER_HAND]; 2];
        for (h, hand) in Hand::BOTH.into_iter().enumerate() {
            landmarks[h] = forward_kinematics(&models[h], &poses[h]).expect("pose matches skeleton");
            for (j, p) in landmarks[h].iter().enumerate() {
                kp.joints[hand.joint_offset() + j] = Joint3::valid_at(*p);
            }
        }
        let mut frame = FrameDetections::new(frame_index);
        for cam in rig.cameras() {
            let pose = camera_world_pose(rig, &cam.id, frame_index, &headset).expect("headset covers every frame");
            for (h, hand) in Hand::BOTH.into_iter().enumerate() {
                let mut body = [None; LANDMARKS_PER_HAND];
                for (slot, p) in body.iter_mut().zip(&landmarks[h]) {
                    let Ok(px) = cam.intrinsics.project(&pose.inverse_transform_point(p)) else { continue };
                    *slot = perturber
                        .perturb(px, &mut rng)
                        .filter(|k| cam.intrinsics.contains(&k.pixel));
                }
                let body_det = HandDetection {
                    frame_index,
                    camera_id: cam.id.clone(),
                    detector: Detector::BodyStage,
                    hand,
                    space: DetectionSpace::FullImage,
                    keypoints: body,
                };
                if !cfg.emit_crops {
                    if body_det.valid_count() > 0 {
                        frame.detections.push(body_det);
                    }
                    continue;
                }
                // The crop is framed from the body-stage output a detector
                // would have produced, after confidence filtering.
                let framing: Vec<Vector2<f64>> = body
                    .iter()
                    .flatten()
                    .filter(|k| k.confidence >= DEFAULT_CONFIDENCE_THRESHOLD)
                    .map(|k| k.pixel)
                    .collect();
                if body_det.valid_count() > 0 {
                    frame.detections.push(body_det);
                }
                let Ok(virt) = make_virtual_camera(&framing, &cam.intrinsics, cam.id.clone(), &cfg.crop) else {
                    continue;
                };
                let mut crop = [None; LANDMARKS_PER_HAND];
                for (slot, p) in crop.iter_mut().zip(&landmarks[h]) {
                    let Ok(px) = virt.project_world(p, &pose) else { continue };
                    *slot = perturber
                        .perturb(px, &mut rng)
                        .filter(|k| virt.intrinsics().contains(&k.pixel));
                }
                let crop_det = HandDetection {
                    frame_index,
                    camera_id: cam.id.clone(),
                    detector: Detector::HandStage,
                    hand,
                    space: DetectionSpace::Crop(virt),
                    keypoints: crop,
                };
                if crop_det.valid_count() > 0 {
                    frame.detections.push(crop_det);
                }
            }
        }
        gt_poses.push(poses);
        gt.push(GtFrame {
            keypoints: kp,
            condition: cfg.condition_for(f).to_string(),
        });
        detections.push(frame);
    }
    Ok(SynthSequence {
        gt_poses,
        gt,
        detections,
        headset,
    })
}

pub fn gt_to_text(frames: &[GtFrame]) -> String {
    let mut out = textfmt::header_line("gt", GT_SCHEMA_VERSION);
    out.push('\n');
    for g in frames {
        out.push_str(&format!("{} {}", g.keypoints.frame_index, g.condition));
        for j in &g.keypoints.joints {
            if j.valid {
                textfmt::push_floats(&mut out, j.position.as_slice());
            } else {
                out.push_str(" - - -");
            }
        }
        out.push('\n');
    }
    out
}

/// Ground-truth sidecar: `frame condition` then 42 `x y z` triples, `- - -`
/// for joints without ground truth.
pub fn parse_gt(text: &str, path: &str) -> Result<Vec<GtFrame>, FormatError> {
    let mut frames: Vec<GtFrame> = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        if textfmt::is_skippable(line) {
            continue;
        }
        if !header_seen {
            textfmt::check_header(path, line, "gt", GT_SCHEMA_VERSION)?;
            header_seen = true;
            continue;
        }
        let mut f = Fields::new(path, i + 1, line);
        let frame_index = f.next_u64("frame_index")?;
        if frames.last().is_some_and(|g| g.keypoints.frame_index >= frame_index) {
            return Err(f.err(format!("frame_index {frame_index} out of order")));
        }
        let condition = f.next_str("condition")?.to_string();
        let mut kp = Keypoints3D::invalid(frame_index);
        for j in kp.joints.iter_mut() {
            let xyz = [f.next_opt_f64("x")?, f.next_opt_f64("y")?, f.next_opt_f64("z")?];
            match xyz {
                [Some(x), Some(y), Some(z)] => *j = Joint3::valid_at(Vector3::new(x, y, z)),
                [None, None, None] => {}
                _ => return Err(f.err("partially missing joint")),
            }
        }
        f.finish()?;
        frames.push(GtFrame { keypoints: kp, condition });
    }
    Ok(frames)
}

pub fn load_gt(path: impl AsRef<Path>) -> Result<Vec<GtFrame>, FormatError> {
    let path = path.as_ref();
    parse_gt(&textfmt::read_to_string(path)?, &path.display().to_string())
}

pub fn save_gt(path: impl AsRef<Path>, frames: &[GtFrame]) -> Result<(), FormatError> {
    textfmt::write_string(path.as_ref(), &gt_to_text(frames))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AngleStats {
    /// Number of (frame, landmark) samples seen by at least two cameras.
    pub samples: usize,
    pub min_deg: f64,
    pub median_deg: f64,
    pub max_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibilityReport {
    pub camera_ids: Vec<String>,
    /// `counts[joint][camera]`: frames in which the joint is inside that
    /// camera's image.
    pub counts: Vec<Vec<usize>>,
    pub per_camera_totals: Vec<usize>,
    pub total: usize,
    /// Per joint: maximum pairwise angle between the viewing rays of the
    /// cameras that see it, summarized over frames.
    pub max_ray_angle: Vec<Option<AngleStats>>,
}

/// Visibility and ray-angle conditioning of ground-truth joints in a rig.
pub fn visibility_report(rig: &RigCalibration, headset: &HeadsetPoseStream, gt: &[Keypoints3D]) -> VisibilityReport {
    let cams = rig.cameras();
    let mut counts = vec![vec![0usize; cams.len()]; JOINTS_PER_FRAME];
    let mut angles: Vec<Vec<f64>> = vec![Vec::new(); JOINTS_PER_FRAME];
    for kp in gt {
        let poses: Vec<Option<Extrinsics>> = cams
            .iter()
            .map(|c| camera_world_pose(rig, &c.id, kp.frame_index, headset).ok())
            .collect();
        for (j, joint) in kp.joints.iter().enumerate().filter(|(_, j)| j.valid) {
            let mut rays = Vec::new();
            for (c, cam) in cams.iter().enumerate() {
                let Some(pose) = &poses[c] else { continue };
                let visible = cam
                    .intrinsics
                    .project(&pose.inverse_transform_point(&joint.position))
                    .is_ok_and(|px| cam.intrinsics.contains(&px));
                if visible {
                    counts[j][c] += 1;
                    rays.push(joint.position - pose.translation);
                }
            }
            let mut best: Option<f64> = None;
            for a in 0..rays.len() {
                for b in a + 1..rays.len() {
                    let ang = angle_between(&rays[a], &rays[b]);
                    best = Some(best.map_or(ang, |m: f64| m.max(ang)));
                }
            }
            if let Some(b) = best {
                angles[j].push(b.to_degrees());
            }
        }
    }
    let per_camera_totals: Vec<usize> = (0..cams.len()).map(|c| counts.iter().map(|row| row[c]).sum()).collect();
    let total = per_camera_totals.iter().sum();
    let max_ray_angle = angles
        .into_iter()
        .map(|mut a| {
            if a.is_empty() {
                return None;
            }
            a.sort_by(f64::total_cmp);
            Some(AngleStats {
                samples: a.len(),
                min_deg: a[0],
                median_deg: a[(a.len() - 1) / 2],
                max_deg: a[a.len() - 1],
            })
        })
        .collect();
    VisibilityReport {
        camera_ids: cams.iter().map(|c| c.id.clone()).collect(),
        counts,
        per_camera_totals,
        total,
        max_ray_angle,
    }
}

impl VisibilityReport {
    /// Plain-text table: one row per joint with per-camera counts and the
    /// median maximum ray angle.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<6}", "joint");
        for id in &self.camera_ids {
            out.push_str(&format!(" {id:>12}"));
        }
        out.push_str("  max_angle_median_deg\n");
        for (j, row) in self.counts.iter().enumerate() {
            out.push_str(&format!("{j:<6}"));
            for c in row {
                out.push_str(&format!(" {c:>12}"));
            }
            match &self.max_ray_angle[j] {
                Some(s) => out.push_str(&format!("  {:.1}\n", s.median_deg)),
                None => out.push_str("  -\n"),
            }
        }
        out.push_str(&format!("{:<6}", "total"));
        for t in &self.per_camera_totals {
            out.push_str(&format!(" {t:>12}"));
        }
        out.push_str(&format!("  {}\n", self.total));
        out
    }
}

/// Frame counts per condition tag.
pub fn condition_counts(gt: &[GtFrame]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for g in gt {
        *m.entry(g.condition.clone()).or_insert(0) += 1;
    }
    m
}

pub const DATASET_FILES: [&str; 6] = [
    "calibration.toml",
    "headset.txt",
    "detections.txt",
    "gt.txt",
    "gt_poses.txt",
    "synth.toml",
];

/// Writes a generated sequence as a dataset directory and returns the
/// written paths in [`DATASET_FILES`] order.
pub fn write_dataset(
    dir: &Path,
    seq: &SynthSequence,
    cfg: &SynthConfig,
    rig: &RigCalibration,
) -> Result<Vec<std::path::PathBuf>, FormatError> {
    std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    let paths: Vec<_> = DATASET_FILES.iter().map(|f| dir.join(f)).collect();
    rig.save(&paths[0])?;
    seq.headset.save(&paths[1])?;
    save_detections(&paths[2], &seq.detections)?;
    save_gt(&paths[3], &seq.gt)?;
    save_poses(&paths[4], &seq.gt_poses_as_fits())?;
    let text = toml::to_string(cfg).expect("synth config serializes to TOML");
    textfmt::write_string(&paths[5], &text)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::detections_to_text;

    fn small(frames: usize) -> SynthConfig {
        SynthConfig {
            frames,
            ..Default::default()
        }
    }

    #[test]
    fn fixture_has_ten_cameras() {
        assert_eq!(fixture_rig().cameras().len(), 10);
    }

    #[test]
    fn gt_matches_forward_kinematics() {
        let seq = generate_sequence(&small(3), &fixture_rig()).unwrap();
        let models = [HandModel::default_for(Hand::Left), HandModel::default_for(Hand::Right)];
        for (poses, g) in seq.gt_poses.iter().zip(&seq.gt) {
            for (h, hand) in Hand::BOTH.into_iter().enumerate() {
                let lm = forward_kinematics(&models[h], &poses[h]).unwrap();
                for (j, p) in lm.iter().enumerate() {
                    assert_eq!(g.keypoints.joints[hand.joint_offset() + j].position, *p);
                }
            }
        }
    }

    #[test]
    fn noiseless_detections_reproject_exactly() {
        let rig = fixture_rig();
        let seq = generate_sequence(&small(2), &rig).unwrap();
        let mut crops = 0;
        for (frame, g) in seq.detections.iter().zip(&seq.gt) {
            assert!(frame.detections.len() >= 30);
            for det in &frame.detections {
                let cam = rig.camera(&det.camera_id).unwrap();
                let pose = camera_world_pose(&rig, &det.camera_id, frame.frame_index, &seq.headset).unwrap();
                for (j, kp) in det.keypoints.iter().enumerate() {
                    let Some(kp) = kp else { continue };
                    let p = g.keypoints.joints[det.hand.joint_offset() + j].position;
                    let expected = match &det.space {
                        DetectionSpace::FullImage => cam.intrinsics.project(&pose.inverse_transform_point(&p)).unwrap(),
                        DetectionSpace::Crop(v) => {
                            crops += 1;
                            v.project_world(&p, &pose).unwrap()
                        }
                    };
                    assert!((kp.pixel - expected).norm() < 1e-9);
                    assert!(kp.confidence >= 0.3);
                }
            }
        }
        assert!(crops > 0);
    }

    #[test]
    fn full_dropout_is_empty() {
        let mut cfg = small(4);
        cfg.noise.dropout_fraction = 1.0;
        let seq = generate_sequence(&cfg, &fixture_rig()).unwrap();
        assert!(seq.detections.iter().all(|f| f.detections.is_empty()));
    }

    #[test]
    fn seed_determinism() {
        let mut cfg = small(5);
        cfg.noise.pixel_sigma = 1.0;
        cfg.noise.outlier_fraction = 0.2;
        cfg.motion = Motion::RandomWalkGlobal;
        cfg.seed = 42;
        let a = generate_sequence(&cfg, &fixture_rig()).unwrap();
        let b = generate_sequence(&cfg, &fixture_rig()).unwrap();
        assert_eq!(detections_to_text(&a.detections), detections_to_text(&b.detections));
        assert_eq!(gt_to_text(&a.gt), gt_to_text(&b.gt));
        cfg.seed = 43;
        let c = generate_sequence(&cfg, &fixture_rig()).unwrap();
        assert_ne!(detections_to_text(&a.detections), detections_to_text(&c.detections));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(0);
        assert!(cfg.validate().is_err());
        cfg.frames = 2;
        cfg.noise.outlier_fraction = 1.5;
        assert!(cfg.validate().is_err());
        cfg.noise.outlier_fraction = 0.0;
        cfg.noise.pixel_sigma = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn conditions_split_into_blocks() {
        let mut cfg = small(9);
        cfg.conditions = vec!["a".into(), "b".into(), "c".into()];
        let tags: Vec<&str> = (0..9).map(|f| cfg.condition_for(f)).collect();
        assert_eq!(tags, ["a", "a", "a", "b", "b", "b", "c", "c", "c"]);
    }

    #[test]
    fn gt_sidecar_round_trip() {
        let seq = generate_sequence(&small(3), &fixture_rig()).unwrap();
        let mut gt = seq.gt.clone();
        gt[1].keypoints.joints[4] = Joint3::INVALID;
        let text = gt_to_text(&gt);
        let parsed = parse_gt(&text, "gt").unwrap();
        assert_eq!(parsed, gt);
    }

    fn static_points(points: &[Vector3<f64>]) -> Vec<Keypoints3D> {
        let mut kp = Keypoints3D::invalid(0);
        for (j, p) in points.iter().enumerate() {
            kp.joints[j] = Joint3::valid_at(*p);
        }
        vec![kp]
    }

    #[test]
    fn dome_center_is_widely_visible() {
        let rig = fixture_rig();
        let headset = HeadsetPoseStream::new(vec![(0, headset_pose(Motion::Static, 0))]).unwrap();
        let report = visibility_report(&rig, &headset, &static_points(&[Vector3::new(0.5, 0.0, 0.0)]));
        let seen = report.counts[0].iter().filter(|&&c| c > 0).count();
        assert!(seen >= 8, "visible in {seen} cameras");
        assert_eq!(report.total, report.per_camera_totals.iter().sum::<usize>());
        assert_eq!(report.total, report.counts.iter().flatten().sum::<usize>());
        assert!(report.max_ray_angle[0].unwrap().max_deg > 90.0);
    }

    #[test]
    fn point_behind_every_camera_is_invisible() {
        let fixture = fixture_rig();
        // Camera z along rig +x.
        let look_x = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[
            -Vector3::y(),
            -Vector3::z(),
            Vector3::x(),
        ])));
        let cams = fixture.cameras()[..3]
            .iter()
            .enumerate()
            .map(|(i, c)| crate::camera::RigCamera {
                extrinsics: Extrinsics::new(look_x, Vector3::new(0.0, 0.1 * i as f64, 0.0)),
                mount: crate::camera::Mount::Exocentric,
                ..c.clone()
            })
            .collect();
        let rig = RigCalibration::new(cams, 60.0).unwrap();
        let headset = HeadsetPoseStream::default();
        let report = visibility_report(&rig, &headset, &static_points(&[Vector3::new(-1.0, 0.05, 0.0)]));
        assert_eq!(report.counts[0].iter().sum::<usize>(), 0);
        assert!(report.max_ray_angle[0].is_none());
        let front = visibility_report(&rig, &headset, &static_points(&[Vector3::new(1.0, 0.05, 0.0)]));
        assert_eq!(front.counts[0], vec![1, 1, 1]);
    }
}
