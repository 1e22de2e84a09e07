//! Batch orchestration: detections to keypoints to hand poses, streamed in
//! chunks over a worker pool with output in frame order.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use nalgebra::{Quaternion, UnitQuaternion, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::{HeadsetPoseStream, RigCalibration};
use crate::crop::{make_virtual_camera, CropConfig, VirtualCamera};
use crate::detections::{
    filter_confidence_per_detector, load_detections, ConfidenceThresholds, DetectionSpace, Detector, FrameDetections,
    Hand, DEFAULT_CONFIDENCE_THRESHOLD,
};
use crate::hand::{
    bone_transforms, fit_frame, format_pose_line, poses_header, skin_vertices, FramePoses, HandModel, HandSkeleton,
    IkConfig, SkinnedMesh, SubjectProfile,
};
use crate::textfmt::{self, Fields, FormatError};
use crate::triangulation::{
    format_keypoints, keypoints_header, load_keypoints, triangulate_frame, Keypoints3D, RansacConfig,
};

pub const PIPELINE_CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const CROPS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        1
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelinePaths {
    pub calibration: Option<PathBuf>,
    pub headset: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub left_profile: Option<PathBuf>,
    pub right_profile: Option<PathBuf>,
}

impl PipelinePaths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.calibration,
            &mut self.headset,
            &mut self.detections,
            &mut self.output_dir,
            &mut self.left_profile,
            &mut self.right_profile,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub confidence_threshold: f64,
    /// Overrides `confidence_threshold` per detector stage when set.
    pub detector_thresholds: Option<ConfidenceThresholds>,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    /// Frames in flight per batch.
    pub chunk_size: usize,
    /// Initialize each frame's fit from the previous frame. Forces the fit
    /// stage to run sequentially.
    pub warm_start: bool,
    pub write_meshes: bool,
    pub paths: PipelinePaths,
    pub crop: CropConfig,
    pub ransac: RansacConfig,
    pub ik: IkConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: PIPELINE_CONFIG_SCHEMA_VERSION,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            detector_thresholds: None,
            workers: 0,
            chunk_size: 64,
            warm_start: false,
            write_meshes: false,
            paths: PipelinePaths::default(),
            crop: CropConfig::default(),
            ransac: RansacConfig::default(),
            ik: IkConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses a config file. Relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, path: &str, base_dir: &Path) -> Result<Self, FormatError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| FormatError::invalid(path, e.to_string()))?;
        if cfg.schema_version != PIPELINE_CONFIG_SCHEMA_VERSION {
            return Err(FormatError::SchemaVersionMismatch {
                path: path.to_string(),
                found: cfg.schema_version.to_string(),
                expected: PIPELINE_CONFIG_SCHEMA_VERSION.to_string(),
            });
        }
        cfg.paths.resolve_against(base_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&textfmt::read_to_string(path)?, &path.display().to_string(), base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes to TOML")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn thresholds(&self) -> ConfidenceThresholds {
        self.detector_thresholds
            .unwrap_or_else(|| ConfidenceThresholds::uniform(self.confidence_threshold))
    }

    /// Range checks on every numeric field.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let t = self.thresholds();
        for (name, v) in [("confidence_threshold", self.confidence_threshold), ("body", t.body), ("hand", t.hand)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(format!("{name} threshold {v} outside [0, 1]")));
            }
        }
        if self.chunk_size == 0 {
            return Err(config_err("chunk_size must be at least 1"));
        }
        self.crop.validate().map_err(|e| config_err(e.to_string()))?;
        let r = &self.ransac;
        if !(r.inlier_angle_rad > 0.0 && r.inlier_angle_rad < std::f64::consts::PI) {
            return Err(config_err("ransac.inlier_angle_rad must lie in (0, pi)"));
        }
        if r.max_iters == 0 || r.min_inliers < 2 {
            return Err(config_err("ransac needs max_iters >= 1 and min_inliers >= 2"));
        }
        let k = &self.ik;
        if k.max_iters == 0 || !(k.tol > 0.0) || !(k.grad_tol > 0.0) || !(k.initial_lambda > 0.0) {
            return Err(config_err("ik needs max_iters >= 1 and positive tolerances"));
        }
        if !(k.limit_penalty_weight >= 0.0 && k.limit_penalty_weight.is_finite()) {
            return Err(config_err("ik.limit_penalty_weight must be finite and non-negative"));
        }
        Ok(())
    }

    fn worker_pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| config_err(format!("cannot start worker pool: {e}")))
    }

    /// Left and right hand models with the configured subject profiles.
    pub fn hand_models(&self) -> Result<[HandModel; 2], PipelineError> {
        let model = |hand: Hand, profile: &Option<PathBuf>| -> Result<HandModel, PipelineError> {
            let skel = HandSkeleton::default_for(hand);
            let profile = match profile {
                Some(p) => SubjectProfile::load(existing_file(p, "profile")?)?,
                None => SubjectProfile::unit("default", skel.bones().len()),
            };
            HandModel::new(skel, profile).map_err(|e| config_err(format!("{hand} hand: {e}")))
        };
        Ok([
            model(Hand::Left, &self.paths.left_profile)?,
            model(Hand::Right, &self.paths.right_profile)?,
        ])
    }
}

fn existing_file<'a>(path: &'a Path, what: &str) -> Result<&'a Path, PipelineError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(config_err(format!("{what} file {} not found", path.display())))
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, PipelineError> {
    let path = path
        .as_deref()
        .ok_or_else(|| config_err(format!("no {what} path configured")))?;
    existing_file(path, what)
}

fn create(path: &Path) -> Result<BufWriter<File>, FormatError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| FormatError::io(path, e))
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> FormatError + '_ {
    move |e| FormatError::io(path, e)
}

pub fn sha256_file(path: &Path) -> Result<String, FormatError> {
    let mut file = File::open(path).map_err(io_at(path))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(io_at(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Wall time spent in each stage. Stages run in parallel accumulate the
/// time of every worker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub read_s: f64,
    pub triangulate_s: f64,
    pub fit_s: f64,
    pub write_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub frames_read: usize,
    pub frames_written: usize,
    /// Frames skipped after a per-frame failure, ascending.
    pub failed_frames: Vec<u64>,
    pub timings: StageTimings,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_sha256: String,
    pub frames_read: usize,
    pub frames_written: usize,
    pub failed_frames: Vec<u64>,
    pub timings: StageTimings,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl Manifest {
    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, FormatError> {
        toml::from_str(text).map_err(|e| FormatError::invalid(path, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        Self::from_toml_str(&textfmt::read_to_string(path)?, &path.display().to_string())
    }
}

enum Source {
    Detections {
        path: PathBuf,
        calib: RigCalibration,
        headset: HeadsetPoseStream,
    },
    Keypoints(PathBuf),
}

struct Sinks {
    keypoints: Option<BufWriter<File>>,
    poses: Option<BufWriter<File>>,
    meshes: Option<PathBuf>,
}

struct FitStage {
    models: [HandModel; 2],
    meshes: [SkinnedMesh; 2],
}

enum Unit {
    Detections(FrameDetections),
    Keypoints(Box<Keypoints3D>),
}

struct Processed {
    keypoints: Keypoints3D,
    poses: Option<FramePoses>,
    triangulate: Duration,
    fit: Duration,
}

fn process_unit(
    unit: Unit,
    source: &Source,
    cfg: &PipelineConfig,
    fit: Option<&FitStage>,
) -> Result<Processed, String> {
    let start = Instant::now();
    let keypoints = match (unit, source) {
        (Unit::Keypoints(kp), _) => *kp,
        (Unit::Detections(frame), Source::Detections { calib, headset, .. }) => {
            let filtered = filter_confidence_per_detector(&frame, &cfg.thresholds());
            triangulate_frame(&filtered, calib, headset, &cfg.ransac).map_err(|e| e.to_string())?
        }
        (Unit::Detections(_), Source::Keypoints(_)) => unreachable!("detections only come from a detections source"),
    };
    let triangulate = start.elapsed();
    let start = Instant::now();
    let poses = match fit {
        Some(stage) if !cfg.warm_start => Some(fit_frame(&keypoints, &stage.models, None, &cfg.ik)),
        _ => None,
    };
    Ok(Processed {
        keypoints,
        poses,
        triangulate,
        fit: start.elapsed(),
    })
}

fn write_meshes(dir: &Path, stage: &FitStage, poses: &FramePoses, outputs: &mut Vec<PathBuf>) -> Result<(), FormatError> {
    for (i, hand) in Hand::BOTH.into_iter().enumerate() {
        let Some(fit) = poses.get(hand) else { continue };
        let path = dir.join(format!("frame_{:06}_{}.obj", poses.frame_index, hand.tag()));
        let vertices = bone_transforms(&stage.models[i], &fit.pose)
            .and_then(|t| skin_vertices(&stage.meshes[i], &t))
            .map_err(|e| FormatError::invalid(&path, e.to_string()))?;
        stage.meshes[i].save_obj(&path, &vertices)?;
        outputs.push(path);
    }
    Ok(())
}

/// Pulls up to `n` usable units from the source, skipping frames with
/// malformed records.
struct UnitReader {
    detections: Option<crate::detections::DetectionReader<std::io::BufReader<File>>>,
    keypoints: std::vec::IntoIter<Keypoints3D>,
    bad_frames: BTreeSet<u64>,
}

impl UnitReader {
    fn open(source: &Source) -> Result<Self, FormatError> {
        Ok(match source {
            Source::Detections { path, .. } => UnitReader {
                detections: Some(load_detections(path)?),
                keypoints: Vec::new().into_iter(),
                bad_frames: BTreeSet::new(),
            },
            Source::Keypoints(path) => UnitReader {
                detections: None,
                keypoints: load_keypoints(path)?.into_iter(),
                bad_frames: BTreeSet::new(),
            },
        })
    }

    fn next_chunk(&mut self, n: usize) -> Result<Vec<Unit>, FormatError> {
        let mut out = Vec::with_capacity(n);
        let Some(reader) = self.detections.as_mut() else {
            out.extend(self.keypoints.by_ref().take(n).map(|k| Unit::Keypoints(Box::new(k))));
            return Ok(out);
        };
        while out.len() < n {
            match reader.next() {
                None => break,
                Some(Ok(frame)) if self.bad_frames.contains(&frame.frame_index) => {}
                Some(Ok(frame)) => out.push(Unit::Detections(frame)),
                Some(Err(e @ FormatError::Io { .. })) => return Err(e),
                Some(Err(e)) => {
                    warn!("{e}; skipping the frame");
                    if let Some(f) = reader.last_failed_frame() {
                        self.bad_frames.insert(f);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn run(cfg: &PipelineConfig, source: Source, mut sinks: Sinks) -> Result<RunStats, PipelineError> {
    let total = Instant::now();
    let pool = cfg.worker_pool()?;
    let fit = if sinks.poses.is_some() {
        let models = cfg.hand_models()?;
        let meshes = [SkinnedMesh::tube_hand(&models[0]), SkinnedMesh::tube_hand(&models[1])];
        Some(FitStage { models, meshes })
    } else {
        None
    };
    if let Some(dir) = &sinks.meshes {
        std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    let mut stats = RunStats::default();
    let mut reader = UnitReader::open(&source)?;
    if let Some(w) = sinks.keypoints.as_mut() {
        w.write_all(keypoints_header().as_bytes()).map_err(io_at(Path::new("keypoints")))?;
    }
    if let Some(w) = sinks.poses.as_mut() {
        w.write_all(poses_header().as_bytes()).map_err(io_at(Path::new("poses")))?;
    }
    let mut failed: BTreeSet<u64> = BTreeSet::new();
    let mut prev: Option<FramePoses> = None;
    loop {
        let t = Instant::now();
        let chunk = reader.next_chunk(cfg.chunk_size)?;
        stats.timings.read_s += t.elapsed().as_secs_f64();
        if chunk.is_empty() {
            break;
        }
        stats.frames_read += chunk.len();
        let frame_ids: Vec<u64> = chunk
            .iter()
            .map(|u| match u {
                Unit::Detections(f) => f.frame_index,
                Unit::Keypoints(k) => k.frame_index,
            })
            .collect();
        let results: Vec<Result<Processed, String>> = pool.install(|| {
            chunk
                .into_par_iter()
                .map(|u| process_unit(u, &source, cfg, fit.as_ref()))
                .collect()
        });
        for (frame, result) in frame_ids.into_iter().zip(results) {
            let mut done = match result {
                Ok(p) => p,
                Err(msg) => {
                    warn!("frame {frame}: {msg}; skipping the frame");
                    failed.insert(frame);
                    continue;
                }
            };
            stats.timings.triangulate_s += done.triangulate.as_secs_f64();
            stats.timings.fit_s += done.fit.as_secs_f64();
            if let (Some(stage), true) = (&fit, cfg.warm_start) {
                let t = Instant::now();
                done.poses = Some(fit_frame(&done.keypoints, &stage.models, prev.as_ref(), &cfg.ik));
                stats.timings.fit_s += t.elapsed().as_secs_f64();
            }
            let t = Instant::now();
            if let Some(w) = sinks.keypoints.as_mut() {
                writeln!(w, "{}", format_keypoints(&done.keypoints)).map_err(io_at(Path::new("keypoints")))?;
            }
            if let (Some(w), Some(poses)) = (sinks.poses.as_mut(), done.poses.as_ref()) {
                for hand in Hand::BOTH {
                    if let Some(f) = poses.get(hand) {
                        writeln!(w, "{}", format_pose_line(poses.frame_index, hand, f))
                            .map_err(io_at(Path::new("poses")))?;
                    }
                }
            }
            if let (Some(dir), Some(stage), Some(poses)) = (&sinks.meshes, &fit, done.poses.as_ref()) {
                write_meshes(dir, stage, poses, &mut stats.outputs)?;
            }
            stats.timings.write_s += t.elapsed().as_secs_f64();
            stats.frames_written += 1;
            prev = done.poses;
        }
    }
    failed.extend(&reader.bad_frames);
    stats.failed_frames = failed.into_iter().collect();
    for w in [sinks.keypoints.as_mut(), sinks.poses.as_mut()].into_iter().flatten() {
        w.flush().map_err(io_at(Path::new("output")))?;
    }
    stats.timings.total_s = total.elapsed().as_secs_f64();
    Ok(stats)
}

fn load_detection_source(cfg: &PipelineConfig) -> Result<Source, PipelineError> {
    let calibration = required(&cfg.paths.calibration, "calibration")?;
    let headset = required(&cfg.paths.headset, "headset")?;
    let detections = required(&cfg.paths.detections, "detections")?;
    Ok(Source::Detections {
        path: detections.to_path_buf(),
        calib: RigCalibration::load(calibration)?,
        headset: HeadsetPoseStream::load(headset)?,
    })
}

/// Triangulation stage alone: detections to a keypoints file.
pub fn triangulate_to_file(cfg: &PipelineConfig, out: &Path) -> Result<RunStats, PipelineError> {
    cfg.validate()?;
    let source = load_detection_source(cfg)?;
    let mut stats = run(
        cfg,
        source,
        Sinks {
            keypoints: Some(create(out)?),
            poses: None,
            meshes: None,
        },
    )?;
    stats.outputs.insert(0, out.to_path_buf());
    Ok(stats)
}

/// Fit stage alone: a keypoints file to a poses file, plus optional meshes.
pub fn fit_to_file(
    cfg: &PipelineConfig,
    keypoints: &Path,
    out: &Path,
    mesh_dir: Option<&Path>,
) -> Result<RunStats, PipelineError> {
    cfg.validate()?;
    let keypoints = existing_file(keypoints, "keypoints")?;
    let mut stats = run(
        cfg,
        Source::Keypoints(keypoints.to_path_buf()),
        Sinks {
            keypoints: None,
            poses: Some(create(out)?),
            meshes: mesh_dir.map(Path::to_path_buf),
        },
    )?;
    stats.outputs.insert(0, out.to_path_buf());
    Ok(stats)
}

pub const KEYPOINTS_FILE: &str = "keypoints.txt";
pub const POSES_FILE: &str = "poses.txt";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MESH_DIR: &str = "meshes";

/// Full run: triangulates and fits every frame, then writes the manifest.
/// All inputs are checked before any frame is read.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(RunStats, Manifest), PipelineError> {
    cfg.validate()?;
    let source = load_detection_source(cfg)?;
    let out_dir = cfg
        .paths
        .output_dir
        .as_deref()
        .ok_or_else(|| config_err("no output_dir path configured"))?;
    std::fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let kp_path = out_dir.join(KEYPOINTS_FILE);
    let pose_path = out_dir.join(POSES_FILE);
    let mut stats = run(
        cfg,
        source,
        Sinks {
            keypoints: Some(create(&kp_path)?),
            poses: Some(create(&pose_path)?),
            meshes: cfg.write_meshes.then(|| out_dir.join(MESH_DIR)),
        },
    )?;
    stats.outputs.splice(0..0, [kp_path, pose_path]);
    info!(
        "processed {} frames, {} skipped, in {:.2} s",
        stats.frames_written,
        stats.failed_frames.len(),
        stats.timings.total_s
    );

    let hash = |role: &str, p: &Path| -> Result<FileHash, FormatError> {
        Ok(FileHash {
            role: role.to_string(),
            path: p.display().to_string(),
            sha256: sha256_file(p)?,
        })
    };
    let mut inputs = Vec::new();
    let p = &cfg.paths;
    for (role, path) in [
        ("calibration", &p.calibration),
        ("headset", &p.headset),
        ("detections", &p.detections),
        ("left_profile", &p.left_profile),
        ("right_profile", &p.right_profile),
    ] {
        if let Some(path) = path {
            inputs.push(hash(role, path)?);
        }
    }
    let outputs = stats
        .outputs
        .iter()
        .map(|o| hash("output", o))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: cfg.hash(),
        frames_read: stats.frames_read,
        frames_written: stats.frames_written,
        failed_frames: stats.failed_frames.clone(),
        timings: stats.timings,
        inputs,
        outputs,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes to TOML");
    textfmt::write_string(&out_dir.join(MANIFEST_FILE), &text)?;
    Ok((stats, manifest))
}

/// A perspective crop planned for one hand in one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRecord {
    pub frame_index: u64,
    pub hand: Hand,
    pub virt: VirtualCamera,
}

/// Frames a crop around every body-stage full-image detection, using only
/// keypoints that pass the confidence filter.
pub fn plan_crops(frame: &FrameDetections, calib: &RigCalibration, cfg: &PipelineConfig) -> Vec<CropRecord> {
    let filtered = filter_confidence_per_detector(frame, &cfg.thresholds());
    let mut out = Vec::new();
    for det in filtered.detections.iter().filter(|d| d.detector == Detector::BodyStage) {
        if !matches!(det.space, DetectionSpace::FullImage) {
            continue;
        }
        let Some(cam) = calib.camera(&det.camera_id) else {
            warn!("frame {}: camera {} not in calibration", frame.frame_index, det.camera_id);
            continue;
        };
        let pixels: Vec<Vector2<f64>> = det.keypoints.iter().flatten().map(|k| k.pixel).collect();
        match make_virtual_camera(&pixels, &cam.intrinsics, cam.id.clone(), &cfg.crop) {
            Ok(virt) => out.push(CropRecord {
                frame_index: frame.frame_index,
                hand: det.hand,
                virt,
            }),
            Err(e) => warn!("frame {} camera {} hand {}: {e}", frame.frame_index, cam.id, det.hand),
        }
    }
    out
}

pub fn crops_header() -> String {
    textfmt::header_line("crops", CROPS_SCHEMA_VERSION) + "\n"
}

/// `frame camera hand qw qx qy qz focal size`
pub fn format_crop(rec: &CropRecord) -> String {
    let mut out = format!("{} {} {}", rec.frame_index, rec.virt.source_camera_id(), rec.hand.tag());
    let q = rec.virt.rotation().quaternion();
    textfmt::push_floats(&mut out, &[q.w, q.i, q.j, q.k, rec.virt.focal()]);
    out.push_str(&format!(" {}", rec.virt.intrinsics().width()));
    out
}

pub fn parse_crops(text: &str, path: &str) -> Result<Vec<CropRecord>, FormatError> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        if textfmt::is_skippable(line) {
            continue;
        }
        if !header_seen {
            textfmt::check_header(path, line, "crops", CROPS_SCHEMA_VERSION)?;
            header_seen = true;
            continue;
        }
        let mut f = Fields::new(path, i + 1, line);
        let frame_index = f.next_u64("frame_index")?;
        let camera = f.next_str("camera_id")?.to_string();
        let hand: Hand = f.next_str("hand")?.parse().map_err(|e: String| f.err(e))?;
        let mut q = [0.0; 4];
        for (k, v) in q.iter_mut().enumerate() {
            *v = f.next_f64(["qw", "qx", "qy", "qz"][k])?;
        }
        let focal = f.next_f64("focal")?;
        let size = f.next_u64("size")?;
        let err = f.err("invalid virtual camera");
        f.finish()?;
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        if (quat.norm() - 1.0).abs() > crate::camera::QUATERNION_NORM_TOL {
            return Err(FormatError::parse(path, i + 1, "crop rotation is not a unit quaternion"));
        }
        let size = u32::try_from(size).map_err(|_| FormatError::parse(path, i + 1, "crop size too large"))?;
        let virt = VirtualCamera::new(UnitQuaternion::new_unchecked(quat), focal, size, camera).map_err(|_| err)?;
        out.push(CropRecord {
            frame_index,
            hand,
            virt,
        });
    }
    if !header_seen {
        return Err(FormatError::invalid(path, "missing crops header"));
    }
    Ok(out)
}

pub fn crops_to_text(records: &[CropRecord]) -> String {
    let mut out = crops_header();
    for r in records {
        out.push_str(&format_crop(r));
        out.push('\n');
    }
    out
}
