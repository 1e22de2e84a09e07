use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CameraError, CameraKind, Extrinsics, Intrinsics};
use crate::textfmt::{self, FormatError, Fields};

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;
pub const HEADSET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mount {
    /// Rigidly attached to the rig; extrinsics are rig-from-camera.
    Exocentric,
    /// Mounted on the headset; extrinsics are headset-from-camera.
    Egocentric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigCamera {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    pub mount: Mount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigCalibration {
    cameras: Vec<RigCamera>,
    frame_rate: f64,
}

impl RigCalibration {
    pub fn new(cameras: Vec<RigCamera>, frame_rate: f64) -> Result<Self, CameraError> {
        let mut seen = HashSet::new();
        for cam in &cameras {
            if !seen.insert(cam.id.as_str()) {
                return Err(CameraError::DuplicateCameraId(cam.id.clone()));
            }
            if cam.id.is_empty() || cam.id.chars().any(char::is_whitespace) {
                return Err(CameraError::InvalidCameraId(cam.id.clone()));
            }
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(CameraError::InvalidFrameRate(frame_rate));
        }
        Ok(RigCalibration { cameras, frame_rate })
    }

    pub fn cameras(&self) -> &[RigCamera] {
        &self.cameras
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn camera(&self, id: &str) -> Option<&RigCamera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn camera_index(&self, id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, FormatError> {
        let file: CalibrationFile =
            toml::from_str(text).map_err(|e| FormatError::invalid(path, e.to_string()))?;
        if file.schema_version != CALIBRATION_SCHEMA_VERSION {
            return Err(FormatError::SchemaVersionMismatch {
                path: path.to_string(),
                found: file.schema_version.to_string(),
                expected: CALIBRATION_SCHEMA_VERSION.to_string(),
            });
        }
        let mut cameras = Vec::with_capacity(file.cameras.len());
        for c in file.cameras {
            let ctx = |e: CameraError| FormatError::invalid(path, format!("camera {:?}: {e}", c.id));
            let intrinsics =
                Intrinsics::new(c.model, c.fx, c.fy, c.cx, c.cy, c.k, c.width, c.height).map_err(ctx)?;
            let extrinsics = Extrinsics::from_wxyz(c.rotation_wxyz, c.translation).map_err(ctx)?;
            cameras.push(RigCamera {
                id: c.id,
                intrinsics,
                extrinsics,
                mount: c.mount,
            });
        }
        RigCalibration::new(cameras, file.frame_rate).map_err(|e| FormatError::invalid(path, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        let text = textfmt::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        let file = CalibrationFile {
            schema_version: CALIBRATION_SCHEMA_VERSION,
            frame_rate: self.frame_rate,
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraRecord {
                    id: c.id.clone(),
                    mount: c.mount,
                    model: c.intrinsics.model(),
                    fx: c.intrinsics.fx(),
                    fy: c.intrinsics.fy(),
                    cx: c.intrinsics.cx(),
                    cy: c.intrinsics.cy(),
                    k: c.intrinsics.distortion(),
                    width: c.intrinsics.width(),
                    height: c.intrinsics.height(),
                    rotation_wxyz: c.extrinsics.wxyz(),
                    translation: c.extrinsics.translation.into(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("calibration serializes to TOML")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        textfmt::write_string(path.as_ref(), &self.to_toml_string())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    schema_version: u32,
    frame_rate: f64,
    cameras: Vec<CameraRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    id: String,
    mount: Mount,
    model: CameraKind,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(default)]
    k: [f64; 4],
    width: u32,
    height: u32,
    rotation_wxyz: [f64; 4],
    translation: [f64; 3],
}

/// Rig-from-headset poses indexed by frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadsetPoseStream {
    samples: Vec<(u64, Extrinsics)>,
}

impl HeadsetPoseStream {
    pub fn new(samples: Vec<(u64, Extrinsics)>) -> Result<Self, CameraError> {
        if let Some(w) = samples.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(CameraError::UnorderedHeadsetStream { frame_index: w[1].0 });
        }
        Ok(HeadsetPoseStream { samples })
    }

    pub fn samples(&self) -> &[(u64, Extrinsics)] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pose_at(&self, frame_index: u64) -> Option<&Extrinsics> {
        self.samples
            .binary_search_by_key(&frame_index, |s| s.0)
            .ok()
            .map(|i| &self.samples[i].1)
    }

    pub fn parse(text: &str, path: &str) -> Result<Self, FormatError> {
        let mut samples: Vec<(u64, Extrinsics)> = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if textfmt::is_skippable(line) {
                continue;
            }
            if !header_seen {
                textfmt::check_header(path, line, "headset", HEADSET_SCHEMA_VERSION)?;
                header_seen = true;
                continue;
            }
            let mut f = Fields::new(path, lineno, line);
            let frame = f.next_u64("frame_index")?;
            let mut q = [0.0; 4];
            for (slot, name) in q.iter_mut().zip(["qw", "qx", "qy", "qz"]) {
                *slot = f.next_f64(name)?;
            }
            let mut t = [0.0; 3];
            for (slot, name) in t.iter_mut().zip(["tx", "ty", "tz"]) {
                *slot = f.next_f64(name)?;
            }
            let pose = Extrinsics::from_wxyz(q, t).map_err(|e| f.err(e.to_string()))?;
            if let Some(&(prev, _)) = samples.last() {
                if frame <= prev {
                    return Err(f.err(format!(
                        "frame_index {frame} not strictly increasing after {prev}"
                    )));
                }
            }
            f.finish()?;
            samples.push((frame, pose));
        }
        Ok(HeadsetPoseStream { samples })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        let text = textfmt::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = textfmt::header_line("headset", HEADSET_SCHEMA_VERSION);
        out.push('\n');
        for (frame, pose) in &self.samples {
            out.push_str(&frame.to_string());
            textfmt::push_floats(&mut out, &pose.wxyz());
            textfmt::push_floats(&mut out, pose.translation.as_slice());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        textfmt::write_string(path.as_ref(), &self.to_text())
    }
}
