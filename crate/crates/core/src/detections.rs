//! 2D hand keypoint detections from the two detector stages, their text
//! format, and confidence filtering.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector2};
use serde::{Deserialize, Serialize};

use crate::camera::Extrinsics;
use crate::crop::VirtualCamera;
use crate::textfmt::{self, FormatError, Fields};

pub const LANDMARKS_PER_HAND: usize = 21;
pub const DETECTIONS_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.3;

/// Landmark names in storage order: wrist, then four per finger from thumb
/// to pinky, proximal to tip.
pub const LANDMARK_NAMES: [&str; LANDMARKS_PER_HAND] = [
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    /// Whole-body keypoint model run on the full fisheye image.
    BodyStage,
    /// Hand-specific model run on perspective crops.
    HandStage,
}

impl Detector {
    pub fn tag(self) -> &'static str {
        match self {
            Detector::BodyStage => "body",
            Detector::HandStage => "hand",
        }
    }
}

impl FromStr for Detector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "body" => Ok(Detector::BodyStage),
            "hand" => Ok(Detector::HandStage),
            _ => Err(format!("unknown detector tag {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub const BOTH: [Hand; 2] = [Hand::Left, Hand::Right];

    pub fn tag(self) -> &'static str {
        match self {
            Hand::Left => "L",
            Hand::Right => "R",
        }
    }

    /// Offset of this hand's block in 42-joint arrays.
    pub fn joint_offset(self) -> usize {
        match self {
            Hand::Left => 0,
            Hand::Right => LANDMARKS_PER_HAND,
        }
    }
}

impl fmt::Display for Hand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Hand {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "L" => Ok(Hand::Left),
            "R" => Ok(Hand::Right),
            _ => Err(format!("unknown hand tag {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectionSpace {
    FullImage,
    Crop(VirtualCamera),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint2 {
    pub pixel: Vector2<f64>,
    pub confidence: f64,
}

/// One detector's 21 keypoints for one hand in one view. `None` marks a
/// keypoint that was never predicted or has been filtered out.
#[derive(Debug, Clone, PartialEq)]
pub struct HandDetection {
    pub frame_index: u64,
    pub camera_id: String,
    pub detector: Detector,
    pub hand: Hand,
    pub space: DetectionSpace,
    pub keypoints: [Option<Keypoint2>; LANDMARKS_PER_HAND],
}

impl HandDetection {
    pub fn valid_count(&self) -> usize {
        self.keypoints.iter().flatten().count()
    }

    pub fn valid_pixels(&self) -> Vec<Vector2<f64>> {
        self.keypoints.iter().flatten().map(|k| k.pixel).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDetections {
    pub frame_index: u64,
    pub detections: Vec<HandDetection>,
}

impl FrameDetections {
    pub fn new(frame_index: u64) -> Self {
        FrameDetections { frame_index, detections: Vec::new() }
    }

    /// Adds a detection, rejecting a repeated (camera, detector, hand) triple
    /// or a mismatched frame index.
    pub fn push(&mut self, det: HandDetection) -> Result<(), String> {
        if det.frame_index != self.frame_index {
            return Err(format!(
                "detection for frame {} added to frame {}",
                det.frame_index, self.frame_index
            ));
        }
        if self
            .detections
            .iter()
            .any(|d| d.camera_id == det.camera_id && d.detector == det.detector && d.hand == det.hand)
        {
            return Err(format!(
                "duplicate detection ({}, {}, {}) in frame {}",
                det.camera_id,
                det.detector.tag(),
                det.hand.tag(),
                det.frame_index
            ));
        }
        self.detections.push(det);
        Ok(())
    }

    pub fn check_unique(&self) -> bool {
        let mut seen = HashSet::new();
        self.detections
            .iter()
            .all(|d| seen.insert((d.camera_id.as_str(), d.detector, d.hand)))
    }
}

/// Per-detector confidence thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceThresholds {
    pub body: f64,
    pub hand: f64,
}

impl ConfidenceThresholds {
    pub fn uniform(threshold: f64) -> Self {
        ConfidenceThresholds { body: threshold, hand: threshold }
    }

    pub fn for_detector(&self, detector: Detector) -> f64 {
        match detector {
            Detector::BodyStage => self.body,
            Detector::HandStage => self.hand,
        }
    }
}

impl Default for ConfidenceThresholds {
    fn default() -> Self {
        Self::uniform(DEFAULT_CONFIDENCE_THRESHOLD)
    }
}

/// Invalidates keypoints whose confidence is strictly below `threshold` and
/// drops detections left without any valid keypoint.
pub fn filter_confidence(frame: &FrameDetections, threshold: f64) -> FrameDetections {
    filter_confidence_per_detector(frame, &ConfidenceThresholds::uniform(threshold))
}

pub fn filter_confidence_per_detector(
    frame: &FrameDetections,
    thresholds: &ConfidenceThresholds,
) -> FrameDetections {
    let detections = frame
        .detections
        .iter()
        .filter_map(|d| {
            let threshold = thresholds.for_detector(d.detector);
            let mut out = d.clone();
            for kp in out.keypoints.iter_mut() {
                if kp.is_some_and(|k| k.confidence < threshold) {
                    *kp = None;
                }
            }
            (out.valid_count() > 0).then_some(out)
        })
        .collect();
    FrameDetections {
        frame_index: frame.frame_index,
        detections,
    }
}

fn parse_record(path: &str, lineno: usize, line: &str) -> Result<HandDetection, FormatError> {
    let mut f = Fields::new(path, lineno, line);
    let frame_index = f.next_u64("frame_index")?;
    let camera_id = f.next_str("camera_id")?.to_string();
    let detector: Detector = f.next_str("detector")?.parse().map_err(|e: String| f.err(e))?;
    let hand: Hand = f.next_str("hand")?.parse().map_err(|e: String| f.err(e))?;
    let space = match f.next_str("space")? {
        "full" => DetectionSpace::FullImage,
        "crop" => {
            let mut q = [0.0; 4];
            for (slot, name) in q.iter_mut().zip(["qw", "qx", "qy", "qz"]) {
                *slot = f.next_f64(name)?;
            }
            let focal = f.next_f64("fx")?;
            let center = f.next_f64("cx")?;
            let size = 2.0 * center + 1.0;
            if size.fract() != 0.0 || !(2.0..=65536.0).contains(&size) {
                return Err(f.err(format!("crop center {center} does not describe a square crop")));
            }
            let rot = Extrinsics::from_wxyz(q, [0.0; 3]).map_err(|e| f.err(e.to_string()))?;
            let virt = VirtualCamera::new(rot.rotation, focal, size as u32, camera_id.clone())
                .map_err(|e| f.err(e.to_string()))?;
            DetectionSpace::Crop(virt)
        }
        other => return Err(f.err(format!("unknown space tag {other:?}"))),
    };
    let mut keypoints = [None; LANDMARKS_PER_HAND];
    for (j, slot) in keypoints.iter_mut().enumerate() {
        let u = f.next_opt_f64("u")?;
        let v = f.next_opt_f64("v")?;
        let c = f.next_opt_f64("confidence")?;
        *slot = match (u, v, c) {
            (Some(u), Some(v), Some(c)) => {
                if !(0.0..=1.0).contains(&c) {
                    return Err(f.err(format!("keypoint {j}: confidence {c} outside [0, 1]")));
                }
                Some(Keypoint2 { pixel: Vector2::new(u, v), confidence: c })
            }
            (None, None, None) => None,
            _ => return Err(f.err(format!("keypoint {j}: partially missing triple"))),
        };
    }
    f.finish()?;
    Ok(HandDetection {
        frame_index,
        camera_id,
        detector,
        hand,
        space,
        keypoints,
    })
}

/// Prefixes a record error with the frame index when the first field is
/// readable.
fn with_frame_hint(err: FormatError, line: &str) -> FormatError {
    let frame = line.split_whitespace().next().and_then(|t| t.parse::<u64>().ok());
    match (err, frame) {
        (FormatError::Parse { path, line, message }, Some(frame)) => FormatError::Parse {
            path,
            line,
            message: format!("frame {frame}: {message}"),
        },
        (err, _) => err,
    }
}

/// Streams [`FrameDetections`] from a detections file.
///
/// A malformed record yields an `Err` carrying its line number; the reader
/// then resumes with the next record, so callers can skip bad records
/// without aborting.
pub struct DetectionReader<R: BufRead> {
    path: String,
    lines: std::io::Lines<R>,
    lineno: usize,
    current: Option<FrameDetections>,
    last_emitted: Option<u64>,
    failed_frame: Option<u64>,
    done: bool,
}

impl<R: BufRead> DetectionReader<R> {
    pub fn new(reader: R, path: &str) -> Result<Self, FormatError> {
        let mut lines = reader.lines();
        let mut lineno = 0;
        let mut done = true;
        for line in lines.by_ref() {
            lineno += 1;
            let line = line.map_err(|e| FormatError::io(path, e))?;
            if textfmt::is_skippable(&line) {
                continue;
            }
            textfmt::check_header(path, &line, "detections", DETECTIONS_SCHEMA_VERSION)?;
            done = false;
            break;
        }
        Ok(DetectionReader {
            path: path.to_string(),
            lines,
            lineno,
            current: None,
            last_emitted: None,
            failed_frame: None,
            done,
        })
    }

    /// Frame index of the most recent malformed record, when readable.
    pub fn last_failed_frame(&self) -> Option<u64> {
        self.failed_frame
    }
}

impl<R: BufRead> Iterator for DetectionReader<R> {
    type Item = Result<FrameDetections, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            let line = match self.lines.next() {
                None => {
                    self.done = true;
                    break;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(FormatError::io(&self.path, e)));
                }
                Some(Ok(line)) => line,
            };
            self.lineno += 1;
            if textfmt::is_skippable(&line) {
                continue;
            }
            let det = match parse_record(&self.path, self.lineno, &line) {
                Ok(det) => det,
                Err(e) => {
                    self.failed_frame = line.split_whitespace().next().and_then(|t| t.parse().ok());
                    return Some(Err(with_frame_hint(e, &line)));
                }
            };
            let frame = det.frame_index;
            let floor = self.current.as_ref().map(|c| c.frame_index).or(self.last_emitted);
            if floor.is_some_and(|f| frame < f) || self.last_emitted.is_some_and(|f| frame <= f) {
                self.failed_frame = Some(frame);
                return Some(Err(FormatError::parse(
                    &self.path,
                    self.lineno,
                    format!("frame_index {frame} out of order (after frame {})", floor.unwrap_or(0)),
                )));
            }
            match self.current.as_mut() {
                Some(cur) if cur.frame_index == frame => {
                    if let Err(msg) = cur.push(det) {
                        self.failed_frame = Some(frame);
                        return Some(Err(FormatError::parse(&self.path, self.lineno, msg)));
                    }
                }
                _ => {
                    let mut next = FrameDetections::new(frame);
                    next.detections.push(det);
                    if let Some(prev) = self.current.replace(next) {
                        self.last_emitted = Some(prev.frame_index);
                        return Some(Ok(prev));
                    }
                }
            }
        }
        self.current.take().map(|f| {
            self.last_emitted = Some(f.frame_index);
            Ok(f)
        })
    }
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<DetectionReader<BufReader<File>>, FormatError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    DetectionReader::new(BufReader::new(file), &path.display().to_string())
}

pub fn parse_detections(text: &str, path: &str) -> Result<Vec<FrameDetections>, FormatError> {
    DetectionReader::new(text.as_bytes(), path)?.collect()
}

pub fn detections_header() -> String {
    textfmt::header_line("detections", DETECTIONS_SCHEMA_VERSION) + "\n"
}

/// Formats one record line (without trailing newline).
pub fn format_detection(det: &HandDetection) -> String {
    let mut out = format!(
        "{} {} {} {}",
        det.frame_index,
        det.camera_id,
        det.detector.tag(),
        det.hand.tag()
    );
    match &det.space {
        DetectionSpace::FullImage => out.push_str(" full"),
        DetectionSpace::Crop(virt) => {
            out.push_str(" crop");
            let q: &UnitQuaternion<f64> = virt.rotation();
            let q = q.quaternion();
            textfmt::push_floats(&mut out, &[q.w, q.i, q.j, q.k, virt.focal(), virt.center()]);
        }
    }
    for kp in &det.keypoints {
        match kp {
            Some(k) => textfmt::push_floats(&mut out, &[k.pixel.x, k.pixel.y, k.confidence]),
            None => out.push_str(" - - -"),
        }
    }
    out
}

pub fn write_frame<W: Write>(w: &mut W, frame: &FrameDetections) -> std::io::Result<()> {
    for det in &frame.detections {
        writeln!(w, "{}", format_detection(det))?;
    }
    Ok(())
}

pub fn detections_to_text(frames: &[FrameDetections]) -> String {
    let mut out = detections_header();
    for frame in frames {
        for det in &frame.detections {
            out.push_str(&format_detection(det));
            out.push('\n');
        }
    }
    out
}

pub fn save_detections(path: impl AsRef<Path>, frames: &[FrameDetections]) -> Result<(), FormatError> {
    textfmt::write_string(path.as_ref(), &detections_to_text(frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(frame: u64, cam: &str, hand: Hand, confs: &[f64]) -> HandDetection {
        let mut keypoints = [None; LANDMARKS_PER_HAND];
        for (j, slot) in keypoints.iter_mut().enumerate() {
            let c = confs[j % confs.len()];
            *slot = Some(Keypoint2 {
                pixel: Vector2::new(100.0 + j as f64, 200.5 - j as f64 * 0.25),
                confidence: c,
            });
        }
        HandDetection {
            frame_index: frame,
            camera_id: cam.into(),
            detector: Detector::BodyStage,
            hand,
            space: DetectionSpace::FullImage,
            keypoints,
        }
    }

    fn frame_with(dets: Vec<HandDetection>) -> FrameDetections {
        let mut f = FrameDetections::new(dets[0].frame_index);
        for d in dets {
            f.push(d).unwrap();
        }
        f
    }

    #[test]
    fn high_confidence_is_untouched() {
        let f = frame_with(vec![det(0, "a", Hand::Left, &[0.9]), det(0, "b", Hand::Right, &[0.9])]);
        assert_eq!(filter_confidence(&f, 0.3), f);
    }

    #[test]
    fn low_confidence_drops_everything() {
        let f = frame_with(vec![det(0, "a", Hand::Left, &[0.1]), det(0, "b", Hand::Right, &[0.1])]);
        assert!(filter_confidence(&f, 0.3).detections.is_empty());
    }

    #[test]
    fn threshold_is_strictly_below() {
        let f = frame_with(vec![det(0, "a", Hand::Left, &[0.3, 0.29, 0.31])]);
        let out = filter_confidence(&f, 0.3);
        let kps = &out.detections[0].keypoints;
        assert!(kps[0].is_some(), "exactly 0.3 is kept");
        assert!(kps[1].is_none());
        assert!(kps[2].is_some());
        assert_eq!(out.detections[0].valid_count(), 14);
    }

    #[test]
    fn per_detector_thresholds() {
        let mut hand_stage = det(0, "a", Hand::Left, &[0.5]);
        hand_stage.detector = Detector::HandStage;
        let f = frame_with(vec![det(0, "a", Hand::Left, &[0.5]), hand_stage]);
        let out = filter_confidence_per_detector(&f, &ConfidenceThresholds { body: 0.3, hand: 0.6 });
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.detections[0].detector, Detector::BodyStage);
    }

    proptest! {
        #[test]
        fn filter_idempotent_and_zero_identity(
            confs in prop::collection::vec(0.0f64..=1.0, 21),
            threshold in 0.0f64..=1.0,
        ) {
            let f = frame_with(vec![det(3, "a", Hand::Right, &confs)]);
            let once = filter_confidence(&f, threshold);
            prop_assert_eq!(filter_confidence(&once, threshold), once.clone());
            prop_assert_eq!(filter_confidence(&f, 0.0), f);
        }
    }

    #[test]
    fn empty_file_is_empty_stream() {
        assert!(parse_detections("", "x").unwrap().is_empty());
    }

    #[test]
    fn single_record() {
        let text = detections_to_text(&[frame_with(vec![det(4, "cam0", Hand::Left, &[0.7])])]);
        let frames = parse_detections(&text, "x").unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].frame_index, 4);
        assert_eq!(frames[0].detections.len(), 1);
    }

    #[test]
    fn out_of_order_frames_name_the_line() {
        let a = format_detection(&det(5, "cam0", Hand::Left, &[0.7]));
        let b = format_detection(&det(2, "cam0", Hand::Left, &[0.7]));
        let text = format!("#!detections v1\n{a}\n{b}\n");
        let results: Vec<_> = DetectionReader::new(text.as_bytes(), "d.txt").unwrap().collect();
        let err = results.iter().find_map(|r| r.as_ref().err()).expect("an error");
        assert_eq!(err.line(), Some(3));
        assert!(err.to_string().contains("d.txt:3"));
        // The valid frame is still delivered.
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
    }

    #[test]
    fn duplicate_triple_rejected() {
        let a = format_detection(&det(1, "cam0", Hand::Left, &[0.7]));
        let text = format!("#!detections v1\n{a}\n{a}\n");
        let results: Vec<_> = DetectionReader::new(text.as_bytes(), "d").unwrap().collect();
        assert!(results.iter().any(|r| r.as_ref().is_err_and(|e| e.line() == Some(3))));
    }

    #[test]
    fn schema_mismatch() {
        assert!(matches!(
            parse_detections("#!detections v9\n", "x"),
            Err(FormatError::SchemaVersionMismatch { .. })
        ));
    }

    #[test]
    fn malformed_record_reports_and_continues() {
        let good = format_detection(&det(7, "cam0", Hand::Left, &[0.7]));
        let text = format!("#!detections v1\n3 cam0 body L full 1 2\n{good}\n");
        let results: Vec<_> = DetectionReader::new(text.as_bytes(), "d").unwrap().collect();
        assert_eq!(results.len(), 2);
        assert_eq!(results[0].as_ref().unwrap_err().line(), Some(2));
        assert_eq!(results[1].as_ref().unwrap().frame_index, 7);
    }

    #[test]
    fn canonical_round_trip_with_crop_and_missing() {
        let mut d = det(9, "cam1", Hand::Right, &[0.4, 0.95]);
        d.detector = Detector::HandStage;
        d.keypoints[3] = None;
        let rot = UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3);
        d.space = DetectionSpace::Crop(VirtualCamera::new(rot, 512.25, 256, "cam1".into()).unwrap());
        let frames = vec![
            frame_with(vec![det(8, "cam0", Hand::Left, &[0.123456789])]),
            frame_with(vec![d, det(9, "cam0", Hand::Left, &[1.0])]),
        ];
        let text = detections_to_text(&frames);
        let parsed = parse_detections(&text, "x").unwrap();
        assert_eq!(detections_to_text(&parsed), text);
        assert_eq!(parsed.len(), 2);
        assert!(parsed[1].detections[0].keypoints[3].is_none());
    }
}
