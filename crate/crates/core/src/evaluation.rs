//! MPJPE / MKPE metrics, per-condition aggregation and report rendering.
//!
//! Conventions: median is the lower median, P90 is the nearest-rank
//! `ceil(0.9 n)`-th order statistic, and MKPE is a flat mean over every
//! valid (frame, joint) pair.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::GtFrame;
use crate::textfmt::{self, FormatError};
use crate::triangulation::Keypoints3D;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("frame indices differ: prediction {pred}, ground truth {gt}")]
    FrameMismatch { pred: u64, gt: u64 },
    #[error("frame {0}: no joint is valid in both prediction and ground truth")]
    NoCommonValidJoints(u64),
    #[error("condition {0:?} has no frames")]
    EmptyCondition(String),
    #[error("no valid correspondences")]
    NoCorrespondences,
}

/// Condition tags and row labels of the interaction table, in row order.
pub const STANDARD_CONDITIONS: [(&str, &str); 3] = [
    ("no_interaction", "No interactions"),
    ("hand_hand", "Hand-hand interaction"),
    ("hand_object", "Hand-object interaction"),
];

pub fn condition_label(tag: &str) -> &str {
    STANDARD_CONDITIONS
        .iter()
        .find(|(t, _)| *t == tag)
        .map_or(tag, |(_, label)| label)
}

/// Mean Euclidean error over joints valid in both sets, in millimeters.
pub fn mpjpe_frame(pred: &Keypoints3D, gt: &Keypoints3D) -> Result<f64, EvalError> {
    if pred.frame_index != gt.frame_index {
        return Err(EvalError::FrameMismatch {
            pred: pred.frame_index,
            gt: gt.frame_index,
        });
    }
    let (sum, n) = pred
        .joints
        .iter()
        .zip(&gt.joints)
        .filter(|(p, g)| p.valid && g.valid)
        .fold((0.0, 0usize), |(s, n), (p, g)| (s + (p.position - g.position).norm(), n + 1));
    if n == 0 {
        return Err(EvalError::NoCommonValidJoints(gt.frame_index));
    }
    Ok(1000.0 * sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub median_mm: f64,
    pub p90_mm: f64,
    pub count: usize,
}

/// Lower median and nearest-rank P90.
pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    // ceil(0.9 n) without floating point.
    let rank = (9 * n).div_ceil(10);
    Some(Aggregate {
        median_mm: v[(n - 1) / 2],
        p90_mm: v[rank - 1],
        count: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAggregate {
    pub condition: String,
    #[serde(flatten)]
    pub aggregate: Aggregate,
}

/// Aggregates `(value, condition)` pairs for each of `conditions`, in order.
pub fn aggregate_by_condition(values: &[(f64, &str)], conditions: &[String]) -> Result<Vec<ConditionAggregate>, EvalError> {
    conditions
        .iter()
        .map(|c| {
            let group: Vec<f64> = values.iter().filter(|(_, t)| t == c).map(|(v, _)| *v).collect();
            aggregate(&group)
                .map(|aggregate| ConditionAggregate {
                    condition: c.clone(),
                    aggregate,
                })
                .ok_or_else(|| EvalError::EmptyCondition(c.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mkpe {
    pub mean_mm: f64,
    pub count: usize,
}

/// Flat mean keypoint error over frames present in both sets (matched by
/// frame index).
pub fn mkpe(pred: &[Keypoints3D], gt: &[Keypoints3D]) -> Result<Mkpe, EvalError> {
    let by_frame: HashMap<u64, &Keypoints3D> = pred.iter().map(|p| (p.frame_index, p)).collect();
    let mut sum = 0.0;
    let mut count = 0;
    for g in gt {
        let Some(p) = by_frame.get(&g.frame_index) else { continue };
        for (pj, gj) in p.joints.iter().zip(&g.joints) {
            if pj.valid && gj.valid {
                sum += (pj.position - gj.position).norm();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(EvalError::NoCorrespondences);
    }
    Ok(Mkpe {
        mean_mm: 1000.0 * sum / count as f64,
        count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub frame_index: u64,
    pub condition: String,
    pub mpjpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_frame: Vec<FrameError>,
    pub aggregates: Vec<ConditionAggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mkpe: Option<Mkpe>,
    /// Ground-truth frames without a usable prediction.
    #[serde(default)]
    pub unmatched_frames: Vec<u64>,
}

/// Default row set: the standard conditions that occur, in table order,
/// followed by any other tags in sorted order.
pub fn present_conditions(gt: &[GtFrame]) -> Vec<String> {
    let mut tags: Vec<String> = Vec::new();
    for (t, _) in STANDARD_CONDITIONS {
        if gt.iter().any(|g| g.condition == t) {
            tags.push(t.to_string());
        }
    }
    let mut others: Vec<String> = gt
        .iter()
        .map(|g| g.condition.clone())
        .filter(|c| !STANDARD_CONDITIONS.iter().any(|(t, _)| t == c))
        .collect();
    others.sort();
    others.dedup();
    tags.extend(others);
    tags
}

/// Scores predictions against a ground-truth sidecar. `conditions` selects
/// the reported rows; every selected condition must have a matched frame.
pub fn evaluate(pred: &[Keypoints3D], gt: &[GtFrame], conditions: Option<&[String]>) -> Result<EvalReport, EvalError> {
    let by_frame: HashMap<u64, &Keypoints3D> = pred.iter().map(|p| (p.frame_index, p)).collect();
    let mut per_frame = Vec::new();
    let mut unmatched_frames = Vec::new();
    for g in gt {
        match by_frame.get(&g.keypoints.frame_index).map(|p| mpjpe_frame(p, &g.keypoints)) {
            Some(Ok(v)) => per_frame.push(FrameError {
                frame_index: g.keypoints.frame_index,
                condition: g.condition.clone(),
                mpjpe_mm: v,
            }),
            _ => unmatched_frames.push(g.keypoints.frame_index),
        }
    }
    let rows = match conditions {
        Some(c) => c.to_vec(),
        None => present_conditions(gt),
    };
    let pairs: Vec<(f64, &str)> = per_frame.iter().map(|f| (f.mpjpe_mm, f.condition.as_str())).collect();
    let aggregates = aggregate_by_condition(&pairs, &rows)?;
    let gt_kp: Vec<Keypoints3D> = gt.iter().map(|g| g.keypoints.clone()).collect();
    Ok(EvalReport {
        per_frame,
        aggregates,
        mkpe: mkpe(pred, &gt_kp).ok(),
        unmatched_frames,
    })
}

impl EvalReport {
    /// MPJPE table with one row per condition and Median / P90 columns,
    /// followed by the MKPE line when available.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<26} {:>10} {:>10} {:>8}", "MPJPE (mm)", "Median", "P90", "Frames");
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{:<26} {:>10.2} {:>10.2} {:>8}",
                condition_label(&a.condition),
                a.aggregate.median_mm,
                a.aggregate.p90_mm,
                a.aggregate.count
            );
        }
        if let Some(m) = &self.mkpe {
            let _ = writeln!(out, "\nMKPE (mm): {:.2} over {} keypoints", m.mean_mm, m.count);
        }
        if !self.unmatched_frames.is_empty() {
            let _ = writeln!(out, "Unmatched frames: {}", self.unmatched_frames.len());
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,condition,mpjpe_mm\n");
        for f in &self.per_frame {
            let _ = writeln!(out, "{},{},{}", f.frame_index, f.condition, f.mpjpe_mm);
        }
        out
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("report serializes to TOML")
    }

    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, FormatError> {
        toml::from_str(text).map_err(|e| FormatError::invalid(path, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        Self::from_toml_str(&textfmt::read_to_string(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        textfmt::write_string(path.as_ref(), &self.to_toml_string())
    }

    /// Values of one condition, for plotting.
    pub fn values_for(&self, condition: &str) -> Vec<f64> {
        self.per_frame
            .iter()
            .filter(|f| f.condition == condition)
            .map(|f| f.mpjpe_mm)
            .collect()
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Canvas {
    w: f64,
    h: f64,
    left: f64,
    bottom: f64,
    x_max: f64,
    y_max: f64,
    body: String,
}

impl Canvas {
    fn new(x_max: f64, y_max: f64) -> Self {
        Canvas {
            w: 640.0,
            h: 420.0,
            left: 60.0,
            bottom: 50.0,
            x_max: if x_max > 0.0 { x_max } else { 1.0 },
            y_max: if y_max > 0.0 { y_max } else { 1.0 },
            body: String::new(),
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let pw = self.w - self.left - 20.0;
        let ph = self.h - self.bottom - 20.0;
        (self.left + pw * x / self.x_max, 20.0 + ph * (1.0 - y / self.y_max))
    }

    fn axes(&mut self, x_label: &str, y_label: &str) {
        let (x0, y0) = self.px(0.0, 0.0);
        let (x1, y1) = self.px(self.x_max, self.y_max);
        let _ = writeln!(
            self.body,
            r#"<path d="M{x0:.1} {y1:.1} V{y0:.1} H{x1:.1}" fill="none" stroke="black"/>"#
        );
        for i in 0..=5 {
            let fx = self.x_max * i as f64 / 5.0;
            let fy = self.y_max * i as f64 / 5.0;
            let (tx, _) = self.px(fx, 0.0);
            let (_, ty) = self.px(0.0, fy);
            let _ = writeln!(self.body, r#"<text x="{tx:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#, y0 + 16.0, tick(fx));
            let _ = writeln!(self.body, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#, x0 - 6.0, ty + 4.0, tick(fy));
        }
        let _ = writeln!(self.body, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{x_label}</text>"#, (x0 + x1) / 2.0, self.h - 10.0);
        let _ = writeln!(
            self.body,
            r#"<text x="14" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (a, b) = self.px(x, y);
                format!("{a:.2},{b:.2}")
            })
            .collect();
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            coords.join(" ")
        );
    }

    fn legend(&mut self, row: usize, label: &str, color: &str) {
        let y = 34.0 + 16.0 * row as f64;
        let x = self.w - 220.0;
        let _ = writeln!(self.body, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, x + 18.0);
        let _ = writeln!(self.body, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, x + 24.0, y + 4.0, escape(label));
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.w, self.h, self.w, self.h, self.body
        )
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Empirical CDF of per-frame MPJPE, one curve per condition.
pub fn cdf_svg(report: &EvalReport) -> String {
    let x_max = report.per_frame.iter().map(|f| f.mpjpe_mm).fold(0.0, f64::max) * 1.05;
    let mut c = Canvas::new(x_max, 1.0);
    c.axes("per-frame MPJPE (mm)", "fraction of frames");
    for (i, a) in report.aggregates.iter().enumerate() {
        let mut v = report.values_for(&a.condition);
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mut pts = vec![(0.0, 0.0)];
        for (k, x) in v.iter().enumerate() {
            pts.push((*x, k as f64 / n));
            pts.push((*x, (k + 1) as f64 / n));
        }
        let color = PALETTE[i % PALETTE.len()];
        c.polyline(&pts, color, false);
        c.legend(i, condition_label(&a.condition), color);
    }
    c.finish()
}

/// One point of an error-vs-noise sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePoint {
    pub sigma_px: f64,
    pub median_mm: f64,
    pub p90_mm: f64,
}

/// Median (solid) and P90 (dashed) MPJPE as a function of pixel noise.
pub fn noise_svg(points: &[NoisePoint]) -> String {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.sigma_px.total_cmp(&b.sigma_px));
    let x_max = pts.iter().map(|p| p.sigma_px).fold(0.0, f64::max) * 1.05;
    let y_max = pts.iter().map(|p| p.p90_mm.max(p.median_mm)).fold(0.0, f64::max) * 1.1;
    let mut c = Canvas::new(x_max, y_max);
    c.axes("pixel noise sigma (px)", "MPJPE (mm)");
    let median: Vec<(f64, f64)> = pts.iter().map(|p| (p.sigma_px, p.median_mm)).collect();
    let p90: Vec<(f64, f64)> = pts.iter().map(|p| (p.sigma_px, p.p90_mm)).collect();
    c.polyline(&median, PALETTE[0], false);
    c.polyline(&p90, PALETTE[1], true);
    c.legend(0, "median", PALETTE[0]);
    c.legend(1, "P90", PALETTE[1]);
    c.finish()
}
