use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{fk, HandError, HandModel, HandPose, PALM_LANDMARKS};
use crate::camera::Extrinsics;
use crate::detections::{Hand, LANDMARKS_PER_HAND};
use crate::textfmt::{self, Fields, FormatError};
use crate::triangulation::Keypoints3D;

pub const MIN_TARGETS: usize = 6;
pub const POSES_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkConfig {
    pub max_iters: usize,
    /// Step-norm termination threshold.
    pub tol: f64,
    pub grad_tol: f64,
    /// Weight of the quadratic penalty on limit violations, m^2/rad^2.
    pub limit_penalty_weight: f64,
    pub initial_lambda: f64,
    /// Also solve from the mid-limit pose and keep the better fit.
    pub mid_limit_restart: bool,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            max_iters: 100,
            tol: 1e-6,
            grad_tol: 1e-9,
            limit_penalty_weight: 1e2,
            initial_lambda: 1e-3,
            mid_limit_restart: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Angles clamped to the skeleton limits.
    pub pose: HandPose,
    /// Landmark RMS over valid targets at `pose`, meters.
    pub final_rms: f64,
    /// LM iterations summed over all starts.
    pub iterations: usize,
    /// Objective after initialization and after every accepted step, for the
    /// start that produced `pose`.
    pub objective_trace: Vec<f64>,
}

const MAX_LAMBDA: f64 = 1e12;

/// Residuals and Jacobian at `pose`. Parameter order is a right-multiplied
/// rotation increment on the global rotation (3), the global translation (3),
/// then the joint angles. Residual order is the valid targets (3 each)
/// followed by one limit-penalty residual per DoF.
pub fn residual_jacobian(
    model: &HandModel,
    pose: &HandPose,
    targets: &[Option<Vector3<f64>>; LANDMARKS_PER_HAND],
    limit_penalty_weight: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), HandError> {
    let skel = &model.skeleton;
    let chain = fk::evaluate_chain(model, pose)?;
    let dofs = skel.dof_count();
    let valid: Vec<usize> = (0..LANDMARKS_PER_HAND).filter(|&i| targets[i].is_some()).collect();
    let rows = 3 * valid.len() + dofs;
    let cols = 6 + dofs;
    let mut r = DVector::zeros(rows);
    let mut j = DMatrix::zeros(rows, cols);
    let rot = pose.global.rotation.to_rotation_matrix();
    let t = pose.global.translation;
    for (row, &l) in valid.iter().enumerate() {
        let x = chain.landmarks[l];
        let e = x - targets[l].expect("filtered to valid");
        r.fixed_rows_mut::<3>(3 * row).copy_from(&e);
        for k in 0..3 {
            let col = rot.matrix().column(k).cross(&(x - t));
            j.fixed_view_mut::<3, 1>(3 * row, k).copy_from(&col);
        }
        j.fixed_view_mut::<3, 3>(3 * row, 3).copy_from(&Matrix3::identity());
        let Some(lbone) = skel.landmarks()[l].bone else { continue };
        for d in 0..dofs {
            let b = chain.dof_bone[d];
            if skel.is_ancestor_or_self(b, lbone) {
                let pivot = chain.pre[b].translation.vector;
                let col = chain.dof_axes[d].cross(&(x - pivot));
                j.fixed_view_mut::<3, 1>(3 * row, 6 + d).copy_from(&col);
            }
        }
    }
    let sw = limit_penalty_weight.sqrt();
    let base = 3 * valid.len();
    for (d, (lo, hi)) in skel.dof_limits().into_iter().enumerate() {
        let a = pose.angles[d];
        let excess = a - a.clamp(lo, hi);
        r[base + d] = sw * excess;
        if excess != 0.0 {
            j[(base + d, 6 + d)] = sw;
        }
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(HandError::NonFiniteResidual);
    }
    Ok((r, j))
}

fn apply_step(pose: &HandPose, step: &DVector<f64>) -> HandPose {
    let drot = UnitQuaternion::from_scaled_axis(Vector3::new(step[0], step[1], step[2]));
    let dt = Vector3::new(step[3], step[4], step[5]);
    HandPose {
        global: Extrinsics::new(pose.global.rotation * drot, pose.global.translation + dt),
        angles: pose.angles.iter().enumerate().map(|(i, a)| a + step[6 + i]).collect(),
    }
}

/// Rigid transform (rotation, translation) minimizing `sum |R s + t - d|^2`.
pub(crate) fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Extrinsics {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * u.transpose();
    let rot = UnitQuaternion::from_matrix(&r);
    Extrinsics::new(rot, cd - rot * cs)
}

fn initial_global(
    model: &HandModel,
    angles: &[f64],
    targets: &[Option<Vector3<f64>>; LANDMARKS_PER_HAND],
) -> Result<Extrinsics, HandError> {
    let local = fk::forward_kinematics(
        model,
        &HandPose {
            global: Extrinsics::identity(),
            angles: angles.to_vec(),
        },
    )?;
    let palm: Vec<usize> = PALM_LANDMARKS.iter().copied().filter(|&i| targets[i].is_some()).collect();
    let chosen: Vec<usize> = if palm.len() >= 3 {
        palm
    } else {
        (0..LANDMARKS_PER_HAND).filter(|&i| targets[i].is_some()).collect()
    };
    let src: Vec<_> = chosen.iter().map(|&i| local[i]).collect();
    let dst: Vec<_> = chosen.iter().map(|&i| targets[i].expect("valid")).collect();
    Ok(kabsch(&src, &dst))
}

/// Levenberg-Marquardt fit of the hand pose to 3D landmark targets. The
/// global transform is initialized by rigid alignment of the palm landmarks;
/// joint angles start from `init`. With `mid_limit_restart` the solve is
/// repeated from the middle of every joint range and the fit with the lower
/// landmark RMS wins (ties keep the `init` start).
pub fn fit_hand(
    targets: &[Option<Vector3<f64>>; LANDMARKS_PER_HAND],
    model: &HandModel,
    init: &HandPose,
    cfg: &IkConfig,
) -> Result<FitResult, HandError> {
    let skel = &model.skeleton;
    if init.angles.len() != skel.dof_count() {
        return Err(HandError::DimensionMismatch {
            expected: skel.dof_count(),
            found: init.angles.len(),
        });
    }
    let valid = targets.iter().filter(|t| t.is_some()).count();
    if valid < MIN_TARGETS {
        return Err(HandError::TooFewTargets {
            found: valid,
            required: MIN_TARGETS,
        });
    }
    if targets.iter().flatten().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(HandError::NonFiniteResidual);
    }
    let first = solve(targets, model, &init.angles, cfg)?;
    if !cfg.mid_limit_restart {
        return Ok(first);
    }
    let mid: Vec<f64> = skel.dof_limits().iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let second = solve(targets, model, &mid, cfg)?;
    let iterations = first.iterations + second.iterations;
    let best = if second.final_rms < first.final_rms { second } else { first };
    Ok(FitResult { iterations, ..best })
}

fn solve(
    targets: &[Option<Vector3<f64>>; LANDMARKS_PER_HAND],
    model: &HandModel,
    init_angles: &[f64],
    cfg: &IkConfig,
) -> Result<FitResult, HandError> {
    let skel = &model.skeleton;
    let mut pose = HandPose {
        global: initial_global(model, init_angles, targets)?,
        angles: init_angles.to_vec(),
    };
    let (mut r, mut j) = residual_jacobian(model, &pose, targets, cfg.limit_penalty_weight)?;
    let mut cost = r.norm_squared();
    let mut trace = vec![cost];
    let mut lambda = cfg.initial_lambda;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let g = j.transpose() * &r;
        if g.norm() < cfg.grad_tol {
            break;
        }
        let mut a = j.transpose() * &j;
        for d in 0..a.nrows() {
            a[(d, d)] += lambda;
        }
        let Some(chol) = a.cholesky() else {
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                break;
            }
            continue;
        };
        let step = -chol.solve(&g);
        let candidate = apply_step(&pose, &step);
        let (nr, nj) = residual_jacobian(model, &candidate, targets, cfg.limit_penalty_weight)?;
        let new_cost = nr.norm_squared();
        if new_cost < cost {
            pose = candidate;
            r = nr;
            j = nj;
            cost = new_cost;
            trace.push(cost);
            lambda *= 0.5;
            // Only a taken step measures progress; a rejected one merely
            // reflects the damping.
            if step.norm() < cfg.tol {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                break;
            }
        }
    }
    let pose = pose.clamped(skel);
    let final_rms = landmark_rms(model, &pose, targets)?;
    Ok(FitResult {
        pose,
        final_rms,
        iterations,
        objective_trace: trace,
    })
}

fn landmark_rms(
    model: &HandModel,
    pose: &HandPose,
    targets: &[Option<Vector3<f64>>; LANDMARKS_PER_HAND],
) -> Result<f64, HandError> {
    let lm = fk::forward_kinematics(model, pose)?;
    let (sum, n) = lm
        .iter()
        .zip(targets)
        .filter_map(|(x, t)| t.map(|t| (x - t).norm_squared()))
        .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    Ok((sum / n.max(1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePoses {
    pub frame_index: u64,
    pub left: Option<FitResult>,
    pub right: Option<FitResult>,
}

impl FramePoses {
    pub fn get(&self, hand: Hand) -> Option<&FitResult> {
        match hand {
            Hand::Left => self.left.as_ref(),
            Hand::Right => self.right.as_ref(),
        }
    }

    fn slot(&mut self, hand: Hand) -> &mut Option<FitResult> {
        match hand {
            Hand::Left => &mut self.left,
            Hand::Right => &mut self.right,
        }
    }
}

/// Fits both hands of a frame independently. `models` is indexed by
/// `Hand::BOTH` order (left, right). Hands that cannot be fitted are absent.
pub fn fit_frame(
    kp: &Keypoints3D,
    models: &[HandModel; 2],
    prev: Option<&FramePoses>,
    cfg: &IkConfig,
) -> FramePoses {
    let mut out = FramePoses {
        frame_index: kp.frame_index,
        left: None,
        right: None,
    };
    for (hand, model) in Hand::BOTH.into_iter().zip(models) {
        let mut targets = [None; LANDMARKS_PER_HAND];
        for (t, j) in targets.iter_mut().zip(kp.hand(hand)) {
            if j.valid {
                *t = Some(j.position);
            }
        }
        let init = prev
            .and_then(|p| p.get(hand))
            .map(|f| f.pose.clone())
            .unwrap_or_else(|| HandPose::rest(&model.skeleton));
        match fit_hand(&targets, model, &init, cfg) {
            Ok(fit) => *out.slot(hand) = Some(fit),
            Err(HandError::TooFewTargets { .. }) => {}
            Err(e) => warn!("frame {} hand {hand}: {e}", kp.frame_index),
        }
    }
    out
}

pub fn poses_header() -> String {
    textfmt::header_line("poses", POSES_SCHEMA_VERSION) + "\n"
}

/// `frame hand qw qx qy qz tx ty tz final_rms iterations n a_1 .. a_n`
pub fn format_pose_line(frame_index: u64, hand: Hand, fit: &FitResult) -> String {
    let mut out = format!("{frame_index} {hand}");
    textfmt::push_floats(&mut out, &fit.pose.global.wxyz());
    textfmt::push_floats(&mut out, fit.pose.global.translation.as_slice());
    textfmt::push_floats(&mut out, &[fit.final_rms]);
    out.push_str(&format!(" {} {}", fit.iterations, fit.pose.angles.len()));
    textfmt::push_floats(&mut out, &fit.pose.angles);
    out
}

pub fn poses_to_text(frames: &[FramePoses]) -> String {
    let mut out = poses_header();
    for f in frames {
        for hand in Hand::BOTH {
            if let Some(fit) = f.get(hand) {
                out.push_str(&format_pose_line(f.frame_index, hand, fit));
                out.push('\n');
            }
        }
    }
    out
}

/// Parses a pose file. Objective traces are not stored and come back empty.
pub fn parse_poses(text: &str, path: &str) -> Result<Vec<FramePoses>, FormatError> {
    let mut frames: Vec<FramePoses> = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        if textfmt::is_skippable(line) {
            continue;
        }
        if !header_seen {
            textfmt::check_header(path, line, "poses", POSES_SCHEMA_VERSION)?;
            header_seen = true;
            continue;
        }
        let mut f = Fields::new(path, i + 1, line);
        let frame_index = f.next_u64("frame_index")?;
        let hand: Hand = f.next_str("hand")?.parse().map_err(|e: String| f.err(e))?;
        let mut q = [0.0; 4];
        for v in q.iter_mut() {
            *v = f.next_f64("quaternion")?;
        }
        let mut t = [0.0; 3];
        for v in t.iter_mut() {
            *v = f.next_f64("translation")?;
        }
        let global = Extrinsics::from_wxyz(q, t).map_err(|e| f.err(e.to_string()))?;
        let final_rms = f.next_f64("final_rms")?;
        let iterations = f.next_u64("iterations")? as usize;
        let n = f.next_u64("dof_count")? as usize;
        let mut angles = Vec::with_capacity(n);
        for _ in 0..n {
            angles.push(f.next_f64("angle")?);
        }
        f.finish()?;
        let fit = FitResult {
            pose: HandPose { global, angles },
            final_rms,
            iterations,
            objective_trace: Vec::new(),
        };
        match frames.last_mut() {
            Some(last) if last.frame_index == frame_index => {
                if last.get(hand).is_some() {
                    return Err(FormatError::parse(path, i + 1, format!("duplicate pose for frame {frame_index} hand {hand}")));
                }
                *last.slot(hand) = Some(fit);
            }
            Some(last) if last.frame_index > frame_index => {
                return Err(FormatError::parse(path, i + 1, format!("frame_index {frame_index} out of order")));
            }
            _ => {
                let mut fp = FramePoses {
                    frame_index,
                    left: None,
                    right: None,
                };
                *fp.slot(hand) = Some(fit);
                frames.push(fp);
            }
        }
    }
    Ok(frames)
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<FramePoses>, FormatError> {
    let path = path.as_ref();
    parse_poses(&textfmt::read_to_string(path)?, &path.display().to_string())
}

pub fn save_poses(path: impl AsRef<Path>, frames: &[FramePoses]) -> Result<(), FormatError> {
    textfmt::write_string(path.as_ref(), &poses_to_text(frames))
}
