//! Absolute trajectory error and percentage of correctly estimated depth.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::RigidPose;
use crate::image::{is_valid_depth, DepthMap};

pub const ASSOCIATION_TOLERANCE: f64 = 0.02;
pub const DEPTH_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("fewer than two associated poses")]
    InsufficientPairs,
    #[error("no valid ground-truth depth")]
    NoGroundTruth,
    #[error("estimate and ground truth differ in size")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    None,
    Rigid,
}

impl Alignment {
    pub fn name(&self) -> &'static str {
        match self {
            Alignment::None => "none",
            Alignment::Rigid => "rigid",
        }
    }
}

/// Timestamped camera-to-world pose.
pub type StampedPose = (f64, RigidPose);

/// Greedy one-to-one association by smallest timestamp gap within `tolerance`.
/// Returns `(estimate index, ground-truth index)` sorted by estimate index.
pub fn associate(est: &[f64], gt: &[f64], tolerance: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, a) in est.iter().enumerate() {
        // Both lists are usually sorted, but no ordering is assumed.
        for (j, b) in gt.iter().enumerate() {
            let dt = (a - b).abs();
            if dt <= tolerance {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = alloc::vec![false; est.len()];
    let mut used_g = alloc::vec![false; gt.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub estimated: Vec<Vector3<f64>>,
    pub ground_truth: Vec<Vector3<f64>>,
}

impl TrajectoryPair {
    pub fn from_stamped(est: &[StampedPose], gt: &[StampedPose], tolerance: f64) -> Self {
        let te: Vec<f64> = est.iter().map(|p| p.0).collect();
        let tg: Vec<f64> = gt.iter().map(|p| p.0).collect();
        let pairs = associate(&te, &tg, tolerance);
        Self {
            estimated: pairs
                .iter()
                .map(|(i, _)| *est[*i].1.translation())
                .collect(),
            ground_truth: pairs.iter().map(|(_, j)| *gt[*j].1.translation()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.estimated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimated.is_empty()
    }
}

/// Least-squares rotation + translation mapping `src` onto `dst` (no scale).
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidPose, EvalError> {
    if src.len() < 2 || src.len() != dst.len() {
        return Err(EvalError::InsufficientPairs);
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let t = md - r * ms;
    RigidPose::new(r, t).map_err(|_| EvalError::InsufficientPairs)
}

/// RMSE of translation residuals after the requested alignment.
pub fn absolute_trajectory_error(
    pair: &TrajectoryPair,
    alignment: Alignment,
) -> Result<f64, EvalError> {
    if pair.len() < 2 || pair.estimated.len() != pair.ground_truth.len() {
        return Err(EvalError::InsufficientPairs);
    }
    let t = match alignment {
        Alignment::None => RigidPose::identity(),
        Alignment::Rigid => align_rigid(&pair.estimated, &pair.ground_truth)?,
    };
    let sum: f64 = pair
        .estimated
        .iter()
        .zip(&pair.ground_truth)
        .map(|(e, g)| (t.transform_point(e) - g).norm_squared())
        .sum();
    Ok((sum / pair.len() as f64).sqrt())
}

/// Total camera path length.
pub fn trajectory_length(points: &[Vector3<f64>]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DepthAccuracy {
    /// Pixels with valid ground truth.
    pub evaluated: usize,
    /// Of those, pixels with an estimate.
    pub estimated: usize,
    pub correct: usize,
}

impl DepthAccuracy {
    pub fn fraction(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.correct as f64 / self.evaluated as f64
        }
    }

    pub fn density(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.estimated as f64 / self.evaluated as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DepthAccuracyReport {
    pub per_keyframe: Vec<DepthAccuracy>,
    pub aggregate: DepthAccuracy,
}

impl DepthAccuracyReport {
    pub fn percent(&self) -> f64 {
        100.0 * self.aggregate.fraction()
    }
}

/// Counts one depth map. Non-positive or non-finite estimates are missing.
pub fn depth_accuracy(est: &DepthMap, gt: &DepthMap) -> Result<DepthAccuracy, EvalError> {
    if !est.same_shape(gt) {
        return Err(EvalError::ShapeMismatch);
    }
    let mut acc = DepthAccuracy::default();
    for (e, g) in est.data().iter().zip(gt.data()) {
        if !is_valid_depth(*g) {
            continue;
        }
        acc.evaluated += 1;
        if is_valid_depth(*e) {
            acc.estimated += 1;
            if (e - g).abs() < DEPTH_THRESHOLD * g {
                acc.correct += 1;
            }
        }
    }
    Ok(acc)
}

/// Percentage over all pixels with valid ground truth; missing estimates count
/// as incorrect.
pub fn percent_correct_depth(
    est: &[DepthMap],
    gt: &[DepthMap],
) -> Result<DepthAccuracyReport, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::ShapeMismatch);
    }
    let mut report = DepthAccuracyReport::default();
    for (e, g) in est.iter().zip(gt) {
        let a = depth_accuracy(e, g)?;
        report.aggregate.evaluated += a.evaluated;
        report.aggregate.estimated += a.estimated;
        report.aggregate.correct += a.correct;
        report.per_keyframe.push(a);
    }
    if report.aggregate.evaluated == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub alignment: Alignment,
    pub ate: Option<f64>,
    pub associated_poses: usize,
    pub trajectory_length: Option<f64>,
    pub depth: Option<DepthAccuracyReport>,
    pub keyframe_count: usize,
    pub frame_count: usize,
    pub mean_track_ms: Option<f64>,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(v) => alloc::format!("{v:.digits$}"),
        None => String::from("unavailable"),
    }
}

impl MetricsReport {
    /// `key = value` lines in a fixed order; identical inputs give identical bytes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alignment = {}", self.alignment.name());
        let _ = writeln!(s, "ate_rmse_m = {}", opt(self.ate, 6));
        let _ = writeln!(s, "associated_poses = {}", self.associated_poses);
        let _ = writeln!(
            s,
            "trajectory_length_m = {}",
            opt(self.trajectory_length, 6)
        );
        let d = self.depth.as_ref();
        let _ = writeln!(
            s,
            "percent_correct_depth = {}",
            opt(d.map(|d| d.percent()), 4)
        );
        let _ = writeln!(
            s,
            "depth_density = {}",
            opt(d.map(|d| d.aggregate.density()), 4)
        );
        let _ = writeln!(
            s,
            "depth_evaluated_pixels = {}",
            d.map_or(0, |d| d.aggregate.evaluated)
        );
        let _ = writeln!(s, "keyframe_count = {}", self.keyframe_count);
        let _ = writeln!(s, "frame_count = {}", self.frame_count);
        let _ = writeln!(s, "mean_track_ms = {}", opt(self.mean_track_ms, 3));
        if let Some(d) = d {
            for (i, a) in d.per_keyframe.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "keyframe_{i}_percent_correct = {:.4} density = {:.4}",
                    100.0 * a.fraction(),
                    a.density()
                );
            }
        }
        s
    }
}
