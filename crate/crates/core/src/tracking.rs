//! Direct photometric tracking of a frame against a key-frame.
//!
//! Minimizes `Σ ρ(r/σ(r))` over the key-frame's high-gradient pixels, with `r` the
//! photometric residual, `σ(r)` its depth-aware standard deviation and `ρ` the Huber
//! norm, by weighted Gauss-Newton on a coarse-to-fine pyramid. Pose updates are
//! left-multiplicative: `T ← exp(δ)·T`.

use alloc::vec::Vec;

use nalgebra::{Matrix6, Vector3, Vector6};

use crate::geometry::{CameraIntrinsics, PixelCoord, RigidPose};
use crate::image::{GradientMap, Image, IntensityImage};
use crate::keyframe::KeyFrame;

/// Pixels this close to the border are never selected.
pub const BORDER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingConfig {
    /// Huber threshold in σ-normalized residual units.
    pub huber_delta: f64,
    pub pyramid_levels: usize,
    pub max_iterations: usize,
    /// Photometric noise σ_I on the `[0, 1]` intensity scale.
    pub photometric_sigma: f64,
    /// Gradient magnitude (intensity / pixel) above which a pixel is used.
    pub gradient_threshold: f64,
    pub min_valid_ratio: f64,
    /// Stop once the accepted update norm drops below this.
    pub convergence_threshold: f64,
    /// Pixels whose depth differs from a 4-neighbour by more than this
    /// fraction are skipped; `0` disables the test.
    pub depth_edge_ratio: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            huber_delta: 3.0,
            pyramid_levels: 5,
            max_iterations: 20,
            photometric_sigma: 0.03,
            gradient_threshold: 0.02,
            min_valid_ratio: 0.2,
            convergence_threshold: 1e-6,
            depth_edge_ratio: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackingError {
    #[error("tracking lost (valid pixel ratio {valid_pixel_ratio:.3}, energy {energy})")]
    TrackingLost { valid_pixel_ratio: f64, energy: f64 },
    #[error("frame size {0}x{1} does not match the key-frame")]
    SizeMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingResult {
    /// Key-frame to frame.
    pub relative_pose: RigidPose,
    /// World to frame: `relative_pose ∘ keyframe.pose`.
    pub world_pose: RigidPose,
    /// Mean Huber energy over valid pixels at the finest level.
    pub final_energy: f64,
    pub valid_pixel_ratio: f64,
    pub converged: bool,
    /// Coarsest level first.
    pub iterations_per_level: Vec<usize>,
    /// `(level, energy)` after the initial evaluation and after every accepted step.
    pub energy_history: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSample {
    pub pixel: (usize, usize),
    pub residual: f64,
    pub sigma: f64,
    /// Huber weight of `residual / sigma`; zero when the warp is invalid.
    pub weight: f64,
    /// `∂r/∂δ` for the left-multiplicative update.
    pub jacobian: Vector6<f64>,
}

/// Borrowed reference data of one pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceView<'a> {
    pub k: &'a CameraIntrinsics,
    pub intensity: &'a IntensityImage,
    pub depth: &'a Image<f64>,
    pub uncertainty: &'a Image<f64>,
}

impl<'a> ReferenceView<'a> {
    pub fn of_keyframe(kf: &'a KeyFrame, k: &'a CameraIntrinsics) -> Self {
        Self {
            k,
            intensity: &kf.intensity,
            depth: &kf.depth,
            uncertainty: &kf.uncertainty,
        }
    }
}

/// Pixels whose gradient magnitude exceeds `threshold`, excluding a 2-pixel border.
pub fn select_high_gradient_pixels(grad: &GradientMap, threshold: f64) -> Vec<(usize, usize)> {
    let (w, h) = (grad.width(), grad.height());
    let mut out = Vec::new();
    if w <= 2 * BORDER || h <= 2 * BORDER {
        return out;
    }
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            if grad.magnitude(x, y) > threshold {
                out.push((x, y));
            }
        }
    }
    out
}

/// True when `(x, y)` lies on a depth discontinuity of relative size above `ratio`.
pub fn is_depth_edge(depth: &Image<f64>, x: usize, y: usize, ratio: f64) -> bool {
    let d = depth.at(x, y);
    let (w, h) = (depth.width(), depth.height());
    let neighbours = [
        (x.wrapping_sub(1), y),
        (x + 1, y),
        (x, y.wrapping_sub(1)),
        (x, y + 1),
    ];
    neighbours
        .iter()
        .filter(|(nx, ny)| *nx < w && *ny < h)
        .any(|(nx, ny)| (depth.at(*nx, *ny) - d).abs() > ratio * d)
}

fn warped_point(
    view: &ReferenceView<'_>,
    x: usize,
    y: usize,
    depth: f64,
    pose: &RigidPose,
) -> Vector3<f64> {
    let ray = view.k.ray(&PixelCoord::new(x as f64, y as f64));
    pose.transform_point(&(ray * depth))
}

fn project_interpolable(k: &CameraIntrinsics, p: &Vector3<f64>) -> Option<PixelCoord> {
    let w = k.project(p).ok()?;
    k.contains_interpolable(&w).then_some(w)
}

fn residual_at_depth(
    view: &ReferenceView<'_>,
    x: usize,
    y: usize,
    depth: f64,
    pose: &RigidPose,
    target: &IntensityImage,
) -> Option<f64> {
    let p = warped_point(view, x, y, depth, pose);
    let w = project_interpolable(view.k, &p)?;
    let it = target.sample_bilinear(&w).ok()?;
    Some(view.intensity.at(x, y) - it)
}

/// `I_k(u) − I_t(π(K T V(u)))`; `None` when the warp is invalid.
pub fn photometric_residual(
    view: &ReferenceView<'_>,
    pixel: (usize, usize),
    pose: &RigidPose,
    target: &IntensityImage,
) -> Option<f64> {
    let (x, y) = pixel;
    residual_at_depth(view, x, y, view.depth.at(x, y), pose, target)
}

/// Residual together with its analytic Jacobian with respect to a left
/// perturbation `exp(δ)·T`.
pub fn residual_jacobian(
    view: &ReferenceView<'_>,
    pixel: (usize, usize),
    pose: &RigidPose,
    target: &IntensityImage,
) -> Option<(f64, Vector6<f64>)> {
    let (x, y) = pixel;
    let p = warped_point(view, x, y, view.depth.at(x, y), pose);
    let w = project_interpolable(view.k, &p)?;
    let (it, gx, gy) = target.sample_with_gradient(&w).ok()?;
    let k = view.k;
    let inv_z = 1.0 / p.z;
    let a = k.fx * gx * inv_z;
    let b = k.fy * gy * inv_z;
    let g = Vector3::new(a, b, -(a * p.x + b * p.y) * inv_z);
    let rot = p.cross(&g);
    let jac = Vector6::new(-g.x, -g.y, -g.z, -rot.x, -rot.y, -rot.z);
    Some((view.intensity.at(x, y) - it, jac))
}

/// `∂r/∂D(u)` by central differences of the warp along depth; zero when either
/// side leaves the image.
pub fn residual_depth_derivative(
    view: &ReferenceView<'_>,
    pixel: (usize, usize),
    pose: &RigidPose,
    target: &IntensityImage,
) -> f64 {
    let (x, y) = pixel;
    let d = view.depth.at(x, y);
    let h = (1e-4 * d).max(1e-6);
    match (
        residual_at_depth(view, x, y, d + h, pose, target),
        residual_at_depth(view, x, y, d - h, pose, target),
    ) {
        (Some(a), Some(b)) => (a - b) / (2.0 * h),
        _ => 0.0,
    }
}

/// `σ(r) = sqrt(2σ_I² + (∂r/∂D)²·U)`.
pub fn residual_sigma(photometric_sigma: f64, depth_derivative: f64, depth_variance: f64) -> f64 {
    (2.0 * photometric_sigma * photometric_sigma
        + depth_derivative * depth_derivative * depth_variance)
        .sqrt()
}

pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_weight(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub samples: Vec<ResidualSample>,
    /// Mean Huber energy over valid samples.
    pub energy: f64,
    pub valid: usize,
}

/// Residuals, σ-normalized Huber weights and Jacobians for every pixel in `pixels`.
pub fn evaluate(
    view: &ReferenceView<'_>,
    pixels: &[(usize, usize)],
    pose: &RigidPose,
    target: &IntensityImage,
    cfg: &TrackingConfig,
) -> Evaluation {
    let mut samples = Vec::with_capacity(pixels.len());
    let mut energy = 0.0;
    let mut valid = 0;
    for &px in pixels {
        let Some((r, jac)) = residual_jacobian(view, px, pose, target) else {
            samples.push(ResidualSample {
                pixel: px,
                residual: 0.0,
                sigma: 1.0,
                weight: 0.0,
                jacobian: Vector6::zeros(),
            });
            continue;
        };
        let drdd = residual_depth_derivative(view, px, pose, target);
        let sigma = residual_sigma(cfg.photometric_sigma, drdd, view.uncertainty.at(px.0, px.1));
        let e = r / sigma;
        energy += huber(e, cfg.huber_delta);
        valid += 1;
        samples.push(ResidualSample {
            pixel: px,
            residual: r,
            sigma,
            weight: huber_weight(e, cfg.huber_delta),
            jacobian: jac,
        });
    }
    let energy = if valid > 0 {
        energy / valid as f64
    } else {
        f64::INFINITY
    };
    Evaluation {
        samples,
        energy,
        valid,
    }
}

struct Level {
    k: CameraIntrinsics,
    intensity: IntensityImage,
    depth: Image<f64>,
    uncertainty: Image<f64>,
    target: IntensityImage,
}

fn build_pyramid(
    kf: &KeyFrame,
    k: &CameraIntrinsics,
    target: &IntensityImage,
    levels: usize,
) -> Vec<Level> {
    let mut out = Vec::with_capacity(levels);
    out.push(Level {
        k: *k,
        intensity: kf.intensity.clone(),
        depth: kf.depth.clone(),
        uncertainty: kf.uncertainty.clone(),
        target: target.clone(),
    });
    for _ in 1..levels.max(1) {
        let prev = out.last().unwrap();
        if prev.k.width < 2 * (4 * BORDER) || prev.k.height < 2 * (4 * BORDER) {
            break;
        }
        let next = Level {
            k: prev.k.half(),
            intensity: prev.intensity.downsample_half(),
            depth: prev.depth.downsample_depth_half(),
            uncertainty: prev.uncertainty.downsample_half(),
            target: prev.target.downsample_half(),
        };
        out.push(next);
    }
    out
}

fn normal_equations(samples: &[ResidualSample]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut b = Vector6::zeros();
    for s in samples.iter().filter(|s| s.weight > 0.0) {
        let j = s.jacobian / s.sigma;
        let e = s.residual / s.sigma;
        h += j * j.transpose() * s.weight;
        b += j * (e * s.weight);
    }
    (h, b)
}

/// Estimates the key-frame-to-frame pose, starting from `init` (usually the previous
/// frame's relative pose).
pub fn estimate_pose(
    kf: &KeyFrame,
    k: &CameraIntrinsics,
    frame: &IntensityImage,
    init: &RigidPose,
    cfg: &TrackingConfig,
) -> Result<TrackingResult, TrackingError> {
    if !frame.same_shape(&kf.intensity) {
        return Err(TrackingError::SizeMismatch(frame.width(), frame.height()));
    }
    let pyramid = build_pyramid(kf, k, frame, cfg.pyramid_levels);
    let mut pose = *init;
    let mut iterations_per_level = Vec::with_capacity(pyramid.len());
    let mut energy_history = Vec::new();
    let mut converged = false;
    let mut final_energy = f64::INFINITY;
    let mut valid_ratio = 0.0;

    for (level_idx, level) in pyramid.iter().enumerate().rev() {
        let view = ReferenceView {
            k: &level.k,
            intensity: &level.intensity,
            depth: &level.depth,
            uncertainty: &level.uncertainty,
        };
        let grad = GradientMap::compute(&level.intensity);
        let mut pixels = select_high_gradient_pixels(&grad, cfg.gradient_threshold);
        if cfg.depth_edge_ratio > 0.0 && level_idx == 0 {
            pixels.retain(|&(x, y)| !is_depth_edge(&level.depth, x, y, cfg.depth_edge_ratio));
        }
        if pixels.is_empty() {
            iterations_per_level.push(0);
            if level_idx == 0 {
                return Err(TrackingError::TrackingLost {
                    valid_pixel_ratio: 0.0,
                    energy: f64::INFINITY,
                });
            }
            continue;
        }
        let mut eval = evaluate(&view, &pixels, &pose, &level.target, cfg);
        energy_history.push((level_idx, eval.energy));
        let mut iterations = 0;
        let mut lambda = 0.0;
        converged = false;
        while iterations < cfg.max_iterations && eval.valid >= 6 {
            iterations += 1;
            let (h, b) = normal_equations(&eval.samples);
            let mut accepted = false;
            let mut step = Vector6::zeros();
            for _ in 0..10 {
                let mut damped = h;
                for i in 0..6 {
                    damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda = (lambda * 10.0).max(1e-4);
                    continue;
                };
                step = -chol.solve(&b);
                let cand = RigidPose::exp(&step).compose(&pose);
                let ce = evaluate(&view, &pixels, &cand, &level.target, cfg);
                if ce.valid >= 6 && ce.energy <= eval.energy {
                    pose = cand;
                    eval = ce;
                    accepted = true;
                    lambda = if lambda < 1e-3 { 0.0 } else { lambda * 0.1 };
                    break;
                }
                lambda = (lambda * 10.0).max(1e-4);
            }
            if accepted {
                energy_history.push((level_idx, eval.energy));
            }
            if !accepted || step.norm() < cfg.convergence_threshold {
                converged = true;
                break;
            }
        }
        iterations_per_level.push(iterations);
        if level_idx == 0 {
            final_energy = eval.energy;
            valid_ratio = eval.valid as f64 / pixels.len() as f64;
        }
    }

    if !final_energy.is_finite() || valid_ratio < cfg.min_valid_ratio {
        return Err(TrackingError::TrackingLost {
            valid_pixel_ratio: valid_ratio,
            energy: final_energy,
        });
    }
    let pose = pose.orthonormalized();
    Ok(TrackingResult {
        relative_pose: pose,
        world_pose: pose.compose(&kf.pose),
        final_energy,
        valid_pixel_ratio: valid_ratio,
        converged,
        iterations_per_level,
        energy_history,
    })
}
