//! Key-frames: creation policy, nearest-key-frame lookup, confidence-based
//! uncertainty initialization and fusion with the propagated neighbour.

use crate::geometry::{pose_distance, CameraIntrinsics, PixelCoord, RigidPose};
use crate::image::{is_valid_depth, DepthMap, Image, IntensityImage};
use crate::prediction::SemanticLabelMap;

/// Weight of rotation (meters per radian) in the key-frame distance metric.
pub const METERS_PER_RADIAN: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KeyFrameError {
    #[error("depth, uncertainty and intensity maps must share dimensions")]
    ShapeMismatch,
    #[error("key-frame depth must be positive and finite at pixel ({0}, {1})")]
    InvalidDepth(usize, usize),
    #[error("key-frame uncertainty must be non-negative at pixel ({0}, {1})")]
    InvalidUncertainty(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyFrame {
    pub id: usize,
    pub timestamp: f64,
    /// World-to-camera.
    pub pose: RigidPose,
    pub intensity: IntensityImage,
    /// Dense depth, meters.
    pub depth: DepthMap,
    /// Depth variance, m².
    pub uncertainty: Image<f64>,
    pub labels: Option<SemanticLabelMap>,
    /// Bumped on every refinement.
    pub generation: u64,
}

impl KeyFrame {
    pub fn new(
        id: usize,
        timestamp: f64,
        pose: RigidPose,
        intensity: IntensityImage,
        depth: DepthMap,
        uncertainty: Image<f64>,
        labels: Option<SemanticLabelMap>,
    ) -> Result<Self, KeyFrameError> {
        if !depth.same_shape(&intensity) || !depth.same_shape(&uncertainty) {
            return Err(KeyFrameError::ShapeMismatch);
        }
        if let Some(l) = &labels {
            if !l.labels().same_shape(&depth) {
                return Err(KeyFrameError::ShapeMismatch);
            }
        }
        let w = depth.width();
        if let Some(i) = depth.data().iter().position(|d| !is_valid_depth(*d)) {
            return Err(KeyFrameError::InvalidDepth(i % w, i / w));
        }
        if let Some(i) = uncertainty.data().iter().position(|u| !(*u >= 0.0)) {
            return Err(KeyFrameError::InvalidUncertainty(i % w, i / w));
        }
        Ok(Self {
            id,
            timestamp,
            pose,
            intensity,
            depth,
            uncertainty,
            labels,
            generation: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn mean_depth(&self) -> f64 {
        self.depth.mean()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframePolicy {
    pub max_translation: f64,
    pub max_rotation: f64,
}

impl KeyframePolicy {
    /// Translation threshold proportional to the key-frame's mean depth.
    pub fn relative_to(kf: &KeyFrame, translation_factor: f64, max_rotation: f64) -> Self {
        Self {
            max_translation: translation_factor * kf.mean_depth(),
            max_rotation,
        }
    }
}

/// True when the frame has moved far enough from `nearest_pose` in translation or
/// in rotation.
pub fn should_create_keyframe(
    frame_pose: &RigidPose,
    nearest_pose: &RigidPose,
    policy: &KeyframePolicy,
) -> bool {
    let rel = frame_pose.compose(&nearest_pose.inverse());
    let dt = (frame_pose.center() - nearest_pose.center()).norm();
    dt > policy.max_translation || rel.rotation_angle() > policy.max_rotation
}

/// Id of the candidate minimizing `‖Δt‖ + λ·angle(ΔR)`; ties go to the lower id.
pub fn find_nearest_keyframe<'a, I>(frame_pose: &RigidPose, candidates: I) -> Option<usize>
where
    I: IntoIterator<Item = (usize, &'a RigidPose)>,
{
    let mut best: Option<(usize, f64)> = None;
    for (id, pose) in candidates {
        let d = pose_distance(frame_pose, pose, METERS_PER_RADIAN);
        best = match best {
            Some((bid, bd)) if bd < d || (bd == d && bid < id) => Some((bid, bd)),
            _ => Some((id, d)),
        };
    }
    best.map(|(id, _)| id)
}

/// Neighbour key-frame sample for key-frame pixel `u`: where it lands in `k_j`, the
/// depth and variance read there, and that surface point's depth re-expressed along
/// `k_i`'s viewing ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborSample {
    pub pixel: PixelCoord,
    /// `D_{k_j}(v)`, bilinear.
    pub depth: f64,
    /// `U_{k_j}(v)`, bilinear.
    pub variance: f64,
    /// z-coordinate in `k_i` of the `k_j` point at `(v, D_{k_j}(v))`.
    pub depth_in_source: f64,
}

/// Samples neighbour key-frame `neighbor` for pixel `(x, y)` of a key-frame whose depth
/// there is `depth`. `to_neighbor` maps key-frame coordinates into the neighbour's.
pub fn sample_neighbor(
    x: usize,
    y: usize,
    depth: f64,
    to_neighbor: &RigidPose,
    from_neighbor: &RigidPose,
    neighbor: &KeyFrame,
    k: &CameraIntrinsics,
) -> Option<NeighborSample> {
    let u = PixelCoord::new(x as f64, y as f64);
    let v = k.warp(&u, depth, to_neighbor).ok()?;
    if !k.contains_interpolable(&v) {
        return None;
    }
    let dj = neighbor.depth.sample_bilinear(&v).ok()?;
    let uj = neighbor.uncertainty.sample_bilinear(&v).ok()?;
    if !is_valid_depth(dj) {
        return None;
    }
    let back = from_neighbor.transform_point(&k.vertex(&v, dj).ok()?);
    if !is_valid_depth(back.z) {
        return None;
    }
    Some(NeighborSample {
        pixel: v,
        depth: dj,
        variance: uj,
        depth_in_source: back.z,
    })
}

/// Squared disagreement between a new key-frame's depth and the warped nearest
/// key-frame; `u_max` where the warp leaves the image.
pub fn init_uncertainty(
    depth: &DepthMap,
    neighbor: &KeyFrame,
    to_neighbor: &RigidPose,
    k: &CameraIntrinsics,
    u_max: f64,
) -> Image<f64> {
    let from_neighbor = to_neighbor.inverse();
    Image::from_fn(depth.width(), depth.height(), |x, y| {
        let d = depth.at(x, y);
        match sample_neighbor(x, y, d, to_neighbor, &from_neighbor, neighbor, k) {
            Some(s) => {
                let diff = d - s.depth_in_source;
                diff * diff
            }
            None => u_max,
        }
    })
}

/// Uncertainty of the very first key-frame.
pub fn initial_uncertainty(width: usize, height: usize, u_max: f64) -> Image<f64> {
    Image::filled(width, height, u_max)
}

/// `Ũ = (D_j / D_i)^exponent · U_j + σ_p²`; the exponent is 1 by default.
pub fn propagate_uncertainty(
    neighbor_depth: f64,
    depth: f64,
    neighbor_variance: f64,
    noise_variance: f64,
    exponent: f64,
) -> f64 {
    let ratio = neighbor_depth / depth;
    let scale = if exponent == 1.0 {
        ratio
    } else {
        ratio.powf(exponent)
    };
    scale * neighbor_variance + noise_variance
}

/// Inverse-variance fusion of two depth estimates, shared by key-frame
/// initialization and frame-wise refinement:
/// `d = (u_b·d_a + u_a·d_b)/(u_a + u_b)`, `u = u_a·u_b/(u_a + u_b)`.
///
/// An infinite variance on one side returns the other side unchanged.
#[inline]
pub fn fuse_estimates(depth_a: f64, var_a: f64, depth_b: f64, var_b: f64) -> (f64, f64) {
    if var_b.is_infinite() {
        return (depth_a, var_a);
    }
    if var_a.is_infinite() {
        return (depth_b, var_b);
    }
    let sum = var_a + var_b;
    if !(sum > 0.0) {
        return (depth_a, var_a);
    }
    (
        (var_b * depth_a + var_a * depth_b) / sum,
        (var_b * var_a) / sum,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationParams {
    /// σ_p², m².
    pub noise_variance: f64,
    pub exponent: f64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        Self {
            noise_variance: 0.01,
            exponent: 1.0,
        }
    }
}

/// Fuses a freshly initialized key-frame `(depth, uncertainty)` with the refined maps
/// of its nearest key-frame. Pixels without a valid correspondence keep their values.
pub fn fuse_new_keyframe(
    depth: &DepthMap,
    uncertainty: &Image<f64>,
    neighbor: &KeyFrame,
    to_neighbor: &RigidPose,
    k: &CameraIntrinsics,
    params: &PropagationParams,
) -> (DepthMap, Image<f64>) {
    let from_neighbor = to_neighbor.inverse();
    let mut out_d = depth.clone();
    let mut out_u = uncertainty.clone();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let d = depth.at(x, y);
            let Some(s) = sample_neighbor(x, y, d, to_neighbor, &from_neighbor, neighbor, k) else {
                continue;
            };
            let propagated = propagate_uncertainty(
                s.depth,
                d,
                s.variance,
                params.noise_variance,
                params.exponent,
            );
            let (fd, fu) = fuse_estimates(d, uncertainty.at(x, y), s.depth_in_source, propagated);
            *out_d.get_mut(x, y) = fd;
            *out_u.get_mut(x, y) = fu;
        }
    }
    (out_d, out_u)
}
