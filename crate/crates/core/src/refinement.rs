//! Frame-wise refinement of the active key-frame: small-baseline stereo along
//! epipolar lines produces per-pixel observations aligned with the key-frame grid,
//! which are then fused into its depth and uncertainty maps.

use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, PixelCoord, RigidPose};
use crate::image::{is_valid_depth, Image, IntensityImage};
use crate::keyframe::{fuse_estimates, KeyFrame};

/// Samples per matching profile.
pub const PROFILE_LEN: usize = 5;
const HALF: isize = (PROFILE_LEN / 2) as isize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    /// Search interval is `D ± k·√U`.
    pub search_sigmas: f64,
    /// A match is ambiguous when `best / second_best` exceeds this.
    pub ambiguity_ratio: f64,
    pub photometric_sigma: f64,
    /// Floor on the epipolar intensity gradient.
    pub gradient_floor: f64,
    /// Standard deviation of the sub-pixel match position, pixels.
    pub localization_sigma: f64,
    /// Matches whose SSD exceeds this are discarded.
    pub max_match_error: f64,
    /// Observations with `|Dₜ − D| > max_relative_deviation · D` are discarded.
    pub max_relative_deviation: f64,
    /// Frames whose baseline is below this fraction of the key-frame's mean depth
    /// are treated as degenerate at every pixel.
    pub min_baseline_ratio: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            min_depth: 0.1,
            max_depth: 10.0,
            search_sigmas: 2.0,
            ambiguity_ratio: 0.9,
            photometric_sigma: 0.03,
            gradient_floor: 1e-4,
            localization_sigma: 0.5,
            max_match_error: 0.05,
            max_relative_deviation: 0.5,
            min_baseline_ratio: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum RefinementError {
    #[error("epipolar segment shorter than one pixel")]
    DegenerateBaseline,
    #[error("no unique match along the epipolar segment")]
    AmbiguousMatch,
    #[error("epipolar search leaves the image")]
    OutOfBounds,
    #[error("invalid depth range")]
    InvalidRange,
    #[error("best match error above threshold")]
    PoorMatch,
    #[error("observation inconsistent with the current depth")]
    Inconsistent,
}

/// Epipolar segment in frame `t` for one key-frame pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarSearch {
    pub pixel: PixelCoord,
    /// Projection at the near end of the depth range (after clipping).
    pub start: PixelCoord,
    /// Projection at the far end.
    pub end: PixelCoord,
    /// Unit direction from `start` to `end` (increasing depth).
    pub direction: (f64, f64),
    pub length: f64,
    pub depth_range: (f64, f64),
}

/// `D ± k·√U`, clamped to the configured depth limits.
pub fn search_range(depth: f64, variance: f64, cfg: &RefinementConfig) -> (f64, f64) {
    let s = cfg.search_sigmas * variance.max(0.0).sqrt();
    (
        (depth - s).clamp(cfg.min_depth, cfg.max_depth),
        (depth + s).clamp(cfg.min_depth, cfg.max_depth),
    )
}

/// Clips segment `a → b` to `[0, w-1] x [0, h-1]` (Liang–Barsky).
fn clip_segment(
    a: PixelCoord,
    b: PixelCoord,
    k: &CameraIntrinsics,
) -> Option<(PixelCoord, PixelCoord)> {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let (xmax, ymax) = ((k.width - 1) as f64, (k.height - 1) as f64);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [(-dx, a.x), (dx, xmax - a.x), (-dy, a.y), (dy, ymax - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    Some((
        PixelCoord::new(a.x + t0 * dx, a.y + t0 * dy),
        PixelCoord::new(a.x + t1 * dx, a.y + t1 * dy),
    ))
}

/// Projects the key-frame ray through `pixel` into frame `t` at both ends of
/// `depth_range`. `relative` maps key-frame coordinates into frame `t`.
pub fn epipolar_segment(
    pixel: &PixelCoord,
    relative: &RigidPose,
    k: &CameraIntrinsics,
    depth_range: (f64, f64),
) -> Result<EpipolarSearch, RefinementError> {
    let (mut dmin, mut dmax) = depth_range;
    if !(dmin > 0.0) || !(dmax >= dmin) {
        return Err(RefinementError::InvalidRange);
    }
    let a = relative.rotation() * k.ray(pixel);
    let t = relative.translation();
    // Keep only the part of the ray in front of frame t: z(d) = a.z·d + t.z.
    const MIN_Z: f64 = 1e-3;
    if a.z.abs() > 1e-12 {
        let d_cross = (MIN_Z - t.z) / a.z;
        if a.z > 0.0 {
            dmin = dmin.max(d_cross);
        } else {
            dmax = dmax.min(d_cross);
        }
    } else if t.z < MIN_Z {
        return Err(RefinementError::OutOfBounds);
    }
    if !(dmax >= dmin) {
        return Err(RefinementError::OutOfBounds);
    }
    let project = |d: f64| -> PixelCoord {
        let p = a * d + t;
        PixelCoord::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
    };
    let (near, far) = (project(dmin), project(dmax));
    let raw_len = ((far.x - near.x).powi(2) + (far.y - near.y).powi(2)).sqrt();
    if !(raw_len >= 1.0) {
        return Err(RefinementError::DegenerateBaseline);
    }
    let direction = ((far.x - near.x) / raw_len, (far.y - near.y) / raw_len);
    let (start, end) = clip_segment(near, far, k).ok_or(RefinementError::OutOfBounds)?;
    let length = ((end.x - start.x).powi(2) + (end.y - start.y).powi(2)).sqrt();
    Ok(EpipolarSearch {
        pixel: *pixel,
        start,
        end,
        direction,
        length,
        depth_range: (dmin, dmax),
    })
}

/// Depth along the key-frame ray of `pixel` whose projection into frame `t` is
/// `matched`, solved on the dominant axis of `direction`.
pub fn triangulate(
    pixel: &PixelCoord,
    matched: &PixelCoord,
    relative: &RigidPose,
    k: &CameraIntrinsics,
    direction: (f64, f64),
) -> f64 {
    let a = relative.rotation() * k.ray(pixel);
    let t = relative.translation();
    if direction.0.abs() >= direction.1.abs() {
        let m = (matched.x - k.cx) / k.fx;
        (m * t.z - t.x) / (a.x - m * a.z)
    } else {
        let m = (matched.y - k.cy) / k.fy;
        (m * t.z - t.y) / (a.y - m * a.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoMatch {
    pub depth: f64,
    /// SSD at the best integer position.
    pub match_error: f64,
    pub position: PixelCoord,
    /// Intensity gradient along the epipolar direction at the match.
    pub gradient: f64,
    /// `∂depth/∂position` along the epipolar line, meters per pixel.
    pub depth_per_pixel: f64,
}

fn keyframe_direction(
    pixel: &PixelCoord,
    relative: &RigidPose,
    k: &CameraIntrinsics,
    search: &EpipolarSearch,
) -> Option<(f64, f64)> {
    // Epipole of frame t in the key-frame, homogeneous.
    let c: Vector3<f64> = relative.inverse().translation().clone_owned();
    let e = k.matrix() * c;
    let (mut dx, mut dy) = (e.x - pixel.x * e.z, e.y - pixel.y * e.z);
    let n = (dx * dx + dy * dy).sqrt();
    if !(n > 1e-12) {
        return None;
    }
    dx /= n;
    dy /= n;
    // Orient it so that stepping along it in the key-frame steps along `direction` in t.
    let d_mid = 0.5 * (search.depth_range.0 + search.depth_range.1);
    let moved = PixelCoord::new(pixel.x + dx, pixel.y + dy);
    if let (Ok(w0), Ok(w1)) = (
        k.project(&relative.transform_point(&(k.ray(pixel) * d_mid))),
        k.project(&relative.transform_point(&(k.ray(&moved) * d_mid))),
    ) {
        if (w1.x - w0.x) * search.direction.0 + (w1.y - w0.y) * search.direction.1 < 0.0 {
            dx = -dx;
            dy = -dy;
        }
    }
    Some((dx, dy))
}

/// Slides the 5-sample key-frame profile along the segment at 1 px steps, picks the
/// lowest SSD, refines it with a parabola and triangulates.
pub fn match_along_epipolar(
    keyframe_intensity: &IntensityImage,
    frame: &IntensityImage,
    search: &EpipolarSearch,
    relative: &RigidPose,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> Result<StereoMatch, RefinementError> {
    let u = search.pixel;
    let kdir =
        keyframe_direction(&u, relative, k, search).ok_or(RefinementError::DegenerateBaseline)?;
    let mut reference = [0.0; PROFILE_LEN];
    for (i, r) in reference.iter_mut().enumerate() {
        let s = i as f64 - HALF as f64;
        *r = keyframe_intensity
            .sample_bilinear(&PixelCoord::new(u.x + s * kdir.0, u.y + s * kdir.1))
            .map_err(|_| RefinementError::OutOfBounds)?;
    }

    // Candidates cover the segment at 1 px steps plus one margin step beyond each
    // end so the sub-pixel fit also works at the ends.
    let dir = search.direction;
    let steps = search.length.ceil() as isize;
    let first = -1isize;
    let last = steps + 1;
    let line: Vec<Option<f64>> = (first - HALF..=last + HALF)
        .map(|s| {
            let p = PixelCoord::new(
                search.start.x + s as f64 * dir.0,
                search.start.y + s as f64 * dir.1,
            );
            frame.sample_bilinear(&p).ok()
        })
        .collect();
    let ssd: Vec<Option<f64>> = (0..=(last - first) as usize)
        .map(|j| {
            let mut acc = 0.0;
            for (i, r) in reference.iter().enumerate() {
                let v = line[j + i]?;
                acc += (r - v) * (r - v);
            }
            Some(acc)
        })
        .collect();
    let inside = |j: usize| (0..=steps).contains(&(j as isize + first));

    // Local minima are scored by the vertex of the parabola through their
    // neighbours, so off-grid true matches are not penalised.
    let refined: Vec<Option<(f64, f64)>> = (0..ssd.len())
        .map(|j| {
            let s = ssd[j]?;
            let (Some(a), Some(c)) = (
                j.checked_sub(1).and_then(|i| ssd[i]),
                ssd.get(j + 1).copied().flatten(),
            ) else {
                return Some((0.0, s));
            };
            let denom = a - 2.0 * s + c;
            if !(s <= a && s <= c && denom > 0.0) {
                return Some((0.0, s));
            }
            let t = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
            Some((t, (s + 0.5 * t * (c - a) + 0.5 * t * t * denom).max(0.0)))
        })
        .collect();
    let mut best: Option<(usize, f64, f64)> = None;
    for (j, r) in refined.iter().enumerate() {
        if !inside(j) {
            continue;
        }
        if let Some((t, v)) = *r {
            if best.is_none_or(|(_, _, b)| v < b) {
                best = Some((j, t, v));
            }
        }
    }
    let (jb, offset, best_ssd) = best.ok_or(RefinementError::OutOfBounds)?;
    let second = refined
        .iter()
        .enumerate()
        .filter(|(j, _)| inside(*j) && j.abs_diff(jb) >= 2)
        .filter_map(|(_, r)| r.map(|(_, v)| v))
        .fold(f64::INFINITY, f64::min);
    if second.is_finite() && !(best_ssd < cfg.ambiguity_ratio * second) {
        return Err(RefinementError::AmbiguousMatch);
    }
    if best_ssd > cfg.max_match_error {
        return Err(RefinementError::PoorMatch);
    }

    let pos = (jb as f64 + first as f64 + offset).clamp(0.0, search.length);
    let m = PixelCoord::new(search.start.x + pos * dir.0, search.start.y + pos * dir.1);
    let depth = triangulate(&u, &m, relative, k, dir);
    if !is_valid_depth(depth) {
        return Err(RefinementError::OutOfBounds);
    }
    let shifted = |s: f64| PixelCoord::new(m.x + s * dir.0, m.y + s * dir.1);
    let gradient = match (
        frame.sample_bilinear(&shifted(1.0)),
        frame.sample_bilinear(&shifted(-1.0)),
    ) {
        (Ok(a), Ok(b)) => 0.5 * (a - b),
        _ => {
            let i = jb + HALF as usize;
            0.5 * (line.get(i + 1).copied().flatten().unwrap_or(0.0)
                - line
                    .get(i.wrapping_sub(1))
                    .copied()
                    .flatten()
                    .unwrap_or(0.0))
        }
    };
    let depth_per_pixel = triangulate(&u, &shifted(0.5), relative, k, dir)
        - triangulate(&u, &shifted(-0.5), relative, k, dir);
    Ok(StereoMatch {
        depth,
        match_error: best_ssd,
        position: m,
        gradient,
        depth_per_pixel,
    })
}

/// `(∂depth/∂position)² · σ_I² / g²` with `|g|` floored.
pub fn observation_uncertainty(
    depth_per_pixel: f64,
    gradient: f64,
    photometric_sigma: f64,
    gradient_floor: f64,
) -> f64 {
    let g = gradient.abs().max(gradient_floor);
    depth_per_pixel * depth_per_pixel * photometric_sigma * photometric_sigma / (g * g)
}

/// Per-frame stereo observations on the key-frame grid; `0` depth marks no observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMaps {
    pub depth: Image<f64>,
    pub uncertainty: Image<f64>,
}

impl ObservationMaps {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            depth: Image::filled(width, height, 0.0),
            uncertainty: Image::filled(width, height, f64::INFINITY),
        }
    }

    pub fn is_observed(&self, x: usize, y: usize) -> bool {
        is_valid_depth(self.depth.at(x, y))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ObservationStats {
    pub observed: usize,
    pub degenerate: usize,
    pub ambiguous: usize,
    pub out_of_bounds: usize,
    pub poor_match: usize,
    pub inconsistent: usize,
}

/// One stereo observation for key-frame pixel `(x, y)`.
pub fn observe_pixel(
    kf: &KeyFrame,
    frame: &IntensityImage,
    relative: &RigidPose,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
    x: usize,
    y: usize,
) -> Result<(f64, f64), RefinementError> {
    let u = PixelCoord::new(x as f64, y as f64);
    let range = search_range(kf.depth.at(x, y), kf.uncertainty.at(x, y), cfg);
    let search = epipolar_segment(&u, relative, k, range)?;
    // The prior's own projection must be matchable, or clipping may have cut the true match away.
    let prior = k
        .project(&relative.transform_point(&(k.ray(&u) * kf.depth.at(x, y))))
        .map_err(|_| RefinementError::OutOfBounds)?;
    let margin = HALF as f64;
    if !(prior.x >= margin
        && prior.y >= margin
        && prior.x <= (k.width - 1) as f64 - margin
        && prior.y <= (k.height - 1) as f64 - margin)
    {
        return Err(RefinementError::OutOfBounds);
    }
    let m = match_along_epipolar(&kf.intensity, frame, &search, relative, k, cfg)?;
    let prior_depth = kf.depth.at(x, y);
    if (m.depth - prior_depth).abs() > cfg.max_relative_deviation * prior_depth {
        return Err(RefinementError::Inconsistent);
    }
    let var = observation_uncertainty(
        m.depth_per_pixel,
        m.gradient,
        cfg.photometric_sigma,
        cfg.gradient_floor,
    ) + (m.depth_per_pixel * cfg.localization_sigma).powi(2);
    if !(var > 0.0) || !var.is_finite() {
        return Err(RefinementError::OutOfBounds);
    }
    Ok((m.depth, var))
}

/// Stereo observations for every key-frame pixel against `frame`.
pub fn compute_observations(
    kf: &KeyFrame,
    frame: &IntensityImage,
    relative: &RigidPose,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> (ObservationMaps, ObservationStats) {
    let (w, h) = (kf.width(), kf.height());
    let mut obs = ObservationMaps::empty(w, h);
    let mut stats = ObservationStats::default();
    if relative.translation().norm() < cfg.min_baseline_ratio * kf.mean_depth() {
        stats.degenerate = w * h;
        return (obs, stats);
    }
    for y in 0..h {
        for x in 0..w {
            match observe_pixel(kf, frame, relative, k, cfg, x, y) {
                Ok((d, u)) => {
                    *obs.depth.get_mut(x, y) = d;
                    *obs.uncertainty.get_mut(x, y) = u;
                    stats.observed += 1;
                }
                Err(RefinementError::DegenerateBaseline) => stats.degenerate += 1,
                Err(RefinementError::AmbiguousMatch) => stats.ambiguous += 1,
                Err(RefinementError::PoorMatch) => stats.poor_match += 1,
                Err(RefinementError::Inconsistent) => stats.inconsistent += 1,
                Err(_) => stats.out_of_bounds += 1,
            }
        }
    }
    (obs, stats)
}

/// Fuses observations into the key-frame, returning the next generation.
/// Unobserved pixels are copied unchanged.
pub fn refine_keyframe(kf: &KeyFrame, obs: &ObservationMaps) -> KeyFrame {
    let mut out = kf.clone();
    for y in 0..kf.height() {
        for x in 0..kf.width() {
            if !obs.is_observed(x, y) {
                continue;
            }
            let (d, u) = fuse_estimates(
                kf.depth.at(x, y),
                kf.uncertainty.at(x, y),
                obs.depth.at(x, y),
                obs.uncertainty.at(x, y),
            );
            *out.depth.get_mut(x, y) = d;
            *out.uncertainty.get_mut(x, y) = u;
        }
    }
    out.generation = kf.generation + 1;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 39.5, 29.5, 80, 60).unwrap()
    }

    fn texture(x: f64) -> f64 {
        0.5 + 0.3 * (x * 0.8).sin() + 0.15 * (x * 0.23 + 1.0).sin()
    }

    /// Fronto-parallel plane at depth `d` with texture varying in world x only,
    /// camera shifted by `tx`.
    fn plane_image(d: f64, tx: f64) -> IntensityImage {
        let k = k();
        Image::from_fn(k.width, k.height, |x, _| {
            let wx = (x as f64 - k.cx) / k.fx * d + tx;
            texture(wx * 25.0)
        })
    }

    fn kf(depth: f64, var: f64) -> KeyFrame {
        let k = k();
        KeyFrame::new(
            0,
            0.0,
            RigidPose::identity(),
            plane_image(2.0, 0.0),
            Image::filled(k.width, k.height, depth),
            Image::filled(k.width, k.height, var),
            None,
        )
        .unwrap()
    }

    #[test]
    fn segment_examples() {
        let k = k();
        let u = PixelCoord::new(40.0, 30.0);
        assert_eq!(
            epipolar_segment(&u, &RigidPose::identity(), &k, (1.0, 3.0)),
            Err(RefinementError::DegenerateBaseline)
        );
        let rel = RigidPose::from_translation(Vector3::new(-0.05, 0.0, 0.0));
        assert_eq!(
            epipolar_segment(&u, &rel, &k, (2.0, 2.0)),
            Err(RefinementError::DegenerateBaseline)
        );
        let s = epipolar_segment(&u, &rel, &k, (1.0, 3.0)).unwrap();
        // Geometry oracle: project both ends directly.
        let near = k
            .project(&(k.vertex(&u, 1.0).unwrap() + Vector3::new(-0.05, 0.0, 0.0)))
            .unwrap();
        let far = k
            .project(&(k.vertex(&u, 3.0).unwrap() + Vector3::new(-0.05, 0.0, 0.0)))
            .unwrap();
        assert!((s.start.x - near.x).abs() < 1e-12 && (s.end.x - far.x).abs() < 1e-12);
        assert!((s.start.y - 30.0).abs() < 1e-12 && (s.end.y - 30.0).abs() < 1e-12);
        assert_eq!(s.direction, (1.0, 0.0));
        assert!((s.length - (far.x - near.x)).abs() < 1e-12);
        assert_eq!(
            epipolar_segment(&u, &rel, &k, (0.0, 1.0)),
            Err(RefinementError::InvalidRange)
        );
    }

    #[test]
    fn segment_is_clipped() {
        let k = k();
        let u = PixelCoord::new(40.0, 30.0);
        let rel = RigidPose::from_translation(Vector3::new(-0.05, 0.0, 0.0));
        let s = epipolar_segment(&u, &rel, &k, (0.1, 10.0)).unwrap();
        assert!(s.start.x >= 0.0 && s.end.x <= 79.0);
        assert!(s.start.x == 0.0);
    }

    #[test]
    fn matches_known_disparity() {
        let k = k();
        let tx = 0.2;
        let frame = plane_image(2.0, tx);
        let rel = RigidPose::from_translation(Vector3::new(-tx, 0.0, 0.0));
        let keyframe = kf(2.1, 0.04);
        let cfg = RefinementConfig::default();
        let mut checked = 0;
        // True matches of x < 20 fall off the left edge of frame t.
        for x in 20..70 {
            let u = PixelCoord::new(x as f64, 30.0);
            let Ok(s) = epipolar_segment(&u, &rel, &k, search_range(2.1, 0.04, &cfg)) else {
                continue;
            };
            // Exhaustive oracle over a fine grid of depths.
            let mut best = (f64::INFINITY, 0.0);
            let mut d = 1.7;
            while d < 2.5 {
                let p = k
                    .project(&(k.vertex(&u, d).unwrap() + Vector3::new(-tx, 0.0, 0.0)))
                    .unwrap();
                let mut e = 0.0;
                for i in -2..=2 {
                    let a = keyframe
                        .intensity
                        .sample_bilinear(&PixelCoord::new(u.x + i as f64, 30.0));
                    let b = frame.sample_bilinear(&PixelCoord::new(p.x + i as f64, 30.0));
                    if let (Ok(a), Ok(b)) = (a, b) {
                        e += (a - b) * (a - b);
                    } else {
                        e = f64::INFINITY;
                    }
                }
                if e < best.0 {
                    best = (e, d);
                }
                d += 0.001;
            }
            if let Ok(m) = match_along_epipolar(&keyframe.intensity, &frame, &s, &rel, &k, &cfg) {
                assert!((m.depth - 2.0).abs() < 0.04, "x={x}: {}", m.depth);
                assert!((best.1 - 2.0).abs() < 0.04);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn constant_line_is_ambiguous() {
        let k = k();
        let flat = Image::filled(k.width, k.height, 0.5);
        let rel = RigidPose::from_translation(Vector3::new(-0.05, 0.0, 0.0));
        let u = PixelCoord::new(40.0, 30.0);
        let s = epipolar_segment(&u, &rel, &k, (1.0, 3.0)).unwrap();
        assert_eq!(
            match_along_epipolar(&flat, &flat, &s, &rel, &k, &RefinementConfig::default()),
            Err(RefinementError::AmbiguousMatch)
        );
    }

    #[test]
    fn unique_patch_found_with_zero_error() {
        let k = k();
        let rel = RigidPose::from_translation(Vector3::new(-0.05, 0.0, 0.0));
        let u = PixelCoord::new(40.0, 30.0);
        let s = epipolar_segment(&u, &rel, &k, (1.0, 3.0)).unwrap();
        // Key-frame: bump centred on u. Target: the same bump at integer step 4 of the segment.
        let mut keyimg = Image::filled(k.width, k.height, 0.0);
        for (i, v) in [0.1, 0.4, 0.9, 0.3, 0.2].iter().enumerate() {
            *keyimg.get_mut(38 + i, 30) = *v;
        }
        let target_x = s.start.x + 2.0 * s.direction.0;
        assert_eq!(target_x.fract(), s.start.x.fract());
        let mut frame = Image::filled(k.width, k.height, 0.0);
        // Sample exactly where the scan samples: start.x is fractional, so paint a linear
        // interpolant-consistent profile by placing values on the integer grid shifted.
        let shift = s.start.x.fract();
        assert!(
            shift.abs() < 1e-9,
            "test assumes integer segment start, got {shift}"
        );
        for (i, v) in [0.1, 0.4, 0.9, 0.3, 0.2].iter().enumerate() {
            *frame.get_mut(target_x as usize - 2 + i, 30) = *v;
        }
        let m = match_along_epipolar(&keyimg, &frame, &s, &rel, &k, &RefinementConfig::default())
            .unwrap();
        // Parabolic refinement may shift it within the winning step.
        assert!((m.position.x - target_x).abs() < 0.5);
        assert_eq!(m.match_error, 0.0);
    }

    #[test]
    fn uncertainty_examples() {
        let u1 = observation_uncertainty(0.5, 0.1, 0.03, 1e-4);
        let u2 = observation_uncertainty(0.5, 0.2, 0.03, 1e-4);
        assert!(u2 < u1);
        let umax = observation_uncertainty(0.5, 0.0, 0.03, 1e-4);
        assert!(umax.is_finite());
        assert_eq!(umax, observation_uncertainty(0.5, 1e-9, 0.03, 1e-4));
        assert!(observation_uncertainty(0.5, 1e-3, 0.03, 1e-4) < umax);
    }

    #[test]
    fn doubling_baseline_quarters_uncertainty() {
        let k = k();
        let u = PixelCoord::new(50.0, 30.0);
        let d = 2.0;
        let per_pixel = |b: f64| {
            let rel = RigidPose::from_translation(Vector3::new(-b, 0.0, 0.0));
            let m = k
                .project(&(k.vertex(&u, d).unwrap() + Vector3::new(-b, 0.0, 0.0)))
                .unwrap();
            // Finite-difference triangulation oracle.
            let lo = triangulate(&u, &PixelCoord::new(m.x - 0.5, m.y), &rel, &k, (1.0, 0.0));
            let hi = triangulate(&u, &PixelCoord::new(m.x + 0.5, m.y), &rel, &k, (1.0, 0.0));
            hi - lo
        };
        let (a, b) = (per_pixel(0.2), per_pixel(0.4));
        assert!((b / a - 0.5).abs() < 5e-3, "{}", b / a);
        let ua = observation_uncertainty(a, 0.1, 0.03, 1e-4);
        let ub = observation_uncertainty(b, 0.1, 0.03, 1e-4);
        assert!((ub / ua - 0.25).abs() < 5e-3, "{}", ub / ua);
    }

    #[test]
    fn refine_examples() {
        let base = kf(2.0, 1.0);
        let mut obs = ObservationMaps::empty(base.width(), base.height());
        *obs.depth.get_mut(3, 3) = 2.0;
        *obs.uncertainty.get_mut(3, 3) = 1.0;
        *obs.depth.get_mut(4, 3) = 4.0;
        *obs.uncertainty.get_mut(4, 3) = 3.0;
        *obs.depth.get_mut(5, 3) = 4.0;
        *obs.uncertainty.get_mut(5, 3) = 1e12;
        let out = refine_keyframe(&base, &obs);
        assert_eq!(out.generation, 1);
        assert_eq!((out.depth.at(3, 3), out.uncertainty.at(3, 3)), (2.0, 0.5));
        assert!(
            (out.depth.at(4, 3) - 2.5).abs() < 1e-15
                && (out.uncertainty.at(4, 3) - 0.75).abs() < 1e-15
        );
        assert!((out.depth.at(5, 3) - 2.0).abs() < 1e-11);
        assert_eq!(out.depth.at(0, 0), 2.0);
        assert_eq!(out.uncertainty.at(0, 0), 1.0);
    }

    #[test]
    fn pure_rotation_is_degenerate_everywhere() {
        let base = kf(2.0, 4.0);
        let rel = RigidPose::from_scaled_axis(Vector3::new(0.0, 0.05, 0.0), Vector3::zeros());
        let (obs, stats) = compute_observations(
            &base,
            &base.intensity,
            &rel,
            &k(),
            &RefinementConfig::default(),
        );
        assert_eq!(stats.observed, 0);
        assert!(stats.degenerate > 0);
        assert!(refine_keyframe(&base, &obs).depth == base.depth);
    }
}
