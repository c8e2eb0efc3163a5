//! Ray-cast synthetic scene: a textured room with two boxes, rendered to exact
//! intensity, depth and label images for any camera pose.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, PixelCoord, RigidPose};
use crate::image::Image;

pub const LABEL_FLOOR: u8 = 0;
pub const LABEL_WALL: u8 = 1;
pub const LABEL_LARGE: u8 = 2;
pub const LABEL_SMALL: u8 = 3;

/// 320×240 working resolution intrinsics.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(262.5, 262.5, 159.5, 119.5, 320, 240).expect("valid constants")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            min: Vector3::from(min),
            max: Vector3::from(max),
        }
    }

    /// Slab test; returns `(t_near, axis_near, t_far, axis_far)`.
    fn slabs(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize, f64, usize)> {
        let (mut tn, mut an, mut tf, mut af) = (f64::NEG_INFINITY, 0, f64::INFINITY, 0);
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let t1 = (self.min[a] - o[a]) / d[a];
            let t2 = (self.max[a] - o[a]) / d[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > tn {
                tn = lo;
                an = a;
            }
            if hi < tf {
                tf = hi;
                af = a;
            }
        }
        (tn <= tf).then_some((tn, an, tf, af))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Camera lives inside; y points down, so the floor is `room.max.y`.
    pub room: Aabb,
    pub boxes: Vec<(Aabb, u8)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticView {
    pub intensity: Image<f64>,
    /// Camera z, meters.
    pub depth: Image<f64>,
    pub labels: Image<u8>,
    pub rgb: Image<[u8; 3]>,
}

struct Hit {
    t: f64,
    point: Vector3<f64>,
    axis: usize,
    label: u8,
    surface: usize,
}

impl Default for SyntheticScene {
    fn default() -> Self {
        Self::room_with_boxes()
    }
}

impl SyntheticScene {
    pub fn room_with_boxes() -> Self {
        Self {
            room: Aabb::new([-2.5, -1.6, -2.0], [2.5, 1.0, 4.0]),
            boxes: alloc::vec![
                (Aabb::new([0.3, 0.1, 2.2], [1.3, 1.0, 3.1]), LABEL_LARGE),
                (Aabb::new([-1.1, 0.55, 1.6], [-0.6, 1.0, 2.0]), LABEL_SMALL),
            ],
        }
    }

    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let (_, _, tf, af) = self.room.slabs(o, d)?;
        let room_label = if af == 1 && d.y > 0.0 {
            LABEL_FLOOR
        } else {
            LABEL_WALL
        };
        let side = usize::from(d[af] > 0.0);
        let mut best = Hit {
            t: tf,
            point: o + d * tf,
            axis: af,
            label: room_label,
            surface: 2 * af + side,
        };
        for (i, (b, label)) in self.boxes.iter().enumerate() {
            if let Some((tn, an, _, _)) = b.slabs(o, d) {
                if tn > 1e-9 && tn < best.t {
                    best = Hit {
                        t: tn,
                        point: o + d * tn,
                        axis: an,
                        label: *label,
                        surface: 6 + 6 * i + 2 * an + usize::from(d[an] > 0.0),
                    };
                }
            }
        }
        (best.t > 0.0).then_some(best)
    }

    /// Renders the view of a world-to-camera pose. Depth and labels are sampled
    /// at pixel centres; intensity is averaged over a supersampling grid.
    pub fn render(&self, k: &CameraIntrinsics, world_to_camera: &RigidPose) -> SyntheticView {
        let c2w = world_to_camera.inverse();
        let origin = *c2w.translation();
        let (w, h) = (k.width, k.height);
        let mut intensity = Image::filled(w, h, 0.0);
        let mut depth = Image::filled(w, h, 0.0);
        let mut labels = Image::filled(w, h, LABEL_WALL);
        let mut rgb = Image::filled(w, h, [0u8; 3]);
        for y in 0..h {
            for x in 0..w {
                // Unit camera-z ray, so the hit parameter is the z-depth.
                let ray_cam = k.ray(&PixelCoord::new(x as f64, y as f64));
                let dir = c2w.rotation() * ray_cam;
                let Some(hit) = self.cast(&origin, &dir) else {
                    continue;
                };
                let mut i = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let off = |s: usize| (s as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        let sub = k.ray(&PixelCoord::new(x as f64 + off(sx), y as f64 + off(sy)));
                        i += match self.cast(&origin, &(c2w.rotation() * sub)) {
                            Some(h) => surface_texture(&h),
                            None => surface_texture(&hit),
                        };
                    }
                }
                let i = i / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                *intensity.get_mut(x, y) = i;
                *depth.get_mut(x, y) = hit.t;
                *labels.get_mut(x, y) = hit.label;
                let tint = TINTS[hit.label as usize % TINTS.len()];
                *rgb.get_mut(x, y) = tint.map(|t| (i * t * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        SyntheticView {
            intensity,
            depth,
            labels,
            rgb,
        }
    }
}

/// Intensity samples per pixel along each axis.
const SUPERSAMPLE: usize = 3;

fn surface_texture(hit: &Hit) -> f64 {
    let (a, b) = match hit.axis {
        0 => (hit.point.z, hit.point.y),
        1 => (hit.point.x, hit.point.z),
        _ => (hit.point.x, hit.point.y),
    };
    texture(a, b, hit.surface)
}

const TINTS: [[f64; 3]; 4] = [
    [1.0, 0.9, 0.8],
    [0.85, 0.9, 1.0],
    [1.0, 0.8, 0.65],
    [0.7, 1.0, 0.7],
];

/// Smooth pattern with sharp transitions: tanh-compressed sinusoids produce
/// flat plateaus separated by edges a few centimetres wide; a metre-scale
/// component breaks the periodicity.
pub fn texture(a: f64, b: f64, surface: usize) -> f64 {
    let p = surface as f64;
    let s = (a * TAU / 0.45 + 0.7 * p).sin() * (b * TAU / 0.37 + 1.3 * p).sin()
        + 0.5 * (a * TAU / 0.83 + b * TAU / 1.1 + 2.1 * p).sin()
        + 0.8 * (a * TAU / 2.3 + 0.4 * p).sin() * (b * TAU / 1.7 + 0.9 * p).cos();
    0.5 + 0.4 * (2.5 * s).tanh()
}

/// World-to-camera pose looking along +z from `center`, turned by `yaw` about
/// the vertical axis.
pub fn camera_pose(center: Vector3<f64>, yaw: f64, pitch: f64) -> RigidPose {
    let c2w = RigidPose::from_scaled_axis(Vector3::new(0.0, yaw, 0.0), Vector3::zeros()).compose(
        &RigidPose::from_scaled_axis(Vector3::new(pitch, 0.0, 0.0), Vector3::zeros()),
    );
    let c2w = RigidPose::new(*c2w.rotation(), center).expect("rotation from axis-angle");
    c2w.inverse()
}

/// Closed loop of `n` world-to-camera poses on a horizontal circle of
/// `radius`, returning to the start; the view direction sways by ±`yaw_amp`.
pub fn loop_trajectory(n: usize, radius: f64, yaw_amp: f64) -> Vec<RigidPose> {
    (0..n)
        .map(|i| {
            let a = TAU * i as f64 / n as f64;
            let c = Vector3::new(radius * (a.cos() - 1.0), -0.05 * a.sin(), radius * a.sin());
            camera_pose(c, yaw_amp * a.sin(), 0.05)
        })
        .collect()
}

/// Pure rotation about the camera centre, sweeping `total_yaw` over `n` frames.
pub fn pan_trajectory(n: usize, total_yaw: f64) -> Vec<RigidPose> {
    (0..n)
        .map(|i| {
            let f = if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.0
            };
            camera_pose(Vector3::zeros(), -0.5 * total_yaw + f * total_yaw, 0.05)
        })
        .collect()
}
