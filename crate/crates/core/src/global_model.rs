//! Surfel-style global model built from key-frame depth maps, with per-element
//! label histograms averaged over every integration.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, PixelCoord};
use crate::image::{is_valid_depth, DepthMap, Image};
use crate::keyframe::KeyFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("element has never received a semantic label")]
    UnlabeledElement,
    #[error("model is empty")]
    EmptyModel,
    #[error("colour image does not match the key-frame size")]
    ShapeMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelElement {
    /// World frame, meters.
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Running mean, 0..255 per channel.
    pub color: [f64; 3],
    pub radius: f64,
    pub confidence_weight: f64,
    pub label_histogram: Vec<f64>,
}

impl ModelElement {
    /// Argmax of the histogram, lowest class id on ties.
    pub fn label(&self) -> Result<usize, ModelError> {
        let mut best: Option<(usize, f64)> = None;
        for (c, v) in self.label_histogram.iter().enumerate() {
            if *v > 0.0 && best.is_none_or(|(_, b)| *v > b) {
                best = Some((c, *v));
            }
        }
        best.map(|(c, _)| c).ok_or(ModelError::UnlabeledElement)
    }

    pub fn rgb(&self) -> [u8; 3] {
        self.color.map(|c| c.round().clamp(0.0, 255.0) as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Maximum angle between element and observation normals, radians.
    pub normal_threshold: f64,
    /// Integrate every `stride`-th pixel in both directions.
    pub stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            normal_threshold: 30f64.to_radians(),
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IntegrationStats {
    pub associated: usize,
    pub inserted: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalModel {
    pub elements: Vec<ModelElement>,
    /// `(key-frame id, generation)` per integration, in order.
    pub integrations: Vec<(usize, u64)>,
    pub class_names: Vec<String>,
    pub config: ModelConfig,
}

impl GlobalModel {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Integrates one key-frame at its current pose. Without `rgb` the
    /// key-frame intensity (0..1) is used as a grey colour.
    pub fn integrate_keyframe(
        &mut self,
        kf: &KeyFrame,
        k: &CameraIntrinsics,
        rgb: Option<&Image<[u8; 3]>>,
    ) -> Result<IntegrationStats, ModelError> {
        let (w, h) = (kf.width(), kf.height());
        if let Some(c) = rgb {
            if c.width() != w || c.height() != h {
                return Err(ModelError::ShapeMismatch);
            }
        }
        let labels = kf.labels.as_ref();
        if let Some(l) = labels {
            if l.class_count() > self.class_names.len() {
                self.class_names = l.class_names().to_vec();
            }
        }
        let index = self.index_map(kf, k);
        let c2w = kf.pose.inverse();
        let cos_thr = self.config.normal_threshold.cos();
        let stride = self.config.stride.max(1);
        let mut stats = IntegrationStats::default();
        for y in (0..h).step_by(stride) {
            for x in (0..w).step_by(stride) {
                let d = kf.depth.at(x, y);
                if !is_valid_depth(d) {
                    continue;
                }
                let Some(n_cam) = depth_normal(&kf.depth, k, x, y) else {
                    continue;
                };
                let Ok(v_cam) = k.vertex(&PixelCoord::new(x as f64, y as f64), d) else {
                    continue;
                };
                let v = c2w.transform_point(&v_cam);
                let n = c2w.rotation() * n_cam;
                let color = match rgb {
                    Some(c) => c.at(x, y).map(f64::from),
                    None => [kf.intensity.at(x, y).clamp(0.0, 1.0) * 255.0; 3],
                };
                let label = labels
                    .map(|l| l.labels().at(x, y) as usize)
                    .filter(|l| *l < self.class_names.len());
                let target = index[y * w + x].filter(|e| {
                    let el = &self.elements[*e];
                    (el.position - v).norm() <= el.radius && el.normal.dot(&n) >= cos_thr
                });
                match target {
                    Some(e) => {
                        let el = &mut self.elements[e];
                        let wt = el.confidence_weight;
                        el.position = (el.position * wt + v) / (wt + 1.0);
                        el.normal = (el.normal * wt + n).normalize();
                        for (acc, c) in el.color.iter_mut().zip(color) {
                            *acc = (*acc * wt + c) / (wt + 1.0);
                        }
                        el.confidence_weight = wt + 1.0;
                        if let Some(l) = label {
                            if el.label_histogram.len() < self.class_names.len() {
                                el.label_histogram.resize(self.class_names.len(), 0.0);
                            }
                            el.label_histogram[l] += 1.0;
                        }
                        stats.associated += 1;
                    }
                    None => {
                        let mut hist = vec![
                            0.0;
                            if label.is_some() {
                                self.class_names.len()
                            } else {
                                0
                            }
                        ];
                        if let Some(l) = label {
                            hist[l] = 1.0;
                        }
                        self.elements.push(ModelElement {
                            position: v,
                            normal: n,
                            color,
                            radius: d / k.fx,
                            confidence_weight: 1.0,
                            label_histogram: hist,
                        });
                        stats.inserted += 1;
                    }
                }
            }
        }
        self.integrations.push((kf.id, kf.generation));
        Ok(stats)
    }

    /// Per-pixel element index: the element nearest the camera that projects
    /// into each pixel. Elements facing away are skipped.
    fn index_map(&self, kf: &KeyFrame, k: &CameraIntrinsics) -> Vec<Option<usize>> {
        let (w, h) = (kf.width(), kf.height());
        let mut index: Vec<Option<usize>> = vec![None; w * h];
        let mut zbuf = vec![f64::INFINITY; w * h];
        for (i, el) in self.elements.iter().enumerate() {
            let p = kf.pose.transform_point(&el.position);
            if p.z <= 0.0 {
                continue;
            }
            let n = kf.pose.rotation() * el.normal;
            if n.dot(&p) > 0.0 {
                continue;
            }
            let Ok(u) = k.project(&p) else { continue };
            let (x, y) = (u.x.round(), u.y.round());
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                continue;
            }
            let cell = y as usize * w + x as usize;
            if p.z < zbuf[cell] {
                zbuf[cell] = p.z;
                index[cell] = Some(i);
            }
        }
        index
    }

    pub fn labels(&self) -> Vec<Result<usize, ModelError>> {
        self.elements.iter().map(ModelElement::label).collect()
    }
}

/// Camera-frame normal from central differences of the back-projected depth
/// map (one-sided at the border), oriented toward the camera.
pub fn depth_normal(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    x: usize,
    y: usize,
) -> Option<Vector3<f64>> {
    let (w, h) = (depth.width(), depth.height());
    let vertex = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let d = depth.at(x, y);
        if !is_valid_depth(d) {
            return None;
        }
        k.vertex(&PixelCoord::new(x as f64, y as f64), d).ok()
    };
    let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
    let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
    if x0 == x1 || y0 == y1 {
        return None;
    }
    let dx = vertex(x1, y)? - vertex(x0, y)?;
    let dy = vertex(x, y1)? - vertex(x, y0)?;
    let n = dx.cross(&dy);
    let norm = n.norm();
    if !(norm > 0.0) {
        return None;
    }
    let mut n = n / norm;
    if n.dot(&vertex(x, y)?) > 0.0 {
        n = -n;
    }
    Some(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    Rgb,
    Label,
}

/// Colours for floor, vertical structure, furniture and small objects.
pub const LABEL_PALETTE: [[u8; 3]; 4] = [
    [128, 64, 128],
    [70, 130, 180],
    [220, 180, 40],
    [220, 20, 60],
];
pub const UNLABELED_COLOR: [u8; 3] = [128, 128, 128];

/// Palette colour for any class id; ids past the fixed palette get a
/// deterministic hashed colour.
pub fn label_color(class: usize) -> [u8; 3] {
    if let Some(c) = LABEL_PALETTE.get(class) {
        return *c;
    }
    let mut x = (class as u32).wrapping_mul(0x9E37_79B9) ^ 0x5bd1_e995;
    x ^= x >> 15;
    x = x.wrapping_mul(0x2c1b_3c6d);
    x ^= x >> 12;
    [
        (x & 0xff) as u8 | 0x20,
        ((x >> 8) & 0xff) as u8 | 0x20,
        ((x >> 16) & 0xff) as u8 | 0x20,
    ]
}

pub fn element_color(el: &ModelElement, mode: ColorMode) -> [u8; 3] {
    match mode {
        ColorMode::Rgb => el.rgb(),
        ColorMode::Label => el.label().map(label_color).unwrap_or(UNLABELED_COLOR),
    }
}

/// Serializes the model as a PLY point cloud with normals and colours.
pub fn to_ply(
    model: &GlobalModel,
    format: PlyFormat,
    mode: ColorMode,
) -> Result<Vec<u8>, ModelError> {
    if model.is_empty() {
        return Err(ModelError::EmptyModel);
    }
    let mut header = String::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let _ = write!(
        header,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        model.len()
    );
    let mut out = header.into_bytes();
    for el in &model.elements {
        let c = element_color(el, mode);
        let f = [
            el.position.x,
            el.position.y,
            el.position.z,
            el.normal.x,
            el.normal.y,
            el.normal.z,
        ]
        .map(|v| v as f32);
        match format {
            PlyFormat::Ascii => {
                let mut line = String::new();
                let _ = writeln!(
                    line,
                    "{} {} {} {} {} {} {} {} {}",
                    f[0], f[1], f[2], f[3], f[4], f[5], c[0], c[1], c[2]
                );
                out.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in f {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&c);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidPose;
    use crate::prediction::{indoor_class_names, SemanticLabelMap};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 15.5, 11.5, 32, 24).unwrap()
    }

    fn plane_kf(id: usize, label: u8, pose: RigidPose) -> KeyFrame {
        let k = k();
        let depth = Image::filled(k.width, k.height, 2.0);
        let labels = SemanticLabelMap::new(
            Image::filled(k.width, k.height, label),
            indoor_class_names(),
        )
        .unwrap();
        KeyFrame::new(
            id,
            id as f64,
            pose,
            Image::filled(k.width, k.height, 0.5),
            depth,
            Image::filled(k.width, k.height, 0.01),
            Some(labels),
        )
        .unwrap()
    }

    #[test]
    fn first_integration_inserts_every_pixel() {
        let mut m = GlobalModel::default();
        let s = m
            .integrate_keyframe(&plane_kf(0, 1, RigidPose::identity()), &k(), None)
            .unwrap();
        assert_eq!(s.inserted, 32 * 24);
        assert_eq!(m.len(), 32 * 24);
        assert!(m
            .elements
            .iter()
            .all(|e| (e.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12));
    }

    #[test]
    fn same_keyframe_twice_doubles_weights() {
        let mut m = GlobalModel::default();
        let kf = plane_kf(0, 1, RigidPose::identity());
        m.integrate_keyframe(&kf, &k(), None).unwrap();
        let n = m.len();
        let s = m.integrate_keyframe(&kf, &k(), None).unwrap();
        assert_eq!(m.len(), n);
        assert_eq!(s.associated, n);
        assert!(m.elements.iter().all(|e| e.confidence_weight == 2.0));
    }

    #[test]
    fn majority_label_wins() {
        let mut m = GlobalModel::default();
        m.integrate_keyframe(&plane_kf(0, 2, RigidPose::identity()), &k(), None)
            .unwrap();
        m.integrate_keyframe(&plane_kf(1, 3, RigidPose::identity()), &k(), None)
            .unwrap();
        m.integrate_keyframe(&plane_kf(2, 2, RigidPose::identity()), &k(), None)
            .unwrap();
        assert!(m.labels().iter().all(|l| *l == Ok(2)));
    }

    #[test]
    fn label_rules() {
        let mut e = ModelElement {
            position: Vector3::zeros(),
            normal: Vector3::z(),
            color: [0.0; 3],
            radius: 0.01,
            confidence_weight: 3.0,
            label_histogram: vec![2.0, 1.0, 0.0, 0.0],
        };
        assert_eq!(e.label(), Ok(0));
        e.label_histogram = vec![1.0, 1.0, 0.0, 0.0];
        assert_eq!(e.label(), Ok(0));
        e.label_histogram = vec![0.0, 1.0, 1.0, 0.0];
        assert_eq!(e.label(), Ok(1));
        e.label_histogram = vec![0.0; 4];
        assert_eq!(e.label(), Err(ModelError::UnlabeledElement));
        e.label_histogram.clear();
        assert_eq!(e.label(), Err(ModelError::UnlabeledElement));
    }

    #[test]
    fn shifted_view_associates_and_averages() {
        let mut m = GlobalModel::default();
        m.integrate_keyframe(&plane_kf(0, 0, RigidPose::identity()), &k(), None)
            .unwrap();
        let shifted = RigidPose::from_translation(Vector3::new(0.004, 0.0, 0.0));
        let s = m
            .integrate_keyframe(&plane_kf(1, 0, shifted), &k(), None)
            .unwrap();
        assert!(s.associated > s.inserted);
        for e in m.elements.iter().filter(|e| e.confidence_weight == 2.0) {
            assert!((e.position.z - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ply_modes_and_errors() {
        assert_eq!(
            to_ply(&GlobalModel::default(), PlyFormat::Ascii, ColorMode::Rgb),
            Err(ModelError::EmptyModel)
        );
        let mut m = GlobalModel::default();
        m.integrate_keyframe(&plane_kf(0, 1, RigidPose::identity()), &k(), None)
            .unwrap();
        m.elements.truncate(1);
        let rgb = String::from_utf8(to_ply(&m, PlyFormat::Ascii, ColorMode::Rgb).unwrap()).unwrap();
        let lab =
            String::from_utf8(to_ply(&m, PlyFormat::Ascii, ColorMode::Label).unwrap()).unwrap();
        assert!(rgb.contains("element vertex 1"));
        let (a, b) = (rgb.lines().last().unwrap(), lab.lines().last().unwrap());
        let a: Vec<_> = a.split(' ').collect();
        let b: Vec<_> = b.split(' ').collect();
        assert_eq!(a[..6], b[..6]);
        assert_eq!(b[6..], ["70", "130", "180"]);
        assert_eq!(a[6..], ["128", "128", "128"]);
        let bin = to_ply(&m, PlyFormat::BinaryLittleEndian, ColorMode::Rgb).unwrap();
        let body = bin.len() - bin.windows(11).position(|w| w == b"end_header\n").unwrap() - 11;
        assert_eq!(body, 6 * 4 + 3);
    }

    #[test]
    fn palette_is_deterministic_and_extends() {
        assert_eq!(label_color(0), LABEL_PALETTE[0]);
        assert_eq!(label_color(17), label_color(17));
        assert_ne!(label_color(17), label_color(18));
    }
}
