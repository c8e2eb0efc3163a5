//! Per-key-frame depth and label predictions: validation, focal-ratio scale
//! adjustment, and a degraded ground-truth stand-in for testing.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::image::{is_valid_depth, DepthMap, Image};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PredictionError {
    #[error("no prediction available for frame {0}")]
    MissingPrediction(String),
    #[error("prediction is not dense: {0}")]
    InvalidPrediction(String),
    #[error("focal lengths must be positive (current {current}, training {training})")]
    NonPositiveFocal { current: f64, training: f64 },
    #[error("prediction source error: {0}")]
    Source(String),
}

/// Raw provider depth before scale adjustment, plus the focal length the provider
/// was trained with (pixels at working resolution).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedDepthMap {
    depth: DepthMap,
    provider_focal: f64,
}

impl PredictedDepthMap {
    pub fn new(depth: DepthMap, provider_focal: f64) -> Result<Self, PredictionError> {
        if let Some(i) = depth.data().iter().position(|d| !is_valid_depth(*d)) {
            let (x, y) = (i % depth.width(), i / depth.width());
            return Err(PredictionError::InvalidPrediction(alloc::format!(
                "pixel ({x}, {y}) has depth {}",
                depth.data()[i]
            )));
        }
        Ok(Self {
            depth,
            provider_focal,
        })
    }

    pub fn depth(&self) -> &DepthMap {
        &self.depth
    }

    pub fn provider_focal(&self) -> f64 {
        self.provider_focal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLabelMap {
    labels: Image<u8>,
    class_names: Vec<String>,
}

impl SemanticLabelMap {
    pub fn new(labels: Image<u8>, class_names: Vec<String>) -> Result<Self, PredictionError> {
        let c = class_names.len();
        if let Some(bad) = labels.data().iter().find(|l| **l as usize >= c) {
            return Err(PredictionError::InvalidPrediction(alloc::format!(
                "label {bad} outside {c} classes"
            )));
        }
        Ok(Self {
            labels,
            class_names,
        })
    }

    pub fn labels(&self) -> &Image<u8> {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
}

/// Class names of the four-class indoor label set.
pub const INDOOR_CLASSES: [&str; 4] = [
    "floor",
    "vertical structure",
    "large structure/furniture",
    "small structure",
];

pub fn indoor_class_names() -> Vec<String> {
    INDOOR_CLASSES.iter().map(|s| String::from(*s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub depth: PredictedDepthMap,
    pub labels: Option<SemanticLabelMap>,
}

/// Source of key-frame predictions.
pub trait PredictionProvider {
    /// Training focal length `f_tr` in pixels at working resolution.
    fn provider_focal(&self) -> f64;

    fn fetch(&self, frame_id: &str) -> Result<Prediction, PredictionError>;
}

/// `D(u) = (f_cur / f_tr) · D̃(u)`.
pub fn adjust_scale(
    pred: &PredictedDepthMap,
    current_focal: f64,
) -> Result<DepthMap, PredictionError> {
    let training = pred.provider_focal;
    if !(current_focal > 0.0) || !(training > 0.0) {
        return Err(PredictionError::NonPositiveFocal {
            current: current_focal,
            training,
        });
    }
    let ratio = current_focal / training;
    Ok(pred.depth.map(|d| ratio * d))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeParams {
    /// Gaussian blur standard deviation in pixels; `0` disables blurring.
    pub blur_sigma: f64,
    /// Global multiplicative scale.
    pub scale_bias: f64,
    /// Standard deviation of the multiplicative per-pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            blur_sigma: 0.0,
            scale_bias: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Fills invalid depths with the value of the nearest valid pixel (4-connected BFS
/// order, deterministic). Returns `None` if there is no valid pixel at all.
pub fn inpaint_nearest(depth: &DepthMap) -> Option<DepthMap> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = depth.clone();
    let mut done: Vec<bool> = depth.data().iter().map(|d| is_valid_depth(*d)).collect();
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| done[i]).collect();
    if queue.is_empty() {
        return None;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let v = out.data()[i];
        let mut visit = |nx: usize, ny: usize, out: &mut DepthMap| {
            let j = ny * w + nx;
            if !done[j] {
                done[j] = true;
                out.data_mut()[j] = v;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(x - 1, y, &mut out);
        }
        if x + 1 < w {
            visit(x + 1, y, &mut out);
        }
        if y > 0 {
            visit(x, y - 1, &mut out);
        }
        if y + 1 < h {
            visit(x, y + 1, &mut out);
        }
    }
    Some(out)
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image<f64>, sigma: f64) -> Image<f64> {
    if !(sigma > 0.0) {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let horizontal = Image::from_fn(img.width(), img.height(), |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let xs = (x as isize + k as isize - radius).clamp(0, w - 1) as usize;
                c * img.at(xs, y)
            })
            .sum::<f64>()
    });
    Image::from_fn(img.width(), img.height(), |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let ys = (y as isize + k as isize - radius).clamp(0, h - 1) as usize;
                c * horizontal.at(x, ys)
            })
            .sum::<f64>()
    })
}

/// Degraded prediction from ground truth: hole filling, Gaussian blur, global scale
/// bias, then multiplicative Gaussian noise. Deterministic for a given seed.
pub fn synthesize_degraded(
    gt_depth: &DepthMap,
    params: &DegradeParams,
    provider_focal: f64,
) -> Result<PredictedDepthMap, PredictionError> {
    let filled = inpaint_nearest(gt_depth).ok_or_else(|| {
        PredictionError::InvalidPrediction(String::from("ground truth has no valid depth"))
    })?;
    let blurred = gaussian_blur(&filled, params.blur_sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = params.noise_sigma;
    let bias = params.scale_bias;
    let depth = blurred.map(|d| {
        let mut v = bias * d;
        if noise > 0.0 {
            let n: f64 = StandardNormal.sample(&mut rng);
            v *= (1.0 + noise * n).max(0.05);
        }
        v
    });
    PredictedDepthMap::new(depth, provider_focal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_depth() -> DepthMap {
        Image::from_fn(16, 12, |x, y| 1.0 + 0.1 * x as f64 + 0.05 * y as f64)
    }

    #[test]
    fn rejects_non_dense() {
        let mut d = ramp_depth();
        *d.get_mut(3, 4) = 0.0;
        assert!(matches!(
            PredictedDepthMap::new(d, 300.0),
            Err(PredictionError::InvalidPrediction(_))
        ));
        let mut d = ramp_depth();
        *d.get_mut(0, 0) = f64::NAN;
        assert!(PredictedDepthMap::new(d, 300.0).is_err());
    }

    #[test]
    fn label_range_checked() {
        let labels = Image::filled(2, 2, 4u8);
        assert!(SemanticLabelMap::new(labels, indoor_class_names()).is_err());
        let labels = Image::filled(2, 2, 3u8);
        assert_eq!(
            SemanticLabelMap::new(labels, indoor_class_names())
                .unwrap()
                .class_count(),
            4
        );
    }

    #[test]
    fn adjust_scale_examples() {
        let pred = PredictedDepthMap::new(ramp_depth(), 300.0).unwrap();
        assert_eq!(adjust_scale(&pred, 300.0).unwrap(), *pred.depth());
        let two = PredictedDepthMap::new(Image::filled(3, 3, 2.0), 300.0).unwrap();
        assert!(adjust_scale(&two, 600.0)
            .unwrap()
            .data()
            .iter()
            .all(|d| *d == 4.0));
        assert!(matches!(
            adjust_scale(&pred, 0.0),
            Err(PredictionError::NonPositiveFocal { .. })
        ));
        let bad = PredictedDepthMap {
            depth: ramp_depth(),
            provider_focal: -1.0,
        };
        assert!(adjust_scale(&bad, 300.0).is_err());
    }

    #[test]
    fn degrade_identity_parameters() {
        let gt = ramp_depth();
        let p = synthesize_degraded(&gt, &DegradeParams::default(), 300.0).unwrap();
        assert_eq!(*p.depth(), gt);
    }

    #[test]
    fn degrade_bias_doubles_mean() {
        let gt = ramp_depth();
        let params = DegradeParams {
            scale_bias: 2.0,
            ..Default::default()
        };
        let p = synthesize_degraded(&gt, &params, 300.0).unwrap();
        assert!((p.depth().mean() - 2.0 * gt.mean()).abs() < 1e-9);
    }

    #[test]
    fn degrade_is_deterministic() {
        let gt = ramp_depth();
        let params = DegradeParams {
            blur_sigma: 1.5,
            scale_bias: 1.1,
            noise_sigma: 0.05,
            seed: 42,
        };
        let a = synthesize_degraded(&gt, &params, 300.0).unwrap();
        let b = synthesize_degraded(&gt, &params, 300.0).unwrap();
        assert!(a
            .depth()
            .data()
            .iter()
            .zip(b.depth().data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = synthesize_degraded(&gt, &DegradeParams { seed: 43, ..params }, 300.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn inpaint_fills_holes() {
        let mut gt = Image::filled(5, 1, 0.0);
        *gt.get_mut(0, 0) = 1.0;
        *gt.get_mut(4, 0) = 3.0;
        let f = inpaint_nearest(&gt).unwrap();
        assert_eq!(f.data(), &[1.0, 1.0, 1.0, 3.0, 3.0]);
        assert!(inpaint_nearest(&Image::filled(2, 2, 0.0)).is_none());
    }

    #[test]
    fn blur_preserves_constants() {
        let c = Image::filled(9, 7, 2.5);
        assert!(gaussian_blur(&c, 3.0)
            .data()
            .iter()
            .all(|v| (v - 2.5).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn adjust_commutes_with_scaling(s in 0.1f64..10.0, f in 50.0f64..1000.0) {
            let pred = PredictedDepthMap::new(ramp_depth(), 300.0).unwrap();
            let scaled = PredictedDepthMap::new(pred.depth().map(|d| s * d), 300.0).unwrap();
            let a = adjust_scale(&scaled, f).unwrap();
            let b = adjust_scale(&pred, f).unwrap().map(|d| s * d);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs());
            }
            // relative structure untouched
            let a0 = a.data()[0];
            for (x, d) in a.data().iter().zip(scaled.depth().data()) {
                prop_assert!((x / a0 - d / scaled.depth().data()[0]).abs() < 1e-12);
            }
        }
    }
}
