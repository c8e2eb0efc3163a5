//! Pipeline configuration: `key = value` text with `#` comments, overridable
//! through `DEPTHFUSE_<KEY>` environment variables.

use std::path::{Path, PathBuf};

use depthfuse_core::global_model::{ModelConfig, PlyFormat};
use depthfuse_core::keyframe::PropagationParams;
use depthfuse_core::pose_graph::DEFAULT_FOV_THRESHOLD;
use depthfuse_core::prediction::DegradeParams;
use depthfuse_core::refinement::RefinementConfig;
use depthfuse_core::tracking::TrackingConfig;

use crate::dataset::{parse_key_values, DatasetError, DEFAULT_DEPTH_DIVISOR};

pub const ENV_PREFIX: &str = "DEPTHFUSE_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("ConfigError: unknown key {0}")]
    UnknownKey(String),
    #[error("ConfigError: invalid value for {key}: {value}")]
    InvalidValue { key: String, value: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionSource {
    Disk,
    DegradedGt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset_root: PathBuf,
    /// Relative to `dataset_root` unless absolute.
    pub associations: PathBuf,
    /// Empty means `<dataset_root>/camera.txt`.
    pub camera: PathBuf,
    pub prediction_source: PredictionSource,
    /// Empty means `<dataset_root>/predictions`.
    pub prediction_dir: PathBuf,
    pub degrade: DegradeParams,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub depth_divisor: f64,
    /// 0 processes every frame.
    pub max_frames: usize,
    pub tracking: TrackingConfig,
    pub keyframe_translation_factor: f64,
    pub keyframe_max_rotation_deg: f64,
    pub uncertainty_max: f64,
    pub propagation: PropagationParams,
    pub refinement_enabled: bool,
    pub refinement: RefinementConfig,
    pub fov_threshold: f64,
    pub model_stride: usize,
    pub model_normal_threshold_deg: f64,
    pub ply_format: PlyFormat,
    /// Bound of the key-frame handoff queue.
    pub queue_capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("."),
            associations: PathBuf::from("associations.txt"),
            camera: PathBuf::new(),
            prediction_source: PredictionSource::Disk,
            prediction_dir: PathBuf::new(),
            degrade: DegradeParams {
                blur_sigma: 3.0,
                scale_bias: 1.1,
                noise_sigma: 0.0,
                seed: 0,
            },
            output_dir: PathBuf::from("run"),
            seed: 0,
            depth_divisor: DEFAULT_DEPTH_DIVISOR,
            max_frames: 0,
            tracking: TrackingConfig::default(),
            keyframe_translation_factor: 0.15,
            keyframe_max_rotation_deg: 10.0,
            uncertainty_max: 4.0,
            propagation: PropagationParams::default(),
            refinement_enabled: true,
            refinement: RefinementConfig::default(),
            fov_threshold: DEFAULT_FOV_THRESHOLD,
            model_stride: 2,
            model_normal_threshold_deg: 30.0,
            ply_format: PlyFormat::BinaryLittleEndian,
            queue_capacity: 4,
        }
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl PipelineConfig {
    pub fn camera_path(&self) -> PathBuf {
        if self.camera.as_os_str().is_empty() {
            self.dataset_root.join("camera.txt")
        } else {
            self.camera.clone()
        }
    }

    pub fn prediction_path(&self) -> PathBuf {
        if self.prediction_dir.as_os_str().is_empty() {
            self.dataset_root.join("predictions")
        } else {
            self.prediction_dir.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            normal_threshold: self.model_normal_threshold_deg.to_radians(),
            stride: self.model_stride,
        }
    }

    /// Every key with its current value, in print order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.tracking;
        let r = &self.refinement;
        vec![
            ("dataset_root", path_str(&self.dataset_root)),
            ("associations", path_str(&self.associations)),
            ("camera", path_str(&self.camera)),
            (
                "prediction_source",
                match self.prediction_source {
                    PredictionSource::Disk => "disk",
                    PredictionSource::DegradedGt => "degraded_gt",
                }
                .into(),
            ),
            ("prediction_dir", path_str(&self.prediction_dir)),
            ("degrade_blur_sigma", self.degrade.blur_sigma.to_string()),
            ("degrade_scale_bias", self.degrade.scale_bias.to_string()),
            ("degrade_noise_sigma", self.degrade.noise_sigma.to_string()),
            ("output_dir", path_str(&self.output_dir)),
            ("seed", self.seed.to_string()),
            ("depth_divisor", self.depth_divisor.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("tracking_huber_delta", t.huber_delta.to_string()),
            ("tracking_pyramid_levels", t.pyramid_levels.to_string()),
            ("tracking_max_iterations", t.max_iterations.to_string()),
            ("photometric_sigma", t.photometric_sigma.to_string()),
            (
                "tracking_gradient_threshold",
                t.gradient_threshold.to_string(),
            ),
            ("tracking_min_valid_ratio", t.min_valid_ratio.to_string()),
            (
                "tracking_convergence_threshold",
                t.convergence_threshold.to_string(),
            ),
            ("tracking_depth_edge_ratio", t.depth_edge_ratio.to_string()),
            (
                "keyframe_translation_factor",
                self.keyframe_translation_factor.to_string(),
            ),
            (
                "keyframe_max_rotation_deg",
                self.keyframe_max_rotation_deg.to_string(),
            ),
            ("uncertainty_max", self.uncertainty_max.to_string()),
            (
                "propagation_noise_variance",
                self.propagation.noise_variance.to_string(),
            ),
            (
                "propagation_exponent",
                self.propagation.exponent.to_string(),
            ),
            ("refinement_enabled", self.refinement_enabled.to_string()),
            ("refine_min_depth", r.min_depth.to_string()),
            ("refine_max_depth", r.max_depth.to_string()),
            ("refine_search_sigmas", r.search_sigmas.to_string()),
            ("refine_ambiguity_ratio", r.ambiguity_ratio.to_string()),
            ("refine_gradient_floor", r.gradient_floor.to_string()),
            (
                "refine_localization_sigma",
                r.localization_sigma.to_string(),
            ),
            ("refine_max_match_error", r.max_match_error.to_string()),
            (
                "refine_max_relative_deviation",
                r.max_relative_deviation.to_string(),
            ),
            (
                "refine_min_baseline_ratio",
                r.min_baseline_ratio.to_string(),
            ),
            ("fov_threshold", self.fov_threshold.to_string()),
            ("model_stride", self.model_stride.to_string()),
            (
                "model_normal_threshold_deg",
                self.model_normal_threshold_deg.to_string(),
            ),
            (
                "ply_format",
                match self.ply_format {
                    PlyFormat::Ascii => "ascii",
                    PlyFormat::BinaryLittleEndian => "binary",
                }
                .into(),
            ),
            ("queue_capacity", self.queue_capacity.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
            v.parse().map_err(|_| ConfigError::InvalidValue {
                key: key.into(),
                value: v.into(),
            })
        }
        let v = value;
        match key {
            "dataset_root" => self.dataset_root = v.into(),
            "associations" => self.associations = v.into(),
            "camera" => self.camera = v.into(),
            "prediction_source" => {
                self.prediction_source = match v {
                    "disk" => PredictionSource::Disk,
                    "degraded_gt" => PredictionSource::DegradedGt,
                    _ => {
                        return Err(ConfigError::InvalidValue {
                            key: key.into(),
                            value: v.into(),
                        })
                    }
                }
            }
            "prediction_dir" => self.prediction_dir = v.into(),
            "degrade_blur_sigma" => self.degrade.blur_sigma = num(key, v)?,
            "degrade_scale_bias" => self.degrade.scale_bias = num(key, v)?,
            "degrade_noise_sigma" => self.degrade.noise_sigma = num(key, v)?,
            "output_dir" => self.output_dir = v.into(),
            "seed" => self.seed = num(key, v)?,
            "depth_divisor" => self.depth_divisor = num(key, v)?,
            "max_frames" => self.max_frames = num(key, v)?,
            "tracking_huber_delta" => self.tracking.huber_delta = num(key, v)?,
            "tracking_pyramid_levels" => self.tracking.pyramid_levels = num(key, v)?,
            "tracking_max_iterations" => self.tracking.max_iterations = num(key, v)?,
            "photometric_sigma" => {
                self.tracking.photometric_sigma = num(key, v)?;
                self.refinement.photometric_sigma = self.tracking.photometric_sigma;
            }
            "tracking_gradient_threshold" => self.tracking.gradient_threshold = num(key, v)?,
            "tracking_min_valid_ratio" => self.tracking.min_valid_ratio = num(key, v)?,
            "tracking_convergence_threshold" => self.tracking.convergence_threshold = num(key, v)?,
            "tracking_depth_edge_ratio" => self.tracking.depth_edge_ratio = num(key, v)?,
            "keyframe_translation_factor" => self.keyframe_translation_factor = num(key, v)?,
            "keyframe_max_rotation_deg" => self.keyframe_max_rotation_deg = num(key, v)?,
            "uncertainty_max" => self.uncertainty_max = num(key, v)?,
            "propagation_noise_variance" => self.propagation.noise_variance = num(key, v)?,
            "propagation_exponent" => self.propagation.exponent = num(key, v)?,
            "refinement_enabled" => self.refinement_enabled = num(key, v)?,
            "refine_min_depth" => self.refinement.min_depth = num(key, v)?,
            "refine_max_depth" => self.refinement.max_depth = num(key, v)?,
            "refine_search_sigmas" => self.refinement.search_sigmas = num(key, v)?,
            "refine_ambiguity_ratio" => self.refinement.ambiguity_ratio = num(key, v)?,
            "refine_gradient_floor" => self.refinement.gradient_floor = num(key, v)?,
            "refine_localization_sigma" => self.refinement.localization_sigma = num(key, v)?,
            "refine_max_match_error" => self.refinement.max_match_error = num(key, v)?,
            "refine_max_relative_deviation" => {
                self.refinement.max_relative_deviation = num(key, v)?
            }
            "refine_min_baseline_ratio" => self.refinement.min_baseline_ratio = num(key, v)?,
            "fov_threshold" => self.fov_threshold = num(key, v)?,
            "model_stride" => self.model_stride = num(key, v)?,
            "model_normal_threshold_deg" => self.model_normal_threshold_deg = num(key, v)?,
            "ply_format" => {
                self.ply_format = match v {
                    "ascii" => PlyFormat::Ascii,
                    "binary" => PlyFormat::BinaryLittleEndian,
                    _ => {
                        return Err(ConfigError::InvalidValue {
                            key: key.into(),
                            value: v.into(),
                        })
                    }
                }
            }
            "queue_capacity" => self.queue_capacity = num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# depthfuse pipeline configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (k, v) in parse_key_values(text, origin)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    /// Applies `DEPTHFUSE_<KEY>` overrides from `vars`.
    pub fn apply_overrides<I: IntoIterator<Item = (String, String)>>(
        &mut self,
        vars: I,
    ) -> Result<(), ConfigError> {
        let keys: Vec<&str> = self.entries().into_iter().map(|(k, _)| k).collect();
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = rest.to_ascii_lowercase();
            if keys.contains(&key.as_str()) {
                self.set(&key, &value)?;
            }
        }
        Ok(())
    }

    /// Reads a config file, then applies environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                ConfigError::Dataset(DatasetError::MissingFile(path.to_path_buf()))
            }
            _ => ConfigError::Dataset(DatasetError::Io(e)),
        })?;
        let mut c = Self::parse(&text, path)?;
        c.apply_overrides(std::env::vars())?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        assert_eq!(
            PipelineConfig::parse(&c.to_text(), Path::new("x")).unwrap(),
            c
        );
    }

    #[test]
    fn custom_values_round_trip() {
        let mut c = PipelineConfig::default();
        c.set("photometric_sigma", "0.0123456789").unwrap();
        c.set("prediction_source", "degraded_gt").unwrap();
        c.set("ply_format", "ascii").unwrap();
        c.set("fov_threshold", "0.1").unwrap();
        c.set("model_normal_threshold_deg", "25").unwrap();
        let back = PipelineConfig::parse(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_errors() {
        let mut c = PipelineConfig::default();
        c.apply_overrides([
            ("DEPTHFUSE_SEED".to_string(), "42".to_string()),
            ("OTHER_SEED".to_string(), "7".to_string()),
        ])
        .unwrap();
        assert_eq!(c.seed, 42);
        assert!(matches!(
            c.set("nope", "1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            c.set("seed", "x"),
            Err(ConfigError::InvalidValue { .. })
        ));
        let parsed = PipelineConfig::parse("# c\nseed = 3 # trailing\n\n", Path::new("x")).unwrap();
        assert_eq!(parsed.seed, 3);
    }
}
