//! Prediction sources: precomputed maps on disk, or degraded ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use depthfuse_core::image::{WORKING_HEIGHT, WORKING_WIDTH};
use depthfuse_core::prediction::{
    indoor_class_names, synthesize_degraded, DegradeParams, PredictedDepthMap, Prediction,
    PredictionError, PredictionProvider, SemanticLabelMap,
};
use depthfuse_core::{DepthMap, Image};

use crate::dataset::{
    load_depth_working, load_f32_map, load_labels_png, parse_key_values, DatasetError,
};

pub const MANIFEST: &str = "manifest.txt";

fn source_err(e: DatasetError) -> PredictionError {
    PredictionError::Source(e.to_string())
}

fn to_working<T: Copy>(img: Image<T>) -> Image<T> {
    if img.width() == WORKING_WIDTH && img.height() == WORKING_HEIGHT {
        img
    } else {
        img.resize_nearest(WORKING_WIDTH, WORKING_HEIGHT)
    }
}

/// `<dir>/<frame_id>.f32` or `<dir>/<frame_id>.png` depth plus optional
/// `<dir>/<frame_id>_labels.png`; `manifest.txt` declares `f_train` and `classes`.
#[derive(Debug, Clone)]
pub struct DiskProvider {
    pub dir: PathBuf,
    pub focal: f64,
    pub class_names: Vec<String>,
    pub depth_divisor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub f_train: Option<f64>,
    pub class_names: Option<Vec<String>>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(f) = self.f_train {
            s.push_str(&format!("f_train={f}\n"));
        }
        if let Some(c) = &self.class_names {
            s.push_str(&format!("classes={}\n", c.join(",")));
        }
        s
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(Manifest {
            f_train: None,
            class_names: None,
        });
    }
    let text = fs::read_to_string(&path)?;
    let kv = parse_key_values(&text, &path)?;
    let mut m = Manifest {
        f_train: None,
        class_names: None,
    };
    for (k, v) in kv {
        match k.as_str() {
            "f_train" => {
                m.f_train = Some(v.parse().map_err(|_| DatasetError::MalformedLine {
                    path: path.clone(),
                    line: 0,
                    reason: format!("bad f_train {v}"),
                })?)
            }
            "classes" => m.class_names = Some(v.split(',').map(|s| s.trim().to_string()).collect()),
            _ => {}
        }
    }
    Ok(m)
}

impl DiskProvider {
    /// Manifest `f_train` wins over `fallback_focal` (the camera file value).
    pub fn open(
        dir: &Path,
        fallback_focal: Option<f64>,
        depth_divisor: f64,
    ) -> Result<Self, PredictionError> {
        let m = read_manifest(dir).map_err(source_err)?;
        let focal = m.f_train.or(fallback_focal).ok_or_else(|| {
            PredictionError::Source(format!("{}: no f_train declared", dir.display()))
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            focal,
            class_names: m.class_names.unwrap_or_else(indoor_class_names),
            depth_divisor,
        })
    }
}

impl PredictionProvider for DiskProvider {
    fn provider_focal(&self) -> f64 {
        self.focal
    }

    fn fetch(&self, frame_id: &str) -> Result<Prediction, PredictionError> {
        let f32_path = self.dir.join(format!("{frame_id}.f32"));
        let png_path = self.dir.join(format!("{frame_id}.png"));
        let depth = if f32_path.exists() {
            to_working(load_f32_map(&f32_path).map_err(source_err)?)
        } else if png_path.exists() {
            load_depth_working(&png_path, self.depth_divisor).map_err(source_err)?
        } else {
            return Err(PredictionError::MissingPrediction(frame_id.to_string()));
        };
        let depth = PredictedDepthMap::new(depth, self.focal)?;
        let label_path = self.dir.join(format!("{frame_id}_labels.png"));
        let labels = if label_path.exists() {
            let l = to_working(load_labels_png(&label_path).map_err(source_err)?);
            Some(SemanticLabelMap::new(l, self.class_names.clone())?)
        } else {
            None
        };
        Ok(Prediction { depth, labels })
    }
}

/// Degraded ground-truth depth as a stand-in predictor. The per-frame seed is
/// `seed + frame index` so every key-frame gets independent noise.
#[derive(Debug, Clone)]
pub struct DegradedGtProvider {
    pub frames: BTreeMap<String, (usize, PathBuf)>,
    pub params: DegradeParams,
    pub focal: f64,
    pub depth_divisor: f64,
    /// Optional `<frame_id>_labels.png` directory.
    pub label_dir: Option<PathBuf>,
    pub class_names: Vec<String>,
}

impl DegradedGtProvider {
    pub fn degrade(
        &self,
        gt: &DepthMap,
        index: usize,
    ) -> Result<PredictedDepthMap, PredictionError> {
        let params = DegradeParams {
            seed: self.params.seed.wrapping_add(index as u64),
            ..self.params
        };
        synthesize_degraded(gt, &params, self.focal)
    }
}

impl PredictionProvider for DegradedGtProvider {
    fn provider_focal(&self) -> f64 {
        self.focal
    }

    fn fetch(&self, frame_id: &str) -> Result<Prediction, PredictionError> {
        let Some((index, path)) = self.frames.get(frame_id) else {
            return Err(PredictionError::MissingPrediction(frame_id.to_string()));
        };
        let gt = load_depth_working(path, self.depth_divisor).map_err(|e| match e {
            DatasetError::MissingFile(_) => {
                PredictionError::MissingPrediction(frame_id.to_string())
            }
            e => source_err(e),
        })?;
        let depth = self.degrade(&gt, *index)?;
        let labels = match &self.label_dir {
            Some(d) => {
                let p = d.join(format!("{frame_id}_labels.png"));
                if p.exists() {
                    let l = to_working(load_labels_png(&p).map_err(source_err)?);
                    Some(SemanticLabelMap::new(l, self.class_names.clone())?)
                } else {
                    None
                }
            }
            None => None,
        };
        Ok(Prediction { depth, labels })
    }
}
