//! Command implementations: run, evaluate, export and synthetic dataset generation.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use depthfuse_core::evaluation::{
    absolute_trajectory_error, percent_correct_depth, trajectory_length, Alignment, EvalError,
    MetricsReport, TrajectoryPair, ASSOCIATION_TOLERANCE,
};
use depthfuse_core::global_model::{to_ply, ColorMode, ModelError, PlyFormat};
use depthfuse_core::prediction::{indoor_class_names, DegradeParams, PredictionProvider};
use depthfuse_core::synthetic::{
    default_intrinsics, loop_trajectory, pan_trajectory, SyntheticScene,
};
use depthfuse_core::{CameraIntrinsics, RigidPose};

use crate::artifacts::{
    self, read_keyframe_depth, read_keyframe_index, read_model, read_run_trajectory, read_stats,
    write_run,
};
use crate::config::{ConfigError, PipelineConfig, PredictionSource};
use crate::dataset::{
    load_camera, load_depth_working, load_rgb, load_sequence, rgb_image, save_depth_png,
    save_f32_map, save_labels_png, save_rgb, to_intensity, write_trajectory, CameraConfig,
    DatasetError,
};
use crate::pipeline::{run_frames, EngineConfig, FrameInput, PipelineError, RunOutput};
use crate::provider::{DegradedGtProvider, DiskProvider, Manifest, MANIFEST};

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0:?}: {0}")]
    Eval(#[from] EvalError),
    #[error("{0:?}: {0}")]
    Model(#[from] ModelError),
    #[error("LabelsAbsent: the run carries no semantic labels; export with --mode rgb")]
    LabelsAbsent,
    #[error("{0}")]
    Prediction(String),
}

impl EngineConfig {
    pub fn from_pipeline(c: &PipelineConfig) -> Self {
        let mut refinement = c.refinement;
        refinement.photometric_sigma = c.tracking.photometric_sigma;
        Self {
            tracking: c.tracking,
            refinement,
            refinement_enabled: c.refinement_enabled,
            propagation: c.propagation,
            uncertainty_max: c.uncertainty_max,
            keyframe_translation_factor: c.keyframe_translation_factor,
            keyframe_max_rotation: c.keyframe_max_rotation_deg.to_radians(),
            fov_threshold: c.fov_threshold,
            model: c.model_config(),
            queue_capacity: c.queue_capacity,
            ..Self::default()
        }
    }
}

fn build_provider(
    config: &PipelineConfig,
    camera: &CameraConfig,
    k: &CameraIntrinsics,
    records: &[crate::dataset::FrameRecord],
) -> Result<Box<dyn PredictionProvider + Send>, AppError> {
    let dir = config.prediction_path();
    match config.prediction_source {
        PredictionSource::Disk => Ok(Box::new(
            DiskProvider::open(&dir, camera.f_train, config.depth_divisor)
                .map_err(|e| AppError::Prediction(format!("PredictionSource: {e}")))?,
        )),
        PredictionSource::DegradedGt => {
            let frames: BTreeMap<String, (usize, PathBuf)> = records
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.gt_depth_path.clone().map(|p| (r.frame_id(), (i, p))))
                .collect();
            let manifest = crate::provider::read_manifest(&dir).ok();
            Ok(Box::new(DegradedGtProvider {
                frames,
                params: DegradeParams {
                    seed: config.seed,
                    ..config.degrade
                },
                focal: camera.f_train.unwrap_or(k.fx),
                depth_divisor: config.depth_divisor,
                label_dir: dir.exists().then_some(dir),
                class_names: manifest
                    .and_then(|m| m.class_names)
                    .unwrap_or_else(indoor_class_names),
            }))
        }
    }
}

/// Runs the pipeline described by `config` and writes its artifacts. Partial
/// artifacts are written before a mid-run error is returned.
pub fn run(config: &PipelineConfig) -> Result<RunOutput, AppError> {
    let camera = load_camera(&config.camera_path())?;
    let k = camera.working_intrinsics();
    let mut records = load_sequence(&config.dataset_root, &config.associations)?;
    if config.max_frames > 0 {
        records.truncate(config.max_frames);
    }
    let provider = build_provider(config, &camera, &k, &records)?;
    let initial_pose = records
        .first()
        .and_then(|r| r.gt_pose)
        .map_or(RigidPose::identity(), |p| p.inverse());
    let load_error = RefCell::new(None);
    let frames = records.iter().map_while(|r| {
        let loaded = load_rgb(&r.rgb_path).and_then(|(bytes, w, h)| {
            let intensity = to_intensity(&bytes, w, h)?;
            let rgb = rgb_image(&bytes, w, h);
            let rgb = if (w, h) == (k.width, k.height) {
                rgb
            } else {
                rgb.resize_nearest(k.width, k.height)
            };
            Ok(FrameInput {
                timestamp: r.timestamp,
                frame_id: r.frame_id(),
                intensity,
                rgb: Some(rgb),
            })
        });
        match loaded {
            Ok(f) => Some(f),
            Err(e) => {
                *load_error.borrow_mut() = Some(e);
                None
            }
        }
    });
    let out = run_frames(
        frames,
        provider,
        k,
        &EngineConfig::from_pipeline(config),
        initial_pose,
    );
    write_run(&config.output_dir, &out, &config.to_text())?;
    if let Some(e) = load_error.into_inner() {
        return Err(e.into());
    }
    if let Some(e) = &out.error {
        return Err(e.clone().into());
    }
    Ok(out)
}

/// `(timestamp, ground-truth depth path)` from `associations.txt` (rgb
/// timestamp) or `depth.txt`.
pub fn gt_depth_index(gt: &Path) -> Result<Vec<(f64, PathBuf)>, DatasetError> {
    if gt.join("associations.txt").exists() {
        let recs = load_sequence(gt, Path::new("associations.txt"))?;
        return Ok(recs
            .into_iter()
            .filter_map(|r| r.gt_depth_path.map(|p| (r.timestamp, p)))
            .collect());
    }
    if gt.join("depth.txt").exists() {
        let recs = load_sequence(gt, Path::new("depth.txt"))?;
        return Ok(recs
            .into_iter()
            .map(|r| (r.timestamp, r.rgb_path))
            .collect());
    }
    Ok(Vec::new())
}

/// Compares a run directory against a ground-truth dataset directory and
/// writes `metrics.txt` into the run.
pub fn evaluate(
    run: &Path,
    gt: &Path,
    alignment: Alignment,
    depth_divisor: f64,
) -> Result<MetricsReport, AppError> {
    let est = read_run_trajectory(run)?;
    let index = read_keyframe_index(run)?;
    let stats = read_stats(run)?;
    let stat = |key: &str| stats.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());

    let gt_traj_path = gt.join("groundtruth.txt");
    let (ate, pairs, length) = if gt_traj_path.exists() {
        let gt_traj = crate::dataset::read_trajectory(&gt_traj_path)?;
        let pair = TrajectoryPair::from_stamped(&est, &gt_traj, ASSOCIATION_TOLERANCE);
        match absolute_trajectory_error(&pair, alignment) {
            Ok(a) => (
                Some(a),
                pair.len(),
                Some(trajectory_length(&pair.ground_truth)),
            ),
            Err(EvalError::InsufficientPairs) => (None, pair.len(), None),
            Err(e) => return Err(e.into()),
        }
    } else {
        (None, 0, None)
    };

    let gt_depths = gt_depth_index(gt)?;
    let mut est_maps = Vec::new();
    let mut gt_maps = Vec::new();
    for kf in &index {
        let nearest = gt_depths
            .iter()
            .filter(|(t, _)| (t - kf.timestamp).abs() <= ASSOCIATION_TOLERANCE)
            .min_by(|a, b| {
                (a.0 - kf.timestamp)
                    .abs()
                    .total_cmp(&(b.0 - kf.timestamp).abs())
            });
        if let Some((_, path)) = nearest {
            gt_maps.push(load_depth_working(path, depth_divisor)?);
            est_maps.push(read_keyframe_depth(run, kf.id)?);
        }
    }
    let depth = if gt_maps.is_empty() {
        None
    } else {
        match percent_correct_depth(&est_maps, &gt_maps) {
            Ok(r) => Some(r),
            Err(EvalError::NoGroundTruth) => None,
            Err(e) => return Err(e.into()),
        }
    };

    let report = MetricsReport {
        alignment,
        ate,
        associated_poses: pairs,
        trajectory_length: length,
        depth,
        keyframe_count: index.len(),
        frame_count: stat("frames")
            .and_then(|v| v.parse().ok())
            .unwrap_or(est.len()),
        mean_track_ms: stat("mean_track_ms").and_then(|v| v.parse().ok()),
    };
    fs::write(run.join(artifacts::METRICS), report.to_text()).map_err(DatasetError::from)?;
    Ok(report)
}

/// Writes `model_<mode>.ply` into the run directory.
pub fn export(run: &Path, mode: ColorMode, format: PlyFormat) -> Result<PathBuf, AppError> {
    let model = read_model(run)?;
    if mode == ColorMode::Label
        && model.elements.iter().all(|e| e.label().is_err())
        && !model.is_empty()
    {
        return Err(AppError::LabelsAbsent);
    }
    let bytes = to_ply(&model, format, mode)?;
    let name = match mode {
        ColorMode::Rgb => "model_rgb.ply",
        ColorMode::Label => "model_label.ply",
    };
    let path = run.join(name);
    fs::write(&path, bytes).map_err(DatasetError::from)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Closed horizontal loop of radius 0.3 m.
    Loop,
    /// Pure rotation, 45° total pan.
    Pan,
    /// Sideways translation of 1 cm per frame.
    Slide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub scenario: Scenario,
    pub frames: usize,
    /// Provider focal declared in the manifest; predictions are stored as
    /// `D · f_train / fx` so that scale adjustment recovers metric depth.
    pub f_train: f64,
    pub labels: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            scenario: Scenario::Loop,
            frames: 50,
            f_train: default_intrinsics().fx,
            labels: true,
        }
    }
}

/// World-to-camera poses of a scenario.
pub fn scenario_poses(scenario: Scenario, frames: usize) -> Vec<RigidPose> {
    match scenario {
        Scenario::Loop => loop_trajectory(frames, 0.3, 0.1),
        Scenario::Pan => pan_trajectory(frames, 45f64.to_radians()),
        Scenario::Slide => (0..frames)
            .map(|i| {
                depthfuse_core::synthetic::camera_pose(
                    nalgebra::Vector3::new(0.01 * i as f64, 0.0, 0.0),
                    0.0,
                    0.05,
                )
            })
            .collect(),
    }
}

pub fn frame_timestamp(i: usize) -> f64 {
    1.0 + i as f64 / 30.0
}

/// Renders a TUM-layout dataset with exact predictions into `dir`.
pub fn synthesize_dataset(dir: &Path, opts: &SynthOptions) -> Result<(), AppError> {
    let k = default_intrinsics();
    let scene = SyntheticScene::default();
    for sub in ["rgb", "depth", "predictions"] {
        fs::create_dir_all(dir.join(sub)).map_err(DatasetError::from)?;
    }
    let camera = CameraConfig {
        intrinsics: k,
        f_train: Some(opts.f_train),
    };
    fs::write(dir.join("camera.txt"), camera.to_text()).map_err(DatasetError::from)?;
    let manifest = Manifest {
        f_train: Some(opts.f_train),
        class_names: Some(indoor_class_names()),
    };
    fs::write(dir.join("predictions").join(MANIFEST), manifest.to_text())
        .map_err(DatasetError::from)?;
    let mut assoc = String::new();
    let mut gt = Vec::new();
    let ratio = opts.f_train / k.fx;
    for (i, pose) in scenario_poses(opts.scenario, opts.frames)
        .iter()
        .enumerate()
    {
        let ts = frame_timestamp(i);
        let id = format!("{ts:.6}");
        let view = scene.render(&k, pose);
        save_rgb(&dir.join(format!("rgb/{id}.png")), &view.rgb)?;
        save_depth_png(
            &dir.join(format!("depth/{id}.png")),
            &view.depth,
            crate::dataset::DEFAULT_DEPTH_DIVISOR,
        )?;
        save_f32_map(
            &dir.join(format!("predictions/{id}.f32")),
            &view.depth.map(|d| d * ratio),
        )?;
        if opts.labels {
            save_labels_png(
                &dir.join(format!("predictions/{id}_labels.png")),
                &view.labels,
            )?;
        }
        assoc.push_str(&format!("{id} rgb/{id}.png {id} depth/{id}.png\n"));
        gt.push((ts, pose.inverse()));
    }
    fs::write(dir.join("associations.txt"), assoc).map_err(DatasetError::from)?;
    write_trajectory(&dir.join("groundtruth.txt"), &gt)?;
    Ok(())
}
