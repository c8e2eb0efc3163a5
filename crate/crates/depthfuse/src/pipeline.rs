//! Two-lane pipeline. The frame lane (caller thread) tracks every frame and
//! refines the tracked key-frame; the key-frame lane (worker thread) creates
//! key-frames, maintains the pose graph and integrates the global model.
//!
//! Key-frame creation blocks the frame lane until the new key-frame and the
//! optimized poses are published, so results do not depend on scheduling.
//! Model integration of the previous key-frame runs afterwards, in parallel
//! with tracking, on a snapshot taken while the frame lane was blocked.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use depthfuse_core::global_model::{GlobalModel, ModelConfig};
use depthfuse_core::keyframe::{
    find_nearest_keyframe, fuse_new_keyframe, init_uncertainty, initial_uncertainty,
    should_create_keyframe, KeyFrameError, KeyframePolicy, PropagationParams,
};
use depthfuse_core::pose_graph::PoseGraph;
use depthfuse_core::prediction::{adjust_scale, PredictionError, PredictionProvider};
use depthfuse_core::refinement::{
    compute_observations, refine_keyframe, ObservationStats, RefinementConfig,
};
use depthfuse_core::tracking::{estimate_pose, TrackingConfig, TrackingError};
use depthfuse_core::{
    pose_graph, CameraIntrinsics, DepthMap, Image, IntensityImage, KeyFrame, RigidPose,
};

use crate::store::{KeyframeStore, Snapshot};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("{} at frame {frame}: {source}", prediction_name(.source))]
    Prediction {
        frame: usize,
        source: PredictionError,
    },
    #[error("TrackingLost at frame {frame}: {source}")]
    Tracking { frame: usize, source: TrackingError },
    #[error("KeyFrameError at frame {frame}: {source}")]
    KeyFrame { frame: usize, source: KeyFrameError },
    #[error("LaneFailure: {0}")]
    Lane(String),
}

fn prediction_name(e: &PredictionError) -> &'static str {
    match e {
        PredictionError::MissingPrediction(_) => "MissingPrediction",
        PredictionError::InvalidPrediction(_) => "InvalidPrediction",
        PredictionError::NonPositiveFocal { .. } => "NonPositiveFocal",
        PredictionError::Source(_) => "PredictionSource",
    }
}

impl PipelineError {
    pub fn frame(&self) -> Option<usize> {
        match self {
            PipelineError::Prediction { frame, .. }
            | PipelineError::Tracking { frame, .. }
            | PipelineError::KeyFrame { frame, .. } => Some(*frame),
            PipelineError::Lane(_) => None,
        }
    }
}

/// Tunables consumed by the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub tracking: TrackingConfig,
    pub refinement: RefinementConfig,
    pub refinement_enabled: bool,
    pub propagation: PropagationParams,
    pub uncertainty_max: f64,
    pub keyframe_translation_factor: f64,
    pub keyframe_max_rotation: f64,
    pub fov_threshold: f64,
    pub model: ModelConfig,
    pub queue_capacity: usize,
    /// Loop-closure measurements differing from the current estimate by more
    /// than this (m + 1 m/rad) are discarded.
    pub max_loop_correction: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            tracking: TrackingConfig::default(),
            refinement: RefinementConfig::default(),
            refinement_enabled: true,
            propagation: PropagationParams::default(),
            uncertainty_max: 4.0,
            keyframe_translation_factor: 0.15,
            keyframe_max_rotation: 10f64.to_radians(),
            fov_threshold: pose_graph::DEFAULT_FOV_THRESHOLD,
            model: ModelConfig::default(),
            queue_capacity: 4,
            max_loop_correction: 0.1,
        }
    }
}

/// One input frame at working resolution.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub timestamp: f64,
    pub frame_id: String,
    pub intensity: IntensityImage,
    pub rgb: Option<Image<[u8; 3]>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRecordOut {
    pub timestamp: f64,
    pub keyframe: usize,
    /// Key-frame-to-frame transform.
    pub relative: RigidPose,
    pub created_keyframe: bool,
    pub track_ms: f64,
    pub tracking_energy: f64,
    pub valid_ratio: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub frames: Vec<FrameRecordOut>,
    /// Final published key-frames, in id order.
    pub keyframes: Vec<Arc<KeyFrame>>,
    /// Depth of each key-frame right after creation (adjusted and fused prediction).
    pub initial_depths: Vec<DepthMap>,
    pub frame_ids: Vec<String>,
    pub model: GlobalModel,
    pub graph: PoseGraph,
    pub refinement: ObservationStats,
    pub log: Vec<String>,
    /// Set when the run stopped early; artifacts cover the frames before it.
    pub error: Option<PipelineError>,
}

impl RunOutput {
    /// Camera-to-world pose of every processed frame against the final key-frame poses.
    pub fn trajectory(&self) -> Vec<(f64, RigidPose)> {
        self.frames
            .iter()
            .filter_map(|f| {
                let kf = self.keyframes.iter().find(|k| k.id == f.keyframe)?;
                Some((f.timestamp, f.relative.compose(&kf.pose).inverse()))
            })
            .collect()
    }

    pub fn mean_track_ms(&self) -> Option<f64> {
        let tracked: Vec<f64> = self
            .frames
            .iter()
            .filter(|f| f.track_ms > 0.0)
            .map(|f| f.track_ms)
            .collect();
        (!tracked.is_empty()).then(|| tracked.iter().sum::<f64>() / tracked.len() as f64)
    }
}

struct CreateRequest {
    frame: usize,
    id: usize,
    frame_id: String,
    timestamp: f64,
    pose: RigidPose,
    intensity: IntensityImage,
    rgb: Option<Image<[u8; 3]>>,
    nearest: Option<usize>,
}

struct CreateReply {
    pose: RigidPose,
    initial_depth: DepthMap,
    log: Vec<String>,
}

struct LaneResult {
    model: GlobalModel,
    graph: PoseGraph,
    log: Vec<String>,
}

enum LaneMsg {
    Create(
        Box<CreateRequest>,
        SyncSender<Result<CreateReply, PipelineError>>,
    ),
    Finish(SyncSender<LaneResult>),
}

struct KeyframeLane {
    store: Arc<KeyframeStore>,
    provider: Box<dyn PredictionProvider + Send>,
    k: CameraIntrinsics,
    cfg: EngineConfig,
    graph: PoseGraph,
    model: GlobalModel,
    rgb: Vec<Option<Image<[u8; 3]>>>,
    last_id: Option<usize>,
    log: Vec<String>,
}

impl KeyframeLane {
    fn run(mut self, rx: Receiver<LaneMsg>) {
        while let Ok(msg) = rx.recv() {
            match msg {
                LaneMsg::Create(req, reply) => {
                    let previous = self.last_id.and_then(|id| self.store.get(id));
                    let rgb = req.rgb.clone();
                    let result = self.create(*req);
                    let ok = result.is_ok();
                    let _ = reply.send(result);
                    if ok {
                        self.rgb.push(rgb);
                        if let Some(prev) = previous {
                            self.integrate(&prev);
                        }
                    }
                }
                LaneMsg::Finish(reply) => {
                    if let Some(last) = self.last_id.and_then(|id| self.store.get(id)) {
                        self.integrate(&last);
                    }
                    let _ = reply.send(LaneResult {
                        model: self.model,
                        graph: self.graph,
                        log: self.log,
                    });
                    return;
                }
            }
        }
    }

    fn integrate(&mut self, kf: &KeyFrame) {
        let rgb = self.rgb.get(kf.id).and_then(|c| c.as_ref());
        match self.model.integrate_keyframe(kf, &self.k, rgb) {
            Ok(s) => self.log.push(format!(
                "model: integrated key-frame {} (generation {}): {} associated, {} inserted, {} elements",
                kf.id,
                kf.generation,
                s.associated,
                s.inserted,
                self.model.len()
            )),
            Err(e) => self.log.push(format!("model: key-frame {} skipped: {e}", kf.id)),
        }
    }

    fn create(&mut self, req: CreateRequest) -> Result<CreateReply, PipelineError> {
        let frame = req.frame;
        let pred_err = |source| PipelineError::Prediction { frame, source };
        let prediction = self.provider.fetch(&req.frame_id).map_err(pred_err)?;
        let depth = adjust_scale(&prediction.depth, self.k.fx).map_err(pred_err)?;
        let u_max = self.cfg.uncertainty_max;
        let neighbor = req.nearest.and_then(|id| self.store.get(id));
        let (depth, uncertainty) = match &neighbor {
            Some(n) => {
                let to_neighbor = n.pose.compose(&req.pose.inverse());
                let u =
                    init_uncertainty(&depth, n, &to_neighbor, &self.k, u_max).map(|v| v.min(u_max));
                fuse_new_keyframe(&depth, &u, n, &to_neighbor, &self.k, &self.cfg.propagation)
            }
            None => {
                let u = initial_uncertainty(depth.width(), depth.height(), u_max);
                (depth, u)
            }
        };
        let initial_depth = depth.clone();
        let kf = KeyFrame::new(
            req.id,
            req.timestamp,
            req.pose,
            req.intensity,
            depth,
            uncertainty,
            prediction.labels,
        )
        .map_err(|source| PipelineError::KeyFrame { frame, source })?;

        let mut log = Vec::new();
        let snapshot = self.store.snapshot();
        let edges = self.add_edges(&kf, &snapshot, &mut log);
        log.push(format!(
            "graph: key-frame {} added with edges to {:?}",
            kf.id, edges
        ));
        let poses: Vec<(usize, RigidPose)> = match self.graph.optimize() {
            Ok(r) => {
                log.push(format!(
                    "graph: chi2 {:.6e} -> {:.6e} in {} iterations",
                    r.initial_chi2, r.final_chi2, r.iterations
                ));
                self.graph
                    .nodes()
                    .map(|(id, p)| (id, p.inverse()))
                    .collect()
            }
            Err(e) => {
                log.push(format!("graph: optimization skipped: {e}"));
                Vec::new()
            }
        };
        let mut kf = kf;
        if let Some((_, p)) = poses.iter().find(|(id, _)| *id == kf.id) {
            kf.pose = *p;
        }
        let pose = kf.pose;
        self.store.publish(&poses, Some(kf));
        self.last_id = Some(req.id);
        Ok(CreateReply {
            pose,
            initial_depth,
            log,
        })
    }

    /// Sequential edge plus proximity edges, measured by aligning the new
    /// key-frame image against each existing key-frame.
    fn add_edges(
        &mut self,
        kf: &KeyFrame,
        snapshot: &Snapshot,
        log: &mut Vec<String>,
    ) -> Vec<usize> {
        let node = kf.pose.inverse();
        let k = self.k;
        let tracking = self.cfg.tracking;
        let max_corr = self.cfg.max_loop_correction;
        let previous = self.last_id;
        let edges = self.graph.add_keyframe_edges_with(kf.id, node, previous, self.cfg.fov_threshold, |target, estimate| {
            let other = snapshot.iter().find(|o| o.id == target)?;
            let init = estimate.inverse();
            let r = estimate_pose(other, &k, &kf.intensity, &init, &tracking).ok()?;
            let z = r.relative_pose.inverse();
            let correction = pose_graph_distance(&z, estimate);
            if correction > max_corr {
                log.push(format!("graph: edge {target}->{} measurement rejected (correction {correction:.4})", kf.id));
                return None;
            }
            Some(z)
        });
        edges.iter().map(|e| e.i).collect()
    }
}

fn pose_graph_distance(a: &RigidPose, b: &RigidPose) -> f64 {
    let d = a.inverse().compose(b);
    d.translation().norm() + d.rotation_angle()
}

/// Runs the pipeline over `frames`. The first frame becomes key-frame 0 at
/// `initial_pose` (world-to-camera).
pub fn run_frames<I>(
    frames: I,
    provider: Box<dyn PredictionProvider + Send>,
    k: CameraIntrinsics,
    cfg: &EngineConfig,
    initial_pose: RigidPose,
) -> RunOutput
where
    I: IntoIterator<Item = FrameInput>,
{
    let store = Arc::new(KeyframeStore::new());
    let (tx, rx) = sync_channel::<LaneMsg>(cfg.queue_capacity.max(1));
    let lane = KeyframeLane {
        store: store.clone(),
        provider,
        k,
        cfg: cfg.clone(),
        graph: PoseGraph::new(),
        model: GlobalModel::new(cfg.model),
        rgb: Vec::new(),
        last_id: None,
        log: Vec::new(),
    };
    let worker = thread::Builder::new()
        .name("keyframe-lane".into())
        .spawn(move || lane.run(rx))
        .expect("spawn key-frame lane");

    let mut out = RunOutput::default();
    let mut last_pose = initial_pose;
    for (index, frame) in frames.into_iter().enumerate() {
        match process_frame(index, frame, &store, &tx, &k, cfg, &mut last_pose, &mut out) {
            Ok(()) => {}
            Err(e) => {
                out.log.push(format!("frame {index}: aborted: {e}"));
                out.error = Some(e);
                break;
            }
        }
    }

    let (rtx, rrx) = sync_channel(1);
    let lane_result = tx
        .send(LaneMsg::Finish(rtx))
        .ok()
        .and_then(|_| rrx.recv().ok());
    drop(tx);
    let _ = worker.join();
    match lane_result {
        Some(r) => {
            out.model = r.model;
            out.graph = r.graph;
            out.log.push(String::from("key-frame lane:"));
            out.log.extend(r.log);
        }
        None => {
            if out.error.is_none() {
                out.error = Some(PipelineError::Lane("key-frame lane terminated".into()));
            }
        }
    }
    out.keyframes = store.snapshot().as_ref().clone();
    out
}

#[allow(clippy::too_many_arguments)]
fn process_frame(
    index: usize,
    frame: FrameInput,
    store: &Arc<KeyframeStore>,
    tx: &SyncSender<LaneMsg>,
    k: &CameraIntrinsics,
    cfg: &EngineConfig,
    last_pose: &mut RigidPose,
    out: &mut RunOutput,
) -> Result<(), PipelineError> {
    let snapshot = store.snapshot();
    let create =
        |nearest: Option<usize>, pose: RigidPose, frame: FrameInput, out: &mut RunOutput| {
            let id = out.initial_depths.len();
            let (rtx, rrx) = sync_channel(1);
            let req = CreateRequest {
                frame: index,
                id,
                frame_id: frame.frame_id.clone(),
                timestamp: frame.timestamp,
                pose,
                intensity: frame.intensity,
                rgb: frame.rgb,
                nearest,
            };
            tx.send(LaneMsg::Create(Box::new(req), rtx))
                .map_err(|_| PipelineError::Lane("key-frame lane closed".into()))?;
            let reply = rrx
                .recv()
                .map_err(|_| PipelineError::Lane("key-frame lane closed".into()))??;
            out.initial_depths.push(reply.initial_depth);
            out.frame_ids.push(frame.frame_id);
            for l in reply.log {
                out.log.push(format!("frame {index}: {l}"));
            }
            Ok::<(usize, RigidPose), PipelineError>((id, reply.pose))
        };

    if snapshot.is_empty() {
        let ts = frame.timestamp;
        let (id, pose) = create(None, *last_pose, frame, out)?;
        *last_pose = pose;
        out.frames.push(FrameRecordOut {
            timestamp: ts,
            keyframe: id,
            relative: RigidPose::identity(),
            created_keyframe: true,
            track_ms: 0.0,
            tracking_energy: 0.0,
            valid_ratio: 1.0,
        });
        out.log
            .push(format!("frame {index}: key-frame {id} created"));
        return Ok(());
    }

    let nearest_id = find_nearest_keyframe(last_pose, snapshot.iter().map(|k| (k.id, &k.pose)))
        .expect("non-empty store");
    let kf = snapshot
        .iter()
        .find(|k| k.id == nearest_id)
        .expect("nearest exists")
        .clone();
    let init = last_pose.compose(&kf.pose.inverse());
    let start = Instant::now();
    let result =
        estimate_pose(&kf, k, &frame.intensity, &init, &cfg.tracking).map_err(|source| {
            PipelineError::Tracking {
                frame: index,
                source,
            }
        })?;
    let track_ms = start.elapsed().as_secs_f64() * 1e3;
    let world = result.world_pose;
    let policy = KeyframePolicy::relative_to(
        &kf,
        cfg.keyframe_translation_factor,
        cfg.keyframe_max_rotation,
    );
    let ts = frame.timestamp;

    if should_create_keyframe(&world, &kf.pose, &policy) {
        let (id, pose) = create(Some(nearest_id), world, frame, out)?;
        *last_pose = pose;
        out.frames.push(FrameRecordOut {
            timestamp: ts,
            keyframe: id,
            relative: RigidPose::identity(),
            created_keyframe: true,
            track_ms,
            tracking_energy: result.final_energy,
            valid_ratio: result.valid_pixel_ratio,
        });
        out.log.push(format!(
            "frame {index}: tracked on key-frame {nearest_id} (energy {:.6}, valid {:.3}); key-frame {id} created",
            result.final_energy, result.valid_pixel_ratio
        ));
        return Ok(());
    }

    let mut line = format!(
        "frame {index}: tracked on key-frame {nearest_id} (energy {:.6}, valid {:.3})",
        result.final_energy, result.valid_pixel_ratio
    );
    if cfg.refinement_enabled {
        let (obs, stats) = compute_observations(
            &kf,
            &frame.intensity,
            &result.relative_pose,
            k,
            &cfg.refinement,
        );
        store.replace(refine_keyframe(&kf, &obs));
        out.refinement.observed += stats.observed;
        out.refinement.degenerate += stats.degenerate;
        out.refinement.ambiguous += stats.ambiguous;
        out.refinement.out_of_bounds += stats.out_of_bounds;
        out.refinement.poor_match += stats.poor_match;
        out.refinement.inconsistent += stats.inconsistent;
        line.push_str(&format!(
            "; refinement: {} observed, {} degenerate, {} ambiguous, {} out of range, {} poor match, {} inconsistent",
            stats.observed, stats.degenerate, stats.ambiguous, stats.out_of_bounds, stats.poor_match, stats.inconsistent
        ));
    }
    out.log.push(line);
    // Graph updates may have moved the key-frame since the snapshot.
    let current = store.get(nearest_id).map_or(kf.pose, |k| k.pose);
    *last_pose = result.relative_pose.compose(&current);
    out.frames.push(FrameRecordOut {
        timestamp: ts,
        keyframe: nearest_id,
        relative: result.relative_pose,
        created_keyframe: false,
        track_ms,
        tracking_energy: result.final_energy,
        valid_ratio: result.valid_pixel_ratio,
    });
    Ok(())
}
