//! Run directory layout and binary model dump.
//!
//! ```text
//! <run>/trajectory.txt             camera-to-world, TUM format
//! <run>/keyframes.txt              id timestamp frame_id generation + pose
//! <run>/keyframes/<id>_depth.png   16-bit, divisor 5000
//! <run>/keyframes/<id>_depth.f32   final depth (lossless)
//! <run>/keyframes/<id>_uncertainty.f32
//! <run>/keyframes/<id>_initial_depth.f32   depth at creation
//! <run>/keyframes/<id>_labels.png  when semantic maps were provided
//! <run>/model.bin, graph.g2o, stats.txt, run.log, config.txt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use depthfuse_core::global_model::{GlobalModel, ModelConfig, ModelElement};
use depthfuse_core::{DepthMap, RigidPose};
use nalgebra::Vector3;

use crate::dataset::{
    parse_key_values, read_trajectory, save_depth_png, save_f32_map, save_labels_png,
    trajectory_line, write_trajectory, DatasetError, DEFAULT_DEPTH_DIVISOR,
};
use crate::pipeline::RunOutput;

pub const TRAJECTORY: &str = "trajectory.txt";
pub const KEYFRAME_INDEX: &str = "keyframes.txt";
pub const KEYFRAME_DIR: &str = "keyframes";
pub const MODEL: &str = "model.bin";
pub const GRAPH: &str = "graph.g2o";
pub const STATS: &str = "stats.txt";
pub const LOG: &str = "run.log";
pub const METRICS: &str = "metrics.txt";

const MODEL_MAGIC: &[u8; 8] = b"DFMODEL1";

pub fn keyframe_file(run: &Path, id: usize, suffix: &str) -> PathBuf {
    run.join(KEYFRAME_DIR).join(format!("{id:06}_{suffix}"))
}

/// Writes every artifact of a (possibly partial) run.
pub fn write_run(dir: &Path, out: &RunOutput, config_text: &str) -> Result<(), DatasetError> {
    fs::create_dir_all(dir.join(KEYFRAME_DIR))?;
    fs::write(dir.join("config.txt"), config_text)?;
    write_trajectory(&dir.join(TRAJECTORY), &out.trajectory())?;

    let mut index =
        String::from("# id timestamp frame_id generation tx ty tz qx qy qz qw (camera-to-world)\n");
    for kf in &out.keyframes {
        let frame_id = out.frame_ids.get(kf.id).map(String::as_str).unwrap_or("-");
        let pose = trajectory_line(kf.timestamp, &kf.pose.inverse());
        let pose = pose.split_once(' ').map_or("", |(_, rest)| rest);
        index.push_str(&format!(
            "{} {:.6} {} {} {}\n",
            kf.id, kf.timestamp, frame_id, kf.generation, pose
        ));
        save_depth_png(
            &keyframe_file(dir, kf.id, "depth.png"),
            &kf.depth,
            DEFAULT_DEPTH_DIVISOR,
        )?;
        save_f32_map(&keyframe_file(dir, kf.id, "depth.f32"), &kf.depth)?;
        save_f32_map(
            &keyframe_file(dir, kf.id, "uncertainty.f32"),
            &kf.uncertainty,
        )?;
        if let Some(d) = out.initial_depths.get(kf.id) {
            save_f32_map(&keyframe_file(dir, kf.id, "initial_depth.f32"), d)?;
        }
        if let Some(l) = &kf.labels {
            save_labels_png(&keyframe_file(dir, kf.id, "labels.png"), l.labels())?;
        }
    }
    fs::write(dir.join(KEYFRAME_INDEX), index)?;
    fs::write(dir.join(MODEL), encode_model(&out.model))?;
    fs::write(dir.join(GRAPH), out.graph.to_g2o())?;

    let stats = format!(
        "frames = {}\nkeyframes = {}\nmean_track_ms = {}\nrefinement_observed = {}\nrefinement_degenerate = {}\n\
         refinement_ambiguous = {}\nrefinement_out_of_range = {}\nrefinement_poor_match = {}\nrefinement_inconsistent = {}\nmodel_elements = {}\nstatus = {}\n",
        out.frames.len(),
        out.keyframes.len(),
        out.mean_track_ms().map_or("unavailable".to_string(), |v| format!("{v:.3}")),
        out.refinement.observed,
        out.refinement.degenerate,
        out.refinement.ambiguous,
        out.refinement.out_of_bounds,
        out.refinement.poor_match,
        out.refinement.inconsistent,
        out.model.len(),
        out.error.as_ref().map_or("ok".to_string(), |e| e.to_string()),
    );
    fs::write(dir.join(STATS), stats)?;
    let mut log = out.log.join("\n");
    log.push('\n');
    fs::write(dir.join(LOG), log)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeEntry {
    pub id: usize,
    pub timestamp: f64,
    pub frame_id: String,
    pub generation: u64,
    /// Camera-to-world.
    pub pose: RigidPose,
}

fn required(path: PathBuf) -> Result<PathBuf, DatasetError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(DatasetError::MissingFile(path))
    }
}

pub fn read_keyframe_index(run: &Path) -> Result<Vec<KeyframeEntry>, DatasetError> {
    let path = required(run.join(KEYFRAME_INDEX))?;
    let text = fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: &str| DatasetError::MalformedLine {
            path: path.clone(),
            line: n + 1,
            reason: reason.to_string(),
        };
        if t.len() != 11 {
            return Err(bad("expected 11 tokens"));
        }
        let f = |i: usize| t[i].parse::<f64>().map_err(|_| bad("not a number"));
        out.push(KeyframeEntry {
            id: t[0].parse().map_err(|_| bad("bad id"))?,
            timestamp: f(1)?,
            frame_id: t[2].to_string(),
            generation: t[3].parse().map_err(|_| bad("bad generation"))?,
            pose: RigidPose::from_quaternion(
                [f(7)?, f(8)?, f(9)?, f(10)?],
                Vector3::new(f(4)?, f(5)?, f(6)?),
            ),
        });
    }
    Ok(out)
}

pub fn read_run_trajectory(run: &Path) -> Result<Vec<(f64, RigidPose)>, DatasetError> {
    read_trajectory(&required(run.join(TRAJECTORY))?)
}

pub fn read_keyframe_depth(run: &Path, id: usize) -> Result<DepthMap, DatasetError> {
    crate::dataset::load_f32_map(&required(keyframe_file(run, id, "depth.f32"))?)
}

pub fn read_stats(run: &Path) -> Result<Vec<(String, String)>, DatasetError> {
    let path = required(run.join(STATS))?;
    parse_key_values(&fs::read_to_string(&path)?, &path)
}

pub fn encode_model(model: &GlobalModel) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MODEL_MAGIC);
    b.extend_from_slice(&(model.class_names.len() as u32).to_le_bytes());
    for name in &model.class_names {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
    }
    b.extend_from_slice(&(model.elements.len() as u64).to_le_bytes());
    for e in &model.elements {
        let vals = [
            e.position.x,
            e.position.y,
            e.position.z,
            e.normal.x,
            e.normal.y,
            e.normal.z,
            e.color[0],
            e.color[1],
            e.color[2],
            e.radius,
            e.confidence_weight,
        ];
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(e.label_histogram.len() as u32).to_le_bytes());
        for v in &e.label_histogram {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_model(bytes: &[u8]) -> Option<GlobalModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return None;
    }
    let mut model = GlobalModel::new(ModelConfig::default());
    for _ in 0..r.u32()? {
        let n = r.u32()? as usize;
        model
            .class_names
            .push(String::from_utf8(r.take(n)?.to_vec()).ok()?);
    }
    let count = r.u64()? as usize;
    for _ in 0..count {
        let mut v = [0.0; 11];
        for x in &mut v {
            *x = r.f64()?;
        }
        let hn = r.u32()? as usize;
        let hist = (0..hn).map(|_| r.f64()).collect::<Option<Vec<f64>>>()?;
        model.elements.push(ModelElement {
            position: Vector3::new(v[0], v[1], v[2]),
            normal: Vector3::new(v[3], v[4], v[5]),
            color: [v[6], v[7], v[8]],
            radius: v[9],
            confidence_weight: v[10],
            label_histogram: hist,
        });
    }
    (r.pos == bytes.len()).then_some(model)
}

pub fn read_model(run: &Path) -> Result<GlobalModel, DatasetError> {
    let path = required(run.join(MODEL))?;
    decode_model(&fs::read(&path)?).ok_or_else(|| {
        DatasetError::UnsupportedFormat(format!("{}: corrupt model dump", path.display()))
    })
}
