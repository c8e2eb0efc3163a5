//! Key-frame pose graph with relative-pose edges, optimized by damped
//! Gauss-Newton on SE(3).
//!
//! Node poses are camera-to-world (`T_i`); an edge `(i, j, Z_ij)` measures
//! `T_i⁻¹ · T_j` and contributes `‖log(Z_ij⁻¹ · T_i⁻¹ · T_j)‖²_Ω` to chi².

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use nalgebra::{DMatrix, DVector, Matrix6, Vector3};

use crate::geometry::{pose_distance, RigidPose, Twist};
use crate::keyframe::METERS_PER_RADIAN;

pub const DEFAULT_FOV_THRESHOLD: f64 = 0.3;
pub const EDGE_SIGMA: f64 = 0.01;
pub const MAX_ITERATIONS: usize = 50;
pub const RELATIVE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum PoseGraphError {
    #[error("pose graph is not connected to the anchor node")]
    NotConnected,
    #[error("normal equations are singular")]
    SingularSystem,
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("information matrix is not symmetric positive definite")]
    InvalidInformation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    /// Measured `T_i⁻¹ · T_j`.
    pub measurement: RigidPose,
    pub information: Matrix6<f64>,
}

impl GraphEdge {
    pub fn new(
        i: usize,
        j: usize,
        measurement: RigidPose,
        information: Matrix6<f64>,
    ) -> Result<Self, PoseGraphError> {
        let sym =
            (information - information.transpose()).amax() <= 1e-12 * information.amax().max(1.0);
        if !sym || information.cholesky().is_none() {
            return Err(PoseGraphError::InvalidInformation);
        }
        Ok(Self {
            i,
            j,
            measurement,
            information,
        })
    }

    /// Uniform weighting with `σ_edge` on every axis.
    pub fn with_default_information(i: usize, j: usize, measurement: RigidPose) -> Self {
        Self {
            i,
            j,
            measurement,
            information: default_information(),
        }
    }

    pub fn residual(&self, ti: &RigidPose, tj: &RigidPose) -> Twist {
        edge_residual(&self.measurement, ti, tj)
    }
}

pub fn default_information() -> Matrix6<f64> {
    Matrix6::identity() * (1.0 / (EDGE_SIGMA * EDGE_SIGMA))
}

pub fn edge_residual(z: &RigidPose, ti: &RigidPose, tj: &RigidPose) -> Twist {
    z.inverse().compose(&ti.inverse()).compose(tj).log()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    nodes: BTreeMap<usize, RigidPose>,
    edges: Vec<GraphEdge>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizationReport {
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a camera-to-world node pose.
    pub fn add_node(&mut self, id: usize, pose: RigidPose) {
        self.nodes.insert(id, pose);
    }

    pub fn add_edge(&mut self, edge: GraphEdge) -> Result<(), PoseGraphError> {
        for n in [edge.i, edge.j] {
            if !self.nodes.contains_key(&n) {
                return Err(PoseGraphError::UnknownNode(n));
            }
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn node(&self, id: usize) -> Option<&RigidPose> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (usize, &RigidPose)> {
        self.nodes.iter().map(|(k, v)| (*k, v))
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Gauge anchor: the lowest node id.
    pub fn anchor(&self) -> Option<usize> {
        self.nodes.keys().next().copied()
    }

    pub fn is_connected(&self) -> bool {
        let Some(anchor) = self.anchor() else {
            return true;
        };
        let mut adjacency: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for e in &self.edges {
            adjacency.entry(e.i).or_default().push(e.j);
            adjacency.entry(e.j).or_default().push(e.i);
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([anchor]);
        seen.insert(anchor);
        while let Some(n) = queue.pop_front() {
            for m in adjacency.get(&n).into_iter().flatten() {
                if seen.insert(*m) {
                    queue.push_back(*m);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    pub fn chi2(&self) -> f64 {
        chi2_of(&self.edges, &self.nodes)
    }

    /// Candidate edge targets for a new node: the previous key-frame always,
    /// plus every node within `fov_threshold` in the translation + 1 m/rad metric.
    pub fn edge_candidates(
        &self,
        new_id: usize,
        new_pose: &RigidPose,
        previous: Option<usize>,
        fov_threshold: f64,
    ) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(p) = previous.filter(|p| *p != new_id && self.nodes.contains_key(p)) {
            out.push(p);
        }
        let w2c = new_pose.inverse();
        for (id, pose) in &self.nodes {
            if *id == new_id || Some(*id) == previous {
                continue;
            }
            if pose_distance(&w2c, &pose.inverse(), METERS_PER_RADIAN) < fov_threshold {
                out.push(*id);
            }
        }
        out
    }

    /// Adds `new_id` with its tracked pose and connects it to the candidates.
    /// `measure(target, current_estimate)` may refine each measurement of
    /// `T_target⁻¹ · T_new`; returning `None` drops a non-sequential edge and
    /// keeps the current estimate for the sequential one.
    pub fn add_keyframe_edges_with<F>(
        &mut self,
        new_id: usize,
        new_pose: RigidPose,
        previous: Option<usize>,
        fov_threshold: f64,
        mut measure: F,
    ) -> Vec<GraphEdge>
    where
        F: FnMut(usize, &RigidPose) -> Option<RigidPose>,
    {
        let targets = self.edge_candidates(new_id, &new_pose, previous, fov_threshold);
        self.add_node(new_id, new_pose);
        let mut added = Vec::new();
        for t in targets {
            let estimate = self.nodes[&t].inverse().compose(&new_pose);
            let z = match measure(t, &estimate) {
                Some(z) => z,
                None if Some(t) == previous => estimate,
                None => continue,
            };
            let edge = GraphEdge::with_default_information(t, new_id, z);
            self.edges.push(edge.clone());
            added.push(edge);
        }
        added
    }

    /// Edges measured from the current pose estimates.
    pub fn add_keyframe_edges(
        &mut self,
        new_id: usize,
        new_pose: RigidPose,
        previous: Option<usize>,
        fov_threshold: f64,
    ) -> Vec<GraphEdge> {
        self.add_keyframe_edges_with(new_id, new_pose, previous, fov_threshold, |_, e| Some(*e))
    }

    /// Levenberg-damped Gauss-Newton over all nodes except the anchor. On error
    /// the poses are left unchanged.
    pub fn optimize(&mut self) -> Result<OptimizationReport, PoseGraphError> {
        let initial = self.chi2();
        let mut report = OptimizationReport {
            initial_chi2: initial,
            final_chi2: initial,
            iterations: 0,
            converged: true,
        };
        if self.nodes.len() < 2 {
            return Ok(report);
        }
        if !self.is_connected() {
            return Err(PoseGraphError::NotConnected);
        }
        let anchor = self.anchor().expect("non-empty graph");
        let free: Vec<usize> = self
            .nodes
            .keys()
            .copied()
            .filter(|k| *k != anchor)
            .collect();
        let index: BTreeMap<usize, usize> = free.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let n = 6 * free.len();

        let mut nodes = self.nodes.clone();
        let mut chi2 = initial;
        let mut lambda = 1e-6;
        report.converged = false;
        for iter in 0..MAX_ITERATIONS {
            report.iterations = iter + 1;
            if chi2 == 0.0 {
                report.converged = true;
                break;
            }
            let (h, b) = self.normal_equations(&nodes, &index, n);
            let mut accepted = false;
            for _ in 0..10 {
                let mut damped = h.clone();
                for d in 0..n {
                    damped[(d, d)] += lambda * h[(d, d)].max(1e-9);
                }
                let Some(chol) = damped.cholesky() else {
                    return Err(PoseGraphError::SingularSystem);
                };
                let delta = chol.solve(&(-&b));
                let candidate = apply_update(&nodes, &index, &delta);
                let new_chi2 = chi2_of(&self.edges, &candidate);
                if new_chi2.is_finite() && new_chi2 <= chi2 {
                    let rel = (chi2 - new_chi2) / chi2.max(f64::MIN_POSITIVE);
                    nodes = candidate;
                    chi2 = new_chi2;
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    if rel < RELATIVE_TOLERANCE {
                        report.converged = true;
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted || report.converged {
                report.converged = true;
                break;
            }
        }
        self.nodes = nodes;
        report.final_chi2 = chi2;
        Ok(report)
    }

    fn normal_equations(
        &self,
        nodes: &BTreeMap<usize, RigidPose>,
        index: &BTreeMap<usize, usize>,
        n: usize,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for e in &self.edges {
            let ti = nodes[&e.i];
            let tj = nodes[&e.j];
            let r = e.residual(&ti, &tj);
            let ji = numeric_jacobian(|d| e.residual(&ti.compose(&RigidPose::exp(d)), &tj));
            let jj = numeric_jacobian(|d| e.residual(&ti, &tj.compose(&RigidPose::exp(d))));
            let blocks = [(index.get(&e.i), ji), (index.get(&e.j), jj)];
            for (ia, ja) in &blocks {
                let Some(ia) = ia else { continue };
                let jt_omega = ja.transpose() * e.information;
                let g = jt_omega * r;
                for a in 0..6 {
                    b[6 * *ia + a] += g[a];
                }
                for (ib, jb) in &blocks {
                    let Some(ib) = ib else { continue };
                    let blk = jt_omega * jb;
                    for a in 0..6 {
                        for c in 0..6 {
                            h[(6 * *ia + a, 6 * *ib + c)] += blk[(a, c)];
                        }
                    }
                }
            }
        }
        (h, b)
    }

    /// Text dump in the `VERTEX_SE3:QUAT` / `EDGE_SE3:QUAT` format.
    pub fn to_g2o(&self) -> String {
        let mut s = String::new();
        for (id, p) in &self.nodes {
            let t = p.translation();
            let q = p.quaternion();
            let _ = writeln!(
                s,
                "VERTEX_SE3:QUAT {id} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                t.x, t.y, t.z, q[0], q[1], q[2], q[3]
            );
        }
        if let Some(a) = self.anchor() {
            let _ = writeln!(s, "FIX {a}");
        }
        for e in &self.edges {
            let t = e.measurement.translation();
            let q = e.measurement.quaternion();
            let _ = write!(
                s,
                "EDGE_SE3:QUAT {} {} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                e.i, e.j, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
            );
            // g2o orders the information as (translation, rotation), matching ours.
            for r in 0..6 {
                for c in r..6 {
                    let _ = write!(s, " {:.6}", e.information[(r, c)]);
                }
            }
            s.push('\n');
        }
        s
    }
}

fn chi2_of(edges: &[GraphEdge], nodes: &BTreeMap<usize, RigidPose>) -> f64 {
    edges
        .iter()
        .map(|e| {
            let r = e.residual(&nodes[&e.i], &nodes[&e.j]);
            (r.transpose() * e.information * r)[0]
        })
        .sum()
}

fn numeric_jacobian(f: impl Fn(&Twist) -> Twist) -> Matrix6<f64> {
    const H: f64 = 1e-6;
    let mut j = Matrix6::zeros();
    for c in 0..6 {
        let mut d = Twist::zeros();
        d[c] = H;
        let plus = f(&d);
        d[c] = -H;
        let minus = f(&d);
        j.set_column(c, &((plus - minus) / (2.0 * H)));
    }
    j
}

fn apply_update(
    nodes: &BTreeMap<usize, RigidPose>,
    index: &BTreeMap<usize, usize>,
    delta: &DVector<f64>,
) -> BTreeMap<usize, RigidPose> {
    let mut out = nodes.clone();
    for (id, i) in index {
        let d = Twist::from_iterator(delta.rows(6 * i, 6).iter().copied());
        let p = out.get_mut(id).expect("indexed node");
        *p = p.compose(&RigidPose::exp(&d)).orthonormalized();
    }
    out
}

/// Camera-to-world pose of a node from a world-to-camera key-frame pose.
pub fn node_pose_from_keyframe(world_to_camera: &RigidPose) -> RigidPose {
    world_to_camera.inverse()
}

/// Convenience for building square-loop test graphs.
pub fn planar_pose(x: f64, y: f64, yaw: f64) -> RigidPose {
    RigidPose::from_scaled_axis(Vector3::new(0.0, 0.0, yaw), Vector3::new(x, y, 0.0))
}
