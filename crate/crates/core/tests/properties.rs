use depthfuse_core::evaluation::{
    absolute_trajectory_error, depth_accuracy, Alignment, TrajectoryPair,
};
use depthfuse_core::global_model::{GlobalModel, ModelConfig};
use depthfuse_core::keyframe::{fuse_estimates, KeyFrame};
use depthfuse_core::pose_graph::{GraphEdge, PoseGraph};
use depthfuse_core::prediction::{adjust_scale, PredictedDepthMap};
use depthfuse_core::refinement::{refine_keyframe, ObservationMaps};
use depthfuse_core::{CameraIntrinsics, Image, RigidPose};
use nalgebra::{Vector3, Vector6};
use proptest::prelude::*;

fn pose_strategy(max_angle: f64, max_t: f64) -> impl Strategy<Value = RigidPose> {
    (
        prop::array::uniform3(-1.0..1.0f64),
        0.0..max_angle,
        prop::array::uniform3(-max_t..max_t),
    )
        .prop_map(|(axis, angle, t)| {
            let a = Vector3::from(axis);
            let a = if a.norm() < 1e-3 {
                Vector3::z()
            } else {
                a.normalize()
            };
            RigidPose::from_scaled_axis(a * angle, Vector3::from(t))
        })
}

fn independent_chi2(g: &PoseGraph) -> f64 {
    g.edges()
        .iter()
        .map(|e| {
            let r = e
                .measurement
                .inverse()
                .compose(&g.node(e.i).unwrap().inverse())
                .compose(g.node(e.j).unwrap())
                .log();
            (r.transpose() * e.information * r)[(0, 0)]
        })
        .sum()
}

proptest! {
    #[test]
    fn fusion_matches_inverse_variance_weighting(da in 0.1..10.0f64, ua in 1e-6..4.0f64, db in 0.1..10.0f64, ub in 1e-6..4.0f64) {
        let (d, u) = fuse_estimates(da, ua, db, ub);
        let d_ref = (ub * da + ua * db) / (ua + ub);
        let u_ref = ua * ub / (ua + ub);
        prop_assert!((d - d_ref).abs() <= 1e-12 * d_ref.abs().max(1.0));
        prop_assert!((u - u_ref).abs() <= 1e-12 * u_ref.max(1.0));
        prop_assert!(u <= ua.min(ub));
        prop_assert!(d >= da.min(db) - 1e-12 && d <= da.max(db) + 1e-12);
    }

    #[test]
    fn scale_adjustment_is_linear_in_focal_ratio(f_tr in 50.0..1000.0f64, ratio in 0.25..4.0f64, depths in prop::collection::vec(0.1..10.0f64, 12)) {
        let map = Image::from_vec(4, 3, depths.clone()).unwrap();
        let pred = PredictedDepthMap::new(map, f_tr).unwrap();
        let same = adjust_scale(&pred, f_tr).unwrap();
        prop_assert_eq!(same.data(), &depths[..]);
        let scaled = adjust_scale(&pred, f_tr * ratio).unwrap();
        for (s, d) in scaled.data().iter().zip(&depths) {
            prop_assert!((s - (f_tr * ratio / f_tr) * d).abs() <= 1e-12 * s.abs());
        }
    }

    #[test]
    fn exp_log_round_trip(t in pose_strategy(3.0, 5.0)) {
        let back = RigidPose::exp(&t.log());
        prop_assert!(back.max_abs_diff(&t) < 1e-9);
        prop_assert!(t.compose(&t.inverse()).max_abs_diff(&RigidPose::identity()) < 1e-12);
    }

    #[test]
    fn ate_is_invariant_to_rigid_motion_of_the_estimate(
        pts in prop::collection::vec(prop::array::uniform3(-3.0..3.0f64), 5..40),
        noise in prop::collection::vec(prop::array::uniform3(-0.05..0.05f64), 40),
        t in pose_strategy(3.0, 10.0),
    ) {
        let gt: Vec<Vector3<f64>> = pts.iter().map(|p| Vector3::from(*p)).collect();
        let est: Vec<Vector3<f64>> = gt.iter().zip(&noise).map(|(g, n)| g + Vector3::from(*n)).collect();
        let moved: Vec<Vector3<f64>> = est.iter().map(|p| t.transform_point(p)).collect();
        let a = absolute_trajectory_error(&TrajectoryPair { estimated: est, ground_truth: gt.clone() }, Alignment::Rigid).unwrap();
        let b = absolute_trajectory_error(&TrajectoryPair { estimated: moved, ground_truth: gt }, Alignment::Rigid).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn percent_correct_matches_brute_force(
        gt in prop::collection::vec(prop_oneof![Just(0.0f64), 0.2..8.0f64], 48),
        factor in prop::collection::vec(prop_oneof![Just(0.0f64), 0.7..1.3f64], 48),
    ) {
        let est: Vec<f64> = gt.iter().zip(&factor).map(|(g, f)| g * f).collect();
        let a = depth_accuracy(&Image::from_vec(8, 6, est.clone()).unwrap(), &Image::from_vec(8, 6, gt.clone()).unwrap()).unwrap();
        let evaluated = gt.iter().filter(|g| **g > 0.0).count();
        let correct = gt.iter().zip(&est).filter(|(g, e)| **g > 0.0 && **e > 0.0 && ((**e - **g).abs() / **g) < 0.1).count();
        prop_assert_eq!(a.evaluated, evaluated);
        prop_assert_eq!(a.correct, correct);
    }

    #[test]
    fn pose_graph_reports_recomputable_chi2_and_never_increases_it(
        steps in prop::collection::vec(pose_strategy(0.5, 1.0), 3..6),
        noise in prop::collection::vec(prop::array::uniform6(-0.05..0.05f64), 6),
    ) {
        let mut truth = vec![RigidPose::identity()];
        for s in &steps {
            let last = *truth.last().unwrap();
            truth.push(last.compose(s));
        }
        let n = truth.len();
        let mut g = PoseGraph::new();
        for (i, p) in truth.iter().enumerate() {
            g.add_node(i, *p);
        }
        for i in 0..n {
            let z = truth[i].inverse().compose(&truth[(i + 1) % n]);
            let z = z.compose(&RigidPose::exp(&Vector6::from_row_slice(&noise[i % noise.len()])));
            g.add_edge(GraphEdge::with_default_information(i, (i + 1) % n, z)).unwrap();
        }
        let anchor = *g.node(0).unwrap();
        let before = independent_chi2(&g);
        let report = g.optimize().unwrap();
        prop_assert!((report.initial_chi2 - before).abs() <= 1e-9 * before.max(1.0));
        prop_assert!((report.final_chi2 - independent_chi2(&g)).abs() <= 1e-9 * before.max(1.0));
        prop_assert!(report.final_chi2 <= report.initial_chi2 + 1e-12);
        prop_assert_eq!(g.node(0).unwrap(), &anchor);
    }

    #[test]
    fn refinement_never_raises_uncertainty_and_leaves_unobserved_pixels(
        depth in prop::collection::vec(0.2..8.0f64, 30),
        unc in prop::collection::vec(1e-4..4.0f64, 30),
        obs in prop::collection::vec(prop::option::of((0.2..8.0f64, 1e-4..4.0f64)), 30),
    ) {
        let (w, h) = (6, 5);
        let kf = KeyFrame::new(
            3, 0.0, RigidPose::identity(),
            Image::filled(w, h, 0.5),
            Image::from_vec(w, h, depth.clone()).unwrap(),
            Image::from_vec(w, h, unc.clone()).unwrap(),
            None,
        ).unwrap();
        let mut maps = ObservationMaps::empty(w, h);
        for (i, o) in obs.iter().enumerate() {
            if let Some((d, u)) = o {
                *maps.depth.get_mut(i % w, i / w) = *d;
                *maps.uncertainty.get_mut(i % w, i / w) = *u;
            }
        }
        let out = refine_keyframe(&kf, &maps);
        prop_assert_eq!(out.generation, kf.generation + 1);
        for i in 0..w * h {
            let (x, y) = (i % w, i / w);
            prop_assert!(out.uncertainty.at(x, y) <= unc[i]);
            if obs[i].is_none() {
                prop_assert_eq!(out.depth.at(x, y).to_bits(), depth[i].to_bits());
                prop_assert_eq!(out.uncertainty.at(x, y).to_bits(), unc[i].to_bits());
            }
        }
    }

    #[test]
    fn model_position_is_the_running_mean(d0 in 1.5..2.5f64, delta in -0.001..0.001f64) {
        let k = CameraIntrinsics::new(50.0, 50.0, 15.5, 11.5, 32, 24).unwrap();
        let frame = |id: usize, d: f64, grey: f64| {
            KeyFrame::new(id, 0.0, RigidPose::identity(), Image::filled(32, 24, grey), Image::filled(32, 24, d), Image::filled(32, 24, 0.01), None).unwrap()
        };
        let mut m = GlobalModel::new(ModelConfig::default());
        m.integrate_keyframe(&frame(0, d0, 0.2), &k, None).unwrap();
        let first: Vec<Vector3<f64>> = m.elements.iter().map(|e| e.position).collect();
        let s = m.integrate_keyframe(&frame(1, d0 + delta, 0.6), &k, None).unwrap();
        prop_assert_eq!(s.inserted, 0);
        prop_assert_eq!(m.len(), first.len());
        let ratio = (d0 + delta) / d0;
        for (e, p) in m.elements.iter().zip(&first) {
            let expected = (p + p * ratio) / 2.0;
            prop_assert!((e.position - expected).norm() < 1e-12);
            prop_assert!((e.color[0] - (0.2 * 255.0 + 0.6 * 255.0) / 2.0).abs() < 1e-9);
            prop_assert_eq!(e.confidence_weight, 2.0);
        }
    }
}
