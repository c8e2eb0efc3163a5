use depthfuse::core::{Image, RigidPose};
use depthfuse::dataset::{
    load_depth_png, load_f32_map, read_trajectory, save_depth_png, save_f32_map, trajectory_line,
    write_trajectory, DEFAULT_DEPTH_DIVISOR,
};
use nalgebra::Vector3;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectory_round_trip_keeps_six_decimals(
        stamps in prop::collection::vec(0.0..1e5f64, 1..8),
        axis in prop::array::uniform3(-3.0..3.0f64),
        t in prop::array::uniform3(-10.0..10.0f64),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let pose = RigidPose::from_scaled_axis(Vector3::from(axis), Vector3::from(t));
        let poses: Vec<(f64, RigidPose)> = stamps.iter().map(|s| (*s, pose)).collect();
        write_trajectory(&path, &poses).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines().filter(|l| !l.starts_with('#')) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            prop_assert_eq!(fields.len(), 8);
            prop_assert!(fields.iter().all(|f| f.split_once('.').map(|(_, d)| d.len()) == Some(6)));
        }
        let back = read_trajectory(&path).unwrap();
        prop_assert_eq!(back.len(), poses.len());
        for ((ta, a), (tb, b)) in back.iter().zip(&poses) {
            prop_assert!((ta - tb).abs() <= 5e-7);
            prop_assert!((a.translation() - b.translation()).amax() <= 5e-7);
            prop_assert!(a.inverse().compose(b).rotation_angle() < 1e-5);
        }
    }

    #[test]
    fn depth_png_quantizes_to_the_divisor(depths in prop::collection::vec(prop_oneof![Just(0.0f64), 0.05..13.0f64], 24)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let map = Image::from_vec(6, 4, depths.clone()).unwrap();
        save_depth_png(&path, &map, DEFAULT_DEPTH_DIVISOR).unwrap();
        let back = load_depth_png(&path, DEFAULT_DEPTH_DIVISOR).unwrap();
        for (a, b) in back.data().iter().zip(&depths) {
            prop_assert!((a - b).abs() <= 0.5 / DEFAULT_DEPTH_DIVISOR + 1e-12);
        }
    }

    #[test]
    fn f32_maps_round_trip_at_single_precision(values in prop::collection::vec(-1e3..1e3f64, 12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.f32");
        save_f32_map(&path, &Image::from_vec(4, 3, values.clone()).unwrap()).unwrap();
        let back = load_f32_map(&path).unwrap();
        prop_assert_eq!((back.width(), back.height()), (4, 3));
        for (a, b) in back.data().iter().zip(&values) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}

#[test]
fn trajectory_line_format() {
    let line = trajectory_line(
        1.5,
        &RigidPose::from_translation(Vector3::new(1.0, -2.0, 0.25)),
    );
    assert_eq!(
        line,
        "1.500000 1.000000 -2.000000 0.250000 0.000000 0.000000 0.000000 1.000000"
    );
}
