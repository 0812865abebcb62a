mod common;

use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use sidegan::camera::*;
use sidegan::data::dataset_poses;
use sidegan::render::seeded_stream;

fn deg(x: f64) -> f64 {
    x.to_radians()
}

proptest! {
    #[test]
    fn angles_round_trip(yaw in -YAW_LIMIT..YAW_LIMIT, pitch in -PITCH_LIMIT..PITCH_LIMIT) {
        let pose = pose_from_angles(yaw, pitch, DEFAULT_RADIUS, DEFAULT_FOCAL).unwrap();
        let (y, p) = angles_from_pose(&pose);
        prop_assert!((y - yaw).abs() < 1e-9);
        prop_assert!((p - pitch).abs() < 1e-9);
    }

    #[test]
    fn rotation_is_proper_and_camera_sits_on_sphere(yaw in -YAW_LIMIT..YAW_LIMIT, pitch in -PITCH_LIMIT..PITCH_LIMIT) {
        let pose = pose_from_angles(yaw, pitch, DEFAULT_RADIUS, DEFAULT_FOCAL).unwrap();
        let r = pose.rotation();
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        prop_assert!((pose.position().norm() - DEFAULT_RADIUS).abs() < 1e-12);
    }
}

#[test]
fn out_of_range_angles_are_rejected() {
    assert!(pose_from_angles(deg(91.0), 0.0, DEFAULT_RADIUS, DEFAULT_FOCAL).is_err());
    assert!(pose_from_angles(0.0, deg(-46.0), DEFAULT_RADIUS, DEFAULT_FOCAL).is_err());
    assert!(pose_from_angles(f64::NAN, 0.0, DEFAULT_RADIUS, DEFAULT_FOCAL).is_err());
}

#[test]
fn rays_are_unit_and_center_ray_hits_origin() {
    let pose = pose_from_angles(deg(30.0), deg(10.0), DEFAULT_RADIUS, DEFAULT_FOCAL).unwrap();
    // Odd resolution puts a pixel center exactly on the optical axis.
    let rays = generate_rays(&pose, 33);
    for d in &rays.directions {
        assert!(((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - 1.0).abs() < 1e-12);
    }
    let c = rays.point(16 * 33 + 16, DEFAULT_RADIUS);
    assert!(c.iter().all(|v| v.abs() < 1e-9), "{c:?}");
    assert!((rays.near - (DEFAULT_RADIUS - 1.0)).abs() < 1e-12);
    assert!((rays.far - (DEFAULT_RADIUS + 1.0)).abs() < 1e-12);
}

#[test]
fn rays_rotate_with_the_camera() {
    let delta = deg(17.0);
    let (c, s) = (delta.cos(), delta.sin());
    let a = generate_rays(&pose_from_angles(deg(-20.0), deg(12.0), DEFAULT_RADIUS, DEFAULT_FOCAL).unwrap(), 8);
    let b = generate_rays(&pose_from_angles(deg(-3.0), deg(12.0), DEFAULT_RADIUS, DEFAULT_FOCAL).unwrap(), 8);
    for (da, db) in a.directions.iter().zip(&b.directions) {
        let rotated = [da[0] * c + da[2] * s, da[1], da[2] * c - da[0] * s];
        for k in 0..3 {
            assert!((rotated[k] - db[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn pose_csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("poses.csv");
    let poses = dataset_poses(20, deg(15.0), deg(5.0), 3);
    let records: Vec<_> = poses.iter().enumerate().map(|(i, p)| (format!("img{i}"), *p)).collect();
    write_pose_csv(&path, &records).unwrap();
    let back = read_pose_csv(&path).unwrap();
    assert_eq!(back.len(), 20);
    for ((ia, a), (ib, b)) in records.iter().zip(&back) {
        assert_eq!(ia, ib);
        assert_eq!(a.flat, b.flat);
        assert_eq!((a.yaw, a.pitch), (b.yaw, b.pitch));
    }
}

fn yaw_edges(lo: f64, hi: f64, cells: usize) -> Vec<f64> {
    (0..=cells).map(|i| lo + (hi - lo) * i as f64 / cells as f64).collect()
}

fn counts(values: &[f64], edges: &[f64]) -> Vec<u64> {
    let mut c = vec![0; edges.len() - 1];
    for &v in values {
        let k = edges.partition_point(|&e| e <= v).saturating_sub(1).min(c.len() - 1);
        c[k] += 1;
    }
    c
}

#[test]
fn mixture_yaw_histogram_matches_its_components() {
    let data = Arc::new(dataset_poses(500, deg(15.0), deg(5.0), 11));
    let yaw_range = (deg(-50.0), deg(50.0));
    let dist = PoseDistribution::aups(data.clone(), 0.5, yaw_range, (deg(-15.0), deg(15.0)));
    let mut rng = seeded_stream(7, 0);
    let yaws: Vec<f64> = (0..10_000).map(|_| sample_pose(&dist, &mut rng).unwrap().yaw).collect();

    let edges = yaw_edges(deg(-50.0), deg(50.0), 20);
    let width = edges[1] - edges[0];
    let data_counts = counts(&data.iter().map(|p| p.yaw).collect::<Vec<_>>(), &edges);
    let probs: Vec<f64> = data_counts
        .iter()
        .map(|&c| 0.5 * width / (yaw_range.1 - yaw_range.0) + 0.5 * c as f64 / data.len() as f64)
        .collect();
    // Cells the mixture can never reach would break the statistic; merge into neighbours instead.
    let (mut obs, mut exp) = (Vec::new(), Vec::new());
    let (mut o_acc, mut e_acc) = (0u64, 0.0);
    for (o, e) in counts(&yaws, &edges).into_iter().zip(probs) {
        o_acc += o;
        e_acc += e;
        if e_acc * 10_000.0 >= 5.0 {
            obs.push(o_acc);
            exp.push(e_acc);
            o_acc = 0;
            e_acc = 0.0;
        }
    }
    *obs.last_mut().unwrap() += o_acc;
    *exp.last_mut().unwrap() += e_acc;
    let p = common::chi_square_p(&obs, &exp);
    assert!(p > 0.01, "chi-square p = {p}");
    assert_eq!(dist.yaw_cell_probabilities(&edges).len(), 20);
}

#[test]
fn mixture_ends_reduce_to_single_components() {
    let data = Arc::new(dataset_poses(300, deg(15.0), deg(5.0), 5));
    let yaw_range = (deg(-50.0), deg(50.0));
    let pitch_range = (deg(-15.0), deg(15.0));
    let n = 4000;

    let only_data = PoseDistribution::aups(data.clone(), 0.0, yaw_range, pitch_range);
    let mut rng = seeded_stream(1, 0);
    let drawn: Vec<f64> = (0..n).map(|_| sample_pose(&only_data, &mut rng).unwrap().yaw).collect();
    let mut rng = seeded_stream(1, 1);
    let direct: Vec<f64> = (0..n).map(|_| data[rng.random_range(0..data.len())].yaw).collect();
    let d = common::ks_statistic(&drawn, &direct);
    assert!(common::ks_p(d, n, n) > 0.01, "ratio 0: D = {d}");

    let only_uniform = PoseDistribution::aups(data, 1.0, yaw_range, pitch_range);
    let mut rng = seeded_stream(2, 0);
    let drawn: Vec<f64> = (0..n).map(|_| sample_pose(&only_uniform, &mut rng).unwrap().yaw).collect();
    let mut rng = seeded_stream(2, 1);
    let direct: Vec<f64> = (0..n).map(|_| rng.random_range(yaw_range.0..yaw_range.1)).collect();
    let d = common::ks_statistic(&drawn, &direct);
    assert!(common::ks_p(d, n, n) > 0.01, "ratio 1: D = {d}");
}

#[test]
fn uniform_yaw_mean_is_centered() {
    let dist = PoseDistribution::uniform((-YAW_LIMIT, YAW_LIMIT), (deg(-15.0), deg(15.0)));
    let mut rng = seeded_stream(9, 0);
    let yaws: Vec<f64> = (0..20_000).map(|_| sample_pose(&dist, &mut rng).unwrap().yaw).collect();
    let se = (std::f64::consts::PI / 12f64.sqrt()) / (yaws.len() as f64).sqrt();
    assert!(common::mean(&yaws).abs() < 3.0 * se);
    assert!(yaws.iter().all(|y| y.abs() <= YAW_LIMIT));
}

#[test]
fn negative_poses_respect_the_separation() {
    let data = Arc::new(dataset_poses(400, deg(15.0), deg(5.0), 2));
    let dist = PoseDistribution::aups(data.clone(), 0.5, (deg(-50.0), deg(50.0)), (deg(-15.0), deg(15.0)));
    let min_sep = deg(10.0);
    let mut rng = seeded_stream(4, 0);
    for i in 0..100_000 {
        let pos = data[i % data.len()];
        let neg = sample_negative_pose(&pos, &dist, min_sep, &mut rng).unwrap();
        assert!(angular_distance(&pos, &neg) >= min_sep);
    }
}

#[test]
fn negative_poses_follow_the_truncated_distribution() {
    let (ylo, yhi) = (deg(-50.0), deg(50.0));
    let (plo, phi) = (deg(-15.0), deg(15.0));
    let dist = PoseDistribution::uniform((ylo, yhi), (plo, phi));
    let frontal = CameraPose::frontal();
    let min_sep = deg(10.0);
    let mut rng = seeded_stream(6, 0);
    let yaws: Vec<f64> = (0..5000).map(|_| sample_negative_pose(&frontal, &dist, min_sep, &mut rng).unwrap().yaw).collect();

    // Oracle: fine-grid integration of the accepted region over the rectangle.
    let edges = yaw_edges(ylo, yhi, 10);
    let grid = 2000;
    let mut mass = vec![0.0; 10];
    for i in 0..grid {
        let y = ylo + (yhi - ylo) * (i as f64 + 0.5) / grid as f64;
        let cell = ((y - ylo) / (yhi - ylo) * 10.0) as usize;
        for j in 0..grid {
            let p = plo + (phi - plo) * (j as f64 + 0.5) / grid as f64;
            if (p.cos() * y.cos()).clamp(-1.0, 1.0).acos() >= min_sep {
                mass[cell] += 1.0;
            }
        }
    }
    let total: f64 = mass.iter().sum();
    let probs: Vec<f64> = mass.iter().map(|m| m / total).collect();
    let p = common::chi_square_p(&counts(&yaws, &edges), &probs);
    assert!(p > 0.01, "chi-square p = {p}");
}

#[test]
fn unsatisfiable_separation_is_a_sampling_error() {
    let dist = PoseDistribution::uniform((deg(-1.0), deg(1.0)), (deg(-1.0), deg(1.0)));
    let mut rng = seeded_stream(0, 0);
    let err = sample_negative_pose(&CameraPose::frontal(), &dist, deg(30.0), &mut rng).unwrap_err();
    assert!(matches!(err, sidegan::Error::Sampling(_)));
}
