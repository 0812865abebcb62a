mod common;

use std::fs;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use sidegan::camera::{pose_from_angles, PoseDistribution};
use sidegan::data::{render_scene_analytic, Sample, SceneSpec};
use sidegan::disc::Discriminator;
use sidegan::error::Error;
use sidegan::eval::*;
use sidegan::render::{seeded_stream, Generator};
use sidegan::report::{emit_report, read_csv, ReportSources};
use sidegan::train::{run, RunOptions, TrainConfig, TrainContext};

fn analytic_images(n: usize, res: usize, seed: u64) -> Vec<Array3<f64>> {
    let mut rng = seeded_stream(seed, 0);
    (0..n)
        .map(|_| {
            let yaw: f64 = rng.random_range(-0.8..0.8);
            let pose = pose_from_angles(yaw, 0.0, 2.7, 1.6).unwrap();
            render_scene_analytic(&SceneSpec::random(rng.random()), &pose, res).0
        })
        .collect()
}

fn gaussian_rows(n: usize, d: usize, shift: f64, seed: u64) -> Array2<f64> {
    let mut rng = seeded_stream(seed, 0);
    Array2::from_shape_fn((n, d), |(_, j)| rng.sample::<f64, _>(StandardNormal) + if j == 0 { shift } else { 0.0 })
}

#[test]
fn fid_of_a_set_with_itself_is_zero() {
    let imgs = analytic_images(160, 16, 1);
    let e = metric_embedder(16);
    assert!(fid_lite(&imgs, &imgs, &e).unwrap().abs() < 1e-6);
}

#[test]
fn fid_of_shifted_unit_gaussians_is_the_squared_shift() {
    let m: f64 = 3.0;
    let a = gaussian_rows(10_000, 16, 0.0, 1);
    let b = gaussian_rows(10_000, 16, m, 2);
    let d = fid_from_embeddings(&a, &b).unwrap();
    assert!((d - m * m).abs() < 0.05 * m * m, "{d}");
}

#[test]
fn fid_is_symmetric_and_non_negative() {
    let a = gaussian_rows(300, 8, 0.0, 3);
    let b = gaussian_rows(300, 8, 0.2, 4).mapv(|v| 1.5 * v);
    let ab = fid_from_embeddings(&a, &b).unwrap();
    let ba = fid_from_embeddings(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-6, "{ab} {ba}");
    // independent draws from one distribution: the clipped value is still >= 0
    let c = gaussian_rows(300, 8, 0.0, 5);
    assert!(fid_from_embeddings(&a, &c).unwrap() >= 0.0);
    assert!(ab > 0.0);
}

#[test]
fn feature_covariance_is_symmetric_and_psd() {
    let x = gaussian_rows(200, 12, 0.0, 6);
    let s = FeatureStats::from_rows(&x).unwrap();
    let c = &s.covariance;
    assert!((c - c.transpose()).abs().max() < 1e-9);
    let min_eig = nalgebra::SymmetricEigen::new(c.clone()).eigenvalues.min();
    assert!(min_eig >= -1e-8);
    assert_eq!(s.count, 200);
}

#[test]
fn black_and_white_sets_are_separated() {
    let black = vec![Array3::zeros((16, 16, 3)); 130];
    let white = vec![Array3::ones((16, 16, 3)); 130];
    assert!(fid_lite(&black, &white, &metric_embedder(16)).unwrap() > 0.0);
}

#[test]
fn too_few_images_is_a_statistical_error() {
    let imgs = analytic_images(100, 16, 2);
    assert!(matches!(fid_lite(&imgs, &imgs, &metric_embedder(16)), Err(Error::Statistical(_))));
}

fn random_depth(seed: u64) -> Array2<f64> {
    let mut rng = seeded_stream(seed, 0);
    Array2::from_shape_simple_fn((9, 9), || rng.random_range(1.5..3.5))
}

#[test]
fn depth_error_ignores_affine_changes() {
    let g = random_depth(1);
    let mask = Array2::from_shape_fn((9, 9), |(y, x)| (x + y) % 3 != 0);
    assert!(depth_error(&g, &g, &mask).unwrap() < 1e-12);
    assert!(depth_error(&g, &g.mapv(|v| 2.0 * v + 1.0), &mask).unwrap() < 1e-12);

    let r = random_depth(2);
    let base = depth_error(&g, &r, &mask).unwrap();
    for (a, b) in [(2.0, 1.0), (-0.5, 3.0), (10.0, -4.0)] {
        assert!((depth_error(&g.mapv(|v| a * v + b), &r, &mask).unwrap() - base).abs() < 1e-9);
        assert!((depth_error(&g, &r.mapv(|v| a * v + b), &mask).unwrap() - base).abs() < 1e-9);
    }
}

#[test]
fn depth_error_matches_one_minus_squared_correlation() {
    // Fitting a line to the standardized reference leaves 1 - rho^2 of its unit variance.
    for seed in 0..5 {
        let g = random_depth(10 + seed);
        let r = random_depth(20 + seed);
        let mask = Array2::from_shape_fn((9, 9), |(y, x)| y * 9 + x < 60);
        let (mut gs, mut rs) = (Vec::new(), Vec::new());
        for ((&a, &b), &m) in g.iter().zip(r.iter()).zip(mask.iter()) {
            if m {
                gs.push(a);
                rs.push(b);
            }
        }
        let n = gs.len() as f64;
        let (mg, mr) = (gs.iter().sum::<f64>() / n, rs.iter().sum::<f64>() / n);
        let cov: f64 = gs.iter().zip(&rs).map(|(a, b)| (a - mg) * (b - mr)).sum();
        let vg: f64 = gs.iter().map(|a| (a - mg).powi(2)).sum();
        let vr: f64 = rs.iter().map(|b| (b - mr).powi(2)).sum();
        let rho2 = cov * cov / (vg * vr);
        assert!((depth_error(&g, &r, &mask).unwrap() - (1.0 - rho2)).abs() < 1e-9);
    }
}

#[test]
fn depth_error_needs_a_non_empty_mask() {
    let g = random_depth(1);
    let mask = Array2::from_elem((9, 9), false);
    assert!(matches!(depth_error(&g, &g, &mask), Err(Error::UndefinedMetric(_))));
    assert!(matches!(depth_error(&g, &g, &Array2::from_elem((3, 3), true)), Err(Error::Shape(_))));
}

fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[test]
fn rank_auc_matches_pairwise_counting() {
    let mut rng = seeded_stream(3, 0);
    for _ in 0..10 {
        // coarse values force ties
        let pos: Vec<f64> = (0..rng.random_range(1..60)).map(|_| (rng.random_range(0.0..10.0f64)).floor()).collect();
        let neg: Vec<f64> = (0..rng.random_range(1..60)).map(|_| (rng.random_range(-2.0..8.0f64)).floor()).collect();
        assert!((rank_auc(&pos, &neg).unwrap() - pairwise_auc(&pos, &neg)).abs() < 1e-9);
    }
    let pos: Vec<f64> = (0..200).map(|_| rng.random()).collect();
    let neg: Vec<f64> = (0..150).map(|_| rng.random()).collect();
    assert!((rank_auc(&pos, &neg).unwrap() - pairwise_auc(&pos, &neg)).abs() < 1e-9);
}

#[test]
fn perfect_scores_give_auc_one() {
    assert_eq!(rank_auc(&[1.0; 50], &[-1.0; 50]).unwrap(), 1.0);
    assert!(rank_auc(&[], &[1.0]).is_err());
}

#[test]
fn shuffled_labels_give_chance_auc() {
    let mut rng = seeded_stream(4, 0);
    // informative scores, labels then shuffled away from them
    let scores: Vec<f64> = (0..10_000).map(|i| if i < 5000 { 1.0 } else { 0.0 } + rng.random::<f64>()).collect();
    let mut labels: Vec<bool> = (0..10_000).map(|i| i < 5000).collect();
    labels.shuffle(&mut rng);
    let pos: Vec<f64> = scores.iter().zip(&labels).filter(|x| *x.1).map(|x| *x.0).collect();
    let neg: Vec<f64> = scores.iter().zip(&labels).filter(|x| !*x.1).map(|x| *x.0).collect();
    assert!((rank_auc(&pos, &neg).unwrap() - 0.5).abs() < 0.05);
}

#[test]
fn untrained_discriminator_is_at_chance() {
    let disc = Discriminator::new(common::tiny_disc_config(), 9);
    let poses = sidegan::data::dataset_poses(200, 20f64.to_radians(), 5f64.to_radians(), 2);
    let images: Vec<Array3<f64>> =
        poses.iter().enumerate().map(|(i, p)| render_scene_analytic(&SceneSpec::random(i as u64), p, 8).0).collect();
    let dist = PoseDistribution::dataset(std::sync::Arc::new(poses.clone()));
    let mut rng = seeded_stream(5, 0);
    let auc = pose_consistency_auc(&disc, &images, &poses, &dist, 10f64.to_radians(), 2000, &mut rng).unwrap();
    assert!((auc - 0.5).abs() < 0.1, "{auc}");
}

#[test]
fn sampled_poses_land_in_their_bin() {
    let bins = PoseBins::default();
    let mut rng = seeded_stream(6, 0);
    for bin in PoseBin::ALL {
        let (lo, hi) = bins.range(bin);
        for _ in 0..2000 {
            let p = bins.sample_pose(bin, &mut rng);
            assert_eq!(bins.bin_of(p.yaw), Some(bin));
            let a = p.yaw.to_degrees().abs();
            assert!(a >= lo - 1e-9 && a <= hi + 1e-9);
        }
        let hits = PoseBin::ALL.iter().filter(|&&b| bins.range(b) == (lo, hi)).count();
        assert_eq!(hits, 1);
    }
    assert_eq!(bins.bin_of(91f64.to_radians()), None);
}

#[test]
fn analytic_renderer_against_itself_scores_below_one_per_bin() {
    let e = metric_embedder(16);
    let src = AnalyticSource { resolution: 16 };
    let scores = pose_binned_fid(&src, &src, &PoseBins::default(), DEFAULT_N_PER_BIN, &e, 1).unwrap();
    assert_eq!(scores.len(), 3);
    for s in &scores {
        assert_eq!(s.n, DEFAULT_N_PER_BIN);
        assert!(s.fid < 1.0, "{s:?}");
    }
}

#[test]
fn untrained_generator_is_far_from_the_analytic_scenes() {
    let gen = Generator::new(common::tiny_generator_config(), 3);
    let e = metric_embedder(8);
    let reference = AnalyticSource { resolution: 8 };
    let fake = pose_binned_fid(&GeneratorSource { gen: &gen }, &reference, &PoseBins::default(), 256, &e, 2).unwrap();
    let floor = pose_binned_fid(&reference, &reference, &PoseBins::default(), 256, &e, 2).unwrap();
    for (f, r) in fake.iter().zip(&floor) {
        assert!(f.fid > 5.0 * r.fid, "{f:?} vs {r:?}");
    }
}

#[test]
fn yaw_sweep_gives_one_panel_per_angle() {
    let gen = Generator::new(common::tiny_generator_config(), 3);
    let panels = yaw_sweep(&gen, &[-45.0, 0.0, 45.0], 1).unwrap();
    assert_eq!(panels.len(), 3);
    let s = strip(&panels).unwrap();
    assert_eq!(s.dim(), (8, 24, 3));
    assert_eq!(panels, yaw_sweep(&gen, &[-45.0, 0.0, 45.0], 1).unwrap());
}

fn tiny_run(dir: &std::path::Path) {
    let cfg = TrainConfig {
        batch_size: 4,
        pose_batch: 4,
        identity_batch: 2,
        total_steps: 3,
        z_fg_dim: 4,
        z_bg_dim: 4,
        plane_res: 4,
        plane_channels: 3,
        feature_dim: 4,
        mapping_width: 8,
        decoder_width: 8,
        bg_width: 8,
        pe_octaves: 2,
        samples_per_ray: 6,
        neural_resolution: 4,
        output_resolution: 8,
        upsampler_width: 8,
        disc_channels: vec![4, 4, 4, 4],
        disc_head_width: 8,
        pose_dim: 3,
        encoder_width: 8,
        density_points: 8,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let poses = sidegan::data::dataset_poses(16, 15f64.to_radians(), 5f64.to_radians(), 1);
    let data: Vec<Sample> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (image, depth) = render_scene_analytic(&SceneSpec::random(i as u64), p, 8);
            Sample { id: format!("{i:06}"), image, pose: *p, depth }
        })
        .collect();
    let ctx = TrainContext::new(cfg.clone(), data).unwrap();
    run(&cfg, &ctx, &RunOptions { run_dir: dir.to_path_buf(), resume: None, init_from: None }, None).unwrap();
}

fn snapshot(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn report_is_idempotent_and_plots_the_metric_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    tiny_run(&run_dir);
    let out = tmp.path().join("report");
    let summary = EvalSummary {
        step: 3,
        bins: PoseBin::ALL
            .iter()
            .enumerate()
            .map(|(k, &bin)| {
                let (lo, hi) = PoseBins::default().range(bin);
                BinScore { bin, yaw_lo_deg: lo, yaw_hi_deg: hi, n: 128, fid: 0.25 * (k + 1) as f64 }
            })
            .collect(),
        depth_error: 0.5,
        pose_auc: Some(0.6),
    };
    write_eval_outputs(&out, &summary).unwrap();
    let src = ReportSources { run_dir: Some(run_dir), seed: 1, ..ReportSources::default() };
    let written = emit_report(&out, &src).unwrap();
    for name in ["report.md", "summary.csv", "loss_curves.png", "bins_fid.png", "pose_hist.png"] {
        assert!(written.contains(&out.join(name)), "{name} missing");
    }
    assert!(written.iter().any(|p| p.starts_with(out.join("sweeps"))));
    for p in written.iter().filter(|p| p.extension().is_some_and(|x| x == "png")) {
        image::open(p).unwrap();
    }
    for p in written.iter().filter(|p| p.extension().is_some_and(|x| x == "csv")) {
        read_csv(p).unwrap();
    }

    let (header, bins) = read_csv(&out.join("bins.csv")).unwrap();
    assert_eq!(header, BINS_CSV_HEADER);
    let (_, plotted) = read_csv(&out.join("plot_data/bins_fid.csv")).unwrap();
    assert_eq!(bins.len(), plotted.len());
    for (b, p) in bins.iter().zip(&plotted) {
        assert_eq!(b[0], p[0]);
        assert_eq!(b[4].parse::<f64>().unwrap(), p[1].parse::<f64>().unwrap());
    }

    let first = snapshot(&out);
    emit_report(&out, &src).unwrap();
    assert_eq!(first, snapshot(&out));
}
