#![allow(dead_code)]

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Upper-tail p-value of Pearson's statistic for observed counts against expected probabilities.
pub fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Asymptotic p-value of the two-sample KS statistic.
pub fn ks_p(d: f64, n: usize, m: usize) -> f64 {
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        p += 2.0 * sign * (-2.0 * (k as f64 * lambda).powi(2)).exp();
    }
    p.clamp(0.0, 1.0)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

use ndarray::ArrayD;
use sidegan::fields::FieldConfig;
use sidegan::nn::Module;
use sidegan::render::{GeneratorConfig, RenderConfig};
use sidegan_autograd::gradcheck::check_gradients;
use sidegan_autograd::Tensor;

/// Width-8 generator small enough for finite-difference checks.
pub fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        field: FieldConfig {
            z_fg_dim: 4,
            z_bg_dim: 4,
            plane_res: 4,
            plane_channels: 3,
            feature_dim: 4,
            mapping_width: 8,
            decoder_width: 8,
            bg_width: 8,
            pe_octaves: 2,
            pose_conditioning: false,
        },
        render: RenderConfig { samples_per_ray: 6, near: 1.7, far: 3.7, neural_resolution: 4, output_resolution: 8 },
        upsampler_width: 8,
    }
}

pub fn param_values<M: Module>(m: &M) -> Vec<ArrayD<f64>> {
    m.params().into_iter().map(|(_, t)| t.value().clone()).collect()
}

/// Clone of `m` whose parameters are the given tensors, in `params()` order.
pub fn with_params<M: Module + Clone>(m: &M, ts: &[Tensor]) -> M {
    let mut out = m.clone();
    let slots = out.params_mut();
    assert_eq!(slots.len(), ts.len());
    for ((_, slot), t) in slots.into_iter().zip(ts) {
        *slot = t.clone();
    }
    out
}

pub fn assert_gradcheck(inputs: &[ArrayD<f64>], f: impl Fn(&[Tensor]) -> Tensor) {
    let r = check_gradients(inputs, f, 1e-6, 1e-6, 24);
    assert!(r.passes(1e-4), "{r:?}");
}

/// Discriminator for 8x8 images with every optional head present.
pub fn tiny_disc_config() -> sidegan::disc::DiscConfig {
    sidegan::disc::DiscConfig {
        resolution: 8,
        channels: vec![4, 4, 4, 4],
        head_width: 8,
        pose_dim: 3,
        encoder_width: 8,
        use_pose_branch: true,
        use_regression_head: true,
    }
}

pub fn random_images(b: usize, res: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = sidegan::render::seeded_stream(seed, 0);
    Tensor::constant(ndarray::ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[b, res, res, 3]), || rng.random::<f64>()))
}

pub fn some_poses(n: usize, seed: u64) -> Vec<sidegan::camera::CameraPose> {
    use rand::Rng;
    let mut rng = sidegan::render::seeded_stream(seed, 0);
    (0..n)
        .map(|_| {
            sidegan::camera::pose_from_angles(rng.random_range(-1.2..1.2), rng.random_range(-0.3..0.3), 2.7, 1.6).unwrap()
        })
        .collect()
}
