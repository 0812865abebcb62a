mod common;

use common::{assert_gradcheck, param_values, tiny_generator_config, with_params};
use ndarray::{ArrayD, IxDyn};
use sidegan::camera::{generate_rays, pose_from_angles, CameraPose, DEFAULT_FOCAL, DEFAULT_RADIUS};
use sidegan::fields::*;
use sidegan::nn::bilinear_resize;
use sidegan::render::*;
use sidegan_autograd::Tensor;

fn texel_center(i: usize, res: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / res as f64 - 1.0
}

/// Planes whose single channel encodes (plane, row, col) so lookups are identifiable.
fn coded_planes(res: usize) -> TriPlane {
    let mut data = Vec::new();
    for plane in 0..3 {
        for r in 0..res {
            for c in 0..res {
                data.push((100 * plane + 10 * r + c) as f64);
            }
        }
    }
    TriPlane { planes: Tensor::from_vec(&[3 * res * res, 1], data), batch: 1, res, channels: 1 }
}

#[test]
fn triplane_lookup_at_texel_centers_sums_three_texels() {
    let res = 4;
    let planes = coded_planes(res);
    let p = [texel_center(1, res), texel_center(2, res), texel_center(3, res)];
    let v = query_triplane(&planes, &[p]).item();
    // XY: col x=1, row y=2; XZ: col x=1, row z=3; YZ: col y=2, row z=3
    let expected = (21.0) + (100.0 + 31.0) + (200.0 + 32.0);
    assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
}

#[test]
fn triplane_is_linear_along_an_axis_inside_a_cell() {
    let planes = coded_planes(4);
    let a = [-0.2, 0.1, 0.4];
    let b = [0.2, 0.1, 0.4];
    let m = [0.0, 0.1, 0.4];
    let v = query_triplane(&planes, &[a, b, m]).to_vec();
    assert!((v[2] - 0.5 * (v[0] + v[1])).abs() < 1e-12);
}

#[test]
fn triplane_clamps_outside_the_box() {
    let planes = coded_planes(4);
    let v = query_triplane(&planes, &[[1.5, -3.0, 0.0], [1.0, -1.0, 0.0]]).to_vec();
    assert_eq!(v[0], v[1]);
}

#[test]
fn triplane_points_are_routed_to_their_batch_item() {
    let res = 2;
    let mut data = vec![0.0; 2 * 3 * res * res];
    for v in data.iter_mut().skip(3 * res * res) {
        *v = 1.0;
    }
    let planes = TriPlane { planes: Tensor::from_vec(&[2 * 3 * res * res, 1], data), batch: 2, res, channels: 1 };
    let v = query_triplane(&planes, &[[0.3, 0.1, -0.2], [0.3, 0.1, -0.2]]).to_vec();
    assert_eq!(v, vec![0.0, 3.0]);
}

#[test]
fn zero_final_mapping_layer_gives_zero_planes() {
    let cfg = tiny_generator_config().field;
    let mut mapping = MappingNet::new(&cfg, &mut seeded_stream(0, 1));
    mapping.layers.last_mut().unwrap().zero_();
    let z = Tensor::constant(randn(&[3, cfg.z_fg_dim], &mut seeded_stream(0, 2)));
    let planes = synthesize_triplane(&z, &[], &mapping);
    assert_eq!(planes.planes.shape(), &[3 * 3 * 16, 3]);
    assert!(planes.planes.value().iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_outputs_stay_in_range() {
    let cfg = tiny_generator_config().field;
    let decoder = Decoder::new(&cfg, &mut seeded_stream(1, 0));
    let x = Tensor::constant(randn(&[500, cfg.plane_channels], &mut seeded_stream(1, 1)).mapv(|v| 40.0 * v));
    let s = decode(&x, &decoder);
    assert!(s.density.value().iter().all(|&v| v >= 0.0));
    assert!(s.feature.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(s.feature.shape(), &[500, cfg.feature_dim]);
    assert_eq!(decode_density(&x, &decoder).value(), s.density.value());
}

#[test]
fn positional_encoding_layout() {
    let pe = positional_encoding(&[[0.25, -0.5, 1.0]], 2).to_vec();
    assert_eq!(pe.len(), 15);
    assert_eq!(&pe[..3], &[0.25, -0.5, 1.0]);
    let pi = std::f64::consts::PI;
    assert!((pe[3] - (pi * 0.25).sin()).abs() < 1e-15);
    assert!((pe[6 + 1] - (pi * -0.5).cos()).abs() < 1e-15);
    assert!((pe[9 + 2] - (2.0 * pi).sin()).abs() < 1e-12);
}

#[test]
fn background_items_are_independent() {
    let cfg = tiny_generator_config().field;
    let net = BackgroundNet::new(&cfg, &mut seeded_stream(2, 0));
    let pts = vec![[0.1, 0.2, 0.3], [-0.5, 0.0, 0.9], [0.1, 0.2, 0.3], [-0.5, 0.0, 0.9]];
    let mut z = randn(&[2, cfg.z_bg_dim], &mut seeded_stream(2, 1));
    let a = background_field(&Tensor::constant(z.clone()), &pts, &net).to_vec();
    z[[1, 0]] += 1.0;
    let b = background_field(&Tensor::constant(z), &pts, &net).to_vec();
    let f = cfg.feature_dim;
    assert_eq!(&a[..2 * f], &b[..2 * f]);
    assert_ne!(&a[2 * f..], &b[2 * f..]);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let cfg = tiny_generator_config().field;
    let decoder = Decoder::new(&cfg, &mut seeded_stream(3, 0));
    let x = randn(&[5, cfg.plane_channels], &mut seeded_stream(3, 1));
    let mut inputs = vec![x];
    inputs.extend(param_values(&decoder));
    assert_gradcheck(&inputs, |t| {
        let d = with_params(&decoder, &t[1..]);
        let s = decode(&t[0], &d);
        s.density.sum().add(&s.feature.square().sum())
    });
}

#[test]
fn mapping_and_lookup_gradients_match_finite_differences() {
    let cfg = tiny_generator_config().field;
    let mapping = MappingNet::new(&cfg, &mut seeded_stream(4, 0));
    let z = randn(&[2, cfg.z_fg_dim], &mut seeded_stream(4, 1));
    let pts = vec![[0.1, -0.3, 0.7], [0.6, 0.2, -0.4], [-0.8, 0.5, 0.05], [0.0, 0.33, -0.9]];
    let mut inputs = vec![z];
    inputs.extend(param_values(&mapping));
    assert_gradcheck(&inputs, |t| {
        let m = with_params(&mapping, &t[1..]);
        query_triplane(&synthesize_triplane(&t[0], &[], &m), &pts).square().sum()
    });
}

#[test]
fn background_gradients_match_finite_differences() {
    let cfg = tiny_generator_config().field;
    let net = BackgroundNet::new(&cfg, &mut seeded_stream(5, 0));
    let z = randn(&[2, cfg.z_bg_dim], &mut seeded_stream(5, 1));
    let pts = vec![[0.1, -0.3, 0.7], [0.6, 0.2, -0.4], [-0.8, 0.5, 0.05], [0.0, 0.33, -0.9]];
    let mut inputs = vec![z];
    inputs.extend(param_values(&net));
    assert_gradcheck(&inputs, |t| {
        let n = with_params(&net, &t[1..]);
        background_field(&t[0], &pts, &n).square().sum()
    });
}

fn constant_density(sigma: f64, f: usize) -> impl Fn(&[[f64; 3]]) -> FieldSample {
    move |pts| FieldSample {
        density: Tensor::constant(ArrayD::from_elem(IxDyn(&[pts.len(), 1]), sigma)),
        feature: Tensor::constant(ArrayD::from_elem(IxDyn(&[pts.len(), f]), 0.5)),
    }
}

#[test]
fn transmittance_converges_to_beer_lambert() {
    let sigma = 0.8;
    let bundle = generate_rays(&CameraPose::frontal(), 2).with_range(1.7, 3.7);
    let exact = (-sigma * 2.0f64).exp();
    let errs: Vec<f64> = [16, 32, 64]
        .iter()
        .map(|&s| {
            let out = march(std::slice::from_ref(&bundle), constant_density(sigma, 1), s, None);
            (out.transmittance.to_vec()[0] - exact).abs()
        })
        .collect();
    assert!(errs[0] >= 2.0 * errs[1] && errs[1] >= 2.0 * errs[2], "{errs:?}");
    for (err, n) in errs.iter().zip([16.0, 32.0, 64.0]) {
        assert!(*err <= (sigma * 2.0f64).powi(2) / n, "{err} at N = {n}");
    }
}

#[test]
fn weights_and_transmittance_sum_to_one() {
    let bundle = generate_rays(&pose_from_angles(0.3, -0.1, DEFAULT_RADIUS, DEFAULT_FOCAL).unwrap(), 317).with_range(1.7, 3.7);
    assert!(bundle.len() >= 100_000);
    // Arbitrary positive density that varies in space.
    let field = |pts: &[[f64; 3]]| FieldSample {
        density: Tensor::from_vec(&[pts.len(), 1], pts.iter().map(|p| 3.0 * (1.0 + (7.0 * p[0] + 5.0 * p[1] * p[2]).sin())).collect()),
        feature: Tensor::zeros(&[pts.len(), 1]),
    };
    let out = march(&[bundle], field, 8, Some(&mut seeded_stream(0, 0)));
    let w = out.weights.value();
    let t = out.transmittance.value();
    let s = out.partial_transmittance.value();
    for r in 0..w.shape()[0] {
        let sum: f64 = (0..8).map(|k| w[[r, k]]).sum();
        assert!((sum + t[[r, 0]] - 1.0).abs() < 1e-12);
        assert!(w.iter().skip(r * 8).take(8).all(|&v| v >= 0.0));
        assert_eq!(s[[r, 0]], 1.0);
    }
}

#[test]
fn opaque_slab_depth_is_the_entry_distance() {
    let samples = 400;
    let bundle = generate_rays(&CameraPose::frontal(), 6).with_range(1.7, 3.7);
    let field = |pts: &[[f64; 3]]| FieldSample {
        density: Tensor::from_vec(&[pts.len(), 1], pts.iter().map(|p| if p[2] < 0.3 { 1e4 } else { 0.0 }).collect()),
        feature: Tensor::ones(&[pts.len(), 1]),
    };
    let out = march(std::slice::from_ref(&bundle), field, samples, None);
    let width = 2.0 / samples as f64;
    for (r, d) in bundle.directions.iter().enumerate() {
        let entry = (DEFAULT_RADIUS - 0.3) / -d[2];
        assert!((out.depth[r] - entry).abs() <= width, "ray {r}: {} vs {entry}", out.depth[r]);
        assert!(out.transmittance.to_vec()[r] < 1e-12);
    }
}

#[test]
fn empty_rays_report_far_depth() {
    let bundle = generate_rays(&CameraPose::frontal(), 2).with_range(1.7, 3.7);
    let out = march(&[bundle], constant_density(0.0, 2), 8, None);
    assert!(out.depth.iter().all(|&d| d == 3.7));
    assert!(out.transmittance.value().iter().all(|&t| t == 1.0));
}

#[test]
fn composite_is_foreground_plus_transmitted_background() {
    let fg = Tensor::from_vec(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]);
    let t = Tensor::from_vec(&[2, 1], vec![0.5, 0.25]);
    let bg = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.8, 0.4]);
    let out = composite(&fg, &t, &bg).to_vec();
    let expected = [0.6, 0.2, 0.5, 0.5];
    for (o, e) in out.iter().zip(expected) {
        assert!((o - e).abs() < 1e-15);
    }
}

#[test]
fn identity_upsampler_is_bilinear_rgb() {
    let mut up = Upsampler::new(4, 8, &mut seeded_stream(6, 0));
    up.identity_init();
    let map = Tensor::constant(randn(&[2, 4, 4, 4], &mut seeded_stream(6, 1)).mapv(|v| 0.5 + 0.2 * v.tanh()));
    let out = up.forward(&map, 8);
    let expected = bilinear_resize(&map, 8).narrow(3, 0, 3);
    assert_eq!(out.shape(), &[2, 8, 8, 3]);
    for (a, b) in out.value().iter().zip(expected.value().iter()) {
        assert!((a - b).abs() < 1e-14);
    }

    let flat = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 4, 4, 4]), 0.3));
    assert!(up.forward(&flat, 8).value().iter().all(|&v| (v - 0.3).abs() < 1e-14));
}

#[test]
fn rendering_is_deterministic_and_pose_dependent() {
    let cfg = tiny_generator_config();
    let g = Generator::new(cfg.clone(), 8);
    let h = Generator::new(cfg.clone(), 8);
    let z_fg = Tensor::constant(randn(&[1, 4], &mut seeded_stream(8, 10)));
    let z_bg = Tensor::constant(randn(&[1, 4], &mut seeded_stream(8, 11)));
    let frontal = [CameraPose::frontal()];
    let a = g.render(&z_fg, &z_bg, &frontal, None);
    let b = h.render(&z_fg, &z_bg, &frontal, None);
    assert_eq!(a.rgb.value(), b.rgb.value());
    assert_eq!(a.rgb.shape(), &[1, 8, 8, 3]);
    assert!(a.rgb.value().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.depth.iter().all(|&d| (1.7..=3.7).contains(&d)));

    let side = [pose_from_angles(0.8, 0.0, DEFAULT_RADIUS, DEFAULT_FOCAL).unwrap()];
    let c = g.render(&z_fg, &z_bg, &side, None);
    let diff: f64 = a.rgb.value().iter().zip(c.rgb.value().iter()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn empty_foreground_renders_the_background() {
    let mut g = Generator::new(tiny_generator_config(), 9);
    let mut w = g.decoder.out.weight.value().clone();
    w.index_axis_mut(ndarray::Axis(1), 0).fill(0.0);
    let mut b = g.decoder.out.bias.as_ref().unwrap().value().clone();
    b[0] = -800.0;
    g.decoder.out.weight = Tensor::param(w);
    g.decoder.out.bias = Some(Tensor::param(b));

    let z_fg = Tensor::constant(randn(&[2, 4], &mut seeded_stream(9, 10)));
    let z_bg = Tensor::constant(randn(&[2, 4], &mut seeded_stream(9, 11)));
    let poses = [CameraPose::frontal(), pose_from_angles(-0.5, 0.2, DEFAULT_RADIUS, DEFAULT_FOCAL).unwrap()];
    let out = g.render(&z_fg, &z_bg, &poses, None);

    let far: Vec<[f64; 3]> = g.rays(&poses).iter().flat_map(|b| (0..b.len()).map(move |r| b.point(r, b.far))).collect();
    let bg = background_field(&z_bg, &far, &g.background).reshape(&[2, 4, 4, 4]);
    let expected = g.upsampler.forward(&bg, 8);
    for (a, e) in out.rgb.value().iter().zip(expected.value().iter()) {
        assert!((a - e).abs() < 1e-12);
    }
    assert!(out.transmittance.value().iter().all(|&t| t == 1.0));
}

#[test]
fn render_gradient_wrt_foreground_latent() {
    let g = Generator::new(tiny_generator_config(), 10);
    let z_fg = randn(&[1, 4], &mut seeded_stream(10, 10));
    let z_bg = Tensor::constant(randn(&[1, 4], &mut seeded_stream(10, 11)));
    let probe = Tensor::constant(randn(&[1, 8, 8, 3], &mut seeded_stream(10, 12)));
    let poses = [pose_from_angles(0.2, 0.1, DEFAULT_RADIUS, DEFAULT_FOCAL).unwrap()];
    assert_gradcheck(&[z_fg], |t| g.render(&t[0], &z_bg, &poses, None).rgb.mul(&probe).sum());
}
