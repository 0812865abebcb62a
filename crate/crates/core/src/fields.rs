//! Tri-plane foreground field, its decoder, and the background field.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sidegan_autograd::{Csr, SparseMatrix, Tensor};

use crate::camera::CameraPose;
use crate::nn::{prefixed, Linear, Module, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub z_fg_dim: usize,
    pub z_bg_dim: usize,
    pub plane_res: usize,
    pub plane_channels: usize,
    /// Feature width F; the first three channels are RGB.
    pub feature_dim: usize,
    pub mapping_width: usize,
    pub decoder_width: usize,
    pub bg_width: usize,
    pub pe_octaves: usize,
    pub pose_conditioning: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            z_fg_dim: 64,
            z_bg_dim: 512,
            plane_res: 32,
            plane_channels: 16,
            feature_dim: 16,
            mapping_width: 128,
            decoder_width: 64,
            bg_width: 64,
            pe_octaves: 4,
            pose_conditioning: false,
        }
    }
}

/// Foreground and background latents for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub z_fg: Vec<f64>,
    pub z_bg: Vec<f64>,
}

impl LatentPair {
    pub fn sample<R: Rng + ?Sized>(cfg: &FieldConfig, rng: &mut R) -> LatentPair {
        let mut draw = |n: usize| (0..n).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        let z_fg = draw(cfg.z_fg_dim);
        let z_bg = draw(cfg.z_bg_dim);
        LatentPair { z_fg, z_bg }
    }
}

/// Stacks latents into `(B, z_fg_dim)` and `(B, z_bg_dim)` constant tensors.
pub fn stack_latents(latents: &[LatentPair]) -> (Tensor, Tensor) {
    let b = latents.len();
    let fg: Vec<f64> = latents.iter().flat_map(|l| l.z_fg.iter().copied()).collect();
    let bg: Vec<f64> = latents.iter().flat_map(|l| l.z_bg.iter().copied()).collect();
    let dfg = latents.first().map_or(0, |l| l.z_fg.len());
    let dbg = latents.first().map_or(0, |l| l.z_bg.len());
    (Tensor::from_vec(&[b, dfg], fg), Tensor::from_vec(&[b, dbg], bg))
}

pub fn stack_poses(poses: &[CameraPose]) -> Tensor {
    let flat: Vec<f64> = poses.iter().flat_map(|p| p.flat.iter().copied()).collect();
    Tensor::from_vec(&[poses.len(), 25], flat)
}

/// Three axis-aligned feature planes (XY, XZ, YZ) per batch element over [-1, 1]^3.
///
/// `planes` has shape `(batch * 3 * res * res, channels)`; row
/// `((b * 3 + plane) * res + row) * res + col`.
#[derive(Debug, Clone)]
pub struct TriPlane {
    pub planes: Tensor,
    pub batch: usize,
    pub res: usize,
    pub channels: usize,
}

/// Maps latents to tri-plane features.
#[derive(Debug, Clone)]
pub struct MappingNet {
    pub layers: Vec<Linear>,
    pub res: usize,
    pub channels: usize,
    pub pose_conditioning: bool,
}

impl MappingNet {
    pub fn new<R: Rng + ?Sized>(cfg: &FieldConfig, rng: &mut R) -> MappingNet {
        let input = cfg.z_fg_dim + if cfg.pose_conditioning { 25 } else { 0 };
        let out = 3 * cfg.plane_res * cfg.plane_res * cfg.plane_channels;
        let layers = vec![
            Linear::new(input, cfg.mapping_width, true, 1.0, rng),
            Linear::new(cfg.mapping_width, cfg.mapping_width, true, 1.0, rng),
            Linear::new(cfg.mapping_width, out, true, 0.5, rng),
        ];
        MappingNet { layers, res: cfg.plane_res, channels: cfg.plane_channels, pose_conditioning: cfg.pose_conditioning }
    }
}

impl Module for MappingNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers.iter_mut().enumerate().flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params_mut())).collect()
    }
}

/// Builds tri-planes for a batch of foreground latents `(B, z_fg_dim)`.
pub fn synthesize_triplane(z_fg: &Tensor, poses: &[CameraPose], mapping: &MappingNet) -> TriPlane {
    let batch = z_fg.shape()[0];
    let mut h = if mapping.pose_conditioning {
        assert_eq!(poses.len(), batch);
        Tensor::concat(&[z_fg.clone(), stack_poses(poses)], 1)
    } else {
        z_fg.clone()
    };
    let last = mapping.layers.len() - 1;
    for (i, layer) in mapping.layers.iter().enumerate() {
        h = layer.forward(&h);
        if i < last {
            h = h.leaky_relu(LEAKY_SLOPE);
        }
    }
    let rows = batch * 3 * mapping.res * mapping.res;
    TriPlane { planes: h.reshape(&[rows, mapping.channels]), batch, res: mapping.res, channels: mapping.channels }
}

/// Continuous plane coordinate in [-1, 1] to the two bracketing texels and the
/// weight of the upper one; texel centers sit at `2 (i + 0.5) / res - 1`.
fn texel_taps(u: f64, res: usize) -> (usize, usize, f64) {
    let pos = (((u.clamp(-1.0, 1.0) + 1.0) * 0.5) * res as f64 - 0.5).clamp(0.0, (res - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(res - 1);
    (i0, i1, pos - i0 as f64)
}

/// Sparse interpolation matrix that sums bilinear lookups on all three planes.
///
/// `points` holds `points_per_item` consecutive points for each batch element.
pub fn triplane_sampling_matrix(points: &[[f64; 3]], batch: usize, res: usize) -> SparseMatrix {
    assert!(batch > 0 && points.len() % batch == 0);
    let per_item = points.len() / batch;
    let mut indices = Vec::with_capacity(points.len() * 12);
    let mut values = Vec::with_capacity(points.len() * 12);
    for (n, p) in points.iter().enumerate() {
        let b = n / per_item;
        // (column coordinate, row coordinate) for the XY, XZ and YZ planes
        let coords = [(p[0], p[1]), (p[0], p[2]), (p[1], p[2])];
        for (plane, &(cu, rv)) in coords.iter().enumerate() {
            let (c0, c1, fc) = texel_taps(cu, res);
            let (r0, r1, fr) = texel_taps(rv, res);
            let base = (b * 3 + plane) * res * res;
            for (r, wr) in [(r0, 1.0 - fr), (r1, fr)] {
                for (c, wc) in [(c0, 1.0 - fc), (c1, fc)] {
                    indices.push(base + r * res + c);
                    values.push(wr * wc);
                }
            }
        }
    }
    SparseMatrix::new(Csr::from_fixed_width(batch * 3 * res * res, 12, indices, values))
}

/// Sum of the bilinearly interpolated features of the three planes, `(N, C)`.
pub fn query_triplane(planes: &TriPlane, points: &[[f64; 3]]) -> Tensor {
    let m = triplane_sampling_matrix(points, planes.batch, planes.res);
    planes.planes.spmm(&m)
}

/// Per-point density (`(N, 1)`, non-negative) and features (`(N, F)`, in [0, 1]).
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub density: Tensor,
    pub feature: Tensor,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &FieldConfig, rng: &mut R) -> Decoder {
        Decoder {
            hidden: vec![
                Linear::new(cfg.plane_channels, cfg.decoder_width, true, 1.0, rng),
                Linear::new(cfg.decoder_width, cfg.decoder_width, true, 1.0, rng),
            ],
            out: Linear::new(cfg.decoder_width, 1 + cfg.feature_dim, true, 0.5, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.out.outputs() - 1
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<_> = self.hidden.iter().enumerate().flat_map(|(i, l)| prefixed(&format!("hidden{i}"), l.params())).collect();
        v.extend(prefixed("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<_> =
            self.hidden.iter_mut().enumerate().flat_map(|(i, l)| prefixed(&format!("hidden{i}"), l.params_mut())).collect();
        v.extend(prefixed("out", self.out.params_mut()));
        v
    }
}

/// Raw decoder pre-activations, `(N, 1 + F)`.
fn decode_raw(feature: &Tensor, decoder: &Decoder) -> Tensor {
    let mut h = feature.clone();
    for layer in &decoder.hidden {
        h = layer.forward(&h).softplus();
    }
    decoder.out.forward(&h)
}

pub fn decode(feature: &Tensor, decoder: &Decoder) -> FieldSample {
    let raw = decode_raw(feature, decoder);
    let f = decoder.feature_dim();
    FieldSample { density: raw.narrow(1, 0, 1).softplus(), feature: raw.narrow(1, 1, f).sigmoid() }
}

/// Density only, skipping the feature activations.
pub fn decode_density(feature: &Tensor, decoder: &Decoder) -> Tensor {
    decode_raw(feature, decoder).narrow(1, 0, 1).softplus()
}

/// `[x, sin(2^k pi x), cos(2^k pi x)]` for `k < octaves`, shape `(N, 3 + 6 octaves)`.
pub fn positional_encoding(points: &[[f64; 3]], octaves: usize) -> Tensor {
    let dim = 3 + 6 * octaves;
    let mut data = Vec::with_capacity(points.len() * dim);
    for p in points {
        data.extend_from_slice(p);
        for k in 0..octaves {
            let freq = (1u64 << k) as f64 * std::f64::consts::PI;
            data.extend(p.iter().map(|&x| (freq * x).sin()));
            data.extend(p.iter().map(|&x| (freq * x).cos()));
        }
    }
    Tensor::from_vec(&[points.len(), dim], data)
}

/// MLP over a positional encoding of the point, conditioned on `z_bg`.
///
/// The first layer acts on the concatenation `[pe(x), z_bg]`; its weight is
/// stored as two blocks so the latent half is evaluated once per scene.
#[derive(Debug, Clone)]
pub struct BackgroundNet {
    pub input_x: Linear,
    pub input_z: Linear,
    pub hidden: Linear,
    pub out: Linear,
    pub octaves: usize,
}

impl BackgroundNet {
    pub fn new<R: Rng + ?Sized>(cfg: &FieldConfig, rng: &mut R) -> BackgroundNet {
        let pe = 3 + 6 * cfg.pe_octaves;
        // fan-in of the concatenated input
        let gain_scale = ((pe as f64) / (pe + cfg.z_bg_dim) as f64).sqrt();
        let z_scale = ((cfg.z_bg_dim as f64) / (pe + cfg.z_bg_dim) as f64).sqrt();
        BackgroundNet {
            input_x: Linear::new(pe, cfg.bg_width, true, gain_scale, rng),
            input_z: Linear::new(cfg.z_bg_dim, cfg.bg_width, false, z_scale, rng),
            hidden: Linear::new(cfg.bg_width, cfg.bg_width, true, 1.0, rng),
            out: Linear::new(cfg.bg_width, cfg.feature_dim, true, 0.5, rng),
            octaves: cfg.pe_octaves,
        }
    }
}

impl Module for BackgroundNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<_> = prefixed("input_x", self.input_x.params()).collect();
        v.extend(prefixed("input_z", self.input_z.params()));
        v.extend(prefixed("hidden", self.hidden.params()));
        v.extend(prefixed("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<_> = prefixed("input_x", self.input_x.params_mut()).collect();
        v.extend(prefixed("input_z", self.input_z.params_mut()));
        v.extend(prefixed("hidden", self.hidden.params_mut()));
        v.extend(prefixed("out", self.out.params_mut()));
        v
    }
}

/// Background features `(B * n, F)` in [0, 1] for `n` points per scene.
pub fn background_field(z_bg: &Tensor, points: &[[f64; 3]], net: &BackgroundNet) -> Tensor {
    let batch = z_bg.shape()[0];
    assert!(batch > 0 && points.len() % batch == 0);
    let per_item = points.len() / batch;
    let width = net.hidden.inputs();
    let x_part = net.input_x.forward(&positional_encoding(points, net.octaves)).reshape(&[batch, per_item, width]);
    let z_part = net.input_z.forward(z_bg).reshape(&[batch, 1, width]);
    let h = x_part.add(&z_part).softplus().reshape(&[batch * per_item, width]);
    let h = net.hidden.forward(&h).softplus();
    net.out.forward(&h).sigmoid()
}

/// Random-normal tensor helper for tests and probes.
pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(rng))
}
