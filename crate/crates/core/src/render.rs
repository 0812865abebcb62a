//! Volume rendering of the foreground field, compositing over the background
//! field, and the convolutional upsampler. [`Generator`] ties them together.

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sidegan_autograd::Tensor;

use crate::camera::{generate_rays, CameraPose, RayBundle};
use crate::fields::{
    background_field, decode, decode_density, query_triplane, synthesize_triplane, BackgroundNet, Decoder, FieldConfig,
    FieldSample, MappingNet,
};
use crate::nn::{bilinear_resize, prefixed, Conv2d, Module, LEAKY_SLOPE};

/// Rays with accumulated weight below this are treated as empty.
const EMPTY_RAY_WEIGHT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub neural_resolution: usize,
    pub output_resolution: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { samples_per_ray: 24, near: 1.7, far: 3.7, neural_resolution: 16, output_resolution: 32 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.samples_per_ray < 2 {
            return Err(crate::Error::Config("samples_per_ray must be at least 2".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(crate::Error::Config(format!("need 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if self.output_resolution < self.neural_resolution || self.neural_resolution < 2 {
            return Err(crate::Error::Config("need 2 <= neural_resolution <= output_resolution".into()));
        }
        Ok(())
    }
}

/// Per-ray results of marching through the foreground.
#[derive(Debug, Clone)]
pub struct MarchOutput {
    /// `(rays, F)` weighted sum of sample features.
    pub feature: Tensor,
    /// `(rays, 1)` transmittance left after the whole segment.
    pub transmittance: Tensor,
    /// `(rays, S)` compositing weights.
    pub weights: Tensor,
    /// `(rays, S)` transmittance reaching each sample.
    pub partial_transmittance: Tensor,
    /// Expected termination distance per ray; `far` for empty rays.
    pub depth: Vec<f64>,
    /// Sample distances, `rays * S`.
    pub t: Vec<f64>,
}

/// Stratified sample distances along `[near, far]`: one per equal-width bin,
/// at the bin midpoint or at a uniform jitter inside the bin.
pub fn stratified_samples(n_rays: usize, samples: usize, near: f64, far: f64, rng: Option<&mut dyn RngCore>) -> Vec<f64> {
    let width = (far - near) / samples as f64;
    let mut t = Vec::with_capacity(n_rays * samples);
    match rng {
        Some(rng) => {
            for _ in 0..n_rays {
                for i in 0..samples {
                    t.push(near + (i as f64 + rng.random::<f64>()) * width);
                }
            }
        }
        None => {
            for _ in 0..n_rays {
                for i in 0..samples {
                    t.push(near + (i as f64 + 0.5) * width);
                }
            }
        }
    }
    t
}

/// Marches every ray of every bundle through `field`.
///
/// Weights follow the discrete volume-rendering rule
/// `w_i = T_i (1 - exp(-sigma_i delta_i))`, `T_i = exp(-sum_{j<i} sigma_j delta_j)`,
/// with `delta_i = t_{i+1} - t_i` and the last interval ending at `far`.
/// The field receives all sample points, bundle by bundle.
pub fn march(
    bundles: &[RayBundle],
    field: impl Fn(&[[f64; 3]]) -> FieldSample,
    samples: usize,
    rng: Option<&mut dyn RngCore>,
) -> MarchOutput {
    assert!(samples >= 2);
    let n_rays: usize = bundles.iter().map(|b| b.len()).sum();
    let (near, far) = (bundles[0].near, bundles[0].far);
    assert!(bundles.iter().all(|b| b.near == near && b.far == far), "bundles must share near/far");
    let t = stratified_samples(n_rays, samples, near, far, rng);

    let mut points = Vec::with_capacity(n_rays * samples);
    let mut ray = 0;
    for bundle in bundles {
        for r in 0..bundle.len() {
            for s in 0..samples {
                points.push(bundle.point(r, t[ray * samples + s]));
            }
            ray += 1;
        }
    }
    let mut delta = Vec::with_capacity(t.len());
    for r in 0..n_rays {
        let row = &t[r * samples..(r + 1) * samples];
        for s in 0..samples {
            let next = if s + 1 < samples { row[s + 1] } else { far };
            delta.push(next - row[s]);
        }
    }

    let FieldSample { density, feature } = field(&points);
    let f = feature.shape()[1];
    let optical = density.reshape(&[n_rays, samples]).mul(&Tensor::from_vec(&[n_rays, samples], delta));
    // strictly-upper-triangular ones: column i sums the optical depths before i
    let mut tri = ArrayD::zeros(IxDyn(&[samples, samples]));
    for j in 0..samples {
        for i in (j + 1)..samples {
            tri[[j, i]] = 1.0;
        }
    }
    let before = optical.matmul(&Tensor::constant(tri));
    let partial = before.neg().exp();
    let alpha = optical.neg().exp().neg().add_scalar(1.0);
    let weights = partial.mul(&alpha);
    let feature = weights.reshape(&[n_rays, samples, 1]).mul(&feature.reshape(&[n_rays, samples, f])).sum_axis(1, false);
    let transmittance = optical.sum_axis(1, true).neg().exp();

    let w = weights.value();
    let depth = (0..n_rays)
        .map(|r| {
            let mut sw = 0.0;
            let mut swt = 0.0;
            for s in 0..samples {
                let wi = w[[r, s]];
                sw += wi;
                swt += wi * t[r * samples + s];
            }
            if sw <= EMPTY_RAY_WEIGHT {
                far
            } else {
                (swt / sw).clamp(near, far)
            }
        })
        .collect();
    MarchOutput { feature, transmittance, weights, partial_transmittance: partial, depth, t }
}

/// Over-compositing of a pre-weighted foreground onto the background.
pub fn composite(fg: &Tensor, transmittance: &Tensor, bg: &Tensor) -> Tensor {
    fg.add(&transmittance.mul(bg))
}

/// Bilinear upsampling followed by a three-layer convolutional refiner.
///
/// The refiner's output is added to the upsampled first three feature
/// channels, so a zeroed last layer reproduces the bilinear RGB exactly.
#[derive(Debug, Clone)]
pub struct Upsampler {
    pub convs: Vec<Conv2d>,
}

impl Upsampler {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, width: usize, rng: &mut R) -> Upsampler {
        Upsampler {
            convs: vec![
                Conv2d::new(feature_dim, width, 3, 1, 1.0, rng),
                Conv2d::new(width, width, 3, 1, 1.0, rng),
                Conv2d::new(width, 3, 3, 1, 0.1, rng),
            ],
        }
    }

    /// Zeroes the last layer so the output is the bilinear upsample of the RGB channels.
    pub fn identity_init(&mut self) {
        self.convs.last_mut().unwrap().zero_();
    }

    pub fn forward(&self, feature_map: &Tensor, output_resolution: usize) -> Tensor {
        let up = bilinear_resize(feature_map, output_resolution);
        let skip = up.narrow(3, 0, 3);
        let mut h = up;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h);
            if i < last {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        skip.add(&h).clamp(0.0, 1.0)
    }
}

impl Module for Upsampler {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.convs.iter().enumerate().flat_map(|(i, c)| prefixed(&format!("conv{i}"), c.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.convs.iter_mut().enumerate().flat_map(|(i, c)| prefixed(&format!("conv{i}"), c.params_mut())).collect()
    }
}

pub fn upsample(feature_map: &Tensor, upsampler: &Upsampler, output_resolution: usize) -> Tensor {
    upsampler.forward(feature_map, output_resolution)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub upsampler_width: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { field: FieldConfig::default(), render: RenderConfig::default(), upsampler_width: 32 }
    }
}

/// Output of one generator pass over a batch.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `(B, n, n, F)` composited low-resolution features.
    pub feature_map: Tensor,
    /// `(B, N, N, 3)` final image in [0, 1].
    pub rgb: Tensor,
    /// `(B, n, n)` expected foreground depth.
    pub depth: Array3<f64>,
    /// `(B, n, n, 1)` background transmittance.
    pub transmittance: Tensor,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub mapping: MappingNet,
    pub decoder: Decoder,
    pub background: BackgroundNet,
    pub upsampler: Upsampler,
}

/// Independent deterministic stream `stream` of `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Generator {
        let f = &cfg.field;
        let mapping = MappingNet::new(f, &mut seeded_stream(seed, 1));
        let decoder = Decoder::new(f, &mut seeded_stream(seed, 2));
        let background = BackgroundNet::new(f, &mut seeded_stream(seed, 3));
        let upsampler = Upsampler::new(f.feature_dim, cfg.upsampler_width, &mut seeded_stream(seed, 4));
        Generator { cfg, mapping, decoder, background, upsampler }
    }

    pub fn rays(&self, poses: &[CameraPose]) -> Vec<RayBundle> {
        let rc = &self.cfg.render;
        poses.iter().map(|p| generate_rays(p, rc.neural_resolution).with_range(rc.near, rc.far)).collect()
    }

    /// Renders `(z_fg, z_bg)` batches at the given poses. Without `rng` the
    /// samples sit at bin midpoints.
    pub fn render(&self, z_fg: &Tensor, z_bg: &Tensor, poses: &[CameraPose], rng: Option<&mut dyn RngCore>) -> RenderOutput {
        let batch = poses.len();
        assert_eq!(z_fg.shape()[0], batch);
        assert_eq!(z_bg.shape()[0], batch);
        let rc = &self.cfg.render;
        let n = rc.neural_resolution;
        let planes = synthesize_triplane(z_fg, poses, &self.mapping);
        let bundles = self.rays(poses);
        let fg = march(&bundles, |pts| decode(&query_triplane(&planes, pts), &self.decoder), rc.samples_per_ray, rng);

        let far_points: Vec<[f64; 3]> = bundles.iter().flat_map(|b| (0..b.len()).map(move |r| b.point(r, b.far))).collect();
        let bg = background_field(z_bg, &far_points, &self.background);
        let fdim = self.cfg.field.feature_dim;
        let features = composite(&fg.feature, &fg.transmittance, &bg);
        let feature_map = features.reshape(&[batch, n, n, fdim]);
        let rgb = self.upsampler.forward(&feature_map, rc.output_resolution);
        let depth = Array3::from_shape_vec((batch, n, n), fg.depth).expect("depth shape");
        RenderOutput { feature_map, rgb, depth, transmittance: fg.transmittance.reshape(&[batch, n, n, 1]) }
    }

    /// Foreground density at `points`, split evenly and in order across the
    /// latents. `poses` only matter when the mapping is pose-conditioned.
    pub fn density_at(&self, z_fg: &Tensor, poses: &[CameraPose], points: &[[f64; 3]]) -> Tensor {
        let planes = synthesize_triplane(z_fg, poses, &self.mapping);
        decode_density(&query_triplane(&planes, points), &self.decoder)
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<_> = prefixed("mapping", self.mapping.params()).collect();
        v.extend(prefixed("decoder", self.decoder.params()));
        v.extend(prefixed("background", self.background.params()));
        v.extend(prefixed("upsampler", self.upsampler.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<_> = prefixed("mapping", self.mapping.params_mut()).collect();
        v.extend(prefixed("decoder", self.decoder.params_mut()));
        v.extend(prefixed("background", self.background.params_mut()));
        v.extend(prefixed("upsampler", self.upsampler.params_mut()));
        v
    }
}
