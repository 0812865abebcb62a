//! Alternating discriminator/generator updates, run configuration,
//! checkpointing, resumption and the ablation matrix.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sidegan_autograd::{grad, no_grad, Adam, Tensor};

use crate::camera::{sample_negative_pose, sample_pose, sample_pose_tagged, CameraPose, PoseDistribution, PoseSource};
use crate::checkpoint;
use crate::data::{load_dataset, Sample};
use crate::disc::{DiscConfig, Discriminator};
use crate::error::{Error, Result};
use crate::fields::{stack_latents, FieldConfig, LatentPair};
use crate::losses::{
    density_reg, gan_loss_dis_terms, gan_loss_gen, identity_loss_c_from, identity_loss_z_from_embeddings, pose_loss_dis,
    pose_loss_gen, pose_regression_loss_baseline, total_loss_dis_tensor, total_loss_gen_tensor, DisLossTerms, GenLossTerms,
    IdentityEmbedder, LossWeights,
};
use crate::nn::Module;
use crate::render::{Generator, GeneratorConfig, RenderConfig};

/// Flat run configuration; every key has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory or its `manifest.json`.
    pub dataset: PathBuf,
    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub lambda_pose: f64,
    pub lambda_z: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_r1: f64,
    pub eps_c: f64,
    /// R1 is applied every this many steps and scaled by it; 0 disables R1.
    pub r1_interval: u64,
    /// Identity and density regularizers run every this many steps.
    pub reg_interval: u64,

    pub use_pose_branch: bool,
    pub use_pose_matching: bool,
    pub use_pose_regression_baseline: bool,
    pub use_aups: bool,
    pub use_identity_reg: bool,
    pub use_density_reg: bool,

    pub mixture_ratio: f64,
    pub uniform_yaw_deg: f64,
    pub uniform_pitch_deg: f64,
    pub negative_min_separation_deg: f64,
    /// Fakes rendered at dataset poses for the pose and identity terms when AUPS is on.
    pub pose_batch: usize,
    /// Latents per step used by the identity terms.
    pub identity_batch: usize,
    pub density_sigma: f64,
    pub density_points: usize,

    pub z_fg_dim: usize,
    pub z_bg_dim: usize,
    pub plane_res: usize,
    pub plane_channels: usize,
    pub feature_dim: usize,
    pub mapping_width: usize,
    pub decoder_width: usize,
    pub bg_width: usize,
    pub pe_octaves: usize,
    pub pose_conditioning: bool,
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub neural_resolution: usize,
    pub output_resolution: usize,
    pub upsampler_width: usize,
    pub disc_channels: Vec<usize>,
    pub disc_head_width: usize,
    pub pose_dim: usize,
    pub encoder_width: usize,

    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// 0 disables the periodic evaluation hook.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let f = FieldConfig::default();
        let r = RenderConfig::default();
        let d = DiscConfig::default();
        let w = LossWeights::default();
        TrainConfig {
            dataset: PathBuf::from("data"),
            seed: 0,
            batch_size: 16,
            total_steps: 20_000,
            lr_g: 2e-3,
            lr_d: 2e-3,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            lambda_pose: w.lambda_pose,
            lambda_z: w.lambda_z,
            lambda_c: w.lambda_c,
            lambda_d: w.lambda_d,
            lambda_r1: w.lambda_r1,
            eps_c: w.eps_c,
            r1_interval: 16,
            reg_interval: 1,
            use_pose_branch: true,
            use_pose_matching: true,
            use_pose_regression_baseline: false,
            use_aups: true,
            use_identity_reg: true,
            use_density_reg: true,
            mixture_ratio: 0.5,
            uniform_yaw_deg: 50.0,
            uniform_pitch_deg: 15.0,
            negative_min_separation_deg: 10.0,
            pose_batch: 8,
            identity_batch: 4,
            density_sigma: 0.02,
            density_points: 64,
            z_fg_dim: f.z_fg_dim,
            z_bg_dim: f.z_bg_dim,
            plane_res: f.plane_res,
            plane_channels: f.plane_channels,
            feature_dim: f.feature_dim,
            mapping_width: f.mapping_width,
            decoder_width: f.decoder_width,
            bg_width: f.bg_width,
            pe_octaves: f.pe_octaves,
            pose_conditioning: f.pose_conditioning,
            samples_per_ray: r.samples_per_ray,
            near: r.near,
            far: r.far,
            neural_resolution: r.neural_resolution,
            output_resolution: r.output_resolution,
            upsampler_width: 32,
            disc_channels: d.channels,
            disc_head_width: d.head_width,
            pose_dim: d.pose_dim,
            encoder_width: d.encoder_width,
            checkpoint_every: 1000,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> std::result::Result<TrainConfig, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| Error::format(path, e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.use_pose_matching && !self.use_pose_branch {
            return bad("use_pose_matching requires use_pose_branch");
        }
        if self.use_pose_matching && self.use_pose_regression_baseline {
            return bad("use_pose_matching and use_pose_regression_baseline are mutually exclusive");
        }
        if self.batch_size == 0 || self.pose_batch == 0 {
            return bad("batch_size and pose_batch must be positive");
        }
        if self.use_identity_reg && (self.identity_batch == 0 || self.identity_batch > self.pose_batch.min(self.batch_size)) {
            return bad("identity_batch must be in 1..=min(pose_batch, batch_size)");
        }
        if self.reg_interval == 0 {
            return bad("reg_interval must be at least 1");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad("learning rates must be positive");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.density_sigma >= 0.0) || self.density_points == 0 {
            return bad("density_sigma must be non-negative and density_points positive");
        }
        if !(self.negative_min_separation_deg > 0.0) {
            return bad("negative_min_separation_deg must be positive");
        }
        if !(0.0..=1.0).contains(&self.mixture_ratio) {
            return bad("mixture_ratio must lie in [0, 1]");
        }
        if !(0.0..=90.0).contains(&self.uniform_yaw_deg) || !(0.0..=45.0).contains(&self.uniform_pitch_deg) {
            return bad("uniform pose ranges exceed the camera limits");
        }
        if self.disc_channels.is_empty() {
            return bad("disc_channels must not be empty");
        }
        self.loss_weights().validate()?;
        self.generator_config().render.validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_pose: self.lambda_pose,
            lambda_z: self.lambda_z,
            lambda_c: self.lambda_c,
            lambda_d: self.lambda_d,
            lambda_r1: self.lambda_r1,
            eps_c: self.eps_c,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            field: FieldConfig {
                z_fg_dim: self.z_fg_dim,
                z_bg_dim: self.z_bg_dim,
                plane_res: self.plane_res,
                plane_channels: self.plane_channels,
                feature_dim: self.feature_dim,
                mapping_width: self.mapping_width,
                decoder_width: self.decoder_width,
                bg_width: self.bg_width,
                pe_octaves: self.pe_octaves,
                pose_conditioning: self.pose_conditioning,
            },
            render: RenderConfig {
                samples_per_ray: self.samples_per_ray,
                near: self.near,
                far: self.far,
                neural_resolution: self.neural_resolution,
                output_resolution: self.output_resolution,
            },
            upsampler_width: self.upsampler_width,
        }
    }

    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig {
            resolution: self.output_resolution,
            channels: self.disc_channels.clone(),
            head_width: self.disc_head_width,
            pose_dim: self.pose_dim,
            encoder_width: self.encoder_width,
            use_pose_branch: self.use_pose_branch,
            use_regression_head: self.use_pose_regression_baseline,
        }
    }

    /// SHA-256 of everything that affects the trajectory. Step counts,
    /// cadences and the dataset location are excluded so runs can be
    /// extended and moved.
    pub fn config_hash(&self) -> String {
        let d = TrainConfig::default();
        let canonical = TrainConfig {
            dataset: d.dataset,
            total_steps: d.total_steps,
            checkpoint_every: d.checkpoint_every,
            eval_every: d.eval_every,
            ..self.clone()
        };
        hex::encode(Sha256::digest(canonical.to_toml_string().as_bytes()))
    }

    /// The five ablation rows, named, built from `base` by changing flags only.
    pub fn ablation_matrix(&self) -> Vec<(String, TrainConfig)> {
        build_ablation_matrix(self)
    }
}

pub fn build_ablation_matrix(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |branch: bool, matching: bool, regression: bool, aups: bool, identity: bool| TrainConfig {
        use_pose_branch: branch,
        use_pose_matching: matching,
        use_pose_regression_baseline: regression,
        use_aups: aups,
        use_identity_reg: identity,
        ..base.clone()
    };
    vec![
        ("baseline".into(), with(false, false, false, false, false)),
        ("baseline_aups".into(), with(false, false, false, true, false)),
        ("full_no_identity".into(), with(true, true, false, true, false)),
        ("full".into(), with(true, true, false, true, true)),
        ("full_pose_regression".into(), with(false, false, true, true, true)),
    ]
}

/// Networks, optimizer moments and the step counter. Randomness is derived
/// from `(seed, step)`, so nothing else is needed to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub gen: Generator,
    pub disc: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> TrainState {
        TrainState {
            step: 0,
            gen: Generator::new(cfg.generator_config(), cfg.seed),
            disc: Discriminator::new(cfg.disc_config(), cfg.seed),
            opt_g: Adam::new(cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            opt_d: Adam::new(cfg.lr_d, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        }
    }

    pub fn weight_norms(&self) -> String {
        format!("generator {:.6e}, discriminator {:.6e}", self.gen.weight_norm(), self.disc.weight_norm())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    step: u64,
    config_hash: String,
    opt_g_step: u64,
    opt_d_step: u64,
    config: String,
}

const CHECKPOINT_FORMAT: &str = "sidegan-checkpoint-1";

fn optimizer_tensors<'a>(prefix: &str, opt: &'a Adam, names: &[String], out: &mut Vec<(String, &'a ArrayD<f64>)>) {
    for (i, name) in names.iter().enumerate() {
        if let (Some(m), Some(v)) = (opt.m.get(i), opt.v.get(i)) {
            out.push((format!("{prefix}.m.{name}"), m));
            out.push((format!("{prefix}.v.{name}"), v));
        }
    }
}

/// Writes the full state, including optimizer moments, to one archive.
pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        step: state.step,
        config_hash: cfg.config_hash(),
        opt_g_step: state.opt_g.step,
        opt_d_step: state.opt_d.step,
        config: cfg.to_toml_string(),
    };
    let g_params = state.gen.params();
    let d_params = state.disc.params();
    let g_names: Vec<String> = g_params.iter().map(|(n, _)| n.clone()).collect();
    let d_names: Vec<String> = d_params.iter().map(|(n, _)| n.clone()).collect();
    let mut tensors: Vec<(String, &ArrayD<f64>)> = Vec::new();
    tensors.extend(g_params.iter().map(|(n, t)| (format!("gen.{n}"), t.value())));
    tensors.extend(d_params.iter().map(|(n, t)| (format!("disc.{n}"), t.value())));
    optimizer_tensors("opt_g", &state.opt_g, &g_names, &mut tensors);
    optimizer_tensors("opt_d", &state.opt_d, &d_names, &mut tensors);
    let json = serde_json::to_string(&manifest).expect("manifest serializes");
    checkpoint::save(path, &tensors, &json)
}

fn take(tensors: &mut std::collections::HashMap<String, ArrayD<f64>>, key: &str, like: &[usize], path: &Path) -> Result<ArrayD<f64>> {
    let a = tensors.remove(key).ok_or_else(|| Error::format(path, format!("missing tensor {key}")))?;
    if a.shape() != like {
        return Err(Error::format(path, format!("tensor {key} has shape {:?}, expected {like:?}", a.shape())));
    }
    Ok(a)
}

fn restore_module(
    module: &mut dyn Module,
    prefix: &str,
    tensors: &mut std::collections::HashMap<String, ArrayD<f64>>,
    path: &Path,
) -> Result<()> {
    for (name, p) in module.params_mut() {
        let a = take(tensors, &format!("{prefix}.{name}"), p.shape(), path)?;
        *p = Tensor::param(a);
    }
    Ok(())
}

fn restore_optimizer(
    opt: &mut Adam,
    prefix: &str,
    shapes: &[(String, Vec<usize>)],
    tensors: &mut std::collections::HashMap<String, ArrayD<f64>>,
    path: &Path,
) -> Result<()> {
    if opt.step == 0 {
        return Ok(());
    }
    opt.m.clear();
    opt.v.clear();
    for (name, shape) in shapes {
        opt.m.push(take(tensors, &format!("{prefix}.m.{name}"), shape, path)?);
        opt.v.push(take(tensors, &format!("{prefix}.v.{name}"), shape, path)?);
    }
    Ok(())
}

/// Configuration stored in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
    let (_, manifest) = checkpoint::load(path)?;
    let m: CheckpointManifest = serde_json::from_str(&manifest).map_err(|e| Error::format(path, e))?;
    TrainConfig::from_toml_str(&m.config).map_err(|e| Error::format(path, e.message()))
}

/// Restores the configuration and full state saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let (mut tensors, manifest) = checkpoint::load(path)?;
    let m: CheckpointManifest = serde_json::from_str(&manifest).map_err(|e| Error::format(path, e))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::format(path, format!("unknown checkpoint format {}", m.format)));
    }
    let cfg = TrainConfig::from_toml_str(&m.config).map_err(|e| Error::format(path, e.message()))?;
    let mut state = TrainState::new(&cfg);
    state.step = m.step;
    state.opt_g.step = m.opt_g_step;
    state.opt_d.step = m.opt_d_step;
    restore_module(&mut state.gen, "gen", &mut tensors, path)?;
    restore_module(&mut state.disc, "disc", &mut tensors, path)?;
    let shapes = |module: &dyn Module| -> Vec<(String, Vec<usize>)> {
        module.params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
    };
    let (gs, ds) = (shapes(&state.gen), shapes(&state.disc));
    restore_optimizer(&mut state.opt_g, "opt_g", &gs, &mut tensors, path)?;
    restore_optimizer(&mut state.opt_d, "opt_d", &ds, &mut tensors, path)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }
    Ok((cfg, state))
}

/// Copies network weights from a checkpoint into `state`, leaving its
/// optimizers and step untouched. Every tensor of `state` must be present.
pub fn init_weights_from(state: &mut TrainState, path: &Path) -> Result<()> {
    let (mut tensors, _) = checkpoint::load(path)?;
    restore_module(&mut state.gen, "gen", &mut tensors, path)?;
    restore_module(&mut state.disc, "disc", &mut tensors, path)
}

/// Independent random streams used within one step.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Purpose {
    DLatents = 1,
    DPoses,
    DJitter,
    DPoseLatents,
    DPosePoses,
    DPoseJitter,
    DNegatives,
    GLatents,
    GPoses,
    GJitter,
    GPoseLatents,
    GPosePoses,
    GPoseJitter,
    GNegatives,
    IdLatents,
    IdPoses,
    IdJitter,
    Density,
    Epoch,
}

/// Deterministic generator for `(seed, step, purpose)`.
fn step_rng(seed: u64, step: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16] = 0x5d;
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(purpose as u64);
    rng
}

/// Real images stacked as `(B, H, W, 3)` with their poses.
#[derive(Debug, Clone)]
pub struct RealBatch {
    pub images: Tensor,
    pub poses: Vec<CameraPose>,
}

impl RealBatch {
    pub fn from_samples(samples: &[&Sample]) -> RealBatch {
        let (h, w, _) = samples[0].image.dim();
        let data: Vec<f64> = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
        RealBatch {
            images: Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[samples.len(), h, w, 3]), data).expect("equal image sizes")),
            poses: samples.iter().map(|s| s.pose).collect(),
        }
    }
}

/// Everything a step needs besides the mutable state.
pub struct TrainContext {
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub samples: Arc<Vec<Sample>>,
    /// Empirical distribution of the dataset poses.
    pub empirical: PoseDistribution,
    /// Distribution of fake poses for the adversarial terms.
    pub adversarial: PoseDistribution,
    pub embedder: IdentityEmbedder,
}

impl TrainContext {
    pub fn new(cfg: TrainConfig, samples: Vec<Sample>) -> Result<TrainContext> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Config("training needs at least one real image".into()));
        }
        let r = cfg.output_resolution;
        if let Some(s) = samples.iter().find(|s| s.image.dim() != (r, r, 3)) {
            return Err(Error::Config(format!("image {} is {:?}, expected {r}x{r}x3", s.id, s.image.dim())));
        }
        let poses = Arc::new(samples.iter().map(|s| s.pose).collect::<Vec<_>>());
        let empirical = PoseDistribution::dataset(poses.clone());
        let yaw = cfg.uniform_yaw_deg.to_radians();
        let pitch = cfg.uniform_pitch_deg.to_radians();
        let adversarial = if cfg.use_aups {
            PoseDistribution::aups(poses, cfg.mixture_ratio, (-yaw, yaw), (-pitch, pitch))
        } else {
            empirical.clone()
        };
        adversarial.validate()?;
        let embedder = IdentityEmbedder::new(r, cfg.seed);
        Ok(TrainContext { weights: cfg.loss_weights(), cfg, samples: Arc::new(samples), empirical, adversarial, embedder })
    }

    pub fn from_dataset(cfg: TrainConfig) -> Result<TrainContext> {
        let samples = load_dataset(&cfg.dataset)?.load_all()?;
        TrainContext::new(cfg, samples)
    }

    /// Real batch for `step`: consecutive slices of per-epoch seeded permutations.
    pub fn real_batch(&self, step: u64) -> RealBatch {
        let n = self.samples.len();
        let b = self.cfg.batch_size;
        let mut picked = Vec::with_capacity(b);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for i in 0..b {
            let pos = step * b as u64 + i as u64;
            let epoch = pos / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut step_rng(self.cfg.seed, epoch, Purpose::Epoch));
                cached = Some((epoch, order));
            }
            let order = &cached.as_ref().expect("filled above").1;
            picked.push(&self.samples[order[(pos % n as u64) as usize]]);
        }
        RealBatch::from_samples(&picked)
    }

    fn min_separation(&self) -> f64 {
        self.cfg.negative_min_separation_deg.to_radians()
    }

    fn negatives(&self, positives: &[CameraPose], rng: &mut ChaCha8Rng) -> Result<Vec<CameraPose>> {
        positives.iter().map(|p| sample_negative_pose(p, &self.empirical, self.min_separation(), rng)).collect()
    }
}

/// Per-step loss components and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub adv_gen: f64,
    pub pose_gen: Option<f64>,
    pub pose_reg_gen: Option<f64>,
    pub id_z: Option<f64>,
    pub id_c: Option<f64>,
    pub density: Option<f64>,
    /// Fake and real terms of the discriminator's adversarial loss, without R1.
    pub adv_dis: f64,
    pub pose_dis: Option<f64>,
    pub pose_reg_dis: Option<f64>,
    /// Unweighted R1 penalty on steps where it was applied.
    pub r1: Option<f64>,
    pub total_gen: f64,
    pub total_dis: f64,
    /// Fraction of real logits above 0 and fake logits below 0.
    pub d_accuracy: f64,
    pub adv_fake_poses: Vec<CameraPose>,
    pub adv_fake_sources: Vec<PoseSource>,
    pub pose_fake_poses: Vec<CameraPose>,
}

pub const LOSS_CSV_HEADER: [&str; 9] = ["step", "adv_gen", "pose_gen", "id_z", "id_c", "density", "adv_dis", "pose_dis", "r1"];
pub const DIAGNOSTICS_CSV_HEADER: [&str; 6] = ["step", "pose_reg_gen", "pose_reg_dis", "total_gen", "total_dis", "d_accuracy"];

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl LossRecord {
    pub fn loss_row(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.adv_gen.to_string(),
            opt_cell(self.pose_gen),
            opt_cell(self.id_z),
            opt_cell(self.id_c),
            opt_cell(self.density),
            self.adv_dis.to_string(),
            opt_cell(self.pose_dis),
            opt_cell(self.r1),
        ]
    }

    pub fn diagnostics_row(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            opt_cell(self.pose_reg_gen),
            opt_cell(self.pose_reg_dis),
            self.total_gen.to_string(),
            self.total_dis.to_string(),
            self.d_accuracy.to_string(),
        ]
    }
}

fn sample_latents(cfg: &FieldConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<LatentPair> {
    (0..n).map(|_| LatentPair::sample(cfg, rng)).collect()
}

fn sample_poses(dist: &PoseDistribution, n: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<CameraPose>, Vec<PoseSource>)> {
    let mut poses = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, s) = sample_pose_tagged(dist, rng)?;
        poses.push(p);
        sources.push(s);
    }
    Ok((poses, sources))
}

fn render_rgb(gen: &Generator, latents: &[LatentPair], poses: &[CameraPose], jitter: &mut ChaCha8Rng) -> Tensor {
    let (zf, zb) = stack_latents(latents);
    gen.render(&zf, &zb, poses, Some(jitter as &mut dyn RngCore)).rgb
}

fn finite(step: u64, component: &str, value: f64, state: &TrainState) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { step, component: component.to_string(), weight_norms: state.weight_norms() })
    }
}

fn check_terms(step: u64, named: &[(&str, Option<f64>)], state: &TrainState) -> Result<()> {
    for (name, v) in named {
        if let Some(v) = v {
            finite(step, name, *v, state)?;
        }
    }
    Ok(())
}

fn gradients(loss: &Tensor, module: &dyn Module) -> Vec<ArrayD<f64>> {
    let params: Vec<&Tensor> = module.params().into_iter().map(|(_, t)| t).collect();
    grad(loss, &params, false).into_iter().map(Tensor::into_value).collect()
}

fn apply(opt: &mut Adam, module: &mut dyn Module, grads: &[ArrayD<f64>]) {
    let mut params: Vec<&mut Tensor> = module.params_mut().into_iter().map(|(_, t)| t).collect();
    opt.update(&mut params, grads);
}

/// Discriminator-side results of one step.
#[derive(Debug, Clone)]
pub struct DiscStep {
    pub adv_dis: f64,
    pub pose_dis: Option<f64>,
    pub pose_reg_dis: Option<f64>,
    pub r1: Option<f64>,
    pub total_dis: f64,
    pub d_accuracy: f64,
    pub adv_fake_poses: Vec<CameraPose>,
    pub adv_fake_sources: Vec<PoseSource>,
    pub pose_fake_poses: Vec<CameraPose>,
}

/// Generator-side results of one step.
#[derive(Debug, Clone)]
pub struct GenStep {
    pub adv_gen: f64,
    pub pose_gen: Option<f64>,
    pub pose_reg_gen: Option<f64>,
    pub id_z: Option<f64>,
    pub id_c: Option<f64>,
    pub density: Option<f64>,
    pub total_gen: f64,
}

/// Updates only the discriminator, using the randomness of the current step.
pub fn discriminator_step(state: &mut TrainState, batch: &RealBatch, ctx: &TrainContext) -> Result<DiscStep> {
    let cfg = &ctx.cfg;
    let w = &ctx.weights;
    let s = state.step;
    let rng = |p: Purpose| step_rng(cfg.seed, s, p);
    let fcfg = state.gen.cfg.field.clone();
    let b = cfg.batch_size;
    let pose_supervised = cfg.use_pose_matching || cfg.use_pose_regression_baseline;
    let d_latents = sample_latents(&fcfg, b, &mut rng(Purpose::DLatents));
    let (adv_poses, adv_sources) = sample_poses(&ctx.adversarial, b, &mut rng(Purpose::DPoses))?;
    let fake_adv = no_grad(|| render_rgb(&state.gen, &d_latents, &adv_poses, &mut rng(Purpose::DJitter)));
    let with_r1 = cfg.r1_interval > 0 && s % cfg.r1_interval == 0;
    let adv = gan_loss_dis_terms(&batch.images, &fake_adv, &state.disc, with_r1)?;
    let mut adv_dis = adv.fake.add(&adv.real);
    let adv_dis_value = adv_dis.item();
    if let Some(r1) = &adv.r1 {
        adv_dis = adv_dis.add(&r1.scale(w.lambda_r1 * cfg.r1_interval as f64));
    }
    let (d_pose_fakes, d_pose_poses) = if !pose_supervised {
        (None, Vec::new())
    } else if cfg.use_aups {
        let lat = sample_latents(&fcfg, cfg.pose_batch, &mut rng(Purpose::DPoseLatents));
        let (poses, _) = sample_poses(&ctx.empirical, cfg.pose_batch, &mut rng(Purpose::DPosePoses))?;
        let img = no_grad(|| render_rgb(&state.gen, &lat, &poses, &mut rng(Purpose::DPoseJitter)));
        (Some(img), poses)
    } else {
        (Some(fake_adv.clone()), adv_poses.clone())
    };
    let mut pose_dis = None;
    let mut pose_reg_dis = None;
    if let Some(fakes) = &d_pose_fakes {
        if cfg.use_pose_matching {
            let mut nrng = rng(Purpose::DNegatives);
            let real_neg = ctx.negatives(&batch.poses, &mut nrng)?;
            let fake_neg = ctx.negatives(&d_pose_poses, &mut nrng)?;
            pose_dis =
                Some(pose_loss_dis(&batch.images, &batch.poses, &real_neg, fakes, &d_pose_poses, &fake_neg, &state.disc)?);
        } else {
            let real = pose_regression_loss_baseline(&batch.images, &batch.poses, &state.disc)?;
            let fake = pose_regression_loss_baseline(&fakes.detach(), &d_pose_poses, &state.disc)?;
            pose_reg_dis = Some(real.add(&fake));
        }
    }
    let d_terms = DisLossTerms { adv: adv_dis, pose: pose_dis, pose_reg: pose_reg_dis };
    let total_dis = total_loss_dis_tensor(&d_terms, w);
    let r1_value = adv.r1.as_ref().map(Tensor::item);
    let dv = d_terms.values();
    check_terms(s, &[("adv_dis", Some(adv_dis_value)), ("pose_dis", dv.pose), ("pose_reg_dis", dv.pose_reg), ("r1", r1_value)], state)?;
    let total_dis_value = finite(s, "total_dis", total_dis.item(), state)?;
    let real_logits = adv.real_logits.value();
    let fake_logits = adv.fake_logits.value();
    let correct = real_logits.iter().filter(|&&x| x > 0.0).count() + fake_logits.iter().filter(|&&x| x < 0.0).count();
    let d_accuracy = correct as f64 / (real_logits.len() + fake_logits.len()) as f64;
    let d_grads = gradients(&total_dis, &state.disc);
    drop((d_terms, adv, total_dis, d_pose_fakes));
    apply(&mut state.opt_d, &mut state.disc, &d_grads);

    Ok(DiscStep {
        adv_dis: adv_dis_value,
        pose_dis: dv.pose,
        pose_reg_dis: dv.pose_reg,
        r1: r1_value,
        total_dis: total_dis_value,
        d_accuracy,
        adv_fake_poses: adv_poses,
        adv_fake_sources: adv_sources,
        pose_fake_poses: d_pose_poses,
    })
}

/// Updates only the generator, using the randomness of the current step. The step counter is not advanced.
pub fn generator_step(state: &mut TrainState, ctx: &TrainContext) -> Result<GenStep> {
    let cfg = &ctx.cfg;
    let w = &ctx.weights;
    let s = state.step;
    let rng = |p: Purpose| step_rng(cfg.seed, s, p);
    let fcfg = state.gen.cfg.field.clone();
    let b = cfg.batch_size;
    let pose_supervised = cfg.use_pose_matching || cfg.use_pose_regression_baseline;
    let g_latents = sample_latents(&fcfg, b, &mut rng(Purpose::GLatents));
    let (g_poses, _) = sample_poses(&ctx.adversarial, b, &mut rng(Purpose::GPoses))?;
    let fake = render_rgb(&state.gen, &g_latents, &g_poses, &mut rng(Purpose::GJitter));
    let adv_gen = gan_loss_gen(&fake, &state.disc)?;
    let needs_pose_batch = pose_supervised || cfg.use_identity_reg;
    let (pose_latents, pose_poses, pose_fakes) = if !needs_pose_batch {
        (Vec::new(), Vec::new(), None)
    } else if cfg.use_aups {
        let lat = sample_latents(&fcfg, cfg.pose_batch, &mut rng(Purpose::GPoseLatents));
        let (poses, _) = sample_poses(&ctx.empirical, cfg.pose_batch, &mut rng(Purpose::GPosePoses))?;
        let img = render_rgb(&state.gen, &lat, &poses, &mut rng(Purpose::GPoseJitter));
        (lat, poses, Some(img))
    } else {
        (g_latents.clone(), g_poses.clone(), Some(fake.clone()))
    };
    let mut pose_gen = None;
    let mut pose_reg_gen = None;
    if let Some(fakes) = &pose_fakes {
        if cfg.use_pose_matching {
            let neg = ctx.negatives(&pose_poses, &mut rng(Purpose::GNegatives))?;
            pose_gen = Some(pose_loss_gen(fakes, &pose_poses, &neg, &state.disc)?);
        } else if cfg.use_pose_regression_baseline {
            pose_reg_gen = Some(pose_regression_loss_baseline(fakes, &pose_poses, &state.disc.frozen())?);
        }
    }
    let reg_now = s % cfg.reg_interval == 0;
    let (mut id_z, mut id_c) = (None, None);
    if cfg.use_identity_reg && reg_now {
        let fakes = pose_fakes.as_ref().expect("rendered above");
        let n = cfg.identity_batch;
        let img1 = fakes.narrow(0, 0, n);
        let e1 = ctx.embedder.embed(&img1)?;
        let mut jitter = rng(Purpose::IdJitter);
        let z2 = sample_latents(&fcfg, n, &mut rng(Purpose::IdLatents));
        let img2 = render_rgb(&state.gen, &z2, &pose_poses[..n], &mut jitter);
        id_z = Some(identity_loss_z_from_embeddings(&e1, &ctx.embedder.embed(&img2)?));
        let mut prng = rng(Purpose::IdPoses);
        let mut second = Some(Vec::with_capacity(n));
        for p in &pose_poses[..n] {
            let mut found = None;
            for _ in 0..32 {
                let q = sample_pose(&ctx.empirical, &mut prng)?;
                if q.flat != p.flat {
                    found = Some(q);
                    break;
                }
            }
            match (found, second.as_mut()) {
                (Some(q), Some(v)) => v.push(q),
                _ => second = None,
            }
        }
        if let Some(xi2) = second {
            let img3 = render_rgb(&state.gen, &pose_latents[..n], &xi2, &mut jitter);
            id_c = Some(identity_loss_c_from(&e1, &ctx.embedder.embed(&img3)?, &img1, &img3, w.eps_c));
        }
    }
    let density = if cfg.use_density_reg && reg_now {
        let (zf, _) = stack_latents(&g_latents);
        Some(density_reg(&zf, &g_poses, &state.gen, cfg.density_sigma, cfg.density_points, &mut rng(Purpose::Density)))
    } else {
        None
    };
    let g_terms = GenLossTerms { adv: adv_gen, pose: pose_gen, pose_reg: pose_reg_gen, id_z, id_c, density };
    let total_gen = total_loss_gen_tensor(&g_terms, w);
    let gv = g_terms.values();
    check_terms(
        s,
        &[
            ("adv_gen", Some(gv.adv)),
            ("pose_gen", gv.pose),
            ("pose_reg_gen", gv.pose_reg),
            ("id_z", gv.id_z),
            ("id_c", gv.id_c),
            ("density", gv.density),
        ],
        state,
    )?;
    let total_gen_value = finite(s, "total_gen", total_gen.item(), state)?;
    let g_grads = gradients(&total_gen, &state.gen);
    drop((g_terms, total_gen, fake, pose_fakes));
    apply(&mut state.opt_g, &mut state.gen, &g_grads);

    Ok(GenStep {
        adv_gen: gv.adv,
        pose_gen: gv.pose,
        pose_reg_gen: gv.pose_reg,
        id_z: gv.id_z,
        id_c: gv.id_c,
        density: gv.density,
        total_gen: total_gen_value,
    })
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut TrainState, batch: &RealBatch, ctx: &TrainContext) -> Result<LossRecord> {
    let d = discriminator_step(state, batch, ctx)?;
    let g = generator_step(state, ctx)?;
    let step = state.step;
    state.step += 1;
    Ok(LossRecord {
        step,
        adv_gen: g.adv_gen,
        pose_gen: g.pose_gen,
        pose_reg_gen: g.pose_reg_gen,
        id_z: g.id_z,
        id_c: g.id_c,
        density: g.density,
        adv_dis: d.adv_dis,
        pose_dis: d.pose_dis,
        pose_reg_dis: d.pose_reg_dis,
        r1: d.r1,
        total_gen: g.total_gen,
        total_dis: d.total_dis,
        d_accuracy: d.d_accuracy,
        adv_fake_poses: d.adv_fake_poses,
        adv_fake_sources: d.adv_fake_sources,
        pose_fake_poses: d.pose_fake_poses,
    })
}

/// Where a run writes its files and how it starts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_dir: PathBuf,
    /// Continue from this checkpoint; its config hash must match.
    pub resume: Option<PathBuf>,
    /// Start from these network weights with fresh optimizers.
    pub init_from: Option<PathBuf>,
}

/// Periodic evaluation on a snapshot; returns named scalar metrics.
pub type EvalHook<'a> = dyn FnMut(&TrainState, &TrainContext) -> Result<Vec<(String, f64)>> + 'a;

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub history: Vec<LossRecord>,
    pub metrics: Vec<(u64, Vec<(String, f64)>)>,
    pub final_checkpoint: PathBuf,
}

/// `<timestamp>-<first 8 hex digits of the config hash>`.
pub fn default_run_name(cfg: &TrainConfig) -> String {
    format!("{}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S"), &cfg.config_hash()[..8])
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:08}.safetensors"))
}

fn append_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| Error::format(path, e))?;
    }
    for row in rows {
        w.write_record(row).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keeps only rows with `step < keep_below`, so a resumed run does not duplicate lines.
fn truncate_csv(path: &Path, keep_below: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let step = line.split(',').next().and_then(|c| c.parse::<u64>().ok());
        if i == 0 || step.is_some_and(|s| s < keep_below) {
            writeln!(out, "{line}").expect("string write");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs training to `cfg.total_steps`, writing logs and checkpoints under `opts.run_dir`.
pub fn run(cfg: &TrainConfig, ctx: &TrainContext, opts: &RunOptions, mut hook: Option<&mut EvalHook<'_>>) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut state = match &opts.resume {
        Some(path) => {
            let (saved, state) = load_checkpoint(path)?;
            let (expected, found) = (cfg.config_hash(), saved.config_hash());
            if expected != found {
                return Err(Error::ResumeMismatch { expected, found });
            }
            state
        }
        None => TrainState::new(cfg),
    };
    if let Some(path) = &opts.init_from {
        init_weights_from(&mut state, path)?;
    }
    let dir = &opts.run_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml_string()).map_err(|e| Error::io(&config_path, e))?;
    let losses_csv = dir.join("losses.csv");
    let diagnostics_csv = dir.join("diagnostics.csv");
    let poses_csv = dir.join("fake_poses.csv");
    let metrics_csv = dir.join("metrics.csv");
    for p in [&losses_csv, &diagnostics_csv, &poses_csv, &metrics_csv] {
        truncate_csv(p, state.step)?;
    }

    let mut history = Vec::new();
    let mut metrics = Vec::new();
    while state.step < cfg.total_steps {
        let batch = ctx.real_batch(state.step);
        let rec = train_step(&mut state, &batch, ctx)?;
        append_csv(&losses_csv, &LOSS_CSV_HEADER, &[rec.loss_row()])?;
        append_csv(&diagnostics_csv, &DIAGNOSTICS_CSV_HEADER, &[rec.diagnostics_row()])?;
        let pose_rows: Vec<Vec<String>> = rec
            .adv_fake_poses
            .iter()
            .zip(&rec.adv_fake_sources)
            .map(|(p, src)| {
                let src = if *src == PoseSource::Dataset { "dataset" } else { "uniform" };
                vec![rec.step.to_string(), "adversarial".into(), src.into(), p.yaw.to_string(), p.pitch.to_string()]
            })
            .chain(rec.pose_fake_poses.iter().map(|p| {
                vec![rec.step.to_string(), "pose".into(), "dataset".into(), p.yaw.to_string(), p.pitch.to_string()]
            }))
            .collect();
        append_csv(&poses_csv, &["step", "use", "source", "yaw_rad", "pitch_rad"], &pose_rows)?;
        log::info!("step {} adv_gen {:.4} adv_dis {:.4} d_acc {:.3}", rec.step, rec.adv_gen, rec.adv_dis, rec.d_accuracy);
        history.push(rec);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.total_steps {
            save_checkpoint(&checkpoint_path(dir, state.step), &state, cfg)?;
        }
        if let Some(h) = hook.as_deref_mut() {
            if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
                let m = h(&state, ctx)?;
                let rows: Vec<Vec<String>> = m.iter().map(|(k, v)| vec![state.step.to_string(), k.clone(), v.to_string()]).collect();
                append_csv(&metrics_csv, &["step", "metric", "value"], &rows)?;
                metrics.push((state.step, m));
            }
        }
    }
    let final_checkpoint = checkpoint_path(dir, state.step);
    save_checkpoint(&final_checkpoint, &state, cfg)?;
    let latest = dir.join("latest.txt");
    let mut f = File::create(&latest).map_err(|e| Error::io(&latest, e))?;
    writeln!(f, "{}", final_checkpoint.display()).map_err(|e| Error::io(&latest, e))?;
    Ok(RunOutcome { state, history, metrics, final_checkpoint })
}
