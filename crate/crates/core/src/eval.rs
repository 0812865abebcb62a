//! Metrics: Fréchet distance in a frozen embedding, affine-aligned depth
//! error, pose-binned image quality and pose-consistency AUC.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sidegan_autograd::{no_grad, Tensor};

use crate::camera::{pose_from_angles, sample_negative_pose, CameraPose, PoseDistribution, DEFAULT_FOCAL, DEFAULT_RADIUS};
use crate::data::{render_scene_analytic, SceneSpec, DATA_PITCH_LIMIT_DEG};
use crate::disc::{pose_match_score, Discriminator};
use crate::error::{Error, Result};
use crate::fields::{stack_latents, LatentPair};
use crate::losses::IdentityEmbedder;
use crate::render::{seeded_stream, Generator};

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;
pub const DEFAULT_N_PER_BIN: usize = 512;
const EDGE_TOL_DEG: f64 = 1e-9;

/// Gaussian fit of a set of embeddings.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Mean and unbiased covariance of the rows of `x`. Needs at least `2 d` rows.
    pub fn from_rows(x: &Array2<f64>) -> Result<FeatureStats> {
        let (n, d) = x.dim();
        if n < 2 * d || n < 2 {
            return Err(Error::Statistical(format!("{n} samples is too few for {d}-dimensional statistics (need {})", 2 * d)));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let centered = x - &mean;
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        let covariance = DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
        Ok(FeatureStats { mean: DVector::from_iterator(d, mean.iter().copied()), covariance, count: n })
    }
}

/// Symmetric square root with negative eigenvalues clipped to zero.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The cross term uses `tr((S_a S_b)^(1/2)) = tr((A S_b A)^(1/2))` with
/// `A = S_a^(1/2)`, which keeps every decomposition symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", a.mean.len(), b.mean.len())));
    }
    let root = sym_sqrt(&a.covariance);
    let mut inner = &root * &b.covariance * &root;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Fréchet distance between two embedding sets given as rows.
pub fn fid_from_embeddings(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    frechet_distance(&FeatureStats::from_rows(a)?, &FeatureStats::from_rows(b)?)
}

/// Stacks `(H, W, 3)` images into one `(B, H, W, 3)` array.
pub fn stack_images(images: &[Array3<f64>]) -> Result<ArrayD<f64>> {
    let first = images.first().ok_or_else(|| Error::Statistical("empty image set".into()))?.dim();
    if images.iter().any(|im| im.dim() != first) {
        return Err(Error::Shape("images differ in size".into()));
    }
    let data: Vec<f64> = images.iter().flat_map(|im| im.iter().copied()).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&[images.len(), first.0, first.1, first.2]), data).expect("checked sizes"))
}

/// Embeddings of `images` as rows.
pub fn embed_images(images: &[Array3<f64>], embedder: &IdentityEmbedder) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let batch = Tensor::constant(stack_images(chunk)?);
        let e = no_grad(|| embedder.embed(&batch))?;
        rows.extend(e.value().outer_iter().map(|r| r.to_owned()));
    }
    let d = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Array2::from_shape_vec((rows.len(), d), flat).expect("rectangular"))
}

/// Fréchet distance between two image sets in the frozen embedding.
pub fn fid_lite(set_a: &[Array3<f64>], set_b: &[Array3<f64>], embedder: &IdentityEmbedder) -> Result<f64> {
    fid_from_embeddings(&embed_images(set_a, embedder)?, &embed_images(set_b, embedder)?)
}

/// MSE between `gen` (after a least-squares scale and shift) and the
/// standardized reference, over masked pixels.
///
/// Standardizing the reference makes the value invariant to affine changes
/// of either map.
pub fn depth_error(gen: &Array2<f64>, reference: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    if gen.dim() != reference.dim() || gen.dim() != mask.dim() {
        return Err(Error::Shape(format!("depth shapes {:?}, {:?} and mask {:?} differ", gen.dim(), reference.dim(), mask.dim())));
    }
    let pairs: Vec<(f64, f64)> =
        gen.iter().zip(reference.iter()).zip(mask.iter()).filter(|(_, &m)| m).map(|((&g, &r), _)| (g, r)).collect();
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("depth mask selects no pixels".into()));
    }
    let n = pairs.len() as f64;
    let mean_r = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let std_r = (pairs.iter().map(|p| (p.1 - mean_r).powi(2)).sum::<f64>() / n).sqrt();
    if !(std_r > 1e-12) {
        return Err(Error::UndefinedMetric("reference depth is constant over the mask".into()));
    }
    let mean_g = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mut sgg = 0.0;
    let mut sgr = 0.0;
    for &(g, r) in &pairs {
        let z = (r - mean_r) / std_r;
        sgg += (g - mean_g) * (g - mean_g);
        sgr += (g - mean_g) * z;
    }
    let scale = if sgg > 0.0 { sgr / sgg } else { 0.0 };
    let mse = pairs
        .iter()
        .map(|&(g, r)| {
            let z = (r - mean_r) / std_r;
            (scale * (g - mean_g) - z).powi(2)
        })
        .sum::<f64>()
        / n;
    Ok(mse)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseBin {
    NearFrontal,
    Steep,
    Extrapolated,
}

impl PoseBin {
    pub const ALL: [PoseBin; 3] = [PoseBin::NearFrontal, PoseBin::Steep, PoseBin::Extrapolated];

    pub fn name(self) -> &'static str {
        match self {
            PoseBin::NearFrontal => "near-frontal",
            PoseBin::Steep => "steep",
            PoseBin::Extrapolated => "extrapolated",
        }
    }
}

/// Yaw bins over [-90, 90] degrees: `|yaw| < frontal`, `frontal <= |yaw| <= steep`, and beyond.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseBins {
    pub frontal_deg: f64,
    pub steep_deg: f64,
    pub limit_deg: f64,
}

impl Default for PoseBins {
    fn default() -> Self {
        PoseBins { frontal_deg: 30.0, steep_deg: 50.0, limit_deg: 90.0 }
    }
}

impl PoseBins {
    pub fn bin_of(&self, yaw_rad: f64) -> Option<PoseBin> {
        let a = yaw_rad.to_degrees().abs();
        // edges in degrees lose bits through the radian round trip
        if a < self.frontal_deg - EDGE_TOL_DEG {
            Some(PoseBin::NearFrontal)
        } else if a <= self.steep_deg + EDGE_TOL_DEG {
            Some(PoseBin::Steep)
        } else if a <= self.limit_deg + EDGE_TOL_DEG {
            Some(PoseBin::Extrapolated)
        } else {
            None
        }
    }

    /// `(lo, hi)` of |yaw| in degrees.
    pub fn range(&self, bin: PoseBin) -> (f64, f64) {
        match bin {
            PoseBin::NearFrontal => (0.0, self.frontal_deg),
            PoseBin::Steep => (self.frontal_deg, self.steep_deg),
            PoseBin::Extrapolated => (self.steep_deg, self.limit_deg),
        }
    }

    /// Uniform yaw within the bin (either side) and uniform pitch over the training range.
    pub fn sample_pose<R: Rng + ?Sized>(&self, bin: PoseBin, rng: &mut R) -> CameraPose {
        let (lo, hi) = self.range(bin);
        loop {
            let mag = if bin == PoseBin::NearFrontal { rng.random_range(-hi..hi) } else { rng.random_range(lo..=hi) };
            let sign = if bin == PoseBin::NearFrontal || rng.random::<bool>() { 1.0 } else { -1.0 };
            let yaw = (sign * mag).to_radians();
            let pitch = rng.random_range(-DATA_PITCH_LIMIT_DEG..=DATA_PITCH_LIMIT_DEG).to_radians();
            if self.bin_of(yaw) == Some(bin) {
                return pose_from_angles(yaw, pitch, DEFAULT_RADIUS, DEFAULT_FOCAL).expect("bins lie within camera limits");
            }
        }
    }
}

/// Anything that can produce images at requested poses.
pub trait ImageSource {
    fn images(&self, poses: &[CameraPose], rng: &mut dyn RngCore) -> Result<Vec<Array3<f64>>>;
}

/// Random scenes from the analytic renderer.
#[derive(Debug, Clone)]
pub struct AnalyticSource {
    pub resolution: usize,
}

impl ImageSource for AnalyticSource {
    fn images(&self, poses: &[CameraPose], rng: &mut dyn RngCore) -> Result<Vec<Array3<f64>>> {
        Ok(poses.iter().map(|p| render_scene_analytic(&SceneSpec::random(rng.next_u64()), p, self.resolution).0).collect())
    }
}

/// Generator images from fresh latents, with samples at bin midpoints.
pub struct GeneratorSource<'a> {
    pub gen: &'a Generator,
}

impl ImageSource for GeneratorSource<'_> {
    fn images(&self, poses: &[CameraPose], rng: &mut dyn RngCore) -> Result<Vec<Array3<f64>>> {
        let mut out = Vec::with_capacity(poses.len());
        for chunk in poses.chunks(EVAL_CHUNK) {
            let latents: Vec<LatentPair> = chunk.iter().map(|_| LatentPair::sample(&self.gen.cfg.field, rng)).collect();
            out.extend(render_images(self.gen, &latents, chunk));
        }
        Ok(out)
    }
}

/// Renders latents at poses without recording gradients.
pub fn render_images(gen: &Generator, latents: &[LatentPair], poses: &[CameraPose]) -> Vec<Array3<f64>> {
    let (zf, zb) = stack_latents(latents);
    let rgb = no_grad(|| gen.render(&zf, &zb, poses, None).rgb);
    rgb.value().outer_iter().map(|im| im.to_owned().into_dimensionality().expect("(H, W, 3)")).collect()
}

/// Fréchet distance of one bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinScore {
    pub bin: PoseBin,
    pub yaw_lo_deg: f64,
    pub yaw_hi_deg: f64,
    pub n: usize,
    pub fid: f64,
}

/// Per-bin Fréchet distance between `fake` and `reference` images at
/// independently drawn in-bin poses.
pub fn pose_binned_fid(
    fake: &dyn ImageSource,
    reference: &dyn ImageSource,
    bins: &PoseBins,
    n_per_bin: usize,
    embedder: &IdentityEmbedder,
    seed: u64,
) -> Result<Vec<BinScore>> {
    PoseBin::ALL
        .iter()
        .enumerate()
        .map(|(k, &bin)| {
            let mut rng = seeded_stream(seed, 100 + k as u64);
            let fake_poses: Vec<CameraPose> = (0..n_per_bin).map(|_| bins.sample_pose(bin, &mut rng)).collect();
            let ref_poses: Vec<CameraPose> = (0..n_per_bin).map(|_| bins.sample_pose(bin, &mut rng)).collect();
            let a = fake.images(&fake_poses, &mut rng)?;
            let b = reference.images(&ref_poses, &mut rng)?;
            let (lo, hi) = bins.range(bin);
            Ok(BinScore { bin, yaw_lo_deg: lo, yaw_hi_deg: hi, n: n_per_bin, fid: fid_lite(&a, &b, embedder)? })
        })
        .collect()
}

/// Probability that a random positive outscores a random negative; ties count half.
pub fn rank_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative scores".into()));
    }
    let mut all: Vec<(f64, bool)> = positive.iter().map(|&s| (s, true)).chain(negative.iter().map(|&s| (s, false))).collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|x| x.1).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Matched and mismatched mean pose-match scores on real images.
pub fn pose_scores(
    disc: &Discriminator,
    images: &[Array3<f64>],
    poses: &[CameraPose],
    dist: &PoseDistribution,
    min_separation: f64,
    n_pairs: usize,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if images.is_empty() || images.len() != poses.len() {
        return Err(Error::Config("pose scores need one pose per image".into()));
    }
    let picks: Vec<usize> = (0..n_pairs).map(|_| rng.random_range(0..images.len())).collect();
    let negatives: Vec<CameraPose> =
        picks.iter().map(|&i| sample_negative_pose(&poses[i], dist, min_separation, rng)).collect::<Result<_>>()?;
    let mut matched = Vec::with_capacity(n_pairs);
    let mut mismatched = Vec::with_capacity(n_pairs);
    for (chunk_idx, chunk) in picks.chunks(EVAL_CHUNK).enumerate() {
        let imgs: Vec<Array3<f64>> = chunk.iter().map(|&i| images[i].clone()).collect();
        let batch = Tensor::constant(stack_images(&imgs)?);
        let pos: Vec<CameraPose> = chunk.iter().map(|&i| poses[i]).collect();
        let neg = &negatives[chunk_idx * EVAL_CHUNK..chunk_idx * EVAL_CHUNK + chunk.len()];
        let (m, mm) = no_grad(|| -> Result<(Tensor, Tensor)> {
            Ok((pose_match_score(&batch, &pos, disc)?, pose_match_score(&batch, neg, disc)?))
        })?;
        matched.extend(m.value().mean_axis(Axis(1)).expect("K > 0").iter().copied());
        mismatched.extend(mm.value().mean_axis(Axis(1)).expect("K > 0").iter().copied());
    }
    Ok((matched, mismatched))
}

/// AUC of the mean pose-match score separating matched from mismatched real pairs.
pub fn pose_consistency_auc(
    disc: &Discriminator,
    images: &[Array3<f64>],
    poses: &[CameraPose],
    dist: &PoseDistribution,
    min_separation: f64,
    n_pairs: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let (m, mm) = pose_scores(disc, images, poses, dist, min_separation, n_pairs, rng)?;
    rank_auc(&m, &mm)
}

/// Fixed-latent renders across yaw angles (degrees) at zero pitch.
pub fn yaw_sweep(gen: &Generator, yaws_deg: &[f64], seed: u64) -> Result<Vec<Array3<f64>>> {
    Ok(yaw_sweep_with_depth(gen, yaws_deg, seed)?.0)
}

/// Like [`yaw_sweep`], also returning the low-resolution foreground depth of each panel.
pub fn yaw_sweep_with_depth(gen: &Generator, yaws_deg: &[f64], seed: u64) -> Result<(Vec<Array3<f64>>, Vec<Array2<f64>>)> {
    let latent = LatentPair::sample(&gen.cfg.field, &mut seeded_stream(seed, 30));
    let poses = yaws_deg
        .iter()
        .map(|y| pose_from_angles(y.to_radians(), 0.0, DEFAULT_RADIUS, DEFAULT_FOCAL))
        .collect::<Result<Vec<_>>>()?;
    let (zf, zb) = stack_latents(&vec![latent; poses.len()]);
    let out = no_grad(|| gen.render(&zf, &zb, &poses, None));
    let rgb = out.rgb.value().outer_iter().map(|im| im.to_owned().into_dimensionality().expect("(H, W, 3)")).collect();
    let depth = out.depth.outer_iter().map(|d| d.to_owned()).collect();
    Ok((rgb, depth))
}

/// Gray image of a depth map, near = white, far = black.
pub fn depth_to_gray(depth: &Array2<f64>, near: f64, far: f64) -> Array3<f64> {
    let (h, w) = depth.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, _)| ((far - depth[[y, x]]) / (far - near)).clamp(0.0, 1.0))
}

/// Side-by-side concatenation of equally sized panels.
pub fn strip(panels: &[Array3<f64>]) -> Result<Array3<f64>> {
    let views: Vec<_> = panels.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
}

pub fn mean_abs_difference(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a - b).mapv(f64::abs).mean().unwrap_or(0.0)
}

/// Generated depth against the blob-free template head at each pose, masked
/// by the template foreground; averaged over poses.
pub fn template_depth_error(gen: &Generator, poses: &[CameraPose], seed: u64) -> Result<f64> {
    let n = gen.cfg.render.neural_resolution;
    let mut rng = seeded_stream(seed, 31);
    let mut total = 0.0;
    for chunk in poses.chunks(EVAL_CHUNK) {
        let latents: Vec<LatentPair> = chunk.iter().map(|_| LatentPair::sample(&gen.cfg.field, &mut rng)).collect();
        let (zf, zb) = stack_latents(&latents);
        let out = no_grad(|| gen.render(&zf, &zb, chunk, None));
        for (i, pose) in chunk.iter().enumerate() {
            let t = crate::data::trace_scene(&SceneSpec::template(), pose, n);
            let depth = out.depth.index_axis(Axis(0), i).to_owned();
            total += depth_error(&depth, &t.depth, &t.foreground_mask())?;
        }
    }
    Ok(total / poses.len().max(1) as f64)
}

/// Seed of the frozen embedder used for every quality metric, independent of
/// any run seed so values compare across runs.
pub const METRIC_EMBEDDER_SEED: u64 = 0x00f1_d1e5;

pub fn metric_embedder(resolution: usize) -> IdentityEmbedder {
    IdentityEmbedder::new(resolution, METRIC_EMBEDDER_SEED)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_per_bin: usize,
    pub n_pairs: usize,
    pub depth_poses: usize,
    pub negative_min_separation_deg: f64,
    pub bins: PoseBins,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_per_bin: DEFAULT_N_PER_BIN,
            n_pairs: 2000,
            depth_poses: 64,
            negative_min_separation_deg: 10.0,
            bins: PoseBins::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub step: u64,
    pub bins: Vec<BinScore>,
    pub depth_error: f64,
    /// Absent when the discriminator has no pose branch.
    pub pose_auc: Option<f64>,
}

impl EvalSummary {
    pub fn fid(&self, bin: PoseBin) -> Option<f64> {
        self.bins.iter().find(|b| b.bin == bin).map(|b| b.fid)
    }

    /// Named scalars in a fixed order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut m: Vec<(String, f64)> = self.bins.iter().map(|b| (format!("fid_{}", b.bin.name()), b.fid)).collect();
        if let (Some(f), Some(s)) = (self.fid(PoseBin::NearFrontal), self.fid(PoseBin::Steep)) {
            m.push(("fid_steep_over_frontal".into(), s / f));
        }
        m.push(("depth_error".into(), self.depth_error));
        if let Some(a) = self.pose_auc {
            m.push(("pose_auc".into(), a));
        }
        m
    }
}

/// All metrics for one training snapshot against a dataset.
pub fn evaluate_state(state: &crate::train::TrainState, dataset: &[crate::data::Sample], opts: &EvalOptions) -> Result<EvalSummary> {
    let gen = &state.gen;
    let embedder = metric_embedder(gen.cfg.render.output_resolution);
    let reference = AnalyticSource { resolution: gen.cfg.render.output_resolution };
    let bins = pose_binned_fid(&GeneratorSource { gen }, &reference, &opts.bins, opts.n_per_bin, &embedder, opts.seed)?;

    let mut rng = seeded_stream(opts.seed, 110);
    let depth_poses: Vec<CameraPose> = (0..opts.depth_poses)
        .map(|i| opts.bins.sample_pose(if i % 2 == 0 { PoseBin::NearFrontal } else { PoseBin::Steep }, &mut rng))
        .collect();
    let depth_error = template_depth_error(gen, &depth_poses, opts.seed)?;

    let pose_auc = if state.disc.cfg.use_pose_branch {
        let images: Vec<Array3<f64>> = dataset.iter().map(|s| s.image.clone()).collect();
        let poses: Vec<CameraPose> = dataset.iter().map(|s| s.pose).collect();
        let dist = PoseDistribution::dataset(std::sync::Arc::new(poses.clone()));
        let mut rng = seeded_stream(opts.seed, 111);
        Some(pose_consistency_auc(
            &state.disc,
            &images,
            &poses,
            &dist,
            opts.negative_min_separation_deg.to_radians(),
            opts.n_pairs,
            &mut rng,
        )?)
    } else {
        None
    };
    Ok(EvalSummary { step: state.step, bins, depth_error, pose_auc })
}

pub const BINS_CSV_HEADER: [&str; 5] = ["bin", "yaw_lo_deg", "yaw_hi_deg", "n", "fid"];

/// Writes `metrics.csv` (step, metric, value) and `bins.csv` into `dir`.
pub fn write_eval_outputs(dir: &std::path::Path, summary: &EvalSummary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    w.write_record(["step", "metric", "value"]).map_err(|e| Error::format(&path, e))?;
    for (k, v) in summary.metrics() {
        w.write_record([summary.step.to_string(), k, v.to_string()]).map_err(|e| Error::format(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("bins.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    w.write_record(BINS_CSV_HEADER).map_err(|e| Error::format(&path, e))?;
    for b in &summary.bins {
        w.write_record([b.bin.name().to_string(), b.yaw_lo_deg.to_string(), b.yaw_hi_deg.to_string(), b.n.to_string(), b.fid.to_string()])
            .map_err(|e| Error::format(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
