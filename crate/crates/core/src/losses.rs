//! Training objectives: pose matching, non-saturating adversarial losses with
//! R1, identity and density regularizers, the pose-regression baseline, and
//! the weighted totals.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sidegan_autograd::{grad, Tensor};

use crate::camera::CameraPose;
use crate::disc::{match_product, Discriminator};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, LEAKY_SLOPE};
use crate::render::{seeded_stream, Generator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pose: f64,
    pub lambda_z: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_r1: f64,
    pub eps_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_pose: 1.0, lambda_z: 0.5, lambda_c: 0.25, lambda_d: 0.25, lambda_r1: 1.0, eps_c: 1e-8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_pose, self.lambda_z, self.lambda_c, self.lambda_d, self.lambda_r1];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.eps_c > 0.0) {
            return Err(Error::Config("eps_c must be positive".into()));
        }
        Ok(())
    }
}

/// `h(x) = ln(1 + e^x)` for plain numbers.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_h(x: &Tensor) -> Tensor {
    x.softplus()
}

/// `mean h(-pos) + mean h(neg)` over batch and embedding channels.
pub fn pose_loss_gen_from_scores(pos: &Tensor, neg: &Tensor) -> Tensor {
    pos.neg().softplus().mean().add(&neg.softplus().mean())
}

/// Positive terms on real and fake pairs plus negative terms on both.
pub fn pose_loss_dis_from_scores(real_pos: &Tensor, fake_pos: &Tensor, real_neg: &Tensor, fake_neg: &Tensor) -> Tensor {
    let positive = real_pos.neg().softplus().mean().add(&fake_pos.neg().softplus().mean());
    let negative = real_neg.softplus().mean().add(&fake_neg.softplus().mean());
    positive.add(&negative)
}

/// Pose-matching loss for the generator on fakes rendered at `xi_pos`.
pub fn pose_loss_gen(fake: &Tensor, xi_pos: &[CameraPose], xi_neg: &[CameraPose], disc: &Discriminator) -> Result<Tensor> {
    let disc = &disc.frozen();
    let feature = disc.pose_branch(&disc.shared_block(fake)?)?;
    let pos = match_product(&feature, &disc.pose_encoder(xi_pos)?)?;
    let neg = match_product(&feature, &disc.pose_encoder(xi_neg)?)?;
    Ok(pose_loss_gen_from_scores(&pos, &neg))
}

/// Pose-matching loss for the discriminator. The fake images are detached.
pub fn pose_loss_dis(
    real: &Tensor,
    xi_real_pos: &[CameraPose],
    xi_real_neg: &[CameraPose],
    fake: &Tensor,
    xi_fake_pos: &[CameraPose],
    xi_fake_neg: &[CameraPose],
    disc: &Discriminator,
) -> Result<Tensor> {
    let real_feat = disc.pose_branch(&disc.shared_block(real)?)?;
    let fake_feat = disc.pose_branch(&disc.shared_block(&fake.detach())?)?;
    let real_pos = match_product(&real_feat, &disc.pose_encoder(xi_real_pos)?)?;
    let fake_pos = match_product(&fake_feat, &disc.pose_encoder(xi_fake_pos)?)?;
    let real_neg = match_product(&real_feat, &disc.pose_encoder(xi_real_neg)?)?;
    let fake_neg = match_product(&fake_feat, &disc.pose_encoder(xi_fake_neg)?)?;
    Ok(pose_loss_dis_from_scores(&real_pos, &fake_pos, &real_neg, &fake_neg))
}

/// `mean h(-logit)`.
pub fn gan_loss_gen_from_logits(fake_logits: &Tensor) -> Tensor {
    fake_logits.neg().softplus().mean()
}

pub fn gan_loss_gen(fake: &Tensor, disc: &Discriminator) -> Result<Tensor> {
    Ok(gan_loss_gen_from_logits(&disc.frozen().image_logit(fake)?))
}

/// `mean_b ||d D_si(I_b) / d I_b||^2`, differentiable with respect to the
/// discriminator weights.
pub fn r1_penalty(real: &Tensor, disc: &Discriminator) -> Result<Tensor> {
    let real = Tensor::param(real.value().clone());
    let logits = disc.image_logit(&real)?;
    let g = grad(&logits.sum(), &[&real], true).remove(0);
    let b = real.shape()[0] as f64;
    Ok(g.square().sum().scale(1.0 / b))
}

/// The three parts of the discriminator's adversarial loss.
#[derive(Debug, Clone)]
pub struct DisAdvTerms {
    /// `mean h(D_si(fake))`
    pub fake: Tensor,
    /// `mean h(-D_si(real))`
    pub real: Tensor,
    /// Unweighted R1 penalty, when computed.
    pub r1: Option<Tensor>,
    pub real_logits: Tensor,
    pub fake_logits: Tensor,
}

pub fn gan_loss_dis_terms(real: &Tensor, fake: &Tensor, disc: &Discriminator, with_r1: bool) -> Result<DisAdvTerms> {
    let fake_logits = disc.image_logit(&fake.detach())?;
    let real_logits = disc.image_logit(real)?;
    let r1 = if with_r1 { Some(r1_penalty(real, disc)?) } else { None };
    Ok(DisAdvTerms {
        fake: fake_logits.softplus().mean(),
        real: real_logits.neg().softplus().mean(),
        r1,
        real_logits,
        fake_logits,
    })
}

/// `mean h(D_si(fake)) + mean h(-D_si(real)) + lambda_r1 * R1`.
pub fn gan_loss_dis(real: &Tensor, fake: &Tensor, disc: &Discriminator, lambda_r1: f64) -> Result<Tensor> {
    let terms = gan_loss_dis_terms(real, fake, disc, true)?;
    Ok(terms.fake.add(&terms.real).add(&terms.r1.unwrap().scale(lambda_r1)))
}

/// Frozen random convolutional network producing unit-norm image embeddings.
///
/// Stands in for a pretrained identity network; it is never trained.
#[derive(Debug, Clone)]
pub struct IdentityEmbedder {
    pub resolution: usize,
    convs: Vec<Conv2d>,
    proj: Linear,
}

pub const EMBED_DIM: usize = 64;

impl IdentityEmbedder {
    pub fn new(resolution: usize, seed: u64) -> IdentityEmbedder {
        let mut rng = seeded_stream(seed, 20);
        let mut convs = vec![
            Conv2d::new(3, 16, 3, 2, 1.0, &mut rng),
            Conv2d::new(16, 32, 3, 2, 1.0, &mut rng),
            Conv2d::new(32, 64, 3, 2, 1.0, &mut rng),
        ];
        let mut s = resolution;
        for _ in &convs {
            s = crate::nn::conv_output_size(s, 3, 2, 1);
        }
        let mut proj = Linear::new(s * s * 64, EMBED_DIM, true, 1.0, &mut rng);
        for c in &mut convs {
            c.weight = c.weight.detach();
            c.bias = c.bias.detach();
        }
        proj.weight = proj.weight.detach();
        proj.bias = proj.bias.as_ref().map(Tensor::detach);
        IdentityEmbedder { resolution, convs, proj }
    }

    /// True when no embedder weight can receive gradients.
    pub fn is_frozen(&self) -> bool {
        let convs = self.convs.iter().flat_map(|c| [&c.weight, &c.bias]);
        let proj = std::iter::once(&self.proj.weight).chain(self.proj.bias.as_ref());
        convs.chain(proj).all(|t| !t.requires_grad())
    }

    /// `(B, 64)` unit vectors for NHWC images in [0, 1].
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.resolution || s[2] != self.resolution || s[3] != 3 {
            return Err(Error::Shape(format!("embedder expects (B, {r}, {r}, 3), got {s:?}", r = self.resolution)));
        }
        let mut h = images.scale(2.0).add_scalar(-1.0);
        for c in &self.convs {
            h = c.forward(&h).leaky_relu(LEAKY_SLOPE);
        }
        let b = s[0];
        let flat = h.len() / b;
        let e = self.proj.forward(&h.reshape(&[b, flat]));
        let norm = e.square().sum_axis(1, true).add_scalar(1e-24).sqrt();
        Ok(e.div(&norm))
    }
}

/// Row-wise inner products, `(B,)`.
fn row_dot(a: &Tensor, b: &Tensor) -> Tensor {
    a.mul(b).sum_axis(1, false)
}

/// Mean cosine similarity between paired unit embeddings.
pub fn identity_loss_z_from_embeddings(e1: &Tensor, e2: &Tensor) -> Tensor {
    row_dot(e1, e2).mean()
}

/// `mean_b (1 - <e1, e2>) / (||img1 - img2||_1 + eps_c)`.
pub fn identity_loss_c_from(e1: &Tensor, e2: &Tensor, img1: &Tensor, img2: &Tensor, eps_c: f64) -> Tensor {
    let b = img1.shape()[0];
    let numer = row_dot(e1, e2).neg().add_scalar(1.0);
    let l1 = img1.sub(img2).abs().reshape(&[b, img1.len() / b]).sum_axis(1, false).add_scalar(eps_c);
    numer.div(&l1).mean()
}

/// Identity diversity between two latents rendered at the same poses.
pub fn identity_loss_z(
    z1: (&Tensor, &Tensor),
    z2: (&Tensor, &Tensor),
    xi: &[CameraPose],
    gen: &Generator,
    embedder: &IdentityEmbedder,
) -> Result<Tensor> {
    let img1 = gen.render(z1.0, z1.1, xi, None).rgb;
    let img2 = gen.render(z2.0, z2.1, xi, None).rgb;
    Ok(identity_loss_z_from_embeddings(&embedder.embed(&img1)?, &embedder.embed(&img2)?))
}

/// Identity stability of one latent across two poses.
pub fn identity_loss_c(
    z: (&Tensor, &Tensor),
    xi1: &[CameraPose],
    xi2: &[CameraPose],
    gen: &Generator,
    embedder: &IdentityEmbedder,
    eps_c: f64,
) -> Result<Tensor> {
    if xi1.iter().zip(xi2).any(|(a, b)| a.flat == b.flat) {
        return Err(Error::Config("identity_loss_c needs two different poses per latent".into()));
    }
    let img1 = gen.render(z.0, z.1, xi1, None).rgb;
    let img2 = gen.render(z.0, z.1, xi2, None).rgb;
    Ok(identity_loss_c_from(&embedder.embed(&img1)?, &embedder.embed(&img2)?, &img1, &img2, eps_c))
}

/// Draws `n` points uniform in [-1, 1]^3 and a Gaussian offset for each.
pub fn density_probe_points<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let normal = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    let mut x = Vec::with_capacity(n);
    let mut xp = Vec::with_capacity(n);
    for _ in 0..n {
        let p = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        let d = match &normal {
            Some(nd) => [nd.sample(rng), nd.sample(rng), nd.sample(rng)],
            None => [0.0; 3],
        };
        x.push(p);
        xp.push([p[0] + d[0], p[1] + d[1], p[2] + d[2]]);
    }
    (x, xp)
}

/// `mean |sigma(x) - sigma(x + delta)|` for a density function over point lists.
pub fn density_smoothness(density: impl Fn(&[[f64; 3]]) -> Tensor, x: &[[f64; 3]], perturbed: &[[f64; 3]]) -> Tensor {
    density(x).sub(&density(perturbed)).abs().mean()
}

/// L1 density smoothness of the generator's foreground field, `n_points` per latent.
pub fn density_reg<R: Rng + ?Sized>(
    z_fg: &Tensor,
    poses: &[CameraPose],
    gen: &Generator,
    sigma: f64,
    n_points: usize,
    rng: &mut R,
) -> Tensor {
    let b = z_fg.shape()[0];
    let (x, xp) = density_probe_points(b * n_points, sigma, rng);
    density_smoothness(|pts| gen.density_at(z_fg, poses, pts), &x, &xp)
}

/// `mean_b sum_k (pred - truth)^2` over (yaw, pitch).
pub fn pose_regression_loss(pred: &Tensor, truth: &Tensor) -> Tensor {
    let b = pred.shape()[0] as f64;
    pred.sub(truth).square().sum().scale(1.0 / b)
}

pub fn pose_angles(poses: &[CameraPose]) -> Tensor {
    Tensor::from_vec(&[poses.len(), 2], poses.iter().flat_map(|p| [p.yaw, p.pitch]).collect())
}

/// Regression head prediction error against the true angles.
pub fn pose_regression_loss_baseline(image: &Tensor, xi_pos: &[CameraPose], disc: &Discriminator) -> Result<Tensor> {
    let pred = disc.regress_pose(&disc.shared_block(image)?)?;
    Ok(pose_regression_loss(&pred, &pose_angles(xi_pos)))
}

/// Generator-side terms; absent terms are disabled.
#[derive(Debug, Clone)]
pub struct GenLossTerms<T> {
    pub adv: T,
    pub pose: Option<T>,
    pub pose_reg: Option<T>,
    pub id_z: Option<T>,
    pub id_c: Option<T>,
    pub density: Option<T>,
}

/// Discriminator-side terms.
#[derive(Debug, Clone)]
pub struct DisLossTerms<T> {
    pub adv: T,
    pub pose: Option<T>,
    pub pose_reg: Option<T>,
}

/// `adv + l_pose pose + (l_z L_z + l_c L_c) + l_d L_d` (plus `l_pose` times
/// the regression term when that baseline replaces pose matching).
pub fn total_loss_gen(t: &GenLossTerms<f64>, w: &LossWeights) -> f64 {
    let o = |v: &Option<f64>| v.unwrap_or(0.0);
    t.adv + w.lambda_pose * o(&t.pose) + (w.lambda_z * o(&t.id_z) + w.lambda_c * o(&t.id_c)) + w.lambda_d * o(&t.density)
        + w.lambda_pose * o(&t.pose_reg)
}

pub fn total_loss_dis(t: &DisLossTerms<f64>, w: &LossWeights) -> f64 {
    t.adv + w.lambda_pose * t.pose.unwrap_or(0.0) + w.lambda_pose * t.pose_reg.unwrap_or(0.0)
}

pub fn total_loss_gen_tensor(t: &GenLossTerms<Tensor>, w: &LossWeights) -> Tensor {
    let mut total = t.adv.clone();
    let weighted = [
        (&t.pose, w.lambda_pose),
        (&t.id_z, w.lambda_z),
        (&t.id_c, w.lambda_c),
        (&t.density, w.lambda_d),
        (&t.pose_reg, w.lambda_pose),
    ];
    for (term, lambda) in weighted {
        if let Some(term) = term {
            total = total.add(&term.scale(lambda));
        }
    }
    total
}

pub fn total_loss_dis_tensor(t: &DisLossTerms<Tensor>, w: &LossWeights) -> Tensor {
    let mut total = t.adv.clone();
    for term in [&t.pose, &t.pose_reg].into_iter().flatten() {
        total = total.add(&term.scale(w.lambda_pose));
    }
    total
}

impl GenLossTerms<Tensor> {
    pub fn values(&self) -> GenLossTerms<f64> {
        let v = |t: &Option<Tensor>| t.as_ref().map(Tensor::item);
        GenLossTerms {
            adv: self.adv.item(),
            pose: v(&self.pose),
            pose_reg: v(&self.pose_reg),
            id_z: v(&self.id_z),
            id_c: v(&self.id_c),
            density: v(&self.density),
        }
    }
}

impl DisLossTerms<Tensor> {
    pub fn values(&self) -> DisLossTerms<f64> {
        DisLossTerms {
            adv: self.adv.item(),
            pose: self.pose.as_ref().map(Tensor::item),
            pose_reg: self.pose_reg.as_ref().map(Tensor::item),
        }
    }
}
