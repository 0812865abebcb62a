//! Dual-branched discriminator: a shared convolutional trunk feeding a
//! realness head and a pose-feature head, plus an encoder for camera poses.

use serde::{Deserialize, Serialize};
use sidegan_autograd::Tensor;

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::fields::stack_poses;
use crate::nn::{conv_output_size, prefixed, Conv2d, Linear, Module, LEAKY_SLOPE};
use crate::render::seeded_stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub resolution: usize,
    /// Output channels of the stride-2 trunk layers.
    pub channels: Vec<usize>,
    pub head_width: usize,
    /// Pose-embedding dimension K.
    pub pose_dim: usize,
    pub encoder_width: usize,
    pub use_pose_branch: bool,
    pub use_regression_head: bool,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            resolution: 32,
            channels: vec![16, 32, 64, 64],
            head_width: 64,
            pose_dim: 32,
            encoder_width: 64,
            use_pose_branch: true,
            use_regression_head: false,
        }
    }
}

/// Two-layer perceptron with a leaky hidden layer and a linear output.
#[derive(Debug, Clone)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

impl Head {
    fn new(seed: u64, stream: u64, inputs: usize, width: usize, outputs: usize) -> Head {
        let mut rng = seeded_stream(seed, stream);
        Head { hidden: Linear::new(inputs, width, true, 1.0, &mut rng), out: Linear::new(width, outputs, true, 0.5, &mut rng) }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.out.forward(&self.hidden.forward(x).leaky_relu(LEAKY_SLOPE))
    }

    pub fn zero_(&mut self) {
        self.hidden.zero_();
        self.out.zero_();
    }
}

impl Module for Head {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<_> = prefixed("hidden", self.hidden.params()).collect();
        v.extend(prefixed("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<_> = prefixed("hidden", self.hidden.params_mut()).collect();
        v.extend(prefixed("out", self.out.params_mut()));
        v
    }
}

/// Realness logit and pose features for a batch of images.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    /// `(B, 1)`, pre-sigmoid.
    pub image_logit: Tensor,
    /// `(B, K)`; absent when the pose branch is disabled.
    pub pose_feature: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: DiscConfig,
    pub shared: Vec<Conv2d>,
    pub image_head: Head,
    pub pose_head: Option<Head>,
    pub pose_encoder: Option<Head>,
    pub regression_head: Option<Linear>,
}

impl Discriminator {
    pub fn new(cfg: DiscConfig, seed: u64) -> Discriminator {
        let mut rng = seeded_stream(seed, 10);
        let mut cin = 3;
        let mut shared = Vec::new();
        for &c in &cfg.channels {
            shared.push(Conv2d::new(cin, c, 3, 2, 1.0, &mut rng));
            cin = c;
        }
        let flat = Self::flat_dim(&cfg);
        let image_head = Head::new(seed, 11, flat, cfg.head_width, 1);
        let (pose_head, pose_encoder) = if cfg.use_pose_branch {
            (
                Some(Head::new(seed, 12, flat, cfg.head_width, cfg.pose_dim)),
                Some(Head::new(seed, 13, 25, cfg.encoder_width, cfg.pose_dim)),
            )
        } else {
            (None, None)
        };
        let regression_head = cfg.use_regression_head.then(|| Linear::new(flat, 2, true, 0.5, &mut seeded_stream(seed, 14)));
        Discriminator { cfg, shared, image_head, pose_head, pose_encoder, regression_head }
    }

    /// Length of the flattened trunk output.
    pub fn flat_dim(cfg: &DiscConfig) -> usize {
        let mut s = cfg.resolution;
        for _ in &cfg.channels {
            s = conv_output_size(s, 3, 2, 1);
        }
        s * s * cfg.channels.last().copied().unwrap_or(3)
    }

    /// Shared trunk `D_s`: NHWC image in [0, 1] to `(B, flat)` features.
    pub fn shared_block(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 4 || s[1] != self.cfg.resolution || s[2] != self.cfg.resolution || s[3] != 3 {
            return Err(Error::Shape(format!(
                "discriminator expects (B, {r}, {r}, 3) images, got {s:?}",
                r = self.cfg.resolution
            )));
        }
        let mut h = image.scale(2.0).add_scalar(-1.0);
        for conv in &self.shared {
            h = conv.forward(&h).leaky_relu(LEAKY_SLOPE);
        }
        let b = s[0];
        let flat = h.len() / b;
        Ok(h.reshape(&[b, flat]))
    }

    /// Realness head `D_i`.
    pub fn image_branch(&self, shared: &Tensor) -> Tensor {
        self.image_head.forward(shared)
    }

    /// Pose-feature head `D_p`.
    pub fn pose_branch(&self, shared: &Tensor) -> Result<Tensor> {
        let head = self.pose_head.as_ref().ok_or_else(|| Error::Config("discriminator has no pose branch".into()))?;
        Ok(head.forward(shared))
    }

    /// Pose encoder `E`: `(B, K)` embeddings of the 25-value camera parameters.
    pub fn pose_encoder(&self, poses: &[CameraPose]) -> Result<Tensor> {
        let enc = self.pose_encoder.as_ref().ok_or_else(|| Error::Config("discriminator has no pose encoder".into()))?;
        Ok(enc.forward(&stack_poses(poses)))
    }

    /// `D_i(D_s(image))`, `(B, 1)`.
    pub fn image_logit(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.image_branch(&self.shared_block(image)?))
    }

    pub fn forward(&self, image: &Tensor) -> Result<DiscOutput> {
        let shared = self.shared_block(image)?;
        let pose_feature = match &self.pose_head {
            Some(head) => Some(head.forward(&shared)),
            None => None,
        };
        Ok(DiscOutput { image_logit: self.image_branch(&shared), pose_feature })
    }

    /// Copy whose weights are constants, for losses that must not reach the discriminator.
    pub fn frozen(&self) -> Discriminator {
        let mut d = self.clone();
        for (_, t) in d.params_mut() {
            *t = t.detach();
        }
        d
    }

    /// Predicted (yaw, pitch) from trunk features, `(B, 2)`.
    pub fn regress_pose(&self, shared: &Tensor) -> Result<Tensor> {
        let head = self.regression_head.as_ref().ok_or_else(|| Error::Config("discriminator has no regression head".into()))?;
        Ok(head.forward(shared))
    }
}

/// Elementwise product of pose features and pose embeddings, `(B, K)`.
pub fn match_product(pose_feature: &Tensor, embedding: &Tensor) -> Result<Tensor> {
    if pose_feature.shape() != embedding.shape() {
        return Err(Error::Config(format!(
            "pose feature {:?} and pose embedding {:?} differ in shape",
            pose_feature.shape(),
            embedding.shape()
        )));
    }
    Ok(pose_feature.mul(embedding))
}

/// `D_p(D_s(image)) * E(pose)`, elementwise, `(B, K)`.
pub fn pose_match_score(image: &Tensor, poses: &[CameraPose], disc: &Discriminator) -> Result<Tensor> {
    let shared = disc.shared_block(image)?;
    match_product(&disc.pose_branch(&shared)?, &disc.pose_encoder(poses)?)
}

impl Module for Discriminator {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<_> = self.shared.iter().enumerate().flat_map(|(i, c)| prefixed(&format!("shared.conv{i}"), c.params())).collect();
        v.extend(prefixed("image_head", self.image_head.params()));
        if let Some(h) = &self.pose_head {
            v.extend(prefixed("pose_head", h.params()));
        }
        if let Some(e) = &self.pose_encoder {
            v.extend(prefixed("pose_encoder", e.params()));
        }
        if let Some(r) = &self.regression_head {
            v.extend(prefixed("regression_head", r.params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<_> =
            self.shared.iter_mut().enumerate().flat_map(|(i, c)| prefixed(&format!("shared.conv{i}"), c.params_mut())).collect();
        v.extend(prefixed("image_head", self.image_head.params_mut()));
        if let Some(h) = &mut self.pose_head {
            v.extend(prefixed("pose_head", h.params_mut()));
        }
        if let Some(e) = &mut self.pose_encoder {
            v.extend(prefixed("pose_encoder", e.params_mut()));
        }
        if let Some(r) = &mut self.regression_head {
            v.extend(prefixed("regression_head", r.params_mut()));
        }
        v
    }
}
