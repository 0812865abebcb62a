//! Layers shared by the generator, discriminator and embedder.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sidegan_autograd::{Csr, SparseMatrix, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Anything that owns trainable tensors.
pub trait Module {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Euclidean norm of every parameter, for diagnostics.
    fn weight_norm(&self) -> f64 {
        self.params().iter().flat_map(|(_, t)| t.value().iter().copied()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn prefixed<'a, T>(prefix: &str, v: Vec<(String, T)>) -> impl Iterator<Item = (String, T)> + 'a
where
    T: 'a,
{
    let prefix = prefix.to_string();
    v.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn normal_array<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}

/// Dense layer `y = x W + b` over the last axis of a 2-D input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// He-style initialization scaled by `gain`.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, bias: bool, gain: f64, rng: &mut R) -> Linear {
        let std = gain * (2.0 / inputs as f64).sqrt();
        Linear {
            weight: Tensor::param(normal_array(&[inputs, outputs], std, rng)),
            bias: bias.then(|| Tensor::param(ArrayD::zeros(IxDyn(&[outputs])))),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&self.weight);
        match &self.bias {
            Some(b) => y.add(b),
            None => y,
        }
    }

    pub fn zero_(&mut self) {
        self.weight = Tensor::param(ArrayD::zeros(self.weight.value().raw_dim()));
        if let Some(b) = &mut self.bias {
            *b = Tensor::param(ArrayD::zeros(b.value().raw_dim()));
        }
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Im2colKey {
    batch: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

fn im2col_cache() -> &'static Mutex<HashMap<Im2colKey, SparseMatrix>> {
    static CACHE: OnceLock<Mutex<HashMap<Im2colKey, SparseMatrix>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Gathers every `kernel x kernel` patch of an NHWC batch (flattened to rows),
/// producing rows ordered (b, oy, ox, ky, kx). Padding taps are empty rows.
fn im2col_matrix(key: Im2colKey) -> SparseMatrix {
    let mut cache = im2col_cache().lock().unwrap();
    if let Some(m) = cache.get(&key) {
        return m.clone();
    }
    let Im2colKey { batch, height, width, kernel, stride, pad } = key;
    let oh = conv_output_size(height, kernel, stride, pad);
    let ow = conv_output_size(width, kernel, stride, pad);
    let mut rows = Vec::with_capacity(batch * oh * ow * kernel * kernel);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < height && (ix as usize) < width {
                            rows.push(vec![((b * height + iy as usize) * width + ix as usize, 1.0)]);
                        } else {
                            rows.push(Vec::new());
                        }
                    }
                }
            }
        }
    }
    let m = SparseMatrix::new(Csr::from_rows(batch * height * width, rows));
    cache.insert(key, m.clone());
    m
}

/// 2-D convolution over NHWC tensors, lowered to a sparse gather and a matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, gain: f64, rng: &mut R) -> Conv2d {
        let fan_in = kernel * kernel * cin;
        let std = gain * (2.0 / fan_in as f64).sqrt();
        Conv2d {
            weight: Tensor::param(normal_array(&[fan_in, cout], std, rng)),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[cout]))),
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0] / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv input must be NHWC");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c, self.in_channels(), "conv channel mismatch");
        let key = Im2colKey { batch: b, height: h, width: w, kernel: self.kernel, stride: self.stride, pad: self.pad };
        let oh = conv_output_size(h, self.kernel, self.stride, self.pad);
        let ow = conv_output_size(w, self.kernel, self.stride, self.pad);
        let cols = x.reshape(&[b * h * w, c]).spmm(&im2col_matrix(key));
        let patches = cols.reshape(&[b * oh * ow, self.kernel * self.kernel * c]);
        patches.matmul(&self.weight).add(&self.bias).reshape(&[b, oh, ow, self.out_channels()])
    }

    pub fn zero_(&mut self) {
        self.weight = Tensor::param(ArrayD::zeros(self.weight.value().raw_dim()));
        self.bias = Tensor::param(ArrayD::zeros(self.bias.value().raw_dim()));
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Linear interpolation taps for resampling `src` samples onto `dst` samples
/// with half-pixel centers (edges clamp).
fn resize_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = x - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        })
        .collect()
}

/// Sparse bilinear resize of an NHWC batch flattened to `(b*h*w, c)` rows.
pub fn bilinear_resize_matrix(batch: usize, src: usize, dst: usize) -> SparseMatrix {
    let taps = resize_taps(src, dst);
    let mut rows = Vec::with_capacity(batch * dst * dst);
    for b in 0..batch {
        for ty in &taps {
            for tx in &taps {
                let mut entries = Vec::with_capacity(4);
                for &(sy, wy) in ty {
                    for &(sx, wx) in tx {
                        let w = wy * wx;
                        if w != 0.0 {
                            entries.push(((b * src + sy) * src + sx, w));
                        }
                    }
                }
                rows.push(entries);
            }
        }
    }
    SparseMatrix::new(Csr::from_rows(batch * src * src, rows))
}

/// Bilinearly resizes an NHWC tensor to `dst x dst`.
pub fn bilinear_resize(x: &Tensor, dst: usize) -> Tensor {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    assert_eq!(h, w, "square images only");
    if h == dst {
        return x.clone();
    }
    x.reshape(&[b * h * w, c]).spmm(&bilinear_resize_matrix(b, h, dst)).reshape(&[b, dst, dst, c])
}
