//! Dense kernels: batched matmul, softmax, normalizations and activations,
//! each paired with the backward pass needed by the gradient checks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Batched matrix product `[..., M, K] x [..., K, N] -> [..., M, N]`.
///
/// Leading (batch) dimensions must match exactly.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() != sa.len() {
        return Err(Error::shape("matmul", sa, sb));
    }
    let nd = sa.len();
    let (m, k) = (sa[nd - 2], sa[nd - 1]);
    let (k2, n) = (sb[nd - 2], sb[nd - 1]);
    if k != k2 || sa[..nd - 2] != sb[..nd - 2] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let batch: usize = sa[..nd - 2].iter().product();
    let mut shape = sa[..nd - 2].to_vec();
    shape.extend([m, n]);
    let mut out = vec![0.0; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..batch {
        let ao = &ad[bi * m * k..(bi + 1) * m * k];
        let bo = &bd[bi * k * n..(bi + 1) * k * n];
        let oo = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut oo[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ao[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bo[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(shape, out)
}

/// Swaps the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::invalid(format!("transpose needs rank >= 2, got {s:?}")));
    }
    let nd = s.len();
    let (m, n) = (s[nd - 2], s[nd - 1]);
    let batch = x.numel() / (m * n);
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(shape, out)
}

/// Softmax of a single slice with max subtraction. Entries equal to
/// `-inf` receive probability zero.
pub fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // fully masked row: leave it all-zero rather than emit NaN
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x
        .data()
        .chunks_exact(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        softmax_slice(src, dst);
    }
    out
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::shape("softmax_backward", y.shape(), dy.shape()));
    }
    let c = y.last_dim();
    let mut dx = Tensor::zeros(y.shape());
    for ((ys, dys), dxs) in y
        .data()
        .chunks_exact(c)
        .zip(dy.data().chunks_exact(c))
        .zip(dx.data_mut().chunks_exact_mut(c))
    {
        let dot: f64 = ys.iter().zip(dys).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxs.iter_mut().zip(ys).zip(dys) {
            *d = yv * (g - dot);
        }
    }
    Ok(dx)
}

/// Per-slice affine layer normalization over the last dimension.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        layer_norm_backward(x, &self.gamma, self.eps, dy)
    }
}

fn slice_moments(s: &[f64]) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let c = x.last_dim();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("layer_norm", x.shape(), &[gamma.len(), beta.len()]));
    }
    if eps <= 0.0 {
        return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x
        .data()
        .chunks_exact(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        let (mean, var) = slice_moments(src);
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            dst[j] = gamma[j] * (src[j] - mean) * inv + beta[j];
        }
    }
    Ok(out)
}

pub fn layer_norm_backward(x: &Tensor, gamma: &[f64], eps: f64, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("layer_norm_backward", x.shape(), dy.shape()));
    }
    let c = x.last_dim();
    let n = c as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; c];
    let mut g = vec![0.0; c];
    for ((src, dys), dxs) in x
        .data()
        .chunks_exact(c)
        .zip(dy.data().chunks_exact(c))
        .zip(dx.data_mut().chunks_exact_mut(c))
    {
        let (mean, var) = slice_moments(src);
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            xhat[j] = (src[j] - mean) * inv;
            g[j] = dys[j] * gamma[j];
        }
        let g_mean = g.iter().sum::<f64>() / n;
        let gx_mean = g.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for j in 0..c {
            dxs[j] = inv * (g[j] - g_mean - xhat[j] * gx_mean);
        }
    }
    Ok(dx)
}

/// Inference-mode batch normalization with frozen statistics, applied per
/// channel (last dimension).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            var: vec![1.0; c],
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            eps: LayerNorm::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        batch_norm_affine(x, &self.mean, &self.var, &self.gamma, &self.beta, self.eps)
    }

    /// Per-channel multiplier `gamma / sqrt(var + eps)`; the map is affine so
    /// this is also its derivative.
    pub fn scales(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect()
    }

    pub fn backward(&self, dy: &Tensor) -> Tensor {
        let s = self.scales();
        let c = dy.last_dim();
        let mut dx = dy.clone();
        for row in dx.data_mut().chunks_exact_mut(c) {
            for (v, k) in row.iter_mut().zip(&s) {
                *v *= k;
            }
        }
        dx
    }
}

pub fn batch_norm_affine(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let c = x.last_dim();
    if [mean.len(), var.len(), gamma.len(), beta.len()]
        .iter()
        .any(|&l| l != c)
    {
        return Err(Error::shape(
            "batch_norm_affine",
            x.shape(),
            &[mean.len(), var.len(), gamma.len(), beta.len()],
        ));
    }
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!(
            "batch_norm_affine: variance must be non-negative, got {v}"
        )));
    }
    if let Some(j) = var.iter().position(|v| v + eps <= 0.0) {
        return Err(Error::invalid(format!(
            "batch_norm_affine: var + eps is zero at channel {j}"
        )));
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for j in 0..c {
            row[j] = gamma[j] * (row[j] - mean[j]) * inv[j] + beta[j];
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Tanh,
    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    Dropout { rate: f64, seed: u64 },
}

/// Whether stochastic layers run. Dropout is the identity under `Inference`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Inference,
    Train,
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activate(x: &Tensor, kind: Activation, mode: Mode) -> Result<Tensor> {
    match kind {
        Activation::Relu => Ok(x.map(relu)),
        Activation::Tanh => Ok(x.map(f64::tanh)),
        Activation::Dropout { rate, seed } => {
            let mut out = x.clone();
            dropout_in_place(out.data_mut(), rate, seed, mode)?;
            Ok(out)
        }
    }
}

pub fn dropout_in_place(data: &mut [f64], rate: f64, seed: u64, mode: Mode) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if mode == Mode::Inference || rate == 0.0 {
        return Ok(());
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in data.iter_mut() {
        if rng.gen::<f64>() < rate {
            *v = 0.0;
        } else {
            *v *= keep;
        }
    }
    Ok(())
}
