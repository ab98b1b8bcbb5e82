//! Stage 2: fusion of image features with LiDAR voxel features through sparse
//! attention and multiplicative memory gates.
//!
//! LiDAR tokens supply queries, image tokens supply keys and values. Per
//! token and channel:
//!
//! ```text
//! beta_h = BN(qk) * BN(h_prev)
//! beta_c = relu(beta_h * c_prev)
//! F_S    = relu(beta_c * lv) * tanh(beta_h * lv)
//! c      = beta_c * F_S
//! h      = relu(beta_h) * tanh(c)
//! ```
//!
//! where `lv` is the mapped value and `qk` is either the sparse-attention
//! context over the mapped keys or the elementwise query-key product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{relu, softmax_backward, softmax_slice};
use crate::numerics::{transpose_last2, BatchNorm, LinearMap, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AsmnMode {
    /// Row-normalized sparse attention over mapped keys.
    #[default]
    Attention,
    /// Elementwise product of mapped queries and keys.
    Elementwise,
}

impl std::str::FromStr for AsmnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "elementwise" => Ok(Self::Elementwise),
            other => Err(Error::invalid(format!("unknown asmn mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsmnParams {
    pub query: LinearMap,
    pub key: LinearMap,
    pub value: LinearMap,
    pub bn_qk: BatchNorm,
    pub bn_h: BatchNorm,
    /// Fraction of keys kept per query row, in `(0, 1]`.
    pub sparsity: f64,
    pub mode: AsmnMode,
    /// ReLU on the `beta_c * lv` branch. Disabling it together with
    /// `value_linear` gives the plain `(beta_c v) * tanh(beta_h v)` form.
    pub value_relu: bool,
    pub value_linear: bool,
    /// Rescale the carried state to unit per-channel RMS between frames.
    /// Without it `c_t` is quadratic in `c_{t-1}` and underflows to zero
    /// within a few frames.
    pub rescale_state: bool,
}

impl AsmnParams {
    pub const DEFAULT_SPARSITY: f64 = 0.25;

    pub fn init(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            query: LinearMap::init(channels, channels, true, &mut rng),
            key: LinearMap::init(channels, channels, true, &mut rng),
            value: LinearMap::init(channels, channels, true, &mut rng),
            bn_qk: BatchNorm::identity(channels),
            bn_h: BatchNorm::identity(channels),
            sparsity: Self::DEFAULT_SPARSITY,
            mode: AsmnMode::Attention,
            value_relu: true,
            value_linear: true,
            rescale_state: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.query.c_in()
    }
}

/// Recurrent state over flattened `(H*W, C)` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsmnState {
    pub h: Tensor,
    pub c: Tensor,
}

impl AsmnState {
    /// All-ones: the gates are purely multiplicative, so a zero state would
    /// annihilate every later frame.
    pub fn initial(tokens: usize, channels: usize) -> Self {
        Self {
            h: Tensor::ones(&[tokens, channels]),
            c: Tensor::ones(&[tokens, channels]),
        }
    }

    /// Each channel of `h` and `c` scaled to unit RMS over tokens, the scale
    /// of the initial state. All-zero channels stay zero.
    pub fn rescaled(&self) -> Self {
        Self {
            h: unit_rms_columns(&self.h),
            c: unit_rms_columns(&self.c),
        }
    }

    /// State handed to the next frame.
    pub fn carried(self, params: &AsmnParams) -> Self {
        if params.rescale_state {
            self.rescaled()
        } else {
            self
        }
    }
}

fn unit_rms_columns(t: &Tensor) -> Tensor {
    let c = t.last_dim();
    let n = t.rows();
    // divide by the channel peak first so tiny states do not underflow
    let mut peak = vec![0.0f64; c];
    for i in 0..n {
        for (m, v) in peak.iter_mut().zip(t.row(i)) {
            *m = m.max(v.abs());
        }
    }
    let mut sq = vec![0.0; c];
    for i in 0..n {
        for ((s, v), m) in sq.iter_mut().zip(t.row(i)).zip(&peak) {
            if *m > 0.0 {
                *s += (v / m) * (v / m);
            }
        }
    }
    let factor: Vec<(f64, f64)> = sq
        .iter()
        .zip(&peak)
        .map(|(&s, &m)| if m > 0.0 { (1.0 / m, (n as f64 / s).sqrt()) } else { (0.0, 0.0) })
        .collect();
    let mut out = t.clone();
    for i in 0..n {
        for (v, (a, b)) in out.row_mut(i).iter_mut().zip(&factor) {
            *v = *v * a * b;
        }
    }
    out
}

fn kept_count(t: usize, rho: f64) -> usize {
    ((rho * t as f64).ceil() as usize).clamp(1, t)
}

/// Kept `(column, logit)` pairs of one row, ascending by column. `k_t` is
/// the `(C, T)` transpose of the keys; accumulating one channel at a time
/// over contiguous rows vectorizes and sums each logit in channel order.
fn sparse_row(qi: &[f64], k_t: &Tensor, keep: usize, scale: f64) -> Vec<(usize, f64)> {
    let t = k_t.last_dim();
    let mut logits = vec![0.0; t];
    for (&qc, kc) in qi.iter().zip((0..qi.len()).map(|c| k_t.row(c))) {
        for (l, &kv) in logits.iter_mut().zip(kc) {
            *l += qc * kv;
        }
    }
    let mut all: Vec<(usize, f64)> = logits.into_iter().map(|l| l * scale).enumerate().collect();
    if keep < t {
        // descending by logit, lower column first on ties
        let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        all.select_nth_unstable_by(keep - 1, cmp);
        all.truncate(keep);
        all.sort_unstable_by_key(|e| e.0);
    }
    all
}

fn check_sparse_inputs(q: &Tensor, k: &Tensor, rho: f64) -> Result<()> {
    if q.ndim() != 2 || q.shape() != k.shape() {
        return Err(Error::shape("sparse_attention", q.shape(), k.shape()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("sparsity fraction must lie in (0, 1], got {rho}")));
    }
    Ok(())
}

fn sparse_rows(q: &Tensor, k: &Tensor, rho: f64) -> Result<Vec<Vec<(usize, f64)>>> {
    check_sparse_inputs(q, k, rho)?;
    let t = q.rows();
    let keep = kept_count(t, rho);
    let scale = 1.0 / (q.last_dim() as f64).sqrt();
    let k_t = transpose_last2(k)?;
    Ok((0..t)
        .into_par_iter()
        .map(|i| sparse_row(q.row(i), &k_t, keep, scale))
        .collect())
}

/// Scaled logits `q kᵀ / sqrt(C)` with all but the top `ceil(rho T)` entries
/// of each row set to `-inf`. Ties keep the lower column index.
pub fn sparse_attention_logits(q: &Tensor, k: &Tensor, rho: f64) -> Result<Tensor> {
    let rows = sparse_rows(q, k, rho)?;
    let t = q.rows();
    let mut out = Tensor::full(&[t, t], f64::NEG_INFINITY);
    for (i, row) in rows.iter().enumerate() {
        for &(j, l) in row {
            out.data_mut()[i * t + j] = l;
        }
    }
    Ok(out)
}

/// Row-normalized sparse attention applied to `values`.
fn sparse_context(rows: &[Vec<(usize, f64)>], values: &Tensor) -> Vec<Vec<f64>> {
    let c = values.last_dim();
    rows.par_iter()
        .map(|row| {
            let logits: Vec<f64> = row.iter().map(|e| e.1).collect();
            let mut w = vec![0.0; logits.len()];
            softmax_slice(&logits, &mut w);
            let mut acc = vec![0.0; c];
            for (&(j, _), a) in row.iter().zip(&w) {
                for (o, v) in acc.iter_mut().zip(values.row(j)) {
                    *o += a * v;
                }
            }
            acc
        })
        .collect()
}

/// Every intermediate of one step, as flattened `(T, C)` tensors.
#[derive(Clone, Debug)]
pub struct AsmnTrace {
    pub query_key: Tensor,
    pub beta_h: Tensor,
    pub beta_c: Tensor,
    pub value: Tensor,
    pub fused: Tensor,
    pub state: AsmnState,
}

fn flatten(x: &Tensor, name: &'static str) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::invalid(format!("{name} must be [H, W, C], got {:?}", x.shape())));
    }
    let s = x.shape();
    x.clone().reshape(&[s[0] * s[1], s[2]])
}

pub fn asmn_trace(f_i: &Tensor, f_l: &Tensor, params: &AsmnParams, state: &AsmnState) -> Result<AsmnTrace> {
    if f_i.shape() != f_l.shape() {
        return Err(Error::shape("asmn_step", f_i.shape(), f_l.shape()));
    }
    let fi = flatten(f_i, "image features")?;
    let fl = flatten(f_l, "lidar features")?;
    let (t, c) = (fi.rows(), fi.last_dim());
    if c != params.channels() {
        return Err(Error::shape("asmn_step", f_i.shape(), &[params.channels()]));
    }
    if state.h.shape() != [t, c] || state.c.shape() != [t, c] {
        return Err(Error::shape("asmn state", state.h.shape(), &[t, c]));
    }
    state.h.check_finite("asmn hidden state")?;
    state.c.check_finite("asmn cell state")?;

    let q = params.query.apply(&fl)?;
    let k = params.key.apply(&fi)?;
    let lv = if params.value_linear {
        params.value.apply(&fi)?
    } else {
        fi.clone()
    };
    let query_key = match params.mode {
        AsmnMode::Attention => {
            let rows = sparse_rows(&q, &k, params.sparsity)?;
            Tensor::new(vec![t, c], sparse_context(&rows, &k).concat())?
        }
        AsmnMode::Elementwise => q.mul(&k)?,
    };
    let beta_h = params.bn_qk.forward(&query_key)?.mul(&params.bn_h.forward(&state.h)?)?;
    let beta_c = beta_h.zip_map(&state.c, |b, cp| relu(b * cp))?;
    let gate = beta_c.mul(&lv)?;
    let gate = if params.value_relu { gate.map(relu) } else { gate };
    let fused = gate.mul(&beta_h.zip_map(&lv, |b, v| (b * v).tanh())?)?;
    let c_new = beta_c.mul(&fused)?;
    let h_new = beta_h.zip_map(&c_new, |b, cn| relu(b) * cn.tanh())?;
    fused.check_finite("asmn output")?;
    Ok(AsmnTrace {
        query_key,
        beta_h,
        beta_c,
        value: lv,
        fused,
        state: AsmnState { h: h_new, c: c_new },
    })
}

/// One fusion step on `(H, W, C)` features; returns `F_S` in the same shape.
pub fn asmn_step(f_i: &Tensor, f_l: &Tensor, params: &AsmnParams, state: &AsmnState) -> Result<(Tensor, AsmnState)> {
    let tr = asmn_trace(f_i, f_l, params, state)?;
    Ok((tr.fused.reshape(f_i.shape())?, tr.state))
}

/// Gradients of `sum(d_out * F_S)` with respect to `(F_I, F_L)`. The sparse
/// selection is held fixed, which is exact away from ties.
pub fn asmn_backward(
    f_i: &Tensor,
    f_l: &Tensor,
    params: &AsmnParams,
    state: &AsmnState,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let tr = asmn_trace(f_i, f_l, params, state)?;
    let fi = flatten(f_i, "image features")?;
    let fl = flatten(f_l, "lidar features")?;
    let (t, c) = (fi.rows(), fi.last_dim());
    let d_f = d_out.clone().reshape(&[t, c])?;
    let q = params.query.apply(&fl)?;
    let k = params.key.apply(&fi)?;
    let lv = &tr.value;
    let bh_state = params.bn_h.forward(&state.h)?;
    let s_qk = params.bn_qk.scales();

    let mut d_lv = Tensor::zeros(&[t, c]);
    let mut d_qk = Tensor::zeros(&[t, c]);
    for r in 0..t {
        for j in 0..c {
            let x = r * c + j;
            let (bh, bc, v) = (tr.beta_h.data()[x], tr.beta_c.data()[x], lv.data()[x]);
            let a0 = bc * v;
            let a = if params.value_relu { relu(a0) } else { a0 };
            let tb = (bh * v).tanh();
            let g = d_f.data()[x];
            let du = g * a * (1.0 - tb * tb);
            let mut da0 = g * tb;
            if params.value_relu && a0 <= 0.0 {
                da0 = 0.0;
            }
            let d_bc = da0 * v;
            d_lv.data_mut()[x] = da0 * bc + du * bh;
            let cp = state.c.data()[x];
            let mut d_bh = du * v;
            if bh * cp > 0.0 {
                d_bh += d_bc * cp;
            }
            d_qk.data_mut()[x] = d_bh * bh_state.data()[x] * s_qk[j];
        }
    }

    let (dq, dk) = match params.mode {
        AsmnMode::Elementwise => (d_qk.mul(&k)?, d_qk.mul(&q)?),
        AsmnMode::Attention => {
            let rows = sparse_rows(&q, &k, params.sparsity)?;
            let scale = 1.0 / (c as f64).sqrt();
            let mut dq = Tensor::zeros(&[t, c]);
            let mut dk = Tensor::zeros(&[t, c]);
            for (i, row) in rows.iter().enumerate() {
                let n = row.len();
                let logits: Vec<f64> = row.iter().map(|e| e.1).collect();
                let mut w = vec![0.0; n];
                softmax_slice(&logits, &mut w);
                let g = d_qk.row(i).to_vec();
                let mut dw = vec![0.0; n];
                for (m, &(j, _)) in row.iter().enumerate() {
                    dw[m] = g.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
                    for (o, gv) in dk.row_mut(j).iter_mut().zip(&g) {
                        *o += w[m] * gv;
                    }
                }
                let dl = softmax_backward(&Tensor::new(vec![n], w)?, &Tensor::new(vec![n], dw)?)?;
                for (m, &(j, _)) in row.iter().enumerate() {
                    let s = dl.data()[m] * scale;
                    let kj = k.row(j).to_vec();
                    let qi = q.row(i).to_vec();
                    for (o, kv) in dq.row_mut(i).iter_mut().zip(&kj) {
                        *o += s * kv;
                    }
                    for (o, qv) in dk.row_mut(j).iter_mut().zip(&qi) {
                        *o += s * qv;
                    }
                }
            }
            (dq, dk)
        }
    };
    let mut d_fi = params.key.backward_input(&dk)?;
    d_fi = d_fi.add(&if params.value_linear {
        params.value.backward_input(&d_lv)?
    } else {
        d_lv
    })?;
    let d_fl = params.query.backward_input(&dq)?;
    Ok((d_fi.reshape(f_i.shape())?, d_fl.reshape(f_l.shape())?))
}

/// Folds [`asmn_step`] over frames from the all-ones state. Returns the last
/// `F_S` and the state after every frame.
pub fn asmn_sequence(frames: &[(Tensor, Tensor)], params: &AsmnParams) -> Result<(Tensor, Vec<AsmnState>)> {
    let (first, _) = frames
        .first()
        .ok_or_else(|| Error::invalid("asmn_sequence needs at least one frame"))?;
    let s = first.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("features must be [H, W, C], got {s:?}")));
    }
    let mut state = AsmnState::initial(s[0] * s[1], s[2]);
    let mut states = Vec::with_capacity(frames.len());
    let mut out = None;
    for (f_i, f_l) in frames {
        let (f_s, next) = asmn_step(f_i, f_l, params, &state)?;
        states.push(next.clone());
        state = next.carried(params);
        out = Some(f_s);
    }
    Ok((out.expect("non-empty"), states))
}
