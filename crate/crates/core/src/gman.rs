//! Stage 1: image feature extraction.
//!
//! Image tokens are split into non-overlapping `P x P` windows. Local
//! Spectral Attention (LSA) runs windowed self-attention followed by a
//! token-axis frequency filter. Global Memory Attention (GMA) then attends
//! from depth-derived queries to image keys and values; the result is fed
//! token-wise through a ReLU-activated LSTM cell whose state carries across
//! frames, and finally layer-normalized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::numerics::ops::{dropout_in_place, relu, sigmoid, softmax_backward, softmax_slice};
use crate::numerics::{spectral_filter, Complex64, LayerNorm, LinearMap, Mode, Tensor};

/// Geometry of a window partition, including the zero padding added so the
/// window side divides both spatial dims.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLayout {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub channels: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl WindowLayout {
    pub fn new(batch: usize, height: usize, width: usize, window: usize, channels: usize) -> Result<Self> {
        if [batch, height, width, window, channels].contains(&0) {
            return Err(Error::invalid("window layout dims must be positive"));
        }
        Ok(Self {
            batch,
            height,
            width,
            window,
            channels,
            padded_height: height.div_ceil(window) * window,
            padded_width: width.div_ceil(window) * window,
        })
    }

    pub fn windows_per_image(&self) -> usize {
        (self.padded_height / self.window) * (self.padded_width / self.window)
    }

    /// `B* = B * (H/P) * (W/P)`.
    pub fn num_windows(&self) -> usize {
        self.batch * self.windows_per_image()
    }

    /// `N = P * P`.
    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn token_shape(&self) -> [usize; 3] {
        [self.num_windows(), self.tokens_per_window(), self.channels]
    }

    /// Maps `(window, token)` to the source pixel `(b, y, x)` in padded
    /// coordinates.
    fn pixel_of(&self, win: usize, tok: usize) -> (usize, usize, usize) {
        let per = self.windows_per_image();
        let cols = self.padded_width / self.window;
        let (b, w) = (win / per, win % per);
        let (wy, wx) = (w / cols, w % cols);
        let (ty, tx) = (tok / self.window, tok % self.window);
        (b, wy * self.window + ty, wx * self.window + tx)
    }
}

/// `[B, H, W, C] -> [B*, P*P, C]`, zero-padding `H` and `W` up to multiples
/// of `P`. Windows are ordered batch-major then row-major; tokens within a
/// window are row-major.
pub fn partition_windows(x: &Tensor, window: usize) -> Result<(Tensor, WindowLayout)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("partition_windows expects [B, H, W, C], got {s:?}")));
    }
    let layout = WindowLayout::new(s[0], s[1], s[2], window, s[3])?;
    let [nw, nt, c] = layout.token_shape();
    let mut out = Tensor::zeros(&[nw, nt, c]);
    for win in 0..nw {
        for tok in 0..nt {
            let (b, y, xx) = layout.pixel_of(win, tok);
            if y < layout.height && xx < layout.width {
                let src = ((b * layout.height + y) * layout.width + xx) * c;
                out.row_mut(win * nt + tok)
                    .copy_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    Ok((out, layout))
}

/// Exact inverse of [`partition_windows`], cropping the padding.
pub fn merge_windows(tokens: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let want = layout.token_shape();
    if tokens.shape() != want {
        return Err(Error::shape("merge_windows", tokens.shape(), &want));
    }
    let [nw, nt, c] = want;
    let mut out = Tensor::zeros(&[layout.batch, layout.height, layout.width, c]);
    for win in 0..nw {
        for tok in 0..nt {
            let (b, y, x) = layout.pixel_of(win, tok);
            if y < layout.height && x < layout.width {
                let dst = ((b * layout.height + y) * layout.width + x) * c;
                out.data_mut()[dst..dst + c].copy_from_slice(tokens.row(win * nt + tok));
            }
        }
    }
    Ok(out)
}

/// Execution context for stochastic layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ctx {
    pub mode: Mode,
    pub seed: u64,
}

impl Ctx {
    pub fn inference() -> Self {
        Self::default()
    }

    fn derive(&self, salt: u64) -> u64 {
        self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Output of [`multi_head_attention`].
#[derive(Clone, Debug)]
pub struct Attention {
    /// `[B*, heads, N, N]`, row-stochastic unless dropout was applied.
    pub weights: Tensor,
    /// `[B*, N, C]`, heads concatenated along channels.
    pub output: Tensor,
}

fn check_heads(c: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "channel count {c} is not divisible by head count {heads}"
        )));
    }
    Ok(c / heads)
}

/// Scaled dot-product attention per window and head. `dropout` is applied to
/// the attention weights (inverted scaling) when `ctx.mode` is `Train`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    dropout: f64,
    ctx: Ctx,
) -> Result<Attention> {
    if q.ndim() != 3 || q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let (nw, n, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = check_heads(c, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = Tensor::zeros(&[nw, heads, n, n]);
    let mut output = Tensor::zeros(&[nw, n, c]);
    let mut logits = vec![0.0; n];
    for w in 0..nw {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &q.row(w * n + i)[off..off + dh];
                for (j, l) in logits.iter_mut().enumerate() {
                    let kj = &k.row(w * n + j)[off..off + dh];
                    *l = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let base = ((w * heads + h) * n + i) * n;
                let row = &mut weights.data_mut()[base..base + n];
                softmax_slice(&logits, row);
            }
            let base = (w * heads + h) * n * n;
            let block = &mut weights.data_mut()[base..base + n * n];
            dropout_in_place(block, dropout, ctx.derive((w * heads + h) as u64 + 1), ctx.mode)?;
            for i in 0..n {
                let mut acc = vec![0.0; dh];
                for j in 0..n {
                    let a = weights.data()[base + i * n + j];
                    if a == 0.0 {
                        continue;
                    }
                    for (o, &vv) in acc.iter_mut().zip(&v.row(w * n + j)[off..off + dh]) {
                        *o += a * vv;
                    }
                }
                output.row_mut(w * n + i)[off..off + dh].copy_from_slice(&acc);
            }
        }
    }
    Ok(Attention { weights, output })
}

/// Backward pass of [`multi_head_attention`] without dropout, returning
/// `(dq, dk, dv)`.
pub fn multi_head_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    weights: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (nw, n, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = check_heads(c, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    for w in 0..nw {
        for h in 0..heads {
            let off = h * dh;
            let base = (w * heads + h) * n * n;
            let a = Tensor::new(vec![n, n], weights.data()[base..base + n * n].to_vec())?;
            let mut da = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let go = &d_out.row(w * n + i)[off..off + dh];
                for j in 0..n {
                    let vj = &v.row(w * n + j)[off..off + dh];
                    da.data_mut()[i * n + j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                    let aij = a.data()[i * n + j];
                    for (dvv, g) in dv.row_mut(w * n + j)[off..off + dh].iter_mut().zip(go) {
                        *dvv += aij * g;
                    }
                }
            }
            let ds = softmax_backward(&a, &da)?;
            for i in 0..n {
                for j in 0..n {
                    let s = ds.data()[i * n + j] * scale;
                    if s == 0.0 {
                        continue;
                    }
                    for d in 0..dh {
                        let kj = k.row(w * n + j)[off + d];
                        let qi = q.row(w * n + i)[off + d];
                        dq.row_mut(w * n + i)[off + d] += s * kj;
                        dk.row_mut(w * n + j)[off + d] += s * qi;
                    }
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Standard LSTM weights with gate blocks ordered `[input, forget, cell,
/// output]` along the `4C` axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmWeights {
    pub input: LinearMap,
    pub hidden: LinearMap,
}

impl LstmWeights {
    pub fn init(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            input: LinearMap::init(c, 4 * c, true, rng),
            hidden: LinearMap::init(c, 4 * c, false, rng),
        }
    }

    pub fn zeros(c: usize) -> Self {
        Self {
            input: LinearMap::zeros(c, 4 * c, true),
            hidden: LinearMap::zeros(c, 4 * c, false),
        }
    }

    pub fn channels(&self) -> usize {
        self.input.c_in()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            h: Tensor::zeros(shape),
            c: Tensor::zeros(shape),
        }
    }

    pub fn check(&self, shape: &[usize]) -> Result<()> {
        if self.h.shape() != shape || self.c.shape() != shape {
            return Err(Error::shape("lstm state", self.h.shape(), shape));
        }
        self.h.check_finite("lstm hidden state")?;
        self.c.check_finite("lstm cell state")
    }
}

struct LstmGates {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_new: Vec<f64>,
}

fn lstm_gates(x: &Tensor, state: &LstmState, weights: &LstmWeights) -> Result<LstmGates> {
    let c = weights.channels();
    if x.last_dim() != c {
        return Err(Error::shape("lstm_step", x.shape(), &[c]));
    }
    state.check(x.shape())?;
    let z = weights.input.apply(x)?.add(&weights.hidden.apply(&state.h)?)?;
    let rows = x.rows();
    let mut gates = LstmGates {
        i: Vec::with_capacity(rows * c),
        f: Vec::with_capacity(rows * c),
        g: Vec::with_capacity(rows * c),
        o: Vec::with_capacity(rows * c),
        c_new: Vec::with_capacity(rows * c),
    };
    for r in 0..rows {
        let zr = z.row(r);
        let cr = state.c.row(r);
        for j in 0..c {
            let i = sigmoid(zr[j]);
            let f = sigmoid(zr[c + j]);
            let g = zr[2 * c + j].tanh();
            let o = sigmoid(zr[3 * c + j]);
            gates.i.push(i);
            gates.f.push(f);
            gates.g.push(g);
            gates.o.push(o);
            gates.c_new.push(f * cr[j] + i * g);
        }
    }
    Ok(gates)
}

/// One token-wise LSTM step with ReLU on the cell-to-hidden path:
/// `c' = f*c + i*g`, `h' = o * relu(c')`. Returns `(h', (h', c'))`.
pub fn lstm_step(x: &Tensor, state: &LstmState, weights: &LstmWeights) -> Result<(Tensor, LstmState)> {
    let gates = lstm_gates(x, state, weights)?;
    let h: Vec<f64> = gates
        .o
        .iter()
        .zip(&gates.c_new)
        .map(|(o, c)| o * relu(*c))
        .collect();
    let h = Tensor::new(x.shape().to_vec(), h)?;
    let c = Tensor::new(x.shape().to_vec(), gates.c_new)?;
    Ok((h.clone(), LstmState { h, c }))
}

/// Gradients of [`lstm_step`] given upstream gradients on `h'` and `c'`.
pub struct LstmGrads {
    pub x: Tensor,
    pub h: Tensor,
    pub c: Tensor,
}

pub fn lstm_step_backward(
    x: &Tensor,
    state: &LstmState,
    weights: &LstmWeights,
    d_h: &Tensor,
    d_c: Option<&Tensor>,
) -> Result<LstmGrads> {
    let c = weights.channels();
    let g = lstm_gates(x, state, weights)?;
    let rows = x.rows();
    let mut dz = Tensor::zeros(&[rows, 4 * c]);
    let mut dc_prev = Tensor::zeros(x.shape());
    for r in 0..rows {
        for j in 0..c {
            let t = r * c + j;
            let dh = d_h.data()[t];
            let cn = g.c_new[t];
            let d_o = dh * relu(cn);
            let mut dc = if cn > 0.0 { dh * g.o[t] } else { 0.0 };
            if let Some(extra) = d_c {
                dc += extra.data()[t];
            }
            let di = dc * g.g[t];
            let dg = dc * g.i[t];
            let df = dc * state.c.data()[t];
            dc_prev.data_mut()[t] = dc * g.f[t];
            let row = dz.row_mut(r);
            row[j] = di * g.i[t] * (1.0 - g.i[t]);
            row[c + j] = df * g.f[t] * (1.0 - g.f[t]);
            row[2 * c + j] = dg * (1.0 - g.g[t] * g.g[t]);
            row[3 * c + j] = d_o * g.o[t] * (1.0 - g.o[t]);
        }
    }
    let dz = dz.reshape(&[x.shape()[..x.ndim() - 1].to_vec(), vec![4 * c]].concat())?;
    Ok(LstmGrads {
        x: weights.input.backward_input(&dz)?,
        h: weights.hidden.backward_input(&dz)?,
        c: dc_prev,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsaParams {
    pub query: LinearMap,
    pub key: LinearMap,
    pub value: LinearMap,
    pub output: LinearMap,
    pub filter: Vec<Complex64>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmaParams {
    pub key: LinearMap,
    pub query: LinearMap,
    pub value: LinearMap,
    pub lstm: LstmWeights,
    pub norm: LayerNorm,
}

impl GmaParams {
    pub fn init(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            key: LinearMap::init(c, c, true, rng),
            query: LinearMap::init(c, c, true, rng),
            value: LinearMap::init(c, c, true, rng),
            lstm: LstmWeights::init(c, rng),
            norm: LayerNorm::identity(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmanParams {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub dropout_rate: f64,
    /// Multiplier applied to depth (meters) before embedding.
    pub depth_scale: f64,
    pub image_embed: LinearMap,
    pub depth_embed: LinearMap,
    pub lsa: LsaParams,
    pub gma: GmaParams,
    /// Fully connected layer after GMA, identity activation.
    pub mlp: LinearMap,
}

impl GmanParams {
    pub fn init(channels: usize, heads: usize, window: usize, dropout_rate: f64, seed: u64) -> Result<Self> {
        check_heads(channels, heads)?;
        if window == 0 {
            return Err(Error::invalid("window size must be positive"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {dropout_rate}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = channels;
        let n = window * window;
        let image_embed = LinearMap::init(3, c, true, &mut rng);
        let depth_embed = LinearMap::init(3, c, true, &mut rng);
        let lsa = LsaParams {
            query: LinearMap::init(c, c, true, &mut rng),
            key: LinearMap::init(c, c, true, &mut rng),
            value: LinearMap::init(c, c, true, &mut rng),
            output: LinearMap::init(c, c, true, &mut rng),
            filter: (0..n)
                .map(|_| Complex64::new(rand::Rng::gen_range(&mut rng, 0.5..1.5), 0.0))
                .collect(),
            norm: LayerNorm::identity(c),
        };
        let gma = GmaParams::init(c, &mut rng);
        let mlp = LinearMap::init(c, c, true, &mut rng);
        Ok(Self {
            channels,
            heads,
            window,
            dropout_rate,
            depth_scale: 1.0 / 50.0,
            image_embed,
            depth_embed,
            lsa,
            gma,
            mlp,
        })
    }
}

/// Windowed self-attention, dropout on the attention weights, output map,
/// token-axis spectral filter, residual, layer norm.
pub fn lsa_forward(tokens: &Tensor, params: &LsaParams, heads: usize, dropout: f64, ctx: Ctx) -> Result<Tensor> {
    let q = params.query.apply(tokens)?;
    let k = params.key.apply(tokens)?;
    let v = params.value.apply(tokens)?;
    let attn = multi_head_attention(&q, &k, &v, heads, dropout, Ctx { seed: ctx.derive(0x15A), ..ctx })?;
    let mixed = params.output.apply(&attn.output)?;
    let filtered = spectral_filter(&mixed, &params.filter)?;
    params.norm.forward(&tokens.add(&filtered)?)
}

/// GMA attention only: keys and values from image tokens, queries from
/// depth tokens.
pub fn gma_attention(
    i_tokens: &Tensor,
    d_tokens: &Tensor,
    params: &GmaParams,
    heads: usize,
    dropout: f64,
    ctx: Ctx,
) -> Result<Attention> {
    if i_tokens.shape() != d_tokens.shape() {
        return Err(Error::shape("gma_forward", i_tokens.shape(), d_tokens.shape()));
    }
    let k = params.key.apply(i_tokens)?;
    let q = params.query.apply(d_tokens)?;
    let v = params.value.apply(i_tokens)?;
    multi_head_attention(&q, &k, &v, heads, dropout, Ctx { seed: ctx.derive(0x6BA), ..ctx })
}

/// GMA followed by the ReLU-LSTM and layer norm. Returns the normalized
/// tokens and the updated recurrent state.
pub fn gma_forward(
    i_tokens: &Tensor,
    d_tokens: &Tensor,
    params: &GmaParams,
    heads: usize,
    state: &LstmState,
    dropout: f64,
    ctx: Ctx,
) -> Result<(Tensor, LstmState)> {
    let attn = gma_attention(i_tokens, d_tokens, params, heads, dropout, ctx)?;
    let (h, next) = lstm_step(&attn.output, state, &params.lstm)?;
    Ok((params.norm.forward(&h)?, next))
}

/// Gradients of `sum(d_out * gma_forward(..).0)` with respect to the image
/// and depth tokens (inference mode).
pub fn gma_backward(
    i_tokens: &Tensor,
    d_tokens: &Tensor,
    params: &GmaParams,
    heads: usize,
    state: &LstmState,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let k = params.key.apply(i_tokens)?;
    let q = params.query.apply(d_tokens)?;
    let v = params.value.apply(i_tokens)?;
    let attn = multi_head_attention(&q, &k, &v, heads, 0.0, Ctx::inference())?;
    let (h, _) = lstm_step(&attn.output, state, &params.lstm)?;
    let dh = params.norm.backward(&h, d_out)?;
    let lg = lstm_step_backward(&attn.output, state, &params.lstm, &dh, None)?;
    let (dq, dk, dv) = multi_head_attention_backward(&q, &k, &v, heads, &attn.weights, &lg.x)?;
    let di = params
        .key
        .backward_input(&dk)?
        .add(&params.value.backward_input(&dv)?)?;
    let dd = params.query.backward_input(&dq)?;
    Ok((di, dd))
}

/// Full Stage 1 for one frame: embed image and replicated depth to `C`
/// channels, window them, LSA on the image, GMA with depth queries, MLP,
/// merge back to `(H, W, C)`.
pub fn gman_forward(
    image: &Tensor,
    depth: &DepthMap,
    params: &GmanParams,
    state: Option<&LstmState>,
    ctx: Ctx,
) -> Result<(Tensor, LstmState)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid(format!("image must be [H, W, 3], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], params.channels);
    if depth.height != h || depth.width != w {
        return Err(Error::shape("gman_forward", s, &[depth.height, depth.width]));
    }
    let img = params.image_embed.apply(image)?.reshape(&[1, h, w, c])?;
    let dep = params
        .depth_embed
        .apply(&depth.to_tensor3(params.depth_scale))?
        .reshape(&[1, h, w, c])?;
    let (img_tokens, layout) = partition_windows(&img, params.window)?;
    let (dep_tokens, _) = partition_windows(&dep, params.window)?;
    let zero;
    let state = match state {
        Some(st) => st,
        None => {
            zero = LstmState::zeros(&layout.token_shape());
            &zero
        }
    };
    let local = lsa_forward(&img_tokens, &params.lsa, params.heads, params.dropout_rate, ctx)?;
    let (global, next) = gma_forward(
        &local,
        &dep_tokens,
        &params.gma,
        params.heads,
        state,
        params.dropout_rate,
        ctx,
    )?;
    let out = params.mlp.apply(&global)?;
    let merged = merge_windows(&out, &layout)?.reshape(&[h, w, c])?;
    merged.check_finite("gman output")?;
    Ok((merged, next))
}

/// Image embedding alone, used when Stage 1 is ablated.
pub fn embed_image(image: &Tensor, params: &GmanParams) -> Result<Tensor> {
    params.image_embed.apply(image)
}
