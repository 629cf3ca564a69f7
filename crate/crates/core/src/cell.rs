//! One recurrent step of the attentive recurrent cell.
//!
//! A step consumes one local window `x̂` of shape `(c, m)` (one token per
//! channel, `m` samples of features) and the state block `c_p` of shape
//! `(s, m)`, and produces the next state block:
//!
//! ```text
//! Qx, Kx, Vx = x̂·Wx_q, x̂·Wx_k, x̂·Wx_v          Qs, Ks, Vs = c_p·Ws_q, c_p·Ws_k, c_p·Ws_v
//! u_x  = softmax(Qx·Kxᵀ/√m)·Vx                   (c, m)
//! u_xs = softmax(Qx·Ksᵀ/√m)·Vs                   (c, m)
//! u_sx = softmax(Qs·Kxᵀ/√m)·Vx                   (s, m)
//! h    = dropout(layer_norm(W_o·[u_x; u_xs; u_sx]))   (s, m)
//! z = tanh(h·W_zᵀ + b_z)   i = σ(h·W_iᵀ + b_i − 1)   f = σ(h·W_fᵀ + b_f + 1)
//! c_{p+1} = c_p ⊙ f + z ⊙ i
//! ```
//!
//! The −1/+1 shifts are part of the formula, not of the stored biases, so a
//! freshly initialized cell leans towards keeping its state.

use crate::error::{Error, Result};
use crate::numerics::{
    dropout, dropout_backward, layer_norm, layer_norm_backward, sigmoid, softmax_rows,
    softmax_rows_backward, tanh_m, DropoutMask, LayerNormCache, Matrix, Param, Rng,
};

/// Shift applied inside the input gate.
pub const INPUT_GATE_SHIFT: f64 = -1.0;
/// Shift applied inside the forget gate.
pub const FORGET_GATE_SHIFT: f64 = 1.0;

const C0_INIT_BOUND: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellConfig {
    /// Channels, i.e. tokens per window.
    pub c: usize,
    /// Window length, the feature dimension of every token and state vector.
    pub m: usize,
    /// Number of state vectors.
    pub s: usize,
    pub dropout_p: f64,
}

impl CellConfig {
    pub fn new(c: usize, m: usize, s: usize, dropout_p: f64) -> Result<Self> {
        if c == 0 || m == 0 || s == 0 {
            return Err(Error::Config(format!(
                "cell dimensions must be positive (c={c}, m={m}, s={s})"
            )));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Param(format!("dropout probability must be in [0, 1), got {dropout_p}")));
        }
        Ok(CellConfig { c, m, s, dropout_p })
    }

    /// Key dimension used in the `√d_k` logit scale. Keys live in the window axis.
    pub fn d_k(&self) -> usize {
        self.m
    }
}

/// The recurrent state block, `s` vectors of dimension `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub vectors: Matrix,
}

impl CellState {
    pub fn new(vectors: Matrix) -> Self {
        CellState { vectors }
    }

    pub fn zeros(config: &CellConfig) -> Self {
        CellState::new(Matrix::zeros(config.s, config.m))
    }
}

/// Every learnable tensor of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub wx_q: Param,
    pub wx_k: Param,
    pub wx_v: Param,
    pub ws_q: Param,
    pub ws_k: Param,
    pub ws_v: Param,
    /// Fusion projection, `(s, 2c + s)`, applied on the left of the stacked attention outputs.
    pub w_o: Param,
    pub w_z: Param,
    pub w_i: Param,
    pub w_f: Param,
    pub b_z: Param,
    pub b_i: Param,
    pub b_f: Param,
    pub ln_gain: Param,
    pub ln_bias: Param,
    /// Learnable initial state.
    pub c0: Param,
}

/// Tensor names in checkpoint order.
pub const CELL_PARAM_NAMES: [&str; 16] = [
    "Wx_q", "Wx_k", "Wx_v", "Ws_q", "Ws_k", "Ws_v", "W_o", "W_z", "W_i", "W_f", "b_z", "b_i", "b_f",
    "ln_gain", "ln_bias", "c0",
];

impl CellParams {
    /// All-zero tensors except the layer-norm gain, which is one.
    pub fn zeros(config: &CellConfig) -> Self {
        let CellConfig { c, m, s, .. } = *config;
        let sq = || Param::zeros(m, m);
        let row = || Param::zeros(1, m);
        CellParams {
            wx_q: sq(),
            wx_k: sq(),
            wx_v: sq(),
            ws_q: sq(),
            ws_k: sq(),
            ws_v: sq(),
            w_o: Param::zeros(s, 2 * c + s),
            w_z: sq(),
            w_i: sq(),
            w_f: sq(),
            b_z: row(),
            b_i: row(),
            b_f: row(),
            ln_gain: Param::new(Matrix::filled(1, m, 1.0)),
            ln_bias: row(),
            c0: Param::zeros(s, m),
        }
    }

    /// Every weight matrix uniform in `±1/√m`, zero biases, unit gain, small random `c0`.
    pub fn init(config: &CellConfig, rng: &mut Rng) -> Self {
        let CellConfig { c, m, s, .. } = *config;
        let bound = 1.0 / (m as f64).sqrt();
        let mut p = CellParams::zeros(config);
        for w in [
            &mut p.wx_q, &mut p.wx_k, &mut p.wx_v, &mut p.ws_q, &mut p.ws_k, &mut p.ws_v,
        ] {
            w.value = Matrix::uniform(m, m, bound, rng);
        }
        p.w_o.value = Matrix::uniform(s, 2 * c + s, bound, rng);
        for w in [&mut p.w_z, &mut p.w_i, &mut p.w_f] {
            w.value = Matrix::uniform(m, m, bound, rng);
        }
        p.c0.value = Matrix::uniform(s, m, C0_INIT_BOUND, rng);
        p
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        [
            &self.wx_q, &self.wx_k, &self.wx_v, &self.ws_q, &self.ws_k, &self.ws_v, &self.w_o,
            &self.w_z, &self.w_i, &self.w_f, &self.b_z, &self.b_i, &self.b_f, &self.ln_gain,
            &self.ln_bias, &self.c0,
        ]
        .into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        [
            &mut self.wx_q, &mut self.wx_k, &mut self.wx_v, &mut self.ws_q, &mut self.ws_k,
            &mut self.ws_v, &mut self.w_o, &mut self.w_z, &mut self.w_i, &mut self.w_f,
            &mut self.b_z, &mut self.b_i, &mut self.b_f, &mut self.ln_gain, &mut self.ln_bias,
            &mut self.c0,
        ]
        .into_iter()
    }

    /// Expected `(rows, cols)` of every tensor, in checkpoint order.
    pub fn shapes(config: &CellConfig) -> [(usize, usize); 16] {
        let CellConfig { c, m, s, .. } = *config;
        let sq = (m, m);
        let row = (1, m);
        [sq, sq, sq, sq, sq, sq, (s, 2 * c + s), sq, sq, sq, row, row, row, row, row, (s, m)]
    }

    pub fn zero_grads(&mut self) {
        self.iter_mut().for_each(Param::zero_grad);
    }
}

/// Query/key/value projections of the window tokens and of the state vectors.
#[derive(Debug, Clone)]
pub struct Projections {
    pub qx: Matrix,
    pub kx: Matrix,
    pub vx: Matrix,
    pub qs: Matrix,
    pub ks: Matrix,
    pub vs: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionOutputs {
    /// Window self-attention, `(c, m)`.
    pub u_x: Matrix,
    /// Window queries over state keys, `(c, m)`.
    pub u_xs: Matrix,
    /// State queries over window keys, `(s, m)`.
    pub u_sx: Matrix,
}

pub fn project_qkv(x_hat: &Matrix, state: &CellState, params: &CellParams) -> Result<Projections> {
    let st = &state.vectors;
    if x_hat.cols() != params.wx_q.value.rows() {
        return Err(Error::dim("project_qkv", x_hat.shape(), params.wx_q.shape()));
    }
    if st.cols() != params.ws_q.value.rows() || st.rows() != params.c0.value.rows() {
        return Err(Error::dim("project_qkv", st.shape(), params.c0.shape()));
    }
    Ok(Projections {
        qx: x_hat.matmul(&params.wx_q.value)?,
        kx: x_hat.matmul(&params.wx_k.value)?,
        vx: x_hat.matmul(&params.wx_v.value)?,
        qs: st.matmul(&params.ws_q.value)?,
        ks: st.matmul(&params.ws_k.value)?,
        vs: st.matmul(&params.ws_v.value)?,
    })
}

/// Scaled dot-product attention returning the output and the row-stochastic weights.
fn attend(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    if k.rows() != v.rows() {
        return Err(Error::dim("attention", k.shape(), v.shape()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let weights = softmax_rows(&q.matmul_nt(k)?.scale(scale));
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// Backward of [`attend`]: returns `(dQ, dK, dV)`.
fn attend_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &Matrix,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let d_weights = d_out.matmul_nt(v)?;
    let dv = weights.matmul_tn(d_out)?;
    let d_logits = softmax_rows_backward(weights, &d_weights)?.scale(scale);
    let dq = d_logits.matmul(k)?;
    let dk = d_logits.matmul_tn(q)?;
    Ok((dq, dk, dv))
}

/// All-to-all attention of the window's channel tokens over themselves.
pub fn self_attention(qx: &Matrix, kx: &Matrix, vx: &Matrix) -> Result<Matrix> {
    if qx.shape() != kx.shape() || kx.shape() != vx.shape() {
        return Err(Error::dim("self_attention", qx.shape(), kx.shape()));
    }
    Ok(attend(qx, kx, vx)?.0)
}

/// Attention of the rows of `qa` over the keys/values of another token set.
pub fn cross_attention(qa: &Matrix, kb: &Matrix, vb: &Matrix) -> Result<Matrix> {
    if qa.cols() != kb.cols() {
        return Err(Error::dim("cross_attention", qa.shape(), kb.shape()));
    }
    Ok(attend(qa, kb, vb)?.0)
}

/// Runs the three attentions of one step.
pub fn attention_outputs(p: &Projections) -> Result<AttentionOutputs> {
    Ok(AttentionOutputs {
        u_x: self_attention(&p.qx, &p.kx, &p.vx)?,
        u_xs: cross_attention(&p.qx, &p.ks, &p.vs)?,
        u_sx: cross_attention(&p.qs, &p.kx, &p.vx)?,
    })
}

struct Fused {
    h: Matrix,
    stacked: Matrix,
    ln: LayerNormCache,
    mask: DropoutMask,
}

fn fuse(u: &AttentionOutputs, params: &CellParams, p: f64, training: bool, rng: &mut Rng) -> Result<Fused> {
    let stacked = Matrix::vstack(&[&u.u_x, &u.u_xs, &u.u_sx])?;
    let mixed = params.w_o.value.matmul(&stacked)?;
    let (normed, ln) = layer_norm(&mixed, &params.ln_gain, &params.ln_bias)?;
    let (h, mask) = dropout(&normed, p, training, rng)?;
    Ok(Fused { h, stacked, ln, mask })
}

/// Fuses the attention outputs into the hidden state `h_p`, `(s, m)`.
pub fn fuse_hidden(
    u: &AttentionOutputs,
    params: &CellParams,
    config: &CellConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<Matrix> {
    Ok(fuse(u, params, config.dropout_p, training, rng)?.h)
}

struct Gates {
    z: Matrix,
    i: Matrix,
    f: Matrix,
}

fn gates(h: &Matrix, params: &CellParams) -> Result<Gates> {
    let pre = |w: &Param, b: &Param, shift: f64| -> Result<Matrix> {
        Ok(h.matmul_nt(&w.value)?.add_row(&b.value)?.map(|v| v + shift))
    };
    Ok(Gates {
        z: tanh_m(&pre(&params.w_z, &params.b_z, 0.0)?),
        i: sigmoid(&pre(&params.w_i, &params.b_i, INPUT_GATE_SHIFT)?),
        f: sigmoid(&pre(&params.w_f, &params.b_f, FORGET_GATE_SHIFT)?),
    })
}

fn apply_gates(state: &Matrix, g: &Gates) -> Result<Matrix> {
    state.hadamard(&g.f)?.add(&g.z.hadamard(&g.i)?)
}

/// LSTM-style update of every state vector at once.
pub fn recurrent_gate(h_p: &Matrix, state: &CellState, params: &CellParams) -> Result<CellState> {
    if h_p.shape() != state.vectors.shape() {
        return Err(Error::dim("recurrent_gate", h_p.shape(), state.vectors.shape()));
    }
    let g = gates(h_p, params)?;
    Ok(CellState::new(apply_gates(&state.vectors, &g)?))
}

/// Intermediates of one step retained for [`cell_step_backward`].
pub struct StepCache {
    x_hat: Matrix,
    state: Matrix,
    proj: Projections,
    a_x: Matrix,
    a_xs: Matrix,
    a_sx: Matrix,
    fused: Fused,
    gates: Gates,
}

fn check_window(x_hat: &Matrix, state: &CellState, config: &CellConfig) -> Result<()> {
    if x_hat.shape() != (config.c, config.m) {
        return Err(Error::dim("cell_step", x_hat.shape(), (config.c, config.m)));
    }
    if state.vectors.shape() != (config.s, config.m) {
        return Err(Error::dim("cell_step", state.vectors.shape(), (config.s, config.m)));
    }
    Ok(())
}

/// One full step: projections, three attentions, fusion, gate. Returns `c_{p+1}`.
pub fn cell_step(
    x_hat: &Matrix,
    state: &CellState,
    params: &CellParams,
    config: &CellConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<CellState> {
    Ok(cell_step_recorded(x_hat, state, params, config, training, rng)?.0)
}

/// [`cell_step`] that also returns the intermediates needed for the backward pass.
pub fn cell_step_recorded(
    x_hat: &Matrix,
    state: &CellState,
    params: &CellParams,
    config: &CellConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<(CellState, StepCache)> {
    check_window(x_hat, state, config)?;
    let proj = project_qkv(x_hat, state, params)?;
    let (u_x, a_x) = attend(&proj.qx, &proj.kx, &proj.vx)?;
    let (u_xs, a_xs) = attend(&proj.qx, &proj.ks, &proj.vs)?;
    let (u_sx, a_sx) = attend(&proj.qs, &proj.kx, &proj.vx)?;
    let u = AttentionOutputs { u_x, u_xs, u_sx };
    let fused = fuse(&u, params, config.dropout_p, training, rng)?;
    let g = gates(&fused.h, params)?;
    let next = apply_gates(&state.vectors, &g)?;
    let cache = StepCache {
        x_hat: x_hat.clone(),
        state: state.vectors.clone(),
        proj,
        a_x,
        a_xs,
        a_sx,
        fused,
        gates: g,
    };
    Ok((CellState::new(next), cache))
}

/// Accumulates parameter gradients for one step given `∂L/∂c_{p+1}` and
/// returns `∂L/∂c_p`.
pub fn cell_step_backward(cache: &StepCache, d_next: &Matrix, params: &mut CellParams) -> Result<Matrix> {
    let Gates { z, i, f } = &cache.gates;
    if d_next.shape() != cache.state.shape() {
        return Err(Error::dim("cell_step_backward", d_next.shape(), cache.state.shape()));
    }

    // c' = c ⊙ f + z ⊙ i
    let mut d_state = d_next.hadamard(f)?;
    let d_pre_f = d_next.hadamard(&cache.state)?.zip_map(f, |d, f| d * f * (1.0 - f))?;
    let d_pre_z = d_next.hadamard(i)?.zip_map(z, |d, z| d * (1.0 - z * z))?;
    let d_pre_i = d_next.hadamard(z)?.zip_map(i, |d, i| d * i * (1.0 - i))?;

    let h = &cache.fused.h;
    let mut d_h = Matrix::zeros(h.rows(), h.cols());
    for (d_pre, w, b) in [
        (&d_pre_z, &mut params.w_z, &mut params.b_z),
        (&d_pre_i, &mut params.w_i, &mut params.b_i),
        (&d_pre_f, &mut params.w_f, &mut params.b_f),
    ] {
        w.accumulate(&d_pre.matmul_tn(h)?);
        b.accumulate(&d_pre.col_sums());
        d_h.add_assign(&d_pre.matmul(&w.value)?)?;
    }

    let d_normed = dropout_backward(&cache.fused.mask, &d_h)?;
    let d_mixed = layer_norm_backward(&cache.fused.ln, &d_normed, &mut params.ln_gain, &mut params.ln_bias)?;
    params.w_o.accumulate(&d_mixed.matmul_nt(&cache.fused.stacked)?);
    let d_stacked = params.w_o.value.matmul_tn(&d_mixed)?;

    let c = cache.x_hat.rows();
    let s = cache.state.rows();
    let d_ux = d_stacked.row_block(0..c);
    let d_uxs = d_stacked.row_block(c..2 * c);
    let d_usx = d_stacked.row_block(2 * c..2 * c + s);

    let p = &cache.proj;
    let (mut dqx, mut dkx, mut dvx) = attend_backward(&p.qx, &p.kx, &p.vx, &cache.a_x, &d_ux)?;
    let (dqx2, dks, dvs) = attend_backward(&p.qx, &p.ks, &p.vs, &cache.a_xs, &d_uxs)?;
    let (dqs, dkx2, dvx2) = attend_backward(&p.qs, &p.kx, &p.vx, &cache.a_sx, &d_usx)?;
    dqx.add_assign(&dqx2)?;
    dkx.add_assign(&dkx2)?;
    dvx.add_assign(&dvx2)?;

    for (d, w) in [(&dqx, &mut params.wx_q), (&dkx, &mut params.wx_k), (&dvx, &mut params.wx_v)] {
        w.accumulate(&cache.x_hat.matmul_tn(d)?);
    }
    for (d, w) in [(&dqs, &mut params.ws_q), (&dks, &mut params.ws_k), (&dvs, &mut params.ws_v)] {
        w.accumulate(&cache.state.matmul_tn(d)?);
        d_state.add_assign(&d.matmul_nt(&w.value)?)?;
    }
    Ok(d_state)
}

impl StepCache {
    /// Attention weight matrices of the step: self, window→state, state→window.
    pub fn attention_weights(&self) -> [&Matrix; 3] {
        [&self.a_x, &self.a_xs, &self.a_sx]
    }

    /// Hidden state `h_p` after normalization and dropout.
    pub fn hidden(&self) -> &Matrix {
        &self.fused.h
    }
}
