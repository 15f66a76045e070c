//! Layers used by the note and time-series models.
//!
//! Each layer has a tape-level builder (used by the models, differentiable)
//! and a plain-tensor entry point for single examples.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndcore::tape::{Tape, Var};
use crate::ndcore::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dParams {
    /// `[K, C_in, C_out]`
    pub kernel: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

/// One direction of a GRU. Gate blocks along the last axis are (update, reset, candidate).
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    /// `[D, 3H]`
    pub w: Tensor,
    /// `[H, 3H]`
    pub u: Tensor,
    /// `[3H]`
    pub b: Tensor,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w: Tensor::zeros(&[input, 3 * hidden]),
            u: Tensor::zeros(&[hidden, 3 * hidden]),
            b: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGruParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// `[D, O]`
    pub w: Tensor,
    /// `[O]`
    pub b: Tensor,
}

/// Tape handles for one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

impl GruVars {
    pub fn register(tape: &mut Tape, p: &GruParams) -> Self {
        GruVars { w: tape.leaf(p.w.clone()), u: tape.leaf(p.u.clone()), b: tape.leaf(p.b.clone()) }
    }
}

/// Zeroes whole channels of `x[N, L, C]` (one draw per sample and channel) and
/// rescales survivors by `1/(1-p)`. Identity in eval mode.
pub fn spatial_dropout_tape<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    check_drop_prob(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("spatial dropout expects [N, L, C], got {shape:?}")));
    }
    let (n, l, c) = (shape[0], shape[1], shape[2]);
    let keep = 1.0 / (1.0 - p);
    let mut mask = vec![0.0; n * l * c];
    for s in 0..n {
        let channel: Vec<f64> = (0..c).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        for t in 0..l {
            mask[(s * l + t) * c..(s * l + t + 1) * c].copy_from_slice(&channel);
        }
    }
    tape.mask_mul(x, mask)
}

/// Elementwise inverted dropout.
pub fn dropout_tape<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    check_drop_prob(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..tape.value(x).len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    tape.mask_mul(x, mask)
}

fn check_drop_prob(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Batch norm on the tape; in train mode the running statistics of `params`
/// are updated from the batch.
pub fn batchnorm_tape(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    params: &mut BatchNormParams,
    mode: Mode,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let (out, stats) = tape.batch_norm(x, gamma, beta, params.eps, None)?;
            let stats = stats.expect("train-mode batch norm returns statistics");
            update_running(params, &stats.mean, &stats.var);
            Ok(out)
        }
        Mode::Eval => {
            let (out, _) = tape.batch_norm(
                x,
                gamma,
                beta,
                params.eps,
                Some((params.running_mean.data(), params.running_var.data())),
            )?;
            Ok(out)
        }
    }
}

pub(crate) fn update_running(params: &mut BatchNormParams, mean: &[f64], var: &[f64]) {
    let mom = params.momentum;
    for (r, m) in params.running_mean.data_mut().iter_mut().zip(mean) {
        *r = mom * *r + (1.0 - mom) * m;
    }
    for (r, v) in params.running_var.data_mut().iter_mut().zip(var) {
        *r = mom * *r + (1.0 - mom) * v;
    }
}

/// Output of [`bigru_tape`].
pub struct BiGruOut {
    /// `[B, T, 2H]`, present when requested.
    pub outputs: Option<Var>,
    /// `[B, 2H]`: forward state after the last step, backward state after the first.
    pub last: Var,
}

/// Bidirectional GRU over `seq[B, T, D]` with zero initial states.
/// `step_mask[B * T]` marks live steps; masked steps pass state through.
pub fn bigru_tape(
    tape: &mut Tape,
    seq: Var,
    step_mask: Option<&[bool]>,
    fwd: GruVars,
    bwd: GruVars,
    want_outputs: bool,
) -> Result<BiGruOut> {
    let shape = tape.value(seq).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("bigru expects [B, T, D], got {shape:?}")));
    }
    let (b, t) = (shape[0], shape[1]);
    if t == 0 {
        return Err(Error::EmptySequence("bigru over zero steps".into()));
    }
    if let Some(m) = step_mask {
        if m.len() != b * t {
            return Err(Error::Shape(format!("bigru mask of {} for {b}x{t}", m.len())));
        }
    }
    let hid = tape.value(fwd.u).shape()[0];
    let hid_b = tape.value(bwd.u).shape()[0];
    let step_mask_at = |ti: usize| step_mask.map(|m| (0..b).map(|s| m[s * t + ti]).collect::<Vec<_>>());

    let xs: Vec<Var> = (0..t).map(|ti| tape.time_slice(seq, ti)).collect::<Result<_>>()?;

    let mut h = tape.leaf(Tensor::zeros(&[b, hid]));
    let mut fwd_states = Vec::with_capacity(t);
    for (ti, x) in xs.iter().enumerate() {
        h = tape.gru_cell(*x, h, fwd.w, fwd.u, fwd.b, step_mask_at(ti))?;
        fwd_states.push(h);
    }
    let mut hb = tape.leaf(Tensor::zeros(&[b, hid_b]));
    let mut bwd_states = vec![hb; t];
    for ti in (0..t).rev() {
        hb = tape.gru_cell(xs[ti], hb, bwd.w, bwd.u, bwd.b, step_mask_at(ti))?;
        bwd_states[ti] = hb;
    }
    let last = tape.concat(&[fwd_states[t - 1], bwd_states[0]])?;
    let outputs = if want_outputs {
        let f = tape.stack_steps(&fwd_states)?;
        let bk = tape.stack_steps(&bwd_states)?;
        Some(tape.concat(&[f, bk])?)
    } else {
        None
    };
    Ok(BiGruOut { outputs, last })
}

/// `λ·Σ w²` over the given weight tensors.
pub fn l2_penalty_tape(tape: &mut Tape, weights: &[Var], lambda: f64) -> Result<Option<Var>> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("weight decay must be nonnegative, got {lambda}")));
    }
    if lambda == 0.0 || weights.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for w in weights {
        let sq = tape.sum_squares(*w);
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    Ok(total.map(|t| tape.scale(t, lambda)))
}

// ---- single-example entry points ----

/// Same-padded cross-correlation of `input[L, C_in]`.
pub fn conv1d_forward(input: &Tensor, params: &Conv1dParams) -> Result<Tensor> {
    let (l, c) = as_matrix(input, "conv1d input")?;
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().reshape(&[1, l, c])?);
    let w = tape.leaf(params.kernel.clone());
    let b = tape.leaf(params.bias.clone());
    let y = tape.conv1d(x, w, b)?;
    let cout = tape.value(y).last_dim();
    tape.value(y).clone().reshape(&[l, cout])
}

pub fn spatial_dropout<R: Rng + ?Sized>(input: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    let (l, c) = as_matrix(input, "spatial dropout input")?;
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().reshape(&[1, l, c])?);
    let y = spatial_dropout_tape(&mut tape, x, p, mode, rng)?;
    tape.value(y).clone().reshape(&[l, c])
}

/// Normalises `batch[N, L, C]` per channel.
pub fn batchnorm_forward(batch: &Tensor, params: &mut BatchNormParams, mode: Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.clone());
    let g = tape.leaf(params.gamma.clone());
    let b = tape.leaf(params.beta.clone());
    let y = batchnorm_tape(&mut tape, x, g, b, params, mode)?;
    Ok(tape.value(y).clone())
}

/// Per-channel mean of `input[L, C]` over unmasked rows.
pub fn global_avg_pool(input: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (l, c) = as_matrix(input, "pool input")?;
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().reshape(&[1, l, c])?);
    let y = tape.masked_mean_pool(x, mask.map(|m| m.to_vec()))?;
    tape.value(y).clone().reshape(&[c])
}

pub fn gru_step(x: &Tensor, h_prev: &Tensor, params: &GruParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().reshape(&[1, x.len()])?);
    let hv = tape.leaf(h_prev.clone().reshape(&[1, h_prev.len()])?);
    let g = GruVars::register(&mut tape, params);
    let y = tape.gru_cell(xv, hv, g.w, g.u, g.b, None)?;
    tape.value(y).clone().reshape(&[h_prev.len()])
}

/// Returns per-step outputs `[T, 2H]` and the final state `[2H]`.
pub fn bigru_forward(seq: &Tensor, mask: Option<&[bool]>, params: &BiGruParams) -> Result<(Tensor, Tensor)> {
    if seq.ndim() == 2 && seq.shape()[0] == 0 {
        return Err(Error::EmptySequence("bigru over zero steps".into()));
    }
    let (t, d) = as_matrix(seq, "bigru input")?;
    let mut tape = Tape::new();
    let x = tape.leaf(seq.clone().reshape(&[1, t, d])?);
    let f = GruVars::register(&mut tape, &params.fwd);
    let b = GruVars::register(&mut tape, &params.bwd);
    let out = bigru_tape(&mut tape, x, mask, f, b, true)?;
    let outputs = tape.value(out.outputs.expect("requested outputs")).clone();
    let width = outputs.last_dim();
    let last = tape.value(out.last).clone();
    Ok((outputs.reshape(&[t, width])?, last.reshape(&[width])?))
}

/// `σ(w·x + b)` for a single-output dense layer.
pub fn dense_sigmoid(x: &Tensor, params: &DenseParams) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().reshape(&[1, x.len()])?);
    let w = tape.leaf(params.w.clone());
    let b = tape.leaf(params.b.clone());
    let z = tape.linear(xv, w, b)?;
    let p = tape.sigmoid(z);
    Ok(tape.value(p).item())
}

/// Value of `λ·Σ w²`.
pub fn l2_penalty(weights: &[&Tensor], lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("weight decay must be nonnegative, got {lambda}")));
    }
    Ok(lambda * weights.iter().map(|w| w.sum_squares()).sum::<f64>())
}

fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Shape(format!("{what}: expected 2-D, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}
