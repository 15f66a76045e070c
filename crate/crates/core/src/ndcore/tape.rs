//! Reverse-mode automatic differentiation over coarse tensor operations.
//!
//! Every operation records the values its backward rule needs. Node ids are
//! handed out in forward order, so walking the node list backwards is a valid
//! topological order.

use crate::error::{Error, Result};
use crate::ndcore::tensor::{gemm_a_bt, gemm_acc, gemm_at_b, gemm_strided, Tensor};
use crate::notesproc::{OOV_ID, PAD_ID};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability clamp used by the weighted cross-entropy.
pub const BCE_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    Relu(Var),
    Sigmoid(Var),
    MaskMul { x: Var, mask: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    MaskedMeanPool { x: Var, mask: Option<Vec<bool>>, counts: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    GruCell(Box<GruCache>),
    Reshape(Var),
    Lookup { table: Var, ids: Vec<u32> },
    TimeSlice { x: Var, t: usize },
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    WeightedBce { p: Var, targets: Vec<f64>, weights: Vec<f64> },
}

struct GruCache {
    x: Var,
    h: Var,
    w: Var,
    u: Var,
    b: Var,
    mask: Option<Vec<bool>>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("mul {:?} * {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_squares());
        self.push(out, Op::SumSquares(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Elementwise product with a constant mask (dropout keep-masks, already scaled).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::Shape(format!("mask of {} for tensor {:?}", mask.len(), x.shape())));
        }
        let data = x.data().iter().zip(&mask).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::MaskMul { x: a, mask }))
    }

    /// Same-padded cross-correlation: `x[N, L, Cin]`, `w[K, Cin, Cout]`, `b[Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.ndim() != 3 || ws.ndim() != 3 {
            return Err(Error::Shape(format!("conv1d input {:?}, kernel {:?}", xs.shape(), ws.shape())));
        }
        let (n, l, cin) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let (k, wcin, cout) = (ws.shape()[0], ws.shape()[1], ws.shape()[2]);
        if wcin != cin {
            return Err(Error::Config(format!("conv1d kernel expects {wcin} input channels, got {cin}")));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        bs.check_shape(&[cout], "conv1d bias")?;
        if l == 0 {
            return Err(Error::EmptySequence("conv1d input has length 0".into()));
        }
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; n * l * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bs.data());
        }
        let (xd, wd) = (xs.data(), ws.data());
        for s in 0..n {
            for tap in 0..k {
                let Some((dst, src, rows)) = conv_rows(l, tap, pad) else { continue };
                gemm_acc(
                    rows,
                    cin,
                    cout,
                    &xd[(s * l + src) * cin..(s * l + src + rows) * cin],
                    &wd[tap * cin * cout..(tap + 1) * cin * cout],
                    &mut out[(s * l + dst) * cout..(s * l + dst + rows) * cout],
                );
            }
        }
        let out = Tensor::new(&[n, l, cout], out)?;
        Ok(self.push(out, Op::Conv1d { x, w, b }))
    }

    /// Batch normalisation over every axis but the last.
    ///
    /// With `running = None` the batch statistics are used (training mode) and
    /// returned; otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.value(x);
        let c = xs.last_dim();
        let m = xs.len() / c.max(1);
        self.value(gamma).check_shape(&[c], "batch norm gamma")?;
        self.value(beta).check_shape(&[c], "batch norm beta")?;
        let (mean, var, stats) = match running {
            Some((mu, var)) => {
                if mu.len() != c || var.len() != c {
                    return Err(Error::Shape("batch norm running statistics".into()));
                }
                (mu.to_vec(), var.to_vec(), None)
            }
            None => {
                if m < 2 {
                    return Err(Error::DegenerateBatch(m));
                }
                let mut mean = vec![0.0; c];
                for row in xs.data().chunks_exact(c) {
                    for (a, v) in mean.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                mean.iter_mut().for_each(|a| *a /= m as f64);
                let mut var = vec![0.0; c];
                for row in xs.data().chunks_exact(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|a| *a /= m as f64);
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.data().chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bt[j]);
            }
        }
        let out = Tensor::new(xs.shape(), out)?;
        let var_node = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: stats.is_some() });
        Ok((var_node, stats))
    }

    /// Mean over axis 1 of `x[N, L, C]`, restricted to positions where `mask[N, L]` is true.
    pub fn masked_mean_pool(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let xs = self.value(x);
        if xs.ndim() != 3 {
            return Err(Error::Shape(format!("pooling expects [N, L, C], got {:?}", xs.shape())));
        }
        let (n, l, c) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        if let Some(m) = &mask {
            if m.len() != n * l {
                return Err(Error::Shape(format!("pool mask of {} for {:?}", m.len(), xs.shape())));
            }
        }
        let mut out = vec![0.0; n * c];
        let mut counts = vec![0usize; n];
        for s in 0..n {
            for t in 0..l {
                if mask.as_ref().is_none_or(|m| m[s * l + t]) {
                    counts[s] += 1;
                    let row = &xs.data()[(s * l + t) * c..(s * l + t + 1) * c];
                    for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            if counts[s] == 0 {
                return Err(Error::EmptyNote);
            }
            let inv = 1.0 / counts[s] as f64;
            out[s * c..(s + 1) * c].iter_mut().for_each(|o| *o *= inv);
        }
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(out, Op::MaskedMeanPool { x, mask, counts }))
    }

    /// `x[.., D] · w[D, O] + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if ws.ndim() != 2 || ws.shape()[0] != xs.last_dim() {
            return Err(Error::Shape(format!("linear input {:?} with weights {:?}", xs.shape(), ws.shape())));
        }
        let (d, o) = (ws.shape()[0], ws.shape()[1]);
        bs.check_shape(&[o], "linear bias")?;
        let rows = xs.len() / d.max(1);
        let mut out = vec![0.0; rows * o];
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(bs.data());
        }
        gemm_acc(rows, d, o, xs.data(), ws.data(), &mut out);
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// One GRU step for a batch: `x[B, D]`, `h[B, H]`, `w[D, 3H]`, `u[H, 3H]`, `b[3H]`,
    /// gate blocks ordered (update, reset, candidate). Rows whose `mask` entry is
    /// false carry `h` through unchanged.
    pub fn gru_cell(&mut self, x: Var, h: Var, w: Var, u: Var, b: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (xs, hs, ws, us, bs) = (self.value(x), self.value(h), self.value(w), self.value(u), self.value(b));
        if xs.ndim() != 2 || hs.ndim() != 2 || xs.shape()[0] != hs.shape()[0] {
            return Err(Error::Shape(format!("gru input {:?} state {:?}", xs.shape(), hs.shape())));
        }
        let (bsz, d, hid) = (xs.shape()[0], xs.shape()[1], hs.shape()[1]);
        ws.check_shape(&[d, 3 * hid], "gru input weights")?;
        us.check_shape(&[hid, 3 * hid], "gru recurrent weights")?;
        bs.check_shape(&[3 * hid], "gru bias")?;
        if let Some(m) = &mask {
            if m.len() != bsz {
                return Err(Error::Shape("gru step mask".into()));
            }
        }
        let g3 = 3 * hid;
        let mut a = vec![0.0; bsz * g3];
        for row in a.chunks_exact_mut(g3) {
            row.copy_from_slice(bs.data());
        }
        gemm_acc(bsz, d, g3, xs.data(), ws.data(), &mut a);
        // h · [U_z U_r] into the first two gate blocks
        gemm_strided(
            bsz,
            hid,
            2 * hid,
            hs.data(),
            (hid as isize, 1),
            us.data(),
            (g3 as isize, 1),
            &mut a,
            (g3 as isize, 1),
        );
        let n_total = bsz * hid;
        let (mut z, mut r, mut rh) = (vec![0.0; n_total], vec![0.0; n_total], vec![0.0; n_total]);
        let hd = hs.data();
        for s in 0..bsz {
            for j in 0..hid {
                let i = s * hid + j;
                z[i] = sigmoid(a[s * g3 + j]);
                r[i] = sigmoid(a[s * g3 + hid + j]);
                rh[i] = r[i] * hd[i];
            }
        }
        // (r∘h) · U_h into the candidate block
        gemm_strided(
            bsz,
            hid,
            hid,
            &rh,
            (hid as isize, 1),
            &us.data()[2 * hid..],
            (g3 as isize, 1),
            &mut a[2 * hid..],
            (g3 as isize, 1),
        );
        let mut n = vec![0.0; n_total];
        let mut out = vec![0.0; n_total];
        for s in 0..bsz {
            let live = mask.as_ref().is_none_or(|m| m[s]);
            for j in 0..hid {
                let i = s * hid + j;
                n[i] = a[s * g3 + 2 * hid + j].tanh();
                out[i] = if live { (1.0 - z[i]) * hd[i] + z[i] * n[i] } else { hd[i] };
            }
        }
        let out = Tensor::new(&[bsz, hid], out)?;
        Ok(self.push(out, Op::GruCell(Box::new(GruCache { x, h, w, u, b, mask, z, r, n, rh }))))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Rows of `table[V, E]` for each id, giving `[ids.len(), E]`. Padding and
    /// out-of-vocabulary ids read as zero and pass no gradient to the table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let ts = self.value(table);
        if ts.ndim() != 2 {
            return Err(Error::Shape(format!("embedding table must be [V, E], got {:?}", ts.shape())));
        }
        let (v, e) = (ts.shape()[0], ts.shape()[1]);
        let mut out = vec![0.0; ids.len() * e];
        for (pos, &id) in ids.iter().enumerate() {
            if id == PAD_ID || id == OOV_ID {
                continue;
            }
            if id as usize >= v {
                return Err(Error::CorruptData(format!("token id {id} outside vocabulary of {v}")));
            }
            out[pos * e..(pos + 1) * e].copy_from_slice(&ts.data()[id as usize * e..(id as usize + 1) * e]);
        }
        let out = Tensor::new(&[ids.len(), e], out)?;
        Ok(self.push(out, Op::Lookup { table, ids: ids.to_vec() }))
    }

    /// `x[B, T, D] -> [B, D]` at step `t`.
    pub fn time_slice(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.ndim() != 3 || t >= xs.shape()[1] {
            return Err(Error::Shape(format!("time slice {t} of {:?}", xs.shape())));
        }
        let (b, tt, d) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let mut out = Vec::with_capacity(b * d);
        for s in 0..b {
            out.extend_from_slice(&xs.data()[(s * tt + t) * d..(s * tt + t + 1) * d]);
        }
        let out = Tensor::new(&[b, d], out)?;
        Ok(self.push(out, Op::TimeSlice { x, t }))
    }

    /// Stack `T` tensors of shape `[B, D]` into `[B, T, D]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps.first().ok_or_else(|| Error::EmptySequence("stack of zero steps".into()))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("stack expects [B, D] steps, got {shape:?}")));
        }
        let (b, d, t) = (shape[0], shape[1], steps.len());
        let mut out = vec![0.0; b * t * d];
        for (ti, v) in steps.iter().enumerate() {
            let vs = self.value(*v);
            vs.check_shape(&shape, "stacked step")?;
            for s in 0..b {
                out[(s * t + ti) * d..(s * t + ti + 1) * d].copy_from_slice(&vs.data()[s * d..(s + 1) * d]);
            }
        }
        let out = Tensor::new(&[b, t, d], out)?;
        Ok(self.push(out, Op::Stack(steps.to_vec())))
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let lead = self.value(*first).shape()[..self.value(*first).ndim().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let ps = self.value(*p);
            if ps.shape()[..ps.ndim().saturating_sub(1)] != lead[..] {
                return Err(Error::Shape(format!("concat {:?} with leading {:?}", ps.shape(), lead)));
            }
            widths.push(ps.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let pd = self.value(*p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Mean class-weighted binary cross-entropy of probabilities `p[B]`.
    pub fn weighted_bce(&mut self, p: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let ps = self.value(p);
        if ps.len() != targets.len() || ps.len() != weights.len() || ps.is_empty() {
            return Err(Error::Shape(format!(
                "bce over {} probabilities, {} targets, {} weights",
                ps.len(),
                targets.len(),
                weights.len()
            )));
        }
        let total: f64 = ps
            .data()
            .iter()
            .zip(targets.iter().zip(weights))
            .map(|(&pv, (&y, &w))| {
                let q = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -w * (y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        let out = Tensor::scalar(total / ps.len() as f64);
        Ok(self.push(out, Op::WeightedBce { p, targets: targets.to_vec(), weights: weights.to_vec() }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<f64>| {
            let shape = self.nodes[v.0].value.shape();
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&data) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape")),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(y).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, k) => acc(*a, gd.iter().map(|g| g * k).collect()),
            Op::Sum(a) => acc(*a, vec![gd[0]; self.value(*a).len()]),
            Op::SumSquares(a) => acc(*a, self.value(*a).data().iter().map(|w| 2.0 * w * gd[0]).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::MaskMul { x, mask } => acc(*x, gd.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Conv1d { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (n, l, cin) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let (k, cout) = (ws.shape()[0], ws.shape()[2]);
                let pad = (k - 1) / 2;
                let mut dx = vec![0.0; xs.len()];
                let mut dw = vec![0.0; ws.len()];
                let mut db = vec![0.0; cout];
                for row in gd.chunks_exact(cout) {
                    for (a, v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                for s in 0..n {
                    for tap in 0..k {
                        let Some((dst, src, rows)) = conv_rows(l, tap, pad) else { continue };
                        let gslice = &gd[(s * l + dst) * cout..(s * l + dst + rows) * cout];
                        gemm_a_bt(
                            rows,
                            cout,
                            cin,
                            gslice,
                            &ws.data()[tap * cin * cout..(tap + 1) * cin * cout],
                            &mut dx[(s * l + src) * cin..(s * l + src + rows) * cin],
                        );
                        gemm_at_b(
                            cin,
                            rows,
                            cout,
                            &xs.data()[(s * l + src) * cin..(s * l + src + rows) * cin],
                            gslice,
                            &mut dw[tap * cin * cout..(tap + 1) * cin * cout],
                        );
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                let mut dx = vec![0.0; xhat.len()];
                if *batch_stats {
                    // dxhat = g·γ; dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                    let mf = m as f64;
                    for (i, (grow, hrow)) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        for j in 0..c {
                            let dxh = grow[j] * gam[j];
                            let sum_dxh = dbeta[j] * gam[j];
                            let sum_dxh_xh = dgamma[j] * gam[j];
                            dx[i * c + j] = inv_std[j] / mf * (mf * dxh - sum_dxh - hrow[j] * sum_dxh_xh);
                        }
                    }
                } else {
                    for (i, grow) in gd.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            dx[i * c + j] = grow[j] * gam[j] * inv_std[j];
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::MaskedMeanPool { x, mask, counts } => {
                let xs = self.value(*x);
                let (n, l, c) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let mut dx = vec![0.0; xs.len()];
                for s in 0..n {
                    let inv = 1.0 / counts[s] as f64;
                    for t in 0..l {
                        if mask.as_ref().is_none_or(|m| m[s * l + t]) {
                            for j in 0..c {
                                dx[(s * l + t) * c + j] = gd[s * c + j] * inv;
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (d, o) = (ws.shape()[0], ws.shape()[1]);
                let rows = xs.len() / d.max(1);
                let mut dx = vec![0.0; xs.len()];
                let mut dw = vec![0.0; ws.len()];
                let mut db = vec![0.0; o];
                gemm_a_bt(rows, o, d, gd, ws.data(), &mut dx);
                gemm_at_b(d, rows, o, xs.data(), gd, &mut dw);
                for row in gd.chunks_exact(o) {
                    for (a, v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::GruCell(cache) => {
                let GruCache { x, h, w, u, b, mask, z, r, n, rh } = cache.as_ref();
                let (xs, hs, ws, us) = (self.value(*x), self.value(*h), self.value(*w), self.value(*u));
                let (bsz, d, hid) = (xs.shape()[0], xs.shape()[1], hs.shape()[1]);
                let g3 = 3 * hid;
                let hd = hs.data();
                let mut da = vec![0.0; bsz * g3];
                let mut dh = vec![0.0; bsz * hid];
                for s in 0..bsz {
                    let live = mask.as_ref().is_none_or(|m| m[s]);
                    for j in 0..hid {
                        let i = s * hid + j;
                        if !live {
                            dh[i] = gd[i];
                            continue;
                        }
                        dh[i] = gd[i] * (1.0 - z[i]);
                        let dz = gd[i] * (n[i] - hd[i]);
                        let dn = gd[i] * z[i];
                        da[s * g3 + j] = dz * z[i] * (1.0 - z[i]);
                        da[s * g3 + 2 * hid + j] = dn * (1.0 - n[i] * n[i]);
                    }
                }
                // d(r∘h) = dn_pre · U_hᵀ
                let mut drh = vec![0.0; bsz * hid];
                gemm_strided(
                    bsz,
                    hid,
                    hid,
                    &da[2 * hid..],
                    (g3 as isize, 1),
                    &us.data()[2 * hid..],
                    (1, g3 as isize),
                    &mut drh,
                    (hid as isize, 1),
                );
                for s in 0..bsz {
                    if !mask.as_ref().is_none_or(|m| m[s]) {
                        continue;
                    }
                    for j in 0..hid {
                        let i = s * hid + j;
                        dh[i] += drh[i] * r[i];
                        let dr = drh[i] * hd[i];
                        da[s * g3 + hid + j] = dr * r[i] * (1.0 - r[i]);
                    }
                }
                // dh += [dz_pre dr_pre] · [U_z U_r]ᵀ
                gemm_strided(
                    bsz,
                    2 * hid,
                    hid,
                    &da,
                    (g3 as isize, 1),
                    us.data(),
                    (1, g3 as isize),
                    &mut dh,
                    (hid as isize, 1),
                );
                let mut du = vec![0.0; us.len()];
                gemm_strided(
                    hid,
                    bsz,
                    2 * hid,
                    hd,
                    (1, hid as isize),
                    &da,
                    (g3 as isize, 1),
                    &mut du,
                    (g3 as isize, 1),
                );
                gemm_strided(
                    hid,
                    bsz,
                    hid,
                    rh,
                    (1, hid as isize),
                    &da[2 * hid..],
                    (g3 as isize, 1),
                    &mut du[2 * hid..],
                    (g3 as isize, 1),
                );
                let mut dw = vec![0.0; ws.len()];
                gemm_at_b(d, bsz, g3, xs.data(), &da, &mut dw);
                let mut dx = vec![0.0; xs.len()];
                gemm_a_bt(bsz, g3, d, &da, ws.data(), &mut dx);
                let mut db = vec![0.0; g3];
                for row in da.chunks_exact(g3) {
                    for (a, v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc(*x, dx);
                acc(*h, dh);
                acc(*w, dw);
                acc(*u, du);
                acc(*b, db);
            }
            Op::Reshape(x) => acc(*x, gd.to_vec()),
            Op::Lookup { table, ids } => {
                let ts = self.value(*table);
                let e = ts.shape()[1];
                let mut dt = vec![0.0; ts.len()];
                for (pos, &id) in ids.iter().enumerate() {
                    if id == PAD_ID || id == OOV_ID {
                        continue;
                    }
                    let row = &mut dt[id as usize * e..(id as usize + 1) * e];
                    for (a, g) in row.iter_mut().zip(&gd[pos * e..(pos + 1) * e]) {
                        *a += g;
                    }
                }
                acc(*table, dt);
            }
            Op::TimeSlice { x, t } => {
                let xs = self.value(*x);
                let (b, tt, d) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let mut dx = vec![0.0; xs.len()];
                for s in 0..b {
                    dx[(s * tt + t) * d..(s * tt + t + 1) * d].copy_from_slice(&gd[s * d..(s + 1) * d]);
                }
                acc(*x, dx);
            }
            Op::Stack(steps) => {
                let (b, t, d) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                for (ti, v) in steps.iter().enumerate() {
                    let mut dv = vec![0.0; b * d];
                    for s in 0..b {
                        dv[s * d..(s + 1) * d].copy_from_slice(&gd[(s * t + ti) * d..(s * t + ti + 1) * d]);
                    }
                    acc(*v, dv);
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.len() / total.max(1);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w].copy_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    acc(*p, dp);
                    offset += w;
                }
            }
            Op::WeightedBce { p, targets, weights } => {
                let ps = self.value(*p).data();
                let scale = gd[0] / ps.len() as f64;
                let dp = ps
                    .iter()
                    .zip(targets.iter().zip(weights))
                    .map(|(&pv, (&y, &w))| {
                        if pv <= BCE_EPS || pv >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            -w * scale * (y / pv - (1.0 - y) / (1.0 - pv))
                        }
                    })
                    .collect();
                acc(*p, dp);
            }
        }
    }
}

/// Output rows `[dst, dst+rows)` read input rows `[src, src+rows)` for kernel tap `tap`.
fn conv_rows(l: usize, tap: usize, pad: usize) -> Option<(usize, usize, usize)> {
    let shift = tap as isize - pad as isize;
    let dst = (-shift).max(0) as usize;
    let end = (l as isize - shift).min(l as isize);
    if end <= dst as isize {
        return None;
    }
    let rows = end as usize - dst;
    Some((dst, (dst as isize + shift) as usize, rows))
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when `v` is not on any path to the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}
