//! Differentiable forward graphs on the tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::input::{batch_tensors, BatchTensors, NoteInput, StayInput};
use super::{is_trainable, ModelKind, ModelParams, EMBEDDING_TABLE};
use crate::cohort::ClinicalTimeSeries;
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::ndcore::layers::{bigru_tape, dropout_tape, spatial_dropout_tape, GruVars, BN_EPS};
use crate::ndcore::tape::{BatchStats, Gradients};
use crate::ndcore::{Mode, Tape, Tensor, Var};
use crate::notesproc::PatientFile;

/// Tape leaves for every trainable parameter.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars = params
            .tensors()
            .iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Shape(format!("no parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradient for every parameter, zero where the loss does not depend on it.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(n, v)| (n.clone(), grads.wrt(tape, *v))).collect()
    }

    fn gru(&self, prefix: &str) -> Result<GruVars> {
        Ok(GruVars {
            w: self.get(&format!("{prefix}.w"))?,
            u: self.get(&format!("{prefix}.u"))?,
            b: self.get(&format!("{prefix}.b"))?,
        })
    }
}

/// Batch probabilities `[B]` and the batch-norm statistics gathered in training.
pub struct ForwardOut {
    pub probs: Var,
    pub bn_updates: Vec<(String, BatchStats)>,
}

struct Ctx<'a, R: Rng + ?Sized> {
    tape: &'a mut Tape,
    vars: &'a ParamVars,
    params: &'a ModelParams,
    mode: Mode,
    rng: &'a mut R,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<R: Rng + ?Sized> Ctx<'_, R> {
    /// `x[N, L, E]` to document vectors `[N, F]`.
    fn semantical(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let cfg = &self.params.config;
        let mut h = x;
        for i in 0..cfg.conv_blocks {
            let p = format!("sem.block{i}");
            let k = self.vars.get(&format!("{p}.conv.kernel"))?;
            let b = self.vars.get(&format!("{p}.conv.bias"))?;
            let c = self.tape.conv1d(h, k, b)?;
            let c = spatial_dropout_tape(self.tape, c, cfg.spatial_dropout, self.mode, self.rng)?;
            let gamma = self.vars.get(&format!("{p}.bn.gamma"))?;
            let beta = self.vars.get(&format!("{p}.bn.beta"))?;
            let n = match self.mode {
                Mode::Train => {
                    let (out, stats) = self.tape.batch_norm(c, gamma, beta, BN_EPS, None)?;
                    self.bn_updates.push((format!("{p}.bn"), stats.expect("train-mode statistics")));
                    out
                }
                Mode::Eval => {
                    let rm = self.params.get(&format!("{p}.bn.running_mean"))?;
                    let rv = self.params.get(&format!("{p}.bn.running_var"))?;
                    self.tape.batch_norm(c, gamma, beta, BN_EPS, Some((rm.data(), rv.data())))?.0
                }
            };
            let shortcut = match self.vars.get(&format!("{p}.proj.kernel")) {
                Ok(pk) => {
                    let pb = self.vars.get(&format!("{p}.proj.bias"))?;
                    self.tape.conv1d(h, pk, pb)?
                }
                Err(_) => h,
            };
            let s = self.tape.add(n, shortcut)?;
            h = self.tape.relu(s);
        }
        let mask = cfg.mask_padding.then(|| mask.to_vec());
        self.tape.masked_mean_pool(h, mask)
    }

    /// Document vectors `[B * T, F]` to patient vectors `[B, 2H]`.
    fn temporal(&mut self, docs: Var, files: usize, notes: usize) -> Result<Var> {
        let f = self.tape.value(docs).last_dim();
        let seq = self.tape.reshape(docs, &[files, notes, f])?;
        let fwd = self.vars.gru("temporal.fwd")?;
        let bwd = self.vars.gru("temporal.bwd")?;
        Ok(bigru_tape(self.tape, seq, None, fwd, bwd, false)?.last)
    }

    /// Series `[B, hours, F]` to features `[B, 2 * last hidden]`.
    fn series(&mut self, x: Var) -> Result<Var> {
        let layers = self.params.config.cts_hiddens.len();
        let mut seq = x;
        let mut last = None;
        for j in 0..layers {
            let fwd = self.vars.gru(&format!("cts.layer{j}.fwd"))?;
            let bwd = self.vars.gru(&format!("cts.layer{j}.bwd"))?;
            let out = bigru_tape(self.tape, seq, None, fwd, bwd, j + 1 < layers)?;
            if let Some(o) = out.outputs {
                seq = o;
            }
            last = Some(out.last);
        }
        last.ok_or_else(|| Error::Config("no series layers".into()))
    }

    fn head(&mut self, features: Var, dropout: f64) -> Result<Var> {
        let x = dropout_tape(self.tape, features, dropout, self.mode, self.rng)?;
        let w = self.vars.get("head.w")?;
        let b = self.vars.get("head.b")?;
        let z = self.tape.linear(x, w, b)?;
        let p = self.tape.sigmoid(z);
        let n = self.tape.value(p).len();
        self.tape.reshape(p, &[n])
    }

    fn patient_vectors(&mut self, batch: &BatchTensors) -> Result<Var> {
        let (x, mask) = batch.notes.as_ref().ok_or_else(|| Error::MissingModality("batch has no notes".into()))?;
        let x = match x {
            NoteInput::Embedded(t) => self.tape.leaf(t.clone()),
            NoteInput::Ids(ids) => {
                let cfg = &self.params.config;
                let rows = self.tape.embedding_lookup(self.vars.get(EMBEDDING_TABLE)?, ids)?;
                self.tape.reshape(rows, &[ids.len() / cfg.note_length, cfg.note_length, cfg.embedding_dim])?
            }
        };
        let docs = self.semantical(x, mask)?;
        self.temporal(docs, batch.files, batch.notes_per_file)
    }

    fn series_features(&mut self, batch: &BatchTensors) -> Result<Var> {
        let s = batch.series.as_ref().ok_or_else(|| Error::MissingModality("batch has no time series".into()))?;
        let x = self.tape.leaf(s.clone());
        self.series(x)
    }
}

/// Forward pass of `params.kind` over one batch.
pub fn forward_batch<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ModelParams,
    batch: &BatchTensors,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOut> {
    let mut cx = Ctx { tape, vars, params, mode, rng, bn_updates: Vec::new() };
    let fusion = params.config.fusion_dropout;
    let probs = match params.kind {
        ModelKind::NotesHcr => {
            let pv = cx.patient_vectors(batch)?;
            cx.head(pv, 0.0)?
        }
        ModelKind::CtsRnn => {
            let sf = cx.series_features(batch)?;
            cx.head(sf, fusion)?
        }
        ModelKind::MmHcr => {
            let pv = cx.patient_vectors(batch)?;
            let sf = cx.series_features(batch)?;
            let fused = cx.tape.concat(&[pv, sf])?;
            cx.head(fused, fusion)?
        }
    };
    Ok(ForwardOut { probs, bn_updates: cx.bn_updates })
}

fn require(params: &ModelParams, notes: bool, series: bool) -> Result<()> {
    if (notes && !params.kind.uses_notes()) || (series && !params.kind.uses_series()) {
        return Err(Error::Config(format!("operation not available for {} parameters", params.kind)));
    }
    Ok(())
}

/// Encodes one note `[L, E]` into a document vector `[F]`. Batch statistics
/// computed in training mode are not folded into the running averages.
pub fn semantical_forward<R: Rng + ?Sized>(
    note: &Tensor,
    mask: &[bool],
    params: &ModelParams,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    require(params, true, false)?;
    let cfg = &params.config;
    note.check_shape(&[cfg.note_length, cfg.embedding_dim], "note")?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let mut cx = Ctx { tape: &mut tape, vars: &vars, params, mode, rng, bn_updates: Vec::new() };
    let x = cx.tape.leaf(note.clone().reshape(&[1, cfg.note_length, cfg.embedding_dim])?);
    let doc = cx.semantical(x, mask)?;
    tape.value(doc).clone().reshape(&[cfg.filters])
}

/// Runs the note-sequence GRU over document vectors `[T, F]`, giving `[2H]`.
pub fn temporal_forward(docs: &Tensor, params: &ModelParams) -> Result<Tensor> {
    require(params, true, false)?;
    let f = params.config.filters;
    if docs.ndim() != 2 || docs.shape()[1] != f {
        return Err(Error::Shape(format!("document vectors {:?}, expected [T, {f}]", docs.shape())));
    }
    let t = docs.shape()[0];
    if t == 0 {
        return Err(Error::EmptySequence("patient file without notes".into()));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cx = Ctx { tape: &mut tape, vars: &vars, params, mode: Mode::Eval, rng: &mut rng, bn_updates: Vec::new() };
    let d = cx.tape.leaf(docs.clone());
    let pv = cx.temporal(d, 1, t)?;
    tape.value(pv).clone().reshape(&[params.config.patient_dim()])
}

fn single_stay(file: Option<&PatientFile>, ts: Option<&ClinicalTimeSeries>) -> Result<StayInput> {
    let hadm = file.map(|f| f.hadm_id).or(ts.map(|t| t.hadm_id)).unwrap_or(0);
    StayInput::new(hadm, false, file, ts)
}

fn run_single<R: Rng + ?Sized>(
    params: &ModelParams,
    stay: &StayInput,
    emb: Option<&EmbeddingMatrix>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tape, ForwardOut)> {
    let batch = batch_tensors(params.kind, &params.config, &[stay], emb)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let out = forward_batch(&mut tape, &vars, params, &batch, mode, rng)?;
    Ok((tape, out))
}

/// Mortality probability for one patient file under note-only parameters.
pub fn notes_hcr_forward<R: Rng + ?Sized>(
    file: &PatientFile,
    emb: &EmbeddingMatrix,
    params: &ModelParams,
    mode: Mode,
    rng: &mut R,
) -> Result<f64> {
    if params.kind != ModelKind::NotesHcr {
        return Err(Error::Config(format!("expected notes-hcr parameters, got {}", params.kind)));
    }
    let stay = single_stay(Some(file), None)?;
    let (tape, out) = run_single(params, &stay, Some(emb), mode, rng)?;
    Ok(tape.value(out.probs).data()[0])
}

/// Series features `[2 * last hidden]` and the standalone-head probability.
pub fn cts_rnn_forward<R: Rng + ?Sized>(
    ts: &ClinicalTimeSeries,
    params: &ModelParams,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, f64)> {
    if params.kind != ModelKind::CtsRnn {
        return Err(Error::Config(format!("expected cts-rnn parameters, got {}", params.kind)));
    }
    if ts.hours == 0 {
        return Err(Error::EmptySequence(format!("stay {} has an empty time series", ts.hadm_id)));
    }
    let stay = single_stay(None, Some(ts))?;
    let batch = batch_tensors(params.kind, &params.config, &[&stay], None)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let mut cx = Ctx { tape: &mut tape, vars: &vars, params, mode, rng, bn_updates: Vec::new() };
    let sf = cx.series_features(&batch)?;
    let p = cx.head(sf, params.config.fusion_dropout)?;
    let feats = tape.value(sf).clone().reshape(&[params.config.series_dim()])?;
    Ok((feats, tape.value(p).data()[0]))
}

/// Mortality probability from both modalities.
pub fn mm_hcr_forward<R: Rng + ?Sized>(
    file: &PatientFile,
    ts: &ClinicalTimeSeries,
    emb: &EmbeddingMatrix,
    params: &ModelParams,
    mode: Mode,
    rng: &mut R,
) -> Result<f64> {
    if params.kind != ModelKind::MmHcr {
        return Err(Error::Config(format!("expected mm-hcr parameters, got {}", params.kind)));
    }
    let stay = single_stay(Some(file), Some(ts))?;
    let (tape, out) = run_single(params, &stay, Some(emb), mode, rng)?;
    Ok(tape.value(out.probs).data()[0])
}

/// Eval-mode probabilities for `stays`, in input order. Stays are grouped by
/// note count and batches run in parallel.
pub fn predict(
    params: &ModelParams,
    stays: &[&StayInput],
    emb: Option<&EmbeddingMatrix>,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in stays.iter().enumerate() {
        let key = if params.kind.uses_notes() { s.n_notes() } else { 0 };
        groups.entry(key).or_default().push(i);
    }
    let batches: Vec<Vec<usize>> = groups
        .into_values()
        .flat_map(|idx| idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    let results: Vec<Vec<(usize, f64)>> = batches
        .par_iter()
        .map(|idx| {
            let refs: Vec<&StayInput> = idx.iter().map(|i| stays[*i]).collect();
            let batch = batch_tensors(params.kind, &params.config, &refs, emb)?;
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = forward_batch(&mut tape, &vars, params, &batch, Mode::Eval, &mut rng)?;
            Ok(idx.iter().copied().zip(tape.value(out.probs).data().iter().copied()).collect())
        })
        .collect::<Result<_>>()?;
    let mut probs = vec![0.0; stays.len()];
    for (i, p) in results.into_iter().flatten() {
        probs[i] = p;
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    fn toy() -> ModelConfig {
        ModelConfig {
            conv_blocks: 2,
            filters: 4,
            kernel: 3,
            temporal_hidden: 3,
            cts_hiddens: vec![3, 2],
            note_length: 6,
            embedding_dim: 4,
            series_features: 4,
            ..ModelConfig::default()
        }
    }

    fn note(seed: u64, cfg: &ModelConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.note_length * cfg.embedding_dim;
        Tensor::new(&[cfg.note_length, cfg.embedding_dim], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn semantical_shape_and_eval_determinism() {
        let cfg = toy();
        let p = ModelParams::init(ModelKind::NotesHcr, &cfg, 3).unwrap();
        let mask = vec![true, true, true, true, false, false];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = semantical_forward(&note(1, &cfg), &mask, &p, Mode::Eval, &mut rng).unwrap();
        let b = semantical_forward(&note(1, &cfg), &mask, &p, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a.shape(), &[4]);
        assert_eq!(a, b);
        assert!(matches!(
            semantical_forward(&note(1, &cfg), &[false; 6], &p, Mode::Eval, &mut rng),
            Err(Error::EmptyNote)
        ));
    }

    #[test]
    fn temporal_is_order_sensitive() {
        let cfg = toy();
        let p = ModelParams::init(ModelKind::NotesHcr, &cfg, 5).unwrap();
        let docs = Tensor::new(&[3, 4], (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect()).unwrap();
        let mut swapped = docs.data().to_vec();
        swapped.rotate_left(4);
        let swapped = Tensor::new(&[3, 4], swapped).unwrap();
        let a = temporal_forward(&docs, &p).unwrap();
        let b = temporal_forward(&swapped, &p).unwrap();
        assert_eq!(a.shape(), &[6]);
        assert!(a.max_abs_diff(&b) > 1e-9);
        assert!(temporal_forward(&Tensor::zeros(&[0, 4]), &p).is_err());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let cfg = toy();
        let p = ModelParams::init(ModelKind::CtsRnn, &cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(semantical_forward(&note(1, &cfg), &[true; 6], &p, Mode::Eval, &mut rng).is_err());
    }
}
