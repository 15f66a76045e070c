//! Vocabulary construction, skip-gram word-vector pretraining with negative
//! sampling, and lookup of fixed-length notes into dense matrices.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::notesproc::{CleanNote, OOV_ID, PAD_ID};

pub const PAD_TOKEN: &str = "<pad>";
pub const DEFAULT_MIN_COUNT: u64 = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
    freqs: Vec<u64>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn freq(&self, id: u32) -> u64 {
        self.freqs.get(id as usize).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { index, tokens, freqs }
    }

    /// Tab-separated `id token freq`, header line first.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "id\ttoken\tfreq")?;
        for (i, (t, f)) in self.tokens.iter().zip(&self.freqs).enumerate() {
            writeln!(w, "{i}\t{t}\t{f}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let [id, tok, freq] = parts[..] else {
                return Err(Error::CorruptData(format!("vocabulary line {}: {line:?}", n + 1)));
            };
            let bad = |_| Error::CorruptData(format!("vocabulary line {}", n + 1));
            if id.parse::<usize>().map_err(bad)? != tokens.len() {
                return Err(Error::CorruptData(format!("vocabulary ids not contiguous at line {}", n + 1)));
            }
            tokens.push(tok.to_string());
            freqs.push(freq.parse::<u64>().map_err(bad)?);
        }
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(Error::CorruptData("vocabulary must start with the padding token".into()));
        }
        Ok(Self::from_parts(tokens, freqs))
    }
}

/// Keeps tokens occurring more than `min_count` times. Id 0 is padding; the
/// rest are ordered by descending frequency, then lexicographically.
pub fn build_vocab<'a, I>(corpus: I, min_count: u64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut total = 0usize;
    for doc in corpus {
        for t in doc {
            *counts.entry(t.as_str()).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptySequence("vocabulary corpus has no tokens".into()));
    }
    let mut kept: Vec<(&str, u64)> = counts.into_iter().filter(|(_, c)| *c > min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut tokens = vec![PAD_TOKEN.to_string()];
    let mut freqs = vec![0];
    for (t, c) in kept {
        tokens.push(t.to_string());
        freqs.push(c);
    }
    Ok(Vocabulary::from_parts(tokens, freqs))
}

/// `|V| × d` word vectors; row 0 (padding) is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub tokens: Vec<String>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Text format: `|V| d` header, then `token v_1 … v_d` per row.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.rows(), self.dim)?;
        for (i, t) in self.tokens.iter().enumerate() {
            write!(w, "{t}")?;
            for v in &self.data[i * self.dim..(i + 1) * self.dim] {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::CorruptData("empty embedding file".into()))??;
        let hdr: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::CorruptData(format!("embedding header {header:?}"))))
            .collect::<Result<_>>()?;
        let [rows, dim] = hdr[..] else {
            return Err(Error::CorruptData(format!("embedding header {header:?}")));
        };
        let mut tokens = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * dim);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let tok = parts.next().unwrap_or_default().to_string();
            let before = data.len();
            for p in parts {
                data.push(p.parse::<f64>().map_err(|_| Error::CorruptData(format!("embedding value {p:?}")))?);
            }
            if data.len() - before != dim {
                return Err(Error::CorruptData(format!(
                    "embedding row {tok:?} has {} values, expected {dim}",
                    data.len() - before
                )));
            }
            tokens.push(tok);
        }
        if tokens.len() != rows {
            return Err(Error::CorruptData(format!("embedding file declares {rows} rows, found {}", tokens.len())));
        }
        Ok(EmbeddingMatrix { tokens, dim, data })
    }
}

/// Looks up a fixed-length note; padding and out-of-vocabulary ids give zero rows.
pub fn embed_note(note: &CleanNote, emb: &EmbeddingMatrix) -> Result<Tensor> {
    let l = note.tokens.len();
    let mut out = vec![0.0; l * emb.dim];
    embed_ids_into(&note.tokens, emb, &mut out)?;
    Tensor::new(&[l, emb.dim], out)
}

pub(crate) fn embed_ids_into(ids: &[u32], emb: &EmbeddingMatrix, out: &mut [f64]) -> Result<()> {
    let d = emb.dim;
    for (pos, &id) in ids.iter().enumerate() {
        if id == PAD_ID || id == OOV_ID {
            continue;
        }
        if id as usize >= emb.rows() {
            return Err(Error::CorruptData(format!("token id {id} outside vocabulary of {}", emb.rows())));
        }
        out[pos * d..(pos + 1) * d].copy_from_slice(emb.row(id));
    }
    Ok(())
}

// ---- skip-gram ----

/// Hashed character n-grams added to each word's input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SubwordConfig {
    pub min_n: usize,
    pub max_n: usize,
    pub buckets: usize,
}

impl Default for SubwordConfig {
    fn default() -> Self {
        SubwordConfig { min_n: 3, max_n: 6, buckets: 200_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub lr: f64,
    pub seed: u64,
    /// Frequent-word subsampling threshold (word2vec `sample`); off when `None`.
    pub subsample: Option<f64>,
    pub subword: Option<SubwordConfig>,
    /// Worker threads. Anything above 1 trades bit-reproducibility for speed.
    pub threads: usize,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 200,
            window: 6,
            epochs: 100,
            negatives: 5,
            lr: 0.05,
            seed: 0,
            subsample: None,
            subword: None,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SkipGramResult {
    pub embeddings: EmbeddingMatrix,
    /// Mean negative-sampling loss per (center, context) pair, per epoch.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `−log σ(u_ctx·v) − Σ log σ(−u_neg·v)`.
pub fn pair_loss(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> f64 {
    let mut loss = -sigmoid(dot(center, context)).ln();
    for n in negatives {
        loss -= sigmoid(-dot(center, n)).ln();
    }
    loss
}

/// Gradients of [`pair_loss`] with respect to the center, context and each negative vector.
pub fn pair_gradients(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let d = center.len();
    let mut d_center = vec![0.0; d];
    let s = sigmoid(dot(center, context)) - 1.0;
    let d_context: Vec<f64> = center.iter().map(|v| s * v).collect();
    for i in 0..d {
        d_center[i] += s * context[i];
    }
    let mut d_negs = Vec::with_capacity(negatives.len());
    for n in negatives {
        let sn = sigmoid(dot(center, n));
        d_negs.push(center.iter().map(|v| sn * v).collect());
        for i in 0..d {
            d_center[i] += sn * n[i];
        }
    }
    (d_center, d_context, d_negs)
}

/// Shared parameter storage that tolerates concurrent unsynchronised updates.
struct SharedRows {
    dim: usize,
    cells: Vec<AtomicU64>,
}

impl SharedRows {
    fn new(rows: usize, dim: usize, init: impl FnMut() -> f64) -> Self {
        let mut init = init;
        SharedRows { dim, cells: (0..rows * dim).map(|_| AtomicU64::new(init().to_bits())).collect() }
    }

    fn load(&self, row: usize, buf: &mut [f64]) {
        let base = row * self.dim;
        for (j, b) in buf.iter_mut().enumerate() {
            *b = f64::from_bits(self.cells[base + j].load(Ordering::Relaxed));
        }
    }

    fn add(&self, row: usize, delta: &[f64], scale: f64) {
        let base = row * self.dim;
        for (j, d) in delta.iter().enumerate() {
            let c = &self.cells[base + j];
            let v = f64::from_bits(c.load(Ordering::Relaxed)) + scale * d;
            c.store(v.to_bits(), Ordering::Relaxed);
        }
    }

    fn into_vec(self) -> Vec<f64> {
        self.cells.into_iter().map(|c| f64::from_bits(c.into_inner())).collect()
    }
}

fn char_ngrams(word: &str, cfg: &SubwordConfig) -> Vec<usize> {
    let chars: Vec<char> = format!("<{word}>").chars().collect();
    let mut out = Vec::new();
    for n in cfg.min_n..=cfg.max_n {
        if n > chars.len() {
            break;
        }
        for start in 0..=chars.len() - n {
            let gram: String = chars[start..start + n].iter().collect();
            // FNV-1a
            let mut h: u32 = 2_166_136_261;
            for b in gram.bytes() {
                h ^= b as u32;
                h = h.wrapping_mul(16_777_619);
            }
            out.push(h as usize % cfg.buckets);
        }
    }
    out
}

struct Model<'a> {
    cfg: &'a SkipGramConfig,
    input: SharedRows,
    output: SharedRows,
    /// Input rows composing each word: its own row plus hashed n-gram rows.
    components: Vec<Vec<usize>>,
    neg_table: WeightedIndex<f64>,
    keep_prob: Vec<f64>,
}

impl Model<'_> {
    /// One pass over `docs`; returns (summed loss, pair count).
    fn run(
        &self,
        docs: &[Vec<u32>],
        rng: &mut ChaCha8Rng,
        lr_at: impl Fn(usize) -> f64,
        offset: usize,
    ) -> (f64, usize) {
        let d = self.cfg.dim;
        let mut v = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut grad_v = vec![0.0; d];
        let mut loss = 0.0;
        let mut pairs = 0usize;
        let mut seen = offset;
        for doc in docs {
            let sent: Vec<u32> =
                doc.iter().copied().filter(|&w| w != PAD_ID && rng.gen::<f64>() < self.keep_prob[w as usize]).collect();
            for (i, &center) in sent.iter().enumerate() {
                let lr = lr_at(seen);
                seen += 1;
                let radius = rng.gen_range(1..=self.cfg.window);
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(sent.len() - 1);
                // composed input vector
                v.iter_mut().for_each(|x| *x = 0.0);
                for &c in &self.components[center as usize] {
                    self.input.load(c, &mut tmp);
                    v.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
                }
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    grad_v.iter_mut().for_each(|x| *x = 0.0);
                    let ctx = sent[j] as usize;
                    let mut targets = Vec::with_capacity(1 + self.cfg.negatives);
                    targets.push((ctx, 1.0));
                    for _ in 0..self.cfg.negatives {
                        let n = self.neg_table.sample(rng);
                        if n != ctx {
                            targets.push((n, 0.0));
                        }
                    }
                    for (t, label) in targets {
                        self.output.load(t, &mut tmp);
                        let s = sigmoid(dot(&v, &tmp));
                        loss -= if label > 0.5 { s.max(1e-300).ln() } else { (1.0 - s).max(1e-300).ln() };
                        // descent step on -log-likelihood
                        let g = (label - s) * lr;
                        grad_v.iter_mut().zip(&tmp).for_each(|(a, b)| *a += g * b);
                        self.output.add(t, &v, g);
                    }
                    for &c in &self.components[center as usize] {
                        self.input.add(c, &grad_v, 1.0);
                    }
                    let parts = self.components[center as usize].len() as f64;
                    v.iter_mut().zip(&grad_v).for_each(|(a, b)| *a += parts * b);
                    pairs += 1;
                }
            }
        }
        (loss, pairs)
    }
}

/// Trains skip-gram vectors on in-vocabulary id sequences.
pub fn train_skipgram(corpus: &[Vec<u32>], vocab: &Vocabulary, cfg: &SkipGramConfig) -> Result<SkipGramResult> {
    if cfg.negatives == 0 || cfg.window == 0 || cfg.dim == 0 {
        return Err(Error::Config("skip-gram needs positive dim, window and negatives".into()));
    }
    let v = vocab.len();
    if v < 2 {
        return Err(Error::Config("vocabulary has no trainable tokens".into()));
    }
    for doc in corpus {
        if let Some(&bad) = doc.iter().find(|&&id| id as usize >= v) {
            return Err(Error::CorruptData(format!("corpus token id {bad} outside vocabulary")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bucket_rows = cfg.subword.as_ref().map_or(0, |s| s.buckets);
    let scale = 0.5 / cfg.dim as f64;
    let input = SharedRows::new(v + bucket_rows, cfg.dim, || rng.gen_range(-scale..scale));
    for j in 0..cfg.dim {
        input.cells[j].store(0f64.to_bits(), Ordering::Relaxed);
    }
    let output = SharedRows::new(v, cfg.dim, || 0.0);
    let components: Vec<Vec<usize>> = (0..v)
        .map(|id| {
            let mut c = vec![id];
            if let (Some(sw), true) = (&cfg.subword, id != PAD_ID as usize) {
                c.extend(char_ngrams(vocab.token(id as u32).unwrap_or_default(), sw).into_iter().map(|b| v + b));
            }
            c
        })
        .collect();
    let weights: Vec<f64> =
        (0..v).map(|i| if i == 0 { 0.0 } else { (vocab.freq(i as u32) as f64).powf(0.75) }).collect();
    let neg_table = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("negative table: {e}")))?;
    let total_words: u64 = (1..v).map(|i| vocab.freq(i as u32)).sum::<u64>().max(1);
    let keep_prob: Vec<f64> = (0..v)
        .map(|i| match cfg.subsample {
            Some(t) if i > 0 => {
                let f = vocab.freq(i as u32) as f64 / total_words as f64;
                ((t / f).sqrt() + t / f).min(1.0)
            }
            _ => 1.0,
        })
        .collect();
    let model = Model { cfg, input, output, components, neg_table, keep_prob };

    let corpus_words: usize = corpus.iter().map(Vec::len).sum();
    let total = (corpus_words * cfg.epochs).max(1);
    let lr0 = cfg.lr;
    let lr_at = move |seen: usize| lr0 * (1.0 - seen as f64 / total as f64).max(1e-4);
    let threads = cfg.threads.max(1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let offset = epoch * corpus_words;
        let (loss, pairs) = if threads == 1 {
            model.run(corpus, &mut rng, lr_at, offset)
        } else {
            let chunk = corpus.len().div_ceil(threads).max(1);
            let seeds: Vec<u64> = (0..threads).map(|_| rng.gen()).collect();
            let model = &model;
            std::thread::scope(|s| {
                let handles: Vec<_> = corpus
                    .chunks(chunk)
                    .zip(&seeds)
                    .enumerate()
                    .map(|(k, (part, seed))| {
                        let start = offset + corpus[..k * chunk].iter().map(Vec::len).sum::<usize>();
                        s.spawn(move || model.run(part, &mut ChaCha8Rng::seed_from_u64(*seed), lr_at, start))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("skip-gram worker"))
                    .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
            })
        };
        epoch_losses.push(if pairs > 0 { loss / pairs as f64 } else { 0.0 });
    }

    let Model { input, components, .. } = model;
    let raw = input.into_vec();
    let d = cfg.dim;
    let mut data = vec![0.0; v * d];
    for (id, comps) in components.iter().enumerate().skip(1) {
        for &c in comps {
            for j in 0..d {
                data[id * d + j] += raw[c * d + j];
            }
        }
    }
    debug_assert!(data[..d].iter().all(|x| *x == 0.0));
    Ok(SkipGramResult { embeddings: EmbeddingMatrix { tokens: vocab.tokens().to_vec(), dim: d, data }, epoch_losses })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}
