//! The note model (convolutional note encoder plus recurrent note sequence),
//! the recurrent time-series baseline and the fusion of both.

mod graph;
mod input;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::N_VARIABLES;
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::ndcore::checkpoint::Checkpoint;
use crate::ndcore::tape::BatchStats;
use crate::ndcore::Tensor;

pub use graph::{
    cts_rnn_forward, forward_batch, mm_hcr_forward, notes_hcr_forward, predict, semantical_forward, temporal_forward,
    ForwardOut, ParamVars,
};
pub use input::{batch_tensors, BatchTensors, NoteInput, NoteSeq, StayInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "cts-rnn")]
    CtsRnn,
    #[serde(rename = "notes-hcr")]
    NotesHcr,
    #[serde(rename = "mm-hcr")]
    MmHcr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::CtsRnn, ModelKind::NotesHcr, ModelKind::MmHcr];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::CtsRnn => "cts-rnn",
            ModelKind::NotesHcr => "notes-hcr",
            ModelKind::MmHcr => "mm-hcr",
        }
    }

    /// Display name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::CtsRnn => "CTS-RNN",
            ModelKind::NotesHcr => "Notes-HCR",
            ModelKind::MmHcr => "MM-HCR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase() || k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}; expected cts-rnn, notes-hcr or mm-hcr")))
    }

    pub fn uses_notes(self) -> bool {
        self != ModelKind::CtsRnn
    }

    pub fn uses_series(self) -> bool {
        self != ModelKind::NotesHcr
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_blocks: usize,
    pub filters: usize,
    pub kernel: usize,
    pub spatial_dropout: f64,
    pub conv_weight_decay: f64,
    pub temporal_hidden: usize,
    pub cts_hiddens: Vec<usize>,
    pub cts_weight_decay: f64,
    pub fusion_dropout: f64,
    pub note_length: usize,
    pub embedding_dim: usize,
    /// Per-step time-series input width: values followed by mask channels.
    pub series_features: usize,
    /// Restrict pooling to real tokens. When off, padded positions count too.
    #[serde(default = "enabled")]
    pub mask_padding: bool,
    /// Fine-tune the word vectors as a parameter table initialized from the
    /// pretrained embeddings. Off by default: embeddings are fixed inputs.
    #[serde(default)]
    pub train_embeddings: bool,
    /// Rows of the trainable embedding table; only used with `train_embeddings`.
    #[serde(default)]
    pub vocab_size: usize,
}

fn enabled() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_blocks: 3,
            filters: 200,
            kernel: 3,
            spatial_dropout: 0.5,
            conv_weight_decay: 1e-5,
            temporal_hidden: 64,
            cts_hiddens: vec![32, 16],
            cts_weight_decay: 1e-3,
            fusion_dropout: 0.3,
            note_length: 500,
            embedding_dim: 200,
            series_features: 2 * N_VARIABLES,
            mask_padding: true,
            train_embeddings: false,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("conv_blocks", self.conv_blocks),
            ("filters", self.filters),
            ("kernel", self.kernel),
            ("temporal_hidden", self.temporal_hidden),
            ("note_length", self.note_length),
            ("embedding_dim", self.embedding_dim),
            ("series_features", self.series_features),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel must be odd for same padding, got {}", self.kernel)));
        }
        if self.train_embeddings && self.vocab_size < 2 {
            return Err(Error::Config("train_embeddings needs a vocab_size of at least 2".into()));
        }
        if self.cts_hiddens.is_empty() || self.cts_hiddens.contains(&0) {
            return Err(Error::Config("cts_hiddens must be a nonempty list of positive sizes".into()));
        }
        for (name, p) in [("spatial_dropout", self.spatial_dropout), ("fusion_dropout", self.fusion_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        for (name, l) in [("conv_weight_decay", self.conv_weight_decay), ("cts_weight_decay", self.cts_weight_decay)] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {l}")));
            }
        }
        Ok(())
    }

    /// Width of the patient vector produced by the note branch.
    pub fn patient_dim(&self) -> usize {
        2 * self.temporal_hidden
    }

    /// Width of the time-series feature vector.
    pub fn series_dim(&self) -> usize {
        2 * self.cts_hiddens.last().copied().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Glorot uniform with the given fan-in and fan-out.
    Glorot(usize, usize),
    Zeros,
    Ones,
}

/// Parameter names, shapes and initializers of a configured graph.
fn layout(kind: ModelKind, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let gru = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize, h: usize| {
        for dir in ["fwd", "bwd"] {
            out.push((format!("{prefix}.{dir}.w"), vec![d, 3 * h], Init::Glorot(d, 3 * h)));
            out.push((format!("{prefix}.{dir}.u"), vec![h, 3 * h], Init::Glorot(h, 3 * h)));
            out.push((format!("{prefix}.{dir}.b"), vec![3 * h], Init::Zeros));
        }
    };
    if kind.uses_notes() {
        if cfg.train_embeddings {
            out.push((EMBEDDING_TABLE.into(), vec![cfg.vocab_size, cfg.embedding_dim], Init::Zeros));
        }
        let (k, f) = (cfg.kernel, cfg.filters);
        let mut cin = cfg.embedding_dim;
        for i in 0..cfg.conv_blocks {
            let p = format!("sem.block{i}");
            out.push((format!("{p}.conv.kernel"), vec![k, cin, f], Init::Glorot(k * cin, k * f)));
            out.push((format!("{p}.conv.bias"), vec![f], Init::Zeros));
            out.push((format!("{p}.bn.gamma"), vec![f], Init::Ones));
            out.push((format!("{p}.bn.beta"), vec![f], Init::Zeros));
            out.push((format!("{p}.bn.running_mean"), vec![f], Init::Zeros));
            out.push((format!("{p}.bn.running_var"), vec![f], Init::Ones));
            if cin != f {
                out.push((format!("{p}.proj.kernel"), vec![1, cin, f], Init::Glorot(cin, f)));
                out.push((format!("{p}.proj.bias"), vec![f], Init::Zeros));
            }
            cin = f;
        }
        gru(&mut out, "temporal", cfg.filters, cfg.temporal_hidden);
    }
    if kind.uses_series() {
        let mut d = cfg.series_features;
        for (j, &h) in cfg.cts_hiddens.iter().enumerate() {
            gru(&mut out, &format!("cts.layer{j}"), d, h);
            d = 2 * h;
        }
    }
    let head_in = match kind {
        ModelKind::CtsRnn => cfg.series_dim(),
        ModelKind::NotesHcr => cfg.patient_dim(),
        ModelKind::MmHcr => cfg.patient_dim() + cfg.series_dim(),
    };
    out.push(("head.w".into(), vec![head_in, 1], Init::Glorot(head_in, 1)));
    out.push(("head.b".into(), vec![1], Init::Zeros));
    out
}

/// Parameter name of the trainable embedding table.
pub const EMBEDDING_TABLE: &str = "embedding.table";

/// Batch-norm running statistics are state, not trainable weights.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// Every parameter tensor of one configured model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ModelSpec {
    kind: ModelKind,
    config: ModelConfig,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit batch-norm scales.
    pub fn init(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(kind, config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Glorot(fan_in, fan_out) => {
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-a..a)).collect()
                    }
                };
                Ok((name, Tensor::new(&shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { kind, config: config.clone(), tensors })
    }

    /// Wraps an existing tensor map, checking it matches the configured layout exactly.
    pub fn from_tensors(kind: ModelKind, config: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = layout(kind, config);
        let names: BTreeSet<&str> = expected.iter().map(|(n, _, _)| n.as_str()).collect();
        if let Some(extra) = tensors.keys().find(|k| !names.contains(k.as_str())) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra} for {kind}")));
        }
        for (name, shape, _) in &expected {
            let t =
                tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name} for {kind}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {name} is {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(ModelParams { kind, config: config.clone(), tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Shape(format!("no parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Shape(format!("no parameter {name}")))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys().filter(|n| is_trainable(n))
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().filter(|(n, _)| is_trainable(n)).map(|(_, t)| t.len()).sum()
    }

    /// Weight tensors under L2 penalty and their coefficients.
    pub fn decay_groups(&self) -> Vec<(String, f64)> {
        self.tensors
            .keys()
            .filter_map(|n| {
                if n.starts_with("sem.") && n.ends_with(".kernel") {
                    Some((n.clone(), self.config.conv_weight_decay))
                } else if n.starts_with("cts.") && (n.ends_with(".w") || n.ends_with(".u")) {
                    Some((n.clone(), self.config.cts_weight_decay))
                } else {
                    None
                }
            })
            .filter(|(_, l)| *l > 0.0)
            .collect()
    }

    /// Copies pretrained vectors into the trainable embedding table.
    pub fn load_embeddings(&mut self, emb: &EmbeddingMatrix) -> Result<()> {
        let table = self.get_mut(EMBEDDING_TABLE)?;
        if table.shape() != [emb.rows(), emb.dim] {
            return Err(Error::Config(format!(
                "embedding table is {:?}, pretrained matrix is [{}, {}]",
                table.shape(),
                emb.rows(),
                emb.dim
            )));
        }
        table.data_mut().copy_from_slice(&emb.data);
        Ok(())
    }

    /// Folds batch-norm statistics from a training pass into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, stats) in updates {
            let mom = crate::ndcore::layers::BN_MOMENTUM;
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let t = self.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = mom * *r + (1.0 - mom) * b;
                }
            }
        }
        Ok(())
    }

    fn spec_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelSpec { kind: self.kind, config: self.config.clone() })?)
    }

    /// SHA-256 of the model kind and configuration.
    pub fn config_hash(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.spec_json()?.as_bytes()).into())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config_hash: self.config_hash()?,
            entries: self.tensors.iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
        })
    }

    /// Path of the JSON sidecar holding kind and configuration for `path`.
    pub fn spec_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the checkpoint at `path` and its configuration sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)?;
        std::fs::write(Self::spec_path(path), self.spec_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec_path = Self::spec_path(path);
        for p in [path, spec_path.as_path()] {
            if !p.exists() {
                return Err(Error::MissingArtifact { path: p.to_path_buf(), remedy: "run `hcr train` first".into() });
            }
        }
        let spec: ModelSpec = serde_json::from_str(&std::fs::read_to_string(&spec_path)?)?;
        let ckpt = Checkpoint::load(path)?;
        let params = ModelParams::from_tensors(spec.kind, &spec.config, ckpt.entries.into_iter().collect())?;
        if params.config_hash()? != ckpt.config_hash {
            return Err(Error::Checkpoint(format!("{} does not match its configuration", path.display())));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_closed_and_validated() {
        let cfg =
            ModelConfig { filters: 8, embedding_dim: 6, note_length: 10, temporal_hidden: 4, ..Default::default() };
        for kind in ModelKind::ALL {
            let p = ModelParams::init(kind, &cfg, 1).unwrap();
            let back = ModelParams::from_tensors(kind, &cfg, p.tensors().clone()).unwrap();
            assert_eq!(back, p);
            let mut extra = p.tensors().clone();
            extra.insert("stray".into(), Tensor::zeros(&[1]));
            assert!(ModelParams::from_tensors(kind, &cfg, extra).is_err());
            let mut missing = p.tensors().clone();
            missing.remove("head.b");
            assert!(ModelParams::from_tensors(kind, &cfg, missing).is_err());
        }
        let p = ModelParams::init(ModelKind::NotesHcr, &cfg, 1).unwrap();
        assert!(p.get("sem.block0.proj.kernel").is_ok());
        assert!(p.get("sem.block1.proj.kernel").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig { kernel: 2, ..Default::default() },
            ModelConfig { filters: 0, ..Default::default() },
            ModelConfig { spatial_dropout: 1.0, ..Default::default() },
            ModelConfig { cts_hiddens: vec![], ..Default::default() },
            ModelConfig { cts_weight_decay: -1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn kind_names_parse() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::parse(k.name()).unwrap(), k);
            assert_eq!(ModelKind::parse(k.label()).unwrap(), k);
        }
        assert!(ModelKind::parse("bert").is_err());
    }

    #[test]
    fn decay_groups_cover_conv_kernels_and_series_grus() {
        let p = ModelParams::init(ModelKind::MmHcr, &ModelConfig::default(), 0).unwrap();
        let groups = p.decay_groups();
        assert_eq!(groups.iter().filter(|(_, l)| *l == 1e-5).count(), 3);
        assert_eq!(groups.iter().filter(|(_, l)| *l == 1e-3).count(), 8);
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = ModelConfig {
            filters: 4,
            embedding_dim: 4,
            note_length: 6,
            temporal_hidden: 3,
            cts_hiddens: vec![3, 2],
            ..Default::default()
        };
        let p = ModelParams::init(ModelKind::MmHcr, &cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
        assert!(matches!(ModelParams::load(&dir.path().join("absent.ckpt")), Err(Error::MissingArtifact { .. })));
    }
}
