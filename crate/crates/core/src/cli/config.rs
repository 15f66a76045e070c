//! Flat `key = value` run configuration with typed validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cohort::SynthConfig;
use crate::embed::{SkipGramConfig, SubwordConfig};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelKind};
use crate::traineval::TrainConfig;

/// Observation windows the experiments are defined for, in hours.
pub const ALLOWED_WINDOWS: [u32; 3] = [12, 24, 48];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub work_dir: PathBuf,
    /// Directory holding the four input tables; the `synth` stage output when unset.
    pub input_dir: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    pub window: Option<u32>,
    pub model: Option<ModelKind>,
    pub synth: SynthConfig,
    pub note_length: usize,
    pub min_count: u64,
    pub skipgram: SkipGramConfig,
    pub windows: Vec<u32>,
    pub k: usize,
    pub model_cfg: ModelConfig,
    /// `(model or all, field, value)` training overrides in file order.
    train_overrides: Vec<(Option<ModelKind>, String, String)>,
    /// Every key as written, for hashing.
    entries: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            work_dir: PathBuf::from("work"),
            input_dir: None,
            seed: 0,
            jobs: 1,
            window: None,
            model: None,
            synth: SynthConfig::default(),
            note_length: crate::notesproc::DEFAULT_NOTE_LENGTH,
            min_count: 20,
            skipgram: SkipGramConfig::default(),
            windows: ALLOWED_WINDOWS.to_vec(),
            k: 5,
            model_cfg: ModelConfig::default(),
            train_overrides: Vec::new(),
            entries: BTreeMap::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

pub fn check_window(w: u32) -> Result<u32> {
    if ALLOWED_WINDOWS.contains(&w) {
        Ok(w)
    } else {
        Err(Error::Config(format!("window must be one of {ALLOWED_WINDOWS:?}, got {w}")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if cfg.entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", no + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        let sg = &mut self.skipgram;
        let m = &mut self.model_cfg;
        match key {
            "work_dir" => self.work_dir = PathBuf::from(v),
            "input_dir" => self.input_dir = Some(PathBuf::from(v)),
            "seed" => self.seed = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "window" => self.window = Some(check_window(parse(key, v)?)?),
            "model" => self.model = Some(ModelKind::parse(v)?),

            "synth.n_subjects" => s.n_subjects = parse(key, v)?,
            "synth.stays_per_subject" => s.stays_per_subject = parse_list(key, v)?,
            "synth.prevalence" => s.prevalence = parse(key, v)?,
            "synth.topic_words" => s.topic_words = parse(key, v)?,
            "synth.words_per_note_min" => s.words_per_note.0 = parse(key, v)?,
            "synth.words_per_note_max" => s.words_per_note.1 = parse(key, v)?,
            "synth.topic_share" => s.topic_share = parse(key, v)?,
            "synth.notes_per_hour" => s.notes_per_hour = parse(key, v)?,
            "synth.signal_strength" => s.signal_strength = parse(key, v)?,
            "synth.note_signal" => s.note_signal = parse(key, v)?,
            "synth.ts_signal" => s.ts_signal = parse(key, v)?,
            "synth.exclusion_rate" => s.exclusion_rate = parse(key, v)?,

            "preprocess.note_length" => self.note_length = parse(key, v)?,
            "preprocess.min_count" => self.min_count = parse(key, v)?,

            "embed.dim" => sg.dim = parse(key, v)?,
            "embed.window" => sg.window = parse(key, v)?,
            "embed.epochs" => sg.epochs = parse(key, v)?,
            "embed.negatives" => sg.negatives = parse(key, v)?,
            "embed.lr" => sg.lr = parse(key, v)?,
            "embed.threads" => sg.threads = parse(key, v)?,
            "embed.subsample" => sg.subsample = Some(parse(key, v)?),
            "embed.subword" => {
                sg.subword = if parse::<bool>(key, v)? { Some(SubwordConfig::default()) } else { None };
            }

            "cohort.windows" => self.windows = parse_list(key, v)?,
            "cohort.k" => self.k = parse(key, v)?,

            "model.conv_blocks" => m.conv_blocks = parse(key, v)?,
            "model.filters" => m.filters = parse(key, v)?,
            "model.kernel" => m.kernel = parse(key, v)?,
            "model.spatial_dropout" => m.spatial_dropout = parse(key, v)?,
            "model.conv_weight_decay" => m.conv_weight_decay = parse(key, v)?,
            "model.temporal_hidden" => m.temporal_hidden = parse(key, v)?,
            "model.cts_hiddens" => m.cts_hiddens = parse_list(key, v)?,
            "model.cts_weight_decay" => m.cts_weight_decay = parse(key, v)?,
            "model.fusion_dropout" => m.fusion_dropout = parse(key, v)?,
            "model.mask_padding" => m.mask_padding = parse(key, v)?,
            "model.train_embeddings" => m.train_embeddings = parse(key, v)?,

            _ => {
                if let Some(rest) = key.strip_prefix("train.") {
                    let (model, field) = match rest.split_once('.') {
                        Some((m, f)) => (Some(ModelKind::parse(m)?), f),
                        None => (None, rest),
                    };
                    // validate eagerly so errors name the offending key
                    let mut probe = TrainConfig::for_model(model.unwrap_or(ModelKind::NotesHcr));
                    apply_train(&mut probe, field, v).map_err(|e| match e {
                        Error::Config(msg) => Error::Config(format!("{key}: {msg}")),
                        other => other,
                    })?;
                    self.train_overrides.push((model, field.to_string(), v.to_string()));
                } else {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Checks cross-field consistency and ties the model's input extents to
    /// the preprocessing and embedding settings.
    pub fn validate(&mut self) -> Result<()> {
        if !(self.synth.prevalence > 0.0 && self.synth.prevalence < 1.0) {
            return Err(Error::Config(format!("synth.prevalence must lie in (0, 1), got {}", self.synth.prevalence)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.windows.is_empty() {
            return Err(Error::Config("cohort.windows must not be empty".into()));
        }
        for w in &self.windows {
            check_window(*w)?;
        }
        if self.k < 3 {
            return Err(Error::Config(format!("cohort.k must be at least 3, got {}", self.k)));
        }
        self.model_cfg.note_length = self.note_length;
        self.model_cfg.embedding_dim = self.skipgram.dim;
        self.skipgram.seed = self.seed;
        self.model_cfg.validate()?;
        for kind in ModelKind::ALL {
            self.train_config(kind)?;
        }
        Ok(())
    }

    /// Training settings for `kind`: per-model defaults, then overrides for all
    /// models, then overrides for `kind`.
    pub fn train_config(&self, kind: ModelKind) -> Result<TrainConfig> {
        let mut t = TrainConfig::for_model(kind);
        t.seed = self.seed;
        t.k = self.k;
        for pass in [false, true] {
            for (m, field, value) in &self.train_overrides {
                if m.is_some() == pass && m.is_none_or(|m| m == kind) {
                    apply_train(&mut t, field, value)?;
                }
            }
        }
        t.validate()?;
        Ok(t)
    }

    /// SHA-256 over the sorted keys with any of `prefixes` (all keys when empty),
    /// plus the seed.
    pub fn section_hash(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            if prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)) {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.update(format!("seed={}\n", self.seed));
        hex::encode(h.finalize())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.skipgram.seed = seed;
    }
}

fn apply_train(t: &mut TrainConfig, field: &str, v: &str) -> Result<()> {
    match field {
        "epochs" => t.epochs = parse(field, v)?,
        "batch_size" => t.batch_size = parse(field, v)?,
        "eval_batch_size" => t.eval_batch_size = parse(field, v)?,
        "lr" => t.lr = parse(field, v)?,
        "lr_drops" => t.lr_drops = parse_list(field, v)?,
        "lr_factor" => t.lr_factor = parse(field, v)?,
        "patience" => t.patience = parse(field, v)?,
        _ => return Err(Error::Config(format!("unknown training field {field:?}"))),
    }
    Ok(())
}
