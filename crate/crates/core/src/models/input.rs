//! Per-stay model inputs and their assembly into batch tensors.

use crate::cohort::ClinicalTimeSeries;
use crate::embed::{embed_ids_into, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelKind};
use crate::ndcore::Tensor;
use crate::notesproc::PatientFile;

/// Token ids of a patient file, notes in chart order, each padded to `note_length`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoteSeq {
    pub note_length: usize,
    pub n_notes: usize,
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

impl NoteSeq {
    pub fn from_file(file: &PatientFile) -> Result<Self> {
        let first = file
            .notes
            .first()
            .ok_or_else(|| Error::EmptySequence(format!("patient file {} has no notes", file.hadm_id)))?;
        let note_length = first.tokens.len();
        let mut tokens = Vec::with_capacity(note_length * file.notes.len());
        let mut mask = Vec::with_capacity(note_length * file.notes.len());
        for n in &file.notes {
            if n.tokens.len() != note_length || n.mask.len() != note_length {
                return Err(Error::Shape(format!("patient file {} mixes note lengths", file.hadm_id)));
            }
            if !n.mask.iter().any(|m| *m) {
                return Err(Error::EmptyNote);
            }
            tokens.extend_from_slice(&n.tokens);
            mask.extend_from_slice(&n.mask);
        }
        Ok(NoteSeq { note_length, n_notes: file.notes.len(), tokens, mask })
    }
}

/// Everything a model needs about one stay.
#[derive(Clone, Debug, PartialEq)]
pub struct StayInput {
    pub hadm_id: u64,
    pub label: bool,
    pub notes: Option<NoteSeq>,
    /// `[hours, series_features]`
    pub series: Option<Tensor>,
}

impl StayInput {
    pub fn new(hadm_id: u64, label: bool, file: Option<&PatientFile>, ts: Option<&ClinicalTimeSeries>) -> Result<Self> {
        let notes = file.map(NoteSeq::from_file).transpose()?;
        let series =
            ts.map(|t| Tensor::new(&[t.hours, 2 * crate::cohort::N_VARIABLES], t.model_input())).transpose()?;
        Ok(StayInput { hadm_id, label, notes, series })
    }

    pub fn n_notes(&self) -> usize {
        self.notes.as_ref().map_or(0, |n| n.n_notes)
    }
}

/// Note tokens of a batch, either looked up in fixed embeddings or left as
/// ids for a trainable table.
#[derive(Clone, Debug)]
pub enum NoteInput {
    /// `[files * notes_per_file, L, E]`
    Embedded(Tensor),
    /// `files * notes_per_file * L` token ids.
    Ids(Vec<u32>),
}

/// Dense inputs for one batch of stays.
#[derive(Clone, Debug)]
pub struct BatchTensors {
    pub files: usize,
    pub notes_per_file: usize,
    /// Note tokens and their `[files * notes_per_file * L]` mask.
    pub notes: Option<(NoteInput, Vec<bool>)>,
    /// `[files, hours, series_features]`
    pub series: Option<Tensor>,
}

/// Builds batch tensors for `kind`. Stays in one batch must share the note
/// count. Fixed embeddings are required unless the model trains its own table.
pub fn batch_tensors(
    kind: ModelKind,
    cfg: &ModelConfig,
    stays: &[&StayInput],
    emb: Option<&EmbeddingMatrix>,
) -> Result<BatchTensors> {
    if stays.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let b = stays.len();
    let mut out = BatchTensors { files: b, notes_per_file: 0, notes: None, series: None };
    if kind.uses_notes() {
        let emb = if cfg.train_embeddings {
            None
        } else {
            let emb = emb.ok_or_else(|| Error::MissingModality("note model needs an embedding matrix".into()))?;
            if emb.dim != cfg.embedding_dim {
                return Err(Error::Config(format!(
                    "embeddings have dimension {}, model expects {}",
                    emb.dim, cfg.embedding_dim
                )));
            }
            Some(emb)
        };
        let seqs: Vec<&NoteSeq> = stays
            .iter()
            .map(|s| s.notes.as_ref().ok_or_else(|| Error::MissingModality(format!("stay {} has no notes", s.hadm_id))))
            .collect::<Result<_>>()?;
        let t = seqs[0].n_notes;
        let (l, e) = (cfg.note_length, cfg.embedding_dim);
        let mut data = if emb.is_some() { vec![0.0; b * t * l * e] } else { Vec::new() };
        let mut ids = Vec::new();
        let mut mask = Vec::with_capacity(b * t * l);
        for (i, s) in seqs.iter().enumerate() {
            if s.n_notes != t {
                return Err(Error::Shape(format!("batch mixes {} and {} notes per file", t, s.n_notes)));
            }
            if s.note_length != l {
                return Err(Error::Shape(format!("notes of length {}, model expects {l}", s.note_length)));
            }
            match emb {
                Some(emb) => embed_ids_into(&s.tokens, emb, &mut data[i * t * l * e..(i + 1) * t * l * e])?,
                None => ids.extend_from_slice(&s.tokens),
            }
            mask.extend_from_slice(&s.mask);
        }
        out.notes_per_file = t;
        let input = match emb {
            Some(_) => NoteInput::Embedded(Tensor::new(&[b * t, l, e], data)?),
            None => NoteInput::Ids(ids),
        };
        out.notes = Some((input, mask));
    }
    if kind.uses_series() {
        let first = stays[0]
            .series
            .as_ref()
            .ok_or_else(|| Error::MissingModality(format!("stay {} has no time series", stays[0].hadm_id)))?;
        let (h, f) = (first.shape()[0], first.shape()[1]);
        if f != cfg.series_features {
            return Err(Error::Shape(format!("series has {f} features, model expects {}", cfg.series_features)));
        }
        let mut data = Vec::with_capacity(b * h * f);
        for s in stays {
            let ts = s
                .series
                .as_ref()
                .ok_or_else(|| Error::MissingModality(format!("stay {} has no time series", s.hadm_id)))?;
            ts.check_shape(&[h, f], "batched time series")?;
            data.extend_from_slice(ts.data());
        }
        out.series = Some(Tensor::new(&[b, h, f], data)?);
    }
    Ok(out)
}
