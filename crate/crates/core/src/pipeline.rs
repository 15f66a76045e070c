//! In-memory composition of the stages: cohort assembly for a window and
//! model inputs for each stay.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::cohort::{
    exclusion_reason, grouped_kfold, impute_timeseries, label_mortality, leakage_violations, select_cohort,
    stays_by_admission, Admission, CohortRecord, FoldSplit, IcuStay, RawSeries, Role, SyntheticData,
};
use crate::embed::{train_skipgram, EmbeddingMatrix, SkipGramConfig};
use crate::error::{Error, Result};
use crate::models::{ModelKind, StayInput};
use crate::notesproc::{assemble_patient_file, notes_by_stay, preprocess, CleanNote, PatientFile, PreprocessStats};

/// The cohort of one window with its patient files and folds.
#[derive(Clone, Debug)]
pub struct CohortBuild {
    pub window: u32,
    pub records: Vec<CohortRecord>,
    pub files: BTreeMap<u64, PatientFile>,
    pub folds: Vec<FoldSplit>,
}

/// Applies the exclusion criteria, assembles patient files for `window`, and
/// splits subjects into `k` folds. Every split is checked for leakage.
pub fn build_cohort(
    admissions: &[Admission],
    icustays: &[IcuStay],
    notes: &[CleanNote],
    window: u32,
    k: usize,
    seed: u64,
) -> Result<CohortBuild> {
    let by_adm = stays_by_admission(admissions, icustays)?;
    let notes = notes_by_stay(notes.to_vec());
    let mut files = BTreeMap::new();
    for adm in admissions {
        let stays = by_adm.get(&adm.hadm_id).map(Vec::as_slice).unwrap_or(&[]);
        if exclusion_reason(adm, stays).is_some() {
            continue;
        }
        let Some(stay_notes) = notes.get(&adm.hadm_id) else { continue };
        if let Some(f) = assemble_patient_file(
            stay_notes,
            adm.subject_id,
            adm.hadm_id,
            stays[0].intime,
            window,
            label_mortality(adm),
        ) {
            files.insert(adm.hadm_id, f);
        }
    }
    let with_notes: HashSet<u64> = files.keys().copied().collect();
    let cohort = select_cohort(admissions, icustays, &with_notes)?;
    files.retain(|h, _| cohort.contains(h));

    let adm_of: HashMap<u64, &Admission> = admissions.iter().map(|a| (a.hadm_id, a)).collect();
    for h in &cohort {
        let stays = by_adm.get(h).map(Vec::as_slice).unwrap_or(&[]);
        if exclusion_reason(adm_of[h], stays).is_some() || !files.contains_key(h) {
            return Err(Error::CorruptData(format!("stay {h} entered the cohort without meeting the criteria")));
        }
    }
    let pairs: Vec<(u64, u64)> = cohort.iter().map(|h| (*h, adm_of[h].subject_id)).collect();
    let folds = grouped_kfold(&pairs, k, seed)?;
    let subject_of: HashMap<u64, u64> = pairs.iter().copied().collect();
    for f in &folds {
        let bad = leakage_violations(f, &subject_of);
        if bad > 0 {
            return Err(Error::CorruptData(format!("fold {} places {bad} subjects in several roles", f.fold)));
        }
    }
    let records = pairs
        .iter()
        .map(|(h, s)| CohortRecord {
            hadm_id: *h,
            subject_id: *s,
            label: label_mortality(adm_of[h]),
            icu_intime: by_adm[h][0].intime,
            roles: folds.iter().map(|f| f.roles[h]).collect(),
        })
        .collect();
    Ok(CohortBuild { window, records, files, folds })
}

/// Rebuilds fold splits from the per-stay roles of cohort records.
pub fn folds_from_records(records: &[CohortRecord]) -> Result<Vec<FoldSplit>> {
    let k = records.first().map_or(0, |r| r.roles.len());
    if records.iter().any(|r| r.roles.len() != k) {
        return Err(Error::CorruptData("cohort records disagree on the number of folds".into()));
    }
    Ok((0..k)
        .map(|fold| FoldSplit {
            fold,
            roles: records.iter().map(|r| (r.hadm_id, r.roles[fold])).collect::<BTreeMap<u64, Role>>(),
        })
        .collect())
}

/// Model inputs for every cohort stay, carrying only the modalities `kind` uses.
pub fn stay_inputs(
    kind: ModelKind,
    records: &[CohortRecord],
    files: &BTreeMap<u64, PatientFile>,
    series: &BTreeMap<u64, RawSeries>,
    window: u32,
) -> Result<Vec<StayInput>> {
    records
        .iter()
        .map(|r| {
            let file = if kind.uses_notes() {
                Some(
                    files
                        .get(&r.hadm_id)
                        .ok_or_else(|| Error::MissingModality(format!("stay {} has no patient file", r.hadm_id)))?,
                )
            } else {
                None
            };
            let ts = if kind.uses_series() {
                let raw = series
                    .get(&r.hadm_id)
                    .ok_or_else(|| Error::MissingModality(format!("stay {} has no time series", r.hadm_id)))?;
                Some(impute_timeseries(raw, window as usize)?)
            } else {
                None
            };
            StayInput::new(r.hadm_id, r.label, file, ts.as_ref())
        })
        .collect()
}

/// Settings for [`prepare`].
#[derive(Clone, Debug)]
pub struct PrepareOptions {
    pub note_length: usize,
    pub min_count: u64,
    pub skipgram: SkipGramConfig,
    pub k: usize,
    pub split_seed: u64,
}

/// Everything needed to train on one data set, for any window.
pub struct Prepared {
    pub stats: PreprocessStats,
    pub clean_notes: Vec<CleanNote>,
    pub embeddings: EmbeddingMatrix,
    pub series: BTreeMap<u64, RawSeries>,
}

/// Preprocesses the notes and pretrains the embeddings of a synthetic data set.
pub fn prepare(data: &SyntheticData, opts: &PrepareOptions) -> Result<Prepared> {
    let pre = preprocess(&data.notes, opts.note_length, opts.min_count)?;
    let embeddings = train_skipgram(&pre.embedding_corpus, &pre.vocab, &opts.skipgram)?.embeddings;
    let series = data.timeseries.iter().map(|s| (s.hadm_id, s.clone())).collect();
    Ok(Prepared { stats: pre.stats, clean_notes: pre.clean_notes, embeddings, series })
}

impl Prepared {
    pub fn cohort(&self, data: &SyntheticData, window: u32, opts: &PrepareOptions) -> Result<CohortBuild> {
        build_cohort(&data.admissions, &data.icustays, &self.clean_notes, window, opts.k, opts.split_seed)
    }

    pub fn inputs(&self, kind: ModelKind, cohort: &CohortBuild) -> Result<Vec<StayInput>> {
        stay_inputs(kind, &cohort.records, &cohort.files, &self.series, cohort.window)
    }
}
