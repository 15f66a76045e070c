//! Stay-level cohort construction, mortality labels and patient-grouped folds.

mod synth;
mod tables;
mod timeseries;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use chrono::{NaiveDateTime, TimeDelta};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, SynthConfig, SyntheticData};
pub use tables::{read_admissions, read_icustays, read_timeseries, write_admissions, write_icustays, write_timeseries};
pub use timeseries::{
    impute_timeseries, ClinicalTimeSeries, RawSeries, TsObservation, NORMAL_VALUES, N_VARIABLES, VARIABLES,
    VARIABLE_SCALES,
};

/// Minimum age (exclusive) for inclusion, in years.
pub const MIN_AGE_YEARS: f64 = 18.0;
/// Deaths earlier than this after ICU admission exclude the stay.
pub const EARLY_DEATH_HOURS: i64 = 72;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub hadm_id: u64,
    pub subject_id: u64,
    pub admit_time: NaiveDateTime,
    pub discharge_time: NaiveDateTime,
    pub death_time: Option<NaiveDateTime>,
    pub age: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcuStay {
    pub icustay_id: u64,
    pub hadm_id: u64,
    pub intime: NaiveDateTime,
    pub outtime: NaiveDateTime,
    /// Care units visited during the ICU stay, in order.
    pub care_units: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub roles: BTreeMap<u64, Role>,
}

impl FoldSplit {
    pub fn members(&self, role: Role) -> Vec<u64> {
        self.roles.iter().filter(|(_, r)| **r == role).map(|(h, _)| *h).collect()
    }
}

/// True iff the patient died on or before hospital discharge.
pub fn label_mortality(adm: &Admission) -> bool {
    adm.death_time.is_some_and(|d| d <= adm.discharge_time)
}

/// Why a stay was excluded; `None` from [`exclusion_reason`] means eligible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exclusion {
    Minor,
    MultipleIcuStays,
    Transfer,
    EarlyDeath,
    NoIcuStay,
}

/// Applies the stay-level exclusion criteria (independent of the window).
pub fn exclusion_reason(adm: &Admission, stays: &[&IcuStay]) -> Option<Exclusion> {
    if adm.age <= MIN_AGE_YEARS {
        return Some(Exclusion::Minor);
    }
    let stay = match stays {
        [] => return Some(Exclusion::NoIcuStay),
        [s] => s,
        _ => return Some(Exclusion::MultipleIcuStays),
    };
    let units: HashSet<&str> = stay.care_units.iter().map(String::as_str).collect();
    if units.len() > 1 {
        return Some(Exclusion::Transfer);
    }
    if let Some(death) = adm.death_time {
        if death < stay.intime + TimeDelta::hours(EARLY_DEATH_HOURS) {
            return Some(Exclusion::EarlyDeath);
        }
    }
    None
}

/// ICU stays grouped by admission; errors on stays referencing unknown admissions.
pub fn stays_by_admission<'a>(
    admissions: &[Admission],
    icustays: &'a [IcuStay],
) -> Result<HashMap<u64, Vec<&'a IcuStay>>> {
    let known: HashSet<u64> = admissions.iter().map(|a| a.hadm_id).collect();
    let mut map: HashMap<u64, Vec<&IcuStay>> = HashMap::new();
    for s in icustays {
        if !known.contains(&s.hadm_id) {
            return Err(Error::Ingestion(format!(
                "icustay {} references unknown admission {}",
                s.icustay_id, s.hadm_id
            )));
        }
        map.entry(s.hadm_id).or_default().push(s);
    }
    Ok(map)
}

/// Stays passing every exclusion criterion that also have a patient file
/// (at least one note) for the experiment's window.
pub fn select_cohort(
    admissions: &[Admission],
    icustays: &[IcuStay],
    with_notes: &HashSet<u64>,
) -> Result<BTreeSet<u64>> {
    let by_adm = stays_by_admission(admissions, icustays)?;
    let mut out = BTreeSet::new();
    for adm in admissions {
        let stays = by_adm.get(&adm.hadm_id).map(Vec::as_slice).unwrap_or(&[]);
        if exclusion_reason(adm, stays).is_none() && with_notes.contains(&adm.hadm_id) {
            out.insert(adm.hadm_id);
        }
    }
    Ok(out)
}

/// Patient-grouped k-fold assignment. Subjects are shuffled with `seed` and
/// dealt round-robin into `k` buckets; fold `i` tests on bucket `i`, validates
/// on bucket `i+1` and trains on the rest.
pub fn grouped_kfold(stays: &[(u64, u64)], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 3 {
        return Err(Error::Config(format!("grouped k-fold needs k >= 3, got {k}")));
    }
    let subjects: BTreeSet<u64> = stays.iter().map(|(_, s)| *s).collect();
    if subjects.len() < k {
        return Err(Error::Config(format!("{} subjects cannot fill {k} folds", subjects.len())));
    }
    let mut order: Vec<u64> = subjects.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let bucket: HashMap<u64, usize> = order.iter().enumerate().map(|(i, s)| (*s, i % k)).collect();
    Ok((0..k)
        .map(|fold| {
            let roles = stays
                .iter()
                .map(|(h, s)| {
                    let b = bucket[s];
                    let role = if b == fold {
                        Role::Test
                    } else if b == (fold + 1) % k {
                        Role::Val
                    } else {
                        Role::Train
                    };
                    (*h, role)
                })
                .collect();
            FoldSplit { fold, roles }
        })
        .collect())
}

/// Count of subjects whose stays fall into more than one role of `split`.
pub fn leakage_violations(split: &FoldSplit, subject_of: &HashMap<u64, u64>) -> usize {
    let mut seen: HashMap<u64, Role> = HashMap::new();
    let mut bad = BTreeSet::new();
    for (h, r) in &split.roles {
        let s = subject_of[h];
        match seen.get(&s) {
            Some(prev) if prev != r => {
                bad.insert(s);
            }
            None => {
                seen.insert(s, *r);
            }
            _ => {}
        }
    }
    bad.len()
}

/// Balanced class weights `N / (2 N_c)` as `(negative, positive)`.
pub fn class_weights(labels: &[bool]) -> Result<(f64, f64)> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|l| **l).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::SingleClass(format!("{pos} positive, {neg} negative")));
    }
    Ok((n / (2.0 * neg), n / (2.0 * pos)))
}

/// One row of the cohort manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub hadm_id: u64,
    pub subject_id: u64,
    pub label: bool,
    pub icu_intime: NaiveDateTime,
    /// Role of the stay in each fold.
    pub roles: Vec<Role>,
}
