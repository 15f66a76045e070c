//! Synthetic admissions, ICU stays, notes and time series with planted signal.
//!
//! Each stay draws its label first. Two latent severities, one for the notes
//! and one for the physiology, are shifted for positive stays by the
//! configured signal strengths. Note severity sets the share of severe versus
//! stable topic words and grows over the stay; physiological severity drives
//! trends in a few vital-sign channels.

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::timeseries::{RawSeries, TsObservation, NORMAL_VALUES, N_VARIABLES, VARIABLE_SCALES};
use super::{Admission, IcuStay};
use crate::error::{Error, Result};
use crate::notesproc::RawNote;

const SEVERE_WORDS: [&str; 16] = [
    "hypotension",
    "intubated",
    "pressors",
    "lactate",
    "septic",
    "unresponsive",
    "coagulopathy",
    "oliguric",
    "vasopressin",
    "arrest",
    "dnr",
    "comfort",
    "deteriorating",
    "acidosis",
    "hemorrhage",
    "failing",
];

const STABLE_WORDS: [&str; 16] = [
    "ambulating",
    "stable",
    "tolerating",
    "extubated",
    "alert",
    "oriented",
    "improving",
    "afebrile",
    "weaning",
    "comfortable",
    "eating",
    "independent",
    "normotensive",
    "euvolemic",
    "recovering",
    "ready",
];

const BACKGROUND_WORDS: [&str; 60] = [
    "patient",
    "pt",
    "the",
    "and",
    "with",
    "was",
    "for",
    "on",
    "in",
    "to",
    "of",
    "no",
    "given",
    "noted",
    "per",
    "plan",
    "continue",
    "monitor",
    "assessment",
    "neuro",
    "cv",
    "resp",
    "gi",
    "gu",
    "skin",
    "lungs",
    "clear",
    "bilaterally",
    "abdomen",
    "soft",
    "bowel",
    "sounds",
    "present",
    "urine",
    "output",
    "foley",
    "iv",
    "fluids",
    "heparin",
    "insulin",
    "sliding",
    "scale",
    "family",
    "update",
    "team",
    "rounds",
    "chest",
    "xray",
    "ekg",
    "sinus",
    "rhythm",
    "pain",
    "control",
    "morphine",
    "labs",
    "pending",
    "cultures",
    "sent",
    "np",
    "md",
];

const UNITS: [&str; 5] = ["MICU", "SICU", "CCU", "CSRU", "TSICU"];
const CATEGORIES: [&str; 6] = ["Nursing", "Nursing/other", "Physician", "Radiology", "ECG", "Respiratory"];

/// Vital-sign channels carrying the physiological signal, with trend direction.
const SIGNAL_CHANNELS: [(usize, f64); 4] = [(8, 1.0), (12, 1.0), (10, -1.0), (11, -1.0)];

/// Per-hour probability that each variable is charted.
const OBSERVATION_RATES: [f64; N_VARIABLES] =
    [0.05, 0.8, 0.1, 0.25, 0.25, 0.25, 0.25, 0.15, 0.9, 0.02, 0.8, 0.85, 0.85, 0.8, 0.25, 0.02, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// Relative weights of a subject having 1, 2, 3, ... hospital stays.
    pub stays_per_subject: Vec<f64>,
    pub prevalence: f64,
    /// Number of severe and of stable topic words in use (at most 16 each).
    pub topic_words: usize,
    pub words_per_note: (usize, usize),
    /// Share of note words drawn from the topic lists.
    pub topic_share: f64,
    /// Mean notes charted per hour around the ICU stay.
    pub notes_per_hour: f64,
    /// Global multiplier on both planted signals; 0 makes labels unlearnable.
    pub signal_strength: f64,
    pub note_signal: f64,
    pub ts_signal: f64,
    /// Observation windows the data must cover, in hours.
    pub windows: Vec<u32>,
    /// Probability of each exclusion pattern (minor, repeated ICU stay,
    /// transfer, early death) per stay.
    pub exclusion_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 1000,
            stays_per_subject: vec![0.75, 0.18, 0.07],
            prevalence: 0.065,
            topic_words: 16,
            words_per_note: (25, 60),
            topic_share: 0.3,
            notes_per_hour: 0.2,
            signal_strength: 1.0,
            note_signal: 2.5,
            ts_signal: 0.9,
            windows: vec![12, 24, 48],
            exclusion_rate: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub admissions: Vec<Admission>,
    pub icustays: Vec<IcuStay>,
    pub notes: Vec<RawNote>,
    pub timeseries: Vec<RawSeries>,
}

#[derive(Clone, Copy, PartialEq)]
enum Pattern {
    Eligible,
    Minor,
    RepeatStay,
    Transfer,
    EarlyDeath,
}

struct Gen<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    std: Normal<f64>,
    horizon: f64,
    next_row: u64,
    out: SyntheticData,
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    if !(cfg.prevalence > 0.0 && cfg.prevalence < 1.0) {
        return Err(Error::Config(format!("prevalence must be in (0, 1), got {}", cfg.prevalence)));
    }
    if cfg.stays_per_subject.is_empty() {
        return Err(Error::Config("stays_per_subject must not be empty".into()));
    }
    if cfg.topic_words == 0 || cfg.topic_words > SEVERE_WORDS.len() {
        return Err(Error::Config(format!("topic_words must be in 1..={}", SEVERE_WORDS.len())));
    }
    if cfg.words_per_note.0 == 0 || cfg.words_per_note.0 > cfg.words_per_note.1 {
        return Err(Error::Config("words_per_note must be a non-empty range".into()));
    }
    if !(0.0..=1.0).contains(&cfg.topic_share) || !(0.0..=0.25).contains(&cfg.exclusion_rate) {
        return Err(Error::Config("topic_share must be in [0, 1] and exclusion_rate in [0, 0.25]".into()));
    }
    if cfg.notes_per_hour <= 0.0 {
        return Err(Error::Config("notes_per_hour must be positive".into()));
    }
    let stays_dist =
        WeightedIndex::new(&cfg.stays_per_subject).map_err(|e| Error::Config(format!("stays_per_subject: {e}")))?;
    let max_w = cfg.windows.iter().copied().max().unwrap_or(48) as f64;
    let mut g = Gen {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
        std: Normal::new(0.0, 1.0).expect("unit normal"),
        horizon: max_w + 24.0,
        next_row: 1,
        out: SyntheticData { admissions: Vec::new(), icustays: Vec::new(), notes: Vec::new(), timeseries: Vec::new() },
    };
    let base = NaiveDate::from_ymd_opt(2150, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time");
    let mut hadm_id = 100_000u64;
    for s in 0..cfg.n_subjects {
        let subject_id = 10_000 + s as u64;
        let n_stays = stays_dist.sample(&mut g.rng) + 1;
        let mut admit = base + TimeDelta::minutes(g.rng.gen_range(0..3650 * 24 * 60));
        for _ in 0..n_stays {
            hadm_id += 1;
            let discharge = g.stay(subject_id, hadm_id, admit);
            admit = discharge + TimeDelta::days(g.rng.gen_range(30..400));
        }
    }
    Ok(g.out)
}

impl Gen<'_> {
    fn normal(&mut self) -> f64 {
        self.std.sample(&mut self.rng)
    }

    fn hours(&mut self, lo: f64, hi: f64) -> TimeDelta {
        TimeDelta::seconds((self.rng.gen_range(lo..hi) * 3600.0) as i64)
    }

    fn pattern(&mut self, label: bool) -> Pattern {
        let r: f64 = self.rng.gen();
        let e = self.cfg.exclusion_rate;
        match r {
            r if r < e => Pattern::Minor,
            r if r < 2.0 * e => Pattern::RepeatStay,
            r if r < 3.0 * e => Pattern::Transfer,
            r if r < 4.0 * e && label => Pattern::EarlyDeath,
            _ => Pattern::Eligible,
        }
    }

    /// Emits one hospital stay and returns its discharge time.
    fn stay(&mut self, subject_id: u64, hadm_id: u64, admit: NaiveDateTime) -> NaiveDateTime {
        let cfg = self.cfg;
        let label = self.rng.gen_bool(cfg.prevalence);
        let pattern = self.pattern(label);
        let shift = if label { cfg.signal_strength } else { 0.0 };
        let note_sev = self.normal() + shift * cfg.note_signal;
        let ts_sev = self.normal() + shift * cfg.ts_signal;

        let intime = admit + self.hours(0.5, 12.0);
        let mut outtime = intime + self.hours(48.0, 240.0);
        let mut discharge = outtime + self.hours(12.0, 120.0);
        let mut death = None;
        if label {
            let d = if pattern == Pattern::EarlyDeath {
                intime + self.hours(4.0, 71.0)
            } else {
                intime + self.hours(73.0, 300.0)
            };
            outtime = outtime.min(d).max(intime + TimeDelta::hours(1));
            discharge = d;
            death = Some(d);
        } else if self.rng.gen_bool(0.02) {
            death = Some(discharge + TimeDelta::days(self.rng.gen_range(1..200)));
        }
        let age = match pattern {
            Pattern::Minor if self.rng.gen_bool(0.3) => 18.0,
            Pattern::Minor => self.rng.gen_range(1.0..18.0f64),
            _ => self.rng.gen_range(19.0..90.0f64),
        };
        let age = (age * 100.0).round() / 100.0;
        let unit = UNITS.choose(&mut self.rng).expect("non-empty").to_string();
        let mut units = vec![unit.clone()];
        if pattern == Pattern::Transfer {
            let other = UNITS.iter().find(|u| **u != unit).expect("several units").to_string();
            units.push(other);
        }
        self.out.icustays.push(IcuStay { icustay_id: hadm_id + 100_000, hadm_id, intime, outtime, care_units: units });
        if pattern == Pattern::RepeatStay {
            let again = outtime + self.hours(6.0, 48.0);
            let out2 = again + self.hours(24.0, 72.0);
            discharge = discharge.max(out2 + TimeDelta::hours(6));
            if let Some(d) = death.as_mut() {
                if label {
                    *d = discharge;
                }
            }
            self.out.icustays.push(IcuStay {
                icustay_id: hadm_id + 200_000,
                hadm_id,
                intime: again,
                outtime: out2,
                care_units: vec![unit],
            });
        }
        self.out.admissions.push(Admission {
            hadm_id,
            subject_id,
            admit_time: admit,
            discharge_time: discharge,
            death_time: death,
            age,
        });
        self.notes(subject_id, hadm_id, intime, discharge, note_sev, label);
        self.series(hadm_id, ts_sev);
        discharge
    }

    fn notes(
        &mut self,
        subject_id: u64,
        hadm_id: u64,
        intime: NaiveDateTime,
        discharge: NaiveDateTime,
        severity: f64,
        label: bool,
    ) {
        let gap = Exp::new(self.cfg.notes_per_hour).expect("positive rate");
        let mut t = -12.0;
        loop {
            t += gap.sample(&mut self.rng);
            if t >= self.horizon {
                break;
            }
            let at = intime + TimeDelta::seconds((t * 3600.0) as i64);
            if at >= discharge {
                break;
            }
            // severity evidence strengthens as the stay progresses
            let drift = 0.3 + 0.7 * (t.max(0.0) / 48.0).min(1.0);
            let evidence = drift * severity + 0.7 * self.normal();
            let severe_share = 1.0 / (1.0 + (-evidence).exp());
            let text = self.note_text(severe_share);
            let category = CATEGORIES.choose(&mut self.rng).expect("non-empty").to_string();
            let untimed = matches!(category.as_str(), "Radiology" | "ECG") && self.rng.gen_bool(0.3);
            let is_error = match self.rng.gen_range(0..100) {
                0 => Some(true),
                1..=49 => None,
                _ => Some(false),
            };
            let note = RawNote {
                row_id: self.row_id(),
                subject_id,
                hadm_id,
                category,
                chart_date: Some(at.date()),
                chart_time: (!untimed).then(|| at.time()),
                is_error,
                text,
            };
            if self.rng.gen_bool(0.02) {
                let mut dup = note.clone();
                dup.row_id = self.row_id();
                self.out.notes.push(note);
                self.out.notes.push(dup);
            } else {
                self.out.notes.push(note);
            }
        }
        let outcome = if label { "patient expired" } else { "discharged home in good condition" };
        let summary = format!(
            "Discharge Summary [**Known lastname 4471**] admitted to [**Hospital1 18**] on [**{}**]. {outcome}.",
            intime.format("%Y-%m-%d")
        );
        let row_id = self.row_id();
        self.out.notes.push(RawNote {
            row_id,
            subject_id,
            hadm_id,
            category: "Discharge summary".into(),
            chart_date: Some(discharge.date()),
            chart_time: None,
            is_error: None,
            text: summary,
        });
    }

    fn row_id(&mut self) -> u64 {
        let r = self.next_row;
        self.next_row += 1;
        r
    }

    fn note_text(&mut self, severe_share: f64) -> String {
        let cfg = self.cfg;
        let n = self.rng.gen_range(cfg.words_per_note.0..=cfg.words_per_note.1);
        let mut out = String::new();
        for i in 0..n {
            if i > 0 {
                out.push(if self.rng.gen_bool(0.08) { '\n' } else { ' ' });
            }
            let r: f64 = self.rng.gen();
            if r < cfg.topic_share {
                let list = if self.rng.gen_bool(severe_share) { &SEVERE_WORDS } else { &STABLE_WORDS };
                out.push_str(list[self.rng.gen_range(0..cfg.topic_words)]);
            } else if r < cfg.topic_share + 0.05 {
                let x = match self.rng.gen_range(0..4) {
                    0 => format!("{}", self.rng.gen_range(1..200)),
                    1 => format!("{}mg", self.rng.gen_range(1..500)),
                    2 => format!("{}/{}", self.rng.gen_range(80..180), self.rng.gen_range(40..100)),
                    _ => format!("{}", self.rng.gen_range(1000..99999)),
                };
                out.push_str(&x);
            } else if r < cfg.topic_share + 0.07 {
                let span = match self.rng.gen_range(0..4) {
                    0 => format!("[**Known lastname {}**]", self.rng.gen_range(100..9999)),
                    1 => format!("[**Hospital{} {}**]", self.rng.gen_range(1..4), self.rng.gen_range(1..99)),
                    2 => format!("[**2150-{}-{}**]", self.rng.gen_range(1..13), self.rng.gen_range(1..29)),
                    _ => format!("[**Telephone/Fax (1) {}**]", self.rng.gen_range(1000..9999)),
                };
                out.push_str(&span);
            } else {
                out.push_str(BACKGROUND_WORDS.choose(&mut self.rng).expect("non-empty"));
                if self.rng.gen_bool(0.05) {
                    out.push(if self.rng.gen_bool(0.5) { '.' } else { ',' });
                }
            }
        }
        out
    }

    fn series(&mut self, hadm_id: u64, severity: f64) {
        let mut baseline = [0.0; N_VARIABLES];
        for b in baseline.iter_mut() {
            *b = 0.5 * self.normal();
        }
        let mut rows = Vec::new();
        let end = self.horizon as i64;
        for h in -2..end {
            let hours = h as f64 + self.rng.gen_range(0.0..0.9f64);
            let mut values = vec![None; N_VARIABLES];
            for v in 0..N_VARIABLES {
                if !self.rng.gen_bool(OBSERVATION_RATES[v]) {
                    continue;
                }
                let mut z = baseline[v] + 0.5 * self.normal();
                if let Some((_, dir)) = SIGNAL_CHANNELS.iter().find(|(c, _)| *c == v) {
                    let trend = 0.3 + 0.7 * (hours.max(0.0) / 24.0).min(2.0);
                    z += dir * 0.8 * severity * trend;
                }
                let x = NORMAL_VALUES[v] + VARIABLE_SCALES[v] * z;
                values[v] = Some((x * 100.0).round() / 100.0);
            }
            if values.iter().any(Option::is_some) {
                rows.push(TsObservation { hours: (hours * 100.0).round() / 100.0, values });
            }
        }
        if rows.is_empty() {
            let mut values = vec![None; N_VARIABLES];
            values[8] = Some(NORMAL_VALUES[8]);
            rows.push(TsObservation { hours: 0.0, values });
        }
        self.out.timeseries.push(RawSeries { hadm_id, rows });
    }
}
