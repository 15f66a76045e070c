//! Clinical-note cleaning: de-identification tokens, token filtering,
//! fixed-length truncation and patient-file assembly.
//!
//! De-identification spans `[** … **]` are classified by the first matching rule:
//!
//! | rule                                                     | replacement        |
//! |----------------------------------------------------------|--------------------|
//! | content contains `name`                                  | `deidentifiedname` |
//! | content contains `hospital`                              | `deidentifiedhosp` |
//! | content is digits with `-`/`/` separators, or contains `date`, `month`, `year` or `holiday` | `deidentifieddate` |
//! | anything else                                            | removed            |

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime, TimeDelta};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
/// Token id for words outside the vocabulary; embeds to the zero vector.
pub const OOV_ID: u32 = u32::MAX;
pub const DEFAULT_NOTE_LENGTH: usize = 500;

pub const DEID_NAME: &str = "deidentifiedname";
pub const DEID_HOSP: &str = "deidentifiedhosp";
pub const DEID_DATE: &str = "deidentifieddate";

const SPAN_OPEN: &str = "[**";
const SPAN_CLOSE: &str = "**]";

pub const DATE_FORMAT: &str = "%Y-%m-%d";
pub const TIME_FORMAT: &str = "%H:%M:%S";
pub const DATETIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawNote {
    pub row_id: u64,
    pub subject_id: u64,
    pub hadm_id: u64,
    pub category: String,
    pub chart_date: Option<NaiveDate>,
    pub chart_time: Option<NaiveTime>,
    pub is_error: Option<bool>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CleanNote {
    pub row_id: u64,
    pub subject_id: u64,
    pub hadm_id: u64,
    pub category: String,
    pub charted_at: NaiveDateTime,
    /// Exactly `note_length` ids; padding is [`PAD_ID`].
    pub tokens: Vec<u32>,
    /// True for real tokens; always a nonempty prefix.
    pub mask: Vec<bool>,
}

impl CleanNote {
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientFile {
    pub hadm_id: u64,
    pub subject_id: u64,
    pub notes: Vec<CleanNote>,
    pub label: bool,
    pub window_hours: u32,
}

/// Which corpus a note set is being prepared for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corpus {
    /// Word-embedding pretraining: every valid note.
    Embedding,
    /// Classifier input: discharge summaries removed.
    Model,
}

/// Lowercases, normalises de-identification spans and collapses whitespace.
pub fn clean_text(text: &str) -> String {
    let lower = text.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    let mut rest = lower.as_str();
    while let Some(open) = rest.find(SPAN_OPEN) {
        let after = &rest[open + SPAN_OPEN.len()..];
        let Some(close) = after.find(SPAN_CLOSE) else { break };
        out.push_str(&rest[..open]);
        out.push(' ');
        if let Some(token) = classify_deid(&after[..close]) {
            out.push_str(token);
            out.push(' ');
        }
        rest = &after[close + SPAN_CLOSE.len()..];
    }
    out.push_str(rest);
    // unmatched delimiters
    let out = out.replace(SPAN_OPEN, " ").replace(SPAN_CLOSE, " ");
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Replacement token for the content of a de-identification span, `None` to delete it.
pub fn classify_deid(content: &str) -> Option<&'static str> {
    let c = content.to_lowercase();
    if c.contains("name") {
        Some(DEID_NAME)
    } else if c.contains("hospital") {
        Some(DEID_HOSP)
    } else if is_numeric_date(c.trim()) || ["date", "month", "year", "holiday"].iter().any(|k| c.contains(k)) {
        Some(DEID_DATE)
    } else {
        None
    }
}

fn is_numeric_date(s: &str) -> bool {
    let has_digit = s.chars().any(|c| c.is_ascii_digit());
    let has_sep = s.chars().any(|c| c == '-' || c == '/');
    has_digit && has_sep && s.chars().all(|c| c.is_ascii_digit() || c == '-' || c == '/')
}

/// Keep-rule for a single lowercase alphanumeric token: letters only, letters
/// mixed with digits, or a number below 1000 written with at most three digits.
pub fn keep_token(tok: &str) -> bool {
    if tok.is_empty() || !tok.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()) {
        return false;
    }
    let has_alpha = tok.chars().any(|c| c.is_ascii_lowercase());
    if has_alpha {
        return true;
    }
    tok.len() <= 3
}

/// Splits on every non-alphanumeric character and applies [`keep_token`].
pub fn tokenize_filter(cleaned: &str) -> Vec<String> {
    cleaned
        .split(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit()))
        .filter(|t| keep_token(t))
        .map(str::to_owned)
        .collect()
}

/// Head-truncates or right-pads `ids` to `max_len`.
pub fn truncate_pad(ids: &[u32], max_len: usize) -> Result<(Vec<u32>, Vec<bool>)> {
    if ids.is_empty() {
        return Err(Error::EmptyNote);
    }
    let keep = ids.len().min(max_len);
    let mut tokens = ids[..keep].to_vec();
    let mut mask = vec![true; keep];
    tokens.resize(max_len, PAD_ID);
    mask.resize(max_len, false);
    Ok((tokens, mask))
}

/// Chart time, or midnight of the chart date when the time is missing.
pub fn impute_charttime(raw: &RawNote) -> Result<NaiveDateTime> {
    let date =
        raw.chart_date.ok_or_else(|| Error::MalformedRecord(format!("note {} has no chart date", raw.row_id)))?;
    Ok(date.and_time(raw.chart_time.unwrap_or(NaiveTime::MIN)))
}

pub fn is_discharge_summary(category: &str) -> bool {
    category.trim().eq_ignore_ascii_case("discharge summary")
}

fn text_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Drops erroneous notes, notes without a chart date, and duplicates (same stay,
/// timestamp and text; lowest `row_id` survives). For the model corpus discharge
/// summaries are dropped too. Output is ordered by `row_id`.
pub fn dedupe_and_filter(notes: &[RawNote], corpus: Corpus) -> Vec<RawNote> {
    let mut sorted: Vec<&RawNote> = notes.iter().collect();
    sorted.sort_by_key(|n| n.row_id);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for n in sorted {
        if n.is_error == Some(true) {
            continue;
        }
        if corpus == Corpus::Model && is_discharge_summary(&n.category) {
            continue;
        }
        let Ok(at) = impute_charttime(n) else { continue };
        if seen.insert((n.hadm_id, at, text_digest(&n.text))) {
            out.push(n.clone());
        }
    }
    out
}

/// Builds the patient file for one stay from notes charted in `[intime, intime + W)`.
pub fn assemble_patient_file(
    notes: &[CleanNote],
    subject_id: u64,
    hadm_id: u64,
    icu_intime: NaiveDateTime,
    window_hours: u32,
    label: bool,
) -> Option<PatientFile> {
    let end = icu_intime + TimeDelta::hours(window_hours as i64);
    let mut kept: Vec<CleanNote> = notes
        .iter()
        .filter(|n| n.hadm_id == hadm_id && n.charted_at >= icu_intime && n.charted_at < end)
        .cloned()
        .collect();
    if kept.is_empty() {
        return None;
    }
    kept.sort_by(|a, b| a.charted_at.cmp(&b.charted_at).then(a.row_id.cmp(&b.row_id)));
    Some(PatientFile { hadm_id, subject_id, notes: kept, label, window_hours })
}

/// Result of running the full note pipeline over a raw notes table.
#[derive(Debug)]
pub struct Preprocessed {
    pub vocab: crate::embed::Vocabulary,
    /// Embedding corpus as in-vocabulary id sequences.
    pub embedding_corpus: Vec<Vec<u32>>,
    /// Model corpus, one entry per surviving non-discharge note.
    pub clean_notes: Vec<CleanNote>,
    pub stats: PreprocessStats,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub raw_notes: usize,
    pub embedding_notes: usize,
    pub model_notes: usize,
    pub empty_notes: usize,
}

/// Cleans every note, builds the vocabulary on the embedding corpus, and emits
/// fixed-length id sequences for the model corpus.
pub fn preprocess(raw: &[RawNote], note_length: usize, min_count: u64) -> Result<Preprocessed> {
    if note_length == 0 {
        return Err(Error::Config("note length must be positive".into()));
    }
    let embedding_raw = dedupe_and_filter(raw, Corpus::Embedding);
    let tokenized: Vec<(&RawNote, Vec<String>)> =
        embedding_raw.iter().map(|n| (n, tokenize_filter(&clean_text(&n.text)))).collect();
    let vocab = crate::embed::build_vocab(tokenized.iter().map(|(_, t)| t.as_slice()), min_count)?;

    let mut stats = PreprocessStats { raw_notes: raw.len(), embedding_notes: tokenized.len(), ..Default::default() };
    let mut embedding_corpus = Vec::with_capacity(tokenized.len());
    let mut clean_notes = Vec::new();
    for (note, toks) in &tokenized {
        let ids: Vec<u32> = toks.iter().map(|t| vocab.id(t).unwrap_or(OOV_ID)).collect();
        let in_vocab: Vec<u32> = ids.iter().copied().filter(|&i| i != OOV_ID).collect();
        if !in_vocab.is_empty() {
            embedding_corpus.push(in_vocab);
        }
        if is_discharge_summary(&note.category) {
            continue;
        }
        match truncate_pad(&ids, note_length) {
            Ok((tokens, mask)) => clean_notes.push(CleanNote {
                row_id: note.row_id,
                subject_id: note.subject_id,
                hadm_id: note.hadm_id,
                category: note.category.clone(),
                charted_at: impute_charttime(note)?,
                tokens,
                mask,
            }),
            Err(Error::EmptyNote) => stats.empty_notes += 1,
            Err(e) => return Err(e),
        }
    }
    stats.model_notes = clean_notes.len();
    Ok(Preprocessed { vocab, embedding_corpus, clean_notes, stats })
}

// ---- file formats ----

#[derive(Debug, Serialize, Deserialize)]
struct NoteRow {
    row_id: u64,
    subject_id: u64,
    hadm_id: u64,
    category: String,
    chart_date: String,
    chart_time: String,
    is_error: String,
    text: String,
}

/// Reads the notes table: `row_id,subject_id,hadm_id,category,chart_date,chart_time,is_error,text`.
/// Empty `chart_date`/`chart_time`/`is_error` cells are missing values.
pub fn read_notes_csv(path: &Path) -> Result<Vec<RawNote>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: NoteRow = row?;
        let chart_date = parse_opt(&r.chart_date, |s| NaiveDate::parse_from_str(s, DATE_FORMAT), r.row_id)?;
        let chart_time = parse_opt(&r.chart_time, |s| NaiveTime::parse_from_str(s, TIME_FORMAT), r.row_id)?;
        let is_error = match r.is_error.trim() {
            "" => None,
            "1" | "true" => Some(true),
            "0" | "false" => Some(false),
            other => return Err(Error::MalformedRecord(format!("note {}: is_error {other:?}", r.row_id))),
        };
        out.push(RawNote {
            row_id: r.row_id,
            subject_id: r.subject_id,
            hadm_id: r.hadm_id,
            category: r.category,
            chart_date,
            chart_time,
            is_error,
            text: r.text,
        });
    }
    Ok(out)
}

fn parse_opt<T, E: std::fmt::Display>(
    s: &str,
    f: impl Fn(&str) -> std::result::Result<T, E>,
    row_id: u64,
) -> Result<Option<T>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    f(s).map(Some).map_err(|e| Error::MalformedRecord(format!("note {row_id}: {e}")))
}

pub fn write_notes_csv<W: Write>(w: W, notes: &[RawNote]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for n in notes {
        wtr.serialize(NoteRow {
            row_id: n.row_id,
            subject_id: n.subject_id,
            hadm_id: n.hadm_id,
            category: n.category.clone(),
            chart_date: n.chart_date.map(|d| d.format(DATE_FORMAT).to_string()).unwrap_or_default(),
            chart_time: n.chart_time.map(|t| t.format(TIME_FORMAT).to_string()).unwrap_or_default(),
            is_error: match n.is_error {
                None => String::new(),
                Some(true) => "1".into(),
                Some(false) => "0".into(),
            },
            text: n.text.clone(),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// One line of the clean-note record file. Only real tokens are stored; the
/// reader pads back to `note_length`.
#[derive(Debug, Serialize, Deserialize)]
struct CleanNoteRecord {
    row_id: u64,
    subject_id: u64,
    hadm_id: u64,
    category: String,
    charted_at: String,
    note_length: usize,
    tokens: Vec<u32>,
}

pub fn write_clean_notes<W: Write>(mut w: W, notes: &[CleanNote]) -> Result<()> {
    for n in notes {
        let rec = CleanNoteRecord {
            row_id: n.row_id,
            subject_id: n.subject_id,
            hadm_id: n.hadm_id,
            category: n.category.clone(),
            charted_at: n.charted_at.format(DATETIME_FORMAT).to_string(),
            note_length: n.tokens.len(),
            tokens: n.tokens[..n.real_len()].to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_clean_notes<R: BufRead>(r: R) -> Result<Vec<CleanNote>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CleanNoteRecord = serde_json::from_str(&line)?;
        let charted_at = NaiveDateTime::parse_from_str(&rec.charted_at, DATETIME_FORMAT)
            .map_err(|e| Error::CorruptData(format!("note {}: {e}", rec.row_id)))?;
        if rec.tokens.len() > rec.note_length {
            return Err(Error::CorruptData(format!("note {} longer than its note_length", rec.row_id)));
        }
        let (tokens, mask) = truncate_pad(&rec.tokens, rec.note_length)
            .map_err(|_| Error::CorruptData(format!("note {} has no tokens", rec.row_id)))?;
        out.push(CleanNote {
            row_id: rec.row_id,
            subject_id: rec.subject_id,
            hadm_id: rec.hadm_id,
            category: rec.category,
            charted_at,
            tokens,
            mask,
        });
    }
    Ok(out)
}

/// Groups clean notes by stay.
pub fn notes_by_stay(notes: Vec<CleanNote>) -> HashMap<u64, Vec<CleanNote>> {
    let mut map: HashMap<u64, Vec<CleanNote>> = HashMap::new();
    for n in notes {
        map.entry(n.hadm_id).or_default().push(n);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dt(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, DATETIME_FORMAT).unwrap()
    }

    fn raw(row_id: u64, text: &str) -> RawNote {
        RawNote {
            row_id,
            subject_id: 1,
            hadm_id: 10,
            category: "Nursing".into(),
            chart_date: NaiveDate::from_ymd_opt(2150, 3, 12),
            chart_time: NaiveTime::from_hms_opt(14, 5, 0),
            is_error: None,
            text: text.into(),
        }
    }

    fn clean(row_id: u64, at: &str) -> CleanNote {
        let (tokens, mask) = truncate_pad(&[3, 4], 8).unwrap();
        CleanNote { row_id, subject_id: 1, hadm_id: 10, category: "Nursing".into(), charted_at: dt(at), tokens, mask }
    }

    #[test]
    fn clean_text_examples() {
        assert_eq!(clean_text("Seen at [**Hospital1 18**] today"), "seen at deidentifiedhosp today");
        assert_eq!(clean_text("[**2150-3-12**] [**Known lastname 1234**]"), "deidentifieddate deidentifiedname");
        assert_eq!(clean_text("[**Pager number 555**] call"), "call");
        assert_eq!(clean_text("a\n\n  b\t\tc  "), "a b c");
        assert_eq!(clean_text("x[**First Name8 (NamePattern2) 12**]y"), "x deidentifiedname y");
        assert_eq!(clean_text("stray [** bracket"), "stray bracket");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize_filter("pt received 24mg lasix bp 1500/90"),
            vec!["pt", "received", "24mg", "lasix", "bp", "90"]
        );
        assert_eq!(tokenize_filter("999 1000"), vec!["999"]);
        assert!(tokenize_filter("").is_empty());
        assert_eq!(tokenize_filter("temp 37.5 -4"), vec!["temp", "37", "5", "4"]);
    }

    #[test]
    fn truncate_pad_examples() {
        let long: Vec<u32> = (1..=600).collect();
        let (t, m) = truncate_pad(&long, 500).unwrap();
        assert_eq!(t, (1..=500).collect::<Vec<u32>>());
        assert!(m.iter().all(|x| *x));

        let short: Vec<u32> = (1..=10).collect();
        let (t, m) = truncate_pad(&short, 500).unwrap();
        assert_eq!(&t[..10], &short[..]);
        assert!(t[10..].iter().all(|x| *x == PAD_ID));
        assert_eq!(m.iter().filter(|x| **x).count(), 10);
        assert!(m[..10].iter().all(|x| *x) && m[10..].iter().all(|x| !*x));

        let exact: Vec<u32> = (1..=500).collect();
        assert_eq!(truncate_pad(&exact, 500).unwrap().0, exact);
        assert!(matches!(truncate_pad(&[], 500), Err(Error::EmptyNote)));
    }

    #[test]
    fn impute_examples() {
        let n = raw(1, "x");
        assert_eq!(impute_charttime(&n).unwrap(), dt("2150-03-12 14:05:00"));
        let mut n2 = n.clone();
        n2.chart_time = None;
        assert_eq!(impute_charttime(&n2).unwrap(), dt("2150-03-12 00:00:00"));
        n2.chart_date = None;
        assert!(matches!(impute_charttime(&n2), Err(Error::MalformedRecord(_))));
    }

    #[test]
    fn dedupe_examples() {
        let notes = vec![raw(9, "same"), raw(5, "same")];
        let out = dedupe_and_filter(&notes, Corpus::Model);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].row_id, 5);

        let mut bad = raw(3, "oops");
        bad.is_error = Some(true);
        assert!(dedupe_and_filter(&[bad], Corpus::Embedding).is_empty());

        let mut ds = raw(4, "summary");
        ds.category = "Discharge summary".into();
        assert!(dedupe_and_filter(&[ds.clone()], Corpus::Model).is_empty());
        assert_eq!(dedupe_and_filter(&[ds], Corpus::Embedding).len(), 1);
    }

    #[test]
    fn assemble_examples() {
        let start = dt("2150-03-12 08:00:00");
        let notes =
            vec![clean(1, "2150-03-12 10:00:00"), clean(2, "2150-03-13 14:00:00"), clean(3, "2150-03-12 21:00:00")];
        let pf = assemble_patient_file(&notes, 1, 10, start, 24, true).unwrap();
        assert_eq!(pf.notes.iter().map(|n| n.row_id).collect::<Vec<_>>(), vec![1, 3]);

        assert!(assemble_patient_file(&notes, 1, 10, dt("2150-04-01 00:00:00"), 24, false).is_none());

        let tied = vec![clean(7, "2150-03-12 09:00:00"), clean(4, "2150-03-12 09:00:00")];
        let pf = assemble_patient_file(&tied, 1, 10, start, 12, false).unwrap();
        assert_eq!(pf.notes.iter().map(|n| n.row_id).collect::<Vec<_>>(), vec![4, 7]);

        // window is half-open
        let edge = vec![clean(1, "2150-03-12 08:00:00"), clean(2, "2150-03-12 20:00:00")];
        let pf = assemble_patient_file(&edge, 1, 10, start, 12, false).unwrap();
        assert_eq!(pf.notes.len(), 1);
    }

    #[test]
    fn clean_notes_roundtrip() {
        let notes = vec![clean(1, "2150-03-12 10:00:00"), clean(2, "2150-03-12 11:30:00")];
        let mut buf = Vec::new();
        write_clean_notes(&mut buf, &notes).unwrap();
        assert_eq!(read_clean_notes(buf.as_slice()).unwrap(), notes);
    }

    #[test]
    fn notes_csv_roundtrip() {
        let mut a = raw(1, "line one,\n\"quoted\" [**Hospital 3**]");
        a.chart_time = None;
        a.is_error = Some(false);
        let notes = vec![a, raw(2, "plain")];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.csv");
        write_notes_csv(std::fs::File::create(&path).unwrap(), &notes).unwrap();
        assert_eq!(read_notes_csv(&path).unwrap(), notes);
    }

    proptest! {
        #[test]
        fn clean_text_is_idempotent(s in "[a-zA-Z0-9 \\[\\]*\\n/-]{0,80}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
            prop_assert!(!once.contains("[**") && !once.contains("**]"));
        }

        #[test]
        fn tokens_follow_keep_grammar(s in "[a-z0-9 .,/()-]{0,120}") {
            for tok in tokenize_filter(&s) {
                let letters = tok.chars().all(|c| c.is_ascii_lowercase());
                let digits = tok.chars().all(|c| c.is_ascii_digit());
                let mixed = tok.chars().any(|c| c.is_ascii_lowercase())
                    && tok.chars().any(|c| c.is_ascii_digit())
                    && tok.chars().all(|c| c.is_ascii_alphanumeric());
                let small = digits && (1..=3).contains(&tok.len()) && tok.parse::<u32>().unwrap() < 1000;
                prop_assert!(letters || mixed || small, "bad token {}", tok);
            }
        }
    }
}
