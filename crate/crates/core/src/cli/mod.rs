//! Command-line front end: one subcommand per pipeline stage, each reading its
//! predecessors' artifacts from the work directory.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cohort::{generate_synthetic, CohortRecord};
use crate::cohort::{
    read_admissions, read_icustays, read_timeseries, write_admissions, write_icustays, write_timeseries,
};
use crate::embed::{train_skipgram, EmbeddingMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::notesproc::{
    assemble_patient_file, notes_by_stay, preprocess, read_clean_notes, read_notes_csv, write_clean_notes,
    write_notes_csv, PatientFile,
};
use crate::pipeline::{build_cohort, folds_from_records, stay_inputs};
use crate::traineval::{build_report, cross_validate, FoldMetrics};

pub use config::RunConfig;
use manifest::{require_file, require_stage, Manifest};

#[derive(Debug, Parser)]
#[command(name = "hcr", version, about = "In-hospital mortality prediction from clinical notes and time series")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for cross-validation folds.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Observation window in hours (12, 24 or 48).
    #[arg(long, global = true)]
    pub window: Option<u32>,
    /// cts-rnn, notes-hcr or mm-hcr.
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (admissions, ICU stays, notes, time series).
    Synth,
    /// Clean and tokenize the notes table and build the vocabulary.
    Preprocess,
    /// Pretrain skip-gram word embeddings.
    Embed,
    /// Select the cohort and assign cross-validation folds.
    Cohort,
    /// Cross-validate models.
    Train,
    /// Aggregate fold metrics into the report.
    Evaluate,
}

/// Resolves the configuration file and command-line overrides.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    if let Some(s) = g.seed {
        cfg.set_seed(s);
    }
    if let Some(j) = g.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        cfg.jobs = j;
    }
    if let Some(w) = g.window {
        cfg.window = Some(config::check_window(w)?);
    }
    if let Some(m) = &g.model {
        cfg.model = Some(ModelKind::parse(m)?);
    }
    if let Some(d) = &g.work_dir {
        cfg.work_dir = d.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    let ws = Workspace { cfg: &cfg };
    match cli.command {
        Command::Synth => ws.synth(),
        Command::Preprocess => ws.preprocess(),
        Command::Embed => ws.embed(),
        Command::Cohort => ws.cohort(),
        Command::Train => ws.train(),
        Command::Evaluate => ws.evaluate(),
    }
}

const TABLES: [&str; 4] = ["admissions.csv", "icustays.csv", "notes.csv", "timeseries.csv"];

struct Workspace<'a> {
    cfg: &'a RunConfig,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

impl Workspace<'_> {
    fn stage_dir(&self, rel: &str) -> Result<PathBuf> {
        let d = self.cfg.work_dir.join(rel);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn windows(&self) -> Vec<u32> {
        self.cfg.window.map_or_else(|| self.cfg.windows.clone(), |w| vec![w])
    }

    fn models(&self) -> Vec<ModelKind> {
        self.cfg.model.map_or_else(|| ModelKind::ALL.to_vec(), |m| vec![m])
    }

    /// Directory holding the input tables, verified against the synth manifest
    /// when the tables were generated here.
    fn tables(&self) -> Result<PathBuf> {
        match &self.cfg.input_dir {
            Some(d) => {
                for t in TABLES {
                    require_file(&d.join(t), "input_dir must contain the four input tables")?;
                }
                Ok(d.clone())
            }
            None => {
                let d = self.cfg.work_dir.join("synth");
                require_stage(&d, "hcr synth")?;
                Ok(d)
            }
        }
    }

    fn synth(&self) -> Result<()> {
        let cfg = self.cfg;
        let data = generate_synthetic(&cfg.synth, cfg.seed)?;
        let dir = self.stage_dir("synth")?;
        write_admissions(create(&dir.join("admissions.csv"))?, &data.admissions)?;
        write_icustays(create(&dir.join("icustays.csv"))?, &data.icustays)?;
        write_notes_csv(create(&dir.join("notes.csv"))?, &data.notes)?;
        write_timeseries(create(&dir.join("timeseries.csv"))?, &data.timeseries)?;
        Manifest::new("synth", cfg.seed, cfg.section_hash(&["synth."])).finish(&dir, &TABLES)?;
        eprintln!(
            "synth: {} admissions, {} ICU stays, {} notes -> {}",
            data.admissions.len(),
            data.icustays.len(),
            data.notes.len(),
            dir.display()
        );
        Ok(())
    }

    fn preprocess(&self) -> Result<()> {
        let cfg = self.cfg;
        let tables = self.tables()?;
        let notes_path = tables.join("notes.csv");
        let raw = read_notes_csv(&notes_path)?;
        let pre = preprocess(&raw, cfg.note_length, cfg.min_count)?;
        let dir = self.stage_dir("preprocess")?;
        write_clean_notes(create(&dir.join("clean_notes.jsonl"))?, &pre.clean_notes)?;
        pre.vocab.write_tsv(create(&dir.join("vocab.tsv"))?)?;
        let mut corpus = create(&dir.join("corpus.txt"))?;
        for doc in &pre.embedding_corpus {
            let line: Vec<String> = doc.iter().map(u32::to_string).collect();
            writeln!(corpus, "{}", line.join(" "))?;
        }
        corpus.flush()?;
        drop(corpus);
        std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&pre.stats)?)?;
        let mut m = Manifest::new("preprocess", cfg.seed, cfg.section_hash(&["preprocess."]));
        m.add_input(&notes_path)?;
        m.finish(&dir, &["clean_notes.jsonl", "vocab.tsv", "corpus.txt", "stats.json"])?;
        eprintln!(
            "preprocess: {} raw notes, {} model notes, vocabulary {} -> {}",
            pre.stats.raw_notes,
            pre.stats.model_notes,
            pre.vocab.len(),
            dir.display()
        );
        Ok(())
    }

    fn embed(&self) -> Result<()> {
        let cfg = self.cfg;
        let pre_dir = self.cfg.work_dir.join("preprocess");
        require_stage(&pre_dir, "hcr preprocess")?;
        let vocab = Vocabulary::read_tsv(open(&pre_dir.join("vocab.tsv"))?)?;
        let mut corpus = Vec::new();
        for line in open(&pre_dir.join("corpus.txt"))?.lines() {
            let ids = line?
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|e| Error::CorruptData(format!("corpus.txt: {e}"))))
                .collect::<Result<Vec<u32>>>()?;
            corpus.push(ids);
        }
        let res = train_skipgram(&corpus, &vocab, &cfg.skipgram)?;
        let dir = self.stage_dir("embed")?;
        res.embeddings.write_text(create(&dir.join("embeddings.txt"))?)?;
        std::fs::write(dir.join("losses.json"), serde_json::to_string(&res.epoch_losses)?)?;
        let mut m = Manifest::new("embed", cfg.seed, cfg.section_hash(&["embed."]));
        m.add_input(&pre_dir.join("vocab.tsv"))?;
        m.add_input(&pre_dir.join("corpus.txt"))?;
        m.finish(&dir, &["embeddings.txt", "losses.json"])?;
        eprintln!(
            "embed: {} vectors of dimension {}, final loss {:.4} -> {}",
            res.embeddings.rows(),
            cfg.skipgram.dim,
            res.epoch_losses.last().copied().unwrap_or(f64::NAN),
            dir.display()
        );
        Ok(())
    }

    fn cohort(&self) -> Result<()> {
        let cfg = self.cfg;
        let tables = self.tables()?;
        let pre_dir = cfg.work_dir.join("preprocess");
        require_stage(&pre_dir, "hcr preprocess")?;
        let admissions = read_admissions(&tables.join("admissions.csv"))?;
        let icustays = read_icustays(&tables.join("icustays.csv"))?;
        let notes = read_clean_notes(open(&pre_dir.join("clean_notes.jsonl"))?)?;
        for w in self.windows() {
            let build = build_cohort(&admissions, &icustays, &notes, w, cfg.k, cfg.seed)?;
            let dir = self.stage_dir(&format!("cohort/W{w}"))?;
            let mut out = create(&dir.join("cohort.jsonl"))?;
            for r in &build.records {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
            drop(out);
            let mut m = Manifest::new("cohort", cfg.seed, cfg.section_hash(&["cohort."]));
            m.add_input(&tables.join("admissions.csv"))?;
            m.add_input(&tables.join("icustays.csv"))?;
            m.add_input(&pre_dir.join("clean_notes.jsonl"))?;
            m.finish(&dir, &["cohort.jsonl"])?;
            let pos = build.records.iter().filter(|r| r.label).count();
            eprintln!(
                "cohort W={w}: {} stays ({pos} deaths), {} folds -> {}",
                build.records.len(),
                build.folds.len(),
                dir.display()
            );
        }
        Ok(())
    }

    fn train(&self) -> Result<()> {
        let cfg = self.cfg;
        let pre_dir = cfg.work_dir.join("preprocess");
        require_stage(&pre_dir, "hcr preprocess")?;
        let models = self.models();
        let need_notes = models.iter().any(|m| m.uses_notes());
        let need_series = models.iter().any(|m| m.uses_series());
        let emb_dir = cfg.work_dir.join("embed");
        let emb = if need_notes {
            require_stage(&emb_dir, "hcr embed")?;
            Some(EmbeddingMatrix::read_text(open(&emb_dir.join("embeddings.txt"))?)?)
        } else {
            None
        };
        let (series, series_path) = if need_series {
            let p = self.tables()?.join("timeseries.csv");
            (read_timeseries(&p)?, Some(p))
        } else {
            (BTreeMap::new(), None)
        };
        let notes = if need_notes {
            notes_by_stay(read_clean_notes(open(&pre_dir.join("clean_notes.jsonl"))?)?)
        } else {
            Default::default()
        };
        for w in self.windows() {
            let cohort_dir = cfg.work_dir.join(format!("cohort/W{w}"));
            require_stage(&cohort_dir, &format!("hcr cohort --window {w}"))?;
            let records: Vec<CohortRecord> = open(&cohort_dir.join("cohort.jsonl"))?
                .lines()
                .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
                .map(|l| Ok(serde_json::from_str(&l?)?))
                .collect::<Result<_>>()?;
            let folds = folds_from_records(&records)?;
            if folds.len() != cfg.k {
                return Err(Error::Config(format!(
                    "cohort W={w} has {} folds but cohort.k = {}; rerun `hcr cohort`",
                    folds.len(),
                    cfg.k
                )));
            }
            let mut files: BTreeMap<u64, PatientFile> = BTreeMap::new();
            if need_notes {
                for r in &records {
                    let stay_notes = notes.get(&r.hadm_id).map(Vec::as_slice).unwrap_or(&[]);
                    if let Some(f) =
                        assemble_patient_file(stay_notes, r.subject_id, r.hadm_id, r.icu_intime, w, r.label)
                    {
                        files.insert(r.hadm_id, f);
                    }
                }
            }
            for kind in &models {
                let tcfg = cfg.train_config(*kind)?;
                let stays = stay_inputs(*kind, &records, &files, &series, w)?;
                let emb_ref = if kind.uses_notes() { emb.as_ref() } else { None };
                let outcomes = cross_validate(*kind, w, &cfg.model_cfg, &tcfg, &stays, &folds, emb_ref, cfg.jobs)?;

                let dir = self.stage_dir(&format!("train/W{w}/{}", kind.name()))?;
                let mut outputs = vec!["metrics.jsonl".to_string()];
                let mut metrics = create(&dir.join("metrics.jsonl"))?;
                for o in &outcomes {
                    let f = o.fold;
                    o.model.params.save(&dir.join(format!("fold{f}.ckpt")))?;
                    let mut hist = create(&dir.join(format!("history_fold{f}.jsonl")))?;
                    for e in &o.model.history {
                        serde_json::to_writer(&mut hist, e)?;
                        hist.write_all(b"\n")?;
                    }
                    hist.flush()?;
                    let mut preds = create(&dir.join(format!("predictions_fold{f}.csv")))?;
                    writeln!(preds, "hadm_id,probability")?;
                    for (h, p) in o.test_ids.iter().zip(&o.test_probs) {
                        writeln!(preds, "{h},{p}")?;
                    }
                    preds.flush()?;
                    serde_json::to_writer(&mut metrics, &o.metrics)?;
                    metrics.write_all(b"\n")?;
                    outputs.extend([
                        format!("fold{f}.ckpt"),
                        format!("fold{f}.json"),
                        format!("history_fold{f}.jsonl"),
                        format!("predictions_fold{f}.csv"),
                    ]);
                    eprintln!(
                        "train {} W={w} fold {f}: best epoch {}, AUROC {:.4}, AUPRC {:.4}",
                        kind.name(),
                        o.model.best_epoch,
                        o.metrics.auroc,
                        o.metrics.auprc
                    );
                }
                metrics.flush()?;
                drop(metrics);
                let mut m = Manifest::new(
                    "train",
                    cfg.seed,
                    cfg.section_hash(&["model.", "train.", "cohort.", "preprocess.", "embed."]),
                );
                m.add_input(&cohort_dir.join("cohort.jsonl"))?;
                if kind.uses_notes() {
                    m.add_input(&pre_dir.join("clean_notes.jsonl"))?;
                    m.add_input(&emb_dir.join("embeddings.txt"))?;
                }
                if let (true, Some(p)) = (kind.uses_series(), &series_path) {
                    m.add_input(p)?;
                }
                let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
                m.finish(&dir, &names)?;
            }
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        let cfg = self.cfg;
        let mut folds: Vec<FoldMetrics> = Vec::new();
        let mut inputs = Vec::new();
        for w in self.windows() {
            for kind in self.models() {
                let dir = cfg.work_dir.join(format!("train/W{w}/{}", kind.name()));
                if !dir.exists() {
                    continue;
                }
                require_stage(&dir, &format!("hcr train --window {w} --model {}", kind.name()))?;
                let p = dir.join("metrics.jsonl");
                for line in open(&p)?.lines() {
                    let line = line?;
                    if !line.trim().is_empty() {
                        folds.push(serde_json::from_str(&line)?);
                    }
                }
                inputs.push(p);
            }
        }
        if folds.is_empty() {
            return Err(Error::MissingArtifact {
                path: cfg.work_dir.join("train"),
                remedy: "no trained models found; run `hcr train` first".into(),
            });
        }
        let report = build_report(&folds, cfg.k)?;
        let dir = self.stage_dir("evaluate")?;
        report.write_jsonl(create(&dir.join("report.jsonl"))?)?;
        let table = report.render_table();
        std::fs::write(dir.join("report.txt"), &table)?;
        let mut m = Manifest::new("evaluate", cfg.seed, cfg.section_hash(&["cohort."]));
        for p in &inputs {
            m.add_input(p)?;
        }
        m.finish(&dir, &["report.jsonl", "report.txt"])?;
        print!("{table}");
        Ok(())
    }
}
