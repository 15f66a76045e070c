use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hcr_core::cli::manifest::sha256_file;
use hcr_core::traineval::MetricsReport;

fn small_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.conf")
}

fn hcr(work: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcr"))
        .arg("--config")
        .arg(config)
        .arg("--work-dir")
        .arg(work)
        .args(args)
        .output()
        .expect("run hcr")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn digests(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(digests(&p));
        } else {
            out.insert(p.clone(), sha256_file(&p).unwrap());
        }
    }
    out
}

#[test]
fn small_config_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    let cfg = small_config();
    ok(hcr(work, &cfg, &["synth"]));
    for t in ["admissions.csv", "icustays.csv", "notes.csv", "timeseries.csv"] {
        assert!(work.join("synth").join(t).is_file(), "{t}");
    }
    let header = std::fs::read_to_string(work.join("synth/notes.csv")).unwrap();
    assert!(header.starts_with("row_id,subject_id,hadm_id,category,chart_date,chart_time,is_error,text"));
    ok(hcr(work, &cfg, &["preprocess"]));
    ok(hcr(work, &cfg, &["embed"]));
    ok(hcr(work, &cfg, &["cohort"]));
    let before = digests(&work.join("synth"))
        .into_iter()
        .chain(digests(&work.join("preprocess")))
        .chain(digests(&work.join("cohort")))
        .collect::<BTreeMap<_, _>>();
    ok(hcr(work, &cfg, &["train", "--jobs", "2"]));
    let out = ok(hcr(work, &cfg, &["evaluate"]));

    for (p, d) in &before {
        assert_eq!(&sha256_file(p).unwrap(), d, "{} changed by a later stage", p.display());
    }
    let report =
        MetricsReport::read_jsonl(&std::fs::read_to_string(work.join("evaluate/report.jsonl")).unwrap()).unwrap();
    for kind in hcr_core::models::ModelKind::ALL {
        let rows: Vec<usize> =
            report.folds.iter().filter(|f| f.model == kind && f.window == 24).map(|f| f.fold).collect();
        assert_eq!(rows, vec![0, 1, 2, 3, 4], "{kind}");
        let cell = report.cell(kind, 24, hcr_core::traineval::Metric::Auroc).unwrap();
        let mean = cell.values.iter().sum::<f64>() / 5.0;
        assert!((cell.mean - mean).abs() < 1e-12);
        assert!(work.join(format!("train/W24/{}/fold4.ckpt", kind.name())).is_file());
    }
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Mean \u{b1} sd over 5 folds"));
    assert_eq!(table, std::fs::read_to_string(work.join("evaluate/report.txt")).unwrap());
}

#[test]
fn synth_is_byte_identical_for_a_fixed_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(hcr(a.path(), &small_config(), &["synth"]));
    ok(hcr(b.path(), &small_config(), &["synth"]));
    let da: Vec<String> = digests(&a.path().join("synth")).into_values().collect();
    let db: Vec<String> = digests(&b.path().join("synth")).into_values().collect();
    assert_eq!(da, db);
    let c = tempfile::tempdir().unwrap();
    ok(hcr(c.path(), &small_config(), &["synth", "--seed", "8"]));
    let notes = |d: &Path| sha256_file(&d.join("synth/notes.csv")).unwrap();
    assert_ne!(notes(a.path()), notes(c.path()));
}

#[test]
fn train_before_cohort_names_the_missing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    let cfg = small_config();
    let early = hcr(work, &cfg, &["preprocess"]);
    assert_eq!(early.status.code(), Some(3));
    assert!(stderr(&early).contains("hcr synth"), "{}", stderr(&early));

    ok(hcr(work, &cfg, &["synth"]));
    ok(hcr(work, &cfg, &["preprocess"]));
    ok(hcr(work, &cfg, &["embed"]));
    let o = hcr(work, &cfg, &["train"]);
    assert_eq!(o.status.code(), Some(3));
    let msg = stderr(&o);
    assert!(msg.contains("cohort/W24/manifest.json") && msg.contains("hcr cohort"), "{msg}");

    let e = hcr(work, &cfg, &["evaluate"]);
    assert_eq!(e.status.code(), Some(3));

    // a predecessor output edited after the fact is refused
    std::fs::write(work.join("preprocess/vocab.tsv"), "tampered\n").unwrap();
    let o = hcr(work, &cfg, &["embed"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("vocab.tsv"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "synth.prevalence = 1.5\n").unwrap();
    let o = hcr(dir.path(), &bad, &["synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("synth.prevalence"), "{}", stderr(&o));

    std::fs::write(&bad, "synth.prevalance = 0.1\n").unwrap();
    let o = hcr(dir.path(), &bad, &["synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("synth.prevalance"));

    let o = hcr(dir.path(), &small_config(), &["cohort", "--window", "36"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hcr(dir.path(), &small_config(), &["train", "--model", "lstm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("synth").exists());
}

#[test]
fn shipped_configs_parse() {
    for name in ["small.conf", "desk.conf"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        let cfg = hcr_core::cli::RunConfig::load(&path).unwrap();
        assert_eq!(cfg.model_cfg.note_length, cfg.note_length);
    }
}
