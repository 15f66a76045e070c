//! Per-fold metrics aggregated into a models-by-windows table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::metrics::{mean, paired_ttest_onetailed, sample_sd, significance_marker};
use crate::error::{Error, Result};
use crate::models::ModelKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub model: ModelKind,
    pub window: u32,
    pub fold: usize,
    pub auroc: f64,
    pub auprc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Auroc, Metric::Auprc];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Auroc => "AUROC",
            Metric::Auprc => "AUPRC",
        }
    }

    fn of(self, f: &FoldMetrics) -> f64 {
        match self {
            Metric::Auroc => f.auroc,
            Metric::Auprc => f.auprc,
        }
    }
}

/// One-tailed comparison of a cell against the preceding model's cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: ModelKind,
    pub p: f64,
    pub marker: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub model: ModelKind,
    pub window: u32,
    pub metric: Metric,
    /// Per-fold values in fold order.
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub comparison: Option<Comparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub folds: Vec<FoldMetrics>,
    pub cells: Vec<CellSummary>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record {
    Fold(FoldMetrics),
    Summary(CellSummary),
}

/// Aggregates fold metrics. Models are ordered CTS-RNN, Notes-HCR, MM-HCR and
/// each is tested against the previous one present for the same window.
pub fn build_report(folds: &[FoldMetrics], k: usize) -> Result<MetricsReport> {
    let mut grouped: BTreeMap<(u32, ModelKind), BTreeMap<usize, &FoldMetrics>> = BTreeMap::new();
    for f in folds {
        if grouped.entry((f.window, f.model)).or_default().insert(f.fold, f).is_some() {
            return Err(Error::IncompleteReport(format!("{} W={} fold {} reported twice", f.model, f.window, f.fold)));
        }
    }
    if grouped.is_empty() {
        return Err(Error::IncompleteReport("no fold metrics".into()));
    }
    for ((w, m), fs) in &grouped {
        let expected: BTreeSet<usize> = (0..k).collect();
        let have: BTreeSet<usize> = fs.keys().copied().collect();
        if have != expected {
            let missing: Vec<usize> = expected.difference(&have).copied().collect();
            return Err(Error::IncompleteReport(format!("{m} W={w}: expected folds 0..{k}, missing {missing:?}")));
        }
    }
    let mut cells = Vec::new();
    let windows: BTreeSet<u32> = grouped.keys().map(|(w, _)| *w).collect();
    for w in windows {
        let models: Vec<ModelKind> = grouped.keys().filter(|(gw, _)| *gw == w).map(|(_, m)| *m).collect();
        for metric in Metric::ALL {
            let mut prev: Option<(ModelKind, Vec<f64>)> = None;
            for m in &models {
                let values: Vec<f64> = grouped[&(w, *m)].values().map(|f| metric.of(f)).collect();
                let comparison = match &prev {
                    Some((base, base_values)) => {
                        let p = paired_ttest_onetailed(base_values, &values)?.p;
                        Some(Comparison { baseline: *base, p, marker: significance_marker(p).to_string() })
                    }
                    None => None,
                };
                cells.push(CellSummary {
                    model: *m,
                    window: w,
                    metric,
                    mean: mean(&values),
                    sd: sample_sd(&values),
                    values: values.clone(),
                    comparison,
                });
                prev = Some((*m, values));
            }
        }
    }
    let mut folds = folds.to_vec();
    folds.sort_by_key(|f| (f.model, f.window, f.fold));
    Ok(MetricsReport { k, folds, cells })
}

impl MetricsReport {
    pub fn cell(&self, model: ModelKind, window: u32, metric: Metric) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.model == model && c.window == window && c.metric == metric)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for f in &self.folds {
            serde_json::to_writer(&mut w, &Record::Fold(f.clone()))?;
            w.write_all(b"\n")?;
        }
        for c in &self.cells {
            serde_json::to_writer(&mut w, &Record::Summary(c.clone()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let mut folds = Vec::new();
        let mut cells = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<Record>(line)? {
                Record::Fold(f) => folds.push(f),
                Record::Summary(c) => cells.push(c),
            }
        }
        let k = cells.first().map_or(0, |c| c.values.len());
        Ok(MetricsReport { k, folds, cells })
    }

    /// Aligned text: per-fold rows, then mean ± sd with significance markers
    /// (rows are models, columns are windows for each metric).
    pub fn render_table(&self) -> String {
        let windows: BTreeSet<u32> = self.cells.iter().map(|c| c.window).collect();
        let models: BTreeSet<ModelKind> = self.cells.iter().map(|c| c.model).collect();
        let mut out = String::new();
        let name_w = 12;

        let _ = writeln!(out, "Per-fold metrics");
        let _ = writeln!(out, "{:<name_w$} {:>6} {:>5} {:>8} {:>8}", "model", "W", "fold", "AUROC", "AUPRC");
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{:<name_w$} {:>6} {:>5} {:>8.4} {:>8.4}",
                f.model.label(),
                f.window,
                f.fold,
                f.auroc,
                f.auprc
            );
        }

        let _ = writeln!(out, "\nMean \u{b1} sd over {} folds", self.k);
        let col_w = 19;
        let mut header = format!("{:<name_w$}", "");
        for metric in Metric::ALL {
            for w in &windows {
                let _ = write!(header, " {:>col_w$}", format!("{} W={w}", metric.label()));
            }
        }
        let _ = writeln!(out, "{}", header.trim_end());
        for m in &models {
            let mut row = format!("{:<name_w$}", m.label());
            for metric in Metric::ALL {
                for w in &windows {
                    let cell = match self.cell(*m, *w, metric) {
                        Some(c) => {
                            let mark = c.comparison.as_ref().map_or("", |x| x.marker.as_str());
                            format!("{:.4}{mark:<2} \u{b1} {:.4}", c.mean, c.sd)
                        }
                        None => "-".to_string(),
                    };
                    let _ = write!(row, " {cell:>col_w$}");
                }
            }
            let _ = writeln!(out, "{}", row.trim_end());
        }
        let _ = writeln!(
            out,
            "\nMarkers compare each model with the row above it (one-tailed paired t-test): \
             ** p < 0.01, * p < 0.05, \u{2020} not significant."
        );
        out
    }
}
