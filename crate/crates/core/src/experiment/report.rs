use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analytics::VariabilityRow;
use crate::bleu::BleuReport;
use crate::error::{Error, Result};
use crate::pruning::PruningSchedule;

/// Fields that legitimately differ between otherwise identical runs.
pub const TIMING_FIELDS: [&str; 2] = ["timestamp", "elapsed_secs"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestSetKind {
    Global,
    Random,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketEval {
    pub label: String,
    pub sentences: usize,
    pub mean_typicality: f64,
    pub avg_src_len: f64,
    pub bleu: f64,
}

/// Scores of one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSetEval {
    pub kind: TestSetKind,
    pub sentences: usize,
    pub bleu: BleuReport,
    /// Word-level, against the training source side.
    pub oov_rate: f64,
    pub avg_src_len: f64,
    pub mean_typicality: f64,
    /// Empty when the set has fewer sentences than buckets.
    pub buckets: Vec<BucketEval>,
    pub bootstrap: Vec<VariabilityRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub steps: u64,
    pub final_loss: f64,
    pub total_params: usize,
    pub nonzero_params: usize,
    pub prunable_params: usize,
    pub prunable_nonzero: usize,
    pub prunable_nonzero_fraction: f64,
    pub schedule: Option<PruningSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// One line of the JSON-lines report: a model on a test set, or a failed
/// sparsity level (`testset` is then `"-"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_hash: String,
    pub experiment: String,
    pub regime: String,
    pub sparsity: f64,
    pub testset: String,
    pub status: Status,
    pub model: Option<ModelStats>,
    pub eval: Option<TestSetEval>,
    pub error: Option<Failure>,
    /// Unix seconds when the row was written.
    pub timestamp: u64,
    /// Training plus evaluation time of the model.
    pub elapsed_secs: f64,
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_rows(rows: &[ReportRow], mut out: impl Write) -> Result<()> {
    for r in rows {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| Error::io("<report>", e))?;
    }
    Ok(())
}

/// The report with timing fields removed, for run-to-run comparison.
pub fn strip_timing(report_text: &str) -> Result<Vec<Value>> {
    report_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: Value = serde_json::from_str(l)?;
            if let Some(obj) = v.as_object_mut() {
                for f in TIMING_FIELDS {
                    obj.remove(f);
                }
            }
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Absolute,
    Relative,
    Ood,
    Bootstrap,
    Typicality,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "absolute" => PlotKind::Absolute,
            "relative" => PlotKind::Relative,
            "ood" => PlotKind::Ood,
            "bootstrap" => PlotKind::Bootstrap,
            "typicality" => PlotKind::Typicality,
            _ => return Err(Error::Invalid(format!("unknown plot kind {s:?}"))),
        })
    }
}

#[derive(Serialize)]
struct MetricRow<'a> {
    corpus: &'a str,
    sparsity: f64,
    metric: &'a str,
    value: f64,
}

#[derive(Serialize)]
struct BootstrapRow<'a> {
    corpus: &'a str,
    sparsity: f64,
    size: usize,
    repeats: usize,
    mean_bleu: f64,
    std_bleu: f64,
}

#[derive(Serialize)]
struct TypicalityRow<'a> {
    corpus: &'a str,
    sparsity: f64,
    bucket: &'a str,
    sentences: usize,
    mean_typicality: f64,
    avg_src_len: f64,
    bleu: f64,
}

fn evaluated(rows: &[ReportRow]) -> impl Iterator<Item = (&ReportRow, &TestSetEval)> {
    rows.iter().filter_map(|r| r.eval.as_ref().map(|e| (r, e)))
}

/// Tidy CSV for plotting. `relative` divides each BLEU by the dense BLEU of
/// the same test set and leaves out sets whose dense BLEU is zero or
/// missing.
pub fn emit_plot_data(rows: &[ReportRow], kind: PlotKind) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut n = 0usize;
    match kind {
        PlotKind::Absolute => {
            for (r, e) in evaluated(rows) {
                w.serialize(MetricRow {
                    corpus: &r.testset,
                    sparsity: r.sparsity,
                    metric: "bleu",
                    value: e.bleu.score,
                })?;
                n += 1;
            }
        }
        PlotKind::Relative => {
            for (r, e) in evaluated(rows) {
                let dense = evaluated(rows)
                    .find(|(d, _)| d.sparsity == 0.0 && d.testset == r.testset && d.regime == r.regime)
                    .map(|(_, de)| de.bleu.score);
                if let Some(base) = dense.filter(|&b| b > 0.0) {
                    w.serialize(MetricRow {
                        corpus: &r.testset,
                        sparsity: r.sparsity,
                        metric: "relative_bleu",
                        value: e.bleu.score / base,
                    })?;
                    n += 1;
                }
            }
        }
        PlotKind::Ood => {
            for (r, e) in evaluated(rows).filter(|(_, e)| e.kind == TestSetKind::Ood) {
                for (metric, value) in [("bleu", e.bleu.score), ("oov_rate", e.oov_rate), ("avg_src_len", e.avg_src_len)] {
                    w.serialize(MetricRow {
                        corpus: &r.testset,
                        sparsity: r.sparsity,
                        metric,
                        value,
                    })?;
                    n += 1;
                }
            }
        }
        PlotKind::Bootstrap => {
            for (r, e) in evaluated(rows) {
                for b in &e.bootstrap {
                    w.serialize(BootstrapRow {
                        corpus: &r.testset,
                        sparsity: r.sparsity,
                        size: b.size,
                        repeats: b.repeats,
                        mean_bleu: b.mean_bleu,
                        std_bleu: b.std_bleu,
                    })?;
                    n += 1;
                }
            }
        }
        PlotKind::Typicality => {
            for (r, e) in evaluated(rows) {
                for b in &e.buckets {
                    w.serialize(TypicalityRow {
                        corpus: &r.testset,
                        sparsity: r.sparsity,
                        bucket: &b.label,
                        sentences: b.sentences,
                        mean_typicality: b.mean_typicality,
                        avg_src_len: b.avg_src_len,
                        bleu: b.bleu,
                    })?;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Invalid(format!("report has no data for {kind:?} plots")));
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
