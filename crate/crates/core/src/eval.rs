//! Scoring: confusion matrices, macro and binary metrics, the REAL-vs-FAKE
//! collapse, JPEG robustness sweeps, generalization benches and report
//! files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, ClassLabel, DataError, Manifest};
use crate::fusion::{FusionError, FusionModel, Prediction};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("nothing to score")]
    Empty,
    #[error("confusion matrix has no counts")]
    EmptyMatrix,
    #[error("expected a {expected}x{expected} matrix, got {got}x{got}")]
    WrongShape { expected: usize, got: usize },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("bench {0} needs both REAL and fake records")]
    EmptyBench(String),
    #[error("unknown report format {0:?} (json, csv, markdown)")]
    BadFormat(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fusion(Box<FusionError>),
    #[error("report serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl From<FusionError> for EvalError {
    fn from(e: FusionError) -> Self {
        Self::Fusion(Box::new(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    /// Three classes, macro-averaged recall/precision/F1.
    Multiclass,
    /// Two classes, index 1 (FAKE, or the predominant class) positive.
    Binary,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Multiclass => "MULTICLASS",
            Mode::Binary => "BINARY",
        }
    }
}

/// Square count matrix; rows are true classes, columns predictions. For
/// three classes the index order is REAL, GAN, DM; for two it is
/// (negative, positive).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self, EvalError> {
        let k = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(EvalError::WrongShape {
                expected: k,
                got: r.len(),
            });
        }
        Ok(Self {
            k,
            counts: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    /// Tallies `(label, prediction)` index pairs.
    pub fn from_indices(k: usize, labels: &[usize], preds: &[usize]) -> Result<Self, EvalError> {
        if labels.len() != preds.len() {
            return Err(EvalError::LengthMismatch {
                preds: preds.len(),
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut cm = Self::zeros(k);
        for (&t, &p) in labels.iter().zip(preds) {
            cm.add(t, p);
        }
        Ok(cm)
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.k).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion_matrix(
    preds: &[ClassLabel],
    labels: &[ClassLabel],
) -> Result<ConfusionMatrix, EvalError> {
    let t: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let p: Vec<usize> = preds.iter().map(|l| l.index()).collect();
    ConfusionMatrix::from_indices(3, &t, &p)
}

/// Merges GAN and DM into FAKE: index 0 REAL, index 1 FAKE.
pub fn collapse_binary(cm: &ConfusionMatrix) -> Result<ConfusionMatrix, EvalError> {
    if cm.size() != 3 {
        return Err(EvalError::WrongShape {
            expected: 3,
            got: cm.size(),
        });
    }
    let fake = |i: usize| usize::from(i != ClassLabel::Real.index());
    let mut out = ConfusionMatrix::zeros(2);
    for i in 0..3 {
        for j in 0..3 {
            out.counts[fake(i) * 2 + fake(j)] += cm.get(i, j);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: String,
    pub mode: Mode,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub n: u64,
    /// Some class had an empty precision or recall denominator; its value
    /// was taken as 0.
    #[serde(default)]
    pub zero_division: bool,
}

impl MetricsReport {
    pub fn labeled(mut self, setting: impl Into<String>) -> Self {
        self.setting = setting.into();
        self
    }

    pub fn is_valid(&self) -> bool {
        [self.accuracy, self.recall, self.precision, self.f1]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

fn ratio(num: u64, den: u64, zero_div: &mut bool) -> f64 {
    if den == 0 {
        *zero_div = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p > 0.0 && r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Accuracy plus recall/precision/F1: macro-averaged one-vs-rest in
/// multiclass mode, positive class = index 1 in binary mode.
pub fn metrics_from_confusion(
    cm: &ConfusionMatrix,
    mode: Mode,
) -> Result<MetricsReport, EvalError> {
    let n = cm.total();
    if n == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut zero_division = false;
    let accuracy = cm.trace() as f64 / n as f64;
    let (recall, precision, f1) = match mode {
        Mode::Binary => {
            if cm.size() != 2 {
                return Err(EvalError::WrongShape {
                    expected: 2,
                    got: cm.size(),
                });
            }
            let tp = cm.get(1, 1);
            let r = ratio(tp, cm.row_sum(1), &mut zero_division);
            let p = ratio(tp, cm.col_sum(1), &mut zero_division);
            (r, p, f1_of(p, r))
        }
        Mode::Multiclass => {
            let k = cm.size() as f64;
            let (mut r, mut p, mut f) = (0.0, 0.0, 0.0);
            for c in 0..cm.size() {
                let tp = cm.get(c, c);
                let rc = ratio(tp, cm.row_sum(c), &mut zero_division);
                let pc = ratio(tp, cm.col_sum(c), &mut zero_division);
                r += rc;
                p += pc;
                f += f1_of(pc, rc);
            }
            (r / k, p / k, f / k)
        }
    };
    Ok(MetricsReport {
        setting: String::new(),
        mode,
        accuracy,
        recall,
        precision,
        f1,
        n,
        zero_division,
    })
}

/// Multiclass and collapsed-binary metrics for one prediction set.
pub fn score_predictions(
    preds: &[ClassLabel],
    labels: &[ClassLabel],
    setting: &str,
) -> Result<(MetricsReport, MetricsReport), EvalError> {
    let cm = confusion_matrix(preds, labels)?;
    let multi = metrics_from_confusion(&cm, Mode::Multiclass)?.labeled(setting);
    let binary = metrics_from_confusion(&collapse_binary(&cm)?, Mode::Binary)?.labeled(setting);
    Ok((multi, binary))
}

#[derive(Debug, Serialize)]
struct LogLine<'a> {
    path: &'a Path,
    label: ClassLabel,
    prediction: ClassLabel,
    probabilities: [f64; 3],
}

fn predict_manifest(fm: &FusionModel, test: &Manifest) -> Result<Vec<Prediction>, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let images = data::load_tensors(test, fm.input_size())?;
    Ok(fm.predict_batch(&images)?)
}

/// Scores every record of `test`. With `log` set, one JSONL line per image
/// (path, label, prediction, probabilities) is written there.
pub fn evaluate_logged(
    fm: &FusionModel,
    test: &Manifest,
    setting: &str,
    log: Option<&Path>,
) -> Result<(MetricsReport, MetricsReport), EvalError> {
    let preds = predict_manifest(fm, test)?;
    if let Some(path) = log {
        let mut out = Vec::new();
        for (r, p) in test.iter().zip(&preds) {
            serde_json::to_writer(
                &mut out,
                &LogLine {
                    path: &r.path,
                    label: r.label,
                    prediction: p.label,
                    probabilities: p.probabilities,
                },
            )?;
            out.push(b'\n');
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&out)?;
    }
    let labels: Vec<ClassLabel> = test.iter().map(|r| r.label).collect();
    let predicted: Vec<ClassLabel> = preds.iter().map(|p| p.label).collect();
    score_predictions(&predicted, &labels, setting)
}

pub fn evaluate(
    fm: &FusionModel,
    test: &Manifest,
) -> Result<(MetricsReport, MetricsReport), EvalError> {
    evaluate_logged(fm, test, "raw", None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub setting: String,
    /// `None` for the uncompressed row.
    pub qf: Option<u8>,
    pub multiclass: MetricsReport,
    pub binary: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn to_report(&self) -> Report {
        let mut rows: Vec<MetricsReport> = self.rows.iter().map(|r| r.multiclass.clone()).collect();
        rows.extend(self.rows.iter().map(|r| r.binary.clone()));
        Report {
            title: "JPEG robustness".into(),
            rows,
        }
    }
}

/// Evaluates on `test` as stored, then on JPEG re-encodings at each quality
/// factor (written under `workdir`), highest QF first.
pub fn robustness_sweep(
    fm: &FusionModel,
    test: &Manifest,
    qf_list: &[i64],
    workdir: &Path,
) -> Result<RobustnessReport, EvalError> {
    if let Some(&bad) = qf_list.iter().find(|q| !(1..=100).contains(*q)) {
        return Err(DataError::BadQuality(bad).into());
    }
    let (multiclass, binary) = evaluate_logged(fm, test, "raw", None)?;
    let mut rows = vec![RobustnessRow {
        setting: "raw".into(),
        qf: None,
        multiclass,
        binary,
    }];
    if !qf_list.is_empty() {
        let corpora = data::jpeg_corpus(test, qf_list, workdir)?;
        for (&qf, m) in corpora.iter().rev() {
            let setting = format!("qf{qf}");
            let (multiclass, binary) = evaluate_logged(fm, m, &setting, None)?;
            rows.push(RobustnessRow {
                setting,
                qf: Some(qf),
                multiclass,
                binary,
            });
        }
    }
    Ok(RobustnessReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    /// One binary report per bench, in the order given.
    pub rows: Vec<MetricsReport>,
}

impl GeneralizationReport {
    pub fn accuracy_row(&self) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .map(|r| (r.setting.clone(), r.accuracy))
            .collect()
    }

    pub fn to_report(&self) -> Report {
        Report {
            title: "Generalization".into(),
            rows: self.rows.clone(),
        }
    }
}

/// Binary (REAL vs FAKE) scoring of each named bench.
pub fn generalization_eval(
    fm: &FusionModel,
    benches: &[(String, Manifest)],
) -> Result<GeneralizationReport, EvalError> {
    let mut rows = Vec::with_capacity(benches.len());
    for (name, m) in benches {
        let reals = m.count(ClassLabel::Real);
        if reals == 0 || reals == m.len() {
            return Err(EvalError::EmptyBench(name.clone()));
        }
        let (_, binary) = evaluate_logged(fm, m, name, None)?;
        rows.push(binary);
    }
    Ok(GeneralizationReport { rows })
}

/// A titled list of metric rows, the unit of report emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    pub rows: Vec<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(EvalError::BadFormat(s.into())),
        }
    }
}

pub const CSV_HEADER: &str = "setting,mode,accuracy,recall,precision,f1,n";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_markdown(report: &Report) -> String {
    let mut out = format!("# {}\n", report.title);
    for mode in [Mode::Multiclass, Mode::Binary] {
        let rows: Vec<&MetricsReport> = report.rows.iter().filter(|r| r.mode == mode).collect();
        if rows.is_empty() {
            continue;
        }
        let note = match mode {
            Mode::Multiclass => "recall, precision and F1 are macro-averaged over REAL, GAN, DM",
            Mode::Binary => "positive class: FAKE (GAN or DM)",
        };
        let _ = write!(out, "\n## {} ({note}), %\n\n| Metric |", mode.as_str());
        for r in &rows {
            let _ = write!(out, " {} |", r.setting);
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(rows.len()));
        out.push('\n');
        let metrics: [(&str, fn(&MetricsReport) -> f64); 4] = [
            ("Accuracy", |r| r.accuracy),
            ("Recall", |r| r.recall),
            ("Precision", |r| r.precision),
            ("F1", |r| r.f1),
        ];
        for (name, get) in metrics {
            let _ = write!(out, "| {name} |");
            for r in &rows {
                let _ = write!(out, " {:.2} |", 100.0 * get(r));
            }
            out.push('\n');
        }
        let _ = write!(out, "| n |");
        for r in &rows {
            let _ = write!(out, " {} |", r.n);
        }
        out.push('\n');
        if rows.iter().any(|r| r.zero_division) {
            out.push_str("\nSome per-class ratio had a zero denominator and was counted as 0.\n");
        }
    }
    out
}

pub fn render_report(report: &Report, format: ReportFormat) -> Result<String, EvalError> {
    Ok(match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = format!("{CSV_HEADER}\n");
            for r in &report.rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    csv_field(&r.setting),
                    r.mode.as_str(),
                    r.accuracy,
                    r.recall,
                    r.precision,
                    r.f1,
                    r.n
                );
            }
            s
        }
        ReportFormat::Markdown => render_markdown(report),
    })
}

pub fn emit_report(report: &Report, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    let text = render_report(report, format)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}
