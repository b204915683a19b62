//! Scoring of Long/Short predictions: confusion counts, accuracy,
//! support-weighted F1, and the Matthews correlation coefficient.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Label, Prediction};
use crate::textualize::InstructionExample;
use crate::tinylm::generate::{predict_example, DEFAULT_MAX_NEW_TOKENS};
use crate::tinylm::{TinyLm, Tokenizer};

/// Counts with `Long` as the positive class. Parse failures are also tallied
/// as wrong answers in `fp`/`fn_`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub parse_failures: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Empty),
            n => Ok(n as f64),
        }
    }
}

pub fn confusion(preds: &[Prediction], golds: &[Label]) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (p, g) in preds.iter().zip(golds) {
        let guess = match p {
            Prediction::Label(l) => *l,
            Prediction::ParseFailure => {
                cm.parse_failures += 1;
                g.flip()
            }
        };
        match (guess, g) {
            (Label::Long, Label::Long) => cm.tp += 1,
            (Label::Long, Label::Short) => cm.fp += 1,
            (Label::Short, Label::Long) => cm.fn_ += 1,
            (Label::Short, Label::Short) => cm.tn += 1,
        }
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok((cm.tp + cm.tn) as f64 / cm.nonempty()?)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ClassMetrics {
    fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    }
}

pub fn class_metrics(cm: &ConfusionMatrix, class: Label) -> ClassMetrics {
    match class {
        Label::Long => ClassMetrics::from_counts(cm.tp, cm.fp, cm.fn_),
        Label::Short => ClassMetrics::from_counts(cm.tn, cm.fn_, cm.fp),
    }
}

pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    Ok([Label::Long, Label::Short]
        .iter()
        .map(|&c| {
            let m = class_metrics(cm, c);
            m.support as f64 / n * m.f1
        })
        .sum())
}

/// Zero whenever any marginal is empty.
pub fn mcc(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty()?;
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / den.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub mcc: f64,
    pub parse_failure_rate: f64,
    pub long: ClassMetrics,
    pub short: ClassMetrics,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let n = cm.total();
        Ok(Self {
            n,
            accuracy: accuracy(&cm)?,
            weighted_f1: weighted_f1(&cm)?,
            mcc: mcc(&cm)?,
            parse_failure_rate: ratio(cm.parse_failures, n),
            long: class_metrics(&cm, Label::Long),
            short: class_metrics(&cm, Label::Short),
            confusion: cm,
        })
    }

    pub fn from_predictions(records: &[PredictionRecord]) -> Result<Self> {
        let preds: Vec<Prediction> = records.iter().map(|r| r.prediction).collect();
        let golds: Vec<Label> = records.iter().map(|r| r.gold).collect();
        Self::from_confusion(confusion(&preds, &golds)?)
    }
}

/// One scored example, as stored next to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub ticker: String,
    pub earnings_date: NaiveDate,
    pub gold: Label,
    pub prediction: Prediction,
    pub raw_output: String,
}

/// Anything that answers an instruction example with free text.
pub trait Predictor: Sync {
    fn answer(&self, ex: &InstructionExample) -> Result<String>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a TinyLm,
    pub tokenizer: &'a Tokenizer,
    pub max_new_tokens: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn answer(&self, ex: &InstructionExample) -> Result<String> {
        predict_example(self.model, self.tokenizer, ex, self.max_new_tokens).map(|(text, _)| text)
    }
}

pub fn evaluate_with(
    predictor: &impl Predictor,
    dataset: &[InstructionExample],
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let records: Vec<PredictionRecord> = dataset
        .par_iter()
        .map(|ex| {
            let raw_output = predictor.answer(ex)?;
            Ok(PredictionRecord {
                ticker: ex.meta.ticker.clone(),
                earnings_date: ex.meta.earnings_date,
                gold: ex.output,
                prediction: crate::tinylm::map_output_to_label(&raw_output),
                raw_output,
            })
        })
        .collect::<Result<_>>()?;
    Ok((EvalReport::from_predictions(&records)?, records))
}

pub fn evaluate(
    model: &TinyLm,
    dataset: &[InstructionExample],
    tk: &Tokenizer,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    evaluate_with(
        &ModelPredictor {
            model,
            tokenizer: tk,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        },
        dataset,
    )
}

// ---------------------------------------------------------------------------
// Comparison table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub mcc: f64,
}

impl From<&EvalReport> for Scores {
    fn from(r: &EvalReport) -> Self {
        Scores {
            accuracy: r.accuracy,
            weighted_f1: r.weighted_f1,
            mcc: r.mcc,
        }
    }
}

impl Scores {
    fn get(&self, i: usize) -> f64 {
        [self.accuracy, self.weighted_f1, self.mcc][i]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariantReports {
    pub base: Option<EvalReport>,
    pub full: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub base: Option<Scores>,
    pub full: Option<Scores>,
}

impl TableRow {
    fn cell(&self, col: usize) -> Option<f64> {
        let side = if col < 3 { self.base } else { self.full };
        side.map(|s| s.get(col % 3))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
}

const COLUMNS: [&str; 6] = [
    "base_accuracy",
    "base_weighted_f1",
    "base_mcc",
    "full_accuracy",
    "full_weighted_f1",
    "full_mcc",
];

/// Rows are ordered by model name (map order).
pub fn compare_table(reports: &BTreeMap<String, VariantReports>) -> ComparisonTable {
    ComparisonTable {
        rows: reports
            .iter()
            .map(|(name, r)| TableRow {
                model: name.clone(),
                base: r.base.as_ref().map(Scores::from),
                full: r.full.as_ref().map(Scores::from),
            })
            .collect(),
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

impl ComparisonTable {
    /// Row index holding the best (rounded) value of each column; ties mark
    /// every tied row.
    pub fn best(&self, col: usize) -> Vec<usize> {
        let vals: Vec<Option<f64>> = self.rows.iter().map(|r| r.cell(col).map(round3)).collect();
        let Some(max) = vals.iter().flatten().copied().reduce(f64::max) else {
            return Vec::new();
        };
        vals.iter()
            .enumerate()
            .filter(|(_, v)| **v == Some(max))
            .map(|(i, _)| i)
            .collect()
    }

    /// Aligned plain text; the best value per column carries a `*`.
    pub fn to_text(&self) -> String {
        let best: Vec<Vec<usize>> = (0..6).map(|c| self.best(c)).collect();
        let name_w = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:^32}  {:^32}",
            "",
            "Base",
            "Full"
        );
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>10} {:>10} {:>10}  {:>10} {:>10} {:>10}",
            "Model", "Accuracy", "WeightedF1", "MCC", "Accuracy", "WeightedF1", "MCC"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:<name_w$} ", r.model);
            for c in 0..6 {
                if c == 3 {
                    out.push(' ');
                }
                let cell = match r.cell(c) {
                    None => "-".to_string(),
                    Some(v) if best[c].contains(&i) => format!("{v:.3}*"),
                    Some(v) => format!("{v:.3} "),
                };
                let _ = write!(out, " {cell:>10}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("model,{}\n", COLUMNS.join(","));
        for r in &self.rows {
            out.push_str(&r.model);
            for c in 0..6 {
                out.push(',');
                if let Some(v) = r.cell(c) {
                    let _ = write!(out, "{v:.3}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |i: usize, m: &str| Error::Schema {
            index: i,
            message: m.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(0, "missing header"))?;
        if header != format!("model,{}", COLUMNS.join(",")) {
            return Err(bad(0, "unexpected header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 7 {
                return Err(bad(i + 1, "expected 7 cells"));
            }
            let nums: Vec<Option<f64>> = cells[1..]
                .iter()
                .map(|c| if c.is_empty() { Ok(None) } else { c.parse().map(Some) })
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(i + 1, "bad number"))?;
            let side = |k: usize| -> Option<Scores> {
                Some(Scores {
                    accuracy: nums[k]?,
                    weighted_f1: nums[k + 1]?,
                    mcc: nums[k + 2]?,
                })
            };
            rows.push(TableRow {
                model: cells[0].to_string(),
                base: side(0),
                full: side(3),
            });
        }
        Ok(Self { rows })
    }
}
