//! Turns validated quarterly records into instruction-tuning examples.

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::{
    validate_record, AnalystGrade, IndexSymbol, RawQuarterRecord, ValidatedQuarterRecord, Variant, GRADE_WINDOW_DAYS,
};
use crate::label::Label;
use crate::tinylm::tokenizer::token_spans;

/// Task prompt placed in every example. Invented for this pipeline; bump
/// `INSTRUCTION_VERSION` whenever it changes.
pub const DEFAULT_INSTRUCTION: &str = "Based on the following information about the company's earnings report and market context, predict the next trading day's stock direction. Answer with exactly one word: Long or Short.";
pub const INSTRUCTION_VERSION: u32 = 1;

/// Round half away from zero to `places` decimals.
fn round_away(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

/// Magnitude formatted to `places` decimals, or `None` if it rounds to zero.
fn magnitude(x: f64, places: usize) -> Option<String> {
    let r = round_away(x, places as i32).abs();
    (r != 0.0).then(|| format!("{r:.places$}"))
}

pub fn textualize_market_move(symbol: IndexSymbol, ticker: &str, pct: f64) -> String {
    let name = match symbol {
        IndexSymbol::SelfTicker => ticker,
        s => s.as_str(),
    };
    match magnitude(pct, 1) {
        None => format!("In the past week, {name} remained unchanged"),
        Some(m) => {
            let dir = if pct > 0.0 { "up" } else { "down" };
            format!("In the past week, {name} went {dir} by {m}%")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradeCategory {
    Buy,
    Hold,
    Sell,
}

/// Maps raw brokerage grade strings (case-insensitive) to categories.
#[derive(Debug, Clone, PartialEq)]
pub struct GradeTable {
    map: HashMap<String, GradeCategory>,
}

impl Default for GradeTable {
    fn default() -> Self {
        let mut t = GradeTable { map: HashMap::new() };
        for g in ["Buy", "Outperform", "Overweight", "Strong Buy"] {
            t.insert(g, GradeCategory::Buy);
        }
        for g in ["Hold", "Neutral", "Market Perform", "Equal-Weight"] {
            t.insert(g, GradeCategory::Hold);
        }
        for g in ["Sell", "Underperform", "Underweight"] {
            t.insert(g, GradeCategory::Sell);
        }
        t
    }
}

impl GradeTable {
    pub fn insert(&mut self, grade: &str, cat: GradeCategory) {
        self.map.insert(grade.trim().to_lowercase(), cat);
    }

    pub fn get(&self, grade: &str) -> Option<GradeCategory> {
        self.map.get(&grade.trim().to_lowercase()).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradeSummary {
    pub modal_grade: GradeCategory,
    pub window_days: i64,
    pub n_grades: usize,
}

/// Most frequent category among grades in the 30 days up to the earnings
/// date. Ties go to whichever tied category was issued most recently.
pub fn aggregate_grades(grades: &[AnalystGrade], earnings_date: NaiveDate, table: &GradeTable) -> Result<GradeSummary> {
    let start = earnings_date - chrono::Duration::days(GRADE_WINDOW_DAYS);
    // per category: (count, latest date, latest position)
    let mut tally: HashMap<GradeCategory, (usize, NaiveDate, usize)> = HashMap::new();
    let mut n = 0;
    for (i, g) in grades.iter().enumerate() {
        if g.date < start || g.date > earnings_date {
            continue;
        }
        let Some(cat) = table.get(&g.grade) else {
            log::warn!("ignoring unmapped analyst grade {:?} from {}", g.grade, g.firm);
            continue;
        };
        n += 1;
        let e = tally.entry(cat).or_insert((0, g.date, i));
        e.0 += 1;
        if (g.date, i) > (e.1, e.2) {
            e.1 = g.date;
            e.2 = i;
        }
    }
    let modal = tally
        .into_iter()
        .max_by_key(|&(_, (count, date, pos))| (count, date, pos))
        .map(|(cat, _)| cat)
        .ok_or_else(|| Error::MissingData {
            fields: vec!["analyst_grades".into()],
        })?;
    Ok(GradeSummary {
        modal_grade: modal,
        window_days: GRADE_WINDOW_DAYS,
        n_grades: n,
    })
}

pub fn textualize_grade_summary(s: &GradeSummary) -> String {
    let verb = match s.modal_grade {
        GradeCategory::Buy => "buying",
        GradeCategory::Hold => "holding",
        GradeCategory::Sell => "selling",
    };
    format!(
        "In the past {} days, most grading companies suggest {verb} this stock",
        s.window_days
    )
}

/// Percent by which `actual` beat (positive) or missed the estimate.
pub fn eps_surprise(actual: f64, estimate: f64) -> Result<f64> {
    if estimate == 0.0 {
        return Err(Error::DegenerateEstimate);
    }
    Ok(100.0 * (actual - estimate) / estimate.abs())
}

pub fn textualize_eps_surprise(pct: f64) -> String {
    match magnitude(pct, 2) {
        None => "The company's reported earnings per share (EPS) were in line with the analysts' consensus estimates"
            .to_string(),
        Some(m) => {
            let dir = if pct > 0.0 { "higher" } else { "lower" };
            format!("The company's reported earnings per share (EPS) were {m}% {dir} than the analysts' consensus estimates")
        }
    }
}

/// Display names for provider growth fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricNames {
    map: HashMap<String, String>,
}

impl Default for MetricNames {
    fn default() -> Self {
        let pairs = [
            ("growthRevenue", "Revenue"),
            ("growthCostOfRevenue", "Cost of Revenue"),
            ("growthGrossProfit", "Gross Profit"),
            ("growthGrossProfitRatio", "Gross Profit Ratio"),
            ("growthResearchAndDevelopmentExpenses", "Research and Development Expenses"),
            ("growthSellingGeneralAndAdministrativeExpenses", "Selling, General and Administrative Expenses"),
            ("growthOperatingExpenses", "Operating Expenses"),
            ("growthInterestExpense", "Interest Expense"),
            ("growthEBITDA", "EBITDA"),
            ("growthOperatingIncome", "Operating Income"),
            ("growthIncomeBeforeTax", "Income Before Tax"),
            ("growthIncomeTaxExpense", "Income Tax Expense"),
            ("growthNetIncome", "Net Income"),
            ("growthEPS", "EPS"),
            ("growthEPSDiluted", "Diluted EPS"),
            ("growthWeightedAverageShsOut", "Weighted Average Shares Outstanding"),
            ("growthCashAndCashEquivalents", "Cash and Cash Equivalents"),
            ("growthInventory", "Inventory"),
            ("growthTotalCurrentAssets", "Total Current Assets"),
            ("growthTotalAssets", "Total Assets"),
            ("growthTotalCurrentLiabilities", "Total Current Liabilities"),
            ("growthTotalLiabilities", "Total Liabilities"),
            ("growthTotalDebt", "Total Debt"),
            ("growthNetDebt", "Net Debt"),
            ("growthTotalStockholdersEquity", "Total Stockholders' Equity"),
            ("growthOperatingCashFlow", "Operating Cash Flow"),
            ("growthNetCashProvidedByOperatingActivites", "Net Cash Provided by Operating Activities"),
            ("growthCapitalExpenditure", "Capital Expenditure"),
            ("growthFreeCashFlow", "Free Cash Flow"),
            ("growthDividendsPaid", "Dividends Paid"),
            ("growthCommonStockRepurchased", "Common Stock Repurchased"),
        ];
        MetricNames {
            map: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl MetricNames {
    pub fn insert(&mut self, key: impl Into<String>, name: impl Into<String>) {
        self.map.insert(key.into(), name.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }
}

pub fn textualize_metric_growth(metric_key: &str, ratio: f64, names: &MetricNames) -> Result<String> {
    let name = names
        .get(metric_key)
        .ok_or_else(|| Error::UnknownMetric(metric_key.to_string()))?;
    Ok(match magnitude(ratio * 100.0, 1) {
        None => format!("Compared to the same quarter last year, {name} remained unchanged"),
        Some(m) => {
            let dir = if ratio > 0.0 { "grew" } else { "declined" };
            format!("Compared to the same quarter last year, {name} {dir} by {m}%")
        }
    })
}

/// `Long` iff the next-day open is strictly below the close.
pub fn derive_label(next_day_open: f64, next_day_close: f64) -> Result<Label> {
    if !(next_day_open > 0.0) || !(next_day_close > 0.0) {
        return Err(Error::InvalidPrice {
            open: next_day_open,
            close: next_day_close,
        });
    }
    Ok(if next_day_open < next_day_close {
        Label::Long
    } else {
        Label::Short
    })
}

pub fn count_tokens(text: &str) -> usize {
    token_spans(text).len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub ticker: String,
    pub earnings_date: NaiveDate,
    pub variant: Variant,
    pub token_count: usize,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    pub input: String,
    pub output: Label,
    pub meta: ExampleMeta,
}

/// Knobs for text assembly.
#[derive(Debug, Clone)]
pub struct TextConfig {
    pub instruction: String,
    pub grades: GradeTable,
    pub metrics: MetricNames,
    /// Token budget for instruction + input + output; the transcript tail is
    /// cut to fit.
    pub max_tokens: Option<usize>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            grades: GradeTable::default(),
            metrics: MetricNames::default(),
            max_tokens: None,
        }
    }
}

fn lines(sentences: &[String]) -> String {
    sentences
        .iter()
        .map(|s| format!("{s}."))
        .collect::<Vec<_>>()
        .join("\n")
}

/// First `keep` tokens of `text`, cut at the end of the last kept token.
fn truncate_to_tokens(text: &str, keep: usize) -> &str {
    match token_spans(text).get(keep.wrapping_sub(1)) {
        _ if keep == 0 => "",
        Some(&(_, end)) => &text[..end],
        None => text,
    }
}

pub fn assemble_example(rec: &ValidatedQuarterRecord, cfg: &TextConfig) -> Result<InstructionExample> {
    let raw = rec.record();
    let variant = rec.variant();
    let mut sections = Vec::new();

    if variant == Variant::Full {
        let moves: Vec<String> = IndexSymbol::ALL
            .iter()
            .map(|s| {
                let pct = raw.index_moves.get(s).copied().ok_or_else(|| Error::MissingData {
                    fields: vec![format!("index_moves.{}", s.as_str())],
                })?;
                Ok(textualize_market_move(*s, &raw.ticker, pct))
            })
            .collect::<Result<_>>()?;
        sections.push(lines(&moves));

        let summary = aggregate_grades(&raw.analyst_grades, raw.earnings_date, &cfg.grades)?;
        sections.push(lines(&[textualize_grade_summary(&summary)]));

        let (actual, estimate) = rec.eps().ok_or_else(|| Error::MissingData {
            fields: vec!["eps_actual".into(), "eps_estimate".into()],
        })?;
        sections.push(lines(&[textualize_eps_surprise(eps_surprise(actual, estimate)?)]));
    }

    let growth: Vec<String> = raw
        .metric_growths
        .iter()
        .map(|(k, &v)| textualize_metric_growth(k, v, &cfg.metrics))
        .collect::<Result<_>>()?;
    sections.push(lines(&growth));

    let (open, close) = rec.next_day_prices();
    let output = derive_label(open, close)?;

    let fixed = count_tokens(&cfg.instruction) + count_tokens(output.as_str()) + sections.iter().map(|s| count_tokens(s)).sum::<usize>();
    let transcript = raw.transcript.trim();
    let transcript_tokens = count_tokens(transcript);
    let mut truncated = false;
    let transcript = match cfg.max_tokens {
        Some(max) if fixed + transcript_tokens > max => {
            truncated = true;
            truncate_to_tokens(transcript, max.saturating_sub(fixed))
        }
        _ => transcript,
    };
    if !transcript.is_empty() {
        sections.push(transcript.to_string());
    }
    let input = sections.join("\n\n");
    let token_count = count_tokens(&cfg.instruction) + count_tokens(&input) + count_tokens(output.as_str());

    Ok(InstructionExample {
        instruction: cfg.instruction.clone(),
        input,
        output,
        meta: ExampleMeta {
            ticker: raw.ticker.clone(),
            earnings_date: raw.earnings_date,
            variant,
            token_count,
            truncated,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_rows: usize,
    pub avg_tokens: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub label_counts: BTreeMap<Label, usize>,
}

impl DatasetStats {
    pub fn from_examples(examples: &[InstructionExample]) -> Self {
        let counts: Vec<usize> = examples.iter().map(|e| e.meta.token_count).collect();
        let mut label_counts = BTreeMap::new();
        for e in examples {
            *label_counts.entry(e.output).or_insert(0) += 1;
        }
        let n = counts.len();
        DatasetStats {
            n_rows: n,
            avg_tokens: if n == 0 {
                0.0
            } else {
                counts.iter().sum::<usize>() as f64 / n as f64
            },
            min_tokens: counts.iter().copied().min().unwrap_or(0),
            max_tokens: counts.iter().copied().max().unwrap_or(0),
            label_counts,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltDataset {
    pub examples: Vec<InstructionExample>,
    pub stats: DatasetStats,
    pub dropped: usize,
}

/// Validate, assemble, and summarize. Rows that fail validation or assembly
/// are logged and counted in `dropped`; output order follows input order.
pub fn build_dataset(records: &[RawQuarterRecord], variant: Variant, cfg: &TextConfig) -> BuiltDataset {
    let results: Vec<Result<InstructionExample>> = records
        .par_iter()
        .map(|r| validate_record(r.clone(), variant).and_then(|v| assemble_example(&v, cfg)))
        .collect();
    let mut examples = Vec::with_capacity(results.len());
    let mut dropped = 0;
    for (rec, res) in records.iter().zip(results) {
        match res {
            Ok(ex) => examples.push(ex),
            Err(e) => {
                match &e {
                    Error::UnknownMetric(_) => log::warn!("{} {}: {e}", rec.ticker, rec.earnings_date),
                    _ => log::info!("dropping {} {}: {e}", rec.ticker, rec.earnings_date),
                }
                dropped += 1;
            }
        }
    }
    let stats = DatasetStats::from_examples(&examples);
    BuiltDataset {
        examples,
        stats,
        dropped,
    }
}

/// One JSON object per line, `\n`-terminated.
pub fn to_jsonl(examples: &[InstructionExample]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<InstructionExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                index: i,
                message: e.to_string(),
            })
        })
        .collect()
}
