//! Quarterly company records: fixture loading, completeness validation, and a
//! rate-limited client for a remote financial-data provider.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Analyst grades older than this many days before the earnings date are
/// kept in the record but not used for text.
pub const GRADE_WINDOW_DAYS: i64 = 30;

pub const API_KEY_ENV: &str = "FIN_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IndexSymbol {
    #[serde(rename = "SPY")]
    Spy,
    #[serde(rename = "QQQ")]
    Qqq,
    #[serde(rename = "DOW")]
    Dow,
    /// The company's own stock.
    #[serde(rename = "SELF")]
    SelfTicker,
}

impl IndexSymbol {
    pub const ALL: [IndexSymbol; 4] = [IndexSymbol::Spy, IndexSymbol::Qqq, IndexSymbol::Dow, IndexSymbol::SelfTicker];

    pub fn as_str(self) -> &'static str {
        match self {
            IndexSymbol::Spy => "SPY",
            IndexSymbol::Qqq => "QQQ",
            IndexSymbol::Dow => "DOW",
            IndexSymbol::SelfTicker => "SELF",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(alias = "base")]
    Base,
    #[serde(alias = "full")]
    Full,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Some(Variant::Base),
            "full" => Some(Variant::Full),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "Base",
            Variant::Full => "Full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalystGrade {
    pub date: NaiveDate,
    pub firm: String,
    pub grade: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawQuarterRecord {
    pub ticker: String,
    pub earnings_date: NaiveDate,
    /// Weekly percent change per symbol.
    pub index_moves: BTreeMap<IndexSymbol, f64>,
    pub analyst_grades: Vec<AnalystGrade>,
    pub eps_actual: Option<f64>,
    pub eps_estimate: Option<f64>,
    /// Year-over-year growth ratios keyed by provider field name.
    pub metric_growths: BTreeMap<String, f64>,
    pub transcript: String,
    pub next_day_open: Option<f64>,
    pub next_day_close: Option<f64>,
}

impl RawQuarterRecord {
    /// Grades dated within the window ending at the earnings date.
    pub fn grades_in_window(&self) -> impl Iterator<Item = &AnalystGrade> {
        let start = self.earnings_date - chrono::Duration::days(GRADE_WINDOW_DAYS);
        let end = self.earnings_date;
        self.analyst_grades
            .iter()
            .filter(move |g| g.date >= start && g.date <= end)
    }

    fn check_invariants(&self) -> std::result::Result<(), String> {
        if let Some(g) = self.analyst_grades.iter().find(|g| g.date > self.earnings_date) {
            return Err(format!("grade dated {} after earnings date {}", g.date, self.earnings_date));
        }
        for (name, p) in [("next_day_open", self.next_day_open), ("next_day_close", self.next_day_close)] {
            if let Some(p) = p {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(format!("{name} must be positive, got {p}"));
                }
            }
        }
        Ok(())
    }
}

/// A record whose fields required by `variant` are known to be present.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedQuarterRecord {
    record: RawQuarterRecord,
    variant: Variant,
    next_day_open: f64,
    next_day_close: f64,
}

impl ValidatedQuarterRecord {
    pub fn record(&self) -> &RawQuarterRecord {
        &self.record
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn next_day_prices(&self) -> (f64, f64) {
        (self.next_day_open, self.next_day_close)
    }

    /// `(actual, estimate)`; always present for `Full`.
    pub fn eps(&self) -> Option<(f64, f64)> {
        self.record.eps_actual.zip(self.record.eps_estimate)
    }

    pub fn into_inner(self) -> RawQuarterRecord {
        self.record
    }
}

pub fn validate_record(rec: RawQuarterRecord, variant: Variant) -> Result<ValidatedQuarterRecord> {
    let mut missing = Vec::new();
    if rec.metric_growths.is_empty() {
        missing.push("metric_growths");
    }
    if rec.transcript.trim().is_empty() {
        missing.push("transcript");
    }
    if rec.next_day_open.is_none() {
        missing.push("next_day_open");
    }
    if rec.next_day_close.is_none() {
        missing.push("next_day_close");
    }
    if variant == Variant::Full {
        for s in IndexSymbol::ALL {
            if !rec.index_moves.contains_key(&s) {
                missing.push(match s {
                    IndexSymbol::Spy => "index_moves.SPY",
                    IndexSymbol::Qqq => "index_moves.QQQ",
                    IndexSymbol::Dow => "index_moves.DOW",
                    IndexSymbol::SelfTicker => "index_moves.SELF",
                });
            }
        }
        if rec.grades_in_window().next().is_none() {
            missing.push("analyst_grades");
        }
        if rec.eps_actual.is_none() {
            missing.push("eps_actual");
        }
        if rec.eps_estimate.is_none() {
            missing.push("eps_estimate");
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingData {
            fields: missing.into_iter().map(String::from).collect(),
        });
    }
    Ok(ValidatedQuarterRecord {
        next_day_open: rec.next_day_open.unwrap(),
        next_day_close: rec.next_day_close.unwrap(),
        record: rec,
        variant,
    })
}

const FIXTURE_KEYS: [&str; 10] = [
    "ticker",
    "earnings_date",
    "index_moves",
    "analyst_grades",
    "eps_actual",
    "eps_estimate",
    "metric_growths",
    "transcript",
    "next_day_open",
    "next_day_close",
];

/// Parse a fixture document (a JSON array of records). Every key must be
/// present; nullable ones may be `null`.
pub fn parse_fixture_set(text: &str) -> Result<Vec<RawQuarterRecord>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Schema {
        index: 0,
        message: format!("not valid JSON: {e}"),
    })?;
    let entries = doc.as_array().ok_or_else(|| Error::Schema {
        index: 0,
        message: "top level must be an array".into(),
    })?;
    entries
        .iter()
        .enumerate()
        .map(|(index, entry)| {
            let obj = entry.as_object().ok_or_else(|| Error::Schema {
                index,
                message: "entry is not an object".into(),
            })?;
            if let Some(key) = FIXTURE_KEYS.iter().find(|k| !obj.contains_key(**k)) {
                return Err(Error::Schema {
                    index,
                    message: format!("missing field `{key}`"),
                });
            }
            let rec: RawQuarterRecord = serde_json::from_value(entry.clone()).map_err(|e| Error::Schema {
                index,
                message: e.to_string(),
            })?;
            rec.check_invariants().map_err(|message| Error::Schema { index, message })?;
            Ok(rec)
        })
        .collect()
}

pub fn load_fixture_set(path: impl AsRef<Path>) -> Result<Vec<RawQuarterRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fixture_set(&text)
}

pub fn write_fixture_set(path: impl AsRef<Path>, records: &[RawQuarterRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(records)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Remote provider
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct ProviderConfig {
    pub base_url: String,
    api_key: String,
    /// Requests per second.
    pub rate_limit: f64,
    pub timeout: Duration,
    /// Provider symbols used for the market-move series.
    pub index_tickers: BTreeMap<IndexSymbol, String>,
}

impl fmt::Debug for ProviderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &"<redacted>")
            .field("rate_limit", &self.rate_limit)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ProviderConfig {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, rate_limit: f64, timeout: Duration) -> Result<Self> {
        let api_key = api_key.into();
        if api_key.is_empty() {
            return Err(Error::Config("provider api key is empty".into()));
        }
        if !(rate_limit > 0.0) {
            return Err(Error::Config("rate_limit must be positive".into()));
        }
        if timeout.is_zero() {
            return Err(Error::Config("timeout must be positive".into()));
        }
        let index_tickers = [
            (IndexSymbol::Spy, "SPY"),
            (IndexSymbol::Qqq, "QQQ"),
            (IndexSymbol::Dow, "DIA"),
        ]
        .into_iter()
        .map(|(s, t)| (s, t.to_string()))
        .collect();
        Ok(Self {
            base_url: base_url.into(),
            api_key,
            rate_limit,
            timeout,
            index_tickers,
        })
    }

    /// Reads the key from `FIN_API_KEY`.
    pub fn from_env(base_url: impl Into<String>, rate_limit: f64, timeout: Duration) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Config(format!("{API_KEY_ENV} is not set")))?;
        Self::new(base_url, key, rate_limit, timeout)
    }

    pub fn api_key(&self) -> &str {
        &self.api_key
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
    #[serde(default)]
    pub retry_after_secs: Option<u64>,
}

/// Issues GET requests against the provider.
pub trait Transport: Send + Sync {
    fn get(&self, path: &str, query: &[(&str, String)]) -> Result<HttpResponse>;
}

pub struct HttpTransport {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(cfg: &ProviderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: cfg.base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }
}

impl Transport for HttpTransport {
    fn get(&self, path: &str, query: &[(&str, String)]) -> Result<HttpResponse> {
        let url = format!("{}/{}", self.base_url, path.trim_start_matches('/'));
        let mut req = self.agent.get(&url);
        for (k, v) in query {
            req = req.query(*k, v);
        }
        // errors here never include the query string, so the key stays out of logs
        let mut resp = req.call().map_err(|e| Error::Network(format!("GET {path}: {e}")))?;
        let status = resp.status().as_u16();
        let retry_after_secs = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse().ok());
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Network(format!("reading body of {path}: {e}")))?;
        Ok(HttpResponse {
            status,
            body,
            retry_after_secs,
        })
    }
}

/// One recorded request/response pair. `path` of `"*"` matches any request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordedExchange {
    pub path: String,
    #[serde(default)]
    pub query: BTreeMap<String, String>,
    pub status: u16,
    pub body: Value,
}

/// Serves recorded provider responses offline. Unmatched requests get an
/// empty JSON array, which is what the provider returns for unknown data.
pub struct ReplayTransport {
    exchanges: Vec<RecordedExchange>,
}

impl ReplayTransport {
    pub fn new(exchanges: Vec<RecordedExchange>) -> Self {
        Self { exchanges }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(serde_json::from_str(&text)?))
    }
}

impl Transport for ReplayTransport {
    fn get(&self, path: &str, query: &[(&str, String)]) -> Result<HttpResponse> {
        let hit = self.exchanges.iter().find(|x| {
            x.path == "*"
                || (x.path == path
                    && x.query
                        .iter()
                        .all(|(k, v)| query.iter().any(|(qk, qv)| qk == k && qv == v)))
        });
        Ok(match hit {
            Some(x) => HttpResponse {
                status: x.status,
                body: x.body.to_string(),
                retry_after_secs: None,
            },
            None => HttpResponse {
                status: 200,
                body: "[]".into(),
                retry_after_secs: None,
            },
        })
    }
}

/// Spaces requests at least `1 / rate` seconds apart across all threads.
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(requests_per_sec: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / requests_per_sec),
            next_slot: Mutex::new(Instant::now()),
        }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut slot = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let start = (*slot).max(now);
            *slot = start + self.interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

pub struct ProviderClient<T: Transport> {
    cfg: ProviderConfig,
    transport: T,
    limiter: RateLimiter,
}

#[derive(Deserialize)]
struct PriceBar {
    date: NaiveDate,
    open: Option<f64>,
    close: Option<f64>,
}

#[derive(Deserialize)]
struct PriceHistory {
    #[serde(default)]
    historical: Vec<PriceBar>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct GradeRow {
    date: NaiveDate,
    grading_company: String,
    new_grade: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct SurpriseRow {
    date: NaiveDate,
    actual_earning_result: Option<f64>,
    estimated_earning: Option<f64>,
}

#[derive(Deserialize)]
struct TranscriptRow {
    date: String,
    content: String,
}

const GROWTH_ENDPOINTS: [&str; 3] = [
    "income-statement-growth",
    "balance-sheet-statement-growth",
    "cash-flow-statement-growth",
];

impl ProviderClient<HttpTransport> {
    pub fn http(cfg: ProviderConfig) -> Self {
        let transport = HttpTransport::new(&cfg);
        Self::new(cfg, transport)
    }
}

impl<T: Transport> ProviderClient<T> {
    pub fn new(cfg: ProviderConfig, transport: T) -> Self {
        let limiter = RateLimiter::new(cfg.rate_limit);
        Self {
            cfg,
            transport,
            limiter,
        }
    }

    fn get_json(&self, path: &str, mut query: Vec<(&str, String)>) -> Result<Value> {
        query.push(("apikey", self.cfg.api_key.clone()));
        self.limiter.acquire();
        let resp = self.transport.get(path, &query)?;
        match resp.status {
            200..=299 => {}
            429 => {
                return Err(Error::RateLimited {
                    retry_after_ms: resp.retry_after_secs.unwrap_or(1) * 1000,
                })
            }
            s => {
                let detail: String = resp.body.chars().take(200).collect();
                return Err(Error::Provider(format!("GET {path} returned {s}: {detail}")));
            }
        }
        let value: Value = serde_json::from_str(&resp.body)
            .map_err(|e| Error::Provider(format!("GET {path}: malformed JSON: {e}")))?;
        // the provider reports some failures, e.g. a bad key, inside a 200 body
        if let Some(msg) = value.get("Error Message").and_then(Value::as_str) {
            return Err(Error::Provider(format!("GET {path}: {msg}")));
        }
        Ok(value)
    }

    fn prices(&self, symbol: &str, date: NaiveDate) -> Result<Vec<PriceBar>> {
        let v = self.get_json(
            &format!("api/v3/historical-price-full/{symbol}"),
            vec![
                ("from", (date - chrono::Duration::days(14)).to_string()),
                ("to", (date + chrono::Duration::days(7)).to_string()),
            ],
        )?;
        if v.as_array().is_some_and(|a| a.is_empty()) || v.as_object().is_some_and(|o| o.is_empty()) {
            return Ok(Vec::new());
        }
        let mut bars = serde_json::from_value::<PriceHistory>(v)
            .map_err(|e| Error::Provider(format!("price history for {symbol}: {e}")))?
            .historical;
        bars.sort_by_key(|b| b.date);
        Ok(bars)
    }

    /// Assemble one record. Fields the provider does not supply are left
    /// empty; completeness is checked by [`validate_record`].
    pub fn fetch_company_quarter(&self, ticker: &str, earnings_date: NaiveDate) -> Result<RawQuarterRecord> {
        let mut empty = Vec::new();

        let own = self.prices(ticker, earnings_date)?;
        if own.is_empty() {
            empty.push("historical-price-full");
        }
        let mut index_moves = BTreeMap::new();
        if let Some(m) = weekly_move(&own, earnings_date) {
            index_moves.insert(IndexSymbol::SelfTicker, m);
        }
        for (sym, provider_sym) in &self.cfg.index_tickers {
            if let Some(m) = weekly_move(&self.prices(provider_sym, earnings_date)?, earnings_date) {
                index_moves.insert(*sym, m);
            }
        }
        let next_day = own.iter().find(|b| b.date > earnings_date);

        let grades_v = self.get_json(&format!("api/v3/grade/{ticker}"), vec![("limit", "500".into())])?;
        let grades: Vec<GradeRow> = serde_json::from_value(grades_v)
            .map_err(|e| Error::Provider(format!("grades for {ticker}: {e}")))?;
        if grades.is_empty() {
            empty.push("grade");
        }
        let analyst_grades = grades
            .into_iter()
            .filter(|g| g.date <= earnings_date)
            .map(|g| AnalystGrade {
                date: g.date,
                firm: g.grading_company,
                grade: g.new_grade,
            })
            .collect();

        let surprises_v = self.get_json(&format!("api/v3/earnings-surprises/{ticker}"), vec![])?;
        let surprises: Vec<SurpriseRow> = serde_json::from_value(surprises_v)
            .map_err(|e| Error::Provider(format!("earnings surprises for {ticker}: {e}")))?;
        if surprises.is_empty() {
            empty.push("earnings-surprises");
        }
        let surprise = surprises.iter().find(|s| s.date == earnings_date);

        let mut metric_growths = BTreeMap::new();
        for endpoint in GROWTH_ENDPOINTS {
            let v = self.get_json(
                &format!("api/v3/{endpoint}/{ticker}"),
                vec![("period", "quarter".into()), ("limit", "8".into())],
            )?;
            let rows = v.as_array().cloned().unwrap_or_default();
            if rows.is_empty() {
                empty.push(endpoint);
            }
            // latest fiscal period ending on or before the earnings date
            let latest = rows
                .iter()
                .filter_map(|r| {
                    let d = r.get("date")?.as_str()?.parse::<NaiveDate>().ok()?;
                    (d <= earnings_date).then_some((d, r))
                })
                .max_by_key(|(d, _)| *d);
            if let Some((_, row)) = latest {
                for (k, v) in row.as_object().into_iter().flatten() {
                    if let (true, Some(x)) = (k.starts_with("growth"), v.as_f64()) {
                        metric_growths.insert(k.clone(), x);
                    }
                }
            }
        }

        let transcripts_v = self.get_json(
            &format!("api/v4/batch_earning_call_transcript/{ticker}"),
            vec![("year", earnings_date.year().to_string())],
        )?;
        let transcripts: Vec<TranscriptRow> = serde_json::from_value(transcripts_v)
            .map_err(|e| Error::Provider(format!("transcripts for {ticker}: {e}")))?;
        if transcripts.is_empty() {
            empty.push("batch_earning_call_transcript");
        }
        let transcript = transcripts
            .into_iter()
            .filter_map(|t| {
                let day = t.date.get(..10)?.parse::<NaiveDate>().ok()?;
                let gap = (day - earnings_date).num_days().abs();
                (gap <= 3).then_some((gap, t.content))
            })
            .min_by_key(|(gap, _)| *gap)
            .map(|(_, c)| c)
            .unwrap_or_default();

        // prices, grades, surprises, transcripts, plus the growth statements
        if empty.len() == 4 + GROWTH_ENDPOINTS.len() {
            return Err(Error::Provider(format!(
                "no data for {ticker}: empty payload from {}",
                empty.join(", ")
            )));
        }
        Ok(RawQuarterRecord {
            ticker: ticker.to_string(),
            earnings_date,
            index_moves,
            analyst_grades,
            eps_actual: surprise.and_then(|s| s.actual_earning_result),
            eps_estimate: surprise.and_then(|s| s.estimated_earning),
            metric_growths,
            transcript,
            next_day_open: next_day.and_then(|b| b.open),
            next_day_close: next_day.and_then(|b| b.close),
        })
    }

    /// Fetch many quarters with at most `parallelism` requests in flight.
    /// Results are returned in input order.
    pub fn fetch_many(&self, jobs: &[(String, NaiveDate)], parallelism: usize) -> Vec<Result<RawQuarterRecord>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            jobs.par_iter()
                .map(|(t, d)| self.fetch_company_quarter(t, *d))
                .collect()
        })
    }
}

/// Percent change from the close five trading days before `date` to the
/// close of the last trading day before it.
fn weekly_move(bars: &[PriceBar], date: NaiveDate) -> Option<f64> {
    let before: Vec<f64> = bars
        .iter()
        .filter(|b| b.date < date)
        .filter_map(|b| b.close)
        .collect();
    if before.len() < 5 {
        return None;
    }
    let last = before[before.len() - 1];
    let first = before[before.len() - 5];
    (first > 0.0).then(|| 100.0 * (last / first - 1.0))
}
