//! Synthetic quarterly records whose label is a deterministic function of
//! the text: the next-day close is above the open exactly when revenue grew.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingestion::{AnalystGrade, IndexSymbol, RawQuarterRecord};

const FILLER: [&str; 6] = [
    "Thank you for joining the call today.",
    "We continued to invest in our core products.",
    "Demand trends were consistent with our expectations.",
    "We remain focused on disciplined execution.",
    "Our balance sheet remains strong.",
    "We will now take your questions.",
];

const DISTRACTORS: [&str; 3] = ["growthNetIncome", "growthOperatingExpenses", "growthTotalAssets"];

const GRADES: [&str; 5] = ["Buy", "Outperform", "Hold", "Neutral", "Sell"];

/// `n` records over `n / quarters_per_ticker` tickers, reproducible from `seed`.
pub fn synthetic_records(n: usize, quarters_per_ticker: usize, seed: u64) -> Vec<RawQuarterRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = quarters_per_ticker.max(1);
    let start = NaiveDate::from_ymd_opt(2021, 2, 1).unwrap();
    (0..n)
        .map(|i| {
            let ticker = format!("SYN{:03}", i / q);
            let earnings_date = start + chrono::Duration::days(91 * (i % q) as i64 + rng.random_range(0..20));
            let grew = rng.random_bool(0.5);
            let revenue = rng.random_range(0.01..0.30) * if grew { 1.0 } else { -1.0 };
            let mut metric_growths: std::collections::BTreeMap<String, f64> =
                [("growthRevenue".to_string(), revenue)].into_iter().collect();
            let distractor = DISTRACTORS[rng.random_range(0..DISTRACTORS.len())];
            metric_growths.insert(distractor.to_string(), rng.random_range(-0.30..0.30));

            let index_moves = IndexSymbol::ALL
                .iter()
                .map(|&s| (s, rng.random_range(-4.0..4.0)))
                .collect();
            let analyst_grades = (0..rng.random_range(1..4))
                .map(|k| AnalystGrade {
                    date: earnings_date - chrono::Duration::days(rng.random_range(0..30)),
                    firm: format!("Firm{k}"),
                    grade: GRADES[rng.random_range(0..GRADES.len())].to_string(),
                })
                .collect();
            let estimate: f64 = rng.random_range(0.5..3.0);
            let actual = estimate * rng.random_range(0.85..1.15);
            let a = rng.random_range(0..FILLER.len());
            let b = (a + 1 + rng.random_range(0..FILLER.len() - 1)) % FILLER.len();
            let transcript = format!("{} {}", FILLER[a], FILLER[b]);

            let open: f64 = rng.random_range(50.0..150.0);
            let move_pct = rng.random_range(0.002..0.03);
            let close = if grew { open * (1.0 + move_pct) } else { open * (1.0 - move_pct) };
            RawQuarterRecord {
                ticker,
                earnings_date,
                index_moves,
                analyst_grades,
                eps_actual: Some((actual * 100.0).round() / 100.0),
                eps_estimate: Some((estimate * 100.0).round() / 100.0),
                metric_growths,
                transcript,
                next_day_open: Some((open * 100.0).round() / 100.0),
                next_day_close: Some((close * 100.0).round() / 100.0),
            }
        })
        .collect()
}
