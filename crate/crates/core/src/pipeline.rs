//! The four pipeline stages. Each reads its inputs from, and writes its
//! artifacts to, the configured output directory:
//!
//! ```text
//! out/records.json
//! out/<variant>/{train,test}.jsonl, stats.json
//! out/<variant>/checkpoint.bin, loss.csv
//! out/<variant>/report.json, predictions.jsonl
//! out/table.txt, table.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{compare_table, evaluate, EvalReport, PredictionRecord, VariantReports};
use crate::ingestion::{
    load_fixture_set, write_fixture_set, ProviderClient, ProviderConfig, RawQuarterRecord, ReplayTransport, Variant,
};
use crate::synthetic::synthetic_records;
use crate::textualize::{build_dataset, from_jsonl, to_jsonl, DatasetStats, InstructionExample};
use crate::tinylm::checkpoint::{self, Checkpoint};
use crate::tinylm::train::SPECIAL_OVERHEAD;
use crate::tinylm::{build_vocab, train, ModelConfig, TinyLm};

pub const RECORDS_FILE: &str = "records.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const TABLE_TXT: &str = "table.txt";
pub const TABLE_CSV: &str = "table.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Assign whole tickers to train or test. Tickers are sorted, shuffled with
/// `seed`, and the first `round(train_frac * n)` go to train; when there are
/// at least two tickers each side gets one. Row order is preserved.
pub fn split_by_ticker(
    examples: Vec<InstructionExample>,
    train_frac: f64,
    seed: u64,
) -> (Vec<InstructionExample>, Vec<InstructionExample>) {
    let mut tickers: Vec<String> = examples
        .iter()
        .map(|e| e.meta.ticker.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    tickers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = tickers.len();
    let mut n_train = (train_frac * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let train_set: BTreeSet<&String> = tickers[..n_train.min(n)].iter().collect();
    examples.into_iter().partition(|e| train_set.contains(&e.meta.ticker))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub variant: Variant,
    pub n_train: usize,
    pub n_test: usize,
    pub dropped: usize,
    pub train: DatasetStats,
    pub test: DatasetStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub trainable_params: usize,
}

fn fetch_records(cfg: &PipelineConfig) -> Result<Vec<RawQuarterRecord>> {
    match &cfg.data {
        DataSource::Fixtures { path } => load_fixture_set(path),
        DataSource::Synthetic { n, quarters_per_ticker } => Ok(synthetic_records(*n, *quarters_per_ticker, cfg.seed)),
        DataSource::Provider {
            base_url,
            jobs,
            rate_limit,
            timeout_secs,
            parallelism,
            replay,
        } => {
            let pcfg = ProviderConfig::from_env(base_url.clone(), *rate_limit, Duration::from_secs(*timeout_secs))?;
            let jobs: Vec<_> = jobs.iter().map(|j| (j.ticker.clone(), j.earnings_date)).collect();
            let results = match replay {
                Some(p) => ProviderClient::new(pcfg, ReplayTransport::load(p)?).fetch_many(&jobs, *parallelism),
                None => ProviderClient::http(pcfg).fetch_many(&jobs, *parallelism),
            };
            let mut records = Vec::new();
            let mut first_err = None;
            for ((ticker, date), r) in jobs.iter().zip(results) {
                match r {
                    Ok(rec) => records.push(rec),
                    Err(e) => {
                        log::warn!("{ticker} {date}: {e}");
                        first_err.get_or_insert(e);
                    }
                }
            }
            match first_err {
                Some(e) if records.is_empty() => Err(e),
                _ => Ok(records),
            }
        }
    }
}

/// Collect records from the configured source into `records.json`.
pub fn cmd_ingest(cfg: &PipelineConfig) -> Result<usize> {
    let records = fetch_records(cfg)?;
    let path = cfg.out_dir.join(RECORDS_FILE);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_fixture_set(&path, &records)?;
    log::info!("ingested {} records into {}", records.len(), path.display());
    Ok(records.len())
}

/// Textualize the stored records for the configured variant and split them.
pub fn cmd_build(cfg: &PipelineConfig) -> Result<BuildSummary> {
    let records = load_fixture_set(cfg.out_dir.join(RECORDS_FILE))?;
    let mut text = cfg.text.text_config();
    // without an explicit budget, cut transcripts to what the model can see
    let fit = cfg.model.max_seq_len.saturating_sub(SPECIAL_OVERHEAD);
    text.max_tokens = Some(text.max_tokens.map_or(fit, |m| m.min(fit)));
    let built = build_dataset(&records, cfg.variant, &text);
    if built.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    log::info!("{} rows built, {} dropped", built.examples.len(), built.dropped);
    let (train_rows, test_rows) = split_by_ticker(built.examples, cfg.split.train, cfg.seed);
    let dir = cfg.variant_dir();
    write(&dir.join(TRAIN_FILE), to_jsonl(&train_rows)?)?;
    write(&dir.join(TEST_FILE), to_jsonl(&test_rows)?)?;
    let summary = BuildSummary {
        variant: cfg.variant,
        n_train: train_rows.len(),
        n_test: test_rows.len(),
        dropped: built.dropped,
        train: DatasetStats::from_examples(&train_rows),
        test: DatasetStats::from_examples(&test_rows),
    };
    write(&dir.join(STATS_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn load_split(cfg: &PipelineConfig, file: &str) -> Result<Vec<InstructionExample>> {
    from_jsonl(&read(&cfg.variant_dir().join(file))?)
}

/// Corpus used for the vocabulary: every training prompt and answer.
fn vocab_corpus(rows: &[InstructionExample]) -> Vec<String> {
    rows.iter()
        .map(|e| format!("{}\n{}\n{}", e.instruction, e.input, e.output))
        .collect()
}

/// Fine-tune adapters on `train.jsonl`; writes the checkpoint and loss curve.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let rows = load_split(cfg, TRAIN_FILE)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tokenizer = build_vocab(&vocab_corpus(&rows), cfg.text.max_vocab)?;
    let model_cfg = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        ..cfg.model
    };
    let mut model = TinyLm::new(model_cfg, &cfg.lora, cfg.quant, cfg.seed)?;
    let train_cfg = crate::tinylm::TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let curve = train(&mut model, &rows, &tokenizer, &train_cfg)?;
    let dir = cfg.variant_dir();
    write(&dir.join(LOSS_FILE), curve.to_csv())?;
    let summary = TrainSummary {
        steps: curve.points.len(),
        final_loss: curve.points.last().map_or(f64::NAN, |p| p.loss),
        trainable_params: model.n_trainable(),
    };
    let ck = Checkpoint {
        model,
        tokenizer,
        lora: cfg.lora.clone(),
        quant: cfg.quant,
        train: train_cfg,
        loss_curve: curve,
    };
    checkpoint::save(dir.join(CHECKPOINT_FILE), &ck)?;
    log::info!("trained {} steps, final loss {:.4}", summary.steps, summary.final_loss);
    Ok(summary)
}

fn report_paths(out_dir: &Path, variant: Variant) -> PathBuf {
    out_dir.join(variant.to_string().to_ascii_lowercase()).join(REPORT_FILE)
}

/// Score the checkpoint on `test.jsonl`, then rebuild the comparison table
/// from every variant report present in the output directory.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalReport> {
    let dir = cfg.variant_dir();
    let ck = checkpoint::load(dir.join(CHECKPOINT_FILE))?;
    let rows = load_split(cfg, TEST_FILE)?;
    let (report, preds) = evaluate(&ck.model, &rows, &ck.tokenizer)?;
    let mut lines = String::new();
    for p in &preds {
        lines.push_str(&serde_json::to_string(p)?);
        lines.push('\n');
    }
    write(&dir.join(PREDICTIONS_FILE), lines)?;
    write(&dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;

    let mut row = VariantReports::default();
    for v in [Variant::Base, Variant::Full] {
        let path = report_paths(&cfg.out_dir, v);
        if !path.exists() {
            continue;
        }
        let r: EvalReport = serde_json::from_str(&read(&path)?)?;
        match v {
            Variant::Base => row.base = Some(r),
            Variant::Full => row.full = Some(r),
        }
    }
    let table = compare_table(&BTreeMap::from([(cfg.model_name.clone(), row)]));
    write(&cfg.out_dir.join(TABLE_TXT), table.to_text())?;
    write(&cfg.out_dir.join(TABLE_CSV), table.to_csv())?;
    log::info!(
        "{} {}: accuracy {:.3}, weighted F1 {:.3}, MCC {:.3}",
        cfg.model_name,
        cfg.variant,
        report.accuracy,
        report.weighted_f1,
        report.mcc
    );
    Ok(report)
}

/// Recompute a report from a stored `predictions.jsonl`.
pub fn report_from_predictions(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let preds: Vec<PredictionRecord> = read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    EvalReport::from_predictions(&preds)
}
