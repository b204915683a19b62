//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach stdout; exits nonzero on any FAIL.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use approx::{abs_diff_eq, relative_eq};
use earnings_qlora::adapters::{forward_adapted, init_adapter, merge_adapter, LoraAdapter};
use earnings_qlora::config::{DataSource, PipelineConfig};
use earnings_qlora::eval::{accuracy, mcc, weighted_f1, ConfusionMatrix, EvalReport};
use earnings_qlora::ingestion::{load_fixture_set, validate_record, IndexSymbol, Variant};
use earnings_qlora::pipeline;
use earnings_qlora::quant::{build_nf4_codebook, dequantize, quantize_blockwise, QuantConfig};
use earnings_qlora::synthetic::synthetic_records;
use earnings_qlora::textualize::*;
use earnings_qlora::tinylm::checkpoint;
use earnings_qlora::tinylm::model::{flatten_grads, loss_and_grad};
use earnings_qlora::tinylm::*;
use earnings_qlora::Label;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;

fn manifest(p: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(p)
}

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

// 1 ------------------------------------------------------------------------

fn textualization_exactness() -> Check {
    let paper = std::fs::read_to_string(manifest("../../paper.md"))
        .or_else(|_| std::fs::read_to_string(manifest("fixtures/textualized_forms.txt")))
        .map_err(|e| e.to_string())?;
    let quoted: Vec<String> = paper
        .lines()
        .filter_map(|l| l.split_once("Textualized form:}"))
        .map(|(_, r)| r.trim().trim_start_matches("``").trim_end_matches('"').replace("\\%", "%"))
        .collect();
    let find = |needle: &str| {
        quoted
            .iter()
            .find(|q| q.contains(needle))
            .cloned()
            .ok_or(format!("no paper sentence containing {needle:?}"))
    };
    let pairs = [
        (textualize_market_move(IndexSymbol::Spy, "AAPL", -1.5), find("SPY")?),
        (
            textualize_eps_surprise(eps_surprise(2.10, 1.95).map_err(|e| e.to_string())?),
            find("EPS")?,
        ),
        (
            textualize_metric_growth("growthNetIncome", 0.046, &MetricNames::default()).map_err(|e| e.to_string())?,
            find("Net Income")?,
        ),
    ];
    for (ours, theirs) in &pairs {
        ensure(ours.as_bytes() == theirs.as_bytes(), format!("{ours:?} != {theirs:?}"))?;
    }
    Ok("3/3 sentences byte-identical".into())
}

// 2 ------------------------------------------------------------------------

fn labeling_rule() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ties = 0;
    for i in 0..10_000 {
        let open: f64 = rng.random_range(0.01..1000.0);
        let close = if i % 10 == 0 {
            ties += 1;
            open
        } else {
            rng.random_range(0.01..1000.0)
        };
        let want = if open < close { Label::Long } else { Label::Short };
        let got = derive_label(open, close).map_err(|e| e.to_string())?;
        ensure(got == want, format!("({open}, {close}) gave {got}"))?;
    }
    Ok(format!("10000 pairs, {ties} ties all Short"))
}

// 3 ------------------------------------------------------------------------

/// Brute force over the expanded sample list; MCC as Pearson correlation.
fn metric_oracle(c: &ConfusionMatrix) -> [f64; 3] {
    let mut pairs = Vec::new();
    for (n, p, g) in [(c.tp, 1.0, 1.0), (c.fp, 1.0, 0.0), (c.fn_, 0.0, 1.0), (c.tn, 0.0, 0.0)] {
        pairs.extend(std::iter::repeat_n((p, g), n as usize));
    }
    let n = pairs.len() as f64;
    let acc = pairs.iter().filter(|(p, g)| p == g).count() as f64 / n;
    let mut wf1 = 0.0;
    for cls in [1.0, 0.0] {
        let pred = pairs.iter().filter(|(p, _)| *p == cls).count() as f64;
        let gold = pairs.iter().filter(|(_, g)| *g == cls).count() as f64;
        let hit = pairs.iter().filter(|(p, g)| *p == cls && *g == cls).count() as f64;
        let pr = if pred > 0.0 { hit / pred } else { 0.0 };
        let re = if gold > 0.0 { hit / gold } else { 0.0 };
        let f1 = if pr + re > 0.0 { 2.0 * pr * re / (pr + re) } else { 0.0 };
        wf1 += gold / n * f1;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = pairs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let vy: f64 = pairs.iter().map(|(_, y)| (y - my).powi(2)).sum();
    let m = if vx == 0.0 || vy == 0.0 { 0.0 } else { cov / (vx * vy).sqrt() };
    [acc, wf1, m]
}

fn ours(c: &ConfusionMatrix) -> std::result::Result<[f64; 3], String> {
    let e = |x: earnings_qlora::Error| x.to_string();
    Ok([accuracy(c).map_err(e)?, weighted_f1(c).map_err(e)?, mcc(c).map_err(e)?])
}

fn cm(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMatrix {
    ConfusionMatrix {
        tp,
        fp,
        fn_,
        tn,
        parse_failures: 0,
    }
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 1000 {
        let mut d = || if rng.random_bool(0.1) { 0 } else { rng.random_range(0..60) };
        let c = cm(d(), d(), d(), d());
        if c.total() == 0 {
            continue;
        }
        for (a, b) in ours(&c)?.iter().zip(metric_oracle(&c)) {
            worst = worst.max((a - b).abs());
        }
        n += 1;
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    let [a, w, m] = ours(&cm(3, 1, 2, 4))?;
    ensure(abs_diff_eq!(a, 0.7, epsilon = 1e-12), format!("accuracy {a}"))?;
    ensure(abs_diff_eq!(w, 0.6970, epsilon = 5e-5), format!("weighted F1 {w}"))?;
    ensure(abs_diff_eq!(m, 0.4082, epsilon = 5e-5), format!("mcc {m}"))?;
    Ok(format!("1000 matrices, max deviation {worst:.1e}; hand case {a:.4}/{w:.4}/{m:.4}"))
}

// 4 ------------------------------------------------------------------------

fn nf4_quantization() -> Check {
    let e = |x: earnings_qlora::Error| x.to_string();
    let cb = build_nf4_codebook();
    let v = cb.values();
    ensure(v[0] == -1.0 && v[15] == 1.0, "endpoints not +-1")?;
    ensure(v.iter().filter(|x| **x == 0.0).count() == 1, "no exact zero")?;
    let gap = v.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for b in 0..1000 {
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let w = gaussian(&mut rng, 1, 64) * scale;
        let q = quantize_blockwise(&w, 64, false).map_err(e)?;
        let am = q.absmax()[0];
        let back = dequantize(&q).map_err(e)?;
        for (x, y) in w.iter().zip(back.iter()) {
            ensure((x - y).abs() <= am * gap / 2.0 * (1.0 + 1e-12), format!("block {b} exceeds bound"))?;
        }
        let again = dequantize(&quantize_blockwise(&back, 64, false).map_err(e)?).map_err(e)?;
        ensure(again == back, format!("block {b} not a fixed point"))?;
    }

    let w = Array2::from_shape_fn((300, 64), |(r, _)| (1.0 + r as f64 / 30.0) * rng.sample::<f64, _>(StandardNormal));
    let exact = quantize_blockwise(&w, 64, false).map_err(e)?.absmax();
    let approx = quantize_blockwise(&w, 64, true).map_err(e)?.absmax();
    for (ex, ap) in exact.chunks(256).zip(approx.chunks(256)) {
        let lo = ex.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ex.iter().copied().fold(0.0, f64::max);
        let step = (hi - lo) / 255.0;
        for (x, y) in ex.iter().zip(ap) {
            // f32 storage of the affine pair adds a few ulps
            ensure((x - y).abs() <= step / 2.0 * (1.0 + 1e-5) + 1e-6 * hi, "double-quant scale outside step bound")?;
        }
    }
    Ok("endpoints, zero, 1000-block bound, fixed point, double-quant step".into())
}

// 5 ------------------------------------------------------------------------

fn lora_algebra() -> Check {
    let e = |x: earnings_qlora::Error| x.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (d, k) = (rng.random_range(1..12), rng.random_range(1..12));
        let r = rng.random_range(1..=d.min(k));
        let q = quantize_blockwise(&gaussian(&mut rng, d, k), 16, rng.random_bool(0.5)).map_err(e)?;
        let x = Array1::from_shape_simple_fn(k, || rng.sample(StandardNormal));

        let zero = init_adapter(d, k, r, 16.0, case as u64, "w").map_err(e)?;
        let base = dequantize(&q).map_err(e)?;
        ensure(forward_adapted(&x, &q, &zero).map_err(e)? == base.dot(&x), format!("case {case}: zero-init not identity"))?;

        let a = LoraAdapter {
            a: gaussian(&mut rng, r, k),
            b: gaussian(&mut rng, d, r),
            alpha: rng.random_range(0.5..32.0),
            target: "w".into(),
        };
        let s = a.alpha / r as f64;
        // (W + s B A) x from explicit loops
        let oracle: Vec<f64> = (0..d)
            .map(|i| {
                (0..k)
                    .map(|j| (base[[i, j]] + s * (0..r).map(|t| a.b[[i, t]] * a.a[[t, j]]).sum::<f64>()) * x[j])
                    .sum()
            })
            .collect();
        let adapted = forward_adapted(&x, &q, &a).map_err(e)?;
        let merged = merge_adapter(&q, &a).map_err(e)?.dot(&x);
        let den = oracle.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for got in [&adapted, &merged] {
            let num = got.iter().zip(&oracle).map(|(g, o)| (g - o).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(num / den);
        }
    }
    ensure(worst <= 1e-5, format!("max relative error {worst:e}"))?;
    Ok(format!("100 cases, max relative error {worst:.1e}"))
}

// 6 ------------------------------------------------------------------------

fn gradient_check() -> Check {
    let e = |x: earnings_qlora::Error| x.to_string();
    let vocab = 24;
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        max_seq_len: 64,
        vocab_size: vocab,
        init_std: 0.0,
    };
    let lora = LoraConfig {
        rank: 2,
        alpha: 4.0,
        targets: ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down", "head"]
            .map(String::from)
            .to_vec(),
    };
    let mut model = TinyLm::new(cfg, &lora, QuantConfig::default(), 5).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // nonzero B so every path carries gradient
    let params: Vec<f64> = model
        .adapter_params()
        .iter()
        .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    model.set_adapter_params(&params);
    let ids: Vec<u32> = (0..10).map(|_| rng.random_range(0..vocab as u32)).collect();
    let targets: Vec<u32> = (0..10).map(|_| rng.random_range(0..vocab as u32)).collect();
    let mask: Vec<bool> = (0..10).map(|t| t >= 4).collect();

    let (logits, cache) = model.forward_cached(&ids).map_err(e)?;
    let (_, dlogits) = loss_and_grad(&logits, &targets, &mask).map_err(e)?;
    let analytic = flatten_grads(&model.backward(&cache, &dlogits));

    let h = 1e-4;
    let samples = 300;
    let mut ok = 0;
    for _ in 0..samples {
        let i = rng.random_range(0..params.len());
        let mut p = params.clone();
        p[i] = params[i] + h;
        model.set_adapter_params(&p);
        let up = loss_masked(&model.forward(&ids).map_err(e)?, &targets, &mask).map_err(e)?;
        p[i] = params[i] - h;
        model.set_adapter_params(&p);
        let down = loss_masked(&model.forward(&ids).map_err(e)?, &targets, &mask).map_err(e)?;
        let numeric = (up - down) / (2.0 * h);
        if relative_eq!(analytic[i], numeric, epsilon = 1e-8, max_relative = 1e-4) {
            ok += 1;
        }
    }
    let frac = ok as f64 / samples as f64;
    ensure(frac >= 0.95, format!("{ok}/{samples} within 1e-4"))?;
    Ok(format!("{ok}/{samples} coordinates within 1e-4"))
}

// 7 ------------------------------------------------------------------------

fn frozen_base() -> Check {
    let e = |x: earnings_qlora::Error| x.to_string();
    let rows = build_dataset(&synthetic_records(20, 2, 4), Variant::Base, &TextConfig::default()).examples;
    let corpus: Vec<String> = rows.iter().map(|r| format!("{} {} {}", r.instruction, r.input, r.output)).collect();
    let tk = build_vocab(&corpus, 512).map_err(e)?;
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        max_seq_len: 256,
        vocab_size: tk.vocab_size(),
        init_std: 0.0,
    };
    let quant = QuantConfig {
        double_quant: true,
        ..QuantConfig::default()
    };
    let mut model = TinyLm::new(cfg, &LoraConfig::default(), quant, 1).map_err(e)?;
    let before = model.base_bytes();
    let adapters = model.adapter_params();
    let train_cfg = TrainConfig {
        epochs: 5,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let curve = train(&mut model, &rows, &tk, &train_cfg).map_err(e)?;
    ensure(curve.points.len() == 50, format!("{} steps, expected 50", curve.points.len()))?;
    ensure(model.adapter_params() != adapters, "adapters did not move")?;
    ensure(model.base_bytes() == before, "base tensors changed")?;
    Ok(format!("50 steps, {} base bytes identical", before.len()))
}

// 8 ------------------------------------------------------------------------

fn convergence() -> Check {
    let e = |x: earnings_qlora::Error| x.to_string();
    let dir = tempfile::tempdir().map_err(|x| x.to_string())?;
    let mut cfg = PipelineConfig::load(manifest("config/synthetic.toml")).map_err(e)?;
    cfg.out_dir = dir.path().to_path_buf();
    ensure(
        matches!(cfg.data, DataSource::Synthetic { n: 512, .. }),
        "synthetic dataset is not 512 examples",
    )?;
    let t = &cfg.train;
    ensure(
        t.learning_rate == 2e-4 && t.warmup_steps == 5 && t.weight_decay == 0.01,
        "recipe differs from lr 2e-4 / warmup 5 / wd 0.01",
    )?;
    pipeline::cmd_ingest(&cfg).map_err(e)?;
    pipeline::cmd_build(&cfg).map_err(e)?;
    let summary = pipeline::cmd_train(&cfg).map_err(e)?;
    ensure(summary.steps >= 200, format!("only {} optimizer steps", summary.steps))?;
    let report = pipeline::cmd_eval(&cfg).map_err(e)?;
    let ck = checkpoint::load(cfg.variant_dir().join(pipeline::CHECKPOINT_FILE)).map_err(e)?;

    let ma = ck.loss_curve.moving_average(20);
    let start = t.warmup_steps + 20;
    let mut low = f64::INFINITY;
    let mut rise: f64 = 0.0;
    for &m in &ma[start..] {
        low = low.min(m);
        rise = rise.max(m - low);
    }
    let rel = rise / ma[start];
    ensure(rel <= 0.05, format!("moving average rises {:.1}% above its running minimum", 100.0 * rel))?;
    ensure(report.accuracy >= 0.95, format!("held-out accuracy {:.3}", report.accuracy))?;
    ensure(report.parse_failure_rate <= 0.01, format!("parse failures {:.3}", report.parse_failure_rate))?;
    Ok(format!(
        "{} steps, MA {:.3} -> {:.3} (max rise {:.2}%), accuracy {:.3}, parse failures {:.3}",
        summary.steps,
        ma[start],
        ma[ma.len() - 1],
        100.0 * rel,
        report.accuracy,
        report.parse_failure_rate
    ))
}

// 9 ------------------------------------------------------------------------

fn base_subset_of_full() -> Check {
    let e = |x: earnings_qlora::Error| x.to_string();
    let cfg = TextConfig::default();
    let full_only = ["In the past week,", "most grading companies suggest", "earnings per share (EPS) were"];
    let mut n = 0;
    for r in load_fixture_set(manifest("fixtures/smoke.json")).map_err(e)? {
        let Ok(fv) = validate_record(r.clone(), Variant::Full) else {
            continue;
        };
        let full = assemble_example(&fv, &cfg).map_err(e)?;
        let base = assemble_example(&validate_record(r, Variant::Base).map_err(e)?, &cfg).map_err(e)?;
        ensure(full.input.contains(&base.input), format!("{}: Base not inside Full", full.meta.ticker))?;
        for s in full_only {
            ensure(!base.input.contains(s), format!("{}: Base contains {s:?}", base.meta.ticker))?;
            ensure(full.input.contains(s), format!("{}: Full lacks {s:?}", full.meta.ticker))?;
        }
        n += 1;
    }
    ensure(n > 0, "no Full-valid fixture records")?;
    Ok(format!("{n} Full-valid records checked"))
}

// 10 -----------------------------------------------------------------------

fn run_pipeline(out: &Path, variant: Variant) -> std::result::Result<EvalReport, String> {
    let e = |x: earnings_qlora::Error| x.to_string();
    let mut cfg = PipelineConfig::load(manifest("config/smoke.toml")).map_err(e)?;
    cfg.out_dir = out.to_path_buf();
    cfg.variant = variant;
    pipeline::cmd_ingest(&cfg).map_err(e)?;
    pipeline::cmd_build(&cfg).map_err(e)?;
    pipeline::cmd_train(&cfg).map_err(e)?;
    pipeline::cmd_eval(&cfg).map_err(e)
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|x| x.to_string())?;
    let b = tempfile::tempdir().map_err(|x| x.to_string())?;
    for v in [Variant::Base, Variant::Full] {
        let ra = run_pipeline(a.path(), v)?;
        let rb = run_pipeline(b.path(), v)?;
        let sub = v.to_string().to_ascii_lowercase();
        for f in [pipeline::TRAIN_FILE, pipeline::TEST_FILE] {
            let read = |d: &Path| std::fs::read(d.join(&sub).join(f)).map_err(|x| x.to_string());
            ensure(read(a.path())? == read(b.path())?, format!("{sub}/{f} differs"))?;
        }
        for (x, y) in [(ra.accuracy, rb.accuracy), (ra.weighted_f1, rb.weighted_f1), (ra.mcc, rb.mcc)] {
            ensure(abs_diff_eq!(x, y, epsilon = 1e-6), format!("{sub} metrics differ: {x} vs {y}"))?;
        }
    }
    Ok("Base and Full: identical datasets, metrics equal to 1e-6".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, Option<Duration>, fn() -> Check); 10] = [
        ("textualization exactness", Some(Duration::from_secs(1)), textualization_exactness),
        ("labeling rule", Some(Duration::from_secs(1)), labeling_rule),
        ("metric oracles", Some(Duration::from_secs(5)), metric_oracles),
        ("NF4 quantization", Some(Duration::from_secs(10)), nf4_quantization),
        ("LoRA algebra", Some(Duration::from_secs(5)), lora_algebra),
        ("gradient check", Some(Duration::from_secs(60)), gradient_check),
        ("frozen base", None, frozen_base),
        ("desk-scale convergence", Some(Duration::from_secs(600)), convergence),
        ("Base subset of Full", Some(Duration::from_secs(1)), base_subset_of_full),
        ("determinism", None, determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let mut result = check();
        let took = t0.elapsed();
        if let (Ok(_), Some(b)) = (&result, budget) {
            if took > *b {
                result = Err(format!("took {took:.2?}, budget {b:?}"));
            }
        }
        let budget = budget.map_or(String::new(), |b| format!(" < {b:?}"));
        match result {
            Ok(detail) => println!("PASS {:>2} {name} [{took:.2?}{budget}]: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{took:.2?}{budget}]: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
