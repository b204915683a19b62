//! Instruction fine-tuning of the adapter parameters.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad, AdapterGrads, TinyLm};
use super::tokenizer::{Tokenizer, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::textualize::InstructionExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            warmup_steps: 5,
            weight_decay: 0.01,
            epochs: 1,
            batch_size: 2,
            grad_accum_steps: 1,
            seed: 0,
            schedule: Schedule::Linear,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 || self.warmup_steps == 0 {
            return Err(Error::Config("training counts must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn examples_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.examples_per_step()) * self.epochs
    }
}

/// Linear warmup to the base rate over `warmup_steps`, then linear decay.
pub fn lr_at_step(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.learning_rate;
    let warm = cfg.warmup_steps;
    match cfg.schedule {
        Schedule::Linear => {
            if step < warm {
                base * (step + 1) as f64 / warm as f64
            } else {
                let span = total_steps.saturating_sub(warm).max(1) as f64;
                base * (total_steps.saturating_sub(step) as f64 / span).clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p.step, p.loss);
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.loss).collect()
    }

    /// Trailing moving average with the given window (shorter at the start).
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let l = self.losses();
        (0..l.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                l[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

/// Model positions an example needs beyond its own tokens: BOS, two SEPs,
/// and EOS, minus the shift between inputs and targets.
pub const SPECIAL_OVERHEAD: usize = 3;

/// `[BOS] instruction [SEP] input [SEP]`
pub fn prompt_ids(tk: &Tokenizer, instruction: &str, input: &str) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(tk.encode(instruction));
    ids.push(SEP);
    ids.extend(tk.encode(input));
    ids.push(SEP);
    ids
}

/// Model inputs, next-token targets, and a mask selecting response positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

pub fn encode_example(tk: &Tokenizer, ex: &InstructionExample, max_seq_len: usize) -> Result<EncodedExample> {
    let prompt = prompt_ids(tk, &ex.instruction, &ex.input);
    let mut full = prompt.clone();
    full.extend(tk.encode(ex.output.as_str()));
    full.push(EOS);
    let len = full.len() - 1;
    if len > max_seq_len {
        return Err(Error::SequenceTooLong { len, max: max_seq_len });
    }
    let ids = full[..len].to_vec();
    let targets = full[1..].to_vec();
    let mask = (0..len).map(|t| t + 1 >= prompt.len()).collect();
    Ok(EncodedExample { ids, targets, mask })
}

pub fn example_loss_grad(model: &TinyLm, ex: &EncodedExample) -> Result<(f64, AdapterGrads)> {
    let (logits, cache) = model.forward_cached(&ex.ids)?;
    let (loss, dlogits) = loss_and_grad(&logits, &ex.targets, &ex.mask)?;
    Ok((loss, model.backward(&cache, &dlogits)))
}

/// Mean loss and gradient over a slice of examples, summed in slice order so
/// the result does not depend on thread scheduling.
pub fn batch_loss_grad(model: &TinyLm, batch: &[&EncodedExample]) -> Result<(f64, AdapterGrads)> {
    let parts: Vec<(f64, AdapterGrads)> = batch
        .par_iter()
        .map(|ex| example_loss_grad(model, ex))
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or(Error::EmptyDataset)?;
    for (l, g) in iter {
        loss += l;
        add_grads(&mut grads, &g);
    }
    scale_grads(&mut grads, 1.0 / n);
    Ok((loss / n, grads))
}

fn add_grads(acc: &mut AdapterGrads, g: &AdapterGrads) {
    for ((a, b), (da, db)) in acc.iter_mut().zip(g) {
        *a += da;
        *b += db;
    }
}

fn scale_grads(g: &mut AdapterGrads, s: f64) {
    for (a, b) in g.iter_mut() {
        *a *= s;
        *b *= s;
    }
}

/// Decoupled-weight-decay Adam over adapter matrices.
pub struct AdamW {
    m: Vec<(Array2<f64>, Array2<f64>)>,
    v: Vec<(Array2<f64>, Array2<f64>)>,
    t: i32,
}

impl AdamW {
    pub fn new(model: &TinyLm) -> Self {
        let zeros: Vec<_> = model
            .adapters()
            .iter()
            .map(|a| (Array2::zeros(a.a.dim()), Array2::zeros(a.b.dim())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut TinyLm, grads: &AdapterGrads, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, adapter) in model.adapters_mut().into_iter().enumerate() {
            let (ga, gb) = &grads[i];
            let (ma, mb) = &mut self.m[i];
            let (va, vb) = &mut self.v[i];
            for (p, g, m, v) in [(&mut adapter.a, ga, ma, va), (&mut adapter.b, gb, mb, vb)] {
                ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                    *p -= lr * (update + cfg.weight_decay * *p);
                });
            }
        }
    }
}

/// Fine-tune the adapters in place. Returns the loss recorded at every
/// optimizer step (the mean over the examples of that step, before the update).
pub fn train(
    model: &mut TinyLm,
    dataset: &[InstructionExample],
    tk: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    train_with(model, dataset, tk, cfg, |_, _| {})
}

pub fn train_with(
    model: &mut TinyLm,
    dataset: &[InstructionExample],
    tk: &Tokenizer,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<LossCurve> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let max_len = model.config.max_seq_len;
    let encoded: Vec<EncodedExample> = dataset
        .par_iter()
        .map(|ex| encode_example(tk, ex, max_len))
        .collect::<Result<_>>()?;

    let total = cfg.total_steps(encoded.len());
    let mut opt = AdamW::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = LossCurve::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.examples_per_step()) {
            let mut acc: Option<(f64, AdapterGrads)> = None;
            for micro in chunk.chunks(cfg.batch_size) {
                let batch: Vec<&EncodedExample> = micro.iter().map(|&i| &encoded[i]).collect();
                let (l, mut g) = batch_loss_grad(model, &batch)?;
                // weight by micro-batch size so the step averages over examples
                let w = micro.len() as f64;
                scale_grads(&mut g, w);
                acc = Some(match acc {
                    None => (l * w, g),
                    Some((al, mut ag)) => {
                        add_grads(&mut ag, &g);
                        (al + l * w, ag)
                    }
                });
            }
            let (loss_sum, mut grads) = acc.expect("chunk is non-empty");
            let n = chunk.len() as f64;
            scale_grads(&mut grads, 1.0 / n);
            let loss = loss_sum / n;
            step += 1;
            if !loss.is_finite() || grads.iter().any(|(a, b)| a.iter().chain(b.iter()).any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss { step });
            }
            let lr = lr_at_step(step - 1, total, cfg);
            opt.step(model, &grads, lr, cfg);
            curve.points.push(LossPoint { step, loss });
            on_step(step, loss);
            if step % 25 == 0 || step == total {
                log::info!("step {step}/{total} loss {loss:.4} lr {lr:.2e}");
            }
        }
    }
    Ok(curve)
}
