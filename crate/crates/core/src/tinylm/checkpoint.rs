//! Versioned little-endian checkpoint container.
//!
//! Layout: magic `EQLMCKPT`, u32 version, u64 metadata length, metadata JSON
//! (configs, vocabulary, loss curve), then the tensors: token and position
//! embeddings, layer norms, and for every linear its NF4 tensor followed by an
//! optional adapter.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{LayerNorm, LoraConfig, ModelConfig, QLinear, TinyLm};
use super::tokenizer::Tokenizer;
use super::train::{LossCurve, TrainConfig};
use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::quant::{ByteReader, QuantConfig, QuantizedTensor};

const MAGIC: &[u8; 8] = b"EQLMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    lora: LoraConfig,
    quant_block_size: usize,
    quant_double: bool,
    quant_scale_block: usize,
    train: TrainConfig,
    vocab: Vec<String>,
    loss_curve: LossCurve,
    linear_names: Vec<String>,
}

pub struct Checkpoint {
    pub model: TinyLm,
    pub tokenizer: Tokenizer,
    pub lora: LoraConfig,
    pub quant: QuantConfig,
    pub train: TrainConfig,
    pub loss_curve: LossCurve,
}

fn put_f64s<'a>(out: &mut Vec<u8>, it: impl Iterator<Item = &'a f64>) {
    for v in it {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_matrix(r: &mut ByteReader, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f64()?);
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

fn get_vector(r: &mut ByteReader, n: usize) -> Result<Array1<f64>> {
    (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>().map(Array1::from)
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ck.model;
    let meta = Meta {
        model: m.config,
        lora: ck.lora.clone(),
        quant_block_size: ck.quant.block_size,
        quant_double: ck.quant.double_quant,
        quant_scale_block: ck.quant.scale_block,
        train: ck.train.clone(),
        vocab: ck.tokenizer.tokens().to_vec(),
        loss_curve: ck.loss_curve.clone(),
        linear_names: m.linears().iter().map(|l| l.name.clone()).collect(),
    };
    let meta_json = serde_json::to_vec(&meta)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    put_f64s(&mut out, m.tok_emb.iter());
    put_f64s(&mut out, m.pos_emb.iter());
    for n in m.norms() {
        put_f64s(&mut out, n.gamma.iter());
        put_f64s(&mut out, n.beta.iter());
    }
    for lin in m.linears() {
        out.extend_from_slice(&lin.base.to_bytes());
        match &lin.adapter {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
                out.extend_from_slice(&a.alpha.to_le_bytes());
                put_f64s(&mut out, a.a.iter());
                put_f64s(&mut out, a.b.iter());
            }
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut r = ByteReader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| bad("file too short"))? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u64()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
    let cfg = meta.model;
    cfg.validate()?;
    let d = cfg.d_model;
    let tok_emb = get_matrix(&mut r, cfg.vocab_size, d)?;
    let pos_emb = get_matrix(&mut r, cfg.max_seq_len, d)?;
    let mut norms = Vec::new();
    for _ in 0..2 * cfg.n_layers + 1 {
        let gamma = get_vector(&mut r, d)?;
        let beta = get_vector(&mut r, d)?;
        norms.push(LayerNorm { gamma, beta });
    }
    let mut linears = Vec::with_capacity(meta.linear_names.len());
    for name in &meta.linear_names {
        let (base, used) = QuantizedTensor::from_bytes(&bytes[r.pos..])?;
        r.pos += used;
        if base.shape.len() != 2 {
            return Err(bad("linear weight is not a matrix"));
        }
        let (rows, cols) = (base.shape[0], base.shape[1]);
        let adapter = match r.u8()? {
            0 => None,
            1 => {
                let rank = r.u32()? as usize;
                let alpha = r.f64()?;
                let a = get_matrix(&mut r, rank, cols)?;
                let b = get_matrix(&mut r, rows, rank)?;
                Some(LoraAdapter {
                    a,
                    b,
                    alpha,
                    target: name.clone(),
                })
            }
            _ => return Err(bad("bad adapter flag")),
        };
        linears.push(QLinear::new(name.clone(), base, adapter)?);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after tensors"));
    }
    let model = TinyLm::assemble(cfg, tok_emb, pos_emb, linears, Some(norms))?;
    let tokenizer = Tokenizer::from_tokens(meta.vocab)?;
    if tokenizer.vocab_size() != cfg.vocab_size {
        return Err(bad("vocabulary size does not match model"));
    }
    Ok(Checkpoint {
        model,
        tokenizer,
        lora: meta.lora,
        quant: QuantConfig {
            block_size: meta.quant_block_size,
            double_quant: meta.quant_double,
            scale_block: meta.quant_scale_block,
        },
        train: meta.train,
        loss_curve: meta.loss_curve,
    })
}

pub fn save(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
