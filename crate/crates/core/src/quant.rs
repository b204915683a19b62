//! Blockwise 4-bit NormalFloat (NF4) quantization.
//!
//! A tensor is cut into flat row-major blocks of `block_size` elements. Each
//! block is scaled by its absolute maximum and every element is replaced by the
//! index of the nearest NF4 level. The per-block scales can themselves be
//! quantized to 8 bits ("double quantization").

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_SCALE_BLOCK: usize = 256;

/// Probability mass placed at the outermost quantile, halfway between the
/// offsets used for the 15- and 16-level halves of a symmetric code.
const NF4_OFFSET: f64 = 0.5 * ((1.0 - 0.5 / 15.0) + (1.0 - 0.5 / 16.0));

/// Inverse of the standard normal CDF (Wichura, AS 241 / PPND16).
///
/// Accurate to about 1e-16 relative over (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability {p} outside (0, 1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2509.0809287301226727 * r + 33430.575583588128105) * r
            + 67265.770927008700853)
            * r
            + 45921.953931549871457)
            * r
            + 13731.693765509461125)
            * r
            + 1971.5909503065514427)
            * r
            + 133.14166789178437745)
            * r
            + 3.387132872796366608;
        let den = ((((((5226.495278852545925 * r + 28729.085735721942674) * r
            + 39307.89580009271061)
            * r
            + 21213.794301586595867)
            * r
            + 5394.1960214247511077)
            * r
            + 687.1870074920579083)
            * r
            + 42.313330701600911252)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734;
        let den = ((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
            + 0.0151986665636164571966)
            * r
            + 0.14810397642748007459)
            * r
            + 0.68976733498510000455)
            * r
            + 1.6763848301838038494)
            * r
            + 2.05319162663775882187)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772;
        let den = ((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
            + 1.8463183175100546818e-5)
            * r
            + 7.868691311456132591e-4)
            * r
            + 0.0148753612908506148525)
            * r
            + 0.13692988092273580531)
            * r
            + 0.59983220655588793769)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// The 16 reconstruction levels of a 4-bit code, strictly ascending in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    values: [f64; 16],
    midpoints: [f64; 15],
}

impl Codebook {
    pub fn values(&self) -> &[f64; 16] {
        &self.values
    }

    pub fn zero_index(&self) -> u8 {
        self.values.iter().position(|&v| v == 0.0).expect("codebook has a zero level") as u8
    }

    pub fn level(&self, code: u8) -> f64 {
        self.values[code as usize]
    }

    /// Largest distance between adjacent levels.
    pub fn max_gap(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Index of the nearest level; a value exactly between two levels takes the
    /// smaller index.
    pub fn nearest(&self, x: f64) -> u8 {
        self.midpoints.iter().take_while(|&&m| m < x).count() as u8
    }
}

/// NF4 levels: normal quantiles at evenly spaced probabilities, 7 strictly
/// negative and 8 strictly positive, plus an exact zero, scaled to [-1, 1].
pub fn build_nf4_codebook() -> Codebook {
    let positive: Vec<f64> = (0..8)
        .map(|i| normal_quantile(NF4_OFFSET + i as f64 * (0.5 - NF4_OFFSET) / 8.0))
        .collect();
    let negative: Vec<f64> = (0..7)
        .map(|i| -normal_quantile(NF4_OFFSET + i as f64 * (0.5 - NF4_OFFSET) / 7.0))
        .collect();
    let scale = normal_quantile(NF4_OFFSET);

    let mut values = [0.0; 16];
    for (slot, v) in values.iter_mut().zip(
        negative
            .iter()
            .chain(std::iter::once(&0.0))
            .chain(positive.iter().rev()),
    ) {
        *slot = v / scale;
    }
    // exact endpoints; the division above is already exact but pin it anyway
    values[0] = -1.0;
    values[15] = 1.0;

    let mut midpoints = [0.0; 15];
    for i in 0..15 {
        midpoints[i] = 0.5 * (values[i] + values[i + 1]);
    }
    Codebook { values, midpoints }
}

/// Per-block scales quantized to 8 bits with one affine (scale, offset) pair
/// per group of `q_block` scales.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleQuant {
    pub q_codes: Vec<u8>,
    pub q_block: usize,
    pub q_scale: Vec<f32>,
    pub q_offset: Vec<f32>,
}

impl DoubleQuant {
    fn quantize(absmax: &[f32], q_block: usize) -> Self {
        let mut q_codes = Vec::with_capacity(absmax.len());
        let mut q_scale = Vec::new();
        let mut q_offset = Vec::new();
        for chunk in absmax.chunks(q_block) {
            let lo = chunk.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let step = round_f32_down((hi as f64 - lo as f64) / 255.0);
            q_offset.push(lo);
            q_scale.push(step);
            for &a in chunk {
                let code = if step > 0.0 {
                    ((a as f64 - lo as f64) / step as f64).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                };
                q_codes.push(code);
            }
        }
        DoubleQuant {
            q_codes,
            q_block,
            q_scale,
            q_offset,
        }
    }

    /// Reconstructed absmax values.
    pub fn decode(&self) -> Vec<f64> {
        self.q_codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let g = i / self.q_block;
                self.q_offset[g] as f64 + c as f64 * self.q_scale[g] as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scales {
    Plain(Vec<f32>),
    Double(DoubleQuant),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub block_size: usize,
    /// One 4-bit code per element, row-major, unpacked.
    pub codes: Vec<u8>,
    pub scales: Scales,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub block_size: usize,
    pub double_quant: bool,
    pub scale_block: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            double_quant: false,
            scale_block: DEFAULT_SCALE_BLOCK,
        }
    }
}

fn round_f32_up(x: f64) -> f32 {
    let f = x as f32;
    if (f as f64) < x {
        f32::from_bits(if f >= 0.0 { f.to_bits() + 1 } else { f.to_bits() - 1 })
    } else {
        f
    }
}

fn round_f32_down(x: f64) -> f32 {
    let f = x as f32;
    if (f as f64) > x {
        if f > 0.0 {
            f32::from_bits(f.to_bits() - 1)
        } else {
            0.0
        }
    } else {
        f
    }
}

/// Quantize a flat row-major buffer of the given shape.
pub fn quantize_flat(data: &[f64], shape: Vec<usize>, cfg: QuantConfig) -> Result<QuantizedTensor> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "shape {:?} holds {n} elements, buffer has {}",
            shape,
            data.len()
        )));
    }
    if cfg.block_size == 0 || cfg.scale_block == 0 {
        return Err(Error::Config("block sizes must be at least 1".into()));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(i));
    }

    let book = nf4();
    let zero = book.zero_index();
    let mut codes = Vec::with_capacity(n);
    let mut absmax = Vec::with_capacity(n.div_ceil(cfg.block_size));
    for block in data.chunks(cfg.block_size) {
        let peak = block.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        // stored scale never undershoots the true peak, so scaled values stay in [-1, 1]
        let stored = round_f32_up(peak);
        absmax.push(stored);
        if stored == 0.0 {
            codes.extend(std::iter::repeat_n(zero, block.len()));
        } else {
            let s = stored as f64;
            codes.extend(block.iter().map(|&v| book.nearest(v / s)));
        }
    }

    let scales = if cfg.double_quant {
        Scales::Double(DoubleQuant::quantize(&absmax, cfg.scale_block))
    } else {
        Scales::Plain(absmax)
    };
    Ok(QuantizedTensor {
        shape,
        block_size: cfg.block_size,
        codes,
        scales,
    })
}

pub fn quantize_blockwise(w: &Array2<f64>, block_size: usize, double_quant: bool) -> Result<QuantizedTensor> {
    quantize_with(
        w,
        QuantConfig {
            block_size,
            double_quant,
            ..QuantConfig::default()
        },
    )
}

pub fn quantize_with(w: &Array2<f64>, cfg: QuantConfig) -> Result<QuantizedTensor> {
    let data: Vec<f64> = w.iter().copied().collect();
    quantize_flat(&data, w.shape().to_vec(), cfg)
}

/// Shared NF4 codebook.
pub fn nf4() -> &'static Codebook {
    use std::sync::OnceLock;
    static BOOK: OnceLock<Codebook> = OnceLock::new();
    BOOK.get_or_init(build_nf4_codebook)
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_blocks(&self) -> usize {
        self.len().div_ceil(self.block_size)
    }

    pub fn is_double_quantized(&self) -> bool {
        matches!(self.scales, Scales::Double(_))
    }

    /// Block scales as used for reconstruction.
    pub fn absmax(&self) -> Vec<f64> {
        match &self.scales {
            Scales::Plain(a) => a.iter().map(|&v| v as f64).collect(),
            Scales::Double(dq) => dq.decode(),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.block_size == 0 {
            return Err(Error::CorruptTensor("block size 0".into()));
        }
        if self.codes.len() != n {
            return Err(Error::CorruptTensor(format!(
                "{} codes for {} elements",
                self.codes.len(),
                n
            )));
        }
        if let Some(c) = self.codes.iter().find(|&&c| c > 15) {
            return Err(Error::CorruptTensor(format!("code {c} is not 4-bit")));
        }
        let blocks = self.n_blocks();
        match &self.scales {
            Scales::Plain(a) if a.len() != blocks => Err(Error::CorruptTensor(format!(
                "{} scales for {} blocks",
                a.len(),
                blocks
            ))),
            Scales::Double(dq)
                if dq.q_block == 0
                    || dq.q_codes.len() != blocks
                    || dq.q_scale.len() != blocks.div_ceil(dq.q_block)
                    || dq.q_offset.len() != dq.q_scale.len() =>
            {
                Err(Error::CorruptTensor("double-quant scale layout mismatch".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn dequantize_flat(&self) -> Result<Vec<f64>> {
        self.check()?;
        let book = nf4();
        let absmax = self.absmax();
        Ok(self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| book.level(c) * absmax[i / self.block_size])
            .collect())
    }

    /// Packed payload size in bits: 4 per code plus the scale storage.
    pub fn payload_bits(&self) -> usize {
        let scale_bits = match &self.scales {
            Scales::Plain(a) => 32 * a.len(),
            Scales::Double(dq) => 8 * dq.q_codes.len() + 64 * dq.q_scale.len(),
        };
        4 * self.len() + scale_bits
    }

    /// Little-endian: header {ndim, dims, block_size, dq flag}, packed codes
    /// (low nibble first), then scales.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.block_size as u32).to_le_bytes());
        out.push(self.is_double_quantized() as u8);
        for pair in self.codes.chunks(2) {
            let lo = pair[0] & 0x0F;
            let hi = pair.get(1).copied().unwrap_or(0) & 0x0F;
            out.push(lo | (hi << 4));
        }
        match &self.scales {
            Scales::Plain(a) => {
                for v in a {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Scales::Double(dq) => {
                out.extend_from_slice(&(dq.q_block as u32).to_le_bytes());
                out.extend_from_slice(&dq.q_codes);
                for (s, o) in dq.q_scale.iter().zip(&dq.q_offset) {
                    out.extend_from_slice(&s.to_le_bytes());
                    out.extend_from_slice(&o.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decode one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::CorruptTensor(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let block_size = r.u32()? as usize;
        if block_size == 0 {
            return Err(Error::CorruptTensor("block size 0".into()));
        }
        let dq = r.u8()? != 0;
        let packed = r.take(n.div_ceil(2))?;
        let mut codes = Vec::with_capacity(n);
        for &b in packed {
            codes.push(b & 0x0F);
            codes.push(b >> 4);
        }
        codes.truncate(n);
        let blocks = n.div_ceil(block_size);
        let scales = if dq {
            let q_block = r.u32()? as usize;
            if q_block == 0 {
                return Err(Error::CorruptTensor("scale block size 0".into()));
            }
            let q_codes = r.take(blocks)?.to_vec();
            let groups = blocks.div_ceil(q_block);
            let mut q_scale = Vec::with_capacity(groups);
            let mut q_offset = Vec::with_capacity(groups);
            for _ in 0..groups {
                q_scale.push(r.f32()?);
                q_offset.push(r.f32()?);
            }
            Scales::Double(DoubleQuant {
                q_codes,
                q_block,
                q_scale,
                q_offset,
            })
        } else {
            let mut a = Vec::with_capacity(blocks);
            for _ in 0..blocks {
                a.push(r.f32()?);
            }
            Scales::Plain(a)
        };
        let t = QuantizedTensor {
            shape,
            block_size,
            codes,
            scales,
        };
        t.check()?;
        Ok((t, r.pos))
    }
}

pub(crate) struct ByteReader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptTensor("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reconstruct a 2-D tensor.
pub fn dequantize(q: &QuantizedTensor) -> Result<Array2<f64>> {
    if q.shape.len() != 2 {
        return Err(Error::CorruptTensor(format!(
            "expected a matrix, got shape {:?}",
            q.shape
        )));
    }
    let flat = q.dequantize_flat()?;
    Array2::from_shape_vec((q.shape[0], q.shape[1]), flat)
        .map_err(|e| Error::CorruptTensor(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantReport {
    pub max_abs_err: f64,
    pub rms_err: f64,
    pub memory_ratio: f64,
}

pub fn quantization_report(w: &Array2<f64>, q: &QuantizedTensor) -> Result<QuantReport> {
    if w.shape() != q.shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "weight {:?} vs quantized {:?}",
            w.shape(),
            q.shape
        )));
    }
    let deq = q.dequantize_flat()?;
    let n = deq.len();
    let (mut max_abs, mut sq) = (0.0_f64, 0.0_f64);
    for (a, b) in w.iter().zip(&deq) {
        let e = (a - b).abs();
        max_abs = max_abs.max(e);
        sq += e * e;
    }
    Ok(QuantReport {
        max_abs_err: max_abs,
        rms_err: if n == 0 { 0.0 } else { (sq / n as f64).sqrt() },
        memory_ratio: q.payload_bits() as f64 / (32.0 * n.max(1) as f64),
    })
}
