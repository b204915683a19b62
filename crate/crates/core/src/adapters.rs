//! Low-rank adapters over frozen quantized weights.
//!
//! For a base weight `W` of shape `d x k` the adapter holds `A: r x k` and
//! `B: d x r`, and contributes `(alpha / r) * B A`.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::quant::{dequantize, QuantizedTensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub alpha: f64,
    pub target: String,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Output and input dimension of the adapted weight.
    pub fn dims(&self) -> (usize, usize) {
        (self.b.nrows(), self.a.ncols())
    }

    pub fn n_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `A ~ N(0, 0.02^2)`, `B = 0`.
pub fn init_adapter(
    d: usize,
    k: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
    target: impl Into<String>,
) -> Result<LoraAdapter> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::InvalidRank { rank, d, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let a = Array2::from_shape_simple_fn((rank, k), || normal.sample(&mut rng));
    Ok(LoraAdapter {
        a,
        b: Array2::zeros((d, rank)),
        alpha,
        target: target.into(),
    })
}

pub fn adapter_delta(a: &LoraAdapter) -> Array2<f64> {
    a.b.dot(&a.a) * a.scaling()
}

fn check_dims(q: &QuantizedTensor, a: &LoraAdapter) -> Result<()> {
    if q.shape.len() != 2 || (q.shape[0], q.shape[1]) != a.dims() {
        return Err(Error::ShapeMismatch(format!(
            "base {:?} vs adapter {:?}",
            q.shape,
            a.dims()
        )));
    }
    Ok(())
}

/// `y = deq(W) x + delta x`, computed without materializing the merged weight.
pub fn forward_adapted(x: &Array1<f64>, q: &QuantizedTensor, a: &LoraAdapter) -> Result<Array1<f64>> {
    check_dims(q, a)?;
    if x.len() != a.dims().1 {
        return Err(Error::ShapeMismatch(format!(
            "input of length {} for a {:?} weight",
            x.len(),
            q.shape
        )));
    }
    let w = dequantize(q)?;
    let low = a.a.dot(x);
    Ok(w.dot(x) + a.b.dot(&low) * a.scaling())
}

pub fn merge_adapter(q: &QuantizedTensor, a: &LoraAdapter) -> Result<Array2<f64>> {
    check_dims(q, a)?;
    Ok(dequantize(q)? + adapter_delta(a))
}
