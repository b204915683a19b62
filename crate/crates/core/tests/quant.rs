use earnings_qlora::quant::*;
use earnings_qlora::Error;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

// Published NF4 levels (float32) from the reference 4-bit kernels.
const PUBLISHED_NF4: [f64; 16] = [
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
];

/// Codebook recomputed with statrs' inverse CDF: probabilities evenly spaced
/// from `offset` to 0.5 (exclusive), 8 on the positive side and 7 mirrored
/// onto the negative side.
fn oracle_codebook() -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    let offset = 0.5 * (1.0 / 32.0 + 1.0 / 30.0);
    let offset = 1.0 - offset;
    let linspace = |k: usize| -> Vec<f64> { (0..k).map(|i| offset + (0.5 - offset) * i as f64 / k as f64).collect() };
    let mut v: Vec<f64> = linspace(8).iter().map(|&p| n.inverse_cdf(p)).collect();
    v.push(0.0);
    v.extend(linspace(7).iter().map(|&p| -n.inverse_cdf(p)));
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut v: Vec<f64> = v.iter().map(|x| x / max).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn codebook_matches_quantile_oracle() {
    let cb = build_nf4_codebook();
    for (a, b) in cb.values().iter().zip(oracle_codebook()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn codebook_matches_published_table() {
    for (a, b) in build_nf4_codebook().values().iter().zip(PUBLISHED_NF4) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn codebook_invariants() {
    let v = build_nf4_codebook().values().to_vec();
    assert_eq!(v[0], -1.0);
    assert_eq!(v[15], 1.0);
    assert_eq!(v.iter().filter(|x| **x == 0.0).count(), 1);
    assert!(v.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn normal_quantile_matches_statrs() {
    let n = Normal::new(0.0, 1.0).unwrap();
    for i in 1..1000 {
        let p = i as f64 / 1000.0;
        assert!((normal_quantile(p) - n.inverse_cdf(p)).abs() < 1e-9, "p = {p}");
    }
}

#[test]
fn zero_matrix_round_trips_exactly() {
    let w = Array2::<f64>::zeros((4, 4));
    let q = quantize_blockwise(&w, 64, false).unwrap();
    assert!(q.codes.iter().all(|&c| c == nf4().zero_index()));
    assert_eq!(dequantize(&q).unwrap(), w);
    assert_eq!(quantization_report(&w, &q).unwrap().max_abs_err, 0.0);
}

#[test]
fn single_element_block_is_exact() {
    let w = Array2::from_elem((1, 1), 0.5);
    let q = quantize_blockwise(&w, 1, false).unwrap();
    assert_eq!(q.absmax(), vec![0.5]);
    assert_eq!(q.codes, vec![15]);
    assert_eq!(dequantize(&q).unwrap()[[0, 0]], 0.5);
}

#[test]
fn random_8x8_within_half_gap() {
    let w = random_matrix(8, 8, 11);
    let q = quantize_blockwise(&w, 64, false).unwrap();
    let back = dequantize(&q).unwrap();
    let absmax = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gap = PUBLISHED_NF4.windows(2).map(|p| p[1] - p[0]).fold(0.0, f64::max);
    for (a, b) in w.iter().zip(back.iter()) {
        assert!((a - b).abs() <= absmax * gap / 2.0 + 1e-12);
    }
}

#[test]
fn thousand_blocks_respect_bound() {
    let gap = build_nf4_codebook().max_gap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for b in 0..1000 {
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let w = Array2::from_shape_fn((1, 64), |_| scale * rng.sample::<f64, _>(StandardNormal));
        let q = quantize_blockwise(&w, 64, false).unwrap();
        let am = q.absmax()[0];
        let back = dequantize(&q).unwrap();
        for (x, y) in w.iter().zip(back.iter()) {
            assert!((x - y).abs() <= am * gap / 2.0 * (1.0 + 1e-12), "block {b}");
        }
    }
}

#[test]
fn fixed_point_after_one_round_trip() {
    for seed in 0..20 {
        let w = random_matrix(6, 11, seed);
        let q = quantize_blockwise(&w, 16, false).unwrap();
        let once = dequantize(&q).unwrap();
        let twice = dequantize(&quantize_blockwise(&once, 16, false).unwrap()).unwrap();
        assert_eq!(once, twice, "seed {seed}");
    }
}

#[test]
fn all_zero_codes_give_zero_matrix() {
    let mut q = quantize_blockwise(&random_matrix(4, 16, 2), 64, false).unwrap();
    q.codes.fill(nf4().zero_index());
    assert!(dequantize(&q).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn double_quant_absmax_within_step() {
    // 300 blocks so the scales span two q-blocks
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = Array2::from_shape_fn((300, 64), |(r, _)| {
        (1.0 + r as f64 / 30.0) * rng.sample::<f64, _>(StandardNormal)
    });
    let plain = quantize_blockwise(&w, 64, false).unwrap();
    let dq = quantize_blockwise(&w, 64, true).unwrap();
    let exact = plain.absmax();
    let approx = dq.absmax();
    for (g, (e, a)) in exact.chunks(256).zip(approx.chunks(256)).enumerate() {
        let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = e.iter().copied().fold(0.0, f64::max);
        let bound = (hi - lo) / 255.0 / 2.0;
        for (x, y) in e.iter().zip(a) {
            // f32 storage of the affine pair adds a few ulps
            assert!((x - y).abs() <= bound * (1.0 + 1e-5) + 1e-6 * hi, "group {g}: {x} vs {y}");
        }
    }
}

#[test]
fn memory_ratio_accounting() {
    let w = random_matrix(1, 64, 3);
    let q = quantize_blockwise(&w, 64, false).unwrap();
    let r = quantization_report(&w, &q).unwrap();
    assert!((r.memory_ratio - (64.0 * 4.0 + 32.0) / (32.0 * 64.0)).abs() < 1e-12);
    assert!((r.memory_ratio - 0.141).abs() < 1e-3);

    let w = random_matrix(256, 64, 4);
    let plain = quantization_report(&w, &quantize_blockwise(&w, 64, false).unwrap()).unwrap();
    let dq = quantization_report(&w, &quantize_blockwise(&w, 64, true).unwrap()).unwrap();
    assert!(dq.memory_ratio < plain.memory_ratio);
}

#[test]
fn report_rejects_shape_mismatch() {
    let q = quantize_blockwise(&random_matrix(2, 3, 1), 64, false).unwrap();
    assert!(matches!(
        quantization_report(&random_matrix(3, 2, 1), &q),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn non_finite_input_is_rejected() {
    let mut w = random_matrix(2, 2, 1);
    w[[1, 0]] = f64::NAN;
    assert!(matches!(quantize_blockwise(&w, 64, false), Err(Error::NonFiniteInput(_))));
}

#[test]
fn serialization_round_trip() {
    for dq in [false, true] {
        let q = quantize_blockwise(&random_matrix(33, 17, 6), 64, dq).unwrap();
        let bytes = q.to_bytes();
        let (back, used) = QuantizedTensor::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, q);
        assert!(QuantizedTensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_bound_holds(
        data in prop::collection::vec(-1e3f64..1e3, 1..200),
        block in 1usize..80,
    ) {
        let n = data.len();
        let w = Array2::from_shape_vec((1, n), data).unwrap();
        let q = quantize_blockwise(&w, block, false).unwrap();
        let back = dequantize(&q).unwrap();
        let g = nf4().max_gap();
        for (b, am) in q.absmax().iter().enumerate() {
            for i in b * block..((b + 1) * block).min(n) {
                prop_assert!((w[[0, i]] - back[[0, i]]).abs() <= am * g / 2.0 * (1.0 + 1e-12));
                prop_assert!(back[[0, i]].abs() <= *am);
                if w[[0, i]].abs() > am * g / 2.0 {
                    prop_assert_eq!(w[[0, i]].signum(), back[[0, i]].signum());
                }
            }
        }
    }

    #[test]
    fn scale_equivariance(data in prop::collection::vec(-10f64..10.0, 64), c in 0.01f64..100.0) {
        let w = Array2::from_shape_vec((1, 64), data).unwrap();
        let q1 = quantize_blockwise(&w, 64, false).unwrap();
        let q2 = quantize_blockwise(&(&w * c), 64, false).unwrap();
        // scales are stored in f32; a value sitting on a midpoint may flip
        let am1 = q1.absmax()[0];
        let mids: Vec<f64> = PUBLISHED_NF4.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        for (i, (a, b)) in q1.codes.iter().zip(&q2.codes).enumerate() {
            let on_edge = mids.iter().any(|m| (w[[0, i]] / am1 - m).abs() < 1e-6);
            prop_assert!(a == b || on_edge);
        }
        let d1 = dequantize(&q1).unwrap() * c;
        let d2 = dequantize(&q2).unwrap();
        let am = q2.absmax()[0];
        for ((a, b), (c1, c2)) in d1.iter().zip(d2.iter()).zip(q1.codes.iter().zip(&q2.codes)) {
            if c1 == c2 {
                prop_assert!((a - b).abs() <= 1e-6 * am.max(1e-300));
            }
        }
        prop_assert!((q2.absmax()[0] - c * q1.absmax()[0]).abs() <= 1e-6 * q2.absmax()[0]);
    }

    #[test]
    fn quantization_is_deterministic(data in prop::collection::vec(-5f64..5.0, 1..130)) {
        let n = data.len();
        let w = Array2::from_shape_vec((1, n), data).unwrap();
        prop_assert_eq!(quantize_blockwise(&w, 64, true).unwrap(), quantize_blockwise(&w, 64, true).unwrap());
    }
}
