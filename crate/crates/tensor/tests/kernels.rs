//! Kernels against independent references: nalgebra for matrix products,
//! direct loops for convolution, and serial vs pooled execution.

use anonet_tensor::{kernels, par, Tape, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct zero-padded cross-correlation.
fn conv_reference(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((s * ci + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * ci + c) * kh + ky) * kw + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.data_mut()[((s * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn matmul_matches_nalgebra() {
    for (m, k, n, seed) in [(1, 1, 1, 0), (3, 5, 7, 1), (17, 9, 33, 2), (64, 48, 20, 3)] {
        let a = random(&[m, k], seed);
        let b = random(&[k, n], seed + 100);
        let got = kernels::matmul(a.data(), b.data(), m, k, n);
        let want =
            DMatrix::from_row_slice(m, k, a.data()) * DMatrix::from_row_slice(k, n, b.data());
        let want: Vec<f64> = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| want[(i, j)])
            .collect();
        assert!(max_abs_diff(&got, &want) < 1e-12, "{m}x{k}x{n}");
    }
}

#[test]
fn conv2d_matches_direct_loops() {
    let cases = [
        (1, 1, 5, 5, 1, 3, 1, 1),
        (2, 3, 8, 6, 4, 3, 1, 1),
        (1, 4, 9, 9, 2, 4, 2, 1),
        (2, 2, 7, 7, 3, 1, 1, 0),
        (1, 3, 10, 10, 2, 7, 1, 3),
    ];
    for (i, &(n, ci, h, w, co, k, stride, pad)) in cases.iter().enumerate() {
        let x = random(&[n, ci, h, w], i as u64);
        let wt = random(&[co, ci, k, k], 50 + i as u64);
        let b = random(&[co], 90 + i as u64);
        let got = kernels::conv2d(&x, &wt, Some(&b), stride, pad);
        let want = conv_reference(&x, &wt, Some(&b), stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(max_abs_diff(got.data(), want.data()) < 1e-12, "case {i}");
    }
}

#[test]
fn spectral_normalization_matches_svd_after_power_iterations() {
    let w = random(&[6, 2, 3, 3], 7);
    let rows = 6;
    let cols = w.len() / rows;
    let mat = DMatrix::from_row_slice(rows, cols, w.data());
    let sigma = mat.clone().svd(false, false).singular_values[0];
    let mut u = vec![1.0 / (rows as f64).sqrt(); rows];
    // The top two singular values are close, so convergence is slow.
    for _ in 0..2000 {
        let v = mat.transpose() * DMatrix::from_column_slice(rows, 1, &u);
        let v = &v / v.norm();
        let nu = &mat * v;
        u = (&nu / nu.norm()).iter().copied().collect();
    }
    let tape = Tape::new();
    let wn = tape.spectral_normalize(tape.constant(w.clone()), &u);
    let normed = DMatrix::from_row_slice(rows, cols, tape.value(wn).data());
    let top = normed.svd(false, false).singular_values[0];
    assert!(
        (top - 1.0).abs() < 1e-9,
        "top singular value {top}, original {sigma}"
    );
}

#[test]
fn avg_pool_and_upsample_are_adjoint() {
    let x = random(&[2, 3, 6, 8], 1);
    let y = random(&[2, 3, 3, 4], 2);
    let lhs: f64 = kernels::avg_pool2(&x)
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a * b)
        .sum();
    let rhs: f64 = x
        .data()
        .iter()
        .zip(kernels::upsample2(&y).data())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / 4.0;
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn softmax_channels_sum_to_one() {
    let x = random(&[2, 11, 4, 5], 3);
    let s = kernels::softmax_channels(&x);
    for n in 0..2 {
        for p in 0..20 {
            let total: f64 = (0..11).map(|c| s.data()[(n * 11 + c) * 20 + p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn single_thread_results_are_bitwise_identical() {
    let x = random(&[2, 8, 32, 32], 4);
    let w = random(&[16, 8, 3, 3], 5);
    let pooled = kernels::conv2d(&x, &w, None, 1, 1);
    let serial = par::with_single_thread(|| kernels::conv2d(&x, &w, None, 1, 1));
    assert_eq!(pooled.digest(), serial.digest());
    let order = par::map_range(1000, |i| i * 3);
    assert_eq!(order, (0..1000).map(|i| i * 3).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_agrees_on_random_geometry(
        ci in 1usize..4, co in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = random(&[1, ci, h, w], seed);
        let wt = random(&[co, ci, k, k], seed ^ 0x55);
        let got = kernels::conv2d(&x, &wt, None, stride, pad);
        let want = conv_reference(&x, &wt, None, stride, pad);
        prop_assert!(max_abs_diff(got.data(), want.data()) < 1e-12);
    }

    #[test]
    fn reflect_pad_keeps_interior(h in 3usize..8, w in 3usize..8, p in 1usize..3, seed in any::<u64>()) {
        prop_assume!(p < h && p < w);
        let x = random(&[1, 2, h, w], seed);
        let y = kernels::reflect_pad(&x, p);
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    prop_assert_eq!(y.data()[(c * ph + i + p) * pw + j + p], x.data()[(c * h + i) * w + j]);
                }
            }
            // Mirror without repeating the edge.
            prop_assert_eq!(y.data()[(c * ph + p) * pw], x.data()[(c * h) * w + p]);
        }
    }
}
