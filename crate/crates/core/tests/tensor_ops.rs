use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srmae_core::data::patchify;
use srmae_core::tensor::{
    finite_diff_check, kernels, op_suite, DType, GradCheckOptions, Tape, Tensor,
};
use srmae_core::TensorError;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    t64(shape, &v)
}

fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    (b, c, h, wd): (usize, usize, usize, usize),
    (o, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias[oi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- matmul ----

#[test]
fn matmul_identity_and_arithmetic() {
    let i = t64(&[2, 2], &[1., 0., 0., 1.]);
    let b = t64(&[2, 2], &[5., 6., 7., 8.]);
    assert_eq!(kernels::matmul(&i, &b).unwrap().data(), &[5., 6., 7., 8.]);
    let r = kernels::matmul(&t64(&[1, 2], &[1., 2.]), &t64(&[2, 1], &[3., 4.])).unwrap();
    assert_eq!(r.shape(), &[1, 1]);
    assert_eq!(r.data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (random(&[4, 5], 1), random(&[5, 3], 2));
    let got = kernels::matmul(&a, &b).unwrap();
    assert_eq!(got.shape(), &[4, 3]);
    assert!(max_diff(got.data(), &matmul_oracle(a.data(), b.data(), 4, 5, 3)) < 1e-6);
}

#[test]
fn matmul_broadcasts_batch_extents() {
    let (a, b) = (random(&[3, 2, 4], 3), random(&[4, 5], 4));
    let got = kernels::matmul(&a, &b).unwrap();
    assert_eq!(got.shape(), &[3, 2, 5]);
    for s in 0..3 {
        let oracle = matmul_oracle(&a.data()[s * 8..(s + 1) * 8], b.data(), 2, 4, 5);
        assert!(max_diff(&got.data()[s * 10..(s + 1) * 10], &oracle) < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = kernels::matmul(&random(&[2, 3], 0), &random(&[4, 2], 0)).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, TensorError::Shape { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

// ---- softmax ----

#[test]
fn softmax_examples() {
    let u = kernels::softmax(&t64(&[3], &[0., 0., 0.]), 0).unwrap();
    assert!(max_diff(u.data(), &[1. / 3.; 3]) < 1e-15);
    let s = kernels::softmax(&t64(&[3], &[1000., 0., 0.]), 0).unwrap();
    assert!(s.is_finite());
    assert!(max_diff(s.data(), &[1., 0., 0.]) < 1e-12);
}

#[test]
fn softmax_matches_direct_formula() {
    let x = random(&[7], 9).map(|v| 3.0 * v);
    let got = kernels::softmax(&x, 0).unwrap();
    let z: f64 = x.data().iter().map(|v| v.exp()).sum();
    let oracle: Vec<f64> = x.data().iter().map(|v| v.exp() / z).collect();
    assert!(max_diff(got.data(), &oracle) < 1e-6);
}

// ---- layernorm ----

fn layernorm_plain(x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let tape = Tape::new();
    let d = *x.shape().last().unwrap();
    let out = tape
        .constant(x.clone())
        .layernorm(tape.constant(Tensor::ones(&[d])), tape.constant(Tensor::zeros(&[d])), eps)
        .unwrap();
    out.value()
}

#[test]
fn layernorm_examples() {
    let z = layernorm_plain(&Tensor::full(&[2, 4], 3.5), 1e-5);
    assert!(z.data().iter().all(|&v| v == 0.0));
    let r = layernorm_plain(&t64(&[3], &[1., 2., 3.]), 0.0);
    assert!(max_diff(r.data(), &[-1.5f64.sqrt(), 0.0, 1.5f64.sqrt()]) < 1e-12);
}

#[test]
fn layernorm_output_statistics() {
    let x = random(&[16, 32], 5).map(|v| 4.0 * v + 1.5);
    let y = layernorm_plain(&x, 1e-6);
    for row in y.data().chunks(32) {
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

// ---- gelu ----

fn gelu_value(x: f64) -> f64 {
    let tape = Tape::new();
    tape.constant(t64(&[1], &[x])).gelu().unwrap().value().data()[0]
}

#[test]
fn gelu_examples_and_asymptotes() {
    assert_eq!(gelu_value(0.0), 0.0);
    assert!((gelu_value(10.0) - 10.0).abs() < 1e-9);
    assert!(gelu_value(-10.0).abs() < 1e-9);
    // tanh form at x = 1: 0.5 (1 + tanh(sqrt(2/pi) * 1.044715))
    let expect = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * 1.044715).tanh());
    assert!((gelu_value(1.0) - expect).abs() < 1e-15);
}

#[test]
fn gelu_gradient_matches_finite_difference_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = GradCheckOptions::for_dtype(DType::Float32);
    for _ in 0..64 {
        let x = Tensor::new(vec![1], vec![rng.random_range(-4.0f32..4.0)]).unwrap();
        let r = finite_diff_check(|_, v| v.gelu()?.sum(), &x, &opts).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{x:?}: {r:?}");
    }
}

// ---- conv2d ----

#[test]
fn conv_one_by_one_identity() {
    let x = random(&[2, 1, 4, 5], 6);
    let y = kernels::conv2d(&x, &Tensor::ones(&[1, 1, 1, 1]), Some(&Tensor::zeros(&[1])), 1, 0).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_averaging_kernel_keeps_constant_interior() {
    let x = Tensor::<f64>::full(&[1, 1, 6, 6], 0.7);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
    let y = kernels::conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 1, 1).unwrap();
    for r in 1..5 {
        for c in 1..5 {
            assert!((y.data()[r * 6 + c] - 0.7).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_matches_six_loop_oracle() {
    for (seed, stride, pad) in [(1, 1, 0), (2, 1, 1), (3, 2, 1), (4, 2, 0)] {
        let x = random(&[2, 3, 7, 6], seed);
        let w = random(&[4, 3, 3, 3], seed + 10);
        let b = random(&[4], seed + 20);
        let got = kernels::conv2d(&x, &w, Some(&b), stride, pad).unwrap();
        let (oracle, oh, ow) = conv_oracle(x.data(), w.data(), b.data(), (2, 3, 7, 6), (4, 3), stride, pad);
        assert_eq!(got.shape(), &[2, 4, oh, ow]);
        assert!(max_diff(got.data(), &oracle) < 1e-5);
    }
}

#[test]
fn conv_nonpositive_extent_is_config_error() {
    let err = kernels::conv2d(&random(&[1, 1, 2, 2], 0), &random(&[1, 1, 5, 5], 0), None, 1, 0).unwrap_err();
    assert!(matches!(err, TensorError::Config { .. }), "{err}");
}

// ---- resampling ----

#[test]
fn nearest_identity_and_block_replication() {
    let x = random(&[1, 2, 3, 4], 7);
    assert_eq!(kernels::interpolate_nearest(&x, 3, 4).unwrap().data(), x.data());
    let small = t64(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
    let big = kernels::interpolate_nearest(&small, 4, 4).unwrap();
    #[rustfmt::skip]
    let want = [1., 1., 2., 2.,
                1., 1., 2., 2.,
                3., 3., 4., 4.,
                3., 3., 4., 4.];
    assert_eq!(big.data(), &want);
}

#[test]
fn nearest_source_index_rule() {
    for (src, dst) in [(3usize, 7usize), (5, 2), (56, 224), (7, 3)] {
        for d in 0..dst {
            assert_eq!(kernels::nearest_source(d, src, dst), d * src / dst);
        }
    }
}

#[test]
fn upsampled_lr_patchifies_to_196_tokens() {
    let lr = Tensor::<f32>::zeros(&[1, 3, 56, 56]);
    let up = kernels::interpolate_nearest(&lr, 224, 224).unwrap();
    let seq = patchify(&up, 16).unwrap();
    assert_eq!(seq.tokens.shape(), &[1, 196, 16 * 16 * 3]);
    assert_eq!(seq.grid, (14, 14));
}

#[test]
fn area_downsample_examples() {
    let x = Tensor::<f32>::zeros(&[1, 3, 224, 224]);
    assert_eq!(kernels::downsample_area(&x, 4).unwrap().shape(), &[1, 3, 56, 56]);
    for s in [2, 3, 4] {
        let c = kernels::downsample_area(&Tensor::<f64>::full(&[1, 1, 13, 11], 0.3), s).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.3));
    }
    let x = t64(&[1, 1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>());
    let y = kernels::downsample_area(&x, 2).unwrap();
    // block means of [[1,2,5,6], [3,4,7,8], [9,10,13,14], [11,12,15,16]]
    assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
}

#[test]
fn area_downsample_drops_remainder_and_rejects_other_factors() {
    let x = random(&[1, 1, 7, 8], 8);
    let y = kernels::downsample_area(&x, 3).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    let block: f64 = (0..3).flat_map(|r| (3..6).map(move |c| (r, c))).map(|(r, c)| x.data()[r * 8 + c]).sum();
    assert!((y.data()[1] - block / 9.0).abs() < 1e-12);
    for s in [0, 1, 5] {
        assert!(matches!(kernels::downsample_area(&x, s), Err(TensorError::Config { .. })));
    }
}

#[test]
fn area_downsample_preserves_mean_for_divisible_extents() {
    let x = random(&[2, 2, 12, 12], 12);
    for s in [2, 3, 4] {
        let y = kernels::downsample_area(&x, s).unwrap();
        assert!((y.mean_all() - x.mean_all()).abs() < 1e-6);
    }
}

// ---- indexing ----

#[test]
fn index_select_then_inverse_is_identity() {
    let x = random(&[3, 6, 2], 13);
    let perm = [4, 1, 5, 0, 3, 2];
    let mut inv = [0; 6];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let y = kernels::index_select(&x, 1, &perm).unwrap();
    let back = kernels::index_select(&y, 1, &inv).unwrap();
    assert_eq!(back.data(), x.data());
}

// ---- backward ----

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(t64(&[4], &[1., -2., 3., 0.5]));
    x.sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.; 4]);

    let tape = Tape::new();
    let x = tape.param(t64(&[3], &[1., 2., 3.]));
    x.square().unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2., 4., 6.]);
}

#[test]
fn backward_usage_errors() {
    let tape = Tape::new();
    let x = tape.param(random(&[3], 0));
    let err = tape.backward(x.square().unwrap()).unwrap_err();
    assert!(matches!(err, TensorError::Usage(_)));

    let tape = Tape::new();
    let x = tape.param(random(&[3], 0));
    let loss = x.sum().unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(TensorError::Usage(_))));
}

#[test]
fn every_reachable_leaf_gets_a_gradient() {
    let tape = Tape::new();
    let a = tape.param(random(&[2, 3], 1));
    let b = tape.param(random(&[3, 2], 2));
    let unused = tape.param(random(&[5], 3));
    let frozen = tape.constant(random(&[2, 2], 4));
    a.matmul(b).unwrap().add(frozen).unwrap().sum().unwrap().backward().unwrap();
    assert!(a.grad().is_some() && b.grad().is_some());
    assert!(unused.grad().is_none());
    assert!(frozen.grad().is_none());
}

#[test]
fn composite_graph_passes_gradcheck() {
    let w = random(&[4, 6], 21);
    let target = kernels::softmax(&random(&[3, 6], 22), 1).unwrap();
    let opts = GradCheckOptions::for_dtype(DType::Float64);
    let r = finite_diff_check(
        move |t, x| {
            let y = x.matmul(t.constant(w.clone()))?;
            let y = y.layernorm(t.constant(Tensor::ones(&[6])), t.constant(Tensor::zeros(&[6])), 1e-5)?;
            y.softmax(1)?.mse(t.constant(target.clone()))
        },
        &random(&[3, 4], 23),
        &opts,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
}

// ---- finite differences ----

#[test]
fn gradcheck_of_linear_function_is_exact() {
    let c = random(&[10], 30);
    let opts = GradCheckOptions::for_dtype(DType::Float64);
    let r = finite_diff_check(move |t, x| x.mul(t.constant(c.clone()))?.sum(), &random(&[10], 31), &opts).unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn gradcheck_of_sum_sin_matches_cosine() {
    let opts = GradCheckOptions {
        floor: 0.0,
        ..GradCheckOptions::for_dtype(DType::Float64)
    };
    let r = finite_diff_check(|_, x| x.sin()?.sum(), &random(&[12], 32), &opts).unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn every_registered_op_passes_in_both_dtypes() {
    for case in op_suite::<f64>(0) {
        let r = case.check(&GradCheckOptions::for_dtype(DType::Float64)).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{} (f64): {r:?}", case.label);
    }
    for case in op_suite::<f32>(0) {
        let r = case.check(&GradCheckOptions::for_dtype(DType::Float32)).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{} (f32): {r:?}", case.label);
    }
}

#[test]
fn registry_covers_every_reverse_rule() {
    let ops: std::collections::BTreeSet<&str> = op_suite::<f64>(0).iter().map(|c| c.op).collect();
    for op in [
        "add", "sub", "mul", "scalar_affine", "sin", "matmul", "softmax", "layernorm", "gelu", "conv2d",
        "interpolate_nearest", "downsample_area", "reshape", "permute", "concat", "index_select", "gather_rows",
        "sum", "sum_axis", "mse", "dropout", "cross_entropy",
    ] {
        assert!(ops.contains(op), "{op} missing");
    }
}

#[test]
fn injected_fault_is_caught_for_every_op() {
    for case in op_suite::<f64>(0) {
        let opts = GradCheckOptions {
            fault: Some(case.op.to_string()),
            ..GradCheckOptions::for_dtype(DType::Float64)
        };
        let r = case.check(&opts).unwrap();
        assert!(r.max_rel_error > 1e-5, "{} fault went unnoticed", case.label);
    }
}

#[test]
fn non_finite_output_names_the_op() {
    let tape = Tape::new();
    let x = tape.constant(t64(&[2], &[1e300, 1e300]));
    let err = x.mul(x).unwrap_err();
    assert_eq!(err.to_string(), "mul: produced a non-finite value");
}

// ---- properties ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_oracle_property(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let (a, b) = (random(&[m, k], seed), random(&[k, n], seed ^ 1));
        let got = kernels::matmul(&a, &b).unwrap();
        prop_assert!(max_diff(got.data(), &matmul_oracle(a.data(), b.data(), m, k, n)) < 1e-5);
    }

    #[test]
    fn conv_oracle_property(
        h in 3usize..=8, w in 3usize..=8, c in 1usize..=3, o in 1usize..=3,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..=2, pad in 0usize..=1, seed in any::<u64>(),
    ) {
        let x = random(&[1, c, h, w], seed);
        let wt = random(&[o, c, k, k], seed ^ 2);
        let b = random(&[o], seed ^ 3);
        let got = kernels::conv2d(&x, &wt, Some(&b), stride, pad).unwrap();
        let (oracle, _, _) = conv_oracle(x.data(), wt.data(), b.data(), (1, c, h, w), (o, k), stride, pad);
        prop_assert!(max_diff(got.data(), &oracle) < 1e-5);
    }

    #[test]
    fn softmax_slices_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = random(&[rows, cols], seed).map(|v| v * scale);
        let y = kernels::softmax(&x, 1).unwrap();
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
