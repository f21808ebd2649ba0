//! Tape ops against naive reference loops, plus algebraic invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scopeformer::tensor::{conv_output_extent, Padding, Tape, Tensor};

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, depthwise: bool) -> Tensor {
    let (b, h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = w.shape()[0];
    let cout = if depthwise { c } else { w.shape()[3] };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[b, oh, ow, cout]);
    for n in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            let (y, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            let (y, xx) = (y as usize, xx as usize);
                            if depthwise {
                                acc += x.get(&[n, y, xx, co]) * w.get(&[di, dj, co]);
                            } else {
                                for ci in 0..c {
                                    acc += x.get(&[n, y, xx, ci]) * w.get(&[di, dj, ci, co]);
                                }
                            }
                        }
                    }
                    let idx = out.flat_index(&[n, i, j, co]);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop(b in 1usize..3, m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let a = rand_t(&[b, m, k], seed);
        let c = rand_t(&[b, k, n], seed + 1);
        let mut tape = Tape::new();
        let (av, cv) = (tape.constant(a.clone()), tape.constant(c.clone()));
        let y = tape.matmul(av, cv).unwrap();
        let got = tape.value(y);
        for bi in 0..b { for i in 0..m { for j in 0..n {
            let want: f64 = (0..k).map(|p| a.get(&[bi, i, p]) * c.get(&[bi, p, j])).sum();
            prop_assert!((got.get(&[bi, i, j]) - want).abs() < 1e-12);
        }}}
    }

    #[test]
    fn conv2d_matches_direct_loop(
        h in 3usize..8, w in 3usize..8, cin in 1usize..4, cout in 1usize..4,
        k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, same in any::<bool>(), seed in 0u64..1000,
    ) {
        let padding = if same { Padding::Same } else { Padding::Valid };
        prop_assume!(conv_output_extent(h, k, stride, padding).is_ok() && conv_output_extent(w, k, stride, padding).is_ok());
        let x = rand_t(&[2, h, w, cin], seed);
        let wt = rand_t(&[k, k, cin, cout], seed + 7);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
        let y = tape.conv2d(xv, wv, stride, padding).unwrap();
        let want = naive_conv(&x, &wt, stride, padding.amount(k), false);
        prop_assert_eq!(tape.value(y).shape(), want.shape());
        prop_assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn depthwise_matches_direct_loop(h in 3usize..8, w in 3usize..8, c in 1usize..5, stride in 1usize..3, seed in 0u64..1000) {
        let x = rand_t(&[1, h, w, c], seed);
        let wt = rand_t(&[3, 3, c], seed + 3);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
        let y = tape.depthwise_conv2d(xv, wv, stride, Padding::Same).unwrap();
        let want = naive_conv(&x, &wt, stride, 1, true);
        prop_assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in 0u64..1000) {
        let x = rand_t(&[rows, cols], seed).map(|v| v * scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, 1).unwrap();
        for r in tape.value(y).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_standardises(rows in 1usize..5, d in 2usize..12, seed in 0u64..1000) {
        let x = rand_t(&[rows, d], seed).map(|v| 3.0 * v + 1.0);
        let stats = |r: &[f64]| {
            let mean = r.iter().sum::<f64>() / d as f64;
            (mean, r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64)
        };
        let in_var: Vec<f64> = x.data().chunks(d).map(|r| stats(r).1).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[d]));
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(xv, g, b, 1e-5).unwrap();
        for (r, v) in tape.value(y).data().chunks(d).zip(in_var) {
            let (mean, var) = stats(r);
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - v / (v + 1e-5)).abs() < 1e-10, "{var} vs input variance {v}");
        }
    }

    #[test]
    fn transpose_inverse_is_exact(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let x = rand_t(&[a, b, c], seed);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let t = tape.transpose(xv, &[2, 0, 1]).unwrap();
        let back = tape.transpose(t, &[1, 2, 0]).unwrap();
        prop_assert!(tape.value(back).bit_eq(&x));
    }

    #[test]
    fn concat_then_slice_recovers(c1 in 1usize..4, c2 in 1usize..4, seed in 0u64..1000) {
        let a = rand_t(&[2, 3, c1], seed);
        let b = rand_t(&[2, 3, c2], seed + 1);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let cat = tape.concat(&[av, bv], 2).unwrap();
        let sa = tape.slice(cat, 2, 0, c1).unwrap();
        let sb = tape.slice(cat, 2, c1, c1 + c2).unwrap();
        prop_assert!(tape.value(sa).bit_eq(&a));
        prop_assert!(tape.value(sb).bit_eq(&b));
    }
}

#[test]
fn leaf_grads_accumulate_across_backward_calls() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    let once = tape.grad(x).unwrap().clone();
    tape.backward(s).unwrap();
    let twice = tape.grad(x).unwrap();
    assert_eq!(once.data(), &[2.0, -4.0, 1.0]);
    assert!(twice.bit_eq(&once.map(|v| 2.0 * v)));
}

#[test]
fn unreachable_leaf_gets_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    let unused = tape.param(Tensor::ones(&[4]));
    let s = tape.sum_all(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).unwrap().data(), &[0.0; 4]);
}

#[test]
fn gelu_and_sigmoid_reference_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![0.0, 1.0, -800.0]).unwrap());
    let g = tape.gelu(x);
    let s = tape.sigmoid(x);
    // tanh-form GELU at 1: 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)).
    let want = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * 1.044715).tanh());
    assert!((tape.value(g).data()[1] - want).abs() < 1e-15);
    assert_eq!(tape.value(g).data()[0], 0.0);
    assert_eq!(tape.value(s).data()[0], 0.5);
    assert_eq!(tape.value(s).data()[2], 0.0);
}
