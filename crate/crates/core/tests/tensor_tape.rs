mod common;

use common::*;
use proptest::prelude::*;
use vitprune::tape::ConvGeometry;
use vitprune::tensor::{gelu, layer_norm, log_softmax, matmul, softmax};
use vitprune::{Error, Precision, Tape, Tensor};

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a.get(&[i, p]) * b.get(&[p, j])).sum();
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 33, 5)] {
        let a = rand_tensor(&[m, k], &mut r);
        let b = rand_tensor(&[k, n], &mut r);
        let got = matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn layer_norm_rows_have_zero_mean_unit_variance() {
    let x = rand_tensor(&[4, 9], &mut rng(2));
    let y = layer_norm(&x, &Tensor::ones(&[9]), &Tensor::zeros(&[9]), 0.0).unwrap();
    for row in y.data().chunks(9) {
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-10);
    }
}

#[test]
fn softmax_and_log_softmax_agree() {
    let x = Tensor::from_rows(&[&[1000.0, 1001.0, 999.0], &[-3.0, 0.0, 2.5]]);
    let p = softmax(&x);
    let lp = log_softmax(&x);
    for row in p.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
    for (a, b) in p.data().iter().zip(lp.data()) {
        assert!((a.ln() - b).abs() < 1e-12);
    }
}

#[test]
fn gelu_reference_values() {
    // x·Φ(x) at a few points.
    let x = Tensor::from_vec(vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
    let want = [-0.045_500_263_896_358_42, -0.15865525393145707, 0.0, 0.8413447460685429, 1.9544997361036416];
    for (g, w) in gelu(&x).data().iter().zip(want) {
        assert!((g - w).abs() < 1e-14, "{g} vs {w}");
    }
}

#[test]
fn remove_then_select_complement() {
    let t = rand_tensor(&[3, 5, 2], &mut rng(3));
    let removed = t.remove(1, &[0, 3]).unwrap();
    let kept = t.select(1, &[1, 2, 4]).unwrap();
    assert_eq!(removed, kept);
    assert_eq!(removed.shape(), &[3, 3, 2]);
}

#[test]
fn tensor_new_checks_length() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
}

#[test]
fn f32_precision_rounds_values() {
    let mut v = vec![0.1f64, 1.0 / 3.0];
    Precision::F32.round(&mut v);
    assert_eq!(v[0], 0.1f32 as f64);
    assert_eq!(v[1], (1.0f32 / 3.0) as f64);
    let mut w = vec![0.1f64];
    Precision::F64.round(&mut w);
    assert_eq!(w[0], 0.1);
}

#[test]
fn backward_needs_a_scalar() {
    let mut tape = Tape::new();
    let x = tape.param_owned(Tensor::zeros(&[2, 2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn gradients_accumulate_over_shared_inputs() {
    // d/dx sum(x·x + x) = 2x + 1
    let x0 = Tensor::from_vec(vec![0.5, -2.0, 3.0]);
    let mut tape = Tape::new();
    let x = tape.param_owned(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.add(sq, x).unwrap();
    let loss = tape.sum_all(s);
    let g = tape.backward(loss).unwrap().get_or_zeros(x);
    assert_eq!(g.data(), &[2.0, -3.0, 7.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let x = tape.param_owned(Tensor::from_vec(vec![3.0, 4.0]));
    let p = tape.mul(c, x).unwrap();
    let loss = tape.sum_all(p);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get_or_zeros(x).data(), &[1.0, 2.0]);
}

#[test]
fn attention_with_one_key_returns_values() {
    // A single key gets all the weight, so each query reads that value row.
    let mut tape = Tape::new();
    let q = tape.constant(rand_tensor(&[1, 3, 4], &mut rng(4)));
    let k = tape.constant(rand_tensor(&[1, 1, 4], &mut rng(5)));
    let v0 = rand_tensor(&[1, 1, 4], &mut rng(6));
    let v = tape.constant(v0.clone());
    let out = tape.attention(q, k, v, 2).unwrap();
    for row in tape.value(out).data().chunks(4) {
        assert_eq!(row, v0.data());
    }
}

#[test]
fn strided_padded_conv_matches_direct_sum() {
    let x = rand_tensor(&[1, 2, 5, 5], &mut rng(7));
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng(8));
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let geom = ConvGeometry {
        stride: 2,
        pad: 1,
        groups: 1,
    };
    let y = tape.conv2d(xv, wv, None, geom).unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    for o in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for c in 0..2 {
                    for a in 0..3 {
                        for b in 0..3 {
                            let (r, q) = ((2 * i + a) as isize - 1, (2 * j + b) as isize - 1);
                            if (0..5).contains(&r) && (0..5).contains(&q) {
                                s += x.get(&[0, c, r as usize, q as usize]) * w.get(&[o, c, a, b]);
                            }
                        }
                    }
                }
                assert!((y.get(&[0, o, i, j]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn patchify_is_channel_major_raster() {
    let x = Tensor::new(vec![1, 2, 4, 4], (0..32).map(f64::from).collect()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let p = tape.patchify(xv, 2).unwrap();
    let p = tape.value(p);
    assert_eq!(p.shape(), &[1, 4, 8]);
    // Second patch (top right): channel 0 rows 0-1 cols 2-3, then channel 1.
    assert_eq!(&p.data()[8..16], &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_gradients_hold_for_any_shape(b in 1usize..4, t in 1usize..4, d_in in 1usize..6, d_out in 1usize..6, seed in 0u64..1000) {
        let mut r = rng(seed);
        let inputs = vec![rand_tensor(&[b, t, d_in], &mut r), rand_tensor(&[d_out, d_in], &mut r), rand_tensor(&[d_out], &mut r)];
        let err = fd_check(&inputs, |tp, v| {
            let y = tp.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(tp, y, seed)
        });
        prop_assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn attention_gradients_hold_for_any_head_split(heads in prop::sample::select(vec![1usize, 2, 3, 6]), tq in 1usize..4, tk in 1usize..4, seed in 0u64..1000) {
        let mut r = rng(seed);
        let inputs = vec![rand_tensor(&[2, tq, 6], &mut r), rand_tensor(&[2, tk, 6], &mut r), rand_tensor(&[2, tk, 6], &mut r)];
        let err = fd_check(&inputs, |tp, v| {
            let y = tp.attention(v[0], v[1], v[2], heads)?;
            weighted_sum(tp, y, seed)
        });
        prop_assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn layer_norm_gradients_hold(rows in 1usize..5, d in 2usize..8, seed in 0u64..1000) {
        let mut r = rng(seed);
        let inputs = vec![rand_tensor(&[rows, d], &mut r), rand_tensor(&[d], &mut r), rand_tensor(&[d], &mut r)];
        let err = fd_check(&inputs, |tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-6)?;
            weighted_sum(tp, y, seed)
        });
        prop_assert!(err < 1e-5, "relative error {err}");
    }
}
