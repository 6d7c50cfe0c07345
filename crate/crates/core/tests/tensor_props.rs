use std::sync::Arc;

use posmlp_core::tensor::init::{seeded, trunc_normal};
use posmlp_core::tensor::{
    finite_diff_check, gelu, layer_norm, matmul, BatchNormStats, RunningStats, Tape, Tensor, Var,
};
use posmlp_core::Result;
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let p = trunc_normal(tape.shape(y).to_vec(), 1.0, &mut seeded(99));
    let c = tape.constant(p);
    let z = tape.hadamard(y, c)?;
    tape.sum(z)
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    trunc_normal(shape.to_vec(), 1.0, &mut seeded(seed))
}

fn check(name: &str, x: Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let err = finite_diff_check(|t, v| { let y = f(t, v)?; project(t, y) }, &x, H).unwrap();
    assert!(err < TOL, "{name}: {err:e}");
}

#[test]
fn every_taped_op_matches_finite_differences() {
    let other = rand(&[3, 4], 1);
    check("add", rand(&[3, 4], 2), |t, v| { let o = t.constant(other.clone()); t.add(v, o) });
    check("hadamard", rand(&[3, 4], 3), |t, v| { let o = t.constant(other.clone()); t.hadamard(v, o) });
    check("scale", rand(&[3, 4], 4), |t, v| t.scale(v, -1.75));
    let b = rand(&[4, 5], 5);
    check("matmul lhs", rand(&[3, 4], 6), |t, v| { let o = t.constant(b.clone()); t.matmul(v, o) });
    let a = rand(&[3, 4], 7);
    check("matmul rhs", b.clone(), |t, v| { let o = t.constant(a.clone()); t.matmul(o, v) });
    let (w, bias) = (rand(&[4, 5], 8), rand(&[5], 9));
    check("linear x", rand(&[2, 3, 4], 10), |t, v| {
        let (w, b) = (t.constant(w.clone()), t.constant(bias.clone()));
        t.linear(v, w, Some(b))
    });
    let x = rand(&[2, 3, 4], 11);
    check("linear w", w.clone(), |t, v| { let x = t.constant(x.clone()); t.linear(x, v, None) });
    check("linear b", bias.clone(), |t, v| {
        let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
        t.linear(x, w, Some(v))
    });
    let (g, beta) = (rand(&[4], 12), rand(&[4], 13));
    check("layer_norm x", rand(&[3, 4], 14), |t, v| {
        let (g, b) = (t.constant(g.clone()), t.constant(beta.clone()));
        t.layer_norm(v, g, b, 1e-5)
    });
    let xl = rand(&[3, 4], 15);
    check("layer_norm gain", g.clone(), |t, v| {
        let (x, b) = (t.constant(xl.clone()), t.constant(beta.clone()));
        t.layer_norm(x, v, b, 1e-5)
    });
    check("gelu", rand(&[10], 16), |t, v| t.gelu(v));
    let (cw, cb) = (rand(&[3, 3, 2, 3], 17), rand(&[3], 18));
    check("conv2d x", rand(&[2, 4, 4, 2], 19), |t, v| {
        let (w, b) = (t.constant(cw.clone()), t.constant(cb.clone()));
        t.conv2d(v, w, b, 2)
    });
    let cx = rand(&[2, 4, 4, 2], 20);
    check("conv2d w", cw.clone(), |t, v| {
        let (x, b) = (t.constant(cx.clone()), t.constant(cb.clone()));
        t.conv2d(x, v, b, 2)
    });
    check("batch_norm x", rand(&[5, 3], 21), |t, v| {
        let mut stats = RunningStats::new(3);
        let (g, b) = (t.constant(Tensor::new([3], vec![1.0, 2.0, 0.5])?), t.constant(Tensor::zeros([3])));
        t.batch_norm(v, g, b, BatchNormStats::Batch(&mut stats))
    });
    check("reshape", rand(&[2, 6], 22), |t, v| t.reshape(v, [3, 4]));
    check("permute", rand(&[2, 3, 4], 23), |t, v| t.permute(v, &[2, 0, 1]));
    check("slice_channels", rand(&[2, 6], 24), |t, v| t.slice_channels(v, 1, 3));
    check("concat_channels", rand(&[2, 3], 25), |t, v| t.concat_channels(&[v, v]));
    let idx = Arc::new(vec![0, 2, 2, 1, 0, 3]);
    check("gather", rand(&[4], 26), |t, v| t.gather(v, idx.clone(), [2, 3]));
    let r = rand(&[2, 3, 3], 27);
    check("grouped_mix x", rand(&[2, 3, 2, 4], 28), |t, v| { let r = t.constant(r.clone()); t.grouped_mix(v, r, 2, 3, 2) });
    let mx = rand(&[2, 3, 2, 4], 29);
    check("grouped_mix r", r.clone(), |t, v| { let x = t.constant(mx.clone()); t.grouped_mix(x, v, 2, 3, 2) });
    let gx = rand(&[3, 4], 30);
    check("add_group_bias", rand(&[2], 31), |t, v| { let x = t.constant(gx.clone()); t.add_group_bias(x, v) });
    let tx = rand(&[2, 3, 2, 2], 32);
    check("add_token_bias", rand(&[3], 33), |t, v| { let x = t.constant(tx.clone()); t.add_token_bias(x, v, 2, 3, 2) });
    check("mean_tokens", rand(&[2, 3, 4], 34), |t, v| t.mean_tokens(v));
    check("scale_rows", rand(&[4, 3], 35), |t, v| t.scale_rows(v, vec![2.0, 0.0, 1.0, -1.0]));
    let err = finite_diff_check(|t, v| t.softmax_cross_entropy(v, &[2, 0, 1]), &rand(&[3, 4], 36), H).unwrap();
    assert!(err < TOL, "softmax_cross_entropy: {err:e}");
}

fn naive(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    Tensor::new([m, n], out).unwrap()
}

fn bounded(shape: Vec<usize>, seed: u64) -> Tensor {
    let t = trunc_normal(shape, 1.0, &mut seeded(seed));
    Tensor::from_fn(t.shape().to_vec(), |i| 5.0 * t.data()[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in 0u64..10_000) {
        let a = bounded(vec![m, k], seed);
        let b = bounded(vec![k, n], seed + 1);
        prop_assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..=6, c in 2usize..=16, seed in 0u64..10_000) {
        let x = bounded(vec![rows, c], seed);
        let y = layer_norm(&x, &Tensor::ones([c]), &Tensor::zeros([c]), 0.0).unwrap();
        for r in 0..rows {
            let row = &y.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ops_stay_finite_on_bounded_input(values in prop::collection::vec(-10.0f64..10.0, 24)) {
        let x = Tensor::new([2, 3, 4], values).unwrap();
        prop_assert!(gelu(&x).is_finite());
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let g = tape.constant(Tensor::ones([4]));
        let b = tape.constant(Tensor::zeros([4]));
        let ln = tape.layer_norm(v, g, b, 1e-5).unwrap();
        let act = tape.gelu(ln).unwrap();
        let flat = tape.reshape(act, [6, 4]).unwrap();
        let w = tape.constant(Tensor::from_fn([4, 3], |i| x.data()[i] / 10.0));
        let logits = tape.linear(flat, w, None).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 1, 2, 0, 1, 2]).unwrap();
        tape.backward(loss).unwrap();
        prop_assert!(tape.value(loss).is_finite());
        prop_assert!(tape.grad(v).unwrap().is_finite());
    }
}
