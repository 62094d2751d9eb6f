use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::ElementwiseOp;
use super::*;
use crate::testutil::max_grad_error;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.variable(&[], vec![0.0]).unwrap();
    let y = g.sigmoid(x);
    assert_eq!(g.item(y), 0.5);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn add_vectors() {
    let mut g = Graph::new();
    let a = g.constant(&[2], vec![1.0, 2.0]).unwrap();
    let b = g.constant(&[2], vec![3.0, 4.0]).unwrap();
    let c = g.elementwise(ElementwiseOp::Add, a, Some(b)).unwrap();
    assert_eq!(g.data(c), &[4.0, 6.0]);
}

#[test]
fn power_rule() {
    let mut g = Graph::new();
    let x = g.variable(&[], vec![0.8]).unwrap();
    let y = g.elementwise(ElementwiseOp::Pow(4.0), x, None).unwrap();
    approx::assert_abs_diff_eq!(g.item(y), 0.4096, epsilon = 1e-15);
    g.backward(y).unwrap();
    approx::assert_abs_diff_eq!(g.grad(x).unwrap()[0], 2.048, epsilon = 1e-14);
}

#[test]
fn incompatible_shapes_name_both() {
    let mut g = Graph::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[2], vec![0.0; 2]).unwrap();
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
}

#[test]
fn trailing_broadcast() {
    let mut g = Graph::new();
    let a = g.variable(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = g.variable(&[3], vec![10.0, 20.0, 30.0]).unwrap();
    let c = g.add(a, b).unwrap();
    assert_eq!(g.data(c), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    assert_eq!(g.grad(a).unwrap(), &[1.0; 6]);
}

#[test]
fn matmul_identity_and_row() {
    let mut g = Graph::new();
    let i = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = g.matmul(i, m).unwrap();
    assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);
    let r = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
    let c = g.constant(&[2, 1], vec![2.0, 3.0]).unwrap();
    let q = g.matmul(r, c).unwrap();
    assert_eq!(g.data(q), &[2.0]);
    assert!(matches!(g.matmul(r, r), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![(vec![3, 4], rand_vec(&mut rng, 12)), (vec![4, 2], rand_vec(&mut rng, 8))];
    let w = rand_vec(&mut rng, 6);
    let err = max_grad_error(&inputs, 1e-4, 1e-4, |g, v| {
        let p = g.matmul(v[0], v[1])?;
        let wv = g.constant(&[3, 2], w.clone())?;
        let s = g.mul(p, wv)?;
        Ok(g.sum(s))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_cases() {
    let mut g = Graph::new();
    let a = g.constant(&[3], vec![0.0; 3]).unwrap();
    let s = g.softmax(a, 0).unwrap();
    for &x in g.data(s) {
        approx::assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
    }
    let b = g.constant(&[2], vec![1000.0, 0.0]).unwrap();
    let s = g.softmax(b, 0).unwrap();
    assert_eq!(g.data(s), &[1.0, 0.0]);
    let c = g.constant(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 7.0]).unwrap();
    for axis in 0..2 {
        let s = g.softmax(c, axis).unwrap();
        let d = g.data(s).to_vec();
        if axis == 1 {
            for r in d.chunks(3) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        } else {
            for j in 0..3 {
                assert!((d[j] + d[3 + j] - 1.0).abs() < 1e-12);
            }
        }
    }
    assert!(g.softmax(c, 2).is_err());
}

#[test]
fn softmax_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for axis in 0..2 {
        let inputs = vec![(vec![3, 4], rand_vec(&mut rng, 12))];
        let w = rand_vec(&mut rng, 12);
        let err = max_grad_error(&inputs, 1e-4, 1e-4, |g, v| {
            let s = g.softmax(v[0], axis)?;
            let wv = g.constant(&[3, 4], w.clone())?;
            let p = g.mul(s, wv)?;
            Ok(g.sum(p))
        });
        assert!(err < 1e-5, "axis {axis}: {err}");
    }
}

#[test]
fn gather_rows_cases() {
    let mut g = Graph::new();
    let a = g
        .variable(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        .unwrap();
    let same = g.gather_rows(a, &[0, 1, 2]).unwrap();
    assert_eq!(g.data(same), g.data(a));
    let p = g.gather_rows(a, &[2, 0, 1]).unwrap();
    assert_eq!(g.data(p), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
    // d/dinput sum(out * w) = w permuted by the inverse permutation
    let w = g.constant(&[3, 2], vec![10.0, 11.0, 20.0, 21.0, 30.0, 31.0]).unwrap();
    let m = g.mul(p, w).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    // inverse of [2,0,1] is [1,2,0]: input row r receives w row inv[r]
    assert_eq!(g.grad(a).unwrap(), &[20.0, 21.0, 30.0, 31.0, 10.0, 11.0]);
    assert!(g.gather_rows(a, &[0, 0, 1]).is_err());
    assert!(g.gather_rows(a, &[0, 1]).is_err());
}

#[test]
fn gather_then_inverse_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.gen_range(1..8);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let mut g = Graph::new();
        let data = rand_vec(&mut rng, n * 3);
        let a = g.variable(&[n, 3], data.clone()).unwrap();
        let b = g.gather_rows(a, &perm).unwrap();
        let c = g.gather_rows(b, &inv).unwrap();
        assert_eq!(g.data(c), &data[..]);
        let w = rand_vec(&mut rng, n * 3);
        let wv = g.constant(&[n, 3], w.clone()).unwrap();
        let m = g.mul(c, wv).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &w[..]);
    }
}

#[test]
fn concat_cases() {
    let mut g = Graph::new();
    let a = g.variable(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let e = g.variable(&[2, 0], vec![]).unwrap();
    let c = g.concat(a, e).unwrap();
    assert_eq!(g.data(c), g.data(a));
    let x = g.variable(&[1, 1], vec![1.0]).unwrap();
    let y = g.variable(&[1, 1], vec![2.0]).unwrap();
    let xy = g.concat(x, y).unwrap();
    assert_eq!(g.data(xy), &[1.0, 2.0]);
    let b = g.variable(&[2, 3], vec![0.0; 6]).unwrap();
    let ab = g.concat(a, b).unwrap();
    let s = g.sum(ab);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
    assert_eq!(g.grad(b).unwrap(), &[1.0; 6]);
    let bad = g.variable(&[3, 1], vec![0.0; 3]).unwrap();
    assert!(matches!(g.concat(a, bad), Err(TensorError::Shape { .. })));
}

#[test]
fn backward_simple_roots() {
    let mut g = Graph::new();
    let x = g.variable(&[], vec![3.0]).unwrap();
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
    assert_eq!(g.grad(y).unwrap(), &[1.0]);
    // accumulation without reset
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
    g.zero_grads();
    assert!(g.grad(x).is_none());

    let mut g = Graph::new();
    let w = g.variable(&[], vec![0.0]).unwrap();
    let x = g.constant(&[], vec![1.0]).unwrap();
    let wx = g.mul(w, x).unwrap();
    let s = g.sigmoid(wx);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[0.25]);
    assert!(g.grad(x).is_none(), "constants never allocate a grad buffer");
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let a = g.variable(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(g.backward(a), Err(TensorError::NonScalarRoot(_))));
}

#[test]
fn deep_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let width = 4;
    let mut inputs = vec![(vec![2, width], rand_vec(&mut rng, 2 * width))];
    for _ in 0..10 {
        let w: Vec<f64> = rand_vec(&mut rng, width * width).iter().map(|x| x * 0.5).collect();
        inputs.push((vec![width, width], w));
        inputs.push((vec![width], rand_vec(&mut rng, width)));
    }
    let err = max_grad_error(&inputs, 1e-4, 1e-4, |g, v| {
        let mut h = v[0];
        for l in 0..10 {
            let z = g.matmul(h, v[1 + 2 * l])?;
            let z = g.add(z, v[2 + 2 * l])?;
            h = if l % 2 == 0 { g.sigmoid(z) } else { g.cos(z) };
        }
        let sq = g.mul(h, h)?;
        Ok(g.sum(sq))
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    type Build = fn(&mut Graph, &[Value]) -> Result<Value>;
    let cases: Vec<(&str, Build)> = vec![
        ("sub", |g, v| g.sub(v[0], v[1])),
        ("mul", |g, v| g.mul(v[0], v[1])),
        ("div", |g, v| {
            let d = g.mul(v[1], v[1])?;
            let d = g.add_const(d, 0.5);
            g.div(v[0], d)
        }),
        ("min", |g, v| g.minimum(v[0], v[1])),
        ("max", |g, v| g.maximum(v[0], v[1])),
        ("neg", |g, v| Ok(g.neg(v[0]))),
        ("log", |g, v| {
            let s = g.sigmoid(v[0]);
            Ok(g.log(s))
        }),
        ("exp", |g, v| Ok(g.exp(v[0]))),
        ("sin", |g, v| Ok(g.sin(v[0]))),
        ("abs", |g, v| Ok(g.abs(v[0]))),
        ("relu", |g, v| Ok(g.relu(v[0]))),
        ("pow", |g, v| {
            let s = g.sigmoid(v[0]);
            Ok(g.pow_const(s, 2.5))
        }),
        ("pow2", |g, v| Ok(g.pow_const(v[0], 2.0))),
        ("rsqrt", |g, v| {
            let s = g.exp(v[0]);
            Ok(g.pow_const(s, -0.5))
        }),
        ("layer_norm", |g, v| g.layer_norm(v[0], 1e-5)),
        ("clamp", |g, v| Ok(g.clamp(v[0], -1.0, 1.0))),
        ("transpose", |g, v| {
            let t = g.transpose(v[0])?;
            g.matmul(t, v[1])
        }),
        ("slice", |g, v| g.slice_cols(v[0], 1, 2)),
        ("take_rows", |g, v| g.take_rows(v[0], &[2, 0, 2])),
        ("sum_rows", |g, v| g.sum_rows(v[0])),
        ("bcast", |g, v| {
            let r = g.slice_cols(v[1], 0, 1)?;
            let r = g.reshape(r, &[3])?;
            let row = g.reshape(r, &[3])?;
            let t = g.transpose(v[0])?;
            g.mul(t, row)
        }),
    ];
    for (name, build) in cases {
        for _ in 0..5 {
            let mut inputs = vec![(vec![3, 3], rand_vec(&mut rng, 9)), (vec![3, 3], rand_vec(&mut rng, 9))];
            // keep away from kinks
            for (_, d) in inputs.iter_mut() {
                for x in d.iter_mut() {
                    if x.abs() < 1e-2 || (x.abs() - 1.0).abs() < 1e-2 {
                        *x += 0.05;
                    }
                }
            }
            if name == "min" || name == "max" {
                for i in 0..9 {
                    if (inputs[0].1[i] - inputs[1].1[i]).abs() < 1e-2 {
                        inputs[1].1[i] += 0.1;
                    }
                }
            }
            let w = rand_vec(&mut rng, 9);
            let err = max_grad_error(&inputs, 1e-4, 1e-4, |g, v| {
                let y = build(g, v)?;
                let n = g.data(y).len();
                let wv = g.constant(g.shape(y).to_vec().as_slice(), w[..n].to_vec())?;
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            });
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn layer_norm_rows() {
    let mut g = Graph::new();
    let x = g.constant(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, -1.0, -1.0, -1.0]).unwrap();
    let y = g.layer_norm(x, 0.0).unwrap();
    let d = g.data(y);
    let s = 1.25f64.sqrt();
    for (a, b) in d[..4].iter().zip([-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s]) {
        assert!((a - b).abs() < 1e-12);
    }
    let y = g.layer_norm(x, 1e-5).unwrap();
    assert_eq!(&g.data(y)[4..], &[0.0; 4]);
}

#[test]
fn deterministic_buffers() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let a = g.variable(&[4, 5], rand_vec(&mut rng, 20)).unwrap();
        let b = g.variable(&[5, 3], rand_vec(&mut rng, 15)).unwrap();
        let p = g.matmul(a, b).unwrap();
        let s = g.softmax(p, 1).unwrap();
        let l = g.log(s);
        let t = g.sum(l);
        g.backward(t).unwrap();
        (g.data(s).to_vec(), g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
    };
    let (x, y) = (run(), run());
    assert_eq!(x, y);
}

#[test]
fn params_bind_and_collect_grads() {
    let mut store = ParamStore::new();
    let w = store.insert("w", &[2], vec![1.0, 2.0]).unwrap();
    assert!(store.insert("w", &[1], vec![0.0]).is_err());
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let sq = g.mul(wv, wv).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let mut grads = Gradients::zeros(&store);
    grads.accumulate(g.param_grads(), 0.5);
    assert_eq!(grads.get(w), &[1.0, 2.0]);
    let before = grads.clip_norm(1.0);
    assert!((before - 5f64.sqrt()).abs() < 1e-12);
    assert!((grads.norm() - 1.0).abs() < 1e-12);
    store.apply_step(&grads, 1.0);
    assert!(store.get(w).data[0] < 1.0);
}
