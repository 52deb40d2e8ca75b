use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Puts each tensor in a fresh store as `p0, p1, ...`.
fn store_of(ts: &[Tensor]) -> (ParameterStore, Vec<ParamId>) {
    let mut s = ParameterStore::new();
    let ids = ts
        .iter()
        .enumerate()
        .map(|(i, t)| s.add(format!("p{i}"), t.clone()).unwrap())
        .collect();
    (s, ids)
}

/// A fixed random projection to a scalar so every output entry matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var, crate::Error> {
    let shape = g.shape(y).to_vec();
    let w = random(&shape, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, crate::Error>,
{
    let (mut store, ids) = store_of(inputs);
    let report = grad_check(
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = f(g, &vars)?;
            probe(g, y, 99)
        },
        &mut store,
        H,
    )
    .unwrap();
    report.max_rel_error
}

const SHAPES: [&[usize]; 3] = [&[3, 4], &[2, 3, 5], &[1, 7]];

#[test]
fn matmul_identity_and_zero() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let z = g.constant(Tensor::zeros([2, 2]));
    let ai = g.matmul(a, i).unwrap();
    assert_eq!(g.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
    let az = g.matmul(a, z).unwrap();
    assert_eq!(g.value(az).data(), &[0.0; 4]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let (a, b) = (random(&[3, 4], &mut r), random(&[4, 5], &mut r));
    let mut oracle = vec![0.0; 15];
    for i in 0..3 {
        for j in 0..5 {
            for k in 0..4 {
                oracle[i * 5 + j] += a.at(&[i, k]) * b.at(&[k, j]);
            }
        }
    }
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(c).data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradients() {
    let mut r = rng(2);
    let shared = check(
        &[random(&[2, 3, 4], &mut r), random(&[4, 2], &mut r)],
        |g, v| g.matmul(v[0], v[1]),
    );
    let batched = check(
        &[random(&[2, 3, 4], &mut r), random(&[2, 4, 5], &mut r)],
        |g, v| g.matmul(v[0], v[1]),
    );
    let plain = check(
        &[random(&[5, 1], &mut r), random(&[1, 3], &mut r)],
        |g, v| g.matmul(v[0], v[1]),
    );
    assert!(
        shared < TOL && batched < TOL && plain < TOL,
        "{shared} {batched} {plain}"
    );
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::from_rows(&[vec![0.0, 2f64.ln()]]).unwrap());
    let y = g.softmax(x).unwrap();
    assert!((g.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-15);
    let x = g.constant(Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::ones([4]));
    let beta = g.constant(Tensor::zeros([4]));
    let x = g.constant(Tensor::new([1, 4], vec![5.0; 4]).unwrap());
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let gamma = g.constant(Tensor::ones([2]));
    let beta = g.constant(Tensor::zeros([2]));
    let x = g.constant(Tensor::new([2], vec![1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, gamma, beta, 1e-300).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -1.0]);
    assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([126, 126, 3]));
    let k = g.constant(Tensor::zeros([16, 16, 3, 8]));
    let y = g.conv2d(x, k, 16).unwrap();
    assert_eq!(g.shape(y), &[7, 7, 8]);

    let x = g.constant(Tensor::ones([4, 4, 1]));
    let k = g.constant(Tensor::ones([2, 2, 1, 1]));
    let y = g.conv2d(x, k, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0; 4]);

    let big = g.constant(Tensor::ones([5, 5, 1, 1]));
    assert!(matches!(
        g.conv2d(x, big, 1),
        Err(crate::Error::Dimension { .. })
    ));
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut r = rng(3);
    let (h, w, cin, kh, kw, cout, stride) = (8, 8, 2, 3, 2, 3, 2);
    let x = random(&[h, w, cin], &mut r);
    let k = random(&[kh, kw, cin, cout], &mut r);
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut g = Graph::new();
    let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(vx, vk, stride).unwrap();
    assert_eq!(g.shape(y), &[oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = 0.0;
                for dy in 0..kh {
                    for dx in 0..kw {
                        for ci in 0..cin {
                            acc += x.at(&[oy * stride + dy, ox * stride + dx, ci])
                                * k.at(&[dy, dx, ci, co]);
                        }
                    }
                }
                assert!((g.value(y).at(&[oy, ox, co]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backward_simple_rules() {
    let mut r = rng(4);
    let x = random(&[3, 2], &mut r);
    let (mut s, ids) = store_of(std::slice::from_ref(&x));
    let mut g = Graph::new();
    let v = g.param(&s, ids[0]);
    let l = g.sum(v).unwrap();
    g.backward(l, &mut s).unwrap();
    assert_eq!(s.grad(ids[0]).data(), &[1.0; 6]);

    s.zero_grad();
    let mut g = Graph::new();
    let v = g.param(&s, ids[0]);
    let sq = g.mul(v, v).unwrap();
    let l = g.sum(sq).unwrap();
    let l = g.scale(l, 0.5).unwrap();
    g.backward(l, &mut s).unwrap();
    assert_eq!(s.grad(ids[0]), &x);
}

#[test]
fn backward_twice_doubles() {
    let mut r = rng(5);
    let (mut s, ids) = store_of(&[random(&[2, 3], &mut r), random(&[3, 2], &mut r)]);
    let mut g = Graph::new();
    let a = g.param(&s, ids[0]);
    let b = g.param(&s, ids[1]);
    let c = g.matmul(a, b).unwrap();
    let c = g.exp(c).unwrap();
    let l = g.sum(c).unwrap();
    g.backward(l, &mut s).unwrap();
    let once: Vec<Tensor> = ids.iter().map(|&i| s.grad(i).clone()).collect();
    g.backward(l, &mut s).unwrap();
    for (i, t) in ids.iter().zip(&once) {
        let doubled = t.map(|v| 2.0 * v);
        assert_eq!(s.grad(*i), &doubled);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut s = ParameterStore::new();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([2]));
    assert!(matches!(
        g.backward(x, &mut s),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn grad_check_linear_is_exact() {
    let mut r = rng(6);
    let w = random(&[3], &mut r);
    let (mut s, ids) = store_of(&[w]);
    let c = random(&[3], &mut r);
    let rep = grad_check(
        |g, st| {
            let v = g.param(st, ids[0]);
            let k = g.constant(c.clone());
            let p = g.mul(v, k)?;
            g.sum(p)
        },
        &mut s,
        H,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-10, "{}", rep.max_rel_error);
    assert_eq!(rep.entries_checked, 3);
}

#[test]
fn grad_check_softmax_cross_entropy() {
    // −log softmax(z)_0 has gradient softmax(z) − e_0.
    let z = Tensor::new([2], vec![0.3, -1.2]).unwrap();
    let (mut s, ids) = store_of(std::slice::from_ref(&z));
    let loss = |g: &mut Graph, st: &ParameterStore| {
        let v = g.param(st, ids[0]);
        let p = g.softmax(v)?;
        let pick = g.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        let p0 = g.mul(p, pick)?;
        let p0 = g.sum(p0)?;
        let lp = g.ln(p0)?;
        g.scale(lp, -1.0)
    };
    let rep = grad_check(loss, &mut s, H).unwrap();
    assert!(rep.max_rel_error < 1e-6, "{}", rep.max_rel_error);
    let e1 = (z.data()[1] - z.data()[0]).exp();
    let p0 = 1.0 / (1.0 + e1);
    let grad = s.grad(ids[0]).data();
    assert!((grad[0] - (p0 - 1.0)).abs() < 1e-12);
    assert!((grad[1] - (1.0 - p0)).abs() < 1e-12);
}

#[test]
fn grad_check_elementwise_catalog() {
    for (si, shape) in SHAPES.iter().enumerate() {
        let mut r = rng(10 + si as u64);
        let a = random(shape, &mut r);
        let b = random(shape, &mut r).map(|v| v + 2.0 * v.signum() + 0.1);
        let errs = [
            check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1])),
            check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])),
            check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])),
            check(&[a.clone(), b.clone()], |g, v| g.div(v[0], v[1])),
            check(std::slice::from_ref(&a), |g, v| g.scale(v[0], -1.7)),
            check(&[a.map(|v| v + 0.05 * v.signum())], |g, v| g.relu(v[0])),
            check(std::slice::from_ref(&a), |g, v| g.exp(v[0])),
            check(&[b.map(f64::abs)], |g, v| g.ln(v[0])),
        ];
        for (k, e) in errs.iter().enumerate() {
            assert!(*e < TOL, "shape {shape:?} op {k}: {e}");
        }
    }
}

#[test]
fn grad_check_broadcast_binary() {
    let mut r = rng(20);
    let a = random(&[2, 3, 4], &mut r);
    let row = random(&[4], &mut r).map(|v| v + 2.0);
    let mid = random(&[2, 1, 4], &mut r).map(|v| v + 2.0);
    assert!(check(&[a.clone(), row.clone()], |g, v| g.add(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), row.clone()], |g, v| g.mul(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), mid.clone()], |g, v| g.div(v[0], v[1])) < TOL);
    assert!(check(&[mid, a], |g, v| g.sub(v[0], v[1])) < TOL);
}

#[test]
fn grad_check_reductions_and_layout() {
    for (si, shape) in SHAPES.iter().enumerate() {
        let mut r = rng(30 + si as u64);
        let a = random(shape, &mut r);
        let last = shape.len() - 1;
        let n: usize = shape.iter().product();
        let errs = [
            check(std::slice::from_ref(&a), |g, v| g.sum(v[0])),
            check(std::slice::from_ref(&a), |g, v| g.mean(v[0])),
            check(std::slice::from_ref(&a), |g, v| g.sum_axis(v[0], 0)),
            check(std::slice::from_ref(&a), |g, v| g.mean_axis(v[0], last)),
            check(std::slice::from_ref(&a), |g, v| g.reshape(v[0], &[n])),
            check(std::slice::from_ref(&a), |g, v| g.transpose(v[0])),
            check(&[a.clone(), a.clone()], |g, v| {
                g.concat(&[v[0], v[1]], last)
            }),
            check(std::slice::from_ref(&a), |g, v| {
                g.gather(v[0], last, &[0, 0, shape[last] - 1])
            }),
            check(std::slice::from_ref(&a), |g, v| g.softmax(v[0])),
        ];
        for (k, e) in errs.iter().enumerate() {
            assert!(*e < TOL, "shape {shape:?} op {k}: {e}");
        }
    }
    let mut r = rng(39);
    let a = random(&[2, 3, 4, 2], &mut r);
    assert!(check(&[a], |g, v| g.permute(v[0], &[2, 0, 3, 1])) < TOL);
}

#[test]
fn grad_check_layer_norm() {
    for (si, shape) in SHAPES.iter().enumerate() {
        let mut r = rng(40 + si as u64);
        let d = *shape.last().unwrap();
        let x = random(shape, &mut r);
        let gamma = random(&[d], &mut r);
        let beta = random(&[d], &mut r);
        let e = check(&[x, gamma, beta], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        });
        assert!(e < TOL, "{shape:?}: {e}");
    }
}

#[test]
fn grad_check_conv_and_pool() {
    let cases: [(&[usize], &[usize], usize); 3] = [
        (&[6, 6, 2], &[3, 3, 2, 3], 1),
        (&[2, 7, 5, 1], &[2, 2, 1, 2], 2),
        (&[1, 8, 8, 3], &[4, 4, 3, 2], 4),
    ];
    for (ci, (xs, ks, stride)) in cases.iter().enumerate() {
        let mut r = rng(50 + ci as u64);
        let e = check(&[random(xs, &mut r), random(ks, &mut r)], |g, v| {
            g.conv2d(v[0], v[1], *stride)
        });
        assert!(e < TOL, "conv case {ci}: {e}");
    }
    for (ci, shape) in [[1, 4, 4, 2], [2, 5, 6, 1], [1, 2, 2, 3]]
        .iter()
        .enumerate()
    {
        let mut r = rng(60 + ci as u64);
        let e = check(&[random(shape, &mut r)], |g, v| g.max_pool2(v[0]));
        assert!(e < TOL, "pool case {ci}: {e}");
    }
}

#[test]
fn grad_check_dropout_frozen_mask() {
    for (si, shape) in SHAPES.iter().enumerate() {
        let mut r = rng(70 + si as u64);
        let x = random(shape, &mut r);
        let n = x.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if r.random::<f64>() < 0.5 { 2.0 } else { 0.0 })
            .collect();
        let e = check(&[x], |g, v| g.dropout_with_mask(v[0], mask.clone()));
        assert!(e < TOL);
    }
}

#[test]
fn dropout_scales_kept_entries() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones([1000]));
    let y = g.dropout(x, 0.5, &mut rng(1)).unwrap();
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let kept = vals.iter().filter(|&&v| v > 0.0).count();
    assert!((400..600).contains(&kept));
    assert!(g.dropout(x, 1.0, &mut rng(1)).is_err());
}

#[test]
fn grad_check_weighted_softmax_and_cosine() {
    for (si, (ls, ws)) in [
        (&[3usize, 4][..], &[3usize, 4][..]),
        (&[2, 3, 3], &[3, 3]),
        (&[2, 2, 5], &[2, 2, 5]),
    ]
    .iter()
    .enumerate()
    {
        let mut r = rng(80 + si as u64);
        let logits = random(ls, &mut r);
        let w = random(ws, &mut r).map(|v| v.abs() + 0.1);
        let e = check(&[logits, w], |g, v| g.weighted_softmax(v[0], v[1]));
        assert!(e < TOL, "weighted softmax {si}: {e}");
    }
    for (si, shape) in [[4usize, 3], [3, 5], [2, 2]].iter().enumerate() {
        let mut r = rng(90 + si as u64);
        let e = check(&[random(shape, &mut r)], |g, v| g.cosine_gram(v[0]));
        assert!(e < TOL, "cosine {si}: {e}");
    }
    let mut r = rng(95);
    let e = check(&[random(&[2, 4, 3], &mut r)], |g, v| g.cosine_gram(v[0]));
    assert!(e < TOL);
}

#[test]
fn weighted_softmax_zero_weights_are_exact_zeros() {
    let mut g = Graph::new();
    let e = g.constant(Tensor::from_rows(&[vec![3.0, -1.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap());
    let w = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap());
    assert!(matches!(
        g.weighted_softmax(e, w),
        Err(crate::Error::DegenerateNeighborhood { row: 1 })
    ));
    let w = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]]).unwrap());
    let y = g.weighted_softmax(e, w).unwrap();
    let y = g.value(y);
    assert_eq!(y.at(&[0, 1]), 0.0);
    assert_eq!(y.data()[3..], [0.0, 1.0, 0.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(7);
        let mut g = Graph::new();
        let a = g.constant(random(&[5, 6], &mut r));
        let b = g.constant(random(&[6, 4], &mut r));
        let c = g.matmul(a, b).unwrap();
        let d = g.softmax(c).unwrap();
        let e = g.dropout(d, 0.3, &mut r).unwrap();
        g.value(e).clone()
    };
    assert_eq!(run(), run());
}

#[cfg(debug_assertions)]
#[test]
fn non_finite_output_is_reported() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(1000.0));
    assert!(matches!(g.exp(x), Err(crate::Error::NonFinite(_))));
}

mod props {
    use proptest::prelude::*;

    use super::super::Graph;
    use crate::tensor::Tensor;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, vals in proptest::collection::vec(-1e3f64..1e3, 40)) {
            let data: Vec<f64> = vals.iter().cycle().take(rows * cols).copied().collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new([rows, cols], data).unwrap());
            let y = g.softmax(x).unwrap();
            for row in g.value(y).data().chunks(cols) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
