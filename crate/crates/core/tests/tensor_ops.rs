mod common;

use cct::tensor::{AttentionSpec, Graph, Segment, Tensor, Var};
use common::{grad_check, rng, uniform};
use proptest::prelude::*;
use rand::Rng;

/// Reduces any output to a scalar with fixed pseudo-random weights so every output
/// element carries a distinct upstream gradient.
fn project(g: &mut Graph, v: Var) -> Var {
    let n = g.value(v).numel();
    let w = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    g.weighted_sum(v, w).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let id = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let c = g.matmul(a, id).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let col = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let p = g.matmul(r, col).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[4, 2], -2.0, 2.0);
    let err = grad_check(
        &|g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            project(g, c)
        },
        &[a, b],
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn matmul_bt_gradients_match_finite_differences() {
    let mut r = rng(2);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[5, 4], -2.0, 2.0);
    let err = grad_check(
        &|g, v| {
            let c = g.matmul_bt(v[0], v[1]).unwrap();
            project(g, c)
        },
        &[a, b],
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::from_rows(&[vec![0.0, -3.0, 3.0]]).unwrap());
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data()[0], 0.5);
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);

    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(0.0));
    let s = g.sigmoid(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);

    // relu subgradient at exactly 0 is 0
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(0.0));
    let r = g.relu(x);
    g.backward(r).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0]);
}

#[test]
fn elementwise_shape_mismatch_is_a_dimension_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, b), Err(cct::CctError::Dimension(_))));
    let s = g.constant(Tensor::scalar(2.0));
    let ok = g.mul(a, s).unwrap();
    assert_eq!(g.value(ok).shape(), &[2, 2]);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut r = rng(3);
    let a = uniform(&mut r, &[4, 3], -2.0, 2.0);
    let b = uniform(&mut r, &[4, 3], -2.0, 2.0);
    let s = uniform(&mut r, &[1], -2.0, 2.0);
    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("add", Box::new(|g, v| { let o = g.add(v[0], v[1]).unwrap(); project(g, o) })),
        ("sub", Box::new(|g, v| { let o = g.sub(v[0], v[1]).unwrap(); project(g, o) })),
        ("mul", Box::new(|g, v| { let o = g.mul(v[0], v[1]).unwrap(); project(g, o) })),
        ("scalar-mul", Box::new(|g, v| { let o = g.mul(v[0], v[2]).unwrap(); project(g, o) })),
        ("scale", Box::new(|g, v| { let o = g.scale(v[0], -1.7); project(g, o) })),
        ("relu", Box::new(|g, v| { let o = g.relu(v[0]); project(g, o) })),
        ("sigmoid", Box::new(|g, v| { let o = g.sigmoid(v[0]); project(g, o) })),
        ("abs", Box::new(|g, v| { let o = g.abs(v[0]); project(g, o) })),
        ("clamp", Box::new(|g, v| { let o = g.clamp(v[0], -1.0, 1.0); project(g, o) })),
        ("select_col", Box::new(|g, v| { let o = g.select_col(v[0], 1).unwrap(); project(g, o) })),
        ("sum", Box::new(|g, v| { let o = g.mul(v[0], v[1]).unwrap(); g.sum(o) })),
    ];
    for (name, build) in cases {
        let err = grad_check(&*build, &[a.clone(), b.clone(), s.clone()]);
        assert!(err < 1e-4, "{name}: rel err {err}");
    }
}

#[test]
fn broadcast_ops_gradients_match_finite_differences() {
    let mut r = rng(4);
    let a = uniform(&mut r, &[5, 3], -2.0, 2.0);
    let bias = uniform(&mut r, &[3], -2.0, 2.0);
    let col = uniform(&mut r, &[5, 1], -2.0, 2.0);
    let err = grad_check(
        &|g, v| {
            let o = g.add_bias(v[0], v[1]).unwrap();
            let o = g.mul_col(o, v[2]).unwrap();
            project(g, o)
        },
        &[a, bias, col],
    );
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 4], 3.5));
    let gain = g.constant(Tensor::full(&[4], 1.0));
    let bias = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut r = rng(5);
    let x = g.constant(uniform(&mut r, &[3, 6], -2.0, 2.0));
    let gain = g.constant(Tensor::full(&[6], 1.0));
    let bias = g.constant(Tensor::new(vec![6], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
    let y = g.layer_norm(x, gain, bias).unwrap();
    for row in g.value(y).data().chunks(6) {
        let mean = row.iter().sum::<f64>() / 6.0;
        assert!((mean - 0.35).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_rejects_zero_width() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 0]));
    let e = g.constant(Tensor::zeros(&[0]));
    assert!(matches!(g.layer_norm(x, e, e), Err(cct::CctError::Dimension(_))));
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut r = rng(6);
    let x = uniform(&mut r, &[4, 5], -2.0, 2.0);
    let gain = uniform(&mut r, &[5], -2.0, 2.0);
    let bias = uniform(&mut r, &[5], -2.0, 2.0);
    let err = grad_check(
        &|g, v| {
            let o = g.layer_norm(v[0], v[1], v[2]).unwrap();
            project(g, o)
        },
        &[x, gain, bias],
    );
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![800.0, 0.0, 1.0]]).unwrap());
    let y = g.softmax_rows(x, None).unwrap();
    let v = g.value(y).data();
    for p in &v[..3] {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v[3] - 1.0).abs() < 1e-15 && v[4] < 1e-300);

    let mask = vec![false, false, false, true, false, true];
    let y = g.softmax_rows(x, Some(mask)).unwrap();
    let v = g.value(y).data();
    assert_eq!(&v[..3], &[0.0, 0.0, 0.0]);
    assert_eq!(v[4], 0.0);
}

#[test]
fn softmax_gradients_match_finite_differences() {
    let mut r = rng(7);
    let x = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    let err = grad_check(
        &|g, v| {
            let o = g.softmax_rows(v[0], Some(mask.clone())).unwrap();
            project(g, o)
        },
        &[x],
    );
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[2, 4]));
    let l = g.cross_entropy(logits, &[1, 3], &[1.0, 1.0]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let sat = g.constant(Tensor::from_rows(&[vec![-50.0, 50.0, -50.0]]).unwrap());
    let l = g.cross_entropy(sat, &[1], &[1.0]).unwrap();
    assert!(g.value(l).item() < 1e-40);

    assert!(matches!(
        g.cross_entropy(sat, &[3], &[1.0]),
        Err(cct::CctError::Index(_))
    ));
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut r = rng(8);
    let logits = uniform(&mut r, &[4, 5], -2.0, 2.0);
    let err = grad_check(
        &|g, v| g.cross_entropy(v[0], &[0, 4, 2, 2], &[1.0, 0.0, 0.5, 2.0]).unwrap(),
        &[logits],
    );
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn gather_rows_gradients_match_finite_differences() {
    let mut r = rng(9);
    let table = uniform(&mut r, &[5, 3], -2.0, 2.0);
    let err = grad_check(
        &|g, v| {
            let o = g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
            project(g, o)
        },
        &[table],
    );
    assert!(err < 1e-4, "rel err {err}");
}

fn two_segment_spec(causal: bool, key_mask: Option<Vec<bool>>) -> AttentionSpec {
    AttentionSpec {
        heads: 2,
        segments: vec![
            Segment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 },
            Segment { q_start: 3, q_len: 2, k_start: 3, k_len: 2 },
        ],
        causal,
        key_mask,
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut r = rng(10);
    let q = uniform(&mut r, &[5, 4], -2.0, 2.0);
    let k = uniform(&mut r, &[5, 4], -2.0, 2.0);
    let v = uniform(&mut r, &[5, 4], -2.0, 2.0);
    for (causal, mask) in [
        (false, None),
        (true, None),
        (false, Some(vec![true, false, true, false, false])),
    ] {
        let spec = two_segment_spec(causal, mask);
        let err = grad_check(
            &|g, vs| {
                let o = g.attention(vs[0], vs[1], vs[2], spec.clone()).unwrap();
                project(g, o)
            },
            &[q.clone(), k.clone(), v.clone()],
        );
        assert!(err < 1e-4, "causal={causal}: rel err {err}");
    }
}

#[test]
fn attention_with_every_key_masked_yields_zero_context() {
    let mut r = rng(11);
    let mut g = Graph::new();
    let q = g.constant(uniform(&mut r, &[5, 4], -2.0, 2.0));
    let k = g.constant(uniform(&mut r, &[5, 4], -2.0, 2.0));
    let spec = two_segment_spec(false, Some(vec![true, true, true, false, false]));
    let o = g.attention(q, k, k, spec).unwrap();
    assert!(g.value(o).data()[12..].iter().all(|&x| x == 0.0));
    assert!(g.value(o).data()[..12].iter().any(|&x| x != 0.0));
}

#[test]
fn gated_attention_gradients_match_finite_differences() {
    let mut r = rng(13);
    let q = uniform(&mut r, &[5, 4], -2.0, 2.0);
    let k = uniform(&mut r, &[5, 4], -2.0, 2.0);
    let v = uniform(&mut r, &[5, 4], -2.0, 2.0);
    let w = uniform(&mut r, &[5, 1], 0.05, 0.95);
    for causal in [false, true] {
        let spec = two_segment_spec(causal, None);
        let err = grad_check(
            &|g, vs| {
                let o = g.gated_attention(vs[0], vs[1], vs[2], vs[3], spec.clone()).unwrap();
                project(g, o)
            },
            &[q.clone(), k.clone(), v.clone(), w.clone()],
        );
        assert!(err < 1e-4, "causal={causal}: rel err {err}");
    }
}

#[test]
fn gated_attention_with_binary_weights_is_a_key_mask() {
    let mut r = rng(14);
    let mask = vec![true, false, true, false, false];
    let mut g = Graph::new();
    let q = g.constant(uniform(&mut r, &[5, 4], -2.0, 2.0));
    let k = g.constant(uniform(&mut r, &[5, 4], -2.0, 2.0));
    let v = g.constant(uniform(&mut r, &[5, 4], -2.0, 2.0));
    let w = g.constant(Tensor::new(vec![5, 1], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).unwrap());
    let gated = g.gated_attention(q, k, v, w, two_segment_spec(true, None)).unwrap();
    let masked = g.attention(q, k, v, two_segment_spec(true, Some(mask))).unwrap();
    assert_eq!(g.value(gated).data(), g.value(masked).data());
    let ones = g.constant(Tensor::new(vec![5, 1], vec![1.0; 5]).unwrap());
    let gated = g.gated_attention(q, k, v, ones, two_segment_spec(false, None)).unwrap();
    let plain = g.attention(q, k, v, two_segment_spec(false, None)).unwrap();
    assert_eq!(g.value(gated).data(), g.value(plain).data());
}

#[test]
fn causal_attention_ignores_future_keys() {
    let mut r = rng(12);
    let q = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let k = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let mut k2 = k.clone();
    k2.data_mut()[8..].iter_mut().for_each(|x| *x += 5.0);
    let spec = AttentionSpec {
        heads: 1,
        segments: vec![Segment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 }],
        causal: true,
        key_mask: None,
    };
    let run = |k: &Tensor| {
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
        let o = g.attention(qv, kv, kv, spec.clone()).unwrap();
        g.value(o).clone()
    };
    let (a, b) = (run(&k), run(&k2));
    assert_eq!(&a.data()[..8], &b.data()[..8]);
}

#[test]
fn backward_contract_and_reachability() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
    let w = g.variable(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert!(g.grad(w).is_none());
    assert!(matches!(g.backward(x), Err(cct::CctError::Contract(_))));
}

#[test]
fn backward_is_bit_deterministic() {
    let mut r = rng(13);
    let a = uniform(&mut r, &[6, 8], -2.0, 2.0);
    let b = uniform(&mut r, &[8, 8], -2.0, 2.0);
    let run = || {
        let mut g = Graph::new();
        let (va, vb) = (g.variable(a.clone()), g.variable(b.clone()));
        let h = g.matmul(va, vb).unwrap();
        let h = g.sigmoid(h);
        let l = project(&mut g, h);
        g.backward(l).unwrap();
        (g.grad(va).unwrap().to_vec(), g.grad(vb).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn dropout_is_identity_at_inference_and_inverted_in_training() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[100, 10], 1.0));
    let y = g.dropout::<rand_chacha::ChaCha8Rng>(x, 0.1, None).unwrap();
    assert_eq!(x, y);
    let mut r = rng(14);
    let y = g.dropout(x, 0.1, Some(&mut r)).unwrap();
    let v = g.value(y).data();
    let kept = v.iter().filter(|&&x| x != 0.0).count();
    assert!(v.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.9).abs() < 1e-15));
    assert!((850..950).contains(&kept), "{kept}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[rows, cols], -30.0, 30.0);
        let mask: Vec<bool> = (0..rows * cols).map(|i| i % cols == 0 || r.random_bool(0.6)).collect();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax_rows(xv, Some(mask.clone())).unwrap();
        for (row, m) in g.value(y).data().chunks(cols).zip(mask.chunks(cols)) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for (p, keep) in row.iter().zip(m) {
                if !keep { prop_assert_eq!(*p, 0.0); }
            }
        }
    }

    #[test]
    fn matmul_rows_are_independent_of_batch(m in 1usize..40, k in 1usize..70, n in 1usize..70, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[m, k], -2.0, 2.0);
        let b = uniform(&mut r, &[k, n], -2.0, 2.0);
        let full = cct::tensor::kernels::matmul(a.data(), b.data(), m, k, n);
        let row = r.random_range(0..m);
        let single = cct::tensor::kernels::matmul(a.row(row), b.data(), 1, k, n);
        prop_assert_eq!(&full[row * n..(row + 1) * n], &single[..]);
    }
}
