use proptest::prelude::*;
use reltab_core::tensor::{grad_check, ParamStore, SoftmaxMask, Tape, DEFAULT_GRAD_FLOOR};
use reltab_core::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn softmax(t: &Tensor, mask: Option<&SoftmaxMask>) -> Tensor {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(t.clone());
    let y = tape.row_softmax(x, mask).unwrap();
    tape.value(y).clone()
}

/// Cross entropy written out the long way.
fn naive_ce(row: &[f64], target: usize) -> f64 {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    -(row[target].exp() / z).ln()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(t in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let p = softmax(&t, None);
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(t in matrix(3, 5), shift in -50.0f64..50.0) {
        let shifted = t.map(|v| v + shift);
        prop_assert!(softmax(&t, None).max_abs_diff(&softmax(&shifted, None)) < 1e-12);
    }

    #[test]
    fn masked_keys_get_zero(t in matrix(4, 5), keep in prop::collection::vec(any::<bool>(), 5)) {
        prop_assume!(keep.iter().any(|&k| k));
        let mask = SoftmaxMask { keys: keep.clone(), rows_per_entry: 4 };
        let p = softmax(&t, Some(&mask));
        for r in 0..4 {
            for (j, &k) in keep.iter().enumerate() {
                if !k {
                    prop_assert_eq!(p.row(r)[j], 0.0);
                }
            }
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(t in matrix(3, 6)) {
        prop_assume!((0..3).all(|r| {
            let row = t.row(r);
            row.iter().any(|v| (v - row[0]).abs() > 1e-3)
        }));
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(t);
        let g = tape.constant(Tensor::filled(&[6], 1.0));
        let b = tape.constant(Tensor::zeros(&[6]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let y = tape.value(y);
        for r in 0..3 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_matmul(t in matrix(4, 3)) {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(t.clone());
        let i = tape.constant(Tensor::eye(3));
        let left = tape.constant(Tensor::eye(4));
        let y = tape.matmul(a, i).unwrap();
        let z = tape.matmul(left, a).unwrap();
        prop_assert_eq!(tape.value(y), &t);
        prop_assert_eq!(tape.value(z), &t);
    }

    #[test]
    fn cross_entropy_matches_naive(t in matrix(4, 7), targets in prop::collection::vec(0usize..7, 4)) {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(t.clone());
        let l = tape.cross_entropy(x, &targets).unwrap();
        for (r, &target) in targets.iter().enumerate() {
            let expected = naive_ce(t.row(r), target);
            prop_assert!((tape.value(l).data()[r] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn sum_of_product_gradient(a in matrix(3, 4), b in matrix(4, 2)) {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let y = tape.matmul(va, vb).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        let ga = g.of(va).unwrap();
        let gb = g.of(vb).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let expected: f64 = b.row(k).iter().sum();
                prop_assert!((ga.row(i)[k] - expected).abs() < 1e-12);
            }
        }
        for k in 0..4 {
            let expected: f64 = (0..3).map(|i| a.row(i)[k]).sum();
            prop_assert!(gb.row(k).iter().all(|v| (v - expected).abs() < 1e-12));
        }
    }

    #[test]
    fn square_gradient_is_twice_x(x in prop::collection::vec(-10.0f64..10.0, 1..10)) {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let v = tape.leaf(Tensor::new(vec![x.len()], x.clone()).unwrap());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        for (gi, xi) in g.of(v).unwrap().data().iter().zip(&x) {
            prop_assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    for v in [1usize, 2, 10, 1000] {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::filled(&[2, v], 0.37));
        let l = tape.cross_entropy(x, &[0, v - 1]).unwrap();
        for &loss in tape.value(l).data() {
            assert!((loss - (v as f64).ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn square_at_three_has_slope_six() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let v = tape.leaf(Tensor::scalar(3.0));
    let sq = tape.mul(v, v).unwrap();
    let g = tape.backward(sq).unwrap();
    assert_eq!(g.of(v).unwrap().item(), 6.0);
}

#[test]
fn large_logits_stay_finite() {
    let t = Tensor::new(vec![1, 3], vec![1000.0, 999.0, -1000.0]).unwrap();
    let p = softmax(&t, None);
    assert!(p.is_finite());
    let e = 1f64.exp();
    assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
}

#[test]
fn composite_gradient_checks() {
    let a = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 5) as f64 * 0.3 - 0.6);
    let b = Tensor::from_fn(&[4, 4], |i| ((i * 3) % 7) as f64 * 0.2 - 0.5);
    let report = grad_check(
        &[a, b],
        |tape, v| {
            let y = tape.matmul(v[0], v[1])?;
            let y = tape.gelu(y)?;
            let p = tape.row_softmax(y, None)?;
            let l = tape.cross_entropy(p, &[0, 3, 1])?;
            tape.mean(l)
        },
        1e-5,
        DEFAULT_GRAD_FLOOR,
    )
    .unwrap();
    assert!(report.passed(1e-4), "{report:?}");
}

#[test]
fn forward_is_deterministic() {
    let a = Tensor::from_fn(&[5, 6], |i| (i as f64 * 0.13).sin());
    let run = || {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(a.clone());
        let t = tape.transpose(x).unwrap();
        let y = tape.matmul(x, t).unwrap();
        let y = tape.row_softmax(y, None).unwrap();
        tape.value(y).clone()
    };
    let (p, q) = (run(), run());
    assert!(p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn backward_needs_a_scalar() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}
