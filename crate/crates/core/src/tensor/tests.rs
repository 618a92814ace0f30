use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

const FD_TOL: f64 = 1e-4;

#[test]
fn relu_forward_and_zero_subgradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum_all(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn add_forward() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2], &[1.0, 2.0]));
    let b = tape.leaf(t(&[2], &[3.0, 4.0]));
    let c = tape.elementwise(Elementwise::Add, a, Some(b)).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).item(), 6.0);
}

#[test]
fn elementwise_shape_mismatch_reports_both() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[4, 3]));
    let b = tape.leaf(Tensor::zeros(&[4]));
    match tape.add(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![4, 3]);
            assert_eq!(rhs, vec![4]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(tape.elementwise(Elementwise::Relu, a, Some(b)).is_err());
    assert!(tape.elementwise(Elementwise::Mul, a, None).is_err());
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let b = tape.constant(t(&[2, 1], &[5.0, 7.0]));
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p).shape(), &[2, 1]);
    assert_eq!(tape.value(p).data(), &[5.0, 0.0]);

    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(tape.matmul(a, bad), Err(Error::Shape { .. })));
}

#[test]
fn batched_matmul_matches_per_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let c = tape.matmul(va, vb).unwrap();
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.get(&[bi, i, k]) * b.get(&[bi, k, j])).sum();
                assert!((tape.value(c).get(&[bi, i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);

    let mut prev = 0.0;
    for m in [1.0, 10.0, 100.0, 1000.0] {
        let x = tape.constant(t(&[2], &[m, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let p = tape.value(y).data()[0];
        assert!(p >= prev && p <= 1.0);
        prev = p;
    }
    assert!(1.0 - prev < 1e-12);
    assert!(matches!(tape.softmax(x, 1), Err(Error::Axis { .. })));
}

#[test]
fn reduce_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 2], &[1.0, 5.0, 2.0, 2.0]));
    let m = tape.max(x, 1).unwrap();
    assert_eq!(tape.value(m).data(), &[5.0, 2.0]);

    let ones = tape.constant(Tensor::ones(&[3, 4]));
    let s = tape.sum(ones, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[3.0; 4]);

    let v = tape.leaf(t(&[3], &[2.0, 7.0, 7.0]));
    let mv = tape.max(v, 0).unwrap();
    let g = tape.backward(mv).unwrap();
    assert_eq!(g.get(v).data(), &[0.0, 1.0, 0.0]);

    let empty = tape.leaf(Tensor::zeros(&[2, 0]));
    assert!(matches!(tape.max(empty, 1), Err(Error::EmptyAxis { .. })));
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2], &[1.0, 2.0]));
    let b = tape.leaf(t(&[1], &[3.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.leaf(random(&[2, 3], &mut rng));
    let y = tape.leaf(random(&[2, 5], &mut rng));
    let xy = tape.concat(&[x, y], 1).unwrap();
    assert_eq!(tape.shape(xy), &[2, 8]);
    let x2 = tape.slice(xy, 1, 0, 3).unwrap();
    let y2 = tape.slice(xy, 1, 3, 5).unwrap();
    assert_eq!(tape.value(x2), tape.value(x));
    assert_eq!(tape.value(y2), tape.value(y));

    let z = tape.leaf(Tensor::zeros(&[3, 5]));
    assert!(tape.concat(&[x, z], 1).is_err());
}

#[test]
fn gather_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3, 1], &[10.0, 20.0, 30.0]));
    let g = tape.gather_rows(x, &[2, 0]).unwrap();
    assert_eq!(tape.value(g).data(), &[30.0, 10.0]);

    let d = tape.gather_rows(x, &[1, 1]).unwrap();
    let s = tape.sum_all(d);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).data(), &[0.0, 2.0, 0.0]);

    let id = tape.gather_rows(x, &[0, 1, 2]).unwrap();
    assert_eq!(tape.value(id), tape.value(x));
    assert!(matches!(tape.gather_rows(x, &[3]), Err(Error::Index { .. })));
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
    store.insert("w", Tensor::from_vec(vec![3.0]), true).unwrap();
    let mut tape = Tape::new();
    let p = tape.param(store.expect("p"));
    let w = tape.param(store.expect("w"));
    let root = tape.mul(w, w).unwrap();
    let root = tape.sum_all(root);
    let g = tape.backward(root).unwrap();
    assert_eq!(g.param("p").unwrap().data(), &[0.0, 0.0]);
    assert_eq!(g.get(p).data(), &[0.0, 0.0]);
    assert_eq!(g.param_map().len(), 2);

    let non_scalar = tape.sum(p, 0).unwrap();
    assert!(tape.backward(non_scalar).is_ok());
    assert!(matches!(tape.backward(p), Err(Error::NonScalarRoot(_))));
}

#[test]
fn sum_of_linear_map_gradient_is_replicated_input() {
    // d/dW sum(W·x) = 1·xᵀ: every row equals xᵀ
    let x = t(&[3, 1], &[0.5, -1.0, 2.0]);
    let w = Tensor::zeros(&[2, 3]);
    let mut tape = Tape::new();
    let vw = tape.leaf(w.clone());
    let vx = tape.constant(x.clone());
    let y = tape.matmul(vw, vx).unwrap();
    let s = tape.sum_all(y);
    let g = tape.backward(s).unwrap().get(vw);
    assert_eq!(g.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    let err = check_input_gradients(&[w], FdOptions::default(), |tape, v| {
        let vx = tape.constant(x.clone());
        let y = tape.matmul(v[0], vx)?;
        Ok(tape.sum_all(y))
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn shared_parameter_records_once() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(2.0), true).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(store.expect("w"));
    let b = tape.param(store.expect("w"));
    assert_eq!(a, b);
    let y = tape.mul(a, b).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.param("w").unwrap().item(), 4.0);
}

/// Per-op finite-difference checks at five seeds.
fn fd_seeds(shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        worst = worst.max(check_input_gradients(&inputs, FdOptions::default(), &f).unwrap());
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, v: Var) -> crate::Result<Var> {
    let n = tape.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w = tape.constant(Tensor::new(tape.shape(v).to_vec(), w)?);
    let p = tape.mul(v, w)?;
    Ok(tape.sum_all(p))
}

#[test]
fn fd_elementwise_ops() {
    for kind in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
        let e = fd_seeds(&[&[3, 4], &[4]], |tape, v| {
            let y = tape.elementwise(kind, v[0], Some(v[1]))?;
            weighted_sum(tape, y)
        });
        assert!(e < FD_TOL, "{kind:?}: {e}");
    }
    for kind in [Elementwise::Relu, Elementwise::Exp, Elementwise::Negate, Elementwise::Abs] {
        let e = fd_seeds(&[&[5, 3]], |tape, v| {
            let y = tape.elementwise(kind, v[0], None)?;
            weighted_sum(tape, y)
        });
        assert!(e < FD_TOL, "{kind:?}: {e}");
    }
    let e = fd_seeds(&[&[4, 1], &[1, 3]], |tape, v| {
        let y = tape.add(v[0], v[1])?;
        weighted_sum(tape, y)
    });
    assert!(e < FD_TOL, "broadcast add: {e}");
}

#[test]
fn fd_div_and_sqrt() {
    let e = fd_seeds(&[&[6], &[6]], |tape, v| {
        let one = tape.constant(Tensor::full(&[6], 2.0));
        let den = tape.add(v[1], one)?;
        let y = tape.div(v[0], den)?;
        let sq = tape.mul(den, den)?;
        let r = tape.sqrt(sq);
        let z = tape.add(y, r)?;
        weighted_sum(tape, z)
    });
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn fd_matmul() {
    let e = fd_seeds(&[&[3, 4], &[4, 2]], |tape, v| {
        let y = tape.matmul(v[0], v[1])?;
        Ok(tape.sum_all(y))
    });
    assert!(e < 1e-6, "{e}");
    let e = fd_seeds(&[&[2, 3, 4], &[4, 2]], |tape, v| {
        let y = tape.matmul(v[0], v[1])?;
        weighted_sum(tape, y)
    });
    assert!(e < FD_TOL, "{e}");
    let e = fd_seeds(&[&[2, 3, 4], &[2, 4, 2]], |tape, v| {
        let y = tape.matmul(v[0], v[1])?;
        weighted_sum(tape, y)
    });
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn fd_softmax() {
    let e = fd_seeds(&[&[7]], |tape, v| {
        let y = tape.softmax(v[0], 0)?;
        weighted_sum(tape, y)
    });
    assert!(e < 1e-6, "{e}");
    let e = fd_seeds(&[&[3, 4, 2]], |tape, v| {
        let y = tape.softmax(v[0], 1)?;
        weighted_sum(tape, y)
    });
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn fd_reductions_and_shape_ops() {
    let e = fd_seeds(&[&[3, 5, 2]], |tape, v| {
        let m = tape.max(v[0], 1)?;
        let s = tape.sum(v[0], 2)?;
        let a = weighted_sum(tape, m)?;
        let b = weighted_sum(tape, s)?;
        tape.add(a, b)
    });
    assert!(e < FD_TOL, "{e}");
    let e = fd_seeds(&[&[2, 3], &[2, 5]], |tape, v| {
        let c = tape.concat(&[v[0], v[1]], 1)?;
        let s = tape.slice(c, 1, 2, 4)?;
        let r = tape.reshape(s, &[4, 2])?;
        let tr = tape.transpose(r)?;
        weighted_sum(tape, tr)
    });
    assert!(e < FD_TOL, "{e}");
    let e = fd_seeds(&[&[4, 3]], |tape, v| {
        let g = tape.gather_rows(v[0], &[3, 1, 1, 0, 3])?;
        weighted_sum(tape, g)
    });
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn fd_quaternion_ops() {
    let e = fd_seeds(&[&[4], &[4]], |tape, v| {
        let q = tape.quat_mul(v[0], v[1])?;
        weighted_sum(tape, q)
    });
    assert!(e < FD_TOL, "{e}");
    let e = fd_seeds(&[&[4]], |tape, v| {
        let r = tape.quat_to_rotation(v[0])?;
        weighted_sum(tape, r)
    });
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn fd_two_layer_chain() {
    // W2·relu(W1·x)
    let e = fd_seeds(&[&[4, 3], &[2, 4], &[3, 1]], |tape, v| {
        let h = tape.matmul(v[0], v[2])?;
        let h = tape.relu(h);
        let y = tape.matmul(v[1], h)?;
        weighted_sum(tape, y)
    });
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let a = tape.leaf(random(&[4, 6], &mut rng));
        let b = tape.leaf(random(&[6, 3], &mut rng));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.softmax(c, 0).unwrap();
        let e = tape.max(d, 1).unwrap();
        let s = tape.sum_all(e);
        let g = tape.backward(s).unwrap();
        (tape.value(s).item().to_bits(), g.get(a).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(data in prop::collection::vec(-50.0f64..50.0, 1..24), cols in 1usize..4) {
        let rows = data.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v, 0).unwrap();
        for c in 0..cols {
            let s: f64 = (0..rows).map(|r| tape.value(y).get(&[r, c])).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(tape.value(y).data().iter().all(|&p| p >= 0.0 && p <= 1.0));
    }

    #[test]
    fn max_gradient_is_one_hot(data in prop::collection::vec(-3i32..3, 2..20), up in -5.0f64..5.0) {
        let x = Tensor::from_vec(data.iter().map(|&v| v as f64).collect());
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let m = tape.max(v, 0).unwrap();
        let s = tape.scale(m, up);
        let g = tape.backward(s).unwrap().get(v);
        let nonzero: Vec<usize> = (0..g.len()).filter(|&i| g.data()[i] != 0.0).collect();
        let mass: f64 = g.data().iter().sum();
        prop_assert!((mass - up).abs() < 1e-12);
        if up != 0.0 {
            let first = data.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).unwrap().0;
            prop_assert_eq!(nonzero, vec![first]);
        }
    }
}

#[test]
fn norm_last_values_and_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[[3.0, 4.0, 0.0], [0.0, 0.0, 0.0]]));
    let n = tape.norm_last(x).unwrap();
    assert_eq!(tape.shape(n), &[2, 1]);
    assert_eq!(tape.value(n).data(), &[5.0, 0.0]);
    let s = tape.sum_all(n);
    let g = tape.backward(s).unwrap().get(x);
    assert_eq!(g.data(), &[0.6, 0.8, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn fd_norm_last() {
    let e = fd_seeds(&[&[5, 3]], |tape, v| {
        let n = tape.norm_last(v[0])?;
        weighted_sum(tape, n)
    });
    assert!(e < FD_TOL, "{e}");
}
