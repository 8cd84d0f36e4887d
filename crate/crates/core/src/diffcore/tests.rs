use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_close(actual: f64, expected: f64, tol: f64) {
    assert!(
        (actual - expected).abs() <= tol,
        "expected {expected}, got {actual} (tol {tol})"
    );
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let out = eye.matmul(&a).unwrap();
    assert_eq!(out.data(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_orthogonal_selection() {
    let tape = Tape::new();
    let a = tape.constant(&[1, 2], vec![1.0, 0.0]);
    let b = tape.constant(&[2, 1], vec![0.0, 5.0]);
    let out = a.matmul(&b).unwrap();
    assert_eq!(out.shape(), vec![1, 1]);
    assert_eq!(out.data(), vec![0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]);
    let b = tape.constant(&[2, 2], vec![0.0; 4]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    // d/dA sum(A @ B) with B = [[1],[1]] is all ones.
    let x = vec![0.3, -1.2, 0.7, 2.0];
    let err = grad_check(
        |a| {
            let b = a.tape().constant(&[2, 1], vec![1.0, 1.0]);
            Ok(a.matmul(&b)?.sum())
        },
        &x,
        &[2, 2],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "max rel err {err}");

    let tape = Tape::new();
    let a = tape.tensor(&[2, 2], x, true);
    let b = tape.constant(&[2, 1], vec![1.0, 1.0]);
    let loss = a.matmul(&b).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn softmax_symmetry() {
    let tape = Tape::new();
    let x = tape.constant(&[2], vec![0.0, 0.0]);
    assert_eq!(x.softmax().unwrap().data(), vec![0.5, 0.5]);
}

#[test]
fn softmax_large_input_is_stable() {
    let tape = Tape::new();
    let x = tape.constant(&[2], vec![1000.0, 0.0]);
    let s = x.softmax().unwrap().data();
    assert!(s.iter().all(|v| v.is_finite()));
    assert_close(s[0], 1.0, 1e-12);
    assert!(s[1] >= 0.0 && s[1] < 1e-300);
}

#[test]
fn softmax_matches_high_precision_oracle() {
    // Frozen from a 50-digit arbitrary-precision evaluation of
    // exp(x_i) / sum_j exp(x_j) at x = (1, 2, 3).
    let expected = [
        0.09003057317038046,
        0.24472847105479764,
        0.6652409557748219,
    ];
    let tape = Tape::new();
    let s = tape.constant(&[3], vec![1.0, 2.0, 3.0]).softmax().unwrap();
    for (got, want) in s.data().iter().zip(expected) {
        assert_close(*got, want, 1e-15);
    }
}

#[test]
fn softmax_rejects_nan() {
    let tape = Tape::new();
    let x = tape.constant(&[2], vec![f64::NAN, 0.0]);
    assert!(matches!(
        x.softmax().unwrap_err(),
        DiffError::NonFinite { .. }
    ));
}

#[test]
fn backward_requires_scalar_root() {
    let tape = Tape::new();
    let x = tape.tensor(&[2], vec![1.0, 2.0], true);
    assert!(matches!(
        x.backward().unwrap_err(),
        DiffError::NotScalar { .. }
    ));
}

#[test]
fn backward_root_grad_is_one() {
    let tape = Tape::new();
    let x = tape.tensor(&[3], vec![1.0, 2.0, 3.0], true);
    let loss = x.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(loss.grad().unwrap(), vec![1.0]);
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let tape = Tape::new();
        let x = tape.tensor(&[4], vec![0.31, -0.7, 1.9, 0.001], true);
        let s = x.softmax().unwrap();
        let loss = s.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        x.grad().unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn grad_check_polynomial_is_exact() {
    let err = grad_check(|x| Ok(x.mul(x)?.sum()), &[3.0], &[1], 1e-5).unwrap();
    // Central differences are exact for quadratics up to rounding.
    assert!(err < 1e-9, "err {err}");

    let tape = Tape::new();
    let x = tape.tensor(&[1], vec![3.0], true);
    let y = x.mul(&x).unwrap().sum();
    y.backward().unwrap();
    assert_close(x.grad().unwrap()[0], 6.0, 1e-12);
}

#[test]
fn grad_check_softmax_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let err = grad_check(|t| Ok(t.softmax()?.mul(t)?.sum()), &x, &[5], 1e-5).unwrap();
        assert!(err < 1e-6, "err {err}");
    }
}

#[test]
fn grad_check_rejects_bad_step() {
    assert!(grad_check(|x| Ok(x.sum()), &[1.0], &[1], 1e-2).is_err());
    assert!(grad_check(|x| Ok(x.sum()), &[1.0], &[1], 1e-8).is_err());
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let err = grad_check(|x| Ok(x.exp().exp().sum()), &[800.0], &[1], 1e-5).unwrap_err();
    assert!(matches!(err, DiffError::NonFinite { .. }));
}

#[test]
fn broadcast_row_vector_to_matrix() {
    let tape = Tape::new();
    let m = tape.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let row = tape.constant(&[3], vec![10.0, 20.0, 30.0]);
    let out = m.add(&row).unwrap();
    assert_eq!(out.data(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

    let s = tape.scalar(2.0);
    let scaled = m.mul(&s).unwrap();
    assert_eq!(scaled.data(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
}

#[test]
fn broadcast_rejects_column_vector() {
    let tape = Tape::new();
    let m = tape.constant(&[2, 3], vec![0.0; 6]);
    let col = tape.constant(&[2], vec![0.0; 2]);
    assert!(m.add(&col).is_err());
}

#[test]
fn gather_scatter_round_trip() {
    let tape = Tape::new();
    let src = tape.tensor(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
    let picked = src.gather_rows(&[2, 0, 2]).unwrap();
    assert_eq!(picked.data(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let loss = picked.sum();
    loss.backward().unwrap();
    // Row 2 selected twice, row 1 never.
    assert_eq!(src.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

    assert!(src.gather_rows(&[3]).is_err());
}

#[test]
fn concat_rows_splits_gradient() {
    let tape = Tape::new();
    let a = tape.tensor(&[1, 2], vec![1.0, 2.0], true);
    let b = tape.tensor(&[2, 2], vec![3.0, 4.0, 5.0, 6.0], true);
    let cat = Tensor::concat_rows(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(cat.shape(), vec![3, 2]);
    let loss = cat.mul_scalar(2.0).sum();
    loss.backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
    assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0, 2.0]);
}

/// Every differentiable primitive, checked against central differences on
/// 100 seeded random inputs drawn from [-3, 3] (shifted away from kinks
/// and singularities where the derivative is undefined).
#[test]
fn primitives_pass_grad_check_on_random_inputs() {
    type Builder = fn(&Tensor) -> Result<Tensor>;
    type Case = (&'static str, Builder, fn(f64) -> f64);
    let cases: Vec<Case> = vec![
        ("add", |x| x.add(&x.tape().constant(&[4], vec![0.5; 4]))?.sum().into_ok(), |v| v),
        ("sub", |x| x.sub(&x.tape().constant(&[4], vec![0.5; 4]))?.sum().into_ok(), |v| v),
        ("mul", |x| x.mul(&x.tape().constant(&[4], vec![1.5; 4]))?.sum().into_ok(), |v| v),
        ("div", |x| {
            let d = x.tape().constant(&[4], vec![1.25; 4]);
            x.div(&d)?.sum().into_ok()
        }, |v| v),
        ("div_by_x", |x| {
            let n = x.tape().constant(&[4], vec![2.0; 4]);
            n.div(x)?.sum().into_ok()
        }, |v| if v.abs() < 0.5 { v.signum() * 0.5 + v } else { v }),
        ("neg", |x| x.neg().sum().into_ok(), |v| v),
        ("add_scalar", |x| x.add_scalar(0.7).sum().into_ok(), |v| v),
        ("mul_scalar", |x| x.mul_scalar(-1.3).sum().into_ok(), |v| v),
        ("exp", |x| x.exp().sum().into_ok(), |v| v),
        ("log", |x| x.log()?.sum().into_ok(), |v| v.abs() + 0.1),
        ("sqrt", |x| x.sqrt()?.sum().into_ok(), |v| v.abs() + 0.1),
        ("relu", |x| x.relu().sum().into_ok(), |v| if v.abs() < 0.01 { v + 0.05 } else { v }),
        ("clamp", |x| x.clamp(-1.0, 1.0).sum().into_ok(), |v| {
            // keep clear of the clamp boundaries where the derivative jumps
            if (v.abs() - 1.0).abs() < 0.01 { v * 1.1 } else { v }
        }),
        ("matmul", |x| {
            let m = x.reshape(&[2, 2])?;
            let w = x.tape().constant(&[2, 2], vec![0.3, -0.8, 1.1, 0.4]);
            m.matmul(&w)?.sum().into_ok()
        }, |v| v),
        ("transpose", |x| x.reshape(&[2, 2])?.transpose()?.mul_scalar(2.0).sum().into_ok(), |v| v),
        ("softmax", |x| x.softmax()?.mul(x)?.sum().into_ok(), |v| v),
        ("log_softmax", |x| {
            let w = x.tape().constant(&[4], vec![0.1, 0.2, 0.3, 0.4]);
            x.log_softmax()?.mul(&w)?.sum().into_ok()
        }, |v| v),
        ("sum", |x| x.sum().into_ok(), |v| v),
        ("mean", |x| x.mean().into_ok(), |v| v),
        ("gather_rows", |x| x.reshape(&[4, 1])?.gather_rows(&[3, 1, 3])?.sum().into_ok(), |v| v),
        ("concat_rows", |x| {
            let a = x.reshape(&[4, 1])?;
            Tensor::concat_rows(&[a.clone(), a])?.mul_scalar(0.5).sum().into_ok()
        }, |v| v),
        ("reshape", |x| x.reshape(&[2, 2])?.mul_scalar(3.0).sum().into_ok(), |v| v),
        ("l2_norm", |x| x.l2_norm(), |v| v + 5.0),
        ("squared_distance", |x| {
            let y = x.tape().constant(&[4], vec![0.2, -0.4, 1.0, 0.9]);
            x.squared_distance(&y)
        }, |v| v),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (name, build, adjust) in cases {
        let mut worst = 0.0_f64;
        for _ in 0..100 {
            let x: Vec<f64> = (0..4)
                .map(|_| adjust(rng.random_range(-3.0..3.0)))
                .collect();
            let err = grad_check(build, &x, &[4], 1e-5)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            worst = worst.max(err);
        }
        assert!(worst < 1e-6, "{name}: max rel err {worst}");
    }
}

// small helper so the table above stays readable
trait IntoOk {
    fn into_ok(self) -> Result<Tensor>;
}

impl IntoOk for Tensor {
    fn into_ok(self) -> Result<Tensor> {
        Ok(self)
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-1e3..1e3f64, 1..12)) {
            let tape = Tape::new();
            let t = tape.constant(&[xs.len()], xs);
            let s = t.softmax().unwrap().data();
            let total: f64 = s.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            // exp underflows to exactly 0.0 for gaps beyond ~745, so only
            // non-negativity can hold across the whole input range.
            prop_assert!(s.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn sum_grad_is_all_ones(xs in proptest::collection::vec(-3.0..3.0f64, 1..16)) {
            let tape = Tape::new();
            let t = tape.tensor(&[xs.len()], xs.clone(), true);
            t.sum().backward().unwrap();
            prop_assert_eq!(t.grad().unwrap(), vec![1.0; xs.len()]);
        }
    }
}
