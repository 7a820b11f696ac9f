use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xego::ndmath::{grad_check, Tape, Tensor, Var, GRAD_CHECK_EPS};
use xego::Result;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces an arbitrary-shaped output to a scalar with fixed pseudo-random
/// weights so every output coordinate influences the result differently.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.731 + 0.2).sin()).collect();
    let w = tape.leaf(Tensor::new(&shape, w)?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(
    seed: u64,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    grad_check(
        |tape, v| {
            let y = f(tape, v)?;
            weighted_sum(tape, y)
        },
        &params,
        GRAD_CHECK_EPS,
    )
    .unwrap()
}

const TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_transpose(seed in any::<u64>()) {
        let e = check(seed, &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
        prop_assert!(e < TOL, "matmul {e}");
        let e = check(seed, &[&[3, 4]], |t, v| t.transpose(v[0]));
        prop_assert!(e < TOL, "transpose {e}");
    }

    #[test]
    fn elementwise_binary(seed in any::<u64>()) {
        for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
            let e = check(seed, &[&[2, 3], &[2, 3]], |t, v| match op {
                0 => t.add(v[0], v[1]),
                1 => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            });
            prop_assert!(e < TOL, "{name} {e}");
        }
        let e = check(seed, &[&[4, 3], &[3]], |t, v| t.add_row(v[0], v[1]));
        prop_assert!(e < TOL, "add_row {e}");
    }

    #[test]
    fn scalar_ops(seed in any::<u64>()) {
        let e = check(seed, &[&[2, 3], &[1]], |t, v| t.mul_scalar(v[0], v[1]));
        prop_assert!(e < TOL, "mul_scalar {e}");
        let e = check(seed, &[&[2, 3], &[1]], |t, v| t.add_scalar(v[0], v[1]));
        prop_assert!(e < TOL, "add_scalar {e}");
        let e = check(seed, &[&[2, 3]], |t, v| Ok(t.scale(v[0], -2.5)));
        prop_assert!(e < TOL, "scale {e}");
    }

    #[test]
    fn unary(seed in any::<u64>()) {
        let e = check(seed, &[&[3, 3]], |t, v| Ok(t.exp(v[0])));
        prop_assert!(e < TOL, "exp {e}");
        let e = check(seed, &[&[3, 3]], |t, v| Ok(t.sigmoid(v[0])));
        prop_assert!(e < TOL, "sigmoid {e}");
        let e = check(seed, &[&[3, 3]], |t, v| Ok(t.log_sigmoid(v[0])));
        prop_assert!(e < TOL, "log_sigmoid {e}");
        let e = check(seed, &[&[3, 3]], |t, v| Ok(t.relu(v[0])));
        prop_assert!(e < TOL, "relu {e}");
    }

    #[test]
    fn structural(seed in any::<u64>()) {
        let e = check(seed, &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1));
        prop_assert!(e < TOL, "concat cols {e}");
        let e = check(seed, &[&[2, 3], &[1, 3]], |t, v| t.concat(&[v[0], v[1]], 0));
        prop_assert!(e < TOL, "concat rows {e}");
        let e = check(seed, &[&[4, 3]], |t, v| t.gather_rows(v[0], &[2, 0, 2]));
        prop_assert!(e < TOL, "gather {e}");
        let e = check(seed, &[&[2, 3, 2]], |t, v| t.reshape(v[0], &[6, 2]));
        prop_assert!(e < TOL, "reshape {e}");
        for axis in 0..3 {
            let e = check(seed, &[&[2, 3, 4]], |t, v| t.mean_axis(v[0], axis));
            prop_assert!(e < TOL, "mean axis {axis} {e}");
            let e = check(seed, &[&[2, 3, 4]], |t, v| t.sum_axis(v[0], axis));
            prop_assert!(e < TOL, "sum axis {axis} {e}");
        }
        let e = check(seed, &[&[3, 4]], |t, v| t.l2_normalize_rows(v[0]));
        prop_assert!(e < TOL, "l2_normalize {e}");
    }
}

#[test]
fn quadratic_form_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let theta = rand_tensor(&mut rng, &[16]);
    let err = grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        },
        &[theta],
        GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn normalize_near_norm_guard_has_finite_gradient() {
    // ‖x‖ = 1e-12, the same order as the guard; the step has to be far below
    // the row norm for differences to resolve the curvature.
    let x = Tensor::new(&[1, 2], vec![0.6e-12, 0.8e-12]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = tape.l2_normalize_rows(xv).unwrap();
    let s = weighted_sum(&mut tape, y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(xv).unwrap().iter().all(|g| g.is_finite()));

    let err = grad_check(
        |t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            weighted_sum(t, y)
        },
        &[x],
        1e-16,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn non_finite_objective_is_reported() {
    let x = Tensor::scalar(1000.0);
    let r = grad_check(
        |t, v| {
            let e = t.exp(v[0]);
            Ok(t.sum(e))
        },
        &[x],
        GRAD_CHECK_EPS,
    );
    assert!(matches!(r, Err(xego::Error::Numeric(_))));
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[5, 7]);
        let b = rand_tensor(&mut rng, &[7, 3]);
        let mut t = Tape::new();
        let (av, bv) = (t.leaf(a), t.leaf(b));
        let c = t.matmul(av, bv).unwrap();
        let r = t.relu(c);
        let s = weighted_sum(&mut t, r).unwrap();
        t.backward(s).unwrap();
        (t.grad(av).unwrap().to_vec(), t.grad(bv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
