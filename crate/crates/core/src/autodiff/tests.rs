use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Central differences computed directly on raw arrays.
fn numeric_grad(x: &Matrix, eps: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    g
}

fn max_rel(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

#[test]
fn layer_norm_of_zero_row() {
    let t = Tape::detached();
    let x = t.leaf(Matrix::zeros(1, 4)).unwrap();
    let g = t.constant(Matrix::filled(1, 4, 1.0)).unwrap();
    let b = t.constant(Matrix::zeros(1, 4)).unwrap();
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0; 4]);
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Tape::detached();
    let x = t.leaf(random(3, 6, &mut rng)).unwrap();
    let g = t.constant(Matrix::filled(1, 6, 1.0)).unwrap();
    let b = t.constant(Matrix::zeros(1, 6)).unwrap();
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    let v = t.value(y);
    for r in 0..3 {
        let mean: f64 = v.row(r).iter().sum::<f64>() / 6.0;
        let var: f64 = v.row(r).iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn logsumexp_values() {
    assert!((logsumexp(&[0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    let big = logsumexp(&[1000.0, 1000.0]);
    assert!(big.is_finite());
    assert!((big - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);

    let t = Tape::detached();
    let x = t.leaf(Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]).unwrap()).unwrap();
    let y = t.logsumexp(x).unwrap();
    assert!((t.value(y).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((t.value(y).get(1, 0) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a0 = random(3, 4, &mut rng);
    let b0 = random(4, 2, &mut rng);
    let w = random(3, 2, &mut rng);

    let t = Tape::detached();
    let a = t.leaf(a0.clone()).unwrap();
    let b = t.leaf(b0.clone()).unwrap();
    let wv = t.constant(w.clone()).unwrap();
    let prod = t.matmul(a, b).unwrap();
    let loss = t.sum(t.mul(prod, wv).unwrap()).unwrap();
    let grads = t.backward(loss).unwrap();

    let f = |a: &Matrix, b: &Matrix| {
        a.matmul(b)
            .data()
            .iter()
            .zip(w.data())
            .map(|(x, y)| x * y)
            .sum::<f64>()
    };
    let na = numeric_grad(&a0, 1e-5, |a| f(a, &b0));
    let nb = numeric_grad(&b0, 1e-5, |b| f(&a0, b));
    assert!(max_rel(grads.wrt(a).unwrap(), &na) < 1e-7);
    assert!(max_rel(grads.wrt(b).unwrap(), &nb) < 1e-7);
}

#[test]
fn backward_trivial_cases() {
    let x0 = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
    let t = Tape::detached();
    let x = t.leaf(x0.clone()).unwrap();
    let loss = t.sum(x).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);

    let t = Tape::detached();
    let x = t.leaf(x0.clone()).unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.scale(t.sum(sq).unwrap(), 0.5).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &x0);
}

#[test]
fn backward_rejects_non_scalar() {
    let t = Tape::detached();
    let x = t.leaf(Matrix::zeros(2, 2)).unwrap();
    assert!(matches!(t.backward(x), Err(Error::Autodiff(_))));
}

#[test]
fn shape_errors() {
    let t = Tape::detached();
    let a = t.leaf(Matrix::zeros(2, 3)).unwrap();
    let b = t.leaf(Matrix::zeros(2, 3)).unwrap();
    assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
    let c = t.leaf(Matrix::zeros(3, 2)).unwrap();
    assert!(matches!(t.add(a, c), Err(Error::Shape { .. })));
    assert!(matches!(t.row_select(a, &[2]), Err(Error::Shape { .. })));
    assert!(matches!(t.slice_cols(a, 2, 4), Err(Error::Shape { .. })));
    assert!(matches!(t.concat_rows(&[a, c]), Err(Error::Shape { .. })));
    assert!(t.dropout(a, 1.0).is_err());
}

#[test]
fn non_finite_is_an_error() {
    let t = Tape::detached();
    let a = t.leaf(Matrix::filled(1, 2, 1e300)).unwrap();
    assert!(matches!(t.mul(a, a), Err(Error::NonFinite("mul"))));
    assert!(t.leaf(Matrix::filled(1, 1, f64::NAN)).is_err());
}

#[test]
fn dropout_train_and_eval() {
    let mut store = ParamStore::new();
    let p = store.add("x", Matrix::filled(20, 20, 1.0), false);

    let eval = Tape::eval(&store);
    let x = eval.param(p);
    let y = eval.dropout(x, 0.5).unwrap();
    assert_eq!(*eval.value(y), *store.get(p));

    let train = Tape::train(&store, 9);
    let x = train.param(p);
    let y = train.dropout(x, 0.5).unwrap();
    let v = train.value(y);
    assert!(v.data().iter().all(|&u| u == 0.0 || u == 2.0));
    let kept = v.data().iter().filter(|&&u| u == 2.0).count();
    assert!(kept > 120 && kept < 280, "{kept}");
    drop(v);

    let again = Tape::train(&store, 9);
    let y2 = again.dropout(again.param(p), 0.5).unwrap();
    assert_eq!(*train.value(y), *again.value(y2));
}

/// Builds a store holding the given inputs and checks `f` through
/// [`grad_check`].
fn check(inputs: Vec<Matrix>, tol: f64, f: impl Fn(&Tape, &[Var]) -> crate::Result<Var> + Sync) {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, m)| store.add(format!("in{i}"), m, true))
        .collect();
    let report = grad_check(
        &store,
        |t| {
            let vars: Vec<Var> = ids.iter().map(|&i| t.param(i)).collect();
            f(t, &vars)
        },
        GradCheckOptions {
            tolerance: tol,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn primitives_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(3, 4, &mut rng);
    let b = random(3, 4, &mut rng);
    let w = random(4, 5, &mut rng);
    let row = random(1, 4, &mut rng);
    let weights = random(3, 4, &mut rng);

    // Weighted sum keeps the output gradient non-uniform.
    let reduce = move |t: &Tape, v: Var| -> crate::Result<Var> {
        let w = t.constant(Matrix::from_vec(v.rows(), v.cols(), (0..v.rows() * v.cols()).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect())?)?;
        t.sum(t.mul(v, w)?)
    };

    check(vec![a.clone(), w.clone()], 1e-7, move |t, v| reduce(t, t.matmul(v[0], v[1])?));
    check(vec![a.clone(), b.clone()], 1e-7, move |t, v| reduce(t, t.add(v[0], v[1])?));
    check(vec![a.clone(), b.clone()], 1e-7, move |t, v| reduce(t, t.sub(v[0], v[1])?));
    check(vec![a.clone(), b.clone()], 1e-7, move |t, v| reduce(t, t.mul(v[0], v[1])?));
    check(vec![a.clone(), row.clone()], 1e-7, move |t, v| reduce(t, t.add_row(v[0], v[1])?));
    check(vec![a.clone(), b.clone()], 1e-7, move |t, v| reduce(t, t.concat_cols(&[v[0], v[1]])?));
    check(vec![a.clone(), b.clone()], 1e-7, move |t, v| reduce(t, t.concat_rows(&[v[0], v[1]])?));
    check(vec![a.clone()], 1e-7, move |t, v| reduce(t, t.row_select(v[0], &[2, 0, 2])?));
    check(vec![a.clone()], 1e-7, move |t, v| reduce(t, t.sum_rows(v[0], &[1, 1, 2])?));
    check(vec![a.clone()], 1e-7, move |t, v| reduce(t, t.pick(v[0], &[(0, 1), (2, 3), (0, 1)])?));
    check(vec![a.clone()], 1e-7, move |t, v| reduce(t, t.slice_cols(v[0], 1, 3)?));
    check(vec![a.clone()], 1e-7, move |t, v| reduce(t, t.transpose(v[0])?));
    check(vec![a.clone()], 1e-6, move |t, v| reduce(t, t.relu(v[0])?));
    check(vec![a.clone()], 1e-6, move |t, v| reduce(t, t.leaky_relu(v[0], 0.01)?));
    check(vec![a.clone()], 1e-6, move |t, v| reduce(t, t.tanh(v[0])?));
    check(vec![a.clone()], 1e-6, move |t, v| reduce(t, t.sigmoid(v[0])?));
    check(vec![a.clone()], 1e-6, move |t, v| reduce(t, t.log_softmax(v[0])?));
    check(vec![a.clone()], 1e-6, move |t, v| reduce(t, t.logsumexp(v[0])?));
    check(vec![a.clone()], 1e-7, move |t, v| reduce(t, t.scale(t.add_scalar(v[0], 2.0)?, -1.5)?));
    check(vec![a.clone()], 1e-7, move |t, v| t.mean(v[0]));
    let gain = random(1, 4, &mut rng);
    check(vec![weights, gain, row], 1e-6, move |t, v| {
        reduce(t, t.layer_norm(v[0], v[1], v[2], 1e-5)?)
    });
}

#[test]
fn composite_expression_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = random(2, 3, &mut rng);
    let w1 = random(3, 4, &mut rng);
    let w2 = random(4, 4, &mut rng);
    let w3 = random(4, 2, &mut rng);
    let build = |t: &Tape, x: Var, a: Var, b: Var, c: Var| -> crate::Result<Var> {
        let h1 = t.tanh(t.matmul(x, a)?)?;
        let h2 = t.sigmoid(t.matmul(h1, b)?)?;
        let h2 = t.mul(h2, h1)?;
        let out = t.log_softmax(t.matmul(h2, c)?)?;
        t.sum(t.pick(out, &[(0, 1), (1, 0)])?)
    };
    let t = Tape::detached();
    let vars: Vec<Var> = [&x0, &w1, &w2, &w3].iter().map(|m| t.leaf((*m).clone()).unwrap()).collect();
    let loss = build(&t, vars[0], vars[1], vars[2], vars[3]).unwrap();
    let grads = t.backward(loss).unwrap();

    let eval = |x: &Matrix, a: &Matrix, b: &Matrix, c: &Matrix| {
        let t = Tape::detached();
        let v = [x, a, b, c].map(|m| t.leaf(m.clone()).unwrap());
        let l = build(&t, v[0], v[1], v[2], v[3]).unwrap();
        t.scalar(l)
    };
    let mats = [&x0, &w1, &w2, &w3];
    for k in 0..4 {
        let numeric = numeric_grad(mats[k], 1e-5, |m| {
            let mut args = mats.map(|x| x.clone());
            args[k] = m.clone();
            eval(&args[0], &args[1], &args[2], &args[3])
        });
        let rel = max_rel(grads.wrt(vars[k]).unwrap(), &numeric);
        assert!(rel < 1e-6, "input {k}: {rel}");
    }
}

#[test]
fn grad_check_on_linear_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let x = store.add("x", random(4, 3, &mut rng), true);
    let coeffs = random(4, 3, &mut rng);
    let report = grad_check(
        &store,
        |t| {
            let c = t.constant(coeffs.clone())?;
            t.sum(t.mul(t.param(x), c)?)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-9, "{report:?}");
}

#[test]
fn fourth_order_stencil_is_exact_on_cubics() {
    let mut store = ParamStore::new();
    let x = store.add("x", Matrix::from_vec(1, 3, vec![1.0, 1.5, 2.0]).unwrap(), true);
    let cube = |t: &Tape| t.sum(t.mul(t.mul(t.param(x), t.param(x))?, t.param(x))?);
    let check = |stencil| {
        let opts = GradCheckOptions {
            eps: 1e-2,
            stencil,
            ..GradCheckOptions::default()
        };
        grad_check(&store, cube, opts).unwrap().max_rel_error()
    };
    // Two-point error is eps^2 f'''/6 = 1e-4 against a gradient of 3x^2.
    let two = check(Stencil::Central2);
    assert!(two > 1e-6 && two < 2e-5, "{two}");
    assert!(check(Stencil::Central4) < 1e-10);
}

#[test]
fn grad_check_detects_nondeterminism() {
    use std::sync::atomic::{AtomicU64, Ordering};
    let mut store = ParamStore::new();
    let x = store.add("x", Matrix::filled(1, 2, 0.5), true);
    let calls = AtomicU64::new(0);
    let result = grad_check(
        &store,
        |t| {
            let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
            t.scale(t.sum(t.param(x))?, 1.0 + k)
        },
        GradCheckOptions::default(),
    );
    assert!(matches!(result, Err(Error::Autodiff(_))));
}

#[test]
fn gradients_are_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = random(2, 3, &mut rng);
    let (alpha, beta) = (0.7, -1.3);
    let f = |t: &Tape, x: Var| t.sum(t.tanh(x).unwrap());
    let g = |t: &Tape, x: Var| t.sum(t.mul(x, x).unwrap());

    let grad_of = |which: u8| {
        let t = Tape::detached();
        let x = t.leaf(x0.clone()).unwrap();
        let loss = match which {
            0 => f(&t, x).unwrap(),
            1 => g(&t, x).unwrap(),
            _ => {
                let a = t.scale(f(&t, x).unwrap(), alpha).unwrap();
                let b = t.scale(g(&t, x).unwrap(), beta).unwrap();
                t.add(a, b).unwrap()
            }
        };
        t.backward(loss).unwrap().wrt(x).unwrap().clone()
    };
    let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gc.len() {
        let expected = alpha * gf.data()[i] + beta * gg.data()[i];
        assert!((gc.data()[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn repeated_passes_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let w = store.add("w", random(3, 3, &mut rng), true);
    let x = random(2, 3, &mut rng);
    let run = || {
        let t = Tape::grad(&store);
        let xv = t.constant(x.clone()).unwrap();
        let h = t.tanh(t.matmul(xv, t.param(w)).unwrap()).unwrap();
        let loss = t.sum(t.log_softmax(h).unwrap()).unwrap();
        t.backward(loss).unwrap().param_grads(&store)
    };
    let (a, b) = (run(), run());
    for ((_, ga), (_, gb)) in a.iter().zip(b.iter()) {
        let bits_a: Vec<u64> = ga.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = gb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn params_accumulate_across_uses() {
    let mut store = ParamStore::new();
    let p = store.add("p", Matrix::filled(1, 2, 2.0), true);
    let t = Tape::grad(&store);
    let a = t.param(p);
    let b = t.param(p);
    assert_eq!(a, b);
    let loss = t.sum(t.mul(a, b).unwrap()).unwrap();
    let g = t.backward(loss).unwrap().param_grads(&store);
    assert_eq!(g.get(p).data(), &[4.0, 4.0]);
}

#[test]
fn clipping_preserves_direction() {
    let mut store = ParamStore::new();
    let p = store.add("p", Matrix::zeros(1, 2), true);
    let mut g = ParamGrads::zeros_like(&store);
    g.get_mut(p).data_mut().copy_from_slice(&[30.0, 40.0]);
    let before = g.clip_global_norm(10.0);
    assert_eq!(before, 50.0);
    assert!((g.global_norm() - 10.0).abs() < 1e-12);
    assert!((g.get(p).data()[0] - 6.0).abs() < 1e-12);
    g.clip_global_norm(100.0);
    assert!((g.global_norm() - 10.0).abs() < 1e-12);
}
