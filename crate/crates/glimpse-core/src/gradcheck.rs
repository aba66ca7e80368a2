//! Central finite-difference gradient checking.
//!
//! The numeric side is the independent oracle for every differentiable
//! primitive; it only ever evaluates the function, never the backward pass.
//! Checks are meaningful at f64 only.

use alloc::vec::Vec;

use crate::autodiff::{Tape, TensorId};

/// Relative error metric: |a - n| / max(1, |a|, |n|).
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Checks the gradient of a scalar-valued function of one tensor.
///
/// `f` builds the computation on the given tape from the input leaf and
/// returns the scalar output. Returns the maximum relative error over all
/// coordinates between the analytic gradient and central differences with
/// step `h`.
pub fn grad_check<F>(f: F, point: &[f64], shape: &[usize], h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, TensorId) -> TensorId,
{
    grad_check_multi(
        |tape, xs| {
            let x = xs[0];
            f(tape, x)
        },
        &[(point, shape)],
        h,
    )
}

/// Multi-input variant: checks gradients w.r.t. every listed tensor.
pub fn grad_check_multi<F>(f: F, points: &[(&[f64], &[usize])], h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
{
    // analytic
    let mut tape = Tape::<f64>::new();
    let ids: Vec<TensorId> =
        points.iter().map(|(p, s)| tape.leaf(p.to_vec(), s.to_vec())).collect();
    let out = f(&mut tape, &ids);
    assert_eq!(tape.value(out).len(), 1, "grad_check needs a scalar function");
    tape.backward(out);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(points)
        .map(|(&id, (p, _))| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| alloc::vec![0.0; p.len()]))
        .collect();

    let eval = |datas: &[Vec<f64>]| -> f64 {
        let mut t = Tape::<f64>::no_grad();
        let ids: Vec<TensorId> = datas
            .iter()
            .zip(points)
            .map(|(d, (_, s))| t.leaf(d.clone(), s.to_vec()))
            .collect();
        let out = f(&mut t, &ids);
        t.value(out)[0]
    };

    let base: Vec<Vec<f64>> = points.iter().map(|(p, _)| p.to_vec()).collect();
    let mut worst = 0.0f64;
    for (pi, point) in base.iter().enumerate() {
        for i in 0..point.len() {
            let mut plus = base.clone();
            plus[pi][i] += h;
            let mut minus = base.clone();
            minus[pi][i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let e = rel_err(analytic[pi][i], numeric);
            if e > worst {
                worst = e;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_function_is_exact() {
        // finite differences are exact for affine maps up to rounding
        let e = grad_check(
            |t, x| {
                let w = t.constant(vec![2.0, -3.0, 0.5], vec![1, 3]);
                let y = t.matmul(w, x);
                t.sum_all(y)
            },
            &[0.3, -0.2, 0.9],
            &[3, 1],
            1e-5,
        );
        assert!(e <= 1e-10, "linear grad_check error {e}");
    }

    #[test]
    fn exp_at_zero() {
        let e = grad_check(
            |t, x| {
                let y = t.exp(x);
                t.sum_all(y)
            },
            &[0.0],
            &[1],
            1e-5,
        );
        assert!(e <= 1e-6, "exp grad_check error {e}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // a deliberately doubled gradient must show up as ~0.5 relative error
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![0.7], vec![1]);
        let two = tape.scalar_constant(2.0);
        let y = tape.mul(x, two); // dy/dx = 2, value 1.4
        tape.backward(y);
        let analytic = tape.grad(x).unwrap()[0] * 2.0; // wrong by 2x: 4 vs 2
        let h = 1e-5;
        let numeric = (((0.7 + h) * 2.0) - ((0.7 - h) * 2.0)) / (2.0 * h);
        let e = rel_err(analytic, numeric);
        assert!((e - 0.5).abs() < 1e-6, "expected ~0.5, got {e}");
    }
}
