use super::{Array, NumericsError, Tape, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// Returns `max_i |g_ad - g_fd| / (|g_fd| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, point: &Array, step: f64) -> Result<f64, NumericsError>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, NumericsError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(NumericsError::InvalidStep(step));
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.param(point.clone());
        let y = f(x)?;
        if y.value().len() != 1 {
            return Err(NumericsError::shape("finite_difference_check", &[&y.shape()]));
        }
        y.backward().get(x)
    };

    let eval = |values: Vec<f64>, coordinate: usize| -> Result<f64, NumericsError> {
        let shifted = Array::new(point.shape().to_vec(), values).map_err(|_| NumericsError::NonFinite {
            context: format!("finite-difference probe at coordinate {coordinate}"),
        })?;
        let tape = Tape::new();
        let x = tape.constant(shifted);
        let y = f(x).map_err(|e| match e {
            NumericsError::NonFinite { context } => NumericsError::NonFinite {
                context: format!("{context} (probing coordinate {coordinate})"),
            },
            other => other,
        })?;
        Ok(y.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        plus[i] += step;
        let mut minus = point.data().to_vec();
        minus[i] -= step;
        let fd = (eval(plus, i)? - eval(minus, i)?) / (2.0 * step);
        if !fd.is_finite() {
            return Err(NumericsError::NonFinite {
                context: format!("central difference at coordinate {i}"),
            });
        }
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        let x = Array::vector(&[3.0]).unwrap();
        let err = finite_difference_check(|v| v.mul(v)?.sum(), &x, 1e-5).unwrap();
        assert!(err <= 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function_has_exact_zero_gradient() {
        let x = Array::vector(&[0.3, -2.0]).unwrap();
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let c = tape.constant(Array::scalar(4.0).unwrap());
        let y = v.scale(0.0).unwrap().sum().unwrap().add(c).unwrap();
        let g = y.backward().get(v);
        assert!(g.data().iter().all(|&d| d == 0.0));
        let err = finite_difference_check(|v| v.scale(0.0)?.sum()?.add_scalar(4.0), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_tanh_matches_differences() {
        let x = Array::vector(&[0.3, -0.7]).unwrap();
        let err = finite_difference_check(|v| v.tanh()?.sum(), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn rejects_bad_step_and_reports_non_finite() {
        let x = Array::vector(&[1.0]).unwrap();
        assert!(matches!(
            finite_difference_check(|v| v.sum(), &x, 0.0),
            Err(NumericsError::InvalidStep(_))
        ));
        let x = Array::vector(&[700.0]).unwrap();
        let err = finite_difference_check(|v| v.exp()?.exp()?.sum(), &x, 1e-5).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }
}
