use serde::{Deserialize, Serialize};

use crate::numerics::{Array, NumericsError, Var};

/// Weights of the two regularizers; the MSE term always has weight one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the causal sign-consistency term.
    pub beta_loss: f64,
    /// Weight of the attention entropy term.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_loss: 0.1,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if self.beta_loss >= 0.0 && self.gamma >= 0.0 && self.beta_loss.is_finite() && self.gamma.is_finite() {
            Ok(())
        } else {
            Err(format!("loss weights must be finite and non-negative, got {self:?}"))
        }
    }
}

/// Mean squared error over every horizon step and batch element.
pub fn loss_mse<'t>(y_hat: Var<'t>, y: Var<'t>) -> Result<Var<'t>, NumericsError> {
    let d = y_hat.sub(y)?;
    d.mul(d)?.mean()
}

/// Soft-sign hinge on event elements:
/// `max(0, −tanh(a/s)·tanh((y − y_cf)/s))`, averaged over horizon steps and
/// over the rows with `events[i]` set; zero when no row is set.
///
/// `a_causal`, `y` and `y_cf` are `[B, H]`; `unit` converts their scale to
/// km/h and `s` is one km/h.
pub fn loss_causal<'t>(a_causal: Var<'t>, y: &Array, y_cf: &Array, events: &[bool], unit: f64) -> Result<Var<'t>, NumericsError> {
    let tape = a_causal.tape();
    let h = y.last_dim();
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Ok(tape.constant(Array::scalar(0.0)?));
    }
    // −tanh(residual) on event rows, zero elsewhere
    let weight: Vec<f64> = y
        .data()
        .iter()
        .zip(y_cf.data())
        .enumerate()
        .map(|(i, (&yv, &cf))| if events[i / h] { -((yv - cf) * unit).tanh() } else { 0.0 })
        .collect();
    let w = tape.constant(Array::new(y.shape().to_vec(), weight)?);
    a_causal
        .scale(unit)?
        .tanh()?
        .mul(w)?
        .relu()?
        .sum()?
        .scale(1.0 / (n_events * h) as f64)
}

/// `Σ_t Σ_s α log α` summed over heads, averaged over the batch, with
/// `0 log 0 = 0`. Each map is `[B, T, T]`.
pub fn loss_entropy<'t>(attention: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
    let batch = attention[0].shape()[0] as f64;
    let mut total = attention[0].xlogx()?.sum()?;
    for a in &attention[1..] {
        total = total.add(a.xlogx()?.sum()?)?;
    }
    total.scale(1.0 / batch)
}

/// Phase 1 trains on the MSE alone; later phases add both regularizers.
pub fn composite_loss<'t>(
    mse: Var<'t>,
    causal: Var<'t>,
    entropy: Var<'t>,
    weights: &LossWeights,
    phase: u8,
) -> Result<Var<'t>, NumericsError> {
    if phase <= 1 {
        return Ok(mse);
    }
    mse.add(causal.scale(weights.beta_loss)?)?.add(entropy.scale(weights.gamma)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn arr(shape: &[usize], v: &[f64]) -> Array {
        Array::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let y = arr(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let same = loss_mse(tape.constant(y.clone()), tape.constant(y.clone())).unwrap();
        assert_eq!(same.item(), 0.0);
        let shifted = y.map(|v| v + 2.0).unwrap();
        let off = loss_mse(tape.constant(shifted), tape.constant(y.clone())).unwrap();
        assert!((off.item() - 4.0).abs() < 1e-12);
        let other = arr(&[2, 3], &[0.3, 2.5, -1.0, 0.0, 0.0, 3.0]);
        let direct = other.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 6.0;
        let got = loss_mse(tape.constant(other), tape.constant(y)).unwrap().item();
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn causal_hinge_examples() {
        let tape = Tape::new();
        let y = arr(&[1, 1], &[-5.0]);
        let cf = arr(&[1, 1], &[0.0]);
        let matched = loss_causal(tape.constant(arr(&[1, 1], &[-5.0])), &y, &cf, &[true], 1.0).unwrap();
        assert!(matched.item().abs() < 1e-12);
        let opposed = loss_causal(tape.constant(arr(&[1, 1], &[5.0])), &y, &cf, &[true], 1.0).unwrap();
        assert!((opposed.item() - 5f64.tanh().powi(2)).abs() < 1e-12);
        assert!((opposed.item() - 0.9999).abs() < 1e-4);
        let none = loss_causal(tape.constant(arr(&[1, 1], &[5.0])), &y, &cf, &[false], 1.0).unwrap();
        assert_eq!(none.item(), 0.0);
    }

    #[test]
    fn causal_hinge_uses_km_per_hour_unit() {
        // normalized values with std 10: 0.5 ↦ 5 km/h
        let tape = Tape::new();
        let y = arr(&[2, 1], &[-0.5, 3.0]);
        let cf = arr(&[2, 1], &[0.0, 0.0]);
        let a = tape.constant(arr(&[2, 1], &[0.5, -9.0]));
        let l = loss_causal(a, &y, &cf, &[true, false], 10.0).unwrap();
        assert!((l.item() - 5f64.tanh().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let tape = Tape::new();
        let t = 15;
        let uniform = tape.constant(Array::full(&[1, t, t], 1.0 / t as f64));
        let e = loss_entropy(&[uniform]).unwrap().item();
        assert!((e - 15.0 * (1.0f64 / 15.0).ln()).abs() < 1e-12);
        assert!((e + 40.621).abs() < 1e-3);
        let mut onehot = vec![0.0; t * t];
        for r in 0..t {
            onehot[r * t + r / 2] = 1.0;
        }
        let z = loss_entropy(&[tape.constant(arr(&[1, t, t], &onehot))]).unwrap();
        assert_eq!(z.item(), 0.0);
    }

    #[test]
    fn composite_gating_and_arithmetic() {
        let tape = Tape::new();
        let s = |v: f64| tape.constant(Array::scalar(v).unwrap());
        let w = LossWeights {
            beta_loss: 0.1,
            gamma: 0.01,
        };
        let l3 = composite_loss(s(1.0), s(0.5), s(-2.0), &w, 3).unwrap().item();
        assert!((l3 - 1.03).abs() < 1e-12);
        assert_eq!(composite_loss(s(1.0), s(1e12), s(-2.0), &w, 1).unwrap().item(), 1.0);
        let zero = LossWeights {
            beta_loss: 0.0,
            gamma: 0.0,
        };
        assert_eq!(composite_loss(s(0.7), s(3.0), s(-9.0), &zero, 2).unwrap().item(), 0.7);
    }
}
