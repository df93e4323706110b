use crate::cpn::ModelState;
use crate::numerics::Array;

/// Adam with decoupled weight decay, applied to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(state: &ModelState, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = state.values().iter().map(|a| vec![0.0; a.len()]).collect();
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clears the moments of parameter `i`.
    pub fn reset(&mut self, i: usize) {
        self.m[i].fill(0.0);
        self.v[i].fill(0.0);
    }

    /// Updates every parameter that has a gradient; `None` entries are left
    /// untouched bit for bit.
    pub fn step(&mut self, state: &mut ModelState, grads: &[Option<Array>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let decay = state.values()[i].ndim() >= 2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = state.data_mut(i);
            for (j, &gj) in g.data().iter().enumerate() {
                if decay {
                    p[j] -= self.learning_rate * self.weight_decay * p[j];
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm over every present gradient.
pub fn global_norm(grads: &[Option<Array>]) -> f64 {
    grads.iter().flatten().map(Array::norm_sq).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Array>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
