use crate::numerics::{Array, Tape, Var};

use super::{CpnError, ModelConfig, ModelState};

/// Parameters of a [`ModelState`] recorded on a tape.
pub struct Bound<'t, 's> {
    state: &'s ModelState,
    vars: Vec<Var<'t>>,
}

impl<'t, 's> Bound<'t, 's> {
    /// Binds every parameter, as a gradient-receiving leaf when `trainable`
    /// says so and as a constant otherwise.
    pub fn new(tape: &'t Tape, state: &'s ModelState, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = state
            .names()
            .iter()
            .zip(state.values())
            .map(|(n, v)| {
                if trainable(n) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Self { state, vars }
    }

    /// Binds parameters as slices of one flat vector, so a single leaf
    /// carries the gradient of the whole model.
    pub fn from_flat(flat: Var<'t>, state: &'s ModelState) -> Result<Self, CpnError> {
        let mut vars = Vec::with_capacity(state.len());
        for info in ModelState::layout(&state.config) {
            let n: usize = info.shape.iter().product();
            vars.push(flat.slice(0, info.offset, info.offset + n)?.reshape(&info.shape)?);
        }
        Ok(Self { state, vars })
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>, CpnError> {
        self.state
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| CpnError::UnknownParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.state.config
    }

    pub fn tape(&self) -> &'t Tape {
        self.vars[0].tape()
    }
}

/// One recurrence step on `[N, D]` inputs and `[N, d]` state:
///
/// ```text
/// r = σ(x W_xr + b_xr + h W_hr + b_hr)
/// u = σ(x W_xu + b_xu + h W_hu + b_hu)
/// n = tanh(x W_xn + b_xn + r ⊙ (h W_hn + b_hn))
/// h' = (1 − u) ⊙ n + u ⊙ h
/// ```
pub fn gru_step<'t>(p: &Bound<'t, '_>, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>, CpnError> {
    let d = p.config().hidden;
    let gx = x.matmul(p.get("gru.w_x")?)?.add(p.get("gru.b_x")?)?;
    let gh = h.matmul(p.get("gru.w_h")?)?.add(p.get("gru.b_h")?)?;
    let r = gx.slice(1, 0, d)?.add(gh.slice(1, 0, d)?)?.sigmoid()?;
    let u = gx.slice(1, d, 2 * d)?.add(gh.slice(1, d, 2 * d)?)?.sigmoid()?;
    let n = gx.slice(1, 2 * d, 3 * d)?.add(r.mul(gh.slice(1, 2 * d, 3 * d)?)?)?.tanh()?;
    Ok(n.add(u.mul(h.sub(n)?)?)?)
}

/// Runs the recurrence over `x: [T, N, D]` from a zero state and returns the
/// `[N, d]` state after every step.
pub fn gru_encode<'t>(p: &Bound<'t, '_>, x: &Array) -> Result<Vec<Var<'t>>, CpnError> {
    let tape = p.tape();
    let [t_len, n, dim] = x.shape() else {
        return Err(CpnError::Batch(format!("recurrent input must be [T, N, D], got {:?}", x.shape())));
    };
    if *dim != p.config().input_dim {
        return Err(CpnError::Batch(format!("input has {dim} channels, model expects {}", p.config().input_dim)));
    }
    let mut h = tape.constant(Array::zeros(&[*n, p.config().hidden]));
    let mut out = Vec::with_capacity(*t_len);
    for xt in x.data().chunks(n * dim) {
        let xt = tape.constant(Array::new(vec![*n, *dim], xt.to_vec())?);
        h = gru_step(p, xt, h)?;
        out.push(h);
    }
    Ok(out)
}

/// Sinusoidal encoding `[T, d]`: `PE(t, 2k) = sin(t / 10000^(2k/d))` and
/// `PE(t, 2k+1) = cos(t / 10000^(2k/d))`, for `t = 0..T`.
pub fn positional_encoding(t_len: usize, d: usize) -> Array {
    let mut data = vec![0.0; t_len * d];
    for t in 0..t_len {
        for k in 0..d / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data[t * d + 2 * k] = angle.sin();
            data[t * d + 2 * k + 1] = angle.cos();
        }
    }
    Array::from_parts(vec![t_len, d], data)
}

/// Stacks per-step `[B·G, d]` states into `[B, T, G·d]`.
pub(super) fn stack_steps<'t>(states: &[Var<'t>], batch: usize) -> Result<Var<'t>, CpnError> {
    let width = states[0].value_ref().len() / batch;
    let rows: Vec<Var<'t>> = states
        .iter()
        .map(|s| s.reshape(&[batch, 1, width]))
        .collect::<Result<_, _>>()?;
    Ok(Var::concat(&rows, 1)?)
}

/// `x W` for `x: [.., in]`, keeping leading axes.
pub(super) fn project<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>, CpnError> {
    let shape = x.shape();
    let (inner, out) = (shape[shape.len() - 1], w.shape()[1]);
    let rows = x.value_ref().len() / inner;
    let mut new_shape = shape.clone();
    *new_shape.last_mut().expect("non-empty shape") = out;
    Ok(x.reshape(&[rows, inner])?.matmul(w)?.reshape(&new_shape)?)
}

/// `LN(x)·γ + β` over the last axis.
pub(super) fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>, CpnError> {
    Ok(x.layer_norm(1e-5)?.mul(gamma)?.add(beta)?)
}

/// `tanh(x W1 + b1) W2 + b2`.
pub(super) fn mlp<'t>(p: &Bound<'t, '_>, prefix: &str, x: Var<'t>) -> Result<Var<'t>, CpnError> {
    let g = |n: &str| p.get(&format!("{prefix}.{n}"));
    let hidden = project(x, g("w1")?)?.add(g("b1")?)?.tanh()?;
    Ok(project(hidden, g("w2")?)?.add(g("b2")?)?)
}
