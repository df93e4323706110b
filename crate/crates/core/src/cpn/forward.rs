use crate::dataset::Batch;
use crate::features::D_C;
use crate::numerics::{Array, Mask, Tape, Var};

use super::layers::{gru_encode, layer_norm, mlp, positional_encoding, project, stack_steps, Bound};
use super::{CpnError, ModelState};

/// Output of the attention stack and the two heads, normalized scale.
pub struct Decoded<'t> {
    /// `[B, H]`
    pub y_base: Var<'t>,
    /// `[B, H]`
    pub a_causal: Var<'t>,
    /// `[B, H]`, `y_base + gate · a_causal`.
    pub y_hat: Var<'t>,
    /// `[1]`, `σ(g_raw)`.
    pub gate: Var<'t>,
    /// Final block, one `[B, T, T]` map per head.
    pub attention: Vec<Var<'t>>,
    /// Every block, head-averaged `[B, T, T]`.
    pub layer_attention: Vec<Array>,
}

pub struct Forward<'t> {
    /// `[B, T, d]`, the spatio-temporal stream before causal fusion.
    pub z_st: Var<'t>,
    pub out: Decoded<'t>,
}

fn check_batch(p: &Bound<'_, '_>, batch: &Batch) -> Result<(), CpnError> {
    let c = p.config();
    if batch.lookback != c.lookback || batch.horizon != c.horizon {
        return Err(CpnError::Batch(format!(
            "window T={} H={} but model has T={} H={}",
            batch.lookback, batch.horizon, c.lookback, c.horizon
        )));
    }
    if batch.features.shape()[2] != c.causal_dim {
        return Err(CpnError::Batch(format!("{} causal channels, model expects {}", batch.features.shape()[2], c.causal_dim)));
    }
    Ok(())
}

fn repeat_rows(rows: &[f64], times: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * times);
    for _ in 0..times {
        out.extend_from_slice(rows);
    }
    out
}

/// Scaled dot-product attention of `[B·T]` queries over up to `K`
/// neighbour states, with the prior `ln w_ij` added to every score.
///
/// `states` is `[B·T, K, d]`; `log_bias` and `present` are `[B·K]`.
/// Returns the context `[B, T, d]` and the weights `[B·T, 1, K]`.
pub fn graph_prior_attention<'t>(
    p: &Bound<'t, '_>,
    z: Var<'t>,
    states: Var<'t>,
    log_bias: &[f64],
    present: &[bool],
) -> Result<(Var<'t>, Var<'t>), CpnError> {
    let tape = p.tape();
    let zs = z.shape();
    let (b, t_len, d) = (zs[0], zs[1], zs[2]);
    let k = log_bias.len() / b;
    let q = project(z, p.get("graph.w_q")?)?.reshape(&[b * t_len, 1, d])?;
    let keys = project(states, p.get("graph.w_k")?)?;
    let values = project(states, p.get("graph.w_v")?)?;
    let mut bias = Vec::with_capacity(b * t_len * k);
    let mut allowed = Vec::with_capacity(b * t_len * k);
    for i in 0..b {
        for _ in 0..t_len {
            bias.extend_from_slice(&log_bias[i * k..(i + 1) * k]);
            allowed.extend_from_slice(&present[i * k..(i + 1) * k]);
        }
    }
    let mask = Mask::new(vec![b * t_len, 1, k], allowed)?;
    let scores = q
        .bmm(keys, true)?
        .scale(1.0 / (d as f64).sqrt())?
        .add(tape.constant(Array::new(vec![b * t_len, 1, k], bias)?))?;
    let weights = scores.masked_softmax(&mask)?;
    let g = weights.bmm(values, false)?.reshape(&[b, t_len, d])?;
    Ok((g, weights))
}

/// One attention layer with `z` as queries and `[z; g]` as keys and values,
/// then residual and layer norm. Query `t` sees `z_s` and `g_s` for `s ≤ t`;
/// `g` is hidden from samples without neighbours.
pub fn spatiotemporal_fuse<'t>(
    p: &Bound<'t, '_>,
    z: Var<'t>,
    g: Option<(Var<'t>, &[bool])>,
) -> Result<Var<'t>, CpnError> {
    let zs = z.shape();
    let (b, t_len, d) = (zs[0], zs[1], zs[2]);
    let q = project(z, p.get("fuse.w_q")?)?;
    let mut keys = project(z, p.get("fuse.w_k")?)?;
    let mut values = project(z, p.get("fuse.w_v")?)?;
    let width = if g.is_some() { 2 * t_len } else { t_len };
    let mut allowed = vec![false; b * t_len * width];
    for i in 0..b {
        let has_g = g.as_ref().is_some_and(|(_, h)| h[i]);
        for t in 0..t_len {
            let row = &mut allowed[(i * t_len + t) * width..(i * t_len + t + 1) * width];
            for s in 0..=t {
                row[s] = true;
                if has_g {
                    row[t_len + s] = true;
                }
            }
        }
    }
    if let Some((g, _)) = g {
        keys = Var::concat(&[keys, project(g, p.get("fuse.w_kg")?)?], 1)?;
        values = Var::concat(&[values, project(g, p.get("fuse.w_vg")?)?], 1)?;
    }
    let mask = Mask::new(vec![b, t_len, width], allowed)?;
    let alpha = q.bmm(keys, true)?.scale(1.0 / (d as f64).sqrt())?.masked_softmax(&mask)?;
    let ctx = project(alpha.bmm(values, false)?, p.get("fuse.w_o")?)?;
    layer_norm(z.add(ctx)?, p.get("fuse.ln_gamma")?, p.get("fuse.ln_beta")?)
}

/// Neighbour sequences `[T, B·K, D_t]` through the target's recurrence,
/// detached so no gradient reaches the shared weights along this path.
/// Returns `[B, T, K·d]`.
pub fn encode_neighbors<'t>(p: &Bound<'t, '_>, neighbors: &Array, batch_size: usize) -> Result<Var<'t>, CpnError> {
    Ok(stack_steps(&gru_encode(p, neighbors)?, batch_size)?.detach())
}

/// Temporal and spatial encoding up to the fused stream `z_st: [B, T, d]`.
pub fn encode<'t>(p: &Bound<'t, '_>, batch: &Batch) -> Result<Var<'t>, CpnError> {
    let states = match &batch.neighbors {
        Some(nb) if batch.neighbor_present.iter().any(|&x| x) => Some(encode_neighbors(p, nb, batch.size)?),
        _ => None,
    };
    encode_with_states(p, batch, states)
}

/// As [`encode`] with the neighbour states `[B, T, K·d]` supplied. Since
/// they are detached anyway, holding them fixed leaves every gradient
/// unchanged, which finite-difference checks rely on.
pub fn encode_with_states<'t>(p: &Bound<'t, '_>, batch: &Batch, states: Option<Var<'t>>) -> Result<Var<'t>, CpnError> {
    check_batch(p, batch)?;
    let tape = p.tape();
    let (b, t_len, d) = (batch.size, batch.lookback, p.config().hidden);
    let h = stack_steps(&gru_encode(p, &batch.target)?, b)?;
    let pe = positional_encoding(t_len, d).reshaped(&[1, t_len * d])?;
    let z = h.reshape(&[b, t_len * d])?.add(tape.constant(pe))?.reshape(&[b, t_len, d])?;

    let g = match states {
        Some(states) => {
            let k = batch.k;
            let states = states.reshape(&[b * t_len, k, d])?;
            let present_any: Vec<bool> = batch.neighbor_present.chunks(k).map(|c| c.iter().any(|&x| x)).collect();
            let (g, _) = graph_prior_attention(p, z, states, &batch.log_bias, &batch.neighbor_present)?;
            Some((g, present_any))
        }
        None => None,
    };
    spatiotemporal_fuse(p, z, g.as_ref().map(|(g, h)| (*g, h.as_slice())))
}

/// Causal fusion, `L` causal-attention blocks and the two heads.
///
/// `features` is `[B, T, D_C]` and `flags` holds `m_s` row-major `[B, T]`.
pub fn decode<'t>(p: &Bound<'t, '_>, z_st: Var<'t>, features: &Array, flags: &[f64]) -> Result<Decoded<'t>, CpnError> {
    let tape = p.tape();
    let c = p.config();
    let zs = z_st.shape();
    let (b, t_len, d) = (zs[0], zs[1], zs[2]);
    let (heads, dh) = (c.heads, c.head_dim());

    let c_tilde = mlp(p, "causal_mlp", tape.constant(features.clone()))?;
    let mut x = layer_norm(z_st.add(c_tilde)?, p.get("fused.ln_gamma")?, p.get("fused.ln_beta")?)?;

    let mut m = Vec::with_capacity(b * t_len * t_len);
    for i in 0..b {
        m.extend(repeat_rows(&flags[i * t_len..(i + 1) * t_len], t_len));
    }
    let event_bias = tape.constant(Array::new(vec![b, t_len, t_len], m)?).mul(p.get("beta_attn")?)?;
    let causal = Mask::autoregressive(t_len);

    let mut attention = Vec::new();
    let mut layer_attention = Vec::with_capacity(c.layers);
    for l in 0..c.layers {
        let w = |n: &str| p.get(&format!("attn{l}.{n}"));
        let q = project(x, w("w_q")?)?;
        let k = project(x, w("w_k")?)?;
        let v = project(x, w("w_v")?)?;
        let mut ctx = Vec::with_capacity(heads);
        attention.clear();
        for hd in 0..heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let alpha = q
                .slice(2, lo, hi)?
                .bmm(k.slice(2, lo, hi)?, true)?
                .scale(1.0 / (dh as f64).sqrt())?
                .add(event_bias)?
                .masked_softmax(&causal)?;
            ctx.push(alpha.bmm(v.slice(2, lo, hi)?, false)?);
            attention.push(alpha);
        }
        layer_attention.push(head_mean(&attention));
        let out = project(Var::concat(&ctx, 2)?, w("w_o")?)?;
        x = layer_norm(x.add(out)?, w("ln_gamma")?, w("ln_beta")?)?;
    }

    let last = x.slice(1, t_len - 1, t_len)?.reshape(&[b, d])?;
    let y_base = mlp(p, "head_base", last)?;
    let a_causal = mlp(p, "head_causal", last)?;
    let gate = p.get("gate.g_raw")?.sigmoid()?;
    let y_hat = y_base.add(a_causal.mul(gate)?)?;
    Ok(Decoded {
        y_base,
        a_causal,
        y_hat,
        gate,
        attention,
        layer_attention,
    })
}

fn head_mean(maps: &[Var<'_>]) -> Array {
    let first = maps[0].value();
    let mut acc = first.data().to_vec();
    for m in &maps[1..] {
        for (a, v) in acc.iter_mut().zip(m.value().data()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    Array::new(first.shape().to_vec(), acc.into_iter().map(|a| a / n).collect()).expect("attention is finite")
}

pub fn forward<'t>(p: &Bound<'t, '_>, batch: &Batch) -> Result<Forward<'t>, CpnError> {
    let z_st = encode(p, batch)?;
    let out = decode(p, z_st, &batch.features, &batch.flags)?;
    Ok(Forward { z_st, out })
}

/// Base-head output of the same window with every causal feature replaced by
/// `neutral` and every flag cleared, cut off from the gradient.
///
/// The neutral features only enter after `z_st`, so the encoder output of
/// the normal pass is reused.
pub fn base_counterfactual<'t>(p: &Bound<'t, '_>, z_st: Var<'t>, neutral: &[f64; D_C]) -> Result<Var<'t>, CpnError> {
    let zs = z_st.shape();
    let (b, t_len) = (zs[0], zs[1]);
    let feats = Array::new(vec![b, t_len, D_C], repeat_rows(neutral, b * t_len))?;
    let out = decode(p, z_st.detach(), &feats, &vec![0.0; b * t_len])?;
    Ok(out.y_base.detach())
}

/// Inference results as plain arrays, normalized scale.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub y_hat: Array,
    pub y_base: Array,
    pub a_causal: Array,
    pub gate: f64,
    /// Final block, head-averaged `[B, T, T]`.
    pub attention: Array,
}

pub fn predict(state: &ModelState, batch: &Batch) -> Result<Prediction, CpnError> {
    let tape = Tape::new();
    let p = Bound::new(&tape, state, |_| false);
    let f = forward(&p, batch)?;
    Ok(Prediction {
        y_hat: (*f.out.y_hat.value()).clone(),
        y_base: (*f.out.y_base.value()).clone(),
        a_causal: (*f.out.a_causal.value()).clone(),
        gate: f.out.gate.item(),
        attention: f.out.layer_attention.last().expect("at least one layer").clone(),
    })
}
