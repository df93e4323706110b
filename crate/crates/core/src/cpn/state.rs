use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CpnError, ModelConfig};
use crate::numerics::Array;

/// Initial gate logit, `σ(-2) ≈ 0.119`.
pub const GATE_INIT: f64 = -2.0;
/// Gate logit the final training phase starts from, `σ(2) ≈ 0.881`.
pub const GATE_PHASE3: f64 = 2.0;

/// Name, shape and offset of one parameter in the flat layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

enum Init {
    /// Uniform in `±1/√fan_in`, with fan-in the first axis.
    Weight,
    Zeros,
    Ones,
    Const(f64),
}

/// Every learnable parameter of the network, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    names: Vec<String>,
    values: Vec<Array>,
    index: BTreeMap<String, usize>,
}

/// Parameters that belong to the causal stream and are frozen in the first
/// training phase.
pub fn is_causal_param(name: &str) -> bool {
    name.starts_with("causal_mlp.") || name.starts_with("head_causal.") || name == "beta_attn" || name == "gate.g_raw"
}

fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.hidden;
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut p = |name: &str, shape: Vec<usize>, init: Init| v.push((name.to_string(), shape, init));
    p("gru.w_x", vec![c.input_dim, 3 * d], Init::Weight);
    p("gru.w_h", vec![d, 3 * d], Init::Weight);
    p("gru.b_x", vec![3 * d], Init::Zeros);
    p("gru.b_h", vec![3 * d], Init::Zeros);
    for n in ["w_q", "w_k", "w_v"] {
        p(&format!("graph.{n}"), vec![d, d], Init::Weight);
    }
    for n in ["w_q", "w_k", "w_v", "w_kg", "w_vg", "w_o"] {
        p(&format!("fuse.{n}"), vec![d, d], Init::Weight);
    }
    p("fuse.ln_gamma", vec![d], Init::Ones);
    p("fuse.ln_beta", vec![d], Init::Zeros);
    p("causal_mlp.w1", vec![c.causal_dim, d], Init::Weight);
    p("causal_mlp.b1", vec![d], Init::Zeros);
    p("causal_mlp.w2", vec![d, d], Init::Weight);
    p("causal_mlp.b2", vec![d], Init::Zeros);
    p("fused.ln_gamma", vec![d], Init::Ones);
    p("fused.ln_beta", vec![d], Init::Zeros);
    for l in 0..c.layers {
        for n in ["w_q", "w_k", "w_v", "w_o"] {
            p(&format!("attn{l}.{n}"), vec![d, d], Init::Weight);
        }
        p(&format!("attn{l}.ln_gamma"), vec![d], Init::Ones);
        p(&format!("attn{l}.ln_beta"), vec![d], Init::Zeros);
    }
    p("beta_attn", vec![1], Init::Const(0.0));
    for head in ["head_base", "head_causal"] {
        p(&format!("{head}.w1"), vec![d, d], Init::Weight);
        p(&format!("{head}.b1"), vec![d], Init::Zeros);
        p(&format!("{head}.w2"), vec![d, c.horizon], Init::Weight);
        p(&format!("{head}.b2"), vec![c.horizon], Init::Zeros);
    }
    p("gate.g_raw", vec![1], Init::Const(GATE_INIT));
    v
}

impl ModelState {
    /// Fresh parameters drawn from a seeded generator.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, CpnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Weight => {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c; n],
            };
            names.push(name);
            values.push(Array::new(shape, data)?);
        }
        Ok(Self::from_parts(config.clone(), names, values))
    }

    fn from_parts(config: ModelConfig, names: Vec<String>, values: Vec<Array>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            values,
            index,
        }
    }

    /// Parameter layout of a config, without values.
    pub fn layout(config: &ModelConfig) -> Vec<ParamInfo> {
        let mut offset = 0;
        layout(config)
            .into_iter()
            .map(|(name, shape, _)| {
                let info = ParamInfo {
                    name,
                    offset,
                    shape: shape.clone(),
                };
                offset += shape.iter().product::<usize>();
                info
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Array, CpnError> {
        self.position(name)
            .map(|i| &self.values[i])
            .ok_or_else(|| CpnError::UnknownParam(name.to_string()))
    }

    /// Replaces one parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Array) -> Result<(), CpnError> {
        let i = self.position(name).ok_or_else(|| CpnError::UnknownParam(name.to_string()))?;
        if value.shape() != self.values[i].shape() {
            return Err(CpnError::Config(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    /// Mutable access to the flat data of parameter `i`.
    pub(crate) fn data_mut(&mut self, i: usize) -> &mut [f64] {
        self.values[i].data_mut()
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn flatten(&self) -> Array {
        let data: Vec<f64> = self.values.iter().flat_map(|v| v.data().iter().copied()).collect();
        Array::from_parts(vec![data.len()], data)
    }

    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self, CpnError> {
        config.validate()?;
        let infos = Self::layout(config);
        let total: usize = infos.iter().map(|i| i.shape.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(CpnError::Config(format!("expected {total} values, got {}", flat.len())));
        }
        let mut names = Vec::with_capacity(infos.len());
        let mut values = Vec::with_capacity(infos.len());
        for info in infos {
            let n: usize = info.shape.iter().product();
            values.push(Array::new(info.shape, flat[info.offset..info.offset + n].to_vec())?);
            names.push(info.name);
        }
        Ok(Self::from_parts(config.clone(), names, values))
    }

    /// Current gate `σ(g_raw)`.
    pub fn gate(&self) -> f64 {
        let g = self.values[self.index["gate.g_raw"]].data()[0];
        1.0 / (1.0 + (-g).exp())
    }

    /// `(name, L2 norm)` of every parameter.
    pub fn norm_report(&self) -> Vec<(String, f64)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.norm_sq().sqrt()))
            .collect()
    }
}
