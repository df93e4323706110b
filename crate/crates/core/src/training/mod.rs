//! Composite loss, AdamW, and the three-phase schedule.
//!
//! | phase | default share | causal parameters | causal features | loss |
//! |-------|---------------|-------------------|-----------------|------|
//! | 1 | 20% | frozen | neutral | MSE |
//! | 2 | 40% | trainable, gate from `σ(-2)` | real | MSE + β·causal + γ·entropy |
//! | 3 | 40% | trainable, gate restarted at `σ(2)` | real | same |
//!
//! Early stopping watches validation MSE. The patience counter and the best
//! state restart at each phase boundary, because the model being validated
//! changes meaning there.

mod loss;
mod optim;

pub use loss::{composite_loss, loss_causal, loss_entropy, loss_mse, LossWeights};
pub use optim::{clip_global_norm, global_norm, AdamW};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpn::{base_counterfactual, forward, is_causal_param, Bound, CpnError, ModelState, GATE_PHASE3};
use crate::dataset::{Batch, ForecastData, Part, WindowRef};
use crate::eval::predict_windows;
use crate::features::D_C;
use crate::numerics::{Array, NumericsError, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] CpnError),
    #[error("non-finite value at epoch {epoch}, batch {batch}: {context}; largest parameter norms: {}", top_norms(.norms))]
    NonFinite {
        epoch: usize,
        batch: usize,
        context: String,
        norms: Vec<(String, f64)>,
    },
    #[error("no {0:?} windows")]
    NoWindows(Part),
}

fn top_norms(norms: &[(String, f64)]) -> String {
    let mut v: Vec<&(String, f64)> = norms.iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1));
    v.iter().take(3).map(|(n, x)| format!("{n}={x:.3e}")).collect::<Vec<_>>().join(", ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub patience: usize,
    /// Shares of the epochs given to phases 1, 2 and 3.
    pub phase_fractions: [f64; 3],
    pub loss: LossWeights,
    pub seed: u64,
    /// Take every `window_stride`-th window start.
    pub window_stride: usize,
    /// Random subset of training windows drawn afresh each epoch.
    pub max_train_windows: Option<usize>,
    /// Evenly spaced subset of validation windows, fixed for the run.
    pub max_eval_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 256,
            learning_rate: 3e-5,
            weight_decay: 1e-2,
            clip_norm: 5.0,
            patience: 50,
            phase_fractions: [0.2, 0.4, 0.4],
            loss: LossWeights::default(),
            seed: 0,
            window_stride: 1,
            max_train_windows: None,
            max_eval_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.window_stride == 0 {
            return bad("epochs, batch_size, patience and window_stride must be positive".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.clip_norm == 0.0 {
            return bad("clip_norm must be positive".into());
        }
        let sum: f64 = self.phase_fractions.iter().sum();
        if self.phase_fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("phase fractions must be non-negative and sum to 1, got {:?}", self.phase_fractions));
        }
        self.loss.validate().map_err(TrainError::Config)
    }

    /// Last epoch (1-based, inclusive) of each phase.
    pub fn phase_ends(&self) -> [usize; 3] {
        let e = self.epochs as f64;
        let a = (self.phase_fractions[0] * e).round() as usize;
        let b = ((self.phase_fractions[0] + self.phase_fractions[1]) * e).round() as usize;
        [a.min(self.epochs), b.min(self.epochs), self.epochs]
    }

    /// Phase of a 1-based epoch.
    pub fn phase_of(&self, epoch: usize) -> u8 {
        let ends = self.phase_ends();
        if epoch <= ends[0] {
            1
        } else if epoch <= ends[1] {
            2
        } else {
            3
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: u8,
    /// km/h², mean over batches.
    pub train_mse: f64,
    /// km/h².
    pub val_mse: f64,
    pub loss_causal: f64,
    pub loss_entropy: f64,
    /// Mean pre-clip global gradient norm.
    pub grad_norm: f64,
    pub gate: f64,
}

/// Loss components and gradient norms of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Normalized scale.
    pub mse: f64,
    pub causal: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Whether a parameter receives gradients in `phase`.
pub fn trainable_in(phase: u8, name: &str) -> bool {
    phase > 1 || !is_causal_param(name)
}

/// Forward, backward, clip and update on one batch.
///
/// In phase 1 the batch is neutralized and causal parameters are bound as
/// constants, so they are neither differentiated nor updated. `unit` maps the
/// normalized scale to km/h for the causal hinge.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut AdamW,
    batch: &Batch,
    neutral: &[f64; D_C],
    phase: u8,
    config: &TrainConfig,
    unit: f64,
) -> Result<StepStats, CpnError> {
    let neutral_batch;
    let batch = if phase == 1 {
        neutral_batch = batch.neutralized(neutral);
        &neutral_batch
    } else {
        batch
    };
    let tape = Tape::new();
    let p = Bound::new(&tape, state, |n| trainable_in(phase, n));
    let f = forward(&p, batch)?;
    let mse = loss_mse(f.out.y_hat, tape.constant(batch.y.clone()))?;
    let entropy = loss_entropy(&f.out.attention)?;
    let causal = if phase > 1 && batch.has_event.iter().any(|&e| e) {
        let cf = base_counterfactual(&p, f.z_st, neutral)?;
        loss_causal(f.out.a_causal, &batch.y, &cf.value(), &batch.has_event, unit)?
    } else {
        tape.constant(Array::scalar(0.0)?)
    };
    let total = composite_loss(mse, causal, entropy, &config.loss, phase)?;
    let mut g = total.backward();
    let mut grads: Vec<Option<Array>> = state
        .names()
        .iter()
        .zip(p.vars())
        .map(|(n, v)| trainable_in(phase, n).then(|| g.take(*v).unwrap_or_else(|| Array::zeros(&v.shape()))))
        .collect();
    let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
    if !grad_norm.is_finite() {
        return Err(CpnError::Numerics(NumericsError::NonFinite {
            context: "gradient norm".into(),
        }));
    }
    let clipped_norm = global_norm(&grads);
    drop(p);
    opt.step(state, &grads);
    Ok(StepStats {
        loss: total.item(),
        mse: mse.item(),
        causal: causal.item(),
        entropy: entropy.item(),
        grad_norm,
        clipped_norm,
    })
}

/// Validation MSE in km/h², with neutral features when `neutral` is set.
pub fn validation_mse(state: &ModelState, data: &ForecastData, windows: &[WindowRef], neutral: bool, batch_size: usize) -> Result<f64, CpnError> {
    let rows = predict_windows(state, data, windows, neutral, batch_size)?;
    let (sum, n) = rows.iter().fold((0.0, 0usize), |(s, n), r| {
        (s + r.y_hat.iter().zip(&r.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), n + r.y.len())
    });
    Ok(sum / n as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters of the last phase reached.
    pub state: ModelState,
    pub log: Vec<EpochLog>,
    pub phase: u8,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

fn evenly_spaced(v: Vec<WindowRef>, cap: Option<usize>) -> Vec<WindowRef> {
    match cap {
        Some(c) if c > 0 && v.len() > c => (0..c).map(|i| v[i * v.len() / c]).collect(),
        _ => v,
    }
}

/// Runs the three-phase schedule from `state`, calling `on_epoch` after each
/// epoch.
///
/// Every phase tracks its own best validation MSE. A phase ends at its last
/// scheduled epoch or after `patience` epochs without improvement, and the
/// next phase starts from its best parameters. A stall in the final phase
/// stops training.
pub fn progressive_train(
    mut state: ModelState,
    data: &ForecastData,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut train = data.windows(Part::Train, config.window_stride);
    if train.is_empty() {
        return Err(TrainError::NoWindows(Part::Train));
    }
    let val = evenly_spaced(data.windows(Part::Validation, config.window_stride), config.max_eval_windows);
    if val.is_empty() {
        return Err(TrainError::NoWindows(Part::Validation));
    }
    let unit = data.normalizer.std;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&state, config.learning_rate, config.weight_decay);
    let gate_index = state.position("gate.g_raw").expect("gate parameter exists");

    let mut log = Vec::new();
    let mut phase = 0u8;
    let mut best = (f64::INFINITY, 0usize, state.clone());
    let mut since_best = 0;
    let mut stopped_early = false;
    let ends = config.phase_ends();
    let mut epoch = 0;
    while epoch < config.epochs {
        epoch += 1;
        let p = config.phase_of(epoch);
        if p != phase {
            if phase > 0 && best.0.is_finite() {
                state = best.2.clone();
            }
            if p == 3 {
                state.set("gate.g_raw", Array::scalar(GATE_PHASE3).expect("finite"))?;
                opt.reset(gate_index);
            }
            phase = p;
            best = (f64::INFINITY, epoch, state.clone());
            since_best = 0;
        }
        train.shuffle(&mut rng);
        let take = config.max_train_windows.map_or(train.len(), |m| m.min(train.len()));
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for (bi, chunk) in train[..take].chunks(config.batch_size).enumerate() {
            let batch = data.batch(chunk);
            let s = train_step(&mut state, &mut opt, &batch, &data.neutral, phase, config, unit).map_err(|e| match e {
                CpnError::Numerics(NumericsError::NonFinite { context }) => TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    context,
                    norms: state.norm_report(),
                },
                other => other.into(),
            })?;
            for (acc, v) in sums.iter_mut().zip([s.mse, s.causal, s.entropy, s.grad_norm]) {
                *acc += v;
            }
            batches += 1;
        }
        let n = f64::from(batches);
        let val_mse = validation_mse(&state, data, &val, phase == 1, config.batch_size)?;
        let entry = EpochLog {
            epoch,
            phase,
            train_mse: sums[0] / n * unit * unit,
            val_mse,
            loss_causal: sums[1] / n,
            loss_entropy: sums[2] / n,
            grad_norm: sums[3] / n,
            gate: state.gate(),
        };
        log::info!(
            "epoch {epoch} phase {phase}: train {:.4} val {:.4} gate {:.3}",
            entry.train_mse,
            entry.val_mse,
            entry.gate
        );
        on_epoch(&entry);
        log.push(entry);
        if val_mse < best.0 {
            best = (val_mse, epoch, state.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                if phase == 3 || ends[usize::from(phase) - 1] >= config.epochs {
                    stopped_early = true;
                    break;
                }
                // a stalled phase hands over early; the next one starts from
                // its own first scheduled epoch
                epoch = ends[usize::from(phase) - 1];
            }
        }
    }
    let (best_val_mse, best_epoch, state) = best;
    Ok(TrainOutcome {
        state,
        log,
        phase,
        best_epoch,
        best_val_mse,
        stopped_early,
    })
}
