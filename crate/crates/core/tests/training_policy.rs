mod common;

use causnet::cpn::{is_causal_param, Bound, ModelConfig, ModelState, GATE_INIT, GATE_PHASE3};
use causnet::dataset::Part;
use causnet::numerics::Tape;
use causnet::training::{
    composite_loss, loss_entropy, loss_mse, progressive_train, train_step, trainable_in, AdamW, TrainConfig,
};
use common::{jittered_state, random_batch, small_forecast, tiny_config, NEUTRAL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 1e-3,
        window_stride: 9,
        max_train_windows: Some(48),
        max_eval_windows: Some(32),
        ..TrainConfig::default()
    }
}

#[test]
fn phase_one_leaves_causal_parameters_bit_identical() {
    let cfg = tiny_config(6, 2, 8, 2, 2);
    let mut state = jittered_state(&cfg, 21, 0.3);
    let mut opt = AdamW::new(&state, 1e-2, 1e-2);
    let tc = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let before = state.clone();
        let batch = random_batch(&mut rng, &cfg, &[2, 1, 0], 0.5);
        train_step(&mut state, &mut opt, &batch, &NEUTRAL, 1, &tc, 10.0).unwrap();
        let mut moved = 0;
        for ((name, a), b) in state.names().iter().zip(state.values()).zip(before.values()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if is_causal_param(name) {
                assert!(same, "{name} changed in phase 1");
            } else if !same {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }
}

#[test]
fn phase_one_gradients_of_causal_parameters_are_zero() {
    let cfg = tiny_config(6, 2, 8, 2, 2);
    let state = jittered_state(&cfg, 22, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let batch = random_batch(&mut rng, &cfg, &[2, 2], 0.5).neutralized(&NEUTRAL);
    let tape = Tape::new();
    let p = Bound::new(&tape, &state, |n| trainable_in(1, n));
    let f = causnet::cpn::forward(&p, &batch).unwrap();
    let mse = loss_mse(f.out.y_hat, tape.constant(batch.y.clone())).unwrap();
    let ent = loss_entropy(&f.out.attention).unwrap();
    let zero = tape.constant(causnet::numerics::Array::scalar(0.0).unwrap());
    let g = composite_loss(mse, zero, ent, &Default::default(), 1).unwrap().backward();
    for (name, v) in state.names().iter().zip(p.vars()) {
        if is_causal_param(name) {
            assert!(!v.requires_grad(), "{name}");
            assert!(g.get(*v).data().iter().all(|&x| x == 0.0), "{name}");
        }
    }
}

#[test]
fn clipped_gradient_norm_never_exceeds_the_limit() {
    let cfg = tiny_config(6, 2, 8, 2, 2);
    let mut state = jittered_state(&cfg, 23, 0.5);
    let mut opt = AdamW::new(&state, 1e-2, 1e-2);
    let tc = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut clipped = 0;
    for step in 0..30 {
        let mut batch = random_batch(&mut rng, &cfg, &[2, 1, 1, 0], 0.5);
        // far-off targets force large gradients on some steps
        let scale = if step % 2 == 0 { 40.0 } else { 0.5 };
        batch.y = batch.y.map(|v| v * scale).unwrap();
        let phase = 1 + (step % 3) as u8;
        let s = train_step(&mut state, &mut opt, &batch, &NEUTRAL, phase, &tc, 10.0).unwrap();
        assert!(s.clipped_norm <= 5.0 + 1e-9, "step {step}: {}", s.clipped_norm);
        if s.grad_norm > 5.0 {
            clipped += 1;
            assert!((s.clipped_norm - 5.0).abs() < 1e-9);
        } else {
            assert_eq!(s.clipped_norm, s.grad_norm);
        }
    }
    assert!(clipped > 0, "no step exercised clipping");
}

#[test]
fn early_stopping_fires_after_exactly_patience_stalled_epochs() {
    let (data, _) = small_forecast(4, 4, 31);
    let state = ModelState::init(&small_model(), 31).unwrap();
    let tc = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.0,
        phase_fractions: [1.0, 0.0, 0.0],
        epochs: 500,
        ..quick(500)
    };
    let out = progressive_train(state.clone(), &data, &tc, |_| {}).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.log.len(), 51);
    assert_eq!(out.best_epoch, 1);
    assert!(out.log.windows(2).all(|w| w[0].val_mse == w[1].val_mse));
    assert_eq!(out.state.flatten().data(), state.flatten().data());
}

#[test]
fn patience_restarts_at_each_phase_and_gate_reopens_in_phase_three() {
    let (data, _) = small_forecast(4, 4, 32);
    let state = ModelState::init(&small_model(), 32).unwrap();
    let tc = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.0,
        patience: 2,
        phase_fractions: [0.4, 0.3, 0.3],
        ..quick(10)
    };
    let out = progressive_train(state, &data, &tc, |_| {}).unwrap();
    // each phase stalls from its first epoch, so each runs patience + 1 epochs
    let phases: Vec<u8> = out.log.iter().map(|e| e.phase).collect();
    assert_eq!(phases, vec![1, 1, 1, 2, 2, 2, 3, 3, 3]);
    assert_eq!(out.log.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 5, 6, 7, 8, 9, 10]);
    for e in &out.log {
        let expect = if e.phase == 3 { sigmoid(GATE_PHASE3) } else { sigmoid(GATE_INIT) };
        assert!((e.gate - expect).abs() < 1e-15);
    }
    assert_eq!(out.phase, 3);
}

#[test]
fn training_logs_are_deterministic() {
    let (data, _) = small_forecast(4, 4, 33);
    let tc = TrainConfig {
        phase_fractions: [0.34, 0.33, 0.33],
        ..quick(3)
    };
    let run = || {
        let state = ModelState::init(&small_model(), 33).unwrap();
        let mut lines = Vec::new();
        let out = progressive_train(state, &data, &tc, |e| lines.push(serde_json::to_string(e).unwrap())).unwrap();
        (lines, out.state.flatten())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa.data(), sb.data());
    assert_eq!(a.len(), 3);
    assert!(!data.windows(Part::Train, 1).is_empty());
}
