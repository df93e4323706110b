#![allow(dead_code)]

use causnet::cpn::{ModelConfig, ModelState};
use causnet::dataset::{Batch, WindowRef, D_T};
use causnet::features::D_C;
use causnet::numerics::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn tiny_config(lookback: usize, horizon: usize, hidden: usize, heads: usize, top_k: usize) -> ModelConfig {
    ModelConfig {
        lookback,
        horizon,
        hidden,
        layers: 2,
        heads,
        top_k,
        ..ModelConfig::default()
    }
}

/// Initialized parameters with every entry jittered, so no parameter sits
/// at a special value such as a zero bias or a unit gain.
pub fn jittered_state(config: &ModelConfig, seed: u64, amount: f64) -> ModelState {
    let base = ModelState::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let flat: Vec<f64> = base.flatten().data().iter().map(|v| v + rng.gen_range(-amount..amount)).collect();
    ModelState::from_flat(config, &flat).unwrap()
}

/// A batch of random windows; `present[i]` real neighbours per sample out of
/// `k` slots, each flag set with probability `event_rate`.
pub fn random_batch(rng: &mut ChaCha8Rng, config: &ModelConfig, present: &[usize], event_rate: f64) -> Batch {
    let (b, t, h, k) = (present.len(), config.lookback, config.horizon, config.top_k);
    let target = random_array(rng, &[t, b, D_T], -1.5, 1.5);
    let mut nb: Vec<f64> = (0..t * b * k * D_T).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let mut neighbor_present = vec![false; b * k];
    let mut log_bias = vec![0.0; b * k];
    for (i, &n) in present.iter().enumerate() {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for j in 0..n {
            neighbor_present[i * k + j] = true;
            log_bias[i * k + j] = (raw[j] / total).ln();
        }
        for j in n..k {
            for s in 0..t {
                let off = (s * b * k + i * k + j) * D_T;
                nb[off..off + D_T].fill(0.0);
            }
        }
    }
    let flags: Vec<f64> = (0..b * t).map(|_| if rng.gen_bool(event_rate) { 1.0 } else { 0.0 }).collect();
    let mut features = random_array(rng, &[b, t, D_C], -1.0, 1.0).into_data();
    for (i, &f) in flags.iter().enumerate() {
        if f == 0.0 {
            features[i * D_C..(i + 1) * D_C].copy_from_slice(&NEUTRAL);
        }
    }
    let has_event = flags.chunks(t).map(|c| c.iter().any(|&f| f > 0.0)).collect();
    Batch {
        size: b,
        lookback: t,
        horizon: h,
        k,
        target,
        neighbors: (k > 0).then(|| Array::new(vec![t, b * k, D_T], nb).unwrap()),
        neighbor_present,
        log_bias,
        features: Array::new(vec![b, t, D_C], features).unwrap(),
        flags,
        y: random_array(rng, &[b, h], -1.0, 1.0),
        has_event,
        windows: (0..b).map(|i| WindowRef { segment: i, start: 0 }).collect(),
    }
}

pub const NEUTRAL: [f64; D_C] = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

/// A few days of generator data on a small ring, with an empty knowledge
/// base so the causal channels carry only counts and timing.
pub fn small_forecast(segments: usize, days: u32, seed: u64) -> (causnet::dataset::ForecastData, causnet::data::SyntheticDataset) {
    use causnet::ckb::CausalKnowledgeBase;
    use causnet::data::synthetic::URBAN_PROFILE;
    use causnet::data::{generate_synthetic, InjectedEffect, SyntheticSpec, TimePeriod};
    use causnet::dataset::{DatasetConfig, ForecastData};
    use causnet::events::EventType;
    use causnet::graph::RoadGraph;

    let spec = SyntheticSpec {
        segment_count: segments,
        timestep_minutes: 5,
        horizon_days: days,
        base_daily_profile: URBAN_PROFILE.to_vec(),
        noise_std: 2.0,
        injected_effects: vec![InjectedEffect {
            event_type: EventType::Accident,
            time_period: TimePeriod::OffPeak,
            tau: -10.0,
        }],
        event_rate: 2.0,
        decay_constant_min: 30.0,
        random_seed: seed,
        start: causnet::data::timefmt::parse_instant("2024-03-04T00:00:00").unwrap(),
        segment_speed_spread: 0.1,
        time_period_bins: Default::default(),
    };
    let ds = generate_synthetic(&spec).unwrap();
    let ids: Vec<String> = ds.series.iter().map(|s| s.segment_id.clone()).collect();
    let graph = RoadGraph::from_edges(&ids, &ds.edges).unwrap();
    let ckb = CausalKnowledgeBase::new(vec![]).unwrap();
    let fd = ForecastData::build(&ds.series, &ds.events, &ckb, &graph, &DatasetConfig::default()).unwrap();
    (fd, ds)
}
