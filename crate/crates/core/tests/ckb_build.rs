use causnet::ckb::{
    build_ckb, estimate_group, standardized_mean_differences, AteEntry, CausalKnowledgeBase, CkbConfig, ObservationRow,
};
use causnet::data::synthetic::URBAN_PROFILE;
use causnet::data::{generate_synthetic, InjectedEffect, SyntheticSpec, TimePeriod};
use causnet::events::EventType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn spec(seed: u64, effects: Vec<InjectedEffect>) -> SyntheticSpec {
    SyntheticSpec {
        segment_count: 12,
        timestep_minutes: 5,
        horizon_days: 35,
        base_daily_profile: URBAN_PROFILE.to_vec(),
        noise_std: 3.0,
        injected_effects: effects,
        event_rate: 1.5,
        decay_constant_min: 30.0,
        random_seed: seed,
        start: chrono::NaiveDate::from_ymd_opt(2024, 3, 4).unwrap().and_hms_opt(0, 0, 0).unwrap(),
        segment_speed_spread: 0.1,
        time_period_bins: Default::default(),
    }
}

fn effect(t: EventType, p: TimePeriod, tau: f64) -> InjectedEffect {
    InjectedEffect {
        event_type: t,
        time_period: p,
        tau,
    }
}

#[test]
fn positive_night_accident_effect_is_recovered() {
    let data = generate_synthetic(&spec(4, vec![effect(EventType::Accident, TimePeriod::Night, 1.29)])).unwrap();
    let (ckb, _) = build_ckb(&data.events, &data.series, &CkbConfig::default()).unwrap();
    let e = ckb.entry(EventType::Accident, TimePeriod::Night).unwrap();
    assert!(e.ate > 0.0);
    assert!((e.ate - 1.29).abs() <= 2.0 * e.standard_error, "{e:?}");
}

#[test]
fn missing_event_types_are_reported() {
    let data = generate_synthetic(&spec(
        1,
        vec![
            effect(EventType::Accident, TimePeriod::OffPeak, -6.0),
            effect(EventType::Construction, TimePeriod::OffPeak, -8.0),
        ],
    ))
    .unwrap();
    let (ckb, report) = build_ckb(&data.events, &data.series, &CkbConfig::default()).unwrap();
    assert!(ckb.entries.iter().all(|e| e.event_type != EventType::Hazard));
    for p in TimePeriod::ALL {
        assert!(report
            .omitted
            .iter()
            .any(|o| o.event_type == EventType::Hazard && o.time_period == p && o.treated == 0));
    }
    assert!(report.summary().contains("omitted Hazard x MorningPeak: no events"));
}

#[test]
fn build_is_deterministic_and_round_trips() {
    let data = generate_synthetic(&spec(2, vec![effect(EventType::Hazard, TimePeriod::EveningPeak, -9.0)])).unwrap();
    let (a, _) = build_ckb(&data.events, &data.series, &CkbConfig::default()).unwrap();
    let (b, _) = build_ckb(&data.events, &data.series, &CkbConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.data_hash.len(), 64);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckb.json");
    a.save(&path).unwrap();
    let back = CausalKnowledgeBase::load(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), back.to_json());
    for e in &a.entries {
        let (tau, conf) = back.query(e.event_type, e.time_period);
        assert_eq!(tau.to_bits(), e.ate.to_bits());
        assert_eq!(conf.to_bits(), e.confidence().to_bits());
    }
}

#[test]
fn file_layout_has_documented_keys() {
    let ckb = CausalKnowledgeBase::new(vec![AteEntry {
        event_type: EventType::Hazard,
        time_period: TimePeriod::MorningPeak,
        ate: -10.06,
        standard_error: 0.51,
        n_matched: 412,
        p_value: 1e-40,
    }])
    .unwrap();
    let v: serde_json::Value = serde_json::from_str(&ckb.to_json()).unwrap();
    for k in ["schema_version", "caliper", "confounder_schema", "entries"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    let e = &v["entries"][0];
    assert_eq!(e["event_type"], "Hazard");
    assert_eq!(e["time_period"], "MorningPeak");
    assert_eq!(e["ate"], -10.06);
    assert_eq!(e["standard_error"], 0.51);
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, logit: impl Fn(&[f64]) -> f64, effect: f64) -> Vec<ObservationRow> {
    (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let p = 1.0 / (1.0 + (-logit(&x)).exp());
            let treated = rng.gen::<f64>() < p;
            let noise: f64 = rng.sample(StandardNormal);
            ObservationRow {
                unit_id: i as u64,
                treated,
                outcome: 2.0 * x[0] + noise + if treated { effect } else { 0.0 },
                confounders: x,
            }
        })
        .collect()
}

#[test]
fn matching_balances_confounders() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows = random_rows(&mut rng, 4000, |x| -1.0 + 0.8 * x[0] - 0.5 * x[1], 3.0);
    let g = estimate_group(rows, 0.2).unwrap();
    for smd in standardized_mean_differences(&g.rows, &g.pairs) {
        assert!(smd <= 0.1, "smd {smd}");
    }
    // Confounded design: the raw difference in means is biased, matching is not.
    assert!((g.estimate.ate - 3.0).abs() <= 3.0 * g.estimate.standard_error, "{:?}", g.estimate);
}

#[test]
fn matching_ignores_row_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rows = random_rows(&mut rng, 600, |x| 0.5 * x[2], 0.0);
    let a = estimate_group(rows.clone(), 0.2).unwrap();
    let mut shuffled = rows;
    shuffled.shuffle(&mut rng);
    let b = estimate_group(shuffled, 0.2).unwrap();
    let mut pa = a.pairs.clone();
    let mut pb = b.pairs.clone();
    pa.sort_by_key(|p| p.treated);
    pb.sort_by_key(|p| p.treated);
    assert_eq!(pa, pb);
}
