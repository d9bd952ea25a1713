mod common;

use rrcusum::montecarlo::{estimate_arl, estimate_delay, run_study, StudyConfig, StudyId, StudyRow};
use rrcusum::scenario::{MeanHypothesis, MeanScenario};

use common::mean_model;

fn config(gamma: f64, reps: u64) -> StudyConfig {
    StudyConfig {
        num_sources: 4,
        unit_size: 1,
        gamma,
        s_values: vec![],
        replications: reps,
        seed: 99,
        ..StudyConfig::default()
    }
}

#[test]
fn tiny_threshold_alarms_almost_immediately() {
    let model = mean_model(1, 2.0, 1);
    let h = &model.hypotheses()[0];
    let e = estimate_delay(&model, h, &config(1.01, 2_000)).unwrap();
    assert!(e.mean_delay >= 1.0 && e.mean_delay <= 2.0, "{}", e.mean_delay);
    assert_eq!(e.truncation_count, 0);
}

#[test]
fn stderr_shrinks_like_root_reps() {
    let model = mean_model(4, 1.0, 1);
    let h = &model.hypotheses()[0];
    let a = estimate_delay(&model, h, &config(100.0, 4_000)).unwrap();
    let b = estimate_delay(&model, h, &config(100.0, 16_000)).unwrap();
    let ratio = b.stderr / a.stderr;
    assert!((ratio - 0.5).abs() < 0.1, "ratio {ratio}");
    assert!((a.mean_delay - b.mean_delay).abs() < 4.0 * a.stderr);
    assert!(!b.stderr_warning);
}

#[test]
fn delay_grows_with_the_threshold() {
    let model = mean_model(4, 1.0, 1);
    let h = &model.hypotheses()[0];
    let low = estimate_delay(&model, h, &config(100.0, 4_000)).unwrap();
    let high = estimate_delay(&model, h, &config(1e4, 4_000)).unwrap();
    assert!(high.mean_delay > low.mean_delay);
    // the second-order term is bounded, the first-order term is ln γ / I
    let slope = (high.mean_delay - low.mean_delay) / (1e4f64.ln() - 100f64.ln());
    assert!((slope - 2.0).abs() < 0.3, "slope {slope}");
}

#[test]
fn late_change_discards_early_alarms() {
    let model = mean_model(4, 1.0, 1);
    let h = &model.hypotheses()[0];
    let c = StudyConfig {
        nu: 200,
        ..config(5.0, 2_000)
    };
    let e = estimate_delay(&model, h, &c).unwrap();
    assert!(e.discarded > 0);
    assert_eq!(e.discarded + e.replications, 2_000);
}

#[test]
fn truncation_is_counted() {
    let model = mean_model(4, 1.0, 1);
    let h = &model.hypotheses()[0];
    let c = StudyConfig {
        max_steps: 3,
        ..config(1e6, 200)
    };
    let e = estimate_delay(&model, h, &c).unwrap();
    assert_eq!(e.truncation_count, 200);
    assert_eq!(e.mean_delay, 3.0);
}

#[test]
fn arl_exceeds_gamma() {
    let model = mean_model(3, 1.0, 1);
    let c = config(50.0, 1_000);
    let e = estimate_arl(&model, &c, 5_000).unwrap();
    assert!(e.mean_delay - 2.0 * e.stderr >= 50.0, "{} ± {}", e.mean_delay, e.stderr);
    assert!(estimate_arl(&model, &c, 100).is_err());
}

#[test]
fn unaffected_hypothesis_is_rejected() {
    let model = MeanScenario::known_shifts(&[1.0, 1.0])
        .build(&[MeanHypothesis::new("none", [])])
        .unwrap();
    let h = &model.hypotheses()[0];
    assert!(estimate_delay(&model, h, &config(10.0, 10)).is_err());
}

#[test]
fn studies_are_reproducible() {
    let a = run_study(StudyId::Study2, 30, 5, None).unwrap();
    let b = run_study(StudyId::Study2, 30, 5, None).unwrap();
    let rows = |r: &[StudyRow]| r.iter().map(StudyRow::csv_row).collect::<Vec<_>>();
    assert_eq!(a.len(), 18);
    assert_eq!(rows(&a), rows(&b));
    let c = run_study(StudyId::Study2, 30, 6, None).unwrap();
    assert_ne!(rows(&a), rows(&c));
}
