//! Policy checks shared by the property suite and the acceptance runner.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use rrcusum::montecarlo::{estimate_delay, StudyConfig};
use rrcusum::policy::run_to_alarm;
use rrcusum::scenario::{MeanHypothesis, MeanScenario};
use rrcusum::stats::substream;
use rrcusum::{ChangePointModel, PolicyConfig, PolicyState, StepDecision, UnitId};

/// Straight-line round robin CUSUM over a fixed increment sequence.
#[derive(Debug, Default, PartialEq)]
pub struct ReferenceTrace {
    /// Unit sampled at each step.
    pub sampled: Vec<usize>,
    pub alarm: Option<(u64, usize)>,
    pub switches: u64,
}

pub fn reference_policy(threshold: f64, num_units: usize, increments: &[f64]) -> ReferenceTrace {
    let mut trace = ReferenceTrace::default();
    let mut y = 0.0f64;
    let mut current = 0usize;
    for (n, &l) in increments.iter().enumerate() {
        trace.sampled.push(current);
        y = if y > 0.0 { y + l } else { l };
        if y >= threshold {
            trace.alarm = Some((n as u64 + 1, current));
            break;
        }
        if y <= 0.0 {
            trace.switches += 1;
            current = if current + 1 == num_units { 0 } else { current + 1 };
        }
    }
    trace
}

pub fn policy_trace(
    threshold: f64,
    order: &[usize],
    increments: &[f64],
) -> Result<ReferenceTrace, TestCaseError> {
    let ids = order.iter().map(|&u| UnitId(u)).collect();
    let mut state = PolicyState::from_order(threshold, ids)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    let mut trace = ReferenceTrace::default();
    for &l in increments {
        let unit = state.required_observation().unwrap().0;
        trace.sampled.push(unit);
        match state.step(l).unwrap() {
            StepDecision::Alarm { at, by } => {
                prop_assert_eq!(by.0, unit);
                prop_assert!(state.is_stopped());
                prop_assert!(state.required_observation().is_err());
                trace.alarm = Some((at, by.0));
                break;
            }
            StepDecision::SwitchToNextUnit { next } => {
                prop_assert!(state.statistic() <= 0.0);
                prop_assert_eq!(next.0, order[state.cursor()]);
                trace.switches += 1;
            }
            StepDecision::ContinueSameUnit => {
                prop_assert!(state.statistic() > 0.0 && state.statistic() < threshold);
            }
        }
    }
    Ok(trace)
}

/// Increments drawn on a coarse grid so that exact hits of 0 and of the
/// threshold occur often.
pub fn increments() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-8i32..=8).prop_map(|k| k as f64 * 0.25), 1..300)
}

pub fn check_matches_reference(
    threshold: f64,
    num_units: usize,
    incs: &[f64],
) -> Result<(), TestCaseError> {
    let order: Vec<usize> = (0..num_units).collect();
    let got = policy_trace(threshold, &order, incs)?;
    let want = reference_policy(threshold, num_units, incs);
    prop_assert_eq!(got, want);
    Ok(())
}

/// A permuted order visits units in exactly that order.
pub fn check_permuted_order(
    threshold: f64,
    order: &[usize],
    incs: &[f64],
) -> Result<(), TestCaseError> {
    let got = policy_trace(threshold, order, incs)?;
    let positions = reference_policy(threshold, order.len(), incs);
    let mapped: Vec<usize> = positions.sampled.iter().map(|&p| order[p]).collect();
    prop_assert_eq!(got.sampled, mapped);
    prop_assert_eq!(got.switches, positions.switches);
    prop_assert_eq!(
        got.alarm,
        positions.alarm.map(|(n, p)| (n, order[p]))
    );
    Ok(())
}

/// Exact boundary values: `Y = 0` switches, `Y = A` alarms, and a negative
/// statistic is reset before the next increment.
pub fn check_boundaries() -> Result<(), TestCaseError> {
    let order = vec![UnitId(0), UnitId(1), UnitId(2)];
    let mut s = PolicyState::from_order(2.0, order.clone()).unwrap();
    prop_assert_eq!(s.step(0.0).unwrap(), StepDecision::SwitchToNextUnit { next: UnitId(1) });
    prop_assert_eq!(s.step(-5.0).unwrap(), StepDecision::SwitchToNextUnit { next: UnitId(2) });
    prop_assert_eq!(s.step(1.0).unwrap(), StepDecision::ContinueSameUnit);
    prop_assert_eq!(s.statistic(), 1.0);
    prop_assert_eq!(s.step(-1.0).unwrap(), StepDecision::SwitchToNextUnit { next: UnitId(0) });
    prop_assert_eq!(s.step(1.5).unwrap(), StepDecision::ContinueSameUnit);
    prop_assert_eq!(s.statistic(), 1.5);
    prop_assert_eq!(s.step(0.5).unwrap(), StepDecision::Alarm { at: 6, by: UnitId(0) });
    prop_assert!(s.step(1.0).is_err());

    let mut s = PolicyState::from_order(2.0, order).unwrap();
    prop_assert_eq!(s.step(-3.0).unwrap(), StepDecision::SwitchToNextUnit { next: UnitId(1) });
    prop_assert_eq!(s.step(2.0).unwrap(), StepDecision::Alarm { at: 2, by: UnitId(1) });
    prop_assert!(PolicyState::from_order(0.0, vec![UnitId(0)]).is_err());
    prop_assert!(PolicyState::from_order(1.0, vec![]).is_err());
    let mut s = PolicyState::from_order(1.0, vec![UnitId(0)]).unwrap();
    prop_assert!(s.step(f64::NAN).is_err());
    Ok(())
}

pub fn mean_model(num_sources: usize, mu: f64, last: usize) -> ChangePointModel {
    let mus = vec![mu; num_sources];
    let shifts = (num_sources + 1 - last..=num_sources).map(|k| (k, mu));
    MeanScenario::known_shifts(&mus)
        .build(&[MeanHypothesis::new("tail", shifts)])
        .unwrap()
}

/// Visits add up to the stopping time, switches match the number of times
/// the cursor moved, and a fixed seed reproduces the run.
pub fn check_run_accounting(seed: u64, gamma: f64, nu: u64) -> Result<(), TestCaseError> {
    let model = mean_model(4, 1.0, 1);
    let h = &model.hypotheses()[0];
    let config = PolicyConfig::from_gamma(gamma).unwrap();
    let run = |s| {
        let mut rng = substream(s, &[1]);
        run_to_alarm(&model, h, &config, Some(nu), &mut rng, 1_000_000).unwrap()
    };
    let r = run(seed);
    prop_assert!(!r.truncated);
    prop_assert_eq!(r.visits.iter().sum::<u64>(), r.stopping_time);
    prop_assert!(r.final_statistic >= config.threshold);
    let alarm = r.alarming_unit.unwrap();
    let position = (r.switches as usize) % model.num_units();
    prop_assert_eq!(alarm, UnitId(position));
    prop_assert_eq!(r.clone(), run(seed));
    Ok(())
}

/// Delay estimates are bit-identical whatever the worker count.
pub fn check_thread_invariance(seed: u64) -> Result<(), TestCaseError> {
    let model = mean_model(5, 0.8, 2);
    let h = &model.hypotheses()[0];
    let config = StudyConfig {
        num_sources: 5,
        unit_size: 1,
        gamma: 50.0,
        s_values: vec![],
        replications: 300,
        seed,
        ..StudyConfig::default()
    };
    let estimate = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| estimate_delay(&model, h, &config).unwrap())
    };
    let one = estimate(1);
    for threads in [2, 3, 8] {
        let other = estimate(threads);
        prop_assert_eq!(one.mean_delay.to_bits(), other.mean_delay.to_bits());
        prop_assert_eq!(one.stderr.to_bits(), other.stderr.to_bits());
    }
    Ok(())
}

/// Every increment sequence of length `1..=max_len` over `grid`, with every
/// unit count in `1..=max_units`, against the reference. Returns the number
/// of sequences checked.
pub fn check_exhaustive(
    grid: &[f64],
    threshold: f64,
    max_len: usize,
    max_units: usize,
) -> Result<u64, TestCaseError> {
    let mut checked = 0;
    let mut seq = Vec::with_capacity(max_len);
    for len in 1..=max_len {
        let total = grid.len().pow(len as u32);
        for code in 0..total {
            seq.clear();
            let mut c = code;
            for _ in 0..len {
                seq.push(grid[c % grid.len()]);
                c /= grid.len();
            }
            for units in 1..=max_units {
                check_matches_reference(threshold, units, &seq)?;
                checked += 1;
            }
        }
    }
    Ok(checked)
}
