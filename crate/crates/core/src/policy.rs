//! Round Robin CUSUM: the statistic recursion `Y_n = max{Y_{n−1}, 0} + ξ_n`,
//! the unit-switching rule and the stopping rule.
//!
//! The policy only ever sees log-likelihood ratio values through
//! [`PolicyState::step`]; [`run_to_alarm`] wires it to a data stream.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ChangePointModel, HypothesisView, PostChangeHypothesis, UnitId};
use crate::stats::RandomStream;

/// Safety cap on the length of a single run.
pub const DEFAULT_MAX_STEPS: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyConfig {
    /// Threshold `A` in nats.
    pub threshold: f64,
    /// Round-robin permutation of the model's units; `None` keeps the
    /// model's own order.
    pub unit_order: Option<Vec<UnitId>>,
}

impl PolicyConfig {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            unit_order: None,
        }
    }

    /// `A = log γ`, which guarantees an expected false-alarm time of at least γ.
    pub fn from_gamma(gamma: f64) -> Result<Self> {
        if !(gamma > 1.0) || !gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "false-alarm level gamma = {gamma} must be finite and > 1"
            )));
        }
        Ok(Self::new(gamma.ln()))
    }

    pub fn with_order(mut self, order: Vec<UnitId>) -> Self {
        self.unit_order = Some(order);
        self
    }
}

/// Outcome of one recursion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StepDecision {
    ContinueSameUnit,
    SwitchToNextUnit { next: UnitId },
    Alarm { at: u64, by: UnitId },
}

/// Running state of the policy. Single owner; never shared.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    threshold: f64,
    order: Vec<UnitId>,
    statistic: f64,
    cursor: usize,
    steps: u64,
    stopped: bool,
}

impl PolicyState {
    /// `Y ← 0`, cursor on the first unit of the permutation.
    pub fn init(model: &ChangePointModel, config: &PolicyConfig) -> Result<Self> {
        let n = model.num_units();
        let order = match &config.unit_order {
            Some(order) => {
                let mut seen = vec![false; n];
                for id in order {
                    if id.0 >= n || std::mem::replace(&mut seen[id.0], true) {
                        return Err(Error::InvalidConfig(
                            "unit order is not a permutation of the model's units".into(),
                        ));
                    }
                }
                if order.len() != n {
                    return Err(Error::InvalidConfig(
                        "unit order is not a permutation of the model's units".into(),
                    ));
                }
                order.clone()
            }
            None => model.unit_ids().collect(),
        };
        Self::from_order(config.threshold, order)
    }

    /// State over an explicit order, independent of any model.
    pub fn from_order(threshold: f64, order: Vec<UnitId>) -> Result<Self> {
        if !(threshold > 0.0) || !threshold.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "threshold A = {threshold} must be finite and > 0"
            )));
        }
        if order.is_empty() {
            return Err(Error::InvalidConfig("the family of units is empty".into()));
        }
        Ok(Self {
            threshold,
            order,
            statistic: 0.0,
            cursor: 0,
            steps: 0,
            stopped: false,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn statistic(&self) -> f64 {
        self.statistic
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn order(&self) -> &[UnitId] {
        &self.order
    }

    /// Unit whose sources must be sampled at time `n + 1`.
    pub fn required_observation(&self) -> Result<UnitId> {
        if self.stopped {
            return Err(Error::IllegalState("policy has already raised an alarm"));
        }
        Ok(self.order[self.cursor])
    }

    /// Feeds `ξ_{n+1}` for the unit returned by `required_observation`.
    pub fn step(&mut self, llr: f64) -> Result<StepDecision> {
        if self.stopped {
            return Err(Error::IllegalState("policy has already raised an alarm"));
        }
        let at = self.steps + 1;
        if !llr.is_finite() {
            return Err(Error::NonFiniteLlr { step: at });
        }
        self.steps = at;
        self.statistic = self.statistic.max(0.0) + llr;
        let current = self.order[self.cursor];
        if self.statistic >= self.threshold {
            self.stopped = true;
            Ok(StepDecision::Alarm { at, by: current })
        } else if self.statistic <= 0.0 {
            // E_d → E_{d+1}, wrapping E_|U| → E_1
            self.cursor = (self.cursor + 1) % self.order.len();
            Ok(StepDecision::SwitchToNextUnit {
                next: self.order[self.cursor],
            })
        } else {
            Ok(StepDecision::ContinueSameUnit)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    /// `T̃`, or the step count at truncation.
    pub stopping_time: u64,
    pub alarming_unit: Option<UnitId>,
    pub truncated: bool,
    pub final_statistic: f64,
    /// Samples drawn from each unit, indexed by `UnitId`.
    pub visits: Vec<u64>,
    pub switches: u64,
}

impl RunResult {
    /// `T̃ − ν` when `T̃ > ν`.
    pub fn delay(&self, change_time: u64) -> Option<u64> {
        self.stopping_time.checked_sub(change_time).filter(|&d| d > 0)
    }
}

/// Runs the policy on data generated with the change at `change_time`
/// (`None` = no change). Observations at times `n <= ν` follow `F^E`; later
/// ones follow `G^E` for affected units and `F^E` otherwise.
pub fn run_to_alarm(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    config: &PolicyConfig,
    change_time: Option<u64>,
    rng: &mut RandomStream,
    max_steps: u64,
) -> Result<RunResult> {
    let view = model.view(hypothesis);
    run_with_view(model, &view, config, change_time, rng, max_steps)
}

/// [`run_to_alarm`] with a prebuilt hypothesis lookup table.
pub fn run_with_view(
    model: &ChangePointModel,
    view: &HypothesisView,
    config: &PolicyConfig,
    change_time: Option<u64>,
    rng: &mut RandomStream,
    max_steps: u64,
) -> Result<RunResult> {
    if max_steps == 0 {
        return Err(Error::Precondition("max_steps must be at least 1".into()));
    }
    let mut state = PolicyState::init(model, config)?;
    let mut visits = vec![0u64; model.num_units()];
    let mut switches = 0;
    let mut x = vec![0.0; model.unit_size()];
    let nu = change_time.unwrap_or(u64::MAX);
    while state.steps() < max_steps {
        let id = state.required_observation()?;
        let n = state.steps() + 1;
        let law = match view.post(id) {
            Some(post) if n > nu => post,
            _ => model.pre_law(id),
        };
        law.sample_into(rng, &mut x);
        visits[id.0] += 1;
        match state.step(model.llr(id, &x))? {
            StepDecision::Alarm { at, by } => {
                return Ok(RunResult {
                    stopping_time: at,
                    alarming_unit: Some(by),
                    truncated: false,
                    final_statistic: state.statistic(),
                    visits,
                    switches,
                })
            }
            StepDecision::SwitchToNextUnit { .. } => switches += 1,
            StepDecision::ContinueSameUnit => {}
        }
    }
    Ok(RunResult {
        stopping_time: state.steps(),
        alarming_unit: None,
        truncated: true,
        final_statistic: state.statistic(),
        visits,
        switches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<UnitId> {
        (0..n).map(UnitId).collect()
    }

    #[test]
    fn threshold_from_gamma() {
        let c = PolicyConfig::from_gamma(100.0).unwrap();
        assert!((c.threshold - 4.605_170_185_988_09).abs() < 1e-12);
        assert!(PolicyConfig::from_gamma(1.0).is_err());
        assert!(PolicyState::from_order(0.0, ids(3)).is_err());
        assert!(PolicyState::from_order(-1.0, ids(3)).is_err());
        assert!(PolicyState::from_order(1.0, vec![]).is_err());
    }

    #[test]
    fn recursion_examples() {
        let mut s = PolicyState::from_order(4.6052, ids(3)).unwrap();
        assert_eq!(s.required_observation().unwrap(), UnitId(0));
        assert_eq!(
            s.step(-0.2).unwrap(),
            StepDecision::SwitchToNextUnit { next: UnitId(1) }
        );
        assert!((s.statistic() + 0.2).abs() < 1e-15);
        // re-entry restarts from max{−0.2, 0} = 0
        assert_eq!(s.step(0.3).unwrap(), StepDecision::ContinueSameUnit);
        assert!((s.statistic() - 0.3).abs() < 1e-15);
        s.step(4.2).unwrap();
        assert!((s.statistic() - 4.5).abs() < 1e-12);
        assert_eq!(
            s.step(0.2).unwrap(),
            StepDecision::Alarm { at: 4, by: UnitId(1) }
        );
        assert!(s.required_observation().is_err());
        assert!(matches!(s.step(0.1), Err(Error::IllegalState(_))));
    }

    #[test]
    fn boundaries_are_inclusive() {
        let mut s = PolicyState::from_order(1.0, ids(2)).unwrap();
        assert_eq!(
            s.step(0.0).unwrap(),
            StepDecision::SwitchToNextUnit { next: UnitId(1) }
        );
        assert_eq!(s.step(1.0).unwrap(), StepDecision::Alarm { at: 2, by: UnitId(1) });
    }

    #[test]
    fn cursor_wraps() {
        let mut s = PolicyState::from_order(10.0, ids(3)).unwrap();
        for expected in [1, 2, 0, 1] {
            assert_eq!(
                s.step(-1.0).unwrap(),
                StepDecision::SwitchToNextUnit { next: UnitId(expected) }
            );
        }
        let mut single = PolicyState::from_order(10.0, ids(1)).unwrap();
        assert_eq!(
            single.step(-1.0).unwrap(),
            StepDecision::SwitchToNextUnit { next: UnitId(0) }
        );
    }

    #[test]
    fn non_finite_llr_aborts() {
        let mut s = PolicyState::from_order(10.0, ids(2)).unwrap();
        s.step(0.5).unwrap();
        assert_eq!(s.step(f64::NAN), Err(Error::NonFiniteLlr { step: 2 }));
        assert_eq!(s.step(f64::NEG_INFINITY), Err(Error::NonFiniteLlr { step: 2 }));
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn delay_requires_stopping_after_change() {
        let r = RunResult {
            stopping_time: 10,
            alarming_unit: Some(UnitId(0)),
            truncated: false,
            final_statistic: 5.0,
            visits: vec![10],
            switches: 0,
        };
        assert_eq!(r.delay(0), Some(10));
        assert_eq!(r.delay(4), Some(6));
        assert_eq!(r.delay(10), None);
        assert_eq!(r.delay(12), None);
    }
}
