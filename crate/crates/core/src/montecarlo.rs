//! Experiment harness: worst-case detection delay, truncated pre-change run
//! length, and the three reference correlation studies on `K = 10` sources.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundsCalculator, BoundsSettings, OptimalityClass};
use crate::error::{Error, Result};
use crate::model::{binomial, ChangePointModel, PostChangeHypothesis, Unit, UnitId};
use crate::policy::{run_with_view, PolicyConfig, RunResult};
use crate::scenario::{CorrelationHypothesis, CorrelationScenario};
use crate::stats::{format_significant, substream, MeanAccumulator};

/// Default cap on the length of one delay replication.
pub const DEFAULT_DELAY_CAP: u64 = 10_000_000;
/// Relative standard error above which an estimate is flagged.
pub const STDERR_WARNING_RATIO: f64 = 0.05;

const TAG_ARL: u64 = 0xA12;
const REPLICATIONS_PER_TASK: u64 = 16;

/// Round-robin permutation used for delay estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    /// Unaffected units first, then affected units, each lexicographic.
    WorstCase,
    /// The model's own unit order.
    AsGiven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub num_sources: usize,
    pub unit_size: usize,
    pub rho: f64,
    pub gamma: f64,
    /// Numbers of affected sources; source block `{K−s+1, …, K}`.
    pub s_values: Vec<usize>,
    pub replications: u64,
    pub seed: u64,
    /// Change time `ν`.
    pub nu: u64,
    pub ordering: Ordering,
    /// Truncation point of a single replication.
    pub max_steps: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            num_sources: 10,
            unit_size: 2,
            rho: 0.7,
            gamma: 100.0,
            s_values: (2..=10).collect(),
            replications: 4000,
            seed: crate::stats::DEFAULT_SEED,
            nu: 0,
            ordering: Ordering::WorstCase,
            max_steps: DEFAULT_DELAY_CAP,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be >= 1".into()));
        }
        if !(self.gamma > 1.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gamma = {} must be finite and > 1",
                self.gamma
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be >= 1".into()));
        }
        if let Some(s) = self
            .s_values
            .iter()
            .find(|&&s| s < 2 || s > self.num_sources)
        {
            return Err(Error::InvalidConfig(format!(
                "s = {s} must satisfy 2 <= s <= K = {}",
                self.num_sources
            )));
        }
        Ok(())
    }

    /// Correlation scenario with `𝒰 = 𝒦_m` and `ℛ = {ρ}`.
    pub fn scenario(&self) -> CorrelationScenario {
        CorrelationScenario::unrestricted(self.num_sources, self.unit_size, vec![self.rho])
    }

    pub fn hypotheses(&self) -> Vec<CorrelationHypothesis> {
        self.s_values
            .iter()
            .map(|&s| CorrelationHypothesis::trailing_block(self.num_sources, s, self.rho))
            .collect()
    }
}

/// Mean of `T̃ − ν` (or of `T̃` for run-length estimates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DelayEstimate {
    pub mean_delay: f64,
    pub stderr: f64,
    /// Replications that entered the mean.
    pub replications: u64,
    /// Replications stopped by the step cap; they enter the mean at the cap.
    pub truncation_count: u64,
    /// Replications discarded because they alarmed at or before `ν`.
    pub discarded: u64,
    /// `stderr / mean > 5%`.
    pub stderr_warning: bool,
}

impl DelayEstimate {
    fn from_accumulator(acc: &MeanAccumulator, truncation_count: u64, discarded: u64) -> Self {
        let mean = acc.mean();
        let stderr = acc.std_error();
        Self {
            mean_delay: mean,
            stderr,
            replications: acc.count(),
            truncation_count,
            discarded,
            stderr_warning: !(stderr <= STDERR_WARNING_RATIO * mean.abs()),
        }
    }
}

/// Indices into `units` listing unaffected units before affected ones,
/// each group in lexicographic order.
pub fn worst_case_permutation(units: &[Unit], affected: &BTreeSet<Unit>) -> Result<Vec<UnitId>> {
    if let Some(u) = affected.iter().find(|u| !units.contains(u)) {
        return Err(Error::InvalidInput(format!("affected unit {u} is not in the family")));
    }
    let mut ids: Vec<UnitId> = (0..units.len()).map(UnitId).collect();
    ids.sort_by(|a, b| {
        let (ua, ub) = (&units[a.0], &units[b.0]);
        (affected.contains(ua), ua).cmp(&(affected.contains(ub), ub))
    });
    Ok(ids)
}

fn ordering_for(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    ordering: Ordering,
) -> Result<Option<Vec<UnitId>>> {
    match ordering {
        Ordering::AsGiven => Ok(None),
        Ordering::WorstCase => {
            let affected: BTreeSet<Unit> = model
                .affected_units(hypothesis)
                .into_iter()
                .map(|id| model.unit(id).clone())
                .collect();
            worst_case_permutation(model.units(), &affected).map(Some)
        }
    }
}

#[derive(Default)]
struct Tally {
    acc: MeanAccumulator,
    truncated: u64,
    discarded: u64,
}

/// Runs `reps` replications, replication `i` on `substream(seed, prefix ++ [i])`,
/// and merges in replication order.
fn replicate(
    reps: u64,
    seed: u64,
    prefix: &[u64],
    run: impl Fn(&mut crate::stats::RandomStream) -> Result<RunResult> + Sync,
    value: impl Fn(&RunResult) -> Option<f64> + Sync,
) -> Result<Tally> {
    let tasks = reps.div_ceil(REPLICATIONS_PER_TASK);
    let parts: Vec<Result<Tally>> = (0..tasks)
        .into_par_iter()
        .map(|t| {
            let mut tally = Tally::default();
            let first = t * REPLICATIONS_PER_TASK;
            for i in first..(first + REPLICATIONS_PER_TASK).min(reps) {
                let mut path = prefix.to_vec();
                path.push(i);
                let mut rng = substream(seed, &path);
                let r = run(&mut rng)?;
                match value(&r) {
                    Some(v) => {
                        tally.acc.push(v);
                        tally.truncated += u64::from(r.truncated);
                    }
                    None => tally.discarded += 1,
                }
            }
            Ok(tally)
        })
        .collect();
    let mut total = Tally::default();
    for p in parts {
        let p = p?;
        total.acc.merge(&p.acc);
        total.truncated += p.truncated;
        total.discarded += p.discarded;
    }
    Ok(total)
}

/// Mean of `T̃ − ν` over replications with `A = log γ`, conditioned on
/// `T̃ > ν`. With worst-case ordering the affected units are visited last.
pub fn estimate_delay(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    config: &StudyConfig,
) -> Result<DelayEstimate> {
    config.validate()?;
    if model.affected_units(hypothesis).is_empty() {
        return Err(Error::AssumptionViolated(format!(
            "hypothesis {} affects no unit of the family",
            hypothesis.label()
        )));
    }
    let mut policy = PolicyConfig::from_gamma(config.gamma)?;
    policy.unit_order = ordering_for(model, hypothesis, config.ordering)?;
    estimate_delay_with(model, hypothesis, &policy, config)
}

/// [`estimate_delay`] with an explicit policy configuration.
pub fn estimate_delay_with(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    policy: &PolicyConfig,
    config: &StudyConfig,
) -> Result<DelayEstimate> {
    config.validate()?;
    let view = model.view(hypothesis);
    let nu = config.nu;
    let tally = replicate(
        config.replications,
        config.seed,
        &[],
        |rng| run_with_view(model, &view, policy, Some(nu), rng, nu + config.max_steps),
        |r| r.delay(nu).map(|d| d as f64),
    )?;
    if tally.acc.count() == 0 {
        return Err(Error::Precondition(format!(
            "every replication alarmed at or before nu = {nu}"
        )));
    }
    Ok(DelayEstimate::from_accumulator(
        &tally.acc,
        tally.truncated,
        tally.discarded,
    ))
}

/// Mean of `min(T̃, cap)` without change. Truncation makes this a lower
/// bound on the expected false-alarm time.
pub fn estimate_arl(model: &ChangePointModel, config: &StudyConfig, cap: u64) -> Result<DelayEstimate> {
    config.validate()?;
    if (cap as f64) < 10.0 * config.gamma {
        return Err(Error::Precondition(format!(
            "run-length cap {cap} must be at least 10 gamma = {}",
            10.0 * config.gamma
        )));
    }
    let policy = PolicyConfig::from_gamma(config.gamma)?;
    let view = model.view(&PostChangeHypothesis::new("no-change"));
    let tally = replicate(
        config.replications,
        config.seed,
        &[TAG_ARL],
        |rng| run_with_view(model, &view, &policy, None, rng, cap),
        |r| Some(r.stopping_time as f64),
    )?;
    Ok(DelayEstimate::from_accumulator(&tally.acc, tally.truncated, 0))
}

/// The reference studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudyId {
    /// `ρ = 0.7`, `m = 2`, `γ ∈ {10², 10⁵}`.
    Study1,
    /// `ρ = 0.7`, `γ = 10²`, `m ∈ {2, 3}`.
    Study2,
    /// As study 2 with `ρ = 0.95`.
    Study3,
}

impl StudyId {
    pub fn number(self) -> u8 {
        match self {
            StudyId::Study1 => 1,
            StudyId::Study2 => 2,
            StudyId::Study3 => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(StudyId::Study1),
            2 => Ok(StudyId::Study2),
            3 => Ok(StudyId::Study3),
            _ => Err(Error::InvalidConfig(format!("unknown study id {n}; expected 1, 2 or 3"))),
        }
    }

    /// One configuration per arm, with `replications` and `seed` applied.
    pub fn arms(self, replications: u64, seed: u64) -> Vec<StudyConfig> {
        let base = StudyConfig {
            replications,
            seed,
            ..StudyConfig::default()
        };
        match self {
            StudyId::Study1 => [1e2, 1e5]
                .into_iter()
                .map(|gamma| StudyConfig { gamma, ..base.clone() })
                .collect(),
            StudyId::Study2 | StudyId::Study3 => {
                let rho = if self == StudyId::Study2 { 0.7 } else { 0.95 };
                [2, 3]
                    .into_iter()
                    .map(|unit_size| StudyConfig {
                        unit_size,
                        rho,
                        ..base.clone()
                    })
                    .collect()
            }
        }
    }
}

/// One `(arm, s)` point of a study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub study: u8,
    pub num_sources: usize,
    pub unit_size: usize,
    pub rho: f64,
    pub gamma: f64,
    pub s: usize,
    /// `C(s, 2)`.
    pub num_correlated_pairs: u64,
    /// `|𝒜(G) ∩ 𝒰|`.
    pub num_affected_units: usize,
    pub delay: DelayEstimate,
    pub lower_bound: f64,
    pub upper_bound_prop4: f64,
    pub upper_bound_remark2: f64,
    pub optimality_class: Option<OptimalityClass>,
}

impl StudyRow {
    pub const CSV_HEADER: &'static str = "study,K,m,rho,gamma,s,num_correlated_pairs,\
mean_delay,stderr,truncations,lower_bound,upper_bound_prop4,upper_bound_remark2";

    pub fn csv_row(&self) -> String {
        let n = |x: f64| format_significant(x, 6);
        [
            self.study.to_string(),
            self.num_sources.to_string(),
            self.unit_size.to_string(),
            n(self.rho),
            n(self.gamma),
            self.s.to_string(),
            self.num_correlated_pairs.to_string(),
            n(self.delay.mean_delay),
            n(self.delay.stderr),
            self.delay.truncation_count.to_string(),
            n(self.lower_bound),
            n(self.upper_bound_prop4),
            n(self.upper_bound_remark2),
        ]
        .join(",")
    }
}

/// Delay estimates and bounds for every `s` of one configuration. Bounds are
/// skipped when `bounds` is `None`.
pub fn run_sweep(
    study: u8,
    config: &StudyConfig,
    bounds: Option<BoundsSettings>,
) -> Result<Vec<StudyRow>> {
    config.validate()?;
    let model = config.scenario().build(&config.hypotheses())?;
    let calculator = bounds
        .map(|b| BoundsCalculator::new(&model, b))
        .transpose()?;
    let mut rows = Vec::with_capacity(config.s_values.len());
    for (&s, hypothesis) in config.s_values.iter().zip(model.hypotheses()) {
        let delay = estimate_delay(&model, hypothesis, config)?;
        let (lower, prop4, remark2, class) = match &calculator {
            Some(c) => {
                let r = c.report(hypothesis, config.gamma)?;
                (
                    r.lower_bound_first_order,
                    r.prop4(),
                    r.remark2(),
                    Some(r.optimality_class),
                )
            }
            None => (f64::NAN, f64::NAN, f64::NAN, None),
        };
        rows.push(StudyRow {
            study,
            num_sources: config.num_sources,
            unit_size: config.unit_size,
            rho: config.rho,
            gamma: config.gamma,
            s,
            num_correlated_pairs: binomial(s, 2),
            num_affected_units: model.affected_units(hypothesis).len(),
            delay,
            lower_bound: lower,
            upper_bound_prop4: prop4,
            upper_bound_remark2: remark2,
            optimality_class: class,
        });
    }
    Ok(rows)
}

/// All arms of a reference study.
pub fn run_study(
    id: StudyId,
    replications: u64,
    seed: u64,
    bounds: Option<BoundsSettings>,
) -> Result<Vec<StudyRow>> {
    let mut rows = Vec::new();
    for arm in id.arms(replications, seed) {
        rows.extend(run_sweep(id.number(), &arm, bounds)?);
    }
    Ok(rows)
}

/// Fixed-width table for terminals.
pub fn format_summary(rows: &[StudyRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5} {:>2} {:>5} {:>8} {:>3} {:>5} {:>12} {:>10} {:>10} {:>12}",
        "study", "m", "rho", "gamma", "s", "|A|", "mean_delay", "stderr", "lower", "upper(P4)"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>5} {:>2} {:>5} {:>8} {:>3} {:>5} {:>12.3} {:>10.3} {:>10.3} {:>12.3}{}",
            r.study,
            r.unit_size,
            r.rho,
            r.gamma,
            r.s,
            r.num_affected_units,
            r.delay.mean_delay,
            r.delay.stderr,
            r.lower_bound,
            r.upper_bound_prop4,
            if r.delay.stderr_warning { "  (stderr > 5%)" } else { "" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::all_units;

    #[test]
    fn worst_case_order_moves_affected_last() {
        let units = all_units(4, 2);
        let affected: BTreeSet<Unit> = [Unit::new([3, 4], 4).unwrap()].into();
        let perm = worst_case_permutation(&units, &affected).unwrap();
        let shown: Vec<String> = perm.iter().map(|id| units[id.0].to_string()).collect();
        assert_eq!(shown, ["{1,2}", "{1,3}", "{1,4}", "{2,3}", "{2,4}", "{3,4}"]);

        let affected: BTreeSet<Unit> = [Unit::new([1, 2], 4).unwrap()].into();
        let perm = worst_case_permutation(&units, &affected).unwrap();
        assert_eq!(units[perm[5].0].to_string(), "{1,2}");
        assert_eq!(units[perm[0].0].to_string(), "{1,3}");

        let all: BTreeSet<Unit> = units.iter().cloned().collect();
        let canonical: Vec<UnitId> = (0..6).map(UnitId).collect();
        assert_eq!(worst_case_permutation(&units, &all).unwrap(), canonical);
        assert_eq!(worst_case_permutation(&units, &BTreeSet::new()).unwrap(), canonical);

        let foreign: BTreeSet<Unit> = [Unit::new([1, 5], 5).unwrap()].into();
        assert!(worst_case_permutation(&units, &foreign).is_err());
    }

    #[test]
    fn study_arms() {
        let a = StudyId::Study1.arms(10, 1);
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].gamma, a[1].gamma), (1e2, 1e5));
        let b = StudyId::Study3.arms(10, 1);
        assert_eq!((b[0].unit_size, b[1].unit_size), (2, 3));
        assert!(b.iter().all(|c| c.rho == 0.95 && c.gamma == 100.0));
        assert!(StudyId::from_number(4).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = StudyConfig {
            s_values: vec![1],
            ..StudyConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = StudyConfig {
            replications: 0,
            ..StudyConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn arl_cap_precondition() {
        let config = StudyConfig {
            replications: 10,
            ..StudyConfig::default()
        };
        let model = config.scenario().build(&config.hypotheses()).unwrap();
        assert!(matches!(
            estimate_arl(&model, &config, 999),
            Err(Error::Precondition(_))
        ));
    }
}
