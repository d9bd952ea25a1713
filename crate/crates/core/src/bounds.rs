//! Analytic performance quantities: information numbers, pre- and
//! post-change drifts, ladder probabilities, first-order lower and upper
//! bounds, the ARE bound, the optimality classification and the
//! non-asymptotic delay bound.
//!
//! Quantities without a closed form are Monte Carlo estimates carrying a
//! standard error. Every estimator draws from deterministic substreams of a
//! caller-supplied seed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    all_units, binomial, law_ptr, ChangePointModel, PostChangeHypothesis, SharedLaw, Unit, UnitId,
};
use crate::stats::{format_significant, parallel_moments, substream, Estimate, RandomStream};

/// Smallest replication count accepted by the drift estimators.
pub const MIN_DRIFT_REPS: u64 = 10_000;
/// Smallest horizon accepted by the model-level ladder estimators.
pub const MIN_LADDER_HORIZON: u64 = 1_000;
/// Smallest replication count accepted by the model-level ladder estimators.
pub const MIN_LADDER_REPS: u64 = 10_000;
/// Largest `C(K, m)` for which information numbers are enumerated over
/// every size-`m` subset.
pub const MAX_ENUMERATED_SUBSETS: u64 = 1_000_000;

// Seed-path tags, one per estimated quantity.
const TAG_INFO: u64 = 1;
const TAG_POST: u64 = 2;
const TAG_PRE: u64 = 3;
const TAG_NO_DESCEND: u64 = 5;
const TAG_NO_ASCEND: u64 = 6;

/// How to obtain `I^E_0(G)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InfoMethod {
    ClosedForm,
    MonteCarlo { reps: u64, seed: u64 },
}

/// `I^E_0(G)` together with whether the unit is affected at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InfoNumber {
    pub estimate: Estimate,
    /// False when `G^E = F^E`; the value is then exactly 0.
    pub affected: bool,
}

fn significantly_positive(e: &Estimate) -> bool {
    e.value > 0.0 && e.value - 3.0 * e.stderr > 0.0
}

fn require_reps(reps: u64, min: u64, what: &str) -> Result<()> {
    if reps < min {
        return Err(Error::Precondition(format!(
            "{what} needs at least {min} replications, got {reps}"
        )));
    }
    Ok(())
}

/// `KL(G^E ‖ F^E)`. Unaffected units return an exact 0 with `affected = false`.
pub fn info_number(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    id: UnitId,
    method: InfoMethod,
) -> Result<InfoNumber> {
    let unit = model.unit(id);
    let Some(post) = hypothesis.post_law(unit) else {
        return Ok(InfoNumber {
            estimate: Estimate::exact(0.0),
            affected: false,
        });
    };
    let pre = model.pre_law(id);
    let estimate = match method {
        InfoMethod::ClosedForm => {
            let (Some(g), Some(f)) = (post.as_gaussian(), pre.as_gaussian()) else {
                return Err(Error::InvalidInput(format!(
                    "no closed-form information number for unit {unit}"
                )));
            };
            Estimate::exact(g.kl_divergence(f)?)
        }
        InfoMethod::MonteCarlo { reps, seed } => {
            require_reps(reps, 1, "info_number")?;
            let dim = model.unit_size();
            parallel_moments(reps, seed, &[TAG_INFO, id.0 as u64], |rng| {
                let mut x = smallvec::SmallVec::<[f64; 8]>::from_elem(0.0, dim);
                post.sample_into(rng, &mut x);
                post.log_density(&x) - pre.log_density(&x)
            })
            .estimate()
        }
    };
    Ok(InfoNumber {
        estimate,
        affected: true,
    })
}

/// Closed form when both local laws are Gaussian, Monte Carlo otherwise.
fn info_number_auto(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    id: UnitId,
    fallback: InfoMethod,
) -> Result<InfoNumber> {
    match info_number(model, hypothesis, id, InfoMethod::ClosedForm) {
        Err(Error::InvalidInput(_)) => info_number(model, hypothesis, id, fallback),
        other => other,
    }
}

/// `J^E_0(G) = E_0^G[ξ^E_1]`. For an unaffected unit the draws come from
/// `F^E`, so the result is `−J^E_∞`.
pub fn drift_post(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    id: UnitId,
    reps: u64,
    seed: u64,
) -> Result<Estimate> {
    require_reps(reps, MIN_DRIFT_REPS, "drift_post")?;
    let law = hypothesis
        .post_law(model.unit(id))
        .unwrap_or_else(|| model.pre_law(id));
    Ok(model
        .llr_moments(id, law.as_ref(), reps, seed, &[TAG_POST, id.0 as u64])
        .estimate())
}

/// `J^E_∞ = E_∞[−ξ^E_1] = KL(F^E ‖ H^E)`.
pub fn drift_pre(model: &ChangePointModel, id: UnitId, reps: u64, seed: u64) -> Result<Estimate> {
    require_reps(reps, MIN_DRIFT_REPS, "drift_pre")?;
    Ok(model
        .mapped_llr_moments(
            id,
            model.pre_law(id).as_ref(),
            reps,
            seed,
            &[TAG_PRE, id.0 as u64],
            |xi| -xi,
        )
        .estimate())
}

/// Mean and centered second moment of `ξ^E` under `G^E`, from the same draws.
fn post_moments(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    id: UnitId,
    reps: u64,
    seed: u64,
) -> Result<(Estimate, Estimate)> {
    let Some(law) = hypothesis.post_law(model.unit(id)) else {
        return Err(Error::Precondition(format!(
            "unit {} is not affected by hypothesis {}",
            model.unit(id),
            hypothesis.label()
        )));
    };
    let path = [TAG_POST, id.0 as u64];
    let drift = model.llr_moments(id, law.as_ref(), reps, seed, &path).estimate();
    let centre = drift.value;
    let second = model
        .mapped_llr_moments(id, law.as_ref(), reps, seed, &path, |xi| (xi - centre).powi(2))
        .estimate();
    Ok((drift, second))
}

/// `W^E_0(G) = E_G[(ξ^E_1 − J^E_0)²]`, using the draws of [`drift_post`].
pub fn llr_second_moment(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    id: UnitId,
    reps: u64,
    seed: u64,
) -> Result<Estimate> {
    require_reps(reps, 2, "llr_second_moment")?;
    post_moments(model, hypothesis, id, reps, seed).map(|(_, w)| w)
}

/// Which zero crossing ends a walk `S_n = ξ_1 + … + ξ_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LadderSide {
    /// Survives while `S_n ≥ 0`; estimates `q_−`.
    NoDescend,
    /// Survives while `S_n ≤ 0`; estimates `q_+`.
    NoAscend,
}

impl LadderSide {
    fn survives(self, sum: f64) -> bool {
        match self {
            LadderSide::NoDescend => sum >= 0.0,
            LadderSide::NoAscend => sum <= 0.0,
        }
    }
}

/// Horizon schedule for [`walk_survival_converged`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderSettings {
    pub start_horizon: u64,
    pub max_horizon: u64,
    pub reps: u64,
}

impl Default for LadderSettings {
    fn default() -> Self {
        Self {
            start_horizon: 1_000,
            max_horizon: 64_000,
            reps: 10_000,
        }
    }
}

/// Survival fraction at the final horizon of a doubling schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderEstimate {
    pub estimate: Estimate,
    pub horizon: u64,
    /// Whether two successive horizons agreed within 2 pooled stderr.
    pub converged: bool,
}

const WALKS_PER_CHUNK: u64 = 256;

/// Walks of one parallel task, resumable at a longer horizon.
struct WalkChunk {
    rng: RandomStream,
    sums: Vec<f64>,
    alive: Vec<bool>,
}

struct WalkBank {
    side: LadderSide,
    chunks: Vec<WalkChunk>,
    reps: u64,
    horizon: u64,
}

impl WalkBank {
    fn new(side: LadderSide, reps: u64, seed: u64, path: &[u64]) -> Self {
        let chunks = (0..reps.div_ceil(WALKS_PER_CHUNK))
            .map(|c| {
                let mut p = path.to_vec();
                p.push(c);
                let n = WALKS_PER_CHUNK.min(reps - c * WALKS_PER_CHUNK) as usize;
                WalkChunk {
                    rng: substream(seed, &p),
                    sums: vec![0.0; n],
                    alive: vec![true; n],
                }
            })
            .collect();
        Self {
            side,
            chunks,
            reps,
            horizon: 0,
        }
    }

    fn extend_to<F>(&mut self, horizon: u64, increment: &F)
    where
        F: Fn(&mut RandomStream) -> f64 + Sync,
    {
        let steps = horizon.saturating_sub(self.horizon);
        let side = self.side;
        self.chunks.par_iter_mut().for_each(|chunk| {
            for (sum, alive) in chunk.sums.iter_mut().zip(chunk.alive.iter_mut()) {
                if !*alive {
                    continue;
                }
                for _ in 0..steps {
                    *sum += increment(&mut chunk.rng);
                    if !side.survives(*sum) {
                        *alive = false;
                        break;
                    }
                }
            }
        });
        self.horizon = self.horizon.max(horizon);
    }

    fn survival(&self) -> Estimate {
        let alive: usize = self
            .chunks
            .iter()
            .map(|c| c.alive.iter().filter(|&&a| a).count())
            .sum();
        Estimate::proportion(alive as u64, self.reps)
    }
}

/// Fraction of `reps` walks with i.i.d. increments `increment(rng)` that
/// survive `horizon` steps. Surviving a finite horizon is implied by
/// surviving forever, so this overestimates the ladder probability.
pub fn walk_survival<F>(
    increment: F,
    side: LadderSide,
    horizon: u64,
    reps: u64,
    seed: u64,
    path: &[u64],
) -> Result<Estimate>
where
    F: Fn(&mut RandomStream) -> f64 + Sync,
{
    require_reps(reps, 1, "walk_survival")?;
    let mut bank = WalkBank::new(side, reps, seed, path);
    bank.extend_to(horizon, &increment);
    Ok(bank.survival())
}

/// Survival fractions of the same walks at each of the increasing
/// `horizons`, so the profile is non-increasing by construction.
pub fn walk_survival_profile<F>(
    increment: F,
    side: LadderSide,
    horizons: &[u64],
    reps: u64,
    seed: u64,
    path: &[u64],
) -> Result<Vec<Estimate>>
where
    F: Fn(&mut RandomStream) -> f64 + Sync,
{
    require_reps(reps, 1, "walk_survival_profile")?;
    if horizons.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("horizons must be non-decreasing".into()));
    }
    let mut bank = WalkBank::new(side, reps, seed, path);
    Ok(horizons
        .iter()
        .map(|&h| {
            bank.extend_to(h, &increment);
            bank.survival()
        })
        .collect())
}

/// [`walk_survival`] with horizons `h, 2h, 4h, …` on the same walks,
/// stopping when successive estimates differ by less than twice their
/// pooled standard error or when `max_horizon` would be exceeded.
pub fn walk_survival_converged<F>(
    increment: F,
    side: LadderSide,
    settings: LadderSettings,
    seed: u64,
    path: &[u64],
) -> Result<LadderEstimate>
where
    F: Fn(&mut RandomStream) -> f64 + Sync,
{
    require_reps(settings.reps, 1, "walk_survival_converged")?;
    if settings.start_horizon == 0 || settings.max_horizon < settings.start_horizon {
        return Err(Error::InvalidConfig(format!(
            "ladder horizons must satisfy 1 <= start ({}) <= max ({})",
            settings.start_horizon, settings.max_horizon
        )));
    }
    let mut bank = WalkBank::new(side, settings.reps, seed, path);
    let mut horizon = settings.start_horizon;
    bank.extend_to(horizon, &increment);
    let mut previous = bank.survival();
    while horizon.saturating_mul(2) <= settings.max_horizon {
        horizon *= 2;
        bank.extend_to(horizon, &increment);
        let current = bank.survival();
        let diff = (previous.value - current.value).abs();
        let pooled = previous.stderr.hypot(current.stderr);
        if diff == 0.0 || diff < 2.0 * pooled {
            return Ok(LadderEstimate {
                estimate: current,
                horizon,
                converged: true,
            });
        }
        previous = current;
    }
    Ok(LadderEstimate {
        estimate: previous,
        horizon,
        converged: false,
    })
}

fn check_ladder_contract(horizon: u64, reps: u64) -> Result<()> {
    if horizon < MIN_LADDER_HORIZON {
        return Err(Error::Precondition(format!(
            "ladder horizon must be at least {MIN_LADDER_HORIZON}, got {horizon}"
        )));
    }
    require_reps(reps, MIN_LADDER_REPS, "ladder estimation")
}

/// Sampler of `ξ^E_n` with `X^E_n ~ law`, for the walk estimators.
pub fn llr_increment<'a>(
    model: &'a ChangePointModel,
    id: UnitId,
    law: &'a dyn crate::model::LocalDistribution,
) -> impl Fn(&mut RandomStream) -> f64 + Sync + 'a {
    let dim = model.unit_size();
    move |rng| {
        let mut x = smallvec::SmallVec::<[f64; 8]>::from_elem(0.0, dim);
        law.sample_into(rng, &mut x);
        model.llr(id, &x)
    }
}

fn affected_law<'a>(
    model: &ChangePointModel,
    hypothesis: &'a PostChangeHypothesis,
    id: UnitId,
) -> Result<&'a crate::model::SharedLaw> {
    hypothesis.post_law(model.unit(id)).ok_or_else(|| {
        Error::Precondition(format!(
            "unit {} is not affected by hypothesis {}",
            model.unit(id),
            hypothesis.label()
        ))
    })
}

/// Estimate of `q^E_−(G)`: the ξ-walk under `G^E` stays `≥ 0`.
pub fn ladder_prob_no_descend(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    id: UnitId,
    horizon: u64,
    reps: u64,
    seed: u64,
) -> Result<Estimate> {
    check_ladder_contract(horizon, reps)?;
    let law = affected_law(model, hypothesis, id)?;
    walk_survival(
        llr_increment(model, id, law.as_ref()),
        LadderSide::NoDescend,
        horizon,
        reps,
        seed,
        &[TAG_NO_DESCEND, id.0 as u64],
    )
}

/// Estimate of `q^E_+`: the ξ-walk under `F^E` stays `≤ 0`.
pub fn ladder_prob_no_ascend(
    model: &ChangePointModel,
    id: UnitId,
    horizon: u64,
    reps: u64,
    seed: u64,
) -> Result<Estimate> {
    check_ladder_contract(horizon, reps)?;
    walk_survival(
        llr_increment(model, id, model.pre_law(id).as_ref()),
        LadderSide::NoAscend,
        horizon,
        reps,
        seed,
        &[TAG_NO_ASCEND, id.0 as u64],
    )
}

/// Horizon-doubling version of [`ladder_prob_no_descend`].
pub fn ladder_no_descend_converged(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    id: UnitId,
    settings: LadderSettings,
    seed: u64,
) -> Result<LadderEstimate> {
    check_ladder_contract(settings.start_horizon, settings.reps)?;
    let law = affected_law(model, hypothesis, id)?;
    walk_survival_converged(
        llr_increment(model, id, law.as_ref()),
        LadderSide::NoDescend,
        settings,
        seed,
        &[TAG_NO_DESCEND, id.0 as u64],
    )
}

/// Horizon-doubling version of [`ladder_prob_no_ascend`].
pub fn ladder_no_ascend_converged(
    model: &ChangePointModel,
    id: UnitId,
    settings: LadderSettings,
    seed: u64,
) -> Result<LadderEstimate> {
    check_ladder_contract(settings.start_horizon, settings.reps)?;
    walk_survival_converged(
        llr_increment(model, id, model.pre_law(id).as_ref()),
        LadderSide::NoAscend,
        settings,
        seed,
        &[TAG_NO_ASCEND, id.0 as u64],
    )
}

/// Range of the maximum in the universal lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InfoScope {
    /// Every size-`m` subset of the sources, from closed forms.
    AllSubsets,
    /// Only the units of `𝒰`; the bound may then be loose.
    RestrictedToUnits,
}

impl InfoScope {
    pub fn as_str(self) -> &'static str {
        match self {
            InfoScope::AllSubsets => "all-subsets",
            InfoScope::RestrictedToUnits => "restricted-to-units",
        }
    }
}

/// `max_{E ∈ 𝒜(G)} I^E_0(G)` and where it is attained.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxInformation {
    pub value: Estimate,
    pub argmax: Unit,
    pub scope: InfoScope,
}

/// Maximum information number over affected subsets. With global Gaussian
/// laws every subset of size `m` is enumerated in closed form; otherwise
/// the maximum is taken over the affected units of the model, using
/// `fallback` where no closed form exists.
pub fn max_information(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    fallback: InfoMethod,
) -> Result<MaxInformation> {
    let (k, m) = (model.num_sources(), model.unit_size());
    if let (Some(pre), Some(post)) = (model.global_pre(), hypothesis.global_gaussian()) {
        if binomial(k, m) <= MAX_ENUMERATED_SUBSETS {
            let mut best: Option<(f64, Unit)> = None;
            for unit in all_units(k, m) {
                let pos = unit.positions();
                let info = post.marginal(&pos).kl_divergence(&pre.marginal(&pos))?;
                if best.as_ref().is_none_or(|(b, _)| info > *b) {
                    best = Some((info, unit));
                }
            }
            return match best {
                Some((value, argmax)) if value > 0.0 => Ok(MaxInformation {
                    value: Estimate::exact(value),
                    argmax,
                    scope: InfoScope::AllSubsets,
                }),
                _ => Err(Error::UndefinedBound(format!(
                    "hypothesis {} changes no size-{m} subset",
                    hypothesis.label()
                ))),
            };
        }
    }
    let mut best: Option<(Estimate, Unit)> = None;
    for id in model.affected_units(hypothesis) {
        let info = info_number_auto(model, hypothesis, id, fallback)?.estimate;
        if best.as_ref().is_none_or(|(b, _)| info.value > b.value) {
            best = Some((info, model.unit(id).clone()));
        }
    }
    match best {
        Some((value, argmax)) if value.value > 0.0 => Ok(MaxInformation {
            value,
            argmax,
            scope: InfoScope::RestrictedToUnits,
        }),
        _ => Err(Error::UndefinedBound(format!(
            "all information numbers of hypothesis {} are zero",
            hypothesis.label()
        ))),
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 1.0) || !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "false-alarm level gamma = {gamma} must be finite and > 1"
        )));
    }
    Ok(())
}

/// `log γ / I*`: the first-order term of the universal lower bound.
pub fn first_order_lower_bound(gamma: f64, max_info: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(max_info > 0.0) {
        return Err(Error::UndefinedBound(
            "maximum information number is zero".into(),
        ));
    }
    Ok(gamma.ln() / max_info)
}

/// `log γ / max_{E ∈ 𝒜(G)} I^E_0(G)`, with the `(1 + o(1))` factor dropped.
pub fn lower_bound_first_order(
    gamma: f64,
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    fallback: InfoMethod,
) -> Result<f64> {
    check_gamma(gamma)?;
    let max = max_information(model, hypothesis, fallback)?;
    first_order_lower_bound(gamma, max.value.value)
}

/// `max_E A / J^E_0(G)` over the post-change drifts of `𝒜(G) ∩ 𝒰`.
pub fn upper_bound_first_order(threshold: f64, post_drifts: &[f64]) -> Result<f64> {
    if !(threshold >= 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidInput(format!(
            "threshold A = {threshold} must be finite and >= 0"
        )));
    }
    if post_drifts.is_empty() {
        return Err(Error::AssumptionViolated(
            "no unit of the family is affected by the change".into(),
        ));
    }
    if let Some(j) = post_drifts.iter().find(|j| !(**j > 0.0)) {
        return Err(Error::AssumptionViolated(format!(
            "post-change drift {j} is not positive"
        )));
    }
    Ok(post_drifts
        .iter()
        .map(|j| threshold / j)
        .fold(0.0, f64::max))
}

/// `max I / min J^E_0(G)`: upper bound on the asymptotic relative efficiency.
pub fn are_upper_bound(max_info: f64, post_drifts: &[f64]) -> Result<f64> {
    let min = post_drifts.iter().copied().fold(f64::INFINITY, f64::min);
    if post_drifts.is_empty() || !(min > 0.0) {
        return Err(Error::AssumptionViolated(
            "minimum post-change drift is not positive".into(),
        ));
    }
    Ok(max_info / min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OptimalityClass {
    AsymptoticallyOptimal,
    BoundedARE,
    Indeterminate,
}

impl OptimalityClass {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimalityClass::AsymptoticallyOptimal => "asymptotically-optimal",
            OptimalityClass::BoundedARE => "bounded-are",
            OptimalityClass::Indeterminate => "indeterminate",
        }
    }
}

/// Quantities of one unit of `𝒰` under one hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitStatistics {
    pub unit: Unit,
    pub id: UnitId,
    pub affected: bool,
    pub singleton_family: bool,
    /// `I^E_0(G)`; exactly 0 for unaffected units.
    pub info_number: Estimate,
    /// `J^E_∞`, reported as a positive magnitude.
    pub drift_pre: Estimate,
    pub drift_pre_positive: bool,
    /// Monte Carlo `J^E_0(G)`, affected units only.
    pub drift_post: Option<Estimate>,
    pub drift_post_positive: Option<bool>,
    /// `W^E_0(G)`, affected units only.
    pub second_moment: Option<Estimate>,
    /// `q^E_−(G)`, affected units only.
    pub q_minus: Option<LadderEstimate>,
    /// `q^E_+`.
    pub q_plus: LadderEstimate,
}

impl UnitStatistics {
    /// The drift used in the bounds. A singleton family gives `ξ = λ`, so
    /// `J^E_0 = I^E_0` and an exact information number is used directly.
    pub fn effective_drift_post(&self) -> Option<Estimate> {
        if self.singleton_family && self.info_number.is_exact() && self.affected {
            Some(self.info_number)
        } else {
            self.drift_post
        }
    }
}

/// The two non-asymptotic upper bounds and their parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonAsymptoticBound {
    pub first_order: f64,
    /// `[1 − ∏(1 − q_−)]⁻¹ · Σ_{𝒰∖𝒜} 1/q_+`.
    pub middle_term: f64,
    /// `max (1/q_−)(1 + W/J²)`.
    pub max_term: f64,
    pub constant_c: f64,
    pub prop4: f64,
    /// Coarser form using `min q_−` and `min q_+`.
    pub remark2: f64,
}

/// Non-asymptotic delay bound at threshold `A` from per-unit statistics of
/// every unit of `𝒰`.
pub fn nonasymptotic_upper_bound(
    threshold: f64,
    stats: &[UnitStatistics],
    constant_c: f64,
) -> Result<NonAsymptoticBound> {
    if !constant_c.is_finite() {
        return Err(Error::InvalidInput(format!("constant C = {constant_c} must be finite")));
    }
    let mut drifts = Vec::new();
    let mut none_descend = 1.0;
    let mut max_term: f64 = 0.0;
    let mut min_q_minus = f64::INFINITY;
    let mut sum_inv_q_plus = 0.0;
    let mut min_q_plus = f64::INFINITY;
    let mut num_affected = 0usize;
    let mut num_unaffected = 0usize;
    for s in stats {
        let q_plus = s.q_plus.estimate.value;
        if !(q_plus > 0.0) {
            return Err(Error::DegenerateBound(format!(
                "q_+ of unit {} is zero",
                s.unit
            )));
        }
        min_q_plus = min_q_plus.min(q_plus);
        if !s.affected {
            num_unaffected += 1;
            sum_inv_q_plus += 1.0 / q_plus;
            continue;
        }
        num_affected += 1;
        let (Some(j), Some(w), Some(q)) = (s.effective_drift_post(), s.second_moment, s.q_minus)
        else {
            return Err(Error::Precondition(format!(
                "statistics of affected unit {} are incomplete",
                s.unit
            )));
        };
        drifts.push(j.value);
        let q_minus = q.estimate.value;
        none_descend *= 1.0 - q_minus;
        min_q_minus = min_q_minus.min(q_minus);
        if q_minus > 0.0 {
            max_term = max_term.max((1.0 + w.value / (j.value * j.value)) / q_minus);
        }
    }
    let first_order = upper_bound_first_order(threshold, &drifts)?;
    if !(min_q_minus > 0.0) {
        return Err(Error::DegenerateBound("q_- is zero for an affected unit".into()));
    }
    if none_descend >= 1.0 {
        return Err(Error::DegenerateBound(
            "product of (1 - q_-) equals 1".into(),
        ));
    }
    let middle_term = if num_unaffected == 0 {
        0.0
    } else {
        sum_inv_q_plus / (1.0 - none_descend)
    };
    let remark2_middle = if num_unaffected == 0 {
        0.0
    } else {
        num_unaffected as f64
            / (min_q_plus * (1.0 - (1.0 - min_q_minus).powi(num_affected as i32)))
    };
    Ok(NonAsymptoticBound {
        first_order,
        middle_term,
        max_term,
        constant_c,
        prop4: first_order + middle_term + max_term + constant_c,
        remark2: first_order + remark2_middle + max_term + constant_c,
    })
}

/// Optimality class from per-unit statistics and the information maximum.
pub fn classify_optimality(
    stats: &[UnitStatistics],
    max_info: &MaxInformation,
    assumptions_hold: bool,
) -> OptimalityClass {
    if !assumptions_hold {
        return OptimalityClass::Indeterminate;
    }
    let affected: Vec<&UnitStatistics> = stats.iter().filter(|s| s.affected).collect();
    if affected.is_empty() {
        return OptimalityClass::Indeterminate;
    }
    if !affected.iter().all(|s| s.singleton_family) {
        return OptimalityClass::BoundedARE;
    }
    let min = affected
        .iter()
        .map(|s| s.info_number)
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("non-empty");
    let max = max_info.value;
    let equal = if min.is_exact() && max.is_exact() {
        (max.value - min.value).abs() <= 1e-12 * max.value.abs().max(1.0)
    } else {
        (max.value - min.value).abs() <= 3.0 * max.stderr.hypot(min.stderr)
    };
    if equal {
        OptimalityClass::AsymptoticallyOptimal
    } else {
        OptimalityClass::BoundedARE
    }
}

/// Monte Carlo budget and seed of a [`BoundsCalculator`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsSettings {
    pub drift_reps: u64,
    pub ladder: LadderSettings,
    pub seed: u64,
    /// The additive constant `C`, reported separately.
    pub constant_c: f64,
}

impl Default for BoundsSettings {
    fn default() -> Self {
        Self {
            drift_reps: 100_000,
            ladder: LadderSettings::default(),
            seed: crate::stats::DEFAULT_SEED,
            constant_c: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PreStats {
    drift_pre: Estimate,
    q_plus: LadderEstimate,
}

#[derive(Debug, Clone, Copy)]
struct PostStats {
    info: InfoNumber,
    drift: Estimate,
    second: Estimate,
    q_minus: LadderEstimate,
}

/// Computes [`BoundsReport`]s for the hypotheses of one model. Pre-change
/// statistics are shared by units of the same law class, post-change ones by
/// units with the same class and post-change law, and both are reused across
/// hypotheses. Each class uses the seed path of its first unit, so results
/// do not depend on the order of queries.
#[derive(Debug)]
pub struct BoundsCalculator<'a> {
    model: &'a ChangePointModel,
    settings: BoundsSettings,
    representative: Vec<UnitId>,
    pre_cache: Mutex<HashMap<usize, PreStats>>,
    post_cache: Mutex<HashMap<(usize, usize), PostStats>>,
}

/// Everything the bound operations report for one hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub hypothesis: String,
    pub num_sources: usize,
    pub unit_size: usize,
    pub gamma: f64,
    pub threshold: f64,
    pub seed: u64,
    pub drift_reps: u64,
    pub ladder_reps: u64,
    pub num_units: usize,
    pub num_affected: usize,
    pub max_info: MaxInformation,
    pub lower_bound_first_order: f64,
    /// `NaN` when the assumptions fail.
    pub upper_bound_first_order: f64,
    pub are_upper_bound: f64,
    pub nonasymptotic: Option<NonAsymptoticBound>,
    pub constant_c: f64,
    pub optimality_class: OptimalityClass,
    pub assumptions_hold: bool,
    pub diagnostics: Vec<String>,
    pub units: Vec<UnitStatistics>,
}

impl<'a> BoundsCalculator<'a> {
    pub fn new(model: &'a ChangePointModel, settings: BoundsSettings) -> Result<Self> {
        require_reps(settings.drift_reps, MIN_DRIFT_REPS, "bounds drift estimation")?;
        check_ladder_contract(settings.ladder.start_horizon, settings.ladder.reps)?;
        let mut first: HashMap<usize, UnitId> = HashMap::new();
        let representative = model
            .unit_ids()
            .map(|id| *first.entry(model.law_class(id)).or_insert(id))
            .collect();
        Ok(Self {
            model,
            settings,
            representative,
            pre_cache: Mutex::new(HashMap::new()),
            post_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn settings(&self) -> &BoundsSettings {
        &self.settings
    }

    fn pre_stats(&self, id: UnitId) -> Result<PreStats> {
        let class = self.model.law_class(id);
        if let Some(s) = self.pre_cache.lock().expect("cache poisoned").get(&class) {
            return Ok(*s);
        }
        let rep = self.representative[id.0];
        let s = PreStats {
            drift_pre: drift_pre(self.model, rep, self.settings.drift_reps, self.settings.seed)?,
            q_plus: ladder_no_ascend_converged(
                self.model,
                rep,
                self.settings.ladder,
                self.settings.seed,
            )?,
        };
        self.pre_cache.lock().expect("cache poisoned").insert(class, s);
        Ok(s)
    }

    /// Post-change statistics of `law` in the class of `id`. Cached per
    /// `(class, law)` across hypotheses, drawn on the class representative's
    /// seed path.
    fn post_stats(&self, id: UnitId, law: &SharedLaw) -> Result<PostStats> {
        let model = self.model;
        let key = (model.law_class(id), law_ptr(law));
        if let Some(s) = self.post_cache.lock().expect("cache poisoned").get(&key) {
            return Ok(*s);
        }
        let rep = self.representative[id.0];
        let (seed, reps) = (self.settings.seed, self.settings.drift_reps);
        let pre = model.pre_law(rep);
        let info = match (law.as_gaussian(), pre.as_gaussian()) {
            (Some(g), Some(f)) => Estimate::exact(g.kl_divergence(f)?),
            _ => parallel_moments(reps, seed, &[TAG_INFO, rep.0 as u64], |rng| {
                let mut x = smallvec::SmallVec::<[f64; 8]>::from_elem(0.0, model.unit_size());
                law.sample_into(rng, &mut x);
                law.log_density(&x) - pre.log_density(&x)
            })
            .estimate(),
        };
        let path = [TAG_POST, rep.0 as u64];
        let drift = model.llr_moments(rep, law.as_ref(), reps, seed, &path).estimate();
        let centre = drift.value;
        let second = model
            .mapped_llr_moments(rep, law.as_ref(), reps, seed, &path, |xi| (xi - centre).powi(2))
            .estimate();
        let q_minus = walk_survival_converged(
            llr_increment(model, rep, law.as_ref()),
            LadderSide::NoDescend,
            self.settings.ladder,
            seed,
            &[TAG_NO_DESCEND, rep.0 as u64],
        )?;
        let s = PostStats {
            info: InfoNumber {
                estimate: info,
                affected: true,
            },
            drift,
            second,
            q_minus,
        };
        self.post_cache.lock().expect("cache poisoned").insert(key, s);
        Ok(s)
    }

    /// Statistics of every unit of `𝒰`, in permutation order.
    pub fn unit_statistics(&self, hypothesis: &PostChangeHypothesis) -> Result<Vec<UnitStatistics>> {
        let model = self.model;
        let view = model.view(hypothesis);
        let mut out = Vec::with_capacity(model.num_units());
        for id in model.unit_ids() {
            let pre = self.pre_stats(id)?;
            let post = match view.post(id) {
                Some(law) => Some(self.post_stats(id, law)?),
                None => None,
            };
            let singleton = model.is_singleton_family(id);
            let mut stats = UnitStatistics {
                unit: model.unit(id).clone(),
                id,
                affected: post.is_some(),
                singleton_family: singleton,
                info_number: post.map_or(Estimate::exact(0.0), |p| p.info.estimate),
                drift_pre: pre.drift_pre,
                drift_pre_positive: significantly_positive(&pre.drift_pre),
                drift_post: post.map(|p| p.drift),
                drift_post_positive: None,
                second_moment: post.map(|p| p.second),
                q_minus: post.map(|p| p.q_minus),
                q_plus: pre.q_plus,
            };
            stats.drift_post_positive = stats
                .effective_drift_post()
                .map(|j| if j.is_exact() { j.value > 0.0 } else { significantly_positive(&j) });
            out.push(stats);
        }
        Ok(out)
    }

    /// Full report at false-alarm level `γ`, with `A = log γ`.
    pub fn report(&self, hypothesis: &PostChangeHypothesis, gamma: f64) -> Result<BoundsReport> {
        check_gamma(gamma)?;
        let threshold = gamma.ln();
        let model = self.model;
        let max_info = max_information(
            model,
            hypothesis,
            InfoMethod::MonteCarlo {
                reps: self.settings.drift_reps,
                seed: self.settings.seed,
            },
        )?;
        let lower = first_order_lower_bound(gamma, max_info.value.value)?;
        let units = self.unit_statistics(hypothesis)?;
        let mut diagnostics = Vec::new();

        let affected: Vec<&UnitStatistics> = units.iter().filter(|s| s.affected).collect();
        if affected.is_empty() {
            diagnostics.push("no unit of the family is affected".to_string());
        }
        let flagged = |what: &str, pred: &dyn Fn(&UnitStatistics) -> bool| {
            let hits: Vec<&UnitStatistics> = units.iter().filter(|s| pred(s)).collect();
            hits.first().map(|first| {
                format!("{what} for {} unit(s), first {}", hits.len(), first.unit)
            })
        };
        diagnostics.extend(flagged("pre-change drift not positive", &|s| !s.drift_pre_positive));
        diagnostics.extend(flagged("post-change drift not positive", &|s| {
            s.drift_post_positive == Some(false)
        }));
        diagnostics.extend(flagged("q_- not converged", &|s| {
            s.q_minus.is_some_and(|q| !q.converged)
        }));
        diagnostics.extend(flagged("q_+ not converged", &|s| !s.q_plus.converged));
        let assumptions_hold = !affected.is_empty()
            && units
                .iter()
                .all(|s| s.drift_pre_positive && s.drift_post_positive.unwrap_or(true));
        if max_info.scope == InfoScope::RestrictedToUnits {
            diagnostics.push("information maximum restricted to the units of the family".into());
        }

        let drifts: Vec<f64> = affected
            .iter()
            .filter_map(|s| s.effective_drift_post().map(|j| j.value))
            .collect();
        let mut record = |r: Result<f64>| match r {
            Ok(v) => v,
            Err(e) => {
                diagnostics.push(e.to_string());
                f64::NAN
            }
        };
        let upper = record(upper_bound_first_order(threshold, &drifts));
        let are = record(are_upper_bound(max_info.value.value, &drifts));
        let nonasymptotic =
            match nonasymptotic_upper_bound(threshold, &units, self.settings.constant_c) {
                Ok(b) => Some(b),
                Err(e) => {
                    diagnostics.push(e.to_string());
                    None
                }
            };
        let optimality_class = classify_optimality(&units, &max_info, assumptions_hold);
        let mut seen = std::collections::HashSet::new();
        diagnostics.retain(|d| seen.insert(d.clone()));
        Ok(BoundsReport {
            hypothesis: hypothesis.label().to_string(),
            num_sources: model.num_sources(),
            unit_size: model.unit_size(),
            gamma,
            threshold,
            seed: self.settings.seed,
            drift_reps: self.settings.drift_reps,
            ladder_reps: self.settings.ladder.reps,
            num_units: model.num_units(),
            num_affected: affected.len(),
            max_info,
            lower_bound_first_order: lower,
            upper_bound_first_order: upper,
            are_upper_bound: are,
            nonasymptotic,
            constant_c: self.settings.constant_c,
            optimality_class,
            assumptions_hold,
            diagnostics,
            units,
        })
    }
}

fn num(x: f64) -> String {
    format_significant(x, 6)
}

impl BoundsReport {
    pub fn prop4(&self) -> f64 {
        self.nonasymptotic.map_or(f64::NAN, |b| b.prop4)
    }

    pub fn remark2(&self) -> f64 {
        self.nonasymptotic.map_or(f64::NAN, |b| b.remark2)
    }

    /// Columns of [`csv_row`](Self::csv_row).
    pub const CSV_HEADER: &'static str = "hypothesis,K,m,gamma,threshold,seed,num_units,\
num_affected,info_number,info_number_stderr,info_scope,lower_bound,upper_bound_first_order,\
are_upper_bound,upper_bound_prop4,upper_bound_remark2,constant_c,optimality_class,\
assumptions_hold";

    pub fn csv_row(&self) -> String {
        [
            self.hypothesis.clone(),
            self.num_sources.to_string(),
            self.unit_size.to_string(),
            num(self.gamma),
            num(self.threshold),
            self.seed.to_string(),
            self.num_units.to_string(),
            self.num_affected.to_string(),
            num(self.max_info.value.value),
            num(self.max_info.value.stderr),
            self.max_info.scope.as_str().to_string(),
            num(self.lower_bound_first_order),
            num(self.upper_bound_first_order),
            num(self.are_upper_bound),
            num(self.prop4()),
            num(self.remark2()),
            num(self.constant_c),
            self.optimality_class.as_str().to_string(),
            self.assumptions_hold.to_string(),
        ]
        .join(",")
    }

    /// Flat `key = value` record, one line per quantity, including every
    /// unit whose statistics differ from the preceding unit's.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("hypothesis", self.hypothesis.clone());
        line("K", self.num_sources.to_string());
        line("m", self.unit_size.to_string());
        line("gamma", num(self.gamma));
        line("threshold", num(self.threshold));
        line("seed", self.seed.to_string());
        line("drift_reps", self.drift_reps.to_string());
        line("ladder_reps", self.ladder_reps.to_string());
        line("num_units", self.num_units.to_string());
        line("num_affected", self.num_affected.to_string());
        line("info_number", num(self.max_info.value.value));
        line("info_number_stderr", num(self.max_info.value.stderr));
        line("info_argmax", self.max_info.argmax.to_string());
        line("info_scope", self.max_info.scope.as_str().into());
        line("lower_bound_first_order", num(self.lower_bound_first_order));
        line("upper_bound_first_order", num(self.upper_bound_first_order));
        line("are_upper_bound", num(self.are_upper_bound));
        if let Some(b) = &self.nonasymptotic {
            line("nonasymptotic_middle_term", num(b.middle_term));
            line("nonasymptotic_max_term", num(b.max_term));
        }
        line("upper_bound_prop4", num(self.prop4()));
        line("upper_bound_remark2", num(self.remark2()));
        line("constant_c", num(self.constant_c));
        line("optimality_class", self.optimality_class.as_str().into());
        line("assumptions_hold", self.assumptions_hold.to_string());
        for (i, d) in self.diagnostics.iter().enumerate() {
            line(&format!("diagnostic.{i}"), d.clone());
        }
        let mut previous: Option<&UnitStatistics> = None;
        for s in &self.units {
            let same = previous.is_some_and(|p| {
                p.affected == s.affected
                    && p.info_number == s.info_number
                    && p.drift_post == s.drift_post
                    && p.q_plus == s.q_plus
            });
            previous = Some(s);
            if same {
                continue;
            }
            let key = format!("unit.{}", s.unit);
            let est = |line: &mut dyn FnMut(&str, String), name: &str, e: Estimate| {
                line(&format!("{key}.{name}"), num(e.value));
                line(&format!("{key}.{name}_stderr"), num(e.stderr));
            };
            line(&format!("{key}.affected"), s.affected.to_string());
            est(&mut line, "info_number", s.info_number);
            est(&mut line, "drift_pre", s.drift_pre);
            if let Some(j) = s.drift_post {
                est(&mut line, "drift_post", j);
            }
            if let Some(w) = s.second_moment {
                est(&mut line, "second_moment", w);
            }
            if let Some(q) = s.q_minus {
                est(&mut line, "q_minus", q.estimate);
                line(&format!("{key}.q_minus_horizon"), q.horizon.to_string());
            }
            est(&mut line, "q_plus", s.q_plus.estimate);
            line(&format!("{key}.q_plus_horizon"), s.q_plus.horizon.to_string());
        }
        out
    }
}
