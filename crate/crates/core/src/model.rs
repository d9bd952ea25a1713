//! Change-point model: sources, units, local laws, the finite post-change
//! families and the mixture log-likelihood ratio consumed by the policy.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::GaussianLocal;
use crate::stats::{parallel_moments, Estimate, MeanAccumulator, RandomStream};

/// 1-based index of a data source, `1 <= index <= K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceIndex(usize);

impl SourceIndex {
    pub fn new(index: usize, num_sources: usize) -> Result<Self> {
        if index == 0 || index > num_sources {
            return Err(invalid(format!(
                "source index {index} outside [1, {num_sources}]"
            )));
        }
        Ok(Self(index))
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn zero_based(self) -> usize {
        self.0 - 1
    }
}

/// A set of `m` distinct sources that are sampled together.
///
/// Members are kept sorted, so the derived ordering is the lexicographic
/// order used for canonical permutations.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Unit {
    members: Vec<SourceIndex>,
}

impl Unit {
    pub fn new(members: impl IntoIterator<Item = usize>, num_sources: usize) -> Result<Self> {
        let mut members = members
            .into_iter()
            .map(|i| SourceIndex::new(i, num_sources))
            .collect::<Result<Vec<_>>>()?;
        if members.is_empty() {
            return Err(invalid("a unit needs at least one source"));
        }
        members.sort_unstable();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("unit members must be distinct"));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[SourceIndex] {
        &self.members
    }

    /// Zero-based source positions, for indexing global matrices.
    pub fn positions(&self) -> Vec<usize> {
        self.members.iter().map(|s| s.zero_based()).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, source: usize) -> bool {
        self.members.iter().any(|s| s.get() == source)
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, s) in self.members.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", s.get())?;
        }
        write!(f, "}}")
    }
}

/// All size-`m` subsets of `[K]` in lexicographic order: `{1,2},{1,3},...`.
pub fn all_units(num_sources: usize, unit_size: usize) -> Vec<Unit> {
    let mut out = Vec::new();
    if unit_size == 0 || unit_size > num_sources {
        return out;
    }
    let mut idx: Vec<usize> = (1..=unit_size).collect();
    loop {
        out.push(Unit {
            members: idx.iter().map(|&i| SourceIndex(i)).collect(),
        });
        // advance to the next combination
        let mut pos = unit_size;
        while pos > 0 && idx[pos - 1] == num_sources - unit_size + pos {
            pos -= 1;
        }
        if pos == 0 {
            break;
        }
        idx[pos - 1] += 1;
        for j in pos..unit_size {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

/// Binomial coefficient, saturating at `u64::MAX`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// A local law of one unit: the two obligations the policy needs.
pub trait LocalDistribution: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> f64;

    /// Writes one draw into `out` (length `dim()`).
    fn sample_into(&self, rng: &mut RandomStream, out: &mut [f64]);

    /// Hook for closed-form quantities.
    fn as_gaussian(&self) -> Option<&GaussianLocal> {
        None
    }
}

pub type SharedLaw = Arc<dyn LocalDistribution>;

pub(crate) fn law_ptr(law: &SharedLaw) -> usize {
    Arc::as_ptr(law) as *const () as usize
}

/// Uniform mixture `H^E` over a finite post-change family.
#[derive(Debug, Clone)]
pub struct MixtureLikelihood {
    components: Vec<SharedLaw>,
    log_weight: f64,
}

impl MixtureLikelihood {
    pub fn new(components: Vec<SharedLaw>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(invalid("post-change family must be non-empty"));
        };
        let dim = first.dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(invalid("mixture components disagree on dimension"));
        }
        let log_weight = -(components.len() as f64).ln();
        Ok(Self {
            components,
            log_weight,
        })
    }

    pub fn components(&self) -> &[SharedLaw] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.components.len() == 1
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.components.len() as f64; self.components.len()]
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// `log h(x)` by log-sum-exp with max subtraction.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        if let [only] = self.components.as_slice() {
            return only.log_density(x);
        }
        let mut logs = smallvec::SmallVec::<[f64; 32]>::with_capacity(self.components.len());
        let mut max = f64::NEG_INFINITY;
        for c in &self.components {
            let l = c.log_density(x);
            max = max.max(l);
            logs.push(l);
        }
        if !max.is_finite() {
            return max;
        }
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        max + sum.ln() + self.log_weight
    }
}

/// Position of a unit in the model's fixed permutation `E_1, ..., E_|U|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId(pub usize);

#[derive(Debug)]
struct UnitLaw {
    pre: SharedLaw,
    mixture: MixtureLikelihood,
}

/// One plausible post-change global law `G`, described through the local
/// laws of the units it affects.
#[derive(Debug, Clone)]
pub struct PostChangeHypothesis {
    label: String,
    local_post: BTreeMap<Unit, SharedLaw>,
    global: Option<Arc<GaussianLocal>>,
}

impl PostChangeHypothesis {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            local_post: BTreeMap::new(),
            global: None,
        }
    }

    /// Registers the post-change law of an affected unit. The caller
    /// guarantees `law` differs from the unit's pre-change law.
    pub fn with_unit(mut self, unit: Unit, law: SharedLaw) -> Self {
        self.local_post.insert(unit, law);
        self
    }

    /// Attaches the global post-change Gaussian law, which enables
    /// closed-form information numbers over every size-`m` subset.
    pub fn with_global_gaussian(mut self, global: Arc<GaussianLocal>) -> Self {
        self.global = Some(global);
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn local_post(&self) -> &BTreeMap<Unit, SharedLaw> {
        &self.local_post
    }

    pub fn post_law(&self, unit: &Unit) -> Option<&SharedLaw> {
        self.local_post.get(unit)
    }

    pub fn global_gaussian(&self) -> Option<&GaussianLocal> {
        self.global.as_deref()
    }
}

/// Observation source for one step: which law generates `X_n^E`.
#[derive(Debug, Clone)]
pub struct HypothesisView {
    post: Vec<Option<SharedLaw>>,
}

impl HypothesisView {
    pub fn post(&self, id: UnitId) -> Option<&SharedLaw> {
        self.post[id.0].as_ref()
    }

    pub fn is_affected(&self, id: UnitId) -> bool {
        self.post[id.0].is_some()
    }
}

/// The full change-point model. Immutable after construction.
#[derive(Debug)]
pub struct ChangePointModel {
    num_sources: usize,
    unit_size: usize,
    units: Vec<Unit>,
    index: HashMap<Unit, UnitId>,
    laws: Vec<Arc<UnitLaw>>,
    law_class: Vec<usize>,
    global_pre: Option<Arc<GaussianLocal>>,
    hypotheses: Vec<PostChangeHypothesis>,
}

/// Incremental construction of a [`ChangePointModel`].
#[derive(Debug)]
pub struct ModelBuilder {
    num_sources: usize,
    unit_size: usize,
    units: Vec<(Unit, SharedLaw, Vec<SharedLaw>)>,
    global_pre: Option<Arc<GaussianLocal>>,
    hypotheses: Vec<PostChangeHypothesis>,
}

impl ModelBuilder {
    /// Adds a unit with its pre-change law `F^E` and its family `G^E`.
    /// Units are permuted in insertion order.
    pub fn unit(mut self, unit: Unit, pre: SharedLaw, family: Vec<SharedLaw>) -> Self {
        self.units.push((unit, pre, family));
        self
    }

    pub fn global_pre(mut self, law: Arc<GaussianLocal>) -> Self {
        self.global_pre = Some(law);
        self
    }

    pub fn hypothesis(mut self, h: PostChangeHypothesis) -> Self {
        self.hypotheses.push(h);
        self
    }

    pub fn build(self) -> Result<ChangePointModel> {
        let Self {
            num_sources,
            unit_size,
            units,
            global_pre,
            hypotheses,
        } = self;
        if unit_size == 0 || unit_size > num_sources {
            return Err(Error::InvalidConfig(format!(
                "unit size m = {unit_size} must satisfy 1 <= m <= K = {num_sources}"
            )));
        }
        if units.is_empty() {
            return Err(Error::InvalidConfig("the family of units is empty".into()));
        }
        if let Some(g) = &global_pre {
            if g.dim() != num_sources {
                return Err(invalid("global pre-change law has the wrong dimension"));
            }
        }

        let mut index = HashMap::with_capacity(units.len());
        let mut list = Vec::with_capacity(units.len());
        let mut laws = Vec::with_capacity(units.len());
        let mut law_class = Vec::with_capacity(units.len());
        let mut classes: HashMap<Vec<usize>, usize> = HashMap::new();
        for (pos, (unit, pre, family)) in units.into_iter().enumerate() {
            if unit.len() != unit_size {
                return Err(invalid(format!("unit {unit} does not have {unit_size} members")));
            }
            if unit.members().last().is_none_or(|s| s.get() > num_sources) {
                return Err(invalid(format!("unit {unit} is outside [1, {num_sources}]")));
            }
            if pre.dim() != unit_size {
                return Err(invalid(format!("pre-change law of {unit} has the wrong dimension")));
            }
            let mixture = MixtureLikelihood::new(family)
                .map_err(|e| Error::InvalidConfig(format!("unit {unit}: {e}")))?;
            if mixture.dim() != unit_size {
                return Err(invalid(format!("post-change family of {unit} has the wrong dimension")));
            }
            if index.insert(unit.clone(), UnitId(pos)).is_some() {
                return Err(invalid(format!("unit {unit} listed twice")));
            }
            let key: Vec<usize> = std::iter::once(law_ptr(&pre))
                .chain(mixture.components().iter().map(law_ptr))
                .collect();
            let next = classes.len();
            law_class.push(*classes.entry(key).or_insert(next));
            laws.push(Arc::new(UnitLaw { pre, mixture }));
            list.push(unit);
        }

        for h in &hypotheses {
            for (unit, law) in h.local_post() {
                if law.dim() != unit_size {
                    return Err(invalid(format!(
                        "hypothesis {}: law of {unit} has the wrong dimension",
                        h.label()
                    )));
                }
            }
        }

        Ok(ChangePointModel {
            num_sources,
            unit_size,
            units: list,
            index,
            laws,
            law_class,
            global_pre,
            hypotheses,
        })
    }
}

impl ChangePointModel {
    pub fn builder(num_sources: usize, unit_size: usize) -> ModelBuilder {
        ModelBuilder {
            num_sources,
            unit_size,
            units: Vec::new(),
            global_pre: None,
            hypotheses: Vec::new(),
        }
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn unit_size(&self) -> usize {
        self.unit_size
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit(&self, id: UnitId) -> &Unit {
        &self.units[id.0]
    }

    pub fn unit_id(&self, unit: &Unit) -> Option<UnitId> {
        self.index.get(unit).copied()
    }

    pub fn unit_ids(&self) -> impl Iterator<Item = UnitId> {
        (0..self.units.len()).map(UnitId)
    }

    pub fn hypotheses(&self) -> &[PostChangeHypothesis] {
        &self.hypotheses
    }

    pub fn hypothesis(&self, label: &str) -> Option<&PostChangeHypothesis> {
        self.hypotheses.iter().find(|h| h.label() == label)
    }

    pub fn global_pre(&self) -> Option<&GaussianLocal> {
        self.global_pre.as_deref()
    }

    pub fn pre_law(&self, id: UnitId) -> &SharedLaw {
        &self.laws[id.0].pre
    }

    pub fn mixture(&self, id: UnitId) -> &MixtureLikelihood {
        &self.laws[id.0].mixture
    }

    pub fn is_singleton_family(&self, id: UnitId) -> bool {
        self.laws[id.0].mixture.is_singleton()
    }

    /// Units sharing a class have pointer-identical pre-change laws and
    /// post-change families, hence identically distributed statistics.
    pub fn law_class(&self, id: UnitId) -> usize {
        self.law_class[id.0]
    }

    /// `A(G) ∩ U` in the model's permutation order. May be empty.
    pub fn affected_units(&self, hypothesis: &PostChangeHypothesis) -> Vec<UnitId> {
        let mut ids: Vec<UnitId> = hypothesis
            .local_post()
            .keys()
            .filter_map(|u| self.unit_id(u))
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Per-unit lookup table of post-change laws; `None` marks units whose
    /// local law is unaffected (`G^E = F^E`).
    pub fn view(&self, hypothesis: &PostChangeHypothesis) -> HypothesisView {
        let mut post = vec![None; self.units.len()];
        for (unit, law) in hypothesis.local_post() {
            if let Some(id) = self.unit_id(unit) {
                post[id.0] = Some(law.clone());
            }
        }
        HypothesisView { post }
    }

    /// `ξ = log dH^E/dF^E (x)`.
    pub fn mixture_llr(&self, unit: &Unit, x: &[f64]) -> Result<f64> {
        let id = self
            .unit_id(unit)
            .ok_or_else(|| invalid(format!("unit {unit} is not in the model")))?;
        if x.len() != self.unit_size {
            return Err(invalid(format!(
                "observation has dimension {}, expected {}",
                x.len(),
                self.unit_size
            )));
        }
        Ok(self.llr(id, x))
    }

    /// Unchecked fast path of [`mixture_llr`](Self::mixture_llr).
    #[inline]
    pub fn llr(&self, id: UnitId, x: &[f64]) -> f64 {
        let law = &self.laws[id.0];
        law.mixture.log_density(x) - law.pre.log_density(x)
    }

    /// Moments of `ξ^E` when `X^E ~ law`, over `reps` draws split into
    /// fixed-size chunks so the merge order, and thus the output, does not
    /// depend on the thread count.
    pub fn llr_moments(
        &self,
        id: UnitId,
        law: &dyn LocalDistribution,
        reps: u64,
        seed: u64,
        path: &[u64],
    ) -> MeanAccumulator {
        self.mapped_llr_moments(id, law, reps, seed, path, |xi| xi)
    }

    /// Moments of `map(ξ^E)`. The draws are the same as those of
    /// [`llr_moments`](Self::llr_moments) for equal `seed` and `path`.
    pub fn mapped_llr_moments(
        &self,
        id: UnitId,
        law: &dyn LocalDistribution,
        reps: u64,
        seed: u64,
        path: &[u64],
        map: impl Fn(f64) -> f64 + Sync,
    ) -> MeanAccumulator {
        let dim = self.unit_size;
        parallel_moments(reps, seed, path, |rng| {
            let mut x = smallvec::SmallVec::<[f64; 8]>::from_elem(0.0, dim);
            law.sample_into(rng, &mut x);
            map(self.llr(id, &x))
        })
    }
}

/// Per-unit findings of [`validate_model`].
#[derive(Debug, Clone, Serialize)]
pub struct UnitValidation {
    pub unit: Unit,
    pub singleton_family: bool,
    /// Estimate of `E_∞[ξ_1^E]`; must be negative.
    pub pre_drift: Estimate,
    pub pre_drift_negative: bool,
    /// Estimate of `E_0^G[ξ_1^E]` for affected units; must be positive.
    pub post_drift: Option<Estimate>,
    pub post_drift_positive: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub hypothesis: String,
    pub seed: u64,
    pub samples_per_unit: u64,
    pub intersection_nonempty: bool,
    pub units: Vec<UnitValidation>,
}

impl ValidationReport {
    pub fn all_singleton(&self) -> bool {
        self.units.iter().all(|u| u.singleton_family)
    }

    /// True when the drift sign conditions and `A(G) ∩ U ≠ ∅` all hold.
    pub fn assumptions_hold(&self) -> bool {
        self.intersection_nonempty
            && self.units.iter().all(|u| {
                u.pre_drift_negative && u.post_drift_positive.unwrap_or(true)
            })
    }
}

/// A mean is declared significantly signed when it clears zero by 3 stderr.
fn significantly_negative(e: &Estimate) -> bool {
    e.value < 0.0 && e.value + 3.0 * e.stderr < 0.0
}

fn significantly_positive(e: &Estimate) -> bool {
    e.value > 0.0 && e.value - 3.0 * e.stderr > 0.0
}

/// Monte Carlo check of the drift conditions and of `A(G) ∩ U ≠ ∅`.
/// Units with identical laws share one estimate.
pub fn validate_model(
    model: &ChangePointModel,
    hypothesis: &PostChangeHypothesis,
    mc_budget: u64,
    seed: u64,
) -> Result<ValidationReport> {
    if mc_budget < 1000 {
        return Err(Error::Precondition(format!(
            "validation needs at least 1000 samples per unit, got {mc_budget}"
        )));
    }
    let view = model.view(hypothesis);
    let mut pre_cache: HashMap<usize, Estimate> = HashMap::new();
    let mut post_cache: HashMap<(usize, usize), Estimate> = HashMap::new();
    let mut units = Vec::with_capacity(model.num_units());
    for id in model.unit_ids() {
        let class = model.law_class(id);
        let pre_drift = *pre_cache.entry(class).or_insert_with(|| {
            model
                .llr_moments(id, model.pre_law(id).as_ref(), mc_budget, seed, &[0, id.0 as u64])
                .estimate()
        });
        let post_drift = view.post(id).map(|law| {
            *post_cache.entry((class, law_ptr(law))).or_insert_with(|| {
                model
                    .llr_moments(id, law.as_ref(), mc_budget, seed, &[1, id.0 as u64])
                    .estimate()
            })
        });
        units.push(UnitValidation {
            unit: model.unit(id).clone(),
            singleton_family: model.is_singleton_family(id),
            pre_drift_negative: significantly_negative(&pre_drift),
            pre_drift,
            post_drift_positive: post_drift.as_ref().map(significantly_positive),
            post_drift,
        });
    }
    Ok(ValidationReport {
        hypothesis: hypothesis.label().to_string(),
        seed,
        samples_per_unit: mc_budget,
        intersection_nonempty: !model.affected_units(hypothesis).is_empty(),
        units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicographic_pairs() {
        let pairs = all_units(4, 2);
        let shown: Vec<String> = pairs.iter().map(|u| u.to_string()).collect();
        assert_eq!(shown, ["{1,2}", "{1,3}", "{1,4}", "{2,3}", "{2,4}", "{3,4}"]);
        assert_eq!(all_units(10, 3).len(), 120);
        assert_eq!(all_units(10, 3)[0].to_string(), "{1,2,3}");
        assert_eq!(all_units(10, 3)[119].to_string(), "{8,9,10}");
        assert_eq!(all_units(10, 2).len() as u64, binomial(10, 2));
    }

    #[test]
    fn unit_rejects_bad_members() {
        assert!(Unit::new([1, 1], 4).is_err());
        assert!(Unit::new([0, 2], 4).is_err());
        assert!(Unit::new([5], 4).is_err());
        let u = Unit::new([3, 1], 4).unwrap();
        assert_eq!(u.to_string(), "{1,3}");
        assert!(u.contains(3) && !u.contains(2));
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(10, 2), 45);
        assert_eq!(binomial(10, 3), 120);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(200, 100), u64::MAX);
    }
}
