//! Ready-made Gaussian change-point models: correlation changes among
//! initially independent `N(0, 1)` sources, and mean changes of single
//! sources.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::{build_correlation_matrix, correlation_patterns, CorrelationMatrix, GaussianLocal};
use crate::model::{all_units, ChangePointModel, PostChangeHypothesis, SharedLaw, Unit};

/// Deduplicates Gaussian laws so identical local laws share one allocation.
#[derive(Debug, Default)]
pub struct GaussianInterner {
    laws: HashMap<Vec<u64>, Arc<GaussianLocal>>,
}

impl GaussianInterner {
    pub fn intern(&mut self, law: GaussianLocal) -> Arc<GaussianLocal> {
        let key: Vec<u64> = law
            .mean()
            .iter()
            .chain(law.covariance())
            .map(|v| v.to_bits())
            .collect();
        self.laws.entry(key).or_insert_with(|| Arc::new(law)).clone()
    }
}

fn shared(law: &Arc<GaussianLocal>) -> SharedLaw {
    law.clone()
}

/// Which size-`m` subsets are monitored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitFamily {
    /// Every subset of size `m`, lexicographically ordered.
    All,
    /// `{i, i+1}` for `i = 1..K−1` (requires `m = 2`).
    ConsecutivePairs,
    /// Disjoint consecutive blocks `{(k−1)m+1, ..., km}` (requires `m | K`).
    DisjointBlocks,
}

/// How the post-change family of each unit is enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostFamily {
    /// Every positive definite non-identity pattern with entries in
    /// `{0} ∪ R`: all local laws some admissible global `R` can induce.
    AllPatterns,
    /// Only the fully equicorrelated `R_m(ρ)`, one per `ρ ∈ R`.
    Equicorrelated,
}

/// Correlation-change model: `N_K(0, I)` before the change, `N_K(0, R)` after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationScenario {
    pub num_sources: usize,
    pub unit_size: usize,
    /// The finite set `R` of admissible correlation values.
    pub rho_values: Vec<f64>,
    pub units: UnitFamily,
    pub family: PostFamily,
}

/// A post-change correlation structure: 1-based pairs and their values.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationHypothesis {
    pub label: String,
    pub pairs: BTreeMap<(usize, usize), f64>,
}

impl CorrelationHypothesis {
    /// All pairs inside `sources` correlated at `rho`.
    pub fn block(label: impl Into<String>, sources: &[usize], rho: f64) -> Self {
        let mut pairs = BTreeMap::new();
        for (i, &a) in sources.iter().enumerate() {
            for &b in &sources[i + 1..] {
                pairs.insert((a.min(b), a.max(b)), rho);
            }
        }
        Self {
            label: label.into(),
            pairs,
        }
    }

    /// The last `s` sources `{K−s+1, ..., K}` equicorrelated at `rho`.
    pub fn trailing_block(num_sources: usize, s: usize, rho: f64) -> Self {
        let sources: Vec<usize> = (num_sources + 1 - s..=num_sources).collect();
        Self::block(format!("s={s}"), &sources, rho)
    }
}

impl CorrelationScenario {
    /// All pairs or triples etc. with every admissible pattern in the family.
    pub fn unrestricted(num_sources: usize, unit_size: usize, rho_values: Vec<f64>) -> Self {
        Self {
            num_sources,
            unit_size,
            rho_values,
            units: UnitFamily::All,
            family: PostFamily::AllPatterns,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.unit_size < 2 || self.unit_size > self.num_sources {
            return Err(Error::InvalidConfig(format!(
                "correlation changes need 2 <= m <= K, got m = {}, K = {}",
                self.unit_size, self.num_sources
            )));
        }
        if self.rho_values.is_empty() {
            return Err(Error::InvalidConfig("the set of correlation values is empty".into()));
        }
        for &r in &self.rho_values {
            if !(r.abs() > 0.0 && r.abs() < 1.0) {
                return Err(invalid(format!("rho = {r} must satisfy |rho| ∈ (0,1)")));
            }
        }
        match self.units {
            UnitFamily::ConsecutivePairs if self.unit_size != 2 => Err(Error::InvalidConfig(
                "consecutive-pair units require m = 2".into(),
            )),
            UnitFamily::DisjointBlocks if !self.num_sources.is_multiple_of(self.unit_size) => {
                Err(Error::InvalidConfig("disjoint blocks require m to divide K".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn unit_list(&self) -> Result<Vec<Unit>> {
        let (k, m) = (self.num_sources, self.unit_size);
        Ok(match self.units {
            UnitFamily::All => all_units(k, m),
            UnitFamily::ConsecutivePairs => (1..k)
                .map(|i| Unit::new([i, i + 1], k))
                .collect::<Result<_>>()?,
            UnitFamily::DisjointBlocks => (0..k / m)
                .map(|b| Unit::new(b * m + 1..=(b + 1) * m, k))
                .collect::<Result<_>>()?,
        })
    }

    /// Builds the model with one hypothesis per entry of `hypotheses`.
    pub fn build(&self, hypotheses: &[CorrelationHypothesis]) -> Result<ChangePointModel> {
        self.validate()?;
        let (k, m) = (self.num_sources, self.unit_size);
        let mut interner = GaussianInterner::default();
        let pre = interner.intern(GaussianLocal::standard(m));
        let patterns = match self.family {
            PostFamily::AllPatterns => correlation_patterns(m, &self.rho_values),
            PostFamily::Equicorrelated => self
                .rho_values
                .iter()
                .map(|&r| CorrelationMatrix::equicorrelated(m, r))
                .collect::<Result<_>>()?,
        };
        if patterns.is_empty() {
            return Err(Error::InvalidConfig(
                "no admissible post-change correlation pattern is positive definite".into(),
            ));
        }
        let family: Vec<SharedLaw> = patterns
            .iter()
            .map(|r| shared(&interner.intern(GaussianLocal::from_correlation(vec![0.0; m], r))))
            .collect();

        let units = self.unit_list()?;
        let mut builder = ChangePointModel::builder(k, m).global_pre(Arc::new(GaussianLocal::standard(k)));
        for unit in &units {
            builder = builder.unit(unit.clone(), shared(&pre), family.clone());
        }
        for h in hypotheses {
            let corr = build_correlation_matrix(k, &h.pairs)?;
            builder = builder.hypothesis(correlation_hypothesis(&h.label, &corr, &units, &mut interner));
        }
        builder.build()
    }

    /// Correlation entries of `h` that are not in the admissible set.
    pub fn off_set_values(&self, h: &CorrelationHypothesis) -> Vec<(usize, usize, f64)> {
        h.pairs
            .iter()
            .filter(|(_, v)| !self.rho_values.iter().any(|r| (r - **v).abs() <= 1e-12))
            .map(|(&(a, b), &v)| (a, b, v))
            .collect()
    }
}

fn correlation_hypothesis(
    label: &str,
    corr: &CorrelationMatrix,
    units: &[Unit],
    interner: &mut GaussianInterner,
) -> PostChangeHypothesis {
    let m = units.first().map_or(0, Unit::len);
    let global = Arc::new(GaussianLocal::from_correlation(vec![0.0; corr.dim()], corr));
    let mut h = PostChangeHypothesis::new(label).with_global_gaussian(global);
    for unit in units {
        let local = corr.submatrix(&unit.positions());
        if !local.is_identity() {
            let law = interner.intern(GaussianLocal::from_correlation(vec![0.0; m], &local));
            h = h.with_unit(unit.clone(), shared(&law));
        }
    }
    h
}

/// Mean-change model with `m = 1`: `F^k = N(0, 1)` and a finite family of
/// unit-variance post-change means per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanScenario {
    /// `post_means[k]` lists the plausible post-change means of source `k+1`.
    pub post_means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanHypothesis {
    pub label: String,
    /// 1-based source → post-change mean.
    pub shifts: BTreeMap<usize, f64>,
}

impl MeanHypothesis {
    pub fn new(label: impl Into<String>, shifts: impl IntoIterator<Item = (usize, f64)>) -> Self {
        Self {
            label: label.into(),
            shifts: shifts.into_iter().collect(),
        }
    }
}

impl MeanScenario {
    /// Every source has the single alternative `N(μ_k, 1)`.
    pub fn known_shifts(mus: &[f64]) -> Self {
        Self {
            post_means: mus.iter().map(|&m| vec![m]).collect(),
        }
    }

    /// Every source may move to `N(−δ_k, 1)` or `N(δ_k, 1)`.
    pub fn signed_shifts(deltas: &[f64]) -> Self {
        Self {
            post_means: deltas.iter().map(|&d| vec![-d, d]).collect(),
        }
    }

    pub fn build(&self, hypotheses: &[MeanHypothesis]) -> Result<ChangePointModel> {
        let k = self.post_means.len();
        if k == 0 {
            return Err(Error::InvalidConfig("need at least one source".into()));
        }
        let mut interner = GaussianInterner::default();
        let pre = interner.intern(GaussianLocal::standard(1));
        let mut builder = ChangePointModel::builder(k, 1).global_pre(Arc::new(GaussianLocal::standard(k)));
        let mut families: HashMap<Vec<u64>, Vec<SharedLaw>> = HashMap::new();
        let mut units = Vec::with_capacity(k);
        for (i, means) in self.post_means.iter().enumerate() {
            if means.is_empty() || means.iter().any(|&m| m == 0.0 || !m.is_finite()) {
                return Err(invalid(format!(
                    "source {}: post-change means must be finite, non-zero and non-empty",
                    i + 1
                )));
            }
            let key: Vec<u64> = means.iter().map(|m| m.to_bits()).collect();
            let family = families
                .entry(key)
                .or_insert_with(|| {
                    means
                        .iter()
                        .map(|&mu| shared(&interner.intern(GaussianLocal::univariate(mu, 1.0).unwrap())))
                        .collect()
                })
                .clone();
            let unit = Unit::new([i + 1], k)?;
            builder = builder.unit(unit.clone(), shared(&pre), family);
            units.push(unit);
        }
        for h in hypotheses {
            let mut mean = vec![0.0; k];
            for (&src, &mu) in &h.shifts {
                if src == 0 || src > k {
                    return Err(invalid(format!("hypothesis {}: source {src} out of range", h.label)));
                }
                mean[src - 1] = mu;
            }
            let global = Arc::new(GaussianLocal::from_correlation(mean.clone(), &CorrelationMatrix::identity(k)));
            let mut ph = PostChangeHypothesis::new(h.label.clone()).with_global_gaussian(global);
            for (&src, &mu) in &h.shifts {
                if mu != 0.0 {
                    let law = interner.intern(GaussianLocal::univariate(mu, 1.0)?);
                    ph = ph.with_unit(units[src - 1].clone(), shared(&law));
                }
            }
            builder = builder.hypothesis(ph);
        }
        builder.build()
    }
}
