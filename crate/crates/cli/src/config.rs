//! Effective configuration: built-in defaults, then an optional TOML file,
//! then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use rrcusum::bounds::{BoundsSettings, LadderSettings};
use rrcusum::montecarlo::{Ordering, StudyConfig, DEFAULT_DELAY_CAP};
use rrcusum::scenario::{
    CorrelationHypothesis, CorrelationScenario, MeanHypothesis, MeanScenario, PostFamily,
    UnitFamily,
};
use rrcusum::stats::DEFAULT_SEED;
use rrcusum::ChangePointModel;

use crate::CliError;

/// Named scenario families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// `ℛ = {ρ}`, all size-m subsets, trailing block of `s` correlated sources.
    CorrPairs,
    /// `ℛ = {+ρ, −ρ}` with pairs; the block correlates at `+ρ`.
    CorrSigned,
    /// Disjoint consecutive blocks with only the equicorrelated alternative.
    CorrBlocks,
    /// Known mean shifts `μ_k`; the last `s` sources shift.
    MeanChange,
    /// Mean shifts of known size and unknown sign.
    MeanSigned,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::CorrPairs => "corr-pairs",
            Preset::CorrSigned => "corr-signed",
            Preset::CorrBlocks => "corr-blocks",
            Preset::MeanChange => "mean-change",
            Preset::MeanSigned => "mean-signed",
        }
    }

    fn is_correlation(self) -> bool {
        matches!(self, Preset::CorrPairs | Preset::CorrSigned | Preset::CorrBlocks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub preset: Preset,
    #[serde(rename = "K")]
    pub num_sources: usize,
    pub m: usize,
    pub rho: f64,
    /// Affected sources; defaults to `K` for correlation presets and 1 for
    /// mean presets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    /// Mean shifts; a single value applies to all `K` sources.
    pub mu: Vec<f64>,
    /// Shift magnitudes for `mean-signed`.
    pub delta: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            preset: Preset::CorrPairs,
            num_sources: 10,
            m: 2,
            rho: 0.7,
            s: None,
            mu: vec![1.0],
            delta: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gamma: f64,
    pub reps: u64,
    pub seed: u64,
    pub nu: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub max_steps: u64,
    /// Run-length cap for `simulate --arl`; defaults to `100 γ`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arl_cap: Option<u64>,
    pub ordering: Ordering,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma: 100.0,
            reps: 4000,
            seed: DEFAULT_SEED,
            nu: 0,
            threads: 0,
            max_steps: DEFAULT_DELAY_CAP,
            arl_cap: None,
            ordering: Ordering::WorstCase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub drift_reps: u64,
    pub ladder_reps: u64,
    pub ladder_start_horizon: u64,
    pub ladder_max_horizon: u64,
    pub constant_c: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        let b = BoundsSettings::default();
        Self {
            drift_reps: b.drift_reps,
            ladder_reps: b.ladder.reps,
            ladder_start_horizon: b.ladder.start_horizon,
            ladder_max_horizon: b.ladder.max_horizon,
            constant_c: b.constant_c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioConfig,
    pub run: RunConfig,
    pub bounds: BoundsConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.scenario;
        if s.preset.is_correlation() && !(s.rho > 0.0 && s.rho < 1.0) {
            return Err(CliError::Usage(format!(
                "invalid rho = {}: the correlation must satisfy ρ ∈ (0,1)",
                s.rho
            )));
        }
        if !self.run.gamma.is_finite() || self.run.gamma <= 1.0 {
            return Err(CliError::Usage(format!(
                "invalid gamma = {}: must be finite and > 1",
                self.run.gamma
            )));
        }
        if self.run.reps == 0 {
            return Err(CliError::Usage("reps must be at least 1".into()));
        }
        if s.num_sources == 0 {
            return Err(CliError::Usage("K must be at least 1".into()));
        }
        Ok(())
    }

    pub fn bounds_settings(&self) -> BoundsSettings {
        BoundsSettings {
            drift_reps: self.bounds.drift_reps,
            ladder: LadderSettings {
                start_horizon: self.bounds.ladder_start_horizon,
                max_horizon: self.bounds.ladder_max_horizon,
                reps: self.bounds.ladder_reps,
            },
            seed: self.run.seed,
            constant_c: self.bounds.constant_c,
        }
    }

    /// Delay-estimation settings shared by every preset.
    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            num_sources: self.scenario.num_sources,
            unit_size: self.scenario.m,
            rho: self.scenario.rho,
            gamma: self.run.gamma,
            s_values: Vec::new(),
            replications: self.run.reps,
            seed: self.run.seed,
            nu: self.run.nu,
            ordering: self.run.ordering,
            max_steps: self.run.max_steps,
        }
    }

    fn mean_values(&self, values: &[f64], flag: &str) -> Result<Vec<f64>, CliError> {
        match values {
            [] => Err(CliError::Usage(format!("--{flag} needs at least one value"))),
            [v] => Ok(vec![*v; self.scenario.num_sources]),
            many => Ok(many.to_vec()),
        }
    }

    /// The scenario's model with its single hypothesis.
    pub fn build_model(&self) -> Result<ChangePointModel, CliError> {
        self.validate()?;
        let s = &self.scenario;
        let usage = |e: rrcusum::Error| CliError::Usage(e.to_string());
        match s.preset {
            Preset::CorrPairs | Preset::CorrSigned | Preset::CorrBlocks => {
                let affected = s.s.unwrap_or(s.num_sources);
                if affected < 2 || affected > s.num_sources {
                    return Err(CliError::Usage(format!(
                        "s = {affected} must satisfy 2 <= s <= K = {}",
                        s.num_sources
                    )));
                }
                let scenario = match s.preset {
                    Preset::CorrPairs => {
                        CorrelationScenario::unrestricted(s.num_sources, s.m, vec![s.rho])
                    }
                    Preset::CorrSigned => {
                        CorrelationScenario::unrestricted(s.num_sources, s.m, vec![s.rho, -s.rho])
                    }
                    _ => CorrelationScenario {
                        units: UnitFamily::DisjointBlocks,
                        family: PostFamily::Equicorrelated,
                        ..CorrelationScenario::unrestricted(s.num_sources, s.m, vec![s.rho])
                    },
                };
                let h = CorrelationHypothesis::trailing_block(s.num_sources, affected, s.rho);
                scenario.build(&[h]).map_err(usage)
            }
            Preset::MeanChange | Preset::MeanSigned => {
                let values = if s.preset == Preset::MeanChange {
                    self.mean_values(&s.mu, "mu")?
                } else {
                    self.mean_values(&s.delta, "delta")?
                };
                let k = values.len();
                let affected = s.s.unwrap_or(1);
                if affected == 0 || affected > k {
                    return Err(CliError::Usage(format!(
                        "s = {affected} must satisfy 1 <= s <= K = {k}"
                    )));
                }
                let scenario = if s.preset == Preset::MeanChange {
                    MeanScenario::known_shifts(&values)
                } else {
                    MeanScenario::signed_shifts(&values)
                };
                let shifts = (k + 1 - affected..=k).map(|src| (src, values[src - 1]));
                let h = MeanHypothesis::new(format!("s={affected}"), shifts);
                scenario.build(&[h]).map_err(usage)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn sections_are_partial() {
        let c = Config::parse("[scenario]\nK = 6\nrho = 0.5\n[run]\ngamma = 1e5\n").unwrap();
        assert_eq!(c.scenario.num_sources, 6);
        assert_eq!(c.scenario.rho, 0.5);
        assert_eq!(c.run.gamma, 1e5);
        assert_eq!(c.run.reps, 4000);
        assert!(Config::parse("[run]\nbogus = 1\n").is_err());
    }

    #[test]
    fn rho_outside_unit_interval_is_a_usage_error() {
        let mut c = Config::default();
        c.scenario.rho = 1.2;
        let err = c.build_model().unwrap_err();
        assert!(matches!(err, CliError::Usage(ref m) if m.contains("ρ ∈ (0,1)")));
    }

    #[test]
    fn mean_preset_broadcasts_a_single_shift() {
        let mut c = Config::default();
        c.scenario.preset = Preset::MeanChange;
        c.scenario.num_sources = 4;
        let model = c.build_model().unwrap();
        assert_eq!(model.num_units(), 4);
        assert_eq!(model.affected_units(&model.hypotheses()[0]).len(), 1);
    }
}
