//! Run configuration, read from TOML with one table per component. Every
//! field has a default, so a config file only lists overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::admm::AdmmConfig;
use crate::belief::BeliefKey;
use crate::comm::{ExchangeLogMode, FailureModel};
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::learner::Hyperparams;
use crate::market::PvCost;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    BaDrl,
    NashDqn,
    Admm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::BaDrl, Algorithm::NashDqn, Algorithm::Admm];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::BaDrl => "ba-drl",
            Algorithm::NashDqn => "nash-dqn",
            Algorithm::Admm => "admm",
        }
    }

    pub fn learns(self) -> bool {
        self != Algorithm::Admm
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?} (expected ba-drl, nash-dqn or admm)")))
    }
}

/// What the connected agents assume about an agent whose Q upload was lost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaHandling {
    /// Expectation under the observers' Dirichlet beliefs.
    #[default]
    BeliefCe,
    /// Held at its null action (idle, forced loads only, lowest bid).
    Neglect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub algorithm: Algorithm,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Fraction of final episodes averaged per seed in the summary.
    pub summary_window: f64,
    /// Per-slot CSV every this many episodes (0 disables it).
    pub slot_log_every: usize,
    /// ADMM residual traces every this many episodes (0 disables them).
    pub trace_every: usize,
    pub exchange_log: ExchangeLogMode,
    pub pa_handling: PaHandling,
    /// Seeds run concurrently.
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            algorithm: Algorithm::BaDrl,
            episodes: 3000,
            seeds: (0..10).collect(),
            summary_window: 0.1,
            slot_log_every: 0,
            trace_every: 500,
            exchange_log: ExchangeLogMode::Failures,
            pa_handling: PaHandling::BeliefCe,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketSection {
    pub ladder: Vec<f64>,
    pub p_grid: f64,
    pub feed_in_frac: f64,
    pub pv_cost: PvCost<f64>,
}

impl Default for MarketSection {
    fn default() -> Self {
        MarketSection {
            ladder: vec![0.05, 0.09, 0.13, 0.17, 0.21, 0.25],
            p_grid: 0.16,
            feed_in_frac: 0.4,
            pv_cost: PvCost { beta: 0.001, zeta: 0.02, phi: 0.1 },
        }
    }
}

impl MarketSection {
    pub fn feed_in(&self) -> f64 {
        self.feed_in_frac * self.p_grid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeliefSection {
    /// Probability that an observation names the true action.
    pub fidelity: f64,
    pub key: BeliefKey,
}

impl Default for BeliefSection {
    fn default() -> Self {
        BeliefSection { fidelity: 0.6, key: BeliefKey::PerHour }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSection {
    pub embed: usize,
    pub cells: usize,
    pub layers: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { embed: 35, cells: 35, layers: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommSection {
    pub p_fail: f64,
    /// First episode with lossy uploads.
    pub fail_from: usize,
    /// Episode after the last lossy one.
    pub fail_until: usize,
}

impl Default for CommSection {
    fn default() -> Self {
        CommSection { p_fail: 0.01, fail_from: 1500, fail_until: 3000 }
    }
}

impl CommSection {
    pub fn model(&self) -> Result<FailureModel> {
        FailureModel::new(self.p_fail, self.fail_from, self.fail_until)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NashSection {
    pub max_rounds: usize,
}

impl Default for NashSection {
    fn default() -> Self {
        NashSection { max_rounds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub grid: GridConfig<f64>,
    pub market: MarketSection,
    pub belief: BeliefSection,
    pub learner: Hyperparams,
    pub network: NetworkSection,
    pub comm: CommSection,
    pub nash: NashSection,
    pub admm: AdmmConfig,
}

impl RunConfig {
    /// 10000 episodes with lossy uploads in the second half.
    pub fn full_scale(mut self) -> Self {
        self.run.episodes = 10_000;
        self.comm.fail_from = 5000;
        self.comm.fail_until = 10_000;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.episodes == 0 {
            return Err(Error::Config("episodes must be positive".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.run.summary_window > 0.0 && self.run.summary_window <= 1.0) {
            return Err(Error::Config("summary_window must lie in (0, 1]".into()));
        }
        self.grid.validate()?;
        let m = &self.market;
        if m.ladder.is_empty() || m.ladder.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("price ladder must be non-empty and strictly increasing".into()));
        }
        if !(m.p_grid > 0.0) || !(0.0..=1.0).contains(&m.feed_in_frac) {
            return Err(Error::Config("p_grid must be positive and feed_in_frac in [0, 1]".into()));
        }
        if m.pv_cost.beta < 0.0 {
            return Err(Error::Config("PV cost must be convex (beta >= 0)".into()));
        }
        if !(0.0..=1.0).contains(&self.belief.fidelity) {
            return Err(Error::Config("observation fidelity must lie in [0, 1]".into()));
        }
        self.learner.validate()?;
        let n = &self.network;
        if n.embed == 0 || n.cells == 0 || n.layers == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        self.comm.model()?;
        if self.nash.max_rounds == 0 {
            return Err(Error::Config("nash.max_rounds must be at least 1".into()));
        }
        self.admm.validate()?;
        Ok(())
    }
}
