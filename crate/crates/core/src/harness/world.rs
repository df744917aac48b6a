//! One-day microgrid environment: the three agents' physical state, the
//! hourly market and per-agent rewards.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{ActionSets, DsmState, EssAction, EssState, GridConfig, JointSpace, PvState, AGENT_DSM, AGENT_ESS, AGENT_PV};
use crate::market::{
    cash_flows, clear_market, energy_balance_residual, settle_rewards, AgentIds, ClearingResult, DemandRequest, PvCost,
    Rewards, SupplyOffer,
};

use super::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub dsm: DsmState,
    pub pv: PvState<f64>,
    pub ess: EssState<f64>,
}

impl WorldState {
    pub fn t(&self) -> u32 {
        self.dsm.t
    }
}

/// Everything that happened in one slot.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub rewards: Rewards<f64>,
    pub result: ClearingResult<f64>,
    pub dsm_kw: f64,
    /// Signed ESS power actually exchanged, positive when discharging.
    pub ess_kw: f64,
    pub balance_residual: f64,
    /// Consumers and grid pay minus suppliers and grid receive.
    pub cash_residual: f64,
    pub next: WorldState,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct World {
    pub grid: GridConfig<f64>,
    pub ladder: Vec<f64>,
    pub p_grid: f64,
    pub feed_in_frac: f64,
    pub pv_cost: PvCost<f64>,
    pub space: JointSpace,
}

impl World {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.grid.validate()?;
        let m = &cfg.market;
        let space = JointSpace::new(vec![cfg.grid.dsm_alphabet(), m.ladder.len(), EssAction::count(m.ladder.len())]);
        Ok(World {
            grid: cfg.grid.clone(),
            ladder: m.ladder.clone(),
            p_grid: m.p_grid,
            feed_in_frac: m.feed_in_frac,
            pv_cost: m.pv_cost,
            space,
        })
    }

    pub fn horizon(&self) -> u32 {
        self.grid.horizon
    }

    pub fn feed_in(&self) -> f64 {
        self.feed_in_frac * self.p_grid
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> WorldState {
        WorldState { dsm: self.grid.initial_dsm(), pv: self.grid.pv_realize(1, rng), ess: self.grid.initial_ess() }
    }

    pub fn feasible(&self, s: &WorldState) -> ActionSets {
        self.grid.feasible_actions(&s.dsm, &s.ess, self.ladder.len())
    }

    /// Joint indices admissible in `s`.
    pub fn feasible_joint(&self, s: &WorldState) -> Vec<usize> {
        self.space.enumerate(&self.feasible(s))
    }

    /// Length of [`World::encode`] for `agent`.
    pub fn input_len(&self, agent: usize) -> usize {
        2 + match agent {
            AGENT_DSM => 2 * self.grid.devices.len(),
            _ => 1,
        }
    }

    /// Observation vector of one agent: hour angle as a sin/cos pair, then
    /// its own normalized state (waiting and owed hours, PV output, or SOC).
    pub fn encode(&self, agent: usize, s: &WorldState) -> Vec<f64> {
        let angle = 2.0 * PI * f64::from(s.t()) / f64::from(self.horizon());
        let mut x = vec![angle.sin(), angle.cos()];
        match agent {
            AGENT_DSM => {
                for (g, d) in self.grid.devices.iter().enumerate() {
                    x.push(f64::from(s.dsm.waiting[g]) / f64::from(d.max_wait()));
                }
                for (g, d) in self.grid.devices.iter().enumerate() {
                    x.push(f64::from(s.dsm.remaining[g]) / f64::from(d.duration));
                }
            }
            AGENT_PV => x.push(s.pv.power / self.grid.pv_capacity),
            _ => {
                let span = self.grid.soc_max - self.grid.soc_min;
                x.push((s.ess.soc - self.grid.soc_min) / span);
            }
        }
        x
    }

    /// Clears the market for `actions` (DSM local mask, PV bid, ESS action)
    /// and advances the physical state.
    ///
    /// A discharge offer priced above the grid is rejected and the unit
    /// stays idle; a rejected PV offer is curtailed but its generation cost
    /// is still paid.
    pub fn step<R: Rng + ?Sized>(&self, s: &WorldState, actions: [usize; 3], rng: &mut R) -> Result<StepOutcome> {
        let sets = self.feasible(s);
        for (k, &a) in actions.iter().enumerate() {
            if !sets.per_agent[k].contains(&a) {
                return Err(Error::ConstraintViolation(format!("action {a} of agent {k} is not admissible at t={}", s.t())));
            }
        }
        let mask = s.dsm.expand_local(actions[AGENT_DSM], &self.grid) | s.dsm.forced_mask(&self.grid);
        let dsm_kw = self.grid.dsm_power(&s.dsm, mask)?;
        let ess_action = EssAction::from_index(actions[AGENT_ESS]);
        let pe = self.grid.ess_power;

        let mut offers = vec![SupplyOffer { agent: AGENT_PV, capacity: s.pv.power, bid: self.ladder[actions[AGENT_PV]] }];
        let mut demands = vec![DemandRequest { agent: AGENT_DSM, demand: dsm_kw }];
        match ess_action {
            EssAction::Discharge(k) => offers.push(SupplyOffer { agent: AGENT_ESS, capacity: pe, bid: self.ladder[k] }),
            EssAction::Charge => demands.push(DemandRequest { agent: AGENT_ESS, demand: pe }),
            EssAction::Idle => {}
        }
        let result = clear_market(&offers, &demands, self.p_grid, self.feed_in_frac);

        let effective = match ess_action {
            EssAction::Discharge(_) if result.was_rejected(AGENT_ESS) => EssAction::Idle,
            a => a,
        };
        let (ess_next, ess_kw) = self.grid.ess_step(&s.ess, effective)?;
        let ids = AgentIds::default();
        let rewards = settle_rewards(&result, dsm_kw, s.pv.power, &self.pv_cost, ess_kw, ids);
        let charge_kw = if ess_kw < 0.0 { -ess_kw } else { 0.0 };
        let balance_residual = energy_balance_residual(&result, dsm_kw, ids, charge_kw);
        let (paid, received) = cash_flows(&result);

        let done = s.t() >= self.horizon();
        let next = WorldState {
            dsm: self.grid.advance_dsm(&s.dsm, mask),
            pv: if done { PvState { t: s.t() + 1, power: 0.0 } } else { self.grid.pv_realize(s.t() + 1, rng) },
            ess: ess_next,
        };
        Ok(StepOutcome { rewards, result, dsm_kw, ess_kw, balance_residual, cash_residual: paid - received, next, done })
    }

    /// Action each agent falls back to when it is held still: forced loads
    /// only, the lowest bid, storage idle.
    pub fn null_actions(&self, sets: &ActionSets) -> [usize; 3] {
        [sets.per_agent[AGENT_DSM][0], 0, EssAction::Idle.index()]
    }
}
