//! Uniform-price bidding market and reward settlement.
//!
//! Suppliers (PV, discharging ESS) submit a capacity and a bid; consumers
//! (DSM, charging ESS) submit quantities only. Offers are accepted in merit
//! order until demand is met and the bid of the marginal accepted offer sets
//! the uniform clearing price. The main grid covers any shortfall at
//! `p_grid` (which then becomes the clearing price) and buys any surplus at
//! the feed-in price. Bids above `p_grid` are rejected outright.
//!
//! Everything here is generic over [`Field`], so the same code runs on `f64`
//! in the simulator and on exact rationals in the tests.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::scalar::{field_sum, Field};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupplyOffer<T> {
    pub agent: usize,
    pub capacity: T,
    pub bid: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandRequest<T> {
    pub agent: usize,
    pub demand: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingResult<T> {
    pub clearing_price: T,
    pub feed_in_price: T,
    /// Power accepted from each supplier for local consumption.
    pub dispatch: BTreeMap<usize, T>,
    pub grid_import: T,
    /// Surplus sold to the main grid at the feed-in price, per supplier.
    pub grid_export: BTreeMap<usize, T>,
    pub total_demand: T,
    /// Agents whose offers were dropped for bidding above `p_grid`.
    pub rejected: Vec<usize>,
}

impl<T: Field> ClearingResult<T> {
    pub fn dispatched(&self, agent: usize) -> T {
        self.dispatch.get(&agent).copied().unwrap_or_else(T::zero)
    }

    pub fn exported(&self, agent: usize) -> T {
        self.grid_export.get(&agent).copied().unwrap_or_else(T::zero)
    }

    /// Power an accepted supplier delivers in total (local plus export).
    pub fn delivered(&self, agent: usize) -> T {
        self.dispatched(agent) + self.exported(agent)
    }

    pub fn total_export(&self) -> T {
        field_sum(self.grid_export.values().copied())
    }

    pub fn total_dispatch(&self) -> T {
        field_sum(self.dispatch.values().copied())
    }

    pub fn was_rejected(&self, agent: usize) -> bool {
        self.rejected.contains(&agent)
    }
}

/// Quadratic PV generation cost `beta P^2 + zeta P + phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvCost<T> {
    pub beta: T,
    pub zeta: T,
    pub phi: T,
}

impl<T: Field> PvCost<T> {
    pub fn cost(&self, power: T) -> T {
        self.beta * power * power + self.zeta * power + self.phi
    }
}

/// Clears one slot of the market.
pub fn clear_market<T: Field>(
    offers: &[SupplyOffer<T>],
    demands: &[DemandRequest<T>],
    p_grid: T,
    feed_in_frac: T,
) -> ClearingResult<T> {
    let total_demand = field_sum(demands.iter().map(|d| d.demand));
    let mut rejected = Vec::new();
    let mut valid: Vec<&SupplyOffer<T>> = Vec::with_capacity(offers.len());
    for o in offers {
        if o.bid > p_grid {
            debug!("offer from agent {} at {:?} above grid price, dropped", o.agent, o.bid);
            rejected.push(o.agent);
        } else if o.capacity > T::zero() {
            valid.push(o);
        }
    }
    // stable: equal bids keep submission order, which does not matter since
    // equal-bid groups are split pro rata
    valid.sort_by(|a, b| a.bid.partial_cmp(&b.bid).expect("comparable bids"));

    let mut dispatch = BTreeMap::new();
    let mut grid_export = BTreeMap::new();
    let add = |map: &mut BTreeMap<usize, T>, agent: usize, x: T| {
        let e = map.entry(agent).or_insert_with(T::zero);
        *e = *e + x;
    };

    let mut remaining = total_demand;
    let mut price: Option<T> = None;
    let mut i = 0;
    while i < valid.len() {
        let bid = valid[i].bid;
        let mut j = i;
        while j < valid.len() && valid[j].bid == bid {
            j += 1;
        }
        let group = &valid[i..j];
        let cap = field_sum(group.iter().map(|o| o.capacity));
        if remaining <= T::zero() {
            for o in group {
                add(&mut dispatch, o.agent, T::zero());
                add(&mut grid_export, o.agent, o.capacity);
            }
        } else if cap <= remaining {
            for o in group {
                add(&mut dispatch, o.agent, o.capacity);
                add(&mut grid_export, o.agent, T::zero());
            }
            remaining = remaining - cap;
            price = Some(bid);
        } else {
            for o in group {
                let share = o.capacity * remaining / cap;
                add(&mut dispatch, o.agent, share);
                add(&mut grid_export, o.agent, o.capacity - share);
            }
            remaining = T::zero();
            price = Some(bid);
        }
        i = j;
    }

    let grid_import = if remaining > T::zero() { remaining } else { T::zero() };
    let clearing_price = if grid_import > T::zero() {
        p_grid
    } else {
        price.or_else(|| valid.first().map(|o| o.bid)).unwrap_or(p_grid)
    };
    grid_export.retain(|_, x| *x != T::zero());

    ClearingResult {
        clearing_price,
        feed_in_price: feed_in_frac * p_grid,
        dispatch,
        grid_import,
        grid_export,
        total_demand,
        rejected,
    }
}

/// One-slot rewards of the three agents, in money units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rewards<T> {
    pub dsm: T,
    pub pv: T,
    pub ess: T,
}

impl<T: Field> Rewards<T> {
    pub fn total(&self) -> T {
        self.dsm + self.pv + self.ess
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.dsm, self.pv, self.ess]
    }
}

/// Agent ids used when submitting offers and demands.
#[derive(Debug, Clone, Copy)]
pub struct AgentIds {
    pub dsm: usize,
    pub pv: usize,
    pub ess: usize,
}

impl Default for AgentIds {
    fn default() -> Self {
        AgentIds { dsm: 0, pv: 1, ess: 2 }
    }
}

/// Settles one cleared slot. `pv_power` is the realized PV output (the cost
/// is paid on it whether or not the offer cleared); `ess_kw` is signed,
/// positive when discharging.
pub fn settle_rewards<T: Field>(
    result: &ClearingResult<T>,
    dsm_kw: T,
    pv_power: T,
    pv_cost: &PvCost<T>,
    ess_kw: T,
    ids: AgentIds,
) -> Rewards<T> {
    let pc = result.clearing_price;
    let fi = result.feed_in_price;
    let revenue = |agent| result.dispatched(agent) * pc + result.exported(agent) * fi;
    let ess = if ess_kw > T::zero() {
        revenue(ids.ess)
    } else if ess_kw < T::zero() {
        ess_kw * pc
    } else {
        T::zero()
    };
    Rewards {
        dsm: T::zero() - dsm_kw * pc,
        pv: revenue(ids.pv) - pv_cost.cost(pv_power),
        ess,
    }
}

/// Signed residual of the slot energy balance
/// `P_pv + P_grid + P_ess - P_dsm`, with `P_grid = import - export` and the
/// supplier powers taken as delivered.
pub fn energy_balance_residual<T: Field>(result: &ClearingResult<T>, dsm_kw: T, ids: AgentIds, ess_charge_kw: T) -> T {
    let pv = result.delivered(ids.pv);
    let ess = result.delivered(ids.ess) - ess_charge_kw;
    let grid = result.grid_import - result.total_export();
    pv + grid + ess - dsm_kw
}

/// Cash flows of a cleared slot: (paid by consumers and grid, received by
/// suppliers and grid). Equal up to rounding since the market is zero-sum.
pub fn cash_flows<T: Field>(result: &ClearingResult<T>) -> (T, T) {
    let pc = result.clearing_price;
    let fi = result.feed_in_price;
    let paid = result.total_demand * pc + result.total_export() * fi;
    let received = result.total_dispatch() * pc + result.grid_import * pc + result.total_export() * fi;
    (paid, received)
}
