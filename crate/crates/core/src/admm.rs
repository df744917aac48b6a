//! Model-based dispatch baseline: sharing ADMM on the convex relaxation of
//! one slot's dispatch problem.
//!
//! Each controllable unit is a scalar block `w_j` (kW of net grid draw it
//! causes) with a private convex cost `f_j` on a box. The blocks are coupled
//! only through the grid cost `g(sum_j w_j)`. ADMM alternates closed-form
//! clipped block updates, a closed-form prox step on `g`, and a dual ascent
//! step; the scaled dual times `rho` converges to the marginal grid price.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DsmState, EssAction, EssState, GridConfig, AGENT_DSM, AGENT_ESS, AGENT_PV};
use crate::scalar::Scalar;

/// `f(w) = a/2 w^2 + b w` on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block<T> {
    pub a: T,
    pub b: T,
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> Block<T> {
    pub fn cost(&self, w: T) -> T {
        self.a * w * w / T::of(2.0) + self.b * w
    }

    fn clip(&self, w: T) -> T {
        w.max(self.lo).min(self.hi)
    }

    /// `argmin f(w) + rho/2 (w - v)^2` over the box.
    pub fn prox(&self, v: T, rho: T) -> T {
        self.clip((rho * v - self.b) / (self.a + rho))
    }
}

/// Grid cost of the total draw `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coupling<T> {
    /// `buy (s - offset)` above `offset`, `sell (s - offset)` below; needs
    /// `sell <= buy`.
    PiecewiseLinear { offset: T, buy: T, sell: T },
    /// `c/2 (s - target)^2`.
    Quadratic { c: T, target: T },
}

impl<T: Scalar> Coupling<T> {
    pub fn cost(&self, s: T) -> T {
        match *self {
            Coupling::PiecewiseLinear { offset, buy, sell } => {
                let d = s - offset;
                if d >= T::zero() {
                    buy * d
                } else {
                    sell * d
                }
            }
            Coupling::Quadratic { c, target } => c * (s - target) * (s - target) / T::of(2.0),
        }
    }

    /// `argmin_t g(t + shift) + k/2 (t - m)^2`.
    fn prox(&self, m: T, k: T, shift: T) -> T {
        match *self {
            Coupling::PiecewiseLinear { offset, buy, sell } => {
                let kink = offset - shift;
                let above = m - buy / k;
                let below = m - sell / k;
                if above >= kink {
                    above
                } else if below <= kink {
                    below
                } else {
                    kink
                }
            }
            Coupling::Quadratic { c, target } => (c * (target - shift) + k * m) / (c + k),
        }
    }
}

/// How the relaxed slot solution becomes a discrete action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    /// Devices on at `x >= 0.5`, ESS direction to the nearest integer.
    Threshold,
    /// Best combination on the slot objective of the floor and ceiling of
    /// each fractional coordinate, widened to the whole box for blocks left
    /// indifferent by the converged price. The threshold result wins ties.
    #[default]
    Neighborhood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    pub rho: f64,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iters: usize,
    /// Optional quadratic weight, in dollars per squared unit of each
    /// block's own rating, that makes the relaxed optimum unique.
    pub ridge: f64,
    pub rounding: Rounding,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1.0,
            tol_primal: 1e-6,
            tol_dual: 1e-6,
            max_iters: 200,
            ridge: 0.0,
            rounding: Rounding::default(),
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !(self.tol_primal > 0.0) || !(self.tol_dual > 0.0) || self.max_iters == 0 {
            return Err(Error::Config("ADMM needs rho, tolerances and max_iters positive".into()));
        }
        Ok(())
    }
}

/// Iterate of the sharing ADMM. Frozen blocks keep their value and only
/// enter through the coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState<T> {
    pub w: Vec<T>,
    pub frozen: Vec<bool>,
    /// Consensus average `z-bar` over the active blocks.
    pub z: T,
    /// Scaled dual.
    pub u: T,
    pub rho: T,
}

impl<T: Scalar> AdmmState<T> {
    pub fn new(blocks: &[Block<T>], rho: T) -> Self {
        let w: Vec<T> = blocks.iter().map(|b| b.clip(T::zero())).collect();
        let n = T::of(blocks.len().max(1) as f64);
        let z = w.iter().copied().sum::<T>() / n;
        AdmmState { w, frozen: vec![false; blocks.len()], z, u: T::zero(), rho }
    }

    fn active(&self) -> usize {
        self.frozen.iter().filter(|f| !**f).count()
    }

    fn frozen_sum(&self) -> T {
        self.w.iter().zip(&self.frozen).filter(|(_, f)| **f).map(|(w, _)| *w).sum()
    }

    fn active_mean(&self) -> T {
        let n = self.active();
        if n == 0 {
            return T::zero();
        }
        self.w.iter().zip(&self.frozen).filter(|(_, f)| !**f).map(|(w, _)| *w).sum::<T>() / T::of(n as f64)
    }

    /// Marginal price of grid power implied by the dual.
    pub fn price(&self) -> T {
        self.rho * self.u
    }

    pub fn freeze(&mut self, j: usize, value: T) {
        self.w[j] = value;
        self.frozen[j] = true;
    }
}

/// Total objective `sum_j f_j(w_j) + g(sum_j w_j)`.
pub fn objective<T: Scalar>(blocks: &[Block<T>], coupling: &Coupling<T>, w: &[T]) -> T {
    let s: T = w.iter().copied().sum();
    blocks.iter().zip(w).map(|(b, &x)| b.cost(x)).sum::<T>() + coupling.cost(s)
}

/// One ADMM iteration; returns the primal and dual residual norms.
pub fn admm_step<T: Scalar>(state: &mut AdmmState<T>, blocks: &[Block<T>], coupling: &Coupling<T>) -> (T, T) {
    let n_act = state.active();
    if n_act == 0 {
        return (T::zero(), T::zero());
    }
    let n = T::of(n_act as f64);
    let rho = state.rho;
    let xbar = state.active_mean();
    let (z_old, u) = (state.z, state.u);
    let old = state.w.clone();
    for (j, b) in blocks.iter().enumerate() {
        if !state.frozen[j] {
            state.w[j] = b.prox(old[j] - xbar + z_old - u, rho);
        }
    }
    let xbar_new = state.active_mean();
    // prox of g over the active total t = n z
    let t = coupling.prox(n * (u + xbar_new), rho / n, state.frozen_sum());
    state.z = t / n;
    state.u = u + xbar_new - state.z;
    let r = n.sqrt() * (xbar_new - state.z).abs();
    let dz = state.z - z_old;
    let dxbar = xbar_new - xbar;
    let s = rho
        * state
            .w
            .iter()
            .zip(&old)
            .zip(&state.frozen)
            .filter(|(_, f)| !**f)
            .map(|((&w1, &w0), _)| {
                let d = w1 - w0 - dxbar + dz;
                d * d
            })
            .sum::<T>()
            .sqrt();
    (r, s)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualTrace<T> {
    pub primal: Vec<T>,
    pub dual: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmOutcome<T> {
    pub state: AdmmState<T>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: ResidualTrace<T>,
}

/// Runs ADMM to the tolerances. `before_iter(k, state)` is called ahead of
/// every iteration and may freeze blocks.
pub fn admm_solve_with<T: Scalar>(
    blocks: &[Block<T>],
    coupling: &Coupling<T>,
    cfg: &AdmmConfig,
    mut before_iter: impl FnMut(usize, &mut AdmmState<T>),
) -> AdmmOutcome<T> {
    let mut state = AdmmState::new(blocks, T::of(cfg.rho));
    let mut trace = ResidualTrace::default();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        before_iter(iterations, &mut state);
        iterations += 1;
        let (r, s) = admm_step(&mut state, blocks, coupling);
        trace.primal.push(r);
        trace.dual.push(s);
        if r.to_f64_lossy() <= cfg.tol_primal && s.to_f64_lossy() <= cfg.tol_dual {
            converged = true;
            break;
        }
    }
    AdmmOutcome { state, iterations, converged, trace }
}

pub fn admm_solve<T: Scalar>(blocks: &[Block<T>], coupling: &Coupling<T>, cfg: &AdmmConfig) -> AdmmOutcome<T> {
    admm_solve_with(blocks, coupling, cfg, |_, _| {})
}

/// Minimizer of `f_j(w) + g(w + rest)` over block `j`'s box, by ternary
/// search on the convex one-dimensional objective.
pub fn best_response<T: Scalar>(block: &Block<T>, coupling: &Coupling<T>, rest: T) -> T {
    let h = |w: T| block.cost(w) + coupling.cost(w + rest);
    let (mut lo, mut hi) = (block.lo, block.hi);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / T::of(3.0);
        let m2 = hi - (hi - lo) / T::of(3.0);
        if h(m1) <= h(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let mid = (lo + hi) / T::of(2.0);
    // prefer an exact box end when it is as good
    [block.lo, block.hi, mid]
        .into_iter()
        .min_by(|&a, &b| h(a).partial_cmp(&h(b)).expect("finite"))
        .expect("candidates")
}

/// Relaxed single-slot dispatch problem of the microgrid.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotProblem<T> {
    /// Device index of each DSM block (the ESS block comes last).
    pub devices: Vec<usize>,
    pub device_power: Vec<T>,
    pub ess_power: T,
    pub blocks: Vec<Block<T>>,
    pub coupling: Coupling<T>,
    pub forced_mask: u32,
    /// Continuation value of energy, per kWh.
    pub pi: T,
    /// Power base in kW; block variables are in units of `base`.
    pub base: T,
}

impl<T: Scalar> SlotProblem<T> {
    /// Blocks are grid draw in units of `base` kW (the largest unit rating):
    /// DSM block `g` is `P_g x_g` with `x_g in [0, 1]` (`[1, 1]` when forced)
    /// and the ESS block is `-P_char q` with `q` limited by the SOC bounds.
    /// Serving load now and holding stored energy are both valued at the
    /// continuation price `pi`.
    pub fn build(
        cfg: &GridConfig<T>,
        dsm: &DsmState,
        ess: &EssState<T>,
        pv_power: T,
        p_grid: T,
        feed_in: T,
        pi: T,
        ridge: T,
    ) -> Self {
        let devices = dsm.controllable(cfg);
        let forced_mask = dsm.forced_mask(cfg);
        let pe = cfg.ess_power;
        let base = devices.iter().map(|&g| cfg.devices[g].avg_power).fold(pe, T::max);
        let mut blocks = Vec::with_capacity(devices.len() + 1);
        let mut device_power = Vec::with_capacity(devices.len());
        // the ridge is per unit of x, so rescale it for each rating
        for &g in &devices {
            let p = cfg.devices[g].avg_power / base;
            let lo = if forced_mask & (1 << g) != 0 { p } else { T::zero() };
            blocks.push(Block { a: ridge / (p * p), b: -pi * base, lo, hi: p });
            device_power.push(cfg.devices[g].avg_power);
        }
        let pu = pe / base;
        let q_hi = if cfg.ess_feasible(ess, EssAction::Discharge(0)) { T::one() } else { T::zero() };
        let q_lo = if cfg.ess_feasible(ess, EssAction::Charge) { -T::one() } else { T::zero() };
        // w = -P q: charging draws from the grid, discharging offsets it
        blocks.push(Block { a: ridge / (pu * pu), b: -pi * base, lo: -pu * q_hi, hi: -pu * q_lo });
        SlotProblem {
            devices,
            device_power,
            ess_power: pe,
            blocks,
            coupling: Coupling::PiecewiseLinear { offset: pv_power / base, buy: p_grid * base, sell: feed_in * base },
            forced_mask,
            pi,
            base,
        }
    }

    pub fn ess_block(&self) -> usize {
        self.blocks.len() - 1
    }

    /// Relaxed objective of a discrete action (device mask, ESS direction),
    /// in dollars.
    pub fn discrete_cost(&self, mask: u32, q: i32) -> T {
        let mut w = Vec::with_capacity(self.blocks.len());
        for (i, &g) in self.devices.iter().enumerate() {
            w.push(if mask & (1 << g) != 0 { self.device_power[i] / self.base } else { T::zero() });
        }
        w.push(-self.ess_power / self.base * T::of(f64::from(q)));
        objective(&self.blocks, &self.coupling, &w)
    }
}

/// Rounded slot dispatch with the solver report.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch<T> {
    /// Per-agent action indices (DSM local mask, PV bid, ESS action).
    pub actions: [usize; 3],
    pub dsm_mask: u32,
    pub q: i32,
    pub price: T,
    /// Agents cut off during the solve.
    pub isolated: [bool; 3],
    pub outcome: AdmmOutcome<T>,
}

/// Nearest ladder index to `price` among ladder prices not above `cap`
/// (the cheapest price when none qualifies).
pub fn nearest_bid<T: Scalar>(ladder: &[T], price: T, cap: T) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (k, &p) in ladder.iter().enumerate() {
        if p > cap {
            continue;
        }
        let d = (p - price).abs();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k).unwrap_or(0)
}

/// Solves the relaxation and rounds it (see [`Rounding`]; forced devices
/// stay on and the ESS direction stays within the SOC bounds), then bids the
/// ladder price nearest the dual price.
///
/// `isolate(k, agent)` is asked before iteration `k` for each agent still
/// connected; once it answers true the agent's blocks are frozen at their
/// best response to the last shared iterate.
#[allow(clippy::too_many_arguments)]
pub fn admm_dispatch<T: Scalar>(
    cfg: &GridConfig<T>,
    dsm: &DsmState,
    ess: &EssState<T>,
    problem: &SlotProblem<T>,
    ladder: &[T],
    p_grid: T,
    admm: &AdmmConfig,
    mut isolate: impl FnMut(usize, usize) -> bool,
) -> Dispatch<T> {
    let ess_block = problem.ess_block();
    let owner = |j: usize| if j == ess_block { AGENT_ESS } else { AGENT_DSM };
    let mut cut = [false; 3];
    // last price each agent heard before it was cut off
    let mut heard: [Option<T>; 3] = [None; 3];
    let outcome = admm_solve_with(&problem.blocks, &problem.coupling, admm, |k, st| {
        for agent in [AGENT_DSM, AGENT_PV, AGENT_ESS] {
            if !cut[agent] && isolate(k, agent) {
                cut[agent] = true;
                heard[agent] = Some(st.price() / problem.base);
                let total: T = st.w.iter().copied().sum();
                for j in 0..problem.blocks.len() {
                    if owner(j) == agent && !st.frozen[j] {
                        let rest = total - st.w[j];
                        let v = best_response(&problem.blocks[j], &problem.coupling, rest);
                        st.freeze(j, v);
                    }
                }
            }
        }
    });
    let st = &outcome.state;
    let forced = problem.forced_mask & dsm.controllable_mask(cfg);
    let x: Vec<T> = (0..problem.devices.len())
        .map(|i| st.w[i] * problem.base / problem.device_power[i])
        .collect();
    let q_relaxed = -st.w[ess_block] * problem.base / problem.ess_power;
    let half = T::of(0.5);
    let mut mask = forced;
    for (i, &g) in problem.devices.iter().enumerate() {
        if x[i] >= half {
            mask |= 1 << g;
        }
    }
    let mut q = if q_relaxed >= half {
        1
    } else if q_relaxed <= -half {
        -1
    } else {
        0
    };
    let q_ok = |q: i32| {
        let probe = match q {
            1 => EssAction::Discharge(0),
            -1 => EssAction::Charge,
            _ => EssAction::Idle,
        };
        cfg.ess_feasible(ess, probe)
    };
    if !q_ok(q) {
        q = 0;
    }
    if admm.rounding == Rounding::Neighborhood {
        let eps = T::of(1e-6);
        // zero reduced cost at the dual price: the relaxation does not care
        // where in the box this block sits
        let lam = st.price();
        let indifferent = |j: usize| {
            let b = &problem.blocks[j];
            let rc = b.a * st.w[j] + b.b + lam;
            rc.abs() <= T::of(1e-4) * (T::one() + b.b.abs())
        };
        let mut options: Vec<(usize, Vec<bool>)> = Vec::new();
        for (i, &g) in problem.devices.iter().enumerate() {
            let choices = if forced & (1 << g) != 0 {
                vec![true]
            } else if indifferent(i) {
                vec![false, true]
            } else if x[i] >= T::one() - eps {
                vec![true]
            } else if x[i] <= eps {
                vec![false]
            } else {
                vec![false, true]
            };
            options.push((g, choices));
        }
        let lo = q_relaxed.floor().to_f64_lossy() as i32;
        let qs: Vec<i32> = if indifferent(ess_block) {
            vec![-1, 0, 1]
        } else if (q_relaxed - q_relaxed.round()).abs() <= eps {
            vec![q_relaxed.round().to_f64_lossy() as i32]
        } else {
            vec![lo, lo + 1]
        };
        let mut best = (problem.discrete_cost(mask, q), mask, q);
        let combos: usize = options.iter().map(|(_, c)| c.len()).product();
        for k in 0..combos {
            let mut m = forced;
            let mut rest = k;
            for (g, choices) in &options {
                if choices[rest % choices.len()] {
                    m |= 1 << g;
                }
                rest /= choices.len();
            }
            for &qc in qs.iter().filter(|&&qc| q_ok(qc)) {
                let c = problem.discrete_cost(m, qc);
                if c < best.0 {
                    best = (c, m, qc);
                }
            }
        }
        mask = best.1;
        q = best.2;
    }
    let price = st.price() / problem.base;
    let bid_of = |agent: usize| nearest_bid(ladder, heard[agent].unwrap_or(price), p_grid);
    let ess_action = match q {
        1 => EssAction::Discharge(bid_of(AGENT_ESS)),
        -1 => EssAction::Charge,
        _ => EssAction::Idle,
    };
    Dispatch {
        actions: [dsm.compress_mask(mask, cfg), bid_of(AGENT_PV), ess_action.index()],
        isolated: cut,
        dsm_mask: mask,
        q,
        price,
        outcome,
    }
}
