//! Physical model of the three microgrid agents: deferrable DSM loads, PV
//! generation with forecast error, and a single MG-level storage unit.
//!
//! Hours are 1-based slot indices in `1..=horizon`. A device window
//! `[window_start, window_end)` lists the slots in which the device may run;
//! `window_end` may exceed the horizon when the window wraps past midnight,
//! in which case the part beyond the horizon belongs to the next day and is
//! ignored within the current episode.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tolerance used for SOC bound checks.
const SOC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSet<T> {
    pub id: usize,
    /// Average power draw while on, kW.
    pub avg_power: T,
    pub window_start: u32,
    pub window_end: u32,
    /// Hours of service owed per day.
    pub duration: u32,
}

impl<T: Scalar> DeviceSet<T> {
    pub fn new(id: usize, avg_power: T, window: (u32, u32), duration: u32) -> Result<Self> {
        let d = DeviceSet {
            id,
            avg_power,
            window_start: window.0,
            window_end: window.1,
            duration,
        };
        if !(avg_power > T::zero()) {
            return Err(Error::Config(format!("device {id}: avg_power must be positive")));
        }
        if duration < 1 || window.1 <= window.0 || duration > window.1 - window.0 {
            return Err(Error::Config(format!(
                "device {id}: duration {duration} does not fit window [{}, {})",
                window.0, window.1
            )));
        }
        Ok(d)
    }

    /// Exclusive end of the window clipped to the episode horizon.
    pub fn effective_end(&self, horizon: u32) -> u32 {
        self.window_end.min(horizon + 1)
    }

    pub fn in_window(&self, t: u32, horizon: u32) -> bool {
        t >= self.window_start && t < self.effective_end(horizon)
    }

    /// Upper bound on waiting time, `W_max = t_end - t_start`.
    pub fn max_wait(&self) -> u32 {
        self.window_end - self.window_start
    }
}

/// The five deferrable device sets used throughout the experiments.
pub fn default_devices<T: Scalar>() -> Vec<DeviceSet<T>> {
    let rows: [(f64, (u32, u32), u32); 5] = [
        (6.0, (1, 8), 2),
        (15.0, (7, 13), 1),
        (19.0, (10, 17), 1),
        (10.0, (15, 22), 3),
        (7.0, (20, 28), 1),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(p, w, d))| DeviceSet::new(i + 1, T::of(p), w, d).expect("valid default device"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct GridConfig<T> {
    pub horizon: u32,
    pub devices: Vec<DeviceSet<T>>,
    pub pv_capacity: T,
    /// Forecast error standard deviation as a fraction of the forecast.
    pub pv_noise_frac: T,
    pub ess_power: T,
    pub ess_capacity: T,
    pub soc_init: T,
    pub soc_min: T,
    pub soc_max: T,
}

impl<T: Scalar> Default for GridConfig<T> {
    fn default() -> Self {
        GridConfig {
            horizon: 24,
            devices: default_devices(),
            pv_capacity: T::of(30.0),
            pv_noise_frac: T::of(0.1),
            ess_power: T::of(20.0),
            ess_capacity: T::of(120.0),
            soc_init: T::of(0.4),
            soc_min: T::zero(),
            soc_max: T::one(),
        }
    }
}

impl<T: Scalar> GridConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.devices.len() > 31 {
            return Err(Error::Config("at most 31 device sets are supported".into()));
        }
        for d in &self.devices {
            DeviceSet::new(d.id, d.avg_power, (d.window_start, d.window_end), d.duration)?;
            let usable = d.effective_end(self.horizon).saturating_sub(d.window_start);
            if d.duration > usable {
                return Err(Error::Config(format!(
                    "device {}: duration exceeds the in-horizon part of its window",
                    d.id
                )));
            }
        }
        if !(self.soc_min <= self.soc_init && self.soc_init <= self.soc_max) {
            return Err(Error::Config("soc_init outside [soc_min, soc_max]".into()));
        }
        if !(self.ess_power > T::zero() && self.ess_capacity > T::zero()) {
            return Err(Error::Config("ESS power and capacity must be positive".into()));
        }
        if self.pv_capacity < T::zero() || self.pv_noise_frac < T::zero() {
            return Err(Error::Config("PV capacity and noise must be non-negative".into()));
        }
        Ok(())
    }

    /// SOC change of a single full-power hour, `P_char / C_ess`.
    pub fn soc_step(&self) -> T {
        self.ess_power / self.ess_capacity
    }

    /// Largest number of device windows that overlap in any slot. The DSM
    /// action alphabet has `2^max_concurrent_devices` local masks.
    pub fn max_concurrent_devices(&self) -> usize {
        (1..=self.horizon)
            .map(|t| self.devices.iter().filter(|d| d.in_window(t, self.horizon)).count())
            .max()
            .unwrap_or(0)
    }

    pub fn dsm_alphabet(&self) -> usize {
        1 << self.max_concurrent_devices()
    }

    pub fn initial_dsm(&self) -> DsmState {
        let remaining: Vec<u32> = self.devices.iter().map(|d| d.duration).collect();
        DsmState::at(1, remaining, self)
    }

    pub fn initial_ess(&self) -> EssState<T> {
        EssState { t: 1, soc: self.soc_init }
    }

    /// Deterministic PV forecast: a half-sine between 06:00 and 18:00 that
    /// peaks at the configured capacity at noon.
    pub fn pv_forecast(&self, t: u32) -> T {
        if !(7..18).contains(&t) {
            return T::zero();
        }
        let angle = T::of(std::f64::consts::PI) * T::of(f64::from(t) - 6.0) / T::of(12.0);
        self.pv_capacity * angle.sin().max(T::zero())
    }

    pub fn pv_error_sd(&self, forecast: T) -> T {
        self.pv_noise_frac * forecast
    }

    /// Forecast plus Gaussian error with standard deviation
    /// `pv_noise_frac * forecast`, clamped to `[0, capacity]`.
    pub fn pv_realize<R: Rng + ?Sized>(&self, t: u32, rng: &mut R) -> PvState<T> {
        let forecast = self.pv_forecast(t);
        let sd = self.pv_error_sd(forecast).to_f64_lossy();
        let power = if sd > 0.0 {
            let noise = Normal::new(0.0, sd).expect("finite sd").sample(rng);
            (forecast + T::of(noise)).max(T::zero()).min(self.pv_capacity)
        } else {
            forecast.max(T::zero()).min(self.pv_capacity)
        };
        PvState { t, power }
    }

    /// `P_dsm = sum_g P_g G_{t,g}` for a mask over all device sets.
    pub fn dsm_power(&self, state: &DsmState, mask: u32) -> Result<T> {
        let allowed = state.controllable_mask(self);
        if mask & !allowed != 0 {
            let bad = mask & !allowed;
            return Err(Error::ConstraintViolation(format!(
                "devices {:?} are outside their window or already serviced at t={}",
                bits(bad).map(|g| self.devices.get(g).map_or(g, |d| d.id)).collect::<Vec<_>>(),
                state.t
            )));
        }
        Ok(bits(mask).map(|g| self.devices[g].avg_power).sum())
    }

    /// Moves the DSM state one hour forward. Bits for devices that cannot run
    /// are ignored and forced devices are switched on regardless of `mask`.
    pub fn advance_dsm(&self, state: &DsmState, mask: u32) -> DsmState {
        let on = (mask & state.controllable_mask(self)) | state.forced_mask(self);
        let mut remaining = state.remaining.clone();
        for g in bits(on) {
            remaining[g] -= 1;
        }
        DsmState::at(state.t + 1, remaining, self)
    }

    /// Applies one ESS action and returns the next state with the signed
    /// power (`+` discharging into the market, `-` charging).
    pub fn ess_step(&self, state: &EssState<T>, action: EssAction) -> Result<(EssState<T>, T)> {
        if !self.ess_feasible(state, action) {
            return Err(Error::ConstraintViolation(format!(
                "ESS action {action:?} breaches the SOC bounds at soc={}",
                state.soc
            )));
        }
        let q = T::of(f64::from(action.direction()));
        let mut soc = state.soc - self.soc_step() * q;
        // land exactly on a bound that is reached up to rounding
        let tol = T::of(SOC_TOL);
        if (soc - self.soc_min).abs() <= tol {
            soc = self.soc_min;
        } else if (soc - self.soc_max).abs() <= tol {
            soc = self.soc_max;
        }
        Ok((EssState { t: state.t + 1, soc }, self.ess_power * q))
    }

    pub fn ess_feasible(&self, state: &EssState<T>, action: EssAction) -> bool {
        let tol = T::of(SOC_TOL);
        match action.direction() {
            -1 => state.soc + self.soc_step() <= self.soc_max + tol,
            1 => state.soc - self.soc_step() >= self.soc_min - tol,
            _ => true,
        }
    }

    /// Per-agent feasible action indices (DSM local masks, PV bids, ESS
    /// actions). The feasible joint set is their Cartesian product.
    pub fn feasible_actions(&self, dsm: &DsmState, ess: &EssState<T>, ladder_len: usize) -> ActionSets {
        let controllable = dsm.controllable(self);
        let forced_local: usize = controllable
            .iter()
            .enumerate()
            .filter(|(_, &g)| dsm.is_forced(g, self))
            .map(|(i, _)| 1usize << i)
            .sum();
        let dsm_actions = (0..1usize << controllable.len())
            .filter(|m| m & forced_local == forced_local)
            .collect();
        let ess_actions = (0..EssAction::count(ladder_len))
            .filter(|&i| self.ess_feasible(ess, EssAction::from_index(i)))
            .collect();
        ActionSets {
            per_agent: vec![dsm_actions, (0..ladder_len).collect(), ess_actions],
        }
    }

    /// All feasible joint actions, DSM masks expanded to full device masks.
    pub fn feasible_joint_actions(&self, dsm: &DsmState, ess: &EssState<T>, ladder_len: usize) -> Vec<JointAction> {
        let sets = self.feasible_actions(dsm, ess, ladder_len);
        let mut out = Vec::with_capacity(sets.joint_count());
        for &m in &sets.per_agent[AGENT_DSM] {
            for &b in &sets.per_agent[AGENT_PV] {
                for &e in &sets.per_agent[AGENT_ESS] {
                    out.push(JointAction {
                        dsm_mask: dsm.expand_local(m, self),
                        pv_bid: b,
                        ess_action: EssAction::from_index(e),
                    });
                }
            }
        }
        out
    }
}

pub const AGENT_DSM: usize = 0;
pub const AGENT_PV: usize = 1;
pub const AGENT_ESS: usize = 2;
pub const AGENT_NAMES: [&str; 3] = ["dsm", "pv", "ess"];

fn bits(mask: u32) -> impl Iterator<Item = usize> {
    (0..32usize).filter(move |g| mask & (1 << g) != 0)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DsmState {
    pub t: u32,
    /// Hours waited per device set, `W_{t,g}`.
    pub waiting: Vec<u32>,
    /// Service hours still owed per device set.
    pub remaining: Vec<u32>,
}

impl DsmState {
    pub fn at<T: Scalar>(t: u32, remaining: Vec<u32>, cfg: &GridConfig<T>) -> Self {
        let waiting = cfg
            .devices
            .iter()
            .zip(&remaining)
            .map(|(d, &r)| {
                if r > 0 && d.in_window(t, cfg.horizon) {
                    t - d.window_start
                } else {
                    0
                }
            })
            .collect();
        DsmState { t, waiting, remaining }
    }

    /// Device indices that may be switched on now, in id order.
    pub fn controllable<T: Scalar>(&self, cfg: &GridConfig<T>) -> Vec<usize> {
        cfg.devices
            .iter()
            .enumerate()
            .filter(|(g, d)| self.remaining[*g] > 0 && d.in_window(self.t, cfg.horizon))
            .map(|(g, _)| g)
            .collect()
    }

    pub fn controllable_mask<T: Scalar>(&self, cfg: &GridConfig<T>) -> u32 {
        self.controllable(cfg).iter().fold(0, |m, &g| m | 1 << g)
    }

    /// A device is forced on once its remaining service equals the hours left
    /// in its window.
    pub fn is_forced<T: Scalar>(&self, g: usize, cfg: &GridConfig<T>) -> bool {
        let d = &cfg.devices[g];
        self.remaining[g] > 0
            && d.in_window(self.t, cfg.horizon)
            && self.remaining[g] >= d.effective_end(cfg.horizon) - self.t
    }

    pub fn forced_mask<T: Scalar>(&self, cfg: &GridConfig<T>) -> u32 {
        (0..cfg.devices.len())
            .filter(|&g| self.is_forced(g, cfg))
            .fold(0, |m, g| m | 1 << g)
    }

    /// Maps a local mask over the controllable devices to a full mask.
    pub fn expand_local<T: Scalar>(&self, local: usize, cfg: &GridConfig<T>) -> u32 {
        self.controllable(cfg)
            .iter()
            .enumerate()
            .filter(|(i, _)| local & (1 << i) != 0)
            .fold(0, |m, (_, &g)| m | 1 << g)
    }

    /// Inverse of [`DsmState::expand_local`] (bits of non-controllable
    /// devices are dropped).
    pub fn compress_mask<T: Scalar>(&self, mask: u32, cfg: &GridConfig<T>) -> usize {
        self.controllable(cfg)
            .iter()
            .enumerate()
            .filter(|(_, &g)| mask & (1 << g) != 0)
            .fold(0, |m, (i, _)| m | 1 << i)
    }

    pub fn all_serviced(&self) -> bool {
        self.remaining.iter().all(|&r| r == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvState<T> {
    pub t: u32,
    pub power: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssState<T> {
    pub t: u32,
    pub soc: T,
}

/// ESS action alphabet: charge, idle, or discharge offered at a ladder price.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EssAction {
    Charge,
    Idle,
    Discharge(usize),
}

impl EssAction {
    pub fn count(ladder_len: usize) -> usize {
        2 + ladder_len
    }

    pub fn index(self) -> usize {
        match self {
            EssAction::Charge => 0,
            EssAction::Idle => 1,
            EssAction::Discharge(k) => 2 + k,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => EssAction::Charge,
            1 => EssAction::Idle,
            k => EssAction::Discharge(k - 2),
        }
    }

    /// `q_t`: +1 discharge, -1 charge, 0 idle.
    pub fn direction(self) -> i32 {
        match self {
            EssAction::Charge => -1,
            EssAction::Idle => 0,
            EssAction::Discharge(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JointAction {
    pub dsm_mask: u32,
    pub pv_bid: usize,
    pub ess_action: EssAction,
}

/// Per-agent lists of admissible action indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSets {
    pub per_agent: Vec<Vec<usize>>,
}

impl ActionSets {
    pub fn joint_count(&self) -> usize {
        self.per_agent.iter().map(Vec::len).product()
    }

    pub fn pinned(&self, agent: usize, action: usize) -> ActionSets {
        let mut s = self.clone();
        s.per_agent[agent] = vec![action];
        s
    }
}

/// Row-major encoding of per-agent action indices into one joint index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointSpace {
    pub dims: Vec<usize>,
}

impl JointSpace {
    pub fn new(dims: Vec<usize>) -> Self {
        JointSpace { dims }
    }

    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn encode(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.dims.len());
        actions.iter().zip(&self.dims).fold(0, |acc, (&a, &d)| {
            debug_assert!(a < d);
            acc * d + a
        })
    }

    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for (slot, &d) in out.iter_mut().zip(&self.dims).rev() {
            *slot = index % d;
            index /= d;
        }
        out
    }

    /// Joint indices of every profile in a product of per-agent sets.
    pub fn enumerate(&self, sets: &ActionSets) -> Vec<usize> {
        let mut out = vec![0usize];
        for (agent, acts) in sets.per_agent.iter().enumerate() {
            let d = self.dims[agent];
            out = out
                .iter()
                .flat_map(|&base| acts.iter().map(move |&a| base * d + a))
                .collect();
        }
        out
    }
}
