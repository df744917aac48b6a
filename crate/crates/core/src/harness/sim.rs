//! Per-seed simulation: the day loop of each coordination scheme, training
//! and checkpointing.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{admm_dispatch, SlotProblem};
use crate::belief::{sample_observation, BeliefStore, ObservationModel};
use crate::checkpoint::{AgentWeights, Checkpoint, RngState};
use crate::comm::{ExchangeRecord, Hub, MessageKind, Slot};
use crate::equilibrium::{
    belief_game_multi, greedy_action, nash_iterate_with, sample_joint_action, sample_joint_action_at, solve_ce,
    solve_full_ce, CeGame, CeMethod, CeOutcome,
};
use crate::error::{Error, Result};
use crate::grid::{ActionSets, AGENT_NAMES};
use crate::learner::TargetKind;
use crate::lstm::LstmShape;

use super::agent::Agent;
use super::config::{Algorithm, PaHandling, RunConfig};
use super::world::{World, WorldState};

/// Version of every CSV layout written by the harness.
pub const SCHEMA_VERSION: u32 = 1;

pub const STREAM_WORLD: u64 = 0;
pub const STREAM_POLICY: u64 = 1;
pub const STREAM_OBSERVE: u64 = 2;
pub const STREAM_COMM: u64 = 3;
pub const STREAM_INIT: u64 = 4;
pub const STREAM_REPLAY: u64 = 5;

/// Independent random stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub episode: usize,
    pub reward_dsm: f64,
    pub reward_pv: f64,
    pub reward_ess: f64,
    pub reward_total: f64,
    pub dsm_cost: f64,
    pub mean_price: f64,
    pub grid_import_kwh: f64,
    pub grid_export_kwh: f64,
    pub messages: usize,
    pub failed_transmissions: usize,
    pub isolated_slots: usize,
    pub belief_accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub epsilon: Option<f64>,
    pub coordination_rounds: usize,
    pub nonconverged: usize,
    pub belief_ce_solves: usize,
    pub ce_fallbacks: usize,
    pub max_balance_residual: f64,
    pub max_cash_residual: f64,
    pub diverged: bool,
}

/// One row of `slots.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub episode: usize,
    pub slot: u32,
    pub dsm_action: usize,
    pub pv_action: usize,
    pub ess_action: usize,
    pub explored: bool,
    /// Agents cut off this slot, `+`-separated.
    pub isolated: String,
    pub price: f64,
    pub grid_import_kw: f64,
    pub grid_export_kw: f64,
    pub dsm_kw: f64,
    pub pv_kw: f64,
    pub ess_kw: f64,
    pub soc: f64,
    pub reward_dsm: f64,
    pub reward_pv: f64,
    pub reward_ess: f64,
    pub balance_residual: f64,
    pub cash_residual: f64,
}

/// One ADMM iteration, a row of `admm_trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub schema_version: u32,
    pub seed: u64,
    pub episode: usize,
    pub slot: u32,
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EpisodeOptions {
    /// No exploration.
    pub greedy: bool,
    /// No experience storage and no training.
    pub frozen: bool,
    pub record_slots: bool,
    pub record_trace: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub row: MetricsRow,
    pub slots: Vec<SlotRecord>,
    pub traces: Vec<TraceRow>,
    pub exchanges: Vec<ExchangeRecord>,
}

/// How one slot's joint action came about.
#[derive(Debug, Clone, Default)]
struct Decision {
    actions: [usize; 3],
    isolated: [bool; 3],
    explored: bool,
    rounds: usize,
    nonconverged: bool,
    belief_ce_solves: usize,
    ce_fallbacks: usize,
    trace: Vec<(f64, f64)>,
    converged: bool,
}

#[derive(Debug, Clone)]
struct Streams {
    world: ChaCha8Rng,
    policy: ChaCha8Rng,
    observe: ChaCha8Rng,
    init: ChaCha8Rng,
    replay: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub cfg: RunConfig,
    pub world: World,
    pub seed: u64,
    pub hub: Hub<ChaCha8Rng>,
    pub agents: Vec<Agent>,
    pub beliefs: BeliefStore<f64>,
    models: Vec<ObservationModel<f64>>,
    rng: Streams,
    /// Index of the next episode.
    pub episode: usize,
    pub train_events: usize,
}

impl Simulation {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let world = World::new(cfg)?;
        let mut rng = Streams {
            world: stream_rng(seed, STREAM_WORLD),
            policy: stream_rng(seed, STREAM_POLICY),
            observe: stream_rng(seed, STREAM_OBSERVE),
            init: stream_rng(seed, STREAM_INIT),
            replay: stream_rng(seed, STREAM_REPLAY),
        };
        let agents = if cfg.run.algorithm.learns() {
            (0..3)
                .map(|k| Agent::new(shape_for(cfg, &world, k), &cfg.learner, &mut rng.init))
                .collect()
        } else {
            Vec::new()
        };
        let models = world
            .space
            .dims
            .iter()
            .map(|&n| ObservationModel::with_fidelity(n, cfg.belief.fidelity))
            .collect::<Result<Vec<_>>>()?;
        let hub = Hub::new(cfg.comm.model()?, 3, stream_rng(seed, STREAM_COMM), cfg.run.exchange_log);
        Ok(Simulation {
            beliefs: BeliefStore::new(cfg.belief.key, world.space.dims.clone()),
            cfg: cfg.clone(),
            world,
            seed,
            hub,
            agents,
            models,
            rng,
            episode: 0,
            train_events: 0,
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.cfg.run.algorithm
    }

    /// Runs one day and, on training episodes, one training event.
    pub fn run_episode(&mut self, opts: EpisodeOptions) -> Result<EpisodeOutput> {
        let e = self.episode;
        let algo = self.algorithm();
        let h = self.cfg.learner;
        let epsilon = algo.learns().then(|| if opts.greedy { 0.0 } else { h.epsilon(e, self.cfg.run.episodes) });
        let (sent0, failed0) = (self.hub.sent(), self.hub.failed());
        self.beliefs.reset_accuracy();
        for a in &mut self.agents {
            a.begin_day();
        }

        let mut row = MetricsRow {
            schema_version: SCHEMA_VERSION,
            algorithm: algo,
            seed: self.seed,
            episode: e,
            reward_dsm: 0.0,
            reward_pv: 0.0,
            reward_ess: 0.0,
            reward_total: 0.0,
            dsm_cost: 0.0,
            mean_price: 0.0,
            grid_import_kwh: 0.0,
            grid_export_kwh: 0.0,
            messages: 0,
            failed_transmissions: 0,
            isolated_slots: 0,
            belief_accuracy: None,
            loss: None,
            epsilon,
            coordination_rounds: 0,
            nonconverged: 0,
            belief_ce_solves: 0,
            ce_fallbacks: 0,
            max_balance_residual: 0.0,
            max_cash_residual: 0.0,
            diverged: false,
        };
        let mut slots = Vec::new();
        let mut traces = Vec::new();
        let mut price = self.world.p_grid;
        let mut n_slots = 0usize;
        let mut s = self.world.reset(&mut self.rng.world);
        loop {
            let t = s.t();
            let sets = self.world.feasible(&s);
            let d = match algo {
                Algorithm::BaDrl => self.decide_badrl(&s, &sets, epsilon.unwrap_or(0.0))?,
                Algorithm::NashDqn => self.decide_nash(&s, &sets, epsilon.unwrap_or(0.0))?,
                Algorithm::Admm => self.decide_admm(&s, price),
            };
            let out = self.world.step(&s, d.actions, &mut self.rng.world)?;
            if algo == Algorithm::BaDrl {
                self.observe_peers(t, &d.actions)?;
            }
            if algo.learns() && !opts.frozen {
                let joint = self.world.space.encode(&d.actions);
                let next_feasible = if out.done { Vec::new() } else { self.world.feasible_joint(&out.next) };
                let r = out.rewards.as_array();
                for k in 0..3 {
                    let x = self.world.encode(k, &out.next);
                    self.agents[k].remember(joint, r[k], x, out.done, next_feasible.clone());
                }
            }

            row.reward_dsm += out.rewards.dsm;
            row.reward_pv += out.rewards.pv;
            row.reward_ess += out.rewards.ess;
            row.mean_price += out.result.clearing_price;
            row.grid_import_kwh += out.result.grid_import;
            row.grid_export_kwh += out.result.total_export();
            row.isolated_slots += d.isolated.iter().filter(|&&c| c).count();
            row.coordination_rounds += d.rounds;
            row.nonconverged += usize::from(d.nonconverged);
            row.belief_ce_solves += d.belief_ce_solves;
            row.ce_fallbacks += d.ce_fallbacks;
            row.max_balance_residual = row.max_balance_residual.max(out.balance_residual.abs());
            row.max_cash_residual = row.max_cash_residual.max(out.cash_residual.abs());
            if opts.record_trace {
                let last = d.trace.len();
                traces.extend(d.trace.iter().enumerate().map(|(i, &(r, sd))| TraceRow {
                    schema_version: SCHEMA_VERSION,
                    seed: self.seed,
                    episode: e,
                    slot: t,
                    iteration: i + 1,
                    primal_residual: r,
                    dual_residual: sd,
                    converged: d.converged && i + 1 == last,
                }));
            }
            if opts.record_slots {
                slots.push(SlotRecord {
                    schema_version: SCHEMA_VERSION,
                    algorithm: algo,
                    seed: self.seed,
                    episode: e,
                    slot: t,
                    dsm_action: d.actions[0],
                    pv_action: d.actions[1],
                    ess_action: d.actions[2],
                    explored: d.explored,
                    isolated: (0..3).filter(|&k| d.isolated[k]).map(|k| AGENT_NAMES[k]).collect::<Vec<_>>().join("+"),
                    price: out.result.clearing_price,
                    grid_import_kw: out.result.grid_import,
                    grid_export_kw: out.result.total_export(),
                    dsm_kw: out.dsm_kw,
                    pv_kw: s.pv.power,
                    ess_kw: out.ess_kw,
                    soc: s.ess.soc,
                    reward_dsm: out.rewards.dsm,
                    reward_pv: out.rewards.pv,
                    reward_ess: out.rewards.ess,
                    balance_residual: out.balance_residual,
                    cash_residual: out.cash_residual,
                });
            }
            price = out.result.clearing_price;
            n_slots += 1;
            if out.done {
                break;
            }
            s = out.next;
        }
        row.reward_total = row.reward_dsm + row.reward_pv + row.reward_ess;
        row.dsm_cost = -row.reward_dsm;
        row.mean_price /= n_slots as f64;
        row.belief_accuracy = if algo == Algorithm::BaDrl { self.beliefs.accuracy() } else { None };

        if algo.learns() && !opts.frozen && (e + 1) % h.train_every == 0 {
            let kind = if algo == Algorithm::BaDrl { TargetKind::Ddqn } else { TargetKind::Dqn };
            let lr = h.lr_at(e);
            let mut losses = Vec::new();
            for a in &mut self.agents {
                let rep = a.train(&h, lr, kind, &mut self.rng.replay)?;
                row.diverged |= rep.diverged;
                losses.extend(rep.loss);
            }
            self.train_events += 1;
            if self.train_events % h.target_sync_every == 0 {
                for a in &mut self.agents {
                    a.sync()?;
                }
            }
            if !losses.is_empty() {
                row.loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
            }
            debug!("seed {} episode {e}: training event {} loss {:?}", self.seed, self.train_events, row.loss);
        }
        row.messages = self.hub.sent() - sent0;
        row.failed_transmissions = self.hub.failed() - failed0;
        self.episode += 1;
        if self.episode % 500 == 0 {
            info!("{algo} seed {}: episode {} reward {:.3}", self.seed, self.episode, row.reward_total);
        }
        Ok(EpisodeOutput { row, slots, traces, exchanges: self.hub.drain_records() })
    }

    fn upload_q(&mut self, t: u32) -> [bool; 3] {
        let e = self.episode;
        let mut cut = [false; 3];
        for (k, c) in cut.iter_mut().enumerate() {
            *c = !self.hub.send(Slot { episode: e, slot: t, round: 0 }, k, MessageKind::QValues);
        }
        cut
    }

    fn q_values(&mut self, s: &WorldState) -> Result<Vec<Vec<f64>>> {
        (0..3).map(|k| self.agents[k].observe(self.world.encode(k, s))).collect()
    }

    /// Single exploration draw for the whole slot; exploring agents pick
    /// uniformly among their admissible actions.
    fn explore(&mut self, sets: &ActionSets, epsilon: f64) -> Option<[usize; 3]> {
        let u: f64 = self.rng.policy.gen();
        (u < epsilon).then(|| {
            let mut a = [0; 3];
            for (k, x) in a.iter_mut().enumerate() {
                let opts = &sets.per_agent[k];
                *x = opts[self.rng.policy.gen_range(0..opts.len())];
            }
            a
        })
    }

    fn decide_badrl(&mut self, s: &WorldState, sets: &ActionSets, epsilon: f64) -> Result<Decision> {
        let t = s.t();
        let q = self.q_values(s)?;
        let cut = self.upload_q(t);
        let mut d = Decision { isolated: cut, rounds: 1, ..Decision::default() };
        if let Some(a) = self.explore(sets, epsilon) {
            d.actions = a;
            d.explored = true;
            return Ok(d);
        }
        let space = &self.world.space;
        let slices: Vec<&[f64]> = q.iter().map(Vec::as_slice).collect();
        let normal: Vec<usize> = (0..3).filter(|&k| !cut[k]).collect();
        if normal.len() == 3 {
            let out = solve_full_ce(space, sets, &slices)?;
            d.ce_fallbacks += usize::from(out.method == CeMethod::Greedy);
            let p = sample_joint_action(&out.dist, &mut self.rng.policy);
            d.actions.copy_from_slice(&p);
            return Ok(d);
        }
        // cut-off agents play greedily on their own Q
        for k in (0..3).filter(|&k| cut[k]) {
            d.actions[k] = greedy_action(space, sets, &q[k], k);
        }
        if normal.is_empty() {
            return Ok(d);
        }
        // the connected agents share one correlation signal but each solves
        // with its own beliefs about the cut-off agents
        let u: f64 = self.rng.policy.gen();
        let null = self.world.null_actions(sets);
        for &n in &normal {
            let out: CeOutcome<f64> = match self.cfg.run.pa_handling {
                PaHandling::BeliefCe => {
                    let priors: Vec<(usize, Vec<f64>)> =
                        (0..3).filter(|&k| cut[k]).map(|k| (k, self.beliefs.prior(n, k, t))).collect();
                    let refs: Vec<(usize, &[f64])> = priors.iter().map(|(k, p)| (*k, p.as_slice())).collect();
                    d.belief_ce_solves += 1;
                    solve_ce(&belief_game_multi(space, sets, &slices, &refs)?)
                }
                PaHandling::Neglect => {
                    let mut pinned = sets.clone();
                    for k in (0..3).filter(|&k| cut[k]) {
                        pinned = pinned.pinned(k, null[k]);
                    }
                    solve_ce(&CeGame::from_slices(space, &pinned, &slices)?)
                }
            };
            d.ce_fallbacks += usize::from(out.method == CeMethod::Greedy);
            let profile = sample_joint_action_at(&out.dist, u);
            let pos = out.dist.agents.iter().position(|&a| a == n).expect("agent in game");
            d.actions[n] = profile[pos];
        }
        Ok(d)
    }

    fn decide_nash(&mut self, s: &WorldState, sets: &ActionSets, epsilon: f64) -> Result<Decision> {
        let t = s.t();
        let e = self.episode;
        let q = self.q_values(s)?;
        let cut = self.upload_q(t);
        let mut d = Decision { isolated: cut, rounds: 1, ..Decision::default() };
        if let Some(a) = self.explore(sets, epsilon) {
            d.actions = a;
            d.explored = true;
            return Ok(d);
        }
        let slices: Vec<&[f64]> = q.iter().map(Vec::as_slice).collect();
        let fallback = self.world.null_actions(sets);
        let hub = &mut self.hub;
        let out = nash_iterate_with(&self.world.space, sets, &slices, self.cfg.nash.max_rounds, &fallback, |round, k| {
            if round == 0 {
                !cut[k]
            } else {
                hub.send(Slot { episode: e, slot: t, round }, k, MessageKind::EquilibriumInfo)
            }
        });
        d.actions.copy_from_slice(&out.profile);
        d.rounds += out.rounds;
        d.nonconverged = !out.converged;
        Ok(d)
    }

    fn decide_admm(&mut self, s: &WorldState, last_price: f64) -> Decision {
        let t = s.t();
        let e = self.episode;
        let w = &self.world;
        let problem = SlotProblem::build(
            &w.grid,
            &s.dsm,
            &s.ess,
            s.pv.power,
            w.p_grid,
            w.feed_in(),
            last_price,
            self.cfg.admm.ridge,
        );
        let hub = &mut self.hub;
        let out = admm_dispatch(&w.grid, &s.dsm, &s.ess, &problem, &w.ladder, w.p_grid, &self.cfg.admm, |iter, agent| {
            !hub.send(Slot { episode: e, slot: t, round: iter }, agent, MessageKind::DualVariables)
        });
        let tr = &out.outcome.trace;
        Decision {
            actions: out.actions,
            isolated: out.isolated,
            explored: false,
            rounds: out.outcome.iterations,
            nonconverged: !out.outcome.converged,
            belief_ce_solves: 0,
            ce_fallbacks: 0,
            trace: tr.primal.iter().copied().zip(tr.dual.iter().copied()).collect(),
            converged: out.outcome.converged,
        }
    }

    /// Every agent observes every peer's action through its noisy channel,
    /// whether or not messages got through.
    fn observe_peers(&mut self, t: u32, actions: &[usize; 3]) -> Result<()> {
        for i in 0..3 {
            for j in (0..3).filter(|&j| j != i) {
                let obs = sample_observation(&self.models[j], actions[j], &mut self.rng.observe);
                self.beliefs.observe(i, j, t, obs, actions[j], &self.models[j])?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<f64> {
        Checkpoint {
            episode: self.episode as u64,
            train_events: self.train_events as u64,
            hyper: self.cfg.learner,
            agents: self
                .agents
                .iter()
                .map(|a| AgentWeights { main: a.main.clone(), target: a.target.clone() })
                .collect(),
            rngs: [&self.rng.world, &self.rng.policy, &self.rng.observe, self.hub.rng(), &self.rng.init, &self.rng.replay]
                .into_iter()
                .map(RngState::capture)
                .collect(),
        }
    }

    /// Rebuilds a simulation from a checkpoint. Replay pools and beliefs are
    /// not stored and start empty.
    pub fn from_checkpoint(cfg: &RunConfig, seed: u64, ck: &Checkpoint<f64>) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.learner = ck.hyper;
        let mut sim = Simulation::new(&cfg, seed)?;
        if ck.agents.len() != sim.agents.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} agents, {} needs {}",
                ck.agents.len(),
                cfg.run.algorithm,
                sim.agents.len()
            )));
        }
        if ck.rngs.len() != 6 {
            return Err(Error::Checkpoint(format!("expected 6 random streams, found {}", ck.rngs.len())));
        }
        for (a, w) in sim.agents.iter_mut().zip(&ck.agents) {
            if a.main.shape != w.main.shape || a.target.shape != w.target.shape {
                return Err(Error::Checkpoint("network shape differs from the configuration".into()));
            }
            *a = Agent::from_networks(w.main.clone(), w.target.clone(), cfg.learner.pool);
        }
        let r: Vec<ChaCha8Rng> = ck.rngs.iter().map(RngState::restore).collect();
        sim.rng = Streams {
            world: r[0].clone(),
            policy: r[1].clone(),
            observe: r[2].clone(),
            init: r[4].clone(),
            replay: r[5].clone(),
        };
        *sim.hub.rng_mut() = r[3].clone();
        sim.episode = ck.episode as usize;
        sim.train_events = ck.train_events as usize;
        Ok(sim)
    }
}

/// Network shape of `agent` under `cfg`.
pub fn shape_for(cfg: &RunConfig, world: &World, agent: usize) -> LstmShape {
    LstmShape {
        input: world.input_len(agent),
        embed: cfg.network.embed,
        cells: cfg.network.cells,
        layers: cfg.network.layers,
        outputs: world.space.size(),
    }
}
