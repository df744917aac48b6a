//! Randomized checks shared by the module tests and the acceptance run.
//! Each returns its worst observed gap (or a failure description) so the
//! caller decides what counts as passing.

use mgrid::admm::{admm_dispatch, admm_solve, objective, AdmmConfig, Block, Coupling, SlotProblem};
use mgrid::belief::{posterior, sample_observation, BeliefKey, BeliefStore, DirichletBelief, ObservationModel};
use mgrid::equilibrium::{solve_belief_ce, solve_ce, solve_full_ce, CeGame};
use mgrid::grid::{ActionSets, DeviceSet, EssAction, GridConfig, JointSpace};
use mgrid::learner::{sync_target, train_step, Experience, ReplayBuffer, TabularQ, TargetKind};
use mgrid::lstm::{LstmNetwork, LstmShape};
use mgrid::market::{clear_market, DemandRequest, SupplyOffer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{market_oracle, projected_gradient, q, Game, Q};

// ---- market

pub fn random_market(rng: &mut ChaCha8Rng) -> (Vec<SupplyOffer<Q>>, Vec<DemandRequest<Q>>) {
    let n_offers = rng.gen_range(0..=4);
    let n_demands = rng.gen_range(0..=3);
    let offers = (0..n_offers)
        .map(|i| SupplyOffer {
            agent: 10 + i,
            capacity: q(rng.gen_range(0..=40), rng.gen_range(1..=4)),
            // a coarse grid of bids so that ties are frequent
            bid: q(rng.gen_range(1..=5) * 4 + 1, 100),
        })
        .collect();
    let demands = (0..n_demands)
        .map(|i| DemandRequest { agent: i, demand: q(rng.gen_range(0..=50), rng.gen_range(1..=3)) })
        .collect();
    (offers, demands)
}

/// Clears `n` exact-rational instances and compares every output with the
/// oracle. Returns the first mismatch.
pub fn market_mismatch(n: usize, seed: u64) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_grid = q(16, 100);
    let zero = q(0, 1);
    for case in 0..n {
        let (offers, demands) = random_market(&mut rng);
        let r = clear_market(&offers, &demands, p_grid, q(2, 5));
        let total: Q = demands.iter().map(|d| d.demand).sum();
        let o = market_oracle(&offers.iter().map(|o| (o.agent, o.capacity, o.bid)).collect::<Vec<_>>(), total, p_grid);
        let mut ok = r.clearing_price == o.price && r.grid_import == o.import && r.rejected == o.rejected && r.grid_export == o.export;
        for off in &offers {
            let a = off.agent;
            ok &= r.dispatched(a) == o.dispatch.get(&a).copied().unwrap_or(zero);
            ok &= r.exported(a) == o.export.get(&a).copied().unwrap_or(zero);
        }
        if !ok {
            return Some(format!("case {case}: {offers:?} {demands:?}"));
        }
    }
    None
}

// ---- belief

/// Bayes' rule written out term by term.
pub fn direct_posterior(counts: &[f64], rows: &[Vec<f64>], obs: usize) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    let mut num = Vec::new();
    let mut z = 0.0;
    for a in 0..counts.len() {
        let v = rows[a][obs] * (counts[a] / total);
        z += v;
        num.push(v);
    }
    num.iter().map(|v| v / z).collect()
}

pub fn random_rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn posterior_gap(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.gen_range(2..=8);
        let rows = random_rows(k, &mut rng);
        let counts: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..20.0)).collect();
        let obs = rng.gen_range(0..k);
        let model = ObservationModel::new(rows.clone()).unwrap();
        let b = DirichletBelief::from_counts(counts.clone()).unwrap();
        let got = posterior(&b, &model, obs).unwrap();
        for (g, w) in got.iter().zip(direct_posterior(&counts, &rows, obs)) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}

/// Running argmax accuracy over `updates` observations of a peer that
/// plays action 3 with probability `p_mode`, anything else uniformly.
pub fn running_accuracy(f: f64, p_mode: f64, updates: usize, seed: u64) -> f64 {
    let n = 8;
    let model = ObservationModel::with_fidelity(n, f).unwrap();
    let mut store = BeliefStore::<f64>::new(BeliefKey::Global, vec![n, n]);
    let mut acts = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for _ in 0..updates {
        let a = if acts.gen_bool(p_mode) { 3 } else { acts.gen_range(0..n) };
        let o = sample_observation(&model, a, &mut noise);
        store.observe(0, 1, 1, o, a, &model).unwrap();
    }
    store.accuracy().unwrap()
}

pub fn mean_accuracy(f: f64, p_mode: f64, updates: usize, seeds: u64) -> f64 {
    (0..seeds).map(|s| running_accuracy(f, p_mode, updates, s)).sum::<f64>() / seeds as f64
}

// ---- equilibrium

pub fn random_sets(dims: &[usize], rng: &mut ChaCha8Rng) -> ActionSets {
    ActionSets {
        per_agent: dims
            .iter()
            .map(|&d| {
                let k = rng.gen_range(1..=d);
                let mut all: Vec<usize> = (0..d).collect();
                all.shuffle(rng);
                let mut s = all[..k].to_vec();
                s.sort_unstable();
                s
            })
            .collect(),
    }
}

pub fn flat(dims: &[usize], a: &[usize]) -> usize {
    a.iter().zip(dims).fold(0, |acc, (&x, &d)| acc * d + x)
}

/// The game on `sets`, read straight off the Q slices.
pub fn game_from_q(dims: &[usize], sets: &ActionSets, q: &[Vec<f64>]) -> Game {
    let counts: Vec<usize> = sets.per_agent.iter().map(Vec::len).collect();
    let mut g = Game { counts: counts.clone(), payoff: vec![Vec::new(); q.len()] };
    for p in 0..g.profiles() {
        let pos = g.decode(p);
        let acts: Vec<usize> = pos.iter().enumerate().map(|(k, &i)| sets.per_agent[k][i]).collect();
        for k in 0..q.len() {
            g.payoff[k].push(q[k][flat(dims, &acts)]);
        }
    }
    g
}

/// Expected payoffs of the connected agents over the isolated agent's
/// admissible actions, weighted by the renormalized belief.
pub fn expected_game(dims: &[usize], sets: &ActionSets, q: &[Vec<f64>], pa: usize, belief: &[f64]) -> Game {
    let others: Vec<usize> = (0..dims.len()).filter(|&k| k != pa).collect();
    let counts: Vec<usize> = others.iter().map(|&k| sets.per_agent[k].len()).collect();
    let mass: f64 = sets.per_agent[pa].iter().map(|&a| belief[a]).sum();
    let mut g = Game { counts, payoff: vec![Vec::new(); others.len()] };
    for p in 0..g.profiles() {
        let pos = g.decode(p);
        for (i, &k) in others.iter().enumerate() {
            let mut v = 0.0;
            for &b in &sets.per_agent[pa] {
                let mut acts = vec![0; dims.len()];
                for (j, &kk) in others.iter().enumerate() {
                    acts[kk] = sets.per_agent[kk][pos[j]];
                }
                acts[pa] = b;
                v += belief[b] / mass * q[k][flat(dims, &acts)];
            }
            g.payoff[i].push(v);
        }
    }
    g
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[derive(Debug, Default)]
pub struct CeStats {
    pub games: usize,
    /// Worst constraint violation of a returned distribution.
    pub worst_violation: f64,
    /// Games where the returned objective fell below uniform play.
    pub below_uniform: usize,
    /// ... of which uniform play was itself a correlated equilibrium.
    pub below_feasible_uniform: usize,
    pub bad_support: usize,
}

impl CeStats {
    fn record(&mut self, g: &Game, dense: &[f64]) {
        self.games += 1;
        self.worst_violation = self.worst_violation.max(g.ce_violation(dense));
        let u = uniform(g.profiles());
        if g.welfare(dense) < g.welfare(&u) - 1e-9 {
            self.below_uniform += 1;
            if g.ce_violation(&u) <= 1e-12 {
                self.below_feasible_uniform += 1;
            }
        }
    }
}

/// Solves `n` random three-agent games, full and belief-conditioned, and
/// rechecks each answer against an independently built game.
pub fn ce_recheck(n: usize, seed: u64) -> CeStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = CeStats::default();
    for _ in 0..n {
        let dims: Vec<usize> = (0..3).map(|_| rng.gen_range(2..=4)).collect();
        let space = JointSpace::new(dims.clone());
        let sets = random_sets(&dims, &mut rng);
        let q: Vec<Vec<f64>> = (0..3).map(|_| (0..space.size()).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let slices: Vec<&[f64]> = q.iter().map(Vec::as_slice).collect();

        let out = solve_full_ce(&space, &sets, &slices).unwrap();
        st.record(&game_from_q(&dims, &sets, &q), &out.dense);
        let sparse: f64 = out.dist.probs.iter().sum();
        if (sparse - 1.0).abs() > 1e-9 {
            st.bad_support += 1;
        }

        let pa = rng.gen_range(0..3);
        let raw: Vec<f64> = (0..dims[pa]).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let belief: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let out = solve_belief_ce(&space, &sets, &slices, pa, &belief).unwrap();
        st.record(&expected_game(&dims, &sets, &q, pa, &belief), &out.dense);
        if out.dist.agents.contains(&pa) {
            st.bad_support += 1;
        }
    }
    st
}

/// Worst welfare gap between the solver and vertex enumeration on random
/// 2x2 games, with the number of mixed answers.
pub fn two_by_two_gap(n: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mixed = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let payoff: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let g = Game { counts: vec![2, 2], payoff: payoff.clone() };
        let (best, _) = g.best_ce_by_vertices();
        let game = CeGame::new(vec![0, 1], vec![vec![0, 1], vec![0, 1]], payoff).unwrap();
        let out = solve_ce(&game);
        worst = worst.max((g.welfare(&out.dense) - best).abs());
        if out.dense.iter().filter(|&&p| p > 1e-9).count() > 1 {
            mixed += 1;
        }
    }
    (worst, mixed)
}

// ---- learner

/// Largest per-parameter relative gap between the backward pass and central
/// differences of `dq . q`. Gradients smaller than `floor` are compared in
/// absolute terms.
pub fn gradient_gap(net: &LstmNetwork<f64>, xs: &[Vec<f64>], dq: &[f64], floor: f64) -> f64 {
    let mut grad = vec![0.0; net.params.len()];
    net.backward(xs, dq, &mut grad).unwrap();
    let f = |n: &LstmNetwork<f64>| -> f64 { n.forward(xs).unwrap().iter().zip(dq).map(|(q, d)| q * d).sum() };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in 0..net.params.len() {
        let x0 = probe.params[i];
        probe.params[i] = x0 + h;
        let up = f(&probe);
        probe.params[i] = x0 - h;
        let down = f(&probe);
        probe.params[i] = x0;
        let fd = (up - down) / (2.0 * h);
        let gap = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(floor);
        worst = worst.max(gap);
    }
    worst
}

/// Worst gradient gap over `n` random small networks.
pub fn finite_difference_gap(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let shape = LstmShape {
            input: rng.gen_range(1..=3),
            embed: rng.gen_range(1..=4),
            cells: rng.gen_range(1..=4),
            layers: rng.gen_range(1..=2),
            outputs: rng.gen_range(1..=4),
        };
        let net = LstmNetwork::<f64>::random(shape, 0.6, &mut rng);
        let len = rng.gen_range(1..=5);
        let xs: Vec<Vec<f64>> = (0..len).map(|_| (0..shape.input).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let dq: Vec<f64> = (0..shape.outputs).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst = worst.max(gradient_gap(&net, &xs, &dq, 1e-6));
    }
    worst
}

/// Two states, two actions; action `a` moves to state `a`.
pub const REWARD: [[f64; 2]; 2] = [[1.0, 0.0], [-0.5, 2.0]];

pub fn value_iteration(gamma: f64) -> [[f64; 2]; 2] {
    let mut q = [[0.0f64; 2]; 2];
    for _ in 0..2000 {
        let v = [q[0][0].max(q[0][1]), q[1][0].max(q[1][1])];
        for s in 0..2 {
            for a in 0..2 {
                q[s][a] = REWARD[s][a] + gamma * v[a];
            }
        }
    }
    q
}

/// Worst entry gap between tabular Q-learning under uniform exploration
/// and value iteration on the two-state chain.
pub fn tabular_gap(gamma: f64) -> f64 {
    let truth = value_iteration(gamma);
    let mut tab = TabularQ::<f64>::new(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = 0;
    for _ in 0..20_000 {
        let a = rng.gen_range(0..2);
        tab.update(s, a, REWARD[s][a], Some(a), 0.2, gamma);
        s = a;
    }
    let mut worst: f64 = 0.0;
    for s in 0..2 {
        for a in 0..2 {
            worst = worst.max((tab.get(s, a) - truth[s][a]).abs());
        }
    }
    worst
}

/// One-state bandit with `arms` arms paying standard normal rewards, trained
/// online through a small replay pool. Returns the final value estimate
/// `max_a Q(s, a)` averaged over the last steps; the true value is 0.
pub fn bandit_estimate(kind: TargetKind, seed: u64) -> f64 {
    let arms = 8;
    let shape = LstmShape { input: 1, embed: 4, cells: 4, layers: 1, outputs: arms };
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    let mut net = LstmNetwork::<f64>::random(shape, 0.08, &mut init);
    let mut target = net.clone();
    let mut env = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let mut replay = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000));
    let mut pool = ReplayBuffer::new(32);
    let x = vec![vec![1.0]];
    let (steps, tail) = (3000, 500);
    let mut acc = 0.0;
    for step in 0..steps {
        let a = env.gen_range(0..arms);
        let r: f64 = StandardNormal.sample(&mut env);
        pool.push(Experience {
            history: x.clone(),
            joint_action: a,
            reward: r,
            next_state: x[0].clone(),
            done: false,
            next_feasible: (0..arms).collect(),
        });
        let batch = pool.sample(8, &mut replay);
        train_step(&mut net, &target, &batch, 0.6, 0.05, 0.0, kind).unwrap();
        if step % 20 == 19 {
            sync_target(&net, &mut target).unwrap();
        }
        if step >= steps - tail {
            acc += net.forward(&x).unwrap().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    acc / tail as f64
}

/// Seeds out of `n` where the double estimator lands closer to the truth.
pub fn double_estimator_wins(n: u64) -> usize {
    (0..n)
        .filter(|&seed| bandit_estimate(TargetKind::Ddqn, seed).abs() < bandit_estimate(TargetKind::Dqn, seed).abs())
        .count()
}

// ---- admm

pub fn tight() -> AdmmConfig {
    AdmmConfig { max_iters: 50_000, tol_primal: 1e-10, tol_dual: 1e-10, ..AdmmConfig::default() }
}

pub fn random_quadratic(rng: &mut ChaCha8Rng) -> (Vec<Block<f64>>, Coupling<f64>) {
    let n = rng.gen_range(1..=5);
    let blocks = (0..n)
        .map(|_| {
            let lo = rng.gen_range(-2.0..0.5);
            Block { a: rng.gen_range(0.05..2.0), b: rng.gen_range(-2.0..2.0), lo, hi: lo + rng.gen_range(0.1..3.0) }
        })
        .collect();
    (blocks, Coupling::Quadratic { c: rng.gen_range(0.2..3.0), target: rng.gen_range(-3.0..3.0) })
}

#[derive(Debug, Default)]
pub struct AdmmStats {
    pub instances: usize,
    pub unconverged: usize,
    pub out_of_box: usize,
    pub worst_gap: f64,
}

/// ADMM against projected gradient (step 1/L) on `n` random instances.
pub fn admm_vs_projected_gradient(n: usize, seed: u64) -> AdmmStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = AdmmStats::default();
    for _ in 0..n {
        let (blocks, coupling) = random_quadratic(&mut rng);
        let Coupling::Quadratic { c, target } = coupling else { unreachable!() };
        let out = admm_solve(&blocks, &coupling, &tight());
        st.instances += 1;
        st.unconverged += usize::from(!out.converged);
        let lo: Vec<f64> = blocks.iter().map(|b| b.lo).collect();
        let hi: Vec<f64> = blocks.iter().map(|b| b.hi).collect();
        let lip = blocks.iter().map(|b| b.a).fold(0.0, f64::max) + c * blocks.len() as f64;
        let grad = |w: &[f64]| {
            let s: f64 = w.iter().sum();
            blocks.iter().zip(w).map(|(b, &x)| b.a * x + b.b + c * (s - target)).collect::<Vec<f64>>()
        };
        let reference = projected_gradient(grad, &lo, &hi, 1.0 / lip, 20_000);
        let f_ref = objective(&blocks, &coupling, &reference);
        let f_admm = objective(&blocks, &coupling, &out.state.w);
        st.worst_gap = st.worst_gap.max((f_admm - f_ref).abs());
        st.out_of_box += out.state.w.iter().zip(&blocks).filter(|(w, b)| **w < b.lo || **w > b.hi).count();
    }
    st
}

/// Slot cost in dollars of drawing `d` kW for loads and storage, valued at
/// `pi`, with PV output `pv` and grid buy/sell prices.
pub fn slot_cost(d: f64, pi: f64, pv: f64, buy: f64, sell: f64) -> f64 {
    let net = d - pv;
    -pi * d + if net >= 0.0 { buy * net } else { sell * net }
}

pub fn random_small_grid(rng: &mut ChaCha8Rng) -> GridConfig<f64> {
    let n = rng.gen_range(1..=2);
    let devices = (0..n)
        .map(|i| {
            let start = rng.gen_range(1..=3);
            let end = rng.gen_range(start + 1..=4);
            let duration = rng.gen_range(1..=end - start);
            DeviceSet::new(i + 1, rng.gen_range(2.0..25.0), (start, end), duration).unwrap()
        })
        .collect();
    let g = GridConfig {
        horizon: 3,
        devices,
        ess_power: rng.gen_range(5.0..25.0),
        ess_capacity: rng.gen_range(20.0..80.0),
        soc_init: rng.gen_range(0.0..=1.0),
        ..GridConfig::default()
    };
    g.validate().unwrap();
    g
}

#[derive(Debug, Default)]
pub struct RoundingStats {
    pub slots: usize,
    pub inadmissible: usize,
    pub unserviced_days: usize,
    pub worst_gap: f64,
}

/// Rounded ADMM dispatch against the exhaustive discrete optimum on every
/// slot of `n` random three-slot days.
pub fn rounding_check(n: usize, seed: u64) -> RoundingStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ladder = [0.05, 0.09, 0.13, 0.17, 0.21, 0.25];
    let (buy, sell) = (0.16, 0.064);
    let mut st = RoundingStats::default();
    for _ in 0..n {
        let g = random_small_grid(&mut rng);
        let mut dsm = g.initial_dsm();
        let mut ess = g.initial_ess();
        for _ in 0..g.horizon {
            let pv = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..40.0) };
            let pi = rng.gen_range(0.03..0.2);
            let problem = SlotProblem::build(&g, &dsm, &ess, pv, buy, sell, pi, 0.0);
            let d = admm_dispatch(&g, &dsm, &ess, &problem, &ladder, buy, &AdmmConfig::default(), |_, _| false);
            let draw = |mask: u32, q: i32| -> f64 {
                g.devices.iter().enumerate().filter(|(k, _)| mask & (1 << k) != 0).map(|(_, dv)| dv.avg_power).sum::<f64>()
                    - g.ess_power * f64::from(q)
            };
            // every admissible (mask, direction)
            let sets = g.feasible_actions(&dsm, &ess, ladder.len());
            let mut best = f64::INFINITY;
            for &local in &sets.per_agent[0] {
                let mask = dsm.expand_local(local, &g);
                for q in [-1, 0, 1] {
                    let probe = [EssAction::Charge, EssAction::Idle, EssAction::Discharge(0)][(q + 1) as usize];
                    if g.ess_feasible(&ess, probe) {
                        best = best.min(slot_cost(draw(mask, q), pi, pv, buy, sell));
                    }
                }
            }
            let got = slot_cost(draw(d.dsm_mask, d.q), pi, pv, buy, sell);
            if !sets.per_agent[0].contains(&d.actions[0]) || !sets.per_agent[2].contains(&d.actions[2]) {
                st.inadmissible += 1;
            }
            st.worst_gap = st.worst_gap.max((got - best).abs());
            st.slots += 1;
            dsm = g.advance_dsm(&dsm, d.dsm_mask);
            ess = g.ess_step(&ess, EssAction::from_index(d.actions[2])).unwrap().0;
        }
        st.unserviced_days += usize::from(!dsm.all_serviced());
    }
    st
}
