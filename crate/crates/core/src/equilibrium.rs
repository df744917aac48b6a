//! Joint-action selection: correlated equilibrium over exchanged Q values,
//! the belief-weighted variant used when one agent is cut off, and pure
//! best-response iteration for the Nash baseline.
//!
//! Q slices are dense vectors over a [`JointSpace`]; the admissible profiles
//! at a slot form the product of per-agent sets ([`ActionSets`]).

use log::{debug, warn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{ActionSets, JointSpace};
use crate::lp::{lp_solve, lp_solve_dual, LpProblem};
use crate::scalar::{argmax, Scalar};

/// A finite game in normal form over a product of per-player action lists.
/// Profiles are enumerated row-major over the positions in `actions`.
#[derive(Debug, Clone)]
pub struct CeGame<T> {
    /// Agent id of each player.
    pub agents: Vec<usize>,
    pub actions: Vec<Vec<usize>>,
    /// `utility[k][p]`: payoff of player `k` at profile `p`.
    pub utility: Vec<Vec<T>>,
    strides: Vec<usize>,
}

impl<T: Scalar> CeGame<T> {
    pub fn new(agents: Vec<usize>, actions: Vec<Vec<usize>>, utility: Vec<Vec<T>>) -> Result<Self> {
        if agents.len() != actions.len() || utility.len() != actions.len() {
            return Err(Error::Shape { expected: actions.len(), got: utility.len() });
        }
        if actions.iter().any(Vec::is_empty) {
            return Err(Error::Precondition("a player has no admissible action".into()));
        }
        let mut strides = vec![1; actions.len()];
        for k in (0..actions.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * actions[k + 1].len();
        }
        let n: usize = actions.iter().map(Vec::len).product();
        if let Some(u) = utility.iter().find(|u| u.len() != n) {
            return Err(Error::Shape { expected: n, got: u.len() });
        }
        Ok(CeGame { agents, actions, utility, strides })
    }

    /// Builds the game induced by dense Q slices restricted to `sets`.
    pub fn from_slices(space: &JointSpace, sets: &ActionSets, q: &[&[T]]) -> Result<Self> {
        let players = sets.per_agent.len();
        if q.len() != players {
            return Err(Error::Shape { expected: players, got: q.len() });
        }
        let joints = space.enumerate(sets);
        let utility = q
            .iter()
            .map(|slice| {
                if slice.len() != space.size() {
                    return Err(Error::Shape { expected: space.size(), got: slice.len() });
                }
                Ok(joints.iter().map(|&j| slice[j]).collect())
            })
            .collect::<Result<Vec<Vec<T>>>>()?;
        Self::new((0..players).collect(), sets.per_agent.clone(), utility)
    }

    pub fn players(&self) -> usize {
        self.actions.len()
    }

    pub fn profiles(&self) -> usize {
        self.utility[0].len()
    }

    /// Position of player `k` in profile `p`.
    pub fn position(&self, p: usize, k: usize) -> usize {
        (p / self.strides[k]) % self.actions[k].len()
    }

    /// Profile `p` with player `k` moved to position `pos`.
    pub fn deviate(&self, p: usize, k: usize, pos: usize) -> usize {
        p - self.position(p, k) * self.strides[k] + pos * self.strides[k]
    }

    /// Action ids of profile `p`.
    pub fn profile(&self, p: usize) -> Vec<usize> {
        (0..self.players()).map(|k| self.actions[k][self.position(p, k)]).collect()
    }

    pub fn welfare(&self, p: usize) -> T {
        self.utility.iter().map(|u| u[p]).sum()
    }

    /// Largest violation of the correlated-equilibrium deviation constraints
    /// and the simplex constraints under `probs`.
    pub fn max_violation(&self, probs: &[T]) -> T {
        let mut worst = T::zero();
        let total: T = probs.iter().copied().sum();
        worst = worst.max((total - T::one()).abs());
        for &p in probs {
            worst = worst.max(-p);
        }
        for k in 0..self.players() {
            let nk = self.actions[k].len();
            for a in 0..nk {
                for dev in 0..nk {
                    if dev == a {
                        continue;
                    }
                    let mut gain = T::zero();
                    for (p, &pr) in probs.iter().enumerate() {
                        if self.position(p, k) == a && pr != T::zero() {
                            gain += pr * (self.utility[k][self.deviate(p, k, dev)] - self.utility[k][p]);
                        }
                    }
                    worst = worst.max(gain);
                }
            }
        }
        worst
    }

    /// True if no player gains by a unilateral deviation from pure profile
    /// `p` (up to `tol`).
    pub fn is_pure_equilibrium(&self, p: usize, tol: T) -> bool {
        (0..self.players()).all(|k| {
            let here = self.utility[k][p];
            (0..self.actions[k].len()).all(|d| self.utility[k][self.deviate(p, k, d)] <= here + tol)
        })
    }

    pub fn expected_welfare(&self, probs: &[T]) -> T {
        probs.iter().enumerate().map(|(p, &pr)| pr * self.welfare(p)).sum()
    }
}

/// Distribution over profiles of `agents`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution<T> {
    pub agents: Vec<usize>,
    pub profiles: Vec<Vec<usize>>,
    pub probs: Vec<T>,
}

impl<T: Scalar> JointDistribution<T> {
    pub fn one_hot(agents: Vec<usize>, profile: Vec<usize>) -> Self {
        JointDistribution { agents, profiles: vec![profile], probs: vec![T::one()] }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeMethod {
    /// Welfare-maximizing profile was itself an equilibrium.
    Pure,
    Lp,
    /// The LP failed; independent greedy play was used.
    Greedy,
}

#[derive(Debug, Clone)]
pub struct CeOutcome<T> {
    pub dist: JointDistribution<T>,
    pub method: CeMethod,
    /// Probabilities over every profile of the game, for re-checking.
    pub dense: Vec<T>,
    pub pivots: usize,
}

/// Welfare-maximizing correlated equilibrium of `game`.
///
/// When the welfare-maximizing pure profile is already an equilibrium it is
/// optimal for the LP as well and is returned without solving.
pub fn solve_ce<T: Scalar>(game: &CeGame<T>) -> CeOutcome<T> {
    let n = game.profiles();
    let welfare: Vec<T> = (0..n).map(|p| game.welfare(p)).collect();
    let best = argmax(&welfare).expect("non-empty game");
    let scale = game
        .utility
        .iter()
        .flatten()
        .fold(T::zero(), |m, &u| m.max(u.abs()))
        .max(T::min_positive_value());
    let tol = T::tolerance() * scale;
    if game.is_pure_equilibrium(best, tol) {
        let mut dense = vec![T::zero(); n];
        dense[best] = T::one();
        return CeOutcome {
            dist: JointDistribution::one_hot(game.agents.clone(), game.profile(best)),
            method: CeMethod::Pure,
            dense,
            pivots: 0,
        };
    }
    match ce_lp(game, scale, best) {
        Ok((dense, pivots)) => {
            let mut profiles = Vec::new();
            let mut probs = Vec::new();
            for (p, &pr) in dense.iter().enumerate() {
                if pr > T::zero() {
                    profiles.push(game.profile(p));
                    probs.push(pr);
                }
            }
            CeOutcome {
                dist: JointDistribution { agents: game.agents.clone(), profiles, probs },
                method: CeMethod::Lp,
                dense,
                pivots,
            }
        }
        Err(e) => {
            warn!("correlated equilibrium LP failed ({e}); falling back to greedy play");
            let profile = greedy_positions(game);
            let p = profile.iter().zip(&game.strides).map(|(a, s)| a * s).sum();
            let mut dense = vec![T::zero(); n];
            dense[p] = T::one();
            CeOutcome {
                dist: JointDistribution::one_hot(game.agents.clone(), game.profile(p)),
                method: CeMethod::Greedy,
                dense,
                pivots: 0,
            }
        }
    }
}

fn ce_lp<T: Scalar>(game: &CeGame<T>, scale: T, best: usize) -> Result<(Vec<T>, usize)> {
    let n = game.profiles();
    let inv = T::one() / scale;
    let mut lp = LpProblem::new((0..n).map(|p| game.welfare(p) * inv).collect());
    for k in 0..game.players() {
        let nk = game.actions[k].len();
        for a in 0..nk {
            for dev in 0..nk {
                if dev == a {
                    continue;
                }
                // sum_{p: p_k = a} Pr(p) (u_k(p with dev) - u_k(p)) <= 0
                let mut row = vec![T::zero(); n];
                for (p, r) in row.iter_mut().enumerate() {
                    if game.position(p, k) == a {
                        *r = (game.utility[k][game.deviate(p, k, dev)] - game.utility[k][p]) * inv;
                    }
                }
                lp.add_le(row, T::zero());
            }
        }
    }
    lp.add_eq(vec![T::one(); n], T::one());
    // slacks on the deviation rows plus the welfare-maximizing profile on
    // the simplex row is dual feasible: every reduced cost is
    // welfare(p) - welfare(best) <= 0
    let rows = lp.le.len();
    let mut basis: Vec<usize> = (0..rows).map(|i| n + i).collect();
    basis.push(best);
    let sol = match lp_solve_dual(&lp, &basis) {
        Ok(sol) => sol,
        Err(e) => {
            debug!("dual simplex failed ({e}), retrying with the primal method");
            lp_solve(&lp)?
        }
    };
    let mut x = sol.x;
    let s: T = x.iter().copied().sum();
    for v in x.iter_mut() {
        *v /= s;
    }
    debug!("CE LP solved with {} pivots over {n} profiles", sol.pivots);
    Ok((x, sol.pivots))
}

/// Each player's component of its own best profile.
fn greedy_positions<T: Scalar>(game: &CeGame<T>) -> Vec<usize> {
    (0..game.players())
        .map(|k| game.position(argmax(&game.utility[k]).expect("non-empty"), k))
        .collect()
}

/// Correlated equilibrium over all agents' exchanged Q slices.
pub fn solve_full_ce<T: Scalar>(space: &JointSpace, sets: &ActionSets, q: &[&[T]]) -> Result<CeOutcome<T>> {
    let game = CeGame::from_slices(space, sets, q)?;
    Ok(solve_ce(&game))
}

/// Game played by the connected agents when `isolated` is cut off: each
/// connected agent's payoff is its Q slice averaged over the isolated
/// agent's admissible actions under `belief` (renormalized over them).
pub fn belief_game<T: Scalar>(
    space: &JointSpace,
    sets: &ActionSets,
    q: &[&[T]],
    isolated: usize,
    belief: &[T],
) -> Result<CeGame<T>> {
    belief_game_multi(space, sets, q, &[(isolated, belief)])
}

/// [`belief_game`] with several isolated agents; the expectation runs over
/// the product of their (independent) beliefs.
pub fn belief_game_multi<T: Scalar>(
    space: &JointSpace,
    sets: &ActionSets,
    q: &[&[T]],
    isolated: &[(usize, &[T])],
) -> Result<CeGame<T>> {
    let players = sets.per_agent.len();
    let mut weights: Vec<(usize, Vec<(usize, T)>)> = Vec::with_capacity(isolated.len());
    for &(pa, belief) in isolated {
        if belief.is_empty() {
            return Err(Error::Precondition("empty belief over the isolated agent".into()));
        }
        if belief.len() != space.dims[pa] {
            return Err(Error::Shape { expected: space.dims[pa], got: belief.len() });
        }
        let mass: T = sets.per_agent[pa].iter().map(|&a| belief[a]).sum();
        if !(mass > T::zero()) {
            return Err(Error::Precondition("belief puts no mass on admissible actions".into()));
        }
        weights.push((pa, sets.per_agent[pa].iter().map(|&a| (a, belief[a] / mass)).collect()));
    }
    let normal: Vec<usize> = (0..players).filter(|k| !isolated.iter().any(|(pa, _)| pa == k)).collect();
    if normal.is_empty() {
        return Err(Error::Precondition("no connected agent left".into()));
    }
    // every combination of the isolated agents' actions with its weight
    let mut combos: Vec<(Vec<usize>, T)> = vec![(Vec::new(), T::one())];
    for (_, w) in &weights {
        combos = combos
            .iter()
            .flat_map(|(acts, p)| {
                w.iter().map(move |&(a, wa)| {
                    let mut next = acts.clone();
                    next.push(a);
                    (next, *p * wa)
                })
            })
            .collect();
    }
    let actions: Vec<Vec<usize>> = normal.iter().map(|&k| sets.per_agent[k].clone()).collect();
    let skeleton = CeGame::new(
        normal.clone(),
        actions.clone(),
        vec![vec![T::zero(); actions.iter().map(Vec::len).product()]; normal.len()],
    )?;
    let mut utility = vec![vec![T::zero(); skeleton.profiles()]; normal.len()];
    let mut full = vec![0usize; players];
    for p in 0..skeleton.profiles() {
        for (i, &k) in normal.iter().enumerate() {
            full[k] = actions[i][skeleton.position(p, i)];
        }
        for (acts, w) in &combos {
            for ((pa, _), &a) in weights.iter().zip(acts) {
                full[*pa] = a;
            }
            let j = space.encode(&full);
            for (i, &k) in normal.iter().enumerate() {
                utility[i][p] += *w * q[k][j];
            }
        }
    }
    CeGame::new(normal, actions, utility)
}

/// Belief-weighted correlated equilibrium over the connected agents.
pub fn solve_belief_ce<T: Scalar>(
    space: &JointSpace,
    sets: &ActionSets,
    q: &[&[T]],
    isolated: usize,
    belief: &[T],
) -> Result<CeOutcome<T>> {
    let game = belief_game(space, sets, q, isolated, belief)?;
    Ok(solve_ce(&game))
}

/// Greedy action of `agent`: its component of the best admissible joint
/// action under its own Q slice.
pub fn greedy_action<T: Scalar>(space: &JointSpace, sets: &ActionSets, q: &[T], agent: usize) -> usize {
    let joints = space.enumerate(sets);
    let vals: Vec<T> = joints.iter().map(|&j| q[j]).collect();
    let best = joints[argmax(&vals).expect("non-empty action sets")];
    space.decode(best)[agent]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NashOutcome {
    /// Action each agent actually plays.
    pub profile: Vec<usize>,
    /// Best-response rounds run (each one message per connected agent).
    pub rounds: usize,
    pub converged: bool,
}

/// Synchronous best-response iteration from the greedy profile.
pub fn nash_iterate<T: Scalar>(space: &JointSpace, sets: &ActionSets, q: &[&[T]], max_rounds: usize) -> NashOutcome {
    let fallback: Vec<usize> = sets.per_agent.iter().map(|s| s[0]).collect();
    nash_iterate_with(space, sets, q, max_rounds, &fallback, |_, _| true)
}

/// Best-response iteration over an unreliable channel.
///
/// `delivered(round, agent)` reports whether the agent's upload in that round
/// reached the others; round 0 carries the initial Q values. An agent whose
/// round-0 upload is lost is isolated: it plays its own greedy action and the
/// rest hold it at `fallback`. A lost later upload leaves its previous
/// announcement in place.
pub fn nash_iterate_with<T: Scalar>(
    space: &JointSpace,
    sets: &ActionSets,
    q: &[&[T]],
    max_rounds: usize,
    fallback: &[usize],
    mut delivered: impl FnMut(usize, usize) -> bool,
) -> NashOutcome {
    assert!(max_rounds >= 1, "max_rounds must be at least 1");
    let n = sets.per_agent.len();
    let mut own: Vec<usize> = (0..n).map(|k| greedy_action(space, sets, q[k], k)).collect();
    let isolated: Vec<bool> = (0..n).map(|k| !delivered(0, k)).collect();
    let mut public: Vec<usize> = (0..n).map(|k| if isolated[k] { fallback[k] } else { own[k] }).collect();
    let mut rounds = 0;
    let mut converged = false;
    let mut profile = vec![0; n];
    while rounds < max_rounds {
        rounds += 1;
        let mut changed = false;
        let mut next = own.clone();
        for k in 0..n {
            if isolated[k] {
                continue;
            }
            profile.copy_from_slice(&public);
            profile[k] = own[k];
            let current = q[k][space.encode(&profile)];
            let mut best = (own[k], current);
            // keep the current action unless strictly beaten, then take the
            // lowest-index maximizer
            for &a in &sets.per_agent[k] {
                profile[k] = a;
                let v = q[k][space.encode(&profile)];
                if v > best.1 {
                    best = (a, v);
                }
            }
            if best.0 != own[k] {
                changed = true;
            }
            next[k] = best.0;
        }
        own = next;
        for k in 0..n {
            if !isolated[k] && delivered(rounds, k) {
                public[k] = own[k];
            }
        }
        if !changed {
            converged = true;
            break;
        }
    }
    if !converged {
        debug!("best-response iteration stopped after {rounds} rounds without a fixed point");
    }
    NashOutcome { profile: own, rounds, converged }
}

/// Draws one profile from a joint distribution.
pub fn sample_joint_action<T: Scalar, R: Rng + ?Sized>(dist: &JointDistribution<T>, rng: &mut R) -> Vec<usize> {
    sample_joint_action_at(dist, rng.gen())
}

/// Profile selected by the uniform variate `u` in `[0, 1)`. Agents that
/// share `u` realize a common correlation signal.
pub fn sample_joint_action_at<T: Scalar>(dist: &JointDistribution<T>, u: f64) -> Vec<usize> {
    assert!(!dist.is_empty(), "empty distribution");
    let mut acc = 0.0;
    for (profile, p) in dist.profiles.iter().zip(&dist.probs) {
        acc += p.to_f64_lossy();
        if u < acc {
            return profile.clone();
        }
    }
    let last = dist.probs.iter().rposition(|p| *p > T::zero()).unwrap_or(dist.len() - 1);
    dist.profiles[last].clone()
}
