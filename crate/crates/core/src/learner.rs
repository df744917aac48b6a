//! Deep Q-learning over joint actions: replay memory, DQN and double-DQN
//! updates, target syncing, epsilon-greedy selection and a tabular
//! reference learner.

use std::collections::{BTreeMap, VecDeque};

use log::trace;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::LstmNetwork;
use crate::scalar::{argmax, Scalar};

/// One transition of one agent. `history` holds the encoded states of the
/// episode up to and including the state acted on, so the recurrent network
/// can be unrolled from the start of the day.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience<T> {
    pub history: Vec<Vec<T>>,
    pub joint_action: usize,
    pub reward: T,
    pub next_state: Vec<T>,
    pub done: bool,
    /// Admissible joint actions in the next state.
    pub next_feasible: Vec<usize>,
}

impl<T: Scalar> Experience<T> {
    pub fn next_history(&self) -> Vec<Vec<T>> {
        let mut h = self.history.clone();
        h.push(self.next_state.clone());
        h
    }
}

/// Fixed-capacity FIFO replay memory.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<Experience<T>>,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, e: Experience<T>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Experience<T>> {
        self.items.get(i)
    }

    /// Distinct indices drawn uniformly; at most `len()` of them.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        let k = batch.min(self.items.len());
        sample_indices(rng, self.items.len(), k).into_vec()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Experience<T>> {
        self.sample_indices(batch, rng).into_iter().map(|i| &self.items[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub discount: f64,
    pub batch: usize,
    pub pool: usize,
    /// Episodes between training events.
    pub train_every: usize,
    /// Gradient steps per training event.
    pub updates_per_train: usize,
    /// Training events between target syncs.
    pub target_sync_every: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of all episodes over which epsilon decays linearly.
    pub epsilon_decay_frac: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Gradient norm clip; 0 disables it.
    pub grad_clip: f64,
    pub init_scale: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.005,
            discount: 0.6,
            batch: 120,
            pool: 1200,
            train_every: 40,
            updates_per_train: 10,
            target_sync_every: 5,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_frac: 0.6,
            lr_decay: 0.95,
            lr_decay_every: 500,
            grad_clip: 0.0,
            init_scale: 0.08,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config("discount must lie in [0, 1)".into()));
        }
        if self.batch == 0 || self.pool == 0 || self.train_every == 0 || self.target_sync_every == 0 {
            return Err(Error::Config("batch, pool, train_every and target_sync_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon_end) || !(0.0..=1.0).contains(&self.epsilon_start) {
            return Err(Error::Config("epsilon must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Exploration rate at `episode` of `total`.
    pub fn epsilon(&self, episode: usize, total: usize) -> f64 {
        let horizon = (self.epsilon_decay_frac * total as f64).max(1.0);
        let frac = (episode as f64 / horizon).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    /// Learning rate at `episode`.
    pub fn lr_at(&self, episode: usize) -> f64 {
        let steps = if self.lr_decay_every == 0 { 0 } else { episode / self.lr_decay_every };
        self.learning_rate * self.lr_decay.powi(steps as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// `r + gamma max_a Q_target(s', a)`.
    Dqn,
    /// `r + gamma Q_target(s', argmax_a Q_main(s', a))`.
    Ddqn,
}

fn masked_argmax<T: Scalar>(q: &[T], feasible: &[usize]) -> Option<usize> {
    let vals: Vec<T> = feasible.iter().map(|&a| q[a]).collect();
    argmax(&vals).map(|i| feasible[i])
}

/// Bootstrap targets for a batch.
pub fn targets<T: Scalar>(
    net: &LstmNetwork<T>,
    target: &LstmNetwork<T>,
    batch: &[&Experience<T>],
    discount: T,
    kind: TargetKind,
) -> Result<Vec<T>> {
    batch
        .iter()
        .map(|e| {
            if e.done || e.next_feasible.is_empty() {
                return Ok(e.reward);
            }
            let hist = e.next_history();
            let qt = target.forward(&hist)?;
            let next = match kind {
                TargetKind::Dqn => masked_argmax(&qt, &e.next_feasible),
                TargetKind::Ddqn => masked_argmax(&net.forward(&hist)?, &e.next_feasible),
            }
            .expect("non-empty feasible set");
            Ok(e.reward + discount * qt[next])
        })
        .collect()
}

/// One SGD step on the mean squared TD error; returns the batch loss.
///
/// Produces the same targets as [`targets`], but the main network's values
/// at the next state come from one extra step on the recurrent state left by
/// the gradient pass instead of a fresh unroll.
pub fn train_step<T: Scalar>(
    net: &mut LstmNetwork<T>,
    target: &LstmNetwork<T>,
    batch: &[&Experience<T>],
    discount: T,
    lr: T,
    grad_clip: T,
    kind: TargetKind,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty training batch".into()));
    }
    let n = T::of(batch.len() as f64);
    let mut grad = vec![T::zero(); net.params.len()];
    let mut loss = T::zero();
    let main = &*net;
    for e in batch {
        let bootstrap = !(e.done || e.next_feasible.is_empty());
        let qt = if bootstrap { Some(target.forward(&e.next_history())?) } else { None };
        let mut failure = None;
        main.backward_with(&e.history, &mut grad, |q, state| {
            let y = match &qt {
                None => e.reward,
                Some(qt) => {
                    let next = match kind {
                        TargetKind::Dqn => masked_argmax(qt, &e.next_feasible),
                        TargetKind::Ddqn => match main.step(&mut state.clone(), &e.next_state) {
                            Ok(qn) => masked_argmax(&qn, &e.next_feasible),
                            Err(err) => {
                                failure = Some(err);
                                Some(e.next_feasible[0])
                            }
                        },
                    }
                    .expect("non-empty feasible set");
                    e.reward + discount * qt[next]
                }
            };
            // gradient of the prediction error only touches the taken action
            let err = q[e.joint_action] - y;
            loss += err * err / n;
            let mut dq = vec![T::zero(); q.len()];
            dq[e.joint_action] = T::of(2.0) * err / n;
            dq
        })?;
        if let Some(err) = failure {
            return Err(err);
        }
    }
    if !loss.is_finite() {
        return Err(Error::Divergence);
    }
    if grad_clip > T::zero() {
        let norm = grad.iter().map(|&g| g * g).sum::<T>().sqrt();
        if norm > grad_clip {
            let s = grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    net.sgd(&grad, lr);
    if !net.is_finite() {
        return Err(Error::Divergence);
    }
    trace!("train step loss {loss}");
    Ok(loss)
}

pub fn train_step_ddqn<T: Scalar>(
    net: &mut LstmNetwork<T>,
    target: &LstmNetwork<T>,
    batch: &[&Experience<T>],
    h: &Hyperparams,
) -> Result<T> {
    train_step(net, target, batch, T::of(h.discount), T::of(h.learning_rate), T::of(h.grad_clip), TargetKind::Ddqn)
}

pub fn train_step_dqn<T: Scalar>(
    net: &mut LstmNetwork<T>,
    target: &LstmNetwork<T>,
    batch: &[&Experience<T>],
    h: &Hyperparams,
) -> Result<T> {
    train_step(net, target, batch, T::of(h.discount), T::of(h.learning_rate), T::of(h.grad_clip), TargetKind::Dqn)
}

pub fn sync_target<T: Scalar>(net: &LstmNetwork<T>, target: &mut LstmNetwork<T>) -> Result<()> {
    if net.shape != target.shape {
        return Err(Error::Shape { expected: net.params.len(), got: target.params.len() });
    }
    target.params.copy_from_slice(&net.params);
    Ok(())
}

/// With probability `epsilon` a uniform feasible action, else the feasible
/// argmax (lowest index on ties).
pub fn epsilon_greedy<T: Scalar, R: Rng + ?Sized>(q: &[T], feasible: &[usize], epsilon: f64, rng: &mut R) -> Result<usize> {
    if feasible.is_empty() {
        return Err(Error::Precondition("no feasible action".into()));
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(feasible[rng.gen_range(0..feasible.len())]);
    }
    Ok(masked_argmax(q, feasible).expect("non-empty"))
}

/// Tabular Q-learning, used as a reference for the deep learners.
#[derive(Debug, Clone, Default)]
pub struct TabularQ<T> {
    table: BTreeMap<(usize, usize), T>,
    actions: usize,
}

impl<T: Scalar> TabularQ<T> {
    pub fn new(actions: usize) -> Self {
        TabularQ { table: BTreeMap::new(), actions }
    }

    pub fn get(&self, s: usize, a: usize) -> T {
        self.table.get(&(s, a)).copied().unwrap_or_else(T::zero)
    }

    pub fn max(&self, s: usize) -> T {
        (0..self.actions).map(|a| self.get(s, a)).fold(T::neg_infinity(), T::max)
    }

    /// `Q(s,a) += alpha (r + gamma max_a' Q(s',a') - Q(s,a))`; terminal
    /// transitions pass `next = None`.
    pub fn update(&mut self, s: usize, a: usize, r: T, next: Option<usize>, alpha: T, gamma: T) {
        let boot = next.map_or(T::zero(), |s2| self.max(s2));
        let q = self.get(s, a);
        self.table.insert((s, a), q + alpha * (r + gamma * boot - q));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::LstmShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp(reward: f64, done: bool) -> Experience<f64> {
        Experience {
            history: vec![vec![0.5, -0.5]],
            joint_action: 1,
            reward,
            next_state: vec![0.1, 0.2],
            done,
            next_feasible: vec![0, 1, 2],
        }
    }

    fn shape() -> LstmShape {
        LstmShape { input: 2, embed: 3, cells: 3, layers: 1, outputs: 3 }
    }

    #[test]
    fn done_targets_are_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = LstmNetwork::<f64>::random(shape(), 0.5, &mut rng);
        let batch = [exp(1.5, true), exp(-2.0, true)];
        let refs: Vec<_> = batch.iter().collect();
        for kind in [TargetKind::Dqn, TargetKind::Ddqn] {
            assert_eq!(targets(&net, &net, &refs, 0.6, kind).unwrap(), vec![1.5, -2.0]);
        }
    }

    #[test]
    fn dqn_and_ddqn_agree_when_argmax_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = LstmNetwork::<f64>::random(shape(), 0.5, &mut rng);
        let b = [exp(1.0, false)];
        let refs: Vec<_> = b.iter().collect();
        let a = targets(&net, &net, &refs, 0.6, TargetKind::Dqn).unwrap();
        let d = targets(&net, &net, &refs, 0.6, TargetKind::Ddqn).unwrap();
        assert_eq!(a, d);
    }

    #[test]
    fn sync_makes_outputs_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = LstmNetwork::<f64>::random(shape(), 0.5, &mut rng);
        let mut tgt = LstmNetwork::<f64>::random(shape(), 0.5, &mut rng);
        let xs = vec![vec![0.2, 0.3]];
        assert_ne!(net.forward(&xs).unwrap(), tgt.forward(&xs).unwrap());
        sync_target(&net, &mut tgt).unwrap();
        assert_eq!(net.forward(&xs).unwrap(), tgt.forward(&xs).unwrap());
        let before = tgt.clone();
        sync_target(&net, &mut tgt).unwrap();
        assert_eq!(before, tgt);
        let other = LstmNetwork::<f64>::zeros(LstmShape { cells: 4, ..shape() });
        assert!(sync_target(&other, &mut tgt).is_err());
    }

    #[test]
    fn loss_drops_on_repeated_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = LstmNetwork::<f64>::random(shape(), 0.3, &mut rng);
        let tgt = net.clone();
        let b = [exp(2.0, true)];
        let refs: Vec<_> = b.iter().collect();
        let first = train_step(&mut net, &tgt, &refs, 0.6, 0.1, 0.0, TargetKind::Ddqn).unwrap();
        let mut last = first;
        for _ in 0..50 {
            last = train_step(&mut net, &tgt, &refs, 0.6, 0.1, 0.0, TargetKind::Ddqn).unwrap();
        }
        assert!(last < first * 0.1);
    }

    #[test]
    fn fused_step_matches_reference_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = LstmNetwork::<f64>::random(shape(), 0.5, &mut rng);
        let tgt = LstmNetwork::<f64>::random(shape(), 0.5, &mut rng);
        let mut b = vec![exp(1.0, false), exp(0.5, true), exp(-1.0, false)];
        b[2].history.push(vec![0.9, 0.1]);
        b[2].next_feasible = vec![2, 0];
        let refs: Vec<_> = b.iter().collect();
        for kind in [TargetKind::Dqn, TargetKind::Ddqn] {
            let ys = targets(&net, &tgt, &refs, 0.6, kind).unwrap();
            let expected: f64 = refs
                .iter()
                .zip(&ys)
                .map(|(e, y)| (net.forward(&e.history).unwrap()[e.joint_action] - y).powi(2) / 3.0)
                .sum();
            let mut n = net.clone();
            let loss = train_step(&mut n, &tgt, &refs, 0.6, 0.0, 0.0, kind).unwrap();
            assert!((loss - expected).abs() < 1e-14, "{loss} vs {expected}");
        }
    }

    #[test]
    fn replay_eviction_and_distinct_sampling() {
        let mut buf = ReplayBuffer::new(3);
        for r in 0..5 {
            buf.push(exp(r as f64, true));
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.get(0).unwrap().reward, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut idx = buf.sample_indices(3, &mut rng);
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn epsilon_greedy_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = [9.0, 1.0, 3.0, 3.0];
        assert_eq!(epsilon_greedy(&q, &[1, 2, 3], 0.0, &mut rng).unwrap(), 2);
        assert!(epsilon_greedy(&q, &[], 0.0, &mut rng).is_err());
        let mut counts = [0; 4];
        for _ in 0..30_000 {
            counts[epsilon_greedy(&q, &[1, 2, 3], 1.0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn tabular_basics() {
        let mut t = TabularQ::<f64>::new(2);
        t.update(0, 1, 5.0, Some(1), 1.0, 0.0);
        assert_eq!(t.get(0, 1), 5.0);
        t.update(0, 1, 5.0, Some(1), 0.5, 0.0);
        assert_eq!(t.get(0, 1), 5.0);
    }

    #[test]
    fn schedules() {
        let h = Hyperparams::default();
        assert_eq!(h.epsilon(0, 1000), 1.0);
        assert!((h.epsilon(600, 1000) - 0.05).abs() < 1e-12);
        assert!((h.epsilon(900, 1000) - 0.05).abs() < 1e-12);
        assert!((h.lr_at(1000) - 0.005 * 0.95 * 0.95).abs() < 1e-15);
    }
}
