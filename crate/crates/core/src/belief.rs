//! Observation channel and Dirichlet belief over a peer's actions.
//!
//! Each agent watches its peers through a noisy confusion matrix
//! `O(o | a)` and keeps pseudo-counts over every peer's action alphabet. An
//! observation is turned into a posterior over the peer's action, and that
//! posterior mass is added to the counts; the prior is the normalized count
//! vector.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};

const ROW_TOL: f64 = 1e-9;

/// Row-stochastic confusion matrix, `prob(o, a) = O(o | a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel<T> {
    n: usize,
    rows: Vec<T>,
}

impl<T: Scalar> ObservationModel<T> {
    pub fn new(rows: Vec<Vec<T>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Config("observation model needs at least one action".into()));
        }
        let mut flat = Vec::with_capacity(n * n);
        for (a, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape { expected: n, got: row.len() });
            }
            if row.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
                return Err(Error::Config(format!("row {a} has an entry outside [0, 1]")));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs().to_f64_lossy() > ROW_TOL.max(T::tolerance().to_f64_lossy()) {
                return Err(Error::Config(format!("row {a} sums to {s}, not 1")));
            }
            flat.extend_from_slice(row);
        }
        Ok(ObservationModel { n, rows: flat })
    }

    /// `f` on the diagonal and `(1 - f) / (n - 1)` elsewhere.
    pub fn with_fidelity(n: usize, f: T) -> Result<Self> {
        if n == 1 {
            return Self::new(vec![vec![T::one()]]);
        }
        let off = (T::one() - f) / T::of((n - 1) as f64);
        Self::new(
            (0..n)
                .map(|a| (0..n).map(|o| if o == a { f } else { off }).collect())
                .collect(),
        )
    }

    pub fn identity(n: usize) -> Self {
        Self::with_fidelity(n, T::one()).expect("identity is stochastic")
    }

    pub fn uniform(n: usize) -> Self {
        let p = T::one() / T::of(n as f64);
        Self::new(vec![vec![p; n]; n]).expect("uniform is stochastic")
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn prob(&self, obs: usize, action: usize) -> T {
        self.rows[action * self.n + obs]
    }

    pub fn row(&self, action: usize) -> &[T] {
        &self.rows[action * self.n..(action + 1) * self.n]
    }
}

/// Draws an observation from row `true_action`.
pub fn sample_observation<T: Scalar, R: Rng + ?Sized>(
    model: &ObservationModel<T>,
    true_action: usize,
    rng: &mut R,
) -> usize {
    assert!(true_action < model.len(), "action {true_action} out of range");
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let row = model.row(true_action);
    for (o, p) in row.iter().enumerate() {
        acc += p.to_f64_lossy();
        if u < acc {
            return o;
        }
    }
    // rounding left a sliver above the last cumulative sum
    row.iter().rposition(|p| *p > T::zero()).unwrap_or(model.len() - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletBelief<T> {
    counts: Vec<T>,
}

impl<T: Scalar> DirichletBelief<T> {
    /// One pseudo-count per action.
    pub fn uniform(n: usize) -> Self {
        DirichletBelief { counts: vec![T::one(); n] }
    }

    pub fn from_counts(counts: Vec<T>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Precondition("belief over an empty alphabet".into()));
        }
        if counts.iter().any(|&c| !(c >= T::zero())) || counts.iter().all(|&c| c == T::zero()) {
            return Err(Error::Precondition("counts must be non-negative and not all zero".into()));
        }
        Ok(DirichletBelief { counts })
    }

    pub fn counts(&self) -> &[T] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> T {
        self.counts.iter().copied().sum()
    }

    /// Expected action probabilities, `c_i / sum(c)`.
    pub fn prior(&self) -> Vec<T> {
        let s = self.total();
        self.counts.iter().map(|&c| c / s).collect()
    }

    pub fn map_estimate(&self) -> usize {
        argmax(&self.counts).expect("non-empty belief")
    }
}

/// `b(a | o) = O(o | a) b(a) / sum_k O(o | a_k) b(a_k)`.
pub fn posterior<T: Scalar>(belief: &DirichletBelief<T>, model: &ObservationModel<T>, obs: usize) -> Result<Vec<T>> {
    if belief.len() != model.len() {
        return Err(Error::Shape { expected: model.len(), got: belief.len() });
    }
    if obs >= model.len() {
        return Err(Error::Shape { expected: model.len(), got: obs + 1 });
    }
    let prior = belief.prior();
    let joint: Vec<T> = prior.iter().enumerate().map(|(a, &b)| model.prob(obs, a) * b).collect();
    let z: T = joint.iter().copied().sum();
    if !(z > T::zero()) {
        return Err(Error::DegenerateEvidence(obs));
    }
    Ok(joint.into_iter().map(|x| x / z).collect())
}

/// Adds the posterior mass to the counts.
pub fn update<T: Scalar>(belief: &DirichletBelief<T>, post: &[T]) -> Result<DirichletBelief<T>> {
    if post.len() != belief.len() {
        return Err(Error::Shape { expected: belief.len(), got: post.len() });
    }
    let s: T = post.iter().copied().sum();
    if (s - T::one()).abs() > T::of(1e-6) || post.iter().any(|&p| p < T::zero()) {
        return Err(Error::Precondition(format!("posterior must be a distribution, sums to {s}")));
    }
    let counts = belief.counts.iter().zip(post).map(|(&c, &p)| c + p).collect();
    Ok(DirichletBelief { counts })
}

/// Fraction of slots where the prior's argmax names the true action.
pub fn belief_accuracy<T: Scalar>(priors: &[Vec<T>], truths: &[usize]) -> Result<f64> {
    if priors.is_empty() {
        return Err(Error::UndefinedMetric("belief accuracy of an empty sequence"));
    }
    if priors.len() != truths.len() {
        return Err(Error::Shape { expected: priors.len(), got: truths.len() });
    }
    let hits = priors
        .iter()
        .zip(truths)
        .filter(|(p, &a)| argmax(p) == Some(a))
        .count();
    Ok(hits as f64 / priors.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeliefKey {
    /// One belief per (observer, peer, hour).
    #[default]
    PerHour,
    /// One belief per (observer, peer).
    Global,
}

/// Beliefs held by every observer about every peer.
#[derive(Debug, Clone)]
pub struct BeliefStore<T> {
    mode: BeliefKey,
    alphabets: Vec<usize>,
    beliefs: BTreeMap<(usize, usize, u32), DirichletBelief<T>>,
    hits: usize,
    seen: usize,
}

impl<T: Scalar> BeliefStore<T> {
    /// `alphabets[j]` is the action count of agent `j`.
    pub fn new(mode: BeliefKey, alphabets: Vec<usize>) -> Self {
        BeliefStore { mode, alphabets, beliefs: BTreeMap::new(), hits: 0, seen: 0 }
    }

    fn key(&self, observer: usize, peer: usize, hour: u32) -> (usize, usize, u32) {
        match self.mode {
            BeliefKey::PerHour => (observer, peer, hour),
            BeliefKey::Global => (observer, peer, 0),
        }
    }

    pub fn belief(&self, observer: usize, peer: usize, hour: u32) -> DirichletBelief<T> {
        self.beliefs
            .get(&self.key(observer, peer, hour))
            .cloned()
            .unwrap_or_else(|| DirichletBelief::uniform(self.alphabets[peer]))
    }

    pub fn prior(&self, observer: usize, peer: usize, hour: u32) -> Vec<T> {
        self.belief(observer, peer, hour).prior()
    }

    /// Folds one observation in. The prior held before the update is scored
    /// against `true_action` for the running accuracy.
    pub fn observe(
        &mut self,
        observer: usize,
        peer: usize,
        hour: u32,
        obs: usize,
        true_action: usize,
        model: &ObservationModel<T>,
    ) -> Result<()> {
        let b = self.belief(observer, peer, hour);
        self.seen += 1;
        if b.map_estimate() == true_action {
            self.hits += 1;
        }
        let post = posterior(&b, model, obs)?;
        let next = update(&b, &post)?;
        let key = self.key(observer, peer, hour);
        self.beliefs.insert(key, next);
        Ok(())
    }

    /// Running accuracy since the last reset, `None` before any observation.
    pub fn accuracy(&self) -> Option<f64> {
        (self.seen > 0).then(|| self.hits as f64 / self.seen as f64)
    }

    pub fn reset_accuracy(&mut self) {
        self.hits = 0;
        self.seen = 0;
    }
}
