//! Reference implementations shared by the integration tests. Each one is
//! written from the defining equations, without calling the code it checks.
#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeMap;

use num_rational::Ratio;

pub type Q = Ratio<i64>;

pub fn q(num: i64, den: i64) -> Q {
    Ratio::new(num, den)
}

/// Price-first merit order: the clearing price is the lowest bid level at
/// which offered capacity covers demand (the grid price if none does).
/// Offers below it run in full, offers at it share the rest pro rata,
/// offers above it export everything.
pub struct MarketOracle {
    pub price: Q,
    pub dispatch: BTreeMap<usize, Q>,
    pub export: BTreeMap<usize, Q>,
    pub import: Q,
    pub rejected: Vec<usize>,
}

pub fn market_oracle(offers: &[(usize, Q, Q)], demand: Q, p_grid: Q) -> MarketOracle {
    let rejected: Vec<usize> = offers.iter().filter(|o| o.2 > p_grid).map(|o| o.0).collect();
    let valid: Vec<&(usize, Q, Q)> = offers.iter().filter(|o| o.2 <= p_grid && o.1 > q(0, 1)).collect();
    let mut levels: Vec<Q> = valid.iter().map(|o| o.2).collect();
    levels.sort();
    levels.dedup();
    let supply_upto = |b: Q| valid.iter().filter(|o| o.2 <= b).map(|o| o.1).fold(q(0, 1), |a, c| a + c);
    let marginal = levels.iter().copied().find(|&b| supply_upto(b) >= demand);
    let mut dispatch = BTreeMap::new();
    let mut export = BTreeMap::new();
    let zero = q(0, 1);
    let (price, import) = match marginal {
        None => {
            for o in &valid {
                *dispatch.entry(o.0).or_insert(zero) += o.1;
            }
            (p_grid, demand - supply_upto(p_grid))
        }
        Some(p) => {
            let below: Q = valid.iter().filter(|o| o.2 < p).map(|o| o.1).fold(zero, |a, c| a + c);
            let at: Q = valid.iter().filter(|o| o.2 == p).map(|o| o.1).fold(zero, |a, c| a + c);
            let rest = demand - below;
            for o in &valid {
                let (d, e) = if o.2 < p {
                    (o.1, zero)
                } else if o.2 == p {
                    let share = o.1 * rest / at;
                    (share, o.1 - share)
                } else {
                    (zero, o.1)
                };
                *dispatch.entry(o.0).or_insert(zero) += d;
                *export.entry(o.0).or_insert(zero) += e;
            }
            (p, zero)
        }
    };
    export.retain(|_, v| *v != zero);
    MarketOracle { price, dispatch, export, import, rejected }
}

/// Solves the square system `a x = b` by Gaussian elimination with
/// partial pivoting; `None` when singular.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for c in col..n {
                        a[r][c] -= f * a[col][c];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// `max c x` over `le x <= le_rhs`, `eq x = eq_rhs`, `x >= 0` by visiting
/// every basic solution: choose which inequalities (including `x_i >= 0`)
/// are tight, solve, keep the best feasible one.
pub fn lp_vertex_max(
    c: &[f64],
    le: &[(Vec<f64>, f64)],
    eq: &[(Vec<f64>, f64)],
) -> Option<(f64, Vec<f64>)> {
    let n = c.len();
    let mut cand: Vec<(Vec<f64>, f64)> = le.to_vec();
    for i in 0..n {
        let mut row = vec![0.0; n];
        row[i] = 1.0;
        cand.push((row, 0.0));
    }
    let need = n - eq.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut pick = Vec::new();
    fn rec(
        start: usize,
        need: usize,
        pick: &mut Vec<usize>,
        cand: &[(Vec<f64>, f64)],
        f: &mut dyn FnMut(&[usize]),
    ) {
        if pick.len() == need {
            f(pick);
            return;
        }
        for i in start..cand.len() {
            pick.push(i);
            rec(i + 1, need, pick, cand, f);
            pick.pop();
        }
    }
    let mut visit = |sel: &[usize]| {
        let mut a: Vec<Vec<f64>> = eq.iter().map(|r| r.0.clone()).collect();
        let mut b: Vec<f64> = eq.iter().map(|r| r.1).collect();
        for &i in sel {
            a.push(cand[i].0.clone());
            b.push(cand[i].1);
        }
        let Some(x) = solve_dense(a, b) else { return };
        let tol = 1e-9;
        if x.iter().any(|&v| v < -tol) {
            return;
        }
        if le.iter().any(|(r, rhs)| dot(r, &x) > rhs + tol) {
            return;
        }
        if eq.iter().any(|(r, rhs)| (dot(r, &x) - rhs).abs() > tol) {
            return;
        }
        let v = dot(c, &x);
        if best.as_ref().map_or(true, |(bv, _)| v > *bv) {
            best = Some((v, x));
        }
    };
    rec(0, need, &mut pick, &cand, &mut visit);
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A normal-form game given by per-player action counts and, for each
/// player, a payoff for every profile (row-major over players).
pub struct Game {
    pub counts: Vec<usize>,
    pub payoff: Vec<Vec<f64>>,
}

impl Game {
    pub fn profiles(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn decode(&self, mut p: usize) -> Vec<usize> {
        let mut out = vec![0; self.counts.len()];
        for k in (0..self.counts.len()).rev() {
            out[k] = p % self.counts[k];
            p /= self.counts[k];
        }
        out
    }

    pub fn encode(&self, a: &[usize]) -> usize {
        a.iter().zip(&self.counts).fold(0, |acc, (&x, &n)| acc * n + x)
    }

    /// Largest gain any player could get by deviating from a recommended
    /// action, plus simplex violations.
    pub fn ce_violation(&self, probs: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.counts.len() {
            for rec in 0..self.counts[k] {
                for dev in 0..self.counts[k] {
                    let mut gain = 0.0;
                    for p in 0..self.profiles() {
                        let mut a = self.decode(p);
                        if a[k] != rec {
                            continue;
                        }
                        let base = self.payoff[k][p];
                        a[k] = dev;
                        gain += probs[p] * (self.payoff[k][self.encode(&a)] - base);
                    }
                    worst = worst.max(gain);
                }
            }
        }
        let sum: f64 = probs.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        for &p in probs {
            worst = worst.max(-p);
        }
        worst
    }

    pub fn welfare(&self, probs: &[f64]) -> f64 {
        (0..self.profiles())
            .map(|p| probs[p] * self.payoff.iter().map(|u| u[p]).sum::<f64>())
            .sum()
    }

    /// Welfare-maximizing correlated equilibrium by vertex enumeration.
    pub fn best_ce_by_vertices(&self) -> (f64, Vec<f64>) {
        let n = self.profiles();
        let c: Vec<f64> = (0..n).map(|p| self.payoff.iter().map(|u| u[p]).sum()).collect();
        let mut le = Vec::new();
        for k in 0..self.counts.len() {
            for rec in 0..self.counts[k] {
                for dev in 0..self.counts[k] {
                    if dev == rec {
                        continue;
                    }
                    let mut row = vec![0.0; n];
                    for (p, r) in row.iter_mut().enumerate() {
                        let mut a = self.decode(p);
                        if a[k] == rec {
                            let base = self.payoff[k][p];
                            a[k] = dev;
                            *r = self.payoff[k][self.encode(&a)] - base;
                        }
                    }
                    le.push((row, 0.0));
                }
            }
        }
        lp_vertex_max(&c, &le, &[(vec![1.0; n], 1.0)]).expect("a correlated equilibrium always exists")
    }
}

/// Projected gradient descent on a smooth box-constrained objective.
pub fn projected_gradient(
    grad: impl Fn(&[f64]) -> Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    step: f64,
    iters: usize,
) -> Vec<f64> {
    let mut x: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
    for _ in 0..iters {
        let g = grad(&x);
        for i in 0..x.len() {
            x[i] = (x[i] - step * g[i]).clamp(lo[i], hi[i]);
        }
    }
    x
}
