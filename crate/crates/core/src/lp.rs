//! Dense two-phase tableau simplex with Bland's pivoting rule.
//!
//! Solves `max c.x` subject to `A_le x <= b_le`, `A_eq x = b_eq`,
//! `0 <= x <= upper`. Bland's rule (lowest-index entering column, lowest
//! basic index among tied ratios) makes the pivot path, and therefore the
//! returned vertex, deterministic and cycle-free.

use log::trace;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem<T> {
    pub objective: Vec<T>,
    pub le: Vec<(Vec<T>, T)>,
    pub eq: Vec<(Vec<T>, T)>,
    /// Optional per-variable upper bounds (lower bounds are always 0).
    pub upper: Option<Vec<T>>,
}

impl<T: Scalar> LpProblem<T> {
    pub fn new(objective: Vec<T>) -> Self {
        LpProblem { objective, le: Vec::new(), eq: Vec::new(), upper: None }
    }

    pub fn vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_le(&mut self, row: Vec<T>, rhs: T) {
        self.le.push((row, rhs));
    }

    pub fn add_eq(&mut self, row: Vec<T>, rhs: T) {
        self.eq.push((row, rhs));
    }

    fn check(&self) -> Result<()> {
        let n = self.vars();
        for (row, _) in self.le.iter().chain(&self.eq) {
            if row.len() != n {
                return Err(Error::Shape { expected: n, got: row.len() });
            }
        }
        if let Some(u) = &self.upper {
            if u.len() != n {
                return Err(Error::Shape { expected: n, got: u.len() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution<T> {
    pub x: Vec<T>,
    pub objective: T,
    pub pivots: usize,
}

/// Entering-column rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PivotRule {
    /// Lowest-index improving column.
    #[default]
    Bland,
    /// Most improving column, switching to Bland's rule during runs of
    /// degenerate pivots so it cannot cycle.
    Dantzig,
}

struct Tableau<T> {
    rows: Vec<Vec<T>>,
    rhs: Vec<T>,
    basis: Vec<usize>,
    /// Constraint rows as built, before any pivoting.
    orig_rows: Vec<Vec<T>>,
    orig_rhs: Vec<T>,
    /// Original row behind each current tableau row.
    row_ids: Vec<usize>,
    cols: usize,
    pivots: usize,
    eps: T,
    pivot_tol: T,
    rule: PivotRule,
    /// Primal simplex keeps the basis feasible; round-off below zero is
    /// clamped. The dual simplex needs the signs.
    clamp: bool,
}

const DEGENERATE_RUN: usize = 50;
const REINVERT_EVERY: usize = 64;
const MAX_PIVOTS: usize = 200_000;

impl<T: Scalar> Tableau<T> {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for x in self.rows[r].iter_mut() {
            *x /= p;
        }
        self.rhs[r] /= p;
        let (pr, prhs) = (self.rows[r].clone(), self.rhs[r]);
        for i in 0..self.rows.len() {
            if i == r {
                continue;
            }
            let f = self.rows[i][c];
            if f != T::zero() {
                for (x, &y) in self.rows[i].iter_mut().zip(&pr) {
                    *x -= f * y;
                }
                self.rhs[i] -= f * prhs;
                // the ratio test tolerates infeasibility up to eps
                if self.clamp && self.rhs[i] < T::zero() {
                    self.rhs[i] = T::zero();
                }
            }
        }
        self.basis[r] = c;
        self.pivots += 1;
    }

    /// Rebuilds the tableau for the current basis from the original rows
    /// (Gauss-Jordan with partial pivoting), discarding accumulated rounding
    /// error. Leaves the tableau untouched if the basis looks singular.
    fn reinvert(&mut self) {
        let m = self.basis.len();
        let mut rows: Vec<Vec<T>> = self.row_ids.iter().map(|&r| self.orig_rows[r].clone()).collect();
        let mut rhs: Vec<T> = self.row_ids.iter().map(|&r| self.orig_rhs[r]).collect();
        let mut ids = self.row_ids.clone();
        for k in 0..m {
            let c = self.basis[k];
            let piv = (k..m)
                .max_by(|&i, &j| rows[i][c].abs().partial_cmp(&rows[j][c].abs()).expect("finite"))
                .expect("non-empty");
            if rows[piv][c].abs() < self.eps {
                return;
            }
            rows.swap(k, piv);
            rhs.swap(k, piv);
            ids.swap(k, piv);
            let p = rows[k][c];
            for x in rows[k].iter_mut() {
                *x /= p;
            }
            rhs[k] /= p;
            let (pr, prhs) = (rows[k].clone(), rhs[k]);
            for i in 0..m {
                let f = rows[i][c];
                if i != k && f != T::zero() {
                    for (x, &y) in rows[i].iter_mut().zip(&pr) {
                        *x -= f * y;
                    }
                    rhs[i] -= f * prhs;
                }
            }
        }
        if self.clamp {
            for x in rhs.iter_mut() {
                if *x < T::zero() {
                    *x = T::zero();
                }
            }
        }
        self.rows = rows;
        self.rhs = rhs;
        self.row_ids = ids;
    }

    fn reduced_costs(&self, cost: &[T]) -> Vec<T> {
        let mut reduced = cost.to_vec();
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != T::zero() {
                for (x, &y) in reduced.iter_mut().zip(&self.rows[i]) {
                    *x -= cb * y;
                }
            }
        }
        reduced
    }

    fn value(&self, cost: &[T]) -> T {
        self.basis.iter().zip(&self.rhs).map(|(&b, &x)| cost[b] * x).sum()
    }

    /// Maximizes `cost.x` from the current basis. `allowed[j]` gates which
    /// columns may enter.
    fn optimize(&mut self, cost: &[T], allowed: &[bool]) -> Result<T> {
        let mut reduced = self.reduced_costs(cost);
        let mut degenerate = 0;
        let mut since_reinvert = 0;
        loop {
            if self.pivots > MAX_PIVOTS {
                return Err(Error::Divergence);
            }
            if since_reinvert >= REINVERT_EVERY {
                self.reinvert();
                reduced = self.reduced_costs(cost);
                since_reinvert = 0;
            }
            let bland = self.rule == PivotRule::Bland || degenerate >= DEGENERATE_RUN;
            let entering = if bland {
                (0..self.cols).find(|&j| allowed[j] && reduced[j] > self.eps)
            } else {
                let mut best: Option<usize> = None;
                for j in (0..self.cols).filter(|&j| allowed[j] && reduced[j] > self.eps) {
                    if best.map_or(true, |b| reduced[j] > reduced[b]) {
                        best = Some(j);
                    }
                }
                best
            };
            let Some(c) = entering else {
                return Ok(self.value(cost));
            };
            // two-pass ratio test: bound the step with the tolerance, then
            // pick among the rows that fit under it
            let mut theta: Option<T> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][c];
                if a > self.pivot_tol {
                    let t = (self.rhs[i] + self.eps) / a;
                    theta = Some(theta.map_or(t, |th: T| th.min(t)));
                }
            }
            let Some(theta) = theta else {
                return Err(Error::Unbounded);
            };
            let mut best: Option<usize> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][c];
                if a > self.pivot_tol && self.rhs[i] / a <= theta {
                    let better = match best {
                        None => true,
                        Some(b) if bland => self.basis[i] < self.basis[b],
                        Some(b) => a > self.rows[b][c],
                    };
                    if better {
                        best = Some(i);
                    }
                }
            }
            let r = best.expect("a row attains the bound");
            if self.rhs[r] / self.rows[r][c] > self.eps {
                degenerate = 0;
            } else {
                degenerate += 1;
            }
            trace!("pivot row {r} col {c}");
            self.pivot(r, c);
            since_reinvert += 1;
            let f = reduced[c];
            let pr = &self.rows[r];
            for (x, &y) in reduced.iter_mut().zip(pr) {
                *x -= f * y;
            }
        }
    }
}

impl<T: Scalar> Tableau<T> {
    /// Dual simplex from a dual-feasible basis: restores primal feasibility
    /// while keeping every reduced cost non-positive.
    fn dual_optimize(&mut self, cost: &[T]) -> Result<T> {
        let mut reduced = self.reduced_costs(cost);
        if reduced.iter().any(|&d| d > self.eps) {
            return Err(Error::Precondition("starting basis is not dual feasible".into()));
        }
        let mut degenerate = 0;
        let mut since_reinvert = 0;
        loop {
            if self.pivots > MAX_PIVOTS {
                return Err(Error::Divergence);
            }
            if since_reinvert >= REINVERT_EVERY {
                self.reinvert();
                reduced = self.reduced_costs(cost);
                since_reinvert = 0;
            }
            let bland = self.rule == PivotRule::Bland || degenerate >= DEGENERATE_RUN;
            let mut leave: Option<usize> = None;
            for i in 0..self.rows.len() {
                if self.rhs[i] < -self.eps {
                    let better = match leave {
                        None => true,
                        Some(b) if bland => self.basis[i] < self.basis[b],
                        Some(b) => self.rhs[i] < self.rhs[b],
                    };
                    if better {
                        leave = Some(i);
                    }
                }
            }
            let Some(r) = leave else {
                return Ok(self.value(cost));
            };
            let mut enter: Option<(usize, T)> = None;
            for j in 0..self.cols {
                let a = self.rows[r][j];
                if a < -self.pivot_tol {
                    let ratio = reduced[j].min(T::zero()) / a;
                    let better = match enter {
                        None => true,
                        Some((b, br)) => {
                            ratio < br - self.eps || (ratio <= br + self.eps && !bland && a < self.rows[r][b])
                        }
                    };
                    if better {
                        enter = Some((j, ratio));
                    }
                }
            }
            let Some((c, ratio)) = enter else {
                return Err(Error::Infeasible);
            };
            if ratio > self.eps {
                degenerate = 0;
            } else {
                degenerate += 1;
            }
            self.pivot(r, c);
            since_reinvert += 1;
            let f = reduced[c];
            let pr = &self.rows[r];
            for (x, &y) in reduced.iter_mut().zip(pr) {
                *x -= f * y;
            }
        }
    }
}

/// Solves the LP with the dual simplex method from a caller-supplied basis.
///
/// Columns are numbered `[x | one slack per <= row]`; `basis[i]` names the
/// basic column of row `i` (the `<=` rows first, then the equalities). The
/// basis must be dual feasible, i.e. no column has a positive reduced cost.
/// Upper bounds are not supported here.
pub fn lp_solve_dual<T: Scalar>(p: &LpProblem<T>, basis: &[usize]) -> Result<LpSolution<T>> {
    p.check()?;
    if p.upper.is_some() {
        return Err(Error::Precondition("upper bounds need the primal solver".into()));
    }
    let n = p.vars();
    let n_slack = p.le.len();
    let m = n_slack + p.eq.len();
    let cols = n + n_slack;
    if basis.len() != m || basis.iter().any(|&b| b >= cols) {
        return Err(Error::Shape { expected: m, got: basis.len() });
    }
    let mut rows = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    for (i, (a, b)) in p.le.iter().chain(&p.eq).enumerate() {
        let mut row = vec![T::zero(); cols];
        row[..n].copy_from_slice(a);
        if i < n_slack {
            row[n + i] = T::one();
        }
        rows.push(row);
        rhs.push(*b);
    }
    let eps = T::tolerance() * T::of(10.0);
    let mut tab = Tableau {
        orig_rows: rows.clone(),
        orig_rhs: rhs.clone(),
        row_ids: (0..m).collect(),
        rows,
        rhs,
        basis: basis.to_vec(),
        cols,
        pivots: 0,
        eps,
        pivot_tol: eps,
        rule: PivotRule::Dantzig,
        clamp: false,
    };
    tab.reinvert();
    let mut cost = vec![T::zero(); cols];
    cost[..n].copy_from_slice(&p.objective);
    tab.dual_optimize(&cost)?;
    tab.reinvert();
    let mut x = vec![T::zero(); n];
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n {
            x[b] = tab.rhs[i].max(T::zero());
        }
    }
    let objective = x.iter().zip(&p.objective).map(|(&a, &c)| a * c).sum();
    Ok(LpSolution { x, objective, pivots: tab.pivots })
}

/// Solves the LP with Bland's rule. Errors with [`Error::Infeasible`] or
/// [`Error::Unbounded`].
pub fn lp_solve<T: Scalar>(p: &LpProblem<T>) -> Result<LpSolution<T>> {
    lp_solve_with(p, PivotRule::Bland)
}

pub fn lp_solve_with<T: Scalar>(p: &LpProblem<T>, rule: PivotRule) -> Result<LpSolution<T>> {
    p.check()?;
    let n = p.vars();
    let eps = T::tolerance();

    // every constraint becomes an equality row over [x | slacks | artificials]
    let mut le: Vec<(Vec<T>, T)> = p.le.clone();
    if let Some(u) = &p.upper {
        for (j, &ub) in u.iter().enumerate() {
            let mut row = vec![T::zero(); n];
            row[j] = T::one();
            le.push((row, ub));
        }
    }
    let n_slack = le.len();
    let m = le.len() + p.eq.len();
    let n_art = m;
    let cols = n + n_slack + n_art;

    let mut rows = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    for (i, (a, b)) in le.iter().chain(&p.eq).enumerate() {
        let mut row = vec![T::zero(); cols];
        row[..n].copy_from_slice(a);
        if i < n_slack {
            row[n + i] = T::one();
        }
        let mut b = *b;
        if b < T::zero() {
            for x in row.iter_mut() {
                *x = -*x;
            }
            b = -b;
        }
        if i < n_slack && row[n + i] > T::zero() {
            basis.push(n + i);
        } else {
            row[n + n_slack + i] = T::one();
            basis.push(n + n_slack + i);
        }
        rows.push(row);
        rhs.push(b);
    }
    let pivot_tol = eps * T::of(10.0);
    let eps = eps * T::of(10.0);
    let mut tab = Tableau {
        orig_rows: rows.clone(),
        orig_rhs: rhs.clone(),
        row_ids: (0..m).collect(),
        rows,
        rhs,
        basis,
        cols,
        pivots: 0,
        eps,
        pivot_tol,
        rule,
        clamp: true,
    };
    let is_art = |j: usize| j >= n + n_slack;

    if tab.basis.iter().any(|&b| is_art(b)) {
        let cost: Vec<T> = (0..cols).map(|j| if is_art(j) { -T::one() } else { T::zero() }).collect();
        let allowed = vec![true; cols];
        let v = tab.optimize(&cost, &allowed)?;
        let scale = T::one() + tab.rhs.iter().fold(T::zero(), |a, &b| a.max(b));
        if v < -eps * scale * T::of(m as f64) {
            return Err(Error::Infeasible);
        }
        // drive remaining artificials out of the basis, dropping redundant rows
        let mut i = 0;
        while i < tab.rows.len() {
            if is_art(tab.basis[i]) {
                let pick = (0..n + n_slack)
                    .filter(|&j| tab.rows[i][j].abs() > eps)
                    .max_by(|&a, &b| tab.rows[i][a].abs().partial_cmp(&tab.rows[i][b].abs()).expect("finite"));
                match pick {
                    Some(j) => {
                        tab.pivot(i, j);
                        i += 1;
                    }
                    None => {
                        tab.rows.remove(i);
                        tab.row_ids.remove(i);
                        tab.rhs.remove(i);
                        tab.basis.remove(i);
                    }
                }
            } else {
                i += 1;
            }
        }
    }

    let mut cost = vec![T::zero(); cols];
    cost[..n].copy_from_slice(&p.objective);
    let allowed: Vec<bool> = (0..cols).map(|j| !is_art(j)).collect();
    tab.optimize(&cost, &allowed)?;

    tab.reinvert();
    let mut x = vec![T::zero(); n];
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n {
            x[b] = tab.rhs[i];
        }
    }
    let objective = x.iter().zip(&p.objective).map(|(&a, &c)| a * c).sum();
    Ok(LpSolution { x, objective, pivots: tab.pivots })
}
