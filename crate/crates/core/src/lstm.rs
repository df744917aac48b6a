//! Small stacked LSTM Q-network with hand-written backpropagation through
//! time.
//!
//! Architecture: linear input layer, `layers` LSTM layers of `cells` memory
//! cells (input, forget, candidate and output gates), linear head over the
//! joint action space. All weights live in one flat vector so that SGD,
//! target syncing and checkpointing are plain slice operations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmShape {
    pub input: usize,
    /// Width of the linear input layer.
    pub embed: usize,
    pub cells: usize,
    pub layers: usize,
    pub outputs: usize,
}

impl LstmShape {
    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.embed
        } else {
            self.cells
        }
    }

    fn layer_size(&self, l: usize) -> usize {
        let g = 4 * self.cells;
        g * self.layer_in(l) + g * self.cells + g
    }

    fn w_in(&self) -> usize {
        0
    }

    fn b_in(&self) -> usize {
        self.embed * self.input
    }

    fn layer_start(&self, l: usize) -> usize {
        let base = self.b_in() + self.embed;
        base + (0..l).map(|k| self.layer_size(k)).sum::<usize>()
    }

    fn head_start(&self) -> usize {
        self.layer_start(self.layers)
    }

    pub fn param_count(&self) -> usize {
        self.head_start() + self.outputs * self.cells + self.outputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmNetwork<T> {
    pub shape: LstmShape,
    pub params: Vec<T>,
}

/// Recurrent state of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<Vec<T>>,
    pub c: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    input: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    /// Activated gates `[i | f | g | o]`.
    gates: Vec<T>,
    c: Vec<T>,
    tanh_c: Vec<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// one exp instead of the slower libm tanh
fn tanh<T: Scalar>(x: T) -> T {
    let two = T::of(2.0);
    two * sigmoid(two * x) - T::one()
}

/// `out += m v` for a row-major `rows x v.len()` block.
fn matvec_add<T: Scalar>(m: &[T], v: &[T], out: &mut [T]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += dot(row, v);
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += m^T d`.
fn matvec_t_add<T: Scalar>(m: &[T], d: &[T], out: &mut [T]) {
    let cols = out.len();
    for (&di, row) in d.iter().zip(m.chunks_exact(cols)) {
        if di != T::zero() {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * di;
            }
        }
    }
}

/// `g += d v^T`.
fn outer_add<T: Scalar>(d: &[T], v: &[T], g: &mut [T]) {
    let cols = v.len();
    for (&di, row) in d.iter().zip(g.chunks_exact_mut(cols)) {
        if di != T::zero() {
            for (x, &b) in row.iter_mut().zip(v) {
                *x += di * b;
            }
        }
    }
}

impl<T: Scalar> LstmNetwork<T> {
    pub fn zeros(shape: LstmShape) -> Self {
        LstmNetwork { shape, params: vec![T::zero(); shape.param_count()] }
    }

    /// Weights uniform in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(shape: LstmShape, scale: f64, rng: &mut R) -> Self {
        let params = (0..shape.param_count()).map(|_| T::of(rng.gen_range(-scale..=scale))).collect();
        LstmNetwork { shape, params }
    }

    pub fn initial_state(&self) -> LstmState<T> {
        let z = vec![T::zero(); self.shape.cells];
        LstmState { h: vec![z.clone(); self.shape.layers], c: vec![z; self.shape.layers] }
    }

    fn embed(&self, x: &[T]) -> Vec<T> {
        let s = &self.shape;
        let mut e = self.params[s.b_in()..s.b_in() + s.embed].to_vec();
        matvec_add(&self.params[s.w_in()..s.b_in()], x, &mut e);
        e
    }

    fn cell(&self, l: usize, v: &[T], h_prev: &[T], c_prev: &[T]) -> StepCache<T> {
        let s = &self.shape;
        let (cells, d) = (s.cells, s.layer_in(l));
        let g4 = 4 * cells;
        let w0 = s.layer_start(l);
        let u0 = w0 + g4 * d;
        let b0 = u0 + g4 * cells;
        let mut z = self.params[b0..b0 + g4].to_vec();
        matvec_add(&self.params[w0..u0], v, &mut z);
        matvec_add(&self.params[u0..b0], h_prev, &mut z);
        for (k, x) in z.iter_mut().enumerate() {
            *x = if (2 * cells..3 * cells).contains(&k) { tanh(*x) } else { sigmoid(*x) };
        }
        let mut c = vec![T::zero(); cells];
        let mut tanh_c = vec![T::zero(); cells];
        for j in 0..cells {
            c[j] = z[cells + j] * c_prev[j] + z[j] * z[2 * cells + j];
            tanh_c[j] = tanh(c[j]);
        }
        StepCache {
            input: v.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates: z,
            c,
            tanh_c,
        }
    }

    fn head(&self, h: &[T]) -> Vec<T> {
        let s = &self.shape;
        let w0 = s.head_start();
        let b0 = w0 + s.outputs * s.cells;
        let mut q = self.params[b0..b0 + s.outputs].to_vec();
        matvec_add(&self.params[w0..b0], h, &mut q);
        q
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.shape.input {
            return Err(Error::Shape { expected: self.shape.input, got: x.len() });
        }
        Ok(())
    }

    /// Runs the recurrent layers on one input and returns the top hidden
    /// vector.
    fn advance(&self, state: &mut LstmState<T>, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let s = &self.shape;
        let cells = s.cells;
        let g4 = 4 * cells;
        let mut v = self.embed(x);
        let mut z = vec![T::zero(); g4];
        for l in 0..s.layers {
            let w0 = s.layer_start(l);
            let u0 = w0 + g4 * s.layer_in(l);
            let b0 = u0 + g4 * cells;
            z.copy_from_slice(&self.params[b0..b0 + g4]);
            matvec_add(&self.params[w0..u0], &v, &mut z);
            matvec_add(&self.params[u0..b0], &state.h[l], &mut z);
            let (c, h) = (&mut state.c[l], &mut state.h[l]);
            for j in 0..cells {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[cells + j]);
                let g = tanh(z[2 * cells + j]);
                let o = sigmoid(z[3 * cells + j]);
                c[j] = f * c[j] + i * g;
                h[j] = o * tanh(c[j]);
            }
            v.clear();
            v.extend_from_slice(h);
        }
        Ok(v)
    }

    /// Advances `state` by one input and returns the Q vector.
    pub fn step(&self, state: &mut LstmState<T>, x: &[T]) -> Result<Vec<T>> {
        let top = self.advance(state, x)?;
        Ok(self.head(&top))
    }

    /// Q vector after consuming `xs` from a fresh hidden state.
    pub fn forward(&self, xs: &[Vec<T>]) -> Result<Vec<T>> {
        if xs.is_empty() {
            return Err(Error::Precondition("empty input sequence".into()));
        }
        let mut state = self.initial_state();
        let mut top = Vec::new();
        for x in xs {
            top = self.advance(&mut state, x)?;
        }
        Ok(self.head(&top))
    }

    /// Forward pass over `xs` followed by backpropagation of `dq`, the
    /// gradient of the loss with respect to the final Q vector. Gradients are
    /// accumulated into `grad`; the final Q vector is returned.
    pub fn backward(&self, xs: &[Vec<T>], dq: &[T], grad: &mut [T]) -> Result<Vec<T>> {
        self.backward_with(xs, grad, |_, _| dq.to_vec())
    }

    /// Like [`LstmNetwork::backward`], with the output gradient computed by
    /// `dq_of` from the forward Q vector and the final recurrent state.
    pub fn backward_with(
        &self,
        xs: &[Vec<T>],
        grad: &mut [T],
        dq_of: impl FnOnce(&[T], &LstmState<T>) -> Vec<T>,
    ) -> Result<Vec<T>> {
        let s = self.shape;
        if grad.len() != self.params.len() {
            return Err(Error::Shape { expected: self.params.len(), got: grad.len() });
        }
        if xs.is_empty() {
            return Err(Error::Precondition("empty input sequence".into()));
        }
        let (cells, layers) = (s.cells, s.layers);
        // forward with caches[t][l]
        let mut caches: Vec<Vec<StepCache<T>>> = Vec::with_capacity(xs.len());
        let mut state = self.initial_state();
        let mut top = Vec::new();
        for x in xs {
            self.check_input(x)?;
            let mut v = self.embed(x);
            let mut row = Vec::with_capacity(layers);
            for l in 0..layers {
                let cache = self.cell(l, &v, &state.h[l], &state.c[l]);
                let h: Vec<T> = (0..cells).map(|j| cache.gates[3 * cells + j] * cache.tanh_c[j]).collect();
                state.c[l] = cache.c.clone();
                state.h[l] = h.clone();
                v = h;
                row.push(cache);
            }
            top = v;
            caches.push(row);
        }
        let q = self.head(&top);
        let dq = dq_of(&q, &state);
        if dq.len() != s.outputs {
            return Err(Error::Shape { expected: s.outputs, got: dq.len() });
        }
        let dq = &dq[..];

        // head
        let w0 = s.head_start();
        let b0 = w0 + s.outputs * cells;
        outer_add(dq, &top, &mut grad[w0..b0]);
        for (g, &d) in grad[b0..b0 + s.outputs].iter_mut().zip(dq) {
            *g += d;
        }
        let mut dh_top = vec![T::zero(); cells];
        matvec_t_add(&self.params[w0..b0], dq, &mut dh_top);

        let mut dh_next = vec![vec![T::zero(); cells]; layers];
        let mut dc_next = vec![vec![T::zero(); cells]; layers];
        let g4 = 4 * cells;
        for t in (0..xs.len()).rev() {
            let mut dh_above = if t + 1 == xs.len() { dh_top.clone() } else { vec![T::zero(); cells] };
            for l in (0..layers).rev() {
                let c = &caches[t][l];
                let d = s.layer_in(l);
                let wl = s.layer_start(l);
                let ul = wl + g4 * d;
                let bl = ul + g4 * cells;
                let mut dz = vec![T::zero(); g4];
                let mut dc_prev = vec![T::zero(); cells];
                for j in 0..cells {
                    let (i, f, g, o) = (c.gates[j], c.gates[cells + j], c.gates[2 * cells + j], c.gates[3 * cells + j]);
                    let dh = dh_above[j] + dh_next[l][j];
                    let dc = dh * o * (T::one() - c.tanh_c[j] * c.tanh_c[j]) + dc_next[l][j];
                    dz[j] = dc * g * i * (T::one() - i);
                    dz[cells + j] = dc * c.c_prev[j] * f * (T::one() - f);
                    dz[2 * cells + j] = dc * i * (T::one() - g * g);
                    dz[3 * cells + j] = dh * c.tanh_c[j] * o * (T::one() - o);
                    dc_prev[j] = dc * f;
                }
                outer_add(&dz, &c.input, &mut grad[wl..ul]);
                outer_add(&dz, &c.h_prev, &mut grad[ul..bl]);
                for (gb, &dzk) in grad[bl..bl + g4].iter_mut().zip(&dz) {
                    *gb += dzk;
                }
                let mut dv = vec![T::zero(); d];
                matvec_t_add(&self.params[wl..ul], &dz, &mut dv);
                let mut dhp = vec![T::zero(); cells];
                matvec_t_add(&self.params[ul..bl], &dz, &mut dhp);
                dh_next[l] = dhp;
                dc_next[l] = dc_prev;
                dh_above = dv;
            }
            // linear input layer
            let x = &xs[t];
            outer_add(&dh_above, x, &mut grad[s.w_in()..s.b_in()]);
            for (gb, &dv) in grad[s.b_in()..s.b_in() + s.embed].iter_mut().zip(&dh_above) {
                *gb += dv;
            }
        }
        Ok(q)
    }

    /// `params -= lr * grad`.
    pub fn sgd(&mut self, grad: &[T], lr: T) {
        for (p, &g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}
