//! Temporal graph memory.
//!
//! Static KC keys `M_k`, a learnable query matrix `M_q` and a per-student
//! value matrix `M_v`. Reads attend the values through a two-layer graph
//! convolution whose adjacency comes from `M_q M_k^T`; writes go through
//! erase/add gates, followed by a relevancy-dependent forgetting decay.
//!
//! Every operation exists twice: as a tape builder (`*_on`) used by the model
//! for batched training, and as a plain method on [`TemporalGraphMemory`]
//! which runs the same builder on constants. In the batched builders a batch
//! of `B` memories is stacked row-wise into a `(B*N) x d_v` matrix and the
//! relevancy weights are flattened to length `B*N` in the same order.

use std::cell::Cell;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Real, Tape, Var};
use crate::error::{Result, TgmnError};

/// How the last GCN layer is reduced to the read vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Flatten `N x d_v` and project to `d_v`.
    #[default]
    Flatten,
    /// Average the `N` rows, then project `d_v -> d_v`.
    MeanPool,
}

impl Readout {
    pub fn input_dim(self, num_kcs: usize, d_v: usize) -> usize {
        match self {
            Readout::Flatten => num_kcs * d_v,
            Readout::MeanPool => d_v,
        }
    }
}

thread_local! {
    static DECAY_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of decay applications recorded on this thread.
pub fn decay_invocations() -> u64 {
    DECAY_CALLS.with(Cell::get)
}

/// Relevancy weights `softmax(q K^T / tau)` for each row of `queries`.
pub fn relevancy<T: Real>(queries: ArrayView2<T>, keys: ArrayView2<T>, tau: f64) -> Array2<T> {
    let logits = queries.dot(&keys.t()) / T::of(tau);
    softmax_rows(&logits.view())
}

/// Per-row decay multipliers `(1 - gamma)^(1 - w)`.
pub fn decay_factors<T: Real>(w: ArrayView1<T>, gamma: f64) -> Array1<T> {
    let keep = T::of(1.0 - gamma);
    w.mapv(|wi| keep.powf(T::one() - wi))
}

/// Linear-interpolation quantile of all entries.
pub fn quantile<T: Real>(values: ArrayView2<T>, q: f64) -> T {
    let mut sorted: Vec<T> = values.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite adjacency"));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::of(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Symmetric normalization `D^-1/2 (A + I) D^-1/2` as a constant multiplier on
/// `A + I`. Degrees count the entries of `A + I` at or above the quantile cutoff,
/// with the diagonal always kept.
pub fn normalization<T: Real>(a_hat: ArrayView2<T>, mask_quantile: f64) -> Array2<T> {
    let n = a_hat.nrows();
    let cutoff = quantile(a_hat, mask_quantile);
    let inv_sqrt: Vec<T> = (0..n)
        .map(|i| {
            let degree = (0..n).filter(|&j| i == j || a_hat[[i, j]] >= cutoff).count();
            T::one() / T::of(degree as f64).sqrt()
        })
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| inv_sqrt[i] * inv_sqrt[j])
}

/// `softmax_rows(M_q M_k^T / sqrt(d_k))`. `kc_keys_t` is `M_k^T`.
pub fn adjacency_on<T: Real>(tape: &mut Tape<T>, queries: Var, kc_keys_t: Var) -> Var {
    let d_k = tape.shape(kc_keys_t).0;
    let logits = tape.matmul(queries, kc_keys_t);
    let logits = tape.scale(logits, T::one() / T::of(d_k as f64).sqrt());
    tape.softmax_rows(logits)
}

/// Propagation matrix. The mask only shapes the degree normalization, so no
/// gradient flows through it.
pub fn propagation_on<T: Real>(tape: &mut Tape<T>, adjacency: Var, mask_quantile: f64) -> Var {
    let n = tape.shape(adjacency).0;
    let eye = tape.constant(Array2::eye(n));
    let a_hat = tape.add(adjacency, eye);
    let norm = normalization(tape.value(a_hat).view(), mask_quantile);
    tape.mul_const(a_hat, norm)
}

/// Trainable read-path handles.
#[derive(Clone, Debug)]
pub struct ReadVars {
    pub gcn: Vec<Var>,
    pub head_w: Var,
    pub head_b: Var,
    pub readout: Readout,
}

/// Batched read. `values` is `(B*N) x d_v`, `w` has length `B*N`.
/// Returns the `B x d_v` read vectors and every GCN layer output.
pub fn read_on<T: Real>(
    tape: &mut Tape<T>,
    prop: Var,
    values: Var,
    w: &Array1<T>,
    vars: &ReadVars,
) -> (Var, Vec<Var>) {
    let n = tape.shape(prop).0;
    let (rows, d_v) = tape.shape(values);
    let batch = rows / n;
    let mut h = tape.scale_rows(values, w.clone());
    let mut layers = vec![h];
    for &weight in &vars.gcn {
        let weighted = tape.scale_rows(h, w.clone());
        let mixed = tape.block_left_mul(prop, weighted, n);
        let lin = tape.matmul(mixed, weight);
        h = tape.relu(lin);
        layers.push(h);
    }
    let flat = tape.reshape(h, batch, n * d_v);
    let pooled = match vars.readout {
        Readout::Flatten => flat,
        Readout::MeanPool => {
            let scale = T::one() / T::of(n as f64);
            let pool = Array2::from_shape_fn((n * d_v, d_v), |(i, j)| if i % d_v == j { scale } else { T::zero() });
            let pool = tape.constant(pool);
            tape.matmul(flat, pool)
        }
    };
    let lin = tape.matmul(pooled, vars.head_w);
    let lin = tape.add_row(lin, vars.head_b);
    (tape.tanh(lin), layers)
}

/// Erase/add gate handles.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub erase_w: Var,
    pub erase_b: Var,
    pub add_w: Var,
    pub add_b: Var,
}

/// Gate activations `(e, z)` for a `B x dim(u)` batch of update vectors.
pub fn gates_on<T: Real>(tape: &mut Tape<T>, u: Var, gates: &GateVars) -> (Var, Var) {
    let e = tape.matmul(u, gates.erase_w);
    let e = tape.add_row(e, gates.erase_b);
    let e = tape.sigmoid(e);
    let z = tape.matmul(u, gates.add_w);
    let z = tape.add_row(z, gates.add_b);
    (e, tape.tanh(z))
}

/// `M(i) (1 - w(i) e) + w(i) z` for every memory row, with `e` and `z` given
/// per batch element (`B x d_v`).
pub fn write_on<T: Real>(tape: &mut Tape<T>, values: Var, erase: Var, add: Var, w: &Array1<T>) -> Var {
    let (rows, d_v) = tape.shape(values);
    let times = rows / tape.shape(erase).0;
    let erase = tape.repeat_rows(erase, times);
    let erase = tape.scale_rows(erase, w.clone());
    let ones = tape.constant(Array2::ones((rows, d_v)));
    let keep = tape.sub(ones, erase);
    let kept = tape.mul(values, keep);
    let add = tape.repeat_rows(add, times);
    let add = tape.scale_rows(add, w.clone());
    tape.add(kept, add)
}

/// Gated value update.
pub fn update_on<T: Real>(tape: &mut Tape<T>, values: Var, u: Var, w: &Array1<T>, gates: &GateVars) -> Var {
    let (e, z) = gates_on(tape, u, gates);
    write_on(tape, values, e, z, w)
}

/// Forgetting decay with precomputed per-row factors.
pub fn decay_on<T: Real>(tape: &mut Tape<T>, values: Var, factors: Array1<T>) -> Var {
    DECAY_CALLS.with(|c| c.set(c.get() + 1));
    tape.scale_rows(values, factors)
}

/// One student's memory with all weights needed to read and write it.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraphMemory<T> {
    pub kc_keys: Array2<T>,
    pub queries: Array2<T>,
    pub values: Array2<T>,
    pub gcn_weights: Vec<Array2<T>>,
    pub read_w: Array2<T>,
    pub read_b: Array2<T>,
    pub erase_w: Array2<T>,
    pub erase_b: Array2<T>,
    pub add_w: Array2<T>,
    pub add_b: Array2<T>,
    pub readout: Readout,
    pub tau: f64,
    pub gamma: f64,
    pub mask_quantile: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadResult<T> {
    pub w: Array1<T>,
    pub r: Array1<T>,
    pub adjacency: Array2<T>,
    pub prop: Array2<T>,
    pub layers: Vec<Array2<T>>,
}

impl<T: Real> TemporalGraphMemory<T> {
    pub fn num_kcs(&self) -> usize {
        self.kc_keys.nrows()
    }

    pub fn d_v(&self) -> usize {
        self.values.ncols()
    }

    pub fn address(&self, question_key: ArrayView1<T>) -> Result<Array1<T>> {
        if question_key.len() != self.kc_keys.ncols() {
            return Err(TgmnError::shape("question_key", self.kc_keys.ncols(), question_key.len()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(TgmnError::Argument(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if question_key.iter().chain(self.kc_keys.iter()).any(|v| !v.is_finite()) {
            return Err(TgmnError::Numeric("non-finite key in addressing".into()));
        }
        let q = question_key.insert_axis(Axis(0));
        Ok(relevancy(q, self.kc_keys.view(), self.tau).row(0).to_owned())
    }

    pub fn adjacency(&self) -> Array2<T> {
        let mut tape = Tape::new();
        let q = tape.constant(self.queries.clone());
        let kt = tape.constant(self.kc_keys.t().to_owned());
        let a = adjacency_on(&mut tape, q, kt);
        tape.value(a).clone()
    }

    /// Reads the memory under relevancy `w`.
    pub fn read(&self, w: ArrayView1<T>) -> Result<ReadResult<T>> {
        self.check_w(w)?;
        let adjacency = self.adjacency();
        let mut tape = Tape::new();
        let a = tape.constant(adjacency.clone());
        let prop = propagation_on(&mut tape, a, self.mask_quantile);
        let values = tape.constant(self.values.clone());
        let vars = self.read_vars(&mut tape);
        let w = w.to_owned();
        let (r, layers) = read_on(&mut tape, prop, values, &w, &vars);
        Ok(ReadResult {
            r: tape.value(r).row(0).to_owned(),
            adjacency,
            prop: tape.value(prop).clone(),
            layers: layers.iter().map(|&l| tape.value(l).clone()).collect(),
            w,
        })
    }

    fn read_vars(&self, tape: &mut Tape<T>) -> ReadVars {
        ReadVars {
            gcn: self.gcn_weights.iter().map(|g| tape.constant(g.clone())).collect(),
            head_w: tape.constant(self.read_w.clone()),
            head_b: tape.constant(self.read_b.clone()),
            readout: self.readout,
        }
    }

    /// Gated write of update vector `u`.
    pub fn update(&mut self, u: ArrayView1<T>, w: ArrayView1<T>) -> Result<()> {
        self.check_w(w)?;
        if u.len() != self.erase_w.nrows() {
            return Err(TgmnError::shape("u", self.erase_w.nrows(), u.len()));
        }
        let mut tape = Tape::new();
        let values = tape.constant(self.values.clone());
        let u = tape.constant(u.to_owned().insert_axis(Axis(0)));
        let gates = GateVars {
            erase_w: tape.constant(self.erase_w.clone()),
            erase_b: tape.constant(self.erase_b.clone()),
            add_w: tape.constant(self.add_w.clone()),
            add_b: tape.constant(self.add_b.clone()),
        };
        let out = update_on(&mut tape, values, u, &w.to_owned(), &gates);
        self.values = tape.value(out).clone();
        Ok(())
    }

    /// Multiplies row `i` by `(1 - gamma)^(1 - w(i))`.
    pub fn decay(&mut self, w: ArrayView1<T>, gamma: f64) -> Result<()> {
        self.check_w(w)?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(TgmnError::Argument(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        let mut tape = Tape::new();
        let values = tape.constant(std::mem::take(&mut self.values));
        let out = decay_on(&mut tape, values, decay_factors(w, gamma));
        self.values = tape.value(out).clone();
        Ok(())
    }

    fn check_w(&self, w: ArrayView1<T>) -> Result<()> {
        if w.len() != self.num_kcs() {
            return Err(TgmnError::shape("w", self.num_kcs(), w.len()));
        }
        Ok(())
    }
}
