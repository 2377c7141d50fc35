//! Short-term sequence context.
//!
//! Within the current window, the target question attends over the keys of the
//! questions answered before it, and a stacked GRU reads the relevancy-scaled
//! update vectors of those questions in order. The window's first interaction
//! has no past, so its context is the zero initial state.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::autodiff::{softmax_rows, Real, Tape, Var};
use crate::error::{Result, TgmnError};

/// `softmax(<k, k_i> / tau)` over past keys (rows of `past`). Empty past gives
/// an empty vector.
pub fn sequence_relevancy<T: Real>(question_key: ArrayView1<T>, past: ArrayView2<T>, tau: f64) -> Array1<T> {
    if past.nrows() == 0 {
        return Array1::zeros(0);
    }
    let logits = past.dot(&question_key) / T::of(tau);
    softmax_rows(&logits.insert_axis(Axis(0)).view()).row(0).to_owned()
}

/// Tape handles for one GRU layer; gate order is reset, update, candidate.
#[derive(Clone, Copy, Debug)]
pub struct GruLayerVars {
    pub w_i: [Var; 3],
    pub w_h: [Var; 3],
    pub b_i: [Var; 3],
    pub b_h: [Var; 3],
}

/// One GRU step. `x_proj` holds the three input projections `x W_i` (no bias).
///
/// r = sig(x W_ir + b_ir + h W_hr + b_hr)
/// z = sig(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = n + z * (h - n)
pub fn gru_cell_on<T: Real>(tape: &mut Tape<T>, layer: &GruLayerVars, x_proj: [Var; 3], h: Var) -> Var {
    let gate = |tape: &mut Tape<T>, g: usize| {
        let hp = tape.matmul(h, layer.w_h[g]);
        let hp = tape.add_row(hp, layer.b_h[g]);
        let xp = tape.add_row(x_proj[g], layer.b_i[g]);
        (xp, hp)
    };
    let (xr, hr) = gate(tape, 0);
    let r = tape.add(xr, hr);
    let r = tape.sigmoid(r);
    let (xz, hz) = gate(tape, 1);
    let z = tape.add(xz, hz);
    let z = tape.sigmoid(z);
    let (xn, hn) = gate(tape, 2);
    let rh = tape.mul(r, hn);
    let n = tape.add(xn, rh);
    let n = tape.tanh(n);
    let diff = tape.sub(h, n);
    let zd = tape.mul(z, diff);
    tape.add(n, zd)
}

/// Input projections `x W_i` for the three gates.
pub fn project_on<T: Real>(tape: &mut Tape<T>, layer: &GruLayerVars, x: Var) -> [Var; 3] {
    [0, 1, 2].map(|g| tape.matmul(x, layer.w_i[g]))
}

/// Inverted-dropout settings for activations passed between layers.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Runs the stacked GRU over a sequence whose first-layer input projections
/// are given per step. Returns the top layer's final hidden state
/// (`batch x hidden`), or zeros for an empty sequence.
pub fn run_gru_on<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    layers: &[GruLayerVars],
    first_inputs: &[[Var; 3]],
    batch: usize,
    mut dropout: Option<Dropout<'_, R>>,
) -> Var {
    let hidden = tape.shape(layers[0].w_h[0]).0;
    let zeros = tape.constant(Array2::zeros((batch, hidden)));
    let mut state = vec![zeros; layers.len()];
    for proj in first_inputs {
        let mut below = gru_cell_on(tape, &layers[0], *proj, state[0]);
        state[0] = below;
        for l in 1..layers.len() {
            if let Some(d) = dropout.as_mut() {
                below = apply_dropout(tape, below, d);
            }
            let proj = project_on(tape, &layers[l], below);
            below = gru_cell_on(tape, &layers[l], proj, state[l]);
            state[l] = below;
        }
    }
    *state.last().expect("at least one layer")
}

fn apply_dropout<T: Real, R: Rng>(tape: &mut Tape<T>, x: Var, d: &mut Dropout<'_, R>) -> Var {
    if d.rate <= 0.0 {
        return x;
    }
    let keep = T::of(1.0 / (1.0 - d.rate));
    let mask = Array2::from_shape_fn(tape.shape(x), |_| {
        if d.rng.gen::<f64>() < d.rate {
            T::zero()
        } else {
            keep
        }
    });
    tape.mul_const(x, mask)
}

/// Plain weights of one GRU layer, gate order reset, update, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct GruLayer<T> {
    pub w_i: [Array2<T>; 3],
    pub w_h: [Array2<T>; 3],
    pub b_i: [Array2<T>; 3],
    pub b_h: [Array2<T>; 3],
}

impl<T: Real> GruLayer<T> {
    pub fn input_dim(&self) -> usize {
        self.w_i[0].nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w_h[0].nrows()
    }

    fn bind(&self, tape: &mut Tape<T>) -> GruLayerVars {
        let mut c = |a: &[Array2<T>; 3]| [0, 1, 2].map(|g| tape.constant(a[g].clone()));
        GruLayerVars {
            w_i: c(&self.w_i),
            w_h: c(&self.w_h),
            b_i: c(&self.b_i),
            b_h: c(&self.b_h),
        }
    }
}

/// `h = GRU((o(i) U(i))_i)` with dropout off. `u` holds one past update vector
/// per row.
pub fn sequence_context<T: Real>(o: ArrayView1<T>, u: ArrayView2<T>, core: &[GruLayer<T>]) -> Result<Array1<T>> {
    if core.is_empty() {
        return Err(TgmnError::Argument("recurrent core has no layers".into()));
    }
    if o.len() != u.nrows() {
        return Err(TgmnError::shape("o", u.nrows(), o.len()));
    }
    if u.nrows() > 0 && u.ncols() != core[0].input_dim() {
        return Err(TgmnError::shape("U", core[0].input_dim(), u.ncols()));
    }
    let mut tape = Tape::new();
    let layers: Vec<GruLayerVars> = core.iter().map(|l| l.bind(&mut tape)).collect();
    let inputs: Vec<[Var; 3]> = (0..u.nrows())
        .map(|i| {
            let x = tape.constant((&u.row(i) * o[i]).insert_axis(Axis(0)));
            project_on(&mut tape, &layers[0], x)
        })
        .collect();
    let h = run_gru_on::<T, rand_chacha::ChaCha8Rng>(&mut tape, &layers, &inputs, 1, None);
    Ok(tape.value(h).row(0).to_owned())
}
