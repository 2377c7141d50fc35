//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value on the tape is an `Array2`; vectors are carried as `1 x n` or
//! `n x 1` matrices. The op set is the small closed vocabulary the memory
//! network needs, each with a hand-written adjoint. The engine is generic over
//! the scalar so training can run in `f32` and gradient checks in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable on the tape.
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + FromStr
    + Send
    + Sync
    + 'static
{
    /// Name written into checkpoint manifests.
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Array1<T>),
    MulConst(Var, Array2<T>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    BlockLeftMul { left: Var, right: Var, block: usize },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    RepeatRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Bce { probs: Var, labels: Vec<T>, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    grad: bool,
}

/// Gradients of a scalar root with respect to the tape's gradient-tracking leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Array2<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of `shape` when the root does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Array2<T> {
        self.get(var).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array2<T> {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> T {
        self.nodes[var.0].value[[0, 0]]
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    fn tracks(&self, var: Var) -> bool {
        self.nodes[var.0].grad
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracking leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of a node's value as a constant: gradients stop here.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let grad = self.tracks(a) || self.tracks(b);
        self.push(value, Op::MatMul(a, b), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let value = self.value(a) + self.value(b);
        let grad = self.tracks(a) || self.tracks(b);
        self.push(value, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let value = self.value(a) - self.value(b);
        let grad = self.tracks(a) || self.tracks(b);
        self.push(value, Op::Sub(a, b), grad)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let value = self.value(a) * self.value(b);
        let grad = self.tracks(a) || self.tracks(b);
        self.push(value, Op::Mul(a, b), grad)
    }

    /// `a + 1·bias` where `bias` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "add_row bias shape");
        let value = self.value(a) + self.value(bias);
        let grad = self.tracks(a) || self.tracks(bias);
        self.push(value, Op::AddRow(a, bias), grad)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a) * factor;
        let grad = self.tracks(a);
        self.push(value, Op::Scale(a, factor), grad)
    }

    /// Multiplies row `i` of `a` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Array1<T>) -> Var {
        assert_eq!(self.shape(a).0, factors.len(), "scale_rows length");
        let value = self.value(a) * &factors.view().insert_axis(Axis(1));
        let grad = self.tracks(a);
        self.push(value, Op::ScaleRows(a, factors), grad)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, factors: Array2<T>) -> Var {
        assert_eq!(self.shape(a), factors.dim(), "mul_const shape");
        let value = self.value(a) * &factors;
        let grad = self.tracks(a);
        self.push(value, Op::MulConst(a, factors), grad)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let grad = self.tracks(a);
        self.push(value, Op::Sigmoid(a), grad)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(Float::tanh);
        let grad = self.tracks(a);
        self.push(value, Op::Tanh(a), grad)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        let grad = self.tracks(a);
        self.push(value, Op::Relu(a), grad)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(Float::abs);
        let grad = self.tracks(a);
        self.push(value, Op::Abs(a), grad)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.value(a).view());
        let grad = self.tracks(a);
        self.push(value, Op::SoftmaxRows(a), grad)
    }

    /// Applies the square matrix `left` to each consecutive block of `block`
    /// rows of `right`, i.e. a block-diagonal product with a shared block.
    pub fn block_left_mul(&mut self, left: Var, right: Var, block: usize) -> Var {
        assert_eq!(self.shape(left), (block, block), "block_left_mul left shape");
        let (rows, cols) = self.shape(right);
        assert_eq!(rows % block, 0, "block_left_mul row count");
        let mut value = Array2::zeros((rows, cols));
        {
            let l = self.value(left);
            let r = self.value(right);
            for b in 0..rows / block {
                let range = s![b * block..(b + 1) * block, ..];
                value.slice_mut(range).assign(&l.dot(&r.slice(range)));
            }
        }
        let grad = self.tracks(left) || self.tracks(right);
        self.push(value, Op::BlockLeftMul { left, right, block }, grad)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("reshape preserves element count");
        let grad = self.tracks(a);
        self.push(value, Op::Reshape(a), grad)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts");
        let grad = parts.iter().any(|&p| self.tracks(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), grad)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows column counts");
        let grad = parts.iter().any(|&p| self.tracks(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), grad)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        if start == 0 && end == self.shape(a).0 {
            return a;
        }
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let grad = self.tracks(a);
        self.push(value, Op::SliceRows(a, start), grad)
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (rows, cols) = self.shape(a);
        let src = self.value(a);
        let value = Array2::from_shape_fn((rows * times, cols), |(i, j)| src[[i / times, j]]);
        let grad = self.tracks(a);
        self.push(value, Op::RepeatRows(a, times), grad)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let value = src.select(Axis(0), indices);
        let grad = self.tracks(a);
        self.push(value, Op::GatherRows(a, indices.to_vec()), grad)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let grad = self.tracks(a);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), grad)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mean = v.sum() / T::of(v.len() as f64);
        let grad = self.tracks(a);
        self.push(Array2::from_elem((1, 1), mean), Op::Mean(a), grad)
    }

    /// Mean binary cross-entropy of a column of probabilities, clamped to
    /// `[eps, 1 - eps]` before taking logarithms.
    pub fn bce(&mut self, probs: Var, labels: &[T], eps: T) -> Var {
        let p = self.value(probs);
        assert_eq!(p.len(), labels.len(), "bce length");
        let value = bce_value(p.iter().copied(), labels.iter().copied(), eps);
        let grad = self.tracks(probs);
        self.push(
            Array2::from_elem((1, 1), value),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
                eps,
            },
            grad,
        )
    }

    /// Back-propagates from the scalar `root`. Only leaves keep their gradients.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<T>>], var: Var, delta: Array2<T>) {
        if !self.tracks(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Array2<T>, g: Array2<T>, grads: &mut [Option<Array2<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracks(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.tracks(*b) {
                    let gb = self.value(*a).t().dot(&g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.tracks(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.tracks(*b) {
                    self.accumulate(grads, *b, g.mapv(|v| -v));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.tracks(*a) {
                    self.accumulate(grads, *a, &g * self.value(*b));
                }
                if self.tracks(*b) {
                    self.accumulate(grads, *b, &g * self.value(*a));
                }
            }
            Op::AddRow(a, bias) => {
                if self.tracks(*bias) {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *bias, gb);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, g * *factor),
            Op::ScaleRows(a, factors) => {
                let ga = g * &factors.view().insert_axis(Axis(1));
                self.accumulate(grads, *a, ga);
            }
            Op::MulConst(a, factors) => self.accumulate(grads, *a, g * factors),
            Op::Sigmoid(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(out).for_each(|gi, &y| *gi = *gi * y * (T::one() - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(out).for_each(|gi, &y| *gi = *gi * (T::one() - y * y));
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(out).for_each(|gi, &y| {
                    if y <= T::zero() {
                        *gi = T::zero();
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                    *gi = if x > T::zero() {
                        *gi
                    } else if x < T::zero() {
                        -*gi
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let dot = (&g * out).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ga = out * &(&g - &dot);
                self.accumulate(grads, *a, ga);
            }
            Op::BlockLeftMul { left, right, block } => {
                let block = *block;
                let l = self.value(*left);
                let r = self.value(*right);
                let blocks = r.nrows() / block;
                if self.tracks(*left) {
                    let mut gl = Array2::zeros((block, block));
                    for b in 0..blocks {
                        let range = s![b * block..(b + 1) * block, ..];
                        gl += &g.slice(range).dot(&r.slice(range).t());
                    }
                    self.accumulate(grads, *left, gl);
                }
                if self.tracks(*right) {
                    let mut gr = Array2::zeros(r.dim());
                    for b in 0..blocks {
                        let range = s![b * block..(b + 1) * block, ..];
                        gr.slice_mut(range).assign(&l.t().dot(&g.slice(range)));
                    }
                    self.accumulate(grads, *right, gr);
                }
            }
            Op::Reshape(a) => {
                let ga = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(self.shape(*a))
                    .expect("reshape adjoint preserves element count");
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    if self.tracks(p) {
                        let gp = g.slice(s![.., offset..offset + cols]).to_owned();
                        self.accumulate(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.tracks(p) {
                        let gp = g.slice(s![offset..offset + rows, ..]).to_owned();
                        self.accumulate(grads, p, gp);
                    }
                    offset += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                self.accumulate(grads, *a, ga);
            }
            Op::RepeatRows(a, times) => {
                let (rows, cols) = self.shape(*a);
                let ga = g
                    .into_shape_with_order((rows, *times, cols))
                    .expect("repeat adjoint shape")
                    .sum_axis(Axis(1));
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, indices) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (row, &src) in indices.iter().enumerate() {
                    let mut target = ga.row_mut(src);
                    target += &g.row(row);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = T::of((shape.0 * shape.1) as f64);
                self.accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
            }
            Op::Bce { probs, labels, eps } => {
                let p = self.value(*probs);
                let n = T::of(labels.len() as f64);
                let upstream = g[[0, 0]];
                let mut ga = Array2::zeros(p.dim());
                for ((slot, &pi), &ai) in ga.iter_mut().zip(p.iter()).zip(labels.iter()) {
                    if pi > *eps && pi < T::one() - *eps {
                        *slot = upstream * (-ai / pi + (T::one() - ai) / (T::one() - pi)) / n;
                    }
                }
                self.accumulate(grads, *probs, ga);
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Real>(x: &ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub(crate) fn bce_value<T: Real>(
    probs: impl Iterator<Item = T>,
    labels: impl Iterator<Item = T>,
    eps: T,
) -> T {
    let mut total = T::zero();
    let mut n = 0usize;
    for (p, a) in probs.zip(labels) {
        let p = p.max(eps).min(T::one() - eps);
        total -= a * p.ln() + (T::one() - a) * (T::one() - p).ln();
        n += 1;
    }
    total / T::of(n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Compares the tape gradient of `build` with central differences for every
    /// entry of every input.
    fn check(inputs: Vec<Array2<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);
        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
            let r = build(&mut t, &vs);
            t.scalar(r)
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], x.dim());
            for idx in 0..x.len() {
                let (i, j) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[k][[i, j]] += h;
                let mut minus = inputs.clone();
                minus[k][[i, j]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[i, j]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} entry ({i},{j}): analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let c = random(3, 2, &mut rng);
        check(vec![a, b, c], |t, v| {
            let p = t.matmul(v[0], v[1]);
            let q = t.mul(p, v[2]);
            let r = t.sigmoid(q);
            let s = t.tanh(p);
            let u = t.sub(r, s);
            let w = t.add(u, v[2]);
            t.sum(w)
        });
    }

    #[test]
    fn softmax_and_row_ops_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(4, 3, &mut rng);
        let bias = random(1, 3, &mut rng);
        let weights = random(4, 3, &mut rng);
        check(vec![a, bias, weights], |t, v| {
            let x = t.add_row(v[0], v[1]);
            let y = t.softmax_rows(x);
            let z = t.scale_rows(y, array![0.5, -1.0, 2.0, 0.25]);
            let m = t.mul(z, v[2]);
            let k = t.scale(m, 3.0);
            t.mean(k)
        });
    }

    #[test]
    fn structural_op_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let left = random(2, 2, &mut rng);
        let right = random(6, 3, &mut rng);
        let extra = random(3, 1, &mut rng);
        check(vec![left, right, extra], |t, v| {
            let b = t.block_left_mul(v[0], v[1], 2);
            let r = t.reshape(b, 3, 6);
            let c = t.concat_cols(&[r, v[2]]);
            let top = t.slice_rows(c, 0, 2);
            let rep = t.repeat_rows(top, 3);
            let g = t.gather_rows(rep, &[5, 0, 0, 3]);
            let both = t.concat_rows(&[g, top]);
            let a = t.abs(both);
            let rl = t.relu(both);
            let s = t.add(a, rl);
            t.sum(s)
        });
    }

    #[test]
    fn bce_adjoint_and_value() {
        let p = array![[0.2], [0.7], [0.55]];
        check(vec![p.clone()], |t, v| t.bce(v[0], &[0.0, 1.0, 1.0], 1e-7));
        let mut tape = Tape::new();
        let v = tape.constant(array![[0.5]]);
        let l = tape.bce(v, &[1.0], 1e-7);
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(array![[1.0, 2.0]]);
        let c = tape.constant(array![[3.0, 4.0]]);
        let m = tape.mul(a, c);
        let s = tape.sum(m);
        let g = tape.backward(s);
        assert_eq!(g.get(a).unwrap(), &array![[3.0, 4.0]]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn softmax_rows_is_normalized_and_stable() {
        let x = array![[1000.0, 1000.0], [0.0, f64::ln(2.0)]];
        let y = softmax_rows(&x.view());
        assert!((y[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((y[[1, 1]] - 2.0 / 3.0).abs() < 1e-15);
    }
}
