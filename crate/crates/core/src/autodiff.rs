//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! The tape records every operation of a forward pass together with the
//! values it produced. `backward` walks the records in reverse and
//! accumulates adjoints. Nodes created with [`Tape::constant`] (data and
//! frozen weights) never receive gradients, and neither does anything that
//! depends only on constants.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::real::Real;

pub type Mat<T> = Array2<T>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Gelu {
        x: Var,
        deriv: Option<Mat<T>>,
    },
    Silu(Var),
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    BlurCols {
        x: Var,
        rows: (usize, usize),
        cols: (usize, usize),
        kernel: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Mat<T>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads[v.0].take()
    }
}

const LN_EPS: f64 = 1e-6;

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let x3 = x * x * x;
    let inner = c * (x + a * x3);
    // tanh through one exp; saturates cleanly to ±1 when exp over/underflows
    let th = T::one() - T::of(2.0) / ((inner + inner).exp() + T::one());
    let value = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (value, deriv)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Index of the reflected position for a 1-D convolution with reflective
/// boundary handling. The edge sample is repeated (`.. b a | a b c | c b ..`),
/// which keeps the convolution matrix of a symmetric kernel symmetric and so
/// preserves the sum of the signal.
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let j = i.rem_euclid(period);
    if j >= len as isize {
        (period - 1 - j) as usize
    } else {
        j as usize
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
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

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    /// Trainable input.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `a + 1·row`, with `row` of shape `1 × n`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a row vector");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Row-broadcast elementwise product.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a row vector");
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    /// Per-row layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = T::of(xv.ncols() as f64);
        let eps = T::of(LN_EPS);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|e| e - mean);
            let var = row.iter().map(|&e| e * e).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|e| e * is);
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, inv_std }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let ng = self.ng(x);
        let src = self.value(x);
        let mut v = Mat::zeros(src.dim());
        let deriv = if ng {
            let mut d = Mat::zeros(src.dim());
            Zip::from(&mut v)
                .and(&mut d)
                .and(src)
                .for_each(|v, d, &e| (*v, *d) = gelu_parts(e));
            Some(d)
        } else {
            Zip::from(&mut v).and(src).for_each(|v, &e| *v = gelu_parts(e).0);
            None
        };
        self.push(v, Op::Gelu { x, deriv }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e * sigmoid(e));
        let ng = self.ng(x);
        self.push(v, Op::Silu(x), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.ng(x);
        self.push(v, Op::SliceCols(x, start), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(x);
        self.push(v, Op::SliceRows(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row lookup `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        let ng = self.ng(table);
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Convolves the sub-block `rows × cols` of `x` along its columns with
    /// `kernel` (odd length, reflective boundary); other entries pass through.
    pub fn blur_cols(&mut self, x: Var, rows: (usize, usize), cols: (usize, usize), kernel: &[T]) -> Var {
        let mut out = self.value(x).clone();
        let src = self.value(x);
        let width = cols.1 - cols.0;
        let r = (kernel.len() / 2) as isize;
        for i in rows.0..rows.1 {
            for j in 0..width {
                let mut acc = T::zero();
                for (k, &w) in kernel.iter().enumerate() {
                    let jj = reflect_index(j as isize + k as isize - r, width);
                    acc += w * src[[i, cols.0 + jj]];
                }
                out[[i, cols.0 + j]] = acc;
            }
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::BlurCols {
                x,
                rows,
                cols,
                kernel: kernel.to_vec(),
            },
            ng,
        )
    }

    /// Mean squared error against a constant target; yields a `1 × 1` node.
    pub fn mse(&mut self, pred: Var, target: Mat<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "mse shape mismatch");
        let n = T::of(p.len() as f64);
        let mut acc = T::zero();
        Zip::from(p).and(&target).for_each(|&a, &b| {
            let d = a - b;
            acc += d * d;
        });
        let v = Mat::from_elem((1, 1), acc / n);
        let ng = self.ng(pred);
        self.push(v, Op::Mse { pred, target }, ng)
    }

    /// Back-propagates the given seed adjoints (typically `(loss, [[1]])`).
    ///
    /// Several seeds may be supplied; their contributions add.
    pub fn backward(&self, seeds: &[(Var, Mat<T>)]) -> Grads<T> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).dim(), g.dim(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.view());
            last = last.max(v.0);
        }

        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b);
                    accumulate_gemm(grads, *a, g.view(), bv.t(), self.value(*a).dim());
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    accumulate_gemm(grads, *b, av.t(), g.view(), self.value(*b).dim());
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b);
                    accumulate_gemm(grads, *a, g.view(), bv.view(), self.value(*a).dim());
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    accumulate_gemm(grads, *b, g.t(), av.view(), self.value(*b).dim());
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.view());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.view());
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.view());
                }
                if self.ng(*row) {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *row, gr.view());
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let ga = g * self.value(*b);
                    accumulate(grads, *a, ga.view());
                }
                if self.ng(*b) {
                    let gb = g * self.value(*a);
                    accumulate(grads, *b, gb.view());
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    let ga = g * self.value(*row);
                    accumulate(grads, *a, ga.view());
                }
                if self.ng(*row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *row, gr.view());
                }
            }
            Op::Scale(a, k) => {
                let ga = g * *k;
                accumulate(grads, *a, ga.view());
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let d = T::of(y.ncols() as f64);
                let mut gx = Mat::zeros(y.dim());
                for (i, ((mut out, gy), yy)) in gx.rows_mut().into_iter().zip(g.rows()).zip(y.rows()).enumerate() {
                    let mean_g = gy.sum() / d;
                    let mean_gy = gy.iter().zip(yy.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
                    let is = inv_std[i];
                    Zip::from(&mut out)
                        .and(&gy)
                        .and(&yy)
                        .for_each(|o, &gi, &yi| *o = is * (gi - mean_g - yi * mean_gy));
                }
                accumulate(grads, *x, gx.view());
            }
            Op::Gelu { x, deriv } => {
                let gx = g * deriv.as_ref().expect("derivative kept for differentiable input");
                accumulate(grads, *x, gx.view());
            }
            Op::Silu(x) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*x)).for_each(|gi, &xi| {
                    let s = sigmoid(xi);
                    *gi *= s * (T::one() + xi * (T::one() - s));
                });
                accumulate(grads, *x, gx.view());
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.dim());
                for ((mut out, gy), yy) in gx.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                    let dot = gy.iter().zip(yy.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    Zip::from(&mut out)
                        .and(&gy)
                        .and(&yy)
                        .for_each(|o, &gi, &yi| *o = yi * (gi - dot));
                }
                accumulate(grads, *x, gx.view());
            }
            Op::SliceCols(x, start) => {
                let dim = self.value(*x).dim();
                let gx = ensure(grads, *x, dim);
                let mut dst = gx.slice_mut(s![.., *start..*start + g.ncols()]);
                dst += g;
            }
            Op::SliceRows(x, start) => {
                let dim = self.value(*x).dim();
                let gx = ensure(grads, *x, dim);
                let mut dst = gx.slice_mut(s![*start..*start + g.nrows(), ..]);
                dst += g;
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        accumulate(grads, p, g.slice(s![.., off..off + w]));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.ng(p) {
                        accumulate(grads, p, g.slice(s![off..off + h, ..]));
                    }
                    off += h;
                }
            }
            Op::Gather { table, ids } => {
                let dim = self.value(*table).dim();
                let gt = ensure(grads, *table, dim);
                for (i, &id) in ids.iter().enumerate() {
                    let mut dst = gt.row_mut(id);
                    dst += &g.row(i);
                }
            }
            Op::BlurCols { x, rows, cols, kernel } => {
                let mut gx = g.clone();
                let width = cols.1 - cols.0;
                let r = (kernel.len() / 2) as isize;
                for i in rows.0..rows.1 {
                    for j in 0..width {
                        gx[[i, cols.0 + j]] = T::zero();
                    }
                    for j in 0..width {
                        let gij = g[[i, cols.0 + j]];
                        for (k, &w) in kernel.iter().enumerate() {
                            let jj = reflect_index(j as isize + k as isize - r, width);
                            gx[[i, cols.0 + jj]] += w * gij;
                        }
                    }
                }
                accumulate(grads, *x, gx.view());
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let k = g[[0, 0]] * T::of(2.0 / p.len() as f64);
                let mut gp = p - target;
                gp.mapv_inplace(|e| e * k);
                accumulate(grads, *pred, gp.view());
            }
        }
    }
}

fn ensure<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, dim: (usize, usize)) -> &mut Mat<T> {
    grads[v.0].get_or_insert_with(|| Mat::zeros(dim))
}

fn accumulate<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, g: ArrayView2<T>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g.to_owned()),
    }
}

fn accumulate_gemm<T: Real>(
    grads: &mut [Option<Mat<T>>],
    v: Var,
    a: ArrayView2<T>,
    b: ArrayView2<T>,
    dim: (usize, usize),
) {
    match &mut grads[v.0] {
        Some(acc) => general_mat_mul(T::one(), &a, &b, T::one(), acc),
        slot @ None => {
            let mut out = Mat::zeros(dim);
            general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
            *slot = Some(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` w.r.t. every entry of `x`.
    fn numeric_grad(x: &Mat<f64>, f: impl Fn(&Mat<f64>) -> f64) -> Mat<f64> {
        let h = 1e-6;
        Mat::from_shape_fn(x.dim(), |idx| {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x: Mat<f64>, w: Mat<f64>) {
        // loss = sum(out ⊙ w)
        let run = |xv: &Mat<f64>| {
            let mut t = Tape::new();
            let xi = t.param(xv.clone());
            let out = build(&mut t, xi);
            (t.value(out) * &w).sum()
        };
        let mut t = Tape::new();
        let xi = t.param(x.clone());
        let out = build(&mut t, xi);
        let grads = t.backward(&[(out, w.clone())]);
        let analytic = grads.get(xi).unwrap().clone();
        let numeric = numeric_grad(&x, run);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn elementwise_and_norm_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 5);
        let w = rand_mat(&mut rng, 3, 5);
        check(|t, x| t.layer_norm(x), x.clone(), w.clone());
        check(|t, x| t.gelu(x), x.clone(), w.clone());
        check(|t, x| t.silu(x), x.clone(), w.clone());
        check(|t, x| t.softmax(x), x.clone(), w.clone());
        check(
            |t, x| {
                let a = t.mul(x, x);
                t.scale(a, 0.3)
            },
            x.clone(),
            w.clone(),
        );
        check(|t, x| t.blur_cols(x, (1, 3), (1, 5), &[0.2, 0.5, 0.3]), x, w);
    }

    #[test]
    fn matmul_and_structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 3, 2);
        let c = rand_mat(&mut rng, 5, 3);
        let row = rand_mat(&mut rng, 1, 3);
        check(
            {
                let b = b.clone();
                move |t, x| {
                    let bv = t.constant(b.clone());
                    t.matmul(x, bv)
                }
            },
            x.clone(),
            rand_mat(&mut rng, 4, 2),
        );
        check(
            {
                let c = c.clone();
                move |t, x| {
                    let cv = t.param(c.clone());
                    t.matmul_nt(x, cv)
                }
            },
            x.clone(),
            rand_mat(&mut rng, 4, 5),
        );
        check(
            {
                let c = c.clone();
                move |t, x| {
                    let cv = t.param(c.clone());
                    t.matmul_nt(cv, x)
                }
            },
            x.clone(),
            rand_mat(&mut rng, 5, 4),
        );
        check(
            {
                let row = row.clone();
                move |t, x| {
                    let r = t.param(row.clone());
                    let a = t.mul_row(x, r);
                    let b = t.add_row(a, r);
                    let l = t.slice_cols(b, 1, 3);
                    let top = t.slice_rows(x, 0, 2);
                    let tl = t.slice_cols(top, 0, 2);
                    let both = t.concat_rows(&[l, tl]);
                    t.concat_cols(&[both, both])
                }
            },
            x.clone(),
            rand_mat(&mut rng, 6, 4),
        );
        check(|t, x| t.gather(x, &[3, 0, 3, 1]), x.clone(), rand_mat(&mut rng, 4, 3));
        // row-vector gradients
        check(
            {
                let x = x.clone();
                move |t, r| {
                    let xv = t.param(x.clone());
                    let a = t.mul_row(xv, r);
                    t.add_row(a, r)
                }
            },
            row,
            rand_mat(&mut rng, 4, 3),
        );
    }

    #[test]
    fn mse_gradient() {
        let target = array![[1.0, -2.0], [0.5, 0.0]];
        check(
            move |t, x| t.mse(x, target.clone()),
            array![[0.3, 0.1], [-0.2, 0.9]],
            array![[1.0]],
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(array![[1.0, 2.0]]);
        let b = t.param(array![[3.0], [4.0]]);
        let y = t.matmul(a, b);
        let g = t.backward(&[(y, array![[1.0]])]);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &array![[1.0], [2.0]]);
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(array![[1000.0, 0.0, -5.0], [0.1, 0.2, 0.3]]);
        let y = t.softmax(x);
        for row in t.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reflect_index_repeats_edge() {
        assert_eq!(reflect_index(-1, 5), 0);
        assert_eq!(reflect_index(-2, 5), 1);
        assert_eq!(reflect_index(5, 5), 4);
        assert_eq!(reflect_index(6, 5), 3);
        assert_eq!(reflect_index(-3, 1), 0);
        assert_eq!(reflect_index(-3, 2), 1);
        assert_eq!(reflect_index(4, 2), 0);
    }
}
