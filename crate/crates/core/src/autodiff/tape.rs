use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`]. The wrapped index is the tape position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Map(Var, fn(f64) -> f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Transpose(Var),
    SliceCols(Var, usize),
    Reshape(Var),
    PadBorder(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode autodiff record. Nodes are appended in evaluation order, so the
/// inputs of every node sit at lower positions than the node itself.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    t.dims2().ok_or_else(|| TensorError::Rank {
        op,
        expected: 2,
        shape: t.shape().to_vec(),
    })
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`; all zeros when
    /// `v` did not contribute.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.value(v).shape()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aip * b;
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = require_2d("add_row", tx)?;
        if tb.len() != n || tb.ndim() > 2 || (tb.ndim() == 2 && tb.shape()[0] != 1) {
            return Err(shape_err("add_row", tx, tb));
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let value = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::from_vec(tx.shape(), data).expect("same shape");
        self.push(value, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, gelu, Op::Gelu(x))
    }

    /// Absolute value; the subgradient at zero is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::abs, Op::Abs(x))
    }

    /// Custom element-wise function `f` whose derivative is supplied as `df`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        self.map_unary(x, f, Op::Map(x, df))
    }

    /// Softmax over the last axis with row-max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (_, n) = require_2d("softmax", tx)?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (m, n) = require_2d("layer_norm", tx)?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != n {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. The identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutProbability(p));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    /// Selects rows of a 2-D table; also serves as the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (rows, cols) = require_2d("gather_rows", tt)?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(tt.row(i));
        }
        let value = Tensor::from_vec(&[idx.len(), cols], data)?;
        Ok(self.push(value, Op::GatherRows(table, idx.to_vec())))
    }

    /// Sums row `k` of `src` into output row `idx[k]`, visiting `k` in order.
    pub fn scatter_add_rows(
        &mut self,
        src: Var,
        idx: &[usize],
        out_rows: usize,
    ) -> Result<Var, TensorError> {
        let ts = self.value(src);
        let (rows, cols) = require_2d("scatter_add_rows", ts)?;
        if rows != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                left: ts.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let mut data = vec![0.0; out_rows * cols];
        for (k, &target) in idx.iter().enumerate() {
            if target >= out_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: target,
                    len: out_rows,
                });
            }
            for (o, s) in data[target * cols..(target + 1) * cols].iter_mut().zip(ts.row(k)) {
                *o += s;
            }
        }
        let value = Tensor::from_vec(&[out_rows, cols], data)?;
        Ok(self.push(value, Op::ScatterAddRows(src, idx.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(TensorError::Empty { op: "mean" });
        }
        let s = tx.data().iter().sum::<f64>() / tx.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x)))
    }

    /// Sums a 2-D tensor over `axis`, keeping that axis with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (m, n) = require_2d("sum_axis", tx)?;
        let value = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, v) in out.iter_mut().zip(tx.row(i)) {
                        *o += v;
                    }
                }
                Tensor::from_vec(&[1, n], out)?
            }
            1 => {
                let out = (0..m).map(|i| tx.row(i).iter().sum()).collect();
                Tensor::from_vec(&[m, 1], out)?
            }
            _ => return Err(TensorError::Axis { op: "sum_axis", axis }),
        };
        Ok(self.push(value, Op::SumAxis(x, axis)))
    }

    /// Concatenates 2-D tensors along `axis`.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs.first().ok_or(TensorError::Empty { op: "concat" })?;
        let (_, c0) = require_2d("concat", self.value(*first))?;
        let (r0, _) = require_2d("concat", self.value(*first))?;
        let value = match axis {
            0 => {
                let mut rows = 0;
                let mut data = Vec::new();
                for &v in xs {
                    let t = self.value(v);
                    let (r, c) = require_2d("concat", t)?;
                    if c != c0 {
                        return Err(shape_err("concat", self.value(*first), t));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::from_vec(&[rows, c0], data)?
            }
            1 => {
                let mut cols = 0;
                for &v in xs {
                    let t = self.value(v);
                    let (r, c) = require_2d("concat", t)?;
                    if r != r0 {
                        return Err(shape_err("concat", self.value(*first), t));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &v in xs {
                        data.extend_from_slice(self.value(v).row(i));
                    }
                }
                Tensor::from_vec(&[r0, cols], data)?
            }
            _ => return Err(TensorError::Axis { op: "concat", axis }),
        };
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (m, n) = require_2d("transpose", tx)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = tx.at2(i, j);
            }
        }
        let value = Tensor::from_vec(&[n, m], data)?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (m, n) = require_2d("slice_cols", tx)?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let value = Tensor::from_vec(&[m, len], data)?;
        Ok(self.push(value, Op::SliceCols(x, start)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: tx.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = tx.with_shape(shape);
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Surrounds an `n × n` matrix with a leading row and column filled with a
    /// one-element `border` value, giving `(n+1) × (n+1)`. The corner `(0, 0)`
    /// is zero.
    pub fn pad_border(&mut self, inner: Var, border: Var) -> Result<Var, TensorError> {
        let (ti, tb) = (self.value(inner), self.value(border));
        let (n, n2) = require_2d("pad_border", ti)?;
        if n != n2 || tb.len() != 1 {
            return Err(shape_err("pad_border", ti, tb));
        }
        let b = tb.data()[0];
        let size = n + 1;
        let mut data = vec![b; size * size];
        data[0] = 0.0;
        for i in 0..n {
            data[(i + 1) * size + 1..(i + 2) * size].copy_from_slice(ti.row(i));
        }
        let value = Tensor::from_vec(&[size, size], data)?;
        Ok(self.push(value, Op::PadBorder(inner, border)))
    }

    /// Populates gradients of `loss` with respect to every recorded value.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for pos in (0..=loss.0).rev() {
            let Some(g) = grads[pos].take() else { continue };
            let node = &self.nodes[pos];
            let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            };
            let vals = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (vals(*a), vals(*b));
                    let (m, k) = ta.dims2().expect("2d");
                    let n = tb.shape()[1];
                    let (da, db, dg) = (ta.data(), tb.data(), g.data());
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dg[i * n + j] * db[p * n + j];
                            }
                            ga[i * k + p] = s;
                            let aip = da[i * k + p];
                            if aip != 0.0 {
                                for j in 0..n {
                                    gb[p * n + j] += aip * dg[i * n + j];
                                }
                            }
                        }
                    }
                    acc(*a, Tensor::from_vec(&[m, k], ga)?);
                    acc(*b, Tensor::from_vec(&[k, n], gb)?);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    let neg = g.data().iter().map(|v| -v).collect();
                    acc(*b, Tensor::from_vec(g.shape(), neg)?);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (vals(*a), vals(*b));
                    let ga = g.data().iter().zip(tb.data()).map(|(d, y)| d * y).collect();
                    let gb = g.data().iter().zip(ta.data()).map(|(d, x)| d * x).collect();
                    acc(*a, Tensor::from_vec(g.shape(), ga)?);
                    acc(*b, Tensor::from_vec(g.shape(), gb)?);
                }
                Op::AddRow(x, bias) => {
                    let tb = vals(*bias);
                    let n = tb.len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n.max(1)) {
                        for (o, d) in gb.iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                    acc(*x, g.clone());
                    acc(*bias, Tensor::from_vec(tb.shape(), gb)?);
                }
                Op::Scale(x, c) => {
                    let gx = g.data().iter().map(|d| d * c).collect();
                    acc(*x, Tensor::from_vec(g.shape(), gx)?);
                }
                Op::AddScalar(x) => acc(*x, g.clone()),
                Op::Relu(x) => {
                    let gx = g
                        .data()
                        .iter()
                        .zip(vals(*x).data())
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect();
                    acc(*x, Tensor::from_vec(g.shape(), gx)?);
                }
                Op::Gelu(x) => {
                    let gx = g
                        .data()
                        .iter()
                        .zip(vals(*x).data())
                        .map(|(d, v)| d * gelu_grad(*v))
                        .collect();
                    acc(*x, Tensor::from_vec(g.shape(), gx)?);
                }
                Op::Abs(x) => {
                    let gx = g
                        .data()
                        .iter()
                        .zip(vals(*x).data())
                        .map(|(d, v)| {
                            if *v > 0.0 {
                                *d
                            } else if *v < 0.0 {
                                -*d
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(*x, Tensor::from_vec(g.shape(), gx)?);
                }
                Op::Map(x, df) => {
                    let gx = g
                        .data()
                        .iter()
                        .zip(vals(*x).data())
                        .map(|(d, v)| d * df(*v))
                        .collect();
                    acc(*x, Tensor::from_vec(g.shape(), gx)?);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let n = y.shape()[1];
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g
                        .data()
                        .chunks(n.max(1))
                        .zip(y.data().chunks(n.max(1)))
                        .zip(gx.chunks_mut(n.max(1)))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, Tensor::from_vec(y.shape(), gx)?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let tg = vals(*gamma);
                    let (m, n) = node.value.dims2().expect("2d");
                    let mut gx = vec![0.0; m * n];
                    let mut gg = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    let dg = g.data();
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = dg[i * n + j];
                            let h = xhat[i * n + j];
                            gg[j] += d * h;
                            gbeta[j] += d;
                            let dh = d * tg.data()[j];
                            mean_d += dh;
                            mean_dx += dh * h;
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let dh = dg[i * n + j] * tg.data()[j];
                            gx[i * n + j] = inv_std[i] * (dh - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                    acc(*x, Tensor::from_vec(&[m, n], gx)?);
                    acc(*gamma, Tensor::from_vec(tg.shape(), gg)?);
                    acc(*beta, Tensor::from_vec(vals(*beta).shape(), gbeta)?);
                }
                Op::Dropout(x, mask) => {
                    let gx = g.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                    acc(*x, Tensor::from_vec(g.shape(), gx)?);
                }
                Op::GatherRows(table, idx) => {
                    let tt = vals(*table);
                    let cols = tt.shape()[1];
                    let mut gt = vec![0.0; tt.len()];
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, d) in gt[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g.data()[k * cols..(k + 1) * cols])
                        {
                            *o += d;
                        }
                    }
                    acc(*table, Tensor::from_vec(tt.shape(), gt)?);
                }
                Op::ScatterAddRows(src, idx) => {
                    let cols = node.value.shape()[1];
                    let mut gs = Vec::with_capacity(idx.len() * cols);
                    for &t in idx {
                        gs.extend_from_slice(&g.data()[t * cols..(t + 1) * cols]);
                    }
                    acc(*src, Tensor::from_vec(&[idx.len(), cols], gs)?);
                }
                Op::Sum(x) => {
                    let d = g.data()[0];
                    acc(*x, Tensor::full(vals(*x).shape(), d));
                }
                Op::Mean(x) => {
                    let tx = vals(*x);
                    let d = g.data()[0] / tx.len() as f64;
                    acc(*x, Tensor::full(tx.shape(), d));
                }
                Op::SumAxis(x, axis) => {
                    let tx = vals(*x);
                    let (m, n) = tx.dims2().expect("2d");
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                        }
                    }
                    acc(*x, Tensor::from_vec(&[m, n], gx)?);
                }
                Op::Concat(xs, axis) => {
                    let (total_rows, total_cols) = node.value.dims2().expect("2d");
                    let mut offset = 0;
                    for &v in xs {
                        let (r, c) = vals(v).dims2().expect("2d");
                        let part = if *axis == 0 {
                            g.data()[offset * total_cols..(offset + r) * total_cols].to_vec()
                        } else {
                            let mut p = Vec::with_capacity(r * c);
                            for i in 0..total_rows {
                                p.extend_from_slice(&g.row(i)[offset..offset + c]);
                            }
                            p
                        };
                        offset += if *axis == 0 { r } else { c };
                        acc(v, Tensor::from_vec(&[r, c], part)?);
                    }
                }
                Op::Transpose(x) => {
                    let (n, m) = g.dims2().expect("2d");
                    let mut gx = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            gx[j * n + i] = g.at2(i, j);
                        }
                    }
                    acc(*x, Tensor::from_vec(&[m, n], gx)?);
                }
                Op::SliceCols(x, start) => {
                    let tx = vals(*x);
                    let (m, n) = tx.dims2().expect("2d");
                    let len = g.shape()[1];
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        gx[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
                    }
                    acc(*x, Tensor::from_vec(&[m, n], gx)?);
                }
                Op::Reshape(x) => acc(*x, g.with_shape(vals(*x).shape())),
                Op::PadBorder(inner, border) => {
                    let size = g.shape()[0];
                    let n = size - 1;
                    let mut gi = vec![0.0; n * n];
                    let mut gb = 0.0;
                    for i in 0..size {
                        for j in 0..size {
                            let d = g.at2(i, j);
                            if (i == 0) != (j == 0) {
                                gb += d;
                            } else if i > 0 {
                                gi[(i - 1) * n + (j - 1)] = d;
                            }
                        }
                    }
                    acc(*inner, Tensor::from_vec(&[n, n], gi)?);
                    acc(*border, Tensor::full(vals(*border).shape(), gb));
                }
            }
            grads[pos] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}
