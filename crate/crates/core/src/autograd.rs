//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every op appends a node whose parents are strictly earlier on the tape, so
//! reverse tape order is a topological order and backward visits each node
//! once. A node requires a gradient iff one of its parents does.

use crate::error::TensorError;
use crate::tensor::{gemm, numel_of, split_axis, MatView, Real, Tensor};

type OpResult = Result<Var, TensorError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Derivative<T> = Box<dyn Fn(T) -> T + Send + Sync>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Map {
        x: Var,
        df: Derivative<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Patchify {
        image: Var,
        patch: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

/// Names of every differentiable op recorded by [`Graph`].
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "matmul",
    "transpose",
    "softmax",
    "causal_softmax",
    "layer_norm",
    "gelu",
    "map",
    "concat",
    "slice",
    "reshape",
    "sum",
    "sum_axis",
    "patchify",
    "gather_rows",
    "l2_normalize",
    "cross_entropy",
];

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Map { .. } => "map",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Patchify { .. } => "patchify",
            Op::GatherRows { .. } => "gather_rows",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`. Nodes that require a gradient but were not reached
    /// from the loss get zeros; nodes that do not require one get `None`.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        let i = var.0;
        if !self.requires[i] {
            return None;
        }
        let shape = self.shapes[i].clone();
        Some(match &self.grads[i] {
            Some(g) => Tensor::from_parts_unchecked(shape, g.clone()),
            None => {
                let n = numel_of(&shape);
                Tensor::from_parts_unchecked(shape, vec![T::zero(); n])
            }
        })
    }

    /// Moves the gradient of `var` out, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        let i = var.0;
        if !self.requires[i] {
            return None;
        }
        let shape = self.shapes[i].clone();
        let n = numel_of(&shape);
        let data = self.grads[i].take().unwrap_or_else(|| vec![T::zero(); n]);
        Some(Tensor::from_parts_unchecked(shape, data))
    }
}

/// A single-threaded compute graph.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::invalid(
            op,
            format!("expected a matrix, got shape {shape:?}"),
        )),
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(INV_SQRT_2)).erf())
}

#[inline]
fn normal_pdf<T: Real>(x: T) -> T {
    T::from_f64_lossy(INV_SQRT_2PI) * (-(x * x) * T::from_f64_lossy(0.5)).exp()
}

/// Exact GELU, `x * Phi(x)`, on a single value.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    x * normal_cdf(x)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Enables a per-op scan that turns NaN/Inf outputs into errors.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> OpResult {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Inserts a leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> OpResult {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts_unchecked(self.shape(a).to_vec(), data);
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_op(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_op(a, b, "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_op(a, b, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> OpResult {
        let c = T::from_f64_lossy(factor);
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let value = Tensor::from_parts_unchecked(self.shape(a).to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a vector `b` of extent D to every length-D row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> OpResult {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let d = bs[0];
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(bias).map(|(&u, &v)| u + v))
            .collect();
        let value = Tensor::from_parts_unchecked(xs.to_vec(), data);
        let rg = self.any_grad(&[x, b]);
        self.push(value, Op::AddRow(x, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            self.data(a),
            MatView::row_major(m, k),
            self.data(b),
            MatView::row_major(k, n),
            T::zero(),
            &mut out,
        );
        let value = Tensor::from_parts_unchecked(vec![m, n], out);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> OpResult {
        let (r, c) = matrix_dims("transpose", self.shape(a))?;
        let src = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::from_parts_unchecked(vec![c, r], out);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> OpResult {
        let (outer, n, inner) = split_axis("softmax", self.shape(x), axis)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        if inner == 1 {
            for (row, dst) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                softmax_row(row, dst);
            }
            let value = Tensor::from_parts_unchecked(self.shape(x).to_vec(), out);
            let rg = self.any_grad(&[x]);
            return self.push(value, Op::Softmax { x, outer, n, inner }, rg);
        }
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let value = Tensor::from_parts_unchecked(self.shape(x).to_vec(), out);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax { x, outer, n, inner }, rg)
    }

    /// Row softmax of a square score matrix where row `i` only sees columns
    /// `j <= i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> OpResult {
        let (r, c) = matrix_dims("causal_softmax", self.shape(x))?;
        if r != c {
            return Err(TensorError::invalid(
                "causal_softmax",
                format!("expected a square matrix, got {r}x{c}"),
            ));
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_row(&src[i * c..i * c + i + 1], &mut out[i * c..i * c + i + 1]);
        }
        let value = Tensor::from_parts_unchecked(vec![r, c], out);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::CausalSoftmax(x), rg)
    }

    /// Layer normalization over the last axis followed by `gamma * . + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> OpResult {
        if eps <= 0.0 {
            return Err(TensorError::invalid("layer_norm", "eps must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "input has rank 0"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xs.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts_unchecked(xs, out);
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Exact Gaussian-CDF GELU.
    pub fn gelu(&mut self, x: Var) -> OpResult {
        let data = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::from_parts_unchecked(self.shape(x).to_vec(), data);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + Send + Sync + 'static,
    ) -> OpResult {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts_unchecked(self.shape(x).to_vec(), data);
        let rg = self.any_grad(&[x]);
        self.push(
            value,
            Op::Map {
                x,
                df: Box::new(df),
            },
            rg,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> OpResult {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let chunk = n * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts_unchecked(shape, out);
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> OpResult {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("slice", &shape, axis)?;
        if len == 0 || start + len > n {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} out of extent {n}", start + len),
            ));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::from_parts_unchecked(new_shape, out);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> OpResult {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> OpResult {
        let s = self.data(x).iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> OpResult {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("sum_axis", &shape, axis)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let value = Tensor::from_parts_unchecked(new_shape, out);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SumAxis { x, axis }, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> OpResult {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or(TensorError::InvalidAxis {
                op: "mean_axis",
                axis,
                rank: self.shape(x).len(),
            })?;
        let s = self.sum_axis(x, axis)?;
        if n == 1 {
            return Ok(s);
        }
        self.scale(s, 1.0 / n as f64)
    }

    /// Unfolds an `H x W x C` image into non-overlapping `P x P` patches:
    /// output `[(H/P)*(W/P), P*P*C]`, patches in row-major grid order and
    /// each patch flattened as (row, column, channel).
    pub fn patchify(&mut self, image: Var, patch: usize) -> OpResult {
        let shape = self.shape(image).to_vec();
        let [h, w, c] = shape[..] else {
            return Err(TensorError::invalid(
                "patchify",
                format!("expected HxWxC, got {shape:?}"),
            ));
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(TensorError::invalid(
                "patchify",
                format!("image {h}x{w} is not divisible by patch size {patch}"),
            ));
        }
        let (gh, gw) = (h / patch, w / patch);
        let dim = patch * patch * c;
        let src = self.data(image);
        let mut out = Vec::with_capacity(gh * gw * dim);
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let from = (y * w + gx * patch) * c;
                    out.extend_from_slice(&src[from..from + patch * c]);
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![gh * gw, dim], out);
        let rg = self.any_grad(&[image]);
        self.push(value, Op::Patchify { image, patch }, rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> OpResult {
        let (rows, d) = matrix_dims("gather_rows", self.shape(table))?;
        if ids.is_empty() {
            return Err(TensorError::invalid("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("id {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts_unchecked(vec![ids.len(), d], out);
        let rg = self.any_grad(&[table]);
        self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Scales every last-axis row to unit L2 norm, `x / (||x|| + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> OpResult {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("l2_normalize", "input has rank 0"))?;
        let eps = T::from_f64_lossy(eps);
        let src = self.data(x);
        let mut norms = Vec::with_capacity(src.len() / d);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(d) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let den = nrm + eps;
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / den));
        }
        let value = Tensor::from_parts_unchecked(shape, out);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::L2Normalize { x, norms, eps }, rg)
    }

    /// Mean cross-entropy of softmax(`logits`) rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> OpResult {
        let (b, k) = matrix_dims("cross_entropy", self.shape(logits))?;
        if labels.len() != b {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        loss /= T::from_usize(b).unwrap();
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let v = self.value(loss);
        if v.numel() != 1 {
            return Err(TensorError::NotScalar(v.shape().to_vec()));
        }
        let seed = Tensor::from_parts_unchecked(v.shape().to_vec(), vec![T::one()]);
        self.backward_with(&[(loss, seed)])
    }

    /// Backpropagates from arbitrary seed gradients.
    pub fn backward_with(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>, TensorError> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let mut last = 0;
        for (v, g) in seeds {
            same_shape("backward", self.shape(*v), g.shape())?;
            acc_slice(&mut grads, *v, g.data());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        acc_slice(grads, v, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc_slice(grads, *a, g);
                }
                if self.needs(*b) {
                    let buf = grad_buf(grads, *b, g.len());
                    for (d, &s) in buf.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if self.needs(x) {
                        let other = self.data(y);
                        let buf = grad_buf(grads, x, g.len());
                        for ((d, &s), &o) in buf.iter_mut().zip(g).zip(other) {
                            *d += s * o;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let buf = grad_buf(grads, *a, g.len());
                    for (d, &s) in buf.iter_mut().zip(g) {
                        *d += s * *c;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if self.needs(*x) {
                    acc_slice(grads, *x, g);
                }
                if self.needs(*b) {
                    let d = self.shape(*b)[0];
                    let buf = grad_buf(grads, *b, d);
                    for row in g.chunks_exact(d) {
                        for (acc, &s) in buf.iter_mut().zip(row) {
                            *acc += s;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = dC * B^T
                    let bdata = self.data(*b);
                    let buf = grad_buf(grads, *a, m * k);
                    gemm(
                        g,
                        MatView::row_major(m, n),
                        bdata,
                        MatView::transposed(k, n),
                        T::one(),
                        buf,
                    );
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let adata = self.data(*a);
                    let buf = grad_buf(grads, *b, k * n);
                    gemm(
                        adata,
                        MatView::transposed(m, k),
                        g,
                        MatView::row_major(m, n),
                        T::one(),
                        buf,
                    );
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let buf = grad_buf(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if self.needs(*x) {
                    let (outer, n, inner) = (*outer, *n, *inner);
                    let buf = grad_buf(grads, *x, g.len());
                    if inner == 1 {
                        for ((gr, yr), br) in g.chunks_exact(n).zip(out.chunks_exact(n)).zip(buf.chunks_exact_mut(n)) {
                            softmax_row_backward(gr, yr, br);
                        }
                        return;
                    }
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = T::zero();
                            for j in 0..n {
                                dot += g[base + j * inner] * out[base + j * inner];
                            }
                            for j in 0..n {
                                let idx = base + j * inner;
                                buf[idx] += out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::CausalSoftmax(x) => {
                if self.needs(*x) {
                    let c = self.shape(*x)[1];
                    let buf = grad_buf(grads, *x, g.len());
                    for i in 0..c {
                        let (lo, hi) = (i * c, i * c + i + 1);
                        softmax_row_backward(&g[lo..hi], &out[lo..hi], &mut buf[lo..hi]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gam = self.data(*gamma);
                if self.needs(*gamma) {
                    let buf = grad_buf(grads, *gamma, d);
                    for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            buf[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let buf = grad_buf(grads, *beta, d);
                    for row_g in g.chunks_exact(d) {
                        for j in 0..d {
                            buf[j] += row_g[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let buf = grad_buf(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row_g = &g[r * d..(r + 1) * d];
                        let row_h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dxhat[j] = row_g[j] * gam[j];
                            mean_dh += dxhat[j];
                            mean_dh_h += dxhat[j] * row_h[j];
                        }
                        mean_dh /= dn;
                        mean_dh_h /= dn;
                        for j in 0..d {
                            buf[r * d + j] += rs * (dxhat[j] - mean_dh - row_h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let src = self.data(*x);
                    let buf = grad_buf(grads, *x, g.len());
                    for ((d, &s), &v) in buf.iter_mut().zip(g).zip(src) {
                        *d += s * (normal_cdf(v) + v * normal_pdf(v));
                    }
                }
            }
            Op::Map { x, df } => {
                if self.needs(*x) {
                    let src = self.data(*x);
                    let buf = grad_buf(grads, *x, g.len());
                    for ((d, &s), &v) in buf.iter_mut().zip(g).zip(src) {
                        *d += s * df(v);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis("concat", shape, *axis).unwrap();
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.needs(v) {
                        let buf = grad_buf(grads, v, outer * n * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (d, &s) in buf[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let src_shape = self.shape(*x);
                    let (outer, n, inner) = split_axis("slice", src_shape, *axis).unwrap();
                    let len = node.value.shape()[*axis];
                    let buf = grad_buf(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        let to = (o * n + start) * inner;
                        let from = o * len * inner;
                        for (d, &s) in buf[to..to + len * inner].iter_mut().zip(&g[from..from + len * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    acc_slice(grads, *x, g);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let buf = grad_buf(grads, *x, n);
                    for d in buf.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if self.needs(*x) {
                    let (outer, n, inner) = split_axis("sum_axis", self.shape(*x), *axis).unwrap();
                    let buf = grad_buf(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut buf[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Patchify { image, patch } => {
                if self.needs(*image) {
                    let shape = self.shape(*image);
                    let (w, c) = (shape[1], shape[2]);
                    let (gh, gw) = (shape[0] / patch, w / patch);
                    let numel = self.value(*image).numel();
                    let buf = grad_buf(grads, *image, numel);
                    let mut k = 0;
                    for gy in 0..gh {
                        for gx in 0..gw {
                            for py in 0..*patch {
                                let y = gy * patch + py;
                                let to = (y * w + gx * patch) * c;
                                for (d, &s) in buf[to..to + patch * c].iter_mut().zip(&g[k..k + patch * c]) {
                                    *d += s;
                                }
                                k += patch * c;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let numel = self.value(*table).numel();
                    let buf = grad_buf(grads, *table, numel);
                    for (r, &id) in ids.iter().enumerate() {
                        for (dst, &s) in buf[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *dst += s;
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms, eps } => {
                if self.needs(*x) {
                    let d = *self.shape(*x).last().unwrap();
                    let src = self.data(*x);
                    let buf = grad_buf(grads, *x, g.len());
                    for (r, &nrm) in norms.iter().enumerate() {
                        let xs = &src[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let dst = &mut buf[r * d..(r + 1) * d];
                        let den = nrm + *eps;
                        if nrm == T::zero() {
                            // y = x / eps near the origin
                            for (o, &s) in dst.iter_mut().zip(gs) {
                                *o += s / den;
                            }
                            continue;
                        }
                        let dot: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                        let coeff = dot / (nrm * den * den);
                        for j in 0..d {
                            dst[j] += gs[j] / den - xs[j] * coeff;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / T::from_usize(b).unwrap();
                    let buf = grad_buf(grads, *logits, probs.len());
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            buf[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn softmax_row<T: Real>(row: &[T], dst: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (d, &s) in dst.iter_mut().zip(row) {
        *d = (s - max).exp();
        sum += *d;
    }
    let inv = T::one() / sum;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

/// `dx += y * (g - <g, y>)` for one softmax row.
fn softmax_row_backward<T: Real>(g: &[T], y: &[T], dx: &mut [T]) {
    let dot = g.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
        *d += yi * (gi - dot);
    }
}

fn grad_buf<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn acc_slice<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (d, &s) in buf.iter_mut().zip(g) {
                *d += s;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
