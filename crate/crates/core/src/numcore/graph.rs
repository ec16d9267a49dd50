//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep. Leaves copy
//! their values in; trainable leaves come from tensors with
//! `requires_grad = true`, everything else is a constant that never
//! receives gradient. Nodes whose ancestors are all constants are marked
//! as not needing gradient and are skipped during the sweep.

use super::kernels::{self, gemm, row_major, transposed};
use super::tensor::{check_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The element-wise operations addressable through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Gelu,
    Negate,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    Softmax { x: Var, dims: [usize; 3] },
    LogSoftmax { x: Var, dims: [usize; 3] },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, index: Vec<usize> },
    Reshape(Var),
    Im2Col { x: Var, batch: usize, h: usize, w: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, `None` when `v` is a
    /// constant or unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `tensor`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) {
        if let Some(g) = self.get(v) {
            tensor.accumulate_grad(g);
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn two_d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, shape, &[])),
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_dims(shape: &[usize], axis: usize) -> Result<[usize; 3]> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok([outer, shape[axis], inner])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape")
    }

    /// Records `t` as a leaf. Differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Identical values, no gradient flows back through the result.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d("matmul", self.shape(a))?;
        let (k2, n) = two_d("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            row_major(self.value(a), k),
            row_major(self.value(b), n),
            0.0,
            &mut out,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = two_d("transpose", self.shape(a))?;
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let shape = if sa == sb || nb == 1 {
            sa.to_vec()
        } else if na == 1 {
            sb.to_vec()
        } else {
            return Err(Error::dim(name, sa, sb));
        };
        let n = na.max(nb);
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..n)
            .map(|i| f(va[if na == 1 { 0 } else { i }], vb[if nb == 1 { 0 } else { i }]))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        m: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        let cols = *sm.last().ok_or_else(|| Error::dim(name, &sm, &[]))?;
        if self.value(row).len() != cols {
            return Err(Error::dim(name, &sm, self.shape(row)));
        }
        let (vm, vr) = (self.value(m), self.value(row));
        let out = vm
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vr[i % cols]))
            .collect();
        let ng = self.ng(&[m, row]);
        Ok(self.push(sm, out, op, ng))
    }

    /// Adds a row vector to every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", m, row, |x, r| x + r, Op::AddRow(m, row))
    }

    /// Multiplies every row of `m` element-wise by a row vector.
    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", m, row, |x, r| x * r, Op::MulRow(m, row))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(&[x]);
        self.push(shape, out, op, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Dispatcher over the element-wise family; binary ops take two inputs,
    /// unary ops one.
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Gelu => Ok(self.gelu(inputs[0])),
            Elementwise::Negate => Ok(self.neg(inputs[0])),
            Elementwise::Scale(c) => Ok(self.scale(inputs[0], c)),
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = axis_dims(self.shape(x), axis)?;
        let mut out = self.value(x).to_vec();
        softmax_in_place(&mut out, dims, false);
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(&[x]));
        Ok(self.push(shape, out, Op::Softmax { x, dims }, ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = axis_dims(self.shape(x), axis)?;
        let mut out = self.value(x).to_vec();
        softmax_in_place(&mut out, dims, true);
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(&[x]));
        Ok(self.push(shape, out, Op::LogSoftmax { x, dims }, ng))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layernorm eps must be positive".into()));
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("layernorm", &shape, &[]))?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::dim("layernorm", &shape, self.shape(gain)));
        }
        let rows = self.value(x).len() / n;
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &vx[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * vg[c] + vb[c];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Column-wise standardization of a 2-D input using its own batch
    /// statistics (biased variance). Returns the standardized values and the
    /// per-column mean and biased variance used.
    pub fn batchnorm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (r, c) = two_d("batchnorm", self.shape(x))?;
        let vx = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                mean[j] += vx[i * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        for i in 0..r {
            for j in 0..c {
                let d = vx[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = (0..r * c)
            .map(|k| (vx[k] - mean[k % c]) * inv_std[k % c])
            .collect();
        let ng = self.ng(&[x]);
        let v = self.push(vec![r, c], out, Op::BatchNorm { x, inv_std }, ng);
        Ok((v, mean, var))
    }

    /// Scales each row of a 2-D input to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = two_d("normalize_rows", self.shape(x))?;
        let vx = self.value(x);
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &vx[i * c..(i + 1) * c];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {nrm}; cosine similarity is undefined"
                )));
            }
            norms[i] = nrm;
            for j in 0..c {
                out[i * c + j] = row[j] / nrm;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![r, c], out, Op::NormalizeRows { x, norms }, ng))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar node.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if na != nb {
            return Err(Error::dim("cosine_sim", self.shape(a), self.shape(b)));
        }
        let ra = self.reshape(a, &[1, na])?;
        let rb = self.reshape(b, &[1, nb])?;
        let ua = self.normalize_rows(ra)?;
        let ub = self.normalize_rows(rb)?;
        let prod = self.mul(ua, ub)?;
        Ok(self.sum(prod))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), ng)
    }

    /// Column means of a 2-D input, as a `1×cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = two_d("mean_rows", self.shape(x))?;
        let vx = self.value(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += vx[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let ng = self.ng(&[x]);
        Ok(self.push(vec![1, c], out, Op::MeanRows(x), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = two_d("slice_rows", self.shape(x))?;
        if start >= end || end > r {
            return Err(Error::Contract(format!(
                "row slice {start}..{end} out of range for {r} rows"
            )));
        }
        let out = self.value(x)[start * c..end * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(vec![end - start, c], out, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = two_d("slice_cols", self.shape(x))?;
        if start >= end || end > c {
            return Err(Error::Contract(format!(
                "column slice {start}..{end} out of range for {c} columns"
            )));
        }
        let w = end - start;
        let vx = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&vx[i * c + start..i * c + end]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![r, w], out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, c) = two_d("concat_rows", self.shape(first))?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = two_d("concat_rows", self.shape(p))?;
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (r, _) = two_d("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = two_d("concat_cols", self.shape(p))?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = two_d("select_rows", self.shape(x))?;
        if index.is_empty() {
            return Err(Error::Contract("select_rows with empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row {bad} out of range for {r} rows")));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&vx[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            vec![index.len(), c],
            out,
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), ng))
    }

    /// 3×3, stride 1, zero-pad 1 patch extraction. `x` holds `batch` feature
    /// maps of `h×w` cells stacked row-major as `[batch·h·w, c]`; the result
    /// is `[batch·h·w, 9c]` with neighbour blocks ordered by (dy, dx).
    pub fn im2col3x3(&mut self, x: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let (r, c) = two_d("im2col3x3", self.shape(x))?;
        if r != batch * h * w {
            return Err(Error::dim("im2col3x3", self.shape(x), &[batch, h, w]));
        }
        let vx = self.value(x);
        let mut out = vec![0.0; r * 9 * c];
        for_each_tap(batch, h, w, |dst_cell, k, src_cell| {
            let dst = dst_cell * 9 * c + k * c;
            out[dst..dst + c].copy_from_slice(&vx[src_cell * c..(src_cell + 1) * c]);
        });
        let ng = self.ng(&[x]);
        Ok(self.push(vec![r, 9 * c], out, Op::Im2Col { x, batch, h, w }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !n.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shape = |v: Var| self.nodes[v.0].shape.as_slice();
        // Returns the accumulation buffer of a parent that needs gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let nn = shape(*b)[1];
                if let Some(ga) = acc!(*a) {
                    gemm(m, nn, k, row_major(g, nn), transposed(val(*b), nn), 1.0, ga);
                }
                if let Some(gb) = acc!(*b) {
                    gemm(k, m, nn, transposed(val(*a), k), row_major(g, nn), 1.0, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (shape(*a)[0], shape(*a)[1]);
                if let Some(ga) = acc!(*a) {
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * c + j] += g[j * r + ii];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = acc!(*a) {
                    reduce_into(ga, g, 1.0);
                }
                if let Some(gb) = acc!(*b) {
                    reduce_into(gb, g, sign);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    bin_grad(ga, g, |k| pick(vb, k));
                }
                if let Some(gb) = acc!(*b) {
                    bin_grad(gb, g, |k| pick(va, k));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    bin_grad(ga, g, |k| 1.0 / pick(vb, k));
                }
                if let Some(gb) = acc!(*b) {
                    bin_grad(gb, g, |k| {
                        let d = pick(vb, k);
                        -pick(va, k) / (d * d)
                    });
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (va, vb) = (val(*a), val(*b));
                let a_wins = |k: usize| {
                    let (x, z) = (pick(va, k), pick(vb, k));
                    if is_max {
                        x >= z
                    } else {
                        x <= z
                    }
                };
                if let Some(ga) = acc!(*a) {
                    bin_grad(ga, g, |k| if a_wins(k) { 1.0 } else { 0.0 });
                }
                if let Some(gb) = acc!(*b) {
                    bin_grad(gb, g, |k| if a_wins(k) { 0.0 } else { 1.0 });
                }
            }
            Op::AddRow(m, row) | Op::MulRow(m, row) => {
                let is_mul = matches!(node.op, Op::MulRow(..));
                let cols = val(*row).len();
                let (vm, vr) = (val(*m), val(*row));
                if let Some(gm) = acc!(*m) {
                    for (k, gv) in g.iter().enumerate() {
                        gm[k] += if is_mul { gv * vr[k % cols] } else { *gv };
                    }
                }
                if let Some(gr) = acc!(*row) {
                    for (k, gv) in g.iter().enumerate() {
                        gr[k % cols] += if is_mul { gv * vm[k] } else { *gv };
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = acc!(*x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc!(*x) {
                    axpy(gx, g, *c);
                }
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                if let Some(gx) = acc!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * kernels::gelu_grad(vx[k]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = acc!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = acc!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k];
                    }
                }
            }
            Op::Log(x) => {
                let vx = val(*x);
                if let Some(gx) = acc!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] / vx[k];
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(gx) = acc!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * 0.5 / y[k];
                    }
                }
            }
            Op::Powf(x, p) => {
                let vx = val(*x);
                if let Some(gx) = acc!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * p * vx[k].powf(p - 1.0);
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                if let Some(gx) = acc!(*x) {
                    for k in 0..g.len() {
                        if vx[k] > *lo && vx[k] < *hi {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Softmax { x, dims } => {
                let [outer, len, inner] = *dims;
                if let Some(gx) = acc!(*x) {
                    for o in 0..outer {
                        for inn in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + inn;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, dims } => {
                let [outer, len, inner] = *dims;
                if let Some(gx) = acc!(*x) {
                    for o in 0..outer {
                        for inn in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + inn;
                            let gsum: f64 = (0..len).map(|l| g[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += g[idx(l)] - y[idx(l)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = val(*gain).len();
                let rows = inv_std.len();
                let vg = val(*gain);
                if let Some(gg) = acc!(*gain) {
                    for k in 0..rows * n {
                        gg[k % n] += g[k] * xhat[k];
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for k in 0..rows * n {
                        gb[k % n] += g[k];
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mut dh = vec![0.0; n];
                    for r in 0..rows {
                        let base = r * n;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            dh[c] = g[base + c] * vg[c];
                            s1 += dh[c];
                            s2 += dh[c] * xhat[base + c];
                        }
                        let scale = inv_std[r] / n as f64;
                        for c in 0..n {
                            gx[base + c] +=
                                scale * (n as f64 * dh[c] - s1 - xhat[base + c] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, inv_std } => {
                let c = inv_std.len();
                let r = g.len() / c;
                if let Some(gx) = acc!(*x) {
                    let mut s1 = vec![0.0; c];
                    let mut s2 = vec![0.0; c];
                    for k in 0..r * c {
                        s1[k % c] += g[k];
                        s2[k % c] += g[k] * y[k];
                    }
                    for k in 0..r * c {
                        let j = k % c;
                        gx[k] += inv_std[j] / r as f64
                            * (r as f64 * g[k] - s1[j] - y[k] * s2[j]);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let r = norms.len();
                let c = g.len() / r;
                if let Some(gx) = acc!(*x) {
                    for i in 0..r {
                        let base = i * c;
                        let dot: f64 = (0..c).map(|j| g[base + j] * y[base + j]).sum();
                        for j in 0..c {
                            gx[base + j] += (g[base + j] - y[base + j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc!(*x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = (shape(*x)[0], shape(*x)[1]);
                if let Some(gx) = acc!(*x) {
                    for k in 0..r * c {
                        gx[k] += g[k % c] / r as f64;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = shape(*x)[1];
                if let Some(gx) = acc!(*x) {
                    axpy(&mut gx[start * c..start * c + g.len()], g, 1.0);
                }
            }
            Op::SliceCols { x, start } => {
                let c = shape(*x)[1];
                let w = node.shape[1];
                if let Some(gx) = acc!(*x) {
                    for ii in 0..node.shape[0] {
                        axpy(
                            &mut gx[ii * c + start..ii * c + start + w],
                            &g[ii * w..(ii + 1) * w],
                            1.0,
                        );
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if let Some(gp) = acc!(p) {
                        axpy(gp, &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let (r, w) = (shape(p)[0], shape(p)[1]);
                    if let Some(gp) = acc!(p) {
                        for ii in 0..r {
                            axpy(
                                &mut gp[ii * w..(ii + 1) * w],
                                &g[ii * total + off..ii * total + off + w],
                                1.0,
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SelectRows { x, index } => {
                let c = shape(*x)[1];
                if let Some(gx) = acc!(*x) {
                    for (k, &src) in index.iter().enumerate() {
                        axpy(&mut gx[src * c..(src + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Im2Col { x, batch, h, w } => {
                let c = shape(*x)[1];
                if let Some(gx) = acc!(*x) {
                    for_each_tap(*batch, *h, *w, |dst_cell, k, src_cell| {
                        let src = dst_cell * 9 * c + k * c;
                        axpy(&mut gx[src_cell * c..(src_cell + 1) * c], &g[src..src + c], 1.0);
                    });
                }
            }
        }
    }
}

/// Calls `f(cell, tap, neighbour)` for every in-bounds 3×3 neighbour.
fn for_each_tap(batch: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let cell = (b * h + i) * w + j;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (si, sj) = (i + di, j + dj);
                        if si == 0 || sj == 0 || si > h || sj > w {
                            continue;
                        }
                        f(cell, di * 3 + dj, (b * h + si - 1) * w + sj - 1);
                    }
                }
            }
        }
    }
}

fn softmax_in_place(v: &mut [f64], [outer, len, inner]: [usize; 3], log: bool) {
    for o in 0..outer {
        for inn in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + inn;
            let max = (0..len).map(|l| v[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in 0..len {
                sum += (v[idx(l)] - max).exp();
            }
            let lse = max + sum.ln();
            for l in 0..len {
                let k = idx(l);
                v[k] = if log { v[k] - lse } else { (v[k] - lse).exp() };
            }
        }
    }
}

#[inline]
fn pick(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}

/// Accumulates `g`, summing it down when `dst` is a broadcast scalar.
fn reduce_into(dst: &mut [f64], g: &[f64], a: f64) {
    if dst.len() == 1 && g.len() != 1 {
        dst[0] += a * g.iter().sum::<f64>();
    } else {
        axpy(dst, g, a);
    }
}

fn bin_grad(dst: &mut [f64], g: &[f64], local: impl Fn(usize) -> f64) {
    if dst.len() == 1 && g.len() != 1 {
        dst[0] += g.iter().enumerate().map(|(k, gv)| gv * local(k)).sum::<f64>();
    } else {
        for (k, gv) in g.iter().enumerate() {
            dst[k] += gv * local(k);
        }
    }
}
