//! Per-step computation tape with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants or [`Parameter`] snapshots; [`Tape::backward`] returns gradients
//! keyed by [`ParamId`], and [`Tape::grad_eval`] accumulates them into the
//! modules passed in. Nothing reachable only through [`Tape::detach`] or a
//! constant leaf receives a gradient.

use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::param::{Module, ParamId, Parameter};
use crate::tensor::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize, end: usize },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    LogSoftmaxRows(Var),
    Diagonal(Var),
    Minimum(Var, Var),
    Clamp { a: Var, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, keyed by parameter identity.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds each recorded gradient into the matching parameter of `module`.
    pub fn accumulate_into(&self, module: &mut dyn Module) {
        module.visit_mut(&mut |p| {
            if let Some(g) = self.by_param.get(&p.id()) {
                p.accumulate_grad(g);
            }
        });
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::NonFinite(op))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumericsError::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            other => self.inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Constant | Op::Param(_) => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            Op::MatMul { a, b } | Op::MatMulBt { a, b } => vec![*a, *b],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Minimum(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::Reshape(a)
            | Op::LogSoftmaxRows(a)
            | Op::Diagonal(a) => vec![*a],
            Op::SliceCols { a, .. } | Op::L2NormalizeRows { a, .. } | Op::Clamp { a, .. } => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
        }
    }

    // ---- leaves -----------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant, "constant")
    }

    /// Records a snapshot of `p`; gradients flow back to `p.id()`.
    pub fn param(&mut self, p: &Parameter) -> Result<Var> {
        self.push(p.value.clone(), Op::Param(p.id()), "param")
    }

    /// Records `p`'s value as a constant: no gradient is ever reported for it.
    pub fn frozen(&mut self, p: &Parameter) -> Result<Var> {
        self.constant(p.value.clone())
    }

    /// A copy of `v`'s value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `y = x·W + b` with `x` of shape `[.., in]`, `W` `[in, out]`, `b` `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.ndim() != 2 {
            return Err(NumericsError::Dimension(format!(
                "affine weight must be 2-d, got {:?}",
                wv.shape()
            )));
        }
        let (fan_in, fan_out) = (wv.shape()[0], wv.shape()[1]);
        let (rows, cols) = xv.as_matrix_dims();
        if cols != fan_in || xv.ndim() == 0 {
            return Err(NumericsError::Dimension(format!(
                "affine input {:?} does not match weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        if bv.shape() != [fan_out] {
            return Err(NumericsError::Dimension(format!(
                "affine bias {:?} does not match weight {:?}",
                bv.shape(),
                wv.shape()
            )));
        }
        let mut out = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        gemm_acc(xv.data(), wv.data(), &mut out, rows, fan_in, fan_out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Affine { x, w, b }, "affine")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(NumericsError::Dimension(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::MatMul { a, b }, "matmul")
    }

    /// `a · bᵀ` for `a` `[m, k]`, `b` `[n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(NumericsError::Dimension(format!(
                "matmul_bt {:?} x {:?}ᵀ",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm_bt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::MatMulBt { a, b }, "matmul_bt")
    }

    /// Valid (unpadded) cross-correlation. `x` is `[C,H,W]` or `[B,C,H,W]`,
    /// `k` is `[O,C,K,K]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let (batch, in_c, in_h, in_w, batched) = match *xv.shape() {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => {
                return Err(NumericsError::Dimension(format!(
                    "conv2d input must be [C,H,W] or [B,C,H,W], got {:?}",
                    xv.shape()
                )))
            }
        };
        let [out_c, kc, kh, kw] = *kv.shape() else {
            return Err(NumericsError::Dimension(format!(
                "conv2d kernel must be [O,C,K,K], got {:?}",
                kv.shape()
            )));
        };
        if kc != in_c || kh != kw {
            return Err(NumericsError::Dimension(format!(
                "conv2d kernel {:?} incompatible with input {:?}",
                kv.shape(),
                xv.shape()
            )));
        }
        if kh > in_h || kw > in_w {
            return Err(NumericsError::Dimension(format!(
                "conv2d kernel {:?} larger than input {:?}",
                kv.shape(),
                xv.shape()
            )));
        }
        if stride == 0 {
            return Err(NumericsError::Contract("conv2d stride must be >= 1".into()));
        }
        if bv.shape() != [out_c] {
            return Err(NumericsError::Dimension(format!(
                "conv2d bias {:?} for {} output channels",
                bv.shape(),
                out_c
            )));
        }
        let geom = ConvGeom {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            k: kh,
            stride,
            out_h: (in_h - kh) / stride + 1,
            out_w: (in_w - kw) / stride + 1,
        };
        let (rows, pos) = (geom.col_rows(), geom.positions());
        // One wide GEMM over the whole batch: columns are `n·pos + p`.
        let wide = batch * pos;
        let mut cols = vec![0.0; rows * wide];
        let in_size = in_c * in_h * in_w;
        for n in 0..batch {
            im2col(&xv.data()[n * in_size..(n + 1) * in_size], &geom, &mut cols, wide, n * pos);
        }
        let mut prod = vec![0.0; out_c * wide];
        gemm_acc(kv.data(), &cols, &mut prod, out_c, rows, wide);
        let mut out = vec![0.0; batch * out_c * pos];
        for n in 0..batch {
            for (c, &bias) in bv.data().iter().enumerate() {
                let src = &prod[c * wide + n * pos..c * wide + (n + 1) * pos];
                let dst = &mut out[(n * out_c + c) * pos..(n * out_c + c + 1) * pos];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        let shape: Vec<usize> = if batched {
            vec![batch, out_c, geom.out_h, geom.out_w]
        } else {
            vec![out_c, geom.out_h, geom.out_w]
        };
        let t = Tensor::new(&shape, out)?;
        let keep_cols = if self.nodes[k.0].needs_grad { cols } else { Vec::new() };
        self.push(
            t,
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                cols: keep_cols,
            },
            "conv2d",
        )
    }

    // ---- elementwise ------------------------------------------------------

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(av.shape(), data)?;
        self.push(t, op, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(a), "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, f64::ln, Op::Log(a), "log")
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map(a, softplus, Op::Softplus(a), "softplus")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, |v| v * v, Op::Square(a), "square")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, |v| v * c, Op::Scale(a, c), "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, |v| v + c, Op::AddScalar(a), "add_scalar")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(a, |v| v.clamp(lo, hi), Op::Clamp { a, lo, hi }, "clamp")
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, name)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data)?;
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b), "minimum")
    }

    fn row_broadcast(&mut self, a: Var, r: Var, mul: bool) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        let (rows, cols) = av.as_matrix_dims();
        if rv.shape() != [cols] || av.ndim() == 0 {
            return Err(NumericsError::Dimension(format!(
                "row broadcast of {:?} over {:?}",
                rv.shape(),
                av.shape()
            )));
        }
        let mut data = av.data().to_vec();
        for i in 0..rows {
            for (v, &c) in data[i * cols..(i + 1) * cols].iter_mut().zip(rv.data()) {
                if mul {
                    *v *= c
                } else {
                    *v += c
                }
            }
        }
        let t = Tensor::new(av.shape(), data)?;
        if mul {
            self.push(t, Op::MulRow(a, r), "mul_row")
        } else {
            self.push(t, Op::AddRow(a, r), "add_row")
        }
    }

    /// Adds the vector `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast(a, r, false)
    }

    /// Multiplies every row of `a` elementwise by the vector `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast(a, r, true)
    }

    // ---- reductions and reshaping -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(NumericsError::Contract("mean of empty tensor".into()));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Sums over the last axis: `[m, n] -> [m]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.as_matrix_dims();
        let data = (0..rows).map(|i| av.data()[i * cols..(i + 1) * cols].iter().sum()).collect();
        self.push(Tensor::new(&[rows], data)?, Op::SumCols(a), "sum_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let lead = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(a, &[lead, rest])
    }

    /// Concatenates 2-d tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&v| {
                let t = self.value(v);
                if t.ndim() == 2 {
                    Ok((t.shape()[0], t.shape()[1]))
                } else {
                    Err(NumericsError::Dimension(format!("concat_cols needs 2-d, got {:?}", t.shape())))
                }
            })
            .collect::<Result<_>>()?;
        let rows = dims.first().map_or(0, |d| d.0);
        if dims.iter().any(|d| d.0 != rows) {
            return Err(NumericsError::Dimension(format!("concat_cols row mismatch: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &v in parts {
                data.extend_from_slice(self.value(v).row(i));
            }
        }
        let t = Tensor::new(&[rows, total], data)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.as_matrix_dims();
        if av.ndim() != 2 || start >= end || end > cols {
            return Err(NumericsError::Dimension(format!(
                "slice_cols {start}..{end} of {:?}",
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&av.row(i)[start..end]);
        }
        let t = Tensor::new(&[rows, end - start], data)?;
        self.push(t, Op::SliceCols { a, start, end }, "slice_cols")
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.as_matrix_dims();
        let mut data = av.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &mut data[i * cols..(i + 1) * cols];
            let n = dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(av.shape(), data)?;
        self.push(t, Op::L2NormalizeRows { a, norms }, "l2_normalize_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.as_matrix_dims();
        let mut data = av.data().to_vec();
        for i in 0..rows {
            let row = &mut data[i * cols..(i + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(av.shape(), data)?;
        self.push(t, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    /// Main diagonal of a square matrix.
    pub fn diagonal(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 || av.shape()[0] != av.shape()[1] {
            return Err(NumericsError::Dimension(format!("diagonal of {:?}", av.shape())));
        }
        let n = av.shape()[0];
        let data = (0..n).map(|i| av.data()[i * n + i]).collect();
        self.push(Tensor::new(&[n], data)?, Op::Diagonal(a), "diagonal")
    }

    // ---- differentiation --------------------------------------------------

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                match out.by_param.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_param.insert(id, g);
                    }
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and accumulates into every listed module.
    pub fn grad_eval(&self, loss: Var, modules: &mut [&mut dyn Module]) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for m in modules.iter_mut() {
            grads.accumulate_into(&mut **m);
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut send = |v: Var, t: Tensor| -> Result<()> {
            if !self.wants(v) {
                return Ok(());
            }
            check_finite(&t, "backward")?;
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (fan_in, fan_out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / fan_in;
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    gemm_bt_acc(gd, wv.data(), &mut dx, rows, fan_out, fan_in);
                    send(*x, Tensor::new(xv.shape(), dx)?)?;
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; wv.len()];
                    gemm_at_acc(xv.data(), gd, &mut dw, rows, fan_in, fan_out);
                    send(*w, Tensor::new(wv.shape(), dw)?)?;
                }
                if self.wants(*b) {
                    send(*b, Tensor::new(&[fan_out], col_sums(gd, rows, fan_out))?)?;
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_bt_acc(gd, bv.data(), &mut da, m, n, k);
                    send(*a, Tensor::new(av.shape(), da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_at_acc(av.data(), gd, &mut db, m, k, n);
                    send(*b, Tensor::new(bv.shape(), db)?)?;
                }
            }
            Op::MatMulBt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_acc(gd, bv.data(), &mut da, m, n, k);
                    send(*a, Tensor::new(av.shape(), da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_at_acc(gd, av.data(), &mut db, m, n, k);
                    send(*b, Tensor::new(bv.shape(), db)?)?;
                }
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let (rows, pos) = (geom.col_rows(), geom.positions());
                let wide = geom.batch * pos;
                let kv = self.value(*k);
                // Output gradient in the wide `[O, n·pos + p]` layout.
                let mut gw = vec![0.0; geom.out_c * wide];
                for n in 0..geom.batch {
                    for c in 0..geom.out_c {
                        let src = (n * geom.out_c + c) * pos;
                        gw[c * wide + n * pos..c * wide + (n + 1) * pos].copy_from_slice(&gd[src..src + pos]);
                    }
                }
                if self.wants(*k) {
                    let mut dk = vec![0.0; kv.len()];
                    gemm_bt_acc(&gw, cols, &mut dk, geom.out_c, wide, rows);
                    send(*k, Tensor::new(kv.shape(), dk)?)?;
                }
                if self.wants(*b) {
                    let db = gw.chunks_exact(wide).map(|r| r.iter().sum::<f64>()).collect();
                    send(*b, Tensor::from_vec(db))?;
                }
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let in_size = geom.in_c * geom.in_h * geom.in_w;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dcols = vec![0.0; rows * wide];
                    gemm_at_acc(kv.data(), &gw, &mut dcols, geom.out_c, rows, wide);
                    for n in 0..geom.batch {
                        col2im_acc(&dcols, geom, &mut dx[n * in_size..(n + 1) * in_size], wide, n * pos);
                    }
                    send(*x, Tensor::new(xv.shape(), dx)?)?;
                }
            }
            Op::Relu(a) => {
                let d = gd.iter().zip(y.data()).map(|(&g, &y)| if y > 0.0 { g } else { 0.0 }).collect();
                send(*a, Tensor::new(y.shape(), d)?)?;
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(y.data()).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                send(*a, Tensor::new(y.shape(), d)?)?;
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(y.data()).map(|(&g, &y)| g * y).collect();
                send(*a, Tensor::new(y.shape(), d)?)?;
            }
            Op::Log(a) => {
                let xv = self.value(*a);
                let d = gd.iter().zip(xv.data()).map(|(&g, &x)| g / x).collect();
                send(*a, Tensor::new(y.shape(), d)?)?;
            }
            Op::Softplus(a) => {
                let xv = self.value(*a);
                let d = gd.iter().zip(xv.data()).map(|(&g, &x)| g * sigmoid(x)).collect();
                send(*a, Tensor::new(y.shape(), d)?)?;
            }
            Op::Square(a) => {
                let xv = self.value(*a);
                let d = gd.iter().zip(xv.data()).map(|(&g, &x)| 2.0 * g * x).collect();
                send(*a, Tensor::new(y.shape(), d)?)?;
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|&g| g * c).collect();
                send(*a, Tensor::new(y.shape(), d)?)?;
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                send(*a, Tensor::new(&shape, gd.to_vec())?)?;
            }
            Op::Clamp { a, lo, hi } => {
                let xv = self.value(*a);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect();
                send(*a, Tensor::new(y.shape(), d)?)?;
            }
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, Tensor::new(g.shape(), gd.iter().map(|v| -v).collect())?)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                    send(*a, Tensor::new(y.shape(), d)?)?;
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av.data()).map(|(g, a)| g * a).collect();
                    send(*b, Tensor::new(y.shape(), d)?)?;
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick_b: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| y < x).collect();
                let da = gd.iter().zip(&pick_b).map(|(&g, &p)| if p { 0.0 } else { g }).collect();
                let db = gd.iter().zip(&pick_b).map(|(&g, &p)| if p { g } else { 0.0 }).collect();
                send(*a, Tensor::new(y.shape(), da)?)?;
                send(*b, Tensor::new(y.shape(), db)?)?;
            }
            Op::AddRow(a, r) => {
                let (rows, cols) = y.as_matrix_dims();
                send(*a, g.clone())?;
                send(*r, Tensor::from_vec(col_sums(gd, rows, cols)))?;
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                let (rows, cols) = y.as_matrix_dims();
                if self.wants(*a) {
                    let mut d = gd.to_vec();
                    for i in 0..rows {
                        for (v, &c) in d[i * cols..(i + 1) * cols].iter_mut().zip(rv.data()) {
                            *v *= c;
                        }
                    }
                    send(*a, Tensor::new(y.shape(), d)?)?;
                }
                if self.wants(*r) {
                    let mut d = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            d[j] += gd[i * cols + j] * av.data()[i * cols + j];
                        }
                    }
                    send(*r, Tensor::from_vec(d))?;
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                send(*a, Tensor::full(&shape, gd[0]))?;
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                send(*a, Tensor::full(av.shape(), gd[0] / av.len() as f64))?;
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let (rows, cols) = av.as_matrix_dims();
                let mut d = Vec::with_capacity(av.len());
                for &gv in gd.iter().take(rows) {
                    d.extend(std::iter::repeat(gv).take(cols));
                }
                send(*a, Tensor::new(av.shape(), d)?)?;
            }
            Op::ConcatCols(parts) => {
                let rows = y.shape()[0];
                let total = y.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).shape()[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * width);
                        for i in 0..rows {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + width]);
                        }
                        send(p, Tensor::new(&[rows, width], d)?)?;
                    }
                    offset += width;
                }
            }
            Op::SliceCols { a, start, end } => {
                let av = self.value(*a);
                let (rows, cols) = av.as_matrix_dims();
                let width = end - start;
                let mut d = vec![0.0; av.len()];
                for i in 0..rows {
                    d[i * cols + start..i * cols + end].copy_from_slice(&gd[i * width..(i + 1) * width]);
                }
                send(*a, Tensor::new(av.shape(), d)?)?;
            }
            Op::L2NormalizeRows { a, norms } => {
                let (rows, cols) = y.as_matrix_dims();
                let mut d = vec![0.0; y.len()];
                for i in 0..rows {
                    let yr = &y.data()[i * cols..(i + 1) * cols];
                    let gr = &gd[i * cols..(i + 1) * cols];
                    let proj = dot(yr, gr);
                    for j in 0..cols {
                        d[i * cols + j] = (gr[j] - yr[j] * proj) / norms[i];
                    }
                }
                send(*a, Tensor::new(y.shape(), d)?)?;
            }
            Op::LogSoftmaxRows(a) => {
                let (rows, cols) = y.as_matrix_dims();
                let mut d = vec![0.0; y.len()];
                for i in 0..rows {
                    let yr = &y.data()[i * cols..(i + 1) * cols];
                    let gr = &gd[i * cols..(i + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cols {
                        d[i * cols + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                send(*a, Tensor::new(y.shape(), d)?)?;
            }
            Op::Diagonal(a) => {
                let n = y.len();
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    d[i * n + i] = gd[i];
                }
                send(*a, Tensor::new(&[n, n], d)?)?;
            }
        }
        Ok(())
    }
}

fn col_sums(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for (o, v) in out.iter_mut().zip(&data[i * cols..(i + 1) * cols]) {
            *o += v;
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unfolds one `[C,H,W]` image into patch columns `col0..col0 + Ho·Wo` of
/// a `[C·K·K, ld]` matrix.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize, col0: usize) {
    let pos = g.positions();
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + pos];
                for oi in 0..g.out_h {
                    let src_row = c * g.in_h * g.in_w + (oi * g.stride + ki) * g.in_w + kj;
                    let d = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if g.stride == 1 {
                        d.copy_from_slice(&x[src_row..src_row + g.out_w]);
                    } else {
                        for (oj, v) in d.iter_mut().enumerate() {
                            *v = x[src_row + oj * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64], ld: usize, col0: usize) {
    let pos = g.positions();
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ld + col0..row * ld + col0 + pos];
                for oi in 0..g.out_h {
                    let dst_row = c * g.in_h * g.in_w + (oi * g.stride + ki) * g.in_w + kj;
                    for oj in 0..g.out_w {
                        dx[dst_row + oj * g.stride] += src[oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}
