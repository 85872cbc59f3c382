//! Eager tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its value and the data its adjoint needs.
//! [`Tape::backward`] walks the nodes in strict reverse creation order and
//! accumulates adjoints additively, so a leaf used at several sites (a
//! Toeplitz diagonal, a tied embedding) receives the sum of its adjoints.

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;

use crate::error::{invalid, Error, Result};
use crate::tensor::{gelu_grad_scalar, layer_norm_forward, toeplitz_materialize, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kind, used in reports and by the adjoint-corruption test hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    Param,
    MatMul,
    Add,
    Mul,
    Scale,
    AddRowBias,
    AddColBias,
    Transpose,
    Gelu,
    SoftmaxRows,
    LayerNorm,
    SliceCols,
    ConcatCols,
    Toeplitz,
    Sum,
    MeanRows,
    GatherRows,
    CrossEntropy,
}

impl OpTag {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "matmul" => Self::MatMul,
            "add" => Self::Add,
            "mul" => Self::Mul,
            "scale" => Self::Scale,
            "add_row_bias" => Self::AddRowBias,
            "add_col_bias" => Self::AddColBias,
            "transpose" => Self::Transpose,
            "gelu" => Self::Gelu,
            "softmax_rows" => Self::SoftmaxRows,
            "layer_norm" => Self::LayerNorm,
            "slice_cols" => Self::SliceCols,
            "concat_cols" => Self::ConcatCols,
            "toeplitz" => Self::Toeplitz,
            "sum" => Self::Sum,
            "mean_rows" => Self::MeanRows,
            "gather_rows" => Self::GatherRows,
            "cross_entropy" => Self::CrossEntropy,
            _ => return None,
        })
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    AddColBias(Var, Var),
    Transpose(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Toeplitz(Var),
    Sum(Var),
    MeanRows(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Param => OpTag::Param,
            Op::MatMul(..) => OpTag::MatMul,
            Op::Add(..) => OpTag::Add,
            Op::Mul(..) => OpTag::Mul,
            Op::Scale(..) => OpTag::Scale,
            Op::AddRowBias(..) => OpTag::AddRowBias,
            Op::AddColBias(..) => OpTag::AddColBias,
            Op::Transpose(..) => OpTag::Transpose,
            Op::Gelu(..) => OpTag::Gelu,
            Op::SoftmaxRows(..) => OpTag::SoftmaxRows,
            Op::LayerNorm { .. } => OpTag::LayerNorm,
            Op::SliceCols { .. } => OpTag::SliceCols,
            Op::ConcatCols(..) => OpTag::ConcatCols,
            Op::Toeplitz(..) => OpTag::Toeplitz,
            Op::Sum(..) => OpTag::Sum,
            Op::MeanRows(..) => OpTag::MeanRows,
            Op::GatherRows { .. } => OpTag::GatherRows,
            Op::CrossEntropy { .. } => OpTag::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Parameter gradients keyed by name, in registration order.
pub type Gradients<T> = IndexMap<String, Tensor<T>>;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    consumed: bool,
    fault: Option<OpTag>,
    matmul_macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            consumed: false,
            fault: None,
            matmul_macs: 0,
        }
    }

    /// Test hook: scales every adjoint produced by ops of kind `tag` by 1.01,
    /// so gradient checks can demonstrate they catch a broken rule.
    pub fn corrupt_adjoint(&mut self, tag: OpTag) {
        self.fault = Some(tag);
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

    /// Multiply-adds executed by forward matrix products so far.
    pub fn matmul_macs(&self) -> u64 {
        self.matmul_macs
    }

    pub fn op_tag(&self, v: Var) -> OpTag {
        self.nodes[v.0].op.tag()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A non-trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A named trainable input; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        self.matmul_macs += (m * k * v.shape()[1]) as u64;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = self.value(x).add_row_bias(self.value(b))?;
        Ok(self.push(v, Op::AddRowBias(x, b)))
    }

    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = self.value(x).add_col_bias(self.value(b))?;
        Ok(self.push(v, Op::AddColBias(x, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).gelu();
        self.push(v, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).softmax_rows()?;
        Ok(self.push(v, Op::SoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, inv_std) =
            layer_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, width)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    /// Splits the last axis of a matrix into `parts` equal pieces.
    pub fn split_last_axis(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let (_, c) = self.value(x).dims2("split_last_axis")?;
        if parts == 0 || c % parts != 0 {
            return Err(invalid(
                "split_last_axis",
                format!("last extent {c} is not divisible into {parts} parts"),
            ));
        }
        let w = c / parts;
        (0..parts).map(|p| self.slice_cols(x, p * w, w)).collect()
    }

    pub fn concat_last_axis(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&x| self.value(x)).collect();
        let v = Tensor::concat_last_axis(&values)?;
        Ok(self.push(v, Op::ConcatCols(xs.to_vec())))
    }

    pub fn toeplitz(&mut self, w: Var, n: usize) -> Result<Var> {
        let v = toeplitz_materialize(self.value(w), n)?;
        Ok(self.push(v, Op::Toeplitz(w)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Mean over rows; `[n×c] -> [1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).mean_rows()?;
        Ok(self.push(v, Op::MeanRows(x)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x).gather_rows(idx)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Mean softmax cross entropy of `logits[m×V]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, classes) = lv.dims2("cross_entropy")?;
        if targets.len() != m || m == 0 {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(invalid(
                "cross_entropy",
                format!("target {t} out of range for {classes} classes"),
            ));
        }
        let probs = lv.softmax_rows()?;
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().fold(T::zero(), |a, &b| a + (b - max).exp()).ln() + max;
            total = total + (lse - row[t]);
        }
        let loss = total / T::from_usize(m).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets an
    /// entry; parameters the loss does not depend on get zeros. A tape can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).shape().is_empty() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let contributions = self.adjoint(i, &g)?;
            let corrupt = self.fault == Some(self.nodes[i].op.tag());
            for (parent, mut delta) in contributions {
                if corrupt {
                    delta = delta.scale(T::from_f64_lossy(1.01));
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            }
            // keep parameter adjoints around for collection below
            if matches!(self.nodes[i].op, Op::Param) {
                adj[i] = Some(g);
            }
        }

        let mut grads = IndexMap::with_capacity(self.params.len());
        for (name, &v) in &self.params {
            let g = adj[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()));
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }

    fn adjoint(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf | Op::Param => Vec::new(),
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose()?)?;
                let gb = val(*a).transpose()?.matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddRowBias(x, b) => {
                let (n, c) = g.dims2("add_row_bias")?;
                let mut gb = vec![T::zero(); c];
                for r in 0..n {
                    for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                        *acc = *acc + v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(vec![c], gb)?)]
            }
            Op::AddColBias(x, b) => {
                let (n, _) = g.dims2("add_col_bias")?;
                let gb = (0..n)
                    .map(|r| g.row(r).iter().fold(T::zero(), |a, &v| a + v))
                    .collect();
                vec![(*x, g.clone()), (*b, Tensor::new(vec![n], gb)?)]
            }
            Op::Transpose(x) => vec![(*x, g.transpose()?)],
            Op::Gelu(x) => {
                let d = val(*x).map(gelu_grad_scalar);
                vec![(*x, g.mul(&d)?)]
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, k) = y.dims2("softmax_rows")?;
                let mut out = vec![T::zero(); m * k];
                for r in 0..m {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for j in 0..k {
                        out[r * k + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, Tensor::new(vec![m, k], out)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = g.dims2("layer_norm")?;
                let gam = val(*gamma).data();
                let cf = T::from_usize(c).unwrap();
                let mut gx = vec![T::zero(); n * c];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for r in 0..n {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        mean_d = mean_d + d;
                        mean_dh = mean_dh + d * hr[j];
                        gg[j] = gg[j] + gr[j] * hr[j];
                        gbeta[j] = gbeta[j] + gr[j];
                    }
                    mean_d = mean_d / cf;
                    mean_dh = mean_dh / cf;
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        gx[r * c + j] = inv_std[r] * (d - mean_d - hr[j] * mean_dh);
                    }
                }
                vec![
                    (*x, Tensor::new(vec![n, c], gx)?),
                    (*gamma, Tensor::new(vec![c], gg)?),
                    (*beta, Tensor::new(vec![c], gbeta)?),
                ]
            }
            Op::SliceCols { x, start } => {
                let (n, c) = val(*x).dims2("slice_cols")?;
                let w = g.shape()[1];
                let mut out = Tensor::zeros(vec![n, c]);
                for r in 0..n {
                    out.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                vec![(*x, out)]
            }
            Op::ConcatCols(xs) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let w = val(x).shape()[1];
                    out.push((x, g.slice_cols(start, w)?));
                    start += w;
                }
                out
            }
            Op::Toeplitz(w) => {
                let n = g.shape()[0];
                let mut gw = vec![T::zero(); 2 * n - 1];
                for r in 0..n {
                    for c in 0..n {
                        let k = c + n - 1 - r;
                        gw[k] = gw[k] + g.get2(r, c);
                    }
                }
                vec![(*w, Tensor::new(vec![2 * n - 1], gw)?)]
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                vec![(*x, Tensor::full(val(*x).shape().to_vec(), s))]
            }
            Op::MeanRows(x) => {
                let (n, c) = val(*x).dims2("mean_rows")?;
                let inv = T::one() / T::from_usize(n).unwrap();
                let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                let data = (0..n).flat_map(|_| row.iter().copied()).collect();
                vec![(*x, Tensor::new(vec![n, c], data)?)]
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = val(*x).dims2("gather_rows")?;
                let mut out = Tensor::zeros(vec![r, c]);
                for (k, &row) in idx.iter().enumerate() {
                    let dst = &mut out.data_mut()[row * c..(row + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(g.row(k)) {
                        *d = *d + v;
                    }
                }
                vec![(*x, out)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let m = targets.len();
                let scale = g.data()[0] / T::from_usize(m).unwrap();
                let mut out = probs.clone();
                let k = out.shape()[1];
                for (r, &t) in targets.iter().enumerate() {
                    out.data_mut()[r * k + t] = out.data_mut()[r * k + t] - T::one();
                }
                vec![(*logits, out.scale(scale))]
            }
        })
    }
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every
/// coordinate of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub input: String,
    pub shape: Vec<usize>,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<28} {:<20} {:<16} {:>12.3e}  {}",
                self.name,
                e.input,
                format!("{:?}", e.shape),
                e.max_rel_err,
                if e.max_rel_err <= self.tol { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Options for [`gradient_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub tol: f64,
    pub eps: f64,
    pub fault: Option<OpTag>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            eps: 1e-5,
            fault: None,
        }
    }
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `inputs` are registered as named parameters (in order) and passed to
/// `build`, which records the computation and returns the scalar output.
pub fn gradient_check<F>(
    name: &str,
    inputs: &[(String, Tensor<f64>)],
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], fault: Option<OpTag>| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        if let Some(tag) = fault {
            tape.corrupt_adjoint(tag);
        }
        let vars = inputs
            .iter()
            .zip(values)
            .map(|((n, _), v)| tape.param(n, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok((tape, out))
    };

    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (mut tape, out) = eval(&base, opts.fault)?;
    let grads = tape.backward(out)?;

    let mut entries = Vec::with_capacity(inputs.len());
    for (k, (input_name, x)) in inputs.iter().enumerate() {
        let mut failure = None;
        let fd = finite_diff_grad(
            |probe| {
                let mut values = base.clone();
                values[k] = probe.clone();
                match eval(&values, None) {
                    Ok((tape, out)) => tape.value(out).data()[0],
                    Err(e) => {
                        failure.get_or_insert(e.to_string());
                        f64::NAN
                    }
                }
            },
            x,
            opts.eps,
        );
        if let Some(msg) = failure {
            return Err(invalid("gradient_check", msg));
        }
        let ad = &grads[input_name];
        let max_rel_err = ad
            .data()
            .iter()
            .zip(fd.data())
            .map(|(&a, &b)| relative_error(a, b))
            .fold(0.0, f64::max);
        entries.push(GradCheckEntry {
            input: input_name.clone(),
            shape: x.shape().to_vec(),
            max_rel_err,
        });
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        tol: opts.tol,
        entries,
    })
}

/// Like [`gradient_check`], but compares directional derivatives: for each
/// input and each of `directions` random unit directions `u`, `<g, u>` against
/// `(f(x + eps u) - f(x - eps u)) / 2 eps`. Suited to large models, where some
/// coordinates have gradients too small to resolve by finite differences.
pub fn directional_check<F>(
    name: &str,
    inputs: &[(String, Tensor<f64>)],
    build: F,
    directions: usize,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let eval = |values: &[Tensor<f64>], fault: Option<OpTag>| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        if let Some(tag) = fault {
            tape.corrupt_adjoint(tag);
        }
        let vars = inputs
            .iter()
            .zip(values)
            .map(|((n, _), v)| tape.param(n, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok((tape, out))
    };
    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (mut tape, out) = eval(&base, opts.fault)?;
    let grads = tape.backward(out)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let mut entries = Vec::with_capacity(inputs.len());
    for (k, (input_name, x)) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for _ in 0..directions {
            let mut u: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.iter_mut().for_each(|v| *v /= norm);
            let ad: f64 = grads[input_name].data().iter().zip(&u).map(|(g, v)| g * v).sum();
            let at = |sign: f64| -> Result<f64> {
                let mut values = base.clone();
                for (xi, ui) in values[k].data_mut().iter_mut().zip(&u) {
                    *xi += sign * opts.eps * ui;
                }
                let (tape, out) = eval(&values, None)?;
                Ok(tape.value(out).data()[0])
            };
            let fd = (at(1.0)? - at(-1.0)?) / (2.0 * opts.eps);
            worst = worst.max(relative_error(ad, fd));
        }
        entries.push(GradCheckEntry {
            input: input_name.clone(),
            shape: x.shape().to_vec(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        tol: opts.tol,
        entries,
    })
}

/// Looks up parameter variables by name.
pub fn lookup(vars: &HashMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::MissingParam(name.to_string()))
}
