//! Tensor-level reverse-mode tape.
//!
//! A [`Tape`] records every op applied during one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the record once in reverse and
//! leaves gradients on every node that requires them. A tape is single-use:
//! build a fresh one for each forward/backward cycle.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// LayerNorm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout for the fused multi-head attention op.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Number of valid (non-padding) key positions per sequence.
    pub key_lens: Vec<usize>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    SelectRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape on which no leaf requires a gradient. Values are identical to a
    /// gradient-enabled tape; `backward` is rejected.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`; `None` for
    /// nodes that do not require gradients or were unreachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).require_matrix("matmul")?;
        let (k2, n) = self.value(b).require_matrix("matmul")?;
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let crow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += aip * bv;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).require_matrix("matmul_t")?;
        let (n, k2) = self.value(b).require_matrix("matmul_t")?;
        if k != k2 {
            return Err(self.dim_err("matmul_t", a, b));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.dim_err("add", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last axis of `x` (bias-style broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(row).shape() != [n] {
            return Err(self.dim_err("add_row", x, row));
        }
        let r = self.value(row).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.dim_err("mul", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        // Sequential left-to-right sum keeps reductions deterministic.
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Gathers rows of a `[rows × n]` view.
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let total = t.rows();
        if rows.is_empty() {
            return Err(Error::Input("select_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::Input(format!(
                "row {bad} out of range for {total} rows"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::matrix(rows.len(), n, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SelectRows(x, rows), rg))
    }

    /// Normalizes each row of `x` over its last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(gain).shape() != [n] {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        if self.value(bias).shape() != [n] {
            return Err(self.dim_err("layer_norm", x, bias));
        }
        let xt = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xt.rows();
        let mut normed = Vec::with_capacity(xt.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xt.len());
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                normed.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            rg,
        ))
    }

    /// Scaled dot-product multi-head attention over `[batch·seq × hidden]`
    /// projections. Keys at positions `>= key_lens[b]` are masked out.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (rows, hidden) = self.value(q).require_matrix("attention")?;
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(self.dim_err("attention", q, other));
            }
        }
        let AttentionLayout {
            batch, seq, heads, ..
        } = layout;
        if batch * seq != rows || heads == 0 || hidden % heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                lhs: vec![rows, hidden],
                rhs: vec![batch, seq, heads],
            });
        }
        if layout.key_lens.len() != batch || layout.key_lens.iter().any(|&l| l == 0 || l > seq) {
            return Err(Error::Input(format!(
                "attention key lengths {:?} invalid for batch {batch}, seq {seq}",
                layout.key_lens
            )));
        }
        let dh = hidden / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; rows * hidden];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let len = layout.key_lens[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * hidden + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(len) {
                        let kj = &kd[(b * seq + j) * hidden + off..][..dh];
                        *s = dot(qi, kj) * inv;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(len) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let pbase = ((b * heads + h) * seq + i) * seq;
                    let orow = &mut out[(b * seq + i) * hidden + off..][..dh];
                    for j in 0..len {
                        let p = scores[j] / z;
                        probs[pbase + j] = p;
                        let vj = &vd[(b * seq + j) * hidden + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::matrix(rows, hidden, out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = self.value(logits).require_matrix("softmax_cross_entropy")?;
        if labels.len() != batch {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: vec![batch, classes],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let lt = self.value(logits);
        let mut probs = Vec::with_capacity(batch * classes);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lt.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let loss = total / batch as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// Consumes the tape's record: a second call is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Usage("backward on an inference tape".into()));
        }
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            backprop_node(nodes, &mut grads, node, &gout);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Mutable gradient buffer for `v`, created on first use. `None` when `v`
/// does not take gradients.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, gout: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                let bd = val(*b).data();
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let ad = val(*a).data();
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        for (g, &go) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *g += aip * go;
                        }
                    }
                }
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            if let Some(ga) = slot(nodes, grads, *a) {
                let bd = val(*b).data();
                for i in 0..m {
                    let garow = &mut ga[i * k..(i + 1) * k];
                    for j in 0..n {
                        let go = gout[i * n + j];
                        for (g, &bv) in garow.iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                            *g += go * bv;
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let ad = val(*a).data();
                for i in 0..m {
                    let arow = &ad[i * k..(i + 1) * k];
                    for j in 0..n {
                        let go = gout[i * n + j];
                        for (g, &av) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *g += go * av;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for x in [a, b] {
                if let Some(g) = slot(nodes, grads, *x) {
                    g.iter_mut().zip(gout).for_each(|(g, &go)| *g += go);
                }
            }
        }
        Op::AddRow(x, row) => {
            if let Some(g) = slot(nodes, grads, *x) {
                g.iter_mut().zip(gout).for_each(|(g, &go)| *g += go);
            }
            if let Some(g) = slot(nodes, grads, *row) {
                let n = g.len();
                for chunk in gout.chunks(n) {
                    g.iter_mut().zip(chunk).for_each(|(g, &go)| *g += go);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(g) = slot(nodes, grads, *a) {
                let other = val(*b).data();
                for ((g, &go), &o) in g.iter_mut().zip(gout).zip(other) {
                    *g += go * o;
                }
            }
            if let Some(g) = slot(nodes, grads, *b) {
                let other = val(*a).data();
                for ((g, &go), &o) in g.iter_mut().zip(gout).zip(other) {
                    *g += go * o;
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(g) = slot(nodes, grads, *x) {
                g.iter_mut().zip(gout).for_each(|(g, &go)| *g += go * f);
            }
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            if let Some(g) = slot(nodes, grads, *x) {
                for ((g, &go), &xv) in g.iter_mut().zip(gout).zip(xd) {
                    if xv > 0.0 {
                        *g += go;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xd = val(*x).data();
            if let Some(g) = slot(nodes, grads, *x) {
                for ((g, &go), &xv) in g.iter_mut().zip(gout).zip(xd) {
                    *g += go * gelu_grad(xv);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                g.iter_mut().for_each(|g| *g += gout[0]);
            }
        }
        Op::SelectRows(x, rows) => {
            let n = val(*x).last_dim();
            if let Some(g) = slot(nodes, grads, *x) {
                for (out_r, &src) in rows.iter().enumerate() {
                    let grow = &gout[out_r * n..(out_r + 1) * n];
                    g[src * n..(src + 1) * n]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(g, &go)| *g += go);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            rstd,
        } => {
            let n = val(*x).last_dim();
            let gd = val(*gain).data();
            if let Some(gb) = slot(nodes, grads, *bias) {
                for chunk in gout.chunks(n) {
                    gb.iter_mut().zip(chunk).for_each(|(g, &go)| *g += go);
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (chunk, xh) in gout.chunks(n).zip(normed.chunks(n)) {
                    for j in 0..n {
                        gg[j] += chunk[j] * xh[j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dxh = vec![0.0; n];
                for (r, rs) in rstd.iter().enumerate() {
                    let go = &gout[r * n..(r + 1) * n];
                    let xh = &normed[r * n..(r + 1) * n];
                    for j in 0..n {
                        dxh[j] = go[j] * gd[j];
                    }
                    let mean_d = dxh.iter().sum::<f64>() / n as f64;
                    let mean_dx = dot(&dxh, xh) / n as f64;
                    for j in 0..n {
                        gx[r * n + j] += rs * (dxh[j] - mean_d - xh[j] * mean_dx);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => attention_backward(nodes, grads, (*q, *k, *v), layout, probs, gout),
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if let Some(g) = slot(nodes, grads, *logits) {
                let classes = val(*logits).last_dim();
                let scale = gout[0] / labels.len() as f64;
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let target = if c == label { 1.0 } else { 0.0 };
                        g[r * classes + c] += scale * (probs[r * classes + c] - target);
                    }
                }
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    (q, k, v): (Var, Var, Var),
    layout: &AttentionLayout,
    probs: &[f64],
    gout: &[f64],
) {
    let (batch, seq, heads) = (layout.batch, layout.seq, layout.heads);
    let hidden = nodes[q.0].value.last_dim();
    let dh = hidden / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let qd = nodes[q.0].value.data();
    let kd = nodes[k.0].value.data();
    let vd = nodes[v.0].value.data();
    let rows = batch * seq;

    // Work in local buffers, then fold into the shared gradient slots.
    let mut gq = vec![0.0; rows * hidden];
    let mut gk = vec![0.0; rows * hidden];
    let mut gv = vec![0.0; rows * hidden];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        let len = layout.key_lens[b];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let pbase = ((b * heads + h) * seq + i) * seq;
                let p = &probs[pbase..pbase + len];
                let go = &gout[(b * seq + i) * hidden + off..][..dh];
                let mut weighted = 0.0;
                for j in 0..len {
                    let vj = &vd[(b * seq + j) * hidden + off..][..dh];
                    dp[j] = dot(go, vj);
                    weighted += p[j] * dp[j];
                    let gvj = &mut gv[(b * seq + j) * hidden + off..][..dh];
                    for (g, &o) in gvj.iter_mut().zip(go) {
                        *g += p[j] * o;
                    }
                }
                let qi = &qd[(b * seq + i) * hidden + off..][..dh];
                for j in 0..len {
                    let ds = p[j] * (dp[j] - weighted) * inv;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kd[(b * seq + j) * hidden + off..][..dh];
                    let gqi = &mut gq[(b * seq + i) * hidden + off..][..dh];
                    for (g, &kv) in gqi.iter_mut().zip(kj) {
                        *g += ds * kv;
                    }
                    let gkj = &mut gk[(b * seq + j) * hidden + off..][..dh];
                    for (g, &qv) in gkj.iter_mut().zip(qi) {
                        *g += ds * qv;
                    }
                }
            }
        }
    }
    for (var, local) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(g) = slot(nodes, grads, var) {
            g.iter_mut().zip(&local).for_each(|(g, l)| *g += l);
        }
    }
}
