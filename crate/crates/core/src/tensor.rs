//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a Wengert list: forward operations append a node holding the
//! result value and enough information to run the local backward rule. A
//! single [`Tape::backward`] pass walks the nodes in reverse and accumulates
//! gradients into every leaf created with `requires_grad`. The tape is
//! rebuilt per forward pass, so variable sequence lengths need no graph
//! surgery.
//!
//! Everything is 64-bit; the models here are small enough that precision is
//! cheaper than speed, and it keeps finite-difference gradient checks sharp.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Dense n-dimensional value, row-major flat storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1-D tensor from raw values.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::vector(vec![x])
    }

    /// 2-D tensor from rows; all rows must be the same length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::contract("matrix rows have unequal lengths"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows/cols when viewed as a matrix: 1-D `[n]` reads as `[1, n]`.
    fn view_2d(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::contract(format!(
                "expected vector or matrix, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a` viewed `[m,k]`, `b` viewed `[k,n]`.
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Tanh {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        x: TensorId,
        start: usize,
    },
    Reshape {
        x: TensorId,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    Sum {
        x: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    /// `out = Σ_j weights[j] * items[j]`.
    WeightedSum {
        weights: TensorId,
        items: Vec<TensorId>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass; owns every intermediate value.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log Σ exp(row)` with max subtraction.
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input value. Gradients flow into it iff the tensor was
    /// marked with [`Tensor::with_grad`].
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Record an input that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs: bool) -> TensorId {
        let t = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(t, op, needs)
    }

    /// Matrix product. 1-D operands are viewed as a row (`a`) or a column
    /// (`b`), so `matmul(W[m×k], x[k])` is the usual matrix-vector product
    /// with result shape `[m]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let a_vec = ta.shape.len() == 1;
        let b_vec = tb.shape.len() == 1;
        let (m, ka) = ta.view_2d()?;
        let (kb, n) = if b_vec {
            (tb.shape[0], 1)
        } else {
            tb.view_2d()?
        };
        if ka != kb {
            return Err(Error::DimMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = matmul_2d(&ta.data, &tb.data, m, ka, n);
        let shape = match (a_vec, b_vec) {
            (false, false) => vec![m, n],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (true, true) => vec![1],
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.record(shape, data, Op::MatMul { a, b, m, k: ka, n }, needs))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::DimMismatch {
                op: op_name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data: Vec<f64> = ta
            .data
            .iter()
            .zip(tb.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.record(shape, data, op, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let t = &self.nodes[x.0].value;
        let data: Vec<f64> = t.data.iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape.clone();
        let needs = self.needs(x);
        self.record(shape, data, Op::Sigmoid { x }, needs)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let t = &self.nodes[x.0].value;
        let data: Vec<f64> = t.data.iter().map(|&v| libm::tanh(v)).collect();
        let shape = t.shape.clone();
        let needs = self.needs(x);
        self.record(shape, data, Op::Tanh { x }, needs)
    }

    /// Softmax over a 1-D tensor, max-subtracted for stability.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 1 || t.shape[0] == 0 {
            return Err(Error::DimMismatch {
                op: "softmax",
                lhs: t.shape.clone(),
                rhs: vec![],
            });
        }
        let max = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data.iter().map(|&v| libm::exp(v - max)).collect();
        let total: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|&e| e / total).collect();
        let shape = t.shape.clone();
        let needs = self.needs(x);
        Ok(self.record(shape, data, Op::Softmax { x }, needs))
    }

    /// Concatenate 1-D tensors (axis 0) or matrices (axis 0 stacks rows,
    /// axis 1 joins columns). All shapes must agree off the chosen axis.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let rank = self.nodes[parts[0].0].value.shape.len();
        if axis >= rank {
            return Err(Error::contract(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let first_shape = self.nodes[parts[0].0].value.shape.clone();
        let mut axis_total = 0;
        for &p in parts {
            let s = &self.nodes[p.0].value.shape;
            if s.len() != rank
                || s.iter()
                    .zip(&first_shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::DimMismatch {
                    op: "concat",
                    lhs: first_shape.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first_shape;
        shape[axis] = axis_total;

        let data = if axis == 0 {
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(&self.nodes[p.0].value.data);
            }
            data
        } else {
            // axis 1 on matrices: join row by row
            let rows = shape[0];
            let mut data = Vec::with_capacity(rows * shape[1]);
            for r in 0..rows {
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    let w = t.shape[1];
                    data.extend_from_slice(&t.data[r * w..(r + 1) * w]);
                }
            }
            data
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.record(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Contiguous sub-vector of a 1-D tensor.
    pub fn slice(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 1 || start + len > t.shape[0] {
            return Err(Error::contract(format!(
                "slice [{start}, {}) out of range for shape {:?}",
                start + len,
                t.shape
            )));
        }
        let data = t.data[start..start + len].to_vec();
        let needs = self.needs(x);
        Ok(self.record(vec![len], data, Op::Slice { x, start }, needs))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let t = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != t.data.len() {
            return Err(Error::contract(format!(
                "reshape {:?} -> {:?} changes element count",
                t.shape, shape
            )));
        }
        let data = t.data.clone();
        let needs = self.needs(x);
        Ok(self.record(shape, data, Op::Reshape { x }, needs))
    }

    /// Row-gather from a `[V, d]` table; the backward pass accumulates only
    /// into the gathered rows.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let t = &self.nodes[table.0].value;
        if t.shape.len() != 2 {
            return Err(Error::contract(format!(
                "embedding table must be 2-D, got {:?}",
                t.shape
            )));
        }
        let (v, d) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange { index: id, size: v });
            }
            data.extend_from_slice(&t.data[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.record(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Masked mean token-level negative log-likelihood over `[T, V]` logits.
    ///
    /// Returns `-(1/Σmask) Σ_t mask_t · log softmax(logits_t)[targets_t]`,
    /// computed with log-sum-exp.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let t = &self.nodes[logits.0].value;
        if t.shape.len() != 2 {
            return Err(Error::contract(format!(
                "cross_entropy expects [T, V] logits, got {:?}",
                t.shape
            )));
        }
        let (steps, vocab) = (t.shape[0], t.shape[1]);
        if targets.len() != steps || mask.len() != steps {
            return Err(Error::contract(format!(
                "cross_entropy: {} steps but {} targets / {} mask entries",
                steps,
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate(
                "cross_entropy over an all-masked batch".into(),
            ));
        }
        let mut total = 0.0;
        for (step, (&y, &m)) in targets.iter().zip(mask.iter()).enumerate() {
            if !m {
                continue;
            }
            if y >= vocab {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    size: vocab,
                });
            }
            let row = &t.data[step * vocab..(step + 1) * vocab];
            total -= row[y] - log_sum_exp(row);
        }
        let loss = total / count as f64;
        let needs = self.needs(logits);
        Ok(self.record(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let t = &self.nodes[x.0].value;
        let s: f64 = t.data.iter().sum();
        let needs = self.needs(x);
        self.record(vec![1], vec![s], Op::Sum { x }, needs)
    }

    /// Multiply by a compile-time constant (no gradient into `c`).
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let t = &self.nodes[x.0].value;
        let data: Vec<f64> = t.data.iter().map(|&v| v * c).collect();
        let shape = t.shape.clone();
        let needs = self.needs(x);
        self.record(shape, data, Op::Scale { x, c }, needs)
    }

    /// Inner product of two equal-length vectors, as a scalar.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let prod = self.mul(a, b)?;
        Ok(self.sum(prod))
    }

    /// `Σ_j weights[j] · items[j]` over equally-shaped item tensors.
    pub fn weighted_sum(&mut self, weights: TensorId, items: &[TensorId]) -> Result<TensorId> {
        let w = &self.nodes[weights.0].value;
        if w.shape.len() != 1 || w.shape[0] != items.len() {
            return Err(Error::DimMismatch {
                op: "weighted_sum",
                lhs: w.shape.clone(),
                rhs: vec![items.len()],
            });
        }
        if items.is_empty() {
            return Err(Error::contract("weighted_sum of zero items"));
        }
        let item_shape = self.nodes[items[0].0].value.shape.clone();
        let mut data = vec![0.0; self.nodes[items[0].0].value.numel()];
        for (j, &item) in items.iter().enumerate() {
            let t = &self.nodes[item.0].value;
            if t.shape != item_shape {
                return Err(Error::DimMismatch {
                    op: "weighted_sum",
                    lhs: item_shape,
                    rhs: t.shape.clone(),
                });
            }
            let wj = self.nodes[weights.0].value.data[j];
            for (o, &v) in data.iter_mut().zip(t.data.iter()) {
                *o += wj * v;
            }
        }
        let needs = self.needs(weights) || items.iter().any(|&i| self.needs(i));
        Ok(self.record(
            item_shape,
            data,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss; fills `grad` on every node that
    /// (transitively) requires gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].value.grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    if self.needs(a) {
                        // dA = G · Bᵀ
                        let bt = transpose(&self.nodes[b.0].value.data, k, n);
                        let da = matmul_2d(&grad, &bt, m, n, k);
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        // dB = Aᵀ · G
                        let at = transpose(&self.nodes[a.0].value.data, m, k);
                        let db = matmul_2d(&at, &grad, k, m, n);
                        self.accumulate(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[b.0].value.data)
                            .map(|(g, y)| g * y)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[a.0].value.data)
                            .map(|(g, x)| g * x)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Sigmoid { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].value.data)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Tanh { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].value.data)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Softmax { x } => {
                    // ds_j = s_j (g_j − Σ_k g_k s_k)
                    let s = &self.nodes[i].value.data;
                    let dot: f64 = grad.iter().zip(s.iter()).map(|(g, v)| g * v).sum();
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(s.iter())
                        .map(|(g, v)| v * (g - dot))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Concat { parts, axis } => {
                    if axis == 0 {
                        let mut offset = 0;
                        for &p in &parts {
                            let len = self.nodes[p.0].value.numel();
                            let piece = grad[offset..offset + len].to_vec();
                            self.accumulate(p, &piece);
                            offset += len;
                        }
                    } else {
                        let rows = self.nodes[i].value.shape[0];
                        let total_w = self.nodes[i].value.shape[1];
                        let mut col = 0;
                        for &p in &parts {
                            let w = self.nodes[p.0].value.shape[1];
                            let mut piece = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                piece.extend_from_slice(
                                    &grad[r * total_w + col..r * total_w + col + w],
                                );
                            }
                            self.accumulate(p, &piece);
                            col += w;
                        }
                    }
                }
                Op::Slice { x, start } => {
                    let len = self.nodes[x.0].value.numel();
                    let mut dx = vec![0.0; len];
                    dx[start..start + grad.len()].copy_from_slice(&grad);
                    self.accumulate(x, &dx);
                }
                Op::Reshape { x } => {
                    self.accumulate(x, &grad);
                }
                Op::Embedding { table, ids } => {
                    let d = self.nodes[table.0].value.shape[1];
                    let mut dt = vec![0.0; self.nodes[table.0].value.numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += grad[row * d + c];
                        }
                    }
                    self.accumulate(table, &dt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                } => {
                    let t = &self.nodes[logits.0].value;
                    let vocab = t.shape[1];
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let g = grad[0];
                    let mut dl = vec![0.0; t.numel()];
                    for (step, (&y, &m)) in targets.iter().zip(mask.iter()).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &t.data[step * vocab..(step + 1) * vocab];
                        let lse = log_sum_exp(row);
                        for j in 0..vocab {
                            let p = libm::exp(row[j] - lse);
                            let target = if j == y { 1.0 } else { 0.0 };
                            dl[step * vocab + j] = g * (p - target) / count;
                        }
                    }
                    self.accumulate(logits, &dl);
                }
                Op::Sum { x } => {
                    let dx = vec![grad[0]; self.nodes[x.0].value.numel()];
                    self.accumulate(x, &dx);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accumulate(x, &dx);
                }
                Op::WeightedSum { weights, items } => {
                    if self.needs(weights) {
                        let mut dw = vec![0.0; items.len()];
                        for (j, &item) in items.iter().enumerate() {
                            dw[j] = grad
                                .iter()
                                .zip(&self.nodes[item.0].value.data)
                                .map(|(g, v)| g * v)
                                .sum();
                        }
                        self.accumulate(weights, &dw);
                    }
                    for (j, &item) in items.iter().enumerate() {
                        if self.needs(item) {
                            let wj = self.nodes[weights.0].value.data[j];
                            let di: Vec<f64> = grad.iter().map(|g| g * wj).collect();
                            self.accumulate(item, &di);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, src: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let value = &mut self.nodes[id.0].value;
        let grad = value
            .grad
            .get_or_insert_with(|| vec![0.0; value.data.len()]);
        for (g, s) in grad.iter_mut().zip(src.iter()) {
            *g += s;
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Compare the tape's gradients against central finite differences.
///
/// `f` must build a scalar loss from the given leaves and be deterministic;
/// two probe evaluations that disagree bit-for-bit are rejected. The error
/// of each coordinate is `|analytic − numeric| / max(|analytic|, |numeric|,
/// 1)`, so near-zero gradients are judged on absolute error.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |f: &mut F, points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = points.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::contract("grad_check function must be scalar-valued"));
        }
        Ok(tape.data(loss)[0])
    };

    let probe_a = eval(&mut f, inputs)?;
    let probe_b = eval(&mut f, inputs)?;
    if probe_a.to_bits() != probe_b.to_bits() {
        return Err(Error::contract(
            "grad_check function is non-deterministic (two forward passes differ)",
        ));
    }

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut points = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            points[i].data_mut()[j] = orig + eps;
            let plus = eval(&mut f, &points)?;
            points[i].data_mut()[j] = orig - eps;
            let minus = eval(&mut f, &points)?;
            points[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        pass: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len(), "length mismatch");
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < tol, "got {got:?}, want {want:?}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = tape.matmul(eye, m).unwrap();
        assert_close(tape.data(out), &[1.0, 2.0, 3.0, 4.0], 1e-12);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::matrix(&[vec![5.0], vec![6.0]]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(out), &[2, 1]);
        assert_close(tape.data(out), &[17.0, 39.0], 1e-12);
    }

    #[test]
    fn matmul_zero_matrix() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::matrix(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let out = tape.matmul(zero, b).unwrap();
        assert_close(tape.data(out), &[0.0, 0.0], 1e-15);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        match tape.matmul(a, b) {
            Err(Error::DimMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn matvec_views() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let x = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let wx = tape.matmul(w, x).unwrap();
        assert_eq!(tape.shape(wx), &[2]);
        assert_close(tape.data(wx), &[3.0, 7.0], 1e-12);

        let xw = tape.matmul(x, w).unwrap();
        assert_eq!(tape.shape(xw), &[2]);
        assert_close(tape.data(xw), &[4.0, 6.0], 1e-12);
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(vec![3]));
        let s = tape.sigmoid(zero);
        assert_close(tape.data(s), &[0.5, 0.5, 0.5], 1e-15);
        let t = tape.tanh(zero);
        assert_close(tape.data(t), &[0.0, 0.0, 0.0], 1e-15);

        let x = tape.constant(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let sum = tape.add(x, zero).unwrap();
        assert_close(tape.data(sum), &[1.5, -2.0, 0.25], 1e-15);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![3]));
        let b = tape.constant(Tensor::zeros(vec![4]));
        assert!(matches!(
            tape.add(a, b),
            Err(Error::DimMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn softmax_symmetry_and_hand_case() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![3.7, 3.7, 3.7]));
        let s = tape.softmax(c).unwrap();
        assert_close(tape.data(s), &[1.0 / 3.0; 3], 1e-15);

        // e^0 = 1, e^{ln 2} = 2
        let x = tape.constant(Tensor::vector(vec![0.0, libm::log(2.0)]));
        let s = tape.softmax(x).unwrap();
        assert_close(tape.data(s), &[1.0 / 3.0, 2.0 / 3.0], 1e-12);
    }

    #[test]
    fn softmax_no_overflow_on_huge_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        let out = tape.data(s);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0] > 1.0 - 1e-12 && out[1] < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![]));
        assert!(tape.softmax(x).is_err());
    }

    #[test]
    fn concat_order_and_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let ab = tape.concat(&[a, b], 0).unwrap();
        assert_close(tape.data(ab), &[1.0, 2.0, 3.0, 4.0, 5.0], 1e-15);

        let single = tape.concat(&[b], 0).unwrap();
        assert_eq!(tape.data(single), tape.data(b));
    }

    #[test]
    fn concat_matrix_axes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.constant(Tensor::matrix(&[vec![3.0, 4.0]]).unwrap());
        let rows = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(rows), &[2, 2]);
        let cols = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(cols), &[1, 4]);
        assert_close(tape.data(cols), &[1.0, 2.0, 3.0, 4.0], 1e-15);
    }

    #[test]
    fn embedding_lookup_gathers_rows() {
        let mut tape = Tape::new();
        let table =
            tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = tape.embedding_lookup(table, &[1, 1]).unwrap();
        assert_close(tape.data(out), &[3.0, 4.0, 3.0, 4.0], 1e-15);

        let empty = tape.embedding_lookup(table, &[]).unwrap();
        assert_eq!(tape.shape(empty), &[0, 2]);

        assert!(matches!(
            tape.embedding_lookup(table, &[2]),
            Err(Error::IndexOutOfRange { index: 2, size: 2 })
        ));
    }

    #[test]
    fn embedding_backward_accumulates_per_row() {
        let mut tape = Tape::new();
        let table = tape.leaf(
            Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]])
                .unwrap()
                .with_grad(),
        );
        let rows = tape.embedding_lookup(table, &[0, 0]).unwrap();
        let loss = tape.sum(rows);
        tape.backward(loss).unwrap();
        assert_close(tape.grad(table).unwrap(), &[2.0, 2.0, 0.0, 0.0], 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![3, 4]));
        let loss = tape
            .cross_entropy(logits, &[0, 1, 2], &[true, true, true])
            .unwrap();
        assert!((tape.data(loss)[0] - libm::log(4.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_goes_to_zero() {
        let mut tape = Tape::new();
        let mut rows = alloc::vec![alloc::vec![0.0; 4]; 2];
        rows[0][1] = 50.0;
        rows[1][3] = 50.0;
        let logits = tape.constant(Tensor::matrix(&rows).unwrap());
        let loss = tape.cross_entropy(logits, &[1, 3], &[true, true]).unwrap();
        assert!(tape.data(loss)[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_masked_step_is_inert() {
        let mut tape = Tape::new();
        let logits = tape.constant(
            Tensor::matrix(&[vec![0.3, -0.1, 2.0], vec![1.0, 0.0, -1.0]]).unwrap(),
        );
        let a = tape.cross_entropy(logits, &[2, 0], &[true, false]).unwrap();
        let b = tape.cross_entropy(logits, &[2, 1], &[true, false]).unwrap();
        assert_eq!(tape.data(a)[0].to_bits(), tape.data(b)[0].to_bits());
    }

    #[test]
    fn cross_entropy_all_masked_is_degenerate() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 0], &[false, false]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 7.0]).with_grad());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0], 1e-15);
    }

    #[test]
    fn backward_of_dot_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]).with_grad());
        let loss = tape.dot(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0], 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn random_graph_matches_finite_differences() {
        // matmul → tanh → weighted CE-free reduction, checked coordinatewise
        let w = Tensor::matrix(&[vec![0.3, -0.2, 0.8], vec![-0.5, 0.4, 0.1]]).unwrap();
        let x = Tensor::vector(vec![0.7, -1.2, 0.4]);
        let v = Tensor::vector(vec![0.9, -0.3]);
        let report = grad_check(
            |tape, ids| {
                let wx = tape.matmul(ids[0], ids[1])?;
                let t = tape.tanh(wx);
                tape.dot(t, ids[2])
            },
            &[w, x, v],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn concat_slice_gradients_match_finite_differences() {
        let a = Tensor::vector(vec![0.3, -0.9]);
        let b = Tensor::vector(vec![1.4, 0.2, -0.6]);
        let report = grad_check(
            |tape, ids| {
                let joined = tape.concat(&[ids[0], ids[1]], 0)?;
                let mid = tape.slice(joined, 1, 3)?;
                let s = tape.sigmoid(mid);
                Ok(tape.sum(s))
            },
            &[a, b],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::matrix(&[
            vec![0.2, -0.4, 0.9, 0.0],
            vec![1.5, 0.3, -0.8, 0.1],
            vec![-0.2, 0.6, 0.4, -1.0],
        ])
        .unwrap();
        let report = grad_check(
            |tape, ids| tape.cross_entropy(ids[0], &[2, 0, 1], &[true, false, true]),
            &[logits],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn grad_check_sum_is_essentially_exact() {
        let x = Tensor::vector(vec![0.25, -1.5, 3.0]);
        let report = grad_check(|tape, ids| Ok(tape.sum(ids[0])), &[x], 1e-5, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn grad_check_catches_a_wrong_backward_rule() {
        // Freezing one factor of x·x into a constant records dx = x on the
        // tape while the function actually computed has derivative 2x.
        let x = Tensor::vector(vec![0.8, -0.6, 1.1]);
        let report = grad_check(
            |tape, ids| {
                let frozen = Tensor::vector(tape.data(ids[0]).to_vec());
                let c = tape.constant(frozen);
                tape.dot(ids[0], c)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn weighted_sum_matches_manual_summation() {
        let w = Tensor::vector(vec![0.2, 0.5, 0.3]);
        let items = [
            Tensor::vector(vec![1.0, 0.0]),
            Tensor::vector(vec![0.0, 1.0]),
            Tensor::vector(vec![2.0, -2.0]),
        ];
        let mut tape = Tape::new();
        let wid = tape.constant(w.clone());
        let ids: Vec<TensorId> = items.iter().map(|t| tape.constant(t.clone())).collect();
        let out = tape.weighted_sum(wid, &ids).unwrap();
        let mut manual = [0.0; 2];
        for (j, item) in items.iter().enumerate() {
            for (m, v) in manual.iter_mut().zip(item.data()) {
                *m += w.data()[j] * v;
            }
        }
        assert_close(tape.data(out), &manual, 1e-15);

        let mut inputs = alloc::vec![w];
        inputs.extend(items.iter().cloned());
        let report = grad_check(
            |tape, ids| {
                let out = tape.weighted_sum(ids[0], &ids[1..])?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum(sq))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let b = tape.constant(Tensor::vector(vec![-0.4, 0.5, 0.6]));
            let s = tape.add(a, b).unwrap();
            let t = tape.tanh(s);
            let sm = tape.softmax(t).unwrap();
            tape.data(sm).to_vec()
        };
        let x = run();
        let y = run();
        for (a, b) in x.iter().zip(y.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(values in proptest::collection::vec(-300.0f64..300.0, 1..40)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(values));
            let s = tape.softmax(x).unwrap();
            let out = tape.data(s);
            prop_assert!(out.iter().all(|&v| v >= 0.0));
            let total: f64 = out.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn finite_inputs_stay_finite(values in proptest::collection::vec(-1e6f64..1e6, 2..20)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(values.clone()));
            let s = tape.sigmoid(x);
            let t = tape.tanh(s);
            let sm = tape.softmax(t).unwrap();
            let half = tape.scale(sm, 0.5);
            let y = tape.add(sm, half).unwrap();
            prop_assert!(tape.value(y).is_finite());

            let logits = tape.reshape(x, alloc::vec![1, values.len()]).unwrap();
            let ce = tape.cross_entropy(logits, &[0], &[true]).unwrap();
            prop_assert!(tape.value(ce).is_finite());
        }
    }
}
