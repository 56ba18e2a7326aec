//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] replays
//! them in reverse to accumulate gradients for every parameter leaf. All
//! values are 64-bit and row-major. Broadcasting is limited to adding a
//! bias vector over the rows of a matrix; every other shape mix is an error,
//! which keeps each backward rule short enough to audit.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major array of rank 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Arr { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Arr { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Arr { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Arr { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Arr { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Arr { shape: vec![rows, cols], data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows when viewed as a stack over the last dimension.
    fn lastdim_rows(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.numel() / cols.max(1), cols)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Operation kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
    Square,
    SoftmaxLastDim,
    Sum,
    Mean,
    EmbedLookup,
    LayerNormLastDim,
    Concat,
    Slice,
    Transpose,
    MaskedFill,
    Leaf,
}

/// Per-op attributes; most ops carry none.
#[derive(Clone, Debug)]
pub enum OpAttrs {
    None,
    /// Row indices for `EmbedLookup`.
    Indices(Vec<usize>),
    /// Concat axis.
    Axis(usize),
    /// Contiguous slice along an axis.
    SliceSpec { axis: usize, start: usize, end: usize },
    /// Fill `value` wherever `mask` is true.
    MaskFill { mask: Vec<bool>, value: f64 },
    /// Layer-norm epsilon.
    Eps(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

struct Node {
    value: Arr,
    op: OpKind,
    attrs: OpAttrs,
    parents: Vec<usize>,
    param: Option<String>,
}

/// Gradients keyed by parameter name. Deterministic iteration order.
#[derive(Clone, Debug, Default)]
pub struct GradTable {
    grads: BTreeMap<String, Arr>,
}

impl GradTable {
    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.grads.iter()
    }

    pub fn insert(&mut self, name: String, grad: Arr) {
        match self.grads.get_mut(&name) {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(grad.data.iter()) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(name, grad);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.is_finite())
    }

    /// Entry-wise sum of two tables (used when merging per-context gradients).
    pub fn merge(&mut self, other: &GradTable) {
        for (name, g) in other.iter() {
            self.insert(name.clone(), g.clone());
        }
    }
}

/// Records ops in execution order; parents always precede children.
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: BTreeMap<String, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_leaves: BTreeMap::new() }
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    /// Detached constant leaf; never receives gradients.
    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.push(Node { value, op: OpKind::Leaf, attrs: OpAttrs::None, parents: vec![], param: None })
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Arr::scalar(v))
    }

    /// Leaf bound to a named parameter in `store`; gradients accumulate
    /// under that name. Repeated bindings of the same name on one tape
    /// return the same leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_leaves.get(name) {
            return Ok(id);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let id = self.push(Node {
            value: p.value.clone(),
            op: OpKind::Leaf,
            attrs: OpAttrs::None,
            parents: vec![],
            param: Some(name.to_string()),
        });
        self.param_leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Record one operation. Shapes are validated per kind; the result value
    /// is computed eagerly.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId], attrs: OpAttrs) -> Result<NodeId> {
        let value = self.eval(kind, inputs, &attrs)?;
        Ok(self.push(Node {
            value,
            op: kind,
            attrs,
            parents: inputs.iter().map(|i| i.0).collect(),
            param: None,
        }))
    }

    fn eval(&self, kind: OpKind, inputs: &[NodeId], attrs: &OpAttrs) -> Result<Arr> {
        let arg = |i: usize| -> &Arr { &self.nodes[inputs[i].0].value };
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Shape(format!("{kind:?} expects {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match kind {
            OpKind::Leaf => Err(Error::Config("Leaf is not applicable".into())),
            OpKind::Matmul => {
                need(2)?;
                let (a, b) = (arg(0), arg(1));
                if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                    return Err(Error::Shape(format!(
                        "matmul {:?} x {:?}",
                        a.shape, b.shape
                    )));
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut out = vec![0.0; m * n];
                matmul_ab(&a.data, &b.data, m, k, n, &mut out);
                Ok(Arr::matrix(m, n, out))
            }
            OpKind::Add => {
                need(2)?;
                let (a, b) = (arg(0), arg(1));
                if a.shape == b.shape {
                    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
                    Ok(Arr::new(a.shape.clone(), data))
                } else if a.rank() == 2 && b.rank() == 1 && a.shape[1] == b.shape[0] {
                    // bias vector over rows
                    let n = b.shape[0];
                    let mut data = a.data.clone();
                    for row in data.chunks_mut(n) {
                        for (x, y) in row.iter_mut().zip(&b.data) {
                            *x += y;
                        }
                    }
                    Ok(Arr::new(a.shape.clone(), data))
                } else {
                    Err(Error::Shape(format!("add {:?} + {:?}", a.shape, b.shape)))
                }
            }
            OpKind::Sub => {
                need(2)?;
                let (a, b) = (arg(0), arg(1));
                if a.shape != b.shape {
                    return Err(Error::Shape(format!("sub {:?} - {:?}", a.shape, b.shape)));
                }
                let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
                Ok(Arr::new(a.shape.clone(), data))
            }
            OpKind::Mul => {
                need(2)?;
                let (a, b) = (arg(0), arg(1));
                if a.shape != b.shape {
                    return Err(Error::Shape(format!("mul {:?} * {:?}", a.shape, b.shape)));
                }
                let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
                Ok(Arr::new(a.shape.clone(), data))
            }
            OpKind::Relu => {
                need(1)?;
                let a = arg(0);
                let data = a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
                Ok(Arr::new(a.shape.clone(), data))
            }
            OpKind::Exp => {
                need(1)?;
                let a = arg(0);
                Ok(Arr::new(a.shape.clone(), a.data.iter().map(|x| x.exp()).collect()))
            }
            OpKind::Log => {
                need(1)?;
                let a = arg(0);
                Ok(Arr::new(a.shape.clone(), a.data.iter().map(|x| x.ln()).collect()))
            }
            OpKind::Square => {
                need(1)?;
                let a = arg(0);
                Ok(Arr::new(a.shape.clone(), a.data.iter().map(|x| x * x).collect()))
            }
            OpKind::SoftmaxLastDim => {
                need(1)?;
                let a = arg(0);
                let (rows, cols) = a.lastdim_rows();
                if cols == 0 {
                    return Err(Error::Shape("softmax over empty last dim".into()));
                }
                let mut data = vec![0.0; a.numel()];
                for r in 0..rows {
                    let src = &a.data[r * cols..(r + 1) * cols];
                    let dst = &mut data[r * cols..(r + 1) * cols];
                    softmax_row(src, dst);
                }
                Ok(Arr::new(a.shape.clone(), data))
            }
            OpKind::Sum => {
                need(1)?;
                Ok(Arr::scalar(arg(0).data.iter().sum()))
            }
            OpKind::Mean => {
                need(1)?;
                let a = arg(0);
                if a.numel() == 0 {
                    return Err(Error::Shape("mean of empty tensor".into()));
                }
                Ok(Arr::scalar(a.data.iter().sum::<f64>() / a.numel() as f64))
            }
            OpKind::EmbedLookup => {
                need(1)?;
                let table = arg(0);
                let OpAttrs::Indices(idx) = attrs else {
                    return Err(Error::Config("embed-lookup needs indices".into()));
                };
                if table.rank() != 2 {
                    return Err(Error::Shape("embed-lookup table must be rank 2".into()));
                }
                let (rows, h) = (table.shape[0], table.shape[1]);
                let mut data = Vec::with_capacity(idx.len() * h);
                for &i in idx {
                    if i >= rows {
                        return Err(Error::Shape(format!("embed index {i} out of {rows}")));
                    }
                    data.extend_from_slice(&table.data[i * h..(i + 1) * h]);
                }
                Ok(Arr::matrix(idx.len(), h, data))
            }
            OpKind::LayerNormLastDim => {
                need(3)?;
                let (x, g, b) = (arg(0), arg(1), arg(2));
                let OpAttrs::Eps(eps) = attrs else {
                    return Err(Error::Config("layernorm needs eps".into()));
                };
                let (rows, cols) = x.lastdim_rows();
                if g.shape != vec![cols] || b.shape != vec![cols] {
                    return Err(Error::Shape(format!(
                        "layernorm affine {:?}/{:?} vs width {cols}",
                        g.shape, b.shape
                    )));
                }
                let mut data = vec![0.0; x.numel()];
                for r in 0..rows {
                    let src = &x.data[r * cols..(r + 1) * cols];
                    let (mu, inv_sd) = row_moments(src, *eps);
                    for j in 0..cols {
                        data[r * cols + j] = (src[j] - mu) * inv_sd * g.data[j] + b.data[j];
                    }
                }
                Ok(Arr::new(x.shape.clone(), data))
            }
            OpKind::Concat => {
                if inputs.len() < 2 {
                    return Err(Error::Shape("concat needs >= 2 inputs".into()));
                }
                let OpAttrs::Axis(axis) = attrs else {
                    return Err(Error::Config("concat needs axis".into()));
                };
                let first = arg(0);
                let rank = first.rank();
                if *axis >= rank {
                    return Err(Error::Shape(format!("concat axis {axis} for rank {rank}")));
                }
                if rank == 1 {
                    let mut data = Vec::new();
                    for i in 0..inputs.len() {
                        data.extend_from_slice(&arg(i).data);
                    }
                    Ok(Arr::vector(data))
                } else if rank == 2 && *axis == 0 {
                    let cols = first.shape[1];
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for i in 0..inputs.len() {
                        let a = arg(i);
                        if a.rank() != 2 || a.shape[1] != cols {
                            return Err(Error::Shape("concat axis 0 column mismatch".into()));
                        }
                        rows += a.shape[0];
                        data.extend_from_slice(&a.data);
                    }
                    Ok(Arr::matrix(rows, cols, data))
                } else if rank == 2 && *axis == 1 {
                    let rows = first.shape[0];
                    let mut widths = Vec::with_capacity(inputs.len());
                    for i in 0..inputs.len() {
                        let a = arg(i);
                        if a.rank() != 2 || a.shape[0] != rows {
                            return Err(Error::Shape("concat axis 1 row mismatch".into()));
                        }
                        widths.push(a.shape[1]);
                    }
                    let total: usize = widths.iter().sum();
                    let mut data = vec![0.0; rows * total];
                    let mut off = 0;
                    for (i, &w) in widths.iter().enumerate() {
                        let a = arg(i);
                        for r in 0..rows {
                            data[r * total + off..r * total + off + w]
                                .copy_from_slice(&a.data[r * w..(r + 1) * w]);
                        }
                        off += w;
                    }
                    Ok(Arr::matrix(rows, total, data))
                } else {
                    Err(Error::Shape("concat supports rank 1/2 only".into()))
                }
            }
            OpKind::Slice => {
                need(1)?;
                let a = arg(0);
                let OpAttrs::SliceSpec { axis, start, end } = attrs else {
                    return Err(Error::Config("slice needs spec".into()));
                };
                if *axis >= a.rank() || start >= end || *end > a.shape[*axis] {
                    return Err(Error::Shape(format!(
                        "slice [{start}..{end}) axis {axis} of {:?}",
                        a.shape
                    )));
                }
                if a.rank() == 1 {
                    Ok(Arr::vector(a.data[*start..*end].to_vec()))
                } else if *axis == 0 {
                    let cols = a.shape[1];
                    Ok(Arr::matrix(end - start, cols, a.data[start * cols..end * cols].to_vec()))
                } else {
                    let (rows, cols) = (a.shape[0], a.shape[1]);
                    let w = end - start;
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&a.data[r * cols + start..r * cols + end]);
                    }
                    Ok(Arr::matrix(rows, w, data))
                }
            }
            OpKind::Transpose => {
                need(1)?;
                let a = arg(0);
                if a.rank() != 2 {
                    return Err(Error::Shape("transpose needs rank 2".into()));
                }
                let (m, n) = (a.shape[0], a.shape[1]);
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[j * m + i] = a.data[i * n + j];
                    }
                }
                Ok(Arr::matrix(n, m, data))
            }
            OpKind::MaskedFill => {
                need(1)?;
                let a = arg(0);
                let OpAttrs::MaskFill { mask, value } = attrs else {
                    return Err(Error::Config("masked-fill needs mask".into()));
                };
                if mask.len() != a.numel() {
                    return Err(Error::Shape("mask size mismatch".into()));
                }
                let data = a
                    .data
                    .iter()
                    .zip(mask.iter())
                    .map(|(&x, &m)| if m { *value } else { x })
                    .collect();
                Ok(Arr::new(a.shape.clone(), data))
            }
        }
    }

    // Convenience wrappers around `apply`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Matmul, &[a, b], OpAttrs::None)
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b], OpAttrs::None)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b], OpAttrs::None)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b], OpAttrs::None)
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a], OpAttrs::None)
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Exp, &[a], OpAttrs::None)
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[a], OpAttrs::None)
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Square, &[a], OpAttrs::None)
    }
    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SoftmaxLastDim, &[a], OpAttrs::None)
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a], OpAttrs::None)
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a], OpAttrs::None)
    }
    pub fn embed_lookup(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.apply(OpKind::EmbedLookup, &[table], OpAttrs::Indices(indices))
    }
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LayerNormLastDim, &[x, gamma, beta], OpAttrs::Eps(1e-5))
    }
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(OpKind::Concat, inputs, OpAttrs::Axis(axis))
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply(OpKind::Slice, &[a], OpAttrs::SliceSpec { axis, start, end })
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Transpose, &[a], OpAttrs::None)
    }
    pub fn masked_fill(&mut self, a: NodeId, mask: Vec<bool>, value: f64) -> Result<NodeId> {
        self.apply(OpKind::MaskedFill, &[a], OpAttrs::MaskFill { mask, value })
    }
    /// Elementwise negation via `0 - x`.
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape.clone();
        let z = self.constant(Arr::zeros(shape));
        self.sub(z, a)
    }
    /// Multiply every entry by a scalar constant.
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let shape = self.value(a).shape.clone();
        let c = self.constant(Arr::full(shape, s));
        self.mul(a, c)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// parameter leaf on the tape; leaves not reached by the sweep get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradTable> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(dout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.accumulate(node, &dout, &mut grads);
            grads[id] = Some(dout);
        }

        let mut table = GradTable::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = match &grads[id] {
                    Some(g) => Arr::new(node.value.shape.clone(), g.clone()),
                    None => Arr::zeros(node.value.shape.clone()),
                };
                table.insert(name.clone(), g);
            }
        }
        Ok(table)
    }

    fn accumulate(&self, node: &Node, dout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let pval = |i: usize| -> &Arr { &self.nodes[node.parents[i]].value };
        let mut addto = |parent: usize, contrib: Vec<f64>| {
            let pid = node.parents[parent];
            match &mut grads[pid] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(contrib.iter()) {
                        *a += b;
                    }
                }
                None => grads[pid] = Some(contrib),
            }
        };
        match node.op {
            OpKind::Leaf => {}
            OpKind::Matmul => {
                let (a, b) = (pval(0), pval(1));
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut da = vec![0.0; m * k];
                matmul_abt(dout, &b.data, m, n, k, &mut da);
                let mut db = vec![0.0; k * n];
                matmul_atb(&a.data, dout, m, k, n, &mut db);
                addto(0, da);
                addto(1, db);
            }
            OpKind::Add => {
                let (a, b) = (pval(0), pval(1));
                addto(0, dout.to_vec());
                if a.shape == b.shape {
                    addto(1, dout.to_vec());
                } else {
                    // bias over rows: sum gradient down the rows
                    let n = b.shape[0];
                    let mut db = vec![0.0; n];
                    for row in dout.chunks(n) {
                        for (g, d) in db.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                    addto(1, db);
                }
            }
            OpKind::Sub => {
                addto(0, dout.to_vec());
                addto(1, dout.iter().map(|d| -d).collect());
            }
            OpKind::Mul => {
                let (a, b) = (pval(0), pval(1));
                addto(0, dout.iter().zip(&b.data).map(|(d, y)| d * y).collect());
                addto(1, dout.iter().zip(&a.data).map(|(d, x)| d * x).collect());
            }
            OpKind::Relu => {
                let a = pval(0);
                addto(
                    0,
                    dout.iter()
                        .zip(&a.data)
                        .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                        .collect(),
                );
            }
            OpKind::Exp => {
                let out = &node.value;
                addto(0, dout.iter().zip(&out.data).map(|(d, y)| d * y).collect());
            }
            OpKind::Log => {
                let a = pval(0);
                addto(0, dout.iter().zip(&a.data).map(|(d, x)| d / x).collect());
            }
            OpKind::Square => {
                let a = pval(0);
                addto(0, dout.iter().zip(&a.data).map(|(d, x)| 2.0 * d * x).collect());
            }
            OpKind::SoftmaxLastDim => {
                let out = &node.value;
                let (rows, cols) = out.lastdim_rows();
                let mut da = vec![0.0; out.numel()];
                for r in 0..rows {
                    let y = &out.data[r * cols..(r + 1) * cols];
                    let d = &dout[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(d).map(|(yi, di)| yi * di).sum();
                    for j in 0..cols {
                        da[r * cols + j] = (d[j] - dot) * y[j];
                    }
                }
                addto(0, da);
            }
            OpKind::Sum => {
                let a = pval(0);
                addto(0, vec![dout[0]; a.numel()]);
            }
            OpKind::Mean => {
                let a = pval(0);
                let s = dout[0] / a.numel() as f64;
                addto(0, vec![s; a.numel()]);
            }
            OpKind::EmbedLookup => {
                let table = pval(0);
                let OpAttrs::Indices(idx) = &node.attrs else { unreachable!() };
                let h = table.shape[1];
                let mut dt = vec![0.0; table.numel()];
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..h {
                        dt[i * h + j] += dout[row * h + j];
                    }
                }
                addto(0, dt);
            }
            OpKind::LayerNormLastDim => {
                let (x, g) = (pval(0), pval(1));
                let OpAttrs::Eps(eps) = node.attrs else { unreachable!() };
                let (rows, cols) = x.lastdim_rows();
                let mut dx = vec![0.0; x.numel()];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    let src = &x.data[r * cols..(r + 1) * cols];
                    let d = &dout[r * cols..(r + 1) * cols];
                    let (mu, inv_sd) = row_moments(src, eps);
                    // normalized activations and the two row means the rule needs
                    let mut dy = vec![0.0; cols];
                    let mut mean_dy = 0.0;
                    let mut mean_dyy = 0.0;
                    for j in 0..cols {
                        let y = (src[j] - mu) * inv_sd;
                        dg[j] += d[j] * y;
                        db[j] += d[j];
                        dy[j] = d[j] * g.data[j];
                        mean_dy += dy[j];
                        mean_dyy += dy[j] * y;
                    }
                    mean_dy /= cols as f64;
                    mean_dyy /= cols as f64;
                    for j in 0..cols {
                        let y = (src[j] - mu) * inv_sd;
                        dx[r * cols + j] = (dy[j] - mean_dy - y * mean_dyy) * inv_sd;
                    }
                }
                addto(0, dx);
                addto(1, dg);
                addto(2, db);
            }
            OpKind::Concat => {
                let OpAttrs::Axis(axis) = node.attrs else { unreachable!() };
                let rank = pval(0).rank();
                if rank == 1 || axis == 0 {
                    let mut off = 0;
                    for i in 0..node.parents.len() {
                        let n = pval(i).numel();
                        addto(i, dout[off..off + n].to_vec());
                        off += n;
                    }
                } else {
                    let rows = pval(0).shape[0];
                    let total: usize = (0..node.parents.len()).map(|i| pval(i).shape[1]).sum();
                    let mut off = 0;
                    for i in 0..node.parents.len() {
                        let w = pval(i).shape[1];
                        let mut d = vec![0.0; rows * w];
                        for r in 0..rows {
                            d[r * w..(r + 1) * w]
                                .copy_from_slice(&dout[r * total + off..r * total + off + w]);
                        }
                        addto(i, d);
                        off += w;
                    }
                }
            }
            OpKind::Slice => {
                let a = pval(0);
                let OpAttrs::SliceSpec { axis, start, end } = node.attrs else { unreachable!() };
                let mut da = vec![0.0; a.numel()];
                if a.rank() == 1 {
                    da[start..end].copy_from_slice(dout);
                } else if axis == 0 {
                    let cols = a.shape[1];
                    da[start * cols..end * cols].copy_from_slice(dout);
                } else {
                    let cols = a.shape[1];
                    let w = end - start;
                    for r in 0..a.shape[0] {
                        da[r * cols + start..r * cols + end]
                            .copy_from_slice(&dout[r * w..(r + 1) * w]);
                    }
                }
                addto(0, da);
            }
            OpKind::Transpose => {
                let out = &node.value;
                let (n, m) = (out.shape[0], out.shape[1]);
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = dout[i * m + j];
                    }
                }
                addto(0, da);
            }
            OpKind::MaskedFill => {
                let OpAttrs::MaskFill { mask, .. } = &node.attrs else { unreachable!() };
                addto(
                    0,
                    dout.iter()
                        .zip(mask.iter())
                        .map(|(d, &m)| if m { 0.0 } else { *d })
                        .collect(),
                );
            }
        }
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn row_moments(src: &[f64], eps: f64) -> (f64, f64) {
    let n = src.len() as f64;
    let mu = src.iter().sum::<f64>() / n;
    let var = src.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

/// C += A @ B with A: m x k, B: k x n (C pre-zeroed by caller).
pub fn matmul_ab(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// C += A @ B^T with A: m x n, B: k x n -> C: m x k.
fn matmul_abt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * k + p] += s;
        }
    }
}

/// C += A^T @ B with A: m x k, B: m x n -> C: k x n.
fn matmul_atb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Named parameter with AdamW moment buffers.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Arr,
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
}

impl Param {
    fn new(value: Arr) -> Self {
        let n = value.numel();
        Param { value, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Named, shaped parameter map. Names are unique and shapes immutable
/// after creation; iteration order is the name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Arr> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn set_value(&mut self, name: &str, value: Arr) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if p.value.shape != value.shape {
            return Err(Error::Shape(format!(
                "parameter {name} shape {:?} is immutable, got {:?}",
                p.value.shape, value.shape
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}

/// AdamW hyper-parameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained non-finite entries; no parameter was touched.
    SkippedNonFinite,
}

/// One AdamW update over every parameter present in `grads`.
pub fn adamw_step(store: &mut ParamStore, grads: &GradTable, h: &AdamW) -> StepOutcome {
    if !grads.is_finite() {
        return StepOutcome::SkippedNonFinite;
    }
    for (name, g) in grads.iter() {
        let Some(p) = store.params.get_mut(name) else { continue };
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for i in 0..p.value.data.len() {
            let gi = g.data[i];
            p.m[i] = h.beta1 * p.m[i] + (1.0 - h.beta1) * gi;
            p.v[i] = h.beta2 * p.v[i] + (1.0 - h.beta2) * gi * gi;
            let mhat = p.m[i] / bc1;
            let vhat = p.v[i] / bc2;
            let w = p.value.data[i];
            p.value.data[i] = w - h.lr * h.weight_decay * w - h.lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
    StepOutcome::Applied
}

/// Max relative error between reverse-mode and central-difference gradients
/// of a scalar function over every parameter component. Uses the 4th-order
/// central stencil `(f(-2e) - 8f(-e) + 8f(e) - f(2e)) / 12e` so truncation
/// error stays far below the comparison tolerance.
pub fn finite_diff_check<F>(f: F, store: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Domain("eps must be positive".into()));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let loss_val = tape.value(loss).data[0];
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss_val}")));
    }
    let auto = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok(t.value(l).data[0])
    };

    let mut max_err: f64 = 0.0;
    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let n = store.value(name).unwrap().numel();
        for i in 0..n {
            let probe = |offset: f64| -> Result<f64> {
                let mut moved = store.clone();
                moved.params.get_mut(name).unwrap().value.data[i] += offset;
                eval(&moved)
            };
            // pairwise differences first: a parameter the loss ignores
            // yields an exact zero instead of stencil roundoff
            let d1 = probe(eps)? - probe(-eps)?;
            let d2 = probe(2.0 * eps)? - probe(-2.0 * eps)?;
            let fd = (8.0 * d1 - d2) / (12.0 * eps);
            let ad = auto.get(name).map(|g| g.data[i]).unwrap_or(0.0);
            let err = (ad - fd).abs() / (fd.abs() + 1e-8);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    extra: serde_json::Value,
    params: Vec<ManifestEntry>,
}

const CKPT_FORMAT: &str = "dnfs-ckpt-v1";

/// Write `manifest.json` plus a little-endian f64 blob `params.bin` into `dir`.
/// Round-trips are bit-exact.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, extra: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::with_capacity(store.num_values() * 8);
    for (name, p) in store.iter() {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: p.value.shape.clone(),
            offset: blob.len() as u64,
            length: p.value.numel() as u64,
        });
        for v in &p.value.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { format: CKPT_FORMAT.to_string(), extra: extra.clone(), params: entries };
    let mut mf = std::fs::File::create(dir.join("manifest.json"))?;
    mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    let mut bf = std::fs::File::create(dir.join("params.bin"))?;
    bf.write_all(&blob)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]. Optimizer state is not
/// persisted; moments restart at zero.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != CKPT_FORMAT {
        return Err(Error::Config(format!("unknown checkpoint format {}", manifest.format)));
    }
    let mut blob = Vec::new();
    std::fs::File::open(dir.join("params.bin"))?.read_to_end(&mut blob)?;
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let start = e.offset as usize;
        let end = start + e.length as usize * 8;
        if end > blob.len() {
            return Err(Error::Config(format!("blob too short for {}", e.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&e.name, Arr::new(e.shape.clone(), data))?;
    }
    Ok((store, manifest.extra))
}
