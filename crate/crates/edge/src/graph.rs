//! Reverse-mode autodiff over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly: creating a node computes its
//! value immediately and remembers which earlier nodes (and which op) produced
//! it. [`Tape::backward`] then walks the record in reverse and accumulates
//! gradients for every parameter that participated in the forward pass.
//!
//! Parameters live outside the tape in a [`ParamSet`] registry so that the
//! same weights can be reused across tapes (one tape per training batch or
//! per decoded example). Inserting a parameter twice on one tape yields the
//! same node, which is how weight sharing between encoder passes works.

use ndarray::{s, Array2, Axis};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Index of a tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named registry of learnable tensors.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    trainable: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Look a parameter up by its registered name.
    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients, aligned with the [`ParamSet`] that produced them.
#[derive(Debug)]
pub struct Gradients {
    by_param: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            by_param: params
                .ids()
                .map(|id| Array2::zeros(params.value(id).dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.by_param[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.by_param[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.by_param.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.by_param.iter_mut()
    }

    /// Accumulate another gradient set into this one.
    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (a, b) in self.by_param.iter_mut().zip(other.by_param.iter()) {
            *a += b;
        }
    }

    /// Euclidean norm over every entry of every tensor.
    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.by_param {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

enum Op {
    Input,
    Param(ParamId),
    /// Gather rows of a parameter matrix by index (embedding lookup).
    EmbedRows {
        param: ParamId,
        ids: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `a (m×n) + b (1×n)` broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    /// `a (m×n) + b (1×1)` broadcast over every entry.
    AddScalarBroadcast(NodeId, NodeId),
    /// Row `i` of `a (m×n)` scaled by `b[i]` where `b` is `m×1`.
    MulColBroadcast(NodeId, NodeId),
    /// Elementwise product with a constant matrix (dropout masks).
    MulMask(NodeId, Array2<f64>),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// Row-wise softmax. The adjoint only needs the output values: masked
    /// columns carry weight zero, which zeroes their gradient too.
    SoftmaxRows(NodeId),
    /// Row-wise log-sum-exp, `m×n -> m×1`.
    LogSumExpRows(NodeId),
    /// Single entry `a[r, c]` as a `1×1` node.
    PickEntry(NodeId, usize, usize),
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    RowSlice(NodeId, usize),
    ColSlice(NodeId, usize, usize),
    Transpose(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
}

/// Append-only record of one forward computation.
pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
    grads: Vec<Array2<f64>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn value(&self, n: NodeId) -> &Array2<f64> {
        &self.values[n.0]
    }

    /// Gradient computed by the most recent [`Tape::backward`] call.
    pub fn grad(&self, n: NodeId) -> &Array2<f64> {
        &self.grads[n.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Insert a parameter, reusing the existing node if already on this tape.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        if self.param_nodes.len() < params.len() {
            self.param_nodes.resize(params.len(), None);
        }
        if let Some(node) = self.param_nodes[id.0] {
            return node;
        }
        let node = self.push(params.value(id).clone(), Op::Param(id));
        self.param_nodes[id.0] = Some(node);
        node
    }

    pub fn embed_rows(&mut self, params: &ParamSet, id: ParamId, ids: &[usize]) -> NodeId {
        let table = params.value(id);
        let mut out = Array2::zeros((ids.len(), table.ncols()));
        for (r, &tok) in ids.iter().enumerate() {
            assert!(tok < table.nrows(), "embedding id {tok} out of range");
            out.row_mut(r).assign(&table.row(tok));
        }
        self.push(
            out,
            Op::EmbedRows {
                param: id,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.ncols(), vb.nrows(), "matmul shape mismatch");
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].dim(), self.values[b.0].dim());
        let out = &self.values[a.0] + &self.values[b.0];
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].dim(), self.values[b.0].dim());
        let out = &self.values[a.0] - &self.values[b.0];
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].dim(), self.values[b.0].dim());
        let out = &self.values[a.0] * &self.values[b.0];
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.values[a.0].mapv(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (&self.values[a.0], &self.values[bias.0]);
        assert_eq!(vb.nrows(), 1);
        assert_eq!(va.ncols(), vb.ncols());
        let out = va + &vb.row(0);
        self.push(out, Op::AddRowBroadcast(a, bias))
    }

    pub fn add_scalar_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        assert_eq!(self.values[bias.0].dim(), (1, 1));
        let b = self.values[bias.0][(0, 0)];
        let out = self.values[a.0].mapv(|x| x + b);
        self.push(out, Op::AddScalarBroadcast(a, bias))
    }

    pub fn mul_col_broadcast(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (va, vc) = (&self.values[a.0], &self.values[col.0]);
        assert_eq!(vc.ncols(), 1);
        assert_eq!(va.nrows(), vc.nrows());
        let mut out = va.clone();
        for (mut row, &factor) in out.rows_mut().into_iter().zip(vc.column(0).iter()) {
            row.mapv_inplace(|x| x * factor);
        }
        self.push(out, Op::MulColBroadcast(a, col))
    }

    pub fn mul_mask(&mut self, a: NodeId, mask: Array2<f64>) -> NodeId {
        assert_eq!(self.values[a.0].dim(), mask.dim());
        let out = &self.values[a.0] * &mask;
        self.push(out, Op::MulMask(a, mask))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.values[a.0].mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax. With a mask, `false` columns receive weight exactly
    /// zero; at least one column must be `true`.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&[bool]>) -> NodeId {
        let va = &self.values[a.0];
        if let Some(m) = mask {
            assert_eq!(m.len(), va.ncols(), "softmax mask width mismatch");
            assert!(m.iter().any(|&b| b), "softmax over fully masked row");
        }
        let out = masked_softmax(va, mask);
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.values[a.0];
        let mut out = Array2::zeros((va.nrows(), 1));
        for (i, row) in va.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            out[(i, 0)] = max + sum.ln();
        }
        self.push(out, Op::LogSumExpRows(a))
    }

    pub fn pick_entry(&mut self, a: NodeId, r: usize, c: usize) -> NodeId {
        let v = self.values[a.0][(r, c)];
        self.push(Array2::from_elem((1, 1), v), Op::PickEntry(a, r, c))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.nrows(), vb.nrows());
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("concat");
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat rows");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let out = self.values[a.0].row(i).insert_axis(Axis(0)).to_owned();
        self.push(out, Op::RowSlice(a, i))
    }

    pub fn col_slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.values[a.0].slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::ColSlice(a, start, len))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.values[a.0].t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.values[a.0];
        let out = va
            .mean_axis(Axis(0))
            .expect("mean over zero rows")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.values[a.0].sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    /// Accumulate `d(out)/d(param)` for every parameter reachable from `out`.
    ///
    /// `out` must be a `1×1` node. Node-level gradients stay readable via
    /// [`Tape::grad`] until the next call.
    pub fn backward(&mut self, out: NodeId, params: &ParamSet) -> Gradients {
        assert_eq!(self.values[out.0].dim(), (1, 1), "backward needs a scalar");
        self.grads = self.values.iter().map(|v| Array2::zeros(v.dim())).collect();
        self.grads[out.0][(0, 0)] = 1.0;
        let mut param_grads = Gradients::zeros_like(params);

        for i in (0..=out.0).rev() {
            let g = self.grads[i].clone();
            match &self.ops[i] {
                Op::Input => {}
                Op::Param(id) => {
                    *param_grads.get_mut(*id) += &g;
                }
                Op::EmbedRows { param, ids } => {
                    let table = param_grads.get_mut(*param);
                    for (r, &tok) in ids.iter().enumerate() {
                        let mut dst = table.row_mut(tok);
                        dst += &g.row(r);
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.values[b.0].t());
                    let db = self.values[a.0].t().dot(&g);
                    self.grads[a.0] += &da;
                    self.grads[b.0] += &db;
                }
                Op::Add(a, b) => {
                    self.grads[a.0] += &g;
                    self.grads[b.0] += &g;
                }
                Op::Sub(a, b) => {
                    self.grads[a.0] += &g;
                    self.grads[b.0] -= &g;
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g * &self.values[b.0];
                    let db = &g * &self.values[a.0];
                    self.grads[a.0] += &da;
                    self.grads[b.0] += &db;
                }
                Op::Scale(a, k) => {
                    let da = g.mapv(|x| x * k);
                    self.grads[a.0] += &da;
                }
                Op::AddRowBroadcast(a, bias) => {
                    self.grads[a.0] += &g;
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.grads[bias.0] += &db;
                }
                Op::AddScalarBroadcast(a, bias) => {
                    self.grads[a.0] += &g;
                    self.grads[bias.0][(0, 0)] += g.sum();
                }
                Op::MulColBroadcast(a, col) => {
                    let (a, col) = (*a, *col);
                    let mut da = g.clone();
                    for (mut row, &factor) in da
                        .rows_mut()
                        .into_iter()
                        .zip(self.values[col.0].column(0).iter())
                    {
                        row.mapv_inplace(|x| x * factor);
                    }
                    let dcol: Vec<f64> = g
                        .rows()
                        .into_iter()
                        .zip(self.values[a.0].rows())
                        .map(|(gr, ar)| gr.iter().zip(ar.iter()).map(|(x, y)| x * y).sum())
                        .collect();
                    self.grads[a.0] += &da;
                    self.grads[col.0] +=
                        &Array2::from_shape_vec((dcol.len(), 1), dcol).expect("dcol shape");
                }
                Op::MulMask(a, mask) => {
                    let da = &g * mask;
                    self.grads[a.0] += &da;
                }
                Op::Tanh(a) => {
                    let da = &g * &self.values[i].mapv(|y| 1.0 - y * y);
                    self.grads[a.0] += &da;
                }
                Op::Sigmoid(a) => {
                    let da = &g * &self.values[i].mapv(|y| y * (1.0 - y));
                    self.grads[a.0] += &da;
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.values[i];
                    let mut da = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r).iter()).map(|(x, w)| x * w).sum();
                        for c in 0..y.ncols() {
                            da[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    self.grads[a.0] += &da;
                }
                Op::LogSumExpRows(a) => {
                    let va = &self.values[a.0];
                    let lse = &self.values[i];
                    let mut da = Array2::zeros(va.dim());
                    for r in 0..va.nrows() {
                        let gr = g[(r, 0)];
                        for c in 0..va.ncols() {
                            da[(r, c)] = gr * (va[(r, c)] - lse[(r, 0)]).exp();
                        }
                    }
                    self.grads[a.0] += &da;
                }
                Op::PickEntry(a, r, c) => {
                    self.grads[a.0][(*r, *c)] += g[(0, 0)];
                }
                Op::ConcatCols(a, b) => {
                    let na = self.values[a.0].ncols();
                    let (a, b) = (*a, *b);
                    let da = g.slice(s![.., ..na]).to_owned();
                    let db = g.slice(s![.., na..]).to_owned();
                    self.grads[a.0] += &da;
                    self.grads[b.0] += &db;
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.values[p.0].nrows();
                        let dp = g.slice(s![offset..offset + rows, ..]).to_owned();
                        self.grads[p.0] += &dp;
                        offset += rows;
                    }
                }
                Op::RowSlice(a, r) => {
                    let mut dst = self.grads[a.0].row_mut(*r);
                    dst += &g.row(0);
                }
                Op::ColSlice(a, start, len) => {
                    let mut dst = self.grads[a.0].slice_mut(s![.., *start..*start + *len]);
                    dst += &g;
                }
                Op::Transpose(a) => {
                    let da = g.t().to_owned();
                    self.grads[a.0] += &da;
                }
                Op::MeanRows(a) => {
                    let m = self.values[a.0].nrows() as f64;
                    let da = g.row(0).mapv(|x| x / m);
                    for mut row in self.grads[a.0].rows_mut() {
                        row += &da;
                    }
                }
                Op::SumAll(a) => {
                    let gv = g[(0, 0)];
                    self.grads[a.0].mapv_inplace(|x| x + gv);
                }
            }
        }
        param_grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Row-wise softmax with optional column mask, computed with the max trick.
pub fn masked_softmax(logits: &Array2<f64>, mask: Option<&[bool]>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| mask.is_none_or(|m| m[*j]))
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &x) in row.iter().enumerate() {
            if mask.is_none_or(|m| m[j]) {
                let e = (x - max).exp();
                out[(i, j)] = e;
                sum += e;
            }
        }
        for j in 0..row.len() {
            out[(i, j)] /= sum;
        }
    }
    out
}
