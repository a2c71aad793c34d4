//! Recorded computation graph with reverse-mode gradient propagation.
//!
//! Forward values are computed eagerly as ops are recorded; `backward`
//! replays the op list in reverse and accumulates vector-Jacobian products.
//! The op set is deliberately closed: exactly what the encoder, prototype
//! head, scoring CNN and discriminator need, plus the glue (concat, stack,
//! broadcast) that wires them together.

use std::collections::HashMap;

use crate::diffcore::tensor::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op<F: Scalar> {
    Leaf,
    /// Row gather: `out[i, :] = table[ids[i], :]`.
    EmbedLookup { table: NodeId, ids: Vec<u32> },
    /// Column-wise concat of equal-row-count matrices.
    ConcatCols { inputs: Vec<NodeId> },
    /// Same-padded 1-D convolution over the row (time) axis.
    /// input `[T, c_in]`, weight `[c_out, window*c_in]`, bias `[c_out]`.
    Conv1dSame { input: NodeId, weight: NodeId, bias: NodeId, window: usize },
    /// Column-wise max over the row (time) axis: `[T, c] -> [c]`.
    MaxOverTime { input: NodeId },
    Relu { input: NodeId },
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul { a: NodeId, b: NodeId },
    /// `[r, c] x [c] -> [r]`.
    MatVec { matrix: NodeId, vector: NodeId },
    /// `out[i, j] = m[i, j] + row[j]`.
    AddRowBroadcast { matrix: NodeId, row: NodeId },
    /// `out[i, j] = m[i, j] - row[j]`.
    SubRowBroadcast { matrix: NodeId, row: NodeId },
    /// Elementwise difference of same-shape tensors.
    Sub { a: NodeId, b: NodeId },
    Square { input: NodeId },
    /// Inner product of same-length flat tensors; scalar output.
    Dot { a: NodeId, b: NodeId },
    /// Stack B vectors of width d into `[B, d]`.
    StackRows { inputs: Vec<NodeId> },
    /// Stack N vectors of length B into `[B, N]` (one per column).
    StackCols { inputs: Vec<NodeId> },
    /// Column means: `[r, c] -> [c]`.
    MeanRows { input: NodeId },
    Scale { input: NodeId, factor: F },
    Reshape { input: NodeId },
    /// 2-D convolution whose kernels span only the height axis (width 1),
    /// so each column is convolved independently. input `[c_in, h, w]`,
    /// weight `[c_out, c_in, kh]`, bias `[c_out]`, zero padding `pad_h`.
    Conv2dColwise { input: NodeId, weight: NodeId, bias: NodeId, pad_h: usize },
    /// Mean softmax cross-entropy of `[B, N]` logits against class indices.
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
    SumAll { input: NodeId },
    MeanAll { input: NodeId },
}

#[derive(Clone, Debug)]
struct Node<F: Scalar> {
    op: Op<F>,
    shape: Vec<usize>,
    value: Vec<F>,
}

/// One recorded graph. Create per forward pass, call [`Tape::backward`] once.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    /// Parameter-name bindings in registration order.
    bindings: Vec<(String, NodeId)>,
    by_name: HashMap<String, NodeId>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bindings: Vec::new(), by_name: HashMap::new() }
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, value: Vec<F>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, value });
        id
    }

    fn node(&self, id: NodeId) -> &Node<F> {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<F> {
        let n = self.node(id);
        if n.value.len() != 1 {
            return Err(Error::Graph(format!(
                "expected scalar node, found shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Unnamed leaf: a constant w.r.t. every parameter.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<F>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "constant values length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(self.push(Op::Leaf, shape, values))
    }

    pub fn constant_tensor(&mut self, t: &Tensor<F>) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec())
    }

    /// Leaf bound to a store parameter; gradients reach it in `backward`.
    /// Registering the same name twice returns the same node.
    pub fn param(&mut self, store: &ParameterStore<F>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.by_name.get(name) {
            return Ok(id);
        }
        let tensor = store
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter `{name}`")))?;
        let id = self.push(Op::Leaf, tensor.shape().to_vec(), tensor.values().to_vec());
        self.bindings.push((name.to_string(), id));
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Leaf carrying a parameter's current values WITHOUT binding it, so the
    /// parameter is held constant for this graph (stop-gradient).
    pub fn frozen_param(&mut self, store: &ParameterStore<F>, name: &str) -> Result<NodeId> {
        let tensor = store
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter `{name}`")))?;
        Ok(self.push(Op::Leaf, tensor.shape().to_vec(), tensor.values().to_vec()))
    }

    // ── Ops ──────────────────────────────────────────────────────────

    fn expect_matrix(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = &self.node(id).shape;
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what} must be 2-D, found {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn expect_vector(&self, id: NodeId, what: &str) -> Result<usize> {
        let s = &self.node(id).shape;
        if s.len() != 1 {
            return Err(Error::Shape(format!("{what} must be 1-D, found {s:?}")));
        }
        Ok(s[0])
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (rows, d) = self.expect_matrix(table, "embedding table")?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding lookup needs at least one id".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let r = id as usize;
            if r >= rows {
                return Err(Error::Shape(format!(
                    "embedding id {r} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(&self.node(table).value[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            Op::EmbedLookup { table, ids: ids.to_vec() },
            vec![ids.len(), d],
            out,
        ))
    }

    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Shape("concat of zero inputs".into()));
        }
        let (rows, _) = self.expect_matrix(inputs[0], "concat input")?;
        let mut widths = Vec::with_capacity(inputs.len());
        for &input in inputs {
            let (r, c) = self.expect_matrix(input, "concat input")?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "concat row mismatch: {rows} vs {r}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&input, &w) in inputs.iter().zip(widths.iter()) {
                out.extend_from_slice(&self.node(input).value[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols { inputs: inputs.to_vec() }, vec![rows, total], out))
    }

    pub fn conv1d_same(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        window: usize,
    ) -> Result<NodeId> {
        let (t, c_in) = self.expect_matrix(input, "conv1d input")?;
        let (c_out, wk) = self.expect_matrix(weight, "conv1d weight")?;
        let b = self.expect_vector(bias, "conv1d bias")?;
        if window == 0 || window % 2 == 0 {
            return Err(Error::Shape(format!("conv1d window must be odd, got {window}")));
        }
        if wk != window * c_in {
            return Err(Error::Shape(format!(
                "conv1d weight width {wk} != window*c_in = {}",
                window * c_in
            )));
        }
        if b != c_out {
            return Err(Error::Shape(format!("conv1d bias length {b} != c_out {c_out}")));
        }
        let half = window / 2;
        let x = &self.node(input).value;
        let w = &self.node(weight).value;
        let bv = &self.node(bias).value;
        let mut out = vec![F::zero(); t * c_out];
        for ti in 0..t {
            for o in 0..c_out {
                let mut acc = bv[o];
                for j in 0..window {
                    let src = ti as isize + j as isize - half as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    let wrow = &w[o * wk + j * c_in..o * wk + (j + 1) * c_in];
                    let xrow = &x[src * c_in..(src + 1) * c_in];
                    for c in 0..c_in {
                        acc += wrow[c] * xrow[c];
                    }
                }
                out[ti * c_out + o] = acc;
            }
        }
        Ok(self.push(
            Op::Conv1dSame { input, weight, bias, window },
            vec![t, c_out],
            out,
        ))
    }

    pub fn max_over_time(&mut self, input: NodeId) -> Result<NodeId> {
        let (t, c) = self.expect_matrix(input, "max-over-time input")?;
        if t == 0 {
            return Err(Error::Shape("max-over-time over zero rows".into()));
        }
        let x = &self.node(input).value;
        let mut out = Vec::with_capacity(c);
        for j in 0..c {
            let mut best = x[j];
            for i in 1..t {
                let v = x[i * c + j];
                if v > best {
                    best = v;
                }
            }
            out.push(best);
        }
        Ok(self.push(Op::MaxOverTime { input }, vec![c], out))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let shape = self.node(input).shape.clone();
        let out: Vec<F> =
            self.node(input).value.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        self.push(Op::Relu { input }, shape, out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.expect_matrix(a, "matmul lhs")?;
        let (k2, n) = self.expect_matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {k} vs {k2}"
            )));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], out))
    }

    pub fn matvec(&mut self, matrix: NodeId, vector: NodeId) -> Result<NodeId> {
        let (r, c) = self.expect_matrix(matrix, "matvec matrix")?;
        let lv = self.expect_vector(vector, "matvec vector")?;
        if lv != c {
            return Err(Error::Shape(format!(
                "matvec width mismatch: matrix cols {c}, vector length {lv}"
            )));
        }
        let m = &self.node(matrix).value;
        let v = &self.node(vector).value;
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let mut acc = F::zero();
            for j in 0..c {
                acc += m[i * c + j] * v[j];
            }
            out.push(acc);
        }
        Ok(self.push(Op::MatVec { matrix, vector }, vec![r], out))
    }

    pub fn add_row_broadcast(&mut self, matrix: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.expect_matrix(matrix, "broadcast matrix")?;
        let lv = self.expect_vector(row, "broadcast row")?;
        if lv != c {
            return Err(Error::Shape(format!(
                "broadcast width mismatch: matrix cols {c}, row length {lv}"
            )));
        }
        let m = &self.node(matrix).value;
        let v = &self.node(row).value;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(m[i * c + j] + v[j]);
            }
        }
        Ok(self.push(Op::AddRowBroadcast { matrix, row }, vec![r, c], out))
    }

    pub fn sub_row_broadcast(&mut self, matrix: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.expect_matrix(matrix, "broadcast matrix")?;
        let lv = self.expect_vector(row, "broadcast row")?;
        if lv != c {
            return Err(Error::Shape(format!(
                "broadcast width mismatch: matrix cols {c}, row length {lv}"
            )));
        }
        let m = &self.node(matrix).value;
        let v = &self.node(row).value;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(m[i * c + j] - v[j]);
            }
        }
        Ok(self.push(Op::SubRowBroadcast { matrix, row }, vec![r, c], out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape(format!(
                "elementwise sub shape mismatch: {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        let shape = self.node(a).shape.clone();
        let out: Vec<F> = self
            .node(a)
            .value
            .iter()
            .zip(self.node(b).value.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(Op::Sub { a, b }, shape, out))
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        let shape = self.node(input).shape.clone();
        let out: Vec<F> = self.node(input).value.iter().map(|&v| v * v).collect();
        self.push(Op::Square { input }, shape, out)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).value.len() != self.node(b).value.len() {
            return Err(Error::Shape(format!(
                "dot length mismatch: {} vs {}",
                self.node(a).value.len(),
                self.node(b).value.len()
            )));
        }
        let mut acc = F::zero();
        for (&x, &y) in self.node(a).value.iter().zip(self.node(b).value.iter()) {
            acc += x * y;
        }
        Ok(self.push(Op::Dot { a, b }, vec![1], vec![acc]))
    }

    pub fn stack_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Shape("stack of zero rows".into()));
        }
        let d = self.expect_vector(inputs[0], "stacked row")?;
        let mut out = Vec::with_capacity(inputs.len() * d);
        for &input in inputs {
            let w = self.expect_vector(input, "stacked row")?;
            if w != d {
                return Err(Error::Shape(format!("stacked row widths differ: {d} vs {w}")));
            }
            out.extend_from_slice(&self.node(input).value);
        }
        Ok(self.push(Op::StackRows { inputs: inputs.to_vec() }, vec![inputs.len(), d], out))
    }

    pub fn stack_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Shape("stack of zero columns".into()));
        }
        let b = self.expect_vector(inputs[0], "stacked column")?;
        for &input in inputs {
            let l = self.expect_vector(input, "stacked column")?;
            if l != b {
                return Err(Error::Shape(format!(
                    "stacked column lengths differ: {b} vs {l}"
                )));
            }
        }
        let n = inputs.len();
        let mut out = vec![F::zero(); b * n];
        for (j, &input) in inputs.iter().enumerate() {
            for i in 0..b {
                out[i * n + j] = self.node(input).value[i];
            }
        }
        Ok(self.push(Op::StackCols { inputs: inputs.to_vec() }, vec![b, n], out))
    }

    pub fn mean_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let (r, c) = self.expect_matrix(input, "mean-rows input")?;
        if r == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let x = &self.node(input).value;
        let inv = F::one() / F::from_usize(r).expect("row count fits scalar");
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += x[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        Ok(self.push(Op::MeanRows { input }, vec![c], out))
    }

    pub fn scale(&mut self, input: NodeId, factor: F) -> NodeId {
        let shape = self.node(input).shape.clone();
        let out: Vec<F> = self.node(input).value.iter().map(|&v| v * factor).collect();
        self.push(Op::Scale { input, factor }, shape, out)
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(input).value.len() {
            return Err(Error::Shape(format!(
                "reshape to {:?} (numel {numel}) from {} values",
                shape,
                self.node(input).value.len()
            )));
        }
        let out = self.node(input).value.clone();
        Ok(self.push(Op::Reshape { input }, shape, out))
    }

    pub fn conv2d_colwise(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad_h: usize,
    ) -> Result<NodeId> {
        let ishape = self.node(input).shape.clone();
        let wshape = self.node(weight).shape.clone();
        if ishape.len() != 3 {
            return Err(Error::Shape(format!("conv2d input must be 3-D, found {ishape:?}")));
        }
        if wshape.len() != 3 {
            return Err(Error::Shape(format!("conv2d weight must be 3-D, found {wshape:?}")));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, wc_in, kh) = (wshape[0], wshape[1], wshape[2]);
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {c_in}, weight {wc_in}"
            )));
        }
        let b = self.expect_vector(bias, "conv2d bias")?;
        if b != c_out {
            return Err(Error::Shape(format!("conv2d bias length {b} != c_out {c_out}")));
        }
        let h_padded = h + 2 * pad_h;
        if h_padded < kh {
            return Err(Error::Shape(format!(
                "conv2d kernel height {kh} exceeds padded height {h_padded}"
            )));
        }
        let h_out = h_padded - kh + 1;
        let x = &self.node(input).value;
        let wv = &self.node(weight).value;
        let bv = &self.node(bias).value;
        let mut out = vec![F::zero(); c_out * h_out * w];
        for o in 0..c_out {
            for y in 0..h_out {
                for xx in 0..w {
                    let mut acc = bv[o];
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            let src = y as isize + ky as isize - pad_h as isize;
                            if src < 0 || src >= h as isize {
                                continue;
                            }
                            acc += wv[o * c_in * kh + ci * kh + ky]
                                * x[ci * h * w + src as usize * w + xx];
                        }
                    }
                    out[o * h_out * w + y * w + xx] = acc;
                }
            }
        }
        Ok(self.push(
            Op::Conv2dColwise { input, weight, bias, pad_h },
            vec![c_out, h_out, w],
            out,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (b, n) = self.expect_matrix(logits, "cross-entropy logits")?;
        if b == 0 {
            return Err(Error::Shape("cross-entropy over empty batch".into()));
        }
        if targets.len() != b {
            return Err(Error::Shape(format!(
                "cross-entropy targets length {} != batch {b}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Shape(format!("target class {t} out of range for {n} classes")));
        }
        let x = &self.node(logits).value;
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * n..(i + 1) * n];
            let m = row.iter().cloned().fold(row[0], F::max);
            let mut lse = F::zero();
            for &v in row {
                lse += (v - m).exp();
            }
            let lse = m + lse.ln();
            total += lse - row[t];
        }
        let mean = total / F::from_usize(b).expect("batch fits scalar");
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec() },
            vec![1],
            vec![mean],
        ))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let mut acc = F::zero();
        for &v in &self.node(input).value {
            acc += v;
        }
        self.push(Op::SumAll { input }, vec![1], vec![acc])
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let len = self.node(input).value.len();
        let mut acc = F::zero();
        for &v in &self.node(input).value {
            acc += v;
        }
        let mean = acc / F::from_usize(len).expect("numel fits scalar");
        self.push(Op::MeanAll { input }, vec![1], vec![mean])
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. On success every parameter in
    /// `store` carries a freshly populated gradient: the accumulated
    /// d(loss)/d(param) where the parameter was registered and reached, zeros
    /// otherwise.
    pub fn backward(&self, loss: NodeId, store: &mut ParameterStore<F>) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(Error::Graph(format!("loss node {loss} not on tape")));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, found shape {:?}",
                self.nodes[loss].shape
            )));
        }
        let grads = self.gradients(loss);
        for (name, _, tensor) in store.iter_mut() {
            let g = self
                .by_name
                .get(name)
                .and_then(|&id| grads[id].clone())
                .unwrap_or_else(|| vec![F::zero(); tensor.numel()]);
            if g.len() != tensor.numel() {
                return Err(Error::Shape(format!(
                    "gradient size {} does not match parameter `{name}` size {}",
                    g.len(),
                    tensor.numel()
                )));
            }
            tensor.set_grad(g)?;
        }
        Ok(())
    }

    /// Raw per-node gradient accumulators for a scalar loss.
    fn gradients(&self, loss: NodeId) -> Vec<Option<Vec<F>>> {
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![F::one()]);
        for id in (0..=loss).rev() {
            let Some(out_grad) = grads[id].clone() else { continue };
            self.backward_op(id, &out_grad, &mut grads);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], id: NodeId, delta: &[F]) {
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta.iter()) {
                    *a += *b;
                }
            }
            None => grads[id] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, id: NodeId, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::EmbedLookup { table, ids } => {
                let d = self.nodes[*table].shape[1];
                let mut dt = vec![F::zero(); self.nodes[*table].value.len()];
                for (i, &r) in ids.iter().enumerate() {
                    let r = r as usize;
                    for j in 0..d {
                        dt[r * d + j] += g[i * d + j];
                    }
                }
                self.accumulate(grads, *table, &dt);
            }
            Op::ConcatCols { inputs } => {
                let rows = self.nodes[id].shape[0];
                let total = self.nodes[id].shape[1];
                let mut offset = 0;
                for &input in inputs {
                    let w = self.nodes[input].shape[1];
                    let mut di = vec![F::zero(); rows * w];
                    for i in 0..rows {
                        di[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    self.accumulate(grads, input, &di);
                    offset += w;
                }
            }
            Op::Conv1dSame { input, weight, bias, window } => {
                let (t, c_in) = (self.nodes[*input].shape[0], self.nodes[*input].shape[1]);
                let (c_out, wk) = (self.nodes[*weight].shape[0], self.nodes[*weight].shape[1]);
                let half = window / 2;
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*weight].value;
                let mut dx = vec![F::zero(); t * c_in];
                let mut dw = vec![F::zero(); c_out * wk];
                let mut db = vec![F::zero(); c_out];
                for ti in 0..t {
                    for o in 0..c_out {
                        let go = g[ti * c_out + o];
                        db[o] += go;
                        for j in 0..*window {
                            let src = ti as isize + j as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..c_in {
                                dw[o * wk + j * c_in + c] += go * x[src * c_in + c];
                                dx[src * c_in + c] += go * w[o * wk + j * c_in + c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, &dx);
                self.accumulate(grads, *weight, &dw);
                self.accumulate(grads, *bias, &db);
            }
            Op::MaxOverTime { input } => {
                let (t, c) = (self.nodes[*input].shape[0], self.nodes[*input].shape[1]);
                let x = &self.nodes[*input].value;
                let mut dx = vec![F::zero(); t * c];
                for j in 0..c {
                    // First argmax gets the gradient; ties route to the
                    // earliest time step.
                    let mut best = 0usize;
                    for i in 1..t {
                        if x[i * c + j] > x[best * c + j] {
                            best = i;
                        }
                    }
                    dx[best * c + j] = g[j];
                }
                self.accumulate(grads, *input, &dx);
            }
            Op::Relu { input } => {
                let x = &self.nodes[*input].value;
                let dx: Vec<F> = x
                    .iter()
                    .zip(g.iter())
                    .map(|(&v, &go)| if v > F::zero() { go } else { F::zero() })
                    .collect();
                self.accumulate(grads, *input, &dx);
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let mut da = vec![F::zero(); m * k];
                let mut db = vec![F::zero(); k * n];
                for i in 0..m {
                    for j in 0..n {
                        let go = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += go * bv[p * n + j];
                            db[p * n + j] += go * av[i * k + p];
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::MatVec { matrix, vector } => {
                let (r, c) = (self.nodes[*matrix].shape[0], self.nodes[*matrix].shape[1]);
                let m = &self.nodes[*matrix].value;
                let v = &self.nodes[*vector].value;
                let mut dm = vec![F::zero(); r * c];
                let mut dv = vec![F::zero(); c];
                for i in 0..r {
                    let gi = g[i];
                    for j in 0..c {
                        dm[i * c + j] += gi * v[j];
                        dv[j] += gi * m[i * c + j];
                    }
                }
                self.accumulate(grads, *matrix, &dm);
                self.accumulate(grads, *vector, &dv);
            }
            Op::AddRowBroadcast { matrix, row } => {
                let (r, c) = (self.nodes[*matrix].shape[0], self.nodes[*matrix].shape[1]);
                let mut drow = vec![F::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        drow[j] += g[i * c + j];
                    }
                }
                self.accumulate(grads, *matrix, g);
                self.accumulate(grads, *row, &drow);
            }
            Op::SubRowBroadcast { matrix, row } => {
                let (r, c) = (self.nodes[*matrix].shape[0], self.nodes[*matrix].shape[1]);
                let mut drow = vec![F::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        drow[j] -= g[i * c + j];
                    }
                }
                self.accumulate(grads, *matrix, g);
                self.accumulate(grads, *row, &drow);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g);
                let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Square { input } => {
                let two = F::from_f64(2.0);
                let x = &self.nodes[*input].value;
                let dx: Vec<F> =
                    x.iter().zip(g.iter()).map(|(&v, &go)| two * v * go).collect();
                self.accumulate(grads, *input, &dx);
            }
            Op::Dot { a, b } => {
                let go = g[0];
                let da: Vec<F> = self.nodes[*b].value.iter().map(|&v| go * v).collect();
                let db: Vec<F> = self.nodes[*a].value.iter().map(|&v| go * v).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::StackRows { inputs } => {
                let d = self.nodes[id].shape[1];
                for (i, &input) in inputs.iter().enumerate() {
                    self.accumulate(grads, input, &g[i * d..(i + 1) * d]);
                }
            }
            Op::StackCols { inputs } => {
                let b = self.nodes[id].shape[0];
                let n = self.nodes[id].shape[1];
                for (j, &input) in inputs.iter().enumerate() {
                    let dcol: Vec<F> = (0..b).map(|i| g[i * n + j]).collect();
                    self.accumulate(grads, input, &dcol);
                }
            }
            Op::MeanRows { input } => {
                let (r, c) = (self.nodes[*input].shape[0], self.nodes[*input].shape[1]);
                let inv = F::one() / F::from_usize(r).expect("row count fits scalar");
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j] * inv;
                    }
                }
                self.accumulate(grads, *input, &dx);
            }
            Op::Scale { input, factor } => {
                let dx: Vec<F> = g.iter().map(|&v| v * *factor).collect();
                self.accumulate(grads, *input, &dx);
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, g);
            }
            Op::Conv2dColwise { input, weight, bias, pad_h } => {
                let ishape = &self.nodes[*input].shape;
                let wshape = &self.nodes[*weight].shape;
                let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
                let (c_out, _, kh) = (wshape[0], wshape[1], wshape[2]);
                let h_out = h + 2 * pad_h - kh + 1;
                let x = &self.nodes[*input].value;
                let wv = &self.nodes[*weight].value;
                let mut dx = vec![F::zero(); c_in * h * w];
                let mut dw = vec![F::zero(); c_out * c_in * kh];
                let mut db = vec![F::zero(); c_out];
                for o in 0..c_out {
                    for y in 0..h_out {
                        for xx in 0..w {
                            let go = g[o * h_out * w + y * w + xx];
                            db[o] += go;
                            for ci in 0..c_in {
                                for ky in 0..kh {
                                    let src = y as isize + ky as isize - *pad_h as isize;
                                    if src < 0 || src >= h as isize {
                                        continue;
                                    }
                                    let src = src as usize;
                                    dw[o * c_in * kh + ci * kh + ky] +=
                                        go * x[ci * h * w + src * w + xx];
                                    dx[ci * h * w + src * w + xx] +=
                                        go * wv[o * c_in * kh + ci * kh + ky];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, &dx);
                self.accumulate(grads, *weight, &dw);
                self.accumulate(grads, *bias, &db);
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let (b, n) = (self.nodes[*logits].shape[0], self.nodes[*logits].shape[1]);
                let x = &self.nodes[*logits].value;
                let go = g[0];
                let invb = F::one() / F::from_usize(b).expect("batch fits scalar");
                let mut dx = vec![F::zero(); b * n];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &x[i * n..(i + 1) * n];
                    let m = row.iter().cloned().fold(row[0], F::max);
                    let mut z = F::zero();
                    for &v in row {
                        z += (v - m).exp();
                    }
                    for j in 0..n {
                        let p = (row[j] - m).exp() / z;
                        let indicator = if j == t { F::one() } else { F::zero() };
                        dx[i * n + j] = go * invb * (p - indicator);
                    }
                }
                self.accumulate(grads, *logits, &dx);
            }
            Op::SumAll { input } => {
                let dx = vec![g[0]; self.nodes[*input].value.len()];
                self.accumulate(grads, *input, &dx);
            }
            Op::MeanAll { input } => {
                let len = self.nodes[*input].value.len();
                let inv = F::one() / F::from_usize(len).expect("numel fits scalar");
                let dx = vec![g[0] * inv; len];
                self.accumulate(grads, *input, &dx);
            }
        }
    }

    /// True when the recorded forward pass sits within `radius` of a
    /// nondifferentiable point (a ReLU input near zero, or a max-pool with a
    /// near-tied runner-up). Finite-difference checks are unreliable there.
    pub fn has_kink_within(&self, radius: F) -> bool {
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    if self.nodes[*input].value.iter().any(|&v| v.abs() <= radius) {
                        return true;
                    }
                }
                Op::MaxOverTime { input } => {
                    let (t, c) = (self.nodes[*input].shape[0], self.nodes[*input].shape[1]);
                    if t < 2 {
                        continue;
                    }
                    let x = &self.nodes[*input].value;
                    for j in 0..c {
                        let mut best = x[j];
                        let mut second = F::neg_infinity();
                        for i in 1..t {
                            let v = x[i * c + j];
                            if v > best {
                                second = best;
                                best = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                        if second.is_finite() && (best - second).abs() <= radius {
                            return true;
                        }
                    }
                }
                _ => {}
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Role;

    fn store1(name: &str, shape: Vec<usize>, values: Vec<f64>) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert(name, Role::Encoder, Tensor::new(shape, values).unwrap()).unwrap();
        s
    }

    #[test]
    fn dot_of_self_gives_two_x() {
        // loss = sum(w . w), w = (1, 2) -> grad w = (2, 4)
        let mut store = store1("w", vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.dot(w, w).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_grad() {
        let mut store = store1("w", vec![2], vec![1.0, 2.0]);
        store
            .insert("p", Role::Scorer, Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let _p = tape.param(&store, "p").unwrap();
        let loss = tape.dot(w, w).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("p").unwrap().grad().unwrap(), &[0.0, 0.0, 0.0]);
        // A parameter never registered on the tape is also zero-populated.
        let mut store2 = store1("w", vec![2], vec![1.0, 2.0]);
        store2.insert("q", Role::Discriminator, Tensor::scalar(1.0)).unwrap();
        let mut tape2 = Tape::new();
        let w2 = tape2.param(&store2, "w").unwrap();
        let loss2 = tape2.dot(w2, w2).unwrap();
        tape2.backward(loss2, &mut store2).unwrap();
        assert_eq!(store2.get("q").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = store1("w", vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        assert!(tape.backward(w, &mut store).is_err());
    }

    #[test]
    fn param_registration_is_idempotent() {
        let store = store1("w", vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let a = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "w").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_param_receives_no_gradient() {
        let mut store = store1("w", vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let w = tape.frozen_param(&store, "w").unwrap();
        let loss = tape.dot(w, w).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_is_ln_n() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 1]).unwrap();
        let v = tape.scalar_value(loss).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn max_over_time_routes_grad_to_first_argmax() {
        let mut store = store1("m", vec![3, 2], vec![1.0, 5.0, 7.0, 5.0, 7.0, 2.0]);
        let mut tape = Tape::new();
        let m = tape.param(&store, "m").unwrap();
        let pooled = tape.max_over_time(m).unwrap();
        assert_eq!(tape.value(pooled), &[7.0, 5.0]);
        let loss = tape.sum_all(pooled);
        tape.backward(loss, &mut store).unwrap();
        // col 0 max at row 1; col 1 tie between rows 0 and 1 -> first wins.
        assert_eq!(
            store.get("m").unwrap().grad().unwrap(),
            &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut store = store1("x", vec![3], vec![-1.0, 0.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn kink_detection_sees_relu_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1], vec![0.0]).unwrap();
        let _ = tape.relu(x);
        assert!(tape.has_kink_within(1e-6));
        let mut tape2 = Tape::<f64>::new();
        let x2 = tape2.constant(vec![1], vec![0.5]).unwrap();
        let _ = tape2.relu(x2);
        assert!(!tape2.has_kink_within(1e-6));
    }

    #[test]
    fn embed_lookup_gathers_and_scatters() {
        let mut store = store1("t", vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let t = tape.param(&store, "t").unwrap();
        let e = tape.embed_lookup(t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(e);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(
            store.get("t").unwrap().grad().unwrap(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
        let mut tape2 = Tape::new();
        let t2 = tape2.param(&store, "t").unwrap();
        assert!(tape2.embed_lookup(t2, &[3]).is_err());
    }
}
