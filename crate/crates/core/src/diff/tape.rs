use super::{DiffError, OpKind, Tensor};

/// Variance floor used inside [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Square(usize),
    Dot(usize, usize),
    Sigmoid(usize),
    Relu(usize),
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ReciprocalEps {
        input: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    DivConst {
        input: usize,
        divisor: f64,
    },
    GatherRows {
        input: usize,
        indices: Vec<usize>,
    },
    SegmentMean {
        input: usize,
        segment: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::RowSum(_) => OpKind::RowSum,
            Op::Square(_) => OpKind::Square,
            Op::Dot(..) => OpKind::Dot,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ReciprocalEps { .. } => OpKind::ReciprocalEps,
            Op::Scale { .. } => OpKind::Scale,
            Op::DivConst { .. } => OpKind::DivConst,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SegmentMean { .. } => OpKind::SegmentMean,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b) => vec![a, b],
            Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::Square(a)
            | Op::Sigmoid(a)
            | Op::Relu(a) => vec![a],
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::ReciprocalEps { input, .. }
            | Op::Scale { input, .. }
            | Op::DivConst { input, .. }
            | Op::GatherRows { input, .. }
            | Op::SegmentMean { input, .. } => vec![input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs have smaller
/// ids and a reverse sweep over ids is a valid backward order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn inputs(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs().into_iter().map(Var).collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn same_shape(&self, op: OpKind, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn expect_rank(&self, op: OpKind, var: Var, rank: usize) -> Result<(), DiffError> {
        if self.shape(var).len() != rank {
            return Err(DiffError::Rank {
                op,
                expected: rank,
                shape: self.shape(var).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(OpKind::Add, a, b)?;
        let v = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(OpKind::Sub, a, b)?;
        let v = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(Op::Sub(a.0, b.0), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(OpKind::Mul, a, b)?;
        let v = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(Op::Mul(a.0, b.0), v))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, matrix: Var, row: Var) -> Result<Var, DiffError> {
        self.expect_rank(OpKind::AddRow, matrix, 2)?;
        self.expect_rank(OpKind::AddRow, row, 1)?;
        let (m, r) = (self.value(matrix), self.value(row));
        if m.cols() != r.len() {
            return Err(DiffError::ShapeMismatch {
                op: OpKind::AddRow,
                lhs: m.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        let mut data = m.data().to_vec();
        for chunk in data.chunks_mut(r.len().max(1)) {
            for (x, &b) in chunk.iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        let v = Tensor::new(m.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(matrix.0, row.0), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.expect_rank(OpKind::MatMul, a, 2)?;
        self.expect_rank(OpKind::MatMul, b, 2)?;
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let (k2, n) = (y.shape()[0], y.shape()[1]);
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: OpKind::MatMul,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let (xd, yd) = (x.data(), y.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = xd[i * k + p];
                let brow = &yd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a.0, b.0), v))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let mut acc = 0.0;
        for &x in self.value(a).data() {
            acc += x;
        }
        Ok(self.push(Op::Sum(a.0), Tensor::scalar(acc)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(DiffError::InvalidArgument {
                op: OpKind::Mean,
                reason: "mean of an empty tensor".into(),
            });
        }
        let mut acc = 0.0;
        for &x in t.data() {
            acc += x;
        }
        let v = acc / t.len() as f64;
        Ok(self.push(Op::Mean(a.0), Tensor::scalar(v)))
    }

    /// Per-row sums of a matrix, as a vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, DiffError> {
        self.expect_rank(OpKind::RowSum, a, 2)?;
        let t = self.value(a);
        let rows = t.shape()[0];
        let sums: Vec<f64> = (0..rows)
            .map(|i| {
                let mut acc = 0.0;
                for &x in t.row(i) {
                    acc += x;
                }
                acc
            })
            .collect();
        Ok(self.push(Op::RowSum(a.0), Tensor::vector(sums)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        let v = self.value(a).map(|x| x * x);
        Ok(self.push(Op::Square(a.0), v))
    }

    /// Inner product of two vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.expect_rank(OpKind::Dot, a, 1)?;
        self.expect_rank(OpKind::Dot, b, 1)?;
        self.same_shape(OpKind::Dot, a, b)?;
        let mut acc = 0.0;
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            acc += x * y;
        }
        Ok(self.push(Op::Dot(a.0, b.0), Tensor::scalar(acc)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        let v = self.value(a).map(logistic);
        Ok(self.push(Op::Sigmoid(a.0), v))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(Op::Relu(a.0), v))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// learned `gamma` scale and `beta` shift.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let x = self.value(input);
        if x.rank() != 1 && x.rank() != 2 {
            return Err(DiffError::Rank {
                op: OpKind::LayerNorm,
                expected: 2,
                shape: x.shape().to_vec(),
            });
        }
        let cols = x.cols();
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(DiffError::ShapeMismatch {
                    op: OpKind::LayerNorm,
                    lhs: x.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if cols == 0 {
            return Err(DiffError::InvalidArgument {
                op: OpKind::LayerNorm,
                reason: "rows must be non-empty".into(),
            });
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = x.rows();
        let n = cols as f64;
        let mut normalized = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = x.row(r);
            let mut mean = 0.0;
            for &v in row {
                mean += v;
            }
            mean /= n;
            let mut var = 0.0;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normalized.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                normalized,
                inv_std,
            },
            v,
        ))
    }

    /// Elementwise `1 / (eps + x)` with `eps` fixed at record time.
    pub fn reciprocal_eps(&mut self, a: Var, eps: f64) -> Result<Var, DiffError> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(DiffError::InvalidArgument {
                op: OpKind::ReciprocalEps,
                reason: format!("epsilon must be positive and finite, got {eps}"),
            });
        }
        let v = self.value(a).map(|x| 1.0 / (eps + x));
        Ok(self.push(Op::ReciprocalEps { input: a.0 }, v))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, DiffError> {
        let v = self.value(a).map(|x| x * factor);
        Ok(self.push(Op::Scale { input: a.0, factor }, v))
    }

    /// Divides by a non-zero constant.
    pub fn div_const(&mut self, a: Var, divisor: f64) -> Result<Var, DiffError> {
        if divisor == 0.0 || !divisor.is_finite() {
            return Err(DiffError::InvalidArgument {
                op: OpKind::DivConst,
                reason: format!("divisor must be finite and non-zero, got {divisor}"),
            });
        }
        let v = self.value(a).map(|x| x / divisor);
        Ok(self.push(Op::DivConst { input: a.0, divisor }, v))
    }

    /// Stacks the selected rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, DiffError> {
        self.expect_rank(OpKind::GatherRows, a, 2)?;
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.shape()[0]) {
            return Err(DiffError::InvalidArgument {
                op: OpKind::GatherRows,
                reason: format!("row {bad} out of range for shape {:?}", t.shape()),
            });
        }
        let v = t.select_rows(indices);
        Ok(self.push(
            Op::GatherRows {
                input: a.0,
                indices: indices.to_vec(),
            },
            v,
        ))
    }

    /// Averages consecutive blocks of `segment` rows: row `s` of the output
    /// is the mean of input rows `[s*segment, (s+1)*segment)`.
    pub fn segment_mean(&mut self, a: Var, segment: usize) -> Result<Var, DiffError> {
        self.expect_rank(OpKind::SegmentMean, a, 2)?;
        let t = self.value(a);
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if segment == 0 || rows % segment != 0 {
            return Err(DiffError::InvalidArgument {
                op: OpKind::SegmentMean,
                reason: format!("{rows} rows cannot be split into segments of {segment}"),
            });
        }
        let groups = rows / segment;
        let mut out = Vec::with_capacity(groups * cols);
        for s in 0..groups {
            let mut acc = vec![0.0; cols];
            for r in s * segment..(s + 1) * segment {
                for (a, &x) in acc.iter_mut().zip(t.row(r)) {
                    *a += x;
                }
            }
            out.extend(acc.into_iter().map(|x| x / segment as f64));
        }
        let v = Tensor::new(vec![groups, cols], out)?;
        Ok(self.push(Op::SegmentMean { input: a.0, segment }, v))
    }

    /// Mean negative log-likelihood of `labels` under a row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, DiffError> {
        self.expect_rank(OpKind::SoftmaxCrossEntropy, logits, 2)?;
        let t = self.value(logits);
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if labels.len() != rows || rows == 0 {
            return Err(DiffError::ShapeMismatch {
                op: OpKind::SoftmaxCrossEntropy,
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(DiffError::InvalidArgument {
                op: OpKind::SoftmaxCrossEntropy,
                reason: format!("label {bad} out of range for {cols} classes"),
            });
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in row {
                z += (x - max).exp();
            }
            let log_z = z.ln() + max;
            loss += log_z - row[label];
            probs.extend(row.iter().map(|&x| (x - log_z).exp()));
        }
        let v = Tensor::scalar(loss / rows as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            v,
        ))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Gradients are retained for leaf nodes only; every leaf that the root
    /// does not depend on reports an all-zero gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(DiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { leaves, shapes })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: usize) -> &'g mut Vec<f64> {
        let len = self.nodes[id].value.len();
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for (id, sign) in [(a, 1.0), (b, 1.0)] {
                    if self.wants(id) {
                        for (s, &gv) in self.slot(grads, id).iter_mut().zip(g) {
                            *s += sign * gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    for (s, &gv) in self.slot(grads, a).iter_mut().zip(g) {
                        *s += gv;
                    }
                }
                if self.wants(b) {
                    for (s, &gv) in self.slot(grads, b).iter_mut().zip(g) {
                        *s -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (id, other) in [(a, b), (b, a)] {
                    if self.wants(id) {
                        let ov = self.nodes[other].value.data();
                        for ((s, &gv), &o) in self.slot(grads, id).iter_mut().zip(g).zip(ov) {
                            *s += gv * o;
                        }
                    }
                }
            }
            Op::AddRow(m, r) => {
                if self.wants(m) {
                    for (s, &gv) in self.slot(grads, m).iter_mut().zip(g) {
                        *s += gv;
                    }
                }
                if self.wants(r) {
                    let cols = self.nodes[r].value.len();
                    let slot = self.slot(grads, r);
                    for chunk in g.chunks(cols.max(1)) {
                        for (s, &gv) in slot.iter_mut().zip(chunk) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let n = y.shape()[1];
                if self.wants(a) {
                    let yd = y.data();
                    let slot = self.slot(grads, a);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &yd[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (&gv, &bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            slot[i * k + p] += acc;
                        }
                    }
                }
                if self.wants(b) {
                    let xd = x.data();
                    let slot = self.slot(grads, b);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = xd[i * k + p];
                            for (s, &gv) in slot[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *s += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(a) {
                    for s in self.slot(grads, a).iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.wants(a) {
                    let n = self.nodes[a].value.len() as f64;
                    for s in self.slot(grads, a).iter_mut() {
                        *s += g[0] / n;
                    }
                }
            }
            Op::RowSum(a) => {
                if self.wants(a) {
                    let cols = self.nodes[a].value.cols().max(1);
                    let slot = self.slot(grads, a);
                    for (chunk, &gv) in slot.chunks_mut(cols).zip(g) {
                        for s in chunk {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Square(a) => {
                if self.wants(a) {
                    let xd = self.nodes[a].value.data();
                    for ((s, &gv), &x) in self.slot(grads, a).iter_mut().zip(g).zip(xd) {
                        *s += 2.0 * x * gv;
                    }
                }
            }
            Op::Dot(a, b) => {
                for (id, other) in [(a, b), (b, a)] {
                    if self.wants(id) {
                        let ov = self.nodes[other].value.data();
                        for (s, &o) in self.slot(grads, id).iter_mut().zip(ov) {
                            *s += g[0] * o;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(a) {
                    for ((s, &gv), &y) in self.slot(grads, a).iter_mut().zip(g).zip(out.data()) {
                        *s += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if self.wants(a) {
                    let xd = self.nodes[a].value.data();
                    for ((s, &gv), &x) in self.slot(grads, a).iter_mut().zip(g).zip(xd) {
                        if x > 0.0 {
                            *s += gv;
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                ref normalized,
                ref inv_std,
            } => {
                let cols = self.nodes[gamma].value.len();
                if self.wants(beta) {
                    let slot = self.slot(grads, beta);
                    for chunk in g.chunks(cols) {
                        for (s, &gv) in slot.iter_mut().zip(chunk) {
                            *s += gv;
                        }
                    }
                }
                if self.wants(gamma) {
                    let slot = self.slot(grads, gamma);
                    for (chunk, xh) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for ((s, &gv), &h) in slot.iter_mut().zip(chunk).zip(xh) {
                            *s += gv * h;
                        }
                    }
                }
                if self.wants(input) {
                    let gd = self.nodes[gamma].value.data().to_vec();
                    let n = cols as f64;
                    let slot = self.slot(grads, input);
                    for (r, (chunk, xh)) in g.chunks(cols).zip(normalized.chunks(cols)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for ((&gv, &h), &gm) in chunk.iter().zip(xh).zip(&gd) {
                            let dh = gv * gm;
                            mean_dh += dh;
                            mean_dh_h += dh * h;
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        let dst = &mut slot[r * cols..(r + 1) * cols];
                        for (((s, &gv), &h), &gm) in dst.iter_mut().zip(chunk).zip(xh).zip(&gd) {
                            *s += inv_std[r] * (gv * gm - mean_dh - h * mean_dh_h);
                        }
                    }
                }
            }
            Op::ReciprocalEps { input, .. } => {
                if self.wants(input) {
                    for ((s, &gv), &r) in self.slot(grads, input).iter_mut().zip(g).zip(out.data()) {
                        *s -= gv * r * r;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.wants(input) {
                    for (s, &gv) in self.slot(grads, input).iter_mut().zip(g) {
                        *s += gv * factor;
                    }
                }
            }
            Op::DivConst { input, divisor } => {
                if self.wants(input) {
                    for (s, &gv) in self.slot(grads, input).iter_mut().zip(g) {
                        *s += gv / divisor;
                    }
                }
            }
            Op::GatherRows { input, ref indices } => {
                if self.wants(input) {
                    let cols = self.nodes[input].value.cols();
                    let slot = self.slot(grads, input);
                    for (p, &row) in indices.iter().enumerate() {
                        let src = &g[p * cols..(p + 1) * cols];
                        for (s, &gv) in slot[row * cols..(row + 1) * cols].iter_mut().zip(src) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::SegmentMean { input, segment } => {
                if self.wants(input) {
                    let cols = self.nodes[input].value.cols();
                    let slot = self.slot(grads, input);
                    for (r, dst) in slot.chunks_mut(cols).enumerate() {
                        let s = r / segment;
                        for (d, &gv) in dst.iter_mut().zip(&g[s * cols..(s + 1) * cols]) {
                            *d += gv / segment as f64;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                ref labels,
                ref probs,
            } => {
                if self.wants(logits) {
                    let cols = self.nodes[logits].value.cols();
                    let rows = labels.len() as f64;
                    let slot = self.slot(grads, logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..cols {
                            let target = if c == label { 1.0 } else { 0.0 };
                            slot[r * cols + c] += g[0] * (probs[r * cols + c] - target) / rows;
                        }
                    }
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, zero if unreachable.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.leaves[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.leaves[var.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
