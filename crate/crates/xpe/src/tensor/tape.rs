//! Define-by-run tape. A forward pass records one node per produced value
//! and one op record per primitive application; `backward` replays the
//! records once, in reverse, and writes gradients into trainable leaves.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Param};

/// Handle to a value produced on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

struct Node {
    values: Vec<f32>,
    shape: Vec<usize>,
}

impl Node {
    fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.values.len() / cols, cols)
    }
}

enum Op {
    Leaf,
    /// out[..,n] = a[..,k] . b[k,n]; leading dims of `a` flatten to rows.
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// rows of x plus a broadcast bias vector
    AddBias { x: usize, bias: usize },
    Scale { x: usize, factor: f32 },
    Gelu { x: usize },
    Tanh { x: usize },
    SoftmaxRows { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: usize, labels: Vec<usize>, softmax: Vec<f32> },
    /// out[i,:] = x[rows[i],:] — embedding lookup and CLS pooling
    GatherRows { x: usize, rows: Vec<usize> },
    Reshape { x: usize },
    ConcatRows { a: usize, b: usize },
    /// [b,s,d] -> [b*h, s, d/h]
    SplitHeads { x: usize, heads: usize },
    /// [b*h, s, dh] -> [b, s, h*dh]
    MergeHeads { x: usize, heads: usize },
    /// [g,m,k] x [g,n,k] -> [g,m,n]
    BmmNt { a: usize, b: usize },
    /// [g,m,k] x [g,k,n] -> [g,m,n]
    BmmNn { a: usize, b: usize },
    /// [1,d] cls, optional [l,d] prompt, [b,t,d] tokens -> [b,1+l+t,d]
    AssembleSequence { cls: usize, prompt: Option<usize>, tokens: usize },
}

pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    /// node index -> bound parameter, for gradient write-back
    leaves: Vec<(usize, Param)>,
    /// param identity -> node index, so one parameter is one leaf per tape
    leaf_ids: HashMap<usize, usize>,
    /// whether a node can reach a trainable leaf
    needs_grad: Vec<bool>,
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
            ops: Vec::new(),
            leaves: Vec::new(),
            leaf_ids: HashMap::new(),
            needs_grad: Vec::new(),
        }
    }

    fn push(&mut self, values: Vec<f32>, shape: Vec<usize>, op: Op, needs: bool) -> ValueId {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { values, shape });
        self.ops.push(op);
        self.needs_grad.push(needs);
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.needs_grad[id.0]
    }

    /// Register a parameter as a leaf. Repeated calls with the same handle
    /// return the same node.
    pub fn leaf(&mut self, param: &Param) -> ValueId {
        if let Some(&idx) = self.leaf_ids.get(&param.id()) {
            return ValueId(idx);
        }
        let (values, shape, trainable) = {
            let t = param.borrow();
            (t.values.clone(), t.shape.clone(), t.trainable)
        };
        let id = self.push(values, shape, Op::Leaf, trainable);
        self.leaf_ids.insert(param.id(), id.0);
        self.leaves.push((id.0, param.clone()));
        id
    }

    /// Register a constant input (never receives gradient).
    pub fn constant(&mut self, values: Vec<f32>, shape: Vec<usize>) -> ValueId {
        self.push(values, shape, Op::Leaf, false)
    }

    pub fn values(&self, id: ValueId) -> &[f32] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    // ── forward primitives ───────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let k = *ash.last().unwrap();
        if bsh.len() != 2 || bsh[0] != k {
            return Err(Error::Dimension { op: "matmul", lhs: ash.clone(), rhs: bsh.clone() });
        }
        let n = bsh[1];
        let m = self.nodes[a.0].values.len() / k;
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = n;
        let values = kernels::matmul(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(values, shape, Op::Matmul { a: a.0, b: b.0 }, needs))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(values, shape, Op::Add { a: a.0, b: b.0 }, needs))
    }

    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (_, cols) = self.nodes[x.0].rows_cols();
        if self.nodes[bias.0].shape != [cols] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let bvals = &self.nodes[bias.0].values;
        let values = self.nodes[x.0]
            .values
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bvals).map(|(&v, &b)| v + b))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(values, shape, Op::AddBias { x: x.0, bias: bias.0 }, needs))
    }

    pub fn scale(&mut self, x: ValueId, factor: f32) -> ValueId {
        let values = self.nodes[x.0].values.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(values, shape, Op::Scale { x: x.0, factor }, needs)
    }

    /// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let values = self.nodes[x.0].values.iter().map(|&v| gelu_f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(values, shape, Op::Gelu { x: x.0 }, needs)
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let values = self.nodes[x.0].values.iter().map(|&v| (v as f64).tanh() as f32).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(values, shape, Op::Tanh { x: x.0 }, needs)
    }

    /// Numerically stable row softmax (max subtraction, f64 row sums).
    pub fn softmax_rows(&mut self, x: ValueId) -> ValueId {
        let (_, cols) = self.nodes[x.0].rows_cols();
        let mut values = Vec::with_capacity(self.nodes[x.0].values.len());
        for row in self.nodes[x.0].values.chunks_exact(cols) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
            let sum: f64 = exps.iter().sum();
            values.extend(exps.iter().map(|&e| (e / sum) as f32));
        }
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(values, shape, Op::SoftmaxRows { x: x.0 }, needs)
    }

    /// Per-row standardization followed by the affine map `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId, eps: f32) -> Result<ValueId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (rows, cols) = self.nodes[x.0].rows_cols();
        if self.nodes[gain.0].shape != [cols] || self.nodes[bias.0].shape != [cols] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let gvals = self.nodes[gain.0].values.clone();
        let bvals = self.nodes[bias.0].values.clone();
        let mut values = Vec::with_capacity(rows * cols);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in self.nodes[x.0].values.chunks_exact(cols) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            means.push(mean);
            rstds.push(rstd);
            for (j, &v) in row.iter().enumerate() {
                let xhat = (v as f64 - mean) * rstd;
                values.push((xhat * gvals[j] as f64 + bvals[j] as f64) as f32);
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            values,
            shape,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, mean: means, rstd: rstds },
            needs,
        ))
    }

    /// Mean negative log-softmax of the true class over the batch.
    pub fn cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (rows, cols) = self.nodes[logits.0].rows_cols();
        if labels.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Index { what: "label", index: bad, bound: cols });
        }
        let mut softmax = Vec::with_capacity(rows * cols);
        let mut total = 0.0f64;
        for (row, &label) in self.nodes[logits.0].values.chunks_exact(cols).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
            let sum: f64 = exps.iter().sum();
            total += sum.ln() - (row[label] - max) as f64;
            softmax.extend(exps.iter().map(|&e| (e / sum) as f32));
        }
        let loss = (total / rows as f64) as f32;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), softmax },
            needs,
        ))
    }

    /// Row gather. Serves as embedding lookup (x = table, rows = token ids)
    /// and as CLS pooling (rows = per-example CLS offsets).
    pub fn gather_rows(&mut self, x: ValueId, rows: &[usize], out_shape: Vec<usize>) -> Result<ValueId> {
        let (nrows, cols) = self.nodes[x.0].rows_cols();
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::Index { what: "row id", index: bad, bound: nrows });
        }
        if out_shape.iter().product::<usize>() != rows.len() * cols {
            return Err(Error::Dimension { op: "gather_rows", lhs: out_shape, rhs: vec![rows.len(), cols] });
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            values.extend_from_slice(&self.nodes[x.0].values[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(x);
        Ok(self.push(values, out_shape, Op::GatherRows { x: x.0, rows: rows.to_vec() }, needs))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        if shape.iter().product::<usize>() != self.nodes[x.0].values.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let values = self.nodes[x.0].values.clone();
        let needs = self.needs(x);
        Ok(self.push(values, shape, Op::Reshape { x: x.0 }, needs))
    }

    /// Stack two matrices with equal width along the row axis.
    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = self.nodes[a.0].rows_cols();
        let (br, bc) = self.nodes[b.0].rows_cols();
        if ac != bc {
            return Err(Error::Dimension {
                op: "concat_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut values = self.nodes[a.0].values.clone();
        values.extend_from_slice(&self.nodes[b.0].values);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(values, vec![ar + br, ac], Op::ConcatRows { a: a.0, b: b.0 }, needs))
    }

    pub fn split_heads(&mut self, x: ValueId, heads: usize) -> Result<ValueId> {
        let sh = &self.nodes[x.0].shape;
        if sh.len() != 3 || sh[2] % heads != 0 {
            return Err(Error::Dimension { op: "split_heads", lhs: sh.clone(), rhs: vec![heads] });
        }
        let (b, s, d) = (sh[0], sh[1], sh[2]);
        let dh = d / heads;
        let src = &self.nodes[x.0].values;
        let mut values = vec![0.0f32; b * s * d];
        for bi in 0..b {
            for h in 0..heads {
                for si in 0..s {
                    let dst = (((bi * heads + h) * s) + si) * dh;
                    let from = (bi * s + si) * d + h * dh;
                    values[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(values, vec![b * heads, s, dh], Op::SplitHeads { x: x.0, heads }, needs))
    }

    pub fn merge_heads(&mut self, x: ValueId, heads: usize) -> Result<ValueId> {
        let sh = &self.nodes[x.0].shape;
        if sh.len() != 3 || sh[0] % heads != 0 {
            return Err(Error::Dimension { op: "merge_heads", lhs: sh.clone(), rhs: vec![heads] });
        }
        let (bh, s, dh) = (sh[0], sh[1], sh[2]);
        let b = bh / heads;
        let d = dh * heads;
        let src = &self.nodes[x.0].values;
        let mut values = vec![0.0f32; b * s * d];
        for bi in 0..b {
            for h in 0..heads {
                for si in 0..s {
                    let from = (((bi * heads + h) * s) + si) * dh;
                    let dst = (bi * s + si) * d + h * dh;
                    values[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(values, vec![b, s, d], Op::MergeHeads { x: x.0, heads }, needs))
    }

    /// Grouped a . b^T: [g,m,k] x [g,n,k] -> [g,m,n].
    pub fn bmm_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[2] {
            return Err(Error::Dimension { op: "bmm_nt", lhs: ash.clone(), rhs: bsh.clone() });
        }
        let (g, m, k, n) = (ash[0], ash[1], ash[2], bsh[1]);
        let mut values = Vec::with_capacity(g * m * n);
        for gi in 0..g {
            let asl = &self.nodes[a.0].values[gi * m * k..(gi + 1) * m * k];
            let bsl = &self.nodes[b.0].values[gi * n * k..(gi + 1) * n * k];
            values.extend_from_slice(&kernels::matmul_nt(asl, bsl, m, k, n));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(values, vec![g, m, n], Op::BmmNt { a: a.0, b: b.0 }, needs))
    }

    /// Grouped a . b: [g,m,k] x [g,k,n] -> [g,m,n].
    pub fn bmm_nn(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::Dimension { op: "bmm_nn", lhs: ash.clone(), rhs: bsh.clone() });
        }
        let (g, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut values = Vec::with_capacity(g * m * n);
        for gi in 0..g {
            let asl = &self.nodes[a.0].values[gi * m * k..(gi + 1) * m * k];
            let bsl = &self.nodes[b.0].values[gi * k * n..(gi + 1) * k * n];
            values.extend_from_slice(&kernels::matmul(asl, bsl, m, k, n));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(values, vec![g, m, n], Op::BmmNn { a: a.0, b: b.0 }, needs))
    }

    /// Build the injected sequence [cls] ++ prompt ++ tokens for every batch
    /// element. cls is [1,d], prompt [l,d] (broadcast over batch), tokens [b,t,d].
    pub fn assemble_sequence(
        &mut self,
        cls: ValueId,
        prompt: Option<ValueId>,
        tokens: ValueId,
    ) -> Result<ValueId> {
        let tsh = self.nodes[tokens.0].shape.clone();
        if tsh.len() != 3 {
            return Err(Error::Dimension { op: "assemble_sequence", lhs: tsh, rhs: vec![] });
        }
        let (b, t, d) = (tsh[0], tsh[1], tsh[2]);
        if self.nodes[cls.0].shape != [1, d] {
            return Err(Error::Dimension {
                op: "assemble_sequence",
                lhs: self.nodes[cls.0].shape.clone(),
                rhs: vec![1, d],
            });
        }
        let l = match prompt {
            Some(p) => {
                let psh = &self.nodes[p.0].shape;
                if psh.len() != 2 || psh[1] != d {
                    return Err(Error::Dimension {
                        op: "assemble_sequence",
                        lhs: psh.clone(),
                        rhs: vec![d],
                    });
                }
                psh[0]
            }
            None => 0,
        };
        let s = 1 + l + t;
        let mut values = Vec::with_capacity(b * s * d);
        for bi in 0..b {
            values.extend_from_slice(&self.nodes[cls.0].values);
            if let Some(p) = prompt {
                values.extend_from_slice(&self.nodes[p.0].values);
            }
            values.extend_from_slice(&self.nodes[tokens.0].values[bi * t * d..(bi + 1) * t * d]);
        }
        let needs = self.needs(cls)
            || prompt.map(|p| self.needs(p)).unwrap_or(false)
            || self.needs(tokens);
        Ok(self.push(
            values,
            vec![b, s, d],
            Op::AssembleSequence { cls: cls.0, prompt: prompt.map(|p| p.0), tokens: tokens.0 },
            needs,
        ))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients are accumulated into the
    /// `grad` buffer of every trainable leaf parameter; non-trainable leaves
    /// are left untouched.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] || matches!(self.ops[idx], Op::Leaf) {
                continue;
            }
            let dout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &dout, &mut grads);
        }

        for (idx, param) in &self.leaves {
            let mut t = param.borrow_mut();
            if !t.trainable {
                continue;
            }
            if let Some(g) = grads[*idx].take() {
                match &mut t.grad {
                    Some(buf) => {
                        for (acc, v) in buf.iter_mut().zip(&g) {
                            *acc += v;
                        }
                    }
                    None => t.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<f32>>], idx: usize, delta: &[f32]) {
        match &mut grads[idx] {
            Some(buf) => {
                for (acc, &v) in buf.iter_mut().zip(delta) {
                    *acc += v;
                }
            }
            None => grads[idx] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, idx: usize, dout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let k = *self.nodes[*a].shape.last().unwrap();
                let n = self.nodes[*b].shape[1];
                let m = self.nodes[*a].values.len() / k;
                if self.needs_grad[*a] {
                    // dA = dC . B^T
                    let da = kernels::matmul_nt(dout, &self.nodes[*b].values, m, n, k);
                    Self::accumulate(grads, *a, &da);
                }
                if self.needs_grad[*b] {
                    // dB = A^T . dC
                    let db = kernels::matmul_tn(&self.nodes[*a].values, dout, m, k, n);
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                if self.needs_grad[*a] {
                    Self::accumulate(grads, *a, dout);
                }
                if self.needs_grad[*b] {
                    Self::accumulate(grads, *b, dout);
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs_grad[*x] {
                    Self::accumulate(grads, *x, dout);
                }
                if self.needs_grad[*bias] {
                    let cols = self.nodes[*bias].values.len();
                    let mut db = vec![0.0f64; cols];
                    for row in dout.chunks_exact(cols) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v as f64;
                        }
                    }
                    let db: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                    Self::accumulate(grads, *bias, &db);
                }
            }
            Op::Scale { x, factor } => {
                if self.needs_grad[*x] {
                    let dx: Vec<f32> = dout.iter().map(|&v| v * factor).collect();
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::Gelu { x } => {
                if self.needs_grad[*x] {
                    let dx: Vec<f32> = self.nodes[*x]
                        .values
                        .iter()
                        .zip(dout)
                        .map(|(&v, &d)| d * gelu_df(v))
                        .collect();
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::Tanh { x } => {
                if self.needs_grad[*x] {
                    let dx: Vec<f32> = self.nodes[idx]
                        .values
                        .iter()
                        .zip(dout)
                        .map(|(&y, &d)| d * (1.0 - y * y))
                        .collect();
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs_grad[*x] {
                    let cols = *self.nodes[idx].shape.last().unwrap();
                    let y = &self.nodes[idx].values;
                    let mut dx = Vec::with_capacity(y.len());
                    for (yrow, drow) in y.chunks_exact(cols).zip(dout.chunks_exact(cols)) {
                        let dot: f64 = yrow
                            .iter()
                            .zip(drow)
                            .map(|(&yv, &dv)| yv as f64 * dv as f64)
                            .sum();
                        dx.extend(
                            yrow.iter()
                                .zip(drow)
                                .map(|(&yv, &dv)| ((dv as f64 - dot) * yv as f64) as f32),
                        );
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let cols = *self.nodes[*x].shape.last().unwrap();
                let xvals = &self.nodes[*x].values;
                let gvals = &self.nodes[*gain].values;
                if self.needs_grad[*gain] || self.needs_grad[*bias] {
                    let mut dg = vec![0.0f64; cols];
                    let mut db = vec![0.0f64; cols];
                    for (r, (xrow, drow)) in
                        xvals.chunks_exact(cols).zip(dout.chunks_exact(cols)).enumerate()
                    {
                        for j in 0..cols {
                            let xhat = (xrow[j] as f64 - mean[r]) * rstd[r];
                            dg[j] += drow[j] as f64 * xhat;
                            db[j] += drow[j] as f64;
                        }
                    }
                    if self.needs_grad[*gain] {
                        let dg: Vec<f32> = dg.iter().map(|&v| v as f32).collect();
                        Self::accumulate(grads, *gain, &dg);
                    }
                    if self.needs_grad[*bias] {
                        let db: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                        Self::accumulate(grads, *bias, &db);
                    }
                }
                if self.needs_grad[*x] {
                    let mut dx = Vec::with_capacity(xvals.len());
                    for (r, (xrow, drow)) in
                        xvals.chunks_exact(cols).zip(dout.chunks_exact(cols)).enumerate()
                    {
                        let mut sum_gd = 0.0f64;
                        let mut sum_gdx = 0.0f64;
                        for j in 0..cols {
                            let xhat = (xrow[j] as f64 - mean[r]) * rstd[r];
                            let gd = gvals[j] as f64 * drow[j] as f64;
                            sum_gd += gd;
                            sum_gdx += gd * xhat;
                        }
                        let inv_n = 1.0 / cols as f64;
                        for j in 0..cols {
                            let xhat = (xrow[j] as f64 - mean[r]) * rstd[r];
                            let gd = gvals[j] as f64 * drow[j] as f64;
                            dx.push(
                                (rstd[r] * (gd - inv_n * sum_gd - xhat * inv_n * sum_gdx)) as f32,
                            );
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::CrossEntropy { logits, labels, softmax } => {
                if self.needs_grad[*logits] {
                    let rows = labels.len();
                    let cols = softmax.len() / rows;
                    let scale = dout[0] as f64 / rows as f64;
                    let mut dx = Vec::with_capacity(softmax.len());
                    for (r, srow) in softmax.chunks_exact(cols).enumerate() {
                        for (j, &p) in srow.iter().enumerate() {
                            let target = if j == labels[r] { 1.0 } else { 0.0 };
                            dx.push(((p as f64 - target) * scale) as f32);
                        }
                    }
                    Self::accumulate(grads, *logits, &dx);
                }
            }
            Op::GatherRows { x, rows } => {
                if self.needs_grad[*x] {
                    let cols = *self.nodes[*x].shape.last().unwrap();
                    let mut dx = vec![0.0f32; self.nodes[*x].values.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..cols {
                            dx[r * cols + j] += dout[i * cols + j];
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::Reshape { x } => {
                if self.needs_grad[*x] {
                    Self::accumulate(grads, *x, dout);
                }
            }
            Op::ConcatRows { a, b } => {
                let asize = self.nodes[*a].values.len();
                if self.needs_grad[*a] {
                    Self::accumulate(grads, *a, &dout[..asize]);
                }
                if self.needs_grad[*b] {
                    Self::accumulate(grads, *b, &dout[asize..]);
                }
            }
            Op::SplitHeads { x, heads } => {
                if self.needs_grad[*x] {
                    let sh = &self.nodes[*x].shape;
                    let (b, s, d) = (sh[0], sh[1], sh[2]);
                    let dh = d / heads;
                    let mut dx = vec![0.0f32; b * s * d];
                    for bi in 0..b {
                        for h in 0..*heads {
                            for si in 0..s {
                                let from = (((bi * heads + h) * s) + si) * dh;
                                let dst = (bi * s + si) * d + h * dh;
                                dx[dst..dst + dh].copy_from_slice(&dout[from..from + dh]);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::MergeHeads { x, heads } => {
                if self.needs_grad[*x] {
                    let sh = &self.nodes[*x].shape;
                    let (bh, s, dh) = (sh[0], sh[1], sh[2]);
                    let b = bh / heads;
                    let d = dh * heads;
                    let mut dx = vec![0.0f32; bh * s * dh];
                    for bi in 0..b {
                        for h in 0..*heads {
                            for si in 0..s {
                                let dst = (((bi * heads + h) * s) + si) * dh;
                                let from = (bi * s + si) * d + h * dh;
                                dx[dst..dst + dh].copy_from_slice(&dout[from..from + dh]);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::BmmNt { a, b } => {
                let (ash, bsh) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let (g, m, k, n) = (ash[0], ash[1], ash[2], bsh[1]);
                if self.needs_grad[*a] {
                    let mut da = Vec::with_capacity(g * m * k);
                    for gi in 0..g {
                        let dsl = &dout[gi * m * n..(gi + 1) * m * n];
                        let bsl = &self.nodes[*b].values[gi * n * k..(gi + 1) * n * k];
                        da.extend_from_slice(&kernels::matmul(dsl, bsl, m, n, k));
                    }
                    Self::accumulate(grads, *a, &da);
                }
                if self.needs_grad[*b] {
                    let mut db = Vec::with_capacity(g * n * k);
                    for gi in 0..g {
                        let dsl = &dout[gi * m * n..(gi + 1) * m * n];
                        let asl = &self.nodes[*a].values[gi * m * k..(gi + 1) * m * k];
                        // dB = dC^T . A
                        db.extend_from_slice(&kernels::matmul_tn(dsl, asl, m, n, k));
                    }
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::BmmNn { a, b } => {
                let (ash, bsh) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let (g, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
                if self.needs_grad[*a] {
                    let mut da = Vec::with_capacity(g * m * k);
                    for gi in 0..g {
                        let dsl = &dout[gi * m * n..(gi + 1) * m * n];
                        let bsl = &self.nodes[*b].values[gi * k * n..(gi + 1) * k * n];
                        // dA = dC . B^T
                        da.extend_from_slice(&kernels::matmul_nt(dsl, bsl, m, n, k));
                    }
                    Self::accumulate(grads, *a, &da);
                }
                if self.needs_grad[*b] {
                    let mut db = Vec::with_capacity(g * k * n);
                    for gi in 0..g {
                        let dsl = &dout[gi * m * n..(gi + 1) * m * n];
                        let asl = &self.nodes[*a].values[gi * m * k..(gi + 1) * m * k];
                        // dB = A^T . dC
                        db.extend_from_slice(&kernels::matmul_tn(asl, dsl, m, k, n));
                    }
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::AssembleSequence { cls, prompt, tokens } => {
                let tsh = &self.nodes[*tokens].shape;
                let (b, t, d) = (tsh[0], tsh[1], tsh[2]);
                let l = prompt.map(|p| self.nodes[p].shape[0]).unwrap_or(0);
                let s = 1 + l + t;
                if self.needs_grad[*cls] {
                    let mut dc = vec![0.0f32; d];
                    for bi in 0..b {
                        for j in 0..d {
                            dc[j] += dout[bi * s * d + j];
                        }
                    }
                    Self::accumulate(grads, *cls, &dc);
                }
                if let Some(p) = prompt {
                    if self.needs_grad[*p] {
                        let mut dp = vec![0.0f32; l * d];
                        for bi in 0..b {
                            let base = bi * s * d + d;
                            for i in 0..l * d {
                                dp[i] += dout[base + i];
                            }
                        }
                        Self::accumulate(grads, *p, &dp);
                    }
                }
                if self.needs_grad[*tokens] {
                    let mut dt = vec![0.0f32; b * t * d];
                    for bi in 0..b {
                        let base = bi * s * d + (1 + l) * d;
                        dt[bi * t * d..(bi + 1) * t * d]
                            .copy_from_slice(&dout[base..base + t * d]);
                    }
                    Self::accumulate(grads, *tokens, &dt);
                }
            }
        }
    }
}

fn gelu_f(x: f32) -> f32 {
    let xf = x as f64;
    (xf * 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2))) as f32
}

fn gelu_df(x: f32) -> f32 {
    let xf = x as f64;
    let phi_cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (phi_cdf + xf * phi_pdf) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Tensor;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, values: Vec<f32>) -> ValueId {
        tape.constant(values, shape)
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let mut rng = SeededRng::new(1);
        let a: Vec<f32> = (0..9).map(|_| rng.normal_f32(0.0, 1.0)).collect();
        let mut tape = Tape::new();
        let eye = leaf(&mut tape, vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = leaf(&mut tape, vec![3, 3], a.clone());
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.values(y), &a[..]);
    }

    #[test]
    fn matmul_scalar_case() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 1], vec![2.0]);
        let b = leaf(&mut tape, vec![1, 1], vec![3.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SeededRng::new(2);
        let (m, k, n) = (4, 3, 5);
        let a: Vec<f32> = (0..m * k).map(|_| rng.normal_f32(0.0, 1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.normal_f32(0.0, 1.0)).collect();
        let mut expected = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                expected[i * n + j] = s;
            }
        }
        let mut tape = Tape::new();
        let aid = leaf(&mut tape, vec![m, k], a);
        let bid = leaf(&mut tape, vec![k, n], b);
        let cid = tape.matmul(aid, bid).unwrap();
        for (got, want) in tape.values(cid).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![4, 2], vec![0.0; 8]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_zero_row() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![0.0; 4]);
        let y = tape.softmax_rows(x);
        for &v in tape.values(y) {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = SeededRng::new(3);
        let x: Vec<f32> = (0..12).map(|_| rng.normal_f32(0.0, 2.0)).collect();
        let shifted: Vec<f32> = x.iter().map(|&v| v + 7.5).collect();
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![3, 4], x);
        let b = leaf(&mut tape, vec![3, 4], shifted);
        let ya = tape.softmax_rows(a);
        let yb = tape.softmax_rows(b);
        for (va, vb) in tape.values(ya).iter().zip(tape.values(yb)) {
            assert!((va - vb).abs() < 1e-6);
        }
        for row in tape.values(ya).chunks_exact(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_two_logit_frozen_value() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![2.0, 0.0]);
        let y = tape.softmax_rows(x);
        assert!((tape.values(y)[0] - 0.880797).abs() < 1e-5);
        assert!((tape.values(y)[1] - 0.119203).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_constant_row_yields_bias() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![4.0, 4.0, 4.0]);
        let g = leaf(&mut tape, vec![3], vec![2.0, 2.0, 2.0]);
        let b = leaf(&mut tape, vec![3], vec![0.5, -0.5, 1.0]);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.values(y), &[0.5, -0.5, 1.0]);
    }

    #[test]
    fn layer_norm_two_point_row_closed_form() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![1.0, -1.0]);
        let g = leaf(&mut tape, vec![2], vec![1.0, 1.0]);
        let b = leaf(&mut tape, vec![2], vec![0.0, 0.0]);
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.values(y)[0] - 1.0).abs() < 1e-6);
        assert!((tape.values(y)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = SeededRng::new(4);
        let x: Vec<f32> = (0..40).map(|_| rng.normal_f32(1.5, 3.0)).collect();
        let mut tape = Tape::new();
        let xid = leaf(&mut tape, vec![5, 8], x);
        let g = leaf(&mut tape, vec![8], vec![1.0; 8]);
        let b = leaf(&mut tape, vec![8], vec![0.0; 8]);
        let y = tape.layer_norm(xid, g, b, 1e-9).unwrap();
        for row in tape.values(y).chunks_exact(8) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn gelu_frozen_values() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.0, 10.0, 1.0]);
        let y = tape.gelu(x);
        let v = tape.values(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-4);
        assert!((v[2] - 0.841345).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 7], vec![0.3; 14]);
        let l = tape.cross_entropy(x, &[4, 0]).unwrap();
        assert!((tape.values(l)[0] - 1.945910).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_confident_logit_is_near_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![30.0, 0.0, 0.0, 0.0]);
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!(tape.values(l)[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_frozen_value() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let l = tape.cross_entropy(x, &[2]).unwrap();
        assert!((tape.values(l)[0] - 0.407606).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![0.0; 3]);
        let err = tape.cross_entropy(x, &[3]).unwrap_err();
        assert!(matches!(err, Error::Index { .. }));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = Param::new(Tensor::zeros("x", vec![2, 2]).trainable());
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let err = tape.backward(xid).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_skips_frozen_leaves() {
        let w = Param::new(Tensor::new("w", vec![1, 1], vec![2.0]).unwrap()); // frozen
        let x = Param::new(Tensor::new("x", vec![1, 1], vec![3.0]).unwrap().trainable());
        let mut tape = Tape::new();
        let wid = tape.leaf(&w);
        let xid = tape.leaf(&x);
        let y = tape.matmul(wid, xid).unwrap();
        tape.backward(y).unwrap();
        assert!(w.borrow().grad.is_none());
        assert_eq!(x.borrow().grad.as_ref().unwrap()[0], 2.0);
    }

    #[test]
    fn shared_leaf_accumulates_once_per_use() {
        // f(x) = x * x -> df/dx = 2x
        let x = Param::new(Tensor::new("x", vec![1, 1], vec![3.0]).unwrap().trainable());
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.leaf(&x);
        assert_eq!(a, b);
        let y = tape.matmul(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.borrow().grad.as_ref().unwrap()[0], 6.0);
    }

    #[test]
    fn gather_rows_matches_table_read() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, vec![4, 2], vec![0., 1., 10., 11., 20., 21., 30., 31.]);
        let out = tape.gather_rows(table, &[2, 0, 2], vec![3, 2]).unwrap();
        assert_eq!(tape.values(out), &[20., 21., 0., 1., 20., 21.]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        assert!(matches!(
            tape.gather_rows(table, &[2], vec![1, 2]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn concat_rows_stacks_in_order() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = tape.concat_rows(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        assert_eq!(tape.values(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut rng = SeededRng::new(6);
        let x: Vec<f32> = (0..2 * 3 * 8).map(|_| rng.normal_f32(0.0, 1.0)).collect();
        let mut tape = Tape::new();
        let xid = leaf(&mut tape, vec![2, 3, 8], x.clone());
        let split = tape.split_heads(xid, 4).unwrap();
        assert_eq!(tape.shape(split), &[8, 3, 2]);
        let merged = tape.merge_heads(split, 4).unwrap();
        assert_eq!(tape.values(merged), &x[..]);
    }

    #[test]
    fn assemble_sequence_layout() {
        let mut tape = Tape::new();
        let cls = leaf(&mut tape, vec![1, 2], vec![9.0, 9.5]);
        let prompt = leaf(&mut tape, vec![2, 2], vec![1.0, 1.5, 2.0, 2.5]);
        let tokens = leaf(&mut tape, vec![2, 1, 2], vec![7.0, 7.5, 8.0, 8.5]);
        let seq = tape.assemble_sequence(cls, Some(prompt), tokens).unwrap();
        assert_eq!(tape.shape(seq), &[2, 4, 2]);
        assert_eq!(
            tape.values(seq),
            &[9.0, 9.5, 1.0, 1.5, 2.0, 2.5, 7.0, 7.5, 9.0, 9.5, 1.0, 1.5, 2.0, 2.5, 8.0, 8.5]
        );
    }

    #[test]
    fn assemble_sequence_without_prompt() {
        let mut tape = Tape::new();
        let cls = leaf(&mut tape, vec![1, 1], vec![5.0]);
        let tokens = leaf(&mut tape, vec![1, 2, 1], vec![1.0, 2.0]);
        let seq = tape.assemble_sequence(cls, None, tokens).unwrap();
        assert_eq!(tape.shape(seq), &[1, 3, 1]);
        assert_eq!(tape.values(seq), &[5.0, 1.0, 2.0]);
    }
}
