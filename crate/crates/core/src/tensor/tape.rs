//! Wengert tape: reverse-mode AD via operation recording.
//!
//! All values live in an arena owned by the tape; ops return [`Var`] handles.
//! The tape is single-owner and single-use: record forward ops, call
//! [`Tape::backward`] once, then read gradients. A tape and its vars stay on
//! one thread from forward through backward.

use super::{Tensor, TensorError};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Sigmoid { x: usize },
    Silu { x: usize },
    Relu { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Scale { x: usize, c: f64 },
    ClampMin { x: usize, lo: f64 },
    /// Temperature softmax over the last axis, computed with max-subtraction.
    Softmax { x: usize, temp: f64 },
    SumAll { x: usize },
    MeanRows { x: usize },
    TileRows { x: usize },
    RowSlice { x: usize, index: usize },
    ReverseRows { x: usize },
    Reshape { x: usize },
    /// Per-channel mean/variance normalization over rows, learned scale/bias.
    ChannelNorm { x: usize, scale: usize, bias: usize, eps: f64 },
    /// Gated recurrence h_k = g_k ⊙ (W_s h_{k-1} + W_x x_k) with
    /// g_k = sigmoid(W_g x_k + b_g). Primary output is the state sequence;
    /// `gates` is the second output and `pre` saves the pre-gate activations
    /// for the backward sweep.
    SsmScan { u: usize, w_s: usize, w_x: usize, w_g: usize, b_g: usize, gates: usize, pre: usize },
    /// Cosine similarity of one embedding against every row of a matrix.
    RowCosine { v: usize, m: usize },
    /// Mean negative log-softmax-likelihood of integer targets per row.
    CrossEntropyRows { logits: usize, targets: Vec<usize> },
}

struct Node {
    out: usize,
    op: Op,
}

/// Recording tape. Owns every tensor produced during the forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    consumed: bool,
    bytes: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            consumed: false,
            bytes: 0,
        }
    }

    /// Register a leaf tensor. Gradients are populated only for leaves with
    /// `requires_grad` (and for intermediates downstream of them).
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_val(t, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_val(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Gradient of `v` after backward. None if no gradient flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.vals[v.0].shape.clone(),
            data: g.clone(),
        })
    }

    /// Bytes held by the value arena (gradient buffers excluded).
    pub fn bytes_in_use(&self) -> usize {
        self.bytes
    }

    fn push_val(&mut self, t: Tensor, requires: bool) -> Var {
        self.bytes += t.data.len() * std::mem::size_of::<f64>();
        self.vals.push(t);
        self.grads.push(None);
        self.requires.push(requires);
        Var(self.vals.len() - 1)
    }

    fn push_node(&mut self, t: Tensor, requires: bool, op: Op) -> Var {
        let out = self.push_val(t, requires);
        self.nodes.push(Node { out: out.0, op });
        out
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.vals[v.0].shape
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::InvalidShape(format!(
                "{what} must be rank-2, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(TensorError::InvalidShape(format!(
                "matmul inner extents differ: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let out = matmul_raw(&self.vals[a.0].data, &self.vals[b.0].data, m, k, n);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push_node(
            Tensor { shape: vec![m, n], data: out },
            req,
            Op::Matmul { a: a.0, b: b.0 },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "transpose input")?;
        let out = transpose_raw(&self.vals[x.0].data, m, n);
        let req = self.requires[x.0];
        Ok(self.push_node(
            Tensor { shape: vec![n, m], data: out },
            req,
            Op::Transpose { x: x.0 },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::InvalidShape(format!(
                "{what} shapes differ: {:?} vs {:?} (no broadcasting)",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self.vals[a.0]
            .data
            .iter()
            .zip(&self.vals[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.vals[a.0].shape.clone();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push_node(Tensor { shape, data }, req, op(a.0, b.0)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v * sigmoid(v), |x| Op::Silu { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, f64::exp, |x| Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.vals[x.0].data.iter().find(|v| **v <= 0.0) {
            return Err(TensorError::Domain(format!(
                "log of non-positive value {bad}"
            )));
        }
        self.unary(x, f64::ln, |x| Op::Log { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(x, |v| v * c, |x| Op::Scale { x, c })
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var, TensorError> {
        self.unary(x, |v| v.max(lo), |x| Op::ClampMin { x, lo })
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<Var, TensorError> {
        let data: Vec<f64> = self.vals[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.vals[x.0].shape.clone();
        let req = self.requires[x.0];
        Ok(self.push_node(Tensor { shape, data }, req, op(x.0)))
    }

    /// Temperature softmax over the last axis. Each slice sums to 1.
    pub fn softmax(&mut self, x: Var, temp: f64) -> Result<Var, TensorError> {
        if !(temp > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let xt = &self.vals[x.0];
        let k = *xt.shape.last().expect("non-empty shape");
        let mut data = vec![0.0; xt.data.len()];
        for (row_out, row_in) in data.chunks_mut(k).zip(xt.data.chunks(k)) {
            softmax_row(row_in, temp, row_out);
        }
        let shape = xt.shape.clone();
        let req = self.requires[x.0];
        Ok(self.push_node(Tensor { shape, data }, req, Op::Softmax { x: x.0, temp }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: f64 = self.vals[x.0].data.iter().sum();
        let req = self.requires[x.0];
        Ok(self.push_node(
            Tensor { shape: vec![1], data: vec![s] },
            req,
            Op::SumAll { x: x.0 },
        ))
    }

    /// Mean over rows: `[n, d]` → `[1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(x, "mean_rows input")?;
        let mut out = vec![0.0; d];
        for row in self.vals[x.0].data.chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let req = self.requires[x.0];
        Ok(self.push_node(
            Tensor { shape: vec![1, d], data: out },
            req,
            Op::MeanRows { x: x.0 },
        ))
    }

    /// Repeat a rank-1 vector as `n` identical rows: `[d]` → `[n, d]`.
    pub fn tile_rows(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(TensorError::InvalidShape(format!(
                "tile_rows input must be rank-1, got {s:?}"
            )));
        }
        if n == 0 {
            return Err(TensorError::InvalidArgument("tile_rows needs n >= 1".into()));
        }
        let d = s[0];
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&self.vals[x.0].data);
        }
        let req = self.requires[x.0];
        Ok(self.push_node(
            Tensor { shape: vec![n, d], data },
            req,
            Op::TileRows { x: x.0 },
        ))
    }

    /// Slice one row: `[n, d]` → `[1, d]`.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(x, "row input")?;
        if index >= n {
            return Err(TensorError::InvalidArgument(format!(
                "row index {index} out of range for {n} rows"
            )));
        }
        let data = self.vals[x.0].data[index * d..(index + 1) * d].to_vec();
        let req = self.requires[x.0];
        Ok(self.push_node(
            Tensor { shape: vec![1, d], data },
            req,
            Op::RowSlice { x: x.0, index },
        ))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(x, "reverse_rows input")?;
        let data = reverse_rows_raw(&self.vals[x.0].data, n, d);
        let req = self.requires[x.0];
        Ok(self.push_node(
            Tensor { shape: vec![n, d], data },
            req,
            Op::ReverseRows { x: x.0 },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = Tensor::from_data(shape, self.vals[x.0].data.clone())?;
        let req = self.requires[x.0];
        Ok(self.push_node(t, req, Op::Reshape { x: x.0 }))
    }

    /// Normalize each channel to zero mean / unit variance across rows, then
    /// apply a learned per-channel scale and bias. `x: [n, d]`, `scale`,
    /// `bias: [d]`.
    pub fn channel_norm(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(x, "channel_norm input")?;
        if self.shape(scale) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::InvalidShape(format!(
                "channel_norm scale/bias must be [{d}], got {:?} and {:?}",
                self.shape(scale),
                self.shape(bias)
            )));
        }
        let eps = 1e-5;
        let (mean, var) = channel_stats(&self.vals[x.0].data, n, d);
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for c in 0..d {
                let xhat = (self.vals[x.0].data[i * d + c] - mean[c]) / (var[c] + eps).sqrt();
                data[i * d + c] = self.vals[scale.0].data[c] * xhat + self.vals[bias.0].data[c];
            }
        }
        let req = self.requires[x.0] || self.requires[scale.0] || self.requires[bias.0];
        Ok(self.push_node(
            Tensor { shape: vec![n, d], data },
            req,
            Op::ChannelNorm { x: x.0, scale: scale.0, bias: bias.0, eps },
        ))
    }

    /// Gated state-space scan over the rows of `u`.
    ///
    /// For k = 1..n with h_0 = 0:
    ///   g_k = sigmoid(W_g x_k + b_g),  h_k = g_k ⊙ (W_s h_{k-1} + W_x x_k).
    ///
    /// Returns (states `[n, d_s]`, gates `[n, d_s]`). One linear sweep: the
    /// work is Θ(n) for fixed dimensions.
    pub fn ssm_scan(
        &mut self,
        u: Var,
        w_s: Var,
        w_x: Var,
        w_g: Var,
        b_g: Var,
    ) -> Result<(Var, Var), TensorError> {
        let (n, d) = self.dims2(u, "scan input")?;
        let (ds, ds2) = self.dims2(w_s, "W_s")?;
        if ds != ds2 {
            return Err(TensorError::InvalidShape(format!(
                "W_s must be square, got [{ds},{ds2}]"
            )));
        }
        if self.shape(w_x) != [ds, d] {
            return Err(TensorError::InvalidShape(format!(
                "W_x must be [{ds},{d}], got {:?}",
                self.shape(w_x)
            )));
        }
        if self.shape(w_g) != [ds, d] {
            return Err(TensorError::InvalidShape(format!(
                "W_g must be [{ds},{d}], got {:?}",
                self.shape(w_g)
            )));
        }
        if self.shape(b_g) != [ds] {
            return Err(TensorError::InvalidShape(format!(
                "b_g must be [{ds}], got {:?}",
                self.shape(b_g)
            )));
        }
        let (states, gates, pre) = super::kernels::scan_forward(
            &self.vals[u.0].data,
            &self.vals[w_s.0].data,
            &self.vals[w_x.0].data,
            &self.vals[w_g.0].data,
            &self.vals[b_g.0].data,
            n,
            d,
            ds,
        );
        let req = self.requires[u.0]
            || self.requires[w_s.0]
            || self.requires[w_x.0]
            || self.requires[w_g.0]
            || self.requires[b_g.0];
        let gates_v = self.push_val(Tensor { shape: vec![n, ds], data: gates }, req);
        let pre_v = self.push_val(Tensor { shape: vec![n, ds], data: pre }, false);
        let states_v = self.push_node(
            Tensor { shape: vec![n, ds], data: states },
            req,
            Op::SsmScan {
                u: u.0,
                w_s: w_s.0,
                w_x: w_x.0,
                w_g: w_g.0,
                b_g: b_g.0,
                gates: gates_v.0,
                pre: pre_v.0,
            },
        );
        Ok((states_v, gates_v))
    }

    /// Cosine similarity of `v` (any shape, `d` elements) against each row of
    /// `m: [k, d]`. Output `[k]`, entries in [-1, 1].
    pub fn row_cosine(&mut self, v: Var, m: Var) -> Result<Var, TensorError> {
        let (k, d) = self.dims2(m, "row_cosine matrix")?;
        if self.vals[v.0].numel() != d {
            return Err(TensorError::InvalidShape(format!(
                "row_cosine vector has {} elements, rows have {d}",
                self.vals[v.0].numel()
            )));
        }
        let vd = &self.vals[v.0].data;
        let nv = norm(vd);
        if nv < 1e-12 {
            return Err(TensorError::DegenerateInput("zero-norm embedding".into()));
        }
        let mut data = vec![0.0; k];
        for (i, row) in self.vals[m.0].data.chunks(d).enumerate() {
            let nr = norm(row);
            if nr < 1e-12 {
                return Err(TensorError::DegenerateInput(format!(
                    "zero-norm prototype row {i}"
                )));
            }
            data[i] = dot(vd, row) / (nv * nr);
        }
        let req = self.requires[v.0] || self.requires[m.0];
        Ok(self.push_node(
            Tensor { shape: vec![k], data },
            req,
            Op::RowCosine { v: v.0, m: m.0 },
        ))
    }

    /// Mean softmax cross-entropy of `logits: [b, c]` against integer targets.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, TensorError> {
        let (b, c) = self.dims2(logits, "cross_entropy logits")?;
        if targets.len() != b {
            return Err(TensorError::InvalidArgument(format!(
                "{} targets for {b} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::InvalidArgument(format!(
                "target {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (row, &t) in self.vals[logits.0].data.chunks(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let req = self.requires[logits.0];
        Ok(self.push_node(
            Tensor { shape: vec![1], data: vec![total / b as f64] },
            req,
            Op::CrossEntropyRows { logits: logits.0, targets: targets.to_vec() },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Populate gradients of everything upstream of the scalar `loss`.
    /// Consumes the tape: a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !self.vals[loss.0].is_scalar() {
            return Err(TensorError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.vals[loss.0].shape
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let out = self.nodes[i].out;
            let op = self.nodes[i].op.clone();
            self.backward_op(out, &op);
        }
        Ok(())
    }

    fn accum(&mut self, id: usize, grad: &[f64]) {
        if !self.requires[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            }
            None => self.grads[id] = Some(grad.to_vec()),
        }
    }

    fn backward_op(&mut self, out: usize, op: &Op) {
        let g = match self.grads[out].clone() {
            Some(g) => g,
            // SsmScan may still need to run if only its gate output got grad.
            None if matches!(op, Op::SsmScan { .. }) => Vec::new(),
            None => return,
        };
        // Closure-free dispatch; each arm reads saved values from the arena.
        match op {
            Op::Matmul { a, b } => {
                let (m, k) = (self.vals[*a].shape[0], self.vals[*a].shape[1]);
                let n = self.vals[*b].shape[1];
                if self.requires[*a] {
                    let bt = transpose_raw(&self.vals[*b].data, k, n);
                    let da = matmul_raw(&g, &bt, m, n, k);
                    self.accum(*a, &da);
                }
                if self.requires[*b] {
                    let at = transpose_raw(&self.vals[*a].data, m, k);
                    let db = matmul_raw(&at, &g, k, m, n);
                    self.accum(*b, &db);
                }
            }
            Op::Transpose { x } => {
                let (m, n) = (self.vals[*x].shape[0], self.vals[*x].shape[1]);
                let dx = transpose_raw(&g, n, m);
                self.accum(*x, &dx);
            }
            Op::Add { a, b } => {
                self.accum(*a, &g);
                self.accum(*b, &g);
            }
            Op::Sub { a, b } => {
                self.accum(*a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(*b, &neg);
            }
            Op::Mul { a, b } => {
                if self.requires[*a] {
                    let da: Vec<f64> =
                        g.iter().zip(&self.vals[*b].data).map(|(gi, bi)| gi * bi).collect();
                    self.accum(*a, &da);
                }
                if self.requires[*b] {
                    let db: Vec<f64> =
                        g.iter().zip(&self.vals[*a].data).map(|(gi, ai)| gi * ai).collect();
                    self.accum(*b, &db);
                }
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.vals[out].data)
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Silu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.vals[*x].data)
                    .map(|(gi, &v)| {
                        let s = sigmoid(v);
                        gi * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.vals[*x].data)
                    .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Exp { x } => {
                let dx: Vec<f64> =
                    g.iter().zip(&self.vals[out].data).map(|(gi, y)| gi * y).collect();
                self.accum(*x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<f64> =
                    g.iter().zip(&self.vals[*x].data).map(|(gi, v)| gi / v).collect();
                self.accum(*x, &dx);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.accum(*x, &dx);
            }
            Op::ClampMin { x, lo } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.vals[*x].data)
                    .map(|(gi, &v)| if v >= *lo { *gi } else { 0.0 })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Softmax { x, temp } => {
                let k = *self.vals[out].shape.last().unwrap();
                let y = &self.vals[out].data;
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / k {
                    let (ys, gs) = (&y[r * k..(r + 1) * k], &g[r * k..(r + 1) * k]);
                    let inner: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..k {
                        dx[r * k + j] = ys[j] * (gs[j] - inner) / temp;
                    }
                }
                self.accum(*x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![g[0]; self.vals[*x].numel()];
                self.accum(*x, &dx);
            }
            Op::MeanRows { x } => {
                let (n, d) = (self.vals[*x].shape[0], self.vals[*x].shape[1]);
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    for c in 0..d {
                        dx[i * d + c] = g[c] / n as f64;
                    }
                }
                self.accum(*x, &dx);
            }
            Op::TileRows { x } => {
                let d = self.vals[*x].numel();
                let mut dx = vec![0.0; d];
                for row in g.chunks(d) {
                    for (o, v) in dx.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accum(*x, &dx);
            }
            Op::RowSlice { x, index } => {
                let d = self.vals[*x].shape[1];
                let mut dx = vec![0.0; self.vals[*x].numel()];
                dx[index * d..(index + 1) * d].copy_from_slice(&g);
                self.accum(*x, &dx);
            }
            Op::ReverseRows { x } => {
                let (n, d) = (self.vals[*x].shape[0], self.vals[*x].shape[1]);
                let dx = reverse_rows_raw(&g, n, d);
                self.accum(*x, &dx);
            }
            Op::Reshape { x } => {
                self.accum(*x, &g);
            }
            Op::ChannelNorm { x, scale, bias, eps } => {
                let (n, d) = (self.vals[*x].shape[0], self.vals[*x].shape[1]);
                let (mean, var) = channel_stats(&self.vals[*x].data, n, d);
                let xd = &self.vals[*x].data;
                let sc = &self.vals[*scale].data;
                let mut d_scale = vec![0.0; d];
                let mut d_bias = vec![0.0; d];
                let mut dx = vec![0.0; n * d];
                for c in 0..d {
                    let inv_std = 1.0 / (var[c] + eps).sqrt();
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for i in 0..n {
                        let xhat = (xd[i * d + c] - mean[c]) * inv_std;
                        let dy = g[i * d + c];
                        d_scale[c] += dy * xhat;
                        d_bias[c] += dy;
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                    }
                    let inv_n = 1.0 / n as f64;
                    for i in 0..n {
                        let xhat = (xd[i * d + c] - mean[c]) * inv_std;
                        dx[i * d + c] = sc[c]
                            * inv_std
                            * (g[i * d + c] - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
                    }
                }
                self.accum(*x, &dx);
                self.accum(*scale, &d_scale);
                self.accum(*bias, &d_bias);
            }
            Op::SsmScan { u, w_s, w_x, w_g, b_g, gates, pre } => {
                let n = self.vals[*u].shape[0];
                let d = self.vals[*u].shape[1];
                let ds = self.vals[*w_s].shape[0];
                let g_states = if g.is_empty() { None } else { Some(g.as_slice()) };
                let g_gates = self.grads[*gates].clone();
                let grads = super::kernels::scan_backward(
                    g_states,
                    g_gates.as_deref(),
                    &self.vals[out].data,
                    &self.vals[*gates].data,
                    &self.vals[*pre].data,
                    &self.vals[*u].data,
                    &self.vals[*w_s].data,
                    &self.vals[*w_x].data,
                    &self.vals[*w_g].data,
                    n,
                    d,
                    ds,
                );
                self.accum(*u, &grads.d_u);
                self.accum(*w_s, &grads.d_w_s);
                self.accum(*w_x, &grads.d_w_x);
                self.accum(*w_g, &grads.d_w_g);
                self.accum(*b_g, &grads.d_b_g);
            }
            Op::RowCosine { v, m } => {
                let (k, d) = (self.vals[*m].shape[0], self.vals[*m].shape[1]);
                let vd = &self.vals[*v].data;
                let nv = norm(vd);
                let y = &self.vals[out].data;
                let mut dv = vec![0.0; d];
                let mut dm = vec![0.0; k * d];
                for i in 0..k {
                    let row = &self.vals[*m].data[i * d..(i + 1) * d];
                    let nr = norm(row);
                    let gi = g[i];
                    for c in 0..d {
                        dv[c] += gi * (row[c] / (nv * nr) - y[i] * vd[c] / (nv * nv));
                        dm[i * d + c] = gi * (vd[c] / (nv * nr) - y[i] * row[c] / (nr * nr));
                    }
                }
                self.accum(*v, &dv);
                self.accum(*m, &dm);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (b, c) = (self.vals[*logits].shape[0], self.vals[*logits].shape[1]);
                let mut dx = vec![0.0; b * c];
                let scale = g[0] / b as f64;
                for (r, &t) in targets.iter().enumerate() {
                    let row = &self.vals[*logits].data[r * c..(r + 1) * c];
                    let mut p = vec![0.0; c];
                    softmax_row(row, 1.0, &mut p);
                    for j in 0..c {
                        dx[r * c + j] = scale * (p[j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accum(*logits, &dx);
            }
        }
    }
}

// ── Scalar helpers ──────────────────────────────────────────────────

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f64], temp: f64, out: &mut [f64]) {
    let max = row.iter().map(|v| v / temp).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v / temp - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let (crow, brow) = (&mut c[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]);
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn reverse_rows_raw(a: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        out[i * d..(i + 1) * d].copy_from_slice(&a[(n - 1 - i) * d..(n - i) * d]);
    }
    out
}

fn channel_stats(x: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for c in 0..d {
            let dlt = row[c] - mean[c];
            var[c] += dlt * dlt;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    (mean, var)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
