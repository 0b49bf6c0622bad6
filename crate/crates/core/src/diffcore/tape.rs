//! The op tape and its reverse pass.

use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    FixedLayerNorm(Var),
    CrossEntropyLogits(Var, usize),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    SumRows(Var),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive ops. Ops are appended in execution order,
/// so index order is a topological order and the reverse pass is a single
/// reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    /// When > 0, relu forward flags inputs with |x| <= eps (subgradient
    /// points the gradient checker must exclude).
    kink_eps: f64,
    kink_hit: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            kink_eps: 0.0,
            kink_hit: false,
        }
    }

    pub fn set_kink_eps(&mut self, eps: f64) {
        self.kink_eps = eps;
    }

    /// Whether any relu input passed within `kink_eps` of zero.
    pub fn kink_hit(&self) -> bool {
        self.kink_hit
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "scalar",
                detail: format!("expected 1x1, got {}x{}", t.rows, t.cols),
            });
        }
        Ok(t.data[0])
    }

    fn push(&mut self, op: &'static str, mut value: Tensor, record: Op) -> Result<Var> {
        if self.precision == Precision::F32 {
            for x in value.data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        if value.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node { value, op: record });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Tracked parameter input; gradients are reported for leaves.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input. Structurally identical to a leaf; the distinction
    /// is documentation for callers harvesting gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("lhs {m}x{k}, rhs {k2}x{n}"),
            });
        }
        let mut out = Tensor::zeros(m, n);
        matmul_nn(
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            &mut out.data,
            m,
            k,
            n,
        );
        self.push("matmul", out, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(n, m);
        for r in 0..m {
            for c in 0..n {
                out.data[c * m + r] = src.data[r * n + c];
            }
        }
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape {
                op: "add",
                detail: format!("lhs {}x{}, rhs {}x{}", sa.0, sa.1, sb.0, sb.1),
            });
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(
            "add",
            Tensor {
                rows: sa.0,
                cols: sa.1,
                data,
            },
            Op::Add(a, b),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        let data = self.nodes[a.0].value.data.iter().map(|x| x * s).collect();
        self.push(
            "scale",
            Tensor {
                rows: m,
                cols: n,
                data,
            },
            Op::Scale(a, s),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("lhs {}x{}, rhs {}x{}", sa.0, sa.1, sb.0, sb.1),
            });
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(
            "mul",
            Tensor {
                rows: sa.0,
                cols: sa.1,
                data,
            },
            Op::Mul(a, b),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.kink_eps > 0.0 {
            let eps = self.kink_eps;
            if self.nodes[a.0].value.data.iter().any(|x| x.abs() <= eps) {
                self.kink_hit = true;
            }
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|x| x.max(0.0))
            .collect();
        self.push(
            "relu",
            Tensor {
                rows: m,
                cols: n,
                data,
            },
            Op::Relu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| stable_sigmoid(x))
            .collect();
        self.push(
            "sigmoid",
            Tensor {
                rows: m,
                cols: n,
                data,
            },
            Op::Sigmoid(a),
        )
    }

    /// Softmax independently over each row, with max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if n == 0 {
            return Err(Error::Shape {
                op: "row_softmax",
                detail: "empty rows".into(),
            });
        }
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = self.nodes[a.0].value.row(r);
            softmax_into(row, &mut out.data[r * n..(r + 1) * n]);
        }
        self.push("row_softmax", out, Op::RowSoftmax(a))
    }

    /// Z-score of each row: mean 0, population variance 1, no learned
    /// affine. Errors on a constant row.
    pub fn fixed_layernorm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if n < 2 {
            return Err(Error::Shape {
                op: "fixed_layernorm",
                detail: format!("need at least 2 columns, got {n}"),
            });
        }
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = self.nodes[a.0].value.row(r);
            let (_, sigma) = zscore_into(row, &mut out.data[r * n..(r + 1) * n])?;
            debug_assert!(sigma > 0.0);
        }
        self.push("fixed_layernorm", out, Op::FixedLayerNorm(a))
    }

    /// Scalar cross entropy of a `1 x n` logits row against a class index:
    /// `logsumexp(logits) - logits[target]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (m, n) = self.shape(logits);
        if m != 1 {
            return Err(Error::Shape {
                op: "cross_entropy_logits",
                detail: format!("expected a 1xN row of logits, got {m}x{n}"),
            });
        }
        if target >= n {
            return Err(Error::Param(format!(
                "cross_entropy_logits target {target} out of range for {n} classes"
            )));
        }
        let row = self.nodes[logits.0].value.row(0);
        let loss = log_sum_exp(row) - row[target];
        self.push(
            "cross_entropy_logits",
            Tensor::row_vector(vec![loss]),
            Op::CrossEntropyLogits(logits, target),
        )
    }

    /// Horizontal concatenation: `m x n1` and `m x n2` give `m x (n1+n2)`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        if ma != mb {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: format!("lhs {ma}x{na}, rhs {mb}x{nb}"),
            });
        }
        let mut out = Tensor::zeros(ma, na + nb);
        for r in 0..ma {
            out.data[r * (na + nb)..r * (na + nb) + na]
                .copy_from_slice(self.nodes[a.0].value.row(r));
            out.data[r * (na + nb) + na..(r + 1) * (na + nb)]
                .copy_from_slice(self.nodes[b.0].value.row(r));
        }
        self.push("concat_cols", out, Op::ConcatCols(a, b))
    }

    /// Vertical concatenation of equal-width blocks.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "stack_rows",
                detail: "no parts".into(),
            });
        }
        let n = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                return Err(Error::Shape {
                    op: "stack_rows",
                    detail: format!("width {pn} != {n}"),
                });
            }
            rows += pm;
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        self.push(
            "stack_rows",
            Tensor {
                rows,
                cols: n,
                data,
            },
            Op::StackRows(parts.to_vec()),
        )
    }

    /// Column sums: `m x n` gives `1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(self.nodes[a.0].value.row(r)) {
                *o += x;
            }
        }
        self.push("sum_rows", Tensor::row_vector(out), Op::SumRows(a))
    }

    /// Sum of all entries, as a `1 x 1` scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push("sum_all", Tensor::row_vector(vec![s]), Op::SumAll(a))
    }

    /// Convenience: dot product of two row vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.sum_all(prod)
    }

    /// Reverse pass from a scalar loss. Returns one gradient buffer per
    /// node; harvest with [`Gradients::get`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be 1x1, got {}x{}", t.rows, t.cols),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    {
                        let ga = ensure(&mut grads, *a, m * k);
                        matmul_nt(&g, &self.nodes[b.0].value.data, ga, m, n, k);
                    }
                    let gb = ensure(&mut grads, *b, k * n);
                    matmul_tn(&self.nodes[a.0].value.data, &g, gb, m, k, n);
                }
                Op::Transpose(a) => {
                    let (m, n) = self.shape(*a);
                    let ga = ensure(&mut grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, 1.0);
                    accumulate(&mut grads, *b, &g, 1.0);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g, *s),
                Op::Mul(a, b) => {
                    {
                        let bv = &self.nodes[b.0].value.data;
                        let ga = ensure(&mut grads, *a, bv.len());
                        for i in 0..bv.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    let av = &self.nodes[a.0].value.data;
                    let gb = ensure(&mut grads, *b, av.len());
                    for i in 0..av.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value.data;
                    let ga = ensure(&mut grads, *a, av.len());
                    for i in 0..av.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = &node.value.data;
                    let ga = ensure(&mut grads, *a, yv.len());
                    for i in 0..yv.len() {
                        ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
                Op::RowSoftmax(a) => {
                    let (m, n) = node.value.shape();
                    let ga = ensure(&mut grads, *a, m * n);
                    for r in 0..m {
                        let s = &node.value.data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let inner: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                        for c in 0..n {
                            ga[r * n + c] += s[c] * (gr[c] - inner);
                        }
                    }
                }
                Op::FixedLayerNorm(a) => {
                    let (m, n) = node.value.shape();
                    let ga = ensure(&mut grads, *a, m * n);
                    for r in 0..m {
                        let x = self.nodes[a.0].value.row(r);
                        let y = &node.value.data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mean = x.iter().sum::<f64>() / n as f64;
                        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let sigma = var.sqrt();
                        let g_mean = gr.iter().sum::<f64>() / n as f64;
                        let gy_mean =
                            gr.iter().zip(y).map(|(gi, yi)| gi * yi).sum::<f64>() / n as f64;
                        for c in 0..n {
                            ga[r * n + c] += (gr[c] - g_mean - y[c] * gy_mean) / sigma;
                        }
                    }
                }
                Op::CrossEntropyLogits(a, target) => {
                    let row = self.nodes[a.0].value.row(0);
                    let n = row.len();
                    let mut p = vec![0.0; n];
                    softmax_into(row, &mut p);
                    let ga = ensure(&mut grads, *a, n);
                    for c in 0..n {
                        let delta = if c == *target { 1.0 } else { 0.0 };
                        ga[c] += g[0] * (p[c] - delta);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (m, na) = self.shape(*a);
                    let nb = self.shape(*b).1;
                    let w = na + nb;
                    {
                        let ga = ensure(&mut grads, *a, m * na);
                        for r in 0..m {
                            for c in 0..na {
                                ga[r * na + c] += g[r * w + c];
                            }
                        }
                    }
                    let gb = ensure(&mut grads, *b, m * nb);
                    for r in 0..m {
                        for c in 0..nb {
                            gb[r * nb + c] += g[r * w + na + c];
                        }
                    }
                }
                Op::StackRows(parts) => {
                    let n = node.value.cols;
                    let mut row0 = 0;
                    let parts = parts.clone();
                    for p in parts {
                        let (pm, _) = self.shape(p);
                        let gp = ensure(&mut grads, p, pm * n);
                        for i in 0..pm * n {
                            gp[i] += g[row0 * n + i];
                        }
                        row0 += pm;
                    }
                }
                Op::SumRows(a) => {
                    let (m, n) = self.shape(*a);
                    let ga = ensure(&mut grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c];
                        }
                    }
                }
                Op::SumAll(a) => {
                    let (m, n) = self.shape(*a);
                    let ga = ensure(&mut grads, *a, m * n);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Per-node gradient buffers from one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node, if the node influenced it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    /// Gradient as an owned tensor shaped like the node, zeros if the node
    /// did not influence the loss.
    pub fn tensor(&self, tape: &Tape, v: Var) -> Tensor {
        let (m, n) = tape.shape(v);
        match self.get(v) {
            Some(g) => Tensor {
                rows: m,
                cols: n,
                data: g.to_vec(),
            },
            None => Tensor::zeros(m, n),
        }
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    let slot = &mut grads[v.index()];
    if slot.is_none() {
        *slot = Some(vec![0.0; len]);
    }
    slot.as_mut().unwrap()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], scale: f64) {
    let ga = ensure(grads, v, g.len());
    for i in 0..g.len() {
        ga[i] += g[i] * scale;
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn zscore_into(row: &[f64], out: &mut [f64]) -> Result<(f64, f64)> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 1e-30 {
        return Err(Error::DegenerateLayerNorm);
    }
    let sigma = var.sqrt();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - mean) / sigma;
    }
    Ok((mean, sigma))
}

// ── matmul kernels ──────────────────────────────────────────────────

/// c += a (m x k) * b (k x n)
fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += a_il * brow[j];
            }
        }
    }
}

/// c += a (m x n) * b^T, b is (k x n); result m x k
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for l in 0..n {
                acc += arow[l] * brow[l];
            }
            c[i * k + j] += acc;
        }
    }
}

/// c += a^T * b, a is (m x k), b is (m x n); result k x n
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for l in 0..m {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..k {
            let a_li = a[l * k + i];
            if a_li == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += a_li * brow[j];
            }
        }
    }
}
