//! Minimal reverse-mode automatic differentiation on f64 tensors.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly and
//! records enough to compute exact gradients in a single reverse sweep.
//! Construction order is topological by definition, so `backward` walks node
//! ids in reverse. Ops cover exactly what the denoiser, router, encoders and
//! losses need; shape misuse inside the engine is a programming error and
//! panics, while public module APIs validate shapes up front.

use std::f64::consts::PI;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    SoftmaxRows(usize),
    LogClamped(usize, f64),
    Gelu(usize),
    Normalize(usize, f64),
    ConcatRows(usize, usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    Transpose2d(usize),
    Reshape(usize),
    SumAll(usize),
    RotatePairs {
        x: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    Conv2dSingle {
        x: usize,
        kernel: usize,
        stride_t: usize,
    },
    ForwardDiffL1 {
        x: usize,
        dims: [usize; 5],
    },
    LayerVarSum {
        x: usize,
        dims: [usize; 5],
    },
    Detach,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to tape leaves.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient for `var`, or `None` if no gradient flowed to it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn assert_same_shape(a: &[usize], b: &[usize], what: &str) {
    assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: &[usize], value: &[f64]) -> Var {
        self.push(shape.to_vec(), value.to_vec(), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], value: &[f64]) -> Var {
        self.push(shape.to_vec(), value.to_vec(), Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.nodes[a.0].shape, &self.nodes[b.0].shape, "add");
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(shape, value, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.nodes[a.0].shape, &self.nodes[b.0].shape, "sub");
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(shape, value, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.nodes[a.0].shape, &self.nodes[b.0].shape, "mul");
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(shape, value, Op::Mul(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0);
        self.push(shape, value, Op::Scale(a.0, c), ng)
    }

    /// `[r, c] + [c]` row-wise bias.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (rows, cols) = self.dims2(a);
        assert_eq!(self.nodes[bias.0].shape, vec![cols], "add_bias: bias shape");
        let mut value = self.nodes[a.0].value.clone();
        for r in 0..rows {
            for c in 0..cols {
                value[r * cols + c] += self.nodes[bias.0].value[c];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(bias.0);
        self.push(shape, value, Op::AddBias(a.0, bias.0), ng)
    }

    /// `[r, c] * [c]` broadcast multiply (per-column scale applied to each row).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (rows, cols) = self.dims2(a);
        assert_eq!(self.nodes[row.0].shape, vec![cols], "mul_row: vector shape");
        let mut value = self.nodes[a.0].value.clone();
        for r in 0..rows {
            for c in 0..cols {
                value[r * cols + c] *= self.nodes[row.0].value[c];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(row.0);
        self.push(shape, value, Op::MulRow(a.0, row.0), ng)
    }

    /// `[r, c] * [r]` broadcast multiply (each row scaled by its own factor).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (rows, cols) = self.dims2(a);
        assert_eq!(self.nodes[col.0].shape, vec![rows], "mul_col: vector shape");
        let mut value = self.nodes[a.0].value.clone();
        for r in 0..rows {
            let f = self.nodes[col.0].value[r];
            for c in 0..cols {
                value[r * cols + c] *= f;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(col.0);
        self.push(shape, value, Op::MulCol(a.0, col.0), ng)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let value = matmul_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(vec![m, n], value, Op::MatMul(a.0, b.0), ng)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let value = matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(vec![m, n], value, Op::MatMulNT(a.0, b.0), ng)
    }

    /// Row-wise softmax of a `[r, c]` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.dims2(a);
        let mut value = vec![0f64; rows * cols];
        for r in 0..rows {
            let src = &self.nodes[a.0].value[r * cols..(r + 1) * cols];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (src[c] - max).exp();
                value[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                value[r * cols + c] /= sum;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0);
        self.push(shape, value, Op::SoftmaxRows(a.0), ng)
    }

    /// Element-wise `ln(max(x, eps))`; the clamped region has zero gradient.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| x.max(eps).ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0);
        self.push(shape, value, Op::LogClamped(a.0, eps), ng)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0);
        self.push(shape, value, Op::Gelu(a.0), ng)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` of a `[r, c]` matrix.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (rows, cols) = self.dims2(a);
        let mut value = vec![0f64; rows * cols];
        for r in 0..rows {
            let src = &self.nodes[a.0].value[r * cols..(r + 1) * cols];
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                value[r * cols + c] = (src[c] - mean) * inv;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0);
        self.push(shape, value, Op::Normalize(a.0, eps), ng)
    }

    /// Stack `[r1, c]` over `[r2, c]` into `[r1 + r2, c]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (r1, c1) = self.dims2(a);
        let (r2, c2) = self.dims2(b);
        assert_eq!(c1, c2, "concat_rows: column mismatch");
        let mut value = self.nodes[a.0].value.clone();
        value.extend_from_slice(&self.nodes[b.0].value);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(vec![r1 + r2, c1], value, Op::ConcatRows(a.0, b.0), ng)
    }

    /// Rows `start .. start + len` of a `[r, c]` matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.dims2(a);
        assert!(start + len <= rows, "slice_rows: out of range");
        let value = self.nodes[a.0].value[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(a.0);
        self.push(vec![len, cols], value, Op::SliceRows(a.0, start), ng)
    }

    /// Columns `start .. start + len` of a `[r, c]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.dims2(a);
        assert!(start + len <= cols, "slice_cols: out of range");
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&self.nodes[a.0].value[r * cols + start..r * cols + start + len]);
        }
        let ng = self.needs(a.0);
        self.push(vec![rows, len], value, Op::SliceCols(a.0, start), ng)
    }

    /// Concatenate equal-row matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let rows = self.dims2(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let (pr, pc) = self.dims2(p);
                assert_eq!(pr, rows, "concat_cols: row mismatch");
                value.extend_from_slice(&self.nodes[p.0].value[r * pc..(r + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        self.push(vec![rows, total], value, Op::ConcatCols(ids), ng)
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].value.len(),
            "reshape: element count mismatch"
        );
        let value = self.nodes[a.0].value.clone();
        let ng = self.needs(a.0);
        self.push(shape.to_vec(), value, Op::Reshape(a.0), ng)
    }

    /// `[r, c]` to `[c, r]`.
    pub fn transpose2d(&mut self, a: Var) -> Var {
        let (rows, cols) = self.dims2(a);
        let mut value = vec![0f64; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                value[c * rows + r] = self.nodes[a.0].value[r * cols + c];
            }
        }
        let ng = self.needs(a.0);
        self.push(vec![cols, rows], value, Op::Transpose2d(a.0), ng)
    }

    /// Sum of all elements, as a `[1]` node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = vec![self.nodes[a.0].value.iter().sum()];
        let ng = self.needs(a.0);
        self.push(vec![1], value, Op::SumAll(a.0), ng)
    }

    /// Mean of all elements, as a `[1]` node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Rotate consecutive element pairs by per-pair angles given as cos/sin.
    ///
    /// `cos`/`sin` must hold one angle per element pair of `a` (flattened).
    pub fn rotate_pairs(&mut self, a: Var, cos: Vec<f64>, sin: Vec<f64>) -> Var {
        let len = self.nodes[a.0].value.len();
        assert_eq!(len % 2, 0, "rotate_pairs: element count must be even");
        assert_eq!(cos.len(), len / 2, "rotate_pairs: cos length");
        assert_eq!(sin.len(), len / 2, "rotate_pairs: sin length");
        let src = &self.nodes[a.0].value;
        let mut value = vec![0f64; len];
        for i in 0..len / 2 {
            let (x0, x1) = (src[2 * i], src[2 * i + 1]);
            value[2 * i] = x0 * cos[i] - x1 * sin[i];
            value[2 * i + 1] = x0 * sin[i] + x1 * cos[i];
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0);
        self.push(shape, value, Op::RotatePairs { x: a.0, cos, sin }, ng)
    }

    /// Single-channel 2D convolution over a `[t, f]` plane with a `[kh, kw]`
    /// kernel, zero padding 1 on both axes, stride `(stride_t, 1)`.
    pub fn conv2d_single(&mut self, x: Var, kernel: Var, stride_t: usize) -> Var {
        let (t_in, f_in) = self.dims2(x);
        let (kh, kw) = self.dims2(kernel);
        assert!(stride_t >= 1, "conv2d_single: stride must be >= 1");
        let t_out = (t_in + 2 - kh) / stride_t + 1;
        let f_out = f_in + 2 - kw + 1;
        let mut value = vec![0f64; t_out * f_out];
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[kernel.0].value;
        for to in 0..t_out {
            for fo in 0..f_out {
                let mut acc = 0.0;
                for dy in 0..kh {
                    let ti = (to * stride_t + dy) as isize - 1;
                    if ti < 0 || ti as usize >= t_in {
                        continue;
                    }
                    for dx in 0..kw {
                        let fi = (fo + dx) as isize - 1;
                        if fi < 0 || fi as usize >= f_in {
                            continue;
                        }
                        acc += kv[dy * kw + dx] * xv[ti as usize * f_in + fi as usize];
                    }
                }
                value[to * f_out + fo] = acc;
            }
        }
        let ng = self.needs(x.0) || self.needs(kernel.0);
        self.push(
            vec![t_out, f_out],
            value,
            Op::Conv2dSingle {
                x: x.0,
                kernel: kernel.0,
                stride_t,
            },
            ng,
        )
    }

    /// L1 norm of forward differences along the last three axes of a tensor
    /// viewed as `[l, n, t, h, w]`, summed over everything. In-bounds
    /// differences only.
    pub fn forward_diff_l1(&mut self, a: Var, dims: [usize; 5]) -> Var {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.nodes[a.0].value.len(),
            "forward_diff_l1: dims mismatch"
        );
        let v = &self.nodes[a.0].value;
        let mut total = 0.0;
        for_each_forward_diff(dims, |cur, nxt| {
            total += (v[nxt] - v[cur]).abs();
        });
        let ng = self.needs(a.0);
        self.push(vec![1], vec![total], Op::ForwardDiffL1 { x: a.0, dims }, ng)
    }

    /// Population variance across the first axis of `[l, n, t, h, w]` at each
    /// `(n, t, h, w)` position, summed over positions.
    pub fn layer_var_sum(&mut self, a: Var, dims: [usize; 5]) -> Var {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.nodes[a.0].value.len(),
            "layer_var_sum: dims mismatch"
        );
        let [l, n, t, h, w] = dims;
        let pos = n * t * h * w;
        let v = &self.nodes[a.0].value;
        let mut total = 0.0;
        for p in 0..pos {
            let mut mean = 0.0;
            for li in 0..l {
                mean += v[li * pos + p];
            }
            mean /= l as f64;
            let mut var = 0.0;
            for li in 0..l {
                let d = v[li * pos + p] - mean;
                var += d * d;
            }
            total += var / l as f64;
        }
        let ng = self.needs(a.0);
        self.push(vec![1], vec![total], Op::LayerVarSum { x: a.0, dims }, ng)
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Detach, false)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        assert_eq!(s.len(), 2, "expected rank-2 node, got shape {s:?}");
        (s[0], s[1])
    }

    /// Reverse sweep from a scalar node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], id: usize, delta: impl Fn(&mut [f64])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
        delta(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let a_val = self.nodes[*a].value.clone();
                let b_val = self.nodes[*b].value.clone();
                self.add_grad(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * b_val[i];
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * a_val[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.add_grad(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * c;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                let (rows, cols) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                self.add_grad(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(grads, *bias, |gb| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (rows, cols) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let row_val = self.nodes[*row].value.clone();
                let a_val = self.nodes[*a].value.clone();
                self.add_grad(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[r * cols + c] * row_val[c];
                        }
                    }
                });
                self.add_grad(grads, *row, |gr| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gr[c] += g[r * cols + c] * a_val[r * cols + c];
                        }
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (rows, cols) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let col_val = self.nodes[*col].value.clone();
                let a_val = self.nodes[*a].value.clone();
                self.add_grad(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[r * cols + c] * col_val[r];
                        }
                    }
                });
                self.add_grad(grads, *col, |gc| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gc[r] += g[r * cols + c] * a_val[r * cols + c];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let a_val = self.nodes[*a].value.clone();
                let b_val = self.nodes[*b].value.clone();
                // dA = g . B^T ; dB = A^T . g
                self.add_grad(grads, *a, |ga| {
                    matmul_nt_acc(g, &b_val, m, n, k, ga);
                });
                self.add_grad(grads, *b, |gb| {
                    matmul_tn_acc(&a_val, g, m, k, n, gb);
                });
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[0];
                let a_val = self.nodes[*a].value.clone();
                let b_val = self.nodes[*b].value.clone();
                // out = A . B^T ; dA = g . B ; dB = g^T . A
                self.add_grad(grads, *a, |ga| {
                    matmul_nn_acc(g, &b_val, m, n, k, ga);
                });
                self.add_grad(grads, *b, |gb| {
                    matmul_tn_acc(g, &a_val, m, n, k, gb);
                });
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let p = self.nodes[id].value.clone();
                self.add_grad(grads, *a, |ga| {
                    for r in 0..rows {
                        let row_p = &p[r * cols..(r + 1) * cols];
                        let row_g = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = row_p.iter().zip(row_g).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += row_p[c] * (row_g[c] - dot);
                        }
                    }
                });
            }
            Op::LogClamped(a, eps) => {
                let eps = *eps;
                let x = self.nodes[*a].value.clone();
                self.add_grad(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if x[i] > eps {
                            ga[i] += g[i] / x[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.nodes[*a].value.clone();
                self.add_grad(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_bwd(x[i]);
                    }
                });
            }
            Op::Normalize(a, eps) => {
                let (rows, cols) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let x = self.nodes[*a].value.clone();
                let eps = *eps;
                self.add_grad(grads, *a, |ga| {
                    for r in 0..rows {
                        let src = &x[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean = src.iter().sum::<f64>() / cols as f64;
                        let var =
                            src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = src.iter().map(|v| (v - mean) * inv).collect();
                        let g_mean = gr.iter().sum::<f64>() / cols as f64;
                        let gx_mean =
                            gr.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            ga[r * cols + c] += inv * (gr[c] - g_mean - xhat[c] * gx_mean);
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = self.nodes[*a].value.len();
                self.add_grad(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(&g[..split]) {
                        *x += y;
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(&g[split..]) {
                        *x += y;
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let cols = self.nodes[*a].shape[1];
                let offset = start * cols;
                self.add_grad(grads, *a, |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[offset + i] += y;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let cols = self.nodes[*a].shape[1];
                let rows = self.nodes[*a].shape[0];
                let len = self.nodes[id].shape[1];
                let start = *start;
                self.add_grad(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..len {
                            ga[r * cols + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[id].shape[0];
                let total = self.nodes[id].shape[1];
                let mut offset = 0usize;
                for &p in parts {
                    let pc = self.nodes[p].shape[1];
                    let off = offset;
                    self.add_grad(grads, p, |gp| {
                        for r in 0..rows {
                            for c in 0..pc {
                                gp[r * pc + c] += g[r * total + off + c];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::Reshape(a) => {
                self.add_grad(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Transpose2d(a) => {
                let (rows, cols) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                self.add_grad(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                self.add_grad(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::RotatePairs { x, cos, sin } => {
                let cos = cos.clone();
                let sin = sin.clone();
                self.add_grad(grads, *x, |gx| {
                    for i in 0..gx.len() / 2 {
                        let (g0, g1) = (g[2 * i], g[2 * i + 1]);
                        gx[2 * i] += g0 * cos[i] + g1 * sin[i];
                        gx[2 * i + 1] += -g0 * sin[i] + g1 * cos[i];
                    }
                });
            }
            Op::Conv2dSingle { x, kernel, stride_t } => {
                let (t_in, f_in) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let (kh, kw) = (self.nodes[*kernel].shape[0], self.nodes[*kernel].shape[1]);
                let (t_out, f_out) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let xv = self.nodes[*x].value.clone();
                let kv = self.nodes[*kernel].value.clone();
                let stride_t = *stride_t;
                self.add_grad(grads, *x, |gx| {
                    for to in 0..t_out {
                        for fo in 0..f_out {
                            let go = g[to * f_out + fo];
                            for dy in 0..kh {
                                let ti = (to * stride_t + dy) as isize - 1;
                                if ti < 0 || ti as usize >= t_in {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let fi = (fo + dx) as isize - 1;
                                    if fi < 0 || fi as usize >= f_in {
                                        continue;
                                    }
                                    gx[ti as usize * f_in + fi as usize] += go * kv[dy * kw + dx];
                                }
                            }
                        }
                    }
                });
                self.add_grad(grads, *kernel, |gk| {
                    for to in 0..t_out {
                        for fo in 0..f_out {
                            let go = g[to * f_out + fo];
                            for dy in 0..kh {
                                let ti = (to * stride_t + dy) as isize - 1;
                                if ti < 0 || ti as usize >= t_in {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let fi = (fo + dx) as isize - 1;
                                    if fi < 0 || fi as usize >= f_in {
                                        continue;
                                    }
                                    gk[dy * kw + dx] += go * xv[ti as usize * f_in + fi as usize];
                                }
                            }
                        }
                    }
                });
            }
            Op::ForwardDiffL1 { x, dims } => {
                let v = self.nodes[*x].value.clone();
                let dims = *dims;
                self.add_grad(grads, *x, |gx| {
                    for_each_forward_diff(dims, |cur, nxt| {
                        let d = v[nxt] - v[cur];
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[nxt] += g[0] * s;
                        gx[cur] -= g[0] * s;
                    });
                });
            }
            Op::LayerVarSum { x, dims } => {
                let [l, n, t, h, w] = *dims;
                let pos = n * t * h * w;
                let v = self.nodes[*x].value.clone();
                self.add_grad(grads, *x, |gx| {
                    for p in 0..pos {
                        let mut mean = 0.0;
                        for li in 0..l {
                            mean += v[li * pos + p];
                        }
                        mean /= l as f64;
                        for li in 0..l {
                            gx[li * pos + p] += g[0] * 2.0 * (v[li * pos + p] - mean) / l as f64;
                        }
                    }
                });
            }
        }
    }
}

fn for_each_forward_diff(dims: [usize; 5], mut f: impl FnMut(usize, usize)) {
    let [l, n, t, h, w] = dims;
    let idx = |li: usize, ni: usize, ti: usize, hi: usize, wi: usize| {
        (((li * n + ni) * t + ti) * h + hi) * w + wi
    };
    for li in 0..l {
        for ni in 0..n {
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        let cur = idx(li, ni, ti, hi, wi);
                        if ti + 1 < t {
                            f(cur, idx(li, ni, ti + 1, hi, wi));
                        }
                        if hi + 1 < h {
                            f(cur, idx(li, ni, ti, hi + 1, wi));
                        }
                        if wi + 1 < w {
                            f(cur, idx(li, ni, ti, hi, wi + 1));
                        }
                    }
                }
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `a [m,k] . b [k,n]`.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0f64; m * n];
    matmul_nn_acc(a, b, m, k, n, &mut out);
    out
}

fn matmul_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
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
}

/// `a [m,k] . b^T` where `b` is `[n,k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0f64; m * n];
    matmul_nt_acc(a, b, m, k, n, &mut out);
    out
}

fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// `a^T . b` where `a` is `[m,k]` and `b` is `[m,n]`, producing `[k,n]`.
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `point` for the given
/// coordinate indices. Used by gradient-check tests throughout the crate.
pub fn finite_diff<F>(mut f: F, point: &[f64], coords: &[usize], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut perturbed = point.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        perturbed[i] = point[i] + eps;
        let plus = f(&perturbed);
        perturbed[i] = point[i] - eps;
        let minus = f(&perturbed);
        perturbed[i] = point[i];
        out.push((plus - minus) / (2.0 * eps));
    }
    out
}

/// Relative error between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}
