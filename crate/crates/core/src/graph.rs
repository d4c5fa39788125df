//! Reverse-mode autodiff over a dynamic tape of matrix ops.
//!
//! A `Graph` is rebuilt per forward pass. Leaves are either constants or
//! references into a `ParamStore`; `backward` accumulates parameter
//! gradients into a `GradStore`. Ops are deliberately few; encoders and
//! losses are composed from them so each backward rule stays small and
//! independently finite-difference checked.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    Add,
    Sub,
    Mul,
    AddRowBroadcast,
    Scale(f64),
    AddConst,
    MatMul,
    Transpose,
    SoftmaxRows,
    LogSoftmaxRows,
    LayerNorm { eps: f64 },
    QuickGelu,
    Relu,
    SqrtEps(f64),
    SliceRows { start: usize },
    SliceCols { start: usize },
    ConcatRows,
    ConcatCols,
    GatherRows(Vec<usize>),
    GatherElems(Vec<(usize, usize)>),
    MeanRows,
    SumAll,
    MeanAll,
    LogSumExpAll,
    L2NormalizeRows { eps: f64 },
    Im2col(Im2colSpec),
}

/// Spatial layout for conv lowering. The input matrix is (h*w) rows of
/// `channels` columns; output rows enumerate the output grid, columns the
/// k*k*channels receptive field (zero padded).
#[derive(Debug, Clone, Copy)]
pub struct Im2colSpec {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Im2colSpec {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    frozen: Vec<ParamId>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), frozen: Vec::new() }
    }

    /// Parameters listed here enter the tape as constants: no gradient is
    /// ever accumulated for them, which is how the stage freeze contracts
    /// are enforced structurally rather than by optimizer convention.
    pub fn freeze(&mut self, ids: &[ParamId]) {
        self.frozen.extend_from_slice(ids);
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const, vec![], t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        if self.frozen.contains(&id) {
            self.push(Op::Const, vec![], value)
        } else {
            self.push(Op::Param(id), vec![], value)
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.add_assign(&self.nodes[b.0].value);
        self.push(Op::Add, vec![a.0, b.0], out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let bv = &self.nodes[b.0].value;
        let av = &self.nodes[a.0].value;
        assert!(av.same_shape(bv), "sub shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Sub, vec![a.0, b.0], out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let bv = &self.nodes[b.0].value;
        let av = &self.nodes[a.0].value;
        assert!(av.same_shape(bv), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Mul, vec![a.0, b.0], out)
    }

    /// matrix (R×C) + row vector (1×C), broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let bv = self.nodes[b.0].value.clone();
        let av = &self.nodes[a.0].value;
        assert_eq!(bv.rows, 1);
        assert_eq!(bv.cols, av.cols, "broadcast width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                *out.at_mut(r, c) += bv.data[c];
            }
        }
        self.push(Op::AddRowBroadcast, vec![a.0, b.0], out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * c);
        self.push(Op::Scale(c), vec![a.0], out)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v + c);
        self.push(Op::AddConst, vec![a.0], out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(Op::MatMul, vec![a.0, b.0], out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.transpose();
        self.push(Op::Transpose, vec![a.0], out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut out = x.clone();
        for r in 0..out.rows {
            softmax_row_inplace(&mut out.data[r * out.cols..(r + 1) * out.cols]);
        }
        self.push(Op::SoftmaxRows, vec![a.0], out)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut out = x.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows, vec![a.0], out)
    }

    /// Per-row layer norm with affine parameters (`gamma`, `beta` are 1×C).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = 1e-5;
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        assert_eq!(g.cols, xv.cols);
        assert_eq!(b.cols, xv.cols);
        let mut out = xv.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sigma = math::sqrt(var + eps);
            for (c, v) in row.iter_mut().enumerate() {
                *v = g.data[c] * (*v - mean) / sigma + b.data[c];
            }
        }
        self.push(Op::LayerNorm { eps }, vec![x.0, gamma.0, beta.0], out)
    }

    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * math::sigmoid(1.702 * v));
        self.push(Op::QuickGelu, vec![a.0], out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu, vec![a.0], out)
    }

    /// Elementwise sqrt(x + eps); the eps keeps the derivative finite at 0.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| math::sqrt(v + eps));
        self.push(Op::SqrtEps(eps), vec![a.0], out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = &self.nodes[a.0].value;
        assert!(start < end && end <= x.rows);
        let data = x.data[start * x.cols..end * x.cols].to_vec();
        let out = Tensor::from_vec(end - start, x.cols, data);
        self.push(Op::SliceRows { start }, vec![a.0], out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = &self.nodes[a.0].value;
        assert!(start < end && end <= x.cols);
        let mut out = Tensor::zeros(x.rows, end - start);
        for r in 0..x.rows {
            for c in start..end {
                *out.at_mut(r, c - start) = x.at(r, c);
            }
        }
        self.push(Op::SliceCols { start }, vec![a.0], out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols, cols, "concat_rows width mismatch");
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(Op::ConcatRows, parts.iter().map(|p| p.0).collect(), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows;
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                for c in 0..t.cols {
                    *out.at_mut(r, offset + c) = t.at(r, c);
                }
            }
            offset += t.cols;
        }
        self.push(Op::ConcatCols, parts.iter().map(|p| p.0).collect(), out)
    }

    /// Row lookup with duplicate indices allowed; backward scatter-adds,
    /// which is what makes embedding tables and the token bank trainable.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(indices.len() * x.cols);
        for &i in indices {
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::from_vec(indices.len(), x.cols, data);
        self.push(Op::GatherRows(indices.to_vec()), vec![a.0], out)
    }

    /// Arbitrary element lookup, returned as an n×1 column.
    pub fn gather_elems(&mut self, a: Var, indices: &[(usize, usize)]) -> Var {
        let x = &self.nodes[a.0].value;
        let data = indices.iter().map(|&(r, c)| x.at(r, c)).collect();
        let out = Tensor::from_vec(indices.len(), 1, data);
        self.push(Op::GatherElems(indices.to_vec()), vec![a.0], out)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(1, x.cols);
        for r in 0..x.rows {
            for c in 0..x.cols {
                out.data[c] += x.at(r, c);
            }
        }
        for v in &mut out.data {
            *v /= x.rows as f64;
        }
        self.push(Op::MeanRows, vec![a.0], out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Op::SumAll, vec![a.0], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let s = x.data.iter().sum::<f64>() / x.len() as f64;
        self.push(Op::MeanAll, vec![a.0], Tensor::scalar(s))
    }

    /// log Σ exp over every element, numerically stabilized.
    pub fn log_sum_exp_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let out = Tensor::scalar(log_sum_exp(&x.data));
        self.push(Op::LogSumExpAll, vec![a.0], out)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let eps = 1e-12;
        let x = &self.nodes[a.0].value;
        let mut out = x.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let n = math::sqrt(row.iter().map(|v| v * v).sum::<f64>() + eps);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        self.push(Op::L2NormalizeRows { eps }, vec![a.0], out)
    }

    pub fn im2col(&mut self, a: Var, spec: Im2colSpec) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.rows, spec.h * spec.w);
        assert_eq!(x.cols, spec.channels);
        let (oh, ow) = (spec.out_h(), spec.out_w());
        let mut out = Tensor::zeros(oh * ow, spec.kernel * spec.kernel * spec.channels);
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = oy * ow + ox;
                let mut col = 0;
                for ky in 0..spec.kernel {
                    for kx in 0..spec.kernel {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < spec.h
                            && (ix as usize) < spec.w;
                        for ch in 0..spec.channels {
                            if inside {
                                let irow = iy as usize * spec.w + ix as usize;
                                *out.at_mut(orow, col) = x.at(irow, ch);
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
        self.push(Op::Im2col(spec), vec![a.0], out)
    }

    /// Backprop from `loss` (must be 1×1), accumulating parameter
    /// gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut GradStore) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Add => {
                    accumulate(&mut adj, node.inputs[0], g.clone());
                    accumulate(&mut adj, node.inputs[1], g);
                }
                Op::Sub => {
                    accumulate(&mut adj, node.inputs[0], g.clone());
                    accumulate(&mut adj, node.inputs[1], g.map(|v| -v));
                }
                Op::Mul => {
                    let a = &self.nodes[node.inputs[0]].value;
                    let b = &self.nodes[node.inputs[1]].value;
                    let da = elementwise(&g, b, |x, y| x * y);
                    let db = elementwise(&g, a, |x, y| x * y);
                    accumulate(&mut adj, node.inputs[0], da);
                    accumulate(&mut adj, node.inputs[1], db);
                }
                Op::AddRowBroadcast => {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            db.data[c] += g.at(r, c);
                        }
                    }
                    accumulate(&mut adj, node.inputs[0], g);
                    accumulate(&mut adj, node.inputs[1], db);
                }
                Op::Scale(c) => {
                    let c = *c;
                    accumulate(&mut adj, node.inputs[0], g.map(|v| v * c));
                }
                Op::AddConst => accumulate(&mut adj, node.inputs[0], g),
                Op::MatMul => {
                    let a = &self.nodes[node.inputs[0]].value;
                    let b = &self.nodes[node.inputs[1]].value;
                    let da = g.matmul(&b.transpose());
                    let db = a.transpose().matmul(&g);
                    accumulate(&mut adj, node.inputs[0], da);
                    accumulate(&mut adj, node.inputs[1], db);
                }
                Op::Transpose => accumulate(&mut adj, node.inputs[0], g.transpose()),
                Op::SoftmaxRows => {
                    let y = &node.value;
                    let mut dx = y.clone();
                    for r in 0..y.rows {
                        let dot: f64 =
                            (0..y.cols).map(|c| g.at(r, c) * y.at(r, c)).sum();
                        for c in 0..y.cols {
                            *dx.at_mut(r, c) = y.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::LogSoftmaxRows => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for r in 0..y.rows {
                        let gsum: f64 = (0..y.cols).map(|c| g.at(r, c)).sum();
                        for c in 0..y.cols {
                            *dx.at_mut(r, c) -= math::exp(y.at(r, c)) * gsum;
                        }
                    }
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::LayerNorm { eps } => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let gamma = &self.nodes[node.inputs[1]].value;
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    let mut dgamma = Tensor::zeros(1, x.cols);
                    let mut dbeta = Tensor::zeros(1, x.cols);
                    let n = x.cols as f64;
                    for r in 0..x.rows {
                        let row = x.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let sigma = math::sqrt(var + eps);
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / sigma).collect();
                        let dxhat: Vec<f64> = (0..x.cols)
                            .map(|c| g.at(r, c) * gamma.data[c])
                            .collect();
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..x.cols {
                            *dx.at_mut(r, c) = (dxhat[c] - m1 - xhat[c] * m2) / sigma;
                            dgamma.data[c] += g.at(r, c) * xhat[c];
                            dbeta.data[c] += g.at(r, c);
                        }
                    }
                    accumulate(&mut adj, node.inputs[0], dx);
                    accumulate(&mut adj, node.inputs[1], dgamma);
                    accumulate(&mut adj, node.inputs[2], dbeta);
                }
                Op::QuickGelu => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let dx = elementwise(&g, x, |gi, xi| {
                        let s = math::sigmoid(1.702 * xi);
                        gi * (s + xi * 1.702 * s * (1.0 - s))
                    });
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let dx = elementwise(&g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::SqrtEps(eps) => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let eps = *eps;
                    let dx =
                        elementwise(&g, x, |gi, xi| gi * 0.5 / math::sqrt(xi + eps));
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::SliceRows { start } => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            *dx.at_mut(start + r, c) = g.at(r, c);
                        }
                    }
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::SliceCols { start } => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            *dx.at_mut(r, start + c) = g.at(r, c);
                        }
                    }
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::ConcatRows => {
                    let mut offset = 0;
                    for &inp in &node.inputs {
                        let t = &self.nodes[inp].value;
                        let mut dt = Tensor::zeros(t.rows, t.cols);
                        dt.data
                            .copy_from_slice(&g.data[offset * g.cols..(offset + t.rows) * g.cols]);
                        offset += t.rows;
                        accumulate(&mut adj, inp, dt);
                    }
                }
                Op::ConcatCols => {
                    let mut offset = 0;
                    for &inp in &node.inputs {
                        let t = &self.nodes[inp].value;
                        let mut dt = Tensor::zeros(t.rows, t.cols);
                        for r in 0..t.rows {
                            for c in 0..t.cols {
                                *dt.at_mut(r, c) = g.at(r, offset + c);
                            }
                        }
                        offset += t.cols;
                        accumulate(&mut adj, inp, dt);
                    }
                }
                Op::GatherRows(indices) => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..x.cols {
                            *dx.at_mut(i, c) += g.at(r, c);
                        }
                    }
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::GatherElems(indices) => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    for (k, &(r, c)) in indices.iter().enumerate() {
                        *dx.at_mut(r, c) += g.data[k];
                    }
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::MeanRows => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let inv = 1.0 / x.rows as f64;
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            *dx.at_mut(r, c) = g.data[c] * inv;
                        }
                    }
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::SumAll => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let gv = g.item();
                    accumulate(&mut adj, node.inputs[0], x.map(|_| gv));
                }
                Op::MeanAll => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let gv = g.item() / x.len() as f64;
                    accumulate(&mut adj, node.inputs[0], x.map(|_| gv));
                }
                Op::LogSumExpAll => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let lse = node.value.item();
                    let gv = g.item();
                    let dx = x.map(|v| gv * math::exp(v - lse));
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::L2NormalizeRows { eps } => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let y = &node.value;
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let n = math::sqrt(
                            x.row(r).iter().map(|v| v * v).sum::<f64>() + eps,
                        );
                        let dot: f64 =
                            (0..x.cols).map(|c| g.at(r, c) * y.at(r, c)).sum();
                        for c in 0..x.cols {
                            *dx.at_mut(r, c) = (g.at(r, c) - dot * y.at(r, c)) / n;
                        }
                    }
                    accumulate(&mut adj, node.inputs[0], dx);
                }
                Op::Im2col(spec) => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    let (oh, ow) = (spec.out_h(), spec.out_w());
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let orow = oy * ow + ox;
                            let mut col = 0;
                            for ky in 0..spec.kernel {
                                for kx in 0..spec.kernel {
                                    let iy = (oy * spec.stride + ky) as isize
                                        - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize
                                        - spec.pad as isize;
                                    let inside = iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < spec.h
                                        && (ix as usize) < spec.w;
                                    for ch in 0..spec.channels {
                                        if inside {
                                            let irow = iy as usize * spec.w + ix as usize;
                                            *dx.at_mut(irow, ch) += g.at(orow, col);
                                        }
                                        col += 1;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, node.inputs[0], dx);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut adj[idx] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert!(a.same_shape(b));
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + math::ln(xs.iter().map(|&v| math::exp(v - m)).sum())
}

fn softmax_row_inplace(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - m);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
