use std::collections::BTreeMap;

use super::store::ParameterStore;
use super::tensor::{
    matmul_nt_raw, matmul_raw, matmul_tn_raw, sigmoid, sign0, softplus, Real, Tensor,
};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Swish(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Abs(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        width: usize,
    },
    Depthwise {
        x: Var,
        k: Var,
        width: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ColumnAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ExclusiveCumsum(Var),
    FrameOffset {
        v: Var,
        negate: bool,
    },
    CellFeatures {
        s: Var,
        e: Var,
        feats: Var,
    },
    WeightedContext {
        w: Var,
        c: Var,
    },
    ScalarWithGrad {
        x: Var,
        grad: Tensor<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Topologically ordered record of a forward computation.
///
/// Nodes are appended as operations are applied, so inputs always precede
/// their consumers and [`Graph::backward`] is a single reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

/// Adjoints of every node reached from a scalar root.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    adj: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// View a tensor as `[outer, n, inner]` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a rank-0 (or single-element) node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Constant input; receives an adjoint but is not a parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t)
    }

    /// Leaf bound to a named entry of `store`. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(Op::Param, value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters touched by this graph, ordered by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let out = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMulNT(a, b), Tensor::new(vec![m, n], out)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// `x[r×c] + b[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2("add_row_bias")?;
        if self.value(b).len() != c {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for {c} columns", self.value(b).shape()),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o = *o + bv;
            }
        }
        Ok(self.push(Op::AddRowBias(x, b), out))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, s), out)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(Op::AddScalar(x), out)
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(Op::Swish(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(Op::Softplus(x), out)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(Op::Exp(x), out)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(Op::Abs(x), out)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} for rank {}",
                xv.rank()
            )));
        }
        if !xv.is_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let out = softmax_along(xv, axis);
        Ok(self.push(Op::Softmax { x, axis }, out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, ca) = self.value(a).dims2("concat_cols")?;
        let (r2, cb) = self.value(b).dims2("concat_cols")?;
        if r != r2 {
            return Err(Error::shape("concat_cols", format!("{r} vs {r2} rows")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        Ok(self.push(Op::ConcatCols(a, b), Tensor::new(vec![r, ca + cb], out)?))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..end]);
        }
        Ok(self.push(
            Op::SliceCols { x, start },
            Tensor::new(vec![r, end - start], out)?,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, m) = self.value(table).dims2("gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "id {bad} out of range for table of {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * m);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), m], out)?,
        ))
    }

    /// Same-length 1-D convolution along rows: `x[K×Din]`, `w[width×Din×Dout]`, `b[Dout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (k, din) = self.value(x).dims2("conv1d")?;
        let (width, wdin, dout) = match self.value(w).shape()[..] {
            [a, b, c] => (a, b, c),
            ref s => return Err(Error::shape("conv1d", format!("kernel shape {s:?}"))),
        };
        if width % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv1d kernel width must be odd, got {width}"
            )));
        }
        if wdin != din || self.value(b).len() != dout {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {k}x{din}, kernel {width}x{wdin}x{dout}, bias {:?}",
                    self.value(b).shape()
                ),
            ));
        }
        let half = width / 2;
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = Vec::with_capacity(k * dout);
        for _ in 0..k {
            out.extend_from_slice(bv);
        }
        for j in 0..width {
            let (lo, hi) = tap_rows(k, j, half);
            if lo >= hi {
                continue;
            }
            let src = (lo + j) - half;
            let part = matmul_raw(
                &xv[src * din..(src + hi - lo) * din],
                &wv[j * din * dout..(j + 1) * din * dout],
                hi - lo,
                din,
                dout,
            );
            for (o, p) in out[lo * dout..hi * dout].iter_mut().zip(part) {
                *o = *o + p;
            }
        }
        Ok(self.push(
            Op::Conv1d { x, w, b, width },
            Tensor::new(vec![k, dout], out)?,
        ))
    }

    /// Per-channel convolution: `x[T×C]`, `k[width×C]`, zero padded.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, c) = self.value(x).dims2("depthwise_conv")?;
        let (width, kc) = self.value(kernel).dims2("depthwise_conv")?;
        if width % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "depthwise kernel width must be odd, got {width}"
            )));
        }
        if kc != c {
            return Err(Error::shape(
                "depthwise_conv",
                format!("{c} channels vs kernel {kc}"),
            ));
        }
        let half = width / 2;
        let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![T::zero(); t * c];
        for j in 0..width {
            let (lo, hi) = tap_rows(t, j, half);
            for r in lo..hi {
                let src = r + j - half;
                for ch in 0..c {
                    out[r * c + ch] = out[r * c + ch] + xv[src * c + ch] * kv[j * c + ch];
                }
            }
        }
        Ok(self.push(
            Op::Depthwise {
                x,
                k: kernel,
                width,
            },
            Tensor::new(vec![t, c], out)?,
        ))
    }

    /// Batch normalization over rows with batch statistics (biased variance).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (r, c) = self.value(x).dims2("batch_norm")?;
        self.check_affine("batch_norm", gamma, beta, c)?;
        let xv = self.value(x).data();
        let rn = T::of(r as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / rn);
        for row in xv.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s / rn);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let out = self.affine_out(&xhat, r, c, gamma, beta)?;
        let node = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        );
        Ok((node, BatchStats { mean, var }))
    }

    /// Normalization with fixed per-column statistics (batch norm at inference).
    pub fn column_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (r, c) = self.value(x).dims2("column_affine")?;
        self.check_affine("column_affine", gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("column_affine", "statistics length"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let out = self.affine_out(&xhat, r, c, gamma, beta)?;
        Ok(self.push(
            Op::ColumnAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            out,
        ))
    }

    /// Per-row normalization across columns.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (r, c) = self.value(x).dims2("layer_norm")?;
        self.check_affine("layer_norm", gamma, beta, c)?;
        let cn = T::of(c as f64);
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in self.value(x).data().chunks(c) {
            let m = row.iter().copied().sum::<T>() / cn;
            let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / cn;
            let is = T::one() / (v + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&a| (a - m) * is));
        }
        let out = self.affine_out(&xhat, r, c, gamma, beta)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                op,
                format!("scale/shift length vs {c} columns"),
            ));
        }
        Ok(())
    }

    fn affine_out(
        &self,
        xhat: &[T],
        r: usize,
        c: usize,
        gamma: Var,
        beta: Var,
    ) -> Result<Tensor<T>> {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % c] + b[i % c])
            .collect();
        Tensor::new(vec![r, c], out)
    }

    /// `s_k = Σ_{i<k} v_i` for a vector `v`.
    pub fn exclusive_cumsum(&mut self, v: Var) -> Result<Var> {
        let vv = self.value(v);
        if vv.rank() != 1 {
            return Err(Error::shape(
                "exclusive_cumsum",
                format!("{:?}", vv.shape()),
            ));
        }
        let mut acc = T::zero();
        let out: Vec<T> = vv
            .data()
            .iter()
            .map(|&x| {
                let s = acc;
                acc = acc + x;
                s
            })
            .collect();
        let n = out.len();
        Ok(self.push(Op::ExclusiveCumsum(v), Tensor::new(vec![n], out)?))
    }

    /// `out[t,k] = t − v_k` (or `v_k − t` when `negate`) for `t ∈ 0..frames`.
    pub fn frame_offset(&mut self, v: Var, frames: usize, negate: bool) -> Result<Var> {
        let vv = self.value(v);
        if vv.rank() != 1 {
            return Err(Error::shape("frame_offset", format!("{:?}", vv.shape())));
        }
        let k = vv.len();
        let mut out = Vec::with_capacity(frames * k);
        for t in 0..frames {
            let tf = T::of(t as f64);
            out.extend(
                vv.data()
                    .iter()
                    .map(|&x| if negate { x - tf } else { tf - x }),
            );
        }
        Ok(self.push(
            Op::FrameOffset { v, negate },
            Tensor::new(vec![frames, k], out)?,
        ))
    }

    /// Per-cell MLP input: row `t·K + k` is `[S_tk, E_tk, feats_k…]`.
    pub fn cell_features(&mut self, s: Var, e: Var, feats: Var) -> Result<Var> {
        let (t, k) = self.value(s).dims2("cell_features")?;
        same_shape("cell_features", self.value(s), self.value(e))?;
        let (k2, d) = self.value(feats).dims2("cell_features")?;
        if k != k2 {
            return Err(Error::shape(
                "cell_features",
                format!("{k} tokens vs {k2} feature rows"),
            ));
        }
        let (sv, ev, fv) = (self.value(s), self.value(e), self.value(feats));
        let mut out = Vec::with_capacity(t * k * (d + 2));
        for ti in 0..t {
            for ki in 0..k {
                out.push(sv.at2(ti, ki));
                out.push(ev.at2(ti, ki));
                out.extend_from_slice(fv.row(ki));
            }
        }
        Ok(self.push(
            Op::CellFeatures { s, e, feats },
            Tensor::new(vec![t * k, d + 2], out)?,
        ))
    }

    /// `einsum('tk,tkp->tp')` with `c` stored as `[(T·K)×P]`.
    pub fn weighted_context(&mut self, w: Var, c: Var) -> Result<Var> {
        let (t, k) = self.value(w).dims2("weighted_context")?;
        let (rows, p) = self.value(c).dims2("weighted_context")?;
        if rows != t * k {
            return Err(Error::shape(
                "weighted_context",
                format!("context rows {rows} vs {t}x{k} attention"),
            ));
        }
        let (wv, cv) = (self.value(w), self.value(c));
        let mut out = vec![T::zero(); t * p];
        for ti in 0..t {
            for ki in 0..k {
                let wt = wv.at2(ti, ki);
                for (pi, &cval) in cv.row(ti * k + ki).iter().enumerate() {
                    out[ti * p + pi] = out[ti * p + pi] + wt * cval;
                }
            }
        }
        Ok(self.push(Op::WeightedContext { w, c }, Tensor::new(vec![t, p], out)?))
    }

    /// Scalar node whose value and gradient wrt `x` were computed externally.
    pub fn scalar_with_grad(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        same_shape("scalar_with_grad", self.value(x), &grad)?;
        Ok(self.push(Op::ScalarWithGrad { x, grad }, Tensor::scalar(value)))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }

    /// Gradients of every parameter reached by `grads`, ordered by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = y.shape()[1];
                let da = matmul_nt_raw(g.data(), self.value(*b).data(), m, n, k);
                let db = matmul_tn_raw(self.value(*a).data(), g.data(), m, k, n);
                acc(adj, *a, Tensor::new(vec![m, k], da)?);
                acc(adj, *b, Tensor::new(vec![k, n], db)?);
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul_nt")?;
                let n = y.shape()[1];
                let da = matmul_raw(g.data(), self.value(*b).data(), m, n, k);
                let db = matmul_tn_raw(g.data(), self.value(*a).data(), m, n, k);
                acc(adj, *a, Tensor::new(vec![m, k], da)?);
                acc(adj, *b, Tensor::new(vec![n, k], db)?);
            }
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(adj, *a, g.zip_map(self.value(*b), |u, v| u * v));
                acc(adj, *b, g.zip_map(self.value(*a), |u, v| u * v));
            }
            Op::AddRowBias(x, b) => {
                let c = y.shape()[1];
                let mut db = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                acc(adj, *x, g.clone());
                let bshape = self.value(*b).shape().to_vec();
                acc(adj, *b, Tensor::new(bshape, db)?);
            }
            Op::Scale(x, s) => acc(adj, *x, g.map(|v| v * *s)),
            Op::AddScalar(x) => acc(adj, *x, g.clone()),
            Op::Swish(x) => {
                let d = g.zip_map(self.value(*x), |u, v| {
                    let s = sigmoid(v);
                    u * (s + v * s * (T::one() - s))
                });
                acc(adj, *x, d);
            }
            Op::Sigmoid(x) => acc(adj, *x, g.zip_map(y, |u, s| u * s * (T::one() - s))),
            Op::Softplus(x) => acc(adj, *x, g.zip_map(self.value(*x), |u, v| u * sigmoid(v))),
            Op::Exp(x) => acc(adj, *x, g.zip_map(y, |u, e| u * e)),
            Op::Abs(x) => acc(adj, *x, g.zip_map(self.value(*x), |u, v| u * sign0(v))),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let (yv, gv) = (y.data(), g.data());
                let mut d = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for q in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + q;
                        let dot: T = (0..n).map(|j| yv[idx(j)] * gv[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = yv[idx(j)] * (gv[idx(j)] - dot);
                        }
                    }
                }
                acc(adj, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                acc(adj, *x, Tensor::full(self.value(*x).shape().to_vec(), s));
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.value(*a).dims2("concat_cols")?;
                let cb = self.value(*b).shape()[1];
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(adj, *a, Tensor::new(vec![r, ca], da)?);
                acc(adj, *b, Tensor::new(vec![r, cb], db)?);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2("slice_cols")?;
                let w = y.shape()[1];
                let mut d = vec![T::zero(); r * c];
                for (ri, row) in g.data().chunks(w).enumerate() {
                    d[ri * c + start..ri * c + start + w].copy_from_slice(row);
                }
                acc(adj, *x, Tensor::new(vec![r, c], d)?);
            }
            Op::Reshape(x) => {
                acc(adj, *x, g.clone().reshape(self.value(*x).shape().to_vec())?);
            }
            Op::Gather { table, ids } => {
                let tshape = self.value(*table).shape().to_vec();
                let m = tshape[1];
                let mut d = vec![T::zero(); tshape[0] * m];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..m {
                        d[id * m + j] = d[id * m + j] + g.data()[r * m + j];
                    }
                }
                acc(adj, *table, Tensor::new(tshape, d)?);
            }
            Op::Conv1d { x, w, b, width } => {
                let (k, din) = self.value(*x).dims2("conv1d")?;
                let dout = y.shape()[1];
                let half = width / 2;
                let (xv, wv, gv) = (self.value(*x).data(), self.value(*w).data(), g.data());
                let mut dx = vec![T::zero(); k * din];
                let mut dw = vec![T::zero(); width * din * dout];
                for j in 0..*width {
                    let (lo, hi) = tap_rows(k, j, half);
                    if lo >= hi {
                        continue;
                    }
                    let src = lo + j - half;
                    let rows = hi - lo;
                    let gslice = &gv[lo * dout..hi * dout];
                    let wj = &wv[j * din * dout..(j + 1) * din * dout];
                    let dxj = matmul_nt_raw(gslice, wj, rows, dout, din);
                    for (d, v) in dx[src * din..(src + rows) * din].iter_mut().zip(dxj) {
                        *d = *d + v;
                    }
                    let dwj =
                        matmul_tn_raw(&xv[src * din..(src + rows) * din], gslice, rows, din, dout);
                    for (d, v) in dw[j * din * dout..(j + 1) * din * dout].iter_mut().zip(dwj) {
                        *d = *d + v;
                    }
                }
                let mut db = vec![T::zero(); dout];
                for row in gv.chunks(dout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                acc(adj, *x, Tensor::new(vec![k, din], dx)?);
                acc(adj, *w, Tensor::new(vec![*width, din, dout], dw)?);
                let bshape = self.value(*b).shape().to_vec();
                acc(adj, *b, Tensor::new(bshape, db)?);
            }
            Op::Depthwise { x, k, width } => {
                let (t, c) = self.value(*x).dims2("depthwise_conv")?;
                let half = width / 2;
                let (xv, kv, gv) = (self.value(*x).data(), self.value(*k).data(), g.data());
                let mut dx = vec![T::zero(); t * c];
                let mut dk = vec![T::zero(); width * c];
                for j in 0..*width {
                    let (lo, hi) = tap_rows(t, j, half);
                    for r in lo..hi {
                        let src = r + j - half;
                        for ch in 0..c {
                            let gg = gv[r * c + ch];
                            dx[src * c + ch] = dx[src * c + ch] + gg * kv[j * c + ch];
                            dk[j * c + ch] = dk[j * c + ch] + gg * xv[src * c + ch];
                        }
                    }
                }
                acc(adj, *x, Tensor::new(vec![t, c], dx)?);
                acc(adj, *k, Tensor::new(vec![*width, c], dk)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = y.dims2("batch_norm")?;
                let gam = self.value(*gamma).data();
                let (dgam, dbet) = affine_param_grads(g.data(), xhat, c);
                let rn = T::of(r as f64);
                let mut sum_d = vec![T::zero(); c];
                let mut sum_dx = vec![T::zero(); c];
                for (idx, &gv) in g.data().iter().enumerate() {
                    let col = idx % c;
                    let dxh = gv * gam[col];
                    sum_d[col] = sum_d[col] + dxh;
                    sum_dx[col] = sum_dx[col] + dxh * xhat[idx];
                }
                let dx: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, &gv)| {
                        let col = idx % c;
                        let dxh = gv * gam[col];
                        inv_std[col] / rn * (rn * dxh - sum_d[col] - xhat[idx] * sum_dx[col])
                    })
                    .collect();
                acc(adj, *x, Tensor::new(vec![r, c], dx)?);
                self.acc_affine(adj, *gamma, *beta, dgam, dbet)?;
            }
            Op::ColumnAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (r, c) = y.dims2("column_affine")?;
                let gam = self.value(*gamma).data();
                let xv = self.value(*x).data();
                let xhat: Vec<T> = xv
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c])
                    .collect();
                let (dgam, dbet) = affine_param_grads(g.data(), &xhat, c);
                let dx: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * gam[i % c] * inv_std[i % c])
                    .collect();
                acc(adj, *x, Tensor::new(vec![r, c], dx)?);
                self.acc_affine(adj, *gamma, *beta, dgam, dbet)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = y.dims2("layer_norm")?;
                let gam = self.value(*gamma).data();
                let (dgam, dbet) = affine_param_grads(g.data(), xhat, c);
                let cn = T::of(c as f64);
                let mut dx = Vec::with_capacity(r * c);
                for (ri, grow) in g.data().chunks(c).enumerate() {
                    let xh = &xhat[ri * c..(ri + 1) * c];
                    let dxh: Vec<T> = grow.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                    let s1: T = dxh.iter().copied().sum();
                    let s2: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    dx.extend(
                        dxh.iter()
                            .zip(xh)
                            .map(|(&d, &h)| inv_std[ri] / cn * (cn * d - s1 - h * s2)),
                    );
                }
                acc(adj, *x, Tensor::new(vec![r, c], dx)?);
                self.acc_affine(adj, *gamma, *beta, dgam, dbet)?;
            }
            Op::ExclusiveCumsum(v) => {
                let n = y.len();
                let mut d = vec![T::zero(); n];
                let mut run = T::zero();
                for i in (0..n).rev() {
                    d[i] = run;
                    run = run + g.data()[i];
                }
                acc(adj, *v, Tensor::new(vec![n], d)?);
            }
            Op::FrameOffset { v, negate } => {
                let k = self.value(*v).len();
                let mut d = vec![T::zero(); k];
                for row in g.data().chunks(k) {
                    for (dd, &gv) in d.iter_mut().zip(row) {
                        *dd = if *negate { *dd + gv } else { *dd - gv };
                    }
                }
                acc(adj, *v, Tensor::new(vec![k], d)?);
            }
            Op::CellFeatures { s, e, feats } => {
                let (t, k) = self.value(*s).dims2("cell_features")?;
                let d = self.value(*feats).shape()[1];
                let mut ds = vec![T::zero(); t * k];
                let mut de = vec![T::zero(); t * k];
                let mut df = vec![T::zero(); k * d];
                for (row, grow) in g.data().chunks(d + 2).enumerate() {
                    ds[row] = grow[0];
                    de[row] = grow[1];
                    let ki = row % k;
                    for (f, &gv) in df[ki * d..(ki + 1) * d].iter_mut().zip(&grow[2..]) {
                        *f = *f + gv;
                    }
                }
                acc(adj, *s, Tensor::new(vec![t, k], ds)?);
                acc(adj, *e, Tensor::new(vec![t, k], de)?);
                acc(adj, *feats, Tensor::new(vec![k, d], df)?);
            }
            Op::WeightedContext { w, c } => {
                let (t, k) = self.value(*w).dims2("weighted_context")?;
                let p = y.shape()[1];
                let (wv, cv) = (self.value(*w), self.value(*c));
                let mut dw = vec![T::zero(); t * k];
                let mut dc = vec![T::zero(); t * k * p];
                for ti in 0..t {
                    let grow = &g.data()[ti * p..(ti + 1) * p];
                    for ki in 0..k {
                        let cell = ti * k + ki;
                        dw[cell] = cv.row(cell).iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        let wt = wv.at2(ti, ki);
                        for (pi, &gv) in grow.iter().enumerate() {
                            dc[cell * p + pi] = gv * wt;
                        }
                    }
                }
                acc(adj, *w, Tensor::new(vec![t, k], dw)?);
                acc(adj, *c, Tensor::new(vec![t * k, p], dc)?);
            }
            Op::ScalarWithGrad { x, grad } => {
                let s = g.data()[0];
                acc(adj, *x, grad.map(|v| v * s));
            }
        }
        Ok(())
    }

    fn acc_affine(
        &self,
        adj: &mut [Option<Tensor<T>>],
        gamma: Var,
        beta: Var,
        dgam: Vec<T>,
        dbet: Vec<T>,
    ) -> Result<()> {
        acc(
            adj,
            gamma,
            Tensor::new(self.value(gamma).shape().to_vec(), dgam)?,
        );
        acc(
            adj,
            beta,
            Tensor::new(self.value(beta).shape().to_vec(), dbet)?,
        );
        Ok(())
    }
}

fn affine_param_grads<T: Real>(g: &[T], xhat: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
        dg[i % c] = dg[i % c] + gv * h;
        db[i % c] = db[i % c] + gv;
    }
    (dg, db)
}

/// Output rows `[lo, hi)` that read a valid input row through tap `j`.
fn tap_rows(len: usize, j: usize, half: usize) -> (usize, usize) {
    let lo = half.saturating_sub(j);
    let hi = (len + half).saturating_sub(j).min(len);
    (lo, hi.max(lo))
}

fn acc<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_along<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let xv = x.data();
    let mut out = vec![T::zero(); xv.len()];
    for o in 0..outer {
        for q in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + q;
            let mx = (0..n).map(|j| xv[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..n {
                let e = (xv[idx(j)] - mx).exp();
                out[idx(j)] = e;
                z = z + e;
            }
            for j in 0..n {
                out[idx(j)] = out[idx(j)] / z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
