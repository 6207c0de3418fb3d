//! Reverse-mode differentiation graph.
//!
//! Operations execute eagerly and append a record to the graph; records are
//! topologically ordered by construction (an op can only reference nodes
//! that already exist). [`Graph::backward`] replays the records in exact
//! reverse order, accumulating gradients by summation over fan-out.
//!
//! Every forward op checks its output for NaN/Inf and reports
//! [`TensorError::NonFinite`] instead of propagating poisoned values.
//! All ops are sequential and free of reduction-order ambiguity, so a fixed
//! seed reproduces results bitwise run-to-run.

use crate::error::{Result, TensorError};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TokenIds};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Forward-pass mode; controls stochastic ops (dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<S> {
    Leaf,
    /// `[..., m, k] @ [k, n]` or `[..., m, k] @ [..., k, n]` (equal batch dims).
    Matmul { a: NodeId, b: NodeId },
    /// Left-padded conv over the time axis: x `[B,T,Cin]`, w `[K,Cin,Cout]`, bias `[Cout]`.
    CausalConv1d { x: NodeId, w: NodeId, bias: NodeId },
    Softmax { x: NodeId, axis: usize },
    /// Row-wise `softmax(scale * x)` over the last axis of `[..., T, T]`,
    /// restricted to columns `j <= i`; masked entries are exactly zero.
    CausalSoftmax { x: NodeId, scale: S },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// (mean, rstd) per normalized slice, saved for backward;
        /// eps is folded into rstd.
        stats: Vec<(S, S)>,
    },
    Relu { x: NodeId },
    Dropout {
        x: NodeId,
        rate: f64,
        mode: Mode,
        /// Keep-mask bits (1 = kept), saved at forward for backward.
        mask: Vec<u64>,
    },
    Embedding { table: NodeId, ids: TokenIds },
    CrossEntropy {
        logits: NodeId,
        targets: TokenIds,
        /// Softmax probabilities per position, saved for backward.
        probs: Vec<S>,
    },
    Add { a: NodeId, b: NodeId },
    /// `a + b` where b's shape is a suffix of a's shape (b repeats over
    /// the leading axes).
    AddBroadcast { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: S },
    Reshape { x: NodeId },
    Permute { x: NodeId, axes: Vec<usize> },
    SumAll { x: NodeId },
}

struct Node<S> {
    op: Op<S>,
    /// `None` after `release_value`; shape is kept alongside.
    value: Option<Tensor<S>>,
    shape: Vec<usize>,
    numel: usize,
    requires_grad: bool,
}

/// Reverse-mode graph over tensors of element type `S`.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    validate: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            validate: true,
        }
    }

    /// Disable per-op finite checks (they cost one pass over each output).
    pub fn without_finite_checks(mut self) -> Self {
        self.validate = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a constant leaf (no gradient).
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Insert a differentiable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("node value was released")
    }

    /// Drop a node's stored value to reclaim memory. The caller asserts
    /// that no later forward op and no backward rule will read it (backward
    /// rules read their *input* values and, for softmax-like ops, their own
    /// *output*; plain outputs consumed only by ops that never revisit them
    /// are safe to release).
    pub fn release_value(&mut self, id: NodeId) {
        self.nodes[id.0].value = None;
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if any
    /// flowed there. Shape matches `value(id)`.
    pub fn grad_data(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor<S>> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[id.0].shape.clone(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> NodeId {
        let shape = value.shape().to_vec();
        let numel = value.numel();
        self.nodes.push(Node {
            op,
            value: Some(value),
            shape,
            numel,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Result<NodeId> {
        if self.validate && !value.is_all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push(op, value, requires_grad))
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Forward ops ─────────────────────────────────────────────────

    /// Matrix product. `a` is `[..., m, k]`; `b` is `[k, n]` or shares
    /// `a`'s batch dims as `[..., k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let mismatch = || TensorError::DimMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (bk, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != bk {
            return Err(mismatch());
        }
        let batched_b = bsh.len() > 2;
        if batched_b && bsh[..bsh.len() - 2] != ash[..ash.len() - 2] {
            return Err(mismatch());
        }
        let nbatch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        // gemm with beta = 0 writes every output element, batched or flat.
        let mut out = Vec::with_capacity(nbatch * m * n);
        #[allow(clippy::uninit_vec)]
        unsafe {
            out.set_len(nbatch * m * n);
        }
        let (adata, bdata) = (self.value(a).data(), self.value(b).data());
        if batched_b {
            for i in 0..nbatch {
                S::gemm(
                    m,
                    k,
                    n,
                    S::ONE,
                    &adata[i * m * k..(i + 1) * m * k],
                    &bdata[i * k * n..(i + 1) * k * n],
                    S::ZERO,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        } else {
            // One flat GEMM over all batch rows.
            S::gemm(nbatch * m, k, n, S::ONE, adata, bdata, S::ZERO, &mut out);
        }
        let rg = self.needs_grad(&[a, b]);
        self.push_checked("matmul", Op::Matmul { a, b }, Tensor::new(out_shape, out)?, rg)
    }

    /// Causal 1-D convolution over the token axis with left zero-padding
    /// of `K-1`: output position `t` sees inputs at positions `<= t` only.
    pub fn causal_conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let xsh = self.value(x).shape().to_vec();
        let wsh = self.value(w).shape().to_vec();
        let bsh = self.value(bias).shape().to_vec();
        if xsh.len() != 3 || wsh.len() != 3 || xsh[2] != wsh[1] {
            return Err(TensorError::DimMismatch {
                op: "causal_conv1d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let (bdim, t, cin) = (xsh[0], xsh[1], xsh[2]);
        let (kw, cout) = (wsh[0], wsh[2]);
        if bsh != [cout] {
            return Err(TensorError::DimMismatch {
                op: "causal_conv1d",
                lhs: vec![cout],
                rhs: bsh,
            });
        }
        let mut out = Vec::with_capacity(bdim * t * cin.max(cout));
        let biasd = self.value(bias).data();
        for _ in 0..bdim * t {
            out.extend_from_slice(biasd);
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for j in 0..kw.min(t) {
            let rows = t - j;
            let wj = &wd[j * cin * cout..(j + 1) * cin * cout];
            for b in 0..bdim {
                S::gemm(
                    rows,
                    cin,
                    cout,
                    S::ONE,
                    &xd[b * t * cin..b * t * cin + rows * cin],
                    wj,
                    S::ONE,
                    &mut out[b * t * cout + j * cout..(b + 1) * t * cout],
                );
            }
        }
        let rg = self.needs_grad(&[x, w, bias]);
        self.push_checked(
            "causal_conv1d",
            Op::CausalConv1d { x, w, bias },
            Tensor::new(vec![bdim, t, cout], out)?,
            rg,
        )
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        if axis >= sh.len() {
            return Err(TensorError::BadShape {
                op: "softmax",
                msg: format!("axis {} out of range", axis),
                shape: sh,
            });
        }
        let len = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let outer: usize = sh[..axis].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![S::ZERO; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = xd[base];
                for l in 1..len {
                    m = m.max(xd[base + l * inner]);
                }
                let mut sum = S::ZERO;
                for l in 0..len {
                    let e = (xd[base + l * inner] - m).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        self.push_checked("softmax", Op::Softmax { x, axis }, Tensor::new(sh, out)?, rg)
    }

    /// Causally masked softmax over the last axis of `[..., T, T]`,
    /// computing `softmax(scale * x)` per row restricted to `j <= i`.
    /// Entries above the diagonal are exactly zero. `scale` must be
    /// positive (attention uses `1/sqrt(head_dim)`).
    pub fn causal_softmax(&mut self, x: NodeId, scale: S) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        let r = sh.len();
        if r < 2 || sh[r - 1] != sh[r - 2] {
            return Err(TensorError::BadShape {
                op: "causal_softmax",
                msg: "expected trailing [T, T] axes".into(),
                shape: sh,
            });
        }
        if scale <= S::ZERO {
            return Err(TensorError::BadParam {
                op: "causal_softmax",
                msg: "scale must be positive".into(),
            });
        }
        let t = sh[r - 1];
        let nbatch: usize = sh[..r - 2].iter().product();
        let xd = self.value(x).data();
        // Every element is written below: prefix by the softmax, masked
        // tail by the zero fill.
        let mut out = Vec::with_capacity(xd.len());
        #[allow(clippy::uninit_vec)]
        unsafe {
            out.set_len(xd.len());
        }
        for bi in 0..nbatch {
            for i in 0..t {
                let row = bi * t * t + i * t;
                // scale > 0, so max(scale*x) = scale * max(x).
                let m = slice_max(&xd[row..row + i + 1]) * scale;
                let row_out = &mut out[row..row + t];
                let (active, masked) = row_out.split_at_mut(i + 1);
                for (o, &xv) in active.iter_mut().zip(&xd[row..row + i + 1]) {
                    *o = (xv * scale - m).exp_fast();
                }
                let inv = S::ONE / slice_sum(active);
                for v in active.iter_mut() {
                    *v *= inv;
                }
                for v in masked.iter_mut() {
                    *v = S::ZERO;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        self.push_checked(
            "causal_softmax",
            Op::CausalSoftmax { x, scale },
            Tensor::new(sh, out)?,
            rg,
        )
    }

    /// Layer normalization over the last axis, then scale by `gamma` and
    /// shift by `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId> {
        let sh = self.value(x).shape().to_vec();
        let e = *sh.last().ok_or_else(|| TensorError::BadShape {
            op: "layer_norm",
            msg: "rank-0 input".into(),
            shape: sh.clone(),
        })?;
        if self.value(gamma).shape() != [e] || self.value(beta).shape() != [e] {
            return Err(TensorError::DimMismatch {
                op: "layer_norm",
                lhs: sh,
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        if eps <= S::ZERO {
            return Err(TensorError::BadParam {
                op: "layer_norm",
                msg: "eps must be positive".into(),
            });
        }
        let slices = self.value(x).numel() / e;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![S::ZERO; xd.len()];
        let mut stats = Vec::with_capacity(slices);
        let inv_e = S::ONE / S::from_usize(e);
        for s in 0..slices {
            let base = s * e;
            let mut mean = S::ZERO;
            for i in 0..e {
                mean += xd[base + i];
            }
            mean *= inv_e;
            let mut var = S::ZERO;
            for i in 0..e {
                let d = xd[base + i] - mean;
                var += d * d;
            }
            var *= inv_e;
            let rstd = S::ONE / (var + eps).sqrt();
            for i in 0..e {
                out[base + i] = gd[i] * ((xd[base + i] - mean) * rstd) + bd[i];
            }
            stats.push((mean, rstd));
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        self.push_checked(
            "layer_norm",
            Op::LayerNorm { x, gamma, beta, stats },
            Tensor::new(sh, out)?,
            rg,
        )
    }

    /// Elementwise `max(0, x)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&v| v.max(S::ZERO)).collect(),
        )?;
        let rg = self.needs_grad(&[x]);
        self.push_checked("relu", Op::Relu { x }, out, rg)
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`;
    /// in eval mode this is the identity. The keep mask is a pure
    /// function of `seed` (one 32-bit ChaCha8 draw per element compared
    /// against `rate * 2^32`), saved as a bitset for backward.
    pub fn dropout(&mut self, x: NodeId, rate: f64, mode: Mode, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadParam {
                op: "dropout",
                msg: format!("rate must be in [0, 1), got {}", rate),
            });
        }
        let v = self.value(x);
        let (out, mask) = match mode {
            Mode::Eval => (v.clone(), Vec::new()),
            Mode::Train => {
                let keep_scale = S::from_f64(1.0 / (1.0 - rate));
                let threshold = (rate * 4294967296.0) as u64; // rate * 2^32
                let mut rng = StreamRng::new(seed);
                let n = v.numel();
                let mut mask = vec![0u64; n.div_ceil(64)];
                let mut out = Vec::with_capacity(n);
                let mut pending = 0u64;
                for (i, &xv) in v.data().iter().enumerate() {
                    let draw = if i % 2 == 0 {
                        pending = rng.next_u64();
                        pending & 0xffff_ffff
                    } else {
                        pending >> 32
                    };
                    if draw >= threshold {
                        mask[i / 64] |= 1u64 << (i % 64);
                        out.push(xv * keep_scale);
                    } else {
                        out.push(S::ZERO);
                    }
                }
                (Tensor::new(v.shape().to_vec(), out)?, mask)
            }
        };
        let rg = self.needs_grad(&[x]);
        self.push_checked("dropout", Op::Dropout { x, rate, mode, mask }, out, rg)
    }

    /// Row gather: `table[V,E]` indexed by `ids[B,T]` into `[B,T,E]`.
    pub fn embedding(&mut self, table: NodeId, ids: &TokenIds) -> Result<NodeId> {
        let tsh = self.value(table).shape().to_vec();
        if tsh.len() != 2 {
            return Err(TensorError::BadShape {
                op: "embedding",
                msg: "table must be rank 2".into(),
                shape: tsh,
            });
        }
        let (v, e) = (tsh[0], tsh[1]);
        let (b, t) = (ids.rows(), ids.cols());
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(b * t * e);
        for row in 0..b {
            for col in 0..t {
                let id = ids.get(row, col);
                if id as usize >= v {
                    return Err(TensorError::IndexOutOfRange {
                        id,
                        vocab: v,
                        row,
                        col,
                    });
                }
                out.extend_from_slice(&td[id as usize * e..(id as usize + 1) * e]);
            }
        }
        let rg = self.needs_grad(&[table]);
        self.push_checked(
            "embedding",
            Op::Embedding { table, ids: ids.clone() },
            Tensor::new(vec![b, t, e], out)?,
            rg,
        )
    }

    /// Mean negative log-likelihood (natural log) of `targets[B,T]` under
    /// `logits[B,T,V]`, via a fused log-sum-exp.
    pub fn cross_entropy_nll(&mut self, logits: NodeId, targets: &TokenIds) -> Result<NodeId> {
        let sh = self.value(logits).shape().to_vec();
        if sh.len() != 3 || sh[0] != targets.rows() || sh[1] != targets.cols() {
            return Err(TensorError::DimMismatch {
                op: "cross_entropy_nll",
                lhs: sh,
                rhs: vec![targets.rows(), targets.cols()],
            });
        }
        let v = sh[2];
        let positions = sh[0] * sh[1];
        let ld = self.value(logits).data();
        let mut probs = vec![S::ZERO; ld.len()];
        let mut total = 0.0f64;
        for p in 0..positions {
            let target = targets.data()[p];
            if target as usize >= v {
                return Err(TensorError::IndexOutOfRange {
                    id: target,
                    vocab: v,
                    row: p / sh[1],
                    col: p % sh[1],
                });
            }
            let row = &ld[p * v..(p + 1) * v];
            let mut m = row[0];
            for &x in &row[1..] {
                m = m.max(x);
            }
            let mut sum = S::ZERO;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp_fast();
                probs[p * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[p * v + j] /= sum;
            }
            // loss_p = log-sum-exp(row) - row[target]
            total += (m + sum.ln()).to_f64() - row[target as usize].to_f64();
        }
        let mean = S::from_f64(total / positions as f64);
        let rg = self.needs_grad(&[logits]);
        self.push_checked(
            "cross_entropy_nll",
            Op::CrossEntropy {
                logits,
                targets: targets.clone(),
                probs,
            },
            Tensor::scalar(mean),
            rg,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::DimMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect(),
        )?;
        let rg = self.needs_grad(&[a, b]);
        self.push_checked("add", Op::Add { a, b }, out, rg)
    }

    /// `a + b` with `b`'s shape a suffix of `a`'s shape; `b` repeats over
    /// the leading axes (bias add, positional add).
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if bsh.len() > ash.len() || &ash[ash.len() - bsh.len()..] != bsh {
            return Err(TensorError::DimMismatch {
                op: "add_broadcast",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let nb = bv.numel();
        let mut out = av.data().to_vec();
        for (chunk, _) in out.chunks_mut(nb).zip(0..) {
            for (o, &bval) in chunk.iter_mut().zip(bv.data()) {
                *o += bval;
            }
        }
        let rg = self.needs_grad(&[a, b]);
        let sh = ash.to_vec();
        self.push_checked("add_broadcast", Op::AddBroadcast { a, b }, Tensor::new(sh, out)?, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::DimMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
        )?;
        let rg = self.needs_grad(&[a, b]);
        self.push_checked("mul", Op::Mul { a, b }, out, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect())?;
        let rg = self.needs_grad(&[x]);
        self.push_checked("scale", Op::Scale { x, c }, out, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.needs_grad(&[x]);
        // No value check: data unchanged (and shared).
        Ok(self.push(Op::Reshape { x }, out, rg))
    }

    /// Axis permutation (data is materialized in the new order).
    pub fn permute(&mut self, x: NodeId, axes: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        let r = v.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::BadShape {
                op: "permute",
                msg: format!("axes {:?} is not a permutation", axes),
                shape: v.shape().to_vec(),
            });
        }
        let out = permute_data(v, &axes);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::Permute { x, axes }, out, rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let rg = self.needs_grad(&[x]);
        self.push_checked("sum_all", Op::SumAll { x }, Tensor::scalar(S::from_f64(total)), rg)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss` node, populating gradients for
    /// every node on which a differentiable leaf depends. Fan-out
    /// accumulates by summation.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![S::ONE]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }

    fn add_grad(grads: &mut [Option<Vec<S>>], id: NodeId, contribution: Vec<S>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, c) in g.iter_mut().zip(contribution) {
                    *gi += c;
                }
            }
            None => grads[id.0] = Some(contribution),
        }
    }

    fn ensure_grad(grads: &mut [Option<Vec<S>>], id: NodeId, numel: usize) -> &mut Vec<S> {
        grads[id.0].get_or_insert_with(|| vec![S::ZERO; numel])
    }

    fn backward_node(&mut self, id: usize) {
        if matches!(self.nodes[id].op, Op::Leaf) {
            // Leaves keep their accumulated gradient for the caller.
            return;
        }
        let dy = self.grads[id].take().expect("grad present");
        let node = &self.nodes[id];
        let rg = |nid: NodeId| self.nodes[nid.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let ash = &self.nodes[a.0].shape[..];
                let bsh = &self.nodes[b.0].shape[..];
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let nbatch: usize = ash[..ash.len() - 2].iter().product();
                let batched_b = bsh.len() > 2;
                let adata = node_data(&self.nodes, a);
                let bdata = node_data(&self.nodes, b);
                if rg(a) {
                    let mut da = Vec::with_capacity(adata.len());
                    #[allow(clippy::uninit_vec)]
                    unsafe {
                        da.set_len(adata.len());
                    }
                    if batched_b {
                        for i in 0..nbatch {
                            S::gemm_nt(
                                m,
                                n,
                                k,
                                S::ONE,
                                &dy[i * m * n..(i + 1) * m * n],
                                &bdata[i * k * n..(i + 1) * k * n],
                                S::ZERO,
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                    } else {
                        // dA = dC @ B^T, flattened over batch rows.
                        S::gemm_nt(nbatch * m, n, k, S::ONE, &dy, bdata, S::ZERO, &mut da);
                    }
                    Self::add_grad(&mut self.grads, a, da);
                }
                if rg(b) {
                    let mut db = Vec::with_capacity(bdata.len());
                    #[allow(clippy::uninit_vec)]
                    unsafe {
                        db.set_len(bdata.len());
                    }
                    if batched_b {
                        for i in 0..nbatch {
                            S::gemm_tn(
                                k,
                                m,
                                n,
                                S::ONE,
                                &adata[i * m * k..(i + 1) * m * k],
                                &dy[i * m * n..(i + 1) * m * n],
                                S::ZERO,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                    } else {
                        // dB = A^T @ dC, summing over batch rows.
                        S::gemm_tn(k, nbatch * m, n, S::ONE, adata, &dy, S::ZERO, &mut db);
                    }
                    Self::add_grad(&mut self.grads, b, db);
                }
            }
            Op::CausalConv1d { x, w, bias } => {
                let (x, w, bias) = (*x, *w, *bias);
                let xsh = &self.nodes[x.0].shape[..];
                let wsh = &self.nodes[w.0].shape[..];
                let (bdim, t, cin) = (xsh[0], xsh[1], xsh[2]);
                let (kw, cout) = (wsh[0], wsh[2]);
                let xd = node_data(&self.nodes, x);
                let wd = node_data(&self.nodes, w);
                if rg(bias) {
                    let mut dbias = vec![S::ZERO; cout];
                    for pos in 0..bdim * t {
                        for o in 0..cout {
                            dbias[o] += dy[pos * cout + o];
                        }
                    }
                    Self::add_grad(&mut self.grads, bias, dbias);
                }
                if rg(x) {
                    let mut dx = vec![S::ZERO; xd.len()];
                    for j in 0..kw.min(t) {
                        let rows = t - j;
                        let wj = &wd[j * cin * cout..(j + 1) * cin * cout];
                        for b in 0..bdim {
                            S::gemm_nt(
                                rows,
                                cout,
                                cin,
                                S::ONE,
                                &dy[b * t * cout + j * cout..(b + 1) * t * cout],
                                wj,
                                S::ONE,
                                &mut dx[b * t * cin..b * t * cin + rows * cin],
                            );
                        }
                    }
                    Self::add_grad(&mut self.grads, x, dx);
                }
                if rg(w) {
                    let mut dw = vec![S::ZERO; wd.len()];
                    for j in 0..kw.min(t) {
                        let rows = t - j;
                        let dwj = &mut dw[j * cin * cout..(j + 1) * cin * cout];
                        for b in 0..bdim {
                            S::gemm_tn(
                                cin,
                                rows,
                                cout,
                                S::ONE,
                                &xd[b * t * cin..b * t * cin + rows * cin],
                                &dy[b * t * cout + j * cout..(b + 1) * t * cout],
                                S::ONE,
                                dwj,
                            );
                        }
                    }
                    Self::add_grad(&mut self.grads, w, dw);
                }
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if rg(x) {
                    let sh = &node.shape;
                    let len = sh[axis];
                    let inner: usize = sh[axis + 1..].iter().product();
                    let outer: usize = sh[..axis].iter().product();
                    let p = node.value.as_ref().expect("softmax output released").data();
                    let mut dx = vec![S::ZERO; p.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = S::ZERO;
                            for l in 0..len {
                                dot += dy[base + l * inner] * p[base + l * inner];
                            }
                            for l in 0..len {
                                let idx = base + l * inner;
                                dx[idx] = p[idx] * (dy[idx] - dot);
                            }
                        }
                    }
                    Self::add_grad(&mut self.grads, x, dx);
                }
            }
            Op::CausalSoftmax { x, scale } => {
                let (x, scale) = (*x, *scale);
                if rg(x) {
                    let sh = &node.shape;
                    let r = sh.len();
                    let t = sh[r - 1];
                    let nbatch: usize = sh[..r - 2].iter().product();
                    let p = node.value.as_ref().expect("softmax output released").data();
                    // Prefix written per row, masked tail zeroed per row.
                    let mut dx = Vec::with_capacity(p.len());
                    #[allow(clippy::uninit_vec)]
                    unsafe {
                        dx.set_len(p.len());
                    }
                    for bi in 0..nbatch {
                        for i in 0..t {
                            let row = bi * t * t + i * t;
                            let dot = slice_dot(&dy[row..row + i + 1], &p[row..row + i + 1]);
                            let drow = &mut dx[row..row + t];
                            let (active, masked) = drow.split_at_mut(i + 1);
                            for ((d, &pv), &dyv) in active
                                .iter_mut()
                                .zip(&p[row..row + i + 1])
                                .zip(&dy[row..row + i + 1])
                            {
                                *d = scale * pv * (dyv - dot);
                            }
                            for v in masked.iter_mut() {
                                *v = S::ZERO;
                            }
                        }
                    }
                    Self::add_grad(&mut self.grads, x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats, .. } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let e = *node.shape.last().unwrap();
                let slices = node.numel / e;
                let xd = node_data(&self.nodes, x);
                let gd = node_data(&self.nodes, gamma);
                let inv_e = S::ONE / S::from_usize(e);
                let mut dgamma = vec![S::ZERO; e];
                let mut dbeta = vec![S::ZERO; e];
                let mut dx = vec![S::ZERO; xd.len()];
                for s in 0..slices {
                    let (mean, rstd) = stats[s];
                    let base = s * e;
                    // dxhat = dy * gamma; dx via the two per-slice means.
                    let mut sum_dxhat = S::ZERO;
                    let mut sum_dxhat_xhat = S::ZERO;
                    for i in 0..e {
                        let xhat = (xd[base + i] - mean) * rstd;
                        let d = dy[base + i];
                        dgamma[i] += d * xhat;
                        dbeta[i] += d;
                        let dxhat = d * gd[i];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let mean_dxhat = sum_dxhat * inv_e;
                    let mean_dxhat_xhat = sum_dxhat_xhat * inv_e;
                    for i in 0..e {
                        let xhat = (xd[base + i] - mean) * rstd;
                        let dxhat = dy[base + i] * gd[i];
                        dx[base + i] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                if rg(x) {
                    Self::add_grad(&mut self.grads, x, dx);
                }
                if rg(gamma) {
                    Self::add_grad(&mut self.grads, gamma, dgamma);
                }
                if rg(beta) {
                    Self::add_grad(&mut self.grads, beta, dbeta);
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if rg(x) {
                    let xd = node_data(&self.nodes, x);
                    let dx: Vec<S> = xd
                        .iter()
                        .zip(&dy)
                        .map(|(&xv, &d)| if xv > S::ZERO { d } else { S::ZERO })
                        .collect();
                    Self::add_grad(&mut self.grads, x, dx);
                }
            }
            Op::Dropout { x, rate, mode, mask } => {
                let (x, rate, mode) = (*x, *rate, *mode);
                if rg(x) {
                    let dx: Vec<S> = match mode {
                        Mode::Eval => dy,
                        Mode::Train => {
                            let keep_scale = S::from_f64(1.0 / (1.0 - rate));
                            dy.iter()
                                .enumerate()
                                .map(|(i, &d)| {
                                    if mask[i / 64] >> (i % 64) & 1 == 1 {
                                        d * keep_scale
                                    } else {
                                        S::ZERO
                                    }
                                })
                                .collect()
                        }
                    };
                    Self::add_grad(&mut self.grads, x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if rg(table) {
                    let e = *node.shape.last().unwrap();
                    let numel = self.nodes[table.0].numel;
                    let ids = ids.clone();
                    let dt = Self::ensure_grad(&mut self.grads, table, numel);
                    for (pos, &id) in ids.data().iter().enumerate() {
                        let row = id as usize * e;
                        for i in 0..e {
                            dt[row + i] += dy[pos * e + i];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                if rg(logits) {
                    let v = *&self.nodes[logits.0].shape[..].last().unwrap();
                    let positions = probs.len() / v;
                    let scale = dy[0] / S::from_usize(positions);
                    let mut dl = probs.clone();
                    for (p, &target) in targets.data().iter().enumerate() {
                        dl[p * v + target as usize] -= S::ONE;
                    }
                    for d in dl.iter_mut() {
                        *d *= scale;
                    }
                    Self::add_grad(&mut self.grads, logits, dl);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                match (rg(a), rg(b)) {
                    (true, true) => {
                        Self::add_grad(&mut self.grads, a, dy.clone());
                        Self::add_grad(&mut self.grads, b, dy);
                    }
                    (true, false) => Self::add_grad(&mut self.grads, a, dy),
                    (false, true) => Self::add_grad(&mut self.grads, b, dy),
                    (false, false) => {}
                }
            }
            Op::AddBroadcast { a, b } => {
                let (a, b) = (*a, *b);
                if rg(b) {
                    let nb = self.nodes[b.0].numel;
                    let mut db = vec![S::ZERO; nb];
                    for chunk in dy.chunks(nb) {
                        for (g, &d) in db.iter_mut().zip(chunk) {
                            *g += d;
                        }
                    }
                    Self::add_grad(&mut self.grads, b, db);
                }
                if rg(a) {
                    Self::add_grad(&mut self.grads, a, dy);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if rg(a) {
                    let bdata = node_data(&self.nodes, b);
                    let da: Vec<S> = dy.iter().zip(bdata).map(|(&d, &bv)| d * bv).collect();
                    Self::add_grad(&mut self.grads, a, da);
                }
                if rg(b) {
                    let adata = node_data(&self.nodes, a);
                    let db: Vec<S> = dy.iter().zip(adata).map(|(&d, &av)| d * av).collect();
                    Self::add_grad(&mut self.grads, b, db);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if rg(x) {
                    let dx: Vec<S> = dy.iter().map(|&d| d * c).collect();
                    Self::add_grad(&mut self.grads, x, dx);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if rg(x) {
                    Self::add_grad(&mut self.grads, x, dy);
                }
            }
            Op::Permute { x, axes } => {
                let x = *x;
                if rg(x) {
                    let inv = inverse_permutation(axes);
                    let dy_t = Tensor::new(node.shape.clone(), dy).expect("shape");
                    let dx = permute_data(&dy_t, &inv);
                    Self::add_grad(&mut self.grads, x, dx.into_data());
                }
            }
            Op::SumAll { x } => {
                let x = *x;
                if rg(x) {
                    let n = self.nodes[x.0].numel;
                    let dx = vec![dy[0]; n];
                    Self::add_grad(&mut self.grads, x, dx);
                }
            }
        }
    }
}

/// Max over a nonempty slice, unrolled so the reduction vectorizes.
fn slice_max<S: Scalar>(v: &[S]) -> S {
    let mut acc = [v[0]; 4];
    let chunks = v.len() / 4;
    for c in 0..chunks {
        let base = c * 4;
        acc[0] = acc[0].max(v[base]);
        acc[1] = acc[1].max(v[base + 1]);
        acc[2] = acc[2].max(v[base + 2]);
        acc[3] = acc[3].max(v[base + 3]);
    }
    for &x in &v[chunks * 4..] {
        acc[0] = acc[0].max(x);
    }
    acc[0].max(acc[1]).max(acc[2].max(acc[3]))
}

/// Sum with four accumulators (fixed order, reproducible).
fn slice_sum<S: Scalar>(v: &[S]) -> S {
    let mut acc = [S::ZERO; 4];
    let chunks = v.len() / 4;
    for c in 0..chunks {
        let base = c * 4;
        acc[0] += v[base];
        acc[1] += v[base + 1];
        acc[2] += v[base + 2];
        acc[3] += v[base + 3];
    }
    for &x in &v[chunks * 4..] {
        acc[0] += x;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Dot product with four accumulators (fixed order, reproducible).
fn slice_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::ZERO; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let base = c * 4;
        acc[0] += a[base] * b[base];
        acc[1] += a[base + 1] * b[base + 1];
        acc[2] += a[base + 2] * b[base + 2];
        acc[3] += a[base + 3] * b[base + 3];
    }
    for i in chunks * 4..a.len() {
        acc[0] += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

fn node_data<S: Scalar>(nodes: &[Node<S>], id: NodeId) -> &[S] {
    nodes[id.0]
        .value
        .as_ref()
        .expect("input value was released but backward needs it")
        .data()
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn permute_data<S: Scalar>(v: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let in_shape = v.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let data = v.data();
    let mut out = Vec::with_capacity(v.numel());

    // Fast paths for the two layouts attention uses constantly.
    if axes == [0, 2, 1, 3] {
        // [A,B,C,D] -> [A,C,B,D]: D-long runs stay contiguous.
        let (a, b, c, d) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        for ai in 0..a {
            for ci in 0..c {
                for bi in 0..b {
                    let src = ((ai * b + bi) * c + ci) * d;
                    out.extend_from_slice(&data[src..src + d]);
                }
            }
        }
        return Tensor::new(out_shape, out).expect("permute shape");
    }
    if axes == [0, 1, 3, 2] {
        // Trailing matrix transpose.
        let (ab, c, d) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
        for m in 0..ab {
            let base = m * c * d;
            for di in 0..d {
                for ci in 0..c {
                    out.push(data[base + ci * d + di]);
                }
            }
        }
        return Tensor::new(out_shape, out).expect("permute shape");
    }

    let in_strides = v.strides();
    let r = axes.len();
    let mut idx = vec![0usize; r];
    for _ in 0..v.numel() {
        let mut src = 0usize;
        for dim in 0..r {
            src += idx[dim] * in_strides[axes[dim]];
        }
        out.push(data[src]);
        // Odometer over the output index.
        for dim in (0..r).rev() {
            idx[dim] += 1;
            if idx[dim] < out_shape[dim] {
                break;
            }
            idx[dim] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute shape")
}
