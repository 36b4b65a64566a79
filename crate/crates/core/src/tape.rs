//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every forward pass builds a fresh tape (define-by-run); `backward` walks
//! it in reverse creation order, which is a valid reverse topological order
//! because an operation can only reference variables that already exist.
//! Fan-out falls out of accumulation: a variable consumed by several
//! operations receives the sum of their adjoints, which is exactly the
//! equally weighted gradient sum at the shared feature of a multi-branch
//! head.
//!
//! A tape is confined to one thread for one forward/backward pass. Inputs
//! are never mutated; every op allocates its output.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward-pass semantics for layers whose behavior differs between
/// training and evaluation (batch norm, dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a variable on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Batch statistics produced by a train-mode batch-norm op, for the layer
/// to fold into its running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    /// Biased (1/N) per-channel variance, as used for normalization.
    pub var_biased: Vec<T>,
    /// Reduction count N = B*H*W (or B for rank-2 inputs).
    pub n: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Matmul { a: VarId, b: VarId },
    Relu { x: VarId },
    Concat { parts: Vec<VarId>, axis: usize },
    Reshape { x: VarId },
    SumAll { x: VarId },
    Scale { x: VarId, c: T },
    Linear { x: VarId, w: VarId, b: VarId },
    Conv2d { x: VarId, w: VarId, b: VarId, stride: usize, pad: usize },
    MaxPool2d { x: VarId, argmax: Vec<usize> },
    AvgPool2d { x: VarId, k: usize, stride: usize },
    BatchNorm { x: VarId, gamma: VarId, beta: VarId, xhat: Tensor<T>, inv_std: Vec<T>, train: bool },
    SoftmaxCrossEntropy { logits: VarId, labels: Vec<usize>, softmax: Tensor<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Matmul { .. } => "matmul",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::SumAll { .. } => "sum_all",
            Op::Scale { .. } => "scale",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> VarId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, requires_grad, op });
        VarId(self.nodes.len() - 1)
    }

    fn requires(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input variable.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a constant (gradient never requested).
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.leaf(value, false)
    }

    pub fn value(&self, v: VarId) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated adjoint of `v`; zeros before `backward` has run.
    pub fn grad(&self, v: VarId) -> &Tensor<T> {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: VarId) -> &'static str {
        self.nodes[v.0].op.name()
    }

    // ── elementwise / shape ops ──────────────────────────────────────

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = bcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add { a, b }, rq))
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = bcast_zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Mul { a, b }, rq))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rq = self.requires(x);
        self.push(value, Op::Relu { x }, rq)
    }

    pub fn scale(&mut self, x: VarId, c: T) -> VarId {
        let value = self.value(x).map(|v| v * c);
        let rq = self.requires(x);
        self.push(value, Op::Scale { x, c }, rq)
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let value = self.value(x).reshaped(shape)?;
        let rq = self.requires(x);
        Ok(self.push(value, Op::Reshape { x }, rq))
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let value = Tensor::scalar(self.value(x).sum());
        let rq = self.requires(x);
        self.push(value, Op::SumAll { x }, rq)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, axis: usize, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::contract("concat", "no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::contract(
                "concat",
                format!("axis {} out of range for rank {}", axis, first.len()),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(Error::DimensionMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();

        let mut data = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let src = self.value(p);
            let a = src.shape()[axis];
            let sd = src.data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * a * inner;
                data[dst_base..dst_base + a * inner]
                    .copy_from_slice(&sd[src_base..src_base + a * inner]);
            }
            offset += a;
        }
        let rq = parts.iter().any(|&p| self.requires(p));
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, rq))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]` matrix product.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(&[m, n], value)?, Op::Matmul { a, b }, rq))
    }

    /// Affine map `x[B,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::DimensionMismatch { op: "linear", lhs: sx, rhs: sw });
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(Error::DimensionMismatch { op: "linear", lhs: sw, rhs: sb });
        }
        let (bsz, nin, nout) = (sx[0], sx[1], sw[0]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); bsz * nout];
        for i in 0..bsz {
            let xr = &xd[i * nin..(i + 1) * nin];
            for o in 0..nout {
                let wr = &wd[o * nin..(o + 1) * nin];
                let mut acc = bd[o];
                for j in 0..nin {
                    acc = acc + xr[j] * wr[j];
                }
                out[i * nout + o] = acc;
            }
        }
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(Tensor::new(&[bsz, nout], out)?, Op::Linear { x, w, b }, rq))
    }

    // ── spatial ops ──────────────────────────────────────────────────

    /// Cross-correlation (no kernel flip): `x[B,Cin,H,W] * w[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::DimensionMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(Error::DimensionMismatch { op: "conv2d", lhs: sw, rhs: sb });
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let oh = conv_out_size(h, kh, stride, pad).ok_or_else(|| {
            Error::contract(
                "conv2d",
                format!("non-positive output for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
            )
        })?;
        let ow = conv_out_size(wd, kw, stride, pad).ok_or_else(|| {
            Error::contract(
                "conv2d",
                format!("non-positive output for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
            )
        })?;

        let xd = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); bsz * cout * oh * ow];
        for bi in 0..bsz {
            for oc in 0..cout {
                let obase = (bi * cout + oc) * oh * ow;
                out[obase..obase + oh * ow].fill(bv[oc]);
                for ic in 0..cin {
                    let xbase = (bi * cin + ic) * h * wd;
                    let wbase = (oc * cin + ic) * kh * kw;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wgt = wv[wbase + ki * kw + kj];
                            conv_scan(h, wd, oh, ow, stride, pad, ki, kj, |orow, ocol, irow, icol| {
                                out[obase + orow * ow + ocol] =
                                    out[obase + orow * ow + ocol] + wgt * xd[xbase + irow * wd + icol];
                            });
                        }
                    }
                }
            }
        }
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Tensor::new(&[bsz, cout, oh, ow], out)?,
            Op::Conv2d { x, w, b, stride, pad },
            rq,
        ))
    }

    /// Max pooling; gradient routes to the first maximum in row-major scan
    /// order of each window.
    pub fn maxpool2d(&mut self, x: VarId, k: usize, stride: usize) -> Result<VarId> {
        let (shape, oh, ow) = pool_geometry(self.value(x).shape(), k, stride, "maxpool2d")?;
        let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); bsz * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..bsz * c {
            let xbase = bc * h * w;
            let obase = bc * oh * ow;
            for orow in 0..oh {
                for ocol in 0..ow {
                    let (r0, c0) = (orow * stride, ocol * stride);
                    let mut best = xd[xbase + r0 * w + c0];
                    let mut best_i = xbase + r0 * w + c0;
                    for dr in 0..k {
                        for dc in 0..k {
                            let i = xbase + (r0 + dr) * w + (c0 + dc);
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out[obase + orow * ow + ocol] = best;
                    argmax[obase + orow * ow + ocol] = best_i;
                }
            }
        }
        let rq = self.requires(x);
        Ok(self.push(
            Tensor::new(&[bsz, c, oh, ow], out)?,
            Op::MaxPool2d { x, argmax },
            rq,
        ))
    }

    /// Average pooling; gradient distributes `1/k^2` uniformly.
    pub fn avgpool2d(&mut self, x: VarId, k: usize, stride: usize) -> Result<VarId> {
        let (shape, oh, ow) = pool_geometry(self.value(x).shape(), k, stride, "avgpool2d")?;
        let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let xd = self.value(x).data();
        let inv = T::from_f64(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); bsz * c * oh * ow];
        for bc in 0..bsz * c {
            let xbase = bc * h * w;
            let obase = bc * oh * ow;
            for orow in 0..oh {
                for ocol in 0..ow {
                    let (r0, c0) = (orow * stride, ocol * stride);
                    let mut acc = T::zero();
                    for dr in 0..k {
                        for dc in 0..k {
                            acc = acc + xd[xbase + (r0 + dr) * w + (c0 + dc)];
                        }
                    }
                    out[obase + orow * ow + ocol] = acc * inv;
                }
            }
        }
        let rq = self.requires(x);
        Ok(self.push(
            Tensor::new(&[bsz, c, oh, ow], out)?,
            Op::AvgPool2d { x, k, stride },
            rq,
        ))
    }

    // ── normalization / loss ─────────────────────────────────────────

    /// Train-mode batch normalization over `[B,C]` or `[B,C,H,W]`, biased
    /// (1/N) batch variance. Returns the normalized output and the batch
    /// statistics for the caller's running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<(VarId, BatchStats<T>)> {
        let (c, n, spatial) = bn_geometry(self.value(x).shape(), self.value(gamma).shape(), "batchnorm")?;
        if n < 2 {
            return Err(Error::contract(
                "batchnorm",
                format!("train mode needs a reduction count of at least 2, got {n}"),
            ));
        }
        let shape = self.value(x).shape().to_vec();
        let bsz = shape[0];
        let xd = self.value(x).data();
        let inv_n = T::from_f64(1.0 / n as f64);
        let epsv = T::from_f64(eps);

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        bn_reduce(xd, bsz, c, spatial, |ch, v| mean[ch] = mean[ch] + v);
        for m in mean.iter_mut() {
            *m = *m * inv_n;
        }
        bn_reduce(xd, bsz, c, spatial, |ch, v| {
            let d = v - mean[ch];
            var[ch] = var[ch] + d * d;
        });
        for v in var.iter_mut() {
            *v = *v * inv_n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();

        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        bn_map(xd, bsz, c, spatial, |ch, i, v| {
            let h = (v - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = gd[ch] * h + bd[ch];
        });

        let stats = BatchStats { mean: mean.clone(), var_biased: var, n };
        let rq = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let xhat = Tensor::new(&shape, xhat)?;
        let id = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true },
            rq,
        );
        Ok((id, stats))
    }

    /// Eval-mode batch normalization using fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<VarId> {
        let (c, _, spatial) = bn_geometry(self.value(x).shape(), self.value(gamma).shape(), "batchnorm")?;
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::DimensionMismatch {
                op: "batchnorm",
                lhs: vec![c],
                rhs: running_mean.shape().to_vec(),
            });
        }
        let shape = self.value(x).shape().to_vec();
        let bsz = shape[0];
        let xd = self.value(x).data();
        let epsv = T::from_f64(eps);
        let rm = running_mean.data();
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + epsv).sqrt())
            .collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        bn_map(xd, bsz, c, spatial, |ch, i, v| {
            let h = (v - rm[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = gd[ch] * h + bd[ch];
        });
        let rq = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let xhat = Tensor::new(&shape, xhat)?;
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false },
            rq,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max subtraction. Returns a rank-0 scalar.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::contract(
                "softmax_cross_entropy",
                format!("logits must be rank 2, got {s:?}"),
            ));
        }
        let (bsz, classes) = (s[0], s[1]);
        if bsz == 0 {
            return Err(Error::contract("softmax_cross_entropy", "empty batch"));
        }
        if labels.len() != bsz {
            return Err(Error::contract(
                "softmax_cross_entropy",
                format!("{} labels for batch of {}", labels.len(), bsz),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let ld = self.value(logits).data();
        let mut softmax = vec![T::zero(); ld.len()];
        let mut loss = T::zero();
        for i in 0..bsz {
            let row = &ld[i * classes..(i + 1) * classes];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                softmax[i * classes + j] = e;
                denom = denom + e;
            }
            for j in 0..classes {
                softmax[i * classes + j] = softmax[i * classes + j] / denom;
            }
            // -log softmax[label] = logsumexp - logit[label]
            loss = loss + denom.ln() + mx - row[labels[i]];
        }
        loss = loss / T::from_f64(bsz as f64);
        let rq = self.requires(logits);
        let softmax = Tensor::new(&s, softmax)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), softmax },
            rq,
        ))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Accumulates adjoints of every gradient-requiring variable reachable
    /// from `loss`, which must hold exactly one element. Grads are reset
    /// first, so calling this twice on one tape is safe and idempotent.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        for n in self.nodes.iter_mut() {
            n.grad.data_mut().fill(T::zero());
        }
        self.nodes[loss.0].grad.data_mut()[0] = T::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (parents, node) = self.nodes.split_at_mut(i);
            let node = &node[0];
            backprop_node(parents, node);
        }
        Ok(())
    }
}

/// Dispatches one node's adjoint into its parents. `parents` holds every
/// node with a smaller tape index, which by construction includes all of
/// this node's inputs.
fn backprop_node<T: Scalar>(parents: &mut [Node<T>], node: &Node<T>) {
    let g = node.grad.data();
    match &node.op {
        Op::Leaf => {}

        Op::Add { a, b } => {
            bcast_backward(parents, *a, node, |_, _| T::one());
            bcast_backward(parents, *b, node, |_, _| T::one());
        }

        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            if parents[a.0].requires_grad {
                let bv = parents[b.0].value.clone();
                let bs = bv.shape().to_vec();
                accumulate_bcast(parents, a, node, |_ai, oi, grads, bi_map| {
                    grads[oi] * bv.data()[bi_map]
                }, &bs);
            }
            if parents[b.0].requires_grad {
                let av = parents[a.0].value.clone();
                let as_ = av.shape().to_vec();
                accumulate_bcast(parents, b, node, |_bi, oi, grads, ai_map| {
                    grads[oi] * av.data()[ai_map]
                }, &as_);
            }
        }

        Op::Matmul { a, b } => {
            let (m, k) = {
                let s = parents[a.0].value.shape();
                (s[0], s[1])
            };
            let n = parents[b.0].value.shape()[1];
            if parents[a.0].requires_grad {
                // dA = dC * B^T
                let bd = parents[b.0].value.data().to_vec();
                let da = parents[a.0].grad.data_mut();
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] = da[i * k + p] + gij * bd[p * n + j];
                        }
                    }
                }
            }
            if parents[b.0].requires_grad {
                // dB = A^T * dC
                let ad = parents[a.0].value.data().to_vec();
                let db = parents[b.0].grad.data_mut();
                for i in 0..m {
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        for j in 0..n {
                            db[p * n + j] = db[p * n + j] + aip * g[i * n + j];
                        }
                    }
                }
            }
        }

        Op::Relu { x } => {
            if parents[x.0].requires_grad {
                let (xs, node_g) = (&parents[x.0], g);
                let mask: Vec<T> = xs
                    .value
                    .data()
                    .iter()
                    .zip(node_g)
                    .map(|(&v, &gg)| if v > T::zero() { gg } else { T::zero() })
                    .collect();
                let dst = parents[x.0].grad.data_mut();
                for (d, m) in dst.iter_mut().zip(mask) {
                    *d = *d + m;
                }
            }
        }

        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let axis_total = out_shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let a = parents[p.0].value.shape()[*axis];
                if parents[p.0].requires_grad {
                    let dst = parents[p.0].grad.data_mut();
                    for o in 0..outer {
                        let src_base = (o * axis_total + offset) * inner;
                        let dst_base = o * a * inner;
                        for t in 0..a * inner {
                            dst[dst_base + t] = dst[dst_base + t] + g[src_base + t];
                        }
                    }
                }
                offset += a;
            }
        }

        Op::Reshape { x } => {
            if parents[x.0].requires_grad {
                let dst = parents[x.0].grad.data_mut();
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
        }

        Op::SumAll { x } => {
            if parents[x.0].requires_grad {
                let gv = g[0];
                for d in parents[x.0].grad.data_mut() {
                    *d = *d + gv;
                }
            }
        }

        Op::Scale { x, c } => {
            if parents[x.0].requires_grad {
                let c = *c;
                let dst = parents[x.0].grad.data_mut();
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d = *d + s * c;
                }
            }
        }

        Op::Linear { x, w, b } => {
            let (bsz, nin) = {
                let s = parents[x.0].value.shape();
                (s[0], s[1])
            };
            let nout = parents[w.0].value.shape()[0];
            if parents[x.0].requires_grad {
                let wd = parents[w.0].value.data().to_vec();
                let dx = parents[x.0].grad.data_mut();
                for i in 0..bsz {
                    for o in 0..nout {
                        let gio = g[i * nout + o];
                        for j in 0..nin {
                            dx[i * nin + j] = dx[i * nin + j] + gio * wd[o * nin + j];
                        }
                    }
                }
            }
            if parents[w.0].requires_grad {
                let xd = parents[x.0].value.data().to_vec();
                let dw = parents[w.0].grad.data_mut();
                for i in 0..bsz {
                    for o in 0..nout {
                        let gio = g[i * nout + o];
                        for j in 0..nin {
                            dw[o * nin + j] = dw[o * nin + j] + gio * xd[i * nin + j];
                        }
                    }
                }
            }
            if parents[b.0].requires_grad {
                let db = parents[b.0].grad.data_mut();
                for i in 0..bsz {
                    for o in 0..nout {
                        db[o] = db[o] + g[i * nout + o];
                    }
                }
            }
        }

        Op::Conv2d { x, w, b, stride, pad } => {
            let (bsz, cin, h, wd_) = {
                let s = parents[x.0].value.shape();
                (s[0], s[1], s[2], s[3])
            };
            let (cout, kh, kw) = {
                let s = parents[w.0].value.shape();
                (s[0], s[2], s[3])
            };
            let os = node.value.shape();
            let (oh, ow) = (os[2], os[3]);
            let (stride, pad) = (*stride, *pad);

            if parents[b.0].requires_grad {
                let db = parents[b.0].grad.data_mut();
                for bi in 0..bsz {
                    for oc in 0..cout {
                        let obase = (bi * cout + oc) * oh * ow;
                        let mut acc = T::zero();
                        for t in 0..oh * ow {
                            acc = acc + g[obase + t];
                        }
                        db[oc] = db[oc] + acc;
                    }
                }
            }

            let need_dx = parents[x.0].requires_grad;
            let need_dw = parents[w.0].requires_grad;
            if need_dx || need_dw {
                let xd = parents[x.0].value.data().to_vec();
                let wv = parents[w.0].value.data().to_vec();
                // split_at_mut can't give two disjoint &mut at arbitrary
                // indices cheaply; accumulate locally then add once.
                let mut dx = if need_dx { vec![T::zero(); xd.len()] } else { Vec::new() };
                let mut dw = if need_dw { vec![T::zero(); wv.len()] } else { Vec::new() };
                for bi in 0..bsz {
                    for oc in 0..cout {
                        let obase = (bi * cout + oc) * oh * ow;
                        for ic in 0..cin {
                            let xbase = (bi * cin + ic) * h * wd_;
                            let wbase = (oc * cin + ic) * kh * kw;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let wgt = wv[wbase + ki * kw + kj];
                                    let mut wacc = T::zero();
                                    conv_scan(h, wd_, oh, ow, stride, pad, ki, kj, |orow, ocol, irow, icol| {
                                        let gv = g[obase + orow * ow + ocol];
                                        if need_dx {
                                            let xi = xbase + irow * wd_ + icol;
                                            dx[xi] = dx[xi] + gv * wgt;
                                        }
                                        if need_dw {
                                            wacc = wacc + gv * xd[xbase + irow * wd_ + icol];
                                        }
                                    });
                                    if need_dw {
                                        dw[wbase + ki * kw + kj] = dw[wbase + ki * kw + kj] + wacc;
                                    }
                                }
                            }
                        }
                    }
                }
                if need_dx {
                    let dst = parents[x.0].grad.data_mut();
                    for (d, s) in dst.iter_mut().zip(dx) {
                        *d = *d + s;
                    }
                }
                if need_dw {
                    let dst = parents[w.0].grad.data_mut();
                    for (d, s) in dst.iter_mut().zip(dw) {
                        *d = *d + s;
                    }
                }
            }
        }

        Op::MaxPool2d { x, argmax } => {
            if parents[x.0].requires_grad {
                let dst = parents[x.0].grad.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    dst[src] = dst[src] + g[o];
                }
            }
        }

        Op::AvgPool2d { x, k, stride } => {
            if parents[x.0].requires_grad {
                let (h, w) = {
                    let s = parents[x.0].value.shape();
                    (s[2], s[3])
                };
                let os = node.value.shape();
                let (bc, oh, ow) = (os[0] * os[1], os[2], os[3]);
                let inv = T::from_f64(1.0 / (k * k) as f64);
                let dst = parents[x.0].grad.data_mut();
                for t in 0..bc {
                    let xbase = t * h * w;
                    let obase = t * oh * ow;
                    for orow in 0..oh {
                        for ocol in 0..ow {
                            let gv = g[obase + orow * ow + ocol] * inv;
                            let (r0, c0) = (orow * stride, ocol * stride);
                            for dr in 0..*k {
                                for dc in 0..*k {
                                    let i = xbase + (r0 + dr) * w + (c0 + dc);
                                    dst[i] = dst[i] + gv;
                                }
                            }
                        }
                    }
                }
            }
        }

        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let shape = node.value.shape();
            let (bsz, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let n = bsz * spatial;
            let hd = xhat.data();

            if parents[beta.0].requires_grad {
                let db = parents[beta.0].grad.data_mut();
                bn_for_each(bsz, c, spatial, |ch, i| db[ch] = db[ch] + g[i]);
            }
            if parents[gamma.0].requires_grad {
                let dg = parents[gamma.0].grad.data_mut();
                bn_for_each(bsz, c, spatial, |ch, i| dg[ch] = dg[ch] + g[i] * hd[i]);
            }
            if parents[x.0].requires_grad {
                let gd = parents[gamma.0].value.data().to_vec();
                let dst = parents[x.0].grad.data_mut();
                if *train {
                    // dx = inv_std/N * (N*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                    let mut s1 = vec![T::zero(); c];
                    let mut s2 = vec![T::zero(); c];
                    bn_for_each(bsz, c, spatial, |ch, i| {
                        let dxh = g[i] * gd[ch];
                        s1[ch] = s1[ch] + dxh;
                        s2[ch] = s2[ch] + dxh * hd[i];
                    });
                    let nf = T::from_f64(n as f64);
                    bn_for_each(bsz, c, spatial, |ch, i| {
                        let dxh = g[i] * gd[ch];
                        let v = inv_std[ch] / nf * (nf * dxh - s1[ch] - hd[i] * s2[ch]);
                        dst[i] = dst[i] + v;
                    });
                } else {
                    bn_for_each(bsz, c, spatial, |ch, i| {
                        dst[i] = dst[i] + g[i] * gd[ch] * inv_std[ch];
                    });
                }
            }
        }

        Op::SoftmaxCrossEntropy { logits, labels, softmax } => {
            if parents[logits.0].requires_grad {
                let (bsz, classes) = {
                    let s = softmax.shape();
                    (s[0], s[1])
                };
                let gv = g[0] / T::from_f64(bsz as f64);
                let sm = softmax.data();
                let dst = parents[logits.0].grad.data_mut();
                for i in 0..bsz {
                    for j in 0..classes {
                        let onehot = if labels[i] == j { T::one() } else { T::zero() };
                        dst[i * classes + j] = dst[i * classes + j] + gv * (sm[i * classes + j] - onehot);
                    }
                }
            }
        }
    }
}

// ── helpers ─────────────────────────────────────────────────────────

pub(crate) fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Visits every (output row/col, input row/col) pair for one kernel offset,
/// restricted to in-bounds input positions.
fn conv_scan(
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    ki: usize,
    kj: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let row_range = valid_out_range(h, oh, stride, pad, ki);
    let col_range = valid_out_range(w, ow, stride, pad, kj);
    for orow in row_range.clone() {
        let irow = orow * stride + ki - pad;
        for ocol in col_range.clone() {
            let icol = ocol * stride + kj - pad;
            f(orow, ocol, irow, icol);
        }
    }
}

/// Output positions whose input index `o*stride + k - pad` lies in `[0, size)`.
fn valid_out_range(size: usize, osize: usize, stride: usize, pad: usize, k: usize) -> std::ops::Range<usize> {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_num = size + pad;
    if hi_num <= k {
        return 0..0;
    }
    let hi = ((hi_num - k - 1) / stride + 1).min(osize);
    lo.min(hi)..hi
}

fn pool_geometry(shape: &[usize], k: usize, stride: usize, op: &'static str) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::contract(op, format!("input must be rank 4, got {shape:?}")));
    }
    if k == 0 || stride == 0 {
        return Err(Error::contract(op, "kernel and stride must be positive"));
    }
    let (h, w) = (shape[2], shape[3]);
    if h < k || w < k {
        return Err(Error::contract(
            op,
            format!("window {k}x{k} larger than input {h}x{w}"),
        ));
    }
    Ok((shape.to_vec(), (h - k) / stride + 1, (w - k) / stride + 1))
}

fn bn_geometry(xs: &[usize], gs: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if xs.len() != 2 && xs.len() != 4 {
        return Err(Error::contract(op, format!("input must be rank 2 or 4, got {xs:?}")));
    }
    let c = xs[1];
    if gs != [c] {
        return Err(Error::DimensionMismatch { op: "batchnorm", lhs: xs.to_vec(), rhs: gs.to_vec() });
    }
    let spatial: usize = xs[2..].iter().product();
    Ok((c, xs[0] * spatial, spatial))
}

fn bn_reduce<T: Scalar>(xd: &[T], bsz: usize, c: usize, spatial: usize, mut f: impl FnMut(usize, T)) {
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for s in 0..spatial {
                f(ch, xd[base + s]);
            }
        }
    }
}

fn bn_map<T: Scalar>(xd: &[T], bsz: usize, c: usize, spatial: usize, mut f: impl FnMut(usize, usize, T)) {
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for s in 0..spatial {
                f(ch, base + s, xd[base + s]);
            }
        }
    }
}

fn bn_for_each(bsz: usize, c: usize, spatial: usize, mut f: impl FnMut(usize, usize)) {
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for s in 0..spatial {
                f(ch, base + s);
            }
        }
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..n {
                c[i * n + j] = c[i * n + j] + aip * b[p * n + j];
            }
        }
    }
    c
}

/// Right-aligned broadcast shape, or a dimension error naming both shapes.
fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = dim_at(a, d, rank);
        let db = dim_at(b, d, rank);
        out[d] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::DimensionMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        };
    }
    Ok(out)
}

fn dim_at(shape: &[usize], d: usize, rank: usize) -> usize {
    let offset = rank - shape.len();
    if d < offset {
        1
    } else {
        shape[d - offset]
    }
}

/// Strides into `shape` as seen from `out` (0 on broadcast dims).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        let dim = dim_at(shape, d, rank);
        strides[d] = if dim == 1 { 0 } else { acc };
        if dim != 1 {
            acc *= dim;
        }
    }
    strides
}

/// Iterates output elements yielding (out, a, b) flat indices.
fn for_each_bcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let sa = bcast_strides(a, out);
    let sb = bcast_strides(b, out);
    let mut coords = vec![0usize; out.len()];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..numel {
        f(oi, ai, bi);
        for d in (0..out.len()).rev() {
            coords[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if coords[d] < out[d] {
                break;
            }
            coords[d] = 0;
            ai -= sa[d] * out[d];
            bi -= sb[d] * out[d];
        }
    }
}

fn bcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape(), op)?;
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(&out_shape, data);
    }
    let mut data = vec![T::zero(); out_shape.iter().product()];
    for_each_bcast(&out_shape, a.shape(), b.shape(), |oi, ai, bi| {
        data[oi] = f(a.data()[ai], b.data()[bi]);
    });
    Tensor::new(&out_shape, data)
}

/// Adds `weight(parent_idx, out_idx) * grad[out_idx]` into a broadcast
/// parent of an elementwise op. For `add` the weight is 1.
fn bcast_backward<T: Scalar>(
    parents: &mut [Node<T>],
    p: VarId,
    node: &Node<T>,
    weight: impl Fn(usize, usize) -> T,
) {
    if !parents[p.0].requires_grad {
        return;
    }
    let g = node.grad.data();
    let out_shape = node.value.shape().to_vec();
    let p_shape = parents[p.0].value.shape().to_vec();
    let dst = parents[p.0].grad.data_mut();
    if p_shape == out_shape {
        for (d, (&gv, oi)) in dst.iter_mut().zip(g.iter().zip(0..)) {
            *d = *d + gv * weight(oi, oi);
        }
        return;
    }
    for_each_bcast(&out_shape, &p_shape, &p_shape, |oi, pi, _| {
        dst[pi] = dst[pi] + g[oi] * weight(pi, oi);
    });
}

/// Backward for `mul`: routes `grad * other_value` into parent `p`,
/// summing over broadcast dimensions.
fn accumulate_bcast<T: Scalar>(
    parents: &mut [Node<T>],
    p: VarId,
    node: &Node<T>,
    contrib: impl Fn(usize, usize, &[T], usize) -> T,
    other_shape: &[usize],
) {
    let g = node.grad.data().to_vec();
    let out_shape = node.value.shape().to_vec();
    let p_shape = parents[p.0].value.shape().to_vec();
    let sother = bcast_strides(other_shape, &out_shape);
    let sp = bcast_strides(&p_shape, &out_shape);
    let dst = parents[p.0].grad.data_mut();

    if out_shape.is_empty() {
        dst[0] = dst[0] + contrib(0, 0, &g, 0);
        return;
    }
    let numel: usize = out_shape.iter().product();
    let mut coords = vec![0usize; out_shape.len()];
    let (mut pi, mut oi2) = (0usize, 0usize);
    for oi in 0..numel {
        dst[pi] = dst[pi] + contrib(pi, oi, &g, oi2);
        for d in (0..out_shape.len()).rev() {
            coords[d] += 1;
            pi += sp[d];
            oi2 += sother[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            pi -= sp[d] * out_shape[d];
            oi2 -= sother[d] * out_shape[d];
        }
    }
}
