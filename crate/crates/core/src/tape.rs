//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive is recorded on a [`Tape`]; [`Tape::backward`] replays the
//! record in reverse and accumulates adjoints into every leaf created with
//! `requires_grad = true`. Values are immutable once recorded. A tape can be
//! consumed by backward exactly once; a second call without re-recording the
//! forward pass is an error.
//!
//! Broadcasting is deliberately narrow: elementwise ops broadcast only a
//! trailing-suffix right operand over leading batch axes, and matmul
//! broadcasts only a missing batch prefix. Anything else needs an explicit
//! reshape, which keeps every adjoint rule small and testable.

use crate::error::{Error, Result};
use crate::tensor::{strides, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Training vs inference behaviour for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Running mean/variance buffers of one batch-norm site. Not learnable;
/// updated in place during training forwards.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<E> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

impl<E: Real> BnStats<E> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], E::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }
}

enum Op<E> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: E },
    Relu { a: Var },
    Exp { a: Var },
    Ln { a: Var },
    Softmax { a: Var, axis: usize },
    Matmul { a: Var, b: Var },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    MeanAxes { a: Var, axes: Vec<usize> },
    SumAll { a: Var },
    Dropout { a: Var, mask: Tensor<E> },
    TemporalConv { x: Var, w: Var, stride: usize, pad: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<E>,
        inv_std: Tensor<E>,
    },
    CrossEntropy {
        logits: Var,
        probs: Tensor<E>,
        targets: Vec<usize>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Ordered record of primitive operations. Single-threaded by construction.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    // Node ids of batch-norm sites recorded in eval phase; their adjoint
    // skips the coupling through batch statistics.
    eval_bn: Vec<usize>,
    spent: bool,
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Real> Gradients<E> {
    /// Gradient accumulated for a leaf, if it required one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            eval_bn: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input value. Gradients are accumulated for it iff
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a non-differentiated input value.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(E, E) -> E) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcastable(sa, sb) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let bn = bv.numel();
        let mut out = Vec::with_capacity(av.numel());
        for (i, &x) in av.data().iter().enumerate() {
            out.push(f(x, bv.data()[i % bn]));
        }
        let value = Tensor::from_vec(sa, out)?;
        let needs = self.needs(a) || self.needs(b);
        let op = match name {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(value, op, needs))
    }

    /// Multiplication by a compile-time constant; the constant gets no
    /// gradient.
    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let value = map_tensor(&self.nodes[a.0].value, |x| x * c);
        let needs = self.needs(a);
        self.push(value, Op::Scale { a, c }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = map_tensor(&self.nodes[a.0].value, |x| x.maximum(E::zero()));
        let needs = self.needs(a);
        self.push(value, Op::Relu { a }, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = map_tensor(&self.nodes[a.0].value, |x| x.exp());
        let needs = self.needs(a);
        self.push(value, Op::Exp { a }, needs)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = map_tensor(&self.nodes[a.0].value, |x| x.ln());
        let needs = self.needs(a);
        self.push(value, Op::Ln { a }, needs)
    }

    // ── Softmax ─────────────────────────────────────────────────────────

    /// Softmax along one axis, stabilized by max subtraction. Every slice of
    /// the output along `axis` sums to 1.
    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax_axis: axis {axis} out of bounds for shape {shape:?}"
            )));
        }
        let src = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = src.data().to_vec();
        for o in 0..outer {
            for r in 0..inner {
                let base = o * len * inner + r;
                let mut mx = out[base];
                for l in 1..len {
                    mx = mx.maximum(out[base + l * inner]);
                }
                let mut sum = E::zero();
                for l in 0..len {
                    let idx = base + l * inner;
                    let e = (out[idx] - mx).exp();
                    out[idx] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    let idx = base + l * inner;
                    out[idx] = out[idx] / sum;
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Softmax { a, axis }, needs))
    }

    // ── Matrix multiplication ───────────────────────────────────────────

    /// Batched matrix product `[.., P, Q] × [.., Q, R] -> [.., P, R]`.
    /// Batch prefixes must be equal, or one side may omit its prefix
    /// entirely and is then shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (pa, m, ka) = (&sa[..sa.len() - 2], sa[sa.len() - 2], sa[sa.len() - 1]);
        let (pb, kb, n) = (&sb[..sb.len() - 2], sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(mismatch());
        }
        if !(pa == pb || pa.is_empty() || pb.is_empty()) {
            return Err(mismatch());
        }
        let prefix: Vec<usize> = if pa.is_empty() { pb.to_vec() } else { pa.to_vec() };
        let batch: usize = prefix.iter().product();
        let k = ka;
        let mut oshape = prefix.clone();
        oshape.push(m);
        oshape.push(n);
        let mut out = vec![E::zero(); batch * m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for i in 0..batch {
                let ao = if pa.is_empty() { 0 } else { i * m * k };
                let bo = if pb.is_empty() { 0 } else { i * k * n };
                mm_nn(
                    &ad[ao..ao + m * k],
                    &bd[bo..bo + k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::from_vec(&oshape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul { a, b }, needs))
    }

    // ── Shape manipulation ──────────────────────────────────────────────

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        if !is_permutation(axes, shape.len()) {
            return Err(Error::invalid(format!(
                "permute: {axes:?} is not a permutation of 0..{}",
                shape.len()
            )));
        }
        let value = permute_copy(&self.nodes[a.0].value, axes);
        let needs = self.needs(a);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let value = Tensor::from_vec(shape, src.data().to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape { a }, needs))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Mean over the given axes; the reduced axes are removed from the
    /// shape. Reducing every axis yields a scalar.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut ax = axes.to_vec();
        ax.sort_unstable();
        ax.dedup();
        if ax.len() != axes.len() || ax.iter().any(|&d| d >= shape.len()) || ax.is_empty() {
            return Err(Error::invalid(format!(
                "mean_axes: bad axes {axes:?} for shape {shape:?}"
            )));
        }
        let (oshape, map_stride, count) = reduce_plan(&shape, &ax);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![E::zero(); oshape.iter().product::<usize>().max(1)];
        for_each_mapped(&shape, &map_stride, |i, o| {
            out[o] = out[o] + src[i];
        });
        let inv = E::from_f64(1.0 / count as f64);
        for v in &mut out {
            *v = *v * inv;
        }
        let value = Tensor::from_vec(&oshape, out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::MeanAxes { a, axes: ax }, needs))
    }

    /// Sum of every element; yields a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = E::zero();
        for &v in self.nodes[a.0].value.data() {
            s = s + v;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, needs)
    }

    // ── Regularization / normalization ──────────────────────────────────

    /// Inverted dropout: in training each element survives with probability
    /// `1 - rate` and is scaled by `1/(1 - rate)`; in eval (or at rate 0)
    /// this is the identity and records nothing. The mask is drawn from a
    /// dedicated stream seeded by `seed`, so replays are bit-identical.
    pub fn dropout(&mut self, a: Var, rate: f64, phase: Phase, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout: rate {rate} outside [0, 1)"
            )));
        }
        if phase == Phase::Eval || rate == 0.0 {
            return Ok(a);
        }
        let src = &self.nodes[a.0].value;
        let keep = E::from_f64(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask_data: Vec<E> = (0..src.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    E::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = Tensor::from_vec(src.shape(), mask_data)?;
        let out: Vec<E> = src
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::from_vec(src.shape(), out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Dropout { a, mask }, needs))
    }

    /// Kt×1 convolution along the temporal axis of `[B, C, T, N]` with
    /// weights `[C_out, C_in, Kt, 1]`; the joint axis is untouched.
    /// Output length is `(T + 2·pad − Kt) / stride + 1`. Even Kt is
    /// rejected because symmetric same-length padding would be undefined.
    pub fn temporal_conv(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "temporal_conv",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 4 || ws.len() != 4 || ws[3] != 1 || ws[1] != xs[1] {
            return Err(mismatch());
        }
        let (b, c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, ci, kt) = (ws[0], ws[1], ws[2]);
        if kt % 2 == 0 {
            return Err(Error::invalid(format!(
                "temporal_conv: kernel size {kt} is even; padding symmetry undefined"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("temporal_conv: stride must be positive"));
        }
        let tp = tconv_out_len(t, kt, stride, pad).ok_or_else(|| {
            Error::invalid(format!(
                "temporal_conv: T={t} with pad={pad} is shorter than kernel {kt}"
            ))
        })?;
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let mut out = vec![E::zero(); b * co * tp * n];
        for bi in 0..b {
            for o in 0..co {
                let o_base = ((bi * co + o) * tp) * n;
                for i in 0..ci {
                    let x_base = ((bi * c + i) * t) * n;
                    for kk in 0..kt {
                        let wv = wd[(o * ci + i) * kt + kk];
                        for tt in 0..tp {
                            let tx = (tt * stride + kk) as isize - pad as isize;
                            if tx < 0 || tx >= t as isize {
                                continue;
                            }
                            let xrow = &xd[x_base + tx as usize * n..][..n];
                            let orow = &mut out[o_base + tt * n..o_base + (tt + 1) * n];
                            for (ov, &xv) in orow.iter_mut().zip(xrow) {
                                *ov = *ov + wv * xv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b, co, tp, n], out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::TemporalConv { x, w, stride, pad }, needs))
    }

    /// Batch normalization over channel axis 1; statistics are taken over
    /// every other axis. Training normalizes by batch statistics (biased
    /// variance) and folds them into `stats` with the given momentum; eval
    /// normalizes by `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<E>,
        phase: Phase,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(format!(
                "batch_norm: need at least 2 axes, got shape {shape:?}"
            )));
        }
        let c = shape[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(v).to_vec(),
                });
            }
            let _ = name;
        }
        if stats.channels() != c {
            return Err(Error::invalid(format!(
                "batch_norm: running stats have {} channels, input has {c}",
                stats.channels()
            )));
        }
        let lead = shape[0];
        let rest: usize = shape[2..].iter().product();
        let m = lead * rest;
        let src = self.nodes[x.0].value.data();
        let eps_e = E::from_f64(eps);

        let (mean, var) = match phase {
            Phase::Train => {
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                let inv_m = E::from_f64(1.0 / m as f64);
                for ch in 0..c {
                    let mut s = E::zero();
                    for l in 0..lead {
                        let base = (l * c + ch) * rest;
                        for r in 0..rest {
                            s = s + src[base + r];
                        }
                    }
                    mean[ch] = s * inv_m;
                    let mut v = E::zero();
                    for l in 0..lead {
                        let base = (l * c + ch) * rest;
                        for r in 0..rest {
                            let d = src[base + r] - mean[ch];
                            v = v + d * d;
                        }
                    }
                    var[ch] = v * inv_m;
                }
                let mom = E::from_f64(momentum);
                let keep = E::one() - mom;
                for ch in 0..c {
                    let rm = stats.mean.data()[ch];
                    let rv = stats.var.data()[ch];
                    stats.mean.data_mut()[ch] = keep * rm + mom * mean[ch];
                    stats.var.data_mut()[ch] = keep * rv + mom * var[ch];
                }
                (mean, var)
            }
            Phase::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
        };

        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps_e).sqrt()).collect();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut xhat = vec![E::zero(); src.len()];
        let mut out = vec![E::zero(); src.len()];
        for l in 0..lead {
            for ch in 0..c {
                let base = (l * c + ch) * rest;
                let (mu, istd, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for r in 0..rest {
                    let h = (src[base + r] - mu) * istd;
                    xhat[base + r] = h;
                    out[base + r] = g * h + b;
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: Tensor::from_vec(&shape, xhat)?,
            inv_std: Tensor::from_vec(&[c], inv_std)?,
        };
        let v = self.push(value, op, needs);
        if phase == Phase::Eval {
            self.eval_bn.push(v.0);
        }
        Ok(v)
    }

    // ── Fused loss ──────────────────────────────────────────────────────

    /// Mean cross-entropy of `logits` `[B, K]` against integer targets,
    /// computed through a stabilized log-sum-exp. The adjoint is
    /// `(softmax - onehot) / B`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "cross_entropy: logits must be [B, K], got {shape:?}"
            )));
        }
        let (b, k) = (shape[0], shape[1]);
        if targets.len() != b {
            return Err(Error::invalid(format!(
                "cross_entropy: {b} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {t} out of range for {k} classes"
            )));
        }
        let src = self.nodes[logits.0].value.data();
        let mut probs = vec![E::zero(); b * k];
        let mut total = E::zero();
        for row in 0..b {
            let base = row * k;
            let mut mx = src[base];
            for j in 1..k {
                mx = mx.maximum(src[base + j]);
            }
            let mut sum = E::zero();
            for j in 0..k {
                let e = (src[base + j] - mx).exp();
                probs[base + j] = e;
                sum = sum + e;
            }
            for j in 0..k {
                probs[base + j] = probs[base + j] / sum;
            }
            let lse = sum.ln() + mx;
            total = total + (lse - src[base + targets[row]]);
        }
        let loss = total * E::from_f64(1.0 / b as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs: Tensor::from_vec(&[b, k], probs)?,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Replays the tape in reverse from a scalar loss, accumulating
    /// gradients for every `requires_grad` leaf. Consumes the tape: calling
    /// it a second time without re-recording is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>> {
        if self.spent {
            return Err(Error::invalid(
                "backward: tape already consumed; re-record the forward pass",
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::scalar(E::one()));
        }
        let eval_bn: std::collections::HashSet<usize> = self.eval_bn.iter().copied().collect();
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        add_into(slot(&mut grads, a, self.shape(a)), g.data());
                    }
                    if self.needs(b) {
                        reduce_suffix_into(slot(&mut grads, b, self.shape(b)), g.data(), |x| x);
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        add_into(slot(&mut grads, a, self.shape(a)), g.data());
                    }
                    if self.needs(b) {
                        reduce_suffix_into(slot(&mut grads, b, self.shape(b)), g.data(), |x| {
                            -x
                        });
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let bn = bd.len();
                    if self.needs(a) {
                        let ga = slot(&mut grads, a, self.shape(a));
                        for (i, gv) in g.data().iter().enumerate() {
                            ga.data_mut()[i] = ga.data_mut()[i] + *gv * bd[i % bn];
                        }
                    }
                    if self.needs(b) {
                        let gb = slot(&mut grads, b, self.shape(b));
                        for (i, gv) in g.data().iter().enumerate() {
                            gb.data_mut()[i % bn] = gb.data_mut()[i % bn] + *gv * ad[i];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    if self.needs(a) {
                        let ga = slot(&mut grads, a, self.shape(a));
                        for (gv, o) in g.data().iter().zip(ga.data_mut()) {
                            *o = *o + *gv * c;
                        }
                    }
                }
                Op::Relu { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let xd = self.nodes[a.0].value.data();
                        let ga = slot(&mut grads, a, self.shape(a));
                        for i in 0..xd.len() {
                            if xd[i] > E::zero() {
                                ga.data_mut()[i] = ga.data_mut()[i] + g.data()[i];
                            }
                        }
                    }
                }
                Op::Exp { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let yd = self.nodes[id].value.data();
                        let ga = slot(&mut grads, a, self.shape(a));
                        for i in 0..yd.len() {
                            ga.data_mut()[i] = ga.data_mut()[i] + g.data()[i] * yd[i];
                        }
                    }
                }
                Op::Ln { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let xd = self.nodes[a.0].value.data();
                        let ga = slot(&mut grads, a, self.shape(a));
                        for i in 0..xd.len() {
                            ga.data_mut()[i] = ga.data_mut()[i] + g.data()[i] / xd[i];
                        }
                    }
                }
                Op::Softmax { a, axis } => {
                    let (a, axis) = (*a, *axis);
                    if self.needs(a) {
                        let yd = self.nodes[id].value.data();
                        let shape = self.shape(a).to_vec();
                        let (outer, len, inner) = axis_split(&shape, axis);
                        let ga = slot(&mut grads, a, &shape);
                        let gd = g.data();
                        for o in 0..outer {
                            for r in 0..inner {
                                let base = o * len * inner + r;
                                let mut dot = E::zero();
                                for l in 0..len {
                                    let idx = base + l * inner;
                                    dot = dot + gd[idx] * yd[idx];
                                }
                                for l in 0..len {
                                    let idx = base + l * inner;
                                    ga.data_mut()[idx] =
                                        ga.data_mut()[idx] + yd[idx] * (gd[idx] - dot);
                                }
                            }
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let (pa, m, k) = (&sa[..sa.len() - 2], sa[sa.len() - 2], sa[sa.len() - 1]);
                    let (pb, _, n) = (&sb[..sb.len() - 2], sb[sb.len() - 2], sb[sb.len() - 1]);
                    let batch = if pa.is_empty() {
                        pb.iter().product::<usize>()
                    } else {
                        pa.iter().product::<usize>()
                    };
                    let ad = self.nodes[a.0].value.data();
                    let bd = self.nodes[b.0].value.data();
                    let gd = g.data();
                    if self.needs(a) {
                        let mut bt = vec![E::zero(); k * n];
                        let ga = slot(&mut grads, a, &sa);
                        for i in 0..batch {
                            let bo = if pb.is_empty() { 0 } else { i * k * n };
                            transpose(&bd[bo..bo + k * n], k, n, &mut bt);
                            let ao = if pa.is_empty() { 0 } else { i * m * k };
                            mm_nn(
                                &gd[i * m * n..(i + 1) * m * n],
                                &bt,
                                m,
                                n,
                                k,
                                &mut ga.data_mut()[ao..ao + m * k],
                            );
                        }
                    }
                    if self.needs(b) {
                        let mut at = vec![E::zero(); m * k];
                        let gb = slot(&mut grads, b, &sb);
                        for i in 0..batch {
                            let ao = if pa.is_empty() { 0 } else { i * m * k };
                            transpose(&ad[ao..ao + m * k], m, k, &mut at);
                            let bo = if pb.is_empty() { 0 } else { i * k * n };
                            mm_nn(
                                &at,
                                &gd[i * m * n..(i + 1) * m * n],
                                k,
                                m,
                                n,
                                &mut gb.data_mut()[bo..bo + k * n],
                            );
                        }
                    }
                }
                Op::Permute { a, axes } => {
                    let a = *a;
                    if self.needs(a) {
                        let mut inv = vec![0usize; axes.len()];
                        for (d, &ax) in axes.iter().enumerate() {
                            inv[ax] = d;
                        }
                        let back = permute_copy(&g, &inv);
                        add_into(slot(&mut grads, a, self.shape(a)), back.data());
                    }
                }
                Op::Reshape { a } => {
                    let a = *a;
                    if self.needs(a) {
                        add_into(slot(&mut grads, a, self.shape(a)), g.data());
                    }
                }
                Op::MeanAxes { a, axes } => {
                    let a = *a;
                    if self.needs(a) {
                        let shape = self.shape(a).to_vec();
                        let (_, map_stride, count) = reduce_plan(&shape, axes);
                        let inv = E::from_f64(1.0 / count as f64);
                        let ga = slot(&mut grads, a, &shape);
                        let gd = g.data();
                        let out = ga.data_mut();
                        for_each_mapped(&shape, &map_stride, |i, o| {
                            out[i] = out[i] + gd[o] * inv;
                        });
                    }
                }
                Op::SumAll { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let gv = g.item();
                        let ga = slot(&mut grads, a, self.shape(a));
                        for o in ga.data_mut() {
                            *o = *o + gv;
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    let a = *a;
                    if self.needs(a) {
                        let md = mask.data();
                        let ga = slot(&mut grads, a, self.shape(a));
                        for i in 0..md.len() {
                            ga.data_mut()[i] = ga.data_mut()[i] + g.data()[i] * md[i];
                        }
                    }
                }
                Op::TemporalConv { x, w, stride, pad } => {
                    let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                    let xs = self.shape(x).to_vec();
                    let ws = self.shape(w).to_vec();
                    let xd = self.nodes[x.0].value.data();
                    let wd = self.nodes[w.0].value.data();
                    if self.needs(x) {
                        let gx = slot(&mut grads, x, &xs);
                        tconv_backward_x(gx.data_mut(), g.data(), wd, &xs, &ws, stride, pad);
                    }
                    if self.needs(w) {
                        let gw = slot(&mut grads, w, &ws);
                        tconv_backward_w(gw.data_mut(), g.data(), xd, &xs, &ws, stride, pad);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let shape = self.shape(x).to_vec();
                    let c = shape[1];
                    let lead = shape[0];
                    let rest: usize = shape[2..].iter().product();
                    let m = lead * rest;
                    let gd = g.data();
                    let hd = xhat.data();
                    let mut sum_g = vec![E::zero(); c];
                    let mut sum_gh = vec![E::zero(); c];
                    for l in 0..lead {
                        for ch in 0..c {
                            let base = (l * c + ch) * rest;
                            for r in 0..rest {
                                sum_g[ch] = sum_g[ch] + gd[base + r];
                                sum_gh[ch] = sum_gh[ch] + gd[base + r] * hd[base + r];
                            }
                        }
                    }
                    if self.needs(gamma) {
                        add_into(slot(&mut grads, gamma, &[c]), &sum_gh);
                    }
                    if self.needs(beta) {
                        add_into(slot(&mut grads, beta, &[c]), &sum_g);
                    }
                    if self.needs(x) {
                        let gam = self.nodes[gamma.0].value.data();
                        let istd = inv_std.data();
                        let train = !eval_bn.contains(&id);
                        let inv_m = E::from_f64(1.0 / m as f64);
                        let gx = slot(&mut grads, x, &shape);
                        for l in 0..lead {
                            for ch in 0..c {
                                let base = (l * c + ch) * rest;
                                let scale = gam[ch] * istd[ch];
                                if train {
                                    let mg = sum_g[ch] * inv_m;
                                    let mgh = sum_gh[ch] * inv_m;
                                    for r in 0..rest {
                                        let d = gd[base + r] - mg - hd[base + r] * mgh;
                                        gx.data_mut()[base + r] =
                                            gx.data_mut()[base + r] + scale * d;
                                    }
                                } else {
                                    for r in 0..rest {
                                        gx.data_mut()[base + r] =
                                            gx.data_mut()[base + r] + scale * gd[base + r];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                } => {
                    let logits = *logits;
                    if self.needs(logits) {
                        let (b, k) = (probs.shape()[0], probs.shape()[1]);
                        let gs = g.item() * E::from_f64(1.0 / b as f64);
                        let gl = slot(&mut grads, logits, &[b, k]);
                        let pd = probs.data();
                        for row in 0..b {
                            for j in 0..k {
                                let mut v = pd[row * k + j];
                                if j == targets[row] {
                                    v = v - E::one();
                                }
                                gl.data_mut()[row * k + j] = gl.data_mut()[row * k + j] + gs * v;
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn slot<'g, E: Real>(
    grads: &'g mut [Option<Tensor<E>>],
    v: Var,
    shape: &[usize],
) -> &'g mut Tensor<E> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into<E: Real>(dst: &mut Tensor<E>, src: &[E]) {
    for (o, &s) in dst.data_mut().iter_mut().zip(src) {
        *o = *o + s;
    }
}

/// Accumulates `src` (shaped like the op output) into a suffix-broadcast
/// operand's gradient, applying `f` (identity or negation) per element.
fn reduce_suffix_into<E: Real>(dst: &mut Tensor<E>, src: &[E], f: fn(E) -> E) {
    let bn = dst.numel();
    let d = dst.data_mut();
    for (i, &s) in src.iter().enumerate() {
        d[i % bn] = d[i % bn] + f(s);
    }
}

fn suffix_broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn is_permutation(axes: &[usize], ndim: usize) -> bool {
    if axes.len() != ndim {
        return false;
    }
    let mut seen = vec![false; ndim];
    for &a in axes {
        if a >= ndim || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn map_tensor<E: Real>(src: &Tensor<E>, f: impl Fn(E) -> E) -> Tensor<E> {
    Tensor::from_vec(src.shape(), src.data().iter().map(|&x| f(x)).collect()).unwrap()
}

/// `out[m,n] += a[m,k] × b[k,n]`, row-major. The i-k-j ordering keeps the
/// inner loop contiguous on both `b` and `out`.
fn mm_nn<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

fn transpose<E: Real>(a: &[E], m: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

fn permute_copy<E: Real>(src: &Tensor<E>, axes: &[usize]) -> Tensor<E> {
    let ishape = src.shape();
    let istr = strides(ishape);
    let oshape: Vec<usize> = axes.iter().map(|&a| ishape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| istr[a]).collect();
    let n = src.numel();
    let mut out = vec![E::zero(); n];
    let mut coord = vec![0usize; oshape.len()];
    let mut in_off = 0usize;
    let sd = src.data();
    for o in out.iter_mut() {
        *o = sd[in_off];
        for d in (0..oshape.len()).rev() {
            coord[d] += 1;
            in_off += step[d];
            if coord[d] < oshape[d] {
                break;
            }
            in_off -= step[d] * oshape[d];
            coord[d] = 0;
        }
    }
    Tensor::from_vec(&oshape, out).unwrap()
}

/// Reduction bookkeeping: output shape, per-input-axis output stride
/// (0 for reduced axes), and the number of elements folded into each output.
fn reduce_plan(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let reduced: Vec<bool> = (0..shape.len()).map(|d| axes.contains(&d)).collect();
    let oshape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !reduced[*d])
        .map(|(_, &s)| s)
        .collect();
    let ostr = strides(&oshape);
    let mut map_stride = vec![0usize; shape.len()];
    let mut oi = 0;
    for d in 0..shape.len() {
        if !reduced[d] {
            map_stride[d] = ostr[oi];
            oi += 1;
        }
    }
    let count: usize = axes.iter().map(|&d| shape[d]).product();
    (oshape, map_stride, count)
}

/// Walks every linear input index together with its mapped output offset.
fn for_each_mapped(shape: &[usize], map_stride: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    let mut coord = vec![0usize; shape.len()];
    let mut out_off = 0usize;
    for i in 0..n {
        f(i, out_off);
        for d in (0..shape.len()).rev() {
            coord[d] += 1;
            out_off += map_stride[d];
            if coord[d] < shape[d] {
                break;
            }
            out_off -= map_stride[d] * shape[d];
            coord[d] = 0;
        }
    }
}

fn tconv_out_len(t: usize, kt: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = t + 2 * pad;
    if padded < kt {
        return None;
    }
    Some((padded - kt) / stride + 1)
}

fn tconv_backward_x<E: Real>(
    gx: &mut [E],
    g: &[E],
    w: &[E],
    xs: &[usize],
    ws: &[usize],
    stride: usize,
    pad: usize,
) {
    let (b, c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, ci, kt) = (ws[0], ws[1], ws[2]);
    let tp = tconv_out_len(t, kt, stride, pad).unwrap();
    for bi in 0..b {
        for o in 0..co {
            let g_base = ((bi * co + o) * tp) * n;
            for i in 0..ci {
                let x_base = ((bi * c + i) * t) * n;
                for kk in 0..kt {
                    let wv = w[(o * ci + i) * kt + kk];
                    for tt in 0..tp {
                        let tx = (tt * stride + kk) as isize - pad as isize;
                        if tx < 0 || tx >= t as isize {
                            continue;
                        }
                        let xrow = x_base + tx as usize * n;
                        let grow = g_base + tt * n;
                        for j in 0..n {
                            gx[xrow + j] = gx[xrow + j] + wv * g[grow + j];
                        }
                    }
                }
            }
        }
    }
}

fn tconv_backward_w<E: Real>(
    gw: &mut [E],
    g: &[E],
    x: &[E],
    xs: &[usize],
    ws: &[usize],
    stride: usize,
    pad: usize,
) {
    let (b, c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, ci, kt) = (ws[0], ws[1], ws[2]);
    let tp = tconv_out_len(t, kt, stride, pad).unwrap();
    for bi in 0..b {
        for o in 0..co {
            let g_base = ((bi * co + o) * tp) * n;
            for i in 0..ci {
                let x_base = ((bi * c + i) * t) * n;
                for kk in 0..kt {
                    let mut acc = E::zero();
                    for tt in 0..tp {
                        let tx = (tt * stride + kk) as isize - pad as isize;
                        if tx < 0 || tx >= t as isize {
                            continue;
                        }
                        let xrow = x_base + tx as usize * n;
                        let grow = g_base + tt * n;
                        for j in 0..n {
                            acc = acc + g[grow + j] * x[xrow + j];
                        }
                    }
                    let wi = (o * ci + i) * kt + kk;
                    gw[wi] = gw[wi] + acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::zeros(&[3, 3]));
        let a = tape.constant(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(z, a).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 8;
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Independent i-j-k loop order.
        let mut want = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..n {
                    s += a[i * n + p] * b[p * n + j];
                }
                want[i * n + j] = s;
            }
        }
        let mut tape = Tape::new();
        let av = tape.constant(t64(&[n, n], &a));
        let bv = tape.constant(t64(&[n, n], &b));
        let y = tape.matmul(av, bv).unwrap();
        let got = tape.value(y);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn matmul_broadcasts_missing_prefix() {
        let mut tape = Tape::new();
        let w = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
        let x = tape.constant(t64(&[3, 2, 1], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]));
        let y = tape.matmul(w, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 1, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax_axis(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic_two_class() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2], &[0.0, 2.0f64.ln()]));
        let y = tape.softmax_axis(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        // Exact-representable inputs and shift give bit-identical outputs.
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[3], &[0.0, 1.0, 2.0]));
        let xs = tape.constant(t64(&[3], &[2.0, 3.0, 4.0]));
        let y = tape.softmax_axis(x, 0).unwrap();
        let ys = tape.softmax_axis(xs, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(ys).data());
    }

    #[test]
    fn temporal_conv_kernel_one_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 1, 3, 1], &[1.0, 2.0, 3.0]));
        let w = tape.constant(t64(&[1, 1, 1, 1], &[1.0]));
        let y = tape.temporal_conv(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn temporal_conv_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 1, 3, 1], &[1.0, 2.0, 3.0]));
        let w = tape.constant(t64(&[1, 1, 3, 1], &[1.0, 1.0, 1.0]));
        let y = tape.temporal_conv(x, w, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn temporal_conv_stride_two_length() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 1]));
        let y = tape.temporal_conv(x, w, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn temporal_conv_rejects_even_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 1]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 2, 1]));
        assert!(tape.temporal_conv(x, w, 1, 0).is_err());
    }

    #[test]
    fn batch_norm_constant_input_gives_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4], 7.0f64));
        let gamma = tape.constant(Tensor::full(&[3], 1.0));
        let beta = tape.constant(t64(&[3], &[0.5, -1.0, 2.0]));
        let mut stats = BnStats::new(3);
        let y = tape
            .batch_norm(x, gamma, beta, &mut stats, Phase::Train, 0.1, 1e-5)
            .unwrap();
        let d = tape.value(y);
        for c in 0..3 {
            let want = [0.5, -1.0, 2.0][c];
            for l in 0..2 {
                for r in 0..4 {
                    assert!((d.at(&[l, c, r]) - want).abs() < 1e-12);
                }
            }
        }
        // Running stats moved toward the batch: mean 0.9*0 + 0.1*7.
        assert!((stats.mean.data()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_unit_variance_passthrough() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 1, 1], &[-1.0, 1.0]));
        let gamma = tape.constant(Tensor::full(&[1], 1.0));
        let beta = tape.constant(Tensor::zeros(&[1]));
        let mut stats = BnStats::new(1);
        let y = tape
            .batch_norm(x, gamma, beta, &mut stats, Phase::Train, 0.1, 1e-5)
            .unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-4);
        assert!((d[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_eval_is_affine_with_running_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let gamma = tape.constant(t64(&[2], &[2.0, 2.0]));
        let beta = tape.constant(t64(&[2], &[1.0, 1.0]));
        let mut stats = BnStats::new(2); // mean 0, var 1
        let y = tape
            .batch_norm(x, gamma, beta, &mut stats, Phase::Eval, 0.1, 0.0)
            .unwrap();
        let d = tape.value(y).data();
        for (o, &xi) in d.iter().zip(&[1.0, 2.0, 3.0, 4.0]) {
            assert!((o - (2.0 * xi + 1.0)).abs() < 1e-12);
        }
        // Eval must not touch the running stats.
        assert_eq!(stats.mean.data(), &[0.0, 0.0]);
        assert_eq!(stats.var.data(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2], &[-2.0, 3.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn dropout_rate_zero_is_identity_both_phases() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y_train = tape.dropout(x, 0.0, Phase::Train, 1).unwrap();
        let y_eval = tape.dropout(x, 0.0, Phase::Eval, 1).unwrap();
        assert_eq!(y_train, x);
        assert_eq!(y_eval, x);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.5, Phase::Eval, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1000], 1.0f64));
        let y = tape.dropout(x, 0.5, Phase::Train, 42).unwrap();
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-15);
        }
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 400 && kept < 600, "kept {kept}");
    }

    #[test]
    fn mean_pool_of_constant_is_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4], 2.5f64));
        let y = tape.mean_axes(x, &[1, 2]).unwrap();
        assert_eq!(tape.shape(y), &[2]);
        for &v in tape.value(y).data() {
            assert!((v - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 3], &[0.0, 0.0, 0.0]), true);
        let loss = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(loss).item() - 3.0f64.ln()).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(x).unwrap().data();
        assert!((g[0] + 2.0 / 3.0).abs() < 1e-12);
        assert!((g[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 2], &[1000.0, 0.0]));
        let loss = tape.cross_entropy(x, &[0]).unwrap();
        let v = tape.value(loss).item();
        assert!(v.is_finite() && v.abs() < 1e-9, "loss {v}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.cross_entropy(x, &[3]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let y = tape.mul(x, x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn second_backward_without_rerecording_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn leaf_gradient_accumulation_is_additive() {
        // x used twice: loss = sum(x) + sum(2x) -> grad 3 per element.
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 5.0]), true);
        let s1 = tape.sum_all(x);
        let x2 = tape.scale(x, 2.0);
        let s2 = tape.sum_all(x2);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_bit_identical_given_fixed_dropout_seed() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t64(&[8], &[0.3, -0.4, 1.2, 2.0, -0.7, 0.1, 0.9, -1.5]), true);
            let d = tape.dropout(x, 0.5, Phase::Train, 99).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss).unwrap();
            grads.wrt(x).unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn broadcast_add_reduces_gradient_over_leading_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 2], 1.0f64));
        let b = tape.leaf(t64(&[2], &[0.0, 0.0]), true);
        let y = tape.add(x, b).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn permute_and_reshape_round_trip_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let p = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let r = tape.reshape(p, &[6]).unwrap();
        let loss = tape.sum_all(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 6]);
    }
}
