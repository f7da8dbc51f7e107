//! Eagerly-evaluated computation record with reverse-mode differentiation.
//!
//! Each op validates shapes, computes its value immediately and appends a
//! node; `backward` walks the record in reverse and accumulates gradients
//! into per-leaf buffers (summing when a leaf feeds several ops). A tape is
//! single-use per forward pass; parameters are leased onto it by value, so a
//! later optimizer step never disturbs gradients of an already-recorded pass.

use std::collections::HashMap;

use super::kernels;
use super::{Param, ParamId, Real, Tensor};
use crate::error::{Error, Result};

/// Clamp bound for log arguments inside the cross-entropy losses.
pub const BCE_EPS: Real = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TRef(usize);

enum OpRec {
    Input,
    TracedInput,
    Param(ParamId),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<Real>,
        invstd: Vec<Real>,
        // train mode normalizes with batch stats; eval with running stats
        train: bool,
    },
    Elu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    AvgPool2 {
        x: usize,
    },
    Upsample2 {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Flatten {
        x: usize,
    },
    Bce {
        p: usize,
        target: Tensor,
    },
    MaskedNegLogMean {
        p: usize,
        mask: Vec<Real>,
        count: Real,
    },
    Mse {
        a: usize,
        target: Tensor,
    },
    Sum {
        x: usize,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<u32>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: OpRec,
}

/// Gradients produced by one backward pass, keyed by parameter identity and
/// by traced-input node.
#[derive(Default)]
pub struct Grads {
    params: HashMap<ParamId, Tensor>,
    traced: HashMap<usize, Tensor>,
}

impl Grads {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn traced(&self, node: TRef) -> Option<&Tensor> {
        self.traced.get(&node.0)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    /// self += scale * other (parameter gradients only).
    pub fn add_scaled(&mut self, other: &Grads, scale: Real) {
        for (id, g) in &other.params {
            let entry = self
                .params
                .entry(*id)
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let dst = entry.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d += scale * s;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.traced.is_empty()
    }
}

/// Which leaf gradients a backward pass should materialize. Skipping
/// parameter gradients avoids the weight-gradient GEMMs entirely.
#[derive(Debug, Clone, Copy)]
pub struct BackwardOpts {
    pub params: bool,
    pub traced: bool,
}

impl BackwardOpts {
    pub const ALL: BackwardOpts = BackwardOpts {
        params: true,
        traced: true,
    };
    pub const PARAMS: BackwardOpts = BackwardOpts {
        params: true,
        traced: false,
    };
    pub const TRACED: BackwardOpts = BackwardOpts {
        params: false,
        traced: true,
    };
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: OpRec) -> TRef {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        TRef(self.nodes.len() - 1)
    }

    pub fn value(&self, r: TRef) -> &Tensor {
        &self.nodes[r.0].value
    }

    fn shape(&self, r: TRef) -> &[usize] {
        self.nodes[r.0].value.shape()
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> TRef {
        self.push(value, false, OpRec::Input)
    }

    /// Gradient-tracked leaf that is not a parameter. Used to seam two tapes
    /// together: the upstream tape is seeded with this leaf's gradient.
    pub fn traced_input(&mut self, value: Tensor) -> TRef {
        self.push(value, true, OpRec::TracedInput)
    }

    /// Lease a parameter's current value onto the tape.
    pub fn param(&mut self, p: &Param) -> TRef {
        self.push(p.value().clone(), true, OpRec::Param(p.id()))
    }

    /// 3x3 same-padding cross-correlation over `[b, cin, h, w]`.
    pub fn conv2d(&mut self, x: TRef, w: TRef, b: TRef) -> Result<TRef> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, kernels {ws:?} (want [B,Cin,H,W] and [Cout,Cin,3,3])"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} != kernel channels {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {bs:?} does not match {} output channels", ws[0]),
            ));
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let mut out = vec![0.0; batch * cout * h * wd];
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            batch,
            cin,
            cout,
            h,
            wd,
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::new(vec![batch, cout, h, wd], out)?;
        Ok(self.push(value, needs, OpRec::Conv2d { x: x.0, w: w.0, b: b.0 }))
    }

    /// Batch normalization over `[b, c, h, w]` with per-channel gamma/beta.
    ///
    /// In train mode the current batch statistics are used and returned (the
    /// caller keeps running statistics); in eval mode `stats` supplies the
    /// running mean/variance.
    pub fn batch_norm(
        &mut self,
        x: TRef,
        gamma: TRef,
        beta: TRef,
        eps: Real,
        mode: Mode,
        stats: Option<(&[Real], &[Real])>,
    ) -> Result<(TRef, Vec<Real>, Vec<Real>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input {xs:?}")));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta must be [{c}]"),
            ));
        }
        let (mean, var, train) = match mode {
            Mode::Train => {
                if batch * h * w < 2 {
                    return Err(Error::Contract(
                        "batch_norm train mode needs at least 2 values per channel".into(),
                    ));
                }
                let (m, v) = kernels::channel_stats(self.value(x).data(), batch, c, h * w);
                (m, v, true)
            }
            Mode::Eval => {
                let (m, v) = stats.ok_or_else(|| {
                    Error::Contract("batch_norm eval mode before any train-mode call".into())
                })?;
                (m.to_vec(), v.to_vec(), false)
            }
        };
        let invstd: Vec<Real> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let hw = h * w;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (mu, is, g, be) = (mean[ci], invstd[ci], gd[ci], bd[ci]);
                for p in 0..hw {
                    out[base + p] = (xd[base + p] - mu) * is * g + be;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(xs, out)?;
        let node = self.push(
            value,
            needs,
            OpRec::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: mean.clone(),
                invstd,
                train,
            },
        );
        Ok((node, mean, var))
    }

    /// Elementwise ELU with alpha = 1.
    pub fn elu(&mut self, x: TRef) -> TRef {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        let needs = self.needs(x);
        self.push(value, needs, OpRec::Elu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: TRef) -> TRef {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(x);
        self.push(value, needs, OpRec::Sigmoid { x: x.0 })
    }

    pub fn avg_pool2(&mut self, x: TRef) -> Result<TRef> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                format!("input {xs:?} must be [B,C,H,W] with even H, W"),
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; b * c * (h / 2) * (w / 2)];
        kernels::avg_pool2_forward(self.value(x).data(), b * c, h, w, &mut out);
        let needs = self.needs(x);
        let value = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        Ok(self.push(value, needs, OpRec::AvgPool2 { x: x.0 }))
    }

    pub fn upsample2(&mut self, x: TRef) -> Result<TRef> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample2", format!("input {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; b * c * h * w * 4];
        kernels::upsample2_forward(self.value(x).data(), b * c, h, w, &mut out);
        let needs = self.needs(x);
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, needs, OpRec::Upsample2 { x: x.0 }))
    }

    /// Affine map of `[b, f]` by weight `[o, f]` and bias `[o]`.
    pub fn linear(&mut self, x: TRef, w: TRef, b: TRef) -> Result<TRef> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (batch, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; batch * o];
        kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            batch,
            f,
            o,
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::new(vec![batch, o], out)?;
        Ok(self.push(value, needs, OpRec::Linear { x: x.0, w: w.0, b: b.0 }))
    }

    /// Collapse all trailing axes: `[b, ...] -> [b, rest]`.
    pub fn flatten(&mut self, x: TRef) -> Result<TRef> {
        let xs = self.shape(x).to_vec();
        let rest: usize = xs[1..].iter().product();
        let value = self.value(x).reshaped(vec![xs[0], rest])?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, OpRec::Flatten { x: x.0 }))
    }

    /// Mean binary cross-entropy of predictions in (0,1) against a constant
    /// 0/1 target of the same shape. Predictions are clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]` before the logs.
    pub fn bce(&mut self, p: TRef, target: &Tensor) -> Result<TRef> {
        if self.shape(p) != target.shape() {
            return Err(Error::shape(
                "bce",
                format!("prediction {:?} vs target {:?}", self.shape(p), target.shape()),
            ));
        }
        let pd = self.value(p).data();
        let n = pd.len() as Real;
        let mut loss = 0.0;
        for (&pv, &tv) in pd.iter().zip(target.data()) {
            let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
        }
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar_value(loss / n),
            needs,
            OpRec::Bce {
                p: p.0,
                target: target.clone(),
            },
        ))
    }

    /// Mean of `-ln p` over the entries where `mask` is 1. The mask is a
    /// constant; entries must be 0 or 1 and at least one must be set.
    pub fn masked_neg_log_mean(&mut self, p: TRef, mask: &[Real]) -> Result<TRef> {
        if self.value(p).len() != mask.len() {
            return Err(Error::shape(
                "masked_neg_log_mean",
                format!("{} predictions vs {} mask entries", self.value(p).len(), mask.len()),
            ));
        }
        let count: Real = mask.iter().sum();
        if count == 0.0 {
            return Err(Error::Contract("masked_neg_log_mean with empty mask".into()));
        }
        let mut loss = 0.0;
        for (&pv, &mv) in self.value(p).data().iter().zip(mask) {
            if mv != 0.0 {
                loss -= pv.clamp(BCE_EPS, 1.0 - BCE_EPS).ln();
            }
        }
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar_value(loss / count),
            needs,
            OpRec::MaskedNegLogMean {
                p: p.0,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: TRef, target: &Tensor) -> Result<TRef> {
        if self.shape(a) != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), target.shape()),
            ));
        }
        let ad = self.value(a).data();
        let n = ad.len() as Real;
        let loss: Real = ad
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| (x - t) * (x - t))
            .sum::<Real>()
            / n;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::scalar_value(loss),
            needs,
            OpRec::Mse {
                a: a.0,
                target: target.clone(),
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: TRef) -> TRef {
        let total: Real = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar_value(total), needs, OpRec::Sum { x: x.0 })
    }

    /// Mean softmax cross-entropy of `[b, k]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: TRef, labels: &[u32]) -> Result<TRef> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs {} labels", ls, labels.len()),
            ));
        }
        let (batch, k) = (ls[0], ls[1]);
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; batch * k];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &ld[b * k..(b + 1) * k];
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[b * k + j] = e;
                denom += e;
            }
            for p in &mut probs[b * k..(b + 1) * k] {
                *p /= denom;
            }
            let label = labels[b] as usize;
            if label >= k {
                return Err(Error::Contract(format!("label {label} out of {k} classes")));
            }
            loss -= probs[b * k + label].max(BCE_EPS).ln();
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar_value(loss / batch as Real),
            needs,
            OpRec::SoftmaxCe {
                logits: logits.0,
                labels: labels.to_vec(),
                probs: Tensor::new(vec![batch, k], probs)?,
            },
        ))
    }

    fn needs(&self, r: TRef) -> bool {
        self.nodes[r.0].needs_grad
    }

    /// d(loss)/d(leaves) for a scalar loss node.
    pub fn backward(&self, loss: TRef, opts: BackwardOpts) -> Result<Grads> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_seeded(loss, &Tensor::scalar_value(1.0), opts)
    }

    /// Backward pass seeded with an explicit output gradient at `node`.
    pub fn backward_seeded(&self, node: TRef, seed: &Tensor, opts: BackwardOpts) -> Result<Grads> {
        if seed.shape() != self.nodes[node.0].value.shape() {
            return Err(Error::shape(
                "backward_seeded",
                format!(
                    "seed {:?} vs node {:?}",
                    seed.shape(),
                    self.nodes[node.0].value.shape()
                ),
            ));
        }
        let mut grad: Vec<Option<Vec<Real>>> = (0..=node.0).map(|_| None).collect();
        grad[node.0] = Some(seed.data().to_vec());
        let mut out = Grads::default();

        for i in (0..=node.0).rev() {
            let Some(g) = grad[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.accumulate(i, &g, &mut grad, &opts, &mut out)?;
        }
        Ok(out)
    }

    /// True when the leaf at `idx` should have its gradient materialized.
    fn leaf_wanted(&self, idx: usize, opts: &BackwardOpts) -> bool {
        match self.nodes[idx].op {
            OpRec::Param(_) => opts.params,
            OpRec::TracedInput => opts.traced,
            OpRec::Input => false,
            _ => self.nodes[idx].needs_grad,
        }
    }

    fn add_into(grad: &mut [Option<Vec<Real>>], idx: usize, len: usize, add: impl FnOnce(&mut [Real])) {
        let buf = grad[idx].get_or_insert_with(|| vec![0.0; len]);
        add(buf);
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(
        &self,
        i: usize,
        g: &[Real],
        grad: &mut [Option<Vec<Real>>],
        opts: &BackwardOpts,
        out: &mut Grads,
    ) -> Result<()> {
        match &self.nodes[i].op {
            OpRec::Input => {}
            OpRec::TracedInput => {
                if opts.traced {
                    let t = Tensor::new(self.nodes[i].value.shape().to_vec(), g.to_vec())?;
                    out.traced.insert(i, t);
                }
            }
            OpRec::Param(id) => {
                if opts.params {
                    let shape = self.nodes[i].value.shape().to_vec();
                    match out.params.get_mut(id) {
                        Some(existing) => {
                            for (d, s) in existing.data_mut().iter_mut().zip(g) {
                                *d += s;
                            }
                        }
                        None => {
                            out.params.insert(*id, Tensor::new(shape, g.to_vec())?);
                        }
                    }
                }
            }
            OpRec::Conv2d { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                let ws = self.nodes[*w].value.shape();
                let (batch, cin, h, wd, cout) = (xs[0], xs[1], xs[2], xs[3], ws[0]);
                let want_x = self.leaf_wanted_or_inner(*x, opts);
                let want_w = self.leaf_wanted(*w, opts);
                let want_b = self.leaf_wanted(*b, opts);
                let mut dx = want_x.then(|| vec![0.0; self.nodes[*x].value.len()]);
                let mut dw = want_w.then(|| vec![0.0; self.nodes[*w].value.len()]);
                let mut db = want_b.then(|| vec![0.0; cout]);
                kernels::conv2d_backward(
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    g,
                    batch,
                    cin,
                    cout,
                    h,
                    wd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    Self::add_into(grad, *x, dx.len(), |buf| {
                        for (d, s) in buf.iter_mut().zip(&dx) {
                            *d += s;
                        }
                    });
                }
                if let Some(dw) = dw {
                    Self::add_into(grad, *w, dw.len(), |buf| {
                        for (d, s) in buf.iter_mut().zip(&dw) {
                            *d += s;
                        }
                    });
                }
                if let Some(db) = db {
                    Self::add_into(grad, *b, db.len(), |buf| {
                        for (d, s) in buf.iter_mut().zip(&db) {
                            *d += s;
                        }
                    });
                }
            }
            OpRec::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let n = (batch * hw) as Real;
                let xd = self.nodes[*x].value.data();
                let gd = self.nodes[*gamma].value.data();
                // per-channel reductions
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..batch {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for p in 0..hw {
                            let dy = g[base + p];
                            sum_dy[ci] += dy;
                            sum_dy_xhat[ci] += dy * (xd[base + p] - mean[ci]) * invstd[ci];
                        }
                    }
                }
                if self.leaf_wanted_or_inner(*x, opts) {
                    let len = xd.len();
                    Self::add_into(grad, *x, len, |buf| {
                        for bi in 0..batch {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                let (mu, is, ga) = (mean[ci], invstd[ci], gd[ci]);
                                if *train {
                                    for p in 0..hw {
                                        let xhat = (xd[base + p] - mu) * is;
                                        buf[base + p] += ga * is
                                            * (g[base + p]
                                                - sum_dy[ci] / n
                                                - xhat * sum_dy_xhat[ci] / n);
                                    }
                                } else {
                                    for p in 0..hw {
                                        buf[base + p] += ga * is * g[base + p];
                                    }
                                }
                            }
                        }
                    });
                }
                if self.leaf_wanted(*gamma, opts) {
                    Self::add_into(grad, *gamma, c, |buf| {
                        for ci in 0..c {
                            buf[ci] += sum_dy_xhat[ci];
                        }
                    });
                }
                if self.leaf_wanted(*beta, opts) {
                    Self::add_into(grad, *beta, c, |buf| {
                        for ci in 0..c {
                            buf[ci] += sum_dy[ci];
                        }
                    });
                }
            }
            OpRec::Elu { x } => {
                let xd = self.nodes[*x].value.data();
                let yd = self.nodes[i].value.data();
                let len = xd.len();
                Self::add_into(grad, *x, len, |buf| {
                    for p in 0..len {
                        buf[p] += if xd[p] > 0.0 { g[p] } else { g[p] * (yd[p] + 1.0) };
                    }
                });
            }
            OpRec::Sigmoid { x } => {
                let yd = self.nodes[i].value.data();
                let len = yd.len();
                Self::add_into(grad, *x, len, |buf| {
                    for p in 0..len {
                        buf[p] += g[p] * yd[p] * (1.0 - yd[p]);
                    }
                });
            }
            OpRec::AvgPool2 { x } => {
                let xs = self.nodes[*x].value.shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let len = self.nodes[*x].value.len();
                Self::add_into(grad, *x, len, |buf| {
                    kernels::avg_pool2_backward(g, planes, h, w, buf);
                });
            }
            OpRec::Upsample2 { x } => {
                let xs = self.nodes[*x].value.shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let len = self.nodes[*x].value.len();
                Self::add_into(grad, *x, len, |buf| {
                    kernels::upsample2_backward(g, planes, h, w, buf);
                });
            }
            OpRec::Linear { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                let ws = self.nodes[*w].value.shape();
                let (batch, f, o) = (xs[0], xs[1], ws[0]);
                let want_x = self.leaf_wanted_or_inner(*x, opts);
                let want_w = self.leaf_wanted(*w, opts);
                let want_b = self.leaf_wanted(*b, opts);
                if want_x {
                    let len = self.nodes[*x].value.len();
                    let wd = self.nodes[*w].value.data();
                    Self::add_into(grad, *x, len, |buf| {
                        kernels::linear_backward(
                            &[],
                            wd,
                            g,
                            batch,
                            f,
                            o,
                            Some(buf),
                            None,
                            None,
                        );
                    });
                }
                if want_w {
                    let len = self.nodes[*w].value.len();
                    let xd = self.nodes[*x].value.data();
                    Self::add_into(grad, *w, len, |buf| {
                        kernels::linear_backward(xd, &[], g, batch, f, o, None, Some(buf), None);
                    });
                }
                if want_b {
                    Self::add_into(grad, *b, o, |buf| {
                        kernels::linear_backward(&[], &[], g, batch, f, o, None, None, Some(buf));
                    });
                }
            }
            OpRec::Flatten { x } => {
                let len = self.nodes[*x].value.len();
                Self::add_into(grad, *x, len, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            OpRec::Bce { p, target } => {
                let pd = self.nodes[*p].value.data();
                let n = pd.len() as Real;
                let scale = g[0] / n;
                let len = pd.len();
                Self::add_into(grad, *p, len, |buf| {
                    for ((b, &pv), &tv) in buf.iter_mut().zip(pd).zip(target.data()) {
                        // clamp has zero derivative outside the open interval
                        if pv > BCE_EPS && pv < 1.0 - BCE_EPS {
                            *b += scale * (-tv / pv + (1.0 - tv) / (1.0 - pv));
                        }
                    }
                });
            }
            OpRec::MaskedNegLogMean { p, mask, count } => {
                let pd = self.nodes[*p].value.data();
                let scale = g[0] / count;
                let len = pd.len();
                Self::add_into(grad, *p, len, |buf| {
                    for ((b, &pv), &mv) in buf.iter_mut().zip(pd).zip(mask) {
                        if mv != 0.0 && pv > BCE_EPS && pv < 1.0 - BCE_EPS {
                            *b -= scale / pv;
                        }
                    }
                });
            }
            OpRec::Mse { a, target } => {
                let ad = self.nodes[*a].value.data();
                let n = ad.len() as Real;
                let scale = 2.0 * g[0] / n;
                let len = ad.len();
                Self::add_into(grad, *a, len, |buf| {
                    for ((b, &av), &tv) in buf.iter_mut().zip(ad).zip(target.data()) {
                        *b += scale * (av - tv);
                    }
                });
            }
            OpRec::Sum { x } => {
                let len = self.nodes[*x].value.len();
                Self::add_into(grad, *x, len, |buf| {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                });
            }
            OpRec::SoftmaxCe { logits, labels, probs } => {
                let k = probs.shape()[1];
                let batch = labels.len();
                let scale = g[0] / batch as Real;
                let len = probs.len();
                let pd = probs.data();
                Self::add_into(grad, *logits, len, |buf| {
                    for b in 0..batch {
                        for j in 0..k {
                            let onehot = if labels[b] as usize == j { 1.0 } else { 0.0 };
                            buf[b * k + j] += scale * (pd[b * k + j] - onehot);
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// Interior nodes always propagate; leaves obey the opts filter. This is
    /// what lets a backward pass skip weight-gradient GEMMs entirely when the
    /// caller only needs the gradient at a traced input.
    fn leaf_wanted_or_inner(&self, idx: usize, opts: &BackwardOpts) -> bool {
        if !self.nodes[idx].needs_grad {
            return false;
        }
        match self.nodes[idx].op {
            OpRec::Param(_) | OpRec::TracedInput | OpRec::Input => self.leaf_wanted(idx, opts),
            _ => true,
        }
    }

    /// Recompute every node from the recorded leaves and compare bit-for-bit
    /// with the stored values. Verifies the record is a faithful replayable
    /// description of the forward pass.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut replayed: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                OpRec::Input | OpRec::TracedInput | OpRec::Param(_) => node.value.clone(),
                OpRec::Conv2d { x, w, b } => {
                    let (xv, wv, bv) = (&replayed[*x], &replayed[*w], &replayed[*b]);
                    let xs = xv.shape();
                    let mut out = vec![0.0; node.value.len()];
                    kernels::conv2d_forward(
                        xv.data(),
                        wv.data(),
                        bv.data(),
                        xs[0],
                        xs[1],
                        wv.shape()[0],
                        xs[2],
                        xs[3],
                        &mut out,
                    );
                    Tensor::new(node.value.shape().to_vec(), out)?
                }
                OpRec::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    invstd,
                    ..
                } => {
                    let xv = &replayed[*x];
                    let xs = xv.shape();
                    let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let (gd, bd) = (replayed[*gamma].data(), replayed[*beta].data());
                    let mut out = vec![0.0; xv.len()];
                    for bi in 0..batch {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            for p in 0..hw {
                                out[base + p] =
                                    (xv.data()[base + p] - mean[ci]) * invstd[ci] * gd[ci] + bd[ci];
                            }
                        }
                    }
                    Tensor::new(xs.to_vec(), out)?
                }
                OpRec::Elu { x } => replayed[*x].map(|v| if v > 0.0 { v } else { v.exp() - 1.0 }),
                OpRec::Sigmoid { x } => replayed[*x].map(|v| 1.0 / (1.0 + (-v).exp())),
                OpRec::AvgPool2 { x } => {
                    let xv = &replayed[*x];
                    let xs = xv.shape();
                    let mut out = vec![0.0; node.value.len()];
                    kernels::avg_pool2_forward(xv.data(), xs[0] * xs[1], xs[2], xs[3], &mut out);
                    Tensor::new(node.value.shape().to_vec(), out)?
                }
                OpRec::Upsample2 { x } => {
                    let xv = &replayed[*x];
                    let xs = xv.shape();
                    let mut out = vec![0.0; node.value.len()];
                    kernels::upsample2_forward(xv.data(), xs[0] * xs[1], xs[2], xs[3], &mut out);
                    Tensor::new(node.value.shape().to_vec(), out)?
                }
                OpRec::Linear { x, w, b } => {
                    let (xv, wv, bv) = (&replayed[*x], &replayed[*w], &replayed[*b]);
                    let xs = xv.shape();
                    let mut out = vec![0.0; node.value.len()];
                    kernels::linear_forward(
                        xv.data(),
                        wv.data(),
                        bv.data(),
                        xs[0],
                        xs[1],
                        wv.shape()[0],
                        &mut out,
                    );
                    Tensor::new(node.value.shape().to_vec(), out)?
                }
                OpRec::Flatten { x } => replayed[*x].reshaped(node.value.shape().to_vec())?,
                OpRec::Bce { p, target } => {
                    let pd = replayed[*p].data();
                    let mut loss = 0.0;
                    for (&pv, &tv) in pd.iter().zip(target.data()) {
                        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        loss -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
                    }
                    Tensor::scalar_value(loss / pd.len() as Real)
                }
                OpRec::MaskedNegLogMean { p, mask, count } => {
                    let mut loss = 0.0;
                    for (&pv, &mv) in replayed[*p].data().iter().zip(mask) {
                        if mv != 0.0 {
                            loss -= pv.clamp(BCE_EPS, 1.0 - BCE_EPS).ln();
                        }
                    }
                    Tensor::scalar_value(loss / count)
                }
                OpRec::Mse { a, target } => {
                    let ad = replayed[*a].data();
                    let loss: Real = ad
                        .iter()
                        .zip(target.data())
                        .map(|(&x, &t)| (x - t) * (x - t))
                        .sum::<Real>()
                        / ad.len() as Real;
                    Tensor::scalar_value(loss)
                }
                OpRec::Sum { x } => Tensor::scalar_value(replayed[*x].data().iter().sum()),
                OpRec::SoftmaxCe { logits, labels, .. } => {
                    let ld = replayed[*logits].data();
                    let k = self.nodes[*logits].value.shape()[1];
                    let mut loss = 0.0;
                    for (b, &label) in labels.iter().enumerate() {
                        let row = &ld[b * k..(b + 1) * k];
                        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                        let denom: Real = row.iter().map(|&v| (v - max).exp()).sum();
                        let p = (row[label as usize] - max).exp() / denom;
                        loss -= p.max(BCE_EPS).ln();
                    }
                    Tensor::scalar_value(loss / labels.len() as Real)
                }
            };
            replayed.push(value);
        }
        Ok(self
            .nodes
            .iter()
            .zip(&replayed)
            .all(|(n, r)| n.value.data() == r.data()))
    }
}
