use std::collections::HashMap;

use super::batchnorm::{BatchNormState, BnMode, ChannelMoments};
use super::kernels::{self, DepthwiseGroup};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    generation: u64,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Pointwise {
        x: usize,
        w: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
    },
    Depthwise {
        x: usize,
        /// (weight node, first channel, channels, kernel)
        groups: Vec<(usize, usize, usize, usize)>,
        stride: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AvgPool {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
    WeightedAbsSum {
        x: usize,
        coefs: Vec<f32>,
    },
    SumSquares {
        x: usize,
    },
    WeightedSum {
        x: usize,
        coefs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward pass, replayed in reverse by [`Tape::backward`].
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    generation: u64,
    grad_enabled: bool,
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
            params: HashMap::new(),
            generation: 0,
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(Error::NoGraph);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.node(v)?].value)
    }

    /// Removes and returns a value, leaving an empty placeholder.
    pub fn take_value(&mut self, v: Var) -> Result<Tensor> {
        let i = self.node(v)?;
        Ok(std::mem::replace(&mut self.nodes[i].value, Tensor::zeros([0, 0, 0, 0])))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Records a parameter leaf. Repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&idx) = self.params.get(&id) {
            return Var {
                index: idx,
                generation: self.generation,
            };
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.params.insert(id, v.index);
        v
    }

    pub fn pointwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.node(x)?, self.node(w)?);
        let (xs, ws) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        if ws[1] != xs[1] || ws[2] != 1 || ws[3] != 1 {
            return Err(Error::dim(
                "conv2d_pointwise",
                format!("weight {ws:?} incompatible with input {xs:?}"),
            ));
        }
        let out = kernels::pointwise_forward(&self.nodes[xi].value, &self.nodes[wi].value);
        let rg = self.rg(xi) || self.rg(wi);
        Ok(self.push(out, Op::Pointwise { x: xi, w: wi }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xi, wi) = (self.node(x)?, self.node(w)?);
        let (xs, ws) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        if ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::dim("conv2d", format!("weight {ws:?} incompatible with input {xs:?}")));
        }
        check_stride("conv2d", stride)?;
        let out = kernels::conv2d_forward(&self.nodes[xi].value, &self.nodes[wi].value, stride);
        let rg = self.rg(xi) || self.rg(wi);
        Ok(self.push(out, Op::Conv2d { x: xi, w: wi, stride }, rg))
    }

    /// Depthwise convolution of a single kernel size over all channels.
    pub fn depthwise(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.depthwise_mixed(x, &[w], stride)
    }

    /// Depthwise convolution whose channels are split into consecutive groups,
    /// each with its own kernel size; `weights[g]` has shape `[c_g, 1, k_g, k_g]`
    /// and the group sizes must add up to the input channel count.
    pub fn depthwise_mixed(&mut self, x: Var, weights: &[Var], stride: usize) -> Result<Var> {
        check_stride("conv2d_depthwise", stride)?;
        let xi = self.node(x)?;
        let xs = self.nodes[xi].value.shape();
        let mut groups = Vec::with_capacity(weights.len());
        let mut first = 0;
        for &w in weights {
            let wi = self.node(w)?;
            let ws = self.nodes[wi].value.shape();
            let k = ws[2];
            if ws[3] != k || k % 2 == 0 || !matches!(k, 3 | 5 | 7) {
                return Err(Error::UnsupportedKernel(if ws[3] != k { ws[3] } else { k }));
            }
            if ws[1] != 1 {
                return Err(Error::dim("conv2d_depthwise", format!("weight {ws:?} must have one input channel")));
            }
            groups.push((wi, first, ws[0], k));
            first += ws[0];
        }
        if first != xs[1] {
            return Err(Error::dim(
                "conv2d_depthwise",
                format!("kernel groups cover {first} channels, input has {}", xs[1]),
            ));
        }
        let views: Vec<_> = groups
            .iter()
            .map(|&(wi, first_channel, channels, kernel)| DepthwiseGroup {
                first_channel,
                channels,
                kernel,
                weight: self.nodes[wi].value.data(),
            })
            .collect();
        let out = kernels::depthwise_forward(&self.nodes[xi].value, &views, stride);
        let rg = self.rg(xi) || groups.iter().any(|g| self.rg(g.0));
        Ok(self.push(out, Op::Depthwise { x: xi, groups, stride }, rg))
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.node(x)?, self.node(gamma)?, self.node(beta)?);
        let [n, c, h, w] = self.nodes[xi].value.shape();
        if self.nodes[gi].value.numel() != c || self.nodes[bi].value.numel() != c || state.channels() != c {
            return Err(Error::dim(
                "batchnorm2d",
                format!(
                    "input has {c} channels, gamma {} beta {} state {}",
                    self.nodes[gi].value.numel(),
                    self.nodes[bi].value.numel(),
                    state.channels()
                ),
            ));
        }
        let hw = h * w;
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
            BnMode::Train | BnMode::Recalibrate => {
                let m = ChannelMoments::from_batch(&self.nodes[xi].value);
                let mean: Vec<f32> = m.mean.iter().map(|&v| v as f32).collect();
                let var: Vec<f32> = m.variance().iter().map(|&v| v as f32).collect();
                if mode == BnMode::Train {
                    state.update_running(&mean, &var);
                } else {
                    state
                        .accumulator
                        .get_or_insert_with(|| ChannelMoments::new(c))
                        .merge(&m);
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let xd = self.nodes[xi].value.data();
        let (gd, bd) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        let keep = self.grad_enabled && (self.rg(xi) || self.rg(gi) || self.rg(bi));
        let mut xhat = if keep { vec![0.0f32; xd.len()] } else { Vec::new() };
        let mut out = vec![0.0f32; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in base..base + hw {
                    let xh = (xd[i] - mu) * is;
                    if keep {
                        xhat[i] = xh;
                    }
                    out[i] = g * xh + b;
                }
            }
        }
        let out = Tensor::from_vec([n, c, h, w], out)?;
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                batch_stats: mode != BnMode::Eval,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.node(x)?;
        let t = &self.nodes[xi].value;
        let out = Tensor::from_vec(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        let rg = self.rg(xi);
        Ok(self.push(out, Op::Relu { x: xi }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.node(a)?, self.node(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Add { a: ai, b: bi }, rg))
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let xi = self.node(x)?;
        let out = kernels::global_avgpool(&self.nodes[xi].value);
        let rg = self.rg(xi);
        Ok(self.push(out, Op::AvgPool { x: xi }, rg))
    }

    /// `x` is viewed as `[N, D]`; `w` is `[K, D, 1, 1]`, `b` has `K` entries.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.node(x)?, self.node(w)?, self.node(b)?);
        let (tx, tw, tb) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        let d = tx.numel() / tx.n().max(1);
        let [k, wd, _, _] = tw.shape();
        if tw.numel() != k * d || wd * tw.shape()[2] * tw.shape()[3] != d || tb.numel() != k {
            return Err(Error::dim(
                "fully_connected",
                format!("input {:?}, weight {:?}, bias {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let out = kernels::linear_forward(tx, tw, tb);
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        Ok(self.push(out, Op::Linear { x: xi, w: wi, b: bi }, rg))
    }

    /// Mean softmax cross-entropy over the batch; `logits` viewed as `[N, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.node(logits)?;
        let t = &self.nodes[li].value;
        let n = t.n();
        let k = t.numel() / n.max(1);
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidLabel { label, classes: k });
        }
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for (s, row) in t.data().chunks(k).enumerate() {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let log_z = max as f64 + sum.ln();
            for (p, &v) in probs[s * k..(s + 1) * k].iter_mut().zip(row) {
                *p = ((v as f64 - log_z).exp()) as f32;
            }
            loss += log_z - row[labels[s]] as f64;
        }
        let out = Tensor::scalar((loss / n as f64) as f32);
        let rg = self.rg(li);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: li,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// `Σᵢ coefs[i]·|x[i]|` as a scalar; subgradient 0 at exactly 0.
    pub fn weighted_abs_sum(&mut self, x: Var, coefs: &[f32]) -> Result<Var> {
        let xi = self.node(x)?;
        let t = &self.nodes[xi].value;
        if coefs.len() != t.numel() {
            return Err(Error::dim(
                "weighted_abs_sum",
                format!("{} coefficients for {} values", coefs.len(), t.numel()),
            ));
        }
        let s: f64 = t.data().iter().zip(coefs).map(|(v, c)| (v.abs() * c) as f64).sum();
        let rg = self.rg(xi);
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::WeightedAbsSum {
                x: xi,
                coefs: coefs.to_vec(),
            },
            rg,
        ))
    }

    /// `Σᵢ coefs[i]·x[i]` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, coefs: &[f32]) -> Result<Var> {
        let xi = self.node(x)?;
        let t = &self.nodes[xi].value;
        if coefs.len() != t.numel() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{} coefficients for {} values", coefs.len(), t.numel()),
            ));
        }
        let s: f64 = t.data().iter().zip(coefs).map(|(&v, &c)| v as f64 * c as f64).sum();
        let rg = self.rg(xi);
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::WeightedSum {
                x: xi,
                coefs: coefs.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let xi = self.node(x)?;
        let s: f64 = self.nodes[xi].value.data().iter().map(|v| (v * v) as f64).sum();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s as f32), Op::SumSquares { x: xi }, rg))
    }

    /// Back-propagates from a scalar and writes `∂loss/∂θ` into every
    /// parameter of `store` (zero for parameters the loss does not reach).
    /// The tape is cleared afterwards; its old handles become invalid.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let li = self.node(loss)?;
        if !self.nodes[li].requires_grad {
            return Err(Error::NoGraph);
        }
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[li].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        store.zero_grad();

        for i in (0..=li).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &gy, &mut grads, store)?;
        }
        self.clear();
        Ok(())
    }

    fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.generation += 1;
    }

    fn backprop_node(
        &self,
        i: usize,
        gy: &[f32],
        grads: &mut [Option<Vec<f32>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        // Lazily materialised gradient buffer for node j.
        fn slot<'g>(grads: &'g mut [Option<Vec<f32>>], nodes: &[Node], j: usize) -> &'g mut Vec<f32> {
            grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()])
        }
        match &nodes[i].op {
            Op::Input => {}
            Op::Param(id) => {
                store.get_mut(*id).grad.data_mut().copy_from_slice(gy);
            }
            &Op::Pointwise { x, w } => {
                let mut gx = wants(x).then(|| std::mem::take(slot(grads, nodes, x)));
                let mut gw = wants(w).then(|| std::mem::take(slot(grads, nodes, w)));
                kernels::pointwise_backward(
                    &nodes[x].value,
                    &nodes[w].value,
                    gy,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(g) = gx {
                    grads[x] = Some(g);
                }
                if let Some(g) = gw {
                    grads[w] = Some(g);
                }
            }
            &Op::Conv2d { x, w, stride } => {
                let mut gx = wants(x).then(|| std::mem::take(slot(grads, nodes, x)));
                let mut gw = wants(w).then(|| std::mem::take(slot(grads, nodes, w)));
                kernels::conv2d_backward(
                    &nodes[x].value,
                    &nodes[w].value,
                    stride,
                    gy,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(g) = gx {
                    grads[x] = Some(g);
                }
                if let Some(g) = gw {
                    grads[w] = Some(g);
                }
            }
            Op::Depthwise { x, groups, stride } => {
                let x = *x;
                let mut gx = wants(x).then(|| std::mem::take(slot(grads, nodes, x)));
                let mut gws: Vec<Option<Vec<f32>>> = groups
                    .iter()
                    .map(|g| wants(g.0).then(|| std::mem::take(slot(grads, nodes, g.0))))
                    .collect();
                let views: Vec<_> = groups
                    .iter()
                    .map(|&(wi, first_channel, channels, kernel)| DepthwiseGroup {
                        first_channel,
                        channels,
                        kernel,
                        weight: nodes[wi].value.data(),
                    })
                    .collect();
                let mut gw_refs: Vec<Option<&mut [f32]>> = gws.iter_mut().map(|g| g.as_deref_mut()).collect();
                kernels::depthwise_backward(&nodes[x].value, &views, *stride, gy, gx.as_deref_mut(), &mut gw_refs);
                if let Some(g) = gx {
                    grads[x] = Some(g);
                }
                for (g, gw) in groups.iter().zip(gws) {
                    if let Some(gw) = gw {
                        grads[g.0] = Some(gw);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let [n, c, h, w] = nodes[x].value.shape();
                let hw = h * w;
                let m = (n * hw) as f32;
                let gd = nodes[gamma].value.data();
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let (mut a, mut b) = (0.0f32, 0.0f32);
                        for j in base..base + hw {
                            a += gy[j];
                            b += gy[j] * xhat[j];
                        }
                        sum_dy[ch] += a;
                        sum_dy_xhat[ch] += b;
                    }
                }
                if wants(gamma) {
                    let g = slot(grads, nodes, gamma);
                    g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, v)| *g += v);
                }
                if wants(beta) {
                    let g = slot(grads, nodes, beta);
                    g.iter_mut().zip(&sum_dy).for_each(|(g, v)| *g += v);
                }
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let scale = gd[ch] * inv_std[ch];
                            if *batch_stats {
                                let (mdy, mdyx) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                                for j in base..base + hw {
                                    gx[j] += scale * (gy[j] - mdy - xhat[j] * mdyx);
                                }
                            } else {
                                for j in base..base + hw {
                                    gx[j] += scale * gy[j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::Relu { x } => {
                if wants(x) {
                    let xd = nodes[x].value.data();
                    let gx = slot(grads, nodes, x);
                    for ((g, &v), &d) in gx.iter_mut().zip(xd).zip(gy) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for j in [a, b] {
                    if wants(j) {
                        slot(grads, nodes, j).iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::AvgPool { x } => {
                if wants(x) {
                    let [_, _, h, w] = nodes[x].value.shape();
                    let hw = h * w;
                    let gx = slot(grads, nodes, x);
                    for (plane, &d) in gx.chunks_mut(hw).zip(gy) {
                        let v = d / hw as f32;
                        plane.iter_mut().for_each(|g| *g += v);
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let (tx, tw) = (&nodes[x].value, &nodes[w].value);
                let n = tx.n();
                let d = tx.numel() / n.max(1);
                let k = tw.shape()[0];
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    kernels::gemm(n, k, d, 1.0, gy, k, 1, tw.data(), d, 1, 1.0, gx, d, 1);
                }
                if wants(w) {
                    let gw = slot(grads, nodes, w);
                    kernels::gemm(k, n, d, 1.0, gy, 1, k, tx.data(), d, 1, 1.0, gw, d, 1);
                }
                if wants(b) {
                    let gb = slot(grads, nodes, b);
                    for row in gy.chunks(k) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let logits = *logits;
                if wants(logits) {
                    let n = labels.len();
                    let k = probs.len() / n.max(1);
                    let scale = gy[0] / n as f32;
                    let gl = slot(grads, nodes, logits);
                    for (s, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[s * k + j] += scale * (probs[s * k + j] - onehot);
                        }
                    }
                }
            }
            Op::WeightedAbsSum { x, coefs } => {
                let x = *x;
                if wants(x) {
                    let xd = nodes[x].value.data();
                    let gx = slot(grads, nodes, x);
                    for ((g, &v), &c) in gx.iter_mut().zip(xd).zip(coefs) {
                        let sign = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *g += gy[0] * c * sign;
                    }
                }
            }
            Op::WeightedSum { x, coefs } => {
                let x = *x;
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    for (g, &c) in gx.iter_mut().zip(coefs) {
                        *g += c * gy[0];
                    }
                }
            }
            &Op::SumSquares { x } => {
                if wants(x) {
                    let xd = nodes[x].value.data();
                    let gx = slot(grads, nodes, x);
                    for (g, &v) in gx.iter_mut().zip(xd) {
                        *g += 2.0 * v * gy[0];
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::dim(op, format!("stride {stride} not supported")))
    }
}
