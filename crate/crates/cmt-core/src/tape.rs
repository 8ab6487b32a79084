//! Reverse-mode differentiation tape over [`Tensor`] values, with a
//! multiply-accumulate counter for the cost-model instrumentation.
//!
//! A tape is single-writer: one logical thread records operations and runs
//! backward. Every operation validates shapes up front and rejects non-finite
//! results instead of propagating them.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{inverse_perm, permute_data, strides_of, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Count of scalar multiply-accumulate operations, with a per-op breakdown.
#[derive(Debug, Clone, Default)]
pub struct MacCounter {
    total: u64,
    by_op: BTreeMap<&'static str, u64>,
}

impl MacCounter {
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn by_op(&self) -> &BTreeMap<&'static str, u64> {
        &self.by_op
    }

    fn add(&mut self, op: &'static str, n: u64) {
        self.total += n;
        *self.by_op.entry(op).or_insert(0) += n;
    }
}

type BackFn = Box<dyn Fn(&Tensor) -> Result<Vec<(usize, Tensor)>>>;

struct Node {
    value: Tensor,
    backward: Option<BackFn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, zeros if `v` did not influence it.
    pub fn get(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    macs: RefCell<MacCounter>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            macs: RefCell::new(MacCounter::default()),
        }
    }

    pub fn macs(&self) -> MacCounter {
        self.macs.borrow().clone()
    }

    pub fn reset_macs(&self) {
        *self.macs.borrow_mut() = MacCounter::default();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, op: &'static str, value: Tensor, backward: Option<BackFn>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward });
        Ok(Var(nodes.len() - 1))
    }

    fn count_macs(&self, op: &'static str, n: u64) {
        self.macs.borrow_mut().add(op, n);
    }

    /// Record an input tensor (parameter or data) as a leaf node.
    pub fn leaf(&self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, None)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(
            "add",
            out,
            Some(Box::new(move |g| {
                Ok(vec![(a.0, g.clone()), (b.0, g.clone())])
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "mul: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        self.count_macs("elementwise", av.numel() as u64);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let (ac, bc) = (av, bv);
        self.push(
            "mul",
            out,
            Some(Box::new(move |g| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bc.data()).map(|(x, y)| x * y).collect(),
                )?;
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(ac.data()).map(|(x, y)| x * y).collect(),
                )?;
                Ok(vec![(a.0, ga), (b.0, gb)])
            })),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let av = self.value(a);
        let out = av.map(|v| v * s);
        self.push(
            "scale",
            out,
            Some(Box::new(move |g| Ok(vec![(a.0, g.map(|v| v * s))]))),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.map(|v| 1.0 / (1.0 + (-v).exp()));
        let yc = out.clone();
        self.push(
            "sigmoid",
            out,
            Some(Box::new(move |g| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(yc.data())
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect(),
                )?;
                Ok(vec![(a.0, ga)])
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.map(|v| v.max(0.0));
        let xc = av;
        self.push(
            "relu",
            out,
            Some(Box::new(move |g| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xc.data())
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                )?;
                Ok(vec![(a.0, ga)])
            })),
        )
    }

    /// Broadcast-add a rank-1 bias over the last axis of `x`.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = *xv.shape().last().unwrap();
        if bv.shape() != [n] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} vs last axis {}",
                bv.shape(),
                n
            )));
        }
        let mut data = xv.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "add_bias",
            out,
            Some(Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for (i, gi) in g.data().iter().enumerate() {
                    gb[i % n] += gi;
                }
                Ok(vec![(x.0, g.clone()), (b.0, Tensor::new(vec![n], gb)?)])
            })),
        )
    }

    // ---- reductions / views ----------------------------------------------

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s: f64 = av.data().iter().sum();
        let shape = av.shape().to_vec();
        self.push(
            "sum",
            Tensor::scalar(s),
            Some(Box::new(move |g| {
                let gv = g.data()[0];
                Ok(vec![(a.0, Tensor::full(&shape, gv))])
            })),
        )
    }

    /// Dot product against a constant weight vector; used to pick a single
    /// class logit out of the head output.
    pub fn project(&self, a: Var, w: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != w.shape() {
            return Err(Error::dim(format!(
                "project: {:?} vs {:?}",
                av.shape(),
                w.shape()
            )));
        }
        let s: f64 = av.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        let wc = w.clone();
        self.push(
            "project",
            Tensor::scalar(s),
            Some(Box::new(move |g| {
                let gv = g.data()[0];
                Ok(vec![(a.0, wc.map(|v| v * gv))])
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let out = av.reshaped(shape)?;
        let orig = av.shape().to_vec();
        self.push(
            "reshape",
            out,
            Some(Box::new(move |g| Ok(vec![(a.0, g.reshaped(&orig)?)]))),
        )
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let out = permute_data(&av, perm)?;
        let inv = inverse_perm(perm);
        self.push(
            "permute",
            out,
            Some(Box::new(move |g| Ok(vec![(a.0, permute_data(g, &inv)?)]))),
        )
    }

    // ---- matmul ------------------------------------------------------------

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (broadcast over batches) or `[.., k, n]` with matching batch dims.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (out, macs) = raw_matmul(&av, &bv)?;
        self.count_macs("matmul", macs);
        let (ac, bc) = (av, bv);
        self.push(
            "matmul",
            out,
            Some(Box::new(move |g| {
                let ga = matmul_grad_a(g, &bc, ac.shape())?;
                let gb = matmul_grad_b(&ac, g, bc.shape())?;
                Ok(vec![(a.0, ga), (b.0, gb)])
            })),
        )
    }

    // ---- softmax -----------------------------------------------------------

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(Error::dim(format!(
                "softmax axis {} on rank {}",
                axis,
                av.rank()
            )));
        }
        let out = softmax_data(&av, axis);
        let yc = out.clone();
        self.push(
            "softmax",
            out,
            Some(Box::new(move |g| {
                Ok(vec![(a.0, softmax_backward(&yc, g, axis))])
            })),
        )
    }

    // ---- conv / pool / resample ---------------------------------------------

    /// 2-D convolution: x `[c_in, h, w]`, kernel `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (out, macs) = conv2d_forward(&xv, &kv, stride, padding)?;
        self.count_macs("conv2d", macs);
        let (xc, kc) = (xv, kv);
        self.push(
            "conv2d",
            out,
            Some(Box::new(move |g| {
                let (gx, gk) = conv2d_backward(&xc, &kc, g, stride, padding)?;
                Ok(vec![(x.0, gx), (kernel.0, gk)])
            })),
        )
    }

    /// 2-D pooling over `[c, h, w]` with square window `size` and `stride`.
    /// Max-pool gradient routes to the argmax, ties broken at the lowest
    /// flat index; average-pool spreads uniformly.
    pub fn pool2d(&self, x: Var, size: usize, stride: usize, mode: PoolMode) -> Result<Var> {
        let xv = self.value(x);
        let (out, argmax) = pool2d_forward(&xv, size, stride, mode)?;
        let in_shape = xv.shape().to_vec();
        self.push(
            "pool2d",
            out,
            Some(Box::new(move |g| {
                Ok(vec![(
                    x.0,
                    pool2d_backward(&in_shape, g, size, stride, mode, &argmax),
                )])
            })),
        )
    }

    /// Replicate each spatial cell of `[c, h, w]` `factor` times in both axes.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        if factor < 1 {
            return Err(Error::dim("upsample factor must be >= 1"));
        }
        let [c, h, w] = shape3(&xv, "upsample_nearest")?;
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    data[(ch * oh + i) * ow + j] =
                        xv.data()[(ch * h + i / factor) * w + j / factor];
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], data)?;
        self.push(
            "upsample",
            out,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            gx[(ch * h + i / factor) * w + j / factor] +=
                                g.data()[(ch * oh + i) * ow + j];
                        }
                    }
                }
                Ok(vec![(x.0, Tensor::new(vec![c, h, w], gx)?)])
            })),
        )
    }

    /// Global average pool `[c, h, w] -> [c]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [c, h, w] = shape3(&xv, "global_avg_pool")?;
        let area = (h * w) as f64;
        let mut out = vec![0.0; c];
        for ch in 0..c {
            out[ch] = xv.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / area;
        }
        self.push(
            "gap",
            Tensor::new(vec![c], out)?,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gv = g.data()[ch] / area;
                    for s in gx[ch * h * w..(ch + 1) * h * w].iter_mut() {
                        *s = gv;
                    }
                }
                Ok(vec![(x.0, Tensor::new(vec![c, h, w], gx)?)])
            })),
        )
    }

    /// Multiply each channel of `[c, h, w]` by a learnable per-channel scale.
    pub fn scale_channels(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let [c, h, w] = shape3(&xv, "scale_channels")?;
        if sv.shape() != [c] {
            return Err(Error::dim(format!(
                "scale_channels: scale {:?} vs {} channels",
                sv.shape(),
                c
            )));
        }
        let hw = h * w;
        let mut data = xv.data().to_vec();
        for ch in 0..c {
            for v in data[ch * hw..(ch + 1) * hw].iter_mut() {
                *v *= sv.data()[ch];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let (xc, sc) = (xv, sv);
        self.push(
            "scale_channels",
            out,
            Some(Box::new(move |g| {
                let mut gx = g.data().to_vec();
                let mut gs = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..hw {
                        let idx = ch * hw + p;
                        gs[ch] += g.data()[idx] * xc.data()[idx];
                        gx[idx] = g.data()[idx] * sc.data()[ch];
                    }
                }
                Ok(vec![
                    (x.0, Tensor::new(vec![c, h, w], gx)?),
                    (s.0, Tensor::new(vec![c], gs)?),
                ])
            })),
        )
    }

    // ---- normalization / regularization ---------------------------------

    /// Layer normalization over the channel axis of `[c, h, w]`, with
    /// learnable per-channel scale and shift, epsilon 1e-5.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let [c, h, w] = shape3(&xv, "layer_norm")?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::dim(format!(
                "layer_norm: scale/shift {:?}/{:?} vs {} channels",
                gv.shape(),
                bv.shape(),
                c
            )));
        }
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        let mut xhat = vec![0.0; c * hw];
        let mut inv_std = vec![0.0; hw];
        for p in 0..hw {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += xv.data()[ch * hw + p];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = xv.data()[ch * hw + p] - mean;
                var += d * d;
            }
            var /= c as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[p] = istd;
            for ch in 0..c {
                let xh = (xv.data()[ch * hw + p] - mean) * istd;
                xhat[ch * hw + p] = xh;
                out[ch * hw + p] = gv.data()[ch] * xh + bv.data()[ch];
            }
        }
        let out = Tensor::new(vec![c, h, w], out)?;
        let gc = gv;
        self.push(
            "layer_norm",
            out,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c * hw];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for p in 0..hw {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for ch in 0..c {
                        let gi = g.data()[ch * hw + p];
                        let xh = xhat[ch * hw + p];
                        ggamma[ch] += gi * xh;
                        gbeta[ch] += gi;
                        let dxhat = gi * gc.data()[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xh;
                    }
                    let n = c as f64;
                    for ch in 0..c {
                        let gi = g.data()[ch * hw + p];
                        let xh = xhat[ch * hw + p];
                        let dxhat = gi * gc.data()[ch];
                        gx[ch * hw + p] =
                            inv_std[p] * (dxhat - sum_dxhat / n - xh * sum_dxhat_xhat / n);
                    }
                }
                Ok(vec![
                    (x.0, Tensor::new(vec![c, h, w], gx)?),
                    (gamma.0, Tensor::new(vec![c], ggamma)?),
                    (beta.0, Tensor::new(vec![c], gbeta)?),
                ])
            })),
        )
    }

    /// Inverted dropout: keep with probability `1 - p` and rescale kept
    /// activations by `1/(1-p)`. Identity in eval mode.
    pub fn dropout(
        &self,
        x: Var,
        p: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {}", p)));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = xv
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "dropout",
            out,
            Some(Box::new(move |g| {
                let gx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
                )?;
                Ok(vec![(x.0, gx)])
            })),
        )
    }

    // ---- loss -----------------------------------------------------------

    /// Mean binary cross-entropy of predictions `o` against constant binary
    /// targets, with predictions clamped to `[1e-12, 1 - 1e-12]` before logs.
    pub fn bce_loss(&self, o: Var, targets: &Tensor) -> Result<Var> {
        const EPS: f64 = 1e-12;
        let ov = self.value(o);
        if ov.shape() != targets.shape() {
            return Err(Error::dim(format!(
                "bce_loss: {:?} vs {:?}",
                ov.shape(),
                targets.shape()
            )));
        }
        let n = ov.numel() as f64;
        let mut loss = 0.0;
        for (&oi, &ti) in ov.data().iter().zip(targets.data()) {
            let oc = oi.clamp(EPS, 1.0 - EPS);
            loss -= ti * oc.ln() + (1.0 - ti) * (1.0 - oc).ln();
        }
        loss /= n;
        let (oc, tc) = (ov, targets.clone());
        self.push(
            "bce",
            Tensor::scalar(loss),
            Some(Box::new(move |g| {
                let gv = g.data()[0];
                let data = oc
                    .data()
                    .iter()
                    .zip(tc.data())
                    .map(|(&oi, &ti)| {
                        if !(EPS..=1.0 - EPS).contains(&oi) {
                            0.0 // clamped region has zero slope
                        } else {
                            gv * (-(ti / oi) + (1.0 - ti) / (1.0 - oi)) / n
                        }
                    })
                    .collect();
                Ok(vec![(o.0, Tensor::new(oc.shape().to_vec(), data)?)])
            })),
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar root. Gradient of the root w.r.t. itself
    /// is the all-ones tensor of the root's shape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::ones(nodes[root.0].value.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let Some(back) = &nodes[i].backward else {
                continue;
            };
            for (parent, contrib) in back(&g)? {
                if !contrib.is_finite() {
                    return Err(Error::NonFinite("backward"));
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

// ---- raw kernels ----------------------------------------------------------

fn shape3(t: &Tensor, op: &str) -> Result<[usize; 3]> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        s => Err(Error::dim(format!("{}: expected rank 3, got {:?}", op, s))),
    }
}

fn split_matrix_shape(shape: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("matmul operand of shape {:?}", shape)));
    }
    let (batch, mat) = shape.split_at(shape.len() - 2);
    Ok((batch.to_vec(), mat[0], mat[1]))
}

/// Batched matrix product; returns the output and the exact MAC count
/// `batch * m * n * k`.
pub fn raw_matmul(a: &Tensor, b: &Tensor) -> Result<(Tensor, u64)> {
    let (ab, m, k) = split_matrix_shape(a.shape())?;
    let (bb, bk, n) = split_matrix_shape(b.shape())?;
    if k != bk {
        return Err(Error::dim(format!(
            "matmul inner dims: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let broadcast_b = bb.is_empty() && !ab.is_empty();
    if !broadcast_b && ab != bb {
        return Err(Error::dim(format!(
            "matmul batch dims: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch: usize = ab.iter().product();
    let mut out = vec![0.0; batch * m * n];
    let (asz, bsz, osz) = (m * k, k * n, m * n);
    for bi in 0..batch {
        let ad = &a.data()[bi * asz..(bi + 1) * asz];
        let bd = if broadcast_b {
            b.data()
        } else {
            &b.data()[bi * bsz..(bi + 1) * bsz]
        };
        let od = &mut out[bi * osz..(bi + 1) * osz];
        for i in 0..m {
            for kk in 0..k {
                let av = ad[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[kk * n..(kk + 1) * n];
                let orow = &mut od[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    let mut shape = ab;
    shape.push(m);
    shape.push(n);
    let macs = (batch * m * n * k) as u64;
    Ok((Tensor::new(shape, out)?, macs))
}

fn matmul_grad_a(g: &Tensor, b: &Tensor, a_shape: &[usize]) -> Result<Tensor> {
    // dA = dY . B^T
    let bt = transpose_last2(b)?;
    let (mut ga, _) = raw_matmul(g, &bt)?;
    debug_assert_eq!(ga.shape(), a_shape);
    ga = ga.reshaped(a_shape)?;
    Ok(ga)
}

fn matmul_grad_b(a: &Tensor, g: &Tensor, b_shape: &[usize]) -> Result<Tensor> {
    // dB = A^T . dY, summed over batches when B was broadcast
    let at = transpose_last2(a)?;
    let (gb_full, _) = raw_matmul(&at, g)?;
    if gb_full.shape() == b_shape {
        return Ok(gb_full);
    }
    // broadcast case: reduce the batch dims
    let (k, n) = (b_shape[0], b_shape[1]);
    let batch = gb_full.numel() / (k * n);
    let mut gb = vec![0.0; k * n];
    for bi in 0..batch {
        for (s, v) in gb
            .iter_mut()
            .zip(&gb_full.data()[bi * k * n..(bi + 1) * k * n])
        {
            *s += v;
        }
    }
    Tensor::new(b_shape.to_vec(), gb)
}

fn transpose_last2(t: &Tensor) -> Result<Tensor> {
    let rank = t.rank();
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 1, rank - 2);
    permute_data(t, &perm)
}

fn softmax_data(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let strides = strides_of(shape);
    let axis_len = shape[axis];
    let axis_stride = strides[axis];
    let lanes = x.numel() / axis_len;
    let mut out = vec![0.0; x.numel()];
    for lane in 0..lanes {
        // base flat index of this lane
        let outer = lane / axis_stride;
        let inner = lane % axis_stride;
        let base = outer * axis_stride * axis_len + inner;
        let mut maxv = f64::NEG_INFINITY;
        for i in 0..axis_len {
            maxv = maxv.max(x.data()[base + i * axis_stride]);
        }
        let mut sum = 0.0;
        for i in 0..axis_len {
            let e = (x.data()[base + i * axis_stride] - maxv).exp();
            out[base + i * axis_stride] = e;
            sum += e;
        }
        for i in 0..axis_len {
            out[base + i * axis_stride] /= sum;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("softmax preserves shape")
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let shape = y.shape();
    let strides = strides_of(shape);
    let axis_len = shape[axis];
    let axis_stride = strides[axis];
    let lanes = y.numel() / axis_len;
    let mut gx = vec![0.0; y.numel()];
    for lane in 0..lanes {
        let outer = lane / axis_stride;
        let inner = lane % axis_stride;
        let base = outer * axis_stride * axis_len + inner;
        let mut dot = 0.0;
        for i in 0..axis_len {
            let idx = base + i * axis_stride;
            dot += g.data()[idx] * y.data()[idx];
        }
        for i in 0..axis_len {
            let idx = base + i * axis_stride;
            gx[idx] = y.data()[idx] * (g.data()[idx] - dot);
        }
    }
    Tensor::new(shape.to_vec(), gx).expect("softmax grad preserves shape")
}

pub fn conv2d_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::dim(format!(
            "kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok((
        (h + 2 * padding - kh) / stride + 1,
        (w + 2 * padding - kw) / stride + 1,
    ))
}

fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, u64)> {
    let [cin, h, w] = shape3(x, "conv2d input")?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[1] != cin {
        return Err(Error::dim(format!(
            "conv2d kernel {:?} vs input {:?}",
            ks,
            x.shape()
        )));
    }
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = conv2d_output_dims(h, w, kh, kw, stride, padding)?;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ki in 0..kh {
                        let ii = (oi * stride + ki) as isize - padding as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = (oj * stride + kj) as isize - padding as isize;
                            if jj < 0 || jj as usize >= w {
                                continue;
                            }
                            acc += x.data()[(ci * h + ii as usize) * w + jj as usize]
                                * kernel.data()[((co * cin + ci) * kh + ki) * kw + kj];
                        }
                    }
                }
                out[(co * oh + oi) * ow + oj] = acc;
            }
        }
    }
    let macs = (cout * cin * kh * kw * oh * ow) as u64;
    Ok((Tensor::new(vec![cout, oh, ow], out)?, macs))
}

fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let [cin, h, w] = shape3(x, "conv2d input")?;
    let ks = kernel.shape();
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let [_, oh, ow] = shape3(g, "conv2d grad")?;
    let mut gx = vec![0.0; cin * h * w];
    let mut gk = vec![0.0; kernel.numel()];
    for co in 0..cout {
        for oi in 0..oh {
            for oj in 0..ow {
                let gv = g.data()[(co * oh + oi) * ow + oj];
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ki in 0..kh {
                        let ii = (oi * stride + ki) as isize - padding as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = (oj * stride + kj) as isize - padding as isize;
                            if jj < 0 || jj as usize >= w {
                                continue;
                            }
                            let xi = (ci * h + ii as usize) * w + jj as usize;
                            let kidx = ((co * cin + ci) * kh + ki) * kw + kj;
                            gx[xi] += gv * kernel.data()[kidx];
                            gk[kidx] += gv * x.data()[xi];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![cin, h, w], gx)?,
        Tensor::new(ks.to_vec(), gk)?,
    ))
}

fn pool2d_forward(
    x: &Tensor,
    size: usize,
    stride: usize,
    mode: PoolMode,
) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = shape3(x, "pool2d")?;
    if size > h || size > w {
        return Err(Error::dim(format!(
            "pool window {} exceeds input {}x{}",
            size, h, w
        )));
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax = vec![0usize; c * oh * ow];
    }
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let oidx = (ch * oh + oi) * ow + oj;
                match mode {
                    PoolMode::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ki in 0..size {
                            for kj in 0..size {
                                let idx =
                                    (ch * h + oi * stride + ki) * w + oj * stride + kj;
                                if x.data()[idx] > best {
                                    best = x.data()[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[oidx] = best;
                        argmax[oidx] = best_idx;
                    }
                    PoolMode::Average => {
                        let mut sum = 0.0;
                        for ki in 0..size {
                            for kj in 0..size {
                                sum += x.data()
                                    [(ch * h + oi * stride + ki) * w + oj * stride + kj];
                            }
                        }
                        out[oidx] = sum / (size * size) as f64;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

fn pool2d_backward(
    in_shape: &[usize],
    g: &Tensor,
    size: usize,
    stride: usize,
    mode: PoolMode,
    argmax: &[usize],
) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let oidx = (ch * oh + oi) * ow + oj;
                let gv = g.data()[oidx];
                match mode {
                    PoolMode::Max => gx[argmax[oidx]] += gv,
                    PoolMode::Average => {
                        let share = gv / (size * size) as f64;
                        for ki in 0..size {
                            for kj in 0..size {
                                gx[(ch * h + oi * stride + ki) * w + oj * stride + kj] +=
                                    share;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], gx).expect("pool grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = tape.leaf(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0])).unwrap();
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_mac_count_exact() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[3, 5])).unwrap();
        let b = tape.leaf(Tensor::ones(&[5, 4])).unwrap();
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.macs().total(), 60);
        assert_eq!(tape.macs().by_op()["matmul"], 60);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::ones(&[4, 2])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_equal_logits() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form_and_shift_invariance() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 3f64.ln()])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let yv = tape.value(y);
        assert!((yv.data()[0] - 0.25).abs() < 1e-14);
        assert!((yv.data()[1] - 0.75).abs() < 1e-14);

        let xs = tape.leaf(t(&[2], &[1000.0, 1000.0 + 3f64.ln()])).unwrap();
        let ys = tape.softmax(xs, 0).unwrap();
        for (a, b) in tape.value(ys).data().iter().zip(yv.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_fn(&[1, 3, 3], |i| i as f64))
            .unwrap();
        let k = tape.leaf(Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_sum_kernel() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 3, 3])).unwrap();
        let k = tape.leaf(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data()[0], 9.0);
        assert_eq!(tape.macs().by_op()["conv2d"], 9);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 2])).unwrap();
        let k = tape.leaf(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        assert!(tape.conv2d(x, k, 1, 0).is_err());
    }

    #[test]
    fn pool2d_definitions() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let mx = tape.pool2d(x, 2, 2, PoolMode::Max).unwrap();
        let av = tape.pool2d(x, 2, 2, PoolMode::Average).unwrap();
        assert_eq!(tape.value(mx).data()[0], 4.0);
        assert_eq!(tape.value(av).data()[0], 2.5);
    }

    #[test]
    fn pool2d_constant_input() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 4, 4], 7.5)).unwrap();
        for mode in [PoolMode::Max, PoolMode::Average] {
            let y = tape.pool2d(x, 2, 2, mode).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v == 7.5));
        }
    }

    #[test]
    fn pool2d_window_too_large() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 2])).unwrap();
        assert!(tape.pool2d(x, 3, 1, PoolMode::Max).is_err());
    }

    #[test]
    fn max_pool_tie_goes_to_lowest_flat_index() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        let y = tape.pool2d(x, 2, 2, PoolMode::Max).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        let gx = grads.get(x, &[1, 2, 2]);
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_block_replication() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn backward_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f64)).unwrap();
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x, &[3, 2]), Tensor::ones(&[3, 2]));
        // gradient of root w.r.t. itself is all-ones
        assert_eq!(grads.get(s, &[1]), Tensor::ones(&[1]));
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[5])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        for v in grads.get(x, &[5]).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 2])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_is_rejected() {
        let tape = Tape::new();
        assert!(tape.leaf(Tensor::full(&[2], f64::NAN)).is_err());
        let x = tape.leaf(Tensor::full(&[2], 1e308)).unwrap();
        assert!(tape.add(x, x).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        let tape = Tape::new();
        let half = tape.leaf(Tensor::full(&[4], 0.5)).unwrap();
        let targets = t(&[4], &[1.0, 0.0, 1.0, 0.0]);
        let l = tape.bce_loss(half, &targets).unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);

        let perfect = tape.leaf(t(&[2], &[1.0, 0.0])).unwrap();
        let tt = t(&[2], &[1.0, 0.0]);
        let l2 = tape.bce_loss(perfect, &tt).unwrap();
        assert!(tape.value(l2).item().unwrap() <= 1e-11);
    }
}
