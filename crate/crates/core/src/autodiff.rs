//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records one forward pass. Every node stores its value and the
//! operation that produced it; nodes only reference earlier nodes, so the node
//! order is already a topological order and [`Graph::backward`] walks it in
//! reverse. Gradients reaching parameter leaves are accumulated into the
//! [`ParamSet`] they were read from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, WeightMode};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv1dGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

/// Output frame count of a 1-d convolution, or `None` if the kernel does not
/// fit the padded input.
pub fn conv_output_frames(
    frames: usize,
    kernel: usize,
    geom: Conv1dGeometry,
) -> Option<usize> {
    let padded = frames + 2 * geom.padding;
    if kernel == 0 || geom.stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / geom.stride + 1)
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv1dGeometry,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    /// `out[j] = x[src[j]]` over flat indices.
    Gather {
        x: Var,
        src: Vec<usize>,
    },
    Activate(Var, Activation),
    AttentionPool {
        s: Var,
        w: Var,
        attention: Tensor,
    },
    SegmentMean(Var),
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Bce {
        p: Var,
        target: Tensor,
        weights: Vec<f64>,
        mode: WeightMode,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Attention weights recorded by an [`Graph::attention_pool`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::AttentionPool { attention, .. } => Some(attention),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value in {op:?}");
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Activate(a, _) | Op::SegmentMean(a) => vec![*a],
            Op::Dense { x, w, b } | Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::MaxPool1d { x, .. } | Op::SegmentMax { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::AttentionPool { s, w, .. } => vec![*s, *w],
            Op::Bce { p, .. } => vec![*p],
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        let out = match act {
            Activation::Identity => self.value(x).clone(),
            Activation::Relu => self.value(x).map(|v| v.max(0.0)),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(out, Op::Activate(x, act))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    /// Affine map `x · w + b` for `x: [n × in]`, `w: [in × out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 2 || tw.rank() != 2 || tx.dim(1) != tw.dim(0) {
            return Err(Error::shape("dense", tx.shape(), tw.shape()));
        }
        let (n, din, dout) = (tx.dim(0), tw.dim(0), tw.dim(1));
        if tb.shape() != [dout] {
            return Err(Error::shape("dense bias", tw.shape(), tb.shape()));
        }
        let mut out = vec![0.0; n * dout];
        for (row, xrow) in out.chunks_exact_mut(dout).zip(tx.data().chunks_exact(din)) {
            row.copy_from_slice(tb.data());
            for (&xi, wrow) in xrow.iter().zip(tw.data().chunks_exact(dout)) {
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += xi * wv;
                }
            }
        }
        let out = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    /// 1-d convolution of `x: [batch × in_ch × frames]` with
    /// `w: [out_ch × in_ch × kernel]` and bias `b: [out_ch]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, geom: Conv1dGeometry) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 3 || tw.rank() != 3 || tx.dim(1) != tw.dim(1) {
            return Err(Error::shape("conv1d", tx.shape(), tw.shape()));
        }
        let (batch, cin, frames) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let (cout, kernel) = (tw.dim(0), tw.dim(2));
        if tb.shape() != [cout] {
            return Err(Error::shape("conv1d bias", tw.shape(), tb.shape()));
        }
        let fout = conv_output_frames(frames, kernel, geom).ok_or_else(|| {
            Error::InvalidGeometry {
                op: "conv1d",
                detail: format!(
                    "kernel {kernel} does not fit {frames} frames with padding {} and stride {}",
                    geom.padding, geom.stride
                ),
            }
        })?;
        let mut out = vec![0.0; batch * cout * fout];
        let xd = tx.data();
        let wd = tw.data();
        for bi in 0..batch {
            for co in 0..cout {
                let orow = &mut out[(bi * cout + co) * fout..][..fout];
                orow.fill(tb.data()[co]);
                for ci in 0..cin {
                    let xrow = &xd[(bi * cin + ci) * frames..][..frames];
                    let wrow = &wd[(co * cin + ci) * kernel..][..kernel];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let (t0, t1) = valid_range(kk, frames, fout, geom);
                        if geom.stride == 1 {
                            let off = t0 + kk - geom.padding;
                            for (o, &xv) in orow[t0..t1].iter_mut().zip(&xrow[off..]) {
                                *o += wv * xv;
                            }
                        } else {
                            for t in t0..t1 {
                                orow[t] += wv * xrow[t * geom.stride + kk - geom.padding];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch, cout, fout], out)?;
        Ok(self.push(out, Op::Conv1d { x, w, b, geom }))
    }

    /// Max pooling along the last axis of `x: [batch × ch × frames]`.
    pub fn max_pool1d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(Error::shape("max_pool1d", tx.shape(), &[0, 0, 0]));
        }
        let (batch, ch, frames) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let geom = Conv1dGeometry { stride, padding: 0 };
        let fout = conv_output_frames(frames, size, geom).ok_or_else(|| Error::InvalidGeometry {
            op: "max_pool1d",
            detail: format!("window {size} does not fit {frames} frames"),
        })?;
        let mut out = Vec::with_capacity(batch * ch * fout);
        let mut argmax = Vec::with_capacity(batch * ch * fout);
        for (r, row) in tx.data().chunks_exact(frames).enumerate() {
            for t in 0..fout {
                let start = t * stride;
                let (mut best, mut best_i) = (row[start], start);
                for (i, &v) in row.iter().enumerate().skip(start + 1).take(size - 1) {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out.push(best);
                argmax.push(r * frames + best_i);
            }
        }
        let out = Tensor::new(vec![batch, ch, fout], out)?;
        Ok(self.push(out, Op::MaxPool1d { x, argmax }))
    }

    /// Extends the last axis of `x: [batch × ch × frames]` by repeating the
    /// edge frames `pad` times on each side.
    pub fn pad_edge(&mut self, x: Var, pad: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(Error::shape("pad_edge", tx.shape(), &[0, 0, 0]));
        }
        let (batch, ch, frames) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let fout = frames + 2 * pad;
        let mut src = Vec::with_capacity(batch * ch * fout);
        for r in 0..batch * ch {
            for t in 0..fout {
                src.push(r * frames + t.saturating_sub(pad).min(frames - 1));
            }
        }
        let data = src.iter().map(|&i| tx.data()[i]).collect();
        let out = Tensor::new(vec![batch, ch, fout], data)?;
        Ok(self.push(out, Op::Gather { x, src }))
    }

    /// Class-specific attention pooling of segment scores `s: [batch × C × K]`
    /// with `w: [C × C]`: `A = softmax_k(w · s)`, `o_c = Σ_k A_ck s_ck`.
    pub fn attention_pool(&mut self, s: Var, w: Var) -> Result<Var> {
        let (ts, tw) = (self.value(s), self.value(w));
        if ts.rank() != 3 || tw.shape() != [ts.dim(1), ts.dim(1)] {
            return Err(Error::shape("attention_pool", ts.shape(), tw.shape()));
        }
        let (batch, c, k) = (ts.dim(0), ts.dim(1), ts.dim(2));
        let mut attention = vec![0.0; batch * c * k];
        let mut out = vec![0.0; batch * c];
        for bi in 0..batch {
            let sb = &ts.data()[bi * c * k..][..c * k];
            let ab = &mut attention[bi * c * k..][..c * k];
            attention_forward(sb, tw.data(), c, k, ab, &mut out[bi * c..][..c]);
        }
        let attention = Tensor::new(vec![batch, c, k], attention)?;
        let out = Tensor::new(vec![batch, c], out)?;
        Ok(self.push(out, Op::AttentionPool { s, w, attention }))
    }

    /// Mean over the last axis: `[batch × C × K] → [batch × C]`.
    pub fn segment_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(Error::shape("segment_mean", tx.shape(), &[0, 0, 0]));
        }
        let (batch, c, k) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let data = tx
            .data()
            .chunks_exact(k)
            .map(|row| row.iter().sum::<f64>() / k as f64)
            .collect();
        let out = Tensor::new(vec![batch, c], data)?;
        Ok(self.push(out, Op::SegmentMean(x)))
    }

    /// Max over the last axis: `[batch × C × K] → [batch × C]`.
    pub fn segment_max(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(Error::shape("segment_max", tx.shape(), &[0, 0, 0]));
        }
        let (batch, c, k) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let mut data = Vec::with_capacity(batch * c);
        let mut argmax = Vec::with_capacity(batch * c);
        for (r, row) in tx.data().chunks_exact(k).enumerate() {
            let (i, &v) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            data.push(v);
            argmax.push(r * k + i);
        }
        let out = Tensor::new(vec![batch, c], data)?;
        Ok(self.push(out, Op::SegmentMax { x, argmax }))
    }

    /// Class-weighted binary cross-entropy of `p: [batch × C]` against
    /// fractional targets of the same shape, averaged over classes and batch.
    pub fn bce(
        &mut self,
        p: Var,
        target: &Tensor,
        weights: Option<&[f64]>,
        mode: WeightMode,
    ) -> Result<Var> {
        let tp = self.value(p);
        if tp.shape() != target.shape() || tp.rank() != 2 {
            return Err(Error::shape("bce", tp.shape(), target.shape()));
        }
        let c = tp.dim(1);
        let weights = match weights {
            Some(w) if w.len() != c => return Err(Error::shape("bce weights", &[c], &[w.len()])),
            Some(w) => w.to_vec(),
            None => vec![1.0; c],
        };
        let value = loss::bce_mean(tp.data(), target.data(), &weights, mode);
        let out = Tensor::scalar(value);
        Ok(self.push(
            out,
            Op::Bce {
                p,
                target: target.clone(),
                weights,
                mode,
            },
        ))
    }

    /// Propagates d(loss)/d(node) through the tape and accumulates the
    /// gradients of trainable parameter leaves into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::EmptyGraph);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            debug_assert!(g.is_finite(), "non-finite gradient at node {idx}");
            self.backward_node(node, &g, &mut grads, params);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut ParamSet,
    ) {
        let mut send = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => params.accumulate_grad(*id, g),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    send(*a, g.clone());
                }
                if self.wants(*b) {
                    send(*b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    send(*a, zip_map(g, tb, |gv, bv| gv * bv));
                }
                if self.wants(*b) {
                    send(*b, zip_map(g, ta, |gv, av| gv * av));
                }
            }
            Op::Scale(a, f) => send(*a, g.map(|v| v * f)),
            Op::Sum(a) => send(*a, Tensor::full(self.value(*a).shape(), g.item())),
            Op::Activate(x, act) => {
                let out = &node.value;
                let d = match act {
                    Activation::Identity => g.clone(),
                    Activation::Relu => zip_map(g, out, |gv, y| if y > 0.0 { gv } else { 0.0 }),
                    Activation::Sigmoid => zip_map(g, out, |gv, y| gv * y * (1.0 - y)),
                };
                send(*x, d);
            }
            Op::Dense { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (din, dout) = (tw.dim(0), tw.dim(1));
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(tx.shape());
                    for (gxr, grow) in gx.data_mut().chunks_exact_mut(din).zip(g.data().chunks_exact(dout)) {
                        for (gxi, wrow) in gxr.iter_mut().zip(tw.data().chunks_exact(dout)) {
                            *gxi = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        }
                    }
                    send(*x, gx);
                }
                if self.wants(*w) {
                    let mut gw = Tensor::zeros(tw.shape());
                    for (xrow, grow) in tx.data().chunks_exact(din).zip(g.data().chunks_exact(dout)) {
                        for (&xi, gwrow) in xrow.iter().zip(gw.data_mut().chunks_exact_mut(dout)) {
                            for (a, &gv) in gwrow.iter_mut().zip(grow) {
                                *a += xi * gv;
                            }
                        }
                    }
                    send(*w, gw);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(&[dout]);
                    for grow in g.data().chunks_exact(dout) {
                        for (a, &gv) in gb.data_mut().iter_mut().zip(grow) {
                            *a += gv;
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (batch, cin, frames) = (tx.dim(0), tx.dim(1), tx.dim(2));
                let (cout, kernel) = (tw.dim(0), tw.dim(2));
                let fout = g.dim(2);
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = if want_x { vec![0.0; tx.len()] } else { Vec::new() };
                let mut gw = vec![0.0; tw.len()];
                let mut gb = vec![0.0; cout];
                for bi in 0..batch {
                    for co in 0..cout {
                        let grow = &g.data()[(bi * cout + co) * fout..][..fout];
                        gb[co] += grow.iter().sum::<f64>();
                        for ci in 0..cin {
                            let xoff = (bi * cin + ci) * frames;
                            let woff = (co * cin + ci) * kernel;
                            for kk in 0..kernel {
                                let (t0, t1) = valid_range(kk, frames, fout, *geom);
                                if t0 >= t1 {
                                    continue;
                                }
                                let wv = tw.data()[woff + kk];
                                let mut acc = 0.0;
                                for t in t0..t1 {
                                    let pos = xoff + t * geom.stride + kk - geom.padding;
                                    if want_w {
                                        acc += grow[t] * tx.data()[pos];
                                    }
                                    if want_x {
                                        gx[pos] += grow[t] * wv;
                                    }
                                }
                                gw[woff + kk] += acc;
                            }
                        }
                    }
                }
                if want_x {
                    send(*x, Tensor::new(tx.shape().to_vec(), gx).expect("conv grad shape"));
                }
                if want_w {
                    send(*w, Tensor::new(tw.shape().to_vec(), gw).expect("conv grad shape"));
                }
                if self.wants(*b) {
                    send(*b, Tensor::new(vec![cout], gb).expect("conv grad shape"));
                }
            }
            Op::MaxPool1d { x, argmax } | Op::SegmentMax { x, argmax } | Op::Gather { x, src: argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                send(*x, gx);
            }
            Op::SegmentMean(x) => {
                let tx = self.value(*x);
                let k = tx.dim(2);
                let mut gx = Tensor::zeros(tx.shape());
                for (row, &gv) in gx.data_mut().chunks_exact_mut(k).zip(g.data()) {
                    row.fill(gv / k as f64);
                }
                send(*x, gx);
            }
            Op::AttentionPool { s, w, attention } => {
                let (ts, tw) = (self.value(*s), self.value(*w));
                let (batch, c, k) = (ts.dim(0), ts.dim(1), ts.dim(2));
                let mut gs = vec![0.0; ts.len()];
                let mut gw = vec![0.0; tw.len()];
                let mut dz = vec![0.0; c * k];
                for bi in 0..batch {
                    let sb = &ts.data()[bi * c * k..][..c * k];
                    let ab = &attention.data()[bi * c * k..][..c * k];
                    let ob = &node.value.data()[bi * c..][..c];
                    let gob = &g.data()[bi * c..][..c];
                    let gsb = &mut gs[bi * c * k..][..c * k];
                    for ci in 0..c {
                        for kk in 0..k {
                            let i = ci * k + kk;
                            gsb[i] += gob[ci] * ab[i];
                            dz[i] = ab[i] * gob[ci] * (sb[i] - ob[ci]);
                        }
                    }
                    for ci in 0..c {
                        for j in 0..c {
                            let wv = tw.data()[ci * c + j];
                            let mut acc = 0.0;
                            for kk in 0..k {
                                acc += dz[ci * k + kk] * sb[j * k + kk];
                                gsb[j * k + kk] += wv * dz[ci * k + kk];
                            }
                            gw[ci * c + j] += acc;
                        }
                    }
                }
                if self.wants(*s) {
                    send(*s, Tensor::new(ts.shape().to_vec(), gs).expect("attention grad shape"));
                }
                if self.wants(*w) {
                    send(*w, Tensor::new(tw.shape().to_vec(), gw).expect("attention grad shape"));
                }
            }
            Op::Bce {
                p,
                target,
                weights,
                mode,
            } => {
                let tp = self.value(*p);
                let mut gp = Tensor::zeros(tp.shape());
                loss::bce_mean_grad(tp.data(), target.data(), weights, *mode, gp.data_mut());
                let scale = g.item();
                send(*p, gp.map(|v| v * scale));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output positions `t0..t1` for which kernel tap `kk` reads inside the input.
fn valid_range(kk: usize, frames: usize, fout: usize, geom: Conv1dGeometry) -> (usize, usize) {
    let s = geom.stride;
    // need t*s + kk >= pad and t*s + kk - pad <= frames - 1
    let t0 = if kk >= geom.padding {
        0
    } else {
        (geom.padding - kk).div_ceil(s)
    };
    let hi = frames - 1 + geom.padding;
    let t1 = if hi < kk { 0 } else { ((hi - kk) / s + 1).min(fout) };
    (t0.min(t1), t1)
}

/// One bag of attention pooling; `s`, `a` are `[C × K]` row-major.
pub(crate) fn attention_forward(s: &[f64], w: &[f64], c: usize, k: usize, a: &mut [f64], o: &mut [f64]) {
    for ci in 0..c {
        let arow = &mut a[ci * k..][..k];
        for (kk, z) in arow.iter_mut().enumerate() {
            *z = (0..c).map(|j| w[ci * c + j] * s[j * k + kk]).sum();
        }
        let m = arow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for z in arow.iter_mut() {
            *z = (*z - m).exp();
            total += *z;
        }
        for z in arow.iter_mut() {
            *z /= total;
        }
        o[ci] = arow.iter().zip(&s[ci * k..][..k]).map(|(a, s)| a * s).sum();
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shapes agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.add("theta", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let t = g.param(&ps, id);
        let sq = g.mul(t, t).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad(id).item(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.add("theta", Tensor::full(&[3], 2.0));
        let mut g = Graph::new();
        let _t = g.param(&ps, id);
        let c = g.input(Tensor::full(&[4], 1.5));
        let loss = g.sum(c);
        g.backward(loss, &mut ps).unwrap();
        assert!(ps.grad(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut ps = ParamSet::new();
        let id = ps.add("theta", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let t = g.param(&ps, id);
        let sq = g.mul(t, t).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut ps).unwrap();
        g.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad(id).item(), 12.0);
    }

    #[test]
    fn backward_on_empty_graph_is_usage_error() {
        let mut ps = ParamSet::new();
        let g = Graph::new();
        assert!(matches!(g.backward(Var(0), &mut ps), Err(Error::EmptyGraph)));
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for frames in 1..9 {
            for kernel in 1..5 {
                for padding in 0..3 {
                    for stride in 1..4 {
                        let geom = Conv1dGeometry { stride, padding };
                        let Some(fout) = conv_output_frames(frames, kernel, geom) else {
                            continue;
                        };
                        for kk in 0..kernel {
                            let expect: Vec<usize> = (0..fout)
                                .filter(|t| {
                                    let pos = (t * stride + kk) as isize - padding as isize;
                                    pos >= 0 && (pos as usize) < frames
                                })
                                .collect();
                            let (t0, t1) = valid_range(kk, frames, fout, geom);
                            assert_eq!((t0..t1).collect::<Vec<_>>(), expect);
                        }
                    }
                }
            }
        }
    }
}
