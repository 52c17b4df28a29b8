//! Define-by-run reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Leaves are either
//! trainable (`param`) or constant; gradients only flow into subgraphs that
//! reach a trainable leaf. [`Graph::backward`] walks the record once in
//! reverse and accumulates gradients additively, so fan-out is handled by
//! summation and repeated runs are bit-identical.

mod kernels;
mod tensor;

use std::sync::Arc;

pub use tensor::Tensor;

use crate::error::{Error, Result};
use kernels::ConvGeom;

/// `|alpha|` is clamped to at least this inside [`Graph::periodic_xi`].
pub const ALPHA_FLOOR: f64 = 1e-3;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    PeriodicXi { x: Var, alpha: Var, alpha_eff: f64, clamped: bool },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    PixelShuffle { input: Var, map: Arc<Vec<usize>> },
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Reshape(Var),
    Filter { input: Var, kernel: Arc<Vec<f64>>, half_width: usize },
    Sum(Var),
    Mean(Var),
    MeanSquare(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation record plus the values it produced.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    clamp_events: usize,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, `None` when `v` is not trainable or
    /// does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).unwrap())
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Number of times `periodic_xi` had to clamp a tiny `alpha`.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        let tr = self.tracked(x);
        self.push(out, op, tr)
    }

    /// Equal shapes, or one operand a scalar.
    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if av.shape() == bv.shape() {
            let d = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), d)?
        } else if bv.is_scalar() {
            let y = bv.item();
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect())?
        } else if av.is_scalar() {
            let x = av.item();
            Tensor::new(bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            same_shape(name, av, bv)?;
            unreachable!()
        };
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, op, tr))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Periodic activation `x + sin^2(alpha x) / alpha` with a trainable
    /// scalar `alpha`. `|alpha|` below [`ALPHA_FLOOR`] is clamped.
    pub fn periodic_xi(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let a = self.value(alpha);
        if a.len() != 1 {
            return Err(Error::shape(format!("alpha must be a scalar, got shape {:?}", a.shape())));
        }
        let raw = a.item();
        let clamped = raw.abs() < ALPHA_FLOOR;
        let alpha_eff = if clamped {
            if raw < 0.0 {
                -ALPHA_FLOOR
            } else {
                ALPHA_FLOOR
            }
        } else {
            raw
        };
        if clamped {
            self.clamp_events += 1;
        }
        let tr = self.tracked(x) || self.tracked(alpha);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| periodic_xi_value(v, alpha_eff)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::PeriodicXi { x, alpha, alpha_eff, clamped }, tr))
    }

    /// Periodic-padded strided cross-correlation of an `H x W x Cin` input with
    /// a `k x k x Cin x Cout` kernel and optional per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, cin) = self.value(input).hwc()?;
        let ks = self.value(kernel).shape().to_vec();
        let (k, kcin, cout) = match ks[..] {
            [a, b, c, d] if a == b => (a, c, d),
            _ => return Err(Error::shape(format!("conv kernel must be k x k x Cin x Cout, got {ks:?}"))),
        };
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "conv bias shape {:?} does not match {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        if stride == 0 {
            return Err(Error::shape("conv stride must be positive"));
        }
        let side = |len: usize| -> Result<usize> {
            let span = (len + 2 * pad) as isize - k as isize;
            if span < 0 {
                return Err(Error::shape(format!(
                    "conv output side is non-positive: input {len}, pad {pad}, kernel {k}"
                )));
            }
            Ok(span as usize / stride + 1)
        };
        let geom = ConvGeom {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad,
            oh: side(h)?,
            ow: side(w)?,
        };
        let out = kernels::conv_forward(
            &geom,
            self.data(input),
            self.data(kernel),
            bias.map(|b| self.data(b)),
        );
        let tr = self.tracked(input) || self.tracked(kernel) || bias.is_some_and(|b| self.tracked(b));
        let out = Tensor::new(vec![geom.oh, geom.ow, cout], out)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, geom }, tr))
    }

    /// Depth-to-space rearrangement by factor `r`.
    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let (h, w, c) = self.value(input).hwc()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::shape(format!(
                "pixel shuffle needs channels divisible by r^2 = {}, got {c}",
                r * r
            )));
        }
        let map = kernels::shuffle_index(h, w, c, r);
        let src = self.data(input);
        let mut out = vec![0.0; src.len()];
        for (s, &d) in map.iter().enumerate() {
            out[d] = src[s];
        }
        let out = Tensor::new(vec![h * r, w * r, c / (r * r)], out)?;
        let tr = self.tracked(input);
        Ok(self.push(out, Op::PixelShuffle { input, map: Arc::new(map) }, tr))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let (h, w, _) = self.value(*first).hwc()?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ph, pw, pc) = self.value(p).hwc()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "concat: spatial shapes {h}x{w} and {ph}x{pw} differ"
                )));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let mut out = vec![0.0; h * w * total];
        let mut off = 0;
        for (&p, &pc) in parts.iter().zip(&chans) {
            let src = self.data(p);
            for cell in 0..h * w {
                out[cell * total + off..][..pc].copy_from_slice(&src[cell * pc..][..pc]);
            }
            off += pc;
        }
        let tr = parts.iter().any(|&p| self.tracked(p));
        let out = Tensor::new(vec![h, w, total], out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), tr))
    }

    /// Channels `start..end` of an HWC tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let (h, w, c) = self.value(input).hwc()?;
        if start >= end || end > c {
            return Err(Error::shape(format!("channel slice {start}..{end} out of range for {c} channels")));
        }
        let k = end - start;
        let src = self.data(input);
        let mut out = Vec::with_capacity(h * w * k);
        for cell in 0..h * w {
            out.extend_from_slice(&src[cell * c + start..][..k]);
        }
        let out = Tensor::new(vec![h, w, k], out)?;
        let tr = self.tracked(input);
        Ok(self.push(out, Op::Slice { input, start }, tr))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(input).to_vec())?;
        let tr = self.tracked(input);
        Ok(self.push(t, Op::Reshape(input), tr))
    }

    /// Fixed (non-trainable) square kernel applied to every channel with
    /// periodic wrap, as used for derivative filters.
    pub fn filter(&mut self, input: Var, kernel: Arc<Vec<f64>>, half_width: usize) -> Result<Var> {
        let (h, w, c) = self.value(input).hwc()?;
        if h != w {
            return Err(Error::shape(format!("filter needs a square tensor, got {h}x{w}")));
        }
        let side = 2 * half_width + 1;
        if kernel.len() != side * side {
            return Err(Error::shape(format!("filter kernel must have {} entries", side * side)));
        }
        let out = crate::pddo::correlate_periodic(self.data(input), h, c, &kernel, half_width);
        let out = Tensor::new(vec![h, w, c], out)?;
        let tr = self.tracked(input);
        Ok(self.push(out, Op::Filter { input, kernel, half_width }, tr))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let tr = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tr)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let tr = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tr)
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        let tr = self.tracked(x);
        self.push(Tensor::scalar(s), Op::MeanSquare(x), tr)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!("loss must be a scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Keep gradients only where they are meaningful: trainable leaves and
        // tracked interior nodes.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].tracked {
                *g = None;
            }
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.tracked(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc_binary(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize) -> f64) {
        let out_len = g.len();
        if let Some(t) = self.acc(grads, v) {
            if t.len() == out_len {
                for (i, (tv, gv)) in t.iter_mut().zip(g).enumerate() {
                    *tv += gv * f(i);
                }
            } else {
                // Scalar operand broadcast over the output.
                t[0] += g.iter().enumerate().map(|(i, gv)| gv * f(i)).sum::<f64>();
            }
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[idx].value.data();
        // Broadcast-aware element access.
        let at = |v: Var, i: usize| {
            let d = self.data(v);
            if d.len() == 1 {
                d[0]
            } else {
                d[i]
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_binary(grads, *a, g, |_| 1.0);
                self.acc_binary(grads, *b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_binary(grads, *a, g, |_| 1.0);
                self.acc_binary(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                self.acc_binary(grads, *a, g, |i| at(*b, i));
                self.acc_binary(grads, *b, g, |i| at(*a, i));
            }
            Op::Scale(x, s) => {
                if let Some(t) = self.acc(grads, *x) {
                    t.iter_mut().zip(g).for_each(|(tv, gv)| *tv += gv * s);
                }
            }
            Op::AddConst(x) => {
                if let Some(t) = self.acc(grads, *x) {
                    t.iter_mut().zip(g).for_each(|(tv, gv)| *tv += gv);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(t) = self.acc(grads, *x) {
                    for ((tv, gv), s) in t.iter_mut().zip(g).zip(out) {
                        *tv += gv * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(t) = self.acc(grads, *x) {
                    for ((tv, gv), y) in t.iter_mut().zip(g).zip(out) {
                        *tv += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.data(*x);
                if let Some(t) = self.acc(grads, *x) {
                    for ((tv, gv), xi) in t.iter_mut().zip(g).zip(xv) {
                        *tv += 2.0 * gv * xi;
                    }
                }
            }
            Op::PeriodicXi { x, alpha, alpha_eff, clamped } => {
                let a = *alpha_eff;
                let xv = self.data(*x);
                if let Some(t) = self.acc(grads, *x) {
                    for ((tv, gv), xi) in t.iter_mut().zip(g).zip(xv) {
                        *tv += gv * (1.0 + (2.0 * a * xi).sin());
                    }
                }
                if !clamped {
                    if let Some(t) = self.acc(grads, *alpha) {
                        let mut s = 0.0;
                        for (gv, xi) in g.iter().zip(xv) {
                            let sn = (a * xi).sin();
                            s += gv * (xi * (2.0 * a * xi).sin() / a - sn * sn / (a * a));
                        }
                        t[0] += s;
                    }
                }
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                if let Some(b) = bias {
                    if let Some(t) = self.acc(grads, *b) {
                        for cell in g.chunks_exact(geom.cout) {
                            t.iter_mut().zip(cell).for_each(|(tv, gv)| *tv += gv);
                        }
                    }
                }
                let want_in = self.tracked(*input);
                let want_k = self.tracked(*kernel);
                if want_in || want_k {
                    // Both accumulators are disjoint nodes; take them out to
                    // borrow mutably at once.
                    let mut gin = want_in.then(|| {
                        grads[input.0]
                            .take()
                            .unwrap_or_else(|| vec![0.0; self.nodes[input.0].value.len()])
                    });
                    let mut gk = want_k.then(|| {
                        grads[kernel.0]
                            .take()
                            .unwrap_or_else(|| vec![0.0; self.nodes[kernel.0].value.len()])
                    });
                    kernels::conv_backward(
                        geom,
                        self.data(*input),
                        self.data(*kernel),
                        g,
                        gin.as_deref_mut(),
                        gk.as_deref_mut(),
                    );
                    if let Some(v) = gin {
                        grads[input.0] = Some(v);
                    }
                    if let Some(v) = gk {
                        grads[kernel.0] = Some(v);
                    }
                }
            }
            Op::PixelShuffle { input, map } => {
                if let Some(t) = self.acc(grads, *input) {
                    for (s, &d) in map.iter().enumerate() {
                        t[s] += g[d];
                    }
                }
            }
            Op::Concat(parts) => {
                let total = *self.nodes[idx].value.shape().last().unwrap();
                let mut off = 0;
                for &p in parts {
                    let pc = *self.shape(p).last().unwrap();
                    if let Some(t) = self.acc(grads, p) {
                        for (cell, tc) in t.chunks_exact_mut(pc).enumerate() {
                            let gs = &g[cell * total + off..][..pc];
                            tc.iter_mut().zip(gs).for_each(|(tv, gv)| *tv += gv);
                        }
                    }
                    off += pc;
                }
            }
            Op::Slice { input, start } => {
                let c = *self.shape(*input).last().unwrap();
                let k = *self.nodes[idx].value.shape().last().unwrap();
                if let Some(t) = self.acc(grads, *input) {
                    for (cell, gc) in g.chunks_exact(k).enumerate() {
                        let ts = &mut t[cell * c + start..][..k];
                        ts.iter_mut().zip(gc).for_each(|(tv, gv)| *tv += gv);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(t) = self.acc(grads, *x) {
                    t.iter_mut().zip(g).for_each(|(tv, gv)| *tv += gv);
                }
            }
            Op::Filter { input, kernel, half_width } => {
                let (n, _, c) = self.value(*input).hwc().unwrap();
                if let Some(t) = self.acc(grads, *input) {
                    kernels::filter_backward(g, n, c, kernel, *half_width, t);
                }
            }
            Op::Sum(x) => {
                if let Some(t) = self.acc(grads, *x) {
                    t.iter_mut().for_each(|tv| *tv += g[0]);
                }
            }
            Op::Mean(x) => {
                let inv = g[0] / self.nodes[x.0].value.len() as f64;
                if let Some(t) = self.acc(grads, *x) {
                    t.iter_mut().for_each(|tv| *tv += inv);
                }
            }
            Op::MeanSquare(x) => {
                let xv = self.data(*x);
                let f = 2.0 * g[0] / xv.len() as f64;
                if let Some(t) = self.acc(grads, *x) {
                    for (tv, xi) in t.iter_mut().zip(xv) {
                        *tv += f * xi;
                    }
                }
            }
        }
    }
}

/// `x + sin^2(alpha x) / alpha` for a non-zero `alpha`.
#[inline]
pub fn periodic_xi_value(x: f64, alpha: f64) -> f64 {
    let s = (alpha * x).sin();
    x + s * s / alpha
}

#[cfg(test)]
mod tests;
