//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node that requires
//! them. Nodes that do not depend on a trainable leaf are skipped entirely.

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// How the cross-entropy term reads the probability volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossEntropyMode {
    /// Bernoulli likelihood on channel 1 of a two-channel volume.
    Binary,
    /// Categorical likelihood over all channels.
    Categorical,
}

/// Probability clamp used by the cross-entropy terms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT2 {
        x: Var,
        w: Var,
        b: Option<Var>,
        cin: usize,
        cout: usize,
        dims: [usize; 3],
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Exp(Var),
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    Prelu {
        x: Var,
        slope: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    AddChannel {
        x: Var,
        v: Var,
    },
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    Mean(Var),
    Dice {
        p: Var,
        target: Tensor,
        eps: f64,
        include: Vec<bool>,
    },
    CrossEntropy {
        p: Var,
        target: Tensor,
        mode: CrossEntropyMode,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Split `[N, C, ...]` into `(N, C, spatial)`.
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    let s = shape[2..].iter().product::<usize>().max(1);
    (shape[0], shape[1], s)
}

fn spatial3(shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 5 {
        return Err(Error::Shape(format!(
            "expected a [N, C, D, H, W] tensor, got {shape:?}"
        )));
    }
    Ok([shape[2], shape[3], shape[4]])
}

impl Tape {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Insert a leaf. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let dims = spatial3(&xs)?;
        if ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::Shape(format!(
                "conv weight {ws:?} incompatible with input {xs:?}"
            )));
        }
        let geom = ConvGeom {
            cin: xs[1],
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
            dims,
        };
        for (axis, &d) in ["depth", "height", "width"].iter().zip(&dims) {
            if d + 2 * pad < geom.k {
                return Err(Error::Shape(format!("{axis} {d} smaller than kernel")));
            }
        }
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            xs[0],
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let od = geom.out_dims();
        let value = Tensor::from_vec(&[xs[0], geom.cout, od[0], od[1], od[2]], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let dims = spatial3(&xs)?;
        if ws.len() != 5 || ws[0] != xs[1] || ws[2..] != [2, 2, 2] {
            return Err(Error::Shape(format!(
                "transposed conv weight {ws:?} incompatible with input {xs:?}"
            )));
        }
        let (cin, cout) = (ws[0], ws[1]);
        let out = kernels::convt2_forward(
            self.value(x).data(),
            xs[0],
            cin,
            cout,
            dims,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[xs[0], cout, 2 * dims[0], 2 * dims[1], 2 * dims[2]], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::ConvT2 {
                x,
                w,
                b,
                cin,
                cout,
                dims,
            },
            rg,
        ))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, c, s) = ncs(xv.shape());
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!("{c} channels not divisible into {groups} groups")));
        }
        let cg = c / groups;
        let m = (cg * s) as f64;
        let mut mean = vec![0.0; n * groups];
        let mut rstd = vec![0.0; n * groups];
        let mut out = vec![0.0; xv.numel()];
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let xd = xv.data();
        for ni in 0..n {
            for g in 0..groups {
                let lo = (ni * c + g * cg) * s;
                let chunk = &xd[lo..lo + cg * s];
                let mu = chunk.iter().sum::<f64>() / m;
                let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                let r = 1.0 / (var + EPS).sqrt();
                mean[ni * groups + g] = mu;
                rstd[ni * groups + g] = r;
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    for i in 0..s {
                        let idx = lo + ci * s + i;
                        out[idx] = (xd[idx] - mu) * r * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let value = Tensor::from_vec(self.value(x).shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// `x: [N, F]`, `w: [O, F]`, `b: [O]` → `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear {ws:?} on input {xs:?}")));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * o];
        for (ni, row) in out.chunks_mut(o).enumerate() {
            row.copy_from_slice(self.value(b).data());
            let xr = &self.value(x).data()[ni * f..(ni + 1) * f];
            for (oi, r) in row.iter_mut().enumerate() {
                let wr = &self.value(w).data()[oi * f..(oi + 1) * f];
                *r += xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let value = Tensor::from_vec(&[n, o], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Channel-wise parametric ReLU; `slope` has one entry per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (n, c, s) = ncs(self.value(x).shape());
        if self.value(slope).numel() != c {
            return Err(Error::Shape(format!("prelu slope needs {c} entries")));
        }
        let sl = self.value(slope).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            let ch = (i / s) % c;
            if *v < 0.0 {
                *v *= sl[ch];
            }
        }
        debug_assert_eq!(value.numel(), n * c * s);
        let rg = self.rg(&[x, slope]);
        Ok(self.push(value, Op::Prelu { x, slope }, rg))
    }

    /// Broadcast-add `v: [N, C]` over the spatial axes of `x: [N, C, ...]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, s) = ncs(self.value(x).shape());
        if self.value(v).shape() != [n, c] {
            return Err(Error::Shape(format!(
                "channel bias {:?} does not match [{n}, {c}]",
                self.value(v).shape()
            )));
        }
        let vv = self.value(v).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(s).enumerate() {
            for e in chunk {
                *e += vv[i];
            }
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(value, Op::AddChannel { x, v }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("cannot concat {sa:?} with {sb:?}")));
        }
        let (n, ca, s) = ncs(&sa);
        let cb = sb[1];
        let mut data = Vec::with_capacity(n * (ca + cb) * s);
        for ni in 0..n {
            data.extend_from_slice(&self.value(a).data()[ni * ca * s..(ni + 1) * ca * s]);
            data.extend_from_slice(&self.value(b).data()[ni * cb * s..(ni + 1) * cb * s]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, s) = ncs(&shape);
        if start + len > c {
            return Err(Error::Shape(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(n * len * s);
        for ni in 0..n {
            let lo = (ni * c + start) * s;
            data.extend_from_slice(&self.value(x).data()[lo..lo + len * s]);
        }
        let mut out_shape = shape;
        out_shape[1] = len;
        let value = Tensor::from_vec(&out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    /// Softmax over the channel axis.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let value = softmax_channels(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// `mean((a - b)^2)`
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// `mean(|a - b|)`
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ab = self.abs(d);
        Ok(self.mean(ab))
    }

    /// Smoothed soft Dice loss averaged over the included `(sample, class)`
    /// pairs. `target` must be one-hot with the same shape as `p`.
    pub fn dice_loss(&mut self, p: Var, target: Tensor, eps: f64, include: Vec<bool>) -> Result<Var> {
        self.value(p).expect_shape(target.shape())?;
        let (_, c, _) = ncs(target.shape());
        if include.len() != c || !include.iter().any(|&b| b) {
            return Err(Error::Validation(format!(
                "dice class mask must have {c} entries with at least one selected"
            )));
        }
        let loss = dice_forward(self.value(p), &target, eps, &include);
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                p,
                target,
                eps,
                include,
            },
            rg,
        ))
    }

    pub fn cross_entropy(&mut self, p: Var, target: Tensor, mode: CrossEntropyMode) -> Result<Var> {
        self.value(p).expect_shape(target.shape())?;
        let loss = cross_entropy_forward(self.value(p), &target, mode)?;
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { p, target, mode }, rg))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.value(out).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.nodes[v.0].requires_grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xv = val(*x);
                let (dx, dw, db) = kernels::conv3d_backward(
                    xv.data(),
                    xv.batch(),
                    geom,
                    val(*w).data(),
                    g.data(),
                    (rg(*x), rg(*w), b.is_some_and(rg)),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, Tensor::from_vec(val(*w).shape(), dw)?);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.acc(grads, *b, Tensor::from_vec(val(*b).shape(), db)?);
                }
            }
            Op::ConvT2 {
                x,
                w,
                b,
                cin,
                cout,
                dims,
            } => {
                let xv = val(*x);
                let (dx, dw, db) = kernels::convt2_backward(
                    xv.data(),
                    xv.batch(),
                    *cin,
                    *cout,
                    *dims,
                    val(*w).data(),
                    g.data(),
                    (rg(*x), rg(*w), b.is_some_and(rg)),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, Tensor::from_vec(val(*w).shape(), dw)?);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.acc(grads, *b, Tensor::from_vec(val(*b).shape(), db)?);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let (n, c, s) = ncs(xv.shape());
                let cg = c / groups;
                let m = (cg * s) as f64;
                let gam = val(*gamma).data();
                let (xd, gd) = (xv.data(), g.data());
                let mut dx = vec![0.0; xv.numel()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for gi in 0..*groups {
                        let (mu, r) = (mean[ni * groups + gi], rstd[ni * groups + gi]);
                        let lo = (ni * c + gi * cg) * s;
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for k in 0..s {
                                let idx = lo + ci * s + k;
                                let xh = (xd[idx] - mu) * r;
                                dgamma[ch] += gd[idx] * xh;
                                dbeta[ch] += gd[idx];
                                let dxh = gd[idx] * gam[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for k in 0..s {
                                let idx = lo + ci * s + k;
                                let xh = (xd[idx] - mu) * r;
                                let dxh = gd[idx] * gam[ch];
                                dx[idx] = r / m * (m * dxh - sum_dxh - xh * sum_dxh_xh);
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                self.acc(grads, *gamma, Tensor::from_vec(val(*gamma).shape(), dgamma)?);
                self.acc(grads, *beta, Tensor::from_vec(val(*beta).shape(), dbeta)?);
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (val(*x).shape(), val(*w).shape());
                let (n, f, o) = (xs[0], xs[1], ws[0]);
                let (xd, wd, gd) = (val(*x).data(), val(*w).data(), g.data());
                self.acc_with(grads, *x, || {
                    let mut dx = vec![0.0; n * f];
                    for ni in 0..n {
                        for oi in 0..o {
                            let go = gd[ni * o + oi];
                            for fi in 0..f {
                                dx[ni * f + fi] += go * wd[oi * f + fi];
                            }
                        }
                    }
                    Tensor::from_vec(&[n, f], dx).expect("linear dx shape")
                });
                self.acc_with(grads, *w, || {
                    let mut dw = vec![0.0; o * f];
                    for ni in 0..n {
                        for oi in 0..o {
                            let go = gd[ni * o + oi];
                            for fi in 0..f {
                                dw[oi * f + fi] += go * xd[ni * f + fi];
                            }
                        }
                    }
                    Tensor::from_vec(&[o, f], dw).expect("linear dw shape")
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![0.0; o];
                    for ni in 0..n {
                        for oi in 0..o {
                            db[oi] += gd[ni * o + oi];
                        }
                    }
                    Tensor::from_vec(&[o], db).expect("linear db shape")
                });
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, *a, || g.zip_map(val(*b), |gg, bv| gg * bv).expect("mul"));
                self.acc_with(grads, *b, || g.zip_map(val(*a), |gg, av| gg * av).expect("mul"));
            }
            Op::Scale(x, s) => self.acc_with(grads, *x, || g.scale(*s)),
            Op::AddScalar(x) => self.acc_with(grads, *x, || g.clone()),
            Op::Square(x) => self.acc_with(grads, *x, || g.zip_map(val(*x), |gg, v| 2.0 * v * gg).expect("sq")),
            Op::Abs(x) => self.acc_with(grads, *x, || {
                g.zip_map(val(*x), |gg, v| {
                    if v > 0.0 {
                        gg
                    } else if v < 0.0 {
                        -gg
                    } else {
                        0.0
                    }
                })
                .expect("abs")
            }),
            Op::Exp(x) => self.acc_with(grads, *x, || g.zip_map(&node.value, |gg, y| gg * y).expect("exp")),
            Op::Silu(x) => self.acc_with(grads, *x, || {
                g.zip_map(val(*x), |gg, v| {
                    let s = sigmoid(v);
                    gg * (s + v * s * (1.0 - s))
                })
                .expect("silu")
            }),
            Op::Relu(x) => self.acc_with(grads, *x, || {
                g.zip_map(val(*x), |gg, v| if v > 0.0 { gg } else { 0.0 })
                    .expect("relu")
            }),
            Op::Sigmoid(x) => self.acc_with(grads, *x, || {
                g.zip_map(&node.value, |gg, y| gg * y * (1.0 - y)).expect("sigmoid")
            }),
            Op::Clamp { x, lo, hi } => self.acc_with(grads, *x, || {
                g.zip_map(val(*x), |gg, v| if v < *lo || v > *hi { 0.0 } else { gg })
                    .expect("clamp")
            }),
            Op::Prelu { x, slope } => {
                let (_, c, s) = ncs(val(*x).shape());
                let sl = val(*slope).data();
                let (xd, gd) = (val(*x).data(), g.data());
                self.acc_with(grads, *x, || {
                    let dx = xd
                        .iter()
                        .zip(gd)
                        .enumerate()
                        .map(|(i, (&v, &gg))| if v < 0.0 { gg * sl[(i / s) % c] } else { gg })
                        .collect();
                    Tensor::from_vec(val(*x).shape(), dx).expect("prelu dx")
                });
                self.acc_with(grads, *slope, || {
                    let mut ds = vec![0.0; c];
                    for (i, (&v, &gg)) in xd.iter().zip(gd).enumerate() {
                        if v < 0.0 {
                            ds[(i / s) % c] += gg * v;
                        }
                    }
                    Tensor::from_vec(val(*slope).shape(), ds).expect("prelu ds")
                });
            }
            Op::AddChannel { x, v } => {
                self.acc_with(grads, *x, || g.clone());
                self.acc_with(grads, *v, || {
                    let (n, c, s) = ncs(g.shape());
                    let dv = g.data().chunks(s).map(|ch| ch.iter().sum()).collect();
                    Tensor::from_vec(&[n, c], dv).expect("channel grad")
                });
            }
            Op::Concat(a, b) => {
                let (n, ca, s) = ncs(val(*a).shape());
                let cb = val(*b).shape()[1];
                let gd = g.data();
                self.acc_with(grads, *a, || {
                    let mut d = Vec::with_capacity(n * ca * s);
                    for ni in 0..n {
                        let lo = ni * (ca + cb) * s;
                        d.extend_from_slice(&gd[lo..lo + ca * s]);
                    }
                    Tensor::from_vec(val(*a).shape(), d).expect("concat a")
                });
                self.acc_with(grads, *b, || {
                    let mut d = Vec::with_capacity(n * cb * s);
                    for ni in 0..n {
                        let lo = ni * (ca + cb) * s + ca * s;
                        d.extend_from_slice(&gd[lo..lo + cb * s]);
                    }
                    Tensor::from_vec(val(*b).shape(), d).expect("concat b")
                });
            }
            Op::SliceChannels { x, start } => self.acc_with(grads, *x, || {
                let (n, c, s) = ncs(val(*x).shape());
                let len = g.shape()[1];
                let mut d = Tensor::zeros(val(*x).shape());
                for ni in 0..n {
                    let lo = (ni * c + start) * s;
                    d.data_mut()[lo..lo + len * s].copy_from_slice(&g.data()[ni * len * s..(ni + 1) * len * s]);
                }
                d
            }),
            Op::Softmax(x) => self.acc_with(grads, *x, || {
                let y = &node.value;
                let (n, c, s) = ncs(y.shape());
                let mut d = Tensor::zeros(y.shape());
                let (yd, gd) = (y.data(), g.data());
                for ni in 0..n {
                    for k in 0..s {
                        let dot: f64 = (0..c)
                            .map(|ch| {
                                let idx = (ni * c + ch) * s + k;
                                yd[idx] * gd[idx]
                            })
                            .sum();
                        for ch in 0..c {
                            let idx = (ni * c + ch) * s + k;
                            d.data_mut()[idx] = yd[idx] * (gd[idx] - dot);
                        }
                    }
                }
                d
            }),
            Op::Mean(x) => self.acc_with(grads, *x, || {
                let n = val(*x).numel() as f64;
                Tensor::full(val(*x).shape(), g.item() / n)
            }),
            Op::Dice {
                p,
                target,
                eps,
                include,
            } => self.acc_with(grads, *p, || {
                let mut d = dice_grad(val(*p), target, *eps, include);
                let s = g.item();
                d.data_mut().iter_mut().for_each(|v| *v *= s);
                d
            }),
            Op::CrossEntropy { p, target, mode } => self.acc_with(grads, *p, || {
                let mut d = cross_entropy_grad(val(*p), target, *mode);
                let s = g.item();
                d.data_mut().iter_mut().for_each(|v| *v *= s);
                d
            }),
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, s) = ncs(x.shape());
    let mut out = x.clone();
    let od = out.data_mut();
    for ni in 0..n {
        for k in 0..s {
            let idx = |ch: usize| (ni * c + ch) * s + k;
            let mx = (0..c).map(|ch| od[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (od[idx(ch)] - mx).exp();
                od[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                od[idx(ch)] /= z;
            }
        }
    }
    out
}

/// Per `(sample, class)` sums `(Σ p·g, Σ p, Σ g)`.
fn dice_terms(p: &Tensor, g: &Tensor) -> Vec<(f64, f64, f64)> {
    let (n, c, s) = ncs(p.shape());
    let (pd, gd) = (p.data(), g.data());
    (0..n * c)
        .map(|nc| {
            let lo = nc * s;
            let mut t = (0.0, 0.0, 0.0);
            for k in lo..lo + s {
                t.0 += pd[k] * gd[k];
                t.1 += pd[k];
                t.2 += gd[k];
            }
            t
        })
        .collect()
}

pub(crate) fn dice_forward(p: &Tensor, g: &Tensor, eps: f64, include: &[bool]) -> f64 {
    let (_, c, _) = ncs(p.shape());
    let mut total = 0.0;
    let mut count = 0usize;
    for (nc, (inter, sp, sg)) in dice_terms(p, g).into_iter().enumerate() {
        if include[nc % c] {
            total += 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
            count += 1;
        }
    }
    total / count as f64
}

fn dice_grad(p: &Tensor, g: &Tensor, eps: f64, include: &[bool]) -> Tensor {
    let (n, c, s) = ncs(p.shape());
    let terms = dice_terms(p, g);
    let count = (0..n * c).filter(|nc| include[nc % c]).count() as f64;
    let mut d = Tensor::zeros(p.shape());
    let gd = g.data();
    for (nc, (inter, sp, sg)) in terms.into_iter().enumerate() {
        if !include[nc % c] {
            continue;
        }
        let num = 2.0 * inter + eps;
        let den = sp + sg + eps;
        for k in nc * s..(nc + 1) * s {
            d.data_mut()[k] = -(2.0 * gd[k] * den - num) / (den * den) / count;
        }
    }
    d
}

pub(crate) fn cross_entropy_forward(p: &Tensor, g: &Tensor, mode: CrossEntropyMode) -> Result<f64> {
    let (n, c, s) = ncs(p.shape());
    let clamp = |v: f64| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (pd, gd) = (p.data(), g.data());
    let mut total = 0.0;
    match mode {
        CrossEntropyMode::Binary => {
            if c != 2 {
                return Err(Error::Validation(format!(
                    "binary cross-entropy needs 2 channels, got {c}"
                )));
            }
            for ni in 0..n {
                for k in 0..s {
                    let idx = (ni * 2 + 1) * s + k;
                    let (q, y) = (clamp(pd[idx]), gd[idx]);
                    total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
                }
            }
        }
        CrossEntropyMode::Categorical => {
            for ni in 0..n {
                for ch in 0..c {
                    for k in 0..s {
                        let idx = (ni * c + ch) * s + k;
                        if gd[idx] != 0.0 {
                            total -= gd[idx] * clamp(pd[idx]).ln();
                        }
                    }
                }
            }
        }
    }
    Ok(total / (n * s) as f64)
}

fn cross_entropy_grad(p: &Tensor, g: &Tensor, mode: CrossEntropyMode) -> Tensor {
    let (n, c, s) = ncs(p.shape());
    let inside = |v: f64| (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&v);
    let norm = (n * s) as f64;
    let (pd, gd) = (p.data(), g.data());
    let mut d = Tensor::zeros(p.shape());
    match mode {
        CrossEntropyMode::Binary => {
            for ni in 0..n {
                for k in 0..s {
                    let idx = (ni * 2 + 1) * s + k;
                    let (q, y) = (pd[idx], gd[idx]);
                    if inside(q) {
                        d.data_mut()[idx] = -(y / q - (1.0 - y) / (1.0 - q)) / norm;
                    }
                }
            }
        }
        CrossEntropyMode::Categorical => {
            for idx in 0..n * c * s {
                if gd[idx] != 0.0 && inside(pd[idx]) {
                    d.data_mut()[idx] = -gd[idx] / pd[idx] / norm;
                }
            }
        }
    }
    d
}
