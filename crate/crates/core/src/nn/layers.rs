//! Parameterized building blocks. Each layer owns only [`ParamId`]s; the
//! weights live in the model's [`ParamStore`].

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::rng::DetRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k, k], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng);
        Conv3d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// Kernel-3, padding-1 convolution preserving spatial size.
    pub fn same(store: &mut ParamStore, rng: &mut DetRng, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(store, rng, name, cin, cout, 3, 1, 1)
    }

    /// Kernel-2, stride-2 downsampling convolution.
    pub fn down(store: &mut ParamStore, rng: &mut DetRng, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(store, rng, name, cin, cout, 2, 2, 0)
    }

    pub fn pointwise(store: &mut ParamStore, rng: &mut DetRng, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(store, rng, name, cin, cout, 1, 1, 0)
    }

    /// 1×1×1 convolution with all weights and bias set to zero.
    pub fn zero(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, 1, 1, 1]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv3d {
            weight,
            bias,
            stride: 1,
            pad: 0,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv3d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Kernel-2 stride-2 transposed convolution (2× upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose3d {
    pub fn new(store: &mut ParamStore, rng: &mut DetRng, name: &str, cin: usize, cout: usize) -> Self {
        let fan_in = cin * 8;
        let weight = store.add_uniform(format!("{name}.weight"), &[cin, cout, 2, 2, 2], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng);
        ConvTranspose3d { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Largest group count ≤ 8 dividing `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: default_groups(channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut DetRng, name: &str, fin: usize, fout: usize) -> Self {
        Linear {
            weight: store.add_uniform(format!("{name}.weight"), &[fout, fin], fin, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[fout], fin, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Activation selectable per model.
#[derive(Debug, Clone)]
pub enum Activation {
    Relu,
    Silu,
    Prelu(ParamId),
}

impl Activation {
    pub fn prelu(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Activation::Prelu(store.add(format!("{name}.slope"), Tensor::full(&[channels], 0.25)))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Relu => tape.relu(x),
            Activation::Silu => tape.silu(x),
            Activation::Prelu(slope) => tape.prelu(x, p.var(*slope))?,
        })
    }
}
