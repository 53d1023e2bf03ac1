//! Parameterized layers built on [`Graph`] operations.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = store.insert(
            format!("{name}.weight"),
            fan_in_uniform(&[cout, cin, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// Same-size 3x3 convolution.
    pub fn same3<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, cin, cout, 3, 1, 1, rng)
    }

    /// Zero-initialized 3x3 convolution.
    pub fn zeroed3<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), Tensor::zeros(&[cout, cin, 3, 3]))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            pad: 1,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{name}.weight"),
            fan_in_uniform(&[dout, din], din, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(&[channels], F::one()))?;
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self {
            gamma,
            beta,
            groups,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups, Self::EPS)
    }
}

/// Largest group count not exceeding `preferred` that divides `channels`.
pub fn group_count(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}
