//! Parameterized convolution and projection layers bound to a [`Graph`].

use crate::autodiff::{join, Graph, ParamInit, Var};

/// `k×k` convolution with `pad = k/2` and an optional zero-initialized bias.
#[derive(Clone, Debug)]
pub struct Conv {
    w: String,
    b: Option<String>,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(pi: &mut ParamInit, prefix: &str, co: usize, ci: usize, k: usize, stride: usize, bias: bool) -> Self {
        let w = pi.uniform(&join(prefix, "w"), &[co, ci, k, k], ci * k * k);
        let b = bias.then(|| pi.zeros(&join(prefix, "b"), &[co]));
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn weight_path(&self) -> &str {
        &self.w
    }

    pub fn bias_path(&self) -> Option<&str> {
        self.b.as_deref()
    }

    pub fn apply<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Var<'g> {
        let b = self.b.as_ref().map(|p| g.param(p));
        x.conv2d(g.param(&self.w), b, self.stride, self.pad)
    }
}

/// Transposed convolution `k×k`, stride `s`, padding `p`, with bias.
/// The weight is laid out `C_in×C_out×k×k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    w: String,
    b: String,
    stride: usize,
    pad: usize,
}

impl ConvTranspose {
    pub fn new(pi: &mut ParamInit, prefix: &str, ci: usize, co: usize, k: usize, stride: usize, pad: usize) -> Self {
        let w = pi.uniform(&join(prefix, "w"), &[ci, co, k, k], ci * k * k / (stride * stride));
        let b = pi.zeros(&join(prefix, "b"), &[co]);
        Self { w, b, stride, pad }
    }

    pub fn apply<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Var<'g> {
        x.conv_transpose2d(g.param(&self.w), Some(g.param(&self.b)), self.stride, self.pad)
    }
}

/// Token projection `X·W` for `X` of shape `T×in`, with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
}

impl Linear {
    pub fn new(pi: &mut ParamInit, prefix: &str, inp: usize, out: usize) -> Self {
        Self {
            w: pi.uniform(prefix, &[inp, out], inp),
        }
    }

    pub fn path(&self) -> &str {
        &self.w
    }

    pub fn apply<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Var<'g> {
        x.matmul(g.param(&self.w))
    }
}
