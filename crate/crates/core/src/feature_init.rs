//! Preliminary brightening and the convolutional stems that bring both
//! modalities to half resolution.

use crate::autodiff::{join, Graph, ParamInit, Var};
use crate::error::{Error, Result};
use crate::layers::Conv;

/// Illumination map `L̂ = σ(conv3×3([max_rgb(I); I]))`, shape `1×H×W`.
#[derive(Clone, Debug)]
pub struct IlluminationEstimator {
    conv: Conv,
}

impl IlluminationEstimator {
    pub fn new(pi: &mut ParamInit, prefix: &str) -> Self {
        Self {
            conv: Conv::new(pi, prefix, 1, 4, 3, 1, true),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, img: Var<'g>) -> Result<Var<'g>> {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("expected a 3×H×W image, got {s:?}")));
        }
        let feats = Var::concat(&[img.channel_max(), img]);
        Ok(self.conv.apply(g, feats).sigmoid())
    }
}

/// `I ⊙ L̂ + I`, with `L̂` broadcast over channels. Not clamped.
pub fn retinex_boost<'g>(img: Var<'g>, illum: Var<'g>) -> Var<'g> {
    img.mul_spatial(illum).add(img)
}

/// `3×3 stride 1 → leaky ReLU(0.1) → 3×3 stride 2`, both `C` wide.
#[derive(Clone, Debug)]
pub struct Stem {
    first: Conv,
    second: Conv,
}

impl Stem {
    pub fn new(pi: &mut ParamInit, prefix: &str, c_in: usize, c: usize) -> Self {
        Self {
            first: Conv::new(pi, &join(prefix, "conv1"), c, c_in, 3, 1, true),
            second: Conv::new(pi, &join(prefix, "conv2"), c, c, 3, 2, true),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::shape(format!("stem needs even C×H×W extents, got {s:?}")));
        }
        let x = self.first.apply(g, x).leaky_relu(0.1);
        Ok(self.second.apply(g, x))
    }
}
