//! The full enhancer: brightening, stems, the cross-modal U-Net, fusion and
//! the reconstruction head.

use crate::autodiff::{Graph, ModelParams, ParamInit, Var};
use crate::config::RunConfig;
use crate::cross_rwkv::UNet;
use crate::eisfe::{Eisfe, Head};
use crate::error::{Error, Result};
use crate::events::{normalize_voxel, voxelize, EventStream};
use crate::feature_init::{retinex_boost, IlluminationEstimator, Stem};
use crate::layers::Conv;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Fusion {
    Eisfe(Eisfe),
    /// `1×1` conv over the concatenated inputs when EISFE is ablated.
    Plain(Conv),
}

/// Parameter paths start with `illum`, `stem_img`, `stem_ev`, `unet`,
/// `eisfe` (or `fuse` without EISFE) and `head`.
#[derive(Clone, Debug)]
pub struct EvRwkv {
    cfg: RunConfig,
    illum: IlluminationEstimator,
    stem_img: Stem,
    stem_ev: Stem,
    unet: UNet,
    fusion: Fusion,
    head: Head,
}

impl EvRwkv {
    /// Builds the model and draws its parameters from `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<(Self, ModelParams)> {
        cfg.validate()?;
        let mut params = ModelParams::new();
        let model = Self::build(cfg, &mut ParamInit::new(&mut params, cfg.seed));
        Ok((model, params))
    }

    pub fn build(cfg: &RunConfig, pi: &mut ParamInit) -> Self {
        let c = cfg.channels;
        Self {
            cfg: cfg.clone(),
            illum: IlluminationEstimator::new(pi, "illum"),
            stem_img: Stem::new(pi, "stem_img", 3, c),
            stem_ev: Stem::new(pi, "stem_ev", cfg.bins, c),
            unet: UNet::new(pi, "unet", cfg),
            fusion: if cfg.eisfe {
                Fusion::Eisfe(Eisfe::new(pi, "eisfe", cfg))
            } else {
                Fusion::Plain(Conv::new(pi, "fuse", c, 3 * c, 1, 1, true))
            },
            head: Head::new(pi, "head", c),
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Checks a `3×H×W` image against a `B×H×W` voxel grid.
    pub fn check_inputs(&self, image: &[usize], voxels: &[usize]) -> Result<()> {
        if image.len() != 3 || image[0] != 3 {
            return Err(Error::shape(format!("expected a 3×H×W image, got {image:?}")));
        }
        if voxels.len() != 3 || voxels[0] != self.cfg.bins || voxels[1..] != image[1..] {
            return Err(Error::shape(format!(
                "expected a {}×{}×{} voxel grid, got {voxels:?}",
                self.cfg.bins, image[1], image[2]
            )));
        }
        self.cfg.check_extent(image[1], image[2])
    }

    /// Enhanced `3×H×W` image, not clamped.
    pub fn forward<'g>(&self, g: &'g Graph<'_>, image: Var<'g>, voxels: Var<'g>) -> Result<Var<'g>> {
        self.check_inputs(&image.shape(), &voxels.shape())?;
        let lit = retinex_boost(image, self.illum.forward(g, image)?);
        let fi = self.stem_img.forward(g, lit)?;
        let fe = self.stem_ev.forward(g, voxels)?;
        let (ri, re) = self.unet.forward(g, fi, fe)?;
        let fused = match &self.fusion {
            Fusion::Eisfe(e) => e.forward(g, ri, re, fi)?,
            Fusion::Plain(conv) => conv.apply(g, Var::concat(&[ri, re, fi])),
        };
        Ok(self.head.forward(g, fused))
    }

    /// Inference without recording gradients.
    pub fn enhance(&self, params: &ModelParams, image: &Tensor, voxels: &Tensor) -> Result<Tensor> {
        let g = Graph::inference(params);
        let out = self.forward(&g, g.input(image.clone()), g.input(voxels.clone()))?;
        let out = out.value();
        if !out.is_finite() {
            return Err(Error::NonFinite("enhanced image".into()));
        }
        Ok((*out).clone())
    }
}

/// Voxel grid for an `h×w` frame, normalized per the config. The window
/// defaults to the span of the stream; an empty or instantaneous stream with
/// no explicit window gives an all-zero grid.
pub fn event_voxels(
    stream: &EventStream,
    cfg: &RunConfig,
    window: Option<(u64, u64)>,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let (t0, t1) = match window.or_else(|| stream.default_window()) {
        Some((t0, t1)) if window.is_some() || t1 > t0 => (t0, t1),
        _ => {
            log::warn!("no usable event window, using an empty voxel grid");
            return Ok(Tensor::zeros(&[cfg.bins, h, w]));
        }
    };
    let grid = voxelize(&stream.events, cfg.bins, h, w, t0, t1)?;
    Ok(normalize_voxel(grid, cfg.voxel_normalize).data)
}
