//! Run configuration: every hyperparameter in one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::NormalizeMode;
use crate::wkv::WkvExponent;

/// Hyperparameters for the model, the losses and the toy training loop.
///
/// Missing keys take the desk-scale defaults; unknown keys are rejected.
/// Paper scale is `channels: 48`, `image_size: 256`, `learning_rate: 1e-4`
/// with a batch of eight, which this crate does not attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base feature width `C`.
    pub channels: usize,
    /// U-Net depth including the bottleneck. Level `l` has `C·2^l` channels.
    pub levels: usize,
    pub blocks_per_level: usize,
    /// Temporal bins `B` of the event voxel grid.
    pub bins: usize,
    pub voxel_normalize: NormalizeMode,
    pub hidden_ratio: usize,
    pub rewkv_iterations: usize,
    pub wkv_exponent: WkvExponent,
    /// Use one set of decay/bonus parameters for both scan directions.
    pub share_direction_params: bool,
    /// Let each modality's CS-Shift also aggregate the other modality's
    /// branches.
    pub cs_shift_cross: bool,
    /// Residual connections around the spatial and channel mixes.
    pub residual: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub gaussian_kernel: usize,
    /// Circular instead of zero-padded convolution in the frequency branch.
    pub fft_circular: bool,
    pub eisfe: bool,
    pub spatial_mix: bool,
    pub channel_mix: bool,
    /// Weights for Charbonnier, perceptual, SSIM and MS-SSIM terms.
    pub lambda: [f64; 4],
    pub ms_ssim: bool,
    /// Charbonnier over the whole difference norm instead of per pixel.
    pub charbonnier_global: bool,
    pub charbonnier_eps: f64,
    pub seed: u64,
    /// Only `"f64"` is supported end to end.
    pub precision: String,
    pub learning_rate: f64,
    pub steps: usize,
    pub image_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            levels: 4,
            blocks_per_level: 1,
            bins: 32,
            voxel_normalize: NormalizeMode::MaxAbs,
            hidden_ratio: 4,
            rewkv_iterations: 2,
            wkv_exponent: WkvExponent::Vrwkv,
            share_direction_params: false,
            cs_shift_cross: false,
            residual: true,
            sigma_min: 0.3,
            sigma_max: 4.0,
            gaussian_kernel: 11,
            fft_circular: false,
            eisfe: true,
            spatial_mix: true,
            channel_mix: true,
            lambda: [1.0, 0.1, 0.2, 0.2],
            ms_ssim: true,
            charbonnier_global: false,
            charbonnier_eps: 1e-4,
            seed: 0,
            precision: "f64".into(),
            learning_rate: 1e-3,
            steps: 500,
            image_size: 64,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Spatial extents of the input image must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        2 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if !(1..=6).contains(&self.levels) {
            return bad(format!("levels must be in 1..=6, got {}", self.levels));
        }
        if self.blocks_per_level == 0 || self.bins == 0 || self.hidden_ratio == 0 {
            return bad("blocks_per_level, bins and hidden_ratio must be positive".into());
        }
        if self.rewkv_iterations == 0 {
            return bad("rewkv_iterations must be positive".into());
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return bad(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            ));
        }
        if self.gaussian_kernel.is_multiple_of(2) {
            return bad(format!("gaussian_kernel must be odd, got {}", self.gaussian_kernel));
        }
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad(format!("lambda weights must be finite and non-negative: {:?}", self.lambda));
        }
        if self.lambda.iter().all(|&l| l == 0.0) {
            return bad("at least one lambda weight must be positive".into());
        }
        if !(self.charbonnier_eps > 0.0) {
            return bad("charbonnier_eps must be positive".into());
        }
        if self.precision != "f64" {
            return bad(format!("precision {:?} is not supported (only \"f64\")", self.precision));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.steps > 2000 {
            return bad(format!("steps must be <= 2000, got {}", self.steps));
        }
        self.check_extent(self.image_size, self.image_size)
    }

    /// Checks that an `h×w` input survives the stem and every downsample.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "image extents {h}×{w} must be positive multiples of {m}"
            )));
        }
        Ok(())
    }
}
