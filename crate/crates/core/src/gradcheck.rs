//! Finite-difference verification of every parameter group of a model.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_difference_entries, relative_error, Graph, ModelParams, Var};
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::EvRwkv;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Gradient magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Entries checked per parameter tensor (all of them if smaller).
    pub samples_per_param: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            floor: 1e-4,
            samples_per_param: 3,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// `path[index]` of the worst entry.
    pub worst: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>7} {:>12}  worst", "group", "entries", "max rel err")?;
        for g in &self.groups {
            let flag = if g.max_rel_error > self.tolerance { "  FAIL" } else { "" };
            writeln!(
                f,
                "{:<28} {:>7} {:>12.3e}  {}{flag}",
                g.group, g.entries, g.max_rel_error, g.worst
            )?;
        }
        let verdict = if self.passed() { "pass" } else { "FAIL" };
        write!(f, "{verdict}: max {:.3e}, tolerance {:.0e}", self.max_rel_error(), self.tolerance)
    }
}

/// `unet.enc0.block0.spatial.img.ln.gamma` → `unet.enc0`; `illum.w` →
/// `illum`.
pub fn group_of(path: &str) -> String {
    let parts: Vec<&str> = path.split('.').collect();
    let keep = (parts.len() - 1).clamp(1, 2);
    parts[..keep].join(".")
}

/// Compares the taped gradient of a scalar `objective` against central
/// differences on a seeded sample of entries of every parameter.
pub fn check_objective<F>(params: &ModelParams, objective: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'g> Fn(&'g Graph<'_>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new(params);
        let loss = objective(&g)?;
        g.backward(loss)?
    };
    let value = |p: &ModelParams| -> Result<f64> {
        let g = Graph::inference(p);
        Ok(objective(&g)?.value().item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups: BTreeMap<String, GroupResult> = BTreeMap::new();
    for (path, t) in params.iter() {
        let n = t.numel();
        let idx: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let numeric = finite_difference_entries(value, params, path, &idx, opts.h)?;
        let zeros;
        let grad = match analytic.get(path) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(t.shape());
                &zeros
            }
        };
        let group = groups.entry(group_of(path)).or_insert_with_key(|k| GroupResult {
            group: k.clone(),
            entries: 0,
            max_rel_error: 0.0,
            worst: String::new(),
        });
        for (&i, &num) in idx.iter().zip(&numeric) {
            let err = relative_error(grad.data()[i], num, opts.floor);
            group.entries += 1;
            if err > group.max_rel_error || group.worst.is_empty() {
                group.max_rel_error = err;
                group.worst = format!("{path}[{i}]");
            }
        }
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        groups: groups.into_values().collect(),
    })
}

/// `cfg` shrunk to the smallest admissible input: `C = 4`, `B = 4` and a
/// square image of the minimum extent, so stem features are at most 8×8.
pub fn tiny_config(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        channels: 4,
        bins: 4,
        image_size: cfg.size_multiple(),
        ..cfg.clone()
    }
}

/// Random image, voxels and output projection for a gradient check.
pub struct CheckInputs {
    pub image: Tensor,
    pub voxels: Tensor,
    pub projection: Tensor,
}

impl CheckInputs {
    pub fn new(cfg: &RunConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        Self {
            image: Tensor::uniform(&[3, s, s], 0.5, &mut rng).map(|v| v + 0.5),
            voxels: Tensor::uniform(&[cfg.bins, s, s], 1.0, &mut rng),
            projection: Tensor::uniform(&[3, s, s], 1.0, &mut rng),
        }
    }
}

/// Checks the full model on [`tiny_config`] with the objective
/// `Σ projection ⊙ output`.
pub fn model_gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let tiny = tiny_config(cfg);
    let (model, params) = EvRwkv::new(&tiny)?;
    let inputs = CheckInputs::new(&tiny, opts.seed);
    check_objective(
        &params,
        |g| {
            let out = model.forward(g, g.input(inputs.image.clone()), g.input(inputs.voxels.clone()))?;
            Ok(out.dot_const(&inputs.projection))
        },
        opts,
    )
}
