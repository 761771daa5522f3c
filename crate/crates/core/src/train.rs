//! Adam and the single-pair overfitting loop.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::autodiff::{Graph, ModelParams};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image_io::write_atomic;
use crate::losses::{psnr, ssim, total_loss, PerceptualProxy};
use crate::model::EvRwkv;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// alone.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (path, p) in params.iter_mut() {
            let Some(g) = grads.get(path) else { continue };
            let m = self.m.entry(path.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(path.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((p, m), v), &g) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Low-light image, its ground truth and the voxelized events.
#[derive(Clone, Debug)]
pub struct ToyPair {
    pub low: Tensor,
    pub gt: Tensor,
    pub voxels: Tensor,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub terms: Vec<(&'static str, f64)>,
}

impl StepRecord {
    pub fn total(&self) -> f64 {
        self.terms.iter().find(|(n, _)| *n == "total").map_or(f64::NAN, |t| t.1)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Loss terms before each update.
    pub history: Vec<StepRecord>,
    pub initial_psnr: f64,
    pub initial_ssim: f64,
    pub final_psnr: f64,
    pub final_ssim: f64,
    pub params: ModelParams,
}

impl TrainReport {
    pub fn psnr_gain(&self) -> f64 {
        self.final_psnr - self.initial_psnr
    }

    /// `step` followed by one column per loss term.
    pub fn loss_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.into());
        if let Some(first) = self.history.first() {
            let mut header = vec!["step"];
            header.extend(first.terms.iter().map(|t| t.0));
            w.write_record(&header).map_err(io)?;
        }
        for r in &self.history {
            let mut row = vec![r.step.to_string()];
            row.extend(r.terms.iter().map(|t| format!("{:e}", t.1)));
            w.write_record(&row).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.loss_csv()?.as_bytes())
    }
}

fn evaluate(model: &EvRwkv, params: &ModelParams, pair: &ToyPair) -> Result<(f64, f64)> {
    let out = model.enhance(params, &pair.low, &pair.voxels)?.map(|v| v.clamp(0.0, 1.0));
    Ok((psnr(&out, &pair.gt, 1.0)?, ssim(&out, &pair.gt)?))
}

/// Overfits `params` to one pair for `cfg.steps` Adam steps. PSNR and SSIM
/// are measured on the clamped output before the first and after the last
/// update.
pub fn train_toy(model: &EvRwkv, mut params: ModelParams, pair: &ToyPair, cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    model.check_inputs(pair.low.shape(), pair.voxels.shape())?;
    if pair.gt.shape() != pair.low.shape() {
        return Err(Error::shape(format!(
            "ground truth {:?} does not match input {:?}",
            pair.gt.shape(),
            pair.low.shape()
        )));
    }
    let proxy = PerceptualProxy::new();
    let (initial_psnr, initial_ssim) = evaluate(model, &params, pair)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let grads = {
            let g = Graph::new(&params);
            let pred = model.forward(&g, g.input(pair.low.clone()), g.input(pair.voxels.clone()))?;
            let terms = total_loss(pred, g.input(pair.gt.clone()), cfg, &proxy)?;
            let record = StepRecord { step, terms: terms.report() };
            let loss = record.total();
            if !loss.is_finite() {
                return Err(diverged(&params, None, step, "loss"));
            }
            history.push(record);
            if step % 50 == 0 {
                log::info!("step {step}: loss {loss:.6}");
            }
            g.backward(terms.total)?
        };
        if let Some((path, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(diverged(&params, Some(path), step, "gradient"));
        }
        adam.step(&mut params, &grads);
        if params.first_non_finite().is_some() {
            return Err(diverged(&params, None, step, "update"));
        }
    }
    let (final_psnr, final_ssim) = evaluate(model, &params, pair)?;
    Ok(TrainReport {
        history,
        initial_psnr,
        initial_ssim,
        final_psnr,
        final_ssim,
        params,
    })
}

fn diverged(params: &ModelParams, grad_path: Option<&str>, step: usize, what: &str) -> Error {
    let culprit = params
        .first_non_finite()
        .map(|p| format!("first non-finite parameter: {p}"))
        .or_else(|| grad_path.map(|p| format!("first non-finite gradient: {p}")))
        .unwrap_or_else(|| "all parameters finite, activations overflowed".into());
    Error::NonFinite(format!("training diverged at step {step} ({what}); {culprit}"))
}
