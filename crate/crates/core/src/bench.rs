//! Wall-clock comparison of the quadratic and linear Bi-WKV evaluations.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wkv::{bi_wkv_naive_raw, bi_wkv_scan_raw, WkvExponent};

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub channels: usize,
    /// Timed repetitions per point; the median is reported.
    pub repeats: usize,
    /// Each timed repetition loops until at least this long has passed, so
    /// fast points are not dominated by timer resolution.
    pub min_seconds: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048, 4096],
            channels: 32,
            repeats: 5,
            min_seconds: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    #[serde(rename = "impl")]
    pub implementation: &'static str,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub naive_slope: f64,
    pub scan_slope: f64,
    /// Largest relative disagreement between the two evaluations.
    pub max_rel_diff: f64,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("impl,T,C,seconds\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{:e}", r.implementation, r.t, r.c, r.seconds).unwrap();
        }
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Median seconds per call: one discarded warm-up call, then `repeats`
/// timed batches.
fn time_median<F: FnMut() -> Vec<f64>>(mut f: F, opts: &BenchOptions) -> (f64, Vec<f64>) {
    let out = f();
    let mut samples = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let start = Instant::now();
        let mut calls = 0u32;
        loop {
            std::hint::black_box(f());
            calls += 1;
            if start.elapsed().as_secs_f64() >= opts.min_seconds {
                break;
            }
        }
        samples.push(start.elapsed().as_secs_f64() / calls as f64);
    }
    samples.sort_by(f64::total_cmp);
    (samples[samples.len() / 2], out)
}

pub fn bench_wkv(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.lengths.len() < 2 || opts.repeats == 0 || opts.channels == 0 {
        return Err(Error::invalid("benchmark needs two lengths, one repeat and one channel"));
    }
    let c = opts.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let w: Vec<f64> = (0..c).map(|i| 0.5 + i as f64 / c as f64).collect();
    let u = Tensor::uniform(&[c], 0.5, &mut rng).into_data();
    let mut rows = Vec::new();
    let (mut naive_pts, mut scan_pts) = (Vec::new(), Vec::new());
    let mut max_rel_diff = 0.0f64;
    for &t in &opts.lengths {
        let k = Tensor::uniform(&[t, c], 1.0, &mut rng).into_data();
        let v = Tensor::uniform(&[t, c], 1.0, &mut rng).into_data();
        let (naive_s, a) = time_median(|| bi_wkv_naive_raw(&k, &v, &w, &u, t, c, WkvExponent::Vrwkv), opts);
        let (scan_s, b) = time_median(|| bi_wkv_scan_raw(&k, &v, &w, &u, t, c), opts);
        for (x, y) in a.iter().zip(&b) {
            max_rel_diff = max_rel_diff.max((x - y).abs() / x.abs().max(1e-12));
        }
        log::info!("T={t}: naive {naive_s:.3e}s scan {scan_s:.3e}s");
        naive_pts.push((t as f64, naive_s));
        scan_pts.push((t as f64, scan_s));
        rows.push(BenchRow { implementation: "naive", t, c, seconds: naive_s });
        rows.push(BenchRow { implementation: "scan", t, c, seconds: scan_s });
    }
    Ok(BenchReport {
        rows,
        naive_slope: log_log_slope(&naive_pts),
        scan_slope: log_log_slope(&scan_pts),
        max_rel_diff,
    })
}
