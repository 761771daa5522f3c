//! Training losses and image quality metrics.
//!
//! Every loss is built from tape operations, so the same code serves as a
//! differentiable training objective and, on a constant tape, as a metric.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::eisfe::gaussian_kernel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Published scale weights. They are rounded and sum to 1.0001, so
/// [`ms_ssim_weights`] renormalizes them before use.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Floor applied to each MS-SSIM factor before raising it to its weight.
pub const MS_SSIM_FLOOR: f64 = 1e-6;

fn same_shape(a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "images differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Per-pixel Charbonnier `mean(sqrt(d² + ε²))`.
pub fn charbonnier<'t>(x: Var<'t>, y: Var<'t>, eps: f64) -> Result<Var<'t>> {
    same_shape(&x, &y)?;
    Ok(x.sub(y).square().add_scalar(eps * eps).sqrt().mean())
}

/// Whole-image Charbonnier `sqrt(‖d‖² + ε²)`.
pub fn charbonnier_global<'t>(x: Var<'t>, y: Var<'t>, eps: f64) -> Result<Var<'t>> {
    same_shape(&x, &y)?;
    Ok(x.sub(y).square().sum().add_scalar(eps * eps).sqrt())
}

/// Frozen random feature extractor standing in for a pretrained network:
/// three `3×3` stride-2 convolutions (3→8→16→32) with leaky ReLU, weights
/// drawn from a fixed seed.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    stages: Vec<Tensor>,
}

impl Default for PerceptualProxy {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptualProxy {
    pub const CHANNELS: [usize; 4] = [3, 8, 16, 32];

    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stages = Self::CHANNELS
            .windows(2)
            .map(|p| {
                let fan_in = p[0] * 9;
                Tensor::uniform(&[p[1], p[0], 3, 3], (6.0 / fan_in as f64).sqrt(), &mut rng)
            })
            .collect();
        Self { stages }
    }

    /// Feature maps after each stage.
    pub fn features<'t>(&self, x: Var<'t>) -> Vec<Var<'t>> {
        let tape = x.tape();
        let mut cur = x;
        self.stages
            .iter()
            .map(|w| {
                cur = cur.conv2d(tape.constant(w.clone()), None, 2, 1).leaky_relu(0.1);
                cur
            })
            .collect()
    }

    /// `Σ_stages mean|Φ(x) − Φ(y)|`.
    pub fn loss<'t>(&self, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        same_shape(&x, &y)?;
        if x.shape().first() != Some(&3) {
            return Err(Error::shape(format!("perceptual loss needs RGB, got {:?}", x.shape())));
        }
        let fx = self.features(x);
        let fy = self.features(y);
        let terms: Vec<Var<'t>> = fx.into_iter().zip(fy).map(|(a, b)| a.sub(b).abs().mean()).collect();
        Ok(terms[1..].iter().fold(terms[0], |acc, t| acc.add(*t)))
    }
}

/// `(mean SSIM, mean contrast-structure)` with an 11×11 Gaussian window
/// (σ = 1.5) and valid filtering, averaged over channels and windows.
pub fn ssim_terms<'t>(x: Var<'t>, y: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    same_shape(&x, &y)?;
    let s = x.shape();
    if s.len() != 3 || s[1] < SSIM_WINDOW || s[2] < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs C×H×W with H, W >= {SSIM_WINDOW}, got {s:?}"
        )));
    }
    let c = s[0];
    let g = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW)?;
    let win = Tensor::from_fn(&[c, SSIM_WINDOW, SSIM_WINDOW], |i| g.data()[i % (SSIM_WINDOW * SSIM_WINDOW)]);
    let win = x.tape().constant(win);
    let filt = |v: Var<'t>| v.depthwise_conv2d(win, 1, 0).expect("window fits");

    let (mx, my) = (filt(x), filt(y));
    let (mx2, my2, mxy) = (mx.square(), my.square(), mx.mul(my));
    let sxx = filt(x.square()).sub(mx2);
    let syy = filt(y.square()).sub(my2);
    let sxy = filt(x.mul(y)).sub(mxy);

    let lum = mxy.scale(2.0).add_scalar(SSIM_C1).div(mx2.add(my2).add_scalar(SSIM_C1));
    let cs = sxy.scale(2.0).add_scalar(SSIM_C2).div(sxx.add(syy).add_scalar(SSIM_C2));
    Ok((lum.mul(cs).mean(), cs.mean()))
}

pub fn ssim_var<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    Ok(ssim_terms(x, y)?.0)
}

/// Number of MS-SSIM scales an `h×w` image supports, at most five.
pub fn ms_ssim_levels(h: usize, w: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .take_while(|&j| h.min(w) >= SSIM_WINDOW << (j - 1))
        .last()
        .unwrap_or(0)
}

/// The first `levels` weights, renormalized to sum to one.
pub fn ms_ssim_weights(levels: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..levels];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// `Π_j cs_j^{ω_j} · ssim_M^{ω_M}` over a 2×2 mean-pool pyramid. Each factor
/// is floored at [`MS_SSIM_FLOOR`] so negative correlations stay defined.
pub fn ms_ssim_var<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    same_shape(&x, &y)?;
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("MS-SSIM needs C×H×W, got {s:?}")));
    }
    let levels = ms_ssim_levels(s[1], s[2]);
    if levels == 0 {
        return Err(Error::invalid(format!(
            "MS-SSIM needs extents >= {SSIM_WINDOW}, got {}×{}",
            s[1], s[2]
        )));
    }
    let weights = ms_ssim_weights(levels);
    let (mut a, mut b) = (x, y);
    let mut acc: Option<Var<'t>> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let (full, cs) = ssim_terms(a, b)?;
        let term = if j + 1 == levels { full } else { cs };
        let f = term.clamp_min(MS_SSIM_FLOOR).powf(wj);
        acc = Some(match acc {
            Some(p) => p.mul(f),
            None => f,
        });
        if j + 1 < levels {
            a = a.avg_pool2();
            b = b.avg_pool2();
        }
    }
    Ok(acc.expect("at least one level"))
}

/// Individual loss terms and their weighted sum.
pub struct LossTerms<'t> {
    pub charbonnier: Var<'t>,
    pub perceptual: Option<Var<'t>>,
    pub ssim: Option<Var<'t>>,
    pub ms_ssim: Option<Var<'t>>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    /// `(name, value)` for every computed term.
    pub fn report(&self) -> Vec<(&'static str, f64)> {
        let mut r = vec![("charbonnier", self.charbonnier.value().item())];
        for (n, v) in [("perceptual", self.perceptual), ("ssim", self.ssim), ("ms_ssim", self.ms_ssim)] {
            if let Some(v) = v {
                r.push((n, v.value().item()));
            }
        }
        r.push(("total", self.total.value().item()));
        r
    }
}

/// `λ_r·L_charb + λ_p·L_perc + λ_s·(1 − SSIM) + λ_m·(1 − MS-SSIM)`. Terms
/// with zero weight, and MS-SSIM when disabled, are not evaluated.
pub fn total_loss<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    cfg: &RunConfig,
    proxy: &PerceptualProxy,
) -> Result<LossTerms<'t>> {
    let [lr, lp, ls, lm] = cfg.lambda;
    let charb = if cfg.charbonnier_global {
        charbonnier_global(pred, target, cfg.charbonnier_eps)?
    } else {
        charbonnier(pred, target, cfg.charbonnier_eps)?
    };
    let mut total = charb.scale(lr);
    let perceptual = if lp > 0.0 { Some(proxy.loss(pred, target)?) } else { None };
    let ssim = if ls > 0.0 { Some(ssim_var(pred, target)?.one_minus()) } else { None };
    let ms = if lm > 0.0 && cfg.ms_ssim {
        Some(ms_ssim_var(pred, target)?.one_minus())
    } else {
        None
    };
    for (t, l) in [(perceptual, lp), (ssim, ls), (ms, lm)] {
        if let Some(t) = t {
            total = total.add(t.scale(l));
        }
    }
    Ok(LossTerms {
        charbonnier: charb,
        perceptual,
        ssim,
        ms_ssim: ms,
        total,
    })
}

fn eval2(x: &Tensor, y: &Tensor, f: impl for<'t> Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>) -> Result<f64> {
    let tape = Tape::new();
    let v = f(tape.constant(x.clone()), tape.constant(y.clone()))?;
    Ok(v.value().item())
}

/// Mean SSIM of two `C×H×W` images with dynamic range 1.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    eval2(x, y, ssim_var)
}

pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    eval2(x, y, ms_ssim_var)
}

/// `10·log10(peak² / MSE)`; identical images give `+∞`.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!("images differ in shape: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::relative_error;
    use rand::Rng;

    fn img(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.0..1.0))
    }

    fn noisy(x: &Tensor, sigma: f64, seed: u64) -> Tensor {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        let mut out = x.clone();
        out.data_mut().iter_mut().for_each(|v| *v += n.sample(&mut rng));
        out
    }

    /// Sliding-window SSIM written with explicit loops.
    fn ssim_loops(x: &Tensor, y: &Tensor) -> (f64, f64) {
        let (c, h, w) = x.dims3().unwrap();
        let k = SSIM_WINDOW;
        let r = (k / 2) as f64;
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
                g[i * k + j] = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            }
        }
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        let (mut ssum, mut csum, mut n) = (0.0, 0.0, 0.0);
        for ch in 0..c {
            for i in 0..=h - k {
                for j in 0..=w - k {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for a in 0..k {
                        for b in 0..k {
                            let idx = ch * h * w + (i + a) * w + j + b;
                            let (p, q, wt) = (x.data()[idx], y.data()[idx], g[a * k + b]);
                            mx += wt * p;
                            my += wt * q;
                            xx += wt * p * p;
                            yy += wt * q * q;
                            xy += wt * p * q;
                        }
                    }
                    let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    let l = (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
                    let cs = (2.0 * cxy + SSIM_C2) / (vx + vy + SSIM_C2);
                    ssum += l * cs;
                    csum += cs;
                    n += 1.0;
                }
            }
        }
        (ssum / n, csum / n)
    }

    fn pool(x: &Tensor) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        Tensor::from_fn(&[c, h / 2, w / 2], |i| {
            let (ch, r) = (i / ((h / 2) * (w / 2)), i % ((h / 2) * (w / 2)));
            let (a, b) = (r / (w / 2), r % (w / 2));
            let at = |p: usize, q: usize| x.data()[ch * h * w + p * w + q];
            (at(2 * a, 2 * b) + at(2 * a + 1, 2 * b) + at(2 * a, 2 * b + 1) + at(2 * a + 1, 2 * b + 1)) / 4.0
        })
    }

    fn ms_ssim_loops(x: &Tensor, y: &Tensor) -> f64 {
        let (_, h, w) = x.dims3().unwrap();
        let levels = ms_ssim_levels(h, w);
        let wsum: f64 = MS_SSIM_WEIGHTS[..levels].iter().sum();
        let (mut a, mut b) = (x.clone(), y.clone());
        let mut out = 1.0;
        for j in 0..levels {
            let (s, cs) = ssim_loops(&a, &b);
            let v = if j + 1 == levels { s } else { cs };
            out *= v.max(MS_SSIM_FLOOR).powf(MS_SSIM_WEIGHTS[j] / wsum);
            a = pool(&a);
            b = pool(&b);
        }
        out
    }

    #[test]
    fn charbonnier_floor_and_constant_diff() {
        let t = Tape::new();
        let x = img(3, 8, 8, 1);
        let a = t.constant(x.clone());
        let floor = charbonnier(a, a, 1e-4).unwrap().value().item();
        assert!((floor - 1e-4).abs() < 1e-18, "{floor}");
        let b = t.constant(x.map(|v| v + 0.3));
        let want = (0.09f64 + 1e-8).sqrt();
        assert!((charbonnier(a, b, 1e-4).unwrap().value().item() - want).abs() < 1e-12);
        let g = charbonnier_global(a, a, 1e-4).unwrap().value().item();
        assert!((g - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn charbonnier_loop_oracle() {
        let (x, y) = (img(3, 9, 7, 2), img(3, 9, 7, 3));
        let t = Tape::new();
        let got = charbonnier(t.constant(x.clone()), t.constant(y.clone()), 1e-4).unwrap().value().item();
        let mut s = 0.0;
        for (a, b) in x.data().iter().zip(y.data()) {
            s += ((a - b) * (a - b) + 1e-8).sqrt();
        }
        assert!((got - s / x.numel() as f64).abs() < 1e-12);
    }

    #[test]
    fn perceptual_basics() {
        let p = PerceptualProxy::new();
        let (x, y) = (img(3, 16, 16, 4), img(3, 16, 16, 5));
        let t = Tape::new();
        let (a, b) = (t.constant(x), t.constant(y));
        assert_eq!(p.loss(a, a).unwrap().value().item(), 0.0);
        let ab = p.loss(a, b).unwrap().value().item();
        let ba = p.loss(b, a).unwrap().value().item();
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
        assert_eq!(p.features(a).last().unwrap().shape(), [32, 2, 2]);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let (x, y) = (img(3, 16, 16, 6), img(3, 16, 16, 7));
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let (a, b) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-15);
        assert!((-1.0..=1.0).contains(&a));
        assert!(ssim(&img(3, 10, 16, 0), &img(3, 10, 16, 1)).is_err());
    }

    #[test]
    fn ssim_matches_loop_reference() {
        for (x, y) in [(img(3, 16, 20, 8), img(3, 16, 20, 9)), (img(1, 12, 12, 1), img(1, 12, 12, 2))] {
            let (want, _) = ssim_loops(&x, &y);
            assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-9);
        }
        let x = img(3, 24, 24, 10);
        let y = noisy(&x, 0.05, 11);
        assert!((ssim(&x, &y).unwrap() - ssim_loops(&x, &y).0).abs() < 1e-9);
    }

    #[test]
    fn ssim_binary_inversion_is_negative() {
        let x = img(1, 16, 16, 12).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let inv = x.map(|v| 1.0 - v);
        let s = ssim(&x, &inv).unwrap();
        assert!((s - ssim_loops(&x, &inv).0).abs() < 1e-9);
        assert!(s < -0.9, "{s}");
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let (mut lo, mut hi) = (0.0, 0.0);
        for seed in 0..20 {
            let x = img(3, 16, 16, 100 + seed);
            lo += ssim(&x, &noisy(&x, 0.05, seed)).unwrap();
            hi += ssim(&x, &noisy(&x, 0.2, seed)).unwrap();
        }
        assert!(lo / 20.0 > hi / 20.0);
    }

    #[test]
    fn ms_ssim_levels_and_weights() {
        assert_eq!(ms_ssim_levels(256, 256), 5);
        assert_eq!(ms_ssim_levels(176, 300), 5);
        assert_eq!(ms_ssim_levels(175, 300), 4);
        assert_eq!(ms_ssim_levels(64, 64), 3);
        assert_eq!(ms_ssim_levels(10, 64), 0);
        // the published four-decimal constants sum to 1.0001; weights in use
        // are always renormalized
        assert!((MS_SSIM_WEIGHTS.iter().sum::<f64>() - 1.0001).abs() < 1e-12);
        for l in 1..=5 {
            assert!((ms_ssim_weights(l).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ms_ssim_identity_and_reference() {
        let x = img(3, 64, 64, 13);
        assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let y = noisy(&x, 0.1, 14);
        assert!((ms_ssim(&x, &y).unwrap() - ms_ssim_loops(&x, &y)).abs() < 1e-9);
        assert!(ms_ssim(&img(3, 8, 8, 0), &img(3, 8, 8, 1)).is_err());
    }

    #[test]
    fn ms_ssim_full_five_levels() {
        let x = img(1, 256, 256, 15);
        let y = noisy(&x, 0.1, 16);
        let got = ms_ssim(&x, &y).unwrap();
        assert!((got - ms_ssim_loops(&x, &y)).abs() < 1e-6);
    }

    #[test]
    fn psnr_closed_forms() {
        let x = img(3, 8, 8, 17);
        assert!((psnr(&x, &x.map(|v| v + 0.1), 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&Tensor::zeros(&[1, 2, 2]), &Tensor::ones(&[1, 2, 2]), 1.0).unwrap().abs() < 1e-12);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let y = img(3, 8, 8, 18);
        let mse: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 192.0;
        assert!((psnr(&x, &y, 1.0).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-10);
    }

    fn total(x: &Tensor, y: &Tensor, cfg: &RunConfig) -> f64 {
        let t = Tape::new();
        let p = PerceptualProxy::new();
        total_loss(t.constant(x.clone()), t.constant(y.clone()), cfg, &p).unwrap().total.value().item()
    }

    #[test]
    fn total_loss_structure() {
        let (x, y) = (img(3, 16, 16, 19), img(3, 16, 16, 20));
        let only = RunConfig {
            lambda: [1.0, 0.0, 0.0, 0.0],
            ..Default::default()
        };
        let t = Tape::new();
        let c = charbonnier(t.constant(x.clone()), t.constant(y.clone()), 1e-4).unwrap().value().item();
        assert_eq!(total(&x, &y, &only), c);

        let cfg = RunConfig::default();
        assert!((total(&x, &x, &cfg) - 1e-4).abs() < 1e-12);

        // linear in each weight
        for i in 0..4 {
            let mut l = [0.0; 4];
            l[i] = 1.0;
            let unit = total(&x, &y, &RunConfig { lambda: l, ..Default::default() });
            l[i] = 2.5;
            let scaled = total(&x, &y, &RunConfig { lambda: l, ..Default::default() });
            assert!((scaled - 2.5 * unit).abs() < 1e-12 * unit.abs().max(1.0));
            assert!(unit > 0.0);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // 16×16 has one MS-SSIM level, 24×24 has two
        for size in [16, 24] {
            loss_gradients_at(size);
        }
    }

    fn loss_gradients_at(size: usize) {
        let (x, y) = (img(3, size, size, 21), img(3, size, size, 22));
        let proxy = PerceptualProxy::new();
        type F = Box<dyn for<'t> Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>>;
        let p2 = proxy.clone();
        let fns: Vec<(&str, F)> = vec![
            ("charbonnier", Box::new(|a, b| charbonnier(a, b, 1e-4))),
            ("charbonnier_global", Box::new(|a, b| charbonnier_global(a, b, 1e-4))),
            ("perceptual", Box::new(move |a, b| p2.loss(a, b))),
            ("ssim", Box::new(ssim_var)),
            ("ms_ssim", Box::new(ms_ssim_var)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for (name, f) in &fns {
            let t = Tape::new();
            let xv = t.leaf(x.clone());
            let root = f(xv, t.constant(y.clone())).unwrap();
            let an = t.backward(root).unwrap().get_or_zeros(xv);
            for _ in 0..12 {
                let i = rng.random_range(0..x.numel());
                let h = 1e-6;
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let up = eval2(&p, &y, |a, b| f(a, b)).unwrap();
                p.data_mut()[i] -= 2.0 * h;
                let dn = eval2(&p, &y, |a, b| f(a, b)).unwrap();
                let n = (up - dn) / (2.0 * h);
                let e = relative_error(an.data()[i], n, 1e-6);
                assert!(e < 1e-4, "{name} {size}[{i}]: analytic {} numeric {n}", an.data()[i]);
            }
        }
    }
}
