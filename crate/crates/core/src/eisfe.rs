//! Spectral fusion enhancer: a learned-σ Gaussian frequency branch and a
//! deformable-convolution spatial branch, fused by spatial then channel
//! attention, followed by the reconstruction head.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::autodiff::{join, Graph, ParamInit, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, next_pow2};
use crate::layers::{Conv, ConvTranspose};
use crate::tensor::Tensor;

/// Unnormalized Gaussian samples and their σ-derivative on a `k×k` grid
/// centred at 0.
fn gaussian_raw(sigma: f64, k: usize) -> (Vec<f64>, Vec<f64>) {
    let r = (k / 2) as f64;
    let mut g = Vec::with_capacity(k * k);
    let mut dg = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let (y, x) = (i as f64 - r, j as f64 - r);
            let d2 = x * x + y * y;
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            g.push(v);
            dg.push(v * d2 / (sigma * sigma * sigma));
        }
    }
    (g, dg)
}

fn check_kernel(sigma: f64, k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::invalid(format!("Gaussian kernel size must be odd, got {k}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("Gaussian σ must be positive, got {sigma}")));
    }
    Ok(())
}

/// Normalized `k×k` Gaussian kernel.
pub fn gaussian_kernel(sigma: f64, k: usize) -> Result<Tensor> {
    check_kernel(sigma, k)?;
    let (g, _) = gaussian_raw(sigma, k);
    let s: f64 = g.iter().sum();
    Tensor::new(&[k, k], g.into_iter().map(|v| v / s).collect())
}

/// Derivative of [`gaussian_kernel`] with respect to σ, including the
/// normalization.
pub fn gaussian_kernel_dsigma(sigma: f64, k: usize) -> Result<Tensor> {
    check_kernel(sigma, k)?;
    let (g, dg) = gaussian_raw(sigma, k);
    let s: f64 = g.iter().sum();
    let ds: f64 = dg.iter().sum();
    let data = g.iter().zip(&dg).map(|(g, d)| d / s - (g / s) * (ds / s)).collect();
    Tensor::new(&[k, k], data)
}

/// Boundary handling of the frequency-domain filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    /// Zero padding to `next_pow2(extent + k − 1)`; equals spatial
    /// convolution with zeros outside the image.
    Linear,
    /// Periodic boundaries; extents must be powers of two.
    Circular,
}

fn check_plane(h: usize, w: usize, mode: FilterMode) -> Result<()> {
    if mode == FilterMode::Circular && !(h.is_power_of_two() && w.is_power_of_two()) {
        return Err(Error::invalid(format!(
            "circular filtering needs power-of-two extents, got {h}×{w}"
        )));
    }
    Ok(())
}

/// Convolves one `h×w` plane with a centred, point-symmetric `k×k` kernel
/// through the FFT.
fn filter_plane(x: &[f64], h: usize, w: usize, kernel: &[f64], k: usize, mode: FilterMode) -> Vec<f64> {
    let r = k / 2;
    let zero = Complex64::new(0.0, 0.0);
    let (nh, nw) = match mode {
        FilterMode::Linear => (next_pow2(h + k - 1), next_pow2(w + k - 1)),
        FilterMode::Circular => (h, w),
    };
    let mut xs = vec![zero; nh * nw];
    for i in 0..h {
        for j in 0..w {
            xs[i * nw + j] = Complex64::new(x[i * w + j], 0.0);
        }
    }
    let mut ks = vec![zero; nh * nw];
    for a in 0..k {
        for b in 0..k {
            let idx = match mode {
                FilterMode::Linear => a * nw + b,
                FilterMode::Circular => ((a + nh * k - r) % nh) * nw + (b + nw * k - r) % nw,
            };
            ks[idx] += kernel[a * k + b];
        }
    }
    fft2(&mut xs, nh, nw).expect("padded extents are powers of two");
    fft2(&mut ks, nh, nw).expect("padded extents are powers of two");
    for (a, b) in xs.iter_mut().zip(&ks) {
        *a *= b;
    }
    ifft2(&mut xs, nh, nw).expect("padded extents are powers of two");
    let off = match mode {
        FilterMode::Linear => r,
        FilterMode::Circular => 0,
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = xs[(i + off) * nw + j + off].re;
        }
    }
    out
}

fn filter_all(x: &Tensor, kernels: &[Tensor], k: usize, mode: FilterMode) -> Tensor {
    let (c, h, w) = x.dims3().expect("filter input must be C×H×W");
    let planes: Vec<Vec<f64>> = (0..c)
        .into_par_iter()
        .map(|ch| filter_plane(&x.data()[ch * h * w..(ch + 1) * h * w], h, w, kernels[ch].data(), k, mode))
        .collect();
    Tensor::new(&[c, h, w], planes.concat()).unwrap()
}

/// Filters channel `c` of `x` (`C×H×W`) with a Gaussian of width `sigma[c]`.
pub fn adaptive_gaussian_filter(x: &Tensor, sigma: &[f64], k: usize, mode: FilterMode) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if sigma.len() != c {
        return Err(Error::shape(format!("{} widths for {c} channels", sigma.len())));
    }
    check_plane(h, w, mode)?;
    let kernels = sigma.iter().map(|&s| gaussian_kernel(s, k)).collect::<Result<Vec<_>>>()?;
    Ok(filter_all(x, &kernels, k, mode))
}

impl<'t> Var<'t> {
    /// Differentiable [`adaptive_gaussian_filter`] with per-channel widths
    /// `sigma` (`[C]`, positive).
    pub fn adaptive_gaussian(self, sigma: Var<'t>, k: usize, mode: FilterMode) -> Result<Var<'t>> {
        let (xv, sv) = (self.value(), sigma.value());
        let (c, h, w) = xv.dims3()?;
        if sv.shape() != [c] {
            return Err(Error::shape(format!("σ must be [{c}], got {:?}", sv.shape())));
        }
        check_plane(h, w, mode)?;
        let kernels = sv.data().iter().map(|&s| gaussian_kernel(s, k)).collect::<Result<Vec<_>>>()?;
        let out = filter_all(&xv, &kernels, k, mode);
        Ok(self.tape.record(out, &[self, sigma], move |g, needs| {
            // point-symmetric kernels are their own adjoint
            let dx = needs[0].then(|| filter_all(g, &kernels, k, mode));
            let ds = needs[1].then(|| {
                let dks: Vec<Tensor> = sv.data().iter().map(|&s| gaussian_kernel_dsigma(s, k).unwrap()).collect();
                let fx = filter_all(&xv, &dks, k, mode);
                let hw = h * w;
                Tensor::from_fn(&[c], |ch| {
                    let r = ch * hw..(ch + 1) * hw;
                    g.data()[r.clone()].iter().zip(&fx.data()[r]).map(|(a, b)| a * b).sum()
                })
            });
            vec![dx, ds]
        }))
    }
}

/// CBAM-style spatial attention: `σ(conv7×7([mean_c; max_c]))`, one map.
#[derive(Clone, Debug)]
struct SpatialAttention {
    conv: Conv,
}

impl SpatialAttention {
    fn new(pi: &mut ParamInit, prefix: &str) -> Self {
        Self {
            conv: Conv::new(pi, prefix, 1, 2, 7, 1, true),
        }
    }

    fn apply<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Var<'g> {
        let pooled = Var::concat(&[x.channel_mean(), x.channel_max()]);
        self.conv.apply(g, pooled).sigmoid()
    }
}

/// The fusion enhancer. Inputs are the two restored feature maps and the
/// stem image features, all `C×H×W`.
#[derive(Clone, Debug)]
pub struct Eisfe {
    channels: usize,
    reduced: usize,
    k: usize,
    sigma_min: f64,
    sigma_max: f64,
    mode: FilterMode,
    to_freq: Conv,
    to_spat: Conv,
    sigma_raw: String,
    offsets: Conv,
    deform_w: String,
    deform_b: String,
    attn_freq: SpatialAttention,
    attn_spat: SpatialAttention,
    fc1_w: String,
    fc1_b: String,
    fc2_w: String,
    fc2_b: String,
}

impl Eisfe {
    pub fn new(pi: &mut ParamInit, prefix: &str, cfg: &RunConfig) -> Self {
        let c = cfg.channels;
        let reduced = (c / 4).max(1);
        let p = |n: &str| join(prefix, n);
        Self {
            channels: c,
            reduced,
            k: cfg.gaussian_kernel,
            sigma_min: cfg.sigma_min,
            sigma_max: cfg.sigma_max,
            mode: if cfg.fft_circular {
                FilterMode::Circular
            } else {
                FilterMode::Linear
            },
            to_freq: Conv::new(pi, &p("to_freq"), c, 3 * c, 1, 1, true),
            to_spat: Conv::new(pi, &p("to_spat"), c, 3 * c, 1, 1, true),
            sigma_raw: pi.zeros(&p("sigma_raw"), &[c]),
            offsets: Conv::new(pi, &p("offsets"), 18, c, 3, 1, true),
            deform_w: pi.uniform(&p("deform.w"), &[c, c, 3, 3], 9 * c),
            deform_b: pi.zeros(&p("deform.b"), &[c]),
            attn_freq: SpatialAttention::new(pi, &p("attn_freq")),
            attn_spat: SpatialAttention::new(pi, &p("attn_spat")),
            fc1_w: pi.uniform(&p("chan.fc1.w"), &[c, reduced], c),
            fc1_b: pi.zeros(&p("chan.fc1.b"), &[1, reduced]),
            fc2_w: pi.uniform(&p("chan.fc2.w"), &[reduced, c], reduced),
            fc2_b: pi.zeros(&p("chan.fc2.b"), &[1, c]),
        }
    }

    /// Per-channel widths `σ_min + sigmoid(raw)·(σ_max − σ_min)`.
    pub fn sigma<'g>(&self, g: &'g Graph<'_>) -> Var<'g> {
        g.param(&self.sigma_raw)
            .sigmoid()
            .scale(self.sigma_max - self.sigma_min)
            .add_scalar(self.sigma_min)
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, img: Var<'g>, ev: Var<'g>, inp: Var<'g>) -> Result<Var<'g>> {
        let shape = img.shape();
        if ev.shape() != shape || inp.shape() != shape || shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::shape(format!(
                "fusion inputs must all be {}×H×W, got {:?}, {:?}, {:?}",
                self.channels,
                shape,
                ev.shape(),
                inp.shape()
            )));
        }
        let cat = Var::concat(&[img, ev, inp]);
        let freq = self.to_freq.apply(g, cat).adaptive_gaussian(self.sigma(g), self.k, self.mode)?;
        let spat_in = self.to_spat.apply(g, cat);
        let offsets = self.offsets.apply(g, spat_in);
        let spat = spat_in.deform_conv2d(offsets, g.param(&self.deform_w), Some(g.param(&self.deform_b)))?;

        let fused = freq
            .mul_spatial(self.attn_freq.apply(g, freq))
            .add(spat.mul_spatial(self.attn_spat.apply(g, spat)));

        let c = self.channels;
        let squeezed = fused.global_avg_pool().reshape(&[1, c])?;
        let hidden = squeezed.matmul(g.param(&self.fc1_w)).add(g.param(&self.fc1_b)).relu();
        let gate = hidden
            .matmul(g.param(&self.fc2_w))
            .add(g.param(&self.fc2_b))
            .sigmoid()
            .reshape(&[c])?;
        debug_assert_eq!(hidden.shape(), [1, self.reduced]);
        Ok(fused.scale_channels(gate))
    }
}

/// `1×1 conv → 4×4 stride-2 transposed conv → 1×1 conv` to three channels
/// at twice the input resolution. No clamping.
#[derive(Clone, Debug)]
pub struct Head {
    pre: Conv,
    up: ConvTranspose,
    out: Conv,
}

impl Head {
    pub fn new(pi: &mut ParamInit, prefix: &str, c: usize) -> Self {
        Self {
            pre: Conv::new(pi, &join(prefix, "pre"), c, c, 1, 1, true),
            up: ConvTranspose::new(pi, &join(prefix, "up"), c, c, 4, 2, 1),
            out: Conv::new(pi, &join(prefix, "out"), 3, c, 1, 1, true),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Var<'g> {
        let x = self.pre.apply(g, x);
        let x = self.up.apply(g, x);
        self.out.apply(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{relative_error, ModelParams, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct_filter(x: &Tensor, sigma: &[f64], k: usize, mode: FilterMode) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let kern = gaussian_kernel(sigma[ch], k).unwrap();
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = 0.0;
                    for a in 0..k as isize {
                        for b in 0..k as isize {
                            let (mut y, mut xx) = (i + a - r, j + b - r);
                            if mode == FilterMode::Circular {
                                y = y.rem_euclid(h as isize);
                                xx = xx.rem_euclid(w as isize);
                            } else if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += kern.data()[(a * k as isize + b) as usize]
                                * x.data()[ch * h * w + (y * w as isize + xx) as usize];
                        }
                    }
                    out.data_mut()[ch * h * w + (i * w as isize + j) as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn kernel_size_one_is_delta() {
        assert_eq!(gaussian_kernel(0.7, 1).unwrap().data(), [1.0]);
        assert!(gaussian_kernel(1.0, 4).is_err());
        assert!(gaussian_kernel(0.0, 3).is_err());
    }

    #[test]
    fn kernel_symmetry_and_sum() {
        for (s, k) in [(0.3, 11), (1.7, 7), (4.0, 11)] {
            let g = gaussian_kernel(s, k).unwrap();
            let at = |i: usize, j: usize| g.data()[i * k + j];
            assert!((g.sum() - 1.0).abs() < 1e-12);
            for i in 0..k {
                for j in 0..k {
                    assert_eq!(at(i, j), at(k - 1 - i, j));
                    assert_eq!(at(i, j), at(i, k - 1 - j));
                    assert_eq!(at(i, j), at(j, i));
                }
            }
        }
    }

    #[test]
    fn kernel_closed_form_sigma_one() {
        // unnormalized: centre 1, edges e^{-1/2}, corners e^{-1}
        let e = std::f64::consts::E;
        let s = 1.0 + 4.0 * e.powf(-0.5) + 4.0 / e;
        let g = gaussian_kernel(1.0, 3).unwrap();
        assert!((g.data()[4] - 1.0 / s).abs() < 1e-15);
        assert!((g.data()[1] - e.powf(-0.5) / s).abs() < 1e-15);
        assert!((g.data()[0] - 1.0 / (e * s)).abs() < 1e-15);
        assert!((g.data()[4] / g.data()[1] - e.sqrt()).abs() < 1e-12);
        assert!((g.data()[4] / g.data()[0] - e).abs() < 1e-12);
    }

    #[test]
    fn kernel_dsigma_matches_finite_difference() {
        let (s, k, h) = (1.3, 7, 1e-6);
        let d = gaussian_kernel_dsigma(s, k).unwrap();
        let up = gaussian_kernel(s + h, k).unwrap();
        let dn = gaussian_kernel(s - h, k).unwrap();
        for i in 0..k * k {
            let n = (up.data()[i] - dn.data()[i]) / (2.0 * h);
            assert!((d.data()[i] - n).abs() < 1e-8);
        }
        assert!(d.sum().abs() < 1e-14);
    }

    #[test]
    fn filter_matches_spatial_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 16, 16], 1.0, &mut rng);
        let sigma = [0.8, 2.5];
        for mode in [FilterMode::Linear, FilterMode::Circular] {
            let a = adaptive_gaussian_filter(&x, &sigma, 11, mode).unwrap();
            let b = direct_filter(&x, &sigma, 11, mode);
            assert!(a.max_abs_diff(&b) < 1e-8, "{mode:?}");
        }
        // non-square, non-power-of-two in linear mode
        let x = Tensor::uniform(&[1, 6, 10], 1.0, &mut rng);
        let a = adaptive_gaussian_filter(&x, &[1.1], 5, FilterMode::Linear).unwrap();
        assert!(a.max_abs_diff(&direct_filter(&x, &[1.1], 5, FilterMode::Linear)) < 1e-10);
        assert!(adaptive_gaussian_filter(&x, &[1.1], 5, FilterMode::Circular).is_err());
    }

    #[test]
    fn circular_preserves_mean_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[3, 16, 16], 1.0, &mut rng);
        let y = adaptive_gaussian_filter(&x, &[0.3, 1.5, 4.0], 11, FilterMode::Circular).unwrap();
        for ch in 0..3 {
            let m = |t: &Tensor| t.channels(ch, ch + 1).mean();
            assert!(((m(&y) - m(&x)) / m(&x)).abs() < 1e-9);
        }
        let c = Tensor::full(&[1, 8, 8], 0.37);
        for mode in [FilterMode::Linear, FilterMode::Circular] {
            let y = adaptive_gaussian_filter(&c, &[2.0], 3, mode).unwrap();
            // linear mode loses mass only near the border
            let centre = y.data()[4 * 8 + 4];
            assert!((centre - 0.37).abs() < 1e-12);
            if mode == FilterMode::Circular {
                assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn small_sigma_is_nearly_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 8, 8], 1.0, &mut rng);
        let y = adaptive_gaussian_filter(&x, &[0.1], 11, FilterMode::Linear).unwrap();
        // neighbours weigh e^{-50} relative to the centre
        assert!(y.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn total_variation_decreases_with_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[1, 16, 16], 1.0, &mut rng);
        let tv = |t: &Tensor| {
            let d = t.data();
            let mut s = 0.0;
            for i in 0..16 {
                for j in 0..16 {
                    if i + 1 < 16 {
                        s += (d[(i + 1) * 16 + j] - d[i * 16 + j]).abs();
                    }
                    if j + 1 < 16 {
                        s += (d[i * 16 + j + 1] - d[i * 16 + j]).abs();
                    }
                }
            }
            s
        };
        // monotone only while the kernel spans about ±3σ; a truncated wide
        // Gaussian degenerates towards a box filter
        for (k, grid) in [(11, &[0.3, 0.6, 0.9, 1.2, 1.5, 5.0 / 3.0][..]), (25, &[0.3, 1.0, 2.0, 3.0, 4.0][..])] {
            for mode in [FilterMode::Linear, FilterMode::Circular] {
                let mut prev = tv(&x);
                for &s in grid {
                    let cur = tv(&adaptive_gaussian_filter(&x, &[s], k, mode).unwrap());
                    assert!(cur <= prev + 1e-12, "k={k} σ={s} {mode:?}: {cur} > {prev}");
                    prev = cur;
                }
            }
        }
    }

    #[test]
    fn filter_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::uniform(&[2, 8, 8], 1.0, &mut rng);
        let s0 = Tensor::new(&[2], vec![0.9, 2.2]).unwrap();
        let probe = Tensor::uniform(&[2, 8, 8], 1.0, &mut rng);
        for mode in [FilterMode::Linear, FilterMode::Circular] {
            let loss = |x: &Tensor, s: &Tensor| {
                let t = Tape::new();
                t.leaf(x.clone()).adaptive_gaussian(t.leaf(s.clone()), 5, mode).unwrap().dot_const(&probe).value().item()
            };
            let t = Tape::new();
            let (xv, sv) = (t.leaf(x0.clone()), t.leaf(s0.clone()));
            let root = xv.adaptive_gaussian(sv, 5, mode).unwrap().dot_const(&probe);
            let gr = t.backward(root).unwrap();
            let h = 1e-6;
            for (var, base, is_x) in [(xv, &x0, true), (sv, &s0, false)] {
                let an = gr.get_or_zeros(var);
                for i in (0..base.numel()).step_by(if is_x { 7 } else { 1 }) {
                    let mut p = base.clone();
                    p.data_mut()[i] += h;
                    let up = if is_x { loss(&p, &s0) } else { loss(&x0, &p) };
                    p.data_mut()[i] -= 2.0 * h;
                    let dn = if is_x { loss(&p, &s0) } else { loss(&x0, &p) };
                    let n = (up - dn) / (2.0 * h);
                    assert!(relative_error(an.data()[i], n, 1e-6) < 1e-6, "{mode:?} {is_x} {i}");
                }
            }
        }
    }

    fn small_cfg() -> RunConfig {
        RunConfig {
            channels: 4,
            gaussian_kernel: 5,
            ..Default::default()
        }
    }

    #[test]
    fn forced_gates_average_branches() {
        let cfg = small_cfg();
        let mut p = ModelParams::new();
        let e = Eisfe::new(&mut ParamInit::new(&mut p, 1), "f", &cfg);
        for path in ["f.attn_freq.w", "f.attn_spat.w", "f.chan.fc2.w"] {
            p.get_mut(path).unwrap().data_mut().fill(0.0);
        }
        p.get_mut("f.chan.fc2.b").unwrap().data_mut().fill(40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[4, 8, 8], 1.0, &mut rng)).collect();
        let g = Graph::new(&p);
        let [a, b, c] = [0, 1, 2].map(|i| g.input(xs[i].clone()));
        let out = e.forward(&g, a, b, c).unwrap().value();

        let cat = Var::concat(&[a, b, c]);
        let freq = e.to_freq.apply(&g, cat).adaptive_gaussian(e.sigma(&g), 5, FilterMode::Linear).unwrap();
        let si = e.to_spat.apply(&g, cat);
        let spat = si
            .deform_conv2d(e.offsets.apply(&g, si), g.param("f.deform.w"), Some(g.param("f.deform.b")))
            .unwrap();
        let want = freq.value().zip_map(&spat.value(), |x, y| 0.5 * x + 0.5 * y);
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn zero_inputs_zero_biases_give_zero() {
        let mut p = ModelParams::new();
        let e = Eisfe::new(&mut ParamInit::new(&mut p, 3), "f", &small_cfg());
        let g = Graph::new(&p);
        let z = g.input(Tensor::zeros(&[4, 8, 8]));
        assert_eq!(e.forward(&g, z, z, z).unwrap().value().max_abs(), 0.0);
        let bad = g.input(Tensor::zeros(&[4, 4, 8]));
        assert!(e.forward(&g, z, bad, z).is_err());
    }

    #[test]
    fn sigma_stays_in_range() {
        let cfg = small_cfg();
        let mut p = ModelParams::new();
        let e = Eisfe::new(&mut ParamInit::new(&mut p, 4), "f", &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in p.get_mut("f.sigma_raw").unwrap().data_mut() {
            *v = rng.random_range(-50.0..50.0);
        }
        let g = Graph::inference(&p);
        for &s in e.sigma(&g).value().data() {
            assert!((cfg.sigma_min..=cfg.sigma_max).contains(&s));
        }
    }

    #[test]
    fn head_shapes_and_zero() {
        let mut p = ModelParams::new();
        let head = Head::new(&mut ParamInit::new(&mut p, 0), "head", 4);
        let g = Graph::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = g.input(Tensor::uniform(&[4, 5, 7], 1.0, &mut rng));
        assert_eq!(head.forward(&g, x).shape(), [3, 10, 14]);
        let z = g.input(Tensor::zeros(&[4, 8, 8]));
        assert_eq!(head.forward(&g, z).value().max_abs(), 0.0);
    }
}
