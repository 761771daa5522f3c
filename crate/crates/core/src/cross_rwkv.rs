//! Cross-modal RWKV blocks and the U-shaped encoder-decoder built from them.
//!
//! Feature maps are `C×H×W`; the token view `T×C` (`T = H·W`) is used for
//! layer norm and the per-token projections.

use crate::autodiff::{join, Graph, ParamInit, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvTranspose, Linear};
use crate::wkv::{Axis, WkvExponent};

const LN_EPS: f64 = 1e-5;

/// Identity plus depthwise `1×1`, `3×3` and `5×5` branches.
#[derive(Clone, Debug)]
pub struct ShiftBranches {
    kernels: [String; 3],
}

impl ShiftBranches {
    pub const SIZES: [usize; 3] = [1, 3, 5];

    pub fn new(pi: &mut ParamInit, prefix: &str, c: usize) -> Self {
        let k1 = pi.full(&join(prefix, "dw1"), &[c, 1, 1], 1.0);
        let k3 = pi.uniform(&join(prefix, "dw3"), &[c, 3, 3], 9);
        let k5 = pi.uniform(&join(prefix, "dw5"), &[c, 5, 5], 25);
        Self { kernels: [k1, k3, k5] }
    }

    /// The four branch outputs in order identity, 1, 3, 5.
    pub fn apply<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<[Var<'g>; 4]> {
        let mut out = [x; 4];
        for (i, (path, k)) in self.kernels.iter().zip(Self::SIZES).enumerate() {
            out[i + 1] = x.depthwise_conv2d(g.param(path), 1, k / 2)?;
        }
        Ok(out)
    }
}

/// Single-modality weighted shift stack.
#[derive(Clone, Debug)]
pub struct OmniShift {
    branches: ShiftBranches,
    weights: String,
}

impl OmniShift {
    pub fn new(pi: &mut ParamInit, prefix: &str, c: usize) -> Self {
        Self {
            branches: ShiftBranches::new(pi, prefix, c),
            weights: pi.full(&join(prefix, "alpha"), &[4], 0.25),
        }
    }

    pub fn apply<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<Var<'g>> {
        let b = self.branches.apply(g, x)?;
        Ok(Var::weighted_sum(&b, g.param(&self.weights)))
    }
}

/// Cross-modal switch shift. Each modality weights its own four branches;
/// with `cross` it also weights the other modality's branches with the
/// same coefficients.
#[derive(Clone, Debug)]
pub struct CsShift {
    img: ShiftBranches,
    ev: ShiftBranches,
    w_img: String,
    w_ev: String,
    cross: bool,
}

impl CsShift {
    pub fn new(pi: &mut ParamInit, prefix: &str, c: usize, cross: bool) -> Self {
        Self {
            img: ShiftBranches::new(pi, &join(prefix, "img"), c),
            ev: ShiftBranches::new(pi, &join(prefix, "ev"), c),
            w_img: pi.full(&join(prefix, "w_img"), &[4], 0.25),
            w_ev: pi.full(&join(prefix, "w_ev"), &[4], 0.25),
            cross,
        }
    }

    pub fn apply<'g>(&self, g: &'g Graph<'_>, img: Var<'g>, ev: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        if img.shape() != ev.shape() {
            return Err(Error::shape(format!(
                "modalities differ: {:?} vs {:?}",
                img.shape(),
                ev.shape()
            )));
        }
        let bi = self.img.apply(g, img)?;
        let be = self.ev.apply(g, ev)?;
        let (wi, we) = (g.param(&self.w_img), g.param(&self.w_ev));
        if self.cross {
            let both: Vec<Var<'g>> = (0..4).map(|i| bi[i].add(be[i])).collect();
            Ok((Var::weighted_sum(&both, wi), Var::weighted_sum(&both, we)))
        } else {
            Ok((Var::weighted_sum(&bi, wi), Var::weighted_sum(&be, we)))
        }
    }

    /// Token-view wrapper: `T×C` inputs on an `h×w` grid.
    pub fn apply_tokens<'g>(
        &self,
        g: &'g Graph<'_>,
        img: Var<'g>,
        ev: Var<'g>,
        h: usize,
        w: usize,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let (a, b) = self.apply(g, img.from_tokens(h, w)?, ev.from_tokens(h, w)?)?;
        Ok((a.to_tokens(), b.to_tokens()))
    }
}

/// Depthwise `3×3` then pointwise `1×1`, no biases.
#[derive(Clone, Debug)]
struct DpConv {
    depth: String,
    point: Conv,
}

impl DpConv {
    fn new(pi: &mut ParamInit, prefix: &str, c: usize) -> Self {
        Self {
            depth: pi.uniform(&join(prefix, "dw"), &[c, 3, 3], 9),
            point: Conv::new(pi, &join(prefix, "pw"), c, c, 1, 1, false),
        }
    }

    fn apply<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<Var<'g>> {
        let d = x.depthwise_conv2d(g.param(&self.depth), 1, 1)?;
        Ok(self.point.apply(g, d))
    }
}

/// Decay (`w = exp(w_raw)`) and bonus parameters for the row and column
/// passes; the two may be the same paths.
#[derive(Clone, Debug)]
struct WkvDirections {
    rows: (String, String),
    cols: (String, String),
}

impl WkvDirections {
    fn new(pi: &mut ParamInit, prefix: &str, c: usize, shared: bool) -> Self {
        let mut make = |p: &str| {
            let w = pi.log_uniform(&join(p, "w_raw"), &[c], 0.1, 1.0);
            let u = pi.zeros(&join(p, "u"), &[c]);
            (w, u)
        };
        if shared {
            let both = make(prefix);
            Self {
                rows: both.clone(),
                cols: both,
            }
        } else {
            Self {
                rows: make(&join(prefix, "rows")),
                cols: make(&join(prefix, "cols")),
            }
        }
    }
}

/// Recurrent 2-d WKV: odd passes along rows, even passes along columns,
/// each feeding its output forward as the next values.
fn re_wkv<'g>(
    g: &'g Graph<'_>,
    k: Var<'g>,
    v: Var<'g>,
    dirs: &WkvDirections,
    iterations: usize,
    mode: WkvExponent,
) -> Var<'g> {
    let mut cur = v;
    for it in 0..iterations {
        let (axis, (w, u)) = if it % 2 == 0 {
            (Axis::Rows, &dirs.rows)
        } else {
            (Axis::Cols, &dirs.cols)
        };
        cur = k.wkv_along(cur, g.param(w).exp(), g.param(u), axis, mode);
    }
    cur
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    fn new(pi: &mut ParamInit, prefix: &str, c: usize) -> Self {
        Self {
            gamma: pi.full(&join(prefix, "gamma"), &[c], 1.0),
            beta: pi.zeros(&join(prefix, "beta"), &[c]),
        }
    }

    fn apply_tokens<'g>(&self, g: &'g Graph<'_>, t: Var<'g>) -> Var<'g> {
        t.layer_norm(g.param(&self.gamma), g.param(&self.beta), LN_EPS)
    }
}

/// Per-modality parameters of the spatial mix.
#[derive(Clone, Debug)]
struct Stream {
    ln: LayerNorm,
    key: DpConv,
    value: Linear,
    receptance: Linear,
    wkv: WkvDirections,
    alpha: String,
    out: Linear,
}

impl Stream {
    fn new(pi: &mut ParamInit, prefix: &str, cfg: &RunConfig, c: usize) -> Self {
        Self {
            ln: LayerNorm::new(pi, &join(prefix, "ln"), c),
            key: DpConv::new(pi, &join(prefix, "key"), c),
            value: Linear::new(pi, &join(prefix, "value"), c, c),
            receptance: Linear::new(pi, &join(prefix, "receptance"), c, c),
            wkv: WkvDirections::new(pi, &join(prefix, "wkv"), c, cfg.share_direction_params),
            alpha: pi.zeros(&join(prefix, "alpha"), &[c]),
            out: Linear::new(pi, &join(prefix, "out"), c, c),
        }
    }
}

/// Layer norm, CS-Shift, exchanged-key Re-WKV, gated fusion with the other
/// modality and receptance-gated output projection, for both modalities.
#[derive(Clone, Debug)]
pub struct SpatialMix {
    shift: CsShift,
    img: Stream,
    ev: Stream,
    iterations: usize,
    mode: WkvExponent,
    residual: bool,
}

impl SpatialMix {
    pub fn new(pi: &mut ParamInit, prefix: &str, cfg: &RunConfig, c: usize) -> Self {
        Self {
            shift: CsShift::new(pi, &join(prefix, "shift"), c, cfg.cs_shift_cross),
            img: Stream::new(pi, &join(prefix, "img"), cfg, c),
            ev: Stream::new(pi, &join(prefix, "ev"), cfg, c),
            iterations: cfg.rewkv_iterations,
            mode: cfg.wkv_exponent,
            residual: cfg.residual,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, img: Var<'g>, ev: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (_, h, w) = img.value().dims3()?;
        let ni = self.img.ln.apply_tokens(g, img.to_tokens()).from_tokens(h, w)?;
        let ne = self.ev.ln.apply_tokens(g, ev.to_tokens()).from_tokens(h, w)?;
        let (si, se) = self.shift.apply(g, ni, ne)?;

        let k_img = self.img.key.apply(g, si)?;
        let k_ev = self.ev.key.apply(g, se)?;
        let (ti, te) = (si.to_tokens(), se.to_tokens());
        let v_img = self.img.value.apply(g, ti).from_tokens(h, w)?;
        let v_ev = self.ev.value.apply(g, te).from_tokens(h, w)?;

        let wkv_img = re_wkv(g, k_ev, v_img, &self.img.wkv, self.iterations, self.mode);
        let wkv_ev = re_wkv(g, k_img, v_ev, &self.ev.wkv, self.iterations, self.mode);

        let x1 = gate(g.param(&self.img.alpha), wkv_img, ev);
        let x2 = gate(g.param(&self.ev.alpha), wkv_ev, img);

        let project = |s: &Stream, t: Var<'g>, x: Var<'g>| -> Result<Var<'g>> {
            let r = s.receptance.apply(g, t).sigmoid();
            s.out.apply(g, r.mul(x.to_tokens())).from_tokens(h, w)
        };
        let oi = project(&self.img, ti, x1)?;
        let oe = project(&self.ev, te, x2)?;
        if self.residual {
            Ok((img.add(oi), ev.add(oe)))
        } else {
            Ok((oi, oe))
        }
    }
}

/// `σ(α)·a + (1 − σ(α))·b` per channel.
fn gate<'g>(alpha: Var<'g>, a: Var<'g>, b: Var<'g>) -> Var<'g> {
    let s = alpha.sigmoid();
    a.scale_channels(s).add(b.scale_channels(s.one_minus()))
}

/// Image-only token feed-forward: `x + σ(Xc·W_r) ⊙ (relu(Xc·W_k)²·W_v)`
/// with `Xc = OmniShift(conv1×1(x))`.
#[derive(Clone, Debug)]
pub struct ChannelMix {
    conv: Conv,
    shift: OmniShift,
    key: Linear,
    value: Linear,
    receptance: Linear,
    residual: bool,
}

impl ChannelMix {
    pub fn new(pi: &mut ParamInit, prefix: &str, cfg: &RunConfig, c: usize) -> Self {
        let hidden = cfg.hidden_ratio * c;
        Self {
            conv: Conv::new(pi, &join(prefix, "conv"), c, c, 1, 1, false),
            shift: OmniShift::new(pi, &join(prefix, "shift"), c),
            key: Linear::new(pi, &join(prefix, "key"), c, hidden),
            value: Linear::new(pi, &join(prefix, "value"), hidden, c),
            receptance: Linear::new(pi, &join(prefix, "receptance"), c, c),
            residual: cfg.residual,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<Var<'g>> {
        let (_, h, w) = x.value().dims3()?;
        let xc = self.shift.apply(g, self.conv.apply(g, x))?.to_tokens();
        let k = self.key.apply(g, xc).squared_relu();
        let v = self.value.apply(g, k);
        let r = self.receptance.apply(g, xc).sigmoid();
        let o = r.mul(v).from_tokens(h, w)?;
        Ok(if self.residual { x.add(o) } else { o })
    }
}

/// Spatial mix over both modalities, then channel mix on the image stream.
/// Either stage may be disabled, leaving the identity.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    spatial: Option<SpatialMix>,
    channel: Option<ChannelMix>,
}

impl CrossBlock {
    pub fn new(pi: &mut ParamInit, prefix: &str, cfg: &RunConfig, c: usize) -> Self {
        Self {
            spatial: cfg
                .spatial_mix
                .then(|| SpatialMix::new(pi, &join(prefix, "spatial"), cfg, c)),
            channel: cfg
                .channel_mix
                .then(|| ChannelMix::new(pi, &join(prefix, "channel"), cfg, c)),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, img: Var<'g>, ev: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (mut img, mut ev) = (img, ev);
        if let Some(s) = &self.spatial {
            (img, ev) = s.forward(g, img, ev)?;
        }
        if let Some(c) = &self.channel {
            img = c.forward(g, img)?;
        }
        Ok((img, ev))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<CrossBlock>,
}

impl Stage {
    fn new(pi: &mut ParamInit, prefix: &str, cfg: &RunConfig, c: usize) -> Self {
        Self {
            blocks: (0..cfg.blocks_per_level)
                .map(|i| CrossBlock::new(pi, &join(prefix, &format!("block{i}")), cfg, c))
                .collect(),
        }
    }

    fn forward<'g>(&self, g: &'g Graph<'_>, img: Var<'g>, ev: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (mut img, mut ev) = (img, ev);
        for b in &self.blocks {
            (img, ev) = b.forward(g, img, ev)?;
        }
        Ok((img, ev))
    }
}

#[derive(Clone, Debug)]
struct Down {
    img: Conv,
    ev: Conv,
}

#[derive(Clone, Debug)]
struct Up {
    up_img: ConvTranspose,
    up_ev: ConvTranspose,
    fuse_img: Conv,
    fuse_ev: Conv,
}

/// U-shaped encoder-decoder over paired image/event features. Level `l`
/// carries `C·2^l` channels at `1/2^l` resolution; the deepest level is the
/// bottleneck.
#[derive(Clone, Debug)]
pub struct UNet {
    channels: usize,
    levels: usize,
    encoder: Vec<Stage>,
    down: Vec<Down>,
    bottleneck: Stage,
    up: Vec<Up>,
    decoder: Vec<Stage>,
    split: Conv,
}

impl UNet {
    pub fn new(pi: &mut ParamInit, prefix: &str, cfg: &RunConfig) -> Self {
        let c = cfg.channels;
        let levels = cfg.levels;
        let width = |l: usize| c << l;
        let p = |s: String| join(prefix, &s);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..levels - 1 {
            encoder.push(Stage::new(pi, &p(format!("enc{l}")), cfg, width(l)));
            down.push(Down {
                img: Conv::new(pi, &p(format!("down{l}.img")), width(l + 1), width(l), 3, 2, true),
                ev: Conv::new(pi, &p(format!("down{l}.ev")), width(l + 1), width(l), 3, 2, true),
            });
        }
        let bottleneck = Stage::new(pi, &p("bottleneck".into()), cfg, width(levels - 1));
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..levels - 1).rev() {
            let (hi, lo) = (width(l + 1), width(l));
            up.push(Up {
                up_img: ConvTranspose::new(pi, &p(format!("up{l}.img")), hi, lo, 2, 2, 0),
                up_ev: ConvTranspose::new(pi, &p(format!("up{l}.ev")), hi, lo, 2, 2, 0),
                fuse_img: Conv::new(pi, &p(format!("fuse{l}.img")), lo, 2 * lo, 1, 1, true),
                fuse_ev: Conv::new(pi, &p(format!("fuse{l}.ev")), lo, 2 * lo, 1, 1, true),
            });
            decoder.push(Stage::new(pi, &p(format!("dec{l}")), cfg, lo));
        }
        Self {
            channels: c,
            levels,
            encoder,
            down,
            bottleneck,
            up,
            decoder,
            split: Conv::new(pi, &p("split".into()), 2 * c, 2 * c, 3, 1, true),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, img: Var<'g>, ev: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (c, h, w) = img.value().dims3()?;
        let m = 1 << (self.levels - 1);
        if c != self.channels || ev.shape() != img.shape() || h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "U-Net expects two {}×H×W inputs with H, W divisible by {m}, got {:?} and {:?}",
                self.channels,
                img.shape(),
                ev.shape()
            )));
        }
        let (mut xi, mut xe) = (img, ev);
        let mut skips = Vec::new();
        for (stage, down) in self.encoder.iter().zip(&self.down) {
            (xi, xe) = stage.forward(g, xi, xe)?;
            skips.push((xi, xe));
            xi = down.img.apply(g, xi);
            xe = down.ev.apply(g, xe);
        }
        (xi, xe) = self.bottleneck.forward(g, xi, xe)?;
        for ((up, stage), (si, se)) in self.up.iter().zip(&self.decoder).zip(skips.into_iter().rev()) {
            let ui = up.up_img.apply(g, xi);
            let ue = up.up_ev.apply(g, xe);
            xi = up.fuse_img.apply(g, Var::concat(&[ui, si]));
            xe = up.fuse_ev.apply(g, Var::concat(&[ue, se]));
            (xi, xe) = stage.forward(g, xi, xe)?;
        }
        let out = self.split.apply(g, Var::concat(&[xi, xe]));
        Ok((out.narrow(0, c), out.narrow(c, 2 * c)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::autodiff::{conv2d_forward, depthwise_forward, matmul, sigmoid, ModelParams};
    use crate::wkv::{re_wkv_2d, WkvParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: usize) -> RunConfig {
        RunConfig {
            channels: c,
            ..Default::default()
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Randomizes every parameter so no path is trivially dead.
    fn jitter(p: &mut ModelParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in p.iter_mut() {
            let noise = Tensor::uniform(t.shape(), 0.3, &mut rng);
            t.add_assign(&noise);
        }
    }

    // straight-line helpers on plain tensors
    fn tokens(x: &Tensor) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        Tensor::from_fn(&[h * w, c], |i| x.data()[(i % c) * h * w + i / c])
    }

    fn grid(t: &Tensor, h: usize, w: usize) -> Tensor {
        let c = t.shape()[1];
        Tensor::from_fn(&[c, h, w], |i| t.data()[(i % (h * w)) * c + i / (h * w)])
    }

    fn ln(t: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let (n, c) = t.dims2().unwrap();
        let mut out = t.clone();
        for r in 0..n {
            let row = &t.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            for j in 0..c {
                out.data_mut()[r * c + j] = (row[j] - mean) / (var + LN_EPS).sqrt() * gamma.data()[j] + beta.data()[j];
            }
        }
        out
    }

    fn branches(p: &ModelParams, prefix: &str, x: &Tensor) -> [Tensor; 4] {
        let d = |k: usize| depthwise_forward(x, p.get(&format!("{prefix}.dw{k}")).unwrap(), 1, k / 2);
        [x.clone(), d(1), d(3), d(5)]
    }

    fn wsum(xs: &[Tensor], w: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(xs[0].shape());
        for (x, &wi) in xs.iter().zip(w.data()) {
            out.add_assign(&x.map(|v| v * wi));
        }
        out
    }

    fn scale_ch(x: &Tensor, s: &[f64]) -> Tensor {
        let inner = x.numel() / s.len();
        Tensor::from_fn(x.shape(), |i| x.data()[i] * s[i / inner])
    }

    #[test]
    fn cs_shift_branch_selection() {
        let mut p = ModelParams::new();
        let cs = CsShift::new(&mut ParamInit::new(&mut p, 0), "cs", 3, false);
        let (a, b) = (rand_t(&[3, 8, 8], 1), rand_t(&[3, 8, 8], 2));
        for sel in [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]] {
            for n in ["cs.w_img", "cs.w_ev"] {
                p.get_mut(n).unwrap().data_mut().copy_from_slice(&sel);
            }
            let g = Graph::new(&p);
            let (oa, ob) = cs.apply(&g, g.input(a.clone()), g.input(b.clone())).unwrap();
            assert_eq!(*oa.value(), a);
            assert_eq!(*ob.value(), b);
        }
    }

    #[test]
    fn cs_shift_sum_of_branches() {
        for cross in [false, true] {
            let mut p = ModelParams::new();
            let cs = CsShift::new(&mut ParamInit::new(&mut p, 3), "cs", 2, cross);
            jitter(&mut p, 4);
            let (a, b) = (rand_t(&[2, 8, 8], 5), rand_t(&[2, 8, 8], 6));
            let g = Graph::new(&p);
            let (oa, ob) = cs
                .apply_tokens(&g, g.input(tokens(&a)), g.input(tokens(&b)), 8, 8)
                .unwrap();
            let (ba, bb) = (branches(&p, "cs.img", &a), branches(&p, "cs.ev", &b));
            let (wi, we) = (p.get("cs.w_img").unwrap(), p.get("cs.w_ev").unwrap());
            let (want_a, want_b) = if cross {
                let both: Vec<Tensor> = (0..4).map(|i| ba[i].zip_map(&bb[i], |x, y| x + y)).collect();
                (wsum(&both, wi), wsum(&both, we))
            } else {
                (wsum(&ba, wi), wsum(&bb, we))
            };
            assert!(oa.value().max_abs_diff(&tokens(&want_a)) < 1e-12);
            assert!(ob.value().max_abs_diff(&tokens(&want_b)) < 1e-12);
        }
        let mut p = ModelParams::new();
        let cs = CsShift::new(&mut ParamInit::new(&mut p, 0), "cs", 2, false);
        let g = Graph::new(&p);
        let t = g.input(Tensor::zeros(&[15, 2]));
        assert!(cs.apply_tokens(&g, t, t, 4, 4).is_err());
    }

    fn spatial_oracle(p: &ModelParams, cfg: &RunConfig, img: &Tensor, ev: &Tensor) -> (Tensor, Tensor) {
        let (_, h, w) = img.dims3().unwrap();
        let get = |n: &str| p.get(&format!("sm.{n}")).unwrap().clone();
        let norm = |x: &Tensor, m: &str| grid(&ln(&tokens(x), &get(&format!("{m}.ln.gamma")), &get(&format!("{m}.ln.beta"))), h, w);
        let (ni, ne) = (norm(img, "img"), norm(ev, "ev"));
        let si = wsum(&branches(p, "sm.shift.img", &ni), &get("shift.w_img"));
        let se = wsum(&branches(p, "sm.shift.ev", &ne), &get("shift.w_ev"));
        let key = |x: &Tensor, m: &str| {
            let d = depthwise_forward(x, &get(&format!("{m}.key.dw")), 1, 1);
            conv2d_forward(&d, &get(&format!("{m}.key.pw.w")), 1, 0)
        };
        let (ki, ke) = (key(&si, "img"), key(&se, "ev"));
        let lin = |x: &Tensor, n: &str| matmul(&tokens(x), &get(n)).unwrap();
        let params = |m: &str, d: &str| {
            WkvParams::new(get(&format!("{m}.wkv.{d}.w_raw")).map(f64::exp), get(&format!("{m}.wkv.{d}.u"))).unwrap()
        };
        let stream = |m: &str, s: &Tensor, k_other: &Tensor, raw_other: &Tensor, raw_self: &Tensor| {
            let v = grid(&lin(s, &format!("{m}.value")), h, w);
            let wkv = re_wkv_2d(k_other, &v, &params(m, "rows"), &params(m, "cols"), cfg.rewkv_iterations, cfg.wkv_exponent).unwrap();
            let a: Vec<f64> = get(&format!("{m}.alpha")).data().iter().map(|&x| sigmoid(x)).collect();
            let b: Vec<f64> = a.iter().map(|x| 1.0 - x).collect();
            let x = scale_ch(&wkv, &a).zip_map(&scale_ch(raw_other, &b), |p, q| p + q);
            let r = lin(s, &format!("{m}.receptance")).map(sigmoid);
            let o = matmul(&r.zip_map(&tokens(&x), |a, b| a * b), &get(&format!("{m}.out"))).unwrap();
            grid(&o, h, w).zip_map(raw_self, |a, b| a + b)
        };
        (stream("img", &si, &ke, ev, img), stream("ev", &se, &ki, img, ev))
    }

    #[test]
    fn spatial_mix_matches_transcription() {
        let c = cfg(3);
        let mut p = ModelParams::new();
        let sm = SpatialMix::new(&mut ParamInit::new(&mut p, 7), "sm", &c, 3);
        jitter(&mut p, 8);
        let (img, ev) = (rand_t(&[3, 4, 4], 9), rand_t(&[3, 4, 4], 10));
        let g = Graph::new(&p);
        let (oi, oe) = sm.forward(&g, g.input(img.clone()), g.input(ev.clone())).unwrap();
        let (wi, we) = spatial_oracle(&p, &c, &img, &ev);
        assert!(oi.value().max_abs_diff(&wi) < 1e-10);
        assert!(oe.value().max_abs_diff(&we) < 1e-10);
    }

    #[test]
    fn gate_limits() {
        let p = ModelParams::new();
        let g = Graph::new(&p);
        let a = g.input(rand_t(&[2, 3, 3], 1));
        let b = g.input(rand_t(&[2, 3, 3], 2));
        let sat = gate(g.input(Tensor::full(&[2], 800.0)), a, b).value();
        assert_eq!(*sat, *a.value());
        let half = gate(g.input(Tensor::zeros(&[2])), a, b).value();
        let want = a.value().zip_map(&b.value(), |x, y| 0.5 * x + 0.5 * y);
        assert_eq!(*half, want);
        let any = gate(g.input(rand_t(&[2], 3).map(|v| 4.0 * v)), a, b).value();
        for ((o, x), y) in any.data().iter().zip(a.value().data()).zip(b.value().data()) {
            assert!(*o >= x.min(*y) - 1e-15 && *o <= x.max(*y) + 1e-15);
        }
    }

    #[test]
    fn channel_mix_matches_transcription() {
        let c = cfg(3);
        let mut p = ModelParams::new();
        let cm = ChannelMix::new(&mut ParamInit::new(&mut p, 11), "cm", &c, 3);
        jitter(&mut p, 12);
        let x = rand_t(&[3, 4, 4], 13);
        let g = Graph::new(&p);
        let out = cm.forward(&g, g.input(x.clone())).unwrap().value();

        let get = |n: &str| p.get(&format!("cm.{n}")).unwrap().clone();
        let conv = conv2d_forward(&x, &get("conv.w"), 1, 0);
        let xc = tokens(&wsum(&branches(&p, "cm.shift", &conv), &get("shift.alpha")));
        let k = matmul(&xc, &get("key")).unwrap().map(|v| v.max(0.0).powi(2));
        let v = matmul(&k, &get("value")).unwrap();
        let r = matmul(&xc, &get("receptance")).unwrap().map(sigmoid);
        let want = grid(&r.zip_map(&v, |a, b| a * b), 4, 4).zip_map(&x, |a, b| a + b);
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn channel_mix_dead_keys_leave_residual() {
        let c = cfg(2);
        let mut p = ModelParams::new();
        let cm = ChannelMix::new(&mut ParamInit::new(&mut p, 14), "cm", &c, 2);
        let g = Graph::new(&p);
        let z = g.input(Tensor::zeros(&[2, 4, 4]));
        assert_eq!(cm.forward(&g, z).unwrap().value().max_abs(), 0.0);

        p.get_mut("cm.key").unwrap().data_mut().fill(-1.0);
        p.get_mut("cm.conv.w").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        for k in ["cm.shift.dw3", "cm.shift.dw5"] {
            p.get_mut(k).unwrap().data_mut().fill(0.0);
        }
        let x = Tensor::full(&[2, 4, 4], 0.5);
        let g = Graph::new(&p);
        let out = cm.forward(&g, g.input(x.clone())).unwrap();
        assert_eq!(*out.value(), x);
    }

    #[test]
    fn every_block_parameter_gets_gradient() {
        for share in [false, true] {
            let c = RunConfig {
                channels: 3,
                share_direction_params: share,
                ..Default::default()
            };
            let mut p = ModelParams::new();
            let blk = CrossBlock::new(&mut ParamInit::new(&mut p, 15), "blk", &c, 3);
            jitter(&mut p, 16);
            let g = Graph::new(&p);
            let (oi, oe) = blk
                .forward(&g, g.input(rand_t(&[3, 4, 4], 17)), g.input(rand_t(&[3, 4, 4], 18)))
                .unwrap();
            let probe_i = rand_t(&[3, 4, 4], 19);
            let probe_e = rand_t(&[3, 4, 4], 20);
            let loss = oi.dot_const(&probe_i).add(oe.dot_const(&probe_e));
            let grads = g.backward(loss).unwrap();
            assert_eq!(grads.len(), p.len());
            for (name, gr) in &grads {
                assert!(gr.max_abs() > 0.0, "dead parameter {name}");
            }
        }
    }

    #[test]
    fn unet_shapes_and_zero() {
        let c = cfg(4);
        let mut p = ModelParams::new();
        let net = UNet::new(&mut ParamInit::new(&mut p, 21), "unet", &c);
        let g = Graph::new(&p);
        let (a, b) = net
            .forward(&g, g.input(rand_t(&[4, 16, 8], 22)), g.input(rand_t(&[4, 16, 8], 23)))
            .unwrap();
        assert_eq!(a.shape(), [4, 16, 8]);
        assert_eq!(b.shape(), [4, 16, 8]);
        assert!(net
            .forward(&g, g.input(Tensor::zeros(&[4, 12, 8])), g.input(Tensor::zeros(&[4, 12, 8])))
            .is_err());

        p.get_mut("unet.split.w").unwrap().data_mut().fill(0.0);
        let g = Graph::new(&p);
        let z = g.input(Tensor::zeros(&[4, 8, 8]));
        let (a, b) = net.forward(&g, z, z).unwrap();
        assert_eq!(a.value().max_abs(), 0.0);
        assert_eq!(b.value().max_abs(), 0.0);
    }

    #[test]
    fn ablations_keep_shapes() {
        for (s, ch) in [(false, false), (false, true), (true, false)] {
            let c = RunConfig {
                channels: 2,
                spatial_mix: s,
                channel_mix: ch,
                ..Default::default()
            };
            let mut p = ModelParams::new();
            let net = UNet::new(&mut ParamInit::new(&mut p, 24), "unet", &c);
            assert_eq!(p.names().any(|n| n.contains(".spatial.")), s);
            assert_eq!(p.names().any(|n| n.contains(".channel.")), ch);
            let g = Graph::new(&p);
            let x = g.input(rand_t(&[2, 8, 8], 25));
            let (a, b) = net.forward(&g, x, x).unwrap();
            assert_eq!(a.shape(), [2, 8, 8]);
            assert_eq!(b.shape(), [2, 8, 8]);
        }
    }
}
