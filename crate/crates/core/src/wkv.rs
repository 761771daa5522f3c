//! Bidirectional WKV linear attention.
//!
//! For a sequence of `T` tokens with keys `k` and values `v` (both `T×C`),
//! per-channel decay `w > 0` and current-token bonus `u`, output token `t`
//! is the normalized weighted average
//!
//! ```text
//! wkv_t = (Σ_{i≠t} e^{s(t,i)} v_i + e^{u + k_t} v_t) / (Σ_{i≠t} e^{s(t,i)} + e^{u + k_t})
//! ```
//!
//! with `s(t,i) = −((|t−i|−1)/T)·w + k_i` ([`WkvExponent::Vrwkv`], the
//! default) or `s(t,i) = −((|t−i|−1)/T)·(w + k_i)` ([`WkvExponent::Grouped`]).
//!
//! [`bi_wkv_naive`] evaluates the double sum directly in `O(T²)`.
//! [`bi_wkv_scan`] evaluates the `Vrwkv` form in `O(T)` with one prefix scan
//! per direction, each carrying a numerator, a denominator and a running
//! maximum exponent so nothing overflows.

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the distance decay combines with the key in the exponent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WkvExponent {
    /// `−((|t−i|−1)/T)·w + k_i`: the decay acts on `w` only.
    #[default]
    Vrwkv,
    /// `−((|t−i|−1)/T)·(w + k_i)`: the key is decayed with distance too.
    /// Only the quadratic evaluation exists for this form.
    Grouped,
}

impl std::str::FromStr for WkvExponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vrwkv" => Ok(Self::Vrwkv),
            "grouped" => Ok(Self::Grouped),
            other => Err(Error::invalid(format!(
                "unknown wkv exponent {other:?} (expected vrwkv or grouped)"
            ))),
        }
    }
}

/// Per-channel decay and bonus.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvParams {
    w: Tensor,
    u: Tensor,
}

impl WkvParams {
    pub fn new(w: Tensor, u: Tensor) -> Result<Self> {
        if w.shape().len() != 1 || w.shape() != u.shape() {
            return Err(Error::shape(format!(
                "w and u must be matching vectors, got {:?} and {:?}",
                w.shape(),
                u.shape()
            )));
        }
        if let Some(bad) = w.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::invalid(format!("decay w must be positive, got {bad}")));
        }
        Ok(Self { w, u })
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn channels(&self) -> usize {
        self.w.numel()
    }
}

/// Gradients of a Bi-WKV evaluation.
#[derive(Clone, Debug)]
pub struct WkvGrads<T = f64> {
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dw: Vec<T>,
    pub du: Vec<T>,
}

fn check_dims<F>(k: &[F], v: &[F], w: &[F], u: &[F], t: usize, c: usize) {
    assert!(t >= 1, "empty sequence");
    assert_eq!(k.len(), t * c, "k must be T×C");
    assert_eq!(v.len(), t * c, "v must be T×C");
    assert_eq!(w.len(), c, "w must have C entries");
    assert_eq!(u.len(), c, "u must have C entries");
}

#[inline]
fn exponent<F: Float>(mode: WkvExponent, dist: usize, t_len: F, w: F, k: F) -> F {
    let d = F::from(dist - 1).unwrap() / t_len;
    match mode {
        WkvExponent::Vrwkv => -d * w + k,
        WkvExponent::Grouped => -d * (w + k),
    }
}

/// Direct `O(T²)` evaluation over flat `T×C` slices. Each output subtracts
/// the maximum of its own exponents before exponentiating.
pub fn bi_wkv_naive_raw<F: Float>(
    k: &[F],
    v: &[F],
    w: &[F],
    u: &[F],
    t_len: usize,
    c: usize,
    mode: WkvExponent,
) -> Vec<F> {
    check_dims(k, v, w, u, t_len, c);
    let tf = F::from(t_len).unwrap();
    let mut out = vec![F::zero(); t_len * c];
    let mut s = vec![F::zero(); t_len];
    for ch in 0..c {
        for t in 0..t_len {
            let mut m = F::neg_infinity();
            for (i, si) in s.iter_mut().enumerate() {
                *si = if i == t {
                    u[ch] + k[t * c + ch]
                } else {
                    exponent(mode, t.abs_diff(i), tf, w[ch], k[i * c + ch])
                };
                m = m.max(*si);
            }
            let (mut num, mut den) = (F::zero(), F::zero());
            for (i, &si) in s.iter().enumerate() {
                let e = (si - m).exp();
                num = num + e * v[i * c + ch];
                den = den + e;
            }
            out[t * c + ch] = num / den;
        }
    }
    out
}

/// Running state of one scan direction: the accumulated numerator and
/// denominator are `num·e^p` and `den·e^p`.
#[derive(Clone, Copy)]
struct ScanState<F> {
    num: F,
    den: F,
    p: F,
}

impl<F: Float> ScanState<F> {
    fn empty() -> Self {
        Self {
            num: F::zero(),
            den: F::zero(),
            p: F::neg_infinity(),
        }
    }

    /// Decays everything by one step, then absorbs a token with exponent `k`.
    #[inline]
    fn push(&mut self, decay: F, k: F, v: F) {
        let pd = self.p - decay;
        let q = pd.max(k);
        let a = (pd - q).exp();
        let b = (k - q).exp();
        self.num = a * self.num + b * v;
        self.den = a * self.den + b;
        self.p = q;
    }
}

/// `O(T)` evaluation of the [`WkvExponent::Vrwkv`] form over flat `T×C`
/// slices. Scratch space is one `T`-length state buffer reused across
/// channels.
pub fn bi_wkv_scan_raw<F: Float>(k: &[F], v: &[F], w: &[F], u: &[F], t_len: usize, c: usize) -> Vec<F> {
    check_dims(k, v, w, u, t_len, c);
    let tf = F::from(t_len).unwrap();
    let mut out = vec![F::zero(); t_len * c];
    let mut fwd = vec![ScanState::empty(); t_len];
    for ch in 0..c {
        let decay = w[ch] / tf;
        let mut st = ScanState::empty();
        for t in 0..t_len {
            fwd[t] = st;
            st.push(decay, k[t * c + ch], v[t * c + ch]);
        }
        let mut bwd = ScanState::empty();
        for t in (0..t_len).rev() {
            let f = fwd[t];
            let (kt, vt) = (k[t * c + ch], v[t * c + ch]);
            let own = u[ch] + kt;
            let m = f.p.max(bwd.p).max(own);
            let (ef, eb, eo) = ((f.p - m).exp(), (bwd.p - m).exp(), (own - m).exp());
            let num = f.num * ef + bwd.num * eb + vt * eo;
            let den = f.den * ef + bwd.den * eb + eo;
            out[t * c + ch] = num / den;
            bwd.push(decay, kt, vt);
        }
    }
    out
}

/// Reference `O(T²)` gradients of [`bi_wkv_naive_raw`] given the upstream
/// gradient `g` of the output.
pub fn bi_wkv_backward_naive_raw(
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: &[f64],
    g: &[f64],
    t_len: usize,
    c: usize,
    mode: WkvExponent,
) -> WkvGrads {
    check_dims(k, v, w, u, t_len, c);
    let tf = t_len as f64;
    let mut gr = WkvGrads {
        dk: vec![0.0; t_len * c],
        dv: vec![0.0; t_len * c],
        dw: vec![0.0; c],
        du: vec![0.0; c],
    };
    let mut s = vec![0.0; t_len];
    let mut e = vec![0.0; t_len];
    for ch in 0..c {
        for t in 0..t_len {
            let gt = g[t * c + ch];
            if gt == 0.0 {
                continue;
            }
            let mut m = f64::NEG_INFINITY;
            for (i, si) in s.iter_mut().enumerate() {
                *si = if i == t {
                    u[ch] + k[t * c + ch]
                } else {
                    exponent(mode, t.abs_diff(i), tf, w[ch], k[i * c + ch])
                };
                m = m.max(*si);
            }
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..t_len {
                e[i] = (s[i] - m).exp();
                num += e[i] * v[i * c + ch];
                den += e[i];
            }
            let y = num / den;
            for i in 0..t_len {
                let q = gt * e[i] / den;
                gr.dv[i * c + ch] += q;
                let ds = q * (v[i * c + ch] - y);
                if i == t {
                    gr.dk[i * c + ch] += ds;
                    gr.du[ch] += ds;
                } else {
                    let d = (t.abs_diff(i) - 1) as f64 / tf;
                    gr.dw[ch] -= ds * d;
                    match mode {
                        WkvExponent::Vrwkv => gr.dk[i * c + ch] += ds,
                        WkvExponent::Grouped => gr.dk[i * c + ch] -= ds * d,
                    }
                }
            }
        }
    }
    gr
}

/// Forward-scan state extended with distance-weighted sums, used for the
/// gradient with respect to `w`.
#[derive(Clone, Copy)]
struct DiffState {
    num: f64,
    den: f64,
    dnum: f64,
    dden: f64,
    p: f64,
}

impl DiffState {
    fn empty() -> Self {
        Self {
            num: 0.0,
            den: 0.0,
            dnum: 0.0,
            dden: 0.0,
            p: f64::NEG_INFINITY,
        }
    }

    /// `dnum` tracks `Σ (dist−1)·e^{…}·v_i`; one step adds the plain sum to
    /// it before decaying, since every accumulated token moves one further.
    #[inline]
    fn push(&mut self, decay: f64, k: f64, v: f64) {
        let pd = self.p - decay;
        let q = pd.max(k);
        let a = (pd - q).exp();
        let b = (k - q).exp();
        self.dnum = a * (self.dnum + self.num);
        self.dden = a * (self.dden + self.den);
        self.num = a * self.num + b * v;
        self.den = a * self.den + b;
        self.p = q;
    }
}

/// Scan state for the transposed pass: `Σ c_t·λ^{|t−i|−1}` with signed
/// coefficients, sharing one running exponent between two sums.
#[derive(Clone, Copy)]
struct AdjState {
    a: f64,
    b: f64,
    p: f64,
}

impl AdjState {
    fn empty() -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            p: f64::NEG_INFINITY,
        }
    }

    #[inline]
    fn push(&mut self, decay: f64, e: f64, ca: f64, cb: f64) {
        let pd = self.p - decay;
        let q = pd.max(e);
        let x = (pd - q).exp();
        let y = (e - q).exp();
        self.a = x * self.a + y * ca;
        self.b = x * self.b + y * cb;
        self.p = q;
    }
}

/// `O(T)` gradients of the [`WkvExponent::Vrwkv`] form.
///
/// A first sweep recomputes the outputs together with `∂y/∂w` and `∂y/∂u`.
/// Writing `G_t = g_t / D_t` for the upstream gradient over the output
/// denominator, the key and value gradients are
/// `dv_i = e^{k_i}(Σ_{t≠i} G_t λ^{|t−i|−1} + G_i e^u)` and
/// `dk_i = v_i·dv_i − e^{k_i}(Σ_{t≠i} G_t y_t λ^{|t−i|−1} + G_i y_i e^u)`,
/// with `λ = e^{−w/T}`; both sums are again one scan per direction.
pub fn bi_wkv_backward_scan_raw(
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: &[f64],
    g: &[f64],
    t_len: usize,
    c: usize,
) -> WkvGrads {
    check_dims(k, v, w, u, t_len, c);
    let tf = t_len as f64;
    let mut gr = WkvGrads {
        dk: vec![0.0; t_len * c],
        dv: vec![0.0; t_len * c],
        dw: vec![0.0; c],
        du: vec![0.0; c],
    };
    let mut fwd = vec![DiffState::empty(); t_len];
    // per token: G_t = coef_t · e^{-m_t}, and y_t
    let mut coef = vec![0.0; t_len];
    let mut neg_m = vec![0.0; t_len];
    let mut ys = vec![0.0; t_len];
    for ch in 0..c {
        let decay = w[ch] / tf;
        let mut st = DiffState::empty();
        for t in 0..t_len {
            fwd[t] = st;
            st.push(decay, k[t * c + ch], v[t * c + ch]);
        }
        let mut bwd = DiffState::empty();
        for t in (0..t_len).rev() {
            let f = fwd[t];
            let (kt, vt, gt) = (k[t * c + ch], v[t * c + ch], g[t * c + ch]);
            let own = u[ch] + kt;
            let m = f.p.max(bwd.p).max(own);
            let (ef, eb, eo) = ((f.p - m).exp(), (bwd.p - m).exp(), (own - m).exp());
            let num = f.num * ef + bwd.num * eb + vt * eo;
            let den = f.den * ef + bwd.den * eb + eo;
            let y = num / den;
            let dnum = -(f.dnum * ef + bwd.dnum * eb) / tf;
            let dden = -(f.dden * ef + bwd.dden * eb) / tf;
            gr.dw[ch] += gt * (dnum - y * dden) / den;
            gr.du[ch] += gt * eo * (vt - y) / den;
            coef[t] = gt / den;
            neg_m[t] = -m;
            ys[t] = y;
            bwd.push(decay, kt, vt);
        }

        // own-token terms
        for i in 0..t_len {
            let e = (u[ch] + k[i * c + ch] + neg_m[i]).exp();
            gr.dv[i * c + ch] = coef[i] * e;
            gr.dk[i * c + ch] = -coef[i] * ys[i] * e;
        }
        // tokens t < i, then t > i
        let mut acc = AdjState::empty();
        for i in 0..t_len {
            if i > 0 {
                let t = i - 1;
                acc.push(decay, neg_m[t], coef[t], coef[t] * ys[t]);
            }
            let e = (acc.p + k[i * c + ch]).exp();
            gr.dv[i * c + ch] += acc.a * e;
            gr.dk[i * c + ch] -= acc.b * e;
        }
        let mut acc = AdjState::empty();
        for i in (0..t_len).rev() {
            if i + 1 < t_len {
                let t = i + 1;
                acc.push(decay, neg_m[t], coef[t], coef[t] * ys[t]);
            }
            let e = (acc.p + k[i * c + ch]).exp();
            gr.dv[i * c + ch] += acc.a * e;
            gr.dk[i * c + ch] -= acc.b * e;
        }
        for i in 0..t_len {
            gr.dk[i * c + ch] += v[i * c + ch] * gr.dv[i * c + ch];
        }
    }
    gr
}

fn seq_dims(k: &Tensor, v: &Tensor, params: &WkvParams) -> Result<(usize, usize)> {
    let (t, c) = k.dims2()?;
    if v.shape() != k.shape() {
        return Err(Error::shape(format!(
            "k {:?} and v {:?} differ",
            k.shape(),
            v.shape()
        )));
    }
    if t == 0 {
        return Err(Error::invalid("empty token sequence"));
    }
    if params.channels() != c {
        return Err(Error::shape(format!(
            "{} decay channels for {c} feature channels",
            params.channels()
        )));
    }
    Ok((t, c))
}

/// Quadratic reference evaluation of `T×C` inputs.
pub fn bi_wkv_naive(k: &Tensor, v: &Tensor, params: &WkvParams, mode: WkvExponent) -> Result<Tensor> {
    let (t, c) = seq_dims(k, v, params)?;
    let out = bi_wkv_naive_raw(k.data(), v.data(), params.w.data(), params.u.data(), t, c, mode);
    Tensor::new(&[t, c], out)
}

/// Linear-time evaluation of `T×C` inputs. The grouped form has no
/// separable recurrence and falls back to the quadratic path.
pub fn bi_wkv_scan(k: &Tensor, v: &Tensor, params: &WkvParams, mode: WkvExponent) -> Result<Tensor> {
    let (t, c) = seq_dims(k, v, params)?;
    let out = match mode {
        WkvExponent::Vrwkv => bi_wkv_scan_raw(k.data(), v.data(), params.w.data(), params.u.data(), t, c),
        WkvExponent::Grouped => {
            bi_wkv_naive_raw(k.data(), v.data(), params.w.data(), params.u.data(), t, c, mode)
        }
    };
    Tensor::new(&[t, c], out)
}

/// Which gradient algorithm to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardImpl {
    Naive,
    Scan,
}

/// Gradients `(dk, dv, dw, du)` for upstream gradient `grad` of a `T×C`
/// evaluation.
pub fn bi_wkv_backward(
    k: &Tensor,
    v: &Tensor,
    params: &WkvParams,
    grad: &Tensor,
    mode: WkvExponent,
    imp: BackwardImpl,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (t, c) = seq_dims(k, v, params)?;
    grad.check_same_shape(k, "upstream gradient")?;
    let (kd, vd, w, u, g) = (k.data(), v.data(), params.w.data(), params.u.data(), grad.data());
    let gr = match (mode, imp) {
        (WkvExponent::Vrwkv, BackwardImpl::Scan) => bi_wkv_backward_scan_raw(kd, vd, w, u, g, t, c),
        _ => bi_wkv_backward_naive_raw(kd, vd, w, u, g, t, c, mode),
    };
    Ok((
        Tensor::new(&[t, c], gr.dk)?,
        Tensor::new(&[t, c], gr.dv)?,
        Tensor::new(&[c], gr.dw)?,
        Tensor::new(&[c], gr.du)?,
    ))
}

/// Scan direction over a `C×H×W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row is a sequence of length `W`.
    Rows,
    /// Each column is a sequence of length `H`.
    Cols,
}

struct Grid {
    c: usize,
    h: usize,
    w: usize,
}

impl Grid {
    fn lines(&self, axis: Axis) -> (usize, usize) {
        match axis {
            Axis::Rows => (self.h, self.w),
            Axis::Cols => (self.w, self.h),
        }
    }

    #[inline]
    fn index(&self, axis: Axis, line: usize, pos: usize, ch: usize) -> usize {
        match axis {
            Axis::Rows => (ch * self.h + line) * self.w + pos,
            Axis::Cols => (ch * self.h + pos) * self.w + line,
        }
    }

    /// Gathers one line as a `T×C` token matrix.
    fn gather(&self, src: &[f64], axis: Axis, line: usize) -> Vec<f64> {
        let (_, t) = self.lines(axis);
        let mut out = vec![0.0; t * self.c];
        for pos in 0..t {
            for ch in 0..self.c {
                out[pos * self.c + ch] = src[self.index(axis, line, pos, ch)];
            }
        }
        out
    }

    fn scatter(&self, dst: &mut [f64], axis: Axis, line: usize, seq: &[f64]) {
        let (_, t) = self.lines(axis);
        for pos in 0..t {
            for ch in 0..self.c {
                dst[self.index(axis, line, pos, ch)] = seq[pos * self.c + ch];
            }
        }
    }
}

/// Applies Bi-WKV independently along every row or column of `C×H×W`
/// inputs.
pub fn wkv_along(
    k: &Tensor,
    v: &Tensor,
    params: &WkvParams,
    axis: Axis,
    mode: WkvExponent,
) -> Result<Tensor> {
    let (c, h, w) = k.dims3()?;
    v.check_same_shape(k, "k and v")?;
    if params.channels() != c {
        return Err(Error::shape(format!(
            "{} decay channels for {c} feature channels",
            params.channels()
        )));
    }
    let grid = Grid { c, h, w };
    Ok(wkv_along_raw(&grid, k.data(), v.data(), params.w.data(), params.u.data(), axis, mode))
}

fn wkv_along_raw(
    grid: &Grid,
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: &[f64],
    axis: Axis,
    mode: WkvExponent,
) -> Tensor {
    let (n_lines, t) = grid.lines(axis);
    let c = grid.c;
    let seqs: Vec<Vec<f64>> = (0..n_lines)
        .into_par_iter()
        .map(|line| {
            let ks = grid.gather(k, axis, line);
            let vs = grid.gather(v, axis, line);
            match mode {
                WkvExponent::Vrwkv => bi_wkv_scan_raw(&ks, &vs, w, u, t, c),
                WkvExponent::Grouped => bi_wkv_naive_raw(&ks, &vs, w, u, t, c, mode),
            }
        })
        .collect();
    let mut out = vec![0.0; c * grid.h * grid.w];
    for (line, seq) in seqs.iter().enumerate() {
        grid.scatter(&mut out, axis, line, seq);
    }
    Tensor::new(&[c, grid.h, grid.w], out).unwrap()
}

/// Recurrent 2-d application: iteration 1 runs along rows with `params_h`,
/// its output becomes the values for iteration 2 along columns with
/// `params_v`, and so on alternately. Keys are reused by every pass.
pub fn re_wkv_2d(
    k: &Tensor,
    v: &Tensor,
    params_h: &WkvParams,
    params_v: &WkvParams,
    iterations: usize,
    mode: WkvExponent,
) -> Result<Tensor> {
    if iterations == 0 {
        return Err(Error::invalid("Re-WKV needs at least one iteration"));
    }
    let mut cur = v.clone();
    for it in 0..iterations {
        let (axis, p) = if it % 2 == 0 {
            (Axis::Rows, params_h)
        } else {
            (Axis::Cols, params_v)
        };
        cur = wkv_along(k, &cur, p, axis, mode)?;
    }
    Ok(cur)
}

impl<'t> Var<'t> {
    /// Differentiable Bi-WKV along every row or column. `self` holds the
    /// keys (`C×H×W`), `w` must already be positive.
    pub fn wkv_along(self, v: Var<'t>, w: Var<'t>, u: Var<'t>, axis: Axis, mode: WkvExponent) -> Var<'t> {
        let (kv, vv, wv, uv) = (self.value(), v.value(), w.value(), u.value());
        let (c, h, wd) = kv.dims3().expect("wkv keys must be C×H×W");
        assert_eq!(kv.shape(), vv.shape(), "wkv: k and v differ");
        assert_eq!(wv.shape(), &[c], "wkv: w must be [{c}]");
        assert_eq!(uv.shape(), &[c], "wkv: u must be [{c}]");
        let grid = Grid { c, h, w: wd };
        let out = wkv_along_raw(&grid, kv.data(), vv.data(), wv.data(), uv.data(), axis, mode);
        self.tape.record(out, &[self, v, w, u], move |g, _| {
            let grid = Grid { c, h, w: wd };
            let (n_lines, t) = grid.lines(axis);
            let (kd, vd, wdat, ud, gd) = (kv.data(), vv.data(), wv.data(), uv.data(), g.data());
            let per_line: Vec<WkvGrads> = (0..n_lines)
                .into_par_iter()
                .map(|line| {
                    let ks = grid.gather(kd, axis, line);
                    let vs = grid.gather(vd, axis, line);
                    let gs = grid.gather(gd, axis, line);
                    match mode {
                        WkvExponent::Vrwkv => bi_wkv_backward_scan_raw(&ks, &vs, wdat, ud, &gs, t, c),
                        WkvExponent::Grouped => {
                            bi_wkv_backward_naive_raw(&ks, &vs, wdat, ud, &gs, t, c, mode)
                        }
                    }
                })
                .collect();
            let mut dk = vec![0.0; c * h * wd];
            let mut dv = vec![0.0; c * h * wd];
            let mut dw = vec![0.0; c];
            let mut du = vec![0.0; c];
            for (line, gr) in per_line.iter().enumerate() {
                grid.scatter(&mut dk, axis, line, &gr.dk);
                grid.scatter(&mut dv, axis, line, &gr.dv);
                for ch in 0..c {
                    dw[ch] += gr.dw[ch];
                    du[ch] += gr.du[ch];
                }
            }
            vec![
                Some(Tensor::new(&[c, h, wd], dk).unwrap()),
                Some(Tensor::new(&[c, h, wd], dv).unwrap()),
                Some(Tensor::new(&[c], dw).unwrap()),
                Some(Tensor::new(&[c], du).unwrap()),
            ]
        })
    }
}
