//! Bilinear sampling and deformable convolution.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ops::gemm;
use super::tape::Var;

/// Bilinear read of one channel at continuous `(y, x)`; out-of-bounds corners
/// contribute zero.
#[inline]
fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            img[yy as usize * w + xx as usize]
        }
    };
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1) * (1.0 - fy) * fx
        + at(y0 + 1, x0) * fy * (1.0 - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
}

/// Adjoint of [`bilinear`]: scatters `g` into `dimg` and returns
/// `(∂/∂y, ∂/∂x)` of the sampled value scaled by `g`.
#[inline]
fn bilinear_backward(
    img: &[f64],
    dimg: Option<&mut [f64]>,
    h: usize,
    w: usize,
    y: f64,
    x: f64,
    g: f64,
) -> (f64, f64) {
    let (y0f, x0f) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0f, x - x0f);
    let (y0, x0) = (y0f as isize, x0f as isize);
    let inside = |yy: isize, xx: isize| yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
    let at = |yy: isize, xx: isize| {
        if inside(yy, xx) {
            img[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    let (v00, v01, v10, v11) = (at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1));
    if let Some(d) = dimg {
        for (yy, xx, wt) in [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x0 + 1, (1.0 - fy) * fx),
            (y0 + 1, x0, fy * (1.0 - fx)),
            (y0 + 1, x0 + 1, fy * fx),
        ] {
            if inside(yy, xx) {
                d[yy as usize * w + xx as usize] += g * wt;
            }
        }
    }
    let dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    let dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    (g * dy, g * dx)
}

impl<'t> Var<'t> {
    /// Samples every channel of `self: C×H×W` at `coords: 2×Ho×Wo`, where
    /// `coords[0]` is the row and `coords[1]` the column in pixel units.
    /// Differentiable in both arguments.
    pub fn bilinear_sample(self, coords: Var<'t>) -> Result<Var<'t>> {
        let (x, cv) = (self.value(), coords.value());
        let (c, h, w) = x.dims3()?;
        let (two, ho, wo) = cv.dims3()?;
        if two != 2 {
            return Err(Error::shape(format!("coords must be 2×H×W, got {:?}", cv.shape())));
        }
        let n = ho * wo;
        let (xd, cd) = (x.data(), cv.data());
        let out = Tensor::from_fn(&[c, ho, wo], |i| {
            let (ch, p) = (i / n, i % n);
            bilinear(&xd[ch * h * w..(ch + 1) * h * w], h, w, cd[p], cd[n + p])
        });
        Ok(self.tape.record(out, &[self, coords], move |g, needs| {
            let mut dx = needs[0].then(|| Tensor::zeros(&[c, h, w]));
            let mut dc = Tensor::zeros(&[2, ho, wo]);
            let (xd, cd) = (x.data(), cv.data());
            for ch in 0..c {
                let img = &xd[ch * h * w..(ch + 1) * h * w];
                for p in 0..n {
                    let dimg = dx
                        .as_mut()
                        .map(|t| &mut t.data_mut()[ch * h * w..(ch + 1) * h * w]);
                    let (gy, gx) = bilinear_backward(img, dimg, h, w, cd[p], cd[n + p], g.data()[ch * n + p]);
                    dc.data_mut()[p] += gy;
                    dc.data_mut()[n + p] += gx;
                }
            }
            vec![dx, needs[1].then_some(dc)]
        }))
    }

    /// Deformable convolution with stride 1 and "same" padding.
    ///
    /// `self: Ci×H×W`, `offsets: 2k²×H×W` with `offsets[2j]` the row and
    /// `offsets[2j+1]` the column displacement of tap `j` (raster order),
    /// `w: Co×Ci×k×k`, `bias: [Co]`. Each tap samples the input bilinearly at
    /// its base position plus the offset; reads outside the image are zero.
    pub fn deform_conv2d(self, offsets: Var<'t>, w: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, ov, wv) = (self.value(), offsets.value(), w.value());
        let (ci_n, h, wd) = x.dims3()?;
        let ws = wv.shape().to_vec();
        if ws.len() != 4 || ws[1] != ci_n || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape(format!(
                "deformable kernel {:?} does not fit input {:?}",
                ws,
                x.shape()
            )));
        }
        let (co_n, k) = (ws[0], ws[2]);
        let taps = k * k;
        if ov.shape() != [2 * taps, h, wd] {
            return Err(Error::shape(format!(
                "offsets must be {}×{h}×{wd}, got {:?}",
                2 * taps,
                ov.shape()
            )));
        }
        let pad = (k - 1) / 2;
        let n = h * wd;

        // cols[ci][tap][p]: input sampled at the displaced tap position
        let mut cols = vec![0.0; ci_n * taps * n];
        let (xd, od) = (x.data(), ov.data());
        cols.par_chunks_mut(taps * n).enumerate().for_each(|(ci, col)| {
            let img = &xd[ci * n..(ci + 1) * n];
            for tap in 0..taps {
                let (ky, kx) = (tap / k, tap % k);
                for p in 0..n {
                    let (oy, ox) = (p / wd, p % wd);
                    let y = (oy + ky) as f64 - pad as f64 + od[2 * tap * n + p];
                    let xx = (ox + kx) as f64 - pad as f64 + od[(2 * tap + 1) * n + p];
                    col[tap * n + p] = bilinear(img, h, wd, y, xx);
                }
            }
        });

        // same product as a dense conv over im2col columns, so zero offsets
        // reproduce it bit for bit
        let kk = ci_n * taps;
        let mut out = vec![0.0; co_n * n];
        gemm(co_n, kk, n, wv.data(), (kk, 1), &cols, (n, 1), &mut out);

        let y = self.tape.record(
            Tensor::new(&[co_n, h, wd], out).unwrap(),
            &[self, offsets, w],
            move |g, needs| {
                let gd = g.data();
                let (xd, od, wk) = (x.data(), ov.data(), wv.data());
                let dw = needs[2].then(|| {
                    let mut dw = vec![0.0; co_n * ci_n * taps];
                    dw.par_chunks_mut(ci_n * taps).enumerate().for_each(|(co, d)| {
                        let gc = &gd[co * n..(co + 1) * n];
                        for (j, dv) in d.iter_mut().enumerate() {
                            let col = &cols[j * n..(j + 1) * n];
                            *dv = gc.iter().zip(col).map(|(a, b)| a * b).sum();
                        }
                    });
                    Tensor::new(&[co_n, ci_n, k, k], dw).unwrap()
                });
                if !needs[0] && !needs[1] {
                    return vec![None, None, dw];
                }
                // per input channel: column gradient, then bilinear adjoint
                let per_ci: Vec<(Vec<f64>, Vec<f64>)> = (0..ci_n)
                    .into_par_iter()
                    .map(|ci| {
                        let img = &xd[ci * n..(ci + 1) * n];
                        let mut dimg = vec![0.0; n];
                        let mut doff = vec![0.0; 2 * taps * n];
                        for tap in 0..taps {
                            let (ky, kx) = (tap / k, tap % k);
                            for p in 0..n {
                                let mut dcol = 0.0;
                                for co in 0..co_n {
                                    dcol += wk[(co * ci_n + ci) * taps + tap] * gd[co * n + p];
                                }
                                let (oy, ox) = (p / wd, p % wd);
                                let yy = (oy + ky) as f64 - pad as f64 + od[2 * tap * n + p];
                                let xx = (ox + kx) as f64 - pad as f64 + od[(2 * tap + 1) * n + p];
                                let (gy, gx) = bilinear_backward(img, Some(&mut dimg), h, wd, yy, xx, dcol);
                                doff[2 * tap * n + p] = gy;
                                doff[(2 * tap + 1) * n + p] = gx;
                            }
                        }
                        (dimg, doff)
                    })
                    .collect();
                let mut dx = Vec::with_capacity(ci_n * n);
                let mut doff = vec![0.0; 2 * taps * n];
                for (di, dof) in per_ci {
                    dx.extend_from_slice(&di);
                    for (a, b) in doff.iter_mut().zip(&dof) {
                        *a += b;
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(&[ci_n, h, wd], dx).unwrap()),
                    needs[1].then(|| Tensor::new(&[2 * taps, h, wd], doff).unwrap()),
                    dw,
                ]
            },
        );
        Ok(match bias {
            Some(b) => y.add_channels(b),
            None => y,
        })
    }
}
