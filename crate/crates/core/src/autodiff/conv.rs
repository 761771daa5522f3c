//! Convolutions and pooling over `C×H×W` feature maps.
//!
//! All convolutions zero-pad. Dense convolutions unfold patches and run one
//! matrix product; depthwise ones accumulate directly per plane.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ops::gemm;
use super::tape::Var;

/// Output extent of a strided convolution.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Range of output positions `o` for which `o·stride + tap - pad` lands in
/// `[0, input)`.
#[inline]
fn valid_range(input: usize, out: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let tap = tap as isize;
    let (s, p) = (stride as isize, pad as isize);
    let lo = if p - tap > 0 { (p - tap + s - 1) / s } else { 0 };
    let hi = (input as isize - 1 + p - tap).div_euclid(s) + 1;
    let hi = hi.clamp(0, out as isize) as usize;
    (lo as usize, hi.max(lo as usize))
}

/// Unfolds `x` into a `(Ci·k·k)×(Ho·Wo)` matrix of zero-padded patches.
fn im2col(x: &[f64], (ci_n, h, wd): (usize, usize, usize), k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(wd, k, stride, pad);
    let p = ho * wo;
    let mut cols = vec![0.0; ci_n * k * k * p];
    for ci in 0..ci_n {
        let xc = &x[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(h, ho, ky, stride, pad);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(wd, wo, kx, stride, pad);
                if ox0 >= ox1 {
                    continue;
                }
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let xrow = &xc[(oy * stride + ky - pad) * wd..][..wd];
                    let orow = &mut row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        orow[ox] = xrow[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the image.
fn col2im(cols: &[f64], (ci_n, h, wd): (usize, usize, usize), k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(wd, k, stride, pad);
    let p = ho * wo;
    let mut x = vec![0.0; ci_n * h * wd];
    for ci in 0..ci_n {
        let xc = &mut x[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(h, ho, ky, stride, pad);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(wd, wo, kx, stride, pad);
                if ox0 >= ox1 {
                    continue;
                }
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let xrow = &mut xc[(oy * stride + ky - pad) * wd..][..wd];
                    let grow = &row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        xrow[ox * stride + kx - pad] += grow[ox];
                    }
                }
            }
        }
    }
    x
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

/// Convolution as a matrix product: `x: Ci×H×W`, `w: Co×Ci×k×k` →
/// `Co×Ho×Wo`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let dims = x.dims3().unwrap();
    let (co_n, ci_w, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(dims.0, ci_w);
    let ho = conv_out_extent(dims.1, k, stride, pad);
    let wo = conv_out_extent(dims.2, k, stride, pad);
    let owned;
    let cols = if is_pointwise(k, stride, pad) {
        x.data()
    } else {
        owned = im2col(x.data(), dims, k, stride, pad);
        &owned
    };
    let (kk, p) = (ci_w * k * k, ho * wo);
    let mut out = vec![0.0; co_n * p];
    gemm(co_n, kk, p, w.data(), (kk, 1), cols, (p, 1), &mut out);
    Tensor::new(&[co_n, ho, wo], out).unwrap()
}

/// Gradient of [`conv2d_forward`] with respect to its input. This is also
/// the forward pass of a transposed convolution.
pub fn conv2d_backward_input(
    g: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Tensor {
    let (co_n, ho, wo) = g.dims3().unwrap();
    let (ci_n, k) = (w.shape()[1], w.shape()[2]);
    assert_eq!(w.shape()[0], co_n);
    assert_eq!((ho, wo), (conv_out_extent(in_h, k, stride, pad), conv_out_extent(in_w, k, stride, pad)));
    let (kk, p) = (ci_n * k * k, ho * wo);
    let mut cols = vec![0.0; kk * p];
    gemm(kk, co_n, p, w.data(), (1, kk), g.data(), (p, 1), &mut cols);
    let dx = if is_pointwise(k, stride, pad) {
        cols
    } else {
        col2im(&cols, (ci_n, in_h, in_w), k, stride, pad)
    };
    Tensor::new(&[ci_n, in_h, in_w], dx).unwrap()
}

/// Gradient of [`conv2d_forward`] with respect to its kernel.
pub fn conv2d_backward_weight(g: &Tensor, x: &Tensor, stride: usize, pad: usize, k: usize) -> Tensor {
    let (co_n, ho, wo) = g.dims3().unwrap();
    let dims = x.dims3().unwrap();
    let owned;
    let cols = if is_pointwise(k, stride, pad) {
        x.data()
    } else {
        owned = im2col(x.data(), dims, k, stride, pad);
        &owned
    };
    let (kk, p) = (dims.0 * k * k, ho * wo);
    let mut dw = vec![0.0; co_n * kk];
    gemm(co_n, p, kk, g.data(), (p, 1), cols, (1, p), &mut dw);
    Tensor::new(&[co_n, dims.0, k, k], dw).unwrap()
}

/// One plane of a depthwise convolution, accumulated row by row.
fn plane_forward(x: &[f64], (h, wd): (usize, usize), w: &[f64], k: usize, stride: usize, pad: usize, o: &mut [f64]) {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(wd, k, stride, pad);
    for ky in 0..k {
        let (oy0, oy1) = valid_range(h, ho, ky, stride, pad);
        for kx in 0..k {
            let wv = w[ky * k + kx];
            let (ox0, ox1) = valid_range(wd, wo, kx, stride, pad);
            if ox0 >= ox1 {
                continue;
            }
            for oy in oy0..oy1 {
                let xrow = &x[(oy * stride + ky - pad) * wd..][..wd];
                let orow = &mut o[oy * wo..(oy + 1) * wo];
                if stride == 1 {
                    let ix0 = ox0 + kx - pad;
                    for (ov, &xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ix0..]) {
                        *ov += wv * xv;
                    }
                } else {
                    for ox in ox0..ox1 {
                        orow[ox] += wv * xrow[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
}

/// Input and kernel gradients of [`plane_forward`].
#[allow(clippy::too_many_arguments)]
fn plane_backward(
    g: &[f64],
    x: &[f64],
    (h, wd): (usize, usize),
    w: &[f64],
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(wd, k, stride, pad);
    for ky in 0..k {
        let (oy0, oy1) = valid_range(h, ho, ky, stride, pad);
        for kx in 0..k {
            let wv = w[ky * k + kx];
            let (ox0, ox1) = valid_range(wd, wo, kx, stride, pad);
            let mut acc = 0.0;
            for oy in oy0..oy1.max(oy0) {
                if ox0 >= ox1 {
                    break;
                }
                let iy = oy * stride + ky - pad;
                let grow = &g[oy * wo..(oy + 1) * wo];
                let xrow = &x[iy * wd..][..wd];
                let drow = &mut dx[iy * wd..][..wd];
                if stride == 1 {
                    let ix0 = ox0 + kx - pad;
                    let gs = &grow[ox0..ox1];
                    for (d, &gv) in drow[ix0..].iter_mut().zip(gs) {
                        *d += wv * gv;
                    }
                    acc += gs.iter().zip(&xrow[ix0..]).map(|(a, b)| a * b).sum::<f64>();
                } else {
                    for ox in ox0..ox1 {
                        let ix = ox * stride + kx - pad;
                        drow[ix] += wv * grow[ox];
                        acc += grow[ox] * xrow[ix];
                    }
                }
            }
            dw[ky * k + kx] = acc;
        }
    }
}

/// Per-channel convolution: `x: C×H×W`, `w: C×k×k`.
pub fn depthwise_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = x.dims3().unwrap();
    let k = w.shape()[1];
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(wd, k, stride, pad);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; c * ho * wo];
    for (ch, o) in out.chunks_mut(ho * wo).enumerate() {
        plane_forward(&xd[ch * h * wd..][..h * wd], (h, wd), &wdat[ch * k * k..][..k * k], k, stride, pad, o);
    }
    Tensor::new(&[c, ho, wo], out).unwrap()
}

fn depthwise_backward(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (c, h, wd) = x.dims3().unwrap();
    let (_, ho, wo) = g.dims3().unwrap();
    let k = w.shape()[1];
    let mut dx = vec![0.0; c * h * wd];
    let mut dw = vec![0.0; c * k * k];
    for ch in 0..c {
        plane_backward(
            &g.data()[ch * ho * wo..][..ho * wo],
            &x.data()[ch * h * wd..][..h * wd],
            (h, wd),
            &w.data()[ch * k * k..][..k * k],
            k,
            stride,
            pad,
            &mut dx[ch * h * wd..][..h * wd],
            &mut dw[ch * k * k..][..k * k],
        );
    }
    (
        Tensor::new(&[c, h, wd], dx).unwrap(),
        Tensor::new(&[c, k, k], dw).unwrap(),
    )
}

impl<'t> Var<'t> {
    /// Dense 2-d convolution with optional bias. `w: Co×Ci×k×k`.
    pub fn conv2d(self, w: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let (x, wv) = (self.value(), w.value());
        let (ci, h, wd) = x.dims3().expect("conv2d input must be C×H×W");
        assert!(
            wv.shape().len() == 4 && wv.shape()[1] == ci && wv.shape()[2] == wv.shape()[3],
            "conv2d: kernel {:?} does not fit input {:?}",
            wv.shape(),
            x.shape()
        );
        let k = wv.shape()[2];
        let out = conv2d_forward(&x, &wv, stride, pad);
        let y = self.tape.record(out, &[self, w], move |g, needs| {
            vec![
                needs[0].then(|| conv2d_backward_input(g, &wv, stride, pad, h, wd)),
                needs[1].then(|| conv2d_backward_weight(g, &x, stride, pad, k)),
            ]
        });
        match bias {
            Some(b) => y.add_channels(b),
            None => y,
        }
    }

    /// Per-channel convolution, `w: C×k×k`, odd `k`.
    pub fn depthwise_conv2d(self, w: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        let (c, _, _) = x.dims3()?;
        let ws = wv.shape();
        if ws.len() != 3 || ws[0] != c || ws[1] != ws[2] {
            return Err(Error::shape(format!(
                "depthwise kernel {:?} does not fit input {:?}",
                ws,
                x.shape()
            )));
        }
        if ws[1] % 2 == 0 {
            return Err(Error::invalid(format!("depthwise kernel size {} is even", ws[1])));
        }
        let out = depthwise_forward(&x, &wv, stride, pad);
        Ok(self.tape.record(out, &[self, w], move |g, _| {
            let (dx, dw) = depthwise_backward(g, &x, &wv, stride, pad);
            vec![Some(dx), Some(dw)]
        }))
    }

    /// Transposed convolution, `w: Ci×Co×k×k`; output extent
    /// `(H-1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(
        self,
        w: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Var<'t> {
        let (x, wv) = (self.value(), w.value());
        let (ci, h, wd) = x.dims3().expect("conv_transpose2d input must be C×H×W");
        assert!(
            wv.shape().len() == 4 && wv.shape()[0] == ci,
            "conv_transpose2d: kernel {:?} does not fit input {:?}",
            wv.shape(),
            x.shape()
        );
        let k = wv.shape()[2];
        let ho = (h - 1) * stride + k - 2 * pad;
        let wo = (wd - 1) * stride + k - 2 * pad;
        let out = conv2d_backward_input(&x, &wv, stride, pad, ho, wo);
        let y = self.tape.record(out, &[self, w], move |g, needs| {
            vec![
                needs[0].then(|| conv2d_forward(g, &wv, stride, pad)),
                needs[1].then(|| conv2d_backward_weight(&x, g, stride, pad, k)),
            ]
        });
        match bias {
            Some(b) => y.add_channels(b),
            None => y,
        }
    }

    /// 2×2 mean pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("avg_pool2 needs C×H×W");
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let out = Tensor::from_fn(&[c, ho, wo], |i| {
            let (ch, r) = (i / (ho * wo), i % (ho * wo));
            let (oy, ox) = (r / wo, r % wo);
            let base = ch * h * w + 2 * oy * w + 2 * ox;
            0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1])
        });
        self.tape.record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[c, h, w]);
            let d = dx.data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                let (ch, r) = (i / (ho * wo), i % (ho * wo));
                let (oy, ox) = (r / wo, r % wo);
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                for off in [0, 1, w, w + 1] {
                    d[base + off] += 0.25 * gv;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Mean over channels: `C×H×W` → `1×H×W`.
    pub fn channel_mean(self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("channel_mean needs C×H×W");
        let hw = h * w;
        let out = Tensor::from_fn(&[1, h, w], |p| {
            (0..c).map(|ch| x.data()[ch * hw + p]).sum::<f64>() / c as f64
        });
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(Tensor::from_fn(&[c, h, w], |i| g.data()[i % hw] / c as f64))]
        })
    }

    /// Max over channels: `C×H×W` → `1×H×W`; the gradient goes to the first
    /// maximal channel.
    pub fn channel_max(self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("channel_max needs C×H×W");
        let hw = h * w;
        let mut arg = vec![0usize; hw];
        let mut out = vec![f64::NEG_INFINITY; hw];
        for ch in 0..c {
            for p in 0..hw {
                let v = x.data()[ch * hw + p];
                if v > out[p] {
                    out[p] = v;
                    arg[p] = ch;
                }
            }
        }
        self.tape
            .record(Tensor::new(&[1, h, w], out).unwrap(), &[self], move |g, _| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                for p in 0..hw {
                    dx.data_mut()[arg[p] * hw + p] = g.data()[p];
                }
                vec![Some(dx)]
            })
    }

    /// Spatial mean per channel: `C×H×W` → `[C]`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let x = self.value();
        let c = x.shape()[0];
        let inner = x.numel() / c;
        let out = Tensor::from_fn(&[c], |ch| {
            x.data()[ch * inner..(ch + 1) * inner].iter().sum::<f64>() / inner as f64
        });
        let shape = x.shape().to_vec();
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(Tensor::from_fn(&shape, |i| g.data()[i / inner] / inner as f64))]
        })
    }
}
