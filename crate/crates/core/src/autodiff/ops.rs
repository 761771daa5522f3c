//! Elementwise, reduction, linear-algebra and layout operations.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::Var;

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let out = Rc::new(xv.map(f));
    let out_c = out.clone();
    x.tape.record((*out).clone(), &[x], move |g, _| {
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(out_c.data())
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(Tensor::new(g.shape(), data).unwrap())]
    })
}

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert!(
        a.shape() == b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape
            .record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.record(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, y| g * y)),
                needs[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_same_shape(&a, &b, "div");
        let out = a.zip_map(&b, |x, y| x / y);
        self.tape.record(out, &[self, other], move |g, needs| {
            let da = needs[0].then(|| g.zip_map(&b, |g, y| g / y));
            let db = needs[1].then(|| {
                let data = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .zip(b.data())
                    .map(|((&g, &x), &y)| -g * x / (y * y))
                    .collect();
                Tensor::new(g.shape(), data).unwrap()
            });
            vec![da, db]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x * s);
        self.tape
            .record(out, &[self], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x + s);
        self.tape.record(out, &[self], |g, _| vec![Some(g.clone())])
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }

    /// Elementwise `f` with derivative `df(x, f(x))` supplied by the caller.
    pub fn elementwise(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        unary(self, f, df)
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn sqrt(self) -> Var<'t> {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(self) -> Var<'t> {
        unary(self, f64::abs, |x, _| x.signum())
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        unary(self, move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        unary(
            self,
            move |x| x.max(floor),
            move |x, _| if x > floor { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `max(x, 0)²`
    pub fn squared_relu(self) -> Var<'t> {
        unary(
            self,
            |x| {
                let r = x.max(0.0);
                r * r
            },
            |x, _| 2.0 * x.max(0.0),
        )
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.tape
            .record(Tensor::scalar(v.sum()), &[self], move |g, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Weighted sum of the elements with fixed weights.
    pub fn dot_const(self, weights: &Tensor) -> Var<'t> {
        let v = self.value();
        assert_same_shape(&v, weights, "dot_const");
        let s: f64 = v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let w = weights.clone();
        self.tape
            .record(Tensor::scalar(s), &[self], move |g, _| {
                let gi = g.item();
                vec![Some(w.map(|x| x * gi))]
            })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let out = v.reshape(shape)?;
        let orig = v.shape().to_vec();
        Ok(self
            .tape
            .record(out, &[self], move |g, _| vec![Some(g.reshape(&orig).unwrap())]))
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(self) -> Var<'t> {
        let v = self.value();
        let (r, c) = v.dims2().expect("transpose needs a 2-d tensor");
        let out = transpose2d(&v, r, c);
        self.tape
            .record(out, &[self], move |g, _| vec![Some(transpose2d(g, c, r))])
    }

    /// `[M×K]·[K×N]`. Panics with both shapes on mismatch; see
    /// [`Var::try_matmul`] for the fallible form.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.try_matmul(other).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = matmul(&a, &b)?;
        Ok(self.tape.record(out, &[self, other], move |g, needs| {
            let da = needs[0].then(|| matmul_nt(g, &b));
            let db = needs[1].then(|| matmul_tn(&a, g));
            vec![da, db]
        }))
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        for v in &values {
            assert!(
                v.shape()[1..] == tail[..],
                "concat: trailing extents differ {:?} vs {:?}",
                v.shape(),
                values[0].shape()
            );
        }
        let lead: usize = values.iter().map(|v| v.shape()[0]).sum();
        let mut data = Vec::with_capacity(values.iter().map(|v| v.numel()).sum());
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let sizes: Vec<(usize, Vec<usize>)> =
            values.iter().map(|v| (v.numel(), v.shape().to_vec())).collect();
        parts[0].tape.record(Tensor::new(&shape, data).unwrap(), parts, move |g, needs| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|((n, shape), &need)| {
                    let piece = need.then(|| {
                        Tensor::new(shape, g.data()[offset..offset + n].to_vec()).unwrap()
                    });
                    offset += n;
                    piece
                })
                .collect()
        })
    }

    /// Leading-axis slice `[start, end)`.
    pub fn narrow(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value();
        assert!(start < end && end <= v.shape()[0], "narrow out of range");
        let out = v.channels(start, end);
        let shape = v.shape().to_vec();
        let inner: usize = shape[1..].iter().product();
        self.tape.record(out, &[self], move |g, _| {
            let mut full = Tensor::zeros(&shape);
            full.data_mut()[start * inner..end * inner].copy_from_slice(g.data());
            vec![Some(full)]
        })
    }

    /// `out[c, ..] = x[c, ..] · s[c]`
    pub fn scale_channels(self, s: Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        let c = x.shape()[0];
        assert_eq!(sv.shape(), &[c], "scale_channels: scale must be [{c}]");
        let inner = x.numel() / c;
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * sv.data()[i / inner]);
        self.tape.record(out, &[self, s], move |g, needs| {
            let dx = needs[0].then(|| Tensor::from_fn(g.shape(), |i| g.data()[i] * sv.data()[i / inner]));
            let ds = needs[1].then(|| {
                Tensor::from_fn(&[c], |ch| {
                    let r = ch * inner..(ch + 1) * inner;
                    g.data()[r.clone()]
                        .iter()
                        .zip(&x.data()[r])
                        .map(|(a, b)| a * b)
                        .sum()
                })
            });
            vec![dx, ds]
        })
    }

    /// `out[c, ..] = x[c, ..] + b[c]`
    pub fn add_channels(self, b: Var<'t>) -> Var<'t> {
        let (x, bv) = (self.value(), b.value());
        let c = x.shape()[0];
        assert_eq!(bv.shape(), &[c], "add_channels: bias must be [{c}]");
        let inner = x.numel() / c;
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] + bv.data()[i / inner]);
        self.tape.record(out, &[self, b], move |g, needs| {
            let db = needs[1].then(|| {
                Tensor::from_fn(&[c], |ch| g.data()[ch * inner..(ch + 1) * inner].iter().sum())
            });
            vec![Some(g.clone()), db]
        })
    }

    /// `out[c, y, x] = v[c, y, x] · a[0, y, x]`, broadcasting a single-channel
    /// map over all channels.
    pub fn mul_spatial(self, a: Var<'t>) -> Var<'t> {
        let (x, av) = (self.value(), a.value());
        let (c, h, w) = x.dims3().expect("mul_spatial needs C×H×W");
        assert_eq!(av.shape(), &[1, h, w], "mul_spatial: map must be 1×{h}×{w}");
        let hw = h * w;
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * av.data()[i % hw]);
        self.tape.record(out, &[self, a], move |g, needs| {
            let dx = needs[0].then(|| Tensor::from_fn(g.shape(), |i| g.data()[i] * av.data()[i % hw]));
            let da = needs[1].then(|| {
                let mut d = Tensor::zeros(&[1, h, w]);
                for ch in 0..c {
                    for p in 0..hw {
                        d.data_mut()[p] += g.data()[ch * hw + p] * x.data()[ch * hw + p];
                    }
                }
                d
            });
            vec![dx, da]
        })
    }

    /// `Σ_i w[i] · xs[i]` for same-shaped inputs and a weight vector.
    pub fn weighted_sum(xs: &[Var<'t>], w: Var<'t>) -> Var<'t> {
        let wv = w.value();
        assert_eq!(wv.shape(), &[xs.len()], "weighted_sum: one weight per input");
        let values: Vec<Rc<Tensor>> = xs.iter().map(|x| x.value()).collect();
        let mut out = Tensor::zeros(values[0].shape());
        for (v, &wi) in values.iter().zip(wv.data()) {
            assert_same_shape(&out, v, "weighted_sum");
            for (o, &x) in out.data_mut().iter_mut().zip(v.data()) {
                *o += wi * x;
            }
        }
        let mut parents = xs.to_vec();
        parents.push(w);
        let n = xs.len();
        xs[0].tape.record(out, &parents, move |g, needs| {
            let mut grads: Vec<Option<Tensor>> = (0..n)
                .map(|i| needs[i].then(|| g.map(|v| v * wv.data()[i])))
                .collect();
            grads.push(needs[n].then(|| {
                Tensor::from_fn(&[n], |i| {
                    g.data().iter().zip(values[i].data()).map(|(a, b)| a * b).sum()
                })
            }));
            grads
        })
    }

    /// `C×H×W` → token view `T×C`.
    pub fn to_tokens(self) -> Var<'t> {
        let shape = self.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        self.reshape(&[c, h * w]).unwrap().transpose()
    }

    /// Token view `T×C` → `C×H×W`.
    pub fn from_tokens(self, h: usize, w: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != h * w {
            return Err(Error::shape(format!(
                "token count {:?} does not tile a {h}×{w} grid",
                shape
            )));
        }
        let c = shape[1];
        self.transpose().reshape(&[c, h, w])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn transpose2d(t: &Tensor, r: usize, c: usize) -> Tensor {
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).unwrap()
}

/// Plain matrix product with shape checking.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out);
    Tensor::new(&[m, n], out)
}

/// `c += a · b` for row-major `m×k` and `k×n` operands given as
/// `(row stride, column stride)` views.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `g · bᵀ`
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = g.dims2().unwrap();
    let (k, _) = b.dims2().unwrap();
    let mut out = vec![0.0; m * k];
    gemm(m, n, k, g.data(), (n, 1), b.data(), (1, n), &mut out);
    Tensor::new(&[m, k], out).unwrap()
}

/// `aᵀ · g`
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = g.dims2().unwrap();
    let mut out = vec![0.0; k * n];
    gemm(k, m, n, a.data(), (1, k), g.data(), (n, 1), &mut out);
    Tensor::new(&[k, n], out).unwrap()
}
