use crate::tensor::Tensor;

use super::tape::Var;

impl<'t> Var<'t> {
    /// Per-row normalization of a `T×C` token matrix followed by a per-channel
    /// affine map.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let x = self.value();
        let (t, c) = x.dims2().expect("layer_norm needs a T×C matrix");
        let (gv, bv) = (gamma.value(), beta.value());
        assert_eq!(gv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);

        let mut xhat = vec![0.0; t * c];
        let mut inv_std = vec![0.0; t];
        for r in 0..t {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let out = Tensor::from_fn(&[t, c], |i| xhat[i] * gv.data()[i % c] + bv.data()[i % c]);
        self.tape.record(out, &[self, gamma, beta], move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; t * c];
                for r in 0..t {
                    let sl = r * c..(r + 1) * c;
                    let dxh: Vec<f64> = gd[sl.clone()]
                        .iter()
                        .zip(gv.data())
                        .map(|(g, gm)| g * gm)
                        .collect();
                    let m1 = dxh.iter().sum::<f64>() / c as f64;
                    let m2 = dxh
                        .iter()
                        .zip(&xhat[sl.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / c as f64;
                    for (j, o) in dx[sl.clone()].iter_mut().enumerate() {
                        *o = inv_std[r] * (dxh[j] - m1 - xhat[r * c + j] * m2);
                    }
                }
                Tensor::new(&[t, c], dx).unwrap()
            });
            let dgamma = needs[1].then(|| {
                Tensor::from_fn(&[c], |j| (0..t).map(|r| gd[r * c + j] * xhat[r * c + j]).sum())
            });
            let dbeta = needs[2].then(|| Tensor::from_fn(&[c], |j| (0..t).map(|r| gd[r * c + j]).sum()));
            vec![dx, dgamma, dbeta]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ln(x: Tensor) -> Tensor {
        let c = x.shape()[1];
        let tape = Tape::new();
        let out = tape.constant(x).layer_norm(
            tape.constant(Tensor::ones(&[c])),
            tape.constant(Tensor::zeros(&[c])),
            1e-5,
        );
        (*out.value()).clone()
    }

    #[test]
    fn constant_row_maps_to_zero() {
        let y = ln(Tensor::full(&[1, 4], 3.5));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_pair() {
        let y = ln(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - s).abs() < 1e-15);
        assert!((y.data()[1] + s).abs() < 1e-15);
    }

    #[test]
    fn row_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = ln(Tensor::uniform(&[6, 8], 30.0, &mut rng));
        for r in 0..6 {
            let row = &y.data()[r * 8..(r + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }
}
