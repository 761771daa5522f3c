//! Radix-2 iterative Cooley-Tukey transforms.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Smallest power of two `>= n` (and `>= 1`).
pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

fn check_len(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::invalid(format!("FFT length {n} is not a power of two")));
    }
    Ok(())
}

/// `exp(∓2πi·j/n)` for `j < n/2`.
fn twiddles(n: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let ang = sign * 2.0 * std::f64::consts::PI / n as f64;
    (0..n / 2).map(|j| Complex64::from_polar(1.0, ang * j as f64)).collect()
}

/// In-place 1-d transform. The inverse includes the `1/n` scaling.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) -> Result<()> {
    check_len(buf.len())?;
    transform(buf, &twiddles(buf.len(), inverse), inverse);
    Ok(())
}

fn transform(buf: &mut [Complex64], tw: &[Complex64], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    if bits > 0 {
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if i < j {
                buf.swap(i, j);
            }
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for block in buf.chunks_exact_mut(len) {
            let (lo, hi) = block.split_at_mut(half);
            for (j, (a, b)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                let t = *b * tw[j * step];
                *b = *a - t;
                *a += t;
            }
        }
        len <<= 1;
    }
    if inverse {
        let s = 1.0 / n as f64;
        buf.iter_mut().for_each(|z| *z *= s);
    }
}

fn transform2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) -> Result<()> {
    if data.len() != h * w {
        return Err(Error::shape(format!("{} values for a {h}×{w} grid", data.len())));
    }
    check_len(h)?;
    check_len(w)?;
    let tw_row = twiddles(w, inverse);
    for row in data.chunks_mut(w) {
        transform(row, &tw_row, inverse);
    }
    let tw_col = twiddles(h, inverse);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[i * w + j];
        }
        transform(&mut col, &tw_col, inverse);
        for i in 0..h {
            data[i * w + j] = col[i];
        }
    }
    Ok(())
}

/// 2-d transform of a row-major `h×w` grid.
pub fn fft2(data: &mut [Complex64], h: usize, w: usize) -> Result<()> {
    transform2(data, h, w, false)
}

/// Inverse of [`fft2`], scaled so that `ifft2(fft2(x)) == x`.
pub fn ifft2(data: &mut [Complex64], h: usize, w: usize) -> Result<()> {
    transform2(data, h, w, true)
}
