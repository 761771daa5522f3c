//! Central finite differences as an independent gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::ModelParams;

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::invalid(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    Ok(())
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for the listed flat indices
/// of one parameter.
pub fn finite_difference_entries<F>(
    mut f: F,
    params: &ModelParams,
    path: &str,
    indices: &[usize],
    h: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    check_step(h)?;
    if !params.contains(path) {
        return Err(Error::invalid(format!("unknown parameter {path}")));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = work.get(path).unwrap().data()[i];
        work.get_mut(path).unwrap().data_mut()[i] = orig + h;
        let fp = f(&work)?;
        work.get_mut(path).unwrap().data_mut()[i] = orig - h;
        let fm = f(&work)?;
        work.get_mut(path).unwrap().data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at {path}[{i}]")));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Finite-difference gradient of every element of one parameter.
pub fn finite_difference_gradient<F>(f: F, params: &ModelParams, path: &str, h: f64) -> Result<Tensor>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    let t = params
        .get(path)
        .ok_or_else(|| Error::invalid(format!("unknown parameter {path}")))?;
    let shape = t.shape().to_vec();
    let idx: Vec<usize> = (0..t.numel()).collect();
    Tensor::new(&shape, finite_difference_entries(f, params, path, &idx, h)?)
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients
/// from turning rounding noise into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let mut p = ModelParams::new();
        p.insert("theta", Tensor::scalar(3.0)).unwrap();
        let g = finite_difference_gradient(
            |p| Ok(p.get("theta").unwrap().item().powi(2)),
            &p,
            "theta",
            1e-6,
        )
        .unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn step_bounds_and_non_finite() {
        let mut p = ModelParams::new();
        p.insert("t", Tensor::scalar(0.0)).unwrap();
        assert!(finite_difference_gradient(|_| Ok(0.0), &p, "t", 1e-3).is_err());
        assert!(matches!(
            finite_difference_gradient(|_| Ok(f64::NAN), &p, "t", 1e-6),
            Err(Error::NonFinite(_))
        ));
    }
}
