//! Adaptive Simpson quadrature for matrix-valued integrands.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("quadrature did not converge on [{a}, {b}] (remaining error {err:e} > {tol:e})")]
    NonConvergence { a: f64, b: f64, err: f64, tol: f64 },
    #[error("truncation horizon {cap} too short: tail bound {tail:e} exceeds tolerance {tol:e}")]
    TailBound { cap: f64, tail: f64, tol: f64 },
}

fn simpson(fa: &DMatrix<f64>, fm: &DMatrix<f64>, fb: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    (fa + fm * 4.0 + fb) * (h / 6.0)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Integrate `f` over `[a, b]` to absolute tolerance `tol` (entrywise).
pub fn integrate<F>(f: &F, a: f64, b: f64, tol: f64) -> Result<DMatrix<f64>, QuadError>
where
    F: Fn(f64) -> DMatrix<f64> + ?Sized,
{
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(&fa, &fm, &fb, b - a);
    let mut acc = DMatrix::zeros(fa.nrows(), fa.ncols());
    recurse(f, a, b, &fa, &fm, &fb, &whole, tol, 50, &mut acc)?;
    Ok(acc)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: &DMatrix<f64>,
    fm: &DMatrix<f64>,
    fb: &DMatrix<f64>,
    whole: &DMatrix<f64>,
    tol: f64,
    depth: usize,
    acc: &mut DMatrix<f64>,
) -> Result<(), QuadError>
where
    F: Fn(f64) -> DMatrix<f64> + ?Sized,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(fa, &flm, fm, m - a);
    let right = simpson(fm, &frm, fb, b - m);
    let refined = &left + &right;
    let err = max_abs(&(&refined - whole)) / 15.0;
    if err <= tol || (b - a).abs() < 1e-12 {
        // Richardson extrapolation of the composite rule
        *acc += &refined + (&refined - whole) / 15.0;
        return Ok(());
    }
    if depth == 0 {
        return Err(QuadError::NonConvergence { a, b, err, tol });
    }
    recurse(f, a, m, fa, &flm, fm, &left, tol * 0.5, depth - 1, acc)?;
    recurse(f, m, b, fm, &frm, fb, &right, tol * 0.5, depth - 1, acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_smooth_scalar() {
        let f = |t: f64| DMatrix::from_element(1, 1, (-t).exp());
        let v = integrate(&f, 0.0, 20.0, 1e-12).unwrap();
        assert!((v[(0, 0)] - (1.0 - (-20.0f64).exp())).abs() < 1e-10);
    }

    #[test]
    fn matrix_entries_independent() {
        let f = |t: f64| DMatrix::from_row_slice(1, 2, &[t, t * t]);
        let v = integrate(&f, 0.0, 1.0, 1e-12).unwrap();
        assert!((v[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((v[(0, 1)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn oscillatory_integrand() {
        let f = |t: f64| DMatrix::from_element(1, 1, (10.0 * t).sin());
        let v = integrate(&f, 0.0, 3.0, 1e-11).unwrap();
        let exact = (1.0 - (30.0f64).cos()) / 10.0;
        assert!((v[(0, 0)] - exact).abs() < 1e-9);
    }
}
