//! Explicit adaptive Runge-Kutta integration (Dormand-Prince 5(4)).
//!
//! Error control is component-wise, which keeps small solution
//! components relatively accurate next to large ones; the transition
//! cache relies on that to propagate contracting columns without losing
//! them under the expanding ones.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow integrating over [{from}, {to}] (reached t = {at})")]
    StepUnderflow { from: f64, to: f64, at: f64 },
    #[error("non-finite state while integrating over [{from}, {to}] (at t = {at})")]
    NonFinite { from: f64, to: f64, at: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct OdeSettings {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for OdeSettings {
    fn default() -> Self {
        OdeSettings {
            rtol: 1e-10,
            atol: 1e-12,
            max_step: f64::INFINITY,
            max_steps: 1_000_000,
        }
    }
}

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// 4th-order weights for the embedded error estimate.
const E1: f64 = 5179.0 / 57600.0;
const E3: f64 = 7571.0 / 16695.0;
const E4: f64 = 393.0 / 640.0;
const E5: f64 = -92097.0 / 339200.0;
const E6: f64 = 187.0 / 2100.0;
const E7: f64 = 1.0 / 40.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

/// Integrate `y' = f(t, y)` from `t0` to `t1` (either direction).
pub fn integrate<F>(f: &F, t0: f64, t1: f64, y0: &DVector<f64>, s: &OdeSettings) -> Result<DVector<f64>, OdeError>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64> + ?Sized,
{
    if t0 == t1 {
        return Ok(y0.clone());
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut y = y0.clone();
    let mut k1 = f(t, &y);

    // initial step from the scale of y and y'
    let scale0 = y.amax().max(1.0);
    let d0 = k1.amax() / scale0;
    let mut h = if d0 > 1e-10 { 0.01 / d0 } else { 1e-3 };
    h = h.min(span).min(s.max_step) * dir;

    let hmin = span * 1e-14;
    for _ in 0..s.max_steps {
        // done, or the remainder is below time resolution
        if (t - t1) * dir >= 0.0
            || (t1 - t).abs() <= 8.0 * f64::EPSILON * t.abs().max(t1.abs()).max(1.0)
        {
            return Ok(y);
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        if h.abs() < hmin {
            return Err(OdeError::StepUnderflow {
                from: t0,
                to: t1,
                at: t,
            });
        }

        let k2 = f(t + C2 * h, &(&y + &k1 * (A21 * h)));
        let k3 = f(t + C3 * h, &(&y + &k1 * (A31 * h) + &k2 * (A32 * h)));
        let k4 = f(
            t + C4 * h,
            &(&y + &k1 * (A41 * h) + &k2 * (A42 * h) + &k3 * (A43 * h)),
        );
        let k5 = f(
            t + C5 * h,
            &(&y + &k1 * (A51 * h) + &k2 * (A52 * h) + &k3 * (A53 * h) + &k4 * (A54 * h)),
        );
        let k6 = f(
            t + h,
            &(&y + &k1 * (A61 * h) + &k2 * (A62 * h) + &k3 * (A63 * h) + &k4 * (A64 * h) + &k5 * (A65 * h)),
        );
        let y5 = &y + &k1 * (B1 * h) + &k3 * (B3 * h) + &k4 * (B4 * h) + &k5 * (B5 * h) + &k6 * (B6 * h);
        let k7 = f(t + h, &y5);
        let y4 = &y
            + &k1 * (E1 * h)
            + &k3 * (E3 * h)
            + &k4 * (E4 * h)
            + &k5 * (E5 * h)
            + &k6 * (E6 * h)
            + &k7 * (E7 * h);

        // component-wise scaled error norm
        let mut err: f64 = 0.0;
        for i in 0..y.len() {
            let sc = s.atol + s.rtol * y[i].abs().max(y5[i].abs());
            let e = y5[i] - y4[i];
            if sc == 0.0 {
                if e != 0.0 {
                    err = f64::INFINITY;
                }
                continue;
            }
            let q = e / sc;
            err += q * q;
        }
        err = (err / y.len() as f64).sqrt();

        if !err.is_finite() {
            return Err(OdeError::NonFinite {
                from: t0,
                to: t1,
                at: t,
            });
        }

        if err <= 1.0 {
            t += h;
            y = y5;
            k1 = k7; // FSAL
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h = (h * factor).clamp(-s.max_step, s.max_step);
        if h == 0.0 {
            h = hmin * dir;
        }
    }
    Err(OdeError::StepUnderflow {
        from: t0,
        to: t1,
        at: t,
    })
}

/// Integrate and record the state at each point of a sorted grid
/// (ascending if `t1 > t0`, descending otherwise). The first grid entry
/// must equal `t0`.
pub fn integrate_path<F>(
    f: &F,
    grid: &[f64],
    y0: &DVector<f64>,
    s: &OdeSettings,
) -> Result<Vec<DVector<f64>>, OdeError>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64> + ?Sized,
{
    let mut out = Vec::with_capacity(grid.len());
    let mut y = y0.clone();
    out.push(y.clone());
    for w in grid.windows(2) {
        y = integrate(f, w[0], w[1], &y, s)?;
        out.push(y.clone());
    }
    Ok(out)
}

/// Integrate the matrix equation `M' = A(t) M` (or any matrix-valued
/// right-hand side) by flattening columns.
pub fn integrate_matrix<F>(
    f: &F,
    t0: f64,
    t1: f64,
    m0: &DMatrix<f64>,
    s: &OdeSettings,
) -> Result<DMatrix<f64>, OdeError>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64> + ?Sized,
{
    let (rows, cols) = m0.shape();
    let y0 = DVector::from_column_slice(m0.as_slice());
    let wrapped = |t: f64, y: &DVector<f64>| {
        let m = DMatrix::from_column_slice(rows, cols, y.as_slice());
        let dm = f(t, &m);
        DVector::from_column_slice(dm.as_slice())
    };
    let y = integrate(&wrapped, t0, t1, &y0, s)?;
    Ok(DMatrix::from_column_slice(rows, cols, y.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_exponential_decay() {
        let f = |_t: f64, y: &DVector<f64>| -y.clone();
        let y0 = DVector::from_element(1, 1.0);
        let y = integrate(&f, 0.0, 1.0, &y0, &OdeSettings::default()).unwrap();
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn backward_integration() {
        let f = |_t: f64, y: &DVector<f64>| y.clone();
        let y0 = DVector::from_element(1, 1.0);
        let y = integrate(&f, 1.0, 0.0, &y0, &OdeSettings::default()).unwrap();
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn matrix_rotation() {
        // M' = J M with J = [[0,-1],[1,0]] gives a rotation matrix at t.
        let j = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let f = move |_t: f64, m: &DMatrix<f64>| &j * m;
        let m = integrate_matrix(
            &f,
            0.0,
            std::f64::consts::FRAC_PI_2,
            &DMatrix::identity(2, 2),
            &OdeSettings::default(),
        )
        .unwrap();
        assert!((m[(0, 0)]).abs() < 1e-9);
        assert!((m[(1, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn path_matches_single_shot() {
        let f = |t: f64, y: &DVector<f64>| DVector::from_element(1, t * y[0]);
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let y0 = DVector::from_element(1, 2.0);
        let path = integrate_path(&f, &grid, &y0, &OdeSettings::default()).unwrap();
        let single = integrate(&f, 0.0, 1.0, &y0, &OdeSettings::default()).unwrap();
        assert!((path.last().unwrap()[0] - single[0]).abs() < 1e-9);
        assert!((single[0] - 2.0 * (0.5f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn stiff_blowup_reports_interval() {
        // y' = y^2 from y(0)=1 blows up at t=1
        let f = |_t: f64, y: &DVector<f64>| DVector::from_element(1, y[0] * y[0]);
        let y0 = DVector::from_element(1, 1.0);
        let err = integrate(&f, 0.0, 2.0, &y0, &OdeSettings::default()).unwrap_err();
        match err {
            OdeError::StepUnderflow { from, to, at } | OdeError::NonFinite { from, to, at } => {
                assert_eq!((from, to), (0.0, 2.0));
                assert!(at > 0.9 && at < 1.1);
            }
        }
    }
}
