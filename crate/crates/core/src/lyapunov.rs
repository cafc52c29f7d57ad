//! Lyapunov functions for the linear part: the sup-based strict
//! construction, the quadratic operator built from two improper
//! integrals, their property checks, and recovery of dichotomy
//! constants from Lyapunov data.

use crate::growth::GrowthRate;
use crate::linflow::{
    spectral_norm, CertificateError, DichotomyCertificate, LinflowError, LocalGrowthBound,
    TransitionProvider,
};
use crate::quad::{self, QuadError};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LyapunovError {
    #[error("eta must satisfy 0 < eta < min(-lambda_s, lambda_u) = {bound}, got {eta}")]
    EtaOutOfRange { eta: f64, bound: f64 },
    #[error(transparent)]
    Linear(#[from] LinflowError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error("non-finite value in {what} at t={t}")]
    NonFinite { what: &'static str, t: f64 },
    #[error("sup refinement did not settle below {tol:e} within {max_points} points")]
    SupNotSettled { tol: f64, max_points: usize },
}

/// A sampled worst case: the margin and where it was attained.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Margin {
    pub value: f64,
    pub tau: f64,
    pub t: f64,
}

impl Margin {
    fn none() -> Self {
        Margin {
            value: f64::INFINITY,
            tau: f64::NAN,
            t: f64::NAN,
        }
    }

    fn update(&mut self, value: f64, tau: f64, t: f64) {
        if value < self.value {
            *self = Margin { value, tau, t };
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StrictSettings {
    pub t_sup: f64,
    pub refine_tol: f64,
}

impl Default for StrictSettings {
    fn default() -> Self {
        StrictSettings {
            t_sup: 30.0,
            refine_tol: 1e-8,
        }
    }
}

/// Strict Lyapunov function from weighted running suprema of the
/// projected flow.
pub struct StrictLyapunov<'a> {
    prov: &'a dyn TransitionProvider,
    rate: &'a GrowthRate,
    pub cert: DichotomyCertificate,
    settings: StrictSettings,
}

impl<'a> StrictLyapunov<'a> {
    pub fn new(
        prov: &'a dyn TransitionProvider,
        rate: &'a GrowthRate,
        cert: DichotomyCertificate,
        settings: StrictSettings,
    ) -> Result<Self, LyapunovError> {
        cert.validate()?;
        Ok(StrictLyapunov {
            prov,
            rate,
            cert,
            settings,
        })
    }

    /// Constants the construction guarantees: growth envelope `C`, weight
    /// exponent `epsilon`, expansion exponent `alpha`, decay exponent `beta`.
    pub fn guaranteed_constants(&self) -> StrictnessConstants {
        StrictnessConstants {
            c: 2.0 * self.cert.d,
            epsilon: self.cert.nu.max(self.cert.omega),
            alpha: -self.cert.lambda_u,
            beta: self.cert.lambda_s,
        }
    }

    fn sup_refined(
        &self,
        lo: f64,
        hi: f64,
        mut eval: impl FnMut(f64) -> Result<f64, LyapunovError>,
    ) -> Result<f64, LyapunovError> {
        let mut n = 64usize;
        let mut best = f64::NEG_INFINITY;
        for i in 0..=n {
            let k = lo + (hi - lo) * i as f64 / n as f64;
            best = best.max(eval(k)?);
        }
        loop {
            // only the new midpoints need evaluating
            let mut refined = best;
            for i in 0..n {
                let k = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
                refined = refined.max(eval(k)?);
            }
            if (refined - best).abs() < self.settings.refine_tol {
                return Ok(refined);
            }
            best = refined;
            n *= 2;
            if n > 4096 {
                return Err(LyapunovError::SupNotSettled {
                    tol: self.settings.refine_tol,
                    max_points: n,
                });
            }
        }
    }

    /// `sup over [t, t+T] of |Psi(k,t) x_s| (mu(k)/mu(t))^(-lambda_s)`.
    pub fn v_stable(&self, t: f64, x_s: &DVector<f64>) -> Result<f64, LyapunovError> {
        if x_s.norm() == 0.0 {
            return Ok(0.0);
        }
        let (_, hi) = self.prov.window();
        let top = (t + self.settings.t_sup).min(hi);
        let lmu_t = self.rate.log_eval(t);
        self.sup_refined(t, top, |k| {
            let m = self.prov.stable_part(k, t)?;
            let w = (-self.cert.lambda_s * (self.rate.log_eval(k) - lmu_t)).exp();
            Ok((m * x_s).norm() * w)
        })
    }

    /// `sup over [t-T, t] of |Psi(k,t) x_u| (mu(k)/mu(t))^(-lambda_u)`.
    pub fn v_unstable(&self, t: f64, x_u: &DVector<f64>) -> Result<f64, LyapunovError> {
        if x_u.norm() == 0.0 {
            return Ok(0.0);
        }
        let (lo, _) = self.prov.window();
        let bottom = (t - self.settings.t_sup).max(lo);
        let lmu_t = self.rate.log_eval(t);
        self.sup_refined(bottom, t, |k| {
            let m = self.prov.unstable_part(k, t)?;
            let w = (-self.cert.lambda_u * (self.rate.log_eval(k) - lmu_t)).exp();
            Ok((m * x_u).norm() * w)
        })
    }

    /// `V(t,x) = -V_s(t, pi x) + V_u(t, (id-pi) x)`.
    pub fn v(&self, t: f64, x: &DVector<f64>) -> Result<f64, LyapunovError> {
        let p = self.prov.projection(t)?;
        let x_s = &p * x;
        let x_u = x - &x_s;
        Ok(-self.v_stable(t, &x_s)? + self.v_unstable(t, &x_u)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadraticSettings {
    pub t_cut: f64,
    pub quad_tol: f64,
    pub cache_step: f64,
}

impl Default for QuadraticSettings {
    fn default() -> Self {
        QuadraticSettings {
            t_cut: 30.0,
            quad_tol: 1e-8,
            cache_step: 0.05,
        }
    }
}

/// Quadratic Lyapunov operator: difference of a forward integral over
/// contracted directions and a backward integral over expanded ones,
/// truncated where the certified envelope makes the tail negligible.
/// Values are cached on a lattice; between lattice points a cubic
/// interpolant serves fast evaluation and `s_exact` re-integrates.
pub struct QuadraticLyapunov<'a> {
    prov: &'a dyn TransitionProvider,
    rate: &'a GrowthRate,
    pub cert: DichotomyCertificate,
    pub eta: f64,
    pub settings: QuadraticSettings,
    cache: Mutex<BTreeMap<i64, DMatrix<f64>>>,
}

impl<'a> QuadraticLyapunov<'a> {
    pub fn build(
        prov: &'a dyn TransitionProvider,
        rate: &'a GrowthRate,
        cert: DichotomyCertificate,
        eta: f64,
        settings: QuadraticSettings,
    ) -> Result<Self, LyapunovError> {
        cert.validate()?;
        let bound = (-cert.lambda_s).min(cert.lambda_u);
        if !(eta > 0.0 && eta < bound) {
            return Err(LyapunovError::EtaOutOfRange { eta, bound });
        }
        Ok(QuadraticLyapunov {
            prov,
            rate,
            cert,
            eta,
            settings,
            cache: Mutex::new(BTreeMap::new()),
        })
    }

    /// Truncation horizon for the forward tail at time `t`: the smallest
    /// integer horizon whose certified tail bound drops below `tol`,
    /// clamped to the working window.
    fn forward_horizon(&self, t: f64, tol: f64) -> Result<f64, LyapunovError> {
        let (_, hi) = self.prov.window();
        let max_h = (hi - t).min(self.settings.t_cut);
        let lmu_t = self.rate.log_eval(t);
        let prefactor = 2.0 * self.cert.d.ln() + 2.0 * t.signum() * self.cert.nu * lmu_t
            - (2.0 * self.eta).ln();
        let mut h = 1.0;
        loop {
            let tail_log = prefactor - 2.0 * self.eta * (self.rate.log_eval(t + h) - lmu_t);
            if tail_log < tol.ln() {
                return Ok(h);
            }
            if h >= max_h {
                return Err(LyapunovError::Quadrature(QuadError::TailBound {
                    cap: max_h,
                    tail: tail_log.exp(),
                    tol,
                }));
            }
            h = (h + 1.0).min(max_h);
        }
    }

    fn backward_horizon(&self, t: f64, tol: f64) -> Result<f64, LyapunovError> {
        let (lo, _) = self.prov.window();
        let max_h = (t - lo).min(self.settings.t_cut);
        let lmu_t = self.rate.log_eval(t);
        let prefactor = 2.0 * self.cert.d.ln() + 2.0 * t.signum() * self.cert.omega * lmu_t
            - (2.0 * self.eta).ln();
        let mut h = 1.0;
        loop {
            let tail_log = prefactor + 2.0 * self.eta * (self.rate.log_eval(t - h) - lmu_t);
            if tail_log < tol.ln() {
                return Ok(h);
            }
            if h >= max_h {
                return Err(LyapunovError::Quadrature(QuadError::TailBound {
                    cap: max_h,
                    tail: tail_log.exp(),
                    tol,
                }));
            }
            h = (h + 1.0).min(max_h);
        }
    }

    /// Direct quadrature of both integrals at tolerance `tol`.
    pub fn s_exact_tol(&self, t: f64, tol: f64) -> Result<DMatrix<f64>, LyapunovError> {
        let n = self.prov.dim();
        let lmu_t = self.rate.log_eval(t);
        let nan = DMatrix::from_element(n, n, f64::NAN);

        let fwd_h = self.forward_horizon(t, tol * 0.5)?;
        let exp_s = -2.0 * (self.cert.lambda_s + self.eta);
        let fwd_f = |k: f64| -> DMatrix<f64> {
            match self.prov.stable_part(k, t) {
                Ok(m) => {
                    let w = (exp_s * (self.rate.log_eval(k) - lmu_t) + self.rate.deriv(k).ln()
                        - self.rate.log_eval(k))
                    .exp();
                    m.transpose() * m * w
                }
                Err(_) => nan.clone(),
            }
        };
        let fwd = quad::integrate(&fwd_f, t, t + fwd_h, tol * 0.25)?;

        let bwd_h = self.backward_horizon(t, tol * 0.5)?;
        let exp_u = 2.0 * (self.cert.lambda_u - self.eta);
        let bwd_f = |k: f64| -> DMatrix<f64> {
            match self.prov.unstable_part(k, t) {
                Ok(m) => {
                    let w = (exp_u * (lmu_t - self.rate.log_eval(k)) + self.rate.deriv(k).ln()
                        - self.rate.log_eval(k))
                    .exp();
                    m.transpose() * m * w
                }
                Err(_) => nan.clone(),
            }
        };
        let bwd = quad::integrate(&bwd_f, t - bwd_h, t, tol * 0.25)?;

        let s = fwd - bwd;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(LyapunovError::NonFinite { what: "S(t)", t });
        }
        Ok((&s + s.transpose()) * 0.5)
    }

    pub fn s_exact(&self, t: f64) -> Result<DMatrix<f64>, LyapunovError> {
        self.s_exact_tol(t, self.settings.quad_tol)
    }

    fn s_at_node(&self, k: i64) -> Result<DMatrix<f64>, LyapunovError> {
        if let Some(m) = self.cache.lock().unwrap().get(&k) {
            return Ok(m.clone());
        }
        let m = self.s_exact(k as f64 * self.settings.cache_step)?;
        self.cache.lock().unwrap().insert(k, m.clone());
        Ok(m)
    }

    /// Cached cubic interpolation of `S(t)`.
    pub fn s(&self, t: f64) -> Result<DMatrix<f64>, LyapunovError> {
        let step = self.settings.cache_step;
        let k = (t / step).floor() as i64;
        let u = t / step - k as f64;
        if u.abs() < 1e-12 {
            return self.s_at_node(k);
        }
        let p0 = self.s_at_node(k - 1)?;
        let p1 = self.s_at_node(k)?;
        let p2 = self.s_at_node(k + 1)?;
        let p3 = self.s_at_node(k + 2)?;
        // Catmull-Rom
        let a = &p1 * 2.0;
        let b = &p2 - &p0;
        let c = &p0 * 2.0 - &p1 * 5.0 + &p2 * 4.0 - &p3;
        let d = -&p0 + &p1 * 3.0 - &p2 * 3.0 + &p3;
        Ok((a + &b * u + &c * (u * u) + &d * (u * u * u)) * 0.5)
    }

    /// `U(t,x) = <S(t)x, x>` via the cached interpolant.
    pub fn u(&self, t: f64, x: &DVector<f64>) -> Result<f64, LyapunovError> {
        Ok((self.s(t)? * x).dot(x))
    }

    /// `(U, V)` with `V = -sign(U) sqrt(|U|)`.
    pub fn u_v(&self, t: f64, x: &DVector<f64>) -> Result<(f64, f64), LyapunovError> {
        let u = self.u(t, x)?;
        Ok((u, -u.signum() * u.abs().sqrt()))
    }

    pub fn v(&self, t: f64, x: &DVector<f64>) -> Result<f64, LyapunovError> {
        Ok(self.u_v(t, x)?.1)
    }

    pub fn u_v_exact(&self, t: f64, x: &DVector<f64>) -> Result<(f64, f64), LyapunovError> {
        let u = (self.s_exact(t)? * x).dot(x);
        Ok((u, -u.signum() * u.abs().sqrt()))
    }

    /// Certified operator-norm envelope `(D^2/eta) max(mu^snu, mu^somega)`.
    pub fn norm_envelope(&self, t: f64) -> f64 {
        let lmu = self.rate.log_eval(t);
        let w = (t.signum() * self.cert.nu * lmu).max(t.signum() * self.cert.omega * lmu);
        (2.0 * self.cert.d.ln() - self.eta.ln() + w).exp()
    }

    /// Growth-envelope constants implied by the construction.
    pub fn guaranteed_constants(&self) -> StrictnessConstants {
        StrictnessConstants {
            c: self.cert.d / self.eta.sqrt(),
            epsilon: self.cert.nu.max(self.cert.omega) / 2.0,
            alpha: -(self.cert.lambda_u - self.eta),
            beta: self.cert.lambda_s + self.eta,
        }
    }
}

/// Constants `(C, epsilon, alpha, beta)` of a strict Lyapunov estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StrictnessConstants {
    pub c: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StrictnessReport {
    /// Condition on the expanded cone: growth at least `(mu(tau)/mu(t))^alpha`.
    pub unstable_growth: Margin,
    /// Condition on the contracted cone: decay at least `(mu(t)/mu(tau))^beta`.
    pub stable_decay: Margin,
    /// Norm lower bound on both cones.
    pub lower_bound: Margin,
    /// Growth envelope `|V| <= C mu^(sign eps) |x|`.
    pub upper_bound: Margin,
    pub tol: f64,
    pub samples: usize,
}

impl StrictnessReport {
    pub fn passed(&self) -> bool {
        [
            &self.unstable_growth,
            &self.stable_decay,
            &self.lower_bound,
            &self.upper_bound,
        ]
        .iter()
        .all(|m| m.value >= -self.tol)
    }
}

/// Check the three strictness conditions and the growth envelope for an
/// arbitrary Lyapunov evaluator over sampled base times, offsets and
/// state vectors. Cones are realized as ranges of the projections.
pub fn check_strictness(
    v: &dyn Fn(f64, &DVector<f64>) -> Result<f64, LyapunovError>,
    prov: &dyn TransitionProvider,
    rate: &GrowthRate,
    k: &StrictnessConstants,
    taus: &[f64],
    offsets: &[f64],
    samples: &[DVector<f64>],
    tol: f64,
) -> Result<StrictnessReport, LyapunovError> {
    let mut report = StrictnessReport {
        unstable_growth: Margin::none(),
        stable_decay: Margin::none(),
        lower_bound: Margin::none(),
        upper_bound: Margin::none(),
        tol,
        samples: 0,
    };
    for &tau in taus {
        let p = prov.projection(tau)?;
        let lmu = rate.log_eval(tau);
        for r in samples {
            report.samples += 1;
            let x_s = &p * r;
            let x_u = r - &x_s;
            let v_r = v(tau, r)?;
            let upper = k.c * (tau.signum() * k.epsilon * lmu).exp() * r.norm();
            report.upper_bound.update(upper - v_r.abs(), tau, tau);
            let lower_scale = (-tau.signum() * k.epsilon * lmu).exp() / k.c;
            for x in [&x_s, &x_u] {
                if x.norm() < 1e-12 {
                    continue;
                }
                let vx = v(tau, x)?;
                report.lower_bound.update(vx.abs() - lower_scale * x.norm(), tau, tau);
            }
            for &off in offsets {
                let t = tau + off.abs();
                if x_u.norm() >= 1e-12 {
                    let flowed = prov.unstable_part(t, tau)? * r;
                    let lhs = v(t, &flowed)?;
                    let rhs = rate.ratio_pow(tau, t, k.alpha) * v(tau, &x_u)?;
                    report.unstable_growth.update(lhs - rhs, tau, t);
                }
                if x_s.norm() >= 1e-12 {
                    let flowed = prov.stable_part(t, tau)? * r;
                    let lhs = v(t, &flowed)?.abs();
                    let rhs = rate.ratio_pow(t, tau, k.beta) * v(tau, &x_s)?.abs();
                    report.stable_decay.update(rhs - lhs, tau, t);
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityReport {
    /// Smallest increment of `V` between successive grid times.
    pub min_increment: f64,
    pub at: (f64, f64),
    pub tol: f64,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.min_increment >= -self.tol
    }
}

/// Non-decrease of `t -> V(t, Psi(t,tau) x)` along the linear flow.
pub fn check_monotonicity_linear(
    v: &dyn Fn(f64, &DVector<f64>) -> Result<f64, LyapunovError>,
    prov: &dyn TransitionProvider,
    tau: f64,
    x: &DVector<f64>,
    grid: &[f64],
    tol: f64,
) -> Result<MonotonicityReport, LyapunovError> {
    let mut report = MonotonicityReport {
        min_increment: f64::INFINITY,
        at: (f64::NAN, f64::NAN),
        tol,
    };
    let mut prev: Option<(f64, f64)> = None;
    for &t in grid {
        let flowed = prov.stable_part(t, tau)? * x + prov.unstable_part(t, tau)? * x;
        let value = v(t, &flowed)?;
        if let Some((tp, vp)) = prev {
            let inc = value - vp;
            if inc < report.min_increment {
                report.min_increment = inc;
                report.at = (tp, t);
            }
        }
        prev = Some((t, value));
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeIdentityReport {
    pub worst_rel_err: f64,
    pub at: f64,
    pub rtol: f64,
}

impl DerivativeIdentityReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.rtol
    }
}

/// On contracted directions the quadratic value obeys the exact identity
/// `dU/dt = (mu'/mu)(-|x_s|^2 + 2(lambda_s + eta) U)` along the linear
/// flow; compare it with a central finite difference.
pub fn check_stable_derivative_identity(
    q: &QuadraticLyapunov,
    tau: f64,
    x_s: &DVector<f64>,
    grid: &[f64],
    rtol: f64,
) -> Result<DerivativeIdentityReport, LyapunovError> {
    let h = 1e-4;
    // the finite difference divides by 2h, so the quadrature must be
    // well below quad_tol for the quotient to keep digits
    let tight = q.settings.quad_tol * 1e-4;
    let mut worst = DerivativeIdentityReport {
        worst_rel_err: 0.0,
        at: f64::NAN,
        rtol,
    };
    for &t in grid {
        let xt = q.prov.stable_part(t, tau)? * x_s;
        let xp = q.prov.stable_part(t + h, tau)? * x_s;
        let xm = q.prov.stable_part(t - h, tau)? * x_s;
        let up = (q.s_exact_tol(t + h, tight)? * &xp).dot(&xp);
        let um = (q.s_exact_tol(t - h, tight)? * &xm).dot(&xm);
        let u = (q.s_exact_tol(t, tight)? * &xt).dot(&xt);
        let fd = (up - um) / (2.0 * h);
        let rhs = q.rate.deriv(t) / q.rate.eval(t)
            * (-xt.norm_squared() + 2.0 * (q.cert.lambda_s + q.eta) * u);
        let rel = (fd - rhs).abs() / rhs.abs().max(fd.abs()).max(1e-10);
        if rel > worst.worst_rel_err {
            worst.worst_rel_err = rel;
            worst.at = t;
        }
    }
    Ok(worst)
}

/// Per-time cone constants of the sup-based construction.
pub fn strict_subspace_constants(
    rate: &GrowthRate,
    cert: &DichotomyCertificate,
    tau: f64,
) -> (f64, f64) {
    let back = rate.ratio_pow(tau - 1.0, tau, 1.0);
    let fwd = rate.ratio_pow(tau + 1.0, tau, 1.0);
    let c_u = (back.powf(cert.lambda_s) - 1.0).min(1.0 - back.powf(cert.lambda_u));
    let c_s = (1.0 - fwd.powf(cert.lambda_s)).min(fwd.powf(cert.lambda_u) - 1.0);
    (c_s, c_u)
}

/// Per-time cone constants of the quadratic construction under a local
/// growth bound.
pub fn quadratic_subspace_constants(
    rate: &GrowthRate,
    cert: &DichotomyCertificate,
    eta: f64,
    local: &LocalGrowthBound,
    tau: f64,
) -> (f64, f64) {
    let d2 = local.d_tilde * local.d_tilde;
    let ls = 2.0 * (cert.lambda_s + eta);
    let lu = 2.0 * (cert.lambda_u - eta);
    let back = rate.ratio_pow(tau - 1.0, tau, 1.0);
    let fwd = rate.ratio_pow(tau + 1.0, tau, 1.0);
    let c_s = ((back.powf(ls) - 1.0) * (rate.log_eval(tau + local.c) - rate.log_eval(tau)))
        .min((1.0 - back.powf(lu)) * (rate.log_eval(tau - 1.0) - rate.log_eval(tau - 1.0 - local.c)))
        / d2;
    let c_u = ((1.0 - fwd.powf(ls)) * (rate.log_eval(tau + 1.0 + local.c) - rate.log_eval(tau + 1.0)))
        .min((fwd.powf(lu) - 1.0) * (rate.log_eval(tau) - rate.log_eval(tau - local.c)))
        / d2;
    (c_s, c_u)
}

#[derive(Debug, Clone, Serialize)]
pub struct SPropertyReport {
    /// Log-margin of the operator-norm envelope.
    pub norm_envelope: Margin,
    /// Min-eigenvalue margin of the dissipation inequality with the
    /// published constants (reported, not gated: it fails already on the
    /// constant-coefficient reference).
    pub dissipation_printed: Margin,
    /// Min-eigenvalue margin of the dissipation inequality with the
    /// constants the integral construction actually yields; this is the
    /// gated form.
    pub dissipation_derived: Margin,
    /// Cone lower bounds (linear margins), present when a local growth
    /// bound is supplied.
    pub cone_stable: Option<Margin>,
    pub cone_unstable: Option<Margin>,
    /// `U` non-increase along the linear flow.
    pub u_monotone: Margin,
    pub psd_tol: f64,
}

impl SPropertyReport {
    /// Passing ignores the printed variant on purpose.
    pub fn passed(&self) -> bool {
        self.norm_envelope.value >= -self.psd_tol
            && self.dissipation_derived.value >= -self.psd_tol
            && self.cone_stable.as_ref().map(|m| m.value >= -self.psd_tol).unwrap_or(true)
            && self.cone_unstable.as_ref().map(|m| m.value >= -self.psd_tol).unwrap_or(true)
            && self.u_monotone.value >= -self.psd_tol
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, b| a.min(*b))
}

/// Property suite for the quadratic operator at sampled times.
pub fn check_s_properties(
    q: &QuadraticLyapunov,
    local: Option<&LocalGrowthBound>,
    ts: &[f64],
    samples: &[DVector<f64>],
    psd_tol: f64,
) -> Result<SPropertyReport, LyapunovError> {
    let mut report = SPropertyReport {
        norm_envelope: Margin::none(),
        dissipation_printed: Margin::none(),
        dissipation_derived: Margin::none(),
        cone_stable: local.map(|_| Margin::none()),
        cone_unstable: local.map(|_| Margin::none()),
        u_monotone: Margin::none(),
        psd_tol,
    };
    let h = 1e-4;
    let tight = q.settings.quad_tol * 1e-4;
    for &t in ts {
        let s = q.s_exact(t)?;
        report
            .norm_envelope
            .update(q.norm_envelope(t).ln() - spectral_norm(&s).ln(), t, t);

        let sp = (q.s_exact_tol(t + h, tight)? - q.s_exact_tol(t - h, tight)?) / (2.0 * h);
        let a = q.prov.generator(t)?;
        let lhs = &sp + a.transpose() * &s + &s * &a;
        let id = DMatrix::identity(q.prov.dim(), q.prov.dim());
        let mu_ratio = q.rate.deriv(t) / q.rate.eval(t);
        let rhs_printed = (&id + &s * q.cert.lambda_u) * (-2.0 * mu_ratio);
        let rhs_derived = &id * (-mu_ratio) + &s * (2.0 * (q.cert.lambda_u - q.eta) * mu_ratio);
        report
            .dissipation_printed
            .update(min_eigenvalue(&(rhs_printed - &lhs)), t, t);
        report
            .dissipation_derived
            .update(min_eigenvalue(&(rhs_derived - &lhs)), t, t);

        if let Some(lb) = local {
            let (c_s, c_u) = quadratic_subspace_constants(q.rate, &q.cert, q.eta, lb, t);
            let floor = |c: f64| c / 4.0 * q.rate.pow(t.abs(), -2.0 * lb.lambda_tilde);
            let p = q.prov.projection(t)?;
            for r in samples {
                let x_s = &p * r;
                if x_s.norm() > 1e-9 {
                    let val = (&s * &x_s).dot(&x_s) / x_s.norm_squared();
                    report.cone_stable.as_mut().unwrap().update(val - floor(c_s), t, t);
                }
                let x_u = r - &x_s;
                if x_u.norm() > 1e-9 {
                    let val = -(&s * &x_u).dot(&x_u) / x_u.norm_squared();
                    report.cone_unstable.as_mut().unwrap().update(val - floor(c_u), t, t);
                }
            }
        }
    }
    // U monotone along the linear flow between successive sample times
    for w in ts.windows(2) {
        let (tau, t) = (w[0], w[1]);
        if t <= tau {
            continue;
        }
        let s_tau = q.s_exact(tau)?;
        let s_t = q.s_exact(t)?;
        for r in samples {
            let flowed = q.prov.stable_part(t, tau)? * r + q.prov.unstable_part(t, tau)? * r;
            let u_tau = (&s_tau * r).dot(r);
            let u_t = (&s_t * &flowed).dot(&flowed);
            report.u_monotone.update(u_tau - u_t, tau, t);
        }
    }
    Ok(report)
}

/// Dichotomy constants recovered from strict Lyapunov data.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveredCertificate {
    pub cert: DichotomyCertificate,
    pub projection_bound: f64,
    pub c_s: f64,
    pub c_u: f64,
}

/// Assemble a sufficient (not tight) dichotomy certificate from
/// strictness constants and cone constants. The sign-conservative
/// variant of the exponents is used: the nonuniform weight is charged
/// against both rates.
pub fn recover_dichotomy(
    k: &StrictnessConstants,
    lambda_tilde: f64,
    c_s: f64,
    c_u: f64,
) -> Result<RecoveredCertificate, CertificateError> {
    let b = std::f64::consts::SQRT_2 / (c_s / 4.0).max(c_u / 4.0);
    let d = (std::f64::consts::SQRT_2 * b * k.c * k.c).max(1.0);
    let cert = DichotomyCertificate {
        d,
        lambda_s: k.beta + k.epsilon,
        lambda_u: -k.alpha - k.epsilon,
        nu: 2.0 * (k.epsilon + lambda_tilde),
        omega: 2.0 * (k.epsilon + lambda_tilde),
    };
    cert.validate()?;
    Ok(RecoveredCertificate {
        cert,
        projection_bound: b,
        c_s,
        c_u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linflow::{
        verify_dichotomy, LinearSystem, TransitionEvaluator, TransitionSettings,
    };

    fn diag_ev() -> TransitionEvaluator {
        TransitionEvaluator::new(
            LinearSystem::diag_hyperbolic(),
            TransitionSettings {
                window: (-42.0, 42.0),
                ..TransitionSettings::default()
            },
        )
        .unwrap()
    }

    fn diag_cert() -> DichotomyCertificate {
        DichotomyCertificate::uniform(1.0, -1.0, 1.0)
    }

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_column_slice(&[a, b])
    }

    #[test]
    fn strict_v_diagonal_closed_form() {
        let ev = diag_ev();
        let rate = GrowthRate::exponential();
        let sl = StrictLyapunov::new(&ev, &rate, diag_cert(), StrictSettings::default()).unwrap();
        // weighted norms are constant, so V(t,x) = -|x1| + |x2|
        assert!((sl.v(0.0, &vec2(2.0, 3.0)).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(sl.v(0.0, &vec2(0.0, 0.0)).unwrap(), 0.0);
        assert!((sl.v(0.0, &vec2(1.0, 0.0)).unwrap() + 1.0).abs() < 1e-9);
        assert!((sl.v(2.5, &vec2(-1.0, 0.5)).unwrap() - (-1.0 + 0.5)).abs() < 1e-8);
    }

    #[test]
    fn quadratic_s_diagonal_closed_form() {
        let ev = diag_ev();
        let rate = GrowthRate::exponential();
        let q = QuadraticLyapunov::build(&ev, &rate, diag_cert(), 0.5, QuadraticSettings::default())
            .unwrap();
        for t in [-5.0, 0.0, 5.0] {
            let s = q.s_exact(t).unwrap();
            assert!((s[(0, 0)] - 1.0).abs() < 1e-6, "S00 at {t}: {}", s[(0, 0)]);
            assert!((s[(1, 1)] + 1.0).abs() < 1e-6, "S11 at {t}: {}", s[(1, 1)]);
            assert!(s[(0, 1)].abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_s_scalar_stable() {
        let sys = LinearSystem::from_fn(
            1,
            |_| DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let ev = TransitionEvaluator::new(
            sys,
            TransitionSettings {
                window: (-40.0, 40.0),
                ..TransitionSettings::default()
            },
        )
        .unwrap();
        let rate = GrowthRate::exponential();
        // scalar stable: no unstable directions, lambda_u is formal
        let q = QuadraticLyapunov::build(&ev, &rate, diag_cert(), 0.5, QuadraticSettings::default())
            .unwrap();
        let s = q.s_exact(0.0).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn eta_out_of_range_rejected() {
        let ev = diag_ev();
        let rate = GrowthRate::exponential();
        let res =
            QuadraticLyapunov::build(&ev, &rate, diag_cert(), 1.5, QuadraticSettings::default());
        assert!(matches!(res, Err(LyapunovError::EtaOutOfRange { .. })));
    }

    #[test]
    fn u_v_values() {
        let ev = diag_ev();
        let rate = GrowthRate::exponential();
        let q = QuadraticLyapunov::build(&ev, &rate, diag_cert(), 0.5, QuadraticSettings::default())
            .unwrap();
        let (u, v) = q.u_v_exact(0.0, &vec2(2.0, 1.0)).unwrap();
        assert!((u - 3.0).abs() < 1e-6);
        assert!((v + 3.0f64.sqrt()).abs() < 1e-6);
        let (u0, v0) = q.u_v_exact(0.0, &vec2(0.0, 0.0)).unwrap();
        assert_eq!((u0, v0), (0.0, 0.0));
        let (uc, vc) = q.u_v_exact(0.0, &vec2(1.0, 1.0)).unwrap();
        assert!(uc.abs() < 1e-6 && vc.abs() < 1e-3);
    }

    #[test]
    fn interpolated_s_matches_exact() {
        let ev = diag_ev();
        let rate = GrowthRate::exponential();
        let q = QuadraticLyapunov::build(&ev, &rate, diag_cert(), 0.5, QuadraticSettings::default())
            .unwrap();
        for t in [0.013, -1.777, 2.3001] {
            let diff = q.s(t).unwrap() - q.s_exact(t).unwrap();
            assert!(spectral_norm(&diff) < 1e-7, "at {t}: {}", spectral_norm(&diff));
        }
    }

    #[test]
    fn monotonicity_along_axes() {
        let ev = diag_ev();
        let rate = GrowthRate::exponential();
        let sl = StrictLyapunov::new(&ev, &rate, diag_cert(), StrictSettings::default()).unwrap();
        let v = |t: f64, x: &DVector<f64>| sl.v(t, x);
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.25).collect();
        // stable axis: V(t) = -e^{-t} |x1| strictly increasing
        let rep = check_monotonicity_linear(&v, &ev, 0.0, &vec2(1.5, 0.0), &grid, 1e-9).unwrap();
        assert!(rep.passed());
        assert!(rep.min_increment > 0.0);
        // unstable axis: V(t) = e^{t} |x2| increasing
        let rep = check_monotonicity_linear(&v, &ev, 0.0, &vec2(0.0, 0.7), &grid, 1e-9).unwrap();
        assert!(rep.passed());
    }

    #[test]
    fn zero_generator_with_fake_certificate() {
        // A = 0: flow is the identity; monotonicity is flat and the
        // strict decay condition must fail.
        let sys = LinearSystem::from_fn(
            2,
            |_| DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        )
        .unwrap();
        let ev = TransitionEvaluator::new(
            sys,
            TransitionSettings {
                window: (-36.0, 36.0),
                ..TransitionSettings::default()
            },
        )
        .unwrap();
        let rate = GrowthRate::exponential();
        let sl = StrictLyapunov::new(&ev, &rate, diag_cert(), StrictSettings::default()).unwrap();
        let v = |t: f64, x: &DVector<f64>| sl.v(t, x);
        let grid: Vec<f64> = (0..=8).map(|i| i as f64 * 0.5).collect();
        let rep = check_monotonicity_linear(&v, &ev, 0.0, &vec2(1.0, 0.0), &grid, 1e-9).unwrap();
        assert!(rep.passed());
        assert!(rep.min_increment.abs() < 1e-7, "flat expected");

        let k = StrictnessConstants {
            c: 1.0,
            epsilon: 0.0,
            alpha: -1.0,
            beta: -1.0,
        };
        let rep = check_strictness(
            &v,
            &ev,
            &rate,
            &k,
            &[0.0],
            &[1.0],
            &[vec2(1.0, 0.3)],
            1e-8,
        )
        .unwrap();
        assert!(!rep.passed());
        assert!(rep.stable_decay.value < -0.1);
    }

    #[test]
    fn strictness_diagonal_reference() {
        let ev = diag_ev();
        let rate = GrowthRate::exponential();
        let sl = StrictLyapunov::new(&ev, &rate, diag_cert(), StrictSettings::default()).unwrap();
        let v = |t: f64, x: &DVector<f64>| sl.v(t, x);
        let k = StrictnessConstants {
            c: 1.0,
            epsilon: 0.0,
            alpha: -1.0,
            beta: -1.0,
        };
        let taus = [-2.0, 0.0, 1.5];
        let offs = [0.5, 1.0, 2.0];
        let samples = [vec2(1.0, 0.4), vec2(-0.3, 0.9), vec2(2.0, -1.0)];
        let rep = check_strictness(&v, &ev, &rate, &k, &taus, &offs, &samples, 1e-8).unwrap();
        assert!(
            rep.passed(),
            "margins: {:?} {:?} {:?} {:?}",
            rep.unstable_growth,
            rep.stable_decay,
            rep.lower_bound,
            rep.upper_bound
        );

        // overstated decay rate must fail
        let bad = StrictnessConstants { beta: -2.0, ..k };
        let rep = check_strictness(&v, &ev, &rate, &bad, &taus, &offs, &samples, 1e-8).unwrap();
        assert!(!rep.passed());
        assert!(rep.stable_decay.value < -1e-3);
    }

    #[test]
    fn derivative_identity_diagonal() {
        let ev = diag_ev();
        let rate = GrowthRate::exponential();
        let q = QuadraticLyapunov::build(&ev, &rate, diag_cert(), 0.5, QuadraticSettings::default())
            .unwrap();
        let grid = [0.0, 0.5, 1.0];
        let rep = check_stable_derivative_identity(&q, 0.0, &vec2(1.0, 0.0), &grid, 1e-4).unwrap();
        assert!(rep.passed(), "rel err {}", rep.worst_rel_err);
    }

    #[test]
    fn s_property_suite_diagonal() {
        let ev = diag_ev();
        let rate = GrowthRate::exponential();
        let q = QuadraticLyapunov::build(&ev, &rate, diag_cert(), 0.5, QuadraticSettings::default())
            .unwrap();
        let local = LocalGrowthBound {
            d_tilde: 1.0f64.exp(),
            c: 1.0,
            lambda_tilde: 1e-6,
        };
        let ts = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let samples = [vec2(1.0, 0.5), vec2(-0.7, 1.2)];
        let rep = check_s_properties(&q, Some(&local), &ts, &samples, 1e-6).unwrap();
        assert!(rep.passed(), "{rep:?}");
        // the printed dissipation constants fail on this reference
        assert!(rep.dissipation_printed.value < -1.0, "{:?}", rep.dissipation_printed);
        // with equality in one direction the derived margin sits at zero
        assert!(rep.dissipation_derived.value.abs() < 1e-5);
        assert!(rep.norm_envelope.value > 0.5);
    }

    #[test]
    fn recover_certificate_from_strict_constants() {
        let ev = diag_ev();
        let rate = GrowthRate::exponential();
        let k = StrictnessConstants {
            c: 1.0,
            epsilon: 0.0,
            alpha: -1.0,
            beta: -1.0,
        };
        let (c_s, c_u) = strict_subspace_constants(&rate, &diag_cert(), 0.0);
        assert!((c_s - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((c_u - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        let rec = recover_dichotomy(&k, 0.0, c_s, c_u).unwrap();
        assert!((rec.cert.lambda_s + 1.0).abs() < 1e-12);
        assert!((rec.cert.lambda_u - 1.0).abs() < 1e-12);
        assert_eq!(rec.cert.nu, 0.0);
        assert!(rec.cert.d >= 1.0);

        let grid: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.5).collect();
        let rep = verify_dichotomy(&ev, &rate, &rec.cert, &grid, 1e-7).unwrap();
        assert!(rep.passed());

        // inflating C inflates D quadratically and still validates
        let inflated = recover_dichotomy(
            &StrictnessConstants { c: 10.0, ..k },
            0.0,
            c_s,
            c_u,
        )
        .unwrap();
        assert!((inflated.cert.d / rec.cert.d - 100.0).abs() < 1e-6);
        assert!(verify_dichotomy(&ev, &rate, &inflated.cert, &grid, 1e-7)
            .unwrap()
            .passed());

        // nonzero epsilon yields a weaker nonuniform claim that still passes
        let eps = recover_dichotomy(
            &StrictnessConstants {
                epsilon: 0.1,
                ..k
            },
            0.0,
            c_s,
            c_u,
        )
        .unwrap();
        assert!(eps.cert.nu > 0.0);
        assert!(verify_dichotomy(&ev, &rate, &eps.cert, &grid, 1e-7)
            .unwrap()
            .passed());
    }

    #[test]
    fn reversed_provider_swaps_roles() {
        let ev = diag_ev();
        let rev = crate::linflow::Reversed(&ev);
        let rate = GrowthRate::exponential();
        let rev_rate = rate.reversed();
        let q = QuadraticLyapunov::build(
            &rev,
            &rev_rate,
            diag_cert().reversed(),
            0.5,
            QuadraticSettings::default(),
        )
        .unwrap();
        // reversed system has the roles swapped: S = diag(-1, 1)
        let s = q.s_exact(0.0).unwrap();
        assert!((s[(0, 0)] + 1.0).abs() < 1e-6);
        assert!((s[(1, 1)] - 1.0).abs() < 1e-6);
    }
}
