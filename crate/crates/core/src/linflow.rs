//! Evolution operator of `x' = A(t)x`, projection families, and grid
//! certification of dichotomy / bounded-growth estimates.
//!
//! Transitions are cached on a lattice anchored at `t = 0`. Four
//! families are propagated separately: the full operator in both
//! directions and the two projected propagators. Products of those
//! families give `Psi(t,s)`, `Psi(t,s) pi(s)` and `Psi(t,s)(id - pi(s))`
//! without the catastrophic cancellation that plagues naive composition
//! of hyperbolic flows over long windows.

use crate::expr::Expr;
use crate::growth::GrowthRate;
use crate::ode::{self, OdeError, OdeSettings};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinflowError {
    #[error("coefficient evaluation failed at t={t}: {message}")]
    Coefficient { t: f64, message: String },
    #[error("time {t} outside working window [{lo}, {hi}]")]
    OutsideWindow { t: f64, lo: f64, hi: f64 },
    #[error("anchor projection is not idempotent: residual {residual:e}")]
    AnchorNotIdempotent { residual: f64 },
    #[error("matrix shape mismatch: expected {expected}x{expected}")]
    Shape { expected: usize },
    #[error(transparent)]
    Integrator(#[from] OdeError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error("regression degenerate: all samples share one abscissa")]
    DegenerateRegression,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("dichotomy certificate requires D >= 1, got {0}")]
    BadD(f64),
    #[error("dichotomy certificate requires lambda_s < 0, got {0}")]
    BadLambdaS(f64),
    #[error("dichotomy certificate requires lambda_u > 0, got {0}")]
    BadLambdaU(f64),
    #[error("dichotomy certificate requires nu >= 0 and omega >= 0, got ({nu}, {omega})")]
    BadNuOmega { nu: f64, omega: f64 },
    #[error("side condition lambda_s + nu < 0 violated: {0}")]
    SideConditionStable(f64),
    #[error("side condition lambda_u - omega > 0 violated: {0}")]
    SideConditionUnstable(f64),
    #[error("growth certificate requires lambda_max > 0, got {0}")]
    BadLambdaMax(f64),
    #[error("fitted certificate incomplete: {side} side not applicable (projection rank 0)")]
    NotApplicable { side: &'static str },
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.singular_values().max()
}

#[derive(Clone)]
enum Coeff {
    Exprs(Arc<Vec<Vec<Expr>>>),
    Fn(Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>),
}

/// The linear system `x' = A(t)x` with an anchor projection at `t = 0`.
#[derive(Clone)]
pub struct LinearSystem {
    n: usize,
    coeff: Coeff,
    pi0: DMatrix<f64>,
}

impl fmt::Debug for LinearSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearSystem").field("n", &self.n).finish()
    }
}

impl LinearSystem {
    pub fn from_exprs(
        n: usize,
        entries: Vec<Vec<Expr>>,
        pi0: DMatrix<f64>,
    ) -> Result<Self, LinflowError> {
        if entries.len() != n || entries.iter().any(|row| row.len() != n) {
            return Err(LinflowError::Shape { expected: n });
        }
        for row in &entries {
            for e in row {
                if e.max_var_index() > 0 {
                    return Err(LinflowError::Coefficient {
                        t: 0.0,
                        message: "matrix entries may only depend on t".into(),
                    });
                }
            }
        }
        Self::check_pi0(n, &pi0)?;
        Ok(LinearSystem {
            n,
            coeff: Coeff::Exprs(Arc::new(entries)),
            pi0,
        })
    }

    pub fn from_fn(
        n: usize,
        a: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        pi0: DMatrix<f64>,
    ) -> Result<Self, LinflowError> {
        Self::check_pi0(n, &pi0)?;
        Ok(LinearSystem {
            n,
            coeff: Coeff::Fn(Arc::new(a)),
            pi0,
        })
    }

    fn check_pi0(n: usize, pi0: &DMatrix<f64>) -> Result<(), LinflowError> {
        if pi0.nrows() != n || pi0.ncols() != n {
            return Err(LinflowError::Shape { expected: n });
        }
        let residual = spectral_norm(&(pi0 * pi0 - pi0));
        if residual > 1e-10 {
            return Err(LinflowError::AnchorNotIdempotent { residual });
        }
        Ok(())
    }

    /// Reference system `A = diag(-1, 1)` with the orthogonal anchor
    /// splitting the axes.
    pub fn diag_hyperbolic() -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        LinearSystem::from_fn(2, move |_| a.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]))
            .unwrap()
    }

    /// Scalar nonuniformly contracting reference `a(t) = -1 - 0.1 t sin t`.
    pub fn bv_scalar_stable() -> Self {
        LinearSystem::from_fn(
            1,
            |t: f64| DMatrix::from_element(1, 1, -1.0 - 0.1 * t * t.sin()),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn anchor_projection(&self) -> &DMatrix<f64> {
        &self.pi0
    }

    /// Rank of the anchor projection (stable dimension).
    pub fn stable_dim(&self) -> usize {
        self.pi0
            .singular_values()
            .iter()
            .filter(|s| **s > 0.5)
            .count()
    }

    pub fn unstable_dim(&self) -> usize {
        self.n - self.stable_dim()
    }

    pub fn a_mat(&self, t: f64) -> Result<DMatrix<f64>, LinflowError> {
        match &self.coeff {
            Coeff::Fn(f) => Ok(f(t)),
            Coeff::Exprs(rows) => {
                let mut m = DMatrix::zeros(self.n, self.n);
                for (i, row) in rows.iter().enumerate() {
                    for (j, e) in row.iter().enumerate() {
                        m[(i, j)] = e.eval(t, &[]).map_err(|err| LinflowError::Coefficient {
                            t,
                            message: err.to_string(),
                        })?;
                    }
                }
                Ok(m)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransitionSettings {
    pub rtol: f64,
    pub atol: f64,
    pub lattice_step: f64,
    pub window: (f64, f64),
    pub cocycle_tol: f64,
}

impl Default for TransitionSettings {
    fn default() -> Self {
        TransitionSettings {
            rtol: 1e-13,
            atol: 1e-15,
            lattice_step: 0.05,
            window: (-48.0, 48.0),
            cocycle_tol: 1e-6,
        }
    }
}

/// Integrate a linear matrix ODE with the initial value rescaled to unit
/// norm, so the tolerances act at unit scale and exponentially small
/// families keep their relative accuracy.
fn integrate_scaled<F>(
    rhs: &F,
    t0: f64,
    t1: f64,
    m0: &DMatrix<f64>,
    settings: &OdeSettings,
) -> Result<DMatrix<f64>, OdeError>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64> + ?Sized,
{
    let scale = m0.amax();
    if scale == 0.0 {
        return Ok(m0.clone());
    }
    let out = ode::integrate_matrix(rhs, t0, t1, &(m0 / scale), settings)?;
    Ok(out * scale)
}

/// Access to projected transition operators; implemented by the concrete
/// evaluator and by its time-reversed view.
pub trait TransitionProvider: Sync {
    fn dim(&self) -> usize;
    /// `Psi(t,s) pi(s)`.
    fn stable_part(&self, t: f64, s: f64) -> Result<DMatrix<f64>, LinflowError>;
    /// `Psi(t,s) (id - pi(s))`.
    fn unstable_part(&self, t: f64, s: f64) -> Result<DMatrix<f64>, LinflowError>;
    fn projection(&self, t: f64) -> Result<DMatrix<f64>, LinflowError>;
    /// Coefficient matrix `A(t)`.
    fn generator(&self, t: f64) -> Result<DMatrix<f64>, LinflowError>;
    fn window(&self) -> (f64, f64);
}

/// Time-reversed view `s -> -s` of a provider: stable and unstable roles
/// swap and the generator flips sign.
pub struct Reversed<'a, P: TransitionProvider + ?Sized>(pub &'a P);

impl<'a, P: TransitionProvider + ?Sized> TransitionProvider for Reversed<'a, P> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn stable_part(&self, t: f64, s: f64) -> Result<DMatrix<f64>, LinflowError> {
        self.0.unstable_part(-t, -s)
    }

    fn unstable_part(&self, t: f64, s: f64) -> Result<DMatrix<f64>, LinflowError> {
        self.0.stable_part(-t, -s)
    }

    fn projection(&self, t: f64) -> Result<DMatrix<f64>, LinflowError> {
        let p = self.0.projection(-t)?;
        Ok(DMatrix::identity(p.nrows(), p.ncols()) - p)
    }

    fn generator(&self, t: f64) -> Result<DMatrix<f64>, LinflowError> {
        Ok(-self.0.generator(-t)?)
    }

    fn window(&self) -> (f64, f64) {
        let (lo, hi) = self.0.window();
        (-hi, -lo)
    }
}

/// Lattice-cached evaluator of the evolution operator.
///
/// Six families are propagated: the full operator both ways, the forward
/// projected propagators `Psi(t,0) pi0` and `Psi(t,0)(id-pi0)`, and the
/// backward ones `pi0 Psi(0,t)` and `(id-pi0) Psi(0,t)`. Pairing forward
/// with backward factors of the same side keeps every product at the
/// scale of its true value for all sign combinations of `(t, s)`.
pub struct TransitionEvaluator {
    sys: LinearSystem,
    settings: TransitionSettings,
    i_min: i64,
    /// `Psi(t_i, 0)`
    psi: Vec<DMatrix<f64>>,
    /// `Psi(0, t_i)`
    psi_inv: Vec<DMatrix<f64>>,
    /// `Psi(t_i, 0) pi0`
    phi_s: Vec<DMatrix<f64>>,
    /// `Psi(t_i, 0) (id - pi0)`
    phi_u: Vec<DMatrix<f64>>,
    /// `pi0 Psi(0, t_i)`
    lam_s: Vec<DMatrix<f64>>,
    /// `(id - pi0) Psi(0, t_i)`
    lam_u: Vec<DMatrix<f64>>,
}

impl TransitionEvaluator {
    pub fn new(sys: LinearSystem, settings: TransitionSettings) -> Result<Self, LinflowError> {
        let step = settings.lattice_step;
        let i_min = (settings.window.0 / step).floor() as i64;
        let i_max = (settings.window.1 / step).ceil() as i64;
        let count = (i_max - i_min + 1) as usize;
        let n = sys.dim();
        let id = DMatrix::identity(n, n);
        let pi0 = sys.anchor_projection().clone();
        let co = id.clone() - &pi0;

        let mut psi = vec![DMatrix::zeros(n, n); count];
        let mut psi_inv = vec![DMatrix::zeros(n, n); count];
        let mut phi_s = vec![DMatrix::zeros(n, n); count];
        let mut phi_u = vec![DMatrix::zeros(n, n); count];
        let mut lam_s = vec![DMatrix::zeros(n, n); count];
        let mut lam_u = vec![DMatrix::zeros(n, n); count];
        let zero_idx = (-i_min) as usize;
        psi[zero_idx] = id.clone();
        psi_inv[zero_idx] = id;
        phi_s[zero_idx] = pi0.clone();
        phi_u[zero_idx] = co.clone();
        lam_s[zero_idx] = pi0;
        lam_u[zero_idx] = co;

        let ode_settings = OdeSettings {
            rtol: settings.rtol,
            atol: settings.atol,
            ..OdeSettings::default()
        };
        let fwd = |t: f64, m: &DMatrix<f64>| sys.a_mat(t).map(|a| a * m);
        let bwd = |t: f64, m: &DMatrix<f64>| sys.a_mat(t).map(|a| -(m * a));

        // propagate outward from the anchor in both directions
        for dir in [1i64, -1i64] {
            let mut i = zero_idx as i64;
            loop {
                let next = i + dir;
                if next < 0 || next >= count as i64 {
                    break;
                }
                let t0 = (i_min + i) as f64 * step;
                let t1 = (i_min + next) as f64 * step;
                let step_mat = |m: &DMatrix<f64>, forward: bool| -> Result<DMatrix<f64>, LinflowError> {
                    let res = if forward {
                        integrate_scaled(&|t, m: &DMatrix<f64>| fwd(t, m).unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN)), t0, t1, m, &ode_settings)
                    } else {
                        integrate_scaled(&|t, m: &DMatrix<f64>| bwd(t, m).unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN)), t0, t1, m, &ode_settings)
                    };
                    res.map_err(LinflowError::from)
                };
                let i_us = i as usize;
                let next_us = next as usize;
                psi[next_us] = step_mat(&psi[i_us], true)?;
                phi_s[next_us] = step_mat(&phi_s[i_us], true)?;
                phi_u[next_us] = step_mat(&phi_u[i_us], true)?;
                psi_inv[next_us] = step_mat(&psi_inv[i_us], false)?;
                lam_s[next_us] = step_mat(&lam_s[i_us], false)?;
                lam_u[next_us] = step_mat(&lam_u[i_us], false)?;
                i = next;
            }
        }

        Ok(TransitionEvaluator {
            sys,
            settings,
            i_min,
            psi,
            psi_inv,
            phi_s,
            phi_u,
            lam_s,
            lam_u,
        })
    }

    pub fn with_defaults(sys: LinearSystem) -> Result<Self, LinflowError> {
        Self::new(sys, TransitionSettings::default())
    }

    pub fn system(&self) -> &LinearSystem {
        &self.sys
    }

    pub fn settings(&self) -> &TransitionSettings {
        &self.settings
    }

    fn check_window(&self, t: f64) -> Result<(), LinflowError> {
        let (lo, hi) = self.settings.window;
        if t < lo - 1e-9 || t > hi + 1e-9 {
            return Err(LinflowError::OutsideWindow { t, lo, hi });
        }
        Ok(())
    }

    fn ode_settings(&self) -> OdeSettings {
        OdeSettings {
            rtol: self.settings.rtol,
            atol: self.settings.atol,
            ..OdeSettings::default()
        }
    }

    fn family_at(&self, family: &[DMatrix<f64>], t: f64, forward: bool) -> Result<DMatrix<f64>, LinflowError> {
        self.check_window(t)?;
        let step = self.settings.lattice_step;
        let idx = ((t / step).round() as i64 - self.i_min)
            .clamp(0, family.len() as i64 - 1) as usize;
        let t_latt = (self.i_min + idx as i64) as f64 * step;
        let base = &family[idx];
        if t == t_latt {
            return Ok(base.clone());
        }
        let n = self.sys.dim();
        let sys = &self.sys;
        let rhs = move |tt: f64, m: &DMatrix<f64>| -> DMatrix<f64> {
            match sys.a_mat(tt) {
                Ok(a) => {
                    if forward {
                        a * m
                    } else {
                        -(m * a)
                    }
                }
                Err(_) => DMatrix::from_element(n, n, f64::NAN),
            }
        };
        integrate_scaled(&rhs, t_latt, t, base, &self.ode_settings()).map_err(LinflowError::from)
    }

    /// `Psi(t, 0)`.
    pub fn psi_from_zero(&self, t: f64) -> Result<DMatrix<f64>, LinflowError> {
        self.family_at(&self.psi, t, true)
    }

    /// `Psi(0, t)`.
    pub fn psi_to_zero(&self, t: f64) -> Result<DMatrix<f64>, LinflowError> {
        self.family_at(&self.psi_inv, t, false)
    }

    /// `Psi(t, 0) pi0`.
    pub fn forward_stable(&self, t: f64) -> Result<DMatrix<f64>, LinflowError> {
        self.family_at(&self.phi_s, t, true)
    }

    /// `Psi(t, 0) (id - pi0)`.
    pub fn forward_unstable(&self, t: f64) -> Result<DMatrix<f64>, LinflowError> {
        self.family_at(&self.phi_u, t, true)
    }

    /// `pi0 Psi(0, s)`.
    pub fn backward_stable(&self, s: f64) -> Result<DMatrix<f64>, LinflowError> {
        self.family_at(&self.lam_s, s, false)
    }

    /// `(id - pi0) Psi(0, s)`.
    pub fn backward_unstable(&self, s: f64) -> Result<DMatrix<f64>, LinflowError> {
        self.family_at(&self.lam_u, s, false)
    }

    /// Full transition `Psi(t, s)`; the identity is returned exactly at `t = s`.
    pub fn transition(&self, t: f64, s: f64) -> Result<DMatrix<f64>, LinflowError> {
        if t == s {
            self.check_window(t)?;
            let n = self.sys.dim();
            return Ok(DMatrix::identity(n, n));
        }
        Ok(self.psi_from_zero(t)? * self.psi_to_zero(s)?)
    }
}

impl TransitionProvider for TransitionEvaluator {
    fn dim(&self) -> usize {
        self.sys.dim()
    }

    fn stable_part(&self, t: f64, s: f64) -> Result<DMatrix<f64>, LinflowError> {
        Ok(self.forward_stable(t)? * self.backward_stable(s)?)
    }

    fn unstable_part(&self, t: f64, s: f64) -> Result<DMatrix<f64>, LinflowError> {
        Ok(self.forward_unstable(t)? * self.backward_unstable(s)?)
    }

    fn projection(&self, t: f64) -> Result<DMatrix<f64>, LinflowError> {
        if t == 0.0 {
            return Ok(self.sys.anchor_projection().clone());
        }
        self.stable_part(t, t)
    }

    fn generator(&self, t: f64) -> Result<DMatrix<f64>, LinflowError> {
        self.sys.a_mat(t)
    }

    fn window(&self) -> (f64, f64) {
        self.settings.window
    }
}

/// Projection family `pi(t) = Psi(t,0) pi0 Psi(0,t)` with residual checks.
pub struct ProjectionFamily<'a> {
    ev: &'a TransitionEvaluator,
}

impl<'a> ProjectionFamily<'a> {
    pub fn new(ev: &'a TransitionEvaluator) -> Self {
        ProjectionFamily { ev }
    }

    pub fn projection(&self, t: f64) -> Result<DMatrix<f64>, LinflowError> {
        self.ev.projection(t)
    }

    pub fn idempotency_residual(&self, t: f64) -> Result<f64, LinflowError> {
        let p = self.projection(t)?;
        Ok(spectral_norm(&(&p * &p - &p)))
    }

    pub fn commutation_residual(&self, t: f64, s: f64) -> Result<f64, LinflowError> {
        let psi = self.ev.transition(t, s)?;
        let pt = self.projection(t)?;
        let ps = self.projection(s)?;
        Ok(spectral_norm(&(&pt * &psi - &psi * &ps)))
    }

    /// Residual of the generator identity `pi'(t) = A(t)pi(t) - pi(t)A(t)`
    /// against a central finite difference.
    pub fn generator_residual(&self, t: f64, h: f64) -> Result<f64, LinflowError> {
        let fd = (self.projection(t + h)? - self.projection(t - h)?) / (2.0 * h);
        let a = self.ev.system().a_mat(t)?;
        let p = self.projection(t)?;
        Ok(spectral_norm(&(fd - (&a * &p - &p * &a))))
    }
}

/// Constants of a nonuniform dichotomy estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DichotomyCertificate {
    pub d: f64,
    pub lambda_s: f64,
    pub lambda_u: f64,
    pub nu: f64,
    pub omega: f64,
}

impl DichotomyCertificate {
    pub fn uniform(d: f64, lambda_s: f64, lambda_u: f64) -> Self {
        DichotomyCertificate {
            d,
            lambda_s,
            lambda_u,
            nu: 0.0,
            omega: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CertificateError> {
        if !(self.d >= 1.0) {
            return Err(CertificateError::BadD(self.d));
        }
        if !(self.lambda_s < 0.0) {
            return Err(CertificateError::BadLambdaS(self.lambda_s));
        }
        if !(self.lambda_u > 0.0) {
            return Err(CertificateError::BadLambdaU(self.lambda_u));
        }
        if self.nu < 0.0 || self.omega < 0.0 {
            return Err(CertificateError::BadNuOmega {
                nu: self.nu,
                omega: self.omega,
            });
        }
        if self.lambda_s + self.nu >= 0.0 {
            return Err(CertificateError::SideConditionStable(self.lambda_s + self.nu));
        }
        if self.lambda_u - self.omega <= 0.0 {
            return Err(CertificateError::SideConditionUnstable(
                self.lambda_u - self.omega,
            ));
        }
        Ok(())
    }

    /// Certificate of the time-reversed system, with the stable and
    /// unstable roles swapped.
    pub fn reversed(&self) -> Self {
        DichotomyCertificate {
            d: self.d,
            lambda_s: -self.lambda_u,
            lambda_u: -self.lambda_s,
            nu: self.omega,
            omega: self.nu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalGrowthBound {
    pub d_tilde: f64,
    pub c: f64,
    pub lambda_tilde: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthCertificate {
    pub d: f64,
    pub lambda_max: f64,
    pub theta: f64,
    pub local: Option<LocalGrowthBound>,
}

impl GrowthCertificate {
    pub fn validate(&self) -> Result<(), CertificateError> {
        if !(self.d >= 1.0) {
            return Err(CertificateError::BadD(self.d));
        }
        if !(self.lambda_max > 0.0) {
            return Err(CertificateError::BadLambdaMax(self.lambda_max));
        }
        Ok(())
    }
}

/// One offending sample of a bound check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundSample {
    pub t: f64,
    pub s: f64,
    pub log_margin: f64,
}

/// Result of verifying a family of log-bounds over a grid. The margin is
/// `log(bound) - log(norm)`; negative margins are violations.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub worst: Option<BoundSample>,
    pub samples_checked: usize,
    pub violations: usize,
    pub margin_tol: f64,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn worst_margin(&self) -> f64 {
        self.worst.map(|w| w.log_margin).unwrap_or(f64::INFINITY)
    }
}

struct BoundAccumulator {
    report: BoundReport,
}

impl BoundAccumulator {
    fn new(margin_tol: f64) -> Self {
        BoundAccumulator {
            report: BoundReport {
                worst: None,
                samples_checked: 0,
                violations: 0,
                margin_tol,
            },
        }
    }

    fn push(&mut self, t: f64, s: f64, log_margin: f64) {
        self.report.samples_checked += 1;
        if log_margin < -self.report.margin_tol {
            self.report.violations += 1;
        }
        if self.report.worst.map(|w| log_margin < w.log_margin).unwrap_or(true) {
            self.report.worst = Some(BoundSample { t, s, log_margin });
        }
    }
}

/// Check the two projected dichotomy bounds over all ordered grid pairs.
pub fn verify_dichotomy(
    ev: &TransitionEvaluator,
    rate: &GrowthRate,
    cert: &DichotomyCertificate,
    grid: &[f64],
    margin_tol: f64,
) -> Result<BoundReport, LinflowError> {
    cert.validate()?;
    let mut acc = BoundAccumulator::new(margin_tol);
    let log_d = cert.d.ln();
    for (i, &s) in grid.iter().enumerate() {
        let lam_s_at = ev.backward_stable(s)?;
        let lam_u_at = ev.backward_unstable(s)?;
        let lmu_s = rate.log_eval(s);
        let s_weight_nu = s.signum() * cert.nu * lmu_s;
        let s_weight_om = s.signum() * cert.omega * lmu_s;
        for &t in &grid[i..] {
            // stable bound for t >= s
            let m = ev.forward_stable(t)? * &lam_s_at;
            let norm = spectral_norm(&m);
            if norm > 0.0 {
                let bound = log_d + cert.lambda_s * (rate.log_eval(t) - lmu_s) + s_weight_nu;
                acc.push(t, s, bound - norm.ln());
            }
        }
        for &t in &grid[..=i] {
            // unstable bound for t <= s
            let m = ev.forward_unstable(t)? * &lam_u_at;
            let norm = spectral_norm(&m);
            if norm > 0.0 {
                let bound = log_d + cert.lambda_u * (rate.log_eval(t) - lmu_s) + s_weight_om;
                acc.push(t, s, bound - norm.ln());
            }
        }
    }
    Ok(acc.report)
}

/// Check the two-sided bounded-growth estimate, plus the short-range
/// bound `|Psi(t,s)| <= D~ mu(|t|)^l~` when a local triple is present.
pub fn verify_bounded_growth(
    ev: &TransitionEvaluator,
    rate: &GrowthRate,
    cert: &GrowthCertificate,
    grid: &[f64],
    margin_tol: f64,
) -> Result<BoundReport, LinflowError> {
    cert.validate()?;
    let mut acc = BoundAccumulator::new(margin_tol);
    let log_d = cert.d.ln();
    for &s in grid {
        let psi_inv_s = ev.psi_to_zero(s)?;
        let lmu_s = rate.log_eval(s);
        for &t in grid {
            let psi = if t == s {
                DMatrix::identity(ev.dim(), ev.dim())
            } else {
                ev.psi_from_zero(t)? * &psi_inv_s
            };
            let norm = spectral_norm(&psi);
            let bound = log_d
                + (t - s).signum() * cert.lambda_max * (rate.log_eval(t) - lmu_s)
                + s.signum() * cert.theta * lmu_s;
            acc.push(t, s, bound - norm.ln());
            if let Some(local) = &cert.local {
                if (t - s).abs() <= local.c {
                    let lb = local.d_tilde.ln() + local.lambda_tilde * rate.log_eval(t.abs());
                    acc.push(t, s, lb - norm.ln());
                }
            }
        }
    }
    Ok(acc.report)
}

/// One fitted side of a dichotomy estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SideFit {
    pub lambda: f64,
    pub weight: f64,
}

/// Least-violation constants fitted from grid data. A side is `None`
/// when the corresponding projection has rank zero.
#[derive(Debug, Clone, Serialize)]
pub struct DichotomyFit {
    pub stable: Option<SideFit>,
    pub unstable: Option<SideFit>,
    pub d: f64,
}

impl DichotomyFit {
    pub fn certificate(&self) -> Result<DichotomyCertificate, CertificateError> {
        let stable = self.stable.ok_or(CertificateError::NotApplicable { side: "stable" })?;
        let unstable = self
            .unstable
            .ok_or(CertificateError::NotApplicable { side: "unstable" })?;
        let cert = DichotomyCertificate {
            d: self.d,
            lambda_s: stable.lambda,
            lambda_u: unstable.lambda,
            nu: stable.weight,
            omega: unstable.weight,
        };
        cert.validate()?;
        Ok(cert)
    }
}

fn regression_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx < 1e-12 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Fit dichotomy constants by log-log regression of the projected norms,
/// choosing the smallest nonuniform weights that do not increase the
/// minimized `D`, then rounding `D` up by 5%.
pub fn fit_dichotomy_constants(
    ev: &TransitionEvaluator,
    rate: &GrowthRate,
    grid: &[f64],
) -> Result<DichotomyFit, LinflowError> {
    struct Samples {
        abscissa: Vec<f64>,
        weight_abscissa: Vec<f64>,
        log_norm: Vec<f64>,
    }
    let mut stable = Samples {
        abscissa: vec![],
        weight_abscissa: vec![],
        log_norm: vec![],
    };
    let mut unstable = Samples {
        abscissa: vec![],
        weight_abscissa: vec![],
        log_norm: vec![],
    };
    for (i, &s) in grid.iter().enumerate() {
        let lam_s_at = ev.backward_stable(s)?;
        let lam_u_at = ev.backward_unstable(s)?;
        let lmu_s = rate.log_eval(s);
        for &t in &grid[i..] {
            let norm = spectral_norm(&(ev.forward_stable(t)? * &lam_s_at));
            if norm > 0.0 {
                stable.abscissa.push(rate.log_eval(t) - lmu_s);
                stable.weight_abscissa.push(s.signum() * lmu_s);
                stable.log_norm.push(norm.ln());
            }
        }
        for &t in &grid[..=i] {
            let norm = spectral_norm(&(ev.forward_unstable(t)? * &lam_u_at));
            if norm > 0.0 {
                unstable.abscissa.push(rate.log_eval(t) - lmu_s);
                unstable.weight_abscissa.push(s.signum() * lmu_s);
                unstable.log_norm.push(norm.ln());
            }
        }
    }

    let fit_side = |s: &Samples| -> Result<Option<(SideFit, f64)>, LinflowError> {
        if s.log_norm.is_empty() {
            return Ok(None);
        }
        let lambda = regression_slope(&s.abscissa, &s.log_norm)
            .ok_or(LinflowError::DegenerateRegression)?;
        let residuals: Vec<f64> = s
            .log_norm
            .iter()
            .zip(&s.abscissa)
            .map(|(y, a)| y - lambda * a)
            .collect();
        let d_for = |w: f64| -> f64 {
            residuals
                .iter()
                .zip(&s.weight_abscissa)
                .map(|(r, b)| r - w * b)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let mut weight = 0.0;
        let mut log_d = d_for(0.0);
        if let Some(slope) = regression_slope(&s.weight_abscissa, &residuals) {
            let candidate = slope.max(0.0);
            // only a weight that buys a real reduction of D is kept
            if candidate > 1e-9 && d_for(candidate) < log_d - 1e-9 {
                weight = candidate;
                log_d = d_for(candidate);
            }
        }
        Ok(Some((SideFit { lambda, weight }, log_d)))
    };

    let s_fit = fit_side(&stable)?;
    let u_fit = fit_side(&unstable)?;
    let mut d: f64 = 1.0;
    if let Some((_, log_d)) = s_fit {
        d = d.max(log_d.exp());
    }
    if let Some((_, log_d)) = u_fit {
        d = d.max(log_d.exp());
    }
    Ok(DichotomyFit {
        stable: s_fit.map(|(f, _)| f),
        unstable: u_fit.map(|(f, _)| f),
        d: d * 1.05,
    })
}
