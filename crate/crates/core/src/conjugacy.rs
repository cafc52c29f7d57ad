//! Crossing-time linearization: transport each hyperbolic side to the
//! level set where the quadratic Lyapunov value equals minus one, then
//! exchange the nonlinear and linear flows there. The expanded side runs
//! through the time-reversed machinery.

use crate::growth::GrowthRate;
use crate::linflow::{DichotomyCertificate, LinflowError, TransitionProvider};
use crate::lyapunov::{LyapunovError, QuadraticLyapunov};
use crate::manifolds::{ManifoldError, Side};
use crate::nonlinear::NonlinearError;
use crate::splitting::{DecoupledFlows, SplitError};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConjugacyError {
    #[error("crossing time undefined for the zero vector")]
    ZeroInput,
    #[error("no bracket for the unit level in [{lo}, {hi}] (values {v_lo}..{v_hi})")]
    BracketNotFound { lo: f64, hi: f64, v_lo: f64, v_hi: f64 },
    #[error("monotone-decrease guard violated: delta_f {delta_f} >= eta/(2 D^2) = {threshold}")]
    MonotoneGuard { delta_f: f64, threshold: f64 },
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Linear(#[from] LinflowError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Nonlinear(#[from] NonlinearError),
}

#[derive(Debug, Clone, Copy)]
pub struct CrossingSettings {
    /// Tolerance on the Lyapunov value at the crossing.
    pub root_tol: f64,
    pub max_doublings: u32,
    /// Inputs below this norm short-circuit to zero in the assembled maps.
    pub zero_radius: f64,
}

impl Default for CrossingSettings {
    fn default() -> Self {
        CrossingSettings {
            root_tol: 1e-10,
            max_doublings: 20,
            zero_radius: 1e-12,
        }
    }
}

/// The decrease guard `delta_f < eta / (2 D^2)` that makes the Lyapunov
/// value strictly increase along perturbed contracted trajectories.
pub fn monotone_guard(cert: &DichotomyCertificate, eta: f64, delta_f: f64) -> (f64, bool) {
    let threshold = eta / (2.0 * cert.d * cert.d);
    (threshold, delta_f < threshold)
}

type FlowFn<'a> = Box<dyn Fn(f64, f64, &DVector<f64>) -> Result<DVector<f64>, ConjugacyError> + 'a>;
type LinFn<'a> = Box<dyn Fn(f64, f64) -> Result<DMatrix<f64>, ConjugacyError> + 'a>;
type VFn<'a> = Box<dyn Fn(f64, &DVector<f64>) -> Result<f64, ConjugacyError> + 'a>;

/// One contracted subsystem packaged for crossing-time work. The
/// expanded side of a system becomes the contracted side of its time
/// reversal and reuses this machinery unchanged.
pub struct CrossingSide<'a> {
    nl_flow: FlowFn<'a>,
    lin: LinFn<'a>,
    v_fast: VFn<'a>,
    v_exact: VFn<'a>,
    window: (f64, f64),
    pub settings: CrossingSettings,
}

impl<'a> CrossingSide<'a> {
    /// Contracted side of the given decoupled flows.
    pub fn stable(df: &'a DecoupledFlows<'a>, q: &'a QuadraticLyapunov<'a>) -> Self {
        let ev = df.cx.ev;
        let (lo, hi) = ev.window();
        CrossingSide {
            nl_flow: Box::new(move |t, tau, x| {
                df.solve(Side::Stable, t, tau, x).map_err(ConjugacyError::from)
            }),
            lin: Box::new(move |t, s| ev.stable_part(t, s).map_err(ConjugacyError::from)),
            v_fast: Box::new(move |t, x| Ok(q.v(t, x)?)),
            v_exact: Box::new(move |t, x| Ok(q.u_v_exact(t, x)?.1)),
            window: (lo + 2.0, hi - 2.0),
            settings: CrossingSettings::default(),
        }
    }

    /// Expanded side in reversed time: callers address it with reversed
    /// time arguments, states are untouched.
    pub fn unstable_reversed(df: &'a DecoupledFlows<'a>, q_rev: &'a QuadraticLyapunov<'a>) -> Self {
        let ev = df.cx.ev;
        let (lo, hi) = ev.window();
        CrossingSide {
            nl_flow: Box::new(move |s2, s1, y| {
                df.solve(Side::Unstable, -s2, -s1, y).map_err(ConjugacyError::from)
            }),
            lin: Box::new(move |s2, s1| ev.unstable_part(-s2, -s1).map_err(ConjugacyError::from)),
            v_fast: Box::new(move |s, y| Ok(q_rev.v(s, y)?)),
            v_exact: Box::new(move |s, y| Ok(q_rev.u_v_exact(s, y)?.1)),
            window: (-hi + 2.0, -lo - 2.0),
            settings: CrossingSettings::default(),
        }
    }

    fn crossing_time(
        &self,
        tau: f64,
        x0: &DVector<f64>,
        value_at: &dyn Fn(f64) -> Result<f64, ConjugacyError>,
    ) -> Result<f64, ConjugacyError> {
        if x0.norm() == 0.0 {
            return Err(ConjugacyError::ZeroInput);
        }
        // expand a bracket around tau; the value is increasing in time
        let mut radius = 1.0;
        let (mut lo, mut hi) = (tau - radius, tau + radius);
        let clamp = |t: f64| t.clamp(self.window.0, self.window.1);
        lo = clamp(lo);
        hi = clamp(hi);
        let mut v_lo = value_at(lo)?;
        let mut v_hi = value_at(hi)?;
        let mut tries = 0;
        while !(v_lo <= -1.0 && v_hi >= -1.0) {
            radius *= 2.0;
            tries += 1;
            if tries > self.settings.max_doublings
                || (lo == self.window.0 && hi == self.window.1)
            {
                return Err(ConjugacyError::BracketNotFound { lo, hi, v_lo, v_hi });
            }
            if v_lo > -1.0 {
                lo = clamp(tau - radius);
                v_lo = value_at(lo)?;
            }
            if v_hi < -1.0 {
                hi = clamp(tau + radius);
                v_hi = value_at(hi)?;
            }
        }
        // bisection is the correctness anchor
        for _ in 0..200 {
            if hi - lo < 1e-13 * (1.0 + tau.abs()) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let v = value_at(mid)?;
            if (v + 1.0).abs() < self.settings.root_tol {
                return Ok(mid);
            }
            if v < -1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Crossing time of the nonlinear contracted trajectory through
    /// `(tau, x0)`.
    pub fn crossing_time_nl(&self, tau: f64, x0: &DVector<f64>) -> Result<f64, ConjugacyError> {
        // coarse pass on the interpolated evaluator, polish on the exact one
        let coarse = self.crossing_time(tau, x0, &|t| {
            let x = (self.nl_flow)(t, tau, x0)?;
            (self.v_fast)(t, &x)
        })?;
        self.polish(coarse, &|t| {
            let x = (self.nl_flow)(t, tau, x0)?;
            (self.v_exact)(t, &x)
        })
    }

    /// Crossing time along the linear contracted flow.
    pub fn crossing_time_lin(&self, tau: f64, x0: &DVector<f64>) -> Result<f64, ConjugacyError> {
        let coarse = self.crossing_time(tau, x0, &|t| {
            let x = (self.lin)(t, tau)? * x0;
            (self.v_fast)(t, &x)
        })?;
        self.polish(coarse, &|t| {
            let x = (self.lin)(t, tau)? * x0;
            (self.v_exact)(t, &x)
        })
    }

    /// A few guarded secant steps on the exact evaluator around `t0`.
    fn polish(
        &self,
        t0: f64,
        value_at: &dyn Fn(f64) -> Result<f64, ConjugacyError>,
    ) -> Result<f64, ConjugacyError> {
        let mut width = 1e-5 * (1.0 + t0.abs());
        let (mut lo, mut hi, mut v_lo, mut v_hi);
        loop {
            lo = (t0 - width).max(self.window.0);
            hi = (t0 + width).min(self.window.1);
            v_lo = value_at(lo)? + 1.0;
            v_hi = value_at(hi)? + 1.0;
            if v_lo <= 0.0 && v_hi >= 0.0 {
                break;
            }
            width *= 10.0;
            if width > 1.0 {
                // fall back to the coarse value
                return Ok(t0);
            }
        }
        // Illinois variant of regula falsi
        let (mut a, mut b, mut fa, mut fb) = (lo, hi, v_lo, v_hi);
        for _ in 0..40 {
            if fa.abs() < self.settings.root_tol {
                return Ok(a);
            }
            if fb.abs() < self.settings.root_tol {
                return Ok(b);
            }
            let m = b - fb * (b - a) / (fb - fa);
            let fm = value_at(m)? + 1.0;
            if fm.abs() < self.settings.root_tol {
                return Ok(m);
            }
            if (fm < 0.0) == (fa < 0.0) {
                a = m;
                fa = fm;
            } else {
                b = m;
                fb = fm;
                fa *= 0.5;
            }
            if (b - a).abs() < 1e-14 * (1.0 + b.abs()) {
                break;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// Nonlinear-to-linear transport: flow to the crossing, then pull
    /// back with the linear flow.
    pub fn f_map(&self, tau: f64, x0: &DVector<f64>) -> Result<DVector<f64>, ConjugacyError> {
        let ell = self.crossing_time_nl(tau, x0)?;
        let at_ell = (self.nl_flow)(ell, tau, x0)?;
        Ok((self.lin)(tau, ell)? * at_ell)
    }

    /// Linear-to-nonlinear transport: push with the linear flow to the
    /// linear crossing, then flow back nonlinearly.
    pub fn l_map(&self, tau: f64, x0: &DVector<f64>) -> Result<DVector<f64>, ConjugacyError> {
        let kappa = self.crossing_time_lin(tau, x0)?;
        let y = (self.lin)(kappa, tau)? * x0;
        (self.nl_flow)(tau, kappa, &y)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivarianceReport {
    pub f_defect: f64,
    pub l_defect: f64,
    pub crossing_transport: f64,
    pub samples: usize,
    pub tol: f64,
}

impl EquivarianceReport {
    pub fn passed(&self) -> bool {
        self.f_defect <= self.tol && self.l_defect <= self.tol
    }
}

/// Both transport identities plus invariance of the crossing time along
/// trajectories, over sampled `(tau, t, x0)`.
pub fn verify_equivariance(
    side: &CrossingSide,
    samples: &[(f64, f64, DVector<f64>)],
    tol: f64,
) -> Result<EquivarianceReport, ConjugacyError> {
    let mut report = EquivarianceReport {
        f_defect: 0.0,
        l_defect: 0.0,
        crossing_transport: 0.0,
        samples: 0,
        tol,
    };
    for (tau, t, x0) in samples {
        if x0.norm() < 1e-12 {
            continue;
        }
        report.samples += 1;
        let flowed = (side.nl_flow)(*t, *tau, x0)?;
        let lhs = side.f_map(*t, &flowed)?;
        let rhs = (side.lin)(*t, *tau)? * side.f_map(*tau, x0)?;
        report.f_defect = report.f_defect.max((&lhs - &rhs).norm());

        let lin_flowed = (side.lin)(*t, *tau)? * x0;
        let lhs = side.l_map(*t, &lin_flowed)?;
        let rhs = (side.nl_flow)(*t, *tau, &side.l_map(*tau, x0)?)?;
        report.l_defect = report.l_defect.max((&lhs - &rhs).norm());

        let ell_tau = side.crossing_time_nl(*tau, x0)?;
        let ell_t = side.crossing_time_nl(*t, &flowed)?;
        report.crossing_transport = report.crossing_transport.max((ell_t - ell_tau).abs());
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct InverseReport {
    pub fl_defect: f64,
    pub lf_defect: f64,
    pub crossing_exchange: f64,
    pub samples: usize,
    pub tol: f64,
}

impl InverseReport {
    pub fn passed(&self) -> bool {
        self.fl_defect <= self.tol && self.lf_defect <= self.tol
    }
}

/// Round-trip identities of the two maps and the crossing-time exchange
/// relations.
pub fn verify_inverse(
    side: &CrossingSide,
    samples: &[(f64, DVector<f64>)],
    tol: f64,
) -> Result<InverseReport, ConjugacyError> {
    let mut report = InverseReport {
        fl_defect: 0.0,
        lf_defect: 0.0,
        crossing_exchange: 0.0,
        samples: 0,
        tol,
    };
    for (tau, x0) in samples {
        if x0.norm() < 1e-12 {
            continue;
        }
        report.samples += 1;
        let l = side.l_map(*tau, x0)?;
        report.fl_defect = report.fl_defect.max((side.f_map(*tau, &l)? - x0).norm());
        let f = side.f_map(*tau, x0)?;
        report.lf_defect = report.lf_defect.max((side.l_map(*tau, &f)? - x0).norm());

        let kappa = side.crossing_time_lin(*tau, x0)?;
        let ell_of_l = side.crossing_time_nl(*tau, &l)?;
        report.crossing_exchange = report.crossing_exchange.max((kappa - ell_of_l).abs());
        let ell = side.crossing_time_nl(*tau, x0)?;
        let kappa_of_f = side.crossing_time_lin(*tau, &f)?;
        report.crossing_exchange = report.crossing_exchange.max((ell - kappa_of_f).abs());
    }
    Ok(report)
}

/// Assembled two-sided maps between the decoupled system and the linear
/// one. Missing sides contribute nothing (their projection is zero).
pub struct AssembledMaps<'a> {
    pub stable: Option<&'a CrossingSide<'a>>,
    pub unstable: Option<&'a CrossingSide<'a>>,
    pub prov: &'a dyn TransitionProvider,
    pub zero_radius: f64,
}

impl<'a> AssembledMaps<'a> {
    pub fn f_s(&self, tau: f64, x0: &DVector<f64>) -> Result<DVector<f64>, ConjugacyError> {
        if x0.norm() < self.zero_radius {
            return Ok(DVector::zeros(x0.len()));
        }
        match &self.stable {
            Some(s) => s.f_map(tau, x0),
            None => Ok(DVector::zeros(x0.len())),
        }
    }

    pub fn l_s(&self, tau: f64, x0: &DVector<f64>) -> Result<DVector<f64>, ConjugacyError> {
        if x0.norm() < self.zero_radius {
            return Ok(DVector::zeros(x0.len()));
        }
        match &self.stable {
            Some(s) => s.l_map(tau, x0),
            None => Ok(DVector::zeros(x0.len())),
        }
    }

    pub fn f_u(&self, tau: f64, x1: &DVector<f64>) -> Result<DVector<f64>, ConjugacyError> {
        if x1.norm() < self.zero_radius {
            return Ok(DVector::zeros(x1.len()));
        }
        match &self.unstable {
            Some(u) => u.f_map(-tau, x1),
            None => Ok(DVector::zeros(x1.len())),
        }
    }

    pub fn l_u(&self, tau: f64, x1: &DVector<f64>) -> Result<DVector<f64>, ConjugacyError> {
        if x1.norm() < self.zero_radius {
            return Ok(DVector::zeros(x1.len()));
        }
        match &self.unstable {
            Some(u) => u.l_map(-tau, x1),
            None => Ok(DVector::zeros(x1.len())),
        }
    }

    /// `F(tau, x)`: stable and unstable transports of the projections.
    pub fn f_full(&self, tau: f64, x: &DVector<f64>) -> Result<DVector<f64>, ConjugacyError> {
        let pi = self.prov.projection(tau)?;
        let xs = &pi * x;
        let xu = x - &xs;
        Ok(self.f_s(tau, &xs)? + self.f_u(tau, &xu)?)
    }

    /// Inverse assembly.
    pub fn l_full(&self, tau: f64, y: &DVector<f64>) -> Result<DVector<f64>, ConjugacyError> {
        let pi = self.prov.projection(tau)?;
        let ys = &pi * y;
        let yu = y - &ys;
        Ok(self.l_s(tau, &ys)? + self.l_u(tau, &yu)?)
    }
}

/// Rate diagnostics of the monotone-increase argument: the normalized
/// drift of the Lyapunov value along perturbed and linear contracted
/// trajectories, and its antiderivative proxy.
#[derive(Debug, Clone, Serialize)]
pub struct RateDiagnostics {
    pub min_perturbed_rate: f64,
    pub min_linear_rate: f64,
    /// cumulative `-(2 eta / D^2) * integral` of the perturbed rate
    pub antiderivative: Vec<(f64, f64)>,
}

pub fn rate_diagnostics(
    q: &QuadraticLyapunov,
    rate: &GrowthRate,
    cert: &DichotomyCertificate,
    phi: &dyn Fn(f64) -> f64,
    grid: &[f64],
) -> Result<RateDiagnostics, ConjugacyError> {
    let mut min_p = f64::INFINITY;
    let mut min_l = f64::INFINITY;
    let mut anti = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for &t in grid {
        let s_norm = crate::linflow::spectral_norm(&q.s(t)?);
        let mu_ratio = rate.deriv(t) / rate.eval(t);
        let lmu = rate.log_eval(t);
        let weight = (t.signum() * cert.nu * lmu).max(t.signum() * cert.omega * lmu).exp();
        let u_rate = (mu_ratio + (cert.lambda_u * mu_ratio - phi(t)) * s_norm) / weight;
        let v_rate = (mu_ratio + cert.lambda_u * mu_ratio * s_norm) / weight;
        min_p = min_p.min(u_rate);
        min_l = min_l.min(v_rate);
        if let Some((tp, up)) = prev {
            acc += -(2.0 * q.eta / (cert.d * cert.d)) * 0.5 * (u_rate + up) * (t - tp);
        }
        anti.push((t, acc));
        prev = Some((t, u_rate));
    }
    Ok(RateDiagnostics {
        min_perturbed_rate: min_p,
        min_linear_rate: min_l,
        antiderivative: anti,
    })
}

/// Continuity-at-zero envelope of the nonlinear-to-linear transport on
/// small inputs, with the window constant recorded from the observed
/// crossing times.
#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeReport {
    pub b_constant: f64,
    pub worst_margin: f64,
    pub small_input_crossings_early: bool,
    pub samples: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn check_continuity_envelope(
    side: &CrossingSide,
    rate: &GrowthRate,
    c: f64,
    epsilon: f64,
    beta: f64,
    lambda_max: f64,
    d: f64,
    delta_f: f64,
    theta: f64,
    samples: &[(f64, DVector<f64>)],
) -> Result<EnvelopeReport, ConjugacyError> {
    let mut b: f64 = 0.0;
    let mut crossings = Vec::new();
    for (tau, x0) in samples {
        let ell = side.crossing_time_nl(*tau, x0)?;
        b = b.max(rate.pow(ell, ell.signum() * epsilon));
        crossings.push(ell);
    }
    let expo = -beta / (lambda_max + delta_f * d);
    let mut worst = f64::INFINITY;
    let mut early = true;
    for ((tau, x0), ell) in samples.iter().zip(&crossings) {
        let norm_f = side.f_map(*tau, x0)?.norm();
        let envelope = c
            * rate.pow(*tau, tau.signum() * epsilon)
            * (b * c * d * rate.pow(*tau, tau.signum() * theta) * x0.norm()).powf(expo);
        worst = worst.min(envelope - norm_f);
        // small inputs must cross before the base time
        if x0.norm() < rate.pow(*tau, -tau.signum() * epsilon) / c && *ell >= *tau {
            early = false;
        }
    }
    Ok(EnvelopeReport {
        b_constant: b,
        worst_margin: worst,
        small_input_crossings_early: early,
        samples: samples.len(),
    })
}

/// Injectivity evidence on a mesh plus inverse return.
#[derive(Debug, Clone, Serialize)]
pub struct HomeomorphismReport {
    pub min_image_separation: f64,
    pub worst_return: f64,
    pub mesh_points: usize,
}

pub fn homeomorphism_evidence(
    g: &dyn Fn(f64, &DVector<f64>) -> Result<DVector<f64>, ConjugacyError>,
    g_inv: &dyn Fn(f64, &DVector<f64>) -> Result<DVector<f64>, ConjugacyError>,
    tau: f64,
    mesh: &[DVector<f64>],
) -> Result<HomeomorphismReport, ConjugacyError> {
    let images: Vec<DVector<f64>> = mesh
        .iter()
        .map(|x| g(tau, x))
        .collect::<Result<_, _>>()?;
    let mut min_sep = f64::INFINITY;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            min_sep = min_sep.min((&images[i] - &images[j]).norm());
        }
    }
    let mut worst_return: f64 = 0.0;
    for (x, y) in mesh.iter().zip(&images) {
        worst_return = worst_return.max((g_inv(tau, y)? - x).norm());
    }
    Ok(HomeomorphismReport {
        min_image_separation: min_sep,
        worst_return,
        mesh_points: mesh.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::linflow::{LinearSystem, Reversed, TransitionEvaluator, TransitionSettings};
    use crate::lyapunov::QuadraticSettings;
    use crate::manifolds::{LpContext, LpSettings};
    use crate::nonlinear::{Perturbation, VectorField};

    fn scalar_ev() -> TransitionEvaluator {
        TransitionEvaluator::new(
            LinearSystem::from_fn(
                1,
                |_| DMatrix::from_element(1, 1, -1.0),
                DMatrix::from_element(1, 1, 1.0),
            )
            .unwrap(),
            TransitionSettings {
                window: (-40.0, 40.0),
                ..TransitionSettings::default()
            },
        )
        .unwrap()
    }

    fn diag_cert() -> DichotomyCertificate {
        DichotomyCertificate::uniform(1.0, -1.0, 1.0)
    }

    fn vec1(a: f64) -> DVector<f64> {
        DVector::from_element(1, a)
    }

    #[test]
    fn scalar_crossing_closed_form() {
        let ev = scalar_ev();
        let p = Perturbation::zero(1);
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let df = DecoupledFlows::new(&cx);
        let q = QuadraticLyapunov::build(&ev, &rate, cert, 0.5, QuadraticSettings::default())
            .unwrap();
        let side = CrossingSide::stable(&df, &q);

        // V(t) = -e^{1-t} crosses -1 at t = 1
        let e = std::f64::consts::E;
        let ell = side.crossing_time_nl(0.0, &vec1(e)).unwrap();
        assert!((ell - 1.0).abs() < 1e-8, "ell = {ell}");
        let kappa = side.crossing_time_lin(0.0, &vec1(e)).unwrap();
        assert!((kappa - 1.0).abs() < 1e-8, "kappa = {kappa}");

        // a state already on the unit level crosses at the base time
        let ell = side.crossing_time_nl(0.0, &vec1(1.0)).unwrap();
        assert!(ell.abs() < 1e-8);

        // small inputs cross before the base time
        for x in [0.3, 0.05, 0.001] {
            let ell = side.crossing_time_nl(0.0, &vec1(x)).unwrap();
            assert!(ell < 0.0, "x={x}: ell={ell}");
        }

        // with no perturbation both transports are the identity
        let f = side.f_map(0.0, &vec1(e)).unwrap();
        assert!((f[0] - e).abs() < 1e-8);
        let l = side.l_map(0.0, &vec1(e)).unwrap();
        assert!((l[0] - e).abs() < 1e-8);
    }

    fn perturbed_scalar() -> (TransitionEvaluator, Perturbation) {
        let ev = scalar_ev();
        let p = Perturbation::new(
            vec![parse("0.1*exp(-abs(t))*sin(x1)").unwrap()],
            1,
            0.1,
            1.0,
        )
        .unwrap();
        (ev, p)
    }

    #[test]
    fn perturbed_scalar_round_trip() {
        let (ev, p) = perturbed_scalar();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let df = DecoupledFlows::new(&cx);
        let q = QuadraticLyapunov::build(&ev, &rate, cert, 0.5, QuadraticSettings::default())
            .unwrap();
        let (_, guard_ok) = monotone_guard(&cert, 0.5, p.delta_f());
        assert!(guard_ok);
        let side = CrossingSide::stable(&df, &q);
        let x0 = vec1(1.5);
        let f = side.f_map(0.0, &x0).unwrap();
        let back = side.l_map(0.0, &f).unwrap();
        assert!((back[0] - 1.5).abs() < 1e-6, "round trip {back}");
    }

    #[test]
    fn perturbed_scalar_equivariance_and_inverse() {
        let (ev, p) = perturbed_scalar();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let df = DecoupledFlows::new(&cx);
        let q = QuadraticLyapunov::build(&ev, &rate, cert, 0.5, QuadraticSettings::default())
            .unwrap();
        let side = CrossingSide::stable(&df, &q);
        let samples3 = vec![
            (0.0, 1.0, vec1(1.2)),
            (0.5, -0.7, vec1(-0.8)),
            (-1.0, 0.8, vec1(2.0)),
        ];
        let rep = verify_equivariance(&side, &samples3, 1e-5).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.crossing_transport < 1e-8, "{}", rep.crossing_transport);

        let samples2 = vec![(0.0, vec1(1.5)), (0.7, vec1(-0.4))];
        let rep = verify_inverse(&side, &samples2, 1e-6).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.crossing_exchange < 1e-7);
    }

    #[test]
    fn reversed_side_identity_for_zero_field() {
        let ev = TransitionEvaluator::new(
            LinearSystem::diag_hyperbolic(),
            TransitionSettings {
                window: (-40.0, 40.0),
                ..TransitionSettings::default()
            },
        )
        .unwrap();
        let p = Perturbation::zero(2);
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let df = DecoupledFlows::new(&cx);
        let rev = Reversed(&ev);
        let rev_rate = rate.reversed();
        let q_rev = QuadraticLyapunov::build(
            &rev,
            &rev_rate,
            cert.reversed(),
            0.5,
            QuadraticSettings::default(),
        )
        .unwrap();
        let side_u = CrossingSide::unstable_reversed(&df, &q_rev);
        let maps = AssembledMaps {
            stable: None,
            unstable: Some(&side_u),
            prov: &ev,
            zero_radius: 1e-12,
        };
        let x1 = DVector::from_column_slice(&[0.0, 1.7]);
        let f = maps.f_u(0.5, &x1).unwrap();
        assert!((f - &x1).norm() < 1e-7, "expanded transport not identity");
        let l = maps.l_u(0.5, &x1).unwrap();
        assert!((l - &x1).norm() < 1e-7);
        // zero rule
        let z = maps.f_full(0.0, &DVector::zeros(2)).unwrap();
        assert_eq!(z.norm(), 0.0);
    }

    #[test]
    fn envelope_holds_for_scalar() {
        let (ev, p) = perturbed_scalar();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let df = DecoupledFlows::new(&cx);
        let q = QuadraticLyapunov::build(&ev, &rate, cert, 0.5, QuadraticSettings::default())
            .unwrap();
        let side = CrossingSide::stable(&df, &q);
        let k = q.guaranteed_constants();
        let samples = vec![
            (0.0, vec1(0.3)),
            (0.0, vec1(0.01)),
            (0.5, vec1(-0.1)),
            (-0.5, vec1(0.05)),
        ];
        let rep = check_continuity_envelope(
            &side, &rate, k.c, k.epsilon, k.beta, 1.0, cert.d, 0.1, 1.0, &samples,
        )
        .unwrap();
        assert!(rep.worst_margin > 0.0, "{rep:?}");
        assert!(rep.small_input_crossings_early);
    }

    #[test]
    fn rate_diagnostics_positive() {
        let (ev, p) = perturbed_scalar();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let q = QuadraticLyapunov::build(&ev, &rate, cert, 0.5, QuadraticSettings::default())
            .unwrap();
        let grid: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.5).collect();
        let phi = |t: f64| crate::nonlinear::phi(&p, &rate, t);
        let d = rate_diagnostics(&q, &rate, &cert, &phi, &grid).unwrap();
        assert!(d.min_perturbed_rate > 0.0, "{d:?}");
        assert!(d.min_linear_rate > 0.0);
        // antiderivative strictly decreasing
        for w in d.antiderivative.windows(2) {
            assert!(w[1].1 < w[0].1);
        }
    }
}
