//! Admissible perturbations, the perturbed flow, and the two-sided
//! divergence estimates it satisfies under a bounded-growth certificate.

use crate::expr::Expr;
use crate::growth::GrowthRate;
use crate::linflow::{GrowthCertificate, LinflowError, TransitionEvaluator};
use crate::ode::{self, OdeError, OdeSettings};
use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NonlinearError {
    #[error("perturbation has {got} components, expected {expected}")]
    ComponentCount { got: usize, expected: usize },
    #[error("perturbation does not vanish at the origin: |f({t}, 0)| = {norm:e}")]
    NonzeroAtOrigin { t: f64, norm: f64 },
    #[error("component evaluation failed at t={t}: {message}")]
    Component { t: f64, message: String },
    #[error(transparent)]
    Integrator(#[from] OdeError),
    #[error(transparent)]
    Linear(#[from] LinflowError),
}

/// A time-dependent vector field perturbation `f(t, x)`.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;
    /// Lipschitz budget constant of the admissibility class.
    fn delta_f(&self) -> f64;
    /// Decay exponent of the Lipschitz envelope.
    fn theta(&self) -> f64;
}

/// Expression-backed perturbation in the admissibility class: vanishes
/// at the origin and is Lipschitz with envelope `phi(t)`.
#[derive(Clone)]
pub struct Perturbation {
    components: Arc<Vec<Expr>>,
    n: usize,
    delta_f: f64,
    theta: f64,
}

impl fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Perturbation")
            .field("n", &self.n)
            .field("delta_f", &self.delta_f)
            .field("theta", &self.theta)
            .finish()
    }
}

impl Perturbation {
    /// Build and check that `f(t, 0) = 0` on a spread of sample times.
    pub fn new(
        components: Vec<Expr>,
        n: usize,
        delta_f: f64,
        theta: f64,
    ) -> Result<Self, NonlinearError> {
        if components.len() != n {
            return Err(NonlinearError::ComponentCount {
                got: components.len(),
                expected: n,
            });
        }
        for e in &components {
            if e.max_var_index() > n {
                return Err(NonlinearError::Component {
                    t: 0.0,
                    message: format!("variable x{} exceeds dimension {n}", e.max_var_index()),
                });
            }
        }
        let p = Perturbation {
            components: Arc::new(components),
            n,
            delta_f,
            theta,
        };
        let zero = DVector::zeros(n);
        for t in [-7.0, -2.0, -0.5, 0.0, 0.5, 2.0, 7.0] {
            let v = p.try_eval(t, &zero)?;
            let norm = v.norm();
            if norm > 1e-12 {
                return Err(NonlinearError::NonzeroAtOrigin { t, norm });
            }
        }
        Ok(p)
    }

    pub fn zero(n: usize) -> Self {
        Perturbation {
            components: Arc::new(vec![Expr::Lit(0.0); n]),
            n,
            delta_f: 0.0,
            theta: 0.0,
        }
    }

    fn try_eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>, NonlinearError> {
        let xs: Vec<f64> = x.iter().copied().collect();
        let mut out = DVector::zeros(self.n);
        for (i, e) in self.components.iter().enumerate() {
            out[i] = e.eval(t, &xs).map_err(|err| NonlinearError::Component {
                t,
                message: err.to_string(),
            })?;
        }
        Ok(out)
    }
}

impl VectorField for Perturbation {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.try_eval(t, x)
            .unwrap_or_else(|_| DVector::from_element(self.n, f64::NAN))
    }

    fn delta_f(&self) -> f64 {
        self.delta_f
    }

    fn theta(&self) -> f64 {
        self.theta
    }
}

/// Lipschitz envelope `phi(t) = delta_f mu(t)^(-1 - sign(t) theta) mu'(t)`.
pub fn phi(field: &dyn VectorField, rate: &GrowthRate, t: f64) -> f64 {
    field.delta_f() * rate.pow(t, -1.0 - t.signum() * field.theta()) * rate.deriv(t)
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerSettings {
    pub samples: usize,
    pub seed: u64,
    pub t_radius: f64,
    pub x_radius: f64,
    pub lip_slack: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            samples: 2000,
            seed: 0,
            t_radius: 5.0,
            x_radius: 3.0,
            lip_slack: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AdmissibilityReport {
    pub seed: u64,
    pub samples: usize,
    /// Largest `|f(t,0)|` seen.
    pub worst_origin: f64,
    /// Largest ratio `|f(t,x)-f(t,y)| / (phi(t) |x-y|)`; admissible when
    /// it stays at or below `1 + lip_slack`.
    pub worst_ratio: f64,
    pub worst_ratio_at: (f64, f64),
    pub lip_slack: f64,
}

impl AdmissibilityReport {
    pub fn passed(&self) -> bool {
        self.worst_origin <= 1e-12 && self.worst_ratio <= 1.0 + self.lip_slack
    }
}

/// Sample the two admissibility conditions over random `(t, x, y)`.
pub fn check_admissible(
    field: &dyn VectorField,
    rate: &GrowthRate,
    settings: &SamplerSettings,
) -> AdmissibilityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let n = field.dim();
    let zero = DVector::zeros(n);
    let mut worst_origin: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    let mut worst_at = (0.0, 0.0);
    for _ in 0..settings.samples {
        let t = rng.random_range(-settings.t_radius..settings.t_radius);
        worst_origin = worst_origin.max(field.eval(t, &zero).norm());
        let x = DVector::from_fn(n, |_, _| rng.random_range(-settings.x_radius..settings.x_radius));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-settings.x_radius..settings.x_radius));
        let dist = (&x - &y).norm();
        if dist < 1e-12 {
            continue;
        }
        let df = (field.eval(t, &x) - field.eval(t, &y)).norm();
        let budget = phi(field, rate, t) * dist;
        let ratio = if budget > 0.0 {
            df / budget
        } else if df > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst_at = (t, dist);
        }
    }
    AdmissibilityReport {
        seed: settings.seed,
        samples: settings.samples,
        worst_origin,
        worst_ratio,
        worst_ratio_at: worst_at,
        lip_slack: settings.lip_slack,
    }
}

/// Flow of the full system `x' = A(t)x + f(t,x)` by direct adaptive
/// integration.
pub struct Flow<'a> {
    pub ev: &'a TransitionEvaluator,
    pub field: &'a dyn VectorField,
    pub settings: OdeSettings,
}

impl<'a> Flow<'a> {
    pub fn new(ev: &'a TransitionEvaluator, field: &'a dyn VectorField) -> Self {
        Flow {
            ev,
            field,
            settings: OdeSettings {
                rtol: 1e-11,
                atol: 1e-13,
                ..OdeSettings::default()
            },
        }
    }

    fn rhs(&self) -> impl Fn(f64, &DVector<f64>) -> DVector<f64> + '_ {
        let sys = self.ev.system();
        move |t: f64, x: &DVector<f64>| match sys.a_mat(t) {
            Ok(a) => a * x + self.field.eval(t, x),
            Err(_) => DVector::from_element(x.len(), f64::NAN),
        }
    }

    /// `x(t, tau, x0)`.
    pub fn solve(&self, t: f64, tau: f64, x0: &DVector<f64>) -> Result<DVector<f64>, NonlinearError> {
        ode::integrate(&self.rhs(), tau, t, x0, &self.settings).map_err(NonlinearError::from)
    }

    /// Trajectory sampled on a monotone grid starting at the initial time.
    pub fn solve_path(&self, grid: &[f64], x0: &DVector<f64>) -> Result<Vec<DVector<f64>>, NonlinearError> {
        ode::integrate_path(&self.rhs(), grid, x0, &self.settings).map_err(NonlinearError::from)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GronwallSample {
    pub t: f64,
    pub tau: f64,
    pub lower_margin: f64,
    pub upper_margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GronwallReport {
    pub worst_lower: Option<GronwallSample>,
    pub worst_upper: Option<GronwallSample>,
    pub samples: usize,
}

impl GronwallReport {
    pub fn passed(&self) -> bool {
        self.worst_margin() >= 0.0
    }

    pub fn worst_margin(&self) -> f64 {
        let lo = self.worst_lower.map(|s| s.lower_margin).unwrap_or(f64::INFINITY);
        let hi = self.worst_upper.map(|s| s.upper_margin).unwrap_or(f64::INFINITY);
        lo.min(hi)
    }
}

/// Check the two-sided divergence bounds on pairs of initial data:
/// margins are logs of the allowed band over the observed separation.
pub fn check_gronwall(
    flow: &Flow,
    rate: &GrowthRate,
    cert: &GrowthCertificate,
    tuples: &[(f64, f64, DVector<f64>, DVector<f64>)],
) -> Result<GronwallReport, NonlinearError> {
    cert.validate().map_err(LinflowError::from)?;
    let lam = cert.lambda_max + cert.d * flow.field.delta_f();
    let mut report = GronwallReport {
        worst_lower: None,
        worst_upper: None,
        samples: 0,
    };
    for (t, tau, x0, y0) in tuples {
        let sep0 = (x0 - y0).norm();
        if sep0 == 0.0 {
            continue;
        }
        let xt = flow.solve(*t, *tau, x0)?;
        let yt = flow.solve(*t, *tau, y0)?;
        let sep = (xt - yt).norm();
        let s = (t - tau).signum();
        let ratio_log = rate.log_eval(*t) - rate.log_eval(*tau);
        let weight = tau.signum() * cert.theta * rate.log_eval(*tau);
        let upper_log = cert.d.ln() + s * lam * ratio_log + weight + sep0.ln();
        let lower_log = -cert.d.ln() - s * lam * ratio_log - weight + sep0.ln();
        let sample = GronwallSample {
            t: *t,
            tau: *tau,
            lower_margin: sep.ln() - lower_log,
            upper_margin: upper_log - sep.ln(),
        };
        report.samples += 1;
        if report
            .worst_lower
            .map(|w| sample.lower_margin < w.lower_margin)
            .unwrap_or(true)
        {
            report.worst_lower = Some(sample);
        }
        if report
            .worst_upper
            .map(|w| sample.upper_margin < w.upper_margin)
            .unwrap_or(true)
        {
            report.worst_upper = Some(sample);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::linflow::{LinearSystem, TransitionSettings};

    fn diag_ev() -> TransitionEvaluator {
        TransitionEvaluator::new(
            LinearSystem::diag_hyperbolic(),
            TransitionSettings {
                window: (-16.0, 16.0),
                ..TransitionSettings::default()
            },
        )
        .unwrap()
    }

    fn sin_perturbation() -> Perturbation {
        Perturbation::new(
            vec![parse("0").unwrap(), parse("0.1*sin(x1)").unwrap()],
            2,
            0.1,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn phi_exponential_rate() {
        let p = Perturbation::new(vec![parse("0").unwrap()], 1, 0.1, 1.0).unwrap();
        let rate = GrowthRate::exponential();
        let expected = 0.1 * (-2.0f64).exp();
        assert!((phi(&p, &rate, 2.0) - expected).abs() < 1e-14);
        // mu(0) = 1 makes phi(0) = delta_f mu'(0)
        assert!((phi(&p, &rate, 0.0) - 0.1) < 1e-14);
    }

    #[test]
    fn phi_polynomial_rate() {
        let p = Perturbation::new(vec![parse("0").unwrap()], 1, 0.1, 0.0).unwrap();
        let rate = GrowthRate::polynomial();
        assert!((phi(&p, &rate, 3.0) - 0.1 / 4.0).abs() < 1e-14);
    }

    #[test]
    fn admissibility_sin_componentwise() {
        let p = Perturbation::new(
            vec![parse("0.1*sin(x1)").unwrap(), parse("0.1*sin(x2)").unwrap()],
            2,
            0.1,
            0.0,
        )
        .unwrap();
        let rate = GrowthRate::exponential();
        let report = check_admissible(&p, &rate, &SamplerSettings::default());
        assert!(report.passed(), "worst ratio {}", report.worst_ratio);
    }

    #[test]
    fn admissibility_quadratic_fails() {
        let p = Perturbation::new(vec![parse("x1^2").unwrap(), parse("0").unwrap()], 2, 0.1, 0.0)
            .unwrap();
        let rate = GrowthRate::exponential();
        let report = check_admissible(&p, &rate, &SamplerSettings::default());
        assert!(!report.passed());
    }

    #[test]
    fn admissibility_zero_field() {
        let p = Perturbation::zero(3);
        let rate = GrowthRate::exponential();
        assert!(check_admissible(&p, &rate, &SamplerSettings::default()).passed());
    }

    #[test]
    fn origin_check_rejects_constant_field() {
        let res = Perturbation::new(vec![parse("1").unwrap()], 1, 0.1, 0.0);
        assert!(matches!(res, Err(NonlinearError::NonzeroAtOrigin { .. })));
    }

    #[test]
    fn zero_field_flow_matches_transition() {
        let ev = diag_ev();
        let p = Perturbation::zero(2);
        let flow = Flow::new(&ev, &p);
        let x0 = DVector::from_column_slice(&[0.7, -0.3]);
        let direct = flow.solve(1.5, -0.5, &x0).unwrap();
        let linear = ev.transition(1.5, -0.5).unwrap() * &x0;
        assert!((direct - linear).norm() < 1e-8);
    }

    #[test]
    fn scalar_linear_perturbation_closed_form() {
        // x' = -x + 0.1 x has solution e^{-0.9 t}
        let sys = LinearSystem::from_fn(
            1,
            |_| nalgebra::DMatrix::from_element(1, 1, -1.0),
            nalgebra::DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let ev = TransitionEvaluator::new(
            sys,
            TransitionSettings {
                window: (-8.0, 8.0),
                ..TransitionSettings::default()
            },
        )
        .unwrap();
        let p = Perturbation::new(vec![parse("0.1*x1").unwrap()], 1, 0.1, 0.0).unwrap();
        let flow = Flow::new(&ev, &p);
        let x = flow.solve(1.0, 0.0, &DVector::from_element(1, 1.0)).unwrap();
        assert!((x[0] - (-0.9f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn group_property() {
        let ev = diag_ev();
        let p = sin_perturbation();
        let flow = Flow::new(&ev, &p);
        let x0 = DVector::from_column_slice(&[1.0, 0.5]);
        let (tau, s, t) = (-0.5, 0.8, 2.0);
        let xs = flow.solve(s, tau, &x0).unwrap();
        let through = flow.solve(t, s, &xs).unwrap();
        let direct = flow.solve(t, tau, &x0).unwrap();
        assert!((through - direct).norm() < 1e-7);
        // identity at equal times
        let same = flow.solve(tau, tau, &x0).unwrap();
        assert_eq!(same, x0);
    }

    #[test]
    fn gronwall_zero_field_equalities() {
        let ev = diag_ev();
        let p = Perturbation::zero(2);
        let flow = Flow::new(&ev, &p);
        let rate = GrowthRate::exponential();
        let cert = GrowthCertificate {
            d: 1.0,
            lambda_max: 1.0,
            theta: 0.0,
            local: None,
        };
        let tuples = vec![
            (
                1.0,
                0.0,
                DVector::from_column_slice(&[1.0, 0.2]),
                DVector::from_column_slice(&[0.5, -0.2]),
            ),
            (
                -2.0,
                0.5,
                DVector::from_column_slice(&[0.3, 0.9]),
                DVector::from_column_slice(&[0.1, 0.4]),
            ),
        ];
        let report = check_gronwall(&flow, &rate, &cert, &tuples).unwrap();
        assert!(report.worst_margin() >= -1e-9, "margin {}", report.worst_margin());
    }

    #[test]
    fn gronwall_undersized_rate_fails_and_names_tuple() {
        let ev = diag_ev();
        let p = sin_perturbation();
        let flow = Flow::new(&ev, &p);
        let rate = GrowthRate::exponential();
        let cert = GrowthCertificate {
            d: 1.0,
            lambda_max: 0.3,
            theta: 0.0,
            local: None,
        };
        let tuples = vec![(
            3.0,
            0.0,
            DVector::from_column_slice(&[0.0, 1.0]),
            DVector::from_column_slice(&[0.0, 0.5]),
        )];
        let report = check_gronwall(&flow, &rate, &cert, &tuples).unwrap();
        assert!(!report.passed());
        let worst = report.worst_upper.unwrap();
        assert_eq!((worst.t, worst.tau), (3.0, 0.0));
    }
}
