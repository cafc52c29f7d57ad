//! Growth rates: strictly increasing positive functions with value 1 at
//! the origin, diverging forward in time and vanishing backward.
//!
//! The exponential rate recovers the classical setting; rates derived
//! from a monotone map on the half line give polynomial and other
//! tempered behaviour. Every rate carries its derivative: the library
//! core never differentiates numerically, finite differences appear
//! only in validators.

use crate::expr::{self, Expr};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    Exponential,
    Polynomial,
    ChiDerived,
    Custom,
}

/// A growth rate with its derivative.
#[derive(Clone)]
pub struct GrowthRate {
    eval: ScalarFn,
    deriv: ScalarFn,
    kind: RateKind,
}

impl fmt::Debug for GrowthRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GrowthRate").field("kind", &self.kind).finish()
    }
}

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error("chi(0) must equal 1, got {value}")]
    ChiNotNormalized { value: f64 },
    #[error("chi must be strictly increasing, violated near t={t}")]
    ChiNotIncreasing { t: f64 },
    #[error("expression error: {0}")]
    Expr(String),
    #[error("rate expression must not reference state variables")]
    StateDependentRate,
}

/// A monotone map `[0, inf) -> [1, inf)` with its derivative, used to
/// build mirrored growth rates.
#[derive(Clone)]
pub struct ChiMap {
    pub eval: ScalarFn,
    pub deriv: ScalarFn,
}

impl ChiMap {
    pub fn new(
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ChiMap {
            eval: Arc::new(eval),
            deriv: Arc::new(deriv),
        }
    }

    /// Build a chi map from an expression in `t` by differentiating the
    /// coefficient AST.
    pub fn from_expr(e: &Expr) -> Result<Self, GrowthError> {
        if e.max_var_index() > 0 {
            return Err(GrowthError::StateDependentRate);
        }
        let de = diff_t(e);
        let e = e.clone();
        Ok(ChiMap {
            eval: Arc::new(move |t| e.eval(t, &[]).unwrap_or(f64::NAN)),
            deriv: Arc::new(move |t| de.eval(t, &[]).unwrap_or(f64::NAN)),
        })
    }
}

impl GrowthRate {
    /// The exponential rate `e^t`.
    pub fn exponential() -> GrowthRate {
        GrowthRate {
            eval: Arc::new(f64::exp),
            deriv: Arc::new(f64::exp),
            kind: RateKind::Exponential,
        }
    }

    /// The polynomial rate built from `chi(t) = t + 1`.
    pub fn polynomial() -> GrowthRate {
        let mut rate = Self::from_chi(ChiMap::new(|t| t + 1.0, |_| 1.0)).unwrap();
        rate.kind = RateKind::Polynomial;
        rate
    }

    /// Mirror a monotone map on the half line into a full growth rate:
    /// `mu(t) = chi(t)` for `t >= 0` and `mu(t) = 1/chi(-t)` for `t <= 0`,
    /// with the derivative on the left branch from the chain rule.
    pub fn from_chi(chi: ChiMap) -> Result<GrowthRate, GrowthError> {
        let at0 = (chi.eval)(0.0);
        if (at0 - 1.0).abs() > 1e-12 {
            return Err(GrowthError::ChiNotNormalized { value: at0 });
        }
        for w in [0.5, 1.0, 2.0, 5.0, 10.0] {
            if (chi.eval)(w) <= (chi.eval)(w * 0.5) {
                return Err(GrowthError::ChiNotIncreasing { t: w });
            }
        }
        let c_eval = chi.eval.clone();
        let c_deriv = chi.deriv.clone();
        let eval = move |t: f64| {
            if t >= 0.0 {
                (c_eval)(t)
            } else {
                1.0 / (c_eval)(-t)
            }
        };
        let c_eval2 = chi.eval.clone();
        let deriv = move |t: f64| {
            if t >= 0.0 {
                (c_deriv)(t)
            } else {
                let c = (c_eval2)(-t);
                (c_deriv)(-t) / (c * c)
            }
        };
        Ok(GrowthRate {
            eval: Arc::new(eval),
            deriv: Arc::new(deriv),
            kind: RateKind::ChiDerived,
        })
    }

    /// A rate from explicit value and derivative functions.
    pub fn custom(
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> GrowthRate {
        GrowthRate {
            eval: Arc::new(eval),
            deriv: Arc::new(deriv),
            kind: RateKind::Custom,
        }
    }

    /// Time-reversed rate `t -> 1/mu(-t)`. Used when the expansive side
    /// of a system is handled by running the stable machinery backward.
    pub fn reversed(&self) -> GrowthRate {
        let e = self.eval.clone();
        let d = self.deriv.clone();
        let e2 = self.eval.clone();
        GrowthRate {
            eval: Arc::new(move |t| 1.0 / (e)(-t)),
            deriv: Arc::new(move |t| {
                let m = (e2)(-t);
                (d)(-t) / (m * m)
            }),
            kind: RateKind::Custom,
        }
    }

    pub fn kind(&self) -> RateKind {
        self.kind
    }

    /// `mu(t)`.
    pub fn eval(&self, t: f64) -> f64 {
        (self.eval)(t)
    }

    /// `mu'(t)`.
    pub fn deriv(&self, t: f64) -> f64 {
        (self.deriv)(t)
    }

    /// `log mu(t)`.
    pub fn log_eval(&self, t: f64) -> f64 {
        self.eval(t).ln()
    }

    /// `mu(t)^p`, computed in log space to avoid overflow for large windows.
    pub fn pow(&self, t: f64, p: f64) -> f64 {
        (p * self.log_eval(t)).exp()
    }

    /// `(mu(t)/mu(s))^p` in log space.
    pub fn ratio_pow(&self, t: f64, s: f64, p: f64) -> f64 {
        (p * (self.log_eval(t) - self.log_eval(s))).exp()
    }
}

/// Status of a single validation item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct RateCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct RateReport {
    pub checks: Vec<RateCheck>,
}

impl RateReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }
}

/// Settings for [`validate`]. `t_big` is the finite-sample proxy for the
/// limits at infinity: the magnitude thresholds apply only where the grid
/// actually reaches `±t_big`.
#[derive(Debug, Clone, Copy)]
pub struct ValidateSettings {
    pub t_big: f64,
    pub deriv_rtol: f64,
    pub deriv_atol: f64,
}

impl Default for ValidateSettings {
    fn default() -> Self {
        ValidateSettings {
            t_big: 20.0,
            deriv_rtol: 1e-6,
            deriv_atol: 1e-9,
        }
    }
}

/// Validate a growth rate on a sorted grid: positivity, normalization at
/// the origin, strict monotonicity, derivative consistency against a
/// central finite difference, and the endpoint magnitude proxies.
pub fn validate(rate: &GrowthRate, grid: &[f64], settings: &ValidateSettings) -> RateReport {
    let mut checks = Vec::new();
    let push = |checks: &mut Vec<RateCheck>, name, ok: bool, detail: String| {
        checks.push(RateCheck {
            name,
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            detail,
        });
    };

    let mut positive = true;
    let mut worst_pos = f64::INFINITY;
    for &t in grid {
        let v = rate.eval(t);
        if !(v > 0.0) || !v.is_finite() {
            positive = false;
        }
        worst_pos = worst_pos.min(v);
    }
    push(&mut checks, "positivity", positive, format!("min mu = {worst_pos:e}"));

    let at0 = rate.eval(0.0);
    push(
        &mut checks,
        "normalized_at_origin",
        (at0 - 1.0).abs() <= 1e-10,
        format!("mu(0) = {at0}"),
    );

    let mut increasing = true;
    let mut worst_gap = f64::INFINITY;
    for w in grid.windows(2) {
        let gap = rate.eval(w[1]) - rate.eval(w[0]);
        worst_gap = worst_gap.min(gap);
        if gap <= 0.0 {
            increasing = false;
        }
    }
    push(
        &mut checks,
        "strictly_increasing",
        increasing,
        format!("min successive gap = {worst_gap:e}"),
    );

    let mut deriv_ok = true;
    let mut worst_rel = 0.0f64;
    let mut nonneg = true;
    for &t in grid {
        let d = rate.deriv(t);
        if d < 0.0 {
            nonneg = false;
        }
        // small step: chi-derived rates are C^1 but can kink in the second
        // derivative at the origin, where the central difference is only O(h)
        let h = 1e-7 * (1.0 + t.abs());
        let fd = (rate.eval(t + h) - rate.eval(t - h)) / (2.0 * h);
        let err = (d - fd).abs();
        let tol = settings.deriv_atol + settings.deriv_rtol * fd.abs().max(d.abs());
        if err > tol {
            deriv_ok = false;
        }
        if fd.abs() > 0.0 {
            worst_rel = worst_rel.max(err / fd.abs().max(1e-300));
        }
    }
    push(&mut checks, "derivative_nonnegative", nonneg, String::new());
    push(
        &mut checks,
        "derivative_consistent",
        deriv_ok,
        format!("worst relative FD mismatch = {worst_rel:e}"),
    );

    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    if hi >= settings.t_big {
        let v = rate.eval(settings.t_big);
        push(
            &mut checks,
            "diverges_forward",
            v > 1e3,
            format!("mu({}) = {v:e}", settings.t_big),
        );
    } else {
        checks.push(RateCheck {
            name: "diverges_forward",
            status: CheckStatus::Skipped,
            detail: format!("grid max {hi} below t_big {}", settings.t_big),
        });
    }
    if lo <= -settings.t_big {
        let v = rate.eval(-settings.t_big);
        push(
            &mut checks,
            "vanishes_backward",
            v < 1e-3,
            format!("mu({}) = {v:e}", -settings.t_big),
        );
    } else {
        checks.push(RateCheck {
            name: "vanishes_backward",
            status: CheckStatus::Skipped,
            detail: format!("grid min {lo} above -t_big {}", settings.t_big),
        });
    }

    RateReport { checks }
}

/// Differentiate a state-free coefficient expression with respect to `t`.
/// `sign` differentiates to zero and `abs` to `sign`, which is exact away
/// from the kink; growth-rate inputs are smooth where it matters.
pub(crate) fn diff_t(e: &Expr) -> Expr {
    use expr::Func;
    match e {
        Expr::Lit(_) | Expr::Var(_) => Expr::Lit(0.0),
        Expr::Time => Expr::Lit(1.0),
        Expr::Neg(a) => Expr::Neg(Box::new(diff_t(a))),
        Expr::Add(a, b) => Expr::Add(Box::new(diff_t(a)), Box::new(diff_t(b))),
        Expr::Sub(a, b) => Expr::Sub(Box::new(diff_t(a)), Box::new(diff_t(b))),
        Expr::Mul(a, b) => Expr::Add(
            Box::new(Expr::Mul(Box::new(diff_t(a)), b.clone())),
            Box::new(Expr::Mul(a.clone(), Box::new(diff_t(b)))),
        ),
        Expr::Div(a, b) => Expr::Div(
            Box::new(Expr::Sub(
                Box::new(Expr::Mul(Box::new(diff_t(a)), b.clone())),
                Box::new(Expr::Mul(a.clone(), Box::new(diff_t(b)))),
            )),
            Box::new(Expr::Mul(b.clone(), b.clone())),
        ),
        Expr::Pow(a, p) => Expr::Mul(
            Box::new(Expr::Mul(
                Box::new(Expr::Lit(*p)),
                Box::new(Expr::Pow(a.clone(), p - 1.0)),
            )),
            Box::new(diff_t(a)),
        ),
        Expr::Apply(f, a) => {
            let da = diff_t(a);
            let outer = match f {
                Func::Sin => Expr::Apply(Func::Cos, a.clone()),
                Func::Cos => Expr::Neg(Box::new(Expr::Apply(Func::Sin, a.clone()))),
                Func::Tan => Expr::Div(
                    Box::new(Expr::Lit(1.0)),
                    Box::new(Expr::Pow(Box::new(Expr::Apply(Func::Cos, a.clone())), 2.0)),
                ),
                Func::Exp => Expr::Apply(Func::Exp, a.clone()),
                Func::Log => Expr::Div(Box::new(Expr::Lit(1.0)), a.clone()),
                Func::Sqrt => Expr::Div(
                    Box::new(Expr::Lit(0.5)),
                    Box::new(Expr::Apply(Func::Sqrt, a.clone())),
                ),
                Func::Abs => Expr::Apply(Func::Sign, a.clone()),
                Func::Tanh => Expr::Sub(
                    Box::new(Expr::Lit(1.0)),
                    Box::new(Expr::Pow(Box::new(Expr::Apply(Func::Tanh, a.clone())), 2.0)),
                ),
                Func::Sign => Expr::Lit(0.0),
            };
            Expr::Mul(Box::new(outer), Box::new(da))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = ((hi - lo) / step).round() as usize;
        (0..=n).map(|i| lo + step * i as f64).collect()
    }

    #[test]
    fn exponential_values() {
        let r = GrowthRate::exponential();
        assert_eq!(r.eval(0.0), 1.0);
        assert!((r.eval(1.0) - std::f64::consts::E).abs() < 1e-12);
        for t in [-2.0, 0.0, 3.0] {
            assert_eq!(r.deriv(t), r.eval(t));
        }
    }

    #[test]
    fn chi_linear_values() {
        let r = GrowthRate::polynomial();
        assert!((r.eval(1.0) - 2.0).abs() < 1e-14);
        assert!((r.eval(-1.0) - 0.5).abs() < 1e-14);
        assert!((r.eval(0.0) - 1.0).abs() < 1e-14);
        // mu'(3) = 1 on the right branch, chain rule on the left
        assert!((r.deriv(3.0) - 1.0).abs() < 1e-14);
        assert!((r.deriv(-3.0) - 1.0 / 16.0).abs() < 1e-14);
    }

    #[test]
    fn chi_symmetry() {
        let r = GrowthRate::polynomial();
        for t in [0.25, 1.0, 3.5, 9.0] {
            assert!((r.eval(t) * r.eval(-t) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn chi_rejects_unnormalized() {
        let res = GrowthRate::from_chi(ChiMap::new(|t| t + 2.0, |_| 1.0));
        assert!(matches!(res, Err(GrowthError::ChiNotNormalized { .. })));
    }

    #[test]
    fn validate_exponential_passes() {
        let r = GrowthRate::exponential();
        let report = validate(&r, &grid(-10.0, 10.0, 0.5), &ValidateSettings::default());
        assert!(report.passed(), "{:?}", report.checks);
    }

    #[test]
    fn validate_negative_slope_fails_positivity() {
        let r = GrowthRate::custom(|t| -t, |_| -1.0);
        let report = validate(&r, &grid(-10.0, 10.0, 0.5), &ValidateSettings::default());
        assert!(!report.passed());
        let pos = report.checks.iter().find(|c| c.name == "positivity").unwrap();
        assert_eq!(pos.status, CheckStatus::Fail);
    }

    #[test]
    fn validate_chi_passes_on_window() {
        let r = GrowthRate::polynomial();
        let report = validate(&r, &grid(-10.0, 10.0, 0.5), &ValidateSettings::default());
        assert!(report.passed(), "{:?}", report.checks);
    }

    #[test]
    fn chi_from_expr_differentiates() {
        let e = crate::expr::parse("t + 1").unwrap();
        let chi = ChiMap::from_expr(&e).unwrap();
        let r = GrowthRate::from_chi(chi).unwrap();
        assert!((r.eval(1.0) - 2.0).abs() < 1e-14);
        assert!((r.deriv(-1.0) - 0.25).abs() < 1e-14);
    }

    #[test]
    fn reversed_rate_axioms() {
        let r = GrowthRate::exponential().reversed();
        assert!((r.eval(0.0) - 1.0).abs() < 1e-14);
        assert!((r.eval(2.0) - 2.0f64.exp()).abs() < 1e-10);
        let p = GrowthRate::polynomial().reversed();
        assert!((p.eval(-1.0) - 0.5).abs() < 1e-14);
        assert!(p.deriv(-1.0) > 0.0);
    }
}
