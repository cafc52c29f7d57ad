//! The decoupling change of variables built from foliation leaves: a map
//! that splits the perturbed system into independent contracted and
//! expanded subsystems, with its fixed-point inverse and the identities
//! that certify the split.

use crate::linflow::TransitionProvider;
use crate::manifolds::{BaseTrajectory, LpContext, ManifoldError, Side};
use crate::nonlinear::{Flow, NonlinearError};
use crate::ode::{self, OdeSettings};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("leaf Lipschitz budgets too large for a contraction: {sum} >= 1")]
    LipschitzBudget { sum: f64 },
    #[error("inverse fixed point did not converge: delta {last_delta:e} after {iterations} iterations")]
    InverseNotConverged { iterations: usize, last_delta: f64 },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Nonlinear(#[from] NonlinearError),
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSettings {
    pub fp_tol: f64,
    pub max_iter: usize,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            fp_tol: 1e-8,
            max_iter: 60,
        }
    }
}

/// Forward split map and its fixed-point inverse. The context is
/// expected to carry the straightened field; building from an
/// unstraightened one is allowed (the conjugation checks will show the
/// defect).
pub struct SplitMap<'a> {
    pub cx: &'a LpContext<'a>,
    pub settings: SplitSettings,
    /// Sum of the two leaf Lipschitz budgets; must stay below one for
    /// the inverse iteration.
    pub lip_sum: f64,
}

impl<'a> SplitMap<'a> {
    pub fn new(cx: &'a LpContext<'a>, settings: SplitSettings) -> Result<Self, SplitError> {
        let gates = cx.gates();
        let dtf = gates.contraction_factor;
        let d_s = cx.ev.system().stable_dim();
        let d_u = cx.ev.system().unstable_dim();
        let mut lip_sum = 0.0;
        if d_u > 0 {
            lip_sum += crate::manifolds::lip_stable_graph(
                cx.cert,
                cx.field.delta_f(),
                cx.field.theta(),
                dtf,
            );
        }
        if d_s > 0 {
            lip_sum += crate::manifolds::lip_unstable_graph(
                cx.cert,
                cx.field.delta_f(),
                cx.field.theta(),
                dtf,
            );
        }
        if lip_sum >= 1.0 {
            return Err(SplitError::LipschitzBudget { sum: lip_sum });
        }
        Ok(SplitMap {
            cx,
            settings,
            lip_sum,
        })
    }

    fn bases(
        &self,
        t: f64,
        x: &DVector<f64>,
    ) -> Result<(Option<BaseTrajectory>, Option<BaseTrajectory>), SplitError> {
        let d_s = self.cx.ev.system().stable_dim();
        let d_u = self.cx.ev.system().unstable_dim();
        let fwd = if d_u > 0 {
            Some(self.cx.base_trajectory(t, x, Side::Stable)?)
        } else {
            None
        };
        let bwd = if d_s > 0 {
            Some(self.cx.base_trajectory(t, x, Side::Unstable)?)
        } else {
            None
        };
        Ok((fwd, bwd))
    }

    /// Leaf values `h_s` (through the forward base) and `h_u` (backward
    /// base) summed; trivial sides contribute the matching projection of
    /// the base point.
    fn leaves(
        &self,
        fwd: &Option<BaseTrajectory>,
        bwd: &Option<BaseTrajectory>,
        zeta_s: &DVector<f64>,
        zeta_u: &DVector<f64>,
        x_for_trivial: &DVector<f64>,
        pi: &DMatrix<f64>,
    ) -> Result<DVector<f64>, SplitError> {
        let mut out = DVector::zeros(self.cx.ev.dim());
        match fwd {
            Some(base) => out += self.cx.solve_leaf_with_base(base, zeta_s)?.h,
            None => out += x_for_trivial - pi * x_for_trivial,
        }
        match bwd {
            Some(base) => out += self.cx.solve_leaf_with_base(base, zeta_u)?.h,
            None => out += pi * x_for_trivial,
        }
        Ok(out)
    }

    /// Forward map: sum of the two zero-offset leaf values through `x`.
    pub fn forward(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>, SplitError> {
        if x.norm() == 0.0 {
            return Ok(x.clone());
        }
        let pi = self.cx.ev.projection(t).map_err(ManifoldError::from)?;
        let zero = DVector::zeros(x.len());
        let (fwd, bwd) = self.bases(t, x)?;
        self.leaves(&fwd, &bwd, &zero, &zero, x, &pi)
    }

    /// Inverse by Picard iteration seeded with `x` itself.
    pub fn inverse(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>, SplitError> {
        if x.norm() == 0.0 {
            return Ok(x.clone());
        }
        let pi = self.cx.ev.projection(t).map_err(ManifoldError::from)?;
        let x_s = &pi * x;
        let x_u = x - &x_s;
        // bases are fixed throughout the iteration
        let fwd = if self.cx.ev.system().unstable_dim() > 0 {
            Some(self.cx.base_trajectory(t, &x_u, Side::Stable)?)
        } else {
            None
        };
        let bwd = if self.cx.ev.system().stable_dim() > 0 {
            Some(self.cx.base_trajectory(t, &x_s, Side::Unstable)?)
        } else {
            None
        };
        let mut y = x.clone();
        let mut last_delta = f64::NAN;
        for _ in 0..self.settings.max_iter {
            let y_s = &pi * &y;
            let y_u = &y - &y_s;
            let mut next = DVector::zeros(x.len());
            match &fwd {
                Some(base) => next += self.cx.solve_leaf_with_base(base, &y_s)?.h,
                None => next += &x_u,
            }
            match &bwd {
                Some(base) => next += self.cx.solve_leaf_with_base(base, &y_u)?.h,
                None => next += &x_s,
            }
            last_delta = (&next - &y).norm();
            y = next;
            if last_delta < self.settings.fp_tol {
                return Ok(y);
            }
        }
        Err(SplitError::InverseNotConverged {
            iterations: self.settings.max_iter,
            last_delta,
        })
    }
}

/// Flows of the decoupled subsystems: the projected perturbation keeps
/// each subspace invariant.
pub struct DecoupledFlows<'a> {
    pub cx: &'a LpContext<'a>,
    pub settings: OdeSettings,
}

impl<'a> DecoupledFlows<'a> {
    pub fn new(cx: &'a LpContext<'a>) -> Self {
        DecoupledFlows {
            cx,
            settings: OdeSettings {
                rtol: 1e-11,
                atol: 1e-13,
                ..OdeSettings::default()
            },
        }
    }

    fn rhs(&self, side: Side) -> impl Fn(f64, &DVector<f64>) -> DVector<f64> + '_ {
        let ev = self.cx.ev;
        let field = self.cx.field;
        move |t: f64, x: &DVector<f64>| {
            let (Ok(a), Ok(pi)) = (ev.system().a_mat(t), ev.projection(t)) else {
                return DVector::from_element(x.len(), f64::NAN);
            };
            let f = field.eval(t, x);
            match side {
                Side::Stable => a * x + &pi * f,
                Side::Unstable => a * x + &f - &pi * f,
            }
        }
    }

    pub fn solve(
        &self,
        side: Side,
        t: f64,
        tau: f64,
        x0: &DVector<f64>,
    ) -> Result<DVector<f64>, SplitError> {
        ode::integrate(&self.rhs(side), tau, t, x0, &self.settings)
            .map_err(|e| SplitError::Nonlinear(NonlinearError::Integrator(e)))
    }

    /// Distance of the flowed state from its own subspace.
    pub fn subspace_residual(
        &self,
        side: Side,
        t: f64,
        tau: f64,
        x0: &DVector<f64>,
    ) -> Result<f64, SplitError> {
        let x = self.solve(side, t, tau, x0)?;
        let pi = self.cx.ev.projection(t).map_err(ManifoldError::from)?;
        Ok(match side {
            Side::Stable => (&x - &pi * &x).norm(),
            Side::Unstable => (&pi * &x).norm(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitConjugationReport {
    /// worst defect of the forward identity (split of the full flow)
    pub forward_defect: f64,
    pub forward_at: (f64, f64),
    /// worst defect of the inverse identity
    pub inverse_defect: f64,
    pub inverse_at: (f64, f64),
    pub samples: usize,
    pub tol: f64,
}

impl SplitConjugationReport {
    pub fn passed(&self) -> bool {
        self.forward_defect <= self.tol && self.inverse_defect <= self.tol
    }
}

/// Check both split-conjugation identities on sampled `(tau, t, x)`.
pub fn verify_split_conjugation(
    sm: &SplitMap,
    df: &DecoupledFlows,
    samples: &[(f64, f64, DVector<f64>)],
    tol: f64,
) -> Result<SplitConjugationReport, SplitError> {
    let flow = Flow::new(sm.cx.ev, sm.cx.field);
    let mut report = SplitConjugationReport {
        forward_defect: 0.0,
        forward_at: (f64::NAN, f64::NAN),
        inverse_defect: 0.0,
        inverse_at: (f64::NAN, f64::NAN),
        samples: 0,
        tol,
    };
    for (tau, t, x) in samples {
        report.samples += 1;
        let pi_tau = sm.cx.ev.projection(*tau).map_err(ManifoldError::from)?;

        // forward: split of the flowed point equals decoupled flows of the split
        let flowed = flow.solve(*t, *tau, x)?;
        let lhs = sm.forward(*t, &flowed)?;
        let split_tau = sm.forward(*tau, x)?;
        let s_part = &pi_tau * &split_tau;
        let u_part = &split_tau - &s_part;
        let rhs = df.solve(Side::Stable, *t, *tau, &s_part)?
            + df.solve(Side::Unstable, *t, *tau, &u_part)?;
        let defect = (&lhs - &rhs).norm();
        if defect > report.forward_defect {
            report.forward_defect = defect;
            report.forward_at = (*tau, *t);
        }

        // inverse: the full flow through the inverse equals the inverse of
        // the decoupled flows
        let inv = sm.inverse(*tau, x)?;
        let lhs = flow.solve(*t, *tau, &inv)?;
        let xs = &pi_tau * x;
        let xu = x - &xs;
        let dec = df.solve(Side::Stable, *t, *tau, &xs)? + df.solve(Side::Unstable, *t, *tau, &xu)?;
        let rhs = sm.inverse(*t, &dec)?;
        let defect = (&lhs - &rhs).norm();
        if defect > report.inverse_defect {
            report.inverse_defect = defect;
            report.inverse_at = (*tau, *t);
        }
    }
    Ok(report)
}

/// Round-trip defects of the two compositions on samples.
pub fn round_trip_defects(
    sm: &SplitMap,
    samples: &[(f64, DVector<f64>)],
) -> Result<f64, SplitError> {
    let mut worst: f64 = 0.0;
    for (t, x) in samples {
        let there = sm.forward(*t, x)?;
        let back = sm.inverse(*t, &there)?;
        worst = worst.max((&back - x).norm());
        let inv = sm.inverse(*t, x)?;
        let again = sm.forward(*t, &inv)?;
        worst = worst.max((&again - x).norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::growth::GrowthRate;
    use crate::linflow::{
        DichotomyCertificate, LinearSystem, TransitionEvaluator, TransitionSettings,
    };
    use crate::manifolds::{straighten, LpSettings, TableSettings};
    use crate::nonlinear::{Perturbation, VectorField};
    use std::sync::Arc;

    fn diag_ev() -> TransitionEvaluator {
        TransitionEvaluator::new(
            LinearSystem::diag_hyperbolic(),
            TransitionSettings {
                window: (-44.0, 44.0),
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
    fn identity_for_zero_field() {
        let ev = diag_ev();
        let p = Perturbation::zero(2);
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let sm = SplitMap::new(&cx, SplitSettings::default()).unwrap();
        for (t, x) in [(0.0, vec2(1.0, -0.5)), (1.5, vec2(-2.0, 0.3))] {
            let fwd = sm.forward(t, &x).unwrap();
            assert!((&fwd - &x).norm() < 1e-9, "forward not identity");
            let inv = sm.inverse(t, &x).unwrap();
            assert!((&inv - &x).norm() < 1e-9, "inverse not identity");
        }
        // zero maps to zero exactly
        assert_eq!(sm.forward(0.7, &vec2(0.0, 0.0)).unwrap(), vec2(0.0, 0.0));
    }

    type StraightCtx = (
        Arc<TransitionEvaluator>,
        Arc<dyn VectorField>,
        GrowthRate,
        DichotomyCertificate,
    );

    fn straightened_context() -> StraightCtx {
        static CTX: std::sync::OnceLock<StraightCtx> = std::sync::OnceLock::new();
        CTX.get_or_init(build_straightened_context).clone()
    }

    fn build_straightened_context() -> StraightCtx {
        let ev = Arc::new(diag_ev());
        let p: Arc<dyn VectorField> = Arc::new(
            Perturbation::new(
                vec![parse("0").unwrap(), parse("0.1*sin(x1)").unwrap()],
                2,
                0.1,
                0.0,
            )
            .unwrap(),
        );
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let lp = LpSettings {
            dt: 0.1,
            ..LpSettings::default()
        };
        let ts = TableSettings {
            t_range: (-8.0, 8.0),
            t_step: 0.5,
            c_max: 3.5,
            c_step: 0.1,
            detect_zero: true,
        };
        let samples = vec![(0.0, vec2(1.0, 0.5)), (2.0, vec2(-0.6, 1.0))];
        let st = straighten(&ev, p, &rate, &cert, lp, &ts, &samples).unwrap();
        assert!(st.report.passed());
        (ev, st.field, rate, cert)
    }

    #[test]
    fn round_trips_on_straightened_reference() {
        let (ev, flat, rate, cert) = straightened_context();
        let cx = LpContext::new(
            &ev,
            flat.as_ref(),
            &rate,
            &cert,
            LpSettings {
                dt: 0.1,
                ..LpSettings::default()
            },
        );
        let sm = SplitMap::new(&cx, SplitSettings::default()).unwrap();
        assert!(sm.lip_sum < 1.0);
        let samples = vec![
            (0.0, vec2(1.0, 1.0)),
            (1.0, vec2(-1.5, 0.4)),
            (-1.0, vec2(0.2, -1.8)),
        ];
        let worst = round_trip_defects(&sm, &samples).unwrap();
        assert!(worst < 1e-6, "round trip defect {worst}");
    }

    #[test]
    fn decoupled_flow_zero_field_is_projected_transition() {
        let ev = diag_ev();
        let p = Perturbation::zero(2);
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let df = DecoupledFlows::new(&cx);
        let x0 = vec2(0.8, 0.0);
        let got = df.solve(Side::Stable, 1.3, 0.0, &x0).unwrap();
        let want = ev.stable_part(1.3, 0.0).unwrap() * &x0;
        assert!((got - want).norm() < 1e-9);
    }

    #[test]
    fn decoupled_scalar_two_tolerance_consistency() {
        let sys = LinearSystem::from_fn(
            1,
            |_| DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let ev = TransitionEvaluator::new(
            sys,
            TransitionSettings {
                window: (-20.0, 20.0),
                ..TransitionSettings::default()
            },
        )
        .unwrap();
        let p = Perturbation::new(vec![parse("0.1*sin(x1)").unwrap()], 1, 0.1, 0.0).unwrap();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let df = DecoupledFlows::new(&cx);
        let x0 = DVector::from_element(1, 1.0);
        let a = df.solve(Side::Stable, 1.0, 0.0, &x0).unwrap();
        let tight = DecoupledFlows {
            cx: &cx,
            settings: OdeSettings {
                rtol: 1e-13,
                atol: 1e-15,
                ..OdeSettings::default()
            },
        };
        let b = tight.solve(Side::Stable, 1.0, 0.0, &x0).unwrap();
        assert!((a - b).norm() < 1e-8);
    }

    #[test]
    fn subspace_preserved_along_decoupled_flow() {
        let (ev, flat, rate, cert) = straightened_context();
        let cx = LpContext::new(
            &ev,
            flat.as_ref(),
            &rate,
            &cert,
            LpSettings {
                dt: 0.1,
                ..LpSettings::default()
            },
        );
        let df = DecoupledFlows::new(&cx);
        let res = df
            .subspace_residual(Side::Stable, 1.5, 0.0, &vec2(1.0, 0.0))
            .unwrap();
        assert!(res < 1e-8, "stable subspace residual {res}");
        let res = df
            .subspace_residual(Side::Unstable, -1.0, 0.0, &vec2(0.0, 0.7))
            .unwrap();
        assert!(res < 1e-8, "unstable subspace residual {res}");
    }

    #[test]
    fn split_conjugation_straightened_vs_raw() {
        let (ev, flat, rate, cert) = straightened_context();
        let lp = LpSettings {
            dt: 0.1,
            ..LpSettings::default()
        };
        let cx = LpContext::new(&ev, flat.as_ref(), &rate, &cert, lp);
        let sm = SplitMap::new(&cx, SplitSettings::default()).unwrap();
        let df = DecoupledFlows::new(&cx);
        let samples = vec![
            (0.0, 1.0, vec2(0.8, 0.6)),
            (0.5, -0.5, vec2(-1.0, 0.4)),
            (-1.0, 0.5, vec2(0.3, -1.2)),
        ];
        let report = verify_split_conjugation(&sm, &df, &samples, 1e-5).unwrap();
        assert!(report.passed(), "{report:?}");

        // negative control: skipping the straightening leaves a visible defect
        let raw = Perturbation::new(
            vec![parse("0").unwrap(), parse("0.1*sin(x1)").unwrap()],
            2,
            0.1,
            0.0,
        )
        .unwrap();
        let cx_raw = LpContext::new(&ev, &raw, &rate, &cert, lp);
        let sm_raw = SplitMap::new(&cx_raw, SplitSettings::default()).unwrap();
        let df_raw = DecoupledFlows::new(&cx_raw);
        let report = verify_split_conjugation(&sm_raw, &df_raw, &samples, 1e-5).unwrap();
        assert!(
            !report.passed(),
            "raw field should not satisfy the split identities"
        );
        assert!(report.forward_defect.max(report.inverse_defect) > 1e-4);
    }
}
