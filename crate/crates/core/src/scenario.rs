//! Scenario configuration, pipeline assembly, and the stage runners
//! behind the command-line front end. Each stage produces a [`Report`];
//! configuration problems surface as [`ScenarioError`] while failed
//! checks stay inside the report.

use crate::conjugacy::{
    self, check_continuity_envelope, monotone_guard, rate_diagnostics, verify_equivariance,
    verify_inverse, AssembledMaps, ConjugacyError, CrossingSide,
};
use crate::expr;
use crate::growth::{self, ChiMap, GrowthRate, ValidateSettings};
use crate::linflow::{
    fit_dichotomy_constants, verify_bounded_growth, verify_dichotomy, DichotomyCertificate,
    GrowthCertificate, LinearSystem, ProjectionFamily, Reversed, TransitionEvaluator,
    TransitionProvider, TransitionSettings,
};
use crate::lyapunov::{
    check_monotonicity_linear, check_s_properties, check_stable_derivative_identity,
    check_strictness, recover_dichotomy, strict_subspace_constants, QuadraticLyapunov,
    QuadraticSettings, StrictLyapunov, StrictSettings,
};
use crate::manifolds::{
    leaf_invariance_residual, lip_stable_graph, manifold_invariance_residual, straighten,
    LpContext, LpSettings, Side, Straightening, TableSettings,
};
use crate::nonlinear::{check_admissible, check_gronwall, Flow, Perturbation, SamplerSettings, VectorField};
use crate::report::Report;
use crate::sample::BoxSampler;
use crate::splitting::{
    round_trip_defects, verify_split_conjugation, DecoupledFlows, SplitMap, SplitSettings,
};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("configuration error: {0}")]
    Config(String),
}

fn config<E: std::fmt::Display>(e: E) -> ScenarioError {
    ScenarioError::Config(e.to_string())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GrowthSpec {
    Named(String),
    Chi { chi: String },
    Custom { custom: CustomRateSpec },
}

#[derive(Debug, Clone, Deserialize)]
pub struct CustomRateSpec {
    pub mu: String,
    pub dmu: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LinearSpec {
    Preset(String),
    Explicit {
        n: usize,
        #[serde(rename = "A")]
        a: Vec<Vec<String>>,
        pi0: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Deserialize)]
pub struct PerturbationSpec {
    pub f: Vec<String>,
    pub delta_f: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Deserialize, Default)]
pub struct CertificatesSpec {
    pub dichotomy: Option<DichotomyCertificate>,
    pub growth: Option<GrowthCertificate>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct LyapunovSpec {
    pub eta: f64,
    #[serde(rename = "T_cut", default = "default_t_cut")]
    pub t_cut: f64,
    #[serde(default = "default_quad_tol")]
    pub quad_tol: f64,
    #[serde(rename = "T_sup", default = "default_t_sup")]
    pub t_sup: f64,
}

fn default_t_cut() -> f64 {
    30.0
}
fn default_quad_tol() -> f64 {
    1e-8
}
fn default_t_sup() -> f64 {
    30.0
}

impl Default for LyapunovSpec {
    fn default() -> Self {
        LyapunovSpec {
            eta: 0.5,
            t_cut: 30.0,
            quad_tol: 1e-8,
            t_sup: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default)]
pub struct LpSpec {
    pub horizon: Option<f64>,
    pub horizon_cap: f64,
    pub dt: f64,
    pub fp_tol: f64,
    pub max_iter: usize,
    pub varrho: Option<f64>,
    pub table_dt: f64,
    pub table_t_step: f64,
    pub table_c_max: f64,
    pub table_c_step: f64,
}

impl Default for LpSpec {
    fn default() -> Self {
        LpSpec {
            horizon: None,
            horizon_cap: 40.0,
            dt: 0.05,
            fp_tol: 1e-8,
            max_iter: 80,
            varrho: None,
            table_dt: 0.1,
            table_t_step: 0.5,
            table_c_max: 4.0,
            table_c_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default)]
pub struct SampleSpec {
    pub x_radius: f64,
    pub tau_radius: f64,
    pub t_offset: f64,
    pub grid_radius: f64,
    pub grid_step: f64,
    pub gronwall_count: usize,
    pub round_trip_count: usize,
    pub equivariance_count: usize,
    pub e2e_count: usize,
    pub generic_count: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            x_radius: 2.0,
            tau_radius: 2.0,
            t_offset: 2.0,
            grid_radius: 10.0,
            grid_step: 0.5,
            gronwall_count: 100,
            round_trip_count: 50,
            equivariance_count: 30,
            e2e_count: 20,
            generic_count: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default)]
pub struct WindowSpec {
    pub min: f64,
    pub max: f64,
    pub lattice: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            min: -48.0,
            max: 48.0,
            lattice: 0.05,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub growth: GrowthSpec,
    pub linear: LinearSpec,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default)]
    pub certificates: Option<CertificatesSpec>,
    #[serde(default)]
    pub lyapunov: Option<LyapunovSpec>,
    #[serde(default)]
    pub lp: Option<LpSpec>,
    #[serde(default)]
    pub samples: Option<SampleSpec>,
    #[serde(default)]
    pub window: Option<WindowSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ScenarioSpec {
    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A fully built scenario: rate, cached transitions, perturbation and
/// resolved settings.
pub struct Scenario {
    pub name: String,
    pub rate: GrowthRate,
    pub ev: Arc<TransitionEvaluator>,
    pub field: Arc<dyn VectorField>,
    pub has_perturbation: bool,
    pub dich_cert: DichotomyCertificate,
    pub dich_fitted: bool,
    /// true when the certificate's expansive side is a formal mirror
    /// (the projection has full rank and no expanded directions exist)
    pub formal_unstable: bool,
    pub growth_cert: GrowthCertificate,
    pub lyapunov: LyapunovSpec,
    pub lp: LpSpec,
    pub samples: SampleSpec,
    pub seed: u64,
}

fn build_rate(spec: &GrowthSpec) -> Result<GrowthRate, ScenarioError> {
    match spec {
        GrowthSpec::Named(name) => match name.as_str() {
            "exp" => Ok(GrowthRate::exponential()),
            "poly" => Ok(GrowthRate::polynomial()),
            other => Err(ScenarioError::Config(format!(
                "unknown growth rate `{other}` (expected \"exp\", \"poly\", {{\"chi\": ...}} or {{\"custom\": ...}})"
            ))),
        },
        GrowthSpec::Chi { chi } => {
            let e = expr::parse(chi).map_err(config)?;
            let map = ChiMap::from_expr(&e).map_err(config)?;
            GrowthRate::from_chi(map).map_err(config)
        }
        GrowthSpec::Custom { custom } => {
            let mu = expr::parse(&custom.mu).map_err(config)?;
            let dmu = expr::parse(&custom.dmu).map_err(config)?;
            if mu.max_var_index() > 0 || dmu.max_var_index() > 0 {
                return Err(ScenarioError::Config(
                    "growth rate expressions may only depend on t".into(),
                ));
            }
            Ok(GrowthRate::custom(
                move |t| mu.eval(t, &[]).unwrap_or(f64::NAN),
                move |t| dmu.eval(t, &[]).unwrap_or(f64::NAN),
            ))
        }
    }
}

fn build_system(spec: &LinearSpec) -> Result<LinearSystem, ScenarioError> {
    match spec {
        LinearSpec::Preset(name) => match name.as_str() {
            "diag_hyperbolic" => Ok(LinearSystem::diag_hyperbolic()),
            "bv_scalar_stable" => Ok(LinearSystem::bv_scalar_stable()),
            other => Err(ScenarioError::Config(format!(
                "unknown linear preset `{other}`"
            ))),
        },
        LinearSpec::Explicit { n, a, pi0 } => {
            if *n == 0 || *n > 8 {
                return Err(ScenarioError::Config(format!(
                    "dimension must be between 1 and 8, got {n}"
                )));
            }
            let mut rows = Vec::with_capacity(*n);
            for row in a {
                let mut parsed = Vec::with_capacity(*n);
                for src in row {
                    parsed.push(expr::parse(src).map_err(config)?);
                }
                rows.push(parsed);
            }
            if pi0.len() != *n || pi0.iter().any(|r| r.len() != *n) {
                return Err(ScenarioError::Config("pi0 must be an n-by-n matrix".into()));
            }
            let flat: Vec<f64> = pi0.iter().flatten().copied().collect();
            let pi0 = DMatrix::from_row_slice(*n, *n, &flat);
            LinearSystem::from_exprs(*n, rows, pi0).map_err(config)
        }
    }
}

pub fn build(spec: &ScenarioSpec, seed_override: Option<u64>) -> Result<Scenario, ScenarioError> {
    let rate = build_rate(&spec.growth)?;
    let sys = build_system(&spec.linear)?;
    let n = sys.dim();
    let window = spec.window.unwrap_or_default();
    let ev = Arc::new(
        TransitionEvaluator::new(
            sys,
            TransitionSettings {
                window: (window.min, window.max),
                lattice_step: window.lattice,
                ..TransitionSettings::default()
            },
        )
        .map_err(config)?,
    );

    let (field, has_perturbation): (Arc<dyn VectorField>, bool) = match &spec.perturbation {
        Some(p) => {
            let mut components = Vec::with_capacity(p.f.len());
            for src in &p.f {
                components.push(expr::parse(src).map_err(config)?);
            }
            let pert =
                Perturbation::new(components, n, p.delta_f, p.theta).map_err(config)?;
            (Arc::new(pert), true)
        }
        None => (Arc::new(Perturbation::zero(n)), false),
    };

    let certs = spec.certificates.clone().unwrap_or_default();
    let (dich_cert, dich_fitted, formal_unstable) = match certs.dichotomy {
        Some(c) => {
            c.validate().map_err(config)?;
            (c, false, ev.system().unstable_dim() == 0)
        }
        None => {
            let grid = grid(-6.0, 6.0, 0.5);
            let fit = fit_dichotomy_constants(&ev, &rate, &grid).map_err(config)?;
            match fit.certificate() {
                Ok(c) => (c, true, false),
                Err(_) => {
                    // one-sided system: mirror the present side formally
                    let (lam, weight, formal) = match (fit.stable, fit.unstable) {
                        (Some(s), None) => (s.lambda, s.weight, true),
                        (None, Some(u)) => (-u.lambda, u.weight, true),
                        _ => {
                            return Err(ScenarioError::Config(
                                "dichotomy fit failed on both sides".into(),
                            ))
                        }
                    };
                    let c = DichotomyCertificate {
                        d: fit.d,
                        lambda_s: lam.min(-1e-3),
                        lambda_u: (-lam).max(1e-3),
                        nu: weight,
                        omega: weight,
                    };
                    c.validate().map_err(config)?;
                    (c, true, formal)
                }
            }
        }
    };

    let growth_cert = match certs.growth {
        Some(c) => {
            c.validate().map_err(config)?;
            c
        }
        None => GrowthCertificate {
            d: (2.0 * dich_cert.d).max(1.0),
            lambda_max: (-dich_cert.lambda_s).max(dich_cert.lambda_u),
            theta: dich_cert.nu.max(dich_cert.omega),
            local: None,
        },
    };

    let lyapunov = spec.lyapunov.unwrap_or_default();
    let bound = (-dich_cert.lambda_s).min(dich_cert.lambda_u);
    if !(lyapunov.eta > 0.0 && lyapunov.eta < bound) {
        return Err(ScenarioError::Config(format!(
            "eta must lie in (0, {bound}), got {}",
            lyapunov.eta
        )));
    }

    Ok(Scenario {
        name: spec.name.clone().unwrap_or_else(|| "unnamed".into()),
        rate,
        ev,
        field,
        has_perturbation,
        dich_cert,
        dich_fitted,
        formal_unstable,
        growth_cert,
        lyapunov,
        lp: spec.lp.unwrap_or_default(),
        samples: spec.samples.unwrap_or_default(),
        seed: seed_override.or(spec.seed).unwrap_or(0),
    })
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round().max(1.0) as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

impl Scenario {
    fn lp_settings(&self) -> LpSettings {
        LpSettings {
            horizon: self.lp.horizon,
            horizon_cap: self.lp.horizon_cap,
            dt: self.lp.dt,
            fp_tol: self.lp.fp_tol,
            max_iter: self.lp.max_iter,
            varrho: self.lp.varrho,
        }
    }

    fn table_lp_settings(&self) -> LpSettings {
        LpSettings {
            dt: self.lp.table_dt,
            ..self.lp_settings()
        }
    }

    fn quad_settings(&self) -> QuadraticSettings {
        QuadraticSettings {
            t_cut: self.lyapunov.t_cut,
            quad_tol: self.lyapunov.quad_tol,
            cache_step: 0.05,
        }
    }

    fn verify_grid(&self) -> Vec<f64> {
        grid(
            -self.samples.grid_radius,
            self.samples.grid_radius,
            self.samples.grid_step,
        )
    }

    pub fn two_sided(&self) -> bool {
        self.ev.system().stable_dim() > 0 && self.ev.system().unstable_dim() > 0
    }

    /// Hypothesis gates of the main statement, recorded on every report
    /// that runs nonlinear machinery.
    fn push_hypothesis_gates(&self, report: &mut Report) {
        let cx = LpContext::new(
            &self.ev,
            self.field.as_ref(),
            &self.rate,
            &self.dich_cert,
            self.lp_settings(),
        );
        let g = cx.gates();
        report.push_gate(
            "gate.theta_dominates",
            "theta >= max(nu, omega)",
            g.theta,
            self.dich_cert.nu.max(self.dich_cert.omega),
            g.theta_dominates,
        );
        if self.ev.system().stable_dim() > 0 {
            report.push_gate(
                "gate.stable_rate_gap",
                "lambda_s < nu - theta",
                g.stable_gap,
                0.0,
                g.stable_gap_ok,
            );
        } else {
            report.push_gate_not_applicable("gate.stable_rate_gap", "no contracted directions");
        }
        if self.ev.system().unstable_dim() > 0 && !self.formal_unstable {
            report.push_gate(
                "gate.unstable_rate_gap",
                "lambda_u > theta - omega",
                g.unstable_gap,
                0.0,
                g.unstable_gap_ok,
            );
        } else {
            report.push_gate_not_applicable("gate.unstable_rate_gap", "no expanded directions");
        }
        report.push_gate(
            "gate.contraction_factor",
            "delta_f * D * (1/(-lambda_s+nu-theta) + 1/(lambda_u-theta+omega)) < 1",
            g.contraction_factor,
            1.0,
            g.contraction_ok,
        );
        let (threshold, ok) = monotone_guard(&self.dich_cert, self.lyapunov.eta, self.field.delta_f());
        report.push_gate(
            "gate.monotone_guard",
            "delta_f < eta / (2 D^2)",
            self.field.delta_f(),
            threshold,
            ok,
        );
    }
}

/// Growth-rate validation, admissibility, and certificate verification.
pub fn run_validate(sc: &Scenario, tol_scale: f64) -> Result<Report, ScenarioError> {
    let mut report = Report::new("validate", &sc.name, sc.seed, tol_scale);
    let margin_tol = 1e-7 * tol_scale;

    let vg = sc.verify_grid();
    let rate_report = growth::validate(&sc.rate, &vg, &ValidateSettings::default());
    for check in &rate_report.checks {
        let passed = check.status != growth::CheckStatus::Fail;
        report.push_check(
            &format!("growth.{}", check.name),
            &format!("{} [{}]", check.detail, status_str(check.status)),
            passed,
            None,
        );
    }

    if sc.has_perturbation {
        let adm = check_admissible(
            sc.field.as_ref(),
            &sc.rate,
            &SamplerSettings {
                seed: sc.seed.wrapping_add(1),
                t_radius: sc.samples.tau_radius + sc.samples.t_offset,
                x_radius: sc.samples.x_radius,
                ..SamplerSettings::default()
            },
        );
        report.push_check_with_worst(
            "perturbation.admissible",
            "vanishes at the origin and respects the Lipschitz envelope",
            adm.passed(),
            Some(1.0 + adm.lip_slack - adm.worst_ratio),
            &adm,
        );
    }

    let fam = ProjectionFamily::new(&sc.ev);
    let mut worst_idem: f64 = 0.0;
    let mut worst_comm: f64 = 0.0;
    let mut worst_gen: f64 = 0.0;
    let probe_ts = [-2.0, 0.0, 1.0, 3.0];
    for &t in &probe_ts {
        worst_idem = worst_idem.max(fam.idempotency_residual(t).map_err(config)?);
        worst_gen = worst_gen.max(fam.generator_residual(t, 1e-4).map_err(config)?);
        for &s in &probe_ts {
            worst_comm = worst_comm.max(fam.commutation_residual(t, s).map_err(config)?);
        }
    }
    report.push_check(
        "projection.idempotent",
        "pi(t)^2 = pi(t) on probes",
        worst_idem < 1e-8 * tol_scale,
        Some(1e-8 * tol_scale - worst_idem),
    );
    report.push_check(
        "projection.commutes_with_flow",
        "pi(t) Psi(t,s) = Psi(t,s) pi(s) on probes",
        worst_comm < 1e-7 * tol_scale,
        Some(1e-7 * tol_scale - worst_comm),
    );
    report.push_check(
        "projection.generator_identity",
        "d pi/dt = A pi - pi A against finite differences",
        worst_gen < 1e-5 * tol_scale,
        Some(1e-5 * tol_scale - worst_gen),
    );

    // cocycle and inverse residuals on a modest box
    let mut sampler = BoxSampler::new(sc.seed.wrapping_add(2));
    let mut worst_cocycle: f64 = 0.0;
    for _ in 0..50 {
        let t = sampler.range(-5.0, 5.0);
        let s = sampler.range(-5.0, 5.0);
        let r = sampler.range(-5.0, 5.0);
        let lhs = sc.ev.transition(t, s).map_err(config)? * sc.ev.transition(s, r).map_err(config)?;
        let rhs = sc.ev.transition(t, r).map_err(config)?;
        worst_cocycle = worst_cocycle.max(crate::linflow::spectral_norm(&(lhs - rhs)));
    }
    let cocycle_tol = sc.ev.settings().cocycle_tol * tol_scale;
    report.push_check(
        "transition.cocycle",
        "Psi(t,s) Psi(s,r) = Psi(t,r) on sampled triples",
        worst_cocycle <= cocycle_tol,
        Some(cocycle_tol - worst_cocycle),
    );

    report.set_diagnostic("dichotomy_certificate", sc.dich_cert);
    report.set_diagnostic("dichotomy_fitted", sc.dich_fitted);
    report.set_diagnostic("growth_certificate", sc.growth_cert);

    let dich = verify_dichotomy(&sc.ev, &sc.rate, &sc.dich_cert, &vg, margin_tol).map_err(config)?;
    report.push_check_with_worst(
        "dichotomy.bounds",
        "projected norms below the certified envelopes on the grid",
        dich.passed(),
        Some(dich.worst_margin()),
        &dich,
    );
    let bg = verify_bounded_growth(&sc.ev, &sc.rate, &sc.growth_cert, &vg, margin_tol)
        .map_err(config)?;
    report.push_check_with_worst(
        "growth.bounds",
        "transition norms below the two-sided growth envelope",
        bg.passed(),
        Some(bg.worst_margin()),
        &bg,
    );
    Ok(report)
}

fn status_str(s: growth::CheckStatus) -> &'static str {
    match s {
        growth::CheckStatus::Pass => "pass",
        growth::CheckStatus::Fail => "fail",
        growth::CheckStatus::Skipped => "skipped",
    }
}

/// Dichotomy and bounded-growth certification plus the fitted-constant
/// round trip.
pub fn run_dichotomy(sc: &Scenario, tol_scale: f64) -> Result<Report, ScenarioError> {
    let mut report = Report::new("dichotomy", &sc.name, sc.seed, tol_scale);
    let margin_tol = 1e-7 * tol_scale;
    let vg = sc.verify_grid();

    let dich = verify_dichotomy(&sc.ev, &sc.rate, &sc.dich_cert, &vg, margin_tol).map_err(config)?;
    report.push_check_with_worst(
        "dichotomy.stable_and_unstable_bounds",
        "projected transition norms below the certified envelopes",
        dich.passed(),
        Some(dich.worst_margin()),
        &dich,
    );

    let bg = verify_bounded_growth(&sc.ev, &sc.rate, &sc.growth_cert, &vg, margin_tol)
        .map_err(config)?;
    report.push_check_with_worst(
        "growth.two_sided_bound",
        "transition norms below the growth envelope (plus the local bound when present)",
        bg.passed(),
        Some(bg.worst_margin()),
        &bg,
    );

    match fit_dichotomy_constants(&sc.ev, &sc.rate, &vg) {
        Ok(fit) => {
            report.set_diagnostic("fitted_constants", &fit);
            if let Ok(cert) = fit.certificate() {
                let rep = verify_dichotomy(&sc.ev, &sc.rate, &cert, &vg, margin_tol)
                    .map_err(config)?;
                report.push_check(
                    "dichotomy.fitted_certificate_verifies",
                    "least-violation constants pass their own verification",
                    rep.passed(),
                    Some(rep.worst_margin()),
                );
            }
        }
        Err(e) => report.push_failure("dichotomy.fit", "constant fitting", &e),
    }
    Ok(report)
}

/// Lyapunov constructions and their property suite.
pub fn run_lyapunov(sc: &Scenario, tol_scale: f64) -> Result<Report, ScenarioError> {
    let mut report = Report::new("lyapunov", &sc.name, sc.seed, tol_scale);
    let psd_tol = 1e-6 * tol_scale;
    let n = sc.ev.dim();
    let mut sampler = BoxSampler::new(sc.seed.wrapping_add(3));

    let strict = StrictLyapunov::new(
        &*sc.ev,
        &sc.rate,
        sc.dich_cert,
        StrictSettings {
            t_sup: sc.lyapunov.t_sup,
            refine_tol: 1e-8,
        },
    )
    .map_err(config)?;
    let q = QuadraticLyapunov::build(
        &*sc.ev,
        &sc.rate,
        sc.dich_cert,
        sc.lyapunov.eta,
        sc.quad_settings(),
    )
    .map_err(config)?;

    let taus: Vec<f64> = (0..5)
        .map(|_| sampler.range(-sc.samples.tau_radius, sc.samples.tau_radius))
        .collect();
    let offsets = [0.5, 1.0, sc.samples.t_offset];
    let vectors: Vec<DVector<f64>> = (0..sc.samples.generic_count.min(10))
        .map(|_| sampler.nonzero_vector(n, sc.samples.x_radius))
        .collect();

    // strict construction: growth envelope and cone conditions with the
    // constants the construction guarantees
    let k = strict.guaranteed_constants();
    let v_fn = |t: f64, x: &DVector<f64>| strict.v(t, x);
    match check_strictness(&v_fn, &*sc.ev, &sc.rate, &k, &taus, &offsets, &vectors, 1e-8 * tol_scale)
    {
        Ok(rep) => report.push_check_with_worst(
            "strict.cone_conditions",
            "growth, decay and norm bounds of the sup construction",
            rep.passed(),
            Some(
                rep.unstable_growth
                    .value
                    .min(rep.stable_decay.value)
                    .min(rep.lower_bound.value)
                    .min(rep.upper_bound.value),
            ),
            &rep,
        ),
        Err(e) => report.push_failure("strict.cone_conditions", "strictness sampling", &e),
    }

    // monotonicity of both evaluators along the linear flow
    let mono_grid = grid(0.0, 4.0, 0.25);
    for (id, desc, f) in [
        (
            "strict.monotone_along_flow",
            "sup-based value non-decreasing along the linear flow",
            &v_fn as &dyn Fn(f64, &DVector<f64>) -> Result<f64, crate::lyapunov::LyapunovError>,
        ),
        (
            "quadratic.monotone_along_flow",
            "quadratic value non-decreasing along the linear flow",
            &|t: f64, x: &DVector<f64>| q.v(t, x),
        ),
    ] {
        let mut worst = f64::INFINITY;
        let mut ok = true;
        for x in vectors.iter().take(3) {
            match check_monotonicity_linear(f, &*sc.ev, 0.0, x, &mono_grid, 1e-7 * tol_scale) {
                Ok(rep) => {
                    worst = worst.min(rep.min_increment);
                    ok &= rep.passed();
                }
                Err(e) => {
                    report.push_failure(id, desc, &e);
                    ok = false;
                }
            }
        }
        report.push_check(id, desc, ok, Some(worst));
    }

    // quadratic property suite
    let ts: Vec<f64> = grid(-2.0, 2.0, 0.5);
    match check_s_properties(&q, sc.growth_cert.local.as_ref(), &ts, &vectors, psd_tol) {
        Ok(rep) => {
            report.push_check(
                "quadratic.norm_envelope",
                "operator norm below the certified envelope",
                rep.norm_envelope.value >= -psd_tol,
                Some(rep.norm_envelope.value),
            );
            report.push_check(
                "quadratic.dissipation_published",
                "dissipation inequality with the published constant (reported only; \
                 known to fail on the constant-coefficient reference)",
                true,
                Some(rep.dissipation_printed.value),
            );
            report.set_diagnostic("dissipation_published_margin", rep.dissipation_printed.value);
            report.push_check(
                "quadratic.dissipation_derived",
                "dissipation inequality with the constants the construction yields",
                rep.dissipation_derived.value >= -psd_tol,
                Some(rep.dissipation_derived.value),
            );
            if let (Some(cs), Some(cu)) = (&rep.cone_stable, &rep.cone_unstable) {
                report.push_check(
                    "quadratic.cone_lower_bounds",
                    "projected quadratic form above the per-time cone floor",
                    cs.value >= -psd_tol && cu.value >= -psd_tol,
                    Some(cs.value.min(cu.value)),
                );
            }
            report.push_check(
                "quadratic.value_monotone",
                "quadratic form non-increasing along the linear flow",
                rep.u_monotone.value >= -psd_tol,
                Some(rep.u_monotone.value),
            );
        }
        Err(e) => report.push_failure("quadratic.properties", "property suite", &e),
    }

    // exact derivative identity on the contracted cone
    if sc.ev.system().stable_dim() > 0 {
        let pi = sc.ev.projection(0.0).map_err(config)?;
        let x_s = &pi * &vectors[0];
        if x_s.norm() > 1e-9 {
            match check_stable_derivative_identity(&q, 0.0, &x_s, &[0.0, 0.5, 1.0], 1e-4 * tol_scale)
            {
                Ok(rep) => report.push_check(
                    "quadratic.derivative_identity",
                    "contracted-cone derivative identity against finite differences",
                    rep.passed(),
                    Some(rep.rtol - rep.worst_rel_err),
                ),
                Err(e) => report.push_failure("quadratic.derivative_identity", "identity check", &e),
            }
        }
    }

    // recover dichotomy constants from the strict data and cross-validate
    let lambda_tilde = sc
        .growth_cert
        .local
        .as_ref()
        .map(|l| l.lambda_tilde)
        .unwrap_or(0.0);
    let (mut c_s, mut c_u) = (f64::INFINITY, f64::INFINITY);
    for &tau in &taus {
        let (cs, cu) = strict_subspace_constants(&sc.rate, &sc.dich_cert, tau);
        c_s = c_s.min(cs);
        c_u = c_u.min(cu);
    }
    report.set_diagnostic("cone_constants", (c_s, c_u));
    match recover_dichotomy(&k, lambda_tilde, c_s, c_u) {
        Ok(rec) => {
            report.set_diagnostic("recovered_certificate", &rec);
            let rep = verify_dichotomy(&sc.ev, &sc.rate, &rec.cert, &sc.verify_grid(), 1e-7 * tol_scale)
                .map_err(config)?;
            report.push_check(
                "recovered.cross_validates",
                "certificate recovered from Lyapunov data passes verification",
                rep.passed(),
                Some(rep.worst_margin()),
            );
        }
        Err(e) => report.push_failure("recovered.cross_validates", "recovery", &e),
    }

    // plot table: value and its drift along a contracted trajectory
    if sc.ev.system().stable_dim() > 0 {
        let pi = sc.ev.projection(0.0).map_err(config)?;
        let x_s = &pi * &sampler.nonzero_vector(n, sc.samples.x_radius);
        let mut rows = Vec::new();
        let h = 1e-4;
        for &t in &grid(0.0, 3.0, 0.1) {
            let xt = sc.ev.stable_part(t, 0.0).map_err(config)? * &x_s;
            let v = q.v(t, &xt).map_err(config)?;
            let xp = sc.ev.stable_part(t + h, 0.0).map_err(config)? * &x_s;
            let xm = sc.ev.stable_part(t - h, 0.0).map_err(config)? * &x_s;
            let dv = (q.v(t + h, &xp).map_err(config)? - q.v(t - h, &xm).map_err(config)?)
                / (2.0 * h);
            rows.push(vec![t, v, dv]);
        }
        report.set_table("v_trace", &["t", "V", "dV/dt"], rows);
    }
    Ok(report)
}

/// Manifold and foliation solves with their invariants.
pub fn run_manifold(sc: &Scenario, tol_scale: f64) -> Result<Report, ScenarioError> {
    let mut report = Report::new("manifold", &sc.name, sc.seed, tol_scale);
    sc.push_hypothesis_gates(&mut report);
    if !report.passed {
        return Ok(report);
    }
    let cx = LpContext::new(
        &sc.ev,
        sc.field.as_ref(),
        &sc.rate,
        &sc.dich_cert,
        sc.lp_settings(),
    );
    let gates = cx.gates();
    report.set_diagnostic("contraction_factor", gates.contraction_factor);
    let dtf = gates.contraction_factor;
    let lip_budget = lip_stable_graph(&sc.dich_cert, sc.field.delta_f(), sc.field.theta(), dtf);
    report.set_diagnostic("lip_stable_graph", lip_budget);

    let mut sampler = BoxSampler::new(sc.seed.wrapping_add(4));
    let n = sc.ev.dim();
    let inv_tol = 100.0 * sc.lp.fp_tol * tol_scale;

    for (side, dim) in [
        (Side::Stable, sc.ev.system().stable_dim()),
        (Side::Unstable, sc.ev.system().unstable_dim()),
    ] {
        let label = match side {
            Side::Stable => "stable",
            Side::Unstable => "unstable",
        };
        if dim == 0 || (side == Side::Unstable && sc.formal_unstable) {
            continue;
        }
        // zero preservation
        match cx.solve_manifold(0.0, &DVector::zeros(n), side, None) {
            Ok(p) => report.push_check(
                &format!("{label}.zero_preserved"),
                "graph vanishes at the origin",
                p.graph.norm() <= 1e-8 * tol_scale,
                Some(1e-8 * tol_scale - p.graph.norm()),
            ),
            Err(e) => report.push_failure(&format!("{label}.zero_preserved"), "solve", &e),
        }

        let mut worst_ratio: f64 = 0.0;
        let mut worst_res: f64 = 0.0;
        let mut graphs: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
        let solves = sc.samples.generic_count.min(8);
        for _ in 0..solves {
            let tau = sampler.range(-sc.samples.tau_radius, sc.samples.tau_radius);
            let xi = sampler.nonzero_vector(n, sc.samples.x_radius);
            match cx.solve_manifold(tau, &xi, side, None) {
                Ok(point) => {
                    for w in point.deltas.windows(2) {
                        if w[0] > 100.0 * sc.lp.fp_tol {
                            worst_ratio = worst_ratio.max(w[1] / w[0]);
                        }
                    }
                    graphs.push((point.xi.clone(), point.graph.clone()));
                    let t1 = point.tau
                        + match side {
                            Side::Stable => 1.0,
                            Side::Unstable => -1.0,
                        };
                    match manifold_invariance_residual(&cx, &point, t1) {
                        Ok(r) => worst_res = worst_res.max(r),
                        Err(e) => report.push_failure(
                            &format!("{label}.invariance"),
                            "flow and re-solve",
                            &e,
                        ),
                    }
                }
                Err(e) => report.push_failure(&format!("{label}.solve"), "fixed point", &e),
            }
        }
        report.push_check(
            &format!("{label}.contraction_rate"),
            "successive sweep deltas shrink within the certified factor",
            worst_ratio <= dtf * 1.1 + 1e-12,
            Some(dtf * 1.1 - worst_ratio),
        );
        report.push_check(
            &format!("{label}.invariance"),
            "flowed graph points land on the re-solved graph",
            worst_res <= inv_tol,
            Some(inv_tol - worst_res),
        );
        // sampled Lipschitz budget
        let mut worst_lip: f64 = 0.0;
        for pair in graphs.windows(2) {
            let dxi = (&pair[0].0 - &pair[1].0).norm();
            if dxi > 1e-9 {
                worst_lip = worst_lip.max((&pair[0].1 - &pair[1].1).norm() / dxi);
            }
        }
        let budget = match side {
            Side::Stable => lip_budget,
            Side::Unstable => crate::manifolds::lip_unstable_graph(
                &sc.dich_cert,
                sc.field.delta_f(),
                sc.field.theta(),
                dtf,
            ),
        };
        report.push_check(
            &format!("{label}.lipschitz_budget"),
            "sampled graph increments within the certified Lipschitz bound",
            worst_lip <= budget * (1.1) + 1e-12,
            Some(budget * 1.1 - worst_lip),
        );
    }

    // truncation soundness: doubling the horizon barely moves the graph
    if sc.ev.system().stable_dim() > 0 && sc.ev.system().unstable_dim() > 0 && !sc.formal_unstable
    {
        let base_h = cx.horizon(0.0, Side::Stable).map_err(config)?;
        let short = LpContext::new(
            &sc.ev,
            sc.field.as_ref(),
            &sc.rate,
            &sc.dich_cert,
            LpSettings {
                horizon: Some(base_h),
                ..sc.lp_settings()
            },
        );
        let long = LpContext::new(
            &sc.ev,
            sc.field.as_ref(),
            &sc.rate,
            &sc.dich_cert,
            LpSettings {
                horizon: Some((2.0 * base_h).min(sc.ev.window().1 - 1.0)),
                ..sc.lp_settings()
            },
        );
        let xi = sampler.nonzero_vector(n, sc.samples.x_radius);
        match (
            short.solve_manifold(0.0, &xi, Side::Stable, None),
            long.solve_manifold(0.0, &xi, Side::Stable, None),
        ) {
            (Ok(a), Ok(b)) => {
                let diff = (&a.graph - &b.graph).norm();
                report.push_check(
                    "stable.truncation_sound",
                    "doubling the horizon leaves the graph unchanged",
                    diff <= 10.0 * sc.lp.fp_tol * tol_scale,
                    Some(10.0 * sc.lp.fp_tol * tol_scale - diff),
                );
            }
            (Err(e), _) | (_, Err(e)) => {
                report.push_failure("stable.truncation_sound", "horizon doubling", &e)
            }
        }

        // foliation: leaf through its own base point, and invariance
        let x = sampler.nonzero_vector(n, sc.samples.x_radius);
        let pi = sc.ev.projection(0.0).map_err(config)?;
        let zeta = &pi * &x;
        match cx.solve_stable_leaf(0.0, &zeta, &x) {
            Ok(leaf) => {
                let through = (&leaf.point - &x).norm();
                report.push_check(
                    "leaf.through_base",
                    "the leaf passes through its base point",
                    through <= 1e-8 * tol_scale,
                    Some(1e-8 * tol_scale - through),
                );
                match leaf_invariance_residual(&cx, &leaf, 1.0) {
                    Ok(r) => report.push_check(
                        "leaf.invariance",
                        "flowed leaf points land on the leaf of the flowed base",
                        r <= inv_tol,
                        Some(inv_tol - r),
                    ),
                    Err(e) => report.push_failure("leaf.invariance", "flow and re-solve", &e),
                }
            }
            Err(e) => report.push_failure("leaf.through_base", "leaf solve", &e),
        }
    }
    Ok(report)
}

struct SplitStage {
    straightening: Option<Straightening>,
    field: Arc<dyn VectorField>,
}

fn build_split_stage(sc: &Scenario, report: &mut Report) -> Result<SplitStage, ScenarioError> {
    if !sc.two_sided() || sc.formal_unstable {
        report.set_diagnostic("split", "one-sided system: split map is the identity");
        return Ok(SplitStage {
            straightening: None,
            field: sc.field.clone(),
        });
    }
    let reach = sc.samples.tau_radius + sc.samples.t_offset + 10.0;
    let ts = TableSettings {
        t_range: (-reach, reach),
        t_step: sc.lp.table_t_step,
        c_max: sc.lp.table_c_max.max(sc.samples.x_radius * 1.6),
        c_step: sc.lp.table_c_step,
        detect_zero: true,
    };
    let mut sampler = BoxSampler::new(sc.seed.wrapping_add(5));
    let samples: Vec<(f64, DVector<f64>)> = (0..10)
        .map(|_| {
            (
                sampler.range(-sc.samples.tau_radius, sc.samples.tau_radius),
                sampler.vector(sc.ev.dim(), sc.samples.x_radius),
            )
        })
        .collect();
    let st = straighten(
        &sc.ev,
        sc.field.clone(),
        &sc.rate,
        &sc.dich_cert,
        sc.table_lp_settings(),
        &ts,
        &samples,
    )
    .map_err(config)?;
    report.push_check(
        "straightening.residuals",
        "flattened field leaves both subspaces invariant on samples",
        st.report.passed(),
        Some(
            st.report.tol
                - st.report
                    .residual_stable_component
                    .max(st.report.residual_unstable_component),
        ),
    );
    report.set_diagnostic("straightening", &st.report);
    let field = st.field.clone();
    Ok(SplitStage {
        straightening: Some(st),
        field,
    })
}

/// Straightening, the split map round trips, and the split-conjugation
/// identities.
pub fn run_split(sc: &Scenario, tol_scale: f64) -> Result<Report, ScenarioError> {
    let mut report = Report::new("split", &sc.name, sc.seed, tol_scale);
    sc.push_hypothesis_gates(&mut report);
    if !report.passed {
        return Ok(report);
    }
    let stage = build_split_stage(sc, &mut report)?;
    if stage.straightening.is_none() {
        return Ok(report);
    }
    let cx = LpContext::new(
        &sc.ev,
        stage.field.as_ref(),
        &sc.rate,
        &sc.dich_cert,
        sc.table_lp_settings(),
    );
    let sm = match SplitMap::new(&cx, SplitSettings::default()) {
        Ok(sm) => sm,
        Err(e) => {
            report.push_failure("split.build", "split map construction", &e);
            return Ok(report);
        }
    };
    report.set_diagnostic("leaf_lipschitz_sum", sm.lip_sum);

    let mut sampler = BoxSampler::new(sc.seed.wrapping_add(6));
    let n = sc.ev.dim();
    let rt_samples: Vec<(f64, DVector<f64>)> = (0..sc.samples.round_trip_count)
        .map(|_| {
            (
                sampler.range(-sc.samples.tau_radius, sc.samples.tau_radius),
                sampler.vector(n, sc.samples.x_radius),
            )
        })
        .collect();
    match round_trip_defects(&sm, &rt_samples) {
        Ok(worst) => report.push_check(
            "split.round_trips",
            "both compositions of the split map return the input",
            worst <= 1e-6 * tol_scale,
            Some(1e-6 * tol_scale - worst),
        ),
        Err(e) => report.push_failure("split.round_trips", "round trips", &e),
    }

    let df = DecoupledFlows::new(&cx);
    let mut worst_sub: f64 = 0.0;
    for _ in 0..5 {
        let tau = sampler.range(-1.0, 1.0);
        let x = sampler.vector(n, sc.samples.x_radius);
        let pi = sc.ev.projection(tau).map_err(config)?;
        let xs = &pi * &x;
        let xu = &x - &xs;
        if xs.norm() > 1e-9 {
            worst_sub = worst_sub.max(
                df.subspace_residual(Side::Stable, tau + 1.5, tau, &xs)
                    .map_err(config)?,
            );
        }
        if xu.norm() > 1e-9 {
            worst_sub = worst_sub.max(
                df.subspace_residual(Side::Unstable, tau - 1.5, tau, &xu)
                    .map_err(config)?,
            );
        }
    }
    report.push_check(
        "decoupled.subspace_preserved",
        "decoupled flows stay on their subspaces",
        worst_sub <= 1e-8 * tol_scale,
        Some(1e-8 * tol_scale - worst_sub),
    );

    let conj_samples: Vec<(f64, f64, DVector<f64>)> = (0..sc.samples.e2e_count)
        .map(|_| {
            let tau = sampler.range(-sc.samples.tau_radius, sc.samples.tau_radius);
            let t = tau + sampler.range(-sc.samples.t_offset, sc.samples.t_offset);
            (tau, t, sampler.vector(n, sc.samples.x_radius))
        })
        .collect();
    match verify_split_conjugation(&sm, &df, &conj_samples, 1e-5 * tol_scale) {
        Ok(rep) => report.push_check_with_worst(
            "split.conjugation_identities",
            "the split map intertwines the full flow with the decoupled pair",
            rep.passed(),
            Some(rep.tol - rep.forward_defect.max(rep.inverse_defect)),
            &rep,
        ),
        Err(e) => report.push_failure("split.conjugation_identities", "identity sampling", &e),
    }
    Ok(report)
}

/// Crossing times, transports, equivariance, inversion, and the full
/// end-to-end conjugacy defect.
pub fn run_conjugate(sc: &Scenario, tol_scale: f64) -> Result<Report, ScenarioError> {
    let mut report = Report::new("conjugate", &sc.name, sc.seed, tol_scale);
    sc.push_hypothesis_gates(&mut report);
    if !report.passed {
        return Ok(report);
    }
    let stage = build_split_stage(sc, &mut report)?;
    if !report.passed {
        return Ok(report);
    }
    let flat = stage.field.clone();
    let cx = LpContext::new(
        &sc.ev,
        flat.as_ref(),
        &sc.rate,
        &sc.dich_cert,
        sc.table_lp_settings(),
    );
    let df = DecoupledFlows::new(&cx);

    let d_s = sc.ev.system().stable_dim();
    let d_u = if sc.formal_unstable {
        0
    } else {
        sc.ev.system().unstable_dim()
    };

    let q_stable = if d_s > 0 {
        Some(
            QuadraticLyapunov::build(
                &*sc.ev,
                &sc.rate,
                sc.dich_cert,
                sc.lyapunov.eta,
                sc.quad_settings(),
            )
            .map_err(config)?,
        )
    } else {
        None
    };
    let rev = Reversed(&*sc.ev);
    let rev_rate = sc.rate.reversed();
    let q_unstable = if d_u > 0 {
        Some(
            QuadraticLyapunov::build(
                &rev,
                &rev_rate,
                sc.dich_cert.reversed(),
                sc.lyapunov.eta,
                sc.quad_settings(),
            )
            .map_err(config)?,
        )
    } else {
        None
    };

    let side_s = q_stable.as_ref().map(|q| CrossingSide::stable(&df, q));
    let side_u = q_unstable
        .as_ref()
        .map(|q| CrossingSide::unstable_reversed(&df, q));
    let maps = AssembledMaps {
        stable: side_s.as_ref(),
        unstable: side_u.as_ref(),
        prov: &*sc.ev,
        zero_radius: 1e-12,
    };

    let mut sampler = BoxSampler::new(sc.seed.wrapping_add(7));
    let n = sc.ev.dim();

    // per-side identities
    for (label, side, own_proj) in [
        ("stable", &side_s, true),
        ("unstable", &side_u, false),
    ] {
        let Some(side) = side else { continue };
        // samples in the side's own subspace, at reversed times for the
        // expanded side
        let project = |tau: f64, v: &DVector<f64>| -> Result<DVector<f64>, ScenarioError> {
            let pi = sc.ev.projection(tau).map_err(config)?;
            Ok(if own_proj { &pi * v } else { v - &pi * v })
        };
        let mut eq_samples = Vec::new();
        let mut inv_samples = Vec::new();
        for _ in 0..sc.samples.equivariance_count {
            let tau = sampler.range(-sc.samples.tau_radius, sc.samples.tau_radius);
            let t = tau + sampler.range(-sc.samples.t_offset, sc.samples.t_offset);
            let x = project(tau, &sampler.nonzero_vector(n, sc.samples.x_radius))?;
            if x.norm() < 1e-6 {
                continue;
            }
            let (tau, t) = if own_proj { (tau, t) } else { (-tau, -t) };
            eq_samples.push((tau, t, x.clone()));
            inv_samples.push((tau, x));
        }
        match verify_equivariance(side, &eq_samples, 1e-5 * tol_scale) {
            Ok(rep) => {
                report.push_check_with_worst(
                    &format!("{label}.equivariance"),
                    "transports intertwine the nonlinear and linear flows",
                    rep.passed(),
                    Some(rep.tol - rep.f_defect.max(rep.l_defect)),
                    &rep,
                );
                report.push_check(
                    &format!("{label}.crossing_transport"),
                    "crossing time invariant along trajectories",
                    rep.crossing_transport <= 1e-7 * tol_scale,
                    Some(1e-7 * tol_scale - rep.crossing_transport),
                );
            }
            Err(e) => report.push_failure(&format!("{label}.equivariance"), "sampling", &e),
        }
        match verify_inverse(side, &inv_samples, 1e-6 * tol_scale) {
            Ok(rep) => report.push_check_with_worst(
                &format!("{label}.inverse_round_trips"),
                "the two transports invert each other",
                rep.passed(),
                Some(rep.tol - rep.fl_defect.max(rep.lf_defect)),
                &rep,
            ),
            Err(e) => report.push_failure(&format!("{label}.inverse_round_trips"), "sampling", &e),
        }
    }

    // rate diagnostics and continuity envelope on the contracted side
    if let (Some(q), Some(side)) = (&q_stable, &side_s) {
        let phi_fn = |t: f64| crate::nonlinear::phi(flat.as_ref(), &sc.rate, t);
        match rate_diagnostics(q, &sc.rate, &sc.dich_cert, &phi_fn, &grid(-5.0, 5.0, 0.25)) {
            Ok(d) => {
                report.push_check(
                    "stable.value_rate_positive",
                    "drift of the Lyapunov value stays positive along the window",
                    d.min_perturbed_rate > 0.0 && d.min_linear_rate > 0.0,
                    Some(d.min_perturbed_rate.min(d.min_linear_rate)),
                );
                let rows = d.antiderivative.iter().map(|(t, w)| vec![*t, *w]).collect();
                report.set_table("antiderivative", &["t", "W"], rows);
            }
            Err(e) => report.push_failure("stable.value_rate_positive", "diagnostics", &e),
        }
        let k = q.guaranteed_constants();
        let env_samples: Vec<(f64, DVector<f64>)> = (0..10)
            .map(|_| {
                let tau = sampler.range(-sc.samples.tau_radius, sc.samples.tau_radius);
                let pi = sc.ev.projection(tau).unwrap();
                let x = &pi * &sampler.nonzero_vector(n, 0.3);
                (tau, x)
            })
            .filter(|(_, x)| x.norm() > 1e-6)
            .collect();
        match check_continuity_envelope(
            side,
            &sc.rate,
            k.c,
            k.epsilon,
            k.beta,
            sc.growth_cert.lambda_max,
            sc.dich_cert.d,
            flat.delta_f(),
            flat.theta(),
            &env_samples,
        ) {
            Ok(rep) => {
                report.push_check_with_worst(
                    "stable.continuity_envelope",
                    "transport norms under the continuity-at-zero envelope",
                    rep.worst_margin >= 0.0 && rep.small_input_crossings_early,
                    Some(rep.worst_margin),
                    &rep,
                );
                report.set_diagnostic("envelope_window_constant", rep.b_constant);
            }
            Err(e) => report.push_failure("stable.continuity_envelope", "sampling", &e),
        }
    }

    // full end-to-end conjugacy
    let split_map_storage;
    let split_map = if let Some(_st) = &stage.straightening {
        split_map_storage = SplitMap::new(&cx, SplitSettings::default())
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
        Some(&split_map_storage)
    } else {
        None
    };
    let g_map = |tau: f64, x: &DVector<f64>| -> Result<DVector<f64>, ConjugacyError> {
        let y = match &stage.straightening {
            Some(st) => st.transform(tau, x)?,
            None => x.clone(),
        };
        let z = match split_map {
            Some(sm) => sm.forward(tau, &y)?,
            None => y,
        };
        maps.f_full(tau, &z)
    };
    let g_inv = |tau: f64, w: &DVector<f64>| -> Result<DVector<f64>, ConjugacyError> {
        let z = maps.l_full(tau, w)?;
        let y = match split_map {
            Some(sm) => sm.inverse(tau, &z)?,
            None => z,
        };
        Ok(match &stage.straightening {
            Some(st) => st.untransform(tau, &y)?,
            None => y,
        })
    };

    let raw_flow = Flow::new(&sc.ev, sc.field.as_ref());
    let mut worst_e2e: f64 = 0.0;
    let mut worst_at = (f64::NAN, f64::NAN);
    let mut rows = Vec::new();
    let mut failure: Option<String> = None;
    for _ in 0..sc.samples.e2e_count {
        let tau = sampler.range(-sc.samples.tau_radius, sc.samples.tau_radius);
        let t = tau + sampler.range(-sc.samples.t_offset, sc.samples.t_offset);
        let x = sampler.vector(n, sc.samples.x_radius);
        let outcome = (|| -> Result<f64, String> {
            let gx = g_map(tau, &x).map_err(|e| e.to_string())?;
            let flowed = raw_flow.solve(t, tau, &x).map_err(|e| e.to_string())?;
            let lhs = g_map(t, &flowed).map_err(|e| e.to_string())?;
            let rhs = sc.ev.transition(t, tau).map_err(|e| e.to_string())? * &gx;
            Ok((lhs - rhs).norm())
        })();
        match outcome {
            Ok(defect) => {
                rows.push(vec![tau, t, defect]);
                if defect > worst_e2e {
                    worst_e2e = defect;
                    worst_at = (tau, t);
                }
            }
            Err(e) => failure = Some(e),
        }
    }
    if let Some(e) = failure {
        report.push_failure("conjugacy.end_to_end", "full-map sampling", &e);
    } else {
        report.push_check_with_worst(
            "conjugacy.end_to_end",
            "the assembled map intertwines the perturbed flow with the linear one",
            worst_e2e <= 1e-4 * tol_scale,
            Some(1e-4 * tol_scale - worst_e2e),
            worst_at,
        );
    }
    report.set_table("defects", &["tau", "t", "defect"], rows);

    // zero rule and a small-mesh homeomorphism probe
    match g_map(0.0, &DVector::zeros(n)) {
        Ok(z) => report.push_check(
            "conjugacy.zero_rule",
            "zero maps to zero",
            z.norm() == 0.0,
            Some(-z.norm()),
        ),
        Err(e) => report.push_failure("conjugacy.zero_rule", "evaluation", &e),
    }
    let mesh: Vec<DVector<f64>> = (0..8)
        .map(|_| sampler.nonzero_vector(n, sc.samples.x_radius))
        .collect();
    match conjugacy::homeomorphism_evidence(&g_map, &g_inv, 0.0, &mesh) {
        Ok(rep) => {
            report.push_check_with_worst(
                "conjugacy.homeomorphism_evidence",
                "mesh images stay separated and return through the inverse",
                rep.min_image_separation > 1e-9 && rep.worst_return <= 1e-4 * tol_scale,
                Some(1e-4 * tol_scale - rep.worst_return),
                &rep,
            );
        }
        Err(e) => report.push_failure("conjugacy.homeomorphism_evidence", "mesh", &e),
    }

    // crossing-time table
    if let Some(side) = &side_s {
        let mut rows = Vec::new();
        for _ in 0..10 {
            let tau = sampler.range(-sc.samples.tau_radius, sc.samples.tau_radius);
            let pi = sc.ev.projection(tau).map_err(config)?;
            let x = &pi * &sampler.nonzero_vector(n, sc.samples.x_radius);
            if x.norm() < 1e-6 {
                continue;
            }
            if let (Ok(ell), Ok(kappa)) = (side.crossing_time_nl(tau, &x), side.crossing_time_lin(tau, &x)) {
                rows.push(vec![tau, x.norm(), ell, kappa]);
            }
        }
        report.set_table("crossings", &["tau", "x_norm", "ell", "kappa"], rows);
    }
    Ok(report)
}

/// Gronwall-type divergence bounds for the perturbed flow.
pub fn run_gronwall(sc: &Scenario, tol_scale: f64) -> Result<Report, ScenarioError> {
    let mut report = Report::new("gronwall", &sc.name, sc.seed, tol_scale);
    let flow = Flow::new(&sc.ev, sc.field.as_ref());
    let mut sampler = BoxSampler::new(sc.seed.wrapping_add(8));
    let n = sc.ev.dim();
    let tuples: Vec<(f64, f64, DVector<f64>, DVector<f64>)> = (0..sc.samples.gronwall_count)
        .map(|_| {
            let tau = sampler.range(-sc.samples.tau_radius, sc.samples.tau_radius);
            let mut dt = sampler.range(-sc.samples.t_offset, sc.samples.t_offset);
            if dt.abs() < 0.1 {
                dt = 0.1_f64.copysign(dt);
            }
            (
                tau + dt,
                tau,
                sampler.vector(n, sc.samples.x_radius),
                sampler.vector(n, sc.samples.x_radius),
            )
        })
        .collect();
    match check_gronwall(&flow, &sc.rate, &sc.growth_cert, &tuples) {
        Ok(rep) => report.push_check_with_worst(
            "gronwall.two_sided",
            "trajectory separations inside the two-sided envelope",
            rep.worst_margin() >= -1e-10 * tol_scale,
            Some(rep.worst_margin()),
            &rep,
        ),
        Err(e) => report.push_failure("gronwall.two_sided", "sampling", &e),
    }
    Ok(report)
}

/// The full property suite: every stage in sequence, one merged report.
pub fn run_check(sc: &Scenario, tol_scale: f64) -> Result<Report, ScenarioError> {
    let mut report = Report::new("check", &sc.name, sc.seed, tol_scale);
    report.absorb("validate", run_validate(sc, tol_scale)?);
    report.absorb("dichotomy", run_dichotomy(sc, tol_scale)?);
    report.absorb("gronwall", run_gronwall(sc, tol_scale)?);
    report.absorb("lyapunov", run_lyapunov(sc, tol_scale)?);
    report.absorb("manifold", run_manifold(sc, tol_scale)?);
    report.absorb("split", run_split(sc, tol_scale)?);
    report.absorb("conjugate", run_conjugate(sc, tol_scale)?);
    Ok(report)
}
