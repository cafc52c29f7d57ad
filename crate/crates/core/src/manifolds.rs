//! Invariant manifold graphs and foliation leaves by Picard iteration on
//! the integral fixed-point equations, plus the straightening change of
//! variables that flattens both graphs.
//!
//! Trajectory unknowns live on a uniform grid; off-grid quadrature nodes
//! are filled by cubic interpolation and each cell is integrated with
//! Simpson's rule. The projected propagator integrands are factored
//! through the anchor time, so each sweep costs one pass over the grid:
//! a prefix sum feeds the contracted part and a suffix sum the expanded
//! tail, keeping every accumulated term at the scale of its true value.

use crate::growth::GrowthRate;
use crate::linflow::{DichotomyCertificate, LinflowError, TransitionEvaluator, TransitionProvider};
use crate::nonlinear::{Flow, NonlinearError, VectorField};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("hypothesis gate `{gate}` violated: value {value} vs threshold {threshold}")]
    GateViolated {
        gate: &'static str,
        value: f64,
        threshold: f64,
    },
    #[error("truncation horizon exhausted at {cap} (tail bound {tail:e} > {tol:e})")]
    HorizonInsufficient { cap: f64, tail: f64, tol: f64 },
    #[error("fixed point did not converge: delta {last_delta:e} after {iterations} iterations (tol {tol:e})")]
    NotConverged {
        iterations: usize,
        last_delta: f64,
        tol: f64,
    },
    #[error("straightening tables require one-dimensional sides, got dimension {d}")]
    TableDimension { d: usize },
    #[error(transparent)]
    Linear(#[from] LinflowError),
    #[error(transparent)]
    Nonlinear(#[from] NonlinearError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, Copy)]
pub struct LpSettings {
    /// Explicit truncation horizon; derived from the tail bound when absent.
    pub horizon: Option<f64>,
    pub horizon_cap: f64,
    pub dt: f64,
    pub fp_tol: f64,
    pub max_iter: usize,
    /// Weighted-norm exponent for continuity diagnostics, in `(1, -lambda_s)`.
    pub varrho: Option<f64>,
}

impl Default for LpSettings {
    fn default() -> Self {
        LpSettings {
            horizon: None,
            horizon_cap: 40.0,
            dt: 0.05,
            fp_tol: 1e-8,
            max_iter: 80,
            varrho: None,
        }
    }
}

/// Values and verdicts of the standing hypotheses.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisGates {
    pub theta: f64,
    pub theta_dominates: bool,
    pub stable_gap: f64,
    pub stable_gap_ok: bool,
    pub unstable_gap: f64,
    pub unstable_gap_ok: bool,
    pub contraction_factor: f64,
    pub contraction_ok: bool,
}

impl HypothesisGates {
    pub fn all_ok(&self) -> bool {
        self.theta_dominates && self.stable_gap_ok && self.unstable_gap_ok && self.contraction_ok
    }
}

/// `delta_f D (1/(-lambda_s + nu - theta) + 1/(lambda_u - theta + omega))`,
/// dropping the term of an empty side.
pub fn contraction_factor(
    cert: &DichotomyCertificate,
    delta_f: f64,
    theta: f64,
    d_s: usize,
    d_u: usize,
) -> f64 {
    let mut sum = 0.0;
    if d_s > 0 {
        sum += 1.0 / (-cert.lambda_s + cert.nu - theta);
    }
    if d_u > 0 {
        sum += 1.0 / (cert.lambda_u - theta + cert.omega);
    }
    delta_f * cert.d * sum
}

/// Lipschitz budget of the stable graph (and stable leaves).
pub fn lip_stable_graph(cert: &DichotomyCertificate, delta_f: f64, theta: f64, dtf: f64) -> f64 {
    delta_f * cert.d * cert.d / ((1.0 - dtf) * (cert.lambda_u - theta + cert.omega))
}

/// Lipschitz budget of the unstable graph (and unstable leaves).
pub fn lip_unstable_graph(cert: &DichotomyCertificate, delta_f: f64, theta: f64, dtf: f64) -> f64 {
    delta_f * cert.d * cert.d / ((1.0 - dtf) * (-cert.lambda_s + cert.nu - theta))
}

/// Solved manifold point: the trajectory, the graph value and the
/// convergence record.
#[derive(Debug, Clone)]
pub struct ManifoldPoint {
    pub side: Side,
    pub tau: f64,
    /// Projected base coordinate.
    pub xi: DVector<f64>,
    /// Complementary graph component `g(tau, xi)`.
    pub graph: DVector<f64>,
    /// `xi + g(tau, xi)`.
    pub point: DVector<f64>,
    pub grid: Vec<f64>,
    pub trajectory: Vec<DVector<f64>>,
    pub deltas: Vec<f64>,
    pub horizon: f64,
}

/// Solved foliation leaf point.
#[derive(Debug, Clone)]
pub struct LeafPoint {
    pub side: Side,
    pub tau: f64,
    pub zeta: DVector<f64>,
    pub base_point: DVector<f64>,
    /// Leaf offset parameter (projected difference from the base).
    pub offset: DVector<f64>,
    /// Complementary component `h(tau, zeta, x)`.
    pub h: DVector<f64>,
    /// `zeta + h`.
    pub point: DVector<f64>,
    pub grid: Vec<f64>,
    pub deltas: Vec<f64>,
    pub horizon: f64,
}

/// A nonlinear base trajectory sampled on a solver grid, shared between
/// leaf solves through the same base point. Carries the solver tables of
/// its grid so repeated solves do not rebuild them.
#[derive(Clone)]
pub struct BaseTrajectory {
    pub tau: f64,
    pub side: Side,
    pub grid: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub mids: Vec<DVector<f64>>,
    tables: Arc<SolverTables>,
}

/// Midpoint states of a uniformly gridded trajectory by cubic
/// interpolation with difference slopes.
fn cell_midpoints(xs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n = xs.len();
    let mut mids = Vec::with_capacity(n.saturating_sub(1));
    for j in 0..n.saturating_sub(1) {
        let m0 = if j == 0 {
            &xs[1] - &xs[0]
        } else {
            (&xs[j + 1] - &xs[j - 1]) * 0.5
        };
        let m1 = if j + 2 >= n {
            &xs[j + 1] - &xs[j]
        } else {
            (&xs[j + 2] - &xs[j]) * 0.5
        };
        mids.push((&xs[j] + &xs[j + 1]) * 0.5 + (m0 - m1) * 0.125);
    }
    mids
}

/// Per-grid operator factors, independent of the particular base offset:
/// reusable across solves that share `(tau, side, grid)`.
pub struct SolverTables {
    grid: Vec<f64>,
    mids_t: Vec<f64>,
    /// side propagator from the base time to each node
    seed_prop: Vec<DMatrix<f64>>,
    /// forward factors per node
    fwd_s: Vec<DMatrix<f64>>,
    fwd_u: Vec<DMatrix<f64>>,
    /// backward factors per node and midpoint
    bwd_s: Vec<DMatrix<f64>>,
    bwd_u: Vec<DMatrix<f64>>,
    bwd_s_mid: Vec<DMatrix<f64>>,
    bwd_u_mid: Vec<DMatrix<f64>>,
}

/// Context for the integral-equation solvers.
pub struct LpContext<'a> {
    pub ev: &'a TransitionEvaluator,
    pub field: &'a dyn VectorField,
    pub rate: &'a GrowthRate,
    pub cert: &'a DichotomyCertificate,
    pub settings: LpSettings,
}

impl<'a> LpContext<'a> {
    pub fn new(
        ev: &'a TransitionEvaluator,
        field: &'a dyn VectorField,
        rate: &'a GrowthRate,
        cert: &'a DichotomyCertificate,
        settings: LpSettings,
    ) -> Self {
        LpContext {
            ev,
            field,
            rate,
            cert,
            settings,
        }
    }

    pub fn gates(&self) -> HypothesisGates {
        let theta = self.field.theta();
        let d_s = self.ev.system().stable_dim();
        let d_u = self.ev.system().unstable_dim();
        let stable_gap = -self.cert.lambda_s + self.cert.nu - theta;
        let unstable_gap = self.cert.lambda_u - theta + self.cert.omega;
        let dtf = contraction_factor(self.cert, self.field.delta_f(), theta, d_s, d_u);
        HypothesisGates {
            theta,
            theta_dominates: theta >= self.cert.nu.max(self.cert.omega),
            stable_gap,
            stable_gap_ok: d_s == 0 || stable_gap > 0.0,
            unstable_gap,
            unstable_gap_ok: d_u == 0 || unstable_gap > 0.0,
            contraction_factor: dtf,
            contraction_ok: dtf < 1.0,
        }
    }

    fn require_gates(&self) -> Result<f64, ManifoldError> {
        let g = self.gates();
        if !g.theta_dominates {
            return Err(ManifoldError::GateViolated {
                gate: "theta >= max(nu, omega)",
                value: g.theta,
                threshold: self.cert.nu.max(self.cert.omega),
            });
        }
        if !g.stable_gap_ok {
            return Err(ManifoldError::GateViolated {
                gate: "lambda_s < nu - theta",
                value: g.stable_gap,
                threshold: 0.0,
            });
        }
        if !g.unstable_gap_ok {
            return Err(ManifoldError::GateViolated {
                gate: "lambda_u > theta - omega",
                value: g.unstable_gap,
                threshold: 0.0,
            });
        }
        if !g.contraction_ok {
            return Err(ManifoldError::GateViolated {
                gate: "contraction factor < 1",
                value: g.contraction_factor,
                threshold: 1.0,
            });
        }
        Ok(g.contraction_factor)
    }

    /// Truncation horizon from the certified tail bound: smallest integer
    /// length whose tail drops below `fp_tol`, clamped to the window.
    pub fn horizon(&self, tau: f64, side: Side) -> Result<f64, ManifoldError> {
        if let Some(h) = self.settings.horizon {
            return Ok(h);
        }
        let theta = self.field.theta();
        let (gap, opposite_dim) = match side {
            Side::Stable => (
                self.cert.lambda_u - theta + self.cert.omega,
                self.ev.system().unstable_dim(),
            ),
            Side::Unstable => (
                -self.cert.lambda_s + self.cert.nu - theta,
                self.ev.system().stable_dim(),
            ),
        };
        if opposite_dim == 0 {
            // no tail integral at all: any horizon works
            return Ok(4.0_f64.min(self.settings.horizon_cap));
        }
        let (lo, hi) = self.ev.window();
        let max_h = match side {
            Side::Stable => (hi - tau).min(self.settings.horizon_cap),
            Side::Unstable => (tau - lo).min(self.settings.horizon_cap),
        };
        let pref = self.cert.d * self.field.delta_f() / gap;
        let lmu_tau = self.rate.log_eval(tau);
        let mut h = 1.0f64;
        loop {
            let decay = match side {
                Side::Stable => self.rate.log_eval(tau + h) - lmu_tau,
                Side::Unstable => lmu_tau - self.rate.log_eval(tau - h),
            };
            let tail = pref * (-gap * decay).exp();
            if tail < self.settings.fp_tol {
                return Ok(h);
            }
            if h >= max_h {
                return Err(ManifoldError::HorizonInsufficient {
                    cap: max_h,
                    tail,
                    tol: self.settings.fp_tol,
                });
            }
            h = (h + 1.0).min(max_h);
        }
    }

    fn make_grid(&self, tau: f64, horizon: f64, side: Side) -> Vec<f64> {
        let n = (horizon / self.settings.dt).ceil().max(2.0) as usize;
        let dt = horizon / n as f64;
        (0..=n)
            .map(|j| match side {
                Side::Stable => tau + j as f64 * dt,
                Side::Unstable => tau - j as f64 * dt,
            })
            .collect()
    }

    /// Operator factors over a grid; `tau` must be the grid's first entry.
    pub fn solver_tables(
        &self,
        tau: f64,
        grid: Vec<f64>,
        side: Side,
    ) -> Result<SolverTables, ManifoldError> {
        let mids_t: Vec<f64> = grid.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let mut seed_prop = Vec::with_capacity(grid.len());
        let mut fwd_s = Vec::with_capacity(grid.len());
        let mut fwd_u = Vec::with_capacity(grid.len());
        let mut bwd_s = Vec::with_capacity(grid.len());
        let mut bwd_u = Vec::with_capacity(grid.len());
        for &t in &grid {
            let m = match side {
                Side::Stable => self.ev.stable_part(t, tau)?,
                Side::Unstable => self.ev.unstable_part(t, tau)?,
            };
            seed_prop.push(m);
            fwd_s.push(self.ev.forward_stable(t)?);
            fwd_u.push(self.ev.forward_unstable(t)?);
            bwd_s.push(self.ev.backward_stable(t)?);
            bwd_u.push(self.ev.backward_unstable(t)?);
        }
        let mut bwd_s_mid = Vec::with_capacity(mids_t.len());
        let mut bwd_u_mid = Vec::with_capacity(mids_t.len());
        for &t in &mids_t {
            bwd_s_mid.push(self.ev.backward_stable(t)?);
            bwd_u_mid.push(self.ev.backward_unstable(t)?);
        }
        Ok(SolverTables {
            grid,
            mids_t,
            seed_prop,
            fwd_s,
            fwd_u,
            bwd_s,
            bwd_u,
            bwd_s_mid,
            bwd_u_mid,
        })
    }

    /// One Picard sweep. `rhs(t, x, j, is_mid)` is the effective forcing
    /// (the perturbation itself for manifolds, the difference against a
    /// base trajectory for leaves).
    fn sweep(
        &self,
        tab: &SolverTables,
        seed_nodes: &[DVector<f64>],
        side: Side,
        xs: &[DVector<f64>],
        rhs: &dyn Fn(f64, &DVector<f64>, usize, bool) -> DVector<f64>,
    ) -> Vec<DVector<f64>> {
        let n_nodes = tab.grid.len();
        let n = self.ev.dim();
        let mids = cell_midpoints(xs);
        let mut us = Vec::with_capacity(n_nodes);
        let mut uu = Vec::with_capacity(n_nodes);
        for j in 0..n_nodes {
            let f = rhs(tab.grid[j], &xs[j], j, false);
            us.push(&tab.bwd_s[j] * &f);
            uu.push(&tab.bwd_u[j] * &f);
        }
        let mut us_mid = Vec::with_capacity(mids.len());
        let mut uu_mid = Vec::with_capacity(mids.len());
        for j in 0..mids.len() {
            let f = rhs(tab.mids_t[j], &mids[j], j, true);
            us_mid.push(&tab.bwd_s_mid[j] * &f);
            uu_mid.push(&tab.bwd_u_mid[j] * &f);
        }
        // Simpson cells with signed length
        let cell = |a: &DVector<f64>, m: &DVector<f64>, b: &DVector<f64>, h: f64| {
            (a + m * 4.0 + b) * (h / 6.0)
        };
        let mut cells_s = Vec::with_capacity(mids.len());
        let mut cells_u = Vec::with_capacity(mids.len());
        for j in 0..mids.len() {
            let h = tab.grid[j + 1] - tab.grid[j];
            cells_s.push(cell(&us[j], &us_mid[j], &us[j + 1], h));
            cells_u.push(cell(&uu[j], &uu_mid[j], &uu[j + 1], h));
        }

        let zero = DVector::zeros(n);
        let mut out = Vec::with_capacity(n_nodes);
        match side {
            Side::Stable => {
                // prefix of the contracted part, suffix of the expanded tail
                let mut prefix = vec![zero.clone(); n_nodes];
                for j in 0..cells_s.len() {
                    prefix[j + 1] = &prefix[j] + &cells_s[j];
                }
                let mut suffix = vec![zero; n_nodes];
                for j in (0..cells_u.len()).rev() {
                    suffix[j] = &suffix[j + 1] + &cells_u[j];
                }
                for j in 0..n_nodes {
                    out.push(&seed_nodes[j] + &tab.fwd_s[j] * &prefix[j] - &tab.fwd_u[j] * &suffix[j]);
                }
            }
            Side::Unstable => {
                // the grid descends from tau, so the signed prefix carries
                // the expanded part and the suffix the contracted tail
                let mut prefix = vec![zero.clone(); n_nodes];
                for j in 0..cells_u.len() {
                    prefix[j + 1] = &prefix[j] + &cells_u[j];
                }
                let mut suffix = vec![zero; n_nodes];
                for j in (0..cells_s.len()).rev() {
                    suffix[j] = &suffix[j + 1] + &cells_s[j];
                }
                for j in 0..n_nodes {
                    out.push(&seed_nodes[j] + &tab.fwd_u[j] * &prefix[j] - &tab.fwd_s[j] * &suffix[j]);
                }
            }
        }
        out
    }

    fn iterate(
        &self,
        tab: &SolverTables,
        seed_nodes: &[DVector<f64>],
        side: Side,
        seed_traj: Vec<DVector<f64>>,
        rhs: &dyn Fn(f64, &DVector<f64>, usize, bool) -> DVector<f64>,
    ) -> Result<(Vec<DVector<f64>>, Vec<f64>), ManifoldError> {
        let mut xs = seed_traj;
        let mut deltas = Vec::new();
        for _ in 0..self.settings.max_iter {
            let next = self.sweep(tab, seed_nodes, side, &xs, rhs);
            let delta = xs
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0f64, f64::max);
            deltas.push(delta);
            xs = next;
            if delta < self.settings.fp_tol {
                return Ok((xs, deltas));
            }
        }
        Err(ManifoldError::NotConverged {
            iterations: self.settings.max_iter,
            last_delta: *deltas.last().unwrap_or(&f64::NAN),
            tol: self.settings.fp_tol,
        })
    }

    pub fn solve_stable_manifold(
        &self,
        tau: f64,
        xi: &DVector<f64>,
    ) -> Result<ManifoldPoint, ManifoldError> {
        self.solve_manifold(tau, xi, Side::Stable, None)
    }

    pub fn solve_unstable_manifold(
        &self,
        tau: f64,
        xi: &DVector<f64>,
    ) -> Result<ManifoldPoint, ManifoldError> {
        self.solve_manifold(tau, xi, Side::Unstable, None)
    }

    /// `seed`: optional initial trajectory guess (continuation).
    pub fn solve_manifold(
        &self,
        tau: f64,
        xi: &DVector<f64>,
        side: Side,
        seed: Option<&[DVector<f64>]>,
    ) -> Result<ManifoldPoint, ManifoldError> {
        let horizon = self.horizon(tau, side)?;
        let grid = self.make_grid(tau, horizon, side);
        let tab = self.solver_tables(tau, grid, side)?;
        self.solve_manifold_with(&tab, tau, xi, side, seed)
    }

    /// Manifold solve over prebuilt operator tables (shared across base
    /// coordinates at the same base time).
    pub fn solve_manifold_with(
        &self,
        tab: &SolverTables,
        tau: f64,
        xi: &DVector<f64>,
        side: Side,
        seed: Option<&[DVector<f64>]>,
    ) -> Result<ManifoldPoint, ManifoldError> {
        self.require_gates()?;
        let proj = match side {
            Side::Stable => self.ev.projection(tau)?,
            Side::Unstable => {
                let p = self.ev.projection(tau)?;
                DMatrix::identity(p.nrows(), p.ncols()) - p
            }
        };
        let xi_p = &proj * xi;
        let seed_nodes: Vec<DVector<f64>> = tab.seed_prop.iter().map(|m| m * &xi_p).collect();

        let field = self.field;
        let rhs = move |t: f64, x: &DVector<f64>, _j: usize, _mid: bool| field.eval(t, x);
        let seed_traj = match seed {
            Some(s) if s.len() == tab.grid.len() => s.to_vec(),
            _ => seed_nodes.clone(),
        };
        let (xs, deltas) = self.iterate(&tab, &seed_nodes, side, seed_traj, &rhs)?;
        let graph = &xs[0] - &xi_p;
        let horizon = (tab.grid.last().unwrap() - tab.grid.first().unwrap()).abs();
        Ok(ManifoldPoint {
            side,
            tau,
            point: xs[0].clone(),
            xi: xi_p,
            graph,
            grid: tab.grid.clone(),
            trajectory: xs,
            deltas,
            horizon,
        })
    }

    /// Integrate the nonlinear base trajectory used by leaf solves at
    /// `(tau, x)` once, for reuse across offsets.
    pub fn base_trajectory(
        &self,
        tau: f64,
        x: &DVector<f64>,
        side: Side,
    ) -> Result<BaseTrajectory, ManifoldError> {
        let horizon = self.horizon(tau, side)?;
        let grid = self.make_grid(tau, horizon, side);
        let tables = Arc::new(self.solver_tables(tau, grid.clone(), side)?);
        let flow = Flow::new(self.ev, self.field);
        let states = flow.solve_path(&grid, x)?;
        let mids = cell_midpoints(&states);
        Ok(BaseTrajectory {
            tau,
            side,
            grid,
            states,
            mids,
            tables,
        })
    }

    pub fn solve_stable_leaf(
        &self,
        tau: f64,
        zeta: &DVector<f64>,
        x: &DVector<f64>,
    ) -> Result<LeafPoint, ManifoldError> {
        let base = self.base_trajectory(tau, x, Side::Stable)?;
        self.solve_leaf_with_base(&base, zeta)
    }

    pub fn solve_unstable_leaf(
        &self,
        tau: f64,
        zeta: &DVector<f64>,
        x: &DVector<f64>,
    ) -> Result<LeafPoint, ManifoldError> {
        let base = self.base_trajectory(tau, x, Side::Unstable)?;
        self.solve_leaf_with_base(&base, zeta)
    }

    pub fn solve_leaf_with_base(
        &self,
        base: &BaseTrajectory,
        zeta: &DVector<f64>,
    ) -> Result<LeafPoint, ManifoldError> {
        self.require_gates()?;
        let side = base.side;
        let tau = base.tau;
        let proj = self.ev.projection(tau)?;
        let co = DMatrix::identity(proj.nrows(), proj.ncols()) - &proj;
        let (own, other) = match side {
            Side::Stable => (&proj, &co),
            Side::Unstable => (&co, &proj),
        };
        let zeta_p = own * zeta;
        let offset = &zeta_p - own * &base.states[0];
        let horizon = base.grid.last().unwrap() - base.grid.first().unwrap();
        let tab = base.tables.as_ref();
        let seed_nodes: Vec<DVector<f64>> = tab.seed_prop.iter().map(|m| m * &offset).collect();

        let field = self.field;
        let rhs = move |t: f64, p: &DVector<f64>, j: usize, mid: bool| {
            let xb = if mid { &base.mids[j] } else { &base.states[j] };
            field.eval(t, &(p + xb)) - field.eval(t, xb)
        };
        let (ps, deltas) = self.iterate(tab, &seed_nodes, side, seed_nodes.clone(), &rhs)?;
        let h = other * (&ps[0] + &base.states[0]);
        Ok(LeafPoint {
            side,
            tau,
            zeta: zeta_p.clone(),
            base_point: base.states[0].clone(),
            offset,
            point: &zeta_p + &h,
            h,
            grid: base.grid.clone(),
            deltas,
            horizon: horizon.abs(),
        })
    }
}

/// Flow a solved graph point forward (stable) or backward (unstable) and
/// measure the defect against the re-solved graph at the arrival time.
pub fn manifold_invariance_residual(
    cx: &LpContext,
    point: &ManifoldPoint,
    t1: f64,
) -> Result<f64, ManifoldError> {
    let flow = Flow::new(cx.ev, cx.field);
    let arrived = flow.solve(t1, point.tau, &point.point)?;
    let re = cx.solve_manifold(t1, &arrived, point.side, None)?;
    Ok((&arrived - &re.point).norm())
}

/// Flow a leaf point and its base, re-solve the leaf at the arrival
/// time, and measure the defect.
pub fn leaf_invariance_residual(
    cx: &LpContext,
    leaf: &LeafPoint,
    t1: f64,
) -> Result<f64, ManifoldError> {
    let flow = Flow::new(cx.ev, cx.field);
    let arrived = flow.solve(t1, leaf.tau, &leaf.point)?;
    let base_arrived = flow.solve(t1, leaf.tau, &leaf.base_point)?;
    let re = match leaf.side {
        Side::Stable => cx.solve_stable_leaf(t1, &arrived, &base_arrived)?,
        Side::Unstable => cx.solve_unstable_leaf(t1, &arrived, &base_arrived)?,
    };
    Ok((&arrived - &re.point).norm())
}

/// Settings for graph tabulation.
#[derive(Debug, Clone, Copy)]
pub struct TableSettings {
    pub t_range: (f64, f64),
    pub t_step: f64,
    pub c_max: f64,
    pub c_step: f64,
    /// Probe a handful of points first; a graph that vanishes there is
    /// treated as identically zero (validated later by the residual checks).
    pub detect_zero: bool,
}

impl Default for TableSettings {
    fn default() -> Self {
        TableSettings {
            t_range: (-24.0, 26.0),
            t_step: 0.5,
            c_max: 4.0,
            c_step: 0.1,
            detect_zero: true,
        }
    }
}

/// Tabulated graph of one side over `(t, c)` with the base coordinate
/// `c` taken along a propagated unit frame of the one-dimensional side.
pub struct GraphTable {
    pub side: Side,
    anchor_dir: DVector<f64>,
    t0: f64,
    dt: f64,
    c0: f64,
    dc: f64,
    nt: usize,
    nc: usize,
    /// values, row-major over (t, c); empty when `zero`
    values: Vec<DVector<f64>>,
    pub zero: bool,
    n: usize,
}

impl GraphTable {
    /// Identically zero graph (empty side or detected-zero coupling).
    pub fn zero_table(side: Side, n: usize) -> Self {
        GraphTable {
            side,
            anchor_dir: DVector::zeros(n),
            t0: 0.0,
            dt: 1.0,
            c0: 0.0,
            dc: 1.0,
            nt: 0,
            nc: 0,
            values: Vec::new(),
            zero: true,
            n,
        }
    }

    /// Unit frame of the (one-dimensional) side at time `t`, continuous
    /// in `t` by propagation of the anchor direction.
    pub fn frame(&self, ev: &TransitionEvaluator, t: f64) -> Result<DVector<f64>, LinflowError> {
        let m = match self.side {
            Side::Stable => ev.forward_stable(t)?,
            Side::Unstable => ev.forward_unstable(t)?,
        };
        let v = m * &self.anchor_dir;
        let norm = v.norm();
        Ok(v / norm)
    }

    pub fn build(cx: &LpContext, side: Side, ts: &TableSettings) -> Result<GraphTable, ManifoldError> {
        let n = cx.ev.dim();
        let d = match side {
            Side::Stable => cx.ev.system().stable_dim(),
            Side::Unstable => cx.ev.system().unstable_dim(),
        };
        if d == 0 {
            return Ok(GraphTable::zero_table(side, n));
        }
        if d != 1 {
            return Err(ManifoldError::TableDimension { d });
        }
        // anchor direction: dominant range direction of the anchor projection
        let pi0 = cx.ev.system().anchor_projection();
        let anchor = match side {
            Side::Stable => pi0.clone(),
            Side::Unstable => DMatrix::identity(n, n) - pi0,
        };
        let svd = anchor.svd(true, false);
        let u = svd.u.as_ref().expect("svd with u");
        let anchor_dir: DVector<f64> = u.column(0).into_owned();

        let mut table = GraphTable {
            side,
            anchor_dir,
            t0: ts.t_range.0,
            dt: ts.t_step,
            c0: -ts.c_max,
            dc: ts.c_step,
            nt: ((ts.t_range.1 - ts.t_range.0) / ts.t_step).round() as usize + 1,
            nc: (2.0 * ts.c_max / ts.c_step).round() as usize + 1,
            values: Vec::new(),
            zero: false,
            n,
        };

        if ts.detect_zero {
            let mut worst: f64 = 0.0;
            'probe: for &tp in &[ts.t_range.0, 0.5 * (ts.t_range.0 + ts.t_range.1), ts.t_range.1] {
                for &cp in &[-ts.c_max, -0.3 * ts.c_max, 0.4 * ts.c_max, ts.c_max] {
                    let dir = table.frame(cx.ev, tp)?;
                    let g = cx.solve_manifold(tp, &(dir * cp), side, None)?.graph;
                    worst = worst.max(g.norm());
                    if worst > 10.0 * cx.settings.fp_tol {
                        break 'probe;
                    }
                }
            }
            if worst <= 10.0 * cx.settings.fp_tol {
                table.zero = true;
                return Ok(table);
            }
        }

        table.values = vec![DVector::zeros(n); table.nt * table.nc];
        let zero_c_idx = (table.nc - 1) / 2;
        for it in 0..table.nt {
            let t = table.t0 + it as f64 * table.dt;
            let dir = table.frame(cx.ev, t)?;
            let horizon = cx.horizon(t, side)?;
            let grid = cx.make_grid(t, horizon, side);
            let tab = cx.solver_tables(t, grid, side)?;
            // stored values live exactly in the complementary subspace;
            // projecting kills solver noise in the graph's own directions
            let pi = cx.ev.projection(t)?;
            let co = match side {
                Side::Stable => DMatrix::identity(n, n) - &pi,
                Side::Unstable => pi.clone(),
            };
            // continuation outward from c = 0 in both directions
            for sweep in [1i64, -1i64] {
                let mut prev: Option<Vec<DVector<f64>>> = None;
                let mut ic = zero_c_idx as i64;
                loop {
                    ic += sweep;
                    if ic < 0 || ic >= table.nc as i64 {
                        break;
                    }
                    let c = table.c0 + ic as f64 * table.dc;
                    let point =
                        cx.solve_manifold_with(&tab, t, &(&dir * c), side, prev.as_deref())?;
                    table.values[it * table.nc + ic as usize] = &co * &point.graph;
                    prev = Some(point.trajectory);
                }
            }
        }
        Ok(table)
    }

    fn node(&self, it: i64, ic: i64) -> &DVector<f64> {
        let it = it.clamp(0, self.nt as i64 - 1) as usize;
        let ic = ic.clamp(0, self.nc as i64 - 1) as usize;
        &self.values[it * self.nc + ic]
    }

    /// Interpolated value and its derivative with respect to the frame
    /// coordinate; clamped beyond the tabulated domain (linear extension
    /// in `c`, constant in `t`).
    pub fn value_slope(&self, t: f64, c: f64) -> (DVector<f64>, DVector<f64>) {
        if self.zero {
            return (DVector::zeros(self.n), DVector::zeros(self.n));
        }
        let tt = ((t - self.t0) / self.dt).clamp(0.0, (self.nt - 1) as f64);
        let it = (tt.floor() as i64).min(self.nt as i64 - 2).max(0);
        let wt = tt - it as f64;
        let c_hi = self.c0 + (self.nc - 1) as f64 * self.dc;
        let c_in = c.clamp(self.c0, c_hi);
        let cc = (c_in - self.c0) / self.dc;
        let ic = (cc.floor() as i64).min(self.nc as i64 - 2).max(0);
        let wc = cc - ic as f64;

        // Catmull-Rom in c at four t-rows, then in t
        let mut rows_v = Vec::with_capacity(4);
        let mut rows_d = Vec::with_capacity(4);
        for dt_i in -1..=2i64 {
            let p0 = self.node(it + dt_i, ic - 1);
            let p1 = self.node(it + dt_i, ic);
            let p2 = self.node(it + dt_i, ic + 1);
            let p3 = self.node(it + dt_i, ic + 2);
            let (v, d) = catmull(p0, p1, p2, p3, wc);
            rows_v.push(v);
            rows_d.push(d / self.dc);
        }
        let (mut v, _) = catmull(&rows_v[0], &rows_v[1], &rows_v[2], &rows_v[3], wt);
        let (d, _) = catmull(&rows_d[0], &rows_d[1], &rows_d[2], &rows_d[3], wt);
        if c != c_in {
            // short linear extension beyond the c-domain, then freeze:
            // far outside the tabulated box only boundedness matters
            let ext = (c - c_in).clamp(-2.0 * self.dc, 2.0 * self.dc);
            v += &d * ext;
            if (c - c_in).abs() > 2.0 * self.dc {
                return (v, DVector::zeros(self.n));
            }
        }
        (v, d)
    }
}

fn catmull(
    p0: &DVector<f64>,
    p1: &DVector<f64>,
    p2: &DVector<f64>,
    p3: &DVector<f64>,
    u: f64,
) -> (DVector<f64>, DVector<f64>) {
    let a = p1 * 2.0;
    let b = p2 - p0;
    let c = p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3;
    let d = -p0 + p1 * 3.0 - p2 * 3.0 + p3;
    let v = (&a + &b * u + &c * (u * u) + &d * (u * u * u)) * 0.5;
    let dv = (&b + &c * (2.0 * u) + &d * (3.0 * u * u)) * 0.5;
    (v, dv)
}

/// Perturbation conjugated by one graph: the coordinates in which that
/// side's invariant manifold is the subspace itself.
pub struct StraightenedField {
    base: Arc<dyn VectorField>,
    ev: Arc<TransitionEvaluator>,
    table: GraphTable,
    /// projection and frame per exact evaluation time; grid times recur
    /// constantly inside the fixed-point sweeps
    frames: Mutex<HashMap<u64, (DMatrix<f64>, DVector<f64>)>>,
}

impl StraightenedField {
    pub fn new(base: Arc<dyn VectorField>, ev: Arc<TransitionEvaluator>, table: GraphTable) -> Self {
        StraightenedField {
            base,
            ev,
            table,
            frames: Mutex::new(HashMap::new()),
        }
    }

    fn frame_at(&self, t: f64) -> Result<(DMatrix<f64>, DVector<f64>), LinflowError> {
        let key = t.to_bits();
        if let Some(hit) = self.frames.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let pi = self.ev.projection(t)?;
        let dir = self.table.frame(&self.ev, t)?;
        let mut cache = self.frames.lock().unwrap();
        if cache.len() > 200_000 {
            cache.clear();
        }
        cache.insert(key, (pi.clone(), dir.clone()));
        Ok((pi, dir))
    }

    pub fn table(&self) -> &GraphTable {
        &self.table
    }

    fn own_part(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>, LinflowError> {
        let pi = self.ev.projection(t)?;
        Ok(match self.table.side {
            Side::Stable => &pi * x,
            Side::Unstable => x - &pi * x,
        })
    }

    /// The change of variables itself: subtract the graph value over the
    /// point's own-side component.
    pub fn transform_point(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>, LinflowError> {
        if self.table.zero {
            return Ok(x.clone());
        }
        let own = self.own_part(t, x)?;
        let dir = self.table.frame(&self.ev, t)?;
        let (g, _) = self.table.value_slope(t, dir.dot(&own));
        Ok(x - g)
    }

    /// Explicit inverse: the graph feeds on the unchanged component.
    pub fn untransform_point(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>, LinflowError> {
        if self.table.zero {
            return Ok(y.clone());
        }
        let own = self.own_part(t, y)?;
        let dir = self.table.frame(&self.ev, t)?;
        let (g, _) = self.table.value_slope(t, dir.dot(&own));
        Ok(y + g)
    }
}

impl VectorField for StraightenedField {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval(&self, t: f64, y: &DVector<f64>) -> DVector<f64> {
        if self.table.zero {
            return self.base.eval(t, y);
        }
        let Ok((pi, dir)) = self.frame_at(t) else {
            return DVector::from_element(self.base.dim(), f64::NAN);
        };
        let y_own = match self.table.side {
            Side::Unstable => y - &pi * y,
            Side::Stable => &pi * y,
        };
        let c = dir.dot(&y_own);
        let (g, dg) = self.table.value_slope(t, c);
        let x = y + &g;
        let x_hat = &y_own + &g;
        let fx = self.base.eval(t, &x);
        let fh = self.base.eval(t, &x_hat);
        let diff = &fx - &fh;
        let pi_diff = &pi * &diff;
        match self.table.side {
            Side::Unstable => {
                // new stable part: pi(f - f^) - Dg[(id-pi)(f - f^)];
                // the expanded part is untouched
                let u_diff = &diff - &pi_diff;
                let correction = &dg * dir.dot(&u_diff);
                let fu = &fx - &pi * &fx;
                pi_diff - correction + fu
            }
            Side::Stable => {
                // contracted part untouched; new expanded part:
                // (id-pi)(f - f^) - Dg[pi(f - f^)]
                let u_diff = &diff - &pi_diff;
                let correction = &dg * dir.dot(&pi_diff);
                let fs = &pi * &fx;
                fs + u_diff - correction
            }
        }
    }

    fn delta_f(&self) -> f64 {
        self.base.delta_f()
    }

    fn theta(&self) -> f64 {
        self.base.theta()
    }
}

/// Report of a straightening pass.
#[derive(Debug, Clone, Serialize)]
pub struct StraighteningReport {
    pub unstable_graph_zero: bool,
    pub stable_graph_zero: bool,
    /// worst `|pi f(t, (id-pi)y)|` over samples
    pub residual_stable_component: f64,
    /// worst `|(id-pi) f(t, pi y)|` over samples
    pub residual_unstable_component: f64,
    pub tol: f64,
}

impl StraighteningReport {
    pub fn passed(&self) -> bool {
        self.residual_stable_component <= self.tol && self.residual_unstable_component <= self.tol
    }
}

/// The two-step straightening: the flattened field plus the point
/// transforms between original and flattened coordinates.
pub struct Straightening {
    pub field: Arc<dyn VectorField>,
    xi_u: Arc<StraightenedField>,
    xi_s: Arc<StraightenedField>,
    pub report: StraighteningReport,
}

impl Straightening {
    pub fn transform(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>, ManifoldError> {
        let y = self.xi_u.transform_point(t, x)?;
        Ok(self.xi_s.transform_point(t, &y)?)
    }

    pub fn untransform(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>, ManifoldError> {
        let x = self.xi_s.untransform_point(t, y)?;
        Ok(self.xi_u.untransform_point(t, &x)?)
    }
}

/// Straighten both graphs: first the unstable one, then the stable graph
/// of the intermediate field. The residual report covers the given
/// samples.
pub fn straighten(
    ev: &Arc<TransitionEvaluator>,
    field: Arc<dyn VectorField>,
    rate: &GrowthRate,
    cert: &DichotomyCertificate,
    lp: LpSettings,
    ts: &TableSettings,
    samples: &[(f64, DVector<f64>)],
) -> Result<Straightening, ManifoldError> {
    // the unstable table is consumed inside stable-graph solves up to one
    // stable horizon beyond the stable table's reach
    let cx_u = LpContext::new(ev, field.as_ref(), rate, cert, lp);
    let ext = cx_u
        .horizon(ts.t_range.1, Side::Stable)
        .unwrap_or(lp.horizon_cap);
    let (wlo, whi) = ev.window();
    let ts_u = TableSettings {
        t_range: (
            ts.t_range.0.max(wlo + 0.5),
            (ts.t_range.1 + ext).min(whi - 0.5),
        ),
        ..*ts
    };
    let table_u = GraphTable::build(&cx_u, Side::Unstable, &ts_u)?;
    let unstable_zero = table_u.zero;
    let xi_u = Arc::new(StraightenedField::new(field, ev.clone(), table_u));
    let w1: Arc<dyn VectorField> = xi_u.clone();

    let cx_s = LpContext::new(ev, w1.as_ref(), rate, cert, lp);
    let table_s = GraphTable::build(&cx_s, Side::Stable, ts)?;
    let stable_zero = table_s.zero;
    let xi_s = Arc::new(StraightenedField::new(w1, ev.clone(), table_s));
    let w2: Arc<dyn VectorField> = xi_s.clone();

    let mut worst_s: f64 = 0.0;
    let mut worst_u: f64 = 0.0;
    for (t, y) in samples {
        let pi = ev.projection(*t)?;
        let y_s = &pi * y;
        let y_u = y - &y_s;
        let f_on_unstable = w2.eval(*t, &y_u);
        worst_s = worst_s.max((&pi * &f_on_unstable).norm());
        let f_on_stable = w2.eval(*t, &y_s);
        worst_u = worst_u.max((&f_on_stable - &pi * &f_on_stable).norm());
    }
    let report = StraighteningReport {
        unstable_graph_zero: unstable_zero,
        stable_graph_zero: stable_zero,
        residual_stable_component: worst_s,
        residual_unstable_component: worst_u,
        tol: 10.0 * lp.fp_tol,
    };
    Ok(Straightening {
        field: w2,
        xi_u,
        xi_s,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::linflow::{LinearSystem, TransitionSettings};
    use crate::nonlinear::Perturbation;

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

    fn sin_perturbation() -> Perturbation {
        Perturbation::new(
            vec![parse("0").unwrap(), parse("0.1*sin(x1)").unwrap()],
            2,
            0.1,
            0.0,
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
    fn contraction_factor_reference() {
        let cert = diag_cert();
        assert!((contraction_factor(&cert, 0.1, 0.0, 1, 1) - 0.2).abs() < 1e-14);
        assert!((contraction_factor(&cert, 0.6, 0.0, 1, 1) - 1.2).abs() < 1e-14);
        // one-sided variant drops the missing term
        assert!((contraction_factor(&cert, 0.1, 0.0, 1, 0) - 0.1).abs() < 1e-14);
    }

    #[test]
    fn gate_violation_reported() {
        let ev = diag_ev();
        let p = Perturbation::new(
            vec![parse("0").unwrap(), parse("0.6*sin(x1)").unwrap()],
            2,
            0.6,
            0.0,
        )
        .unwrap();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let err = cx.solve_stable_manifold(0.0, &vec2(1.0, 0.0)).unwrap_err();
        match err {
            ManifoldError::GateViolated { gate, value, .. } => {
                assert_eq!(gate, "contraction factor < 1");
                assert!((value - 1.2).abs() < 1e-12);
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn zero_field_graph_vanishes() {
        let ev = diag_ev();
        let p = Perturbation::zero(2);
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        for xi in [vec2(0.5, 0.0), vec2(-2.0, 0.0)] {
            let point = cx.solve_stable_manifold(0.5, &xi).unwrap();
            assert!(point.graph.norm() < 1e-12);
            // trajectory is the linear flow
            let tlast = *point.grid.last().unwrap();
            let lin = ev.stable_part(tlast, 0.5).unwrap() * &xi;
            assert!((point.trajectory.last().unwrap() - lin).norm() < 1e-9);
        }
        let point = cx.solve_unstable_manifold(0.0, &vec2(0.0, 1.2)).unwrap();
        assert!(point.graph.norm() < 1e-12);
    }

    #[test]
    fn origin_is_fixed() {
        let ev = diag_ev();
        let p = sin_perturbation();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let point = cx.solve_stable_manifold(0.0, &vec2(0.0, 0.0)).unwrap();
        assert_eq!(point.graph.norm(), 0.0);
        assert!(point.trajectory.iter().all(|x| x.norm() == 0.0));
    }

    /// Shooting oracle: find the expanded-direction offset that keeps the
    /// forward solution bounded, by bisection on the sign at a late time.
    fn shooting_oracle(ev: &TransitionEvaluator, p: &Perturbation, xi1: f64) -> f64 {
        let flow = Flow::new(ev, p);
        let t_end = 16.0;
        let escapes = |c: f64| -> f64 {
            let x = flow.solve(t_end, 0.0, &vec2(xi1, c)).unwrap();
            x[1]
        };
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        assert!(escapes(lo) < 0.0 && escapes(hi) > 0.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if escapes(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn stable_graph_matches_shooting_oracle() {
        let ev = diag_ev();
        let p = sin_perturbation();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        for xi1 in [0.8, -1.5] {
            let point = cx.solve_stable_manifold(0.0, &vec2(xi1, 0.0)).unwrap();
            let oracle = shooting_oracle(&ev, &p, xi1);
            assert!(
                (point.graph[1] - oracle).abs() < 1e-6,
                "xi1={xi1}: solver {} vs oracle {oracle}",
                point.graph[1]
            );
        }
    }

    #[test]
    fn contraction_rate_within_budget() {
        let ev = diag_ev();
        let p = sin_perturbation();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let point = cx.solve_stable_manifold(0.0, &vec2(1.3, 0.0)).unwrap();
        // ratios after the first iteration must respect the certified factor
        for w in point.deltas.windows(2) {
            if w[0] < 100.0 * cx.settings.fp_tol {
                break;
            }
            assert!(w[1] / w[0] <= 0.25, "ratio {}", w[1] / w[0]);
        }
    }

    #[test]
    fn unstable_graph_mirrored_oracle() {
        let ev = diag_ev();
        // coupling driven by the expanded coordinate
        let p = Perturbation::new(
            vec![parse("0.1*sin(x2)").unwrap(), parse("0").unwrap()],
            2,
            0.1,
            0.0,
        )
        .unwrap();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let point = cx.solve_unstable_manifold(0.0, &vec2(0.0, 1.1)).unwrap();
        // backward shooting: contracted offset keeping the backward
        // solution bounded
        let flow = Flow::new(&ev, &p);
        let t_end = -16.0;
        let escapes = |c: f64| flow.solve(t_end, 0.0, &vec2(c, 1.1)).unwrap()[0];
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        assert!(escapes(lo) < 0.0 && escapes(hi) > 0.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if escapes(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert!(
            (point.graph[0] - oracle).abs() < 1e-6,
            "solver {} vs oracle {}",
            point.graph[0],
            oracle
        );
    }

    #[test]
    fn leaf_zero_field_closed_form() {
        let ev = diag_ev();
        let p = Perturbation::zero(2);
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let x = vec2(0.7, -0.4);
        let zeta = vec2(1.5, 0.0);
        let leaf = cx.solve_stable_leaf(0.0, &zeta, &x).unwrap();
        // h = (id - pi) x regardless of the offset
        assert!((leaf.h[1] - (-0.4)).abs() < 1e-10);
        assert!(leaf.h[0].abs() < 1e-12);
    }

    #[test]
    fn leaf_through_base_point() {
        let ev = diag_ev();
        let p = sin_perturbation();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let x = vec2(0.9, 0.3);
        let zeta = vec2(0.9, 0.0); // = pi x
        let leaf = cx.solve_stable_leaf(0.0, &zeta, &x).unwrap();
        assert!((leaf.point - x).norm() < 1e-10, "leaf through base");
    }

    #[test]
    fn same_leaf_same_map() {
        let ev = diag_ev();
        let p = sin_perturbation();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let x = vec2(0.8, 0.2);
        // y sits on x's leaf
        let y = cx.solve_stable_leaf(0.0, &vec2(-0.5, 0.0), &x).unwrap().point;
        for probe in [0.3, -1.1] {
            let zeta = vec2(probe, 0.0);
            let hx = cx.solve_stable_leaf(0.0, &zeta, &x).unwrap().h;
            let hy = cx.solve_stable_leaf(0.0, &zeta, &y).unwrap().h;
            assert!((hx - hy).norm() < 1e-6, "leaf maps differ");
        }
    }

    #[test]
    fn lipschitz_budget_sampled() {
        let ev = diag_ev();
        let p = sin_perturbation();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let dtf = contraction_factor(&cert, 0.1, 0.0, 1, 1);
        let budget = lip_stable_graph(&cert, 0.1, 0.0, dtf);
        let pairs = [(0.4, 1.0), (-1.2, 0.3), (1.8, -1.8)];
        for (a, b) in pairs {
            let ga = cx.solve_stable_manifold(0.0, &vec2(a, 0.0)).unwrap().graph;
            let gb = cx.solve_stable_manifold(0.0, &vec2(b, 0.0)).unwrap().graph;
            let ratio = (ga - gb).norm() / (a - b).abs();
            assert!(ratio <= budget * 1.1, "ratio {ratio} exceeds budget {budget}");
        }
    }

    #[test]
    fn horizon_doubling_stable() {
        let ev = diag_ev();
        let p = sin_perturbation();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let short = LpContext::new(
            &ev,
            &p,
            &rate,
            &cert,
            LpSettings {
                horizon: Some(10.0),
                ..LpSettings::default()
            },
        );
        let long = LpContext::new(
            &ev,
            &p,
            &rate,
            &cert,
            LpSettings {
                horizon: Some(20.0),
                ..LpSettings::default()
            },
        );
        let g1 = short.solve_stable_manifold(0.0, &vec2(1.0, 0.0)).unwrap().graph;
        let g2 = long.solve_stable_manifold(0.0, &vec2(1.0, 0.0)).unwrap().graph;
        assert!((g1 - g2).norm() < 1e-7, "truncation tail too fat");
    }

    #[test]
    fn invariance_residuals() {
        let ev = diag_ev();
        let p = sin_perturbation();
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let cx = LpContext::new(&ev, &p, &rate, &cert, LpSettings::default());
        let point = cx.solve_stable_manifold(0.0, &vec2(1.0, 0.0)).unwrap();
        let res = manifold_invariance_residual(&cx, &point, 1.0).unwrap();
        assert!(res < 1e-5, "manifold residual {res}");

        let leaf = cx
            .solve_stable_leaf(0.0, &vec2(0.5, 0.0), &vec2(0.8, 0.6))
            .unwrap();
        let res = leaf_invariance_residual(&cx, &leaf, 1.0).unwrap();
        assert!(res < 1e-5, "leaf residual {res}");
    }

    #[test]
    fn straightening_flattens_reference() {
        let ev = Arc::new(diag_ev());
        let p: Arc<dyn VectorField> = Arc::new(sin_perturbation());
        let rate = GrowthRate::exponential();
        let cert = diag_cert();
        let lp = LpSettings {
            dt: 0.1,
            ..LpSettings::default()
        };
        let ts = TableSettings {
            t_range: (-3.0, 6.0),
            t_step: 0.5,
            c_max: 3.0,
            c_step: 0.1,
            detect_zero: true,
        };
        let samples: Vec<(f64, DVector<f64>)> = vec![
            (0.0, vec2(1.0, 0.5)),
            (1.0, vec2(-0.7, 1.2)),
            (-2.0, vec2(0.4, -0.9)),
        ];
        let st = straighten(&ev, p, &rate, &cert, lp, &ts, &samples).unwrap();
        assert!(st.report.unstable_graph_zero, "expanded coupling absent here");
        assert!(!st.report.stable_graph_zero);
        assert!(st.report.passed(), "{:?}", st.report);
        // this reference linearizes completely: the flattened field is tiny
        for (t, y) in &samples {
            let v = st.field.eval(*t, y).norm();
            assert!(v < 1e-5, "flattened field not small: {v}");
        }
        // the point transforms invert each other
        for (t, y) in &samples {
            let fwd = st.transform(*t, y).unwrap();
            let back = st.untransform(*t, &fwd).unwrap();
            assert!((back - y).norm() < 1e-12);
        }
    }
}
