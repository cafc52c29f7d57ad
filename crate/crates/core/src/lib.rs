//! Desk-scale numerical machinery for nonautonomous linear systems with
//! tempered (mu-scaled) hyperbolicity: certification of dichotomy
//! estimates, Lyapunov function construction, invariant manifolds and
//! foliations by Picard iteration on integral equations, a splitting
//! homeomorphism, and a crossing-time linearization map, all verified
//! against closed-form references and property checks.

pub mod conjugacy;
pub mod expr;
pub mod growth;
pub mod linflow;
pub mod lyapunov;
pub mod manifolds;
pub mod nonlinear;
pub mod ode;
pub mod quad;
pub mod report;
pub mod sample;
pub mod scenario;
pub mod splitting;

pub use growth::GrowthRate;
pub use linflow::{
    DichotomyCertificate, GrowthCertificate, LinearSystem, ProjectionFamily, TransitionEvaluator,
};
