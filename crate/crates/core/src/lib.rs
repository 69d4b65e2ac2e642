//! Monte Carlo estimation of exponential expectations
//! `A(eps) = E[exp(f(X_T)/eps)]` for small-noise diffusions
//!
//! ```text
//!     dX_t = b(X_t) dt + sqrt(eps) sigma dB_t,   X_0 = x0,
//! ```
//!
//! with importance-sampling controls built around the instanton (the
//! zero-noise most likely fluctuation path). The crate provides:
//!
//! - [`model`]: problem definitions (drift, diffusion, observable) with
//!   finite-difference validation of user-supplied derivatives;
//! - [`odesolve`]: the instanton forward-backward system and the Riccati
//!   terminal-value problem on a shared uniform grid;
//! - [`bias`]: tilting controls of order 1 (linear around the instanton)
//!   and order 2 (quadratic, Riccati curvature);
//! - [`mc`]: Euler-Maruyama simulation of tilted trajectories with
//!   Girsanov log-weights, reproducible across any number of workers;
//! - [`stats`]: log-domain moment accumulation, the relative second-moment
//!   ratio rho(eps), the log-efficiency R(eps) = eps*log(rho), bootstrap
//!   confidence intervals and decay-order fits;
//! - [`oracle`]: independent ground truth (1D finite-difference solution
//!   of the linear backward PDE, and the closed-form linear-quadratic case).
//!
//! All estimators live in log-domain end to end: `exp(f/eps)` overflows
//! doubles long before the interesting small-`eps` regime.

pub mod bias;
pub mod mc;
pub mod model;
pub mod odesolve;
pub mod oracle;
pub mod stats;

pub use bias::{BiasControl, ControlKind};
pub use mc::{
    residual_mgf_check, simulate_batch, simulate_one, trajectory_rng, BatchOutput, SimConfig,
    TrajectorySample,
};
pub use model::{
    check_theorem_conditions, make_lq_case, make_ou_quartic, ConditionReport, DiffusionModel,
    ObservableSpec, ProbeBox, TimeGrid,
};
pub use odesolve::{solve_instanton, solve_riccati, InstantonPath, RiccatiPath};
pub use oracle::{
    lq_solution, solve_feynman_kac_1d, solve_feynman_kac_extrapolated, BoundaryKind, LqSolution,
    PdeGrid,
};
pub use stats::{
    accumulate, bootstrap_ci, fit_decay_order, report, DecayFit, EstimatorReport, LogMoments,
};
