//! Desk-scale ground truth, independent of the sampling code paths.
//!
//! Two oracles:
//!
//! 1. [`solve_feynman_kac_1d`]: the expectation `u(t,x) = E[exp(f(X_T)/eps) | X_t = x]`
//!    solves the linear backward PDE `du/dt + b u' + (eps D / 2) u'' = 0`
//!    with terminal data `exp(f/eps)`. The solver steps the log-transformed
//!    variable `h = eps log u` (the free energy), because `exp(f/eps)`
//!    overflows doubles for small `eps`; algebraically each step is still
//!    the standard monotone central/upwind explicit scheme applied to the
//!    linear problem. Returns `Z(eps) = h(0, x0)`.
//!
//! 2. [`lq_solution`]: with linear drift `b(x) = -a x` and quadratic
//!    `f(x) = -q (x-c)^2 / 2` the nonlinear control equation closes over
//!    time-dependent quadratics `g(t,x) = alpha + beta x + gamma x^2 / 2`,
//!    giving closed forms for every coefficient. This is the zero-variance
//!    reference case used across the test suite.

use std::io::Write;

use thiserror::Error;

use crate::model::{DiffusionModel, ObservableSpec};
use crate::odesolve::InstantonPath;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("PDE oracle is restricted to one-dimensional models (dim {0})")]
    NotOneDimensional(usize),
    #[error("PDE grid: {0}")]
    GridInvalid(String),
    #[error("PDE stepping produced non-finite values at tau = {tau:.6}")]
    Unstable { tau: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Boundary treatment for the finite-difference solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    /// Boundary values follow the terminal data transported along the
    /// drift-only characteristic `psi' = b(psi)` (zero-noise approximation;
    /// valid when the box is wide enough that the boundary does not
    /// influence the solution at `x0`).
    DirichletFromTerminal,
    /// Copy the neighbouring node (zero-gradient in the free energy).
    ZeroFlux,
}

/// Spatial/temporal discretization of the 1D backward PDE.
#[derive(Clone, Debug)]
pub struct PdeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub dt_pde: f64,
    pub boundary: BoundaryKind,
}

impl PdeGrid {
    pub fn new(
        x_min: f64,
        x_max: f64,
        n_x: usize,
        dt_pde: f64,
        boundary: BoundaryKind,
    ) -> Result<Self, OracleError> {
        if !(x_min < x_max) {
            return Err(OracleError::GridInvalid(format!(
                "need x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if n_x < 3 {
            return Err(OracleError::GridInvalid(format!(
                "need at least 3 spatial nodes, got {n_x}"
            )));
        }
        if !(dt_pde > 0.0) {
            return Err(OracleError::GridInvalid(format!(
                "dt_pde must be positive, got {dt_pde}"
            )));
        }
        Ok(PdeGrid {
            x_min,
            x_max,
            n_x,
            dt_pde,
            boundary,
        })
    }

    /// Grid with `dt_pde` chosen at the diffusive stability limit
    /// `eps D dt / dx^2 = 0.4` (the solver refines further when the drift
    /// requires it).
    pub fn stable_for(
        model: &DiffusionModel,
        obs: &ObservableSpec,
        x_min: f64,
        x_max: f64,
        n_x: usize,
        boundary: BoundaryKind,
    ) -> Result<Self, OracleError> {
        if model.dim() != 1 {
            return Err(OracleError::NotOneDimensional(model.dim()));
        }
        let dx = (x_max - x_min) / (n_x.max(3) - 1) as f64;
        let dt = 0.4 * dx * dx / (obs.epsilon() * model.cov()[(0, 0)]);
        PdeGrid::new(x_min, x_max, n_x, dt, boundary)
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    /// Same grid with `dx` and `dt` halved twice over (`dt` scales with
    /// `dx^2` for the explicit scheme); used for self-convergence checks.
    pub fn refined(&self) -> PdeGrid {
        PdeGrid {
            x_min: self.x_min,
            x_max: self.x_max,
            n_x: 2 * (self.n_x - 1) + 1,
            dt_pde: self.dt_pde / 4.0,
            boundary: self.boundary,
        }
    }

    /// True when every instanton node lies strictly inside the box.
    pub fn contains_path(&self, path: &InstantonPath) -> bool {
        path.phi()
            .iter()
            .all(|x| x[0] > self.x_min && x[0] < self.x_max)
    }
}

/// Free-energy profile `h(0, .) = eps log u(0, .)` on the spatial grid.
#[derive(Clone, Debug)]
pub struct FeynmanKacSolution {
    pub z_eps: f64,
    pub xs: Vec<f64>,
    pub free_energy: Vec<f64>,
}

impl FeynmanKacSolution {
    /// Linear interpolation of the free-energy profile.
    pub fn value_at(&self, x: f64) -> f64 {
        let dx = self.xs[1] - self.xs[0];
        let pos = (x - self.xs[0]) / dx;
        let j = (pos.floor() as usize).min(self.xs.len() - 2);
        let w = (pos - j as f64).clamp(0.0, 1.0);
        (1.0 - w) * self.free_energy[j] + w * self.free_energy[j + 1]
    }

    pub fn write_profile_csv<W: Write>(&self, mut out: W) -> Result<(), OracleError> {
        writeln!(out, "x,free_energy")?;
        for (x, h) in self.xs.iter().zip(&self.free_energy) {
            writeln!(out, "{x},{h}")?;
        }
        Ok(())
    }
}

/// Solves the linear backward PDE for `u = exp(g/eps)` on a 1D grid,
/// stepping the free energy `h = eps log u`, and returns
/// `Z(eps) = h(0, x0)` by linear interpolation.
///
/// The scheme is explicit in reverse time with central differences for the
/// drift wherever `|b| dx <= eps D` (second order) and monotone upwinding
/// otherwise; the step size is refined below `dt_pde` when the drift CFL
/// condition requires it.
pub fn solve_feynman_kac_1d(
    model: &DiffusionModel,
    obs: &ObservableSpec,
    grid: &PdeGrid,
) -> Result<FeynmanKacSolution, OracleError> {
    if model.dim() != 1 {
        return Err(OracleError::NotOneDimensional(model.dim()));
    }
    let x0 = obs.x0()[0];
    if !(grid.x_min < x0 && x0 < grid.x_max) {
        return Err(OracleError::GridInvalid(format!(
            "x0 = {x0} must lie strictly inside [{}, {}]",
            grid.x_min, grid.x_max
        )));
    }
    let eps = obs.epsilon();
    let dcoef = model.cov()[(0, 0)];
    let dx = grid.dx();
    let dx2 = dx * dx;
    if eps * dcoef * grid.dt_pde / dx2 > 0.45 {
        return Err(OracleError::GridInvalid(format!(
            "diffusive CFL violated: eps*D*dt/dx^2 = {:.3} > 0.45",
            eps * dcoef * grid.dt_pde / dx2
        )));
    }

    let n = grid.n_x;
    let xs: Vec<f64> = (0..n).map(|i| grid.x_min + i as f64 * dx).collect();
    let drift: Vec<f64> = xs
        .iter()
        .map(|&x| model.drift(&nalgebra::DVector::from_element(1, x))[0])
        .collect();
    let b_max = drift.iter().fold(0.0f64, |m, b| m.max(b.abs()));

    // Positivity of the center coefficient needs dt <= 1/(|b|/dx + eps D/dx^2).
    let dt_stable = 0.9 / (b_max / dx + eps * dcoef / dx2);
    let horizon = obs.horizon();
    let n_t = (horizon / grid.dt_pde.min(dt_stable)).ceil() as usize;
    let dt = horizon / n_t as f64;

    let mut h: Vec<f64> = xs
        .iter()
        .map(|&x| obs.f(&nalgebra::DVector::from_element(1, x)))
        .collect();
    let mut h_new = h.clone();

    // Drift-only characteristics from the two boundary points, sampled at
    // every time step (RK4 on psi' = b(psi)).
    let charac = |start: f64| -> Vec<f64> {
        let scalar_b =
            |x: f64| model.drift(&nalgebra::DVector::from_element(1, x))[0];
        let mut psi = start;
        let mut out = Vec::with_capacity(n_t + 1);
        out.push(psi);
        for _ in 0..n_t {
            let k1 = scalar_b(psi);
            let k2 = scalar_b(psi + 0.5 * dt * k1);
            let k3 = scalar_b(psi + 0.5 * dt * k2);
            let k4 = scalar_b(psi + dt * k3);
            psi += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            out.push(psi);
        }
        out
    };
    let (psi_lo, psi_hi) = match grid.boundary {
        BoundaryKind::DirichletFromTerminal => (charac(grid.x_min), charac(grid.x_max)),
        BoundaryKind::ZeroFlux => (Vec::new(), Vec::new()),
    };
    let f_scalar = |x: f64| obs.f(&nalgebra::DVector::from_element(1, x));

    let half_diff = 0.5 * eps * dcoef / dx2;
    for step in 1..=n_t {
        for i in 1..n - 1 {
            let ep = ((h[i + 1] - h[i]) / eps).exp();
            let em = ((h[i - 1] - h[i]) / eps).exp();
            let b = drift[i];
            let adv = if b.abs() * dx <= eps * dcoef {
                b * (ep - em) / (2.0 * dx)
            } else if b > 0.0 {
                b * (ep - 1.0) / dx
            } else {
                b * (1.0 - em) / dx
            };
            let update = dt * (adv + half_diff * (ep - 2.0 + em));
            h_new[i] = h[i] + eps * update.ln_1p();
        }
        match grid.boundary {
            BoundaryKind::DirichletFromTerminal => {
                h_new[0] = f_scalar(psi_lo[step]);
                h_new[n - 1] = f_scalar(psi_hi[step]);
            }
            BoundaryKind::ZeroFlux => {
                h_new[0] = h_new[1];
                h_new[n - 1] = h_new[n - 2];
            }
        }
        std::mem::swap(&mut h, &mut h_new);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::Unstable {
                tau: step as f64 * dt,
            });
        }
    }

    let sol = FeynmanKacSolution {
        z_eps: 0.0,
        xs,
        free_energy: h,
    };
    let z = sol.value_at(x0);
    Ok(FeynmanKacSolution { z_eps: z, ..sol })
}

/// Solves on `grid` and on its refinement and Richardson-extrapolates the
/// two values (the scheme is second order in `dx` with `dt` tied to
/// `dx^2`). Returns `(z_extrapolated, |z_fine - z_coarse|)`; the gap is
/// the self-convergence measure under grid halving.
pub fn solve_feynman_kac_extrapolated(
    model: &DiffusionModel,
    obs: &ObservableSpec,
    grid: &PdeGrid,
) -> Result<(f64, f64), OracleError> {
    let coarse = solve_feynman_kac_1d(model, obs, grid)?;
    let fine = solve_feynman_kac_1d(model, obs, &grid.refined())?;
    let gap = (fine.z_eps - coarse.z_eps).abs();
    Ok((fine.z_eps + (fine.z_eps - coarse.z_eps) / 3.0, gap))
}

/// Closed-form solution of the control equation for the linear-quadratic
/// case `b(x) = -a x`, `f(x) = -q (x-c)^2 / 2`, `sigma = 1`:
///
/// ```text
///     g(t,x) = alpha(t) + beta(t) x + gamma(t) x^2 / 2,
///     gamma' = 2 a gamma - gamma^2,        gamma(T) = -q,
///     beta'  = (a - gamma) beta,           beta(T)  = q c,
///     alpha' = -(eps/2) gamma - beta^2/2,  alpha(T) = -q c^2 / 2.
/// ```
///
/// For `q >= 0` the Riccati coefficient never blows up on `[0, T]`.
#[derive(Clone, Debug)]
pub struct LqSolution {
    a: f64,
    q: f64,
    c: f64,
    horizon_t: f64,
    epsilon: f64,
    /// `(q + 2a) / q`; the Riccati flow is `gamma(s) = 2a / (1 - r0 e^{2as})`
    /// in reverse time `s = T - t` (for `a != 0`).
    r0: f64,
}

pub fn lq_solution(
    a: f64,
    q: f64,
    c: f64,
    horizon_t: f64,
    epsilon: f64,
) -> Result<LqSolution, OracleError> {
    if q < 0.0 {
        return Err(OracleError::InvalidParameter(format!(
            "q must be nonnegative, got {q}"
        )));
    }
    if !(horizon_t > 0.0) || !(epsilon > 0.0) {
        return Err(OracleError::InvalidParameter(
            "horizon and epsilon must be positive".into(),
        ));
    }
    let r0 = if q > 0.0 { (q + 2.0 * a) / q } else { 0.0 };
    Ok(LqSolution {
        a,
        q,
        c,
        horizon_t,
        epsilon,
        r0,
    })
}

impl LqSolution {
    /// Quadratic coefficient `gamma(t)` (the scalar Riccati solution).
    pub fn k(&self, t: f64) -> f64 {
        let s = self.horizon_t - t;
        if self.q == 0.0 {
            return 0.0;
        }
        if self.a == 0.0 {
            return -self.q / (1.0 + self.q * s);
        }
        2.0 * self.a / (1.0 - self.r0 * (2.0 * self.a * s).exp())
    }

    /// Linear coefficient `beta(t)`.
    pub fn lin_coeff(&self, t: f64) -> f64 {
        let s = self.horizon_t - t;
        if self.q == 0.0 {
            return 0.0;
        }
        if self.a == 0.0 {
            return self.q * self.c / (1.0 + self.q * s);
        }
        self.q * self.c * (self.a * s).exp() * (1.0 - self.r0)
            / (1.0 - self.r0 * (2.0 * self.a * s).exp())
    }

    /// `int_0^s gamma` in reverse time (used by the constant coefficient).
    fn int_gamma(&self, s: f64) -> f64 {
        if self.q == 0.0 {
            return 0.0;
        }
        if self.a == 0.0 {
            return -(1.0 + self.q * s).ln();
        }
        let e = (2.0 * self.a * s).exp();
        2.0 * self.a * s + ((1.0 - self.r0) / (1.0 - self.r0 * e)).ln()
    }

    /// `int_0^s beta^2` in reverse time.
    fn int_beta_sq(&self, s: f64) -> f64 {
        if self.q == 0.0 {
            return 0.0;
        }
        let qc = self.q * self.c;
        if self.a == 0.0 {
            return qc * qc * s / (1.0 + self.q * s);
        }
        let e = (2.0 * self.a * s).exp();
        if self.r0 == 0.0 {
            return qc * qc * (e - 1.0) / (2.0 * self.a);
        }
        let one_minus = 1.0 - self.r0;
        qc * qc * one_minus * one_minus / (2.0 * self.a * self.r0)
            * (1.0 / (1.0 - self.r0 * e) - 1.0 / one_minus)
    }

    /// Constant coefficient `alpha(t)` (carries the `eps` correction).
    pub fn const_coeff(&self, t: f64) -> f64 {
        let s = self.horizon_t - t;
        -self.q * self.c * self.c / 2.0
            + 0.5 * self.epsilon * self.int_gamma(s)
            + 0.5 * self.int_beta_sq(s)
    }

    /// Exact control value `g(t, x)`.
    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.const_coeff(t) + self.lin_coeff(t) * x + 0.5 * self.k(t) * x * x
    }

    /// Spatial gradient `g_x(t, x)`.
    pub fn space_gradient(&self, t: f64, x: f64) -> f64 {
        self.lin_coeff(t) + self.k(t) * x
    }

    /// Free energy `Z(eps) = g(0, x0)`.
    pub fn z_eps(&self, x0: f64) -> f64 {
        self.value(0.0, x0)
    }
}
