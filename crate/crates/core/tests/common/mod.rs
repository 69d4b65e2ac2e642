//! Shared helpers for the integration suites.
#![allow(dead_code)] // each test binary uses its own subset

use instanton_mc::*;
use nalgebra::DVector;

/// Relative standard error of the mean of `exp(w)` from log-domain
/// moments: `sqrt((rho - 1) / n)`.
pub fn relative_se(moments: &LogMoments) -> f64 {
    let n = moments.n() as f64;
    let log_a = moments.log_sum_w() - n.ln();
    let log_rho = (moments.log_sum_2w() - n.ln()) - 2.0 * log_a;
    (log_rho.exp_m1().max(0.0) / n).sqrt()
}

/// Shooting oracle for the instanton two-point boundary problem: integrate
/// the coupled Hamiltonian system from `(x0, theta0)` with RK4 on a fine
/// grid and bisect the scalar `theta0` until the terminal condition
/// `theta_T = grad f(phi_T)` holds. Independent of the fixed-point solver.
pub fn shooting_oracle(
    model: &DiffusionModel,
    obs: &ObservableSpec,
    dt: f64,
    mut lo: f64,
    mut hi: f64,
) -> (f64, f64, f64) {
    let n = (obs.horizon() / dt).round() as usize;
    let integrate = |theta0: f64| -> (f64, f64) {
        let mut phi = obs.x0().clone();
        let mut theta = DVector::from_element(1, theta0);
        let rhs = |p: &DVector<f64>, th: &DVector<f64>| {
            (
                model.drift(p) + model.cov() * th,
                -(model.drift_jacobian(p).transpose() * th),
            )
        };
        for _ in 0..n {
            let (kp1, kt1) = rhs(&phi, &theta);
            let (kp2, kt2) = rhs(&(&phi + &kp1 * (dt / 2.0)), &(&theta + &kt1 * (dt / 2.0)));
            let (kp3, kt3) = rhs(&(&phi + &kp2 * (dt / 2.0)), &(&theta + &kt2 * (dt / 2.0)));
            let (kp4, kt4) = rhs(&(&phi + &kp3 * dt), &(&theta + &kt3 * dt));
            phi += (kp1 + kp2 * 2.0 + kp3 * 2.0 + kp4) * (dt / 6.0);
            theta += (kt1 + kt2 * 2.0 + kt3 * 2.0 + kt4) * (dt / 6.0);
        }
        (phi[0], theta[0])
    };
    let mismatch = |theta0: f64| -> f64 {
        let (phi_t, theta_t) = integrate(theta0);
        theta_t - obs.grad_f(&DVector::from_element(1, phi_t))[0]
    };
    assert!(
        mismatch(lo) < 0.0 && mismatch(hi) > 0.0,
        "shooting bracket does not straddle the root"
    );
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mismatch(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta0 = 0.5 * (lo + hi);
    let (phi_t, theta_t) = integrate(theta0);
    (theta0, phi_t, theta_t)
}
