//! The finite-difference oracle against the closed-form linear-quadratic
//! solution, its own grid refinement, the maximum principle, and the
//! zero-control Monte Carlo estimate.

mod common;

use instanton_mc::*;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

fn dirichlet_grid(n_x: usize, model: &DiffusionModel, obs: &ObservableSpec) -> PdeGrid {
    PdeGrid::stable_for(model, obs, -6.0, 6.0, n_x, BoundaryKind::DirichletFromTerminal).unwrap()
}

#[test]
fn matches_the_lq_closed_form() {
    let (model, obs) = make_lq_case(1.0, 1.0, 0.25).unwrap();
    for eps in [0.5, 0.25, 0.125] {
        let obs_e = obs.with_epsilon(eps).unwrap();
        let lq = lq_solution(1.0, 1.0, 2.0, 5.0, eps).unwrap();
        let sol = solve_feynman_kac_1d(&model, &obs_e, &dirichlet_grid(2001, &model, &obs_e))
            .unwrap();
        let err = (sol.z_eps - lq.z_eps(-1.0)).abs();
        assert!(err <= 1e-4, "eps {eps}: PDE error {err:.3e} exceeds 1e-4");
    }
}

#[test]
fn richardson_extrapolation_reaches_oracle_grade_accuracy() {
    let (model, obs) = make_lq_case(1.0, 1.0, 0.125).unwrap();
    let lq = lq_solution(1.0, 1.0, 2.0, 5.0, 0.125).unwrap();
    let (z_star, gap) =
        solve_feynman_kac_extrapolated(&model, &obs, &dirichlet_grid(1001, &model, &obs)).unwrap();
    assert!(gap < 1e-3, "self-convergence gap {gap:.3e}");
    let err = (z_star - lq.z_eps(-1.0)).abs();
    assert!(err <= 1e-7, "extrapolated error {err:.3e}");
}

#[test]
fn self_converges_under_grid_halving() {
    let (model, obs) = make_ou_quartic(0.5).unwrap();
    let grid = dirichlet_grid(1001, &model, &obs);
    let a = solve_feynman_kac_1d(&model, &obs, &grid).unwrap();
    let b = solve_feynman_kac_1d(&model, &obs, &grid.refined()).unwrap();
    let gap = (a.z_eps - b.z_eps).abs();
    assert!(gap <= 1e-3, "grid-halving change {gap:.3e}");
}

#[test]
fn increasing_the_observable_never_decreases_z() {
    // Maximum principle of the linear problem under a monotone scheme:
    // lift f by a smooth bump and Z must not go down.
    let (model, obs) = make_ou_quartic(0.25).unwrap();
    let probes: Vec<DVector<f64>> = (0..20)
        .map(|i| DVector::from_element(1, -3.0 + 8.0 * i as f64 / 19.0))
        .collect();
    let bump = |x: f64| 0.3 * (-(x - 1.0) * (x - 1.0)).exp();
    let obs_lifted = ObservableSpec::new(
        Arc::new(move |x: &DVector<f64>| -(x[0] - 2.0).powi(4) / 4.0 + bump(x[0])),
        Arc::new(move |x: &DVector<f64>| {
            DVector::from_element(
                1,
                -(x[0] - 2.0).powi(3) - 0.6 * (x[0] - 1.0) * (-(x[0] - 1.0) * (x[0] - 1.0)).exp(),
            )
        }),
        Arc::new(move |x: &DVector<f64>| {
            let u = x[0] - 1.0;
            DMatrix::from_element(
                1,
                1,
                -3.0 * (x[0] - 2.0).powi(2) + (-u * u).exp() * (1.2 * u * u - 0.6),
            )
        }),
        DVector::from_element(1, -1.0),
        5.0,
        0.25,
        &probes,
    )
    .unwrap();
    let z_base = solve_feynman_kac_1d(&model, &obs, &dirichlet_grid(1001, &model, &obs))
        .unwrap()
        .z_eps;
    let z_lifted =
        solve_feynman_kac_1d(&model, &obs_lifted, &dirichlet_grid(1001, &model, &obs_lifted))
            .unwrap()
            .z_eps;
    assert!(
        z_lifted >= z_base,
        "maximum principle violated: {z_lifted} < {z_base}"
    );
}

#[test]
fn widening_the_box_does_not_move_z() {
    let (model, obs) = make_ou_quartic(0.125).unwrap();
    let z = solve_feynman_kac_1d(&model, &obs, &dirichlet_grid(1501, &model, &obs))
        .unwrap()
        .z_eps;
    let wide =
        PdeGrid::stable_for(&model, &obs, -9.0, 9.0, 2251, BoundaryKind::DirichletFromTerminal)
            .unwrap();
    let z_wide = solve_feynman_kac_1d(&model, &obs, &wide).unwrap().z_eps;
    assert!(
        (z - z_wide).abs() <= 1e-8,
        "boundary influence {:.3e}",
        (z - z_wide).abs()
    );
}

#[test]
fn zero_flux_boundary_agrees_on_a_wide_box() {
    let (model, obs) = make_ou_quartic(0.25).unwrap();
    let z_dir = solve_feynman_kac_1d(&model, &obs, &dirichlet_grid(1001, &model, &obs))
        .unwrap()
        .z_eps;
    let zf = PdeGrid::stable_for(&model, &obs, -6.0, 6.0, 1001, BoundaryKind::ZeroFlux).unwrap();
    let z_zf = solve_feynman_kac_1d(&model, &obs, &zf).unwrap().z_eps;
    assert!(
        (z_dir - z_zf).abs() <= 1e-6,
        "boundary treatments disagree by {:.3e}",
        (z_dir - z_zf).abs()
    );
}

#[test]
fn zero_control_monte_carlo_agrees_with_the_pde() {
    let (model, obs) = make_ou_quartic(0.5).unwrap();
    let grid = TimeGrid::new(5.0, 5e-3).unwrap();
    let mut cfg = SimConfig::new(20_000, grid, 4242);
    cfg.stream_cell = 0;
    let out = simulate_batch(&model, &obs, &BiasControl::zero(1), &cfg).unwrap();
    let moments = accumulate(out.samples.iter().map(|s| s.log_payoff)).unwrap();
    let log_a = moments.log_sum_w() - (moments.n() as f64).ln();

    let (z_pde, _) =
        solve_feynman_kac_extrapolated(&model, &obs, &dirichlet_grid(1001, &model, &obs)).unwrap();
    let log_a_pde = z_pde / obs.epsilon();

    let rel_gap = (log_a - log_a_pde).exp() - 1.0;
    let tol = 3.0 * common::relative_se(&moments);
    assert!(
        rel_gap.abs() <= tol,
        "MC/PDE relative gap {rel_gap:.4e} exceeds 3 SE = {tol:.4e}"
    );
}

#[test]
fn profile_csv_has_the_grid_shape() {
    let (model, obs) = make_ou_quartic(0.5).unwrap();
    let sol = solve_feynman_kac_1d(&model, &obs, &dirichlet_grid(501, &model, &obs)).unwrap();
    let mut buf = Vec::new();
    sol.write_profile_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("x,free_energy\n"));
    assert_eq!(text.lines().count(), 502);
}
