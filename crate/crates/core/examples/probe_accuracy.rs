//! Scratch accuracy probe used while calibrating test tolerances.
use instanton_mc::*;
use nalgebra::{Matrix2, Vector2};

fn main() {
    // LQ instanton vs the dense 2x2 boundary solve.
    let (a, q, c, t_end, x0) = (1.0, 1.0, 2.0, 5.0, -1.0);
    let (model, obs) = make_lq_case(a, q, 0.25).unwrap();
    let grid = TimeGrid::new(t_end, 1e-3).unwrap();
    let path = solve_instanton(&model, &obs, &grid, 0.5, 500, 1e-12).unwrap();
    println!("instanton converged {} iters {}", path.converged, path.iterations);

    // phi_T - D theta_T (1 - e^{-2aT})/(2a) = e^{-aT} x0 ;  q phi_T + theta_T = q c
    let m = Matrix2::new(1.0, -(1.0 - (-2.0 * a * t_end).exp()) / (2.0 * a), q, 1.0);
    let rhs = Vector2::new((-a * t_end).exp() * x0, q * c);
    let sol = m.lu().solve(&rhs).unwrap();
    let (phi_t_exact, theta_t_exact) = (sol[0], sol[1]);
    println!("exact phi_T {phi_t_exact} theta_T {theta_t_exact}");

    let n = grid.n_steps();
    let mut max_phi_err = 0.0f64;
    let mut max_theta_err = 0.0f64;
    for i in 0..=n {
        let t = grid.time(i);
        let theta_exact = theta_t_exact * (a * (t - t_end)).exp();
        let phi_exact = (-a * t).exp() * x0
            + theta_t_exact * ((a * (t - t_end)).exp() - (-a * (t + t_end)).exp()) / (2.0 * a);
        max_phi_err = max_phi_err.max((path.phi()[i][0] - phi_exact).abs());
        max_theta_err = max_theta_err.max((path.theta()[i][0] - theta_exact).abs());
    }
    println!("instanton sup errors: phi {max_phi_err:.3e} theta {max_theta_err:.3e}");

    // Riccati vs closed form.
    let lq = lq_solution(a, q, c, t_end, 0.25).unwrap();
    let ric = solve_riccati(&model, &obs, &path).unwrap();
    let mut sup = 0.0f64;
    for i in 0..=n {
        sup = sup.max((ric.k()[i][(0, 0)] - lq.k(grid.time(i))).abs());
    }
    let end = (ric.k()[0][(0, 0)] - lq.k(0.0)).abs();
    println!("riccati: sup err {sup:.3e}  endpoint err {end:.3e}");

    // Same at dt = 1e-4.
    let grid4 = TimeGrid::new(t_end, 1e-4).unwrap();
    let path4 = solve_instanton(&model, &obs, &grid4, 0.5, 500, 1e-12).unwrap();
    let ric4 = solve_riccati(&model, &obs, &path4).unwrap();
    let mut sup4 = 0.0f64;
    for i in 0..=grid4.n_steps() {
        sup4 = sup4.max((ric4.k()[i][(0, 0)] - lq.k(grid4.time(i))).abs());
    }
    println!(
        "riccati dt=1e-4: sup err {sup4:.3e}  endpoint err {:.3e}",
        (ric4.k()[0][(0, 0)] - lq.k(0.0)).abs()
    );

    // PDE vs LQ closed form.
    for eps in [0.5, 0.25, 0.125] {
        let obs_e = obs.with_epsilon(eps).unwrap();
        let lq_e = lq_solution(a, q, c, t_end, eps).unwrap();
        let pg = PdeGrid::stable_for(&model, &obs_e, -6.0, 6.0, 2001, BoundaryKind::DirichletFromTerminal).unwrap();
        let t0 = std::time::Instant::now();
        let sol = solve_feynman_kac_1d(&model, &obs_e, &pg).unwrap();
        println!(
            "PDE eps {eps}: Z {:.8}  exact {:.8}  err {:.3e}  ({:.2?})",
            sol.z_eps,
            lq_e.z_eps(x0),
            (sol.z_eps - lq_e.z_eps(x0)).abs(),
            t0.elapsed()
        );
    }

    // OU-quartic: PDE Z and the g1/g2 predictors across eps.
    let (model_ou, obs_ou) = make_ou_quartic(0.5).unwrap();
    let grid_ou = TimeGrid::new(5.0, 1e-4).unwrap();
    let path_ou = solve_instanton(&model_ou, &obs_ou, &grid_ou, 0.5, 500, 1e-12).unwrap();
    let ric_ou = solve_riccati(&model_ou, &obs_ou, &path_ou).unwrap();
    println!("ou instanton iters {} phi_T {}", path_ou.iterations, path_ou.phi()[grid_ou.n_steps()][0]);
    for eps in [0.5, 0.25, 0.125, 0.0625] {
        let obs_e = obs_ou.with_epsilon(eps).unwrap();
        let g1 = BiasControl::order1(&model_ou, &obs_e, &path_ou).unwrap();
        let g2 = BiasControl::order2(&model_ou, &obs_e, &path_ou, &ric_ou).unwrap();
        let pg = PdeGrid::stable_for(&model_ou, &obs_e, -6.0, 6.0, 2001, BoundaryKind::DirichletFromTerminal).unwrap();
        let sol = solve_feynman_kac_1d(&model_ou, &obs_e, &pg).unwrap();
        println!(
            "OU eps {eps}: Z_pde {:.8} g1 {:.8} g2 {:.8}  e1 {:.4e} e2 {:.4e}",
            sol.z_eps,
            g1.value_at_start(),
            g2.value_at_start(),
            (g1.value_at_start() - sol.z_eps).abs(),
            (g2.value_at_start() - sol.z_eps).abs()
        );
    }
}
