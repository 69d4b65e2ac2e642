//! Scratch probe: PDE error structure (grid order, box sensitivity).
use instanton_mc::*;

fn main() {
    let (model, obs) = make_lq_case(1.0, 1.0, 0.25).unwrap();
    let x0 = -1.0;
    println!("--- LQ, error vs n_x (box [-6,6]) ---");
    for eps in [0.25, 0.125] {
        let obs_e = obs.with_epsilon(eps).unwrap();
        let lq = lq_solution(1.0, 1.0, 2.0, 5.0, eps).unwrap();
        let mut zs = Vec::new();
        for n_x in [1001usize, 2001, 4001] {
            let pg = PdeGrid::stable_for(&model, &obs_e, -6.0, 6.0, n_x, BoundaryKind::DirichletFromTerminal).unwrap();
            let t0 = std::time::Instant::now();
            let sol = solve_feynman_kac_1d(&model, &obs_e, &pg).unwrap();
            println!(
                "  eps {eps} n_x {n_x}: Z {:.9} err {:+.3e} ({:.1?})",
                sol.z_eps,
                sol.z_eps - lq.z_eps(x0),
                t0.elapsed()
            );
            zs.push(sol.z_eps);
        }
        let rich = zs[2] + (zs[2] - zs[1]) / 3.0;
        println!(
            "  eps {eps} richardson(2001,4001): {:.9} err {:+.3e}",
            rich,
            rich - lq.z_eps(x0)
        );
        let rich_c = zs[1] + (zs[1] - zs[0]) / 3.0;
        println!(
            "  eps {eps} richardson(1001,2001): {:.9} err {:+.3e}",
            rich_c,
            rich_c - lq.z_eps(x0)
        );
    }

    println!("--- OU box sensitivity at eps 0.125 (n_x 2001 / 3001 wide) ---");
    let (model_ou, obs_ou) = make_ou_quartic(0.125).unwrap();
    let pg = PdeGrid::stable_for(&model_ou, &obs_ou, -6.0, 6.0, 2001, BoundaryKind::DirichletFromTerminal).unwrap();
    let z_narrow = solve_feynman_kac_1d(&model_ou, &obs_ou, &pg).unwrap().z_eps;
    let pg_wide = PdeGrid::stable_for(&model_ou, &obs_ou, -9.0, 9.0, 3001, BoundaryKind::DirichletFromTerminal).unwrap();
    let z_wide = solve_feynman_kac_1d(&model_ou, &obs_ou, &pg_wide).unwrap().z_eps;
    println!("  narrow {z_narrow:.9} wide {z_wide:.9} diff {:+.3e}", z_wide - z_narrow);

    println!("--- OU g2 ratio with extrapolated Z ---");
    let grid_ou = TimeGrid::new(5.0, 1e-4).unwrap();
    let path_ou = solve_instanton(&model_ou, &obs_ou, &grid_ou, 0.5, 500, 1e-12).unwrap();
    let ric_ou = solve_riccati(&model_ou, &obs_ou, &path_ou).unwrap();
    let mut errs = Vec::new();
    for eps in [0.25, 0.125] {
        let obs_e = obs_ou.with_epsilon(eps).unwrap();
        let g2 = BiasControl::order2(&model_ou, &obs_e, &path_ou, &ric_ou).unwrap();
        let mut zs = Vec::new();
        for n_x in [2001usize, 4001] {
            let pg = PdeGrid::stable_for(&model_ou, &obs_e, -6.0, 6.0, n_x, BoundaryKind::DirichletFromTerminal).unwrap();
            zs.push(solve_feynman_kac_1d(&model_ou, &obs_e, &pg).unwrap().z_eps);
        }
        let z_star = zs[1] + (zs[1] - zs[0]) / 3.0;
        let e2 = (g2.value_at_start() - z_star).abs();
        println!(
            "  eps {eps}: Z2001 {:.9} Z4001 {:.9} Z* {:.9}  e2 {:.4e}",
            zs[0], zs[1], z_star, e2
        );
        errs.push(e2);
    }
    println!("  g2 ratio (0.25/0.125): {:.3}", errs[0] / errs[1]);
}
