use qbsdej::bsdej::{decompose, martingale_test, simulate_forward, solve_lipschitz, Dynamics, SolverConfig};
use qbsdej::driver::{Driver, MarkPart, StructureParams, YPart, ZPart};
use qbsdej::{Error, LevyModel, MarkQuadrature, TimeGrid};

fn no_jumps() -> (LevyModel, MarkQuadrature) {
    let model = LevyModel::null();
    let quad = MarkQuadrature::new(vec![], vec![], 1.0).unwrap();
    (model, quad)
}

fn single_atom(rate: f64) -> (LevyModel, MarkQuadrature) {
    let model = LevyModel::atoms(vec![(1.0, rate)]);
    let quad = MarkQuadrature::new(vec![1.0], vec![rate], 1.0).unwrap();
    (model, quad)
}

#[test]
fn zero_driver_reproduces_brownian_motion() {
    let (model, quad) = no_jumps();
    let grid = TimeGrid::uniform(1.0, 50).unwrap();
    let ens = simulate_forward(&model, &quad, Dynamics::Brownian, &grid, 100_000, 11).unwrap();
    let sol = solve_lipschitz(&Driver::zero(), ens.terminal_state(), &ens, &SolverConfig::default()).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..=grid.steps() {
        let w = ens.brownian(k);
        let err = sol.y(k).iter().zip(&w).map(|(y, w)| (y - w).abs()).sum::<f64>() / w.len() as f64;
        worst = worst.max(err);
    }
    assert!(worst <= 0.02, "max mean |Y - W| = {worst}");
    for k in [0, 25, 49] {
        let z = sol.z_at(k, 0.3)[0];
        assert!((z - 1.0).abs() < 0.05, "Z at step {k} = {z}");
    }
}

#[test]
fn linear_in_y_matches_scalar_ode() {
    let (model, quad) = no_jumps();
    let grid = TimeGrid::uniform(1.0, 100).unwrap();
    let ens = simulate_forward(&model, &quad, Dynamics::Brownian, &grid, 2_000, 3).unwrap();
    let driver = Driver::linear(0.5, vec![0.0], 0.0, 1.0, 0.0).unwrap();
    let sol = solve_lipschitz(&driver, &vec![1.0; 2_000], &ens, &SolverConfig::default()).unwrap();
    let (y0, _) = sol.y0();
    // implicit Euler gives (1 - dt/2)^{-K}
    let euler = (1.0f64 - 0.005).powi(-100);
    assert!((y0 - euler).abs() < 1e-9);
    assert!((y0 - 0.5f64.exp()).abs() <= 0.01, "Y0 = {y0}");
}

#[test]
fn linear_z_driver_is_a_drift_change() {
    // f = b z, xi = W_T: under the tilted measure W_T has mean b T
    let (model, quad) = no_jumps();
    let grid = TimeGrid::uniform(1.0, 20).unwrap();
    let ens = simulate_forward(&model, &quad, Dynamics::Brownian, &grid, 50_000, 5).unwrap();
    let driver = Driver::linear(0.0, vec![0.7], 0.0, 1.0, 0.0).unwrap();
    let sol = solve_lipschitz(&driver, ens.terminal_state(), &ens, &SolverConfig::default()).unwrap();
    let (y0, _) = sol.y0();
    assert!((y0 - 0.7).abs() < 0.02, "Y0 = {y0}");
}

#[test]
fn linear_mark_driver_matches_girsanov_tilt() {
    // f = c int u dnu with xi = N_T: under Q the intensity is (1 + c) rate,
    // so Y0 = (1 + c) rate T; the brute-force tilt reweights by the density
    let rate = 2.0;
    let c = 0.5;
    let horizon = 1.0;
    let (model, quad) = single_atom(rate);
    let grid = TimeGrid::uniform(horizon, 25).unwrap();
    let ens = simulate_forward(&model, &quad, Dynamics::PureJump, &grid, 100_000, 9).unwrap();
    let counts: Vec<f64> = (0..ens.n_paths()).map(|p| ens.jumps().path_jumps(p).count() as f64).collect();
    let driver = Driver::linear(0.0, vec![0.0], c, 1.0, rate).unwrap();
    let sol = solve_lipschitz(&driver, &counts, &ens, &SolverConfig::default()).unwrap();
    let (y0, _) = sol.y0();

    let weights: Vec<f64> = counts
        .iter()
        .map(|&n| (1.0f64 + c).powf(n) * (-c * rate * horizon).exp())
        .collect();
    let tilt = weights.iter().zip(&counts).map(|(w, n)| w * n).sum::<f64>() / counts.len() as f64;
    let exact = (1.0 + c) * rate * horizon;
    assert!((tilt - exact).abs() < 0.03, "tilt = {tilt}");
    assert!((y0 - exact).abs() < 0.03, "Y0 = {y0}");
    assert!((y0 - tilt).abs() < 0.04);
    let u = sol.u_at(10, 0.0)[0];
    assert!((u - 1.0).abs() < 0.05, "U = {u}");
}

#[test]
fn decomposition_reconstructs_y() {
    let (model, quad) = single_atom(1.5);
    let grid = TimeGrid::uniform(1.0, 20).unwrap();
    let ens = simulate_forward(&model, &quad, Dynamics::JumpDiffusion, &grid, 20_000, 2).unwrap();
    let xi: Vec<f64> = ens.terminal_state().iter().map(|x| 0.5 * x + 3.0).collect();
    let driver = Driver::canonical(1.0).unwrap();
    let sol = solve_lipschitz(&driver, &xi, &ens, &SolverConfig::default()).unwrap();
    let dec = decompose(&sol, &ens).unwrap();
    assert!(dec.reconstruction_error(&sol) < 1e-10);
    assert!(dec.jump_residual_rms() < 0.5);
    let report = martingale_test(&dec, &ens, 2).unwrap();
    assert!(report.rejected_fraction < 0.1, "{report:?}");
}

#[test]
fn picard_converges_for_nonlinear_y_part() {
    let (model, quad) = no_jumps();
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let ens = simulate_forward(&model, &quad, Dynamics::Brownian, &grid, 1_000, 4).unwrap();
    let driver = Driver::separable(
        "abs",
        YPart { a: 0.0, beta: 0.8 },
        ZPart::Zero,
        MarkPart::Zero,
        StructureParams::pure(1.0),
    )
    .unwrap();
    let sol = solve_lipschitz(&driver, &vec![2.0; 1_000], &ens, &SolverConfig::default()).unwrap();
    // Y_k = Y_{k+1} - 0.8 |Y_k| dt with Y > 0
    let expected = 2.0 * (1.0f64 + 0.08).powi(-10);
    assert!((sol.y0().0 - expected).abs() < 1e-9);
}

#[test]
fn rejects_non_contracting_step() {
    let (model, quad) = no_jumps();
    let grid = TimeGrid::uniform(1.0, 2).unwrap();
    let ens = simulate_forward(&model, &quad, Dynamics::Brownian, &grid, 100, 1).unwrap();
    let driver = Driver::linear(3.0, vec![0.0], 0.0, 1.0, 0.0).unwrap();
    let err = solve_lipschitz(&driver, &vec![1.0; 100], &ens, &SolverConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NonContraction { .. }));
}

#[test]
fn misaligned_terminal_and_foreign_ensemble_are_rejected() {
    let (model, quad) = no_jumps();
    let grid = TimeGrid::uniform(1.0, 4).unwrap();
    let a = simulate_forward(&model, &quad, Dynamics::Brownian, &grid, 100, 1).unwrap();
    let b = simulate_forward(&model, &quad, Dynamics::Brownian, &grid, 100, 2).unwrap();
    assert!(matches!(
        solve_lipschitz(&Driver::zero(), &[0.0; 3], &a, &SolverConfig::default()),
        Err(Error::MisalignedField { .. })
    ));
    let sol = solve_lipschitz(&Driver::zero(), a.terminal_state(), &a, &SolverConfig::default()).unwrap();
    assert!(matches!(decompose(&sol, &b), Err(Error::MismatchedEnsemble)));
}

#[test]
fn ensembles_are_reproducible() {
    let (model, quad) = single_atom(1.0);
    let grid = TimeGrid::uniform(1.0, 8).unwrap();
    let a = simulate_forward(&model, &quad, Dynamics::JumpDiffusion, &grid, 500, 77).unwrap();
    let b = simulate_forward(&model, &quad, Dynamics::JumpDiffusion, &grid, 500, 77).unwrap();
    assert_eq!(a.id(), b.id());
    assert_eq!(a.terminal_state(), b.terminal_state());
    let driver = Driver::linear(0.3, vec![0.5], 0.2, 1.0, 1.0).unwrap();
    let sa = solve_lipschitz(&driver, a.terminal_state(), &a, &SolverConfig::default()).unwrap();
    let sb = solve_lipschitz(&driver, b.terminal_state(), &b, &SolverConfig::default()).unwrap();
    assert_eq!(sa.y(0), sb.y(0));
}

#[test]
fn solution_csv_has_expected_shape() {
    let (model, quad) = single_atom(1.0);
    let grid = TimeGrid::uniform(1.0, 3).unwrap();
    let ens = simulate_forward(&model, &quad, Dynamics::JumpDiffusion, &grid, 50, 1).unwrap();
    let sol = solve_lipschitz(&Driver::zero(), ens.terminal_state(), &ens, &SolverConfig::default()).unwrap();
    let mut buf = Vec::new();
    sol.write_csv(&ens, &mut buf, &[0, 1]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "path_id,t_k,Y,Z_1,U_node_1");
    assert_eq!(lines.len(), 1 + 2 * 4);
}
