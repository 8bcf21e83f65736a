use std::sync::Arc;

use proptest::prelude::*;
use qbsdej::driver::*;
use qbsdej::*;

const E: f64 = std::f64::consts::E;

fn two_node() -> MarkQuadrature {
    MarkQuadrature::new(vec![1.0, 2.0], vec![1.5, 0.5], 1.0).unwrap()
}

fn gamma_fine() -> MarkQuadrature {
    build_quadrature_banded(&LevyModel::gamma(1.0, 2.0), 8.0, 2).unwrap()
}

#[test]
fn structure_bound_examples() {
    let quad = two_node();
    let zero = JumpField::zeros(2);
    let p0 = StructureParams::pure(1.0);
    assert_eq!(structure_bounds(0.0, 0.0, &[0.0], &zero, &p0, &quad).unwrap(), (0.0, 0.0));

    let p = StructureParams::new(1.0, TimeFn::Constant(0.5), TimeFn::Constant(1.0)).unwrap();
    let (lo, hi) = structure_bounds(0.0, 1.0, &[2.0], &zero, &p, &quad).unwrap();
    assert!((lo + 3.5).abs() < 1e-15 && (hi - 3.5).abs() < 1e-15);

    let one = JumpField::constant(2, 1.0);
    let (lo, hi) = structure_bounds(0.0, 0.0, &[0.0], &one, &p0, &quad).unwrap();
    assert!((hi - 2.0 * (E - 2.0)).abs() < 1e-12);
    assert!((lo + 2.0 / E).abs() < 1e-12);
    assert!((lo + 0.735_759).abs() < 1e-6);
}

#[test]
fn canonical_and_morlais_satisfy_structure() {
    let quad = gamma_fine();
    let probes = random_probes(1000, 1, quad.len(), 1.0, 2.0, 1);
    let canonical = Driver::canonical(1.0).unwrap();
    assert!(check_structure(&canonical, &probes, &quad).unwrap().violations.is_empty());
    let morlais = Driver::morlais(1.0, 0.7).unwrap();
    assert!(check_structure(&morlais, &probes, &quad).unwrap().violations.is_empty());
    let linear = Driver::linear(0.5, vec![0.3], 0.4, 1.0, quad.total_mass()).unwrap();
    assert!(check_structure(&linear, &probes, &quad).unwrap().violations.is_empty());
}

#[test]
fn shifted_driver_violates_everywhere() {
    let quad = two_node();
    let probes = random_probes(200, 1, 2, 1.0, 1.0, 2);
    let shifted = Driver::custom(
        "shifted",
        Arc::new(|_, _, z: &[f64], u: &[f64], w: &[f64]| {
            0.5 * z[0] * z[0] + qbsdej::levy::j_sum(u, 1.0, w).unwrap() + 1.0
        }),
        StructureParams::pure(1.0),
        Some(0.0),
    );
    let report = check_structure(&shifted, &probes, &quad).unwrap();
    assert_eq!(report.violations.len(), probes.len());
}

#[test]
fn linear_structure_constants_are_tight() {
    // c v - (e^v - v - 1) peaks at v = ln(1+c) with value (1+c) ln(1+c) - c
    let c: f64 = 0.4;
    let p = linear_structure(0.0, &[], c, 1.0, 1.0).unwrap();
    let expected = (1.0 + c) * c.ln_1p() - c;
    assert!((p.l.at(0.0) - expected).abs() < 1e-15);
    let v = c.ln_1p();
    assert!((c * v - (v.exp() - v - 1.0) - expected).abs() < 1e-15);
    assert!(linear_structure(0.0, &[], -1.5, 1.0, 1.0).is_err());
}

#[test]
fn huber_closed_form_matches_grid() {
    let grid = scalar_grid(-5.0, 5.0, 100_001);
    let point = Point::scalar(3.0);
    let v = inf_convolve(|p| p.y * p.y, 2.0, &point, &grid, &[]).unwrap();
    assert!((v - 5.0).abs() < 1e-6, "{v}");
    assert!((huber(3.0, 2.0, 2.0) - 5.0).abs() < 1e-15);
    let w = sup_convolve(|p| -p.y * p.y, 2.0, &point, &grid, &[]).unwrap();
    assert!((w + 5.0).abs() < 1e-6);
}

#[test]
fn large_penalty_recovers_function() {
    let grid = scalar_grid(-2.0, 2.0, 401);
    for p in grid.iter().step_by(37) {
        let phi = |c: &Point| (c.y * 3.0).sin() + c.y * c.y;
        let inf = inf_convolve(phi, 1e6, p, &grid, &[]).unwrap();
        let sup = sup_convolve(phi, 1e6, p, &grid, &[]).unwrap();
        assert!((inf - phi(p)).abs() < 1e-6 && (sup - phi(p)).abs() < 1e-6);
    }
}

#[test]
fn lipschitz_function_is_its_own_envelope() {
    let grid = scalar_grid(-3.0, 3.0, 121);
    let phi = |c: &Point| 0.8 * c.y.sin() + 0.5 * c.y.abs();
    // brute-force check that phi is 2-Lipschitz on the grid
    for a in &grid {
        for b in &grid {
            assert!(phi(a) <= phi(b) + 2.0 * (a.y - b.y).abs() + 1e-12);
        }
    }
    for p in &grid {
        assert!((inf_convolve(phi, 2.0, p, &grid, &[]).unwrap() - phi(p)).abs() < 1e-12);
        assert!((sup_convolve(phi, 2.0, p, &grid, &[]).unwrap() - phi(p)).abs() < 1e-12);
    }
}

#[test]
fn empty_grid_is_an_error() {
    assert!(matches!(
        inf_convolve(|p| p.y, 1.0, &Point::scalar(0.0), &[], &[]),
        Err(Error::EmptyGrid)
    ));
}

#[test]
fn ties_go_to_first_candidate() {
    let grid = vec![Point::scalar(-1.0), Point::scalar(1.0)];
    let (_, idx) = inf_convolve_argmin(|_| 0.0, 1.0, &Point::scalar(0.0), &grid, &[]).unwrap();
    assert_eq!(idx, 0);
}

#[test]
fn refinement_stabilizes() {
    let (v, level) = refine_until_stable(
        |p| p.y * p.y,
        2.0,
        &Point::scalar(3.0),
        &[],
        |level| scalar_grid(-5.0, 5.0, 10 * 4usize.pow(level as u32) + 1),
        1e-6,
        12,
    )
    .unwrap();
    assert!((v - 5.0).abs() < 1e-5 && level > 0);
}

#[test]
fn mark_envelope_matches_grid_minimization() {
    // one node: min_v (e^v - v - 1) w + n sqrt(w)|v - u|
    let quad = MarkQuadrature::new(vec![1.0], vec![0.7], 1.0).unwrap();
    let omega = quad.omega(0.0);
    let driver = Driver::canonical(1.0).unwrap();
    let reg = regularize(&driver, 2.0, 2.0, &quad).unwrap();
    let grid: Vec<Point> = (0..=200_000)
        .map(|i| Point {
            y: 0.0,
            z: vec![],
            u: vec![-4.0 + 8.0 * i as f64 / 200_000.0],
        })
        .collect();
    for &u in &[-3.0, -0.5, 0.3, 1.5, 3.5] {
        let closed = reg.upper_mark(&[u], &omega).unwrap();
        let point = Point {
            y: 0.0,
            z: vec![],
            u: vec![u],
        };
        let brute = inf_convolve(|c| omega[0] * (c.u[0].exp() - c.u[0] - 1.0), 2.0, &point, &grid, &omega).unwrap();
        assert!((closed - brute).abs() < 1e-6, "u={u}: {closed} vs {brute}");
    }
}

#[test]
fn two_node_envelope_matches_grid() {
    let quad = MarkQuadrature::new(vec![1.0, 2.0], vec![0.6, 0.3], 1.0).unwrap();
    let omega = quad.omega(0.0);
    let reg = regularize(&Driver::canonical(1.0).unwrap(), 1.0, 1.0, &quad).unwrap();
    let steps = 600;
    let mut grid = Vec::new();
    for i in 0..=steps {
        for j in 0..=steps {
            grid.push(Point {
                y: 0.0,
                z: vec![],
                u: vec![-1.0 + 4.0 * i as f64 / steps as f64, -1.0 + 4.0 * j as f64 / steps as f64],
            });
        }
    }
    let phi = |c: &Point| qbsdej::levy::j_sum(&c.u, 1.0, &omega).unwrap();
    for u in [[2.5, 1.0], [2.0, -0.5], [0.2, 0.1]] {
        let point = Point {
            y: 0.0,
            z: vec![],
            u: u.to_vec(),
        };
        let closed = reg.upper_mark(&u, &omega).unwrap();
        let brute = inf_convolve(phi, 1.0, &point, &grid, &omega).unwrap();
        // the grid minimum can only overshoot the continuous minimum
        assert!(closed <= brute + 1e-9 && brute - closed < 2e-3, "{u:?}: {closed} vs {brute}");
    }
}

#[test]
fn identity_is_reproduced_by_unit_envelopes() {
    let quad = two_node();
    let f = Driver::linear(1.0, vec![], 0.0, 1.0, 0.0).unwrap();
    let reg = regularize(&f, 1.0, 1.0, &quad).unwrap();
    let omega = quad.omega(0.0);
    for i in 0..=40 {
        let y = -4.0 + 0.2 * i as f64;
        assert!((reg.eval(0.0, y, &[0.0], &[0.0, 0.0], &omega).unwrap() - y).abs() < 1e-15);
    }
    // and agrees with the grid route
    let grid = scalar_grid(-6.0, 6.0, 1201);
    for i in 0..=8 {
        let y = -4.0 + i as f64;
        let p = Point::scalar(y);
        let up = inf_convolve(|c| c.y.max(0.0), 1.0, &p, &grid, &[]).unwrap();
        let down = inf_convolve(|c| (-c.y).max(0.0), 1.0, &p, &grid, &[]).unwrap();
        assert!((up - down - y).abs() < 1e-9);
    }
}

#[test]
fn nonnegative_driver_has_null_lower_part() {
    let quad = gamma_fine();
    let reg = regularize(&Driver::canonical(1.0).unwrap(), 3.0, 5.0, &quad).unwrap();
    assert!(reg.negative_part_is_null());
    let omega = quad.omega(0.0);
    for p in random_probes(100, 1, quad.len(), 1.0, 2.0, 9) {
        assert_eq!(reg.lower(p.y, &p.z, &p.u, &omega).unwrap(), 0.0);
        assert_eq!(
            reg.eval(0.0, p.y, &p.z, &p.u, &omega).unwrap(),
            reg.upper(p.y, &p.z, &p.u, &omega).unwrap()
        );
    }
}

#[test]
fn envelope_ordering_and_monotone_tables() {
    let quad = gamma_fine();
    let omega = quad.omega(0.0);
    let probes = random_probes(50, 1, quad.len(), 1.0, 3.0, 21);
    for base in [
        Driver::canonical(1.0).unwrap(),
        Driver::morlais(1.0, 1.5).unwrap(),
        Driver::linear(1.5, vec![-2.5], -0.6, 1.0, quad.total_mass()).unwrap(),
    ] {
        for p in &probes {
            let pos = base.positive_part(p.y, &p.z, &p.u, &omega).unwrap();
            let neg = base.negative_part(p.y, &p.z, &p.u, &omega).unwrap();
            let mut last_up = f64::NEG_INFINITY;
            for &n in &[1.0, 2.0, 4.0, 8.0] {
                let reg = regularize_truncated(&base, n, 1.0, &quad, 8.0).unwrap();
                let up = reg.upper(p.y, &p.z, &p.u, &omega).unwrap();
                assert!(up <= pos + 1e-12, "inf-envelope above the function");
                assert!(up >= last_up - 1e-12, "not monotone in n");
                last_up = up;
            }
            let mut last = f64::INFINITY;
            for &m in &[1.0, 2.0, 4.0, 8.0] {
                let reg = regularize_truncated(&base, 2.0, m, &quad, 8.0).unwrap();
                let lo = reg.lower(p.y, &p.z, &p.u, &omega).unwrap();
                assert!(lo <= neg + 1e-12);
                let f = reg.eval(0.0, p.y, &p.z, &p.u, &omega).unwrap();
                assert!(f <= last + 1e-12, "not antitone in m");
                last = f;
            }
        }
    }
}

#[test]
fn monotone_in_kappa_when_lower_mark_part_is_null() {
    let quad = gamma_fine();
    let omega = quad.omega(0.0);
    let base = Driver::morlais(1.0, 0.5).unwrap();
    for p in random_probes(50, 1, quad.len(), 1.0, 2.0, 33) {
        let mut last = f64::NEG_INFINITY;
        for &k in &[1.0, 2.0, 4.0, 8.0] {
            let v = regularize_truncated(&base, 3.0, 3.0, &quad, k)
                .unwrap()
                .eval(0.0, p.y, &p.z, &p.u, &omega)
                .unwrap();
            assert!(v >= last - 1e-12);
            last = v;
        }
    }
}

#[test]
fn sandwich_chain_holds_on_probes() {
    let quad = gamma_fine();
    let probes = random_probes(1000, 1, quad.len(), 1.0, 3.0, 77);
    for base in [Driver::canonical(1.0).unwrap(), Driver::morlais(1.0, 1.0).unwrap()] {
        for &(n, m, k) in &[(1.0, 1.0, 2.0), (2.0, 5.0, 4.0), (8.0, 2.0, 8.0)] {
            let reg = regularize_truncated(&base, n, m, &quad, k).unwrap();
            for p in &probes {
                let omega = quad.omega(p.t);
                let f = reg.eval(p.t, p.y, &p.z, &p.u, &omega).unwrap();
                let (ql, qu) = reg.truncated_bounds(p.t, p.y, &p.z, &p.u, &omega).unwrap();
                let (qlm, qun) = reg.envelope_bounds(p.t, p.y, &p.z, &p.u, &omega).unwrap();
                let tol = 1e-9 * (1.0 + qu.abs());
                assert!(ql <= qlm + tol && qlm <= f + tol && f <= qun + tol && qun <= qu + tol);
            }
        }
    }
}

#[test]
fn envelope_is_lipschitz_in_y_and_z() {
    let quad = gamma_fine();
    let omega = quad.omega(0.0);
    let u = vec![0.3; quad.len()];
    for &n in &[1.0, 5.0, 20.0] {
        let reg = regularize(&Driver::morlais(2.0, 30.0).unwrap(), n, n, &quad).unwrap();
        let up = |y: f64, z: &[f64]| reg.upper(y, z, &u, &omega).unwrap();
        let region = Region {
            y: (-10.0, 10.0),
            z: (-10.0, 10.0),
            d: 2,
        };
        let est = lipschitz_estimate(up, region, 2000, 5);
        assert!(est <= n * (1.0 + 1e-6), "n={n}: {est}");
    }
}

#[test]
fn lipschitz_estimate_examples() {
    let region = Region {
        y: (-1.0, 1.0),
        z: (0.0, 0.0),
        d: 0,
    };
    assert_eq!(lipschitz_estimate(|_, _| 4.2, region, 100, 1), 0.0);
    let est = lipschitz_estimate(|y, _| 3.0 * y, region, 1000, 1);
    assert!((est - 3.0).abs() < 1e-9);
}

#[test]
fn uniform_convergence_in_n() {
    let grid = scalar_grid(-2.0, 2.0, 801);
    let phi = |c: &Point| c.y * c.y + (2.0 * c.y).cos();
    let mut last = f64::INFINITY;
    let mut n = 1.0;
    while n <= 256.0 {
        let gap = grid
            .iter()
            .step_by(10)
            .map(|p| phi(p) - inf_convolve(phi, n, p, &grid, &[]).unwrap())
            .fold(0.0, f64::max);
        assert!(gap <= last + 1e-12);
        last = gap;
        n *= 2.0;
    }
    assert!(last < 1e-3);
}

#[test]
fn kappa_convergence_of_envelopes() {
    let model = LevyModel::gamma(1.0, 2.0);
    let fine = build_quadrature_banded(&model, 64.0, 2).unwrap();
    let omega = fine.omega(0.0);
    let base = Driver::canonical(1.0).unwrap();
    let probes = random_probes(50, 1, fine.len(), 1.0, 1.0, 4);
    let mut prev: Option<Vec<f64>> = None;
    let mut last_gap = f64::INFINITY;
    for &k in &[4.0, 8.0, 16.0, 32.0, 64.0] {
        let reg = regularize_truncated(&base, 4.0, 4.0, &fine, k).unwrap();
        // integrable fields: u(e) = O(|e|) near the origin
        let vals: Vec<f64> = probes
            .iter()
            .map(|p| {
                let u: Vec<f64> = p.u.iter().zip(fine.nodes()).map(|(a, e)| a * e).collect();
                reg.eval(0.0, p.y, &p.z, &u, &omega).unwrap()
            })
            .collect();
        if let Some(pv) = &prev {
            let gap = vals.iter().zip(pv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap <= last_gap + 1e-12);
            last_gap = gap;
        }
        prev = Some(vals);
    }
    assert!(last_gap < 1e-2, "{last_gap}");
}

#[test]
fn a_gamma_examples() {
    let quad = MarkQuadrature::new(vec![1.0], vec![1.0], 1.0).unwrap();
    let f = Driver::canonical(1.0).unwrap();
    let same = check_a_gamma(&f, 0.0, 0.0, &[0.0], &JumpField::constant(1, 0.4), &JumpField::constant(1, 0.4), &quad)
        .unwrap();
    assert!(same.ok && same.lhs == 0.0 && same.rhs == 0.0);
    let r = check_a_gamma(&f, 0.0, 0.0, &[0.0], &JumpField::constant(1, 1.0), &JumpField::zeros(1), &quad).unwrap();
    assert!((r.lhs - (E - 2.0)).abs() < 1e-12);
    assert!((r.gamma[0] - (E - 2.0)).abs() < 1e-12);
    assert!((r.rhs - r.lhs).abs() < 1e-12 && r.ok);
}

#[test]
fn u_part_local_lipschitz_bound() {
    let quad = gamma_fine();
    let omega = quad.omega(0.0);
    let reg = regularize(&Driver::canonical(1.0).unwrap(), 3.0, 3.0, &quad).unwrap();
    let probes = random_probes(400, 0, quad.len(), 1.0, 3.0, 12);
    for pair in probes.chunks(2) {
        let (u, v) = (&pair[0].u, &pair[1].u);
        let gu = reg.upper_mark(u, &omega).unwrap();
        let gv = reg.upper_mark(v, &omega).unwrap();
        let nu = qbsdej::levy::weighted_norm(u, &omega);
        let nv = qbsdej::levy::weighted_norm(v, &omega);
        let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
        let nd = qbsdej::levy::weighted_norm(&diff, &omega);
        assert!((gu - gv).abs() <= 3.0 * (nu + nv) * nd + 1e-12);
    }
}

#[test]
fn custom_driver_cannot_use_closed_form() {
    let quad = two_node();
    let f = Driver::custom("c", Arc::new(|_, y, _, _, _| y), StructureParams::pure(1.0), Some(1.0));
    assert!(matches!(regularize(&f, 1.0, 1.0, &quad), Err(Error::Unsupported(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn a_gamma_holds_for_convex_mark_integrands(
        u in prop::collection::vec(-2.0f64..2.0, 4),
        v in prop::collection::vec(-2.0f64..2.0, 4),
        c in -0.9f64..3.0,
    ) {
        let quad = MarkQuadrature::new(vec![0.5, 1.0, 2.0, 4.0], vec![0.4, 0.3, 0.2, 0.1], 2.0).unwrap();
        let canonical = Driver::canonical(1.0).unwrap();
        let linear = Driver::linear(0.0, vec![], c, 1.0, 1.0).unwrap();
        for f in [&canonical, &linear] {
            let r = check_a_gamma(f, 0.0, 0.1, &[0.2], &JumpField::new(u.clone()), &JumpField::new(v.clone()), &quad).unwrap();
            prop_assert!(r.ok, "{:?}", r);
            prop_assert!(r.gamma.iter().all(|g| *g > -1.0));
        }
    }

    #[test]
    fn envelopes_bracket_the_function(y in -3.0f64..3.0, n in 0.5f64..6.0) {
        let grid = scalar_grid(-4.0, 4.0, 161);
        let p = Point::scalar(y);
        let phi = |c: &Point| c.y.powi(3) - c.y;
        let inf = inf_convolve(phi, n, &p, &grid, &[]).unwrap();
        let sup = sup_convolve(phi, n, &p, &grid, &[]).unwrap();
        let nearest = grid.iter().min_by(|a, b| (a.y - y).abs().total_cmp(&(b.y - y).abs())).unwrap();
        prop_assert!(inf <= phi(nearest) + n * (nearest.y - y).abs() + 1e-12);
        prop_assert!(sup >= phi(nearest) - n * (nearest.y - y).abs() - 1e-12);
    }
}
