use proptest::prelude::*;
use sigmoid_core::ode::{
    integrate_from_origin, integrate_rk4, make_system, OdeSystem, ParamVector, TimeGrid,
};

/// Richardson extrapolation of two fine fourth-order solutions.
fn richardson(system: &OdeSystem, grid: &TimeGrid, substeps: usize) -> Vec<Vec<f64>> {
    let p = &system.true_params;
    let coarse = integrate_rk4(system, p, &system.initial_state, grid, substeps).unwrap();
    let fine = integrate_rk4(system, p, &system.initial_state, grid, 2 * substeps).unwrap();
    fine.states
        .iter()
        .zip(&coarse.states)
        .map(|(f, c)| f.iter().zip(c).map(|(a, b)| a + (a - b) / 15.0).collect())
        .collect()
}

fn max_error(states: &[Vec<f64>], oracle: &[Vec<f64>]) -> f64 {
    states
        .iter()
        .flatten()
        .zip(oracle.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn order_ratio(name: &str, grid: TimeGrid, substeps: usize) -> f64 {
    let system = make_system(name).unwrap();
    let oracle = richardson(&system, &grid, 64 * substeps);
    let run = |s| {
        integrate_rk4(&system, &system.true_params, &system.initial_state, &grid, s)
            .unwrap()
            .states
    };
    max_error(&run(substeps), &oracle) / max_error(&run(2 * substeps), &oracle)
}

#[test]
fn fitzhugh_nagumo_is_fourth_order() {
    let ratio = order_ratio("fitzhugh_nagumo", TimeGrid::uniform(0.0, 20.0, 41).unwrap(), 8);
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn lorenz_is_fourth_order() {
    let ratio = order_ratio("lorenz", TimeGrid::uniform(0.0, 2.0, 9).unwrap(), 96);
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn protein_and_hes1_defaults_are_converged() {
    for name in ["protein_transduction", "hes1", "hes1_log"] {
        let system = make_system(name).unwrap();
        let grid = TimeGrid::uniform(0.0, system.horizon, 21).unwrap();
        let default = integrate_from_origin(&system, &system.true_params, &grid, None).unwrap();
        let substeps = system.default_substeps(&grid);
        let fine =
            integrate_from_origin(&system, &system.true_params, &grid, Some(4 * substeps)).unwrap();
        let err = max_error(&default.states, &fine.states);
        assert!(err < 1e-6, "{name}: default step error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decay_tracks_closed_form(p in 0.1f64..3.0, n in 2usize..30) {
        let system = OdeSystem::exponential_decay();
        let grid = TimeGrid::uniform(0.0, 2.0, n).unwrap();
        let traj = integrate_from_origin(&system, &ParamVector(vec![p]), &grid, None).unwrap();
        for (t, y) in grid.points().iter().zip(&traj.states) {
            prop_assert!((y[0] - (-p * t).exp()).abs() < 1e-7);
        }
    }

    #[test]
    fn integration_is_deterministic_and_starts_at_origin(a in 0.05f64..0.4, b in 0.05f64..0.4, c in 1.0f64..5.0) {
        let system = make_system("fitzhugh_nagumo").unwrap();
        let grid = TimeGrid::uniform(0.0, 20.0, 41).unwrap();
        let p = ParamVector(vec![a, b, c]);
        let one = integrate_from_origin(&system, &p, &grid, None).unwrap();
        let two = integrate_from_origin(&system, &p, &grid, None).unwrap();
        prop_assert_eq!(&one.states, &two.states);
        prop_assert_eq!(&one.states[0], &system.initial_state.0);
    }

    #[test]
    fn subgrid_agrees_with_full_grid(k in 1usize..20) {
        // Reporting at fewer points must not change the values reported.
        let system = make_system("fitzhugh_nagumo").unwrap();
        let full = TimeGrid::uniform(0.0, 20.0, 41).unwrap();
        let t = full.points()[2 * k];
        let sub = TimeGrid::new(vec![t]).unwrap();
        let a = integrate_from_origin(&system, &system.true_params, &full, Some(10)).unwrap();
        let b = integrate_from_origin(&system, &system.true_params, &sub, Some(10 * 2 * k)).unwrap();
        for (x, y) in a.states[2 * k].iter().zip(&b.states[0]) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

