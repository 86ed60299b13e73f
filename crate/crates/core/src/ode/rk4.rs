use super::{OdeSystem, ParamVector, StateVector, TimeGrid, Trajectory};
use crate::error::{Error, Result};

/// Classical fourth-order Runge–Kutta over `grid`, with `y0` taken as the
/// state at `grid[0]` and `substeps` equal internal steps per grid interval.
pub fn integrate_rk4(
    system: &OdeSystem,
    p: &ParamVector,
    y0: &StateVector,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Trajectory> {
    system.check_params(&p.0)?;
    system.check_state(&y0.0)?;
    if substeps == 0 {
        return Err(Error::config("substeps must be at least 1"));
    }
    let dim = system.d_y();
    let p = p.as_slice();
    let mut y = y0.0.clone();
    let mut t = grid.points()[0];
    let mut states = Vec::with_capacity(grid.len());
    states.push(y.clone());
    let mut tmp = vec![0.0; dim];

    for &target in &grid.points()[1..] {
        let h = (target - t) / substeps as f64;
        for step in 0..substeps {
            let k1 = system.rhs_real(&y, p);
            for i in 0..dim {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            let k2 = system.rhs_real(&tmp, p);
            for i in 0..dim {
                tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            let k3 = system.rhs_real(&tmp, p);
            for i in 0..dim {
                tmp[i] = y[i] + h * k3[i];
            }
            let k4 = system.rhs_real(&tmp, p);
            for i in 0..dim {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp {
                    time: t + h * (step + 1) as f64,
                });
            }
        }
        t = target;
        states.push(y.clone());
    }

    Ok(Trajectory {
        grid: grid.clone(),
        states,
        params: ParamVector(p.to_vec()),
    })
}

/// Integrates from the system's initial state at `t = 0` and reports the
/// states at `times` only. `substeps` defaults to the system's step density.
pub fn integrate_from_origin(
    system: &OdeSystem,
    p: &ParamVector,
    times: &TimeGrid,
    substeps: Option<usize>,
) -> Result<Trajectory> {
    let starts_at_zero = times.points()[0] == 0.0;
    let grid = if starts_at_zero {
        times.clone()
    } else {
        let mut pts = Vec::with_capacity(times.len() + 1);
        pts.push(0.0);
        pts.extend_from_slice(times.points());
        TimeGrid::new(pts)?
    };
    let substeps = substeps.unwrap_or_else(|| system.default_substeps(&grid));
    let mut traj = integrate_rk4(system, p, &system.initial_state, &grid, substeps)?;
    if !starts_at_zero {
        traj.states.remove(0);
        traj.grid = times.clone();
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::make_system;

    #[test]
    fn exponential_decay_matches_closed_form() {
        let sys = OdeSystem::exponential_decay();
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let traj = integrate_rk4(
            &sys,
            &ParamVector(vec![1.0]),
            &StateVector(vec![1.0]),
            &grid,
            100,
        )
        .unwrap();
        assert_eq!(traj.states[0], vec![1.0]);
        assert!((traj.states[1][0] - (-1f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn initial_state_is_first_row() {
        let sys = make_system("fitzhugh_nagumo").unwrap();
        let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
        let traj = integrate_rk4(&sys, &sys.true_params, &sys.initial_state, &grid, 10).unwrap();
        assert_eq!(traj.states[0], sys.initial_state.0);
        assert_eq!(traj.states.len(), 3);
    }

    #[test]
    fn blow_up_reports_time() {
        // dy/dt = −p·y with p = −1e100 overflows within a few steps.
        let sys = OdeSystem::exponential_decay();
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let err = integrate_rk4(
            &sys,
            &ParamVector(vec![-1e100]),
            &StateVector(vec![1.0]),
            &grid,
            10,
        )
        .unwrap_err();
        match err {
            Error::BlowUp { time } => assert!(time > 0.0 && time <= 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        let sys = make_system("lorenz").unwrap();
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        assert!(integrate_rk4(&sys, &sys.true_params, &StateVector(vec![1.0]), &grid, 1).is_err());
        assert!(integrate_rk4(&sys, &sys.true_params, &sys.initial_state, &grid, 0).is_err());
    }
}
