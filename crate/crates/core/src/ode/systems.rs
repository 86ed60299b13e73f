use std::fmt;
use std::sync::Arc;

use super::algebra::{Algebra, Real};
use super::{ParamVector, StateVector, TimeGrid};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Names accepted by [`make_system`].
pub const REGISTRY: [&str; 5] = [
    "fitzhugh_nagumo",
    "protein_transduction",
    "hes1",
    "hes1_log",
    "lorenz",
];

/// Extension point for systems outside the registry.
///
/// Implementors provide the right-hand side twice: on plain scalars for
/// integration and on graph columns for differentiable physics residuals.
/// Writing both through one generic function over [`Algebra`] keeps them in
/// sync.
pub trait CustomDynamics: Send + Sync + fmt::Debug {
    fn rhs_real(&self, y: &[f64], p: &[f64]) -> Vec<f64>;
    fn rhs_graph(&self, graph: &mut Graph, y: &[NodeId], p: &[NodeId]) -> Vec<NodeId>;
}

#[derive(Debug, Clone)]
pub enum Dynamics {
    /// `(V, R)`, `p = (a, b, c)`.
    FitzHughNagumo,
    /// `(S, S_d, R, S_R, R_pp)`, `p = (k1, k2, k3, k4, V, K_m)`.
    ProteinTransduction,
    /// `(P, M, H)`, `p = (a, b, c, d, e, f, g)`.
    Hes1,
    /// `(X, Y, Z)`, `p = (σ, ρ, β)`.
    Lorenz,
    /// `dy/dt = −p·y`.
    ExponentialDecay,
    Custom(Arc<dyn CustomDynamics>),
}

impl Dynamics {
    pub fn rhs<A: Algebra>(&self, alg: &mut A, y: &[A::V], p: &[A::V]) -> Vec<A::V> {
        match self {
            Dynamics::FitzHughNagumo => {
                let (v, r) = (y[0], y[1]);
                let (a, b, c) = (p[0], p[1], p[2]);
                // c (V − V³/3 + R)
                let v2 = alg.square(v);
                let v3 = alg.mul(v2, v);
                let v3 = alg.scale(v3, 1.0 / 3.0);
                let inner = alg.sub(v, v3);
                let inner = alg.add(inner, r);
                let dv = alg.mul(c, inner);
                // −(V − a + bR) / c
                let br = alg.mul(b, r);
                let s = alg.sub(v, a);
                let s = alg.add(s, br);
                let s = alg.div(s, c);
                let dr = alg.neg(s);
                vec![dv, dr]
            }
            Dynamics::ProteinTransduction => {
                let (s, sd, r, sr, rpp) = (y[0], y[1], y[2], y[3], y[4]);
                let _ = sd;
                let (k1, k2, k3, k4, vmax, km) = (p[0], p[1], p[2], p[3], p[4], p[5]);
                let k1s = alg.mul(k1, s);
                let sr_prod = alg.mul(s, r);
                let binding = alg.mul(k2, sr_prod);
                let dissociation = alg.mul(k3, sr);
                let activation = alg.mul(k4, sr);
                let num = alg.mul(vmax, rpp);
                let den = alg.add(km, rpp);
                let deactivation = alg.div(num, den);

                let ds = alg.add(k1s, binding);
                let ds = alg.sub(dissociation, ds);
                let dsd = k1s;
                let dr = alg.sub(dissociation, binding);
                let dr = alg.add(dr, deactivation);
                let dsr = alg.sub(binding, dissociation);
                let dsr = alg.sub(dsr, activation);
                let drpp = alg.sub(activation, deactivation);
                vec![ds, dsd, dr, dsr, drpp]
            }
            Dynamics::Hes1 => {
                let (pp, m, h) = (y[0], y[1], y[2]);
                let (a, b, c, d, e, f, g) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
                let ph = alg.mul(pp, h);
                let aph = alg.mul(a, ph);
                let p2 = alg.square(pp);
                let hill = alg.shift(p2, 1.0);
                // −aPH + bM − cP
                let bm = alg.mul(b, m);
                let cp = alg.mul(c, pp);
                let dp = alg.sub(bm, aph);
                let dp = alg.sub(dp, cp);
                // −dM + e / (1 + P²)
                let dm_decay = alg.mul(d, m);
                let dm_prod = alg.div(e, hill);
                let dm = alg.sub(dm_prod, dm_decay);
                // −aPH + f / (1 + P²) − gH
                let gh = alg.mul(g, h);
                let dh_prod = alg.div(f, hill);
                let dh = alg.sub(dh_prod, aph);
                let dh = alg.sub(dh, gh);
                vec![dp, dm, dh]
            }
            Dynamics::Lorenz => {
                let (x, yy, z) = (y[0], y[1], y[2]);
                let (sigma, rho, beta) = (p[0], p[1], p[2]);
                let d = alg.sub(yy, x);
                let dx = alg.mul(sigma, d);
                let rz = alg.sub(rho, z);
                let xrz = alg.mul(x, rz);
                let dy = alg.sub(xrz, yy);
                let xy = alg.mul(x, yy);
                let bz = alg.mul(beta, z);
                let dz = alg.sub(xy, bz);
                vec![dx, dy, dz]
            }
            Dynamics::ExponentialDecay => {
                let py = alg.mul(p[0], y[0]);
                vec![alg.neg(py)]
            }
            Dynamics::Custom(custom) => alg.custom(custom.as_ref(), y, p),
        }
    }
}

/// A named ODE `dy/dt = f(y, p)` with its benchmark scenario defaults.
#[derive(Debug, Clone)]
pub struct OdeSystem {
    pub name: String,
    pub dynamics: Dynamics,
    pub component_names: Vec<String>,
    pub param_names: Vec<String>,
    pub true_params: ParamVector,
    pub initial_state: StateVector,
    pub horizon: f64,
    /// States are `u = log y`; the right-hand side is `f(eᵘ)/eᵘ`.
    pub log_space: bool,
    /// Default internal RK4 steps per unit of time.
    pub steps_per_unit: f64,
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl OdeSystem {
    pub fn d_y(&self) -> usize {
        self.component_names.len()
    }

    pub fn d_p(&self) -> usize {
        self.param_names.len()
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    /// `dy/dt = −p·y`, `y(0) = 1`, `p = 1` on `[0, 2]`. Not in the registry;
    /// used as a closed-form test system.
    pub fn exponential_decay() -> Self {
        Self {
            name: "exponential_decay".into(),
            dynamics: Dynamics::ExponentialDecay,
            component_names: names(&["y"]),
            param_names: names(&["p"]),
            true_params: ParamVector(vec![1.0]),
            initial_state: StateVector(vec![1.0]),
            horizon: 2.0,
            log_space: false,
            steps_per_unit: 100.0,
        }
    }

    /// Wraps a user-supplied right-hand side.
    pub fn custom(
        name: &str,
        dynamics: Arc<dyn CustomDynamics>,
        component_names: Vec<String>,
        param_names: Vec<String>,
        true_params: Vec<f64>,
        initial_state: Vec<f64>,
        horizon: f64,
    ) -> Result<Self> {
        if true_params.len() != param_names.len() {
            return Err(Error::dim(
                "custom true_params",
                param_names.len(),
                true_params.len(),
            ));
        }
        if initial_state.len() != component_names.len() {
            return Err(Error::dim(
                "custom initial_state",
                component_names.len(),
                initial_state.len(),
            ));
        }
        Ok(Self {
            name: name.into(),
            dynamics: Dynamics::Custom(dynamics),
            component_names,
            param_names,
            true_params: ParamVector(true_params),
            initial_state: StateVector(initial_state),
            horizon,
            log_space: false,
            steps_per_unit: 20.0,
        })
    }

    /// Internal steps per interval of `grid` so that no step exceeds
    /// `1 / steps_per_unit`.
    pub fn default_substeps(&self, grid: &TimeGrid) -> usize {
        let widest = grid
            .points()
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max);
        ((widest * self.steps_per_unit).ceil() as usize).max(1)
    }

    pub fn component_index(&self, name: &str) -> Result<usize> {
        self.component_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::config(format!(
                    "system `{}` has no component `{name}` (components: {})",
                    self.name,
                    self.component_names.join(", ")
                ))
            })
    }

    pub fn check_params(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.d_p() {
            return Err(Error::dim(
                format!("{} parameters", self.name),
                self.d_p(),
                p.len(),
            ));
        }
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: self.param_names[i].clone(),
                context: format!("{} parameters", self.name),
            });
        }
        Ok(())
    }

    pub fn check_state(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.d_y() {
            return Err(Error::dim(
                format!("{} state", self.name),
                self.d_y(),
                y.len(),
            ));
        }
        Ok(())
    }

    /// Right-hand side on any arithmetic back end, including the log-space
    /// chain rule when `log_space` is set.
    pub fn rhs_generic<A: Algebra>(&self, alg: &mut A, y: &[A::V], p: &[A::V]) -> Vec<A::V> {
        if !self.log_space {
            return self.dynamics.rhs(alg, y, p);
        }
        let natural: Vec<A::V> = y.iter().map(|&u| alg.exp(u)).collect();
        let f = self.dynamics.rhs(alg, &natural, p);
        f.into_iter()
            .zip(natural)
            .map(|(fi, yi)| alg.div(fi, yi))
            .collect()
    }

    /// Unchecked scalar right-hand side (hot path of the integrator).
    #[inline]
    pub(crate) fn rhs_real(&self, y: &[f64], p: &[f64]) -> Vec<f64> {
        self.rhs_generic(&mut Real, y, p)
    }
}

/// Validated `f(y, p)`.
pub fn eval_rhs(system: &OdeSystem, y: &StateVector, p: &ParamVector) -> Result<StateVector> {
    system.check_state(&y.0)?;
    system.check_params(&p.0)?;
    let out = system.rhs_real(&y.0, &p.0);
    if out.len() != system.d_y() {
        return Err(Error::dim(
            format!("{} rhs output", system.name),
            system.d_y(),
            out.len(),
        ));
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: system.component_names[i].clone(),
            context: format!("{} right-hand side", system.name),
        });
    }
    Ok(StateVector(out))
}

/// System over `u = log y` with `du/dt = f(eᵘ, p) / eᵘ` componentwise.
pub fn log_transform_system(base: &OdeSystem) -> OdeSystem {
    let mut sys = base.clone();
    sys.name = format!("{}_log", base.name);
    sys.log_space = true;
    sys.initial_state = StateVector(base.initial_state.0.iter().map(|v| v.ln()).collect());
    sys
}

pub fn make_system(name: &str) -> Result<OdeSystem> {
    let sys = match name {
        "fitzhugh_nagumo" => OdeSystem {
            name: name.into(),
            dynamics: Dynamics::FitzHughNagumo,
            component_names: names(&["V", "R"]),
            param_names: names(&["a", "b", "c"]),
            true_params: ParamVector(vec![0.2, 0.2, 3.0]),
            initial_state: StateVector(vec![-1.0, 1.0]),
            horizon: 20.0,
            log_space: false,
            steps_per_unit: 20.0,
        },
        "protein_transduction" => OdeSystem {
            name: name.into(),
            dynamics: Dynamics::ProteinTransduction,
            component_names: names(&["S", "S_d", "R", "S_R", "R_pp"]),
            param_names: names(&["k1", "k2", "k3", "k4", "V", "K_m"]),
            true_params: ParamVector(vec![0.07, 0.6, 0.05, 0.3, 0.017, 0.3]),
            initial_state: StateVector(vec![1.0, 0.0, 1.0, 0.0, 0.0]),
            horizon: 100.0,
            log_space: false,
            steps_per_unit: 20.0,
        },
        "hes1" => OdeSystem {
            name: name.into(),
            dynamics: Dynamics::Hes1,
            component_names: names(&["P", "M", "H"]),
            param_names: names(&["a", "b", "c", "d", "e", "f", "g"]),
            true_params: ParamVector(vec![0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3]),
            initial_state: StateVector(vec![1.439, 2.037, 17.904]),
            horizon: 240.0,
            log_space: false,
            steps_per_unit: 20.0,
        },
        "hes1_log" => {
            let mut sys = log_transform_system(&make_system("hes1")?);
            sys.name = name.into();
            sys
        }
        "lorenz" => OdeSystem {
            name: name.into(),
            dynamics: Dynamics::Lorenz,
            component_names: names(&["X", "Y", "Z"]),
            param_names: names(&["sigma", "rho", "beta"]),
            true_params: ParamVector(vec![10.0, 28.0, 8.0 / 3.0]),
            initial_state: StateVector(vec![4.67, 5.49, 9.06]),
            horizon: 2.0,
            log_space: false,
            steps_per_unit: 200.0,
        },
        _ => {
            return Err(Error::UnknownSystem {
                name: name.into(),
                registry: REGISTRY.join(", "),
            })
        }
    };
    Ok(sys)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rhs(name: &str, y: &[f64], p: &[f64]) -> Vec<f64> {
        let sys = make_system(name).unwrap();
        eval_rhs(&sys, &StateVector(y.to_vec()), &ParamVector(p.to_vec()))
            .unwrap()
            .0
    }

    #[test]
    fn fitzhugh_nagumo_hand_substitution() {
        let f = rhs("fitzhugh_nagumo", &[-1.0, 1.0], &[0.2, 0.2, 3.0]);
        assert!((f[0] - 1.0).abs() < 1e-15);
        assert!((f[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lorenz_hand_substitution() {
        let f = rhs("lorenz", &[4.67, 5.49, 9.06], &[10.0, 28.0, 8.0 / 3.0]);
        assert!((f[0] - 8.2).abs() < 1e-12);
        assert!((f[1] - 82.9598).abs() < 1e-12);
        assert!((f[2] - 1.4783).abs() < 1e-12);
    }

    #[test]
    fn hes1_starts_at_protein_minimum() {
        let f = rhs(
            "hes1",
            &[1.439, 2.037, 17.904],
            &[0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3],
        );
        assert!(f[0].abs() < 1e-3, "dP/dt = {}", f[0]);
    }

    #[test]
    fn hes1_log_is_elementwise_ratio() {
        let y = [1.439, 2.037, 17.904];
        let p = [0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3];
        let f = rhs("hes1", &y, &p);
        let u: Vec<f64> = y.iter().map(|v: &f64| v.ln()).collect();
        let fu = rhs("hes1_log", &u, &p);
        for i in 0..3 {
            assert!((fu[i] - f[i] / y[i]).abs() < 1e-12 * (1.0 + fu[i].abs()));
        }
    }

    #[test]
    fn protein_transduction_mass_balance() {
        // Receptor is conserved; signal leaves S + S_d + S_R only through activation.
        let f = rhs(
            "protein_transduction",
            &[0.7, 0.2, 0.6, 0.1, 0.3],
            &[0.07, 0.6, 0.05, 0.3, 0.017, 0.3],
        );
        assert!((f[2] + f[3] + f[4]).abs() < 1e-15);
        assert!((f[0] + f[1] + f[3] + 0.3 * 0.1).abs() < 1e-15);
    }

    #[test]
    fn log_transform_of_decay_is_constant_rate() {
        let base = OdeSystem::exponential_decay();
        let logged = log_transform_system(&base);
        for u in [-3.0, 0.0, 2.5] {
            let f = eval_rhs(&logged, &StateVector(vec![u]), &ParamVector(vec![1.0])).unwrap();
            assert!((f.0[0] + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn registry_contents() {
        for name in REGISTRY {
            let sys = make_system(name).unwrap();
            assert_eq!(sys.true_params.len(), sys.d_p());
            assert_eq!(sys.initial_state.len(), sys.d_y());
            assert_eq!(
                sys.rhs_real(&sys.initial_state.0, &sys.true_params.0).len(),
                sys.d_y()
            );
        }
        let fnm = make_system("fitzhugh_nagumo").unwrap();
        assert_eq!((fnm.d_y(), fnm.d_p()), (2, 3));
        assert_eq!(fnm.true_params.0, vec![0.2, 0.2, 3.0]);
        let pt = make_system("protein_transduction").unwrap();
        assert_eq!(pt.initial_state.0, vec![1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(make_system("hes1_log").unwrap().log_space);
        let err = make_system("unknown").unwrap_err().to_string();
        assert!(err.contains("fitzhugh_nagumo") && err.contains("lorenz"));
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let sys = make_system("fitzhugh_nagumo").unwrap();
        assert!(eval_rhs(&sys, &StateVector(vec![1.0]), &sys.true_params).is_err());
        assert!(eval_rhs(&sys, &sys.initial_state, &ParamVector(vec![1.0])).is_err());
        // c = 0 divides by zero in the R equation.
        let err = eval_rhs(&sys, &sys.initial_state, &ParamVector(vec![0.2, 0.2, 0.0]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("`R`"), "{err}");
    }
}
