//! Autonomous ODE systems with optional closed-form flows.
//!
//! A system is a deterministic right-hand side `f(x, p)` together with its
//! dimensions and, where one exists, the exact flow map used as ground truth
//! in convergence tests. Everything is plain `f64`; states and parameters
//! are finite by construction.

use std::sync::Arc;

use crate::{Error, Result};

/// State vector. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVec {
    values: Vec<f64>,
}

impl StateVec {
    /// Builds a state vector, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "state component {i} is not finite: {}",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_finite(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl std::ops::Index<usize> for StateVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Parameter vector. May be empty; all entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    values: Vec<f64>,
}

impl ParamVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "parameter {i} is not finite: {}",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    /// The empty parameter vector.
    pub fn empty() -> Self {
        Self { values: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl std::ops::Index<usize> for ParamVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

type EvalFn = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;
type FlowFn = dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// An autonomous ODE `x' = f(x, p)`.
#[derive(Clone)]
pub struct OdeSystem {
    name: String,
    state_dim: usize,
    param_dim: usize,
    eval: Arc<EvalFn>,
    exact_flow: Option<Arc<FlowFn>>,
}

impl std::fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("param_dim", &self.param_dim)
            .field("exact_flow", &self.exact_flow.is_some())
            .finish()
    }
}

impl OdeSystem {
    /// Builds a system from a right-hand side and an optional exact flow.
    ///
    /// Both closures must be deterministic: identical inputs must produce
    /// bitwise-identical outputs.
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        param_dim: usize,
        eval: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        exact_flow: Option<Arc<FlowFn>>,
    ) -> Self {
        Self {
            name: name.into(),
            state_dim,
            param_dim,
            eval: Arc::new(eval),
            exact_flow,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn has_exact_flow(&self) -> bool {
        self.exact_flow.is_some()
    }

    /// Right-hand side on raw slices. Callers guarantee matching dimensions.
    pub fn eval_raw(&self, x: &[f64], p: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.state_dim);
        debug_assert_eq!(p.len(), self.param_dim);
        (self.eval)(x, p)
    }

    /// Checked right-hand side evaluation.
    pub fn eval(&self, x: &StateVec, p: &ParamVec) -> Result<StateVec> {
        self.check_dims(x, p)?;
        StateVec::new(self.eval_raw(x.values(), p.values()))
    }

    /// Exact flow at time `t`, when the system has one.
    pub fn exact_flow(&self, t: f64, x0: &StateVec, p: &ParamVec) -> Option<StateVec> {
        self.exact_flow
            .as_ref()
            .map(|flow| StateVec::from_finite(flow(t, x0.values(), p.values())))
    }

    pub(crate) fn check_dims(&self, x: &StateVec, p: &ParamVec) -> Result<()> {
        if x.dim() != self.state_dim {
            return Err(Error::DimensionMismatch {
                context: format!("state for system '{}'", self.name),
                expected: self.state_dim,
                got: x.dim(),
            });
        }
        if p.dim() != self.param_dim {
            return Err(Error::DimensionMismatch {
                context: format!("params for system '{}'", self.name),
                expected: self.param_dim,
                got: p.dim(),
            });
        }
        Ok(())
    }
}

/// 1-D linear system `x' = lambda * x` with the rate baked in.
///
/// The parameter vector is empty; the exact flow is `x0 * exp(lambda * t)`.
pub fn make_linear_system(lambda: f64) -> OdeSystem {
    OdeSystem::new(
        "linear_fixed",
        1,
        0,
        move |x, _p| vec![lambda * x[0]],
        Some(Arc::new(move |t, x0, _p| vec![x0[0] * (lambda * t).exp()])),
    )
}

/// 1-D linear family `x' = p[0] * x` with the rate carried in the
/// parameter vector, so grids and sweeps can vary it.
pub fn make_linear_family() -> OdeSystem {
    OdeSystem::new(
        "linear",
        1,
        1,
        |x, p| vec![p[0] * x[0]],
        Some(Arc::new(|t, x0, p| vec![x0[0] * (p[0] * t).exp()])),
    )
}

/// Van der Pol oscillator. `p[0]` is the stiffness/damping parameter mu:
/// `x1' = x2`, `x2' = mu (1 - x1^2) x2 - x1`. No closed-form flow.
pub fn make_vanderpol() -> OdeSystem {
    OdeSystem::new(
        "vanderpol",
        2,
        1,
        |x, p| vec![x[1], p[0] * (1.0 - x[0] * x[0]) * x[1] - x[0]],
        None,
    )
}

/// Damped pendulum. `p[0]` is the damping coefficient c:
/// `x1' = x2`, `x2' = -sin(x1) - c x2`. No closed-form flow.
pub fn make_pendulum() -> OdeSystem {
    OdeSystem::new(
        "pendulum",
        2,
        1,
        |x, p| vec![x[1], -x[0].sin() - p[0] * x[1]],
        None,
    )
}

/// Resolves a system by its registry name.
pub fn system_by_name(name: &str) -> Result<OdeSystem> {
    match name {
        "linear" => Ok(make_linear_family()),
        "vanderpol" => Ok(make_vanderpol()),
        "pendulum" => Ok(make_pendulum()),
        other => Err(Error::UnknownName(format!("ODE system '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Truncated Taylor series for exp(x), independent of `f64::exp`.
    fn series_exp(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..=30 {
            term *= x / n as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn state_vec_rejects_non_finite() {
        assert!(StateVec::new(vec![1.0, f64::NAN]).is_err());
        assert!(StateVec::new(vec![f64::INFINITY]).is_err());
        assert!(StateVec::new(vec![1.0, -2.5]).is_ok());
        assert!(ParamVec::new(vec![f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn linear_fixed_eval_and_flow() {
        let sys = make_linear_system(1.0);
        assert_eq!(sys.state_dim(), 1);
        assert_eq!(sys.param_dim(), 0);
        let x = StateVec::new(vec![1.0]).unwrap();
        let p = ParamVec::empty();
        assert_eq!(sys.eval(&x, &p).unwrap().values(), &[1.0]);
        let flowed = sys.exact_flow(0.1, &x, &p).unwrap();
        // Oracle: 25-term Taylor series for exp(0.1).
        assert_relative_eq!(flowed[0], series_exp(0.1), max_relative = 1e-12);
        assert_relative_eq!(flowed[0], 1.105_170_918_075_647_7, max_relative = 1e-15);
    }

    #[test]
    fn linear_family_matches_fixed_rate() {
        let fam = system_by_name("linear").unwrap();
        let fixed = make_linear_system(0.7);
        let x = StateVec::new(vec![1.3]).unwrap();
        let pf = ParamVec::new(vec![0.7]).unwrap();
        assert_eq!(
            fam.eval(&x, &pf).unwrap().values(),
            fixed.eval(&x, &ParamVec::empty()).unwrap().values()
        );
        assert_eq!(
            fam.exact_flow(2.0, &x, &pf).unwrap().values(),
            fixed.exact_flow(2.0, &x, &ParamVec::empty()).unwrap().values()
        );
    }

    #[test]
    fn vanderpol_rhs_hand_values() {
        let sys = make_vanderpol();
        let x = StateVec::new(vec![2.0, 1.0]).unwrap();
        let p = ParamVec::new(vec![3.0]).unwrap();
        // x1' = 1, x2' = 3 (1 - 4) 1 - 2 = -11, exact in f64.
        assert_eq!(sys.eval(&x, &p).unwrap().values(), &[1.0, -11.0]);
    }

    #[test]
    fn pendulum_rhs_hand_values() {
        let sys = make_pendulum();
        let x = StateVec::new(vec![std::f64::consts::FRAC_PI_2, 2.0]).unwrap();
        let p = ParamVec::new(vec![0.5]).unwrap();
        let dx = sys.eval(&x, &p).unwrap();
        assert_eq!(dx[0], 2.0);
        // -sin(pi/2) - 0.5 * 2 = -2.
        assert_relative_eq!(dx[1], -2.0, max_relative = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let sys = make_vanderpol();
        let x = StateVec::new(vec![1.0]).unwrap();
        let p = ParamVec::new(vec![1.0]).unwrap();
        assert!(matches!(
            sys.eval(&x, &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unknown_system_name_errors() {
        assert!(matches!(
            system_by_name("lorenz"),
            Err(Error::UnknownName(_))
        ));
    }

    proptest! {
        /// Flow semigroup property: flowing s then t equals flowing s + t.
        #[test]
        fn linear_flow_semigroup(
            lambda in -1.5f64..1.5,
            x0 in 0.1f64..3.0,
            s in 0.0f64..2.0,
            t in 0.0f64..2.0,
        ) {
            let sys = make_linear_family();
            let p = ParamVec::new(vec![lambda]).unwrap();
            let x = StateVec::new(vec![x0]).unwrap();
            let via_s = sys.exact_flow(s, &x, &p).unwrap();
            let two_leg = sys.exact_flow(t, &via_s, &p).unwrap();
            let direct = sys.exact_flow(s + t, &x, &p).unwrap();
            prop_assert!(
                (two_leg[0] - direct[0]).abs() <= 1e-12 * direct[0].abs().max(1.0),
                "semigroup violated: {} vs {}", two_leg[0], direct[0]
            );
        }

        /// Right-hand sides are deterministic: repeated evaluation is bitwise equal.
        #[test]
        fn eval_is_deterministic(x1 in -2.0f64..2.0, x2 in -2.0f64..2.0, mu in 0.1f64..4.0) {
            let sys = make_vanderpol();
            let x = StateVec::new(vec![x1, x2]).unwrap();
            let p = ParamVec::new(vec![mu]).unwrap();
            let a = sys.eval(&x, &p).unwrap();
            let b = sys.eval(&x, &p).unwrap();
            prop_assert_eq!(a.values(), b.values());
        }
    }
}
