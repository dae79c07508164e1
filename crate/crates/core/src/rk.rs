//! Explicit Runge-Kutta machinery: Butcher tableaux, single steps,
//! fixed-step integration, a high-order reference integrator, and
//! Richardson extrapolation.
//!
//! Tableaux are strictly lower triangular by construction (row `i` of `a`
//! holds exactly `i` entries), so every scheme here is explicit. Embedded
//! pairs share stage evaluations: the weighted combinations are accumulated
//! in stage order, which makes an embedded weight row with trailing zeros
//! reproduce the standalone lower-order scheme bit for bit.

use crate::ode::{OdeSystem, ParamVec, StateVec};
use crate::{Error, Result};

/// Integration aborts once any state component magnitude exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Coefficients of an explicit Runge-Kutta scheme, optionally with an
/// embedded lower-order weight row.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    name: String,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    b_embedded: Option<Vec<f64>>,
    c: Vec<f64>,
    order: u32,
    order_embedded: Option<u32>,
}

const COEFF_TOL: f64 = 1e-12;

impl ButcherTableau {
    /// Validates and builds a tableau.
    ///
    /// Row `i` of `a` must hold exactly `i` entries (strict lower triangle),
    /// each weight row must sum to 1 within 1e-12, and each `c[i]` must
    /// equal the row sum of `a[i]` within 1e-12.
    pub fn new(
        name: impl Into<String>,
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        b_embedded: Option<Vec<f64>>,
        c: Vec<f64>,
        order: u32,
        order_embedded: Option<u32>,
    ) -> Result<Self> {
        let name = name.into();
        let s = b.len();
        if s == 0 {
            return Err(Error::InvalidValue(format!("tableau '{name}' has no stages")));
        }
        if a.len() != s || c.len() != s {
            return Err(Error::InvalidValue(format!(
                "tableau '{name}': a has {} rows, c has {} entries, expected {s}",
                a.len(),
                c.len()
            )));
        }
        for (i, row) in a.iter().enumerate() {
            if row.len() != i {
                return Err(Error::InvalidValue(format!(
                    "tableau '{name}': row {i} of a has {} entries, expected {i} \
                     (must be strictly lower triangular)",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "tableau '{name}': non-finite entry in a row {i}"
                )));
            }
            let row_sum: f64 = row.iter().sum();
            if (row_sum - c[i]).abs() > COEFF_TOL {
                return Err(Error::InvalidValue(format!(
                    "tableau '{name}': c[{i}] = {} but row sum of a[{i}] = {row_sum}",
                    c[i]
                )));
            }
        }
        for (label, row) in std::iter::once(("b", &b)).chain(b_embedded.iter().map(|w| ("b_embedded", w)))
        {
            if row.len() != s {
                return Err(Error::InvalidValue(format!(
                    "tableau '{name}': {label} has {} entries, expected {s}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "tableau '{name}': non-finite entry in {label}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > COEFF_TOL {
                return Err(Error::InvalidValue(format!(
                    "tableau '{name}': {label} sums to {sum}, expected 1"
                )));
            }
        }
        if order == 0 {
            return Err(Error::InvalidValue(format!("tableau '{name}': order must be >= 1")));
        }
        if b_embedded.is_some() != order_embedded.is_some() {
            return Err(Error::InvalidValue(format!(
                "tableau '{name}': b_embedded and order_embedded must come together"
            )));
        }
        if let Some(pe) = order_embedded {
            if pe == 0 {
                return Err(Error::InvalidValue(format!(
                    "tableau '{name}': embedded order must be >= 1"
                )));
            }
        }
        Ok(Self {
            name,
            a,
            b,
            b_embedded,
            c,
            order,
            order_embedded,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self, row: usize) -> &[f64] {
        &self.a[row]
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn b_embedded(&self) -> Option<&[f64]> {
        self.b_embedded.as_deref()
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn order_embedded(&self) -> Option<u32> {
        self.order_embedded
    }
}

/// Explicit Euler, order 1.
pub fn tableau_euler() -> ButcherTableau {
    ButcherTableau::new("euler", vec![vec![]], vec![1.0], None, vec![0.0], 1, None).unwrap()
}

/// Heun's method (explicit trapezoid), order 2.
pub fn tableau_heun() -> ButcherTableau {
    ButcherTableau::new(
        "heun",
        vec![vec![], vec![1.0]],
        vec![0.5, 0.5],
        None,
        vec![0.0, 1.0],
        2,
        None,
    )
    .unwrap()
}

/// Heun's method embedded in a third-order scheme sharing both Heun stages.
///
/// `b` holds the order-3 weights (1/6, 1/6, 2/3); `b_embedded` reproduces
/// Heun (1/2, 1/2, 0). Only one extra stage over plain Heun is evaluated.
pub fn tableau_heun_rk3_embedded() -> ButcherTableau {
    ButcherTableau::new(
        "heun_rk3",
        vec![vec![], vec![1.0], vec![0.25, 0.25]],
        vec![1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
        Some(vec![0.5, 0.5, 0.0]),
        vec![0.0, 1.0, 0.5],
        3,
        Some(2),
    )
    .unwrap()
}

/// Dormand-Prince 5(4), used as the reference integrator.
pub fn tableau_dopri5() -> ButcherTableau {
    ButcherTableau::new(
        "dopri5",
        vec![
            vec![],
            vec![1.0 / 5.0],
            vec![3.0 / 40.0, 9.0 / 40.0],
            vec![44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
            vec![
                19372.0 / 6561.0,
                -25360.0 / 2187.0,
                64448.0 / 6561.0,
                -212.0 / 729.0,
            ],
            vec![
                9017.0 / 3168.0,
                -355.0 / 33.0,
                46732.0 / 5247.0,
                49.0 / 176.0,
                -5103.0 / 18656.0,
            ],
            vec![
                35.0 / 384.0,
                0.0,
                500.0 / 1113.0,
                125.0 / 192.0,
                -2187.0 / 6784.0,
                11.0 / 84.0,
            ],
        ],
        vec![
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
            0.0,
        ],
        Some(vec![
            5179.0 / 57600.0,
            0.0,
            7571.0 / 16695.0,
            393.0 / 640.0,
            -92097.0 / 339200.0,
            187.0 / 2100.0,
            1.0 / 40.0,
        ]),
        vec![0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0],
        5,
        Some(4),
    )
    .unwrap()
}

/// Resolves a tableau by its registry name.
pub fn tableau_by_name(name: &str) -> Result<ButcherTableau> {
    match name {
        "euler" => Ok(tableau_euler()),
        "heun" => Ok(tableau_heun()),
        "heun_rk3" => Ok(tableau_heun_rk3_embedded()),
        "dopri5" => Ok(tableau_dopri5()),
        other => Err(Error::UnknownName(format!("tableau '{other}'"))),
    }
}

/// Result of one Runge-Kutta step.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Combination with the primary weight row `b`.
    pub next: StateVec,
    /// Combination with `b_embedded`, when the tableau has one.
    pub next_embedded: Option<StateVec>,
    /// Stage derivatives `k_i` in evaluation order.
    pub stages: Vec<StateVec>,
}

/// Fixed-step trajectory on the grid `t_k = k h`, starting at the initial
/// state. Never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    h: f64,
    states: Vec<StateVec>,
    params: ParamVec,
}

impl Trajectory {
    pub fn new(h: f64, states: Vec<StateVec>, params: ParamVec) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptyInput("trajectory must hold at least x0".into()));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidValue(format!("step size h = {h}")));
        }
        Ok(Self { h, states, params })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn states(&self) -> &[StateVec] {
        &self.states
    }

    pub fn params(&self) -> &ParamVec {
        &self.params
    }

    /// Number of stored states (steps + 1).
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn state(&self, k: usize) -> &StateVec {
        &self.states[k]
    }

    pub fn final_state(&self) -> &StateVec {
        self.states.last().expect("trajectory is never empty")
    }

    /// Grid time of index `k`.
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    /// CSV rendering with header `t,x_1,...,x_n`.
    pub fn to_csv(&self) -> String {
        let dim = self.states[0].dim();
        let mut out = String::from("t");
        for i in 1..=dim {
            out.push_str(&format!(",x_{i}"));
        }
        out.push('\n');
        for (k, state) in self.states.iter().enumerate() {
            out.push_str(&format!("{}", self.t(k)));
            for v in state.values() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Weighted stage combination `x + h * sum_i w[i] k[i]`.
///
/// Accumulates strictly in stage order so trailing zero weights cannot
/// perturb the result; embedded and standalone schemes that share stages
/// therefore agree bitwise.
fn combine(x: &[f64], h: f64, w: &[f64], stages: &[Vec<f64>]) -> Vec<f64> {
    let mut out = x.to_vec();
    for (d, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (wi, ki) in w.iter().zip(stages) {
            acc += wi * ki[d];
        }
        *o += h * acc;
    }
    out
}

/// One explicit Runge-Kutta step of size `h` from `x`.
///
/// Errors with the stage index if any stage derivative is non-finite.
pub fn rk_step(
    sys: &OdeSystem,
    tab: &ButcherTableau,
    x: &StateVec,
    p: &ParamVec,
    h: f64,
) -> Result<StepResult> {
    sys.check_dims(x, p)?;
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidValue(format!("step size h = {h}")));
    }
    let s = tab.stages();
    let mut stages: Vec<Vec<f64>> = Vec::with_capacity(s);
    for i in 0..s {
        let mut y = x.values().to_vec();
        for (j, aij) in tab.a(i).iter().enumerate() {
            if *aij != 0.0 {
                for (yd, kd) in y.iter_mut().zip(&stages[j]) {
                    *yd += h * aij * kd;
                }
            }
        }
        let ki = sys.eval_raw(&y, p.values());
        if let Some(component) = ki.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStage {
                stage: i,
                component,
            });
        }
        stages.push(ki);
    }
    let next = combine(x.values(), h, tab.b(), &stages);
    let next_embedded = tab
        .b_embedded()
        .map(|w| combine(x.values(), h, w, &stages));
    Ok(StepResult {
        next: StateVec::new(next)?,
        next_embedded: next_embedded.map(StateVec::new).transpose()?,
        stages: stages.into_iter().map(StateVec::from_finite).collect(),
    })
}

/// Checks the divergence guard for a freshly computed state.
pub(crate) fn check_divergence(step: usize, values: &[f64]) -> Result<()> {
    for (component, v) in values.iter().enumerate() {
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step,
                component,
                value: *v,
            });
        }
    }
    Ok(())
}

/// Integrates `n_steps` fixed steps with the tableau's primary weights.
pub fn integrate(
    sys: &OdeSystem,
    tab: &ButcherTableau,
    x0: &StateVec,
    p: &ParamVec,
    h: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    sys.check_dims(x0, p)?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    let mut x = x0.clone();
    for step in 0..n_steps {
        let result = rk_step(sys, tab, &x, p, h).map_err(|e| Error::StepFailed {
            step,
            source: Box::new(e),
        })?;
        check_divergence(step, result.next.values())?;
        x = result.next;
        states.push(x.clone());
    }
    Trajectory::new(h, states, p.clone())
}

/// Largest tolerated deviation of a step-size ratio from an integer.
const GRID_TOL: f64 = 1e-6;

/// Number of fine steps per coarse step; errors unless `h_coarse` is an
/// integer multiple of `h_fine`.
pub fn grid_stride(h_coarse: f64, h_fine: f64) -> Result<usize> {
    if !(h_coarse.is_finite() && h_coarse > 0.0 && h_fine.is_finite() && h_fine > 0.0) {
        return Err(Error::InvalidValue(format!(
            "step sizes must be positive: h = {h_coarse}, h_ref = {h_fine}"
        )));
    }
    let ratio = h_coarse / h_fine;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > GRID_TOL {
        return Err(Error::GridMismatch(format!(
            "h = {h_coarse} is not an integer multiple of h_ref = {h_fine} (ratio {ratio})"
        )));
    }
    Ok(stride as usize)
}

/// Number of steps of size `h` that tile `[0, t_end]` exactly.
pub fn step_count(t_end: f64, h: f64) -> Result<usize> {
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::InvalidValue(format!("t_end = {t_end}")));
    }
    grid_stride(t_end, h).map_err(|_| {
        Error::GridMismatch(format!("t_end = {t_end} is not an integer multiple of h = {h}"))
    })
}

/// Ground-truth trajectory: Dormand-Prince 5(4) at a small fixed step.
///
/// The result lives on the fine grid `k * h_ref`; use [`subsample`] to land
/// on a coarse grid.
pub fn reference_integrate(
    sys: &OdeSystem,
    x0: &StateVec,
    p: &ParamVec,
    h_ref: f64,
    t_end: f64,
) -> Result<Trajectory> {
    let n = step_count(t_end, h_ref)?;
    integrate(sys, &tableau_dopri5(), x0, p, h_ref, n)
}

/// Restriction of a fine trajectory to the coarse grid `k * h_coarse`.
///
/// Errors unless `h_coarse` is an integer multiple of the trajectory step
/// and the final fine index lies on the coarse grid.
pub fn subsample(traj: &Trajectory, h_coarse: f64) -> Result<Trajectory> {
    let stride = grid_stride(h_coarse, traj.h())?;
    let fine_steps = traj.len() - 1;
    if !fine_steps.is_multiple_of(stride) {
        return Err(Error::GridMismatch(format!(
            "{fine_steps} fine steps do not tile a coarse grid of stride {stride}"
        )));
    }
    let states = traj
        .states()
        .iter()
        .step_by(stride)
        .cloned()
        .collect::<Vec<_>>();
    Trajectory::new(h_coarse, states, traj.params().clone())
}

/// One Richardson-extrapolated step: combines a full step with two half
/// steps as `(2^p x_half - x_full) / (2^p - 1)`, cancelling the leading
/// error term of the order-`p` tableau.
pub fn richardson_step(
    sys: &OdeSystem,
    tab: &ButcherTableau,
    x: &StateVec,
    p: &ParamVec,
    h: f64,
) -> Result<StateVec> {
    let full = rk_step(sys, tab, x, p, h)?.next;
    let half1 = rk_step(sys, tab, x, p, 0.5 * h)?.next;
    let half2 = rk_step(sys, tab, &half1, p, 0.5 * h)?.next;
    let pow = 2f64.powi(tab.order() as i32);
    let values = half2
        .values()
        .iter()
        .zip(full.values())
        .map(|(two, one)| (pow * two - one) / (pow - 1.0))
        .collect::<Vec<_>>();
    if let Some(component) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteStage {
            stage: tab.stages(),
            component,
        });
    }
    Ok(StateVec::from_finite(values))
}

/// Fixed-step integration with Richardson-extrapolated steps.
pub fn richardson_integrate(
    sys: &OdeSystem,
    tab: &ButcherTableau,
    x0: &StateVec,
    p: &ParamVec,
    h: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    sys.check_dims(x0, p)?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    let mut x = x0.clone();
    for step in 0..n_steps {
        let next = richardson_step(sys, tab, &x, p, h).map_err(|e| Error::StepFailed {
            step,
            source: Box::new(e),
        })?;
        check_divergence(step, next.values())?;
        x = next;
        states.push(x.clone());
    }
    Trajectory::new(h, states, p.clone())
}
