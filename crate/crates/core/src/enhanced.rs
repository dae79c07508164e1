//! Correction-enhanced stepping, the a-priori error bound, and the
//! safeguarded hybrid integrator.
//!
//! The enhanced scheme adds a learned estimate of the leading local-error
//! term to each base step: `x_{k+1} = step(x_k) + h^(p+1) * N(x_k, p)`.
//! The hybrid integrator runs an embedded pair instead and accepts the
//! corrected low-order step only while the correction stays close to the
//! pair's own error estimate; otherwise it reverts to the higher-order
//! result, so a badly generalizing network can only degrade the scheme to
//! the classical order-(p+1) integrator.

use serde::{Deserialize, Serialize};

use crate::learning::Dataset;
use crate::nn::Mlp;
use crate::ode::{OdeSystem, ParamVec, StateVec};
use crate::rk::{check_divergence, rk_step, ButcherTableau, Trajectory};
use crate::{Error, Result};

/// A source of local-error corrections `N(x, p)`, evaluated in physical
/// units. Implemented by [`Mlp`] (state and parameters concatenated into
/// the network input) and by plain closures, which is what tests use for
/// analytically known corrections.
pub trait CorrectionModel: Sync {
    fn correction(&self, state: &[f64], params: &[f64]) -> Result<Vec<f64>>;
}

impl CorrectionModel for Mlp {
    fn correction(&self, state: &[f64], params: &[f64]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(state.len() + params.len());
        input.extend_from_slice(state);
        input.extend_from_slice(params);
        self.forward(&input)
    }
}

impl<F> CorrectionModel for F
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Sync,
{
    fn correction(&self, state: &[f64], params: &[f64]) -> Result<Vec<f64>> {
        Ok(self(state, params))
    }
}

/// Which norm condenses the normalized discrepancy vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// `max_i |v_i|`; keeping it below `delta_max` bounds every component.
    #[default]
    Max,
    /// `sqrt(mean_i v_i^2)`.
    AveragedL2,
}

/// Tolerances and acceptance threshold for the hybrid integrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    atol: Vec<f64>,
    rtol: Vec<f64>,
    kappa: f64,
    delta_max: f64,
    norm_kind: NormKind,
}

impl HybridConfig {
    /// `kappa` is the safety factor applied during calibration (at
    /// least 1); `delta_max` is the acceptance threshold, normally the
    /// output of [`calibrate_delta_max`].
    pub fn new(
        atol: Vec<f64>,
        rtol: Vec<f64>,
        kappa: f64,
        delta_max: f64,
        norm_kind: NormKind,
    ) -> Result<Self> {
        if atol.len() != rtol.len() || atol.is_empty() {
            return Err(Error::DimensionMismatch {
                context: "hybrid tolerances".into(),
                expected: atol.len().max(1),
                got: rtol.len(),
            });
        }
        for (i, (&a, &r)) in atol.iter().zip(&rtol).enumerate() {
            if !(a.is_finite() && a >= 0.0 && r.is_finite() && r >= 0.0) {
                return Err(Error::InvalidValue(format!(
                    "tolerances must be finite and >= 0, got atol[{i}] = {a}, rtol[{i}] = {r}"
                )));
            }
        }
        if atol.iter().all(|&a| a == 0.0) && rtol.iter().all(|&r| r == 0.0) {
            return Err(Error::InvalidValue(
                "atol and rtol cannot both be all-zero".into(),
            ));
        }
        if !(kappa.is_finite() && kappa >= 1.0) {
            return Err(Error::InvalidValue(format!("kappa must be >= 1, got {kappa}")));
        }
        if delta_max.is_nan() || delta_max < 0.0 {
            return Err(Error::InvalidValue(format!(
                "delta_max must be >= 0, got {delta_max}"
            )));
        }
        Ok(Self {
            atol,
            rtol,
            kappa,
            delta_max,
            norm_kind,
        })
    }

    pub fn atol(&self) -> &[f64] {
        &self.atol
    }

    pub fn rtol(&self) -> &[f64] {
        &self.rtol
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn delta_max(&self) -> f64 {
        self.delta_max
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm_kind
    }

    /// Copy of the config with a (re)calibrated threshold.
    pub fn with_delta_max(&self, delta_max: f64) -> Result<Self> {
        Self::new(
            self.atol.clone(),
            self.rtol.clone(),
            self.kappa,
            delta_max,
            self.norm_kind,
        )
    }

    fn check_dim(&self, state_dim: usize) -> Result<()> {
        if self.atol.len() != state_dim {
            return Err(Error::DimensionMismatch {
                context: "hybrid tolerance vectors".into(),
                expected: state_dim,
                got: self.atol.len(),
            });
        }
        Ok(())
    }
}

/// Constants entering the a-priori error bound: Lipschitz constants of the
/// discrete flow and the correction network over the region of interest,
/// the sup-norm accuracy of the network, the base order, and the step.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub lip_flow: f64,
    pub lip_net: f64,
    pub eps_nn: f64,
    pub p: u32,
    pub h: f64,
}

impl BoundParams {
    fn validate(&self) -> Result<()> {
        if !(self.lip_flow.is_finite() && self.lip_flow >= 0.0) {
            return Err(Error::InvalidValue(format!("lip_flow = {}", self.lip_flow)));
        }
        if !(self.lip_net.is_finite() && self.lip_net >= 0.0) {
            return Err(Error::InvalidValue(format!("lip_net = {}", self.lip_net)));
        }
        if !(self.eps_nn.is_finite() && self.eps_nn > 0.0) {
            return Err(Error::InvalidValue(format!("eps_nn = {}", self.eps_nn)));
        }
        if self.p == 0 {
            return Err(Error::InvalidValue("order p must be >= 1".into()));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::InvalidValue(format!("h = {}", self.h)));
        }
        Ok(())
    }
}

/// Worst-case bound on the global error `‖e_{k+1}‖` of the enhanced scheme
/// after `k + 1` steps, assuming the network's pointwise error never
/// exceeds `eps_nn`. With `a = lip_flow + h^(p+1) lip_net` and
/// `b = eps_nn h^(p+1)`:
///
/// - `a > 1`: `(exp((k+1)(a-1)) - 1) / (a-1) * b` (exponential growth),
/// - `a = 1`: `(k+1) * b` (linear growth),
/// - `a < 1`: `b / (1-a)` (uniform in k; contractive flow).
///
/// `a <= 0` is a domain error.
pub fn error_bound(bp: &BoundParams, k: usize) -> Result<f64> {
    bp.validate()?;
    let hp = bp.h.powi(bp.p as i32 + 1);
    let alpha = bp.lip_flow + hp * bp.lip_net;
    let beta = bp.eps_nn * hp;
    if alpha <= 0.0 {
        return Err(Error::Domain(format!(
            "error bound needs alpha > 0, got {alpha}"
        )));
    }
    let steps = (k + 1) as f64;
    Ok(if alpha > 1.0 {
        ((steps * (alpha - 1.0)).exp() - 1.0) / (alpha - 1.0) * beta
    } else if alpha == 1.0 {
        steps * beta
    } else {
        beta / (1.0 - alpha)
    })
}

/// One base step plus the scaled correction:
/// `rk_step(x) + h^(order+1) * N(x, p)`.
///
/// A non-finite network output is reported as [`Error::NonFiniteCorrection`],
/// distinct from a blow-up of the vector field itself.
pub fn enhanced_step(
    sys: &OdeSystem,
    tab: &ButcherTableau,
    net: &dyn CorrectionModel,
    x: &StateVec,
    p: &ParamVec,
    h: f64,
) -> Result<StateVec> {
    let step = rk_step(sys, tab, x, p, h)?;
    let corr = checked_correction(net, x, p)?;
    let scale = h.powi(tab.order() as i32 + 1);
    let next: Vec<f64> = step
        .next
        .values()
        .iter()
        .zip(&corr)
        .map(|(s, c)| s + scale * c)
        .collect();
    StateVec::new(next)
}

fn checked_correction(
    net: &dyn CorrectionModel,
    x: &StateVec,
    p: &ParamVec,
) -> Result<Vec<f64>> {
    let corr = net.correction(x.values(), p.values())?;
    if corr.len() != x.dim() {
        return Err(Error::DimensionMismatch {
            context: "correction output".into(),
            expected: x.dim(),
            got: corr.len(),
        });
    }
    for (component, c) in corr.iter().enumerate() {
        if !c.is_finite() {
            return Err(Error::NonFiniteCorrection { component });
        }
    }
    Ok(corr)
}

/// Fixed-step integration with the enhanced scheme.
pub fn enhanced_integrate(
    sys: &OdeSystem,
    tab: &ButcherTableau,
    net: &dyn CorrectionModel,
    x0: &StateVec,
    p: &ParamVec,
    h: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    let mut x = x0.clone();
    for step in 0..n_steps {
        let next = enhanced_step(sys, tab, net, &x, p, h)
            .and_then(|next| {
                check_divergence(step + 1, next.values())?;
                Ok(next)
            })
            .map_err(|source| Error::StepFailed {
                step,
                source: Box::new(source),
            })?;
        states.push(next.clone());
        x = next;
    }
    Trajectory::new(h, states, p.clone())
}

/// Per-component tolerance scales `sc_i = atol_i + max(|x_i|, |next_i|) * rtol_i`,
/// where `next` is the higher-order step result.
pub fn scaling_factors(x: &StateVec, next_high: &StateVec, cfg: &HybridConfig) -> Vec<f64> {
    debug_assert_eq!(x.dim(), cfg.atol.len());
    debug_assert_eq!(x.dim(), next_high.dim());
    x.values()
        .iter()
        .zip(next_high.values())
        .zip(cfg.atol.iter().zip(&cfg.rtol))
        .map(|((xi, ni), (a, r))| a + xi.abs().max(ni.abs()) * r)
        .collect()
}

/// Norm of an already-normalized discrepancy vector.
pub fn norm_normalized(delta_tilde: &[f64], kind: NormKind) -> f64 {
    match kind {
        NormKind::Max => delta_tilde.iter().fold(0.0, |m, v| v.abs().max(m)),
        NormKind::AveragedL2 => {
            let n = delta_tilde.len().max(1) as f64;
            (delta_tilde.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
        }
    }
}

/// Normalizes `delta` by `sc` and condenses it with the configured norm.
///
/// Degenerate components force the conservative outcome: `sc_i = 0` with
/// `delta_i != 0` — or any non-finite intermediate — yields infinity, which
/// the hybrid loop treats as a rejection. `0/0` counts as a zero component.
fn normalized_discrepancy(delta: &[f64], sc: &[f64], kind: NormKind) -> f64 {
    let mut tilde = Vec::with_capacity(delta.len());
    for (d, s) in delta.iter().zip(sc) {
        if *s == 0.0 {
            if *d == 0.0 {
                tilde.push(0.0);
                continue;
            }
            return f64::INFINITY;
        }
        let r = d / s;
        if !r.is_finite() {
            return f64::INFINITY;
        }
        tilde.push(r);
    }
    norm_normalized(&tilde, kind)
}

/// What the hybrid integrator did at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridStepRecord {
    /// True when the corrected low-order step was accepted.
    pub used_network: bool,
    /// `‖δ̃‖` for this step; infinite when the check was unevaluable
    /// (degenerate scale or non-finite correction), which forces fallback.
    pub normalized_discrepancy: f64,
    pub next: StateVec,
}

/// Threshold calibration over a training dataset:
/// `delta_max = kappa * max over samples of ‖δ̃‖`, with
/// `δ = (next_high - next_low) - h^(p+1) N(state, params)` evaluated at the
/// dataset's states. `cfg.delta_max` is ignored here.
pub fn calibrate_delta_max(
    net: &dyn CorrectionModel,
    dataset: &Dataset,
    sys: &OdeSystem,
    tab_embedded: &ButcherTableau,
    cfg: &HybridConfig,
) -> Result<f64> {
    let low_order = tab_embedded.order_embedded().ok_or_else(|| {
        Error::SchemeMismatch(format!(
            "tableau '{}' has no embedded weights",
            tab_embedded.name()
        ))
    })?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("calibration dataset is empty".into()));
    }
    if dataset.base_order() != low_order {
        return Err(Error::SchemeMismatch(format!(
            "dataset was built for base order {}, embedded pair corrects order {}",
            dataset.base_order(),
            low_order
        )));
    }
    cfg.check_dim(dataset.state_dim())?;
    let h = dataset.h();
    let scale = h.powi(low_order as i32 + 1);
    let mut worst = 0.0f64;
    for s in dataset.samples() {
        let step = rk_step(sys, tab_embedded, &s.state, &s.params, h)?;
        let low = step.next_embedded.expect("embedded weights checked above");
        let corr = net.correction(s.state.values(), s.params.values())?;
        if corr.len() != dataset.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "correction output".into(),
                expected: dataset.state_dim(),
                got: corr.len(),
            });
        }
        let delta: Vec<f64> = step
            .next
            .values()
            .iter()
            .zip(low.values())
            .zip(&corr)
            .map(|((hi, lo), c)| (hi - lo) - scale * c)
            .collect();
        let sc = scaling_factors(&s.state, &step.next, cfg);
        worst = worst.max(normalized_discrepancy(&delta, &sc, cfg.norm_kind));
    }
    Ok(cfg.kappa * worst)
}

/// Safeguarded integration with an embedded pair (Algorithm: shared stages,
/// then a branch per step).
///
/// Each step computes the pair once; with `next_low`/`next_high` the two
/// weight combinations and `est = next_high - next_low` the pair's error
/// estimate, the correction is accepted iff
/// `‖(est - h^(p+1) N) / sc‖ <= delta_max`, giving
/// `next = next_low + h^(p+1) N`; otherwise `next = next_high` exactly.
/// The correction order `p` is the embedded (lower) order. A non-finite
/// network output or a zero scale with nonzero discrepancy records an
/// infinite discrepancy and falls back rather than failing the run.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_integrate(
    sys: &OdeSystem,
    tab_embedded: &ButcherTableau,
    net: &dyn CorrectionModel,
    x0: &StateVec,
    p: &ParamVec,
    h: f64,
    n_steps: usize,
    cfg: &HybridConfig,
) -> Result<(Trajectory, Vec<HybridStepRecord>)> {
    let low_order = tab_embedded.order_embedded().ok_or_else(|| {
        Error::SchemeMismatch(format!(
            "hybrid integration needs an embedded pair, tableau '{}' has none",
            tab_embedded.name()
        ))
    })?;
    cfg.check_dim(x0.dim())?;
    let scale = h.powi(low_order as i32 + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    let mut records = Vec::with_capacity(n_steps);
    let mut x = x0.clone();
    for step_idx in 0..n_steps {
        let fail = |source: Error| Error::StepFailed {
            step: step_idx,
            source: Box::new(source),
        };
        let step = rk_step(sys, tab_embedded, &x, p, h).map_err(fail)?;
        let low = step.next_embedded.expect("embedded weights checked above");
        let high = step.next;
        let corr = net
            .correction(x.values(), p.values())
            .map_err(fail)?;
        if corr.len() != x.dim() {
            return Err(fail(Error::DimensionMismatch {
                context: "correction output".into(),
                expected: x.dim(),
                got: corr.len(),
            }));
        }
        let corr_scaled: Vec<f64> = corr.iter().map(|c| scale * c).collect();
        let disc = if corr_scaled.iter().all(|c| c.is_finite()) {
            let delta: Vec<f64> = high
                .values()
                .iter()
                .zip(low.values())
                .zip(&corr_scaled)
                .map(|((hi, lo), c)| (hi - lo) - c)
                .collect();
            let sc = scaling_factors(&x, &high, cfg);
            normalized_discrepancy(&delta, &sc, cfg.norm_kind)
        } else {
            f64::INFINITY
        };
        let used_network = disc.is_finite() && disc <= cfg.delta_max;
        let next = if used_network {
            let vals: Vec<f64> = low
                .values()
                .iter()
                .zip(&corr_scaled)
                .map(|(l, c)| l + c)
                .collect();
            check_divergence(step_idx + 1, &vals).map_err(fail)?;
            StateVec::from_finite(vals)
        } else {
            check_divergence(step_idx + 1, high.values()).map_err(fail)?;
            high
        };
        records.push(HybridStepRecord {
            used_network,
            normalized_discrepancy: disc,
            next: next.clone(),
        });
        states.push(next.clone());
        x = next;
    }
    let traj = Trajectory::new(h, states, p.clone())?;
    Ok((traj, records))
}

/// CSV rendering of hybrid step records: `k,used_network,normalized_discrepancy`.
pub fn hybrid_records_to_csv(records: &[HybridStepRecord]) -> String {
    let mut out = String::from("k,used_network,normalized_discrepancy\n");
    for (k, r) in records.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            k, r.used_network, r.normalized_discrepancy
        ));
    }
    out
}
