//! Accuracy-versus-effort benchmarking: the per-simulated-second cost
//! proxy `delta_t`, the global relative squared error `delta_e`, and
//! seeded multi-run sweeps over solvers, step sizes, and parameters.

use std::hint::black_box;
use std::time::Instant;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::enhanced::{enhanced_integrate, hybrid_integrate, CorrectionModel, HybridConfig};
use crate::ode::{OdeSystem, ParamVec, StateVec};
use crate::rk::{
    grid_stride, integrate, reference_integrate, richardson_integrate, step_count, subsample,
    ButcherTableau, Trajectory,
};
use crate::{Error, Result};

/// Minimum number of timed calls; single-call timing sits below clock
/// resolution, so measurement is always batch-amortized over at least this
/// many evaluations.
pub const MIN_TIMING_CALLS: usize = 100_000;

/// Per-step evaluation counts and measured per-call times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    /// Mean wall time of one vector-field evaluation, seconds.
    pub time_f: f64,
    /// Mean wall time of one network forward, seconds (0 without a net).
    pub time_net: f64,
    /// Vector-field evaluations per step.
    pub n_rk: u32,
    /// Network evaluations per step.
    pub n_net: u32,
}

impl CostModel {
    /// Cost proxy in seconds of work per simulated second:
    /// `(n_rk * time_f + n_net * time_net) / h`.
    pub fn delta_t(&self, h: f64) -> f64 {
        (self.n_rk as f64 * self.time_f + self.n_net as f64 * self.time_net) / h
    }
}

/// Times the vector field (and the network, when given) by batch
/// amortization at the supplied evaluation point, after a warm-up pass.
/// `n_calls` is clamped up to [`MIN_TIMING_CALLS`]. Per-step counts come
/// from the tableau: `n_rk` = stage count (for an embedded pair this is
/// already the shared-stage total), `n_net` = 1 iff a net is present.
///
/// Timing must run without competing threads; callers measure before
/// starting any parallel work.
pub fn measure_cost(
    sys: &OdeSystem,
    tab: &ButcherTableau,
    net: Option<&dyn CorrectionModel>,
    x: &StateVec,
    p: &ParamVec,
    n_calls: usize,
) -> Result<CostModel> {
    sys.check_dims(x, p)?;
    let n = n_calls.max(MIN_TIMING_CALLS);
    let warmup = (n / 10).max(1000);
    let xs = x.values();
    let ps = p.values();
    for _ in 0..warmup {
        black_box(sys.eval_raw(black_box(xs), black_box(ps)));
    }
    let start = Instant::now();
    for _ in 0..n {
        black_box(sys.eval_raw(black_box(xs), black_box(ps)));
    }
    let time_f = start.elapsed().as_secs_f64() / n as f64;
    let time_net = match net {
        None => 0.0,
        Some(net) => {
            for _ in 0..warmup {
                black_box(net.correction(black_box(xs), black_box(ps))?);
            }
            let start = Instant::now();
            for _ in 0..n {
                black_box(net.correction(black_box(xs), black_box(ps))?);
            }
            start.elapsed().as_secs_f64() / n as f64
        }
    };
    Ok(CostModel {
        time_f,
        time_net,
        n_rk: tab.stages() as u32,
        n_net: net.is_some() as u32,
    })
}

/// Global relative squared error of `candidate` against `reference` on a
/// shared grid, skipping the (identical) initial state:
/// `(1/(n N)) sum_{k=1..N} sum_i (|ref_ki - cand_ki| / (|ref_ki| + 1e-18))^2`.
///
/// Terms are accumulated with compensated (Neumaier) summation so the
/// result is independent of accumulation order to ~1e-12.
pub fn global_error(reference: &Trajectory, candidate: &Trajectory) -> Result<f64> {
    if reference.h() != candidate.h() {
        return Err(Error::GridMismatch(format!(
            "step sizes differ: {} vs {}",
            reference.h(),
            candidate.h()
        )));
    }
    if reference.len() != candidate.len() {
        return Err(Error::GridMismatch(format!(
            "trajectory lengths differ: {} vs {}",
            reference.len(),
            candidate.len()
        )));
    }
    let dim = reference.state(0).dim();
    if candidate.state(0).dim() != dim {
        return Err(Error::DimensionMismatch {
            context: "global error".into(),
            expected: dim,
            got: candidate.state(0).dim(),
        });
    }
    let n_steps = reference.len() - 1;
    if n_steps == 0 {
        return Err(Error::EmptyInput(
            "global error needs at least one step beyond x0".into(),
        ));
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for k in 1..reference.len() {
        let r = reference.state(k).values();
        let c = candidate.state(k).values();
        for (ri, ci) in r.iter().zip(c) {
            let term = ((ri - ci).abs() / (ri.abs() + 1e-18)).powi(2);
            // Neumaier update.
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
    }
    Ok((sum + comp) / (dim * n_steps) as f64)
}

/// How a solver entry in a sweep integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    /// The tableau as-is.
    Plain,
    /// Richardson extrapolation of the tableau (3 base steps per step).
    Richardson,
    /// Base step plus network correction.
    Enhanced,
    /// Safeguarded embedded pair plus network.
    Hybrid,
}

/// One solver column of a sweep.
pub struct SolverSpec<'a> {
    /// Row label in the output, e.g. "heun" or "enhanced_euler".
    pub label: String,
    pub kind: SolverKind,
    pub tab: ButcherTableau,
    /// Required for `Enhanced` and `Hybrid`.
    pub net: Option<&'a dyn CorrectionModel>,
    /// Required for `Hybrid`.
    pub hybrid_cfg: Option<HybridConfig>,
}

/// A full sweep description: each solver runs at every `h` for every
/// parameter vector, compared against a fine-grid reference.
pub struct SweepSpec<'a> {
    pub sys: &'a OdeSystem,
    pub x0: StateVec,
    pub t_end: f64,
    pub h_ref: f64,
    pub h_list: Vec<f64>,
    pub params: Vec<ParamVec>,
    pub solvers: Vec<SolverSpec<'a>>,
    /// Calls per timing measurement (clamped to [`MIN_TIMING_CALLS`]).
    pub timing_calls: usize,
}

/// One output row. Failed runs keep their identity columns and carry NaN
/// metrics; median rows aggregate the non-failed runs of one
/// (solver, h) group.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub solver: String,
    pub h: f64,
    pub param_index: usize,
    pub param_value: f64,
    pub delta_t: f64,
    pub delta_e: f64,
    /// Fraction of steps that took the fallback branch; hybrid only.
    pub fallback_rate: Option<f64>,
    /// Wall-clock integration time, seconds. Supplementary and
    /// nondeterministic; excluded from reproducibility comparisons.
    pub wall_clock_s: f64,
    pub failed: bool,
    pub is_median: bool,
}

fn validate_spec(spec: &SweepSpec) -> Result<()> {
    if spec.solvers.is_empty() || spec.h_list.is_empty() || spec.params.is_empty() {
        return Err(Error::EmptyInput(
            "sweep needs at least one solver, step size, and parameter".into(),
        ));
    }
    for h in &spec.h_list {
        grid_stride(*h, spec.h_ref)?;
        step_count(spec.t_end, *h)?;
    }
    for s in &spec.solvers {
        match s.kind {
            SolverKind::Enhanced if s.net.is_none() => {
                return Err(Error::InvalidValue(format!(
                    "solver '{}' is enhanced but has no net",
                    s.label
                )));
            }
            SolverKind::Hybrid => {
                if s.net.is_none() || s.hybrid_cfg.is_none() {
                    return Err(Error::InvalidValue(format!(
                        "solver '{}' is hybrid but lacks a net or config",
                        s.label
                    )));
                }
                if s.tab.order_embedded().is_none() {
                    return Err(Error::SchemeMismatch(format!(
                        "solver '{}' is hybrid but tableau '{}' has no embedded weights",
                        s.label,
                        s.tab.name()
                    )));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn first_component(p: &ParamVec) -> f64 {
    p.values().first().copied().unwrap_or(0.0)
}

/// Runs the sweep: rows ordered by (solver, h, parameter index) as given
/// in the spec, followed by one median row per (solver, h) group.
///
/// Cost measurement happens once per solver, single-threaded, before the
/// runs; the runs themselves are independent and execute in parallel.
/// A failing run (divergence at integration or reference stage) is
/// recorded as a failed row and the sweep continues.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<RunMetrics>> {
    validate_spec(spec)?;
    // Timing first, exclusively single-threaded.
    let typical_p = &spec.params[0];
    let mut costs = Vec::with_capacity(spec.solvers.len());
    for s in &spec.solvers {
        let mut cost = measure_cost(
            spec.sys,
            &s.tab,
            s.net,
            &spec.x0,
            typical_p,
            spec.timing_calls,
        )?;
        if s.kind == SolverKind::Richardson {
            // One Richardson step = two half steps + one full step.
            cost.n_rk *= 3;
        }
        costs.push(cost);
    }

    // One reference per parameter, subsampled to every coarse grid.
    let references: Vec<Result<Trajectory>> = spec
        .params
        .par_iter()
        .map(|p| reference_integrate(spec.sys, &spec.x0, p, spec.h_ref, spec.t_end))
        .collect();
    let sub_refs: Vec<Vec<Result<Trajectory>>> = references
        .iter()
        .map(|r| {
            spec.h_list
                .iter()
                .map(|&h| match r {
                    Ok(traj) => subsample(traj, h),
                    Err(e) => Err(Error::InvalidValue(format!("reference failed: {e}"))),
                })
                .collect()
        })
        .collect();

    let mut combos = Vec::new();
    for si in 0..spec.solvers.len() {
        for hi in 0..spec.h_list.len() {
            for pi in 0..spec.params.len() {
                combos.push((si, hi, pi));
            }
        }
    }
    let mut rows: Vec<((usize, usize, usize), RunMetrics)> = combos
        .into_par_iter()
        .map(|(si, hi, pi)| {
            let s = &spec.solvers[si];
            let h = spec.h_list[hi];
            let p = &spec.params[pi];
            let n_steps = step_count(spec.t_end, h).expect("validated");
            let started = Instant::now();
            let outcome: Result<(Trajectory, Option<f64>)> = (|| {
                let (traj, fallback) = match s.kind {
                    SolverKind::Plain => {
                        (integrate(spec.sys, &s.tab, &spec.x0, p, h, n_steps)?, None)
                    }
                    SolverKind::Richardson => (
                        richardson_integrate(spec.sys, &s.tab, &spec.x0, p, h, n_steps)?,
                        None,
                    ),
                    SolverKind::Enhanced => (
                        enhanced_integrate(
                            spec.sys,
                            &s.tab,
                            s.net.expect("validated"),
                            &spec.x0,
                            p,
                            h,
                            n_steps,
                        )?,
                        None,
                    ),
                    SolverKind::Hybrid => {
                        let (traj, records) = hybrid_integrate(
                            spec.sys,
                            &s.tab,
                            s.net.expect("validated"),
                            &spec.x0,
                            p,
                            h,
                            n_steps,
                            s.hybrid_cfg.as_ref().expect("validated"),
                        )?;
                        let fallbacks =
                            records.iter().filter(|r| !r.used_network).count() as f64;
                        (traj, Some(fallbacks / records.len().max(1) as f64))
                    }
                };
                Ok((traj, fallback))
            })();
            let wall_clock_s = started.elapsed().as_secs_f64();
            let delta_t = costs[si].delta_t(h);
            let metrics = match outcome.and_then(|(traj, fallback)| {
                let reference = sub_refs[pi][hi].as_ref().map_err(|e| e.clone_message())?;
                Ok((global_error(reference, &traj)?, fallback))
            }) {
                Ok((delta_e, fallback_rate)) => RunMetrics {
                    solver: s.label.clone(),
                    h,
                    param_index: pi,
                    param_value: first_component(p),
                    delta_t,
                    delta_e,
                    fallback_rate,
                    wall_clock_s,
                    failed: false,
                    is_median: false,
                },
                Err(_) => RunMetrics {
                    solver: s.label.clone(),
                    h,
                    param_index: pi,
                    param_value: first_component(p),
                    delta_t,
                    delta_e: f64::NAN,
                    fallback_rate: None,
                    wall_clock_s,
                    failed: true,
                    is_median: false,
                },
            };
            ((si, hi, pi), metrics)
        })
        .collect();
    rows.sort_by_key(|(key, _)| *key);
    let mut out: Vec<RunMetrics> = rows.into_iter().map(|(_, m)| m).collect();

    // Median rows, one per (solver, h), in the same order.
    let mut medians = Vec::new();
    for (si, s) in spec.solvers.iter().enumerate() {
        for (hi, &h) in spec.h_list.iter().enumerate() {
            let group: Vec<&RunMetrics> = out
                .iter()
                .skip((si * spec.h_list.len() + hi) * spec.params.len())
                .take(spec.params.len())
                .collect();
            let ok_e: Vec<f64> = group
                .iter()
                .filter(|m| !m.failed)
                .map(|m| m.delta_e)
                .collect();
            let fallbacks: Vec<f64> = group.iter().filter_map(|m| m.fallback_rate).collect();
            medians.push(RunMetrics {
                solver: s.label.clone(),
                h,
                param_index: usize::MAX,
                param_value: f64::NAN,
                delta_t: costs[si].delta_t(h),
                delta_e: median(&ok_e),
                fallback_rate: if fallbacks.is_empty() {
                    None
                } else {
                    Some(median(&fallbacks))
                },
                wall_clock_s: f64::NAN,
                failed: ok_e.is_empty(),
                is_median: true,
            });
        }
    }
    out.extend(medians);
    Ok(out)
}

impl Error {
    /// Clones an error by message for use behind shared references.
    fn clone_message(&self) -> Error {
        Error::InvalidValue(self.to_string())
    }
}

/// Uniformly samples `n` one-dimensional parameter vectors from
/// `[interval.0, interval.1]`, deterministically in the seed.
pub fn sample_parameters(interval: (f64, f64), n: usize, seed: u64) -> Result<Vec<ParamVec>> {
    let (values, _) = sample_mixed_parameters(interval, interval, 0.0, n, seed)?;
    Ok(values)
}

/// Draws `n` parameters with a fixed fraction from a second,
/// out-of-distribution interval: `round(n * ood_ratio)` draws (exact for
/// ratios with small denominators, e.g. exactly `n/4` at 0.25 when
/// `4 | n`) come from `ood_interval`, the rest from `in_interval`, in a
/// seeded shuffled order. Returns the draws and their membership flags
/// (`true` = out-of-distribution).
pub fn sample_mixed_parameters(
    in_interval: (f64, f64),
    ood_interval: (f64, f64),
    ood_ratio: f64,
    n: usize,
    seed: u64,
) -> Result<(Vec<ParamVec>, Vec<bool>)> {
    if n == 0 {
        return Err(Error::EmptyInput("cannot sample 0 parameters".into()));
    }
    if !(0.0..=1.0).contains(&ood_ratio) {
        return Err(Error::InvalidValue(format!(
            "ood_ratio must lie in [0, 1], got {ood_ratio}"
        )));
    }
    for (lo, hi) in [in_interval, ood_interval] {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidValue(format!(
                "invalid parameter interval [{lo}, {hi}]"
            )));
        }
    }
    let n_ood = (n as f64 * ood_ratio).round() as usize;
    let mut membership = vec![false; n];
    for flag in membership.iter_mut().take(n_ood) {
        *flag = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    membership.shuffle(&mut rng);
    let draw_in = Uniform::new_inclusive(in_interval.0, in_interval.1);
    let draw_ood = Uniform::new_inclusive(ood_interval.0, ood_interval.1);
    let values = membership
        .iter()
        .map(|&ood| {
            let v = if ood {
                draw_ood.sample(&mut rng)
            } else {
                draw_in.sample(&mut rng)
            };
            ParamVec::new(vec![v])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((values, membership))
}

/// A sweep whose parameters mix in-distribution and out-of-distribution
/// draws. `spec.params` is ignored and replaced by the sampled values;
/// returns the rows plus the per-parameter membership flags
/// (`true` = out-of-distribution), aligned with `param_index`.
#[allow(clippy::too_many_arguments)]
pub fn out_of_distribution_sweep(
    spec: &SweepSpec,
    in_interval: (f64, f64),
    ood_interval: (f64, f64),
    ood_ratio: f64,
    n_runs: usize,
    seed: u64,
) -> Result<(Vec<RunMetrics>, Vec<bool>)> {
    let (params, membership) =
        sample_mixed_parameters(in_interval, ood_interval, ood_ratio, n_runs, seed)?;
    let inner = SweepSpec {
        sys: spec.sys,
        x0: spec.x0.clone(),
        t_end: spec.t_end,
        h_ref: spec.h_ref,
        h_list: spec.h_list.clone(),
        params,
        solvers: spec
            .solvers
            .iter()
            .map(|s| SolverSpec {
                label: s.label.clone(),
                kind: s.kind,
                tab: s.tab.clone(),
                net: s.net,
                hybrid_cfg: s.hybrid_cfg.clone(),
            })
            .collect(),
        timing_calls: spec.timing_calls,
    };
    Ok((sweep(&inner)?, membership))
}

/// Median of the values; a member of the set for odd counts, the midpoint
/// of the two central members for even counts, NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("metrics must not be NaN here"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Linear-interpolation quantile of already-sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Boxplot-style statistics of one metric over a group of runs.
#[derive(Debug, Clone, Serialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Runs outside `[q1 - 1.5 IQR, q3 + 1.5 IQR]`.
    pub outliers: Vec<Outlier>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Outlier {
    pub param_seed_index: usize,
    pub value: f64,
}

/// Computes boxplot stats over (param_index, value) pairs.
pub fn box_stats(pairs: &[(usize, f64)]) -> BoxStats {
    let mut sorted: Vec<f64> = pairs.iter().map(|(_, v)| *v).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("box stats need finite values"));
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let outliers = pairs
        .iter()
        .filter(|(_, v)| *v < lo || *v > hi)
        .map(|&(param_seed_index, value)| Outlier {
            param_seed_index,
            value,
        })
        .collect();
    BoxStats {
        median: median(&sorted),
        q1,
        q3,
        outliers,
    }
}

/// Summary of one (solver, h) group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub solver: String,
    pub h: f64,
    pub n_runs: usize,
    pub n_failed: usize,
    pub delta_e: BoxStats,
    pub delta_t: BoxStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback_rate_median: Option<f64>,
}

/// Groups non-median rows by (solver, h) in first-appearance order and
/// computes boxplot statistics per group, excluding failed runs.
pub fn summarize(rows: &[RunMetrics]) -> Vec<GroupSummary> {
    let mut order: Vec<(String, f64)> = Vec::new();
    for m in rows.iter().filter(|m| !m.is_median) {
        if !order.iter().any(|(s, h)| *s == m.solver && *h == m.h) {
            order.push((m.solver.clone(), m.h));
        }
    }
    order
        .into_iter()
        .map(|(solver, h)| {
            let group: Vec<&RunMetrics> = rows
                .iter()
                .filter(|m| !m.is_median && m.solver == solver && m.h == h)
                .collect();
            let ok: Vec<&&RunMetrics> = group.iter().filter(|m| !m.failed).collect();
            let e_pairs: Vec<(usize, f64)> =
                ok.iter().map(|m| (m.param_index, m.delta_e)).collect();
            let t_pairs: Vec<(usize, f64)> =
                ok.iter().map(|m| (m.param_index, m.delta_t)).collect();
            let fallbacks: Vec<f64> = ok.iter().filter_map(|m| m.fallback_rate).collect();
            GroupSummary {
                solver,
                h,
                n_runs: group.len(),
                n_failed: group.len() - ok.len(),
                delta_e: box_stats(&e_pairs),
                delta_t: box_stats(&t_pairs),
                fallback_rate_median: if fallbacks.is_empty() {
                    None
                } else {
                    Some(median(&fallbacks))
                },
            }
        })
        .collect()
}

/// JSON rendering of a sweep summary.
pub fn summary_to_json(summaries: &[GroupSummary]) -> String {
    serde_json::to_string_pretty(summaries).expect("summary serialization cannot fail") + "\n"
}

/// CSV rendering with header
/// `solver,h,param_seed_index,param_value,delta_t,delta_e,fallback_rate,wall_clock_s`.
/// Median rows carry `median` in the index column and empty per-run
/// fields; failed runs show NaN metrics. `fallback_rate` is empty for
/// solvers without a fallback branch.
pub fn metrics_to_csv(rows: &[RunMetrics]) -> String {
    let mut out =
        String::from("solver,h,param_seed_index,param_value,delta_t,delta_e,fallback_rate,wall_clock_s\n");
    for m in rows {
        let index = if m.is_median {
            "median".to_string()
        } else {
            m.param_index.to_string()
        };
        let param_value = if m.is_median {
            String::new()
        } else {
            m.param_value.to_string()
        };
        let fallback = m.fallback_rate.map_or(String::new(), |f| f.to_string());
        let wall = if m.is_median {
            String::new()
        } else {
            m.wall_clock_s.to_string()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.solver, m.h, index, param_value, m.delta_t, m.delta_e, fallback, wall
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{make_linear_family, make_linear_system};
    use crate::rk::{tableau_euler, tableau_heun, tableau_heun_rk3_embedded};
    use approx::assert_relative_eq;

    fn traj(h: f64, values: &[&[f64]]) -> Trajectory {
        let states = values
            .iter()
            .map(|v| StateVec::new(v.to_vec()).unwrap())
            .collect();
        Trajectory::new(h, states, ParamVec::empty()).unwrap()
    }

    #[test]
    fn cost_proxy_formula() {
        let cost = CostModel {
            time_f: 2e-8,
            time_net: 1e-7,
            n_rk: 2,
            n_net: 0,
        };
        assert_relative_eq!(cost.delta_t(0.1), 4e-7, epsilon = 1e-20);
        // Halving h doubles the proxy.
        assert_relative_eq!(cost.delta_t(0.05), 2.0 * cost.delta_t(0.1), epsilon = 1e-20);
        let with_net = CostModel {
            n_rk: 3,
            n_net: 1,
            ..cost
        };
        assert_relative_eq!(with_net.delta_t(0.1), (3.0 * 2e-8 + 1e-7) / 0.1, epsilon = 1e-20);
    }

    #[test]
    fn global_error_single_term() {
        let reference = traj(0.5, &[&[1.0], &[2.0]]);
        let candidate = traj(0.5, &[&[1.0], &[2.2]]);
        assert_relative_eq!(
            global_error(&reference, &candidate).unwrap(),
            0.01,
            max_relative = 1e-12
        );
    }

    #[test]
    fn global_error_is_zero_for_identical_and_skips_x0() {
        let reference = traj(0.5, &[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(global_error(&reference, &reference).unwrap(), 0.0);
        // Differences at k = 0 are invisible.
        let shifted = traj(0.5, &[&[9.0, 9.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(global_error(&reference, &shifted).unwrap(), 0.0);
    }

    #[test]
    fn global_error_blows_up_at_zero_reference() {
        // Documents the metric's sensitivity where the reference crosses 0.
        let reference = traj(0.5, &[&[1.0], &[0.0]]);
        let candidate = traj(0.5, &[&[1.0], &[1e-9]]);
        assert_relative_eq!(
            global_error(&reference, &candidate).unwrap(),
            1e18,
            max_relative = 1e-9
        );
    }

    #[test]
    fn global_error_rejects_mismatched_grids() {
        let a = traj(0.5, &[&[1.0], &[2.0]]);
        let b = traj(0.25, &[&[1.0], &[2.0]]);
        assert!(matches!(global_error(&a, &b), Err(Error::GridMismatch(_))));
        let c = traj(0.5, &[&[1.0], &[2.0], &[3.0]]);
        assert!(matches!(global_error(&a, &c), Err(Error::GridMismatch(_))));
        let d = traj(0.5, &[&[1.0, 1.0], &[2.0, 2.0]]);
        assert!(global_error(&a, &d).is_err());
    }

    #[test]
    fn global_error_is_permutation_invariant() {
        // Accumulate the same terms in several orders independently and
        // compare against the compensated result.
        let n_steps = 60;
        let mut rvals = Vec::with_capacity(n_steps + 1);
        let mut cvals = Vec::with_capacity(n_steps + 1);
        for k in 0..=n_steps {
            let t = k as f64 * 0.1;
            rvals.push(vec![
                (1.3 * t).sin() + 2.0,
                1e6 * (0.3 * t).cos(),
                1e-6 * (t + 0.1),
            ]);
            cvals.push(vec![
                (1.3 * t).sin() + 2.0 + 1e-4 * (7.0 * t).sin(),
                1e6 * (0.3 * t).cos() * (1.0 + 1e-9 * t),
                1e-6 * (t + 0.1) + 1e-13,
            ]);
        }
        let to_traj = |vals: Vec<Vec<f64>>| {
            Trajectory::new(
                0.1,
                vals.into_iter().map(|v| StateVec::new(v).unwrap()).collect(),
                ParamVec::empty(),
            )
            .unwrap()
        };
        let reference = to_traj(rvals.clone());
        let candidate = to_traj(cvals.clone());
        let got = global_error(&reference, &candidate).unwrap();
        let mut terms = Vec::new();
        for k in 1..=n_steps {
            for i in 0..3 {
                let (r, c) = (rvals[k][i], cvals[k][i]);
                terms.push(((r - c).abs() / (r.abs() + 1e-18)).powi(2));
            }
        }
        let n = terms.len() as f64;
        let forward: f64 = terms.iter().sum::<f64>() / n;
        terms.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let descending: f64 = terms.iter().sum::<f64>() / n;
        terms.reverse();
        let ascending: f64 = terms.iter().sum::<f64>() / n;
        for independent in [forward, descending, ascending] {
            assert_relative_eq!(got, independent, max_relative = 1e-12);
        }
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        let odd = [0.5, 0.1, 0.9, 0.3, 0.7];
        let m = median(&odd);
        assert!(odd.contains(&m), "odd-count median must be a member");
        assert_eq!(median(&[1.0, 2.0]), 1.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn box_stats_flags_outliers_beyond_iqr_fence() {
        let pairs: Vec<(usize, f64)> =
            [1.0, 2.0, 3.0, 4.0, 100.0].iter().copied().enumerate().collect();
        let stats = box_stats(&pairs);
        assert_eq!(stats.median, 3.0);
        assert_eq!(stats.q1, 2.0);
        assert_eq!(stats.q3, 4.0);
        assert_eq!(stats.outliers.len(), 1);
        assert_eq!(stats.outliers[0].param_seed_index, 4);
        assert_eq!(stats.outliers[0].value, 100.0);
    }

    #[test]
    fn sampling_is_seeded_and_honors_the_ratio() {
        let (a, ma) = sample_mixed_parameters((0.5, 2.0), (2.0, 4.0), 0.25, 8, 42).unwrap();
        let (b, mb) = sample_mixed_parameters((0.5, 2.0), (2.0, 4.0), 0.25, 8, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(ma.iter().filter(|&&o| o).count(), 2, "exactly n/4 draws are OOD");
        for (p, &ood) in a.iter().zip(&ma) {
            let v = p.values()[0];
            if ood {
                assert!((2.0..=4.0).contains(&v));
            } else {
                assert!((0.5..=2.0).contains(&v));
            }
        }
        let (c, _) = sample_mixed_parameters((0.5, 2.0), (2.0, 4.0), 0.25, 8, 43).unwrap();
        assert_ne!(a, c, "different seeds should give different draws");
    }

    fn small_sweep_spec<'a>(sys: &'a OdeSystem, solvers: Vec<SolverSpec<'a>>) -> SweepSpec<'a> {
        SweepSpec {
            sys,
            x0: StateVec::new(vec![1.0]).unwrap(),
            t_end: 2.0,
            h_ref: 0.005,
            h_list: vec![0.1],
            params: [0.3, 0.5, 0.7]
                .iter()
                .map(|&v| ParamVec::new(vec![v]).unwrap())
                .collect(),
            solvers,
            timing_calls: MIN_TIMING_CALLS,
        }
    }

    #[test]
    fn sweep_emits_runs_plus_median_rows() {
        let sys = make_linear_family();
        let spec = small_sweep_spec(
            &sys,
            vec![SolverSpec {
                label: "heun".into(),
                kind: SolverKind::Plain,
                tab: tableau_heun(),
                net: None,
                hybrid_cfg: None,
            }],
        );
        let rows = sweep(&spec).unwrap();
        assert_eq!(rows.len(), 4, "3 runs + 1 median row");
        let median_row = rows.last().unwrap();
        assert!(median_row.is_median);
        let es: Vec<f64> = rows[..3].iter().map(|m| m.delta_e).collect();
        assert!(es.contains(&median_row.delta_e), "odd-count median is a member");
        assert!(rows[..3].iter().all(|m| !m.failed && m.delta_e > 0.0));
        assert!(rows[..3].iter().all(|m| m.fallback_rate.is_none()));
        // Rows sorted by parameter index.
        assert_eq!(
            rows[..3].iter().map(|m| m.param_index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        // delta_t constant across the group and consistent with the model.
        assert!(rows[..3].iter().all(|m| m.delta_t == rows[0].delta_t));
        assert!(rows[0].delta_t > 0.0);
    }

    #[test]
    fn failed_runs_are_recorded_and_sweep_continues() {
        // lambda = -30 with h = 0.1 puts Euler far outside its stability
        // region (growth factor -2 per step) while the reference solution
        // decays; the run must fail by divergence and leave a NaN row.
        let sys = make_linear_family();
        let mut spec = small_sweep_spec(
            &sys,
            vec![SolverSpec {
                label: "euler".into(),
                kind: SolverKind::Plain,
                tab: tableau_euler(),
                net: None,
                hybrid_cfg: None,
            }],
        );
        spec.t_end = 20.0;
        spec.params = [0.1, -30.0]
            .iter()
            .map(|&v| ParamVec::new(vec![v]).unwrap())
            .collect();
        let rows = sweep(&spec).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(!rows[0].failed);
        assert!(rows[1].failed && rows[1].delta_e.is_nan());
        let median_row = &rows[2];
        assert!(median_row.is_median);
        // Median over the surviving run only.
        assert_eq!(median_row.delta_e, rows[0].delta_e);
    }

    #[test]
    fn sweep_validates_solver_specs() {
        let sys = make_linear_family();
        let spec = small_sweep_spec(
            &sys,
            vec![SolverSpec {
                label: "broken".into(),
                kind: SolverKind::Enhanced,
                tab: tableau_heun(),
                net: None,
                hybrid_cfg: None,
            }],
        );
        assert!(sweep(&spec).is_err());
        let zero = |s: &[f64], _: &[f64]| vec![0.0; s.len()];
        let spec = small_sweep_spec(
            &sys,
            vec![SolverSpec {
                label: "broken".into(),
                kind: SolverKind::Hybrid,
                tab: tableau_heun(),
                net: Some(&zero),
                hybrid_cfg: Some(
                    HybridConfig::new(
                        vec![1e-6],
                        vec![1e-3],
                        1.2,
                        1.0,
                        crate::enhanced::NormKind::Max,
                    )
                    .unwrap(),
                ),
            }],
        );
        // Tableau without embedded weights cannot run the hybrid.
        assert!(matches!(sweep(&spec), Err(Error::SchemeMismatch(_))));
    }

    #[test]
    fn hybrid_rows_carry_fallback_rates() {
        let sys = make_linear_family();
        let zero = |s: &[f64], _: &[f64]| vec![0.0; s.len()];
        let spec = small_sweep_spec(
            &sys,
            vec![SolverSpec {
                label: "hybrid".into(),
                kind: SolverKind::Hybrid,
                tab: tableau_heun_rk3_embedded(),
                net: Some(&zero),
                hybrid_cfg: Some(
                    HybridConfig::new(
                        vec![1e-6],
                        vec![1e-3],
                        1.2,
                        1e18,
                        crate::enhanced::NormKind::Max,
                    )
                    .unwrap(),
                ),
            }],
        );
        let rows = sweep(&spec).unwrap();
        // Open threshold: every step accepted, fallback rate 0.
        assert!(rows[..3].iter().all(|m| m.fallback_rate == Some(0.0)));
        assert_eq!(rows[3].fallback_rate, Some(0.0));
    }

    #[test]
    fn richardson_triples_the_stage_count() {
        let sys = make_linear_system(1.0);
        let spec = SweepSpec {
            sys: &sys,
            x0: StateVec::new(vec![1.0]).unwrap(),
            t_end: 1.0,
            h_ref: 0.005,
            h_list: vec![0.1],
            params: vec![ParamVec::empty()],
            solvers: vec![
                SolverSpec {
                    label: "euler".into(),
                    kind: SolverKind::Plain,
                    tab: tableau_euler(),
                    net: None,
                    hybrid_cfg: None,
                },
                SolverSpec {
                    label: "richardson_euler".into(),
                    kind: SolverKind::Richardson,
                    tab: tableau_euler(),
                    net: None,
                    hybrid_cfg: None,
                },
            ],
            timing_calls: MIN_TIMING_CALLS,
        };
        let rows = sweep(&spec).unwrap();
        let plain = rows.iter().find(|m| m.solver == "euler" && !m.is_median).unwrap();
        let rich = rows
            .iter()
            .find(|m| m.solver == "richardson_euler" && !m.is_median)
            .unwrap();
        // Same f, same h: the only difference in delta_t is n_rk 1 vs 3,
        // up to timing noise between the two measurement passes.
        let ratio = rich.delta_t / plain.delta_t;
        assert!(
            (1.5..=6.0).contains(&ratio),
            "expected ~3x stage count, got ratio {ratio}"
        );
        // And extrapolation actually improves accuracy.
        assert!(rich.delta_e < plain.delta_e);
    }

    #[test]
    fn csv_shape_and_median_row_rendering() {
        let rows = vec![
            RunMetrics {
                solver: "heun".into(),
                h: 0.1,
                param_index: 0,
                param_value: 0.5,
                delta_t: 4e-7,
                delta_e: 1e-9,
                fallback_rate: None,
                wall_clock_s: 0.25,
                failed: false,
                is_median: false,
            },
            RunMetrics {
                solver: "heun".into(),
                h: 0.1,
                param_index: usize::MAX,
                param_value: f64::NAN,
                delta_t: 4e-7,
                delta_e: 1e-9,
                fallback_rate: Some(0.125),
                wall_clock_s: f64::NAN,
                failed: false,
                is_median: true,
            },
        ];
        let csv = metrics_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "solver,h,param_seed_index,param_value,delta_t,delta_e,fallback_rate,wall_clock_s"
        );
        assert_eq!(lines.next().unwrap(), "heun,0.1,0,0.5,0.0000004,0.000000001,,0.25");
        assert_eq!(lines.next().unwrap(), "heun,0.1,median,,0.0000004,0.000000001,0.125,");
    }

    #[test]
    fn summary_groups_and_serializes() {
        let sys = make_linear_family();
        let spec = small_sweep_spec(
            &sys,
            vec![SolverSpec {
                label: "heun".into(),
                kind: SolverKind::Plain,
                tab: tableau_heun(),
                net: None,
                hybrid_cfg: None,
            }],
        );
        let rows = sweep(&spec).unwrap();
        let summaries = summarize(&rows);
        assert_eq!(summaries.len(), 1);
        let s = &summaries[0];
        assert_eq!(s.solver, "heun");
        assert_eq!(s.n_runs, 3);
        assert_eq!(s.n_failed, 0);
        assert!(s.delta_e.median > 0.0);
        assert!(s.delta_e.q1 <= s.delta_e.median && s.delta_e.median <= s.delta_e.q3);
        let json = summary_to_json(&summaries);
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed[0]["solver"], "heun");
        assert!(parsed[0]["delta_e"]["median"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn measure_cost_structure() {
        let sys = make_linear_system(1.0);
        let x = StateVec::new(vec![1.0]).unwrap();
        let p = ParamVec::empty();
        let plain = measure_cost(&sys, &tableau_heun(), None, &x, &p, 10).unwrap();
        assert_eq!(plain.n_rk, 2);
        assert_eq!(plain.n_net, 0);
        assert!(plain.time_f > 0.0 && plain.time_f.is_finite());
        assert_eq!(plain.time_net, 0.0);
        let net = |s: &[f64], _: &[f64]| vec![0.5; s.len()];
        let hybrid = measure_cost(&sys, &tableau_heun_rk3_embedded(), Some(&net), &x, &p, 10)
            .unwrap();
        assert_eq!(hybrid.n_rk, 3);
        assert_eq!(hybrid.n_net, 1);
        assert!(hybrid.time_net > 0.0);
    }
}
