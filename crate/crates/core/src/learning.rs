//! Local-error datasets and network training.
//!
//! A training sample pairs a reference state on the coarse grid with the
//! scaled one-step error of the scheme being corrected: the target is
//! `(reference((k+1)h) - scheme_step(reference(kh))) / h^(p+1)`, the
//! quantity a correction network must predict so that adding
//! `h^(p+1) * net(x, p)` to a step of the order-`p` scheme cancels its
//! leading local error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::{AdamW, AdamWConfig, AffineScale, LrPlateau, Mlp, PlateauConfig};
use crate::ode::{OdeSystem, ParamVec, StateVec};
use crate::rk::{grid_stride, integrate, rk_step, step_count, tableau_dopri5, ButcherTableau};
use crate::{Error, Result};

/// One supervised sample: coarse-grid index, state, parameters, and the
/// local error of the base scheme scaled by `1/h^(p+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub k: usize,
    pub state: StateVec,
    pub params: ParamVec,
    pub target: StateVec,
}

/// A set of training samples plus the provenance needed to reuse them:
/// step size, base scheme order, system name, and the parameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<TrainingSample>,
    h: f64,
    base_order: u32,
    system: String,
    grid: Vec<ParamVec>,
}

impl Dataset {
    pub fn new(
        samples: Vec<TrainingSample>,
        h: f64,
        base_order: u32,
        system: impl Into<String>,
        grid: Vec<ParamVec>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("dataset has no samples".into()));
        }
        let state_dim = samples[0].state.dim();
        let param_dim = samples[0].params.dim();
        for (i, s) in samples.iter().enumerate() {
            if s.state.dim() != state_dim
                || s.params.dim() != param_dim
                || s.target.dim() != state_dim
            {
                return Err(Error::DimensionMismatch {
                    context: format!("dataset sample {i}"),
                    expected: state_dim,
                    got: s.target.dim(),
                });
            }
        }
        Ok(Self {
            samples,
            h,
            base_order,
            system: system.into(),
            grid,
        })
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn base_order(&self) -> u32 {
        self.base_order
    }

    pub fn system(&self) -> &str {
        &self.system
    }

    pub fn grid(&self) -> &[ParamVec] {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.samples[0].state.dim()
    }

    pub fn param_dim(&self) -> usize {
        self.samples[0].params.dim()
    }

    /// Network input width: state and parameters concatenated.
    pub fn input_dim(&self) -> usize {
        self.state_dim() + self.param_dim()
    }
}

/// Concatenates state and parameters into one network input row.
pub fn sample_input(state: &StateVec, params: &ParamVec) -> Vec<f64> {
    let mut row = Vec::with_capacity(state.dim() + params.dim());
    row.extend_from_slice(state.values());
    row.extend_from_slice(params.values());
    row
}

/// Builds a dataset of scaled one-step errors of `tab` against a
/// Dormand-Prince reference on the fine grid `h_ref`.
///
/// For every grid parameter the reference trajectory is integrated over
/// `[0, t_end]`; sample `k` takes the reference state at `k h` and targets
/// `(reference((k+1)h) - rk_step(reference(kh))) / h^(p+1)`, where `p` is
/// the tableau order. Samples are ordered by (parameter index, k).
pub fn build_dataset(
    sys: &OdeSystem,
    tab: &ButcherTableau,
    grid: &[ParamVec],
    x0: &StateVec,
    h: f64,
    t_end: f64,
    h_ref: f64,
) -> Result<Dataset> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("parameter grid is empty".into()));
    }
    let stride = grid_stride(h, h_ref)?;
    let n_k = step_count(t_end, h)?;
    let n_ref = n_k * stride;
    let scale = h.powi(tab.order() as i32 + 1);
    let reference_tab = tableau_dopri5();
    // Parameters are independent; evaluate them in parallel but keep the
    // (parameter index, k) ordering of the output.
    let per_param: Vec<Result<Vec<TrainingSample>>> = grid
        .par_iter()
        .map(|p| {
            let reference = integrate(sys, &reference_tab, x0, p, h_ref, n_ref)?;
            let mut samples = Vec::with_capacity(n_k);
            for k in 0..n_k {
                let state = reference.state(k * stride).clone();
                let step = rk_step(sys, tab, &state, p, h)?;
                let target: Vec<f64> = reference
                    .state((k + 1) * stride)
                    .values()
                    .iter()
                    .zip(step.next.values())
                    .map(|(r, s)| (r - s) / scale)
                    .collect();
                samples.push(TrainingSample {
                    k,
                    state,
                    params: p.clone(),
                    target: StateVec::new(target)?,
                });
            }
            Ok(samples)
        })
        .collect();
    let mut samples = Vec::with_capacity(grid.len() * n_k);
    for chunk in per_param {
        samples.extend(chunk?);
    }
    Dataset::new(samples, h, tab.order(), sys.name(), grid.to_vec())
}

/// Splits a parameter grid into training and held-out validation values.
///
/// The choice is a seeded shuffle; held-out values never appear in the
/// training half. Requires at least 3 distinct values and leaves at least
/// one for training.
pub fn split_by_parameter(
    grid: &[ParamVec],
    n_holdout: usize,
    seed: u64,
) -> Result<(Vec<ParamVec>, Vec<ParamVec>)> {
    if grid.len() < 3 {
        return Err(Error::InvalidValue(format!(
            "parameter split needs at least 3 values, got {}",
            grid.len()
        )));
    }
    if n_holdout == 0 || n_holdout >= grid.len() {
        return Err(Error::InvalidValue(format!(
            "cannot hold out {n_holdout} of {} parameter values",
            grid.len()
        )));
    }
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            if grid[i] == grid[j] {
                return Err(Error::InvalidValue(format!(
                    "duplicate parameter value at indices {i} and {j}"
                )));
            }
        }
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut holdout: Vec<usize> = order[grid.len() - n_holdout..].to_vec();
    let mut keep: Vec<usize> = order[..grid.len() - n_holdout].to_vec();
    holdout.sort_unstable();
    keep.sort_unstable();
    Ok((
        keep.into_iter().map(|i| grid[i].clone()).collect(),
        holdout.into_iter().map(|i| grid[i].clone()).collect(),
    ))
}

/// CSV rendering with header `k,p_1..p_m,x_1..x_n,target_1..target_n`.
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let m = ds.param_dim();
    let n = ds.state_dim();
    let mut out = String::from("k");
    for i in 1..=m {
        out.push_str(&format!(",p_{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",x_{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",target_{i}"));
    }
    out.push('\n');
    for s in ds.samples() {
        out.push_str(&format!("{}", s.k));
        for v in s.params.values() {
            out.push_str(&format!(",{v}"));
        }
        for v in s.state.values() {
            out.push_str(&format!(",{v}"));
        }
        for v in s.target.values() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Sidecar metadata stored next to a dataset CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    h: f64,
    base_order: u32,
    system: String,
    grid: Vec<Vec<f64>>,
}

/// JSON sidecar recording `h`, the base order, the system name, and the
/// parameter grid.
pub fn dataset_sidecar_json(ds: &Dataset) -> String {
    let meta = DatasetMeta {
        h: ds.h(),
        base_order: ds.base_order(),
        system: ds.system().to_string(),
        grid: ds.grid().iter().map(|p| p.values().to_vec()).collect(),
    };
    serde_json::to_string_pretty(&meta).expect("sidecar serialization cannot fail") + "\n"
}

/// Writes `<stem>.csv` and `<stem>.json` for a dataset.
pub fn save_dataset(ds: &Dataset, csv_path: &std::path::Path, json_path: &std::path::Path) -> Result<()> {
    std::fs::write(csv_path, dataset_to_csv(ds))?;
    std::fs::write(json_path, dataset_sidecar_json(ds))?;
    Ok(())
}

/// Parses a dataset from its CSV text and JSON sidecar text.
///
/// Round-trips through [`dataset_to_csv`] / [`dataset_sidecar_json`] are
/// lossless: `f64` values are printed with shortest round-trip precision
/// and parsed exactly.
pub fn dataset_from_strings(csv: &str, sidecar: &str) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(sidecar)?;
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("dataset CSV is empty".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"k") {
        return Err(Error::Format(format!(
            "dataset CSV header must start with 'k', got '{header}'"
        )));
    }
    let m = cols.iter().filter(|c| c.starts_with("p_")).count();
    let n = cols.iter().filter(|c| c.starts_with("x_")).count();
    let nt = cols.iter().filter(|c| c.starts_with("target_")).count();
    if n == 0 || nt != n || cols.len() != 1 + m + 2 * n {
        return Err(Error::Format(format!("unrecognized dataset header '{header}'")));
    }
    let mut samples = Vec::new();
    for (row_idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!(
                "dataset row {row_idx} has {} fields, expected {}",
                fields.len(),
                cols.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("dataset row {row_idx}: {e}")))
        };
        let k: usize = fields[0]
            .parse()
            .map_err(|e| Error::Format(format!("dataset row {row_idx}: {e}")))?;
        let params: Vec<f64> = fields[1..1 + m].iter().map(|s| parse(s)).collect::<Result<_>>()?;
        let state: Vec<f64> = fields[1 + m..1 + m + n]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<_>>()?;
        let target: Vec<f64> = fields[1 + m + n..]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<_>>()?;
        samples.push(TrainingSample {
            k,
            state: StateVec::new(state)?,
            params: ParamVec::new(params)?,
            target: StateVec::new(target)?,
        });
    }
    let grid = meta
        .grid
        .into_iter()
        .map(ParamVec::new)
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, meta.h, meta.base_order, meta.system, grid)
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(csv_path: &std::path::Path, json_path: &std::path::Path) -> Result<Dataset> {
    let csv = std::fs::read_to_string(csv_path)?;
    let sidecar = std::fs::read_to_string(json_path)?;
    dataset_from_strings(&csv, &sidecar)
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub scheduler: PlateauConfig,
    pub seed: u64,
}

/// Per-epoch loss record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub net: Mlp,
    pub history: Vec<EpochStats>,
}

/// Mean squared error of the network over a dataset, in normalized units:
/// the per-sample loss is the component mean of `(y_norm - t_norm)^2` and
/// the result is its mean over samples. This is exactly the quantity the
/// training loop records per epoch.
pub fn mse_loss(net: &Mlp, set: &Dataset) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput("loss over empty dataset".into()));
    }
    let n_out = net.output_dim();
    let mut acc = 0.0;
    for s in set.samples() {
        let y = net.forward_normalized(&sample_input(&s.state, &s.params))?;
        let t = net.output_scale().normalize(s.target.values());
        let mut sample_acc = 0.0;
        for (yi, ti) in y.iter().zip(&t) {
            let d = yi - ti;
            sample_acc += d * d;
        }
        acc += sample_acc / n_out as f64;
    }
    Ok(acc / set.len() as f64)
}

/// Trains the network on scaled local-error targets.
///
/// Scaling layers are fitted on the training set only (inputs and targets
/// to their componentwise min/max) and frozen before the first step; the
/// loss operates on the scaled data. Batches follow a seeded shuffle, the
/// optimizer is AdamW, and the plateau scheduler watches the validation
/// loss. The same seed and configuration always produce bitwise-identical
/// weights and history.
pub fn train(
    mut net: Mlp,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidValue("epochs must be >= 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidValue("batch_size must be >= 1".into()));
    }
    for (label, set) in [("training", train_set), ("validation", val_set)] {
        if set.is_empty() {
            return Err(Error::EmptyInput(format!("{label} set is empty")));
        }
        if set.input_dim() != net.input_dim() {
            return Err(Error::DimensionMismatch {
                context: format!("{label} set input"),
                expected: net.input_dim(),
                got: set.input_dim(),
            });
        }
        if set.state_dim() != net.output_dim() {
            return Err(Error::DimensionMismatch {
                context: format!("{label} set target"),
                expected: net.output_dim(),
                got: set.state_dim(),
            });
        }
    }

    // Fit both scaling layers on the training set, then freeze them.
    let inputs: Vec<Vec<f64>> = train_set
        .samples()
        .iter()
        .map(|s| sample_input(&s.state, &s.params))
        .collect();
    let input_scale = AffineScale::fit(inputs.iter().map(|r| r.as_slice()), net.input_dim())?;
    let output_scale = AffineScale::fit(
        train_set.samples().iter().map(|s| s.target.values()),
        net.output_dim(),
    )?;
    net.set_scaling(input_scale, output_scale)?;

    let targets_norm: Vec<Vec<f64>> = train_set
        .samples()
        .iter()
        .map(|s| net.output_scale().normalize(s.target.values()))
        .collect();

    let shapes: Vec<usize> = net
        .weights
        .iter()
        .zip(&net.biases)
        .flat_map(|(w, b)| [w.len(), b.len()])
        .collect();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &shapes)?;
    let mut sched = LrPlateau::new(cfg.scheduler.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_out = net.output_dim();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = crate::nn::MlpGrads::zeros_like(&net);
            let mut batch_loss = 0.0;
            for &i in batch {
                let trace = net.trace(&inputs[i])?;
                let y = trace.acts.last().expect("depth >= 1");
                let mut d_norm = Vec::with_capacity(n_out);
                let mut sample_acc = 0.0;
                for (yi, ti) in y.iter().zip(&targets_norm[i]) {
                    let diff = yi - ti;
                    sample_acc += diff * diff;
                    d_norm.push(2.0 * diff / n_out as f64);
                }
                batch_loss += sample_acc / n_out as f64;
                net.backward_normalized(&trace, &d_norm, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            grads.scale(1.0 / batch.len() as f64);
            let mut tensors: Vec<&mut [f64]> = Vec::with_capacity(shapes.len());
            for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
                tensors.push(w.as_mut_slice());
                tensors.push(b.as_mut_slice());
            }
            let grad_refs: Vec<&[f64]> = grads
                .weights
                .iter()
                .zip(&grads.biases)
                .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
                .collect();
            opt.step(&mut tensors, &grad_refs)?;
        }
        let train_loss = mse_loss(&net, train_set)?;
        let val_loss = mse_loss(&net, val_set)?;
        let n_batches = order.chunks(cfg.batch_size).count();
        if !train_loss.is_finite() || !val_loss.is_finite() {
            // Blow-up surfaced by the full pass right after the last batch.
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: n_batches.saturating_sub(1),
            });
        }
        let lr = sched.update(val_loss, opt.lr());
        opt.set_lr(lr);
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
    }
    Ok(TrainResult { net, history })
}

/// CSV rendering of a loss history: `epoch,train_loss,val_loss,lr`.
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for e in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_loss, e.lr
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{make_linear_family, make_linear_system};
    use crate::rk::{tableau_euler, tableau_heun};
    use approx::assert_relative_eq;

    fn linear_fixed_grid() -> Vec<ParamVec> {
        vec![ParamVec::empty()]
    }

    #[test]
    fn euler_targets_hand_values() {
        let sys = make_linear_system(1.0);
        let x0 = StateVec::new(vec![1.0]).unwrap();
        let ds = build_dataset(
            &sys,
            &tableau_euler(),
            &linear_fixed_grid(),
            &x0,
            0.1,
            0.3,
            1e-3,
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.base_order(), 1);
        // Frozen oracle: (exp(0.1) - 1.1) / 0.1^2 = 0.5170918075647623; the
        // reference trajectory deviates from the exact flow below 1e-12.
        assert_relative_eq!(ds.samples()[0].target[0], 0.517_091_807_564_762_3, epsilon = 1e-9);
        assert_eq!(ds.samples()[0].k, 0);
        assert_relative_eq!(ds.samples()[1].state[0], 1.105_170_918_075_647_7, epsilon = 1e-9);

        let ds_half = build_dataset(
            &sys,
            &tableau_euler(),
            &linear_fixed_grid(),
            &x0,
            0.05,
            0.3,
            1e-3,
        )
        .unwrap();
        // Frozen oracle: (exp(0.05) - 1.05) / 0.05^2 = 0.5084385504096288.
        assert_relative_eq!(ds_half.samples()[0].target[0], 0.508_438_550_409_628_8, epsilon = 1e-9);
    }

    #[test]
    fn heun_targets_hand_values() {
        let sys = make_linear_system(1.0);
        let x0 = StateVec::new(vec![1.0]).unwrap();
        let ds = build_dataset(
            &sys,
            &tableau_heun(),
            &linear_fixed_grid(),
            &x0,
            0.1,
            0.2,
            1e-3,
        )
        .unwrap();
        // Frozen oracle: (exp(0.1) - 1.105) / 0.1^3 = 0.1709180756477302.
        assert_relative_eq!(ds.samples()[0].target[0], 0.170_918_075_647_730_2, epsilon = 1e-9);
        assert_eq!(ds.base_order(), 2);
    }

    #[test]
    fn targets_stay_near_their_small_step_limit() {
        // The scaled targets converge to the leading error coefficient as
        // h shrinks; at finite h they stay within a factor 2 of that limit.
        let sys = make_linear_system(1.0);
        let x0 = StateVec::new(vec![1.0]).unwrap();
        let grid = linear_fixed_grid();
        let coarse =
            build_dataset(&sys, &tableau_euler(), &grid, &x0, 0.1, 1.0, 1e-3).unwrap();
        let fine =
            build_dataset(&sys, &tableau_euler(), &grid, &x0, 0.0125, 1.0, 1.25e-4).unwrap();
        let max_abs = |ds: &Dataset| {
            ds.samples()
                .iter()
                .flat_map(|s| s.target.values().iter().map(|v| v.abs()))
                .fold(0.0f64, f64::max)
        };
        assert!(max_abs(&coarse) <= 2.0 * max_abs(&fine));
    }

    #[test]
    fn sample_count_is_grid_times_steps() {
        let sys = make_linear_family();
        let x0 = StateVec::new(vec![0.5]).unwrap();
        let grid: Vec<ParamVec> = [0.3, 0.4, 0.5]
            .iter()
            .map(|&l| ParamVec::new(vec![l]).unwrap())
            .collect();
        let ds = build_dataset(&sys, &tableau_heun(), &grid, &x0, 0.1, 2.0, 1e-3).unwrap();
        assert_eq!(ds.len(), 3 * 20);
        // Ordered by (parameter index, k).
        assert_eq!(ds.samples()[0].params.values(), &[0.3]);
        assert_eq!(ds.samples()[19].k, 19);
        assert_eq!(ds.samples()[20].params.values(), &[0.4]);
        assert_eq!(ds.samples()[20].k, 0);
    }

    #[test]
    fn grid_errors_are_reported() {
        let sys = make_linear_system(1.0);
        let x0 = StateVec::new(vec![1.0]).unwrap();
        assert!(matches!(
            build_dataset(&sys, &tableau_euler(), &[], &x0, 0.1, 1.0, 1e-3),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            build_dataset(
                &sys,
                &tableau_euler(),
                &linear_fixed_grid(),
                &x0,
                0.1,
                1.0,
                0.03
            ),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let sys = make_linear_family();
        let x0 = StateVec::new(vec![0.5]).unwrap();
        let grid: Vec<ParamVec> = [0.31, 0.57]
            .iter()
            .map(|&l| ParamVec::new(vec![l]).unwrap())
            .collect();
        let ds = build_dataset(&sys, &tableau_heun(), &grid, &x0, 0.25, 1.0, 0.005).unwrap();
        let csv = dataset_to_csv(&ds);
        assert!(csv.starts_with("k,p_1,x_1,target_1\n"));
        let sidecar = dataset_sidecar_json(&ds);
        let back = dataset_from_strings(&csv, &sidecar).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn split_holds_out_disjoint_values() {
        let grid: Vec<ParamVec> = (0..8)
            .map(|i| ParamVec::new(vec![0.5 + 0.1 * i as f64]).unwrap())
            .collect();
        let (train, val) = split_by_parameter(&grid, 2, 99).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(val.len(), 2);
        for v in &val {
            assert!(!train.contains(v), "held-out value leaked into training");
        }
        // Deterministic under the same seed.
        let (train2, val2) = split_by_parameter(&grid, 2, 99).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
    }

    #[test]
    fn split_rejects_degenerate_grids() {
        let small: Vec<ParamVec> = (0..2)
            .map(|i| ParamVec::new(vec![i as f64]).unwrap())
            .collect();
        assert!(split_by_parameter(&small, 1, 0).is_err());
        let dup: Vec<ParamVec> = [1.0, 2.0, 1.0]
            .iter()
            .map(|&v| ParamVec::new(vec![v]).unwrap())
            .collect();
        assert!(split_by_parameter(&dup, 1, 0).is_err());
        let grid: Vec<ParamVec> = (0..4)
            .map(|i| ParamVec::new(vec![i as f64]).unwrap())
            .collect();
        assert!(split_by_parameter(&grid, 4, 0).is_err());
    }

    /// Synthetic dataset with target = [0.3 x + 0.1 lambda], easily learnable.
    fn synthetic_dataset(n: usize, offset: f64) -> Dataset {
        let samples: Vec<TrainingSample> = (0..n)
            .map(|i| {
                let x = offset + i as f64 / n as f64;
                let lambda = 0.5 + 0.5 * ((i * 7) % n) as f64 / n as f64;
                TrainingSample {
                    k: i,
                    state: StateVec::new(vec![x]).unwrap(),
                    params: ParamVec::new(vec![lambda]).unwrap(),
                    target: StateVec::new(vec![0.3 * x + 0.1 * lambda]).unwrap(),
                }
            })
            .collect();
        Dataset::new(samples, 0.1, 1, "synthetic", vec![]).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let train_set = synthetic_dataset(64, 0.0);
        let val_set = synthetic_dataset(16, 0.01);
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            scheduler: PlateauConfig::default(),
            seed: 7,
        };
        let net = Mlp::new(&[2, 16, 1], 3).unwrap();
        let a = train(net.clone(), &train_set, &val_set, &cfg).unwrap();
        let b = train(net, &train_set, &val_set, &cfg).unwrap();
        assert_eq!(a.net, b.net, "training must be bitwise reproducible");
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 400);
        let last = a.history.last().unwrap();
        assert!(
            last.val_loss < 1e-4,
            "synthetic regression should fit: val loss {}",
            last.val_loss
        );
        // Loss decreased over training.
        assert!(last.train_loss < a.history[0].train_loss);
    }

    #[test]
    fn recorded_loss_matches_independent_evaluator() {
        let train_set = synthetic_dataset(32, 0.0);
        let val_set = synthetic_dataset(8, 0.01);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            scheduler: PlateauConfig::default(),
            seed: 1,
        };
        let result = train(Mlp::new(&[2, 6, 1], 5).unwrap(), &train_set, &val_set, &cfg).unwrap();
        // Independent single-pass evaluator: accumulate squared component
        // errors in reverse sample order, then divide once.
        let net = &result.net;
        let mut acc = 0.0;
        let n_out = net.output_dim() as f64;
        for s in train_set.samples().iter().rev() {
            let y = net.forward_normalized(&sample_input(&s.state, &s.params)).unwrap();
            let t = net.output_scale().normalize(s.target.values());
            for (yi, ti) in y.iter().zip(&t) {
                acc += (yi - ti) * (yi - ti) / n_out;
            }
        }
        let independent = acc / train_set.len() as f64;
        let recorded = result.history.last().unwrap().train_loss;
        assert!(
            (independent - recorded).abs() <= 1e-12 * independent.max(1e-30),
            "recorded {recorded} vs independent {independent}"
        );
    }

    #[test]
    fn scaling_is_fitted_on_training_data_only() {
        let train_set = synthetic_dataset(32, 0.0);
        // Validation data with larger values must not influence the scales.
        let val_set = synthetic_dataset(8, 5.0);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            scheduler: PlateauConfig::default(),
            seed: 1,
        };
        let result = train(Mlp::new(&[2, 4, 1], 2).unwrap(), &train_set, &val_set, &cfg).unwrap();
        let expected_max = train_set
            .samples()
            .iter()
            .map(|s| s.state[0])
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(result.net.input_scale().max()[0], expected_max);
        assert!(result.net.input_scale().max()[0] < 5.0);
    }

    #[test]
    fn zero_targets_from_near_zero_init_reach_tiny_loss() {
        let samples: Vec<TrainingSample> = (0..32)
            .map(|i| TrainingSample {
                k: i,
                state: StateVec::new(vec![0.5 + i as f64 / 32.0]).unwrap(),
                params: ParamVec::empty(),
                target: StateVec::new(vec![0.0]).unwrap(),
            })
            .collect();
        let ds = Dataset::new(samples, 0.1, 1, "zeros", vec![]).unwrap();
        let mut net = Mlp::new(&[1, 8, 1], 4).unwrap();
        for w in net.weights.iter_mut() {
            for v in w.iter_mut() {
                *v *= 1e-3;
            }
        }
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            scheduler: PlateauConfig::default(),
            seed: 2,
        };
        let result = train(net, &ds, &ds, &cfg).unwrap();
        assert!(result.history.last().unwrap().val_loss < 1e-8);
    }

    #[test]
    fn exploding_loss_aborts_with_location() {
        let train_set = synthetic_dataset(32, 1.0);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 1e200,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            scheduler: PlateauConfig::default(),
            seed: 3,
        };
        let err = train(Mlp::new(&[2, 4, 1], 1).unwrap(), &train_set, &train_set, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "got {err:?}");
    }

    #[test]
    fn history_csv_format() {
        let history = vec![EpochStats {
            epoch: 0,
            train_loss: 0.5,
            val_loss: 0.25,
            lr: 1e-3,
        }];
        assert_eq!(
            history_to_csv(&history),
            "epoch,train_loss,val_loss,lr\n0,0.5,0.25,0.001\n"
        );
    }
}
