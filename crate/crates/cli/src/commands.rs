//! The five pipeline commands. Each one reads the validated config,
//! resolves its inputs from the run directory (or explicit `--model`
//! path), and writes its outputs back into the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use nnrk_core::benchmark::{
    metrics_to_csv, out_of_distribution_sweep, sample_parameters, summarize, summary_to_json,
    sweep, RunMetrics, SolverKind, SolverSpec, SweepSpec,
};
use nnrk_core::enhanced::{
    calibrate_delta_max, enhanced_integrate, hybrid_integrate, hybrid_records_to_csv,
    CorrectionModel, HybridConfig,
};
use nnrk_core::learning::{
    build_dataset, history_to_csv, load_dataset, save_dataset, train, Dataset, TrainConfig,
};
use nnrk_core::nn::{load_model, save_model, Mlp};
use nnrk_core::ode::{system_by_name, OdeSystem, ParamVec, StateVec};
use nnrk_core::rk::{
    integrate, reference_integrate, richardson_integrate, step_count, subsample, Trajectory,
};
use serde::Serialize;

use crate::config::{ModelMeta, RunConfig, ThresholdFile};
use crate::AppError;

/// All outputs of a run live in `output_dir/run_id/`.
pub fn run_dir(cfg: &RunConfig, out_override: Option<&Path>) -> PathBuf {
    out_override
        .unwrap_or(&cfg.output_dir)
        .join(&cfg.run_id)
}

fn write_text(path: &Path, text: &str) -> Result<(), AppError> {
    fs::write(path, text)
        .map_err(|e| AppError::config(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), AppError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| AppError::config(format!("serialize {}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| AppError::config(format!("{}: {e}", path.display())))
}

fn load_run_dataset(dir: &Path, stem: &str) -> Result<Dataset, AppError> {
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    if !csv.exists() || !json.exists() {
        return Err(AppError::config(format!(
            "dataset {} not found; run `nnrk generate` first",
            csv.display()
        )));
    }
    Ok(load_dataset(&csv, &json)?)
}

fn resolve_model_path(dir: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("model.json"))
}

fn meta_path_for(model_path: &Path) -> PathBuf {
    model_path.with_extension("meta.json")
}

fn load_model_checked(sys: &OdeSystem, path: &Path) -> Result<Mlp, AppError> {
    if !path.exists() {
        return Err(AppError::config(format!(
            "model {} not found; run `nnrk train` first or pass --model",
            path.display()
        )));
    }
    let net = load_model(path)?;
    if net.input_dim() != sys.state_dim() + sys.param_dim()
        || net.output_dim() != sys.state_dim()
    {
        return Err(AppError::config(format!(
            "model {} maps {} -> {} but system '{}' needs {} -> {}",
            path.display(),
            net.input_dim(),
            net.output_dim(),
            sys.name(),
            sys.state_dim() + sys.param_dim(),
            sys.state_dim()
        )));
    }
    Ok(net)
}

pub fn cmd_generate(cfg: &RunConfig, out: Option<&Path>) -> Result<(), AppError> {
    let sys = system_by_name(&cfg.system)?;
    let tab = cfg.base_tableau();
    let x0 = StateVec::new(cfg.x0.clone())?;
    let train_grid = cfg.train_grid()?;
    let val_grid = cfg.validation_grid()?;
    let ds_train = build_dataset(&sys, &tab, &train_grid, &x0, cfg.h, cfg.t_end, cfg.h_ref)?;
    let ds_val = build_dataset(&sys, &tab, &val_grid, &x0, cfg.h, cfg.t_end, cfg.h_ref)?;
    let dir = run_dir(cfg, out);
    fs::create_dir_all(&dir)
        .map_err(|e| AppError::config(format!("cannot create {}: {e}", dir.display())))?;
    save_dataset(&ds_train, &dir.join("train.csv"), &dir.join("train.json"))?;
    save_dataset(&ds_val, &dir.join("validation.csv"), &dir.join("validation.json"))?;
    println!(
        "generated {} training and {} validation samples",
        ds_train.len(),
        ds_val.len()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<(), AppError> {
    let sys = system_by_name(&cfg.system)?;
    let tab = cfg.base_tableau();
    let network = cfg
        .network
        .as_ref()
        .ok_or_else(|| AppError::config("config is missing the 'network' section".into()))?;
    let training = cfg
        .training
        .as_ref()
        .ok_or_else(|| AppError::config("config is missing the 'training' section".into()))?;
    let dir = run_dir(cfg, out);
    let ds_train = load_run_dataset(&dir, "train")?;
    let ds_val = load_run_dataset(&dir, "validation")?;

    let mut dims = Vec::with_capacity(network.hidden.len() + 2);
    dims.push(ds_train.input_dim());
    dims.extend_from_slice(&network.hidden);
    dims.push(ds_train.state_dim());
    let net = Mlp::new(&dims, network.seed)?;
    let tc = TrainConfig {
        epochs: training.epochs,
        batch_size: training.batch_size,
        optimizer: cfg.optimizer.clone().unwrap_or_default(),
        scheduler: cfg.scheduler.clone().unwrap_or_default(),
        seed: training.seed,
    };
    let result = train(net, &ds_train, &ds_val, &tc)?;
    let last = result.history.last().expect("epochs >= 1");
    if !last.val_loss.is_finite() {
        return Err(AppError::numerical(format!(
            "final validation loss is not finite: {}",
            last.val_loss
        )));
    }
    save_model(&result.net, &dir.join("model.json"))?;
    println!("wrote {}", dir.join("model.json").display());
    let meta = ModelMeta {
        system: cfg.system.clone(),
        tableau: cfg.tableau.clone(),
        h: cfg.h,
        base_order: tab.order(),
        state_dim: sys.state_dim(),
        param_dim: sys.param_dim(),
    };
    write_json(&dir.join("model.meta.json"), &meta)?;
    write_text(&dir.join("loss_history.csv"), &history_to_csv(&result.history))?;
    println!(
        "trained {} epochs: train loss {:e}, validation loss {:e}",
        result.history.len(),
        last.train_loss,
        last.val_loss
    );
    Ok(())
}

pub fn cmd_calibrate(
    cfg: &RunConfig,
    model: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), AppError> {
    let sys = system_by_name(&cfg.system)?;
    let base = cfg.base_tableau();
    let pair = cfg.embedded_tableau()?;
    let hybrid = cfg
        .hybrid
        .as_ref()
        .ok_or_else(|| AppError::config("config is missing the 'hybrid' section".into()))?;
    let dir = run_dir(cfg, out);
    let model_path = resolve_model_path(&dir, model);
    let net = load_model_checked(&sys, &model_path)?;
    let meta: ModelMeta = read_json(&meta_path_for(&model_path))?;
    if meta.system != cfg.system
        || meta.tableau != cfg.tableau
        || meta.h != cfg.h
        || meta.base_order != base.order()
    {
        return Err(AppError::config(format!(
            "model was trained for system '{}', tableau '{}' (order {}), h = {}; \
             config asks for system '{}', tableau '{}' (order {}), h = {}",
            meta.system,
            meta.tableau,
            meta.base_order,
            meta.h,
            cfg.system,
            cfg.tableau,
            base.order(),
            cfg.h
        )));
    }
    let ds = load_run_dataset(&dir, "train")?;
    let hcfg = HybridConfig::new(
        hybrid.atol.clone(),
        hybrid.rtol.clone(),
        hybrid.kappa,
        0.0,
        hybrid.norm_kind,
    )?;
    let delta_max = calibrate_delta_max(&net, &ds, &sys, &pair, &hcfg)?;
    let threshold = ThresholdFile {
        delta_max,
        kappa: hybrid.kappa,
        norm_kind: hybrid.norm_kind,
        atol: hybrid.atol.clone(),
        rtol: hybrid.rtol.clone(),
    };
    write_json(&dir.join("threshold.json"), &threshold)?;
    println!("calibrated delta_max = {delta_max:e}");
    Ok(())
}

fn simulate_params(cfg: &RunConfig, sys: &OdeSystem) -> Result<ParamVec, AppError> {
    match &cfg.simulate {
        Some(s) => Ok(ParamVec::new(s.param.clone())?),
        None if sys.param_dim() == 0 => Ok(ParamVec::empty()),
        None => Err(AppError::config(
            "config is missing the 'simulate' section".into(),
        )),
    }
}

pub fn cmd_simulate(
    cfg: &RunConfig,
    model: Option<&Path>,
    mode: &str,
    out: Option<&Path>,
) -> Result<(), AppError> {
    let sys = system_by_name(&cfg.system)?;
    let x0 = StateVec::new(cfg.x0.clone())?;
    let p = simulate_params(cfg, &sys)?;
    let n_steps = step_count(cfg.t_end, cfg.h)?;
    let dir = run_dir(cfg, out);
    fs::create_dir_all(&dir)
        .map_err(|e| AppError::config(format!("cannot create {}: {e}", dir.display())))?;

    let mut records_csv: Option<String> = None;
    let traj: Trajectory = match mode {
        "plain" => integrate(&sys, &cfg.base_tableau(), &x0, &p, cfg.h, n_steps)?,
        "richardson" => {
            richardson_integrate(&sys, &cfg.base_tableau(), &x0, &p, cfg.h, n_steps)?
        }
        "reference" => {
            let fine = reference_integrate(&sys, &x0, &p, cfg.h_ref, cfg.t_end)?;
            subsample(&fine, cfg.h)?
        }
        "enhanced" => {
            let net = load_model_checked(&sys, &resolve_model_path(&dir, model))?;
            enhanced_integrate(&sys, &cfg.base_tableau(), &net, &x0, &p, cfg.h, n_steps)?
        }
        "hybrid" => {
            let net = load_model_checked(&sys, &resolve_model_path(&dir, model))?;
            let pair = cfg.embedded_tableau()?;
            let threshold: ThresholdFile = read_json(&dir.join("threshold.json"))?;
            let hcfg = HybridConfig::new(
                threshold.atol,
                threshold.rtol,
                threshold.kappa,
                threshold.delta_max,
                threshold.norm_kind,
            )?;
            let (traj, records) =
                hybrid_integrate(&sys, &pair, &net, &x0, &p, cfg.h, n_steps, &hcfg)?;
            records_csv = Some(hybrid_records_to_csv(&records));
            traj
        }
        other => {
            return Err(AppError::config(format!(
                "unknown mode '{other}'; expected plain, richardson, enhanced, hybrid, or reference"
            )));
        }
    };
    write_text(&dir.join(format!("trajectory_{mode}.csv")), &traj.to_csv())?;
    if let Some(csv) = records_csv {
        write_text(&dir.join("hybrid_steps.csv"), &csv)?;
    }
    Ok(())
}

/// Membership record for the out-of-distribution sweep, aligned with
/// `param_seed_index` in `metrics_ood.csv`.
#[derive(Serialize)]
struct OodParams {
    values: Vec<f64>,
    is_ood: Vec<bool>,
}

pub fn cmd_bench(cfg: &RunConfig, model: Option<&Path>, out: Option<&Path>) -> Result<(), AppError> {
    let sys = system_by_name(&cfg.system)?;
    let bench = cfg
        .bench
        .as_ref()
        .ok_or_else(|| AppError::config("config is missing the 'bench' section".into()))?;
    let test_interval = cfg.params.test_interval.ok_or_else(|| {
        AppError::config("config is missing 'params.test_interval'".into())
    })?;
    let dir = run_dir(cfg, out);
    fs::create_dir_all(&dir)
        .map_err(|e| AppError::config(format!("cannot create {}: {e}", dir.display())))?;

    let needs_net = bench
        .solvers
        .iter()
        .any(|s| s == "enhanced" || s == "hybrid");
    let net: Option<Mlp> = if needs_net {
        Some(load_model_checked(&sys, &resolve_model_path(&dir, model))?)
    } else {
        None
    };
    let hybrid_cfg: Option<HybridConfig> = if bench.solvers.iter().any(|s| s == "hybrid") {
        let threshold: ThresholdFile = read_json(&dir.join("threshold.json"))?;
        Some(HybridConfig::new(
            threshold.atol,
            threshold.rtol,
            threshold.kappa,
            threshold.delta_max,
            threshold.norm_kind,
        )?)
    } else {
        None
    };

    let base = cfg.base_tableau();
    let mut solvers = Vec::new();
    for name in &bench.solvers {
        let spec = match name.as_str() {
            "plain" => SolverSpec {
                label: cfg.tableau.clone(),
                kind: SolverKind::Plain,
                tab: base.clone(),
                net: None,
                hybrid_cfg: None,
            },
            // The embedded pair integrated with its primary (higher-order)
            // weights: the classical order-(p+1) comparator.
            "rk3" => SolverSpec {
                label: "rk3".into(),
                kind: SolverKind::Plain,
                tab: cfg.embedded_tableau()?,
                net: None,
                hybrid_cfg: None,
            },
            "richardson" => SolverSpec {
                label: format!("richardson_{}", cfg.tableau),
                kind: SolverKind::Richardson,
                tab: base.clone(),
                net: None,
                hybrid_cfg: None,
            },
            "enhanced" => SolverSpec {
                label: format!("enhanced_{}", cfg.tableau),
                kind: SolverKind::Enhanced,
                tab: base.clone(),
                net: Some(net.as_ref().expect("loaded above") as &dyn CorrectionModel),
                hybrid_cfg: None,
            },
            "hybrid" => SolverSpec {
                label: "hybrid".into(),
                kind: SolverKind::Hybrid,
                tab: cfg.embedded_tableau()?,
                net: Some(net.as_ref().expect("loaded above") as &dyn CorrectionModel),
                hybrid_cfg: hybrid_cfg.clone(),
            },
            other => {
                return Err(AppError::config(format!("unknown bench solver '{other}'")));
            }
        };
        solvers.push(spec);
    }

    let params = sample_parameters(test_interval, cfg.params.n_runs, bench.seed)?;
    let spec = SweepSpec {
        sys: &sys,
        x0: StateVec::new(cfg.x0.clone())?,
        t_end: cfg.t_end,
        h_ref: cfg.h_ref,
        h_list: bench.h_list.clone(),
        params,
        solvers,
        timing_calls: bench.timing_calls,
    };
    let rows = sweep(&spec)?;
    write_text(&dir.join("metrics.csv"), &metrics_to_csv(&rows))?;
    write_text(&dir.join("summary.json"), &summary_to_json(&summarize(&rows)))?;

    let mut all_rows: Vec<&RunMetrics> = rows.iter().filter(|m| !m.is_median).collect();
    if let Some(ood_interval) = cfg.params.ood_interval {
        let (ood_rows, membership) = out_of_distribution_sweep(
            &spec,
            test_interval,
            ood_interval,
            cfg.params.ood_ratio,
            cfg.params.n_runs,
            bench.seed,
        )?;
        write_text(&dir.join("metrics_ood.csv"), &metrics_to_csv(&ood_rows))?;
        write_text(
            &dir.join("summary_ood.json"),
            &summary_to_json(&summarize(&ood_rows)),
        )?;
        let ood_values: Vec<f64> = {
            let n = membership.len();
            let mut values = vec![f64::NAN; n];
            for m in ood_rows.iter().filter(|m| !m.is_median) {
                values[m.param_index] = m.param_value;
            }
            values
        };
        write_json(
            &dir.join("ood_params.json"),
            &OodParams {
                values: ood_values,
                is_ood: membership,
            },
        )?;
        // Keep the OOD rows alive for the all-failed check below.
        let ood_rows_owned: Vec<RunMetrics> =
            ood_rows.into_iter().filter(|m| !m.is_median).collect();
        let any_ok = all_rows.iter().any(|m| !m.failed)
            || ood_rows_owned.iter().any(|m| !m.failed);
        let n_failed = all_rows.iter().filter(|m| m.failed).count()
            + ood_rows_owned.iter().filter(|m| m.failed).count();
        let n_total = all_rows.len() + ood_rows_owned.len();
        println!("{} of {} runs succeeded", n_total - n_failed, n_total);
        if !any_ok {
            return Err(AppError::bench_failure("every benchmark run failed".into()));
        }
        return Ok(());
    }
    let n_failed = all_rows.iter().filter(|m| m.failed).count();
    println!("{} of {} runs succeeded", all_rows.len() - n_failed, all_rows.len());
    all_rows.retain(|m| !m.failed);
    if all_rows.is_empty() {
        return Err(AppError::bench_failure("every benchmark run failed".into()));
    }
    Ok(())
}
