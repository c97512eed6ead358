use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::json;

use emgps_core::dynamics::{fit_model_with_prior, TimeVaryingLinearModel};
use emgps_core::error::{Error, Result};
use emgps_core::harness::{
    compare_variants, draw_test_set, evaluate_policy, export_metrics, run_pipeline,
    ExperimentConfig, VariantEvaluation,
};
use emgps_core::policy::{
    build_training_set, global_covariance, train_supervised, write_loss_csv, ConditionRollouts,
    GlobalPolicy,
};
use emgps_core::seed;
use emgps_core::sim::{collect_batch, GaussianActionPolicy, TrajectoryBatch};
use emgps_core::trajopt::{
    em_optimize, init_controller_lqr, observation_sequence, write_em_csv, ControllerParams,
};

#[derive(Parser)]
#[command(
    name = "emgps",
    version,
    about = "EM-based guided policy search on a noisy point mass"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "emgps-out")]
    out: PathBuf,
    /// Policy snapshot index of a pipeline run.
    #[arg(long, global = true)]
    snapshot: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect one batch per initial condition (exploration, or under `controller_c*.json` when present).
    Collect,
    /// Fit a time-varying linear model to each `batch_c*.json`.
    Fit,
    /// Run EM on each fitted model, seeding with LQR when no controller exists.
    Optimize,
    /// Roll out the local controllers and train the global policy.
    Train,
    /// Evaluate `policy.json`, or pipeline snapshot `--snapshot`, on the test protocol.
    Evaluate,
    /// Run the full iterative pipeline.
    Pipeline,
    /// Compare the baseline snapshot with the EM snapshot of a finished pipeline.
    Compare,
}

fn stage_file(out: &Path, name: &str, c: usize) -> PathBuf {
    out.join(format!("{name}_c{c}.json"))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn collect(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value> {
    let mut counts = Vec::new();
    for (c, ic) in cfg.initial_conditions.iter().enumerate() {
        let ctrl_path = stage_file(out, "controller", c);
        let batch_seed = seed::derive(cfg.seed, &[seed::stream::COLLECT, c as u64]);
        let batch = if ctrl_path.is_file() {
            let theta = ControllerParams::load(&ctrl_path)?;
            collect_batch(&theta, ic, &cfg.sim, &cfg.cost, cfg.batch_size, batch_seed)?
        } else {
            let nu = cfg.cost.action_dim();
            let explore = GaussianActionPolicy {
                mean: cfg.sim.hover_action(),
                covariance: DMatrix::identity(nu, nu) * cfg.exploration_variance,
                horizon: cfg.sim.horizon,
            };
            collect_batch(
                &explore,
                ic,
                &cfg.sim,
                &cfg.cost,
                cfg.batch_size,
                batch_seed,
            )?
        };
        let path = stage_file(out, "batch", c);
        let mut all = batch.clone();
        let history = stage_file(out, "history", c);
        if history.is_file() {
            let mut old = TrajectoryBatch::load(&history)?.trajectories;
            old.extend(all);
            all = old;
        }
        TrajectoryBatch::new(batch).save(&path)?;
        TrajectoryBatch::new(all.clone()).save(&history)?;
        counts.push(json!({"condition": c, "batch": path, "accumulated": all.len()}));
    }
    Ok(json!({"collected": counts}))
}

fn fit(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value> {
    let mut models = Vec::new();
    for c in 0..cfg.initial_conditions.len() {
        let batch = TrajectoryBatch::load(&stage_file(out, "batch", c))?.trajectories;
        let history = stage_file(out, "history", c);
        let prior = if history.is_file() {
            TrajectoryBatch::load(&history)?.trajectories
        } else {
            batch.clone()
        };
        let mut fit_cfg = cfg.fit.clone();
        fit_cfg.gmm.seed = seed::derive(cfg.seed, &[seed::stream::GMM_INIT, c as u64]);
        let model = fit_model_with_prior(&batch, &prior, &fit_cfg)?;
        let path = stage_file(out, "model", c);
        model.save(&path)?;
        models.push(json!({"condition": c, "model": path, "warnings": model.diagnostics.warnings}));
    }
    Ok(json!({"models": models}))
}

fn optimize(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value> {
    let mut results = Vec::new();
    for c in 0..cfg.initial_conditions.len() {
        let model = TimeVaryingLinearModel::load(&stage_file(out, "model", c))?;
        let ctrl_path = stage_file(out, "controller", c);
        let theta0 = if ctrl_path.is_file() {
            ControllerParams::load(&ctrl_path)?
        } else {
            let seeded =
                init_controller_lqr(&model, &cfg.cost, cfg.init_controller_cov, cfg.bounds)?;
            seeded.save(&stage_file(out, "controller_init", c))?;
            seeded
        };
        let batch = TrajectoryBatch::load(&stage_file(out, "batch", c))?.trajectories;
        let ys = observation_sequence(cfg.em.observations, &batch, cfg.sim.horizon)?;
        let mut records = Vec::new();
        let em_seed = seed::derive(cfg.seed, &[seed::stream::SURROGATE, c as u64]);
        let result = em_optimize(
            &model,
            &theta0,
            &ys,
            &cfg.cost,
            &cfg.em,
            em_seed,
            &mut records,
        );
        let csv_path = out.join(format!("em_c{c}.csv"));
        write_em_csv(&csv_path, &records)?;
        let theta = result?;
        theta.save(&ctrl_path)?;
        results.push(json!({"condition": c, "controller": ctrl_path, "diagnostics": csv_path, "iterations": records.len()}));
    }
    Ok(json!({"controllers": results}))
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value> {
    let thetas = (0..cfg.initial_conditions.len())
        .map(|c| ControllerParams::load(&stage_file(out, "controller", c)))
        .collect::<Result<Vec<_>>>()?;
    let mut rollouts = Vec::new();
    for (c, (theta, ic)) in thetas.iter().zip(&cfg.initial_conditions).enumerate() {
        let seed_value = seed::derive(cfg.seed, &[seed::stream::TRAINING_ROLLOUT, c as u64]);
        let batch = collect_batch(
            theta,
            ic,
            &cfg.sim,
            &cfg.cost,
            cfg.samples_per_condition,
            seed_value,
        )?;
        TrajectoryBatch::new(batch.clone()).save(&stage_file(out, "rollouts", c))?;
        rollouts.push(batch);
    }
    let groups: Vec<ConditionRollouts<'_>> = thetas
        .iter()
        .zip(&rollouts)
        .enumerate()
        .map(|(c, (theta, trajectories))| ConditionRollouts {
            condition: c,
            controller: theta,
            trajectories,
        })
        .collect();
    let samples = build_training_set(0, &groups, cfg.samples_per_condition)?;
    let policy_path = out.join("policy.json");
    let previous = if policy_path.is_file() {
        Some(GlobalPolicy::load(&policy_path)?.net)
    } else {
        None
    };
    let trained = train_supervised(
        &samples,
        previous.as_ref(),
        &cfg.train,
        seed::derive(cfg.seed, &[seed::stream::NET_INIT]),
    )?;
    let locals: Vec<Vec<DMatrix<f64>>> = thetas
        .iter()
        .map(|t| t.steps.iter().map(|s| s.covariance.clone()).collect())
        .collect();
    let policy = GlobalPolicy::new(
        trained.net,
        global_covariance(&locals, cfg.covariance_mode)?,
    )?;
    policy.save(&policy_path)?;
    write_loss_csv(&out.join("loss.csv"), &trained.loss_trace)?;
    Ok(json!({
        "policy": policy_path,
        "samples": samples.len(),
        "final_loss": trained.loss_trace.last(),
    }))
}

fn evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    snapshot: Option<usize>,
) -> Result<serde_json::Value> {
    let (path, label, iteration) = match snapshot {
        Some(i) => (
            out.join(format!("policy_{i:02}.json")),
            format!("snapshot-{i}"),
            i,
        ),
        None => (out.join("policy.json"), "policy".to_string(), 0),
    };
    if !path.is_file() {
        return Err(Error::Missing(format!("policy at {}", path.display())));
    }
    let policy = GlobalPolicy::load(&path)?;
    let tests = draw_test_set(&cfg.initial_conditions, &cfg.test, cfg.seed)?;
    let experiments = evaluate_policy(&policy, &tests, &cfg.test, &cfg.sim, &cfg.cost, cfg.seed)?;
    let run = VariantEvaluation {
        variant: label,
        iteration,
        experiments,
    };
    let dir = out.join("evaluation");
    export_metrics(&dir, std::slice::from_ref(&run))?;
    let costs = run.costs();
    Ok(json!({
        "policy": path,
        "experiments": costs.len(),
        "median_cost": emgps_core::harness::median(&costs),
        "successes": run.successes(),
        "metrics": dir,
    }))
}

fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Collect => collect(&cfg, &cli.out),
        Command::Fit => fit(&cfg, &cli.out),
        Command::Optimize => optimize(&cfg, &cli.out),
        Command::Train => train(&cfg, &cli.out),
        Command::Evaluate => evaluate(&cfg, &cli.out, cli.snapshot),
        Command::Pipeline => {
            let m = run_pipeline(&cfg, &cli.out)?;
            Ok(json!({
                "status": m.status,
                "manifest": cli.out.join("manifest.json"),
                "policy_snapshots": m.policy_snapshots.len(),
                "theorem1_holds": m.theorem1.iter().all(|t| t.holds),
            }))
        }
        Command::Compare => Ok(serde_json::to_value(compare_variants(
            &cfg,
            &cli.out,
            cli.snapshot,
        )?)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"kind": e.kind(), "message": e.to_string()}})
            );
            ExitCode::FAILURE
        }
    }
}
