use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::evaluate::{
    action_variance_profile, draw_test_set, evaluate_policy, export_metrics, median,
    VariantEvaluation,
};
use crate::dynamics::{fit_model_with_prior, FitConfig, TimeVaryingLinearModel};
use crate::error::{Error, Result};
use crate::policy::{
    build_training_set, global_covariance, read_loss_csv, theorem1_check, train_supervised,
    write_loss_csv, ConditionRollouts, GlobalPolicy, PolicyNet, Theorem1Report, TrainingSample,
};
use crate::seed;
use crate::sim::{collect_batch, GaussianActionPolicy, Trajectory, TrajectoryBatch};
use crate::trajopt::{
    em_optimize, init_controller_lqr, observation_sequence, read_em_csv, write_em_csv,
    ControllerParams, EmConfig, EmIterationRecord,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// File names inside a pipeline output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn iteration_dir(&self, i: usize) -> PathBuf {
        self.root.join(format!("iter_{i:02}"))
    }

    pub fn batch(&self, i: usize, c: usize) -> PathBuf {
        self.iteration_dir(i).join(format!("batch_c{c}.json"))
    }

    pub fn model(&self, i: usize, c: usize) -> PathBuf {
        self.iteration_dir(i).join(format!("model_c{c}.json"))
    }

    pub fn controller(&self, i: usize, c: usize) -> PathBuf {
        self.iteration_dir(i).join(format!("controller_c{c}.json"))
    }

    pub fn rollouts(&self, i: usize, c: usize) -> PathBuf {
        self.iteration_dir(i).join(format!("rollouts_c{c}.json"))
    }

    pub fn policy(&self, i: usize) -> PathBuf {
        self.root.join(format!("policy_{i:02}.json"))
    }

    pub fn loss(&self, i: usize) -> PathBuf {
        self.root.join(format!("loss_{i:02}.csv"))
    }

    pub fn em_diagnostics(&self, c: usize) -> PathBuf {
        self.root.join(format!("em_c{c}.csv"))
    }

    pub fn theorem1(&self) -> PathBuf {
        self.root.join("theorem1.csv")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn comparison(&self) -> PathBuf {
        self.metrics_dir().join("comparison.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Config,
    Batch,
    Model,
    Controller,
    Rollouts,
    Policy,
    LossCsv,
    EmCsv,
    Theorem1Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    pub iteration: Option<usize>,
    pub condition: Option<usize>,
    /// Relative to the output directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub iteration: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Row {
    pub iteration: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub software_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// `running`, `complete` or `failed`.
    pub status: String,
    pub error: Option<ErrorInfo>,
    pub baseline_snapshot: Option<String>,
    /// Policies trained after EM iterations `1..=I`.
    pub policy_snapshots: Vec<String>,
    pub em_diagnostics: Vec<String>,
    pub theorem1: Vec<Theorem1Row>,
    pub artifacts: Vec<Artifact>,
    pub timings: Vec<StageTiming>,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            status: "running".into(),
            error: None,
            baseline_snapshot: None,
            policy_snapshots: Vec::new(),
            em_diagnostics: Vec::new(),
            theorem1: Vec::new(),
            artifacts: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest schema version {}",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

/// Loads every artifact listed in the manifest with its own reader.
pub fn verify_manifest(out: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::load(&Layout::new(out).manifest())?;
    for a in &manifest.artifacts {
        let p = out.join(&a.path);
        if !p.is_file() {
            return Err(Error::Missing(format!("artifact {}", a.path)));
        }
        match a.kind {
            ArtifactKind::Config => ExperimentConfig::load(&p).map(|_| ())?,
            ArtifactKind::Batch | ArtifactKind::Rollouts => {
                TrajectoryBatch::load(&p).map(|_| ())?
            }
            ArtifactKind::Model => TimeVaryingLinearModel::load(&p).map(|_| ())?,
            ArtifactKind::Controller => ControllerParams::load(&p).map(|_| ())?,
            ArtifactKind::Policy => GlobalPolicy::load(&p).map(|_| ())?,
            ArtifactKind::LossCsv => read_loss_csv(&p).map(|_| ())?,
            ArtifactKind::EmCsv => read_em_csv(&p).map(|_| ())?,
            ArtifactKind::Theorem1Csv => read_theorem1_csv(&p).map(|_| ())?,
        }
    }
    Ok(manifest)
}

pub fn write_theorem1_csv(path: &Path, rows: &[Theorem1Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["iteration", "lhs", "rhs", "holds"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_theorem1_csv(path: &Path) -> Result<Vec<Theorem1Row>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

struct Recorder<'a> {
    layout: &'a Layout,
    manifest: RunManifest,
}

impl Recorder<'_> {
    fn add(
        &mut self,
        kind: ArtifactKind,
        iteration: Option<usize>,
        condition: Option<usize>,
        path: &Path,
    ) -> String {
        let rel = self.layout.rel(path);
        self.manifest.artifacts.push(Artifact {
            kind,
            iteration,
            condition,
            path: rel.clone(),
        });
        rel
    }

    fn time(&mut self, stage: &str, iteration: usize, start: Instant) {
        self.manifest.timings.push(StageTiming {
            stage: stage.into(),
            iteration,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

/// Local covariances of every condition, `[c][k]`.
fn local_covariances(thetas: &[ControllerParams]) -> Vec<Vec<DMatrix<f64>>> {
    thetas
        .iter()
        .map(|t| t.steps.iter().map(|s| s.covariance.clone()).collect())
        .collect()
}

fn fit_config(cfg: &ExperimentConfig, i: usize, c: usize) -> FitConfig {
    let mut fit = cfg.fit.clone();
    fit.gmm.seed = seed::derive(cfg.seed, &[seed::stream::GMM_INIT, c as u64, i as u64]);
    fit
}

struct ConditionState {
    accumulated: Vec<Trajectory>,
    theta: ControllerParams,
    initial_theta: ControllerParams,
    records: Vec<EmIterationRecord>,
    rollouts: Vec<Trajectory>,
}

/// Runs the full loop into `out`. The manifest is written even when a stage
/// fails, with `status = "failed"` and the error recorded.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let layout = Layout::new(out);
    let mut rec = Recorder {
        layout: &layout,
        manifest: RunManifest::new(cfg)?,
    };
    let result = pipeline_body(cfg, &layout, &mut rec);
    match &result {
        Ok(()) => rec.manifest.status = "complete".into(),
        Err(e) => {
            rec.manifest.status = "failed".into();
            rec.manifest.error = Some(ErrorInfo {
                kind: e.kind().into(),
                message: e.to_string(),
            });
        }
    }
    rec.manifest.save(&layout.manifest())?;
    result.map(|()| rec.manifest)
}

fn train_snapshot(
    cfg: &ExperimentConfig,
    layout: &Layout,
    rec: &mut Recorder<'_>,
    i: usize,
    samples: &[TrainingSample],
    previous: Option<&PolicyNet>,
    states: &[ConditionState],
) -> Result<PolicyNet> {
    let start = Instant::now();
    let trained = train_supervised(
        samples,
        previous,
        &cfg.train,
        seed::derive(cfg.seed, &[seed::stream::NET_INIT, i as u64]),
    )?;
    rec.time("train", i, start);
    let thetas: Vec<ControllerParams> = states.iter().map(|s| s.theta.clone()).collect();
    let sigma_l = global_covariance(&local_covariances(&thetas), cfg.covariance_mode)?;
    let initial: Vec<ControllerParams> = states.iter().map(|s| s.initial_theta.clone()).collect();
    let report: Theorem1Report = theorem1_check(&sigma_l, &local_covariances(&initial))?;
    rec.manifest.theorem1.push(Theorem1Row {
        iteration: i,
        lhs: report.lhs,
        rhs: report.rhs,
        holds: report.holds,
    });
    let policy = GlobalPolicy::new(trained.net.clone(), sigma_l)?;
    policy.save(&layout.policy(i))?;
    let rel = rec.add(ArtifactKind::Policy, Some(i), None, &layout.policy(i));
    if i == 0 {
        rec.manifest.baseline_snapshot = Some(rel);
    } else {
        rec.manifest.policy_snapshots.push(rel);
    }
    write_loss_csv(&layout.loss(i), &trained.loss_trace)?;
    rec.add(ArtifactKind::LossCsv, Some(i), None, &layout.loss(i));
    Ok(trained.net)
}

fn training_rollouts(
    cfg: &ExperimentConfig,
    theta: &ControllerParams,
    i: usize,
    c: usize,
) -> Result<Vec<Trajectory>> {
    collect_batch(
        theta,
        &cfg.initial_conditions[c],
        &cfg.sim,
        &cfg.cost,
        cfg.samples_per_condition,
        seed::derive(
            cfg.seed,
            &[seed::stream::TRAINING_ROLLOUT, c as u64, i as u64],
        ),
    )
}

fn save_batch(
    rec: &mut Recorder<'_>,
    kind: ArtifactKind,
    path: &Path,
    i: usize,
    c: usize,
    batch: &[Trajectory],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    TrajectoryBatch::new(batch.to_vec()).save(path)?;
    rec.add(kind, Some(i), Some(c), path);
    Ok(())
}

fn training_set(
    cfg: &ExperimentConfig,
    i: usize,
    states: &[ConditionState],
) -> Result<Vec<TrainingSample>> {
    let rollouts: Vec<ConditionRollouts<'_>> = states
        .iter()
        .enumerate()
        .map(|(c, s)| ConditionRollouts {
            condition: c,
            controller: &s.theta,
            trajectories: &s.rollouts,
        })
        .collect();
    build_training_set(i, &rollouts, cfg.samples_per_condition)
}

fn pipeline_body(cfg: &ExperimentConfig, layout: &Layout, rec: &mut Recorder<'_>) -> Result<()> {
    cfg.save(&layout.config())?;
    rec.add(ArtifactKind::Config, None, None, &layout.config());
    let horizon = cfg.sim.horizon;

    // Iteration 0: exploration, first model, LQR seed.
    let mut states = Vec::with_capacity(cfg.initial_conditions.len());
    for (c, ic) in cfg.initial_conditions.iter().enumerate() {
        let start = Instant::now();
        let explore = GaussianActionPolicy {
            mean: cfg.sim.hover_action(),
            covariance: DMatrix::identity(cfg.cost.action_dim(), cfg.cost.action_dim())
                * cfg.exploration_variance,
            horizon,
        };
        let batch = collect_batch(
            &explore,
            ic,
            &cfg.sim,
            &cfg.cost,
            cfg.batch_size,
            seed::derive(cfg.seed, &[seed::stream::COLLECT, c as u64, 0]),
        )?;
        save_batch(rec, ArtifactKind::Batch, &layout.batch(0, c), 0, c, &batch)?;
        let model = fit_model_with_prior(&batch, &batch, &fit_config(cfg, 0, c))?;
        model.save(&layout.model(0, c))?;
        rec.add(ArtifactKind::Model, Some(0), Some(c), &layout.model(0, c));
        let theta = init_controller_lqr(&model, &cfg.cost, cfg.init_controller_cov, cfg.bounds)?;
        theta.save(&layout.controller(0, c))?;
        rec.add(
            ArtifactKind::Controller,
            Some(0),
            Some(c),
            &layout.controller(0, c),
        );
        let rollouts = training_rollouts(cfg, &theta, 0, c)?;
        save_batch(
            rec,
            ArtifactKind::Rollouts,
            &layout.rollouts(0, c),
            0,
            c,
            &rollouts,
        )?;
        rec.time(&format!("local_c{c}"), 0, start);
        states.push(ConditionState {
            accumulated: batch,
            initial_theta: theta.clone(),
            theta,
            records: Vec::new(),
            rollouts,
        });
    }
    let mut samples = training_set(cfg, 0, &states)?;
    let mut net = train_snapshot(cfg, layout, rec, 0, &samples, None, &states)?;

    let em_cfg = EmConfig {
        iterations: cfg.em_steps_per_iteration,
        ..cfg.em.clone()
    };
    for i in 1..=cfg.iterations {
        for (c, ic) in cfg.initial_conditions.iter().enumerate() {
            let start = Instant::now();
            let st = &mut states[c];
            let batch = collect_batch(
                &st.theta,
                ic,
                &cfg.sim,
                &cfg.cost,
                cfg.batch_size,
                seed::derive(cfg.seed, &[seed::stream::COLLECT, c as u64, i as u64]),
            )?;
            save_batch(rec, ArtifactKind::Batch, &layout.batch(i, c), i, c, &batch)?;
            st.accumulated.extend(batch.iter().cloned());
            let model = fit_model_with_prior(&batch, &st.accumulated, &fit_config(cfg, i, c))?;
            model.save(&layout.model(i, c))?;
            rec.add(ArtifactKind::Model, Some(i), Some(c), &layout.model(i, c));

            let ys = observation_sequence(cfg.em.observations, &batch, horizon)?;
            let mut records = Vec::new();
            let em_seed = seed::derive(cfg.seed, &[seed::stream::SURROGATE, c as u64, i as u64]);
            let result = em_optimize(
                &model,
                &st.theta,
                &ys,
                &cfg.cost,
                &em_cfg,
                em_seed,
                &mut records,
            );
            for (j, mut r) in records.into_iter().enumerate() {
                r.iteration = (i - 1) * cfg.em_steps_per_iteration + j;
                st.records.push(r);
            }
            write_em_csv(&layout.em_diagnostics(c), &st.records)?;
            st.theta = result?;
            st.theta.save(&layout.controller(i, c))?;
            rec.add(
                ArtifactKind::Controller,
                Some(i),
                Some(c),
                &layout.controller(i, c),
            );
            st.rollouts = training_rollouts(cfg, &st.theta, i, c)?;
            save_batch(
                rec,
                ArtifactKind::Rollouts,
                &layout.rollouts(i, c),
                i,
                c,
                &st.rollouts,
            )?;
            rec.time(&format!("local_c{c}"), i, start);
        }
        samples.extend(training_set(cfg, i, &states)?);
        net = train_snapshot(cfg, layout, rec, i, &samples, Some(&net), &states)?;
    }
    for c in 0..states.len() {
        let rel = rec.add(
            ArtifactKind::EmCsv,
            None,
            Some(c),
            &layout.em_diagnostics(c),
        );
        rec.manifest.em_diagnostics.push(rel);
    }
    write_theorem1_csv(&layout.theorem1(), &rec.manifest.theorem1)?;
    rec.add(ArtifactKind::Theorem1Csv, None, None, &layout.theorem1());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub iteration: usize,
    pub median_cost: f64,
    pub mean_cost: f64,
    pub successes: usize,
    pub experiments: usize,
}

impl VariantSummary {
    fn of(e: &VariantEvaluation) -> Self {
        let costs = e.costs();
        Self {
            variant: e.variant.clone(),
            iteration: e.iteration,
            median_cost: median(&costs),
            mean_cost: costs.iter().sum::<f64>() / costs.len().max(1) as f64,
            successes: e.successes(),
            experiments: costs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub baseline: VariantSummary,
    pub em: VariantSummary,
    /// Mean and median of `cost(EM) − cost(baseline)` over paired experiments.
    pub mean_cost_difference: f64,
    pub median_cost_difference: f64,
    /// Fraction of paired experiments where the EM policy is cheaper.
    pub em_better_fraction: f64,
    /// Steps where the executed-action variance under EM is at most the baseline's.
    pub action_variance_steps_not_larger: usize,
    pub action_variance_steps: usize,
    pub success_by_iteration: Vec<(usize, usize)>,
    pub theorem1: Theorem1Report,
}

/// Label used in the metric files for snapshot `i`.
pub fn variant_label(i: usize, last: usize) -> String {
    match i {
        0 => "baseline-init".into(),
        i if i == last => "em-gps".into(),
        i => format!("em-gps-{i}"),
    }
}

/// Evaluates every policy snapshot of a finished pipeline on one seeded test
/// set, exports the metric files and compares the baseline (`i = 0`) with
/// snapshot `em_snapshot` (default `I`).
pub fn compare_variants(
    cfg: &ExperimentConfig,
    out: &Path,
    em_snapshot: Option<usize>,
) -> Result<ComparisonReport> {
    let layout = Layout::new(out);
    let last = em_snapshot.unwrap_or(cfg.iterations);
    let tests = draw_test_set(&cfg.initial_conditions, &cfg.test, cfg.seed)?;
    let mut runs = Vec::new();
    for i in 0..=cfg.iterations.max(last) {
        let path = layout.policy(i);
        if !path.is_file() {
            if i == 0 || i == last {
                return Err(Error::Missing(format!(
                    "policy snapshot {i} at {}",
                    path.display()
                )));
            }
            continue;
        }
        let policy = GlobalPolicy::load(&path)?;
        let experiments =
            evaluate_policy(&policy, &tests, &cfg.test, &cfg.sim, &cfg.cost, cfg.seed)?;
        runs.push(VariantEvaluation {
            variant: variant_label(i, last),
            iteration: i,
            experiments,
        });
    }
    export_metrics(&layout.metrics_dir(), &runs)?;

    let base = runs
        .iter()
        .find(|r| r.iteration == 0)
        .expect("baseline loaded");
    let em = runs
        .iter()
        .find(|r| r.iteration == last)
        .expect("EM snapshot loaded");
    let diffs: Vec<f64> = em
        .costs()
        .iter()
        .zip(base.costs())
        .map(|(e, b)| e - b)
        .collect();
    let var_em = action_variance_profile(&em.experiments);
    let var_base = action_variance_profile(&base.experiments);

    let thetas_at = |i: usize| -> Result<Vec<ControllerParams>> {
        (0..cfg.initial_conditions.len())
            .map(|c| ControllerParams::load(&layout.controller(i, c)))
            .collect()
    };
    let sigma_l = GlobalPolicy::load(&layout.policy(last))?.covariances;
    let theorem1 = theorem1_check(&sigma_l, &local_covariances(&thetas_at(0)?))?;

    let report = ComparisonReport {
        config_hash: cfg.hash()?,
        baseline: VariantSummary::of(base),
        em: VariantSummary::of(em),
        mean_cost_difference: diffs.iter().sum::<f64>() / diffs.len().max(1) as f64,
        median_cost_difference: median(&diffs),
        em_better_fraction: diffs.iter().filter(|d| **d < 0.0).count() as f64
            / diffs.len().max(1) as f64,
        action_variance_steps_not_larger: var_em
            .iter()
            .zip(&var_base)
            .filter(|(e, b)| e <= b)
            .count(),
        action_variance_steps: var_em.len(),
        success_by_iteration: runs.iter().map(|r| (r.iteration, r.successes())).collect(),
        theorem1,
    };
    std::fs::write(layout.comparison(), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
