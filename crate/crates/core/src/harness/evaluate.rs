use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{SuccessCriterion, TestProtocol};
use crate::error::{Error, Result};
use crate::seed;
use crate::sim::{rollout, ActionPolicy, CostModel, InitialCondition, SimConfig, Trajectory};

/// One test initial-state distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestDistribution {
    pub index: usize,
    /// Training condition whose neighbourhood the mean was drawn from.
    pub condition: usize,
    pub ic: InitialCondition,
}

/// Draws `protocol.distributions` means uniformly in a disc of radius
/// `protocol.radius` (position coordinates only) around the training means,
/// cycling over the conditions. The covariance is the condition's own.
pub fn draw_test_set(
    conditions: &[InitialCondition],
    protocol: &TestProtocol,
    seed_value: u64,
) -> Result<Vec<TestDistribution>> {
    if conditions.is_empty() {
        return Err(Error::Config(
            "no training conditions to draw test distributions around".into(),
        ));
    }
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::stream::TEST_SET]));
    Ok((0..protocol.distributions)
        .map(|d| {
            let c = d % conditions.len();
            let r = protocol.radius * rng.random::<f64>().sqrt();
            let angle = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            let mut ic = conditions[c].clone();
            ic.mean[0] += r * angle.cos();
            ic.mean[1] += r * angle.sin();
            TestDistribution {
                index: d,
                condition: c,
                ic,
            }
        })
        .collect())
}

/// Final true position (after the last step) in the position ellipse and
/// last executed action in the action ellipse. Boundaries count as inside.
pub fn success_test(traj: &Trajectory, criterion: &SuccessCriterion) -> bool {
    let (Some(x), Some(u)) = (traj.true_states.last(), traj.actions.last()) else {
        return false;
    };
    x.len() >= 2
        && u.len() >= 2
        && criterion.position.contains([x[0], x[1]])
        && criterion.action.contains([u[0], u[1]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub distribution: usize,
    pub sample: usize,
    pub trajectory: Trajectory,
    pub success: bool,
}

impl Experiment {
    pub fn cost_to_go(&self) -> f64 {
        self.trajectory.cost_to_go()
    }
}

/// Runs `protocol.samples` rollouts of `policy` from every test distribution.
/// Rollout seeds depend only on `(seed_value, distribution, sample)`, so two
/// policies evaluated with the same seed see the same noise draws.
pub fn evaluate_policy(
    policy: &dyn ActionPolicy,
    tests: &[TestDistribution],
    protocol: &TestProtocol,
    sim: &SimConfig,
    cost: &CostModel,
    seed_value: u64,
) -> Result<Vec<Experiment>> {
    let jobs: Vec<(usize, usize)> = tests
        .iter()
        .flat_map(|t| (0..protocol.samples).map(move |s| (t.index, s)))
        .collect();
    jobs.par_iter()
        .map(|&(d, s)| {
            let test = tests
                .iter()
                .find(|t| t.index == d)
                .expect("job built from tests");
            let trajectory = rollout(
                policy,
                &test.ic,
                sim,
                cost,
                seed::derive(seed_value, &[seed::stream::EVAL, d as u64, s as u64]),
            )?;
            let success = success_test(&trajectory, &protocol.criterion);
            Ok(Experiment {
                distribution: d,
                sample: s,
                trajectory,
                success,
            })
        })
        .collect()
}

/// Evaluated snapshot with its label.
#[derive(Debug, Clone)]
pub struct VariantEvaluation {
    pub variant: String,
    pub iteration: usize,
    pub experiments: Vec<Experiment>,
}

impl VariantEvaluation {
    pub fn costs(&self) -> Vec<f64> {
        self.experiments
            .iter()
            .map(Experiment::cost_to_go)
            .collect()
    }

    pub fn successes(&self) -> usize {
        self.experiments.iter().filter(|e| e.success).count()
    }
}

pub const COST_HEADER: [&str; 10] = [
    "variant",
    "iteration",
    "distribution",
    "sample",
    "cost_to_go",
    "final_x",
    "final_y",
    "final_u1",
    "final_u2",
    "success",
];
pub const ENVELOPE_HEADER: [&str; 6] = [
    "variant",
    "distribution",
    "coordinate",
    "step",
    "mean",
    "std",
];
pub const SUCCESS_HEADER: [&str; 4] = ["variant", "iteration", "successes", "experiments"];
pub const ACTION_HEADER: [&str; 6] = ["variant", "distribution", "sample", "step", "u1", "u2"];

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_rows(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step mean and standard deviation of each true-state coordinate over
/// the samples of one distribution; steps `1..=K` are the post-action states.
pub fn envelope(experiments: &[&Experiment]) -> Vec<(usize, usize, f64, f64)> {
    let Some(first) = experiments.first() else {
        return Vec::new();
    };
    let k_len = first.trajectory.horizon();
    let nx = first.trajectory.true_states[0].len();
    let n = experiments.len() as f64;
    let mut out = Vec::with_capacity(k_len * nx);
    for coord in 0..nx {
        for step in 1..=k_len {
            let vals: Vec<f64> = experiments
                .iter()
                .map(|e| e.trajectory.true_states[step][coord])
                .collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            out.push((coord, step, mean, var.sqrt()));
        }
    }
    out
}

/// Writes `cost_to_go.csv`, `envelopes.csv`, `success.csv` and `actions.csv`
/// into `dir`.
pub fn export_metrics(dir: &Path, runs: &[VariantEvaluation]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows(
        &dir.join("cost_to_go.csv"),
        &COST_HEADER,
        runs.iter().flat_map(|r| {
            r.experiments.iter().map(move |e| {
                let x = e.trajectory.true_states.last().cloned().unwrap_or_default();
                let u = e.trajectory.actions.last().cloned().unwrap_or_default();
                vec![
                    r.variant.clone(),
                    r.iteration.to_string(),
                    e.distribution.to_string(),
                    e.sample.to_string(),
                    fmt(e.cost_to_go()),
                    fmt(x[0]),
                    fmt(x[1]),
                    fmt(u[0]),
                    fmt(u[1]),
                    e.success.to_string(),
                ]
            })
        }),
    )?;

    let mut env_rows = Vec::new();
    for r in runs {
        let mut dists: Vec<usize> = r.experiments.iter().map(|e| e.distribution).collect();
        dists.sort_unstable();
        dists.dedup();
        for d in dists {
            let group: Vec<&Experiment> = r
                .experiments
                .iter()
                .filter(|e| e.distribution == d)
                .collect();
            for (coord, step, mean, std) in envelope(&group) {
                env_rows.push(vec![
                    r.variant.clone(),
                    d.to_string(),
                    coord.to_string(),
                    step.to_string(),
                    fmt(mean),
                    fmt(std),
                ]);
            }
        }
    }
    write_rows(&dir.join("envelopes.csv"), &ENVELOPE_HEADER, env_rows)?;

    write_rows(
        &dir.join("success.csv"),
        &SUCCESS_HEADER,
        runs.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.iteration.to_string(),
                r.successes().to_string(),
                r.experiments.len().to_string(),
            ]
        }),
    )?;

    write_rows(
        &dir.join("actions.csv"),
        &ACTION_HEADER,
        runs.iter().flat_map(|r| {
            r.experiments.iter().flat_map(move |e| {
                e.trajectory.actions.iter().enumerate().map(move |(k, u)| {
                    vec![
                        r.variant.clone(),
                        e.distribution.to_string(),
                        e.sample.to_string(),
                        k.to_string(),
                        fmt(u[0]),
                        fmt(u[1]),
                    ]
                })
            })
        }),
    )?;
    Ok(())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-step trace of the sample covariance of the executed actions.
pub fn action_variance_profile(experiments: &[Experiment]) -> Vec<f64> {
    let Some(first) = experiments.first() else {
        return Vec::new();
    };
    let n = experiments.len() as f64;
    (0..first.trajectory.horizon())
        .map(|k| {
            let us: Vec<DVector<f64>> =
                experiments.iter().map(|e| e.trajectory.action(k)).collect();
            let mean = us
                .iter()
                .fold(DVector::zeros(us[0].len()), |acc, u| acc + u)
                / n;
            us.iter().map(|u| (u - &mean).norm_squared()).sum::<f64>() / (n - 1.0).max(1.0)
        })
        .collect()
}
