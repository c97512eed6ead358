use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kl::TrainingSample;
use super::mlp::{Mlp, MlpGradient};
use super::net::{mlp_backward, mlp_forward, Adam, AdamConfig, PolicyNet};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub batches_per_epoch: usize,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    /// Re-initialize the network every iteration instead of warm-starting.
    pub cold_start: bool,
    /// Compute per-sample gradients on the rayon pool. The sum is still taken
    /// in sample order, so results match the sequential mode bit for bit.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            minibatch: 25,
            batches_per_epoch: 50,
            hidden: vec![42, 42],
            adam: AdamConfig::default(),
            cold_start: false,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.minibatch == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config(
                "epochs, minibatch and batches_per_epoch must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden layers must have at least one unit".into(),
            ));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: PolicyNet,
    /// Mean per-sample quadratic loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Per-sample loss and its gradient.
fn sample_gradient(net: &PolicyNet, s: &TrainingSample) -> (f64, MlpGradient) {
    let d = mlp_forward(net, &s.state) - &s.target;
    let wd = &s.weight * &d;
    (0.5 * d.dot(&wd), mlp_backward(net, &s.state, &wd))
}

fn fresh_net(samples: &[TrainingSample], cfg: &TrainConfig, seed_value: u64) -> Result<PolicyNet> {
    let mut sizes = vec![samples[0].state.len()];
    sizes.extend(&cfg.hidden);
    sizes.push(samples[0].target.len());
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::stream::NET_INIT]));
    let mut net = PolicyNet::new(Mlp::glorot(&sizes, &mut rng)?, cfg.adam);
    net.fit_standardization(&samples.iter().map(|s| &s.state).collect::<Vec<_>>())?;
    Ok(net)
}

/// Minibatch Adam on the quadratic KL terms. With `init` given and
/// `cold_start` off, training continues from `init` (its standardization is
/// kept); otherwise a fresh network is drawn and standardized on `samples`.
/// The optimizer moments always start from zero.
pub fn train_supervised(
    samples: &[TrainingSample],
    init: Option<&PolicyNet>,
    cfg: &TrainConfig,
    seed_value: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Domain("training needs at least one sample".into()));
    }
    for s in samples {
        s.validate()?;
    }
    let mut net = match init {
        Some(n) if !cfg.cold_start => {
            let mut n = n.clone();
            n.adam = cfg.adam;
            n
        }
        _ => fresh_net(samples, cfg, seed_value)?,
    };
    net.validate()?;
    if net.input_dim() != samples[0].state.len() || net.output_dim() != samples[0].target.len() {
        return Err(Error::Dimension(
            "samples do not match the network's input/output size".into(),
        ));
    }

    let mut adam = Adam::new(cfg.adam, net.mlp.param_count());
    let mut params = net.mlp.params();
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::stream::SHUFFLE]));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut batch_idx = Vec::with_capacity(cfg.minibatch);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            batch_idx.clear();
            while batch_idx.len() < cfg.minibatch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch_idx.push(order[cursor]);
                cursor += 1;
            }
            let per_sample: Vec<(f64, MlpGradient)> = if cfg.parallel {
                batch_idx
                    .par_iter()
                    .map(|&i| sample_gradient(&net, &samples[i]))
                    .collect()
            } else {
                batch_idx
                    .iter()
                    .map(|&i| sample_gradient(&net, &samples[i]))
                    .collect()
            };
            let scale = 1.0 / cfg.minibatch as f64;
            let mut grad = Mlp::zeros(&net.mlp.sizes())?;
            let mut loss = 0.0;
            for (l, g) in &per_sample {
                loss += l;
                grad.add_scaled(g, scale);
            }
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            epoch_loss += loss;
            adam.step(&mut params, &grad.params());
            net.mlp.set_params(&params)?;
        }
        loss_trace.push(epoch_loss / cfg.batches_per_epoch as f64);
    }
    Ok(TrainOutcome { net, loss_trace })
}

/// Mean squared error of the network mean against the sample targets.
pub fn mean_squared_error(net: &PolicyNet, samples: &[TrainingSample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| (mlp_forward(net, &s.state) - &s.target).norm_squared())
        .sum();
    total / samples.len().max(1) as f64
}

#[derive(Serialize, Deserialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

pub fn write_loss_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if trace.is_empty() {
        w.write_record(["epoch", "loss"])?;
    }
    for (epoch, &loss) in trace.iter().enumerate() {
        w.serialize(LossRow { epoch, loss })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<LossRow>()
        .map(|row| Ok(row?.loss))
        .collect()
}
