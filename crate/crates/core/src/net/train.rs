//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, Network};
use crate::par;
use crate::{Error, Result};

/// Samples per sequential gradient chunk. Chunks are summed with a fixed
/// pairwise tree, so the result does not depend on the thread count.
const CHUNK: usize = 8;

/// Random access to normalized inputs and angle targets.
pub trait TrainingSet: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the normalized input of sample `i` into `out`.
    fn fill_input(&self, i: usize, out: &mut [f64]);

    /// (alpha, beta) in degrees.
    fn target(&self, i: usize) -> [f64; 2];
}

/// In-memory set of f64 inputs, mostly for tests and tooling.
#[derive(Debug, Clone, Default)]
pub struct SliceSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<[f64; 2]>,
}

impl TrainingSet for SliceSet {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn fill_input(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.inputs[i]);
    }

    fn target(&self, i: usize) -> [f64; 2] {
        self.targets[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch: 128,
            epochs: 30,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.optimizer.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean squared error (deg²) of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    pub history: Vec<EpochStats>,
}

impl TrainingReport {
    pub fn final_val_rmse(&self) -> Option<f64> {
        self.history.last().and_then(|s| s.val_loss).map(f64::sqrt)
    }
}

/// Gradient of the batch mean squared error over both outputs.
///
/// Returns `(sum of squared errors, gradient)`; the loss itself is
/// `sse / (2 * indices.len())`.
pub fn batch_gradient(net: &Network, set: &dyn TrainingSet, indices: &[usize]) -> (f64, Vec<f64>) {
    let n = net.param_count();
    if indices.is_empty() {
        return (0.0, vec![0.0; n]);
    }
    let scale = 1.0 / indices.len() as f64;
    let chunks: Vec<&[usize]> = indices.chunks(CHUNK).collect();
    let parts = par::map_slice(&chunks, |chunk| {
        let mut ws = net.workspace();
        let mut input = vec![0.0; net.spec().input_len()];
        let mut grad = vec![0.0; n + 1];
        let mut sse = 0.0;
        for &i in chunk.iter() {
            set.fill_input(i, &mut input);
            net.forward_f64(&input, &mut ws).expect("training input has the network shape");
            sse += net.accumulate_gradient(set.target(i), scale, &mut ws, &mut grad[..n]);
        }
        grad[n] = sse;
        grad
    });
    let mut total = par::pairwise_sum(parts).expect("non-empty batch");
    let sse = total.pop().expect("sse slot");
    (sse, total)
}

/// Predictions for every sample, in order.
pub fn predict_all(net: &Network, set: &dyn TrainingSet) -> Vec<[f64; 2]> {
    let starts: Vec<usize> = (0..set.len()).step_by(CHUNK * 4).collect();
    let parts = par::map_slice(&starts, |&start| {
        let end = (start + CHUNK * 4).min(set.len());
        let mut ws = net.workspace();
        let mut input = vec![0.0; net.spec().input_len()];
        (start..end)
            .map(|i| {
                set.fill_input(i, &mut input);
                net.forward_f64(&input, &mut ws).expect("input has the network shape")
            })
            .collect::<Vec<_>>()
    });
    parts.into_iter().flatten().collect()
}

/// Mean over samples and both axes of the squared error.
pub fn mean_squared_error(predictions: &[[f64; 2]], set: &dyn TrainingSet) -> f64 {
    let sse: f64 = predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = set.target(i);
            (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)
        })
        .sum();
    sse / (2.0 * predictions.len() as f64)
}

/// Trains `net` in place with AdamW on shuffled mini-batches.
///
/// The final partial batch of each epoch is included. `on_epoch` is invoked
/// after every epoch.
pub fn train(
    net: &mut Network,
    train_set: &dyn TrainingSet,
    val_set: Option<&dyn TrainingSet>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainingReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = AdamW::new(cfg.optimizer, net.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainingReport::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sse_total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let (sse, grad) = batch_gradient(net, train_set, batch);
            sse_total += sse;
            opt.step(net.params_mut(), &grad)?;
        }
        let train_loss = sse_total / (2.0 * train_set.len() as f64);
        let val_loss = match val_set {
            Some(v) if !v.is_empty() => Some(mean_squared_error(&predict_all(net, v), v)),
            _ => None,
        };
        if !train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&stats);
        report.history.push(stats);
    }
    Ok(report)
}
