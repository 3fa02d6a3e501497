use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_mse, one_hot};
use super::{Batch, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::event::SampleTensor;
use crate::par::Exec;

pub const CURVES_HEADER: &str = "epoch,train_acc,test_acc,train_loss,test_loss";

/// A count tensor with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub tensor: SampleTensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Cosine decay of the learning rate to zero over `epochs`.
    pub cosine: bool,
    pub seed: u64,
    /// Stop after the first epoch whose test accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
    /// Run at most this many epochs without shortening the schedule, so
    /// the curves are a prefix of the full run.
    pub max_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            cosine: true,
            seed: 0,
            stop_at_accuracy: None,
            max_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        if !self.cosine || self.epochs == 0 {
            return self.learning_rate;
        }
        let phase = std::f64::consts::PI * epoch as f64 / self.epochs as f64;
        (0.5 * self.learning_rate as f64 * (1.0 + phase.cos())) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub network: Network,
    pub curves: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_test_accuracy(&self) -> f64 {
        self.curves.last().map_or(0.0, |e| e.test_acc)
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from(CURVES_HEADER);
        s.push('\n');
        for e in &self.curves {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                e.epoch, e.train_acc, e.test_acc, e.train_loss, e.test_loss
            );
        }
        s
    }
}

/// Index of the largest score, first one on ties. A silent output (all
/// scores zero) maps to the last class, which is background.
pub fn argmax_class(scores: &[f32]) -> usize {
    if scores.iter().all(|&s| s == 0.0) {
        return scores.len().saturating_sub(1);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode accuracy and loss.
pub fn evaluate(net: &Network, data: &[Labeled], exec: Exec) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
    let scores = exec.map(data, |d| net.forward(&d.tensor));
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let correct = scores.iter().zip(&labels).filter(|(s, &l)| argmax_class(s) == l).count();
    let pred: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|&v| v as f64).collect()).collect();
    let targets: Vec<Vec<f64>> = labels.iter().map(|&l| one_hot(l, net.spec.classes)).collect();
    Ok((correct as f64 / data.len() as f64, loss_mse(&pred, &targets)?))
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32 | batch as u64)
}

/// Minibatch SGD with momentum; deterministic for a fixed seed regardless
/// of the execution mode.
pub fn train(spec: NetworkSpec, train_set: &[Labeled], test_set: &[Labeled], cfg: &TrainConfig, exec: Exec) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("epochs and batch_size must be positive"));
    }
    for class in 0..spec.classes {
        if !train_set.iter().any(|d| d.label == class) {
            return Err(Error::Dataset(format!("class {class} absent from the training split")));
        }
    }
    if let Some(d) = train_set.iter().chain(test_set).find(|d| d.label >= spec.classes) {
        return Err(Error::Dataset(format!("label {} out of range", d.label)));
    }
    let mut net = Network::new(spec, cfg.seed)?;
    for d in train_set.iter().chain(test_set) {
        net.check_input(&d.tensor)?;
    }
    let mut velocity = super::Params::zeros(&spec);
    let mut curves = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.max_epochs.map_or(cfg.epochs, |m| m.min(cfg.epochs)) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);

        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch {
                inputs: chunk.iter().map(|&i| &train_set[i].tensor).collect(),
                labels: chunk.iter().map(|&i| train_set[i].label).collect(),
                dropout_seed: Some(batch_seed(cfg.seed, epoch, b)),
            };
            let out = net.run_batch(&batch, true, exec)?;
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.scores.iter().zip(&batch.labels).filter(|(s, &l)| argmax_class(s) == l).count();
            let grads = out.grads.as_ref().expect("gradients requested");
            for ((w, v), g) in net
                .params
                .trainable_mut()
                .into_iter()
                .zip(velocity.trainable_mut())
                .zip(grads.trainable())
            {
                for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = cfg.momentum * *vi + gi;
                    *wi -= lr * *vi;
                }
            }
            net.update_running_stats(&out);
        }

        let (test_acc, test_loss) = evaluate(&net, test_set, exec)?;
        curves.push(EpochStats {
            epoch: epoch + 1,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc,
            train_loss: loss_sum / train_set.len() as f64,
            test_loss,
        });
        if matches!(cfg.stop_at_accuracy, Some(target) if !test_set.is_empty() && test_acc >= target) {
            break;
        }
    }
    Ok(TrainReport { network: net, curves })
}
