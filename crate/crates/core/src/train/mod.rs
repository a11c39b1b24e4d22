//! Optimizer, loss, training loop and finite-difference gradient checks.

pub mod gradcheck;
mod loss;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, collate, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, Model};
use crate::params::Parameters;
use crate::tape::Tape;

pub use loss::{softmax_cross_entropy, LossOutput};
pub use optim::{cosine_lr, sgd_step, sgd_update, OptimConfig, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub seed: u64,
    /// Random crop and flip on training batches.
    pub augment: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            optim: OptimConfig {
                epochs,
                ..OptimConfig::default()
            },
            seed,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Per-epoch shuffling and augmentation draw from their own stream so a
/// run is reproducible epoch by epoch.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Train for `cfg.optim.epochs` epochs with a per-epoch cosine schedule.
/// `on_epoch` sees each record as it is produced.
pub fn train_loop(
    model: &mut Model<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    norm: &Normalization,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if cfg.optim.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut state = OptimState::new(cfg.optim);
    let epochs = cfg.optim.epochs;
    let mut history = Vec::with_capacity(epochs);
    for t in 0..epochs {
        let lr = cosine_lr(t, epochs, cfg.optim.lr0);
        let mut rng = epoch_rng(cfg.seed, t);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for idx in order.chunks(cfg.optim.batch_size) {
            let samples: Vec<_> = idx
                .iter()
                .map(|&i| {
                    let s = train.sample(i, norm);
                    if cfg.augment {
                        augment(&s, &mut rng)
                    } else {
                        s
                    }
                })
                .collect();
            let (x, labels) = collate(&samples);
            let mut tape = Tape::training();
            let input = tape.input(x, "input");
            let out = model.forward_on(&mut tape, input, true)?;
            let l = softmax_cross_entropy(tape.value(out.logits), &labels)?;
            let grads = tape.backward(out.logits, l.grad)?;
            sgd_step(model, &grads, &mut state, lr)?;
            model.commit_stats(&tape.take_stat_updates());
            loss_sum += l.loss * idx.len() as f64;
            correct += l.correct;
        }
        let n = train.len() as f64;
        let record = EpochMetrics {
            epoch: t + 1,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc: test
                .map(|d| evaluate(model, d, norm, cfg.optim.batch_size))
                .transpose()?,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

/// Inference-mode accuracy, no augmentation.
pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    norm: &Normalization,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let samples: Vec<_> = chunk.iter().map(|&i| data.sample(i, norm)).collect();
        let (x, labels) = collate(&samples);
        let pred = argmax_rows(&model.forward(&x)?);
        correct += pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// CSV with header `epoch,lr,train_loss,train_acc` plus `test_acc` when any
/// record has one.
pub fn write_metrics_csv(history: &[EpochMetrics], out: impl Write) -> Result<()> {
    let with_test = history.iter().any(|m| m.test_acc.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epoch", "lr", "train_loss", "train_acc"];
    if with_test {
        header.push("test_acc");
    }
    w.write_record(&header)?;
    for m in history {
        let mut row = vec![
            m.epoch.to_string(),
            m.lr.to_string(),
            m.train_loss.to_string(),
            m.train_acc.to_string(),
        ];
        if with_test {
            row.push(m.test_acc.map(|a| a.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
