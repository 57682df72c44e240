//! Single-threaded deterministic training loop.
//!
//! The per-epoch shuffle stream is keyed by `(seed, epoch)` rather than by a
//! stateful generator, so resuming from a checkpoint at epoch `k` replays
//! exactly the batches a straight-through run would have seen.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, TrainedModel};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::rng_from;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Early stopping on validation loss; the best checkpoint is restored.
    pub early_stop_patience: Option<usize>,
}

impl TrainConfig {
    /// Adam at the paper-style base rate scaled for desk-size models.
    pub fn adam(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 64,
            learning_rate: 0.01,
            optimizer: OptimizerKind::adam_default(),
            seed,
            early_stop_patience: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters the model ended up with (differs from the last
    /// epoch when early stopping restored an earlier best).
    pub chosen_epoch: usize,
}

/// Trains in place. `on_epoch` runs after every epoch with the live model,
/// which is how snapshot probing hooks in.
pub fn train(
    model: &mut TrainedModel,
    optimizer: &mut OptimizerState<f32>,
    train_ds: &LabeledDataset,
    val_ds: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &TrainedModel, &EpochStats) -> Result<()>,
) -> Result<TrainHistory> {
    if train_ds.is_empty() {
        return Err(Error::Dataset("empty training dataset".into()));
    }
    let start_epoch = model.meta.epochs_trained as usize;
    let mut history = TrainHistory {
        epochs: Vec::new(),
        chosen_epoch: start_epoch,
    };
    let mut best: Option<(f64, Vec<Tensor<f32>>, usize)> = None;
    let mut since_best = 0usize;

    for epoch in (start_epoch + 1)..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        let mut rng = rng_from(cfg.seed, "epoch-shuffle", epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut loss_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_ds.images.gather_axis0(chunk);
            let labels: Vec<u32> = chunk.iter().map(|&i| train_ds.labels[i]).collect();
            let loss = train_step(model, optimizer, &batch, &labels)?;
            loss_sum += loss;
            loss_batches += 1;
        }
        model.meta.epochs_trained = epoch as u32;

        let (val_loss, val_accuracy) = match val_ds {
            Some(val) => {
                let (l, a) = evaluate(model, val)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / loss_batches as f64,
            val_loss,
            val_accuracy,
        };
        on_epoch(epoch, model, &stats)?;
        history.epochs.push(stats);
        history.chosen_epoch = epoch;

        if let (Some(patience), Some(vl)) = (cfg.early_stop_patience, val_loss) {
            let improved = best.as_ref().map_or(true, |(b, _, _)| vl < *b);
            if improved {
                best = Some((vl, model.params.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    if cfg.early_stop_patience.is_some() {
        if let Some((_, params, epoch)) = best {
            model.params = params;
            history.chosen_epoch = epoch;
        }
    }
    Ok(history)
}

/// One optimizer step on one batch; returns the batch loss in nats.
pub fn train_step(
    model: &mut TrainedModel,
    optimizer: &mut OptimizerState<f32>,
    batch: &Tensor<f32>,
    labels: &[u32],
) -> Result<f64> {
    let mut tape = Tape::new();
    let param_ids: Vec<_> = model
        .params
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect();
    let input = tape.leaf(batch.clone(), false);
    let (logits, _) = forward_on_tape(&model.spec, &param_ids, &mut tape, input, &[])?;
    let loss = tape.cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let grad_tensors: Vec<Tensor<f32>> = param_ids
        .iter()
        .zip(&model.params)
        .map(|(&id, p)| grads.get_or_zeros(id, p.dims()))
        .collect();
    optimizer.step(&mut model.params, &grad_tensors)?;
    Ok(loss_value)
}

/// Mean loss (nats) and accuracy over a dataset, evaluated in chunks.
pub fn evaluate(model: &TrainedModel, ds: &LabeledDataset) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let n = ds.len();
    let chunk = 256;
    let mut i = 0;
    while i < n {
        let hi = (i + chunk).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let batch = ds.images.gather_axis0(&idx);
        let labels = &ds.labels[i..hi];
        let logits = model.forward(&batch)?;
        for nll in crate::ops::neg_log_likelihoods(&logits, labels)? {
            loss_sum += nll;
        }
        let c = logits.dims()[1];
        for (row, &label) in logits.data().chunks(c).zip(labels) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best as u32 == label {
                correct += 1;
            }
        }
        i = hi;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Accuracy alone.
pub fn accuracy(model: &TrainedModel, ds: &LabeledDataset) -> Result<f64> {
    Ok(evaluate(model, ds)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_glyphs;
    use crate::model::{build_model, ModelSpec};

    #[test]
    fn training_reduces_loss_and_is_bit_deterministic() {
        let ds = gen_glyphs(2, 60, 16, 16, 21).unwrap();
        let spec = ModelSpec::mlp2([1, 16, 16], 2, [16, 16]);
        let cfg = TrainConfig::adam(3, 5);

        let run = || -> (Vec<u32>, f64, f64) {
            let mut model = build_model(&spec, 5).unwrap();
            let mut opt = OptimizerState::adam(cfg.learning_rate);
            let hist = train(&mut model, &mut opt, &ds, None, &cfg, |_, _, _| Ok(())).unwrap();
            let bits = model.params[0].data().iter().map(|v| v.to_bits()).collect();
            (
                bits,
                hist.epochs.first().unwrap().train_loss,
                hist.epochs.last().unwrap().train_loss,
            )
        };
        let (bits_a, first, last) = run();
        let (bits_b, _, _) = run();
        assert!(last < first, "loss should decrease: {first} -> {last}");
        assert_eq!(bits_a, bits_b, "same seed+config must be bit-identical");
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let ds = gen_glyphs(2, 40, 16, 16, 31).unwrap();
        let parts = ds.split(&[0.8, 0.2], 1).unwrap();
        let spec = ModelSpec::mlp2([1, 16, 16], 2, [8, 8]);
        let mut model = build_model(&spec, 1).unwrap();
        let mut opt = OptimizerState::adam(0.05);
        let mut cfg = TrainConfig::adam(6, 1);
        cfg.early_stop_patience = Some(2);
        let hist = train(&mut model, &mut opt, &parts[0], Some(&parts[1]), &cfg, |_, _, _| Ok(()))
            .unwrap();
        assert!(hist.chosen_epoch >= 1);
        let best_val = hist
            .epochs
            .iter()
            .map(|e| e.val_loss.unwrap())
            .fold(f64::INFINITY, f64::min);
        let chosen = hist
            .epochs
            .iter()
            .find(|e| e.epoch == hist.chosen_epoch)
            .unwrap();
        assert!((chosen.val_loss.unwrap() - best_val).abs() < 1e-12);
    }
}
