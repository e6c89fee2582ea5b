use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{is_running_stat, prediction, ModelWeights};
use crate::autodiff::{Tape, Tensor};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-3,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean cross-entropy over the epoch's batches.
    pub loss: f64,
    /// Training-mode accuracy over the epoch's batches.
    pub accuracy: f64,
}

/// Minimizes softmax cross-entropy with Adam. Batches are reshuffled every
/// epoch from `cfg.seed`; batch-norm running statistics are updated as a
/// side effect. A zero-epoch call returns the model unchanged.
pub fn train(
    mut model: ModelWeights,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelWeights, Vec<EpochRecord>)> {
    cfg.validate()?;
    let m = model.config.length;
    if data.length() != m {
        return Err(Error::shape(format!(
            "dataset length {} does not match model length {m}",
            data.length()
        )));
    }
    if data.num_classes() > model.config.num_classes {
        return Err(Error::shape(format!(
            "dataset has {} classes, model has {}",
            data.num_classes(),
            model.config.num_classes
        )));
    }

    let trainable: Vec<usize> = (0..model.params.len())
        .filter(|&i| !is_running_stat(&model.params[i].name))
        .collect();
    let sizes: Vec<usize> = trainable.iter().map(|&i| model.params[i].tensor.numel()).collect();
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut x = Vec::with_capacity(batch.len() * m);
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                x.extend_from_slice(&data.series()[i].values);
                labels.push(data.series()[i].label);
            }
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![batch.len(), 1, m], x)?);
            let mut stats = model.all_running_stats();
            let fwd = model.forward(&mut tape, xv, true, Some(&mut stats))?;
            let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {lv} at epoch {epoch}, batch {batch_no}"
                )));
            }
            loss_sum += lv * batch.len() as f64;
            let k = model.config.num_classes;
            correct += tape
                .value(fwd.logits)
                .data()
                .chunks_exact(k)
                .zip(&labels)
                .filter(|(row, &y)| prediction(row).0 == y)
                .count();

            tape.backward(loss)?;
            adam.tick();
            for (slot, &pi) in trainable.iter().enumerate() {
                let var = fwd.params[pi].expect("trainable parameter on tape");
                let grad = tape.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; sizes[slot]]);
                adam.update(slot, model.params[pi].tensor.data_mut(), &grad);
            }
            model.store_running_stats(&stats);
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((model, history))
}

/// Fraction of `data` whose eval-mode prediction matches its label.
pub fn accuracy(model: &ModelWeights, data: &Dataset) -> Result<f64> {
    let series: Vec<&[f64]> = data.series().iter().map(|s| s.values.as_slice()).collect();
    let logits = model.logits_batch(&series)?;
    let correct = logits
        .iter()
        .zip(data.labels())
        .filter(|(l, y)| prediction(l).0 == *y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
