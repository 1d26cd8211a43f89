//! Epoch loop: shuffled batches, forward/backward/step, eval-mode test
//! accuracy after each epoch.

use std::time::Instant;

use serde::Serialize;

use crate::data::{make_batches, Dataset};
use crate::nn::{cross_entropy, sgd_step, BnMode, SgdConfig};
use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

use super::SgnModel;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// multiplicative step decay applied every `lr_decay_every` epochs
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay: 0.5,
            lr_decay_every: 3,
            seed: 0,
            shuffle: true,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

/// Fraction of `ds` rows classified correctly in eval mode.
pub fn evaluate<F: Real>(model: &mut SgnModel<F>, ds: &Dataset<F>, batch_size: usize) -> Result<f64> {
    if ds.count() == 0 {
        return Err(SgnError::Argument("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for batch in make_batches(ds, batch_size, 0, false)? {
        let (logits, _) = model.forward(&batch.images, BnMode::Eval)?;
        let k = logits.dim(1);
        for (bi, &label) in batch.labels.iter().enumerate() {
            let row = &logits.data()[bi * k..(bi + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.count() as f64)
}

/// Run the training loop, invoking `on_epoch` as each record is produced.
/// With a fixed seed and thread count the trajectory is reproducible.
pub fn train_loop<F: Real>(
    model: &mut SgnModel<F>,
    train: &Dataset<F>,
    test: &Dataset<F>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) + Send,
) -> Result<Vec<EpochMetrics>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| SgnError::Argument(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut velocity: Vec<Tensor<F>> = model
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let mut metrics = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let start = Instant::now();
            let lr = cfg.lr
                * cfg
                    .lr_decay
                    .powi((epoch / cfg.lr_decay_every.max(1)) as i32);
            let sgd = SgdConfig {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            let mut loss_sum = 0.0f64;
            let mut seen = 0usize;
            for batch in make_batches(
                train,
                cfg.batch_size,
                cfg.seed.wrapping_add(epoch as u64),
                cfg.shuffle,
            )? {
                let (logits, cache) = model.forward(&batch.images, BnMode::Train)?;
                let (loss, grad_logits) = cross_entropy(&logits, &batch.labels)?;
                if !loss.is_finite() {
                    return Err(SgnError::Numeric(format!(
                        "loss diverged at epoch {} after {} samples",
                        epoch + 1,
                        seen
                    )));
                }
                let grads = model.backward(&cache, &grad_logits)?;
                for (param, (grad, vel)) in model
                    .parameters_mut()
                    .into_iter()
                    .zip(grads.tensors.iter().zip(velocity.iter_mut()))
                {
                    sgd_step(param, grad, vel, &sgd);
                }
                loss_sum += loss * batch.labels.len() as f64;
                seen += batch.labels.len();
            }
            let record = EpochMetrics {
                epoch: epoch + 1,
                train_loss: loss_sum / seen as f64,
                test_acc: evaluate(model, test, cfg.batch_size.max(64))?,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_epoch(&record);
            metrics.push(record);
        }
        Ok(metrics)
    })
}
