use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{combined_loss, LossConfig};
use super::metrics::{ConfusionCounts, MetricsReport};
use super::optim::OptimState;
use crate::data::{augment, stack_batch, AugmentationConfig, BiTemporalSample};
use crate::error::{Error, Result};
use crate::network::{lsat_forward, LsatModel};
use crate::tensor::{kernels, Element, Tape, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOptions {
    pub batch_size: usize,
    pub augmentation: Option<AugmentationConfig>,
}

impl Default for EpochOptions {
    fn default() -> Self {
        Self {
            batch_size: 4,
            augmentation: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Sample-weighted mean of the batch losses.
    pub mean_loss: f64,
    pub batches: usize,
}

/// Loss and parameter gradients for one batch; gradients are left in the
/// store's `grad` slots.
pub fn batch_gradients<T: Element>(
    model: &mut LsatModel<T>,
    batch: &[&BiTemporalSample],
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let (xa, xb, mask) = stack_batch::<T>(batch)?;
    let (loss, grads) = {
        let tape = Tape::with_params(&model.params);
        let a = tape.constant(xa);
        let b = tape.constant(xb);
        let logits = lsat_forward(&tape, &a, &b, model)?;
        let loss = combined_loss(&tape, &logits, &mask, loss_cfg)?;
        let grads = tape.backward(&loss)?;
        (loss.value().item().to_f64(), grads)
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    model.params.zero_grads();
    model.params.accumulate(&grads);
    Ok(loss)
}

/// One pass over `data` in a seed-determined order.
pub fn train_epoch<T: Element>(
    model: &mut LsatModel<T>,
    data: &[BiTemporalSample],
    optim: &mut OptimState,
    loss_cfg: &LossConfig,
    opts: &EpochOptions,
    seed: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let (mut weighted, mut batches) = (0.0, 0);
    for chunk in order.chunks(opts.batch_size) {
        let owned: Vec<BiTemporalSample>;
        let batch: Vec<&BiTemporalSample> = match &opts.augmentation {
            Some(cfg) => {
                owned = chunk
                    .iter()
                    .map(|&i| augment(&data[i], cfg, rng.random()))
                    .collect::<Result<_>>()?;
                owned.iter().collect()
            }
            None => chunk.iter().map(|&i| &data[i]).collect(),
        };
        let loss = batch_gradients(model, &batch, loss_cfg)?;
        optim.step(&mut model.params)?;
        weighted += loss * batch.len() as f64;
        batches += 1;
    }
    Ok(EpochStats {
        mean_loss: weighted / data.len() as f64,
        batches,
    })
}

/// Change probabilities `sigmoid(logits)`, `B x 1 x H x W`.
pub fn predict_probabilities<T: Element>(model: &LsatModel<T>, batch: &[&BiTemporalSample]) -> Result<Tensor<f64>> {
    let (xa, xb, _) = stack_batch::<T>(batch)?;
    let logits = model.predict_logits(&xa, &xb)?;
    Ok(logits.cast::<f64>().map(kernels::sigmoid))
}

/// Pixel-level metrics over every sample at `prob >= threshold`.
pub fn evaluate<T: Element>(
    model: &LsatModel<T>,
    data: &[BiTemporalSample],
    threshold: f64,
    batch_size: usize,
) -> Result<MetricsReport> {
    Ok(MetricsReport::from_counts(confusion(
        model, data, threshold, batch_size,
    )?))
}

pub fn confusion<T: Element>(
    model: &LsatModel<T>,
    data: &[BiTemporalSample],
    threshold: f64,
    batch_size: usize,
) -> Result<ConfusionCounts> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut counts = ConfusionCounts::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&BiTemporalSample> = chunk.iter().collect();
        let probs = predict_probabilities(model, &refs)?;
        let labels: Vec<f64> = chunk
            .iter()
            .flat_map(|s| s.mask.data().iter().map(|&v| v as f64))
            .collect();
        counts += ConfusionCounts::from_probabilities(probs.data(), &labels, threshold);
    }
    Ok(counts)
}
