//! Supervised source-domain training.

use ndarray::{Array4, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, NormMode, SegmentationModel, TrainableMode};
use crate::error::{Error, Result};
use crate::volume::{sigmoid, LabelVolume, MultiSequenceVolume};

const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub bn_momentum: f32,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { epochs: 30, lr: 3e-3, seed: 0, bn_momentum: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training loss of each epoch run by this call.
    pub epoch_losses: Vec<f64>,
    /// Epoch counter after the call (continues across resumes).
    pub epochs_completed: usize,
}

/// Mean voxel BCE plus mean per-channel soft-Dice loss, with the gradient
/// with respect to the logits.
pub fn supervised_loss(logits: &Array4<f32>, labels: &LabelVolume) -> (f64, Array4<f32>) {
    let target = labels.to_f32();
    let c = logits.shape()[0];
    let n_total = logits.len() as f64;
    let probs = logits.mapv(sigmoid);

    let mut bce = 0.0f64;
    Zip::from(logits).and(&target).for_each(|&z, &y| {
        let z = z as f64;
        bce += z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p();
    });
    bce /= n_total;

    let mut grad = Array4::<f32>::zeros(logits.raw_dim());
    Zip::from(&mut grad).and(&probs).and(&target).for_each(|g, &p, &y| *g = ((p - y) as f64 / n_total) as f32);

    let mut dice_loss = 0.0f64;
    for ch in 0..c {
        let p = probs.index_axis(Axis(0), ch);
        let y = target.index_axis(Axis(0), ch);
        let inter: f64 = p.iter().zip(y.iter()).map(|(&a, &b)| (a * b) as f64).sum();
        let union: f64 = p.iter().map(|&a| a as f64).sum::<f64>() + y.iter().map(|&b| b as f64).sum::<f64>();
        let denom = union + DICE_SMOOTH;
        let dice = (2.0 * inter + DICE_SMOOTH) / denom;
        dice_loss += (1.0 - dice) / c as f64;
        let mut g = grad.index_axis_mut(Axis(0), ch);
        Zip::from(&mut g).and(&p).and(&y).for_each(|g, &pv, &yv| {
            let d_dice_dp = (2.0 * yv as f64 * denom - (2.0 * inter + DICE_SMOOTH)) / (denom * denom);
            let dp_dz = pv as f64 * (1.0 - pv as f64);
            *g += (-d_dice_dp / c as f64 * dp_dz) as f32;
        });
    }
    (bce + dice_loss, grad)
}

/// Resumable source trainer: the optimizer state and epoch counter travel
/// with it.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub options: PretrainOptions,
    pub adam: Adam,
    pub epochs_completed: usize,
}

impl Pretrainer {
    pub fn new(model: &SegmentationModel, options: PretrainOptions) -> Self {
        let sel = model.trainable_parameters(TrainableMode::All);
        Self { options, adam: Adam::new(model, &sel, options.lr), epochs_completed: 0 }
    }

    pub fn run(
        &mut self,
        model: &mut SegmentationModel,
        dataset: &[(MultiSequenceVolume, LabelVolume)],
        epochs: usize,
    ) -> Result<PretrainReport> {
        let sel = model.trainable_parameters(TrainableMode::All);
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let epoch = self.epochs_completed;
            // Per-epoch stream so resumed runs shuffle exactly like uninterrupted ones.
            let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                let (vol, labels) = &dataset[i];
                let ls = labels.data().shape();
                if ls[0] != model.config().out_channels || ls[1..] != vol.data().shape()[1..] {
                    return Err(Error::shape("label volume does not match image volume"));
                }
                let trace = model.forward_traced(vol.data(), NormMode::Batch)?;
                let (loss, grad) = supervised_loss(&trace.logits(), labels);
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch: epoch + 1, loss });
                }
                let grads = model.backward(&trace, &grad, &sel);
                if !grads.is_finite() {
                    return Err(Error::Divergence { epoch: epoch + 1, loss: f64::NAN });
                }
                model.update_running_stats(&trace, self.options.bn_momentum);
                self.adam.step(model, &grads);
                total += loss;
            }
            let mean = total / dataset.len().max(1) as f64;
            losses.push(mean);
            self.epochs_completed += 1;
        }
        Ok(PretrainReport { epoch_losses: losses, epochs_completed: self.epochs_completed })
    }
}

/// Trains every parameter on labeled source pairs for `options.epochs`.
pub fn pretrain_source(
    model: &mut SegmentationModel,
    dataset: &[(MultiSequenceVolume, LabelVolume)],
    options: PretrainOptions,
) -> Result<PretrainReport> {
    if dataset.is_empty() && options.epochs > 0 {
        return Err(Error::EmptyInput("source dataset".into()));
    }
    Pretrainer::new(model, options).run(model, dataset, options.epochs)
}
