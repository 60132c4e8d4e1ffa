//! Deeply supervised loss, augmentation and the optimization loop.

mod ablation;
mod augment;
mod loss;

pub use ablation::{
    ablation_configs, ablation_table, mean_vrand, membrane_split, run_ablation, AblationRow, AblationSettings, ABLATION_NOTE,
};
pub use augment::{apply_transform, augment_sample, rotate90, AugmentConfig, RotateMode, Transform};
pub use loss::{total_loss, LossBreakdown, LossWeights};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_image, pad_image, pad_sample, LabeledSample};
use crate::error::{Error, Result};
use crate::graph::{Network, NetworkConfig};
use crate::tensor::adam::{AdamConfig, DEFAULT_LR};
use crate::tensor::{adam_step, AdamState, LabelMap, Shape, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            steps: 1000,
            seed: 0,
            batch_size: 1,
            augment: AugmentConfig::default(),
            checkpoint_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            errs.push(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if let Err(Error::Config(more)) = self.augment.validate() {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Stacks samples into one padded batch. Returns the image, the labels and
/// the loss mask (`None` when no pixel is padding).
fn make_batch(net: &Network<f32>, batch: &[LabeledSample]) -> Result<(Tensor<f32>, LabelMap, Option<Vec<bool>>)> {
    let first = batch.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let multiple = net.config().size_multiple();
    let classes = net.config().num_classes;
    let padded: Vec<_> = batch
        .iter()
        .map(|s| {
            s.check_classes(classes)?;
            Ok(pad_sample(s, multiple))
        })
        .collect::<Result<_>>()?;
    let s0 = padded[0].image.shape();
    let (c, h, w) = (s0.c(), s0.h(), s0.w());
    let mut image = Vec::with_capacity(batch.len() * s0.numel());
    let mut labels = Vec::with_capacity(batch.len() * h * w);
    let mut mask = Vec::with_capacity(batch.len() * h * w);
    for (p, s) in padded.iter().zip(batch) {
        if p.image.shape() != s0 {
            return Err(Error::Data(format!(
                "sample `{}` pads to {}, batch started with `{}` at {s0}",
                s.id,
                p.image.shape(),
                first.id
            )));
        }
        image.extend_from_slice(p.image.data());
        labels.extend_from_slice(&p.labels.data);
        mask.extend_from_slice(&p.mask);
    }
    let n = batch.len();
    let image = Tensor::new(Shape::new(n, c, h, w), image)?;
    let labels = LabelMap::new(n, h, w, labels)?;
    let mask = if mask.iter().all(|&m| m) { None } else { Some(mask) };
    Ok((image, labels, mask))
}

/// One optimization step on `batch`: forward, loss, backward, Adam, zeroed
/// gradients. `step` only labels a non-finite-loss error.
pub fn train_step(
    net: &mut Network<f32>,
    batch: &[LabeledSample],
    opt: &mut AdamState<f32>,
    weights: LossWeights,
    step: usize,
) -> Result<LossBreakdown<f32>> {
    let (image, labels, mask) = make_batch(net, batch)?;
    let mut tape = Tape::new();
    let x = tape.constant(image);
    let (out, bound) = net.forward(&mut tape, x)?;
    let sides = net.config().side_output_count();
    let (total, breakdown) = total_loss(&mut tape, &out, &labels, weights, mask.as_deref(), sides)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFinite {
            step,
            trace: vec![breakdown.total as f64],
        });
    }
    tape.backward(total)?;
    net.params.accumulate_grads(&tape, &bound);
    adam_step(&mut net.params, opt)?;
    net.params.zero_grads();
    Ok(breakdown)
}

/// Owns the network, optimizer and augmentation stream of one run.
pub struct Trainer {
    pub net: Network<f32>,
    pub opt: AdamState<f32>,
    pub config: TrainConfig,
    pub weights: LossWeights,
    /// Completed steps.
    pub step: usize,
    pub trace: Vec<LossBreakdown<f32>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(net: Network<f32>, config: TrainConfig, weights: LossWeights) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let opt = AdamState::new(&net.params, config.adam());
        Ok(Trainer {
            net,
            opt,
            config,
            weights,
            step: 0,
            trace: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_a06e),
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Picks the next `batch_size` samples (reshuffled every epoch) and
    /// augments them.
    pub fn next_batch(&mut self, samples: &[LabeledSample]) -> Result<Vec<LabeledSample>> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            if self.cursor >= self.order.len() || self.order.len() != samples.len() {
                self.order = (0..samples.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let s = &samples[self.order[self.cursor]];
            self.cursor += 1;
            batch.push(augment_sample(s, &self.config.augment, &mut self.rng)?);
        }
        Ok(batch)
    }

    /// Trains on `batch` as given.
    pub fn step_on(&mut self, batch: &[LabeledSample]) -> Result<LossBreakdown<f32>> {
        match train_step(&mut self.net, batch, &mut self.opt, self.weights, self.step) {
            Ok(b) => {
                self.step += 1;
                self.trace.push(b.clone());
                Ok(b)
            }
            Err(Error::NonFinite { step, trace: last }) => {
                let mut trace: Vec<f64> = self.trace.iter().map(|b| b.total as f64).collect();
                trace.extend(last);
                Err(Error::NonFinite { step, trace })
            }
            Err(e) => Err(e),
        }
    }

    /// Runs the remaining configured steps. `on_step` sees the trainer after
    /// every step.
    pub fn run(
        &mut self,
        samples: &[LabeledSample],
        mut on_step: impl FnMut(&Trainer, &LossBreakdown<f32>) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.config.steps {
            let batch = self.next_batch(samples)?;
            let b = self.step_on(&batch)?;
            on_step(self, &b)?;
        }
        Ok(())
    }
}

/// Class probabilities for an image of any size: reflect-padded for the
/// forward pass, cropped back afterwards.
pub fn predict_probabilities(net: &Network<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    let padded = pad_image(image, net.config().size_multiple());
    let probs = net.predict(&padded)?;
    Ok(crop_image(&probs, s.h(), s.w()))
}

/// Per-pixel argmax class of the first image in the batch.
pub fn predict_labels(net: &Network<f32>, image: &Tensor<f32>) -> Result<Vec<u32>> {
    let probs = predict_probabilities(net, image)?;
    let s = probs.shape();
    let plane = s.plane();
    let d = probs.data();
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..s.c() {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best as u32
        })
        .collect())
}

/// Fraction of pixels whose predicted class matches the label.
pub fn pixel_accuracy(net: &Network<f32>, sample: &LabeledSample) -> Result<f64> {
    let pred = predict_labels(net, &sample.image)?;
    let hits = pred.iter().zip(&sample.labels.data).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Trains a fresh network on one unaugmented sample and reports its final
/// pixel accuracy on that sample.
pub fn overfit_check(net_cfg: &NetworkConfig, sample: &LabeledSample, steps: usize, seed: u64) -> Result<f64> {
    let net = Network::new(net_cfg.clone(), seed)?;
    let cfg = TrainConfig {
        steps,
        seed,
        augment: AugmentConfig::disabled(),
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(net, cfg, LossWeights::default())?;
    trainer.run(std::slice::from_ref(sample), |_, _| Ok(()))?;
    pixel_accuracy(&trainer.net, sample)
}
