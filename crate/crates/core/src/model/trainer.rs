//! Supervised training loop for the toy classifier. Deterministic for a
//! fixed seed: initialization, shuffling, and optimizer state all derive
//! from `TrainConfig::seed`, and gradients are accumulated in a fixed order.

use ndarray::{ArrayD, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::config::ModelConfig;
use super::diff::{forward_tape, TapeParams};
use super::params::{tensor_layout, ParameterSet};
use crate::data::ToyDataset;
use crate::error::Result;
use crate::optim::{Adam, AdamConfig};
use crate::priors::one_hot_loss_tape;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    /// Mean cross-entropy per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

fn shuffled_indices(n: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Train a freshly initialized model on `dataset`. With `epochs == 0` the
/// returned parameters equal the seeded initialization.
pub fn train_toy_model(
    cfg: &ModelConfig,
    dataset: &ToyDataset,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    let init = ParameterSet::init(cfg, tc.seed)?;
    let layout = tensor_layout(cfg);
    let names: Vec<String> = layout.iter().map(|(n, _)| n.clone()).collect();
    let mut tensors: Vec<ArrayD<f64>> = names.iter().map(|n| init.get(n).clone()).collect();

    let mut adam = Adam::new(AdamConfig::with_lr(tc.lr));
    let mut rng = ChaCha20Rng::seed_from_u64(tc.seed ^ 0x00C0_FFEE);
    let n = dataset.len();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);

    for _ in 0..tc.epochs {
        let order = shuffled_indices(n, &mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(tc.batch_size.max(1)) {
            let images = dataset.images.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();

            let tape = Tape::new();
            let tp = TapeParams::from_tensors(&tape, cfg, &tensors)?;
            let pix = tape.leaf(images.into_dyn());
            let (logits, _) = forward_tape(&tape, &tp, cfg, &pix, false)?;
            let loss = one_hot_loss_tape(&logits, &labels)?;
            let grads = tape.backward(&loss);
            loss_sum += loss.scalar_value();
            steps += 1;

            let grad_refs: Vec<Option<&ArrayD<f64>>> =
                names.iter().map(|nm| grads.wrt(tp.get(nm))).collect();
            let mut param_refs: Vec<&mut ArrayD<f64>> = tensors.iter_mut().collect();
            adam.step(&mut param_refs, &grad_refs);
        }
        epoch_losses.push(loss_sum / steps.max(1) as f64);
    }

    let map = names.into_iter().zip(tensors).collect();
    let mut params = ParameterSet::from_tensor_map(cfg, map)?;
    params.snap_to_storage();
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}
