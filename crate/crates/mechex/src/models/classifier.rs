//! Evaluation-only reference classifier for 10-class digit images at 32x32.
//!
//! Architecture: conv 32 -> ELU -> pool -> conv 64 -> ELU -> pool ->
//! FC 128 -> ELU -> FC 10, trained with softmax cross-entropy and Adam
//! defaults. Anything clearing the accuracy bar is acceptable here; this one
//! does so in a couple of epochs.

use rand::Rng;

use super::{param_entries, restore_params, Conv2d, Linear};
use crate::dataset::ImageSet;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::adam::ADAM_LR;
use crate::tensor::checkpoint;
use crate::tensor::tape::BackwardOpts;
use crate::tensor::{Param, Real, TRef, Tape, Tensor};

pub const CLASSIFIER_INPUT_SIDE: usize = 32;
pub const CLASS_COUNT: usize = 10;

pub struct ClassifierNet {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl ClassifierNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Classifier, 0);
        let conv1 = Conv2d::new("conv1", 1, 32, ADAM_LR, &mut rng);
        let conv2 = Conv2d::new("conv2", 32, 64, ADAM_LR, &mut rng);
        // 32 -> 16 -> 8 across the two pools
        let fc1 = Linear::new("fc1", 64 * 8 * 8, 128, ADAM_LR, &mut rng);
        let fc2 = Linear::new("fc2", 128, CLASS_COUNT, ADAM_LR, &mut rng);
        ClassifierNet { conv1, conv2, fc1, fc2 }
    }

    /// Logits `[batch, 10]` for `[b, 1, 32, 32]` input.
    pub fn forward(&self, tape: &mut Tape, x: TRef) -> Result<TRef> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[2] != CLASSIFIER_INPUT_SIDE || shape[3] != CLASSIFIER_INPUT_SIDE {
            return Err(Error::shape(
                "classifier",
                format!("want [B,1,{CLASSIFIER_INPUT_SIDE},{CLASSIFIER_INPUT_SIDE}], got {shape:?}"),
            ));
        }
        let mut h = self.conv1.forward(tape, x)?;
        h = tape.elu(h);
        h = tape.avg_pool2(h)?;
        h = self.conv2.forward(tape, h)?;
        h = tape.elu(h);
        h = tape.avg_pool2(h)?;
        h = tape.flatten(h)?;
        h = self.fc1.forward(tape, h)?;
        h = tape.elu(h);
        self.fc2.forward(tape, h)
    }

    /// Predicted class per image.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<u8>> {
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let logits = self.forward(&mut tape, x)?;
        let data = tape.value(logits).data();
        let n = images.shape()[0];
        Ok((0..n)
            .map(|b| {
                let row = &data[b * CLASS_COUNT..(b + 1) * CLASS_COUNT];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::write_tensors(path, &param_entries(&self.params()))
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        let entries = checkpoint::read_tensors(path)?;
        restore_params(&entries, &mut self.params_mut(), &mut Vec::new())
    }
}

pub struct ClassifierOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub accuracy_floor: Real,
    /// Evaluate on at most this many test images per accuracy check.
    pub eval_limit: usize,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        ClassifierOptions {
            epochs: 5,
            batch_size: 32,
            accuracy_floor: 0.988,
            eval_limit: usize::MAX,
        }
    }
}

/// Fraction of images whose argmax logit matches the label, computed in
/// batches.
pub fn classifier_accuracy(net: &ClassifierNet, set: &ImageSet, limit: usize) -> Result<Real> {
    let labels = set
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("classifier_accuracy needs labels".into()))?;
    let n = set.len().min(limit);
    let batch = 256;
    let mut correct = 0usize;
    let mut at = 0;
    while at < n {
        let hi = (at + batch).min(n);
        let indices: Vec<usize> = (at..hi).collect();
        let images = set.images.gather_rows(&indices)?;
        let preds = net.predict(&images)?;
        correct += preds
            .iter()
            .zip(&labels[at..hi])
            .filter(|(p, l)| p == l)
            .count();
        at = hi;
    }
    Ok(correct as Real / n as Real)
}

/// Train until the accuracy floor is met on the test set (checked after each
/// epoch); errors if the budget runs out first.
pub fn train_reference_classifier(
    train: &ImageSet,
    test: &ImageSet,
    seed: u64,
    opts: &ClassifierOptions,
) -> Result<(ClassifierNet, Real)> {
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("classifier training needs labels".into()))?;
    let mut net = ClassifierNet::new(seed);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Stream::Classifier, 1);

    for epoch in 0..opts.epochs {
        // fresh shuffle each epoch
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(opts.batch_size) {
            let images = train.images.gather_rows(chunk)?;
            let batch_labels: Vec<u32> = chunk.iter().map(|&i| labels[i] as u32).collect();
            let mut tape = Tape::new();
            let x = tape.input(images);
            let logits = net.forward(&mut tape, x)?;
            let loss = tape.softmax_cross_entropy(logits, &batch_labels)?;
            let grads = tape.backward(loss, BackwardOpts::PARAMS)?;
            for p in net.params_mut() {
                if let Some(g) = grads.param(p.id()) {
                    p.adam_step(g).map_err(|e| Error::Numeric {
                        network: format!("classifier/{}", p.name()),
                        iteration: epoch as u64,
                        detail: e.to_string(),
                    })?;
                }
            }
        }
        let acc = classifier_accuracy(&net, test, opts.eval_limit)?;
        if acc >= opts.accuracy_floor {
            return Ok((net, acc));
        }
    }
    let acc = classifier_accuracy(&net, test, opts.eval_limit)?;
    Err(Error::Contract(format!(
        "classifier reached {acc:.4} after {} epochs, below the {:.3} floor; increase the epoch budget",
        opts.epochs, opts.accuracy_floor
    )))
}
