//! Network constructors: experts, discriminator, reference classifier, and
//! identity pretraining.
//!
//! An expert is five 3x3 conv layers (four `conv -> BN -> ELU` blocks at the
//! configured width, then `conv -> sigmoid` down to one channel), fully
//! convolutional so the same weights run on any image size. The
//! discriminator follows the fixed table: three conv/ELU stacks interleaved
//! with 2x2 average pooling, then FC 1024 and a sigmoid score; its FC layer
//! pins the input to 32x32.

use rand::Rng;

use crate::dataset::sample_minibatch;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, SeedRng, Stream};
use crate::tensor::adam::ADAM_LR;
use crate::tensor::checkpoint::{self, ADAM_PREFIX, BN_STAT_PREFIX};
use crate::tensor::{Mode, Param, Real, TRef, Tape, Tensor};

mod classifier;
pub use classifier::{classifier_accuracy, train_reference_classifier, ClassifierNet, ClassifierOptions};

pub const BN_MOMENTUM: Real = 0.1;
pub const BN_EPSILON: Real = 1e-5;
pub const EXPERT_FILTER_CHOICES: [usize; 3] = [32, 64, 128];

/// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut SeedRng) -> Tensor {
    let bound = (6.0 / fan_in as Real).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-bound..bound) as Real)
        .collect();
    Tensor::new(shape, data).expect("static shape")
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    fn new(name: &str, cin: usize, cout: usize, lr: Real, rng: &mut SeedRng) -> Self {
        Conv2d {
            weight: Param::new(
                format!("{name}/weight"),
                kaiming_uniform(vec![cout, cin, 3, 3], cin * 9, rng),
                lr,
            ),
            bias: Param::new(format!("{name}/bias"), Tensor::zeros(vec![cout]), lr),
        }
    }

    fn forward(&self, tape: &mut Tape, x: TRef) -> Result<TRef> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, b)
    }
}

pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    name: String,
    running_mean: Vec<Real>,
    running_var: Vec<Real>,
    batches_seen: u64,
}

impl BatchNorm2d {
    fn new(name: &str, channels: usize, lr: Real) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}/gamma"), Tensor::full(vec![channels], 1.0), lr),
            beta: Param::new(format!("{name}/beta"), Tensor::zeros(vec![channels]), lr),
            name: name.to_string(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            batches_seen: 0,
        }
    }

    fn forward(&mut self, tape: &mut Tape, x: TRef, mode: Mode) -> Result<TRef> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        match mode {
            Mode::Train => {
                let (out, mean, var) =
                    tape.batch_norm(x, gamma, beta, BN_EPSILON, Mode::Train, None)?;
                // unbiased variance for the running estimate
                let xs = tape.value(x).shape();
                let n = (xs[0] * xs[2] * xs[3]) as Real;
                let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for c in 0..mean.len() {
                    self.running_mean[c] =
                        (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
                    self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c]
                        + BN_MOMENTUM * var[c] * correction;
                }
                self.batches_seen += 1;
                Ok(out)
            }
            Mode::Eval => {
                if self.batches_seen == 0 {
                    return Err(Error::Contract(format!(
                        "{}: eval-mode batch_norm before any train-mode call",
                        self.name
                    )));
                }
                let (out, _, _) = tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    BN_EPSILON,
                    Mode::Eval,
                    Some((&self.running_mean, &self.running_var)),
                )?;
                Ok(out)
            }
        }
    }

    fn stat_entries(&self) -> Vec<(String, Tensor)> {
        vec![
            (
                format!("{BN_STAT_PREFIX}{}/mean", self.name),
                Tensor::new(vec![self.running_mean.len()], self.running_mean.clone()).unwrap(),
            ),
            (
                format!("{BN_STAT_PREFIX}{}/var", self.name),
                Tensor::new(vec![self.running_var.len()], self.running_var.clone()).unwrap(),
            ),
            (
                format!("{BN_STAT_PREFIX}{}/count", self.name),
                Tensor::scalar_value(self.batches_seen as Real),
            ),
        ]
    }

    fn load_stat(&mut self, suffix: &str, tensor: &Tensor) -> Result<()> {
        match suffix {
            "mean" => self.running_mean = tensor.data().to_vec(),
            "var" => self.running_var = tensor.data().to_vec(),
            "count" => self.batches_seen = tensor.scalar()? as u64,
            other => {
                return Err(Error::Contract(format!(
                    "unknown bn_stat field `{other}` for {}",
                    self.name
                )))
            }
        }
        Ok(())
    }
}

pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    fn new(name: &str, fan_in: usize, fan_out: usize, lr: Real, rng: &mut SeedRng) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}/weight"),
                kaiming_uniform(vec![fan_out, fan_in], fan_in, rng),
                lr,
            ),
            bias: Param::new(format!("{name}/bias"), Tensor::zeros(vec![fan_out]), lr),
        }
    }

    fn forward(&self, tape: &mut Tape, x: TRef) -> Result<TRef> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(x, w, b)
    }
}

// ---------------------------------------------------------------------------
// Expert
// ---------------------------------------------------------------------------

/// Fully convolutional image-to-image network with a sigmoid head.
pub struct ExpertNet {
    blocks: Vec<(Conv2d, BatchNorm2d)>,
    head: Conv2d,
    pub filters: usize,
    /// Receptive-field variant: pool after the first two blocks, upsample
    /// after the next two. Input sides must then be divisible by 4.
    pub pooled: bool,
}

/// Expert with the given per-layer filter count, deterministic under `seed`.
pub fn build_expert(filters: usize, seed: u64) -> Result<ExpertNet> {
    build_expert_variant(filters, seed, false)
}

pub fn build_expert_variant(filters: usize, seed: u64, pooled: bool) -> Result<ExpertNet> {
    if !EXPERT_FILTER_CHOICES.contains(&filters) {
        return Err(Error::Config(format!(
            "expert filters must be one of {EXPERT_FILTER_CHOICES:?}, got {filters}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let mut blocks = Vec::with_capacity(4);
    for i in 0..4 {
        let cin = if i == 0 { 1 } else { filters };
        blocks.push((
            Conv2d::new(&format!("conv{}", i + 1), cin, filters, ADAM_LR, &mut rng),
            BatchNorm2d::new(&format!("bn{}", i + 1), filters, ADAM_LR),
        ));
    }
    let head = Conv2d::new("conv5", filters, 1, ADAM_LR, &mut rng);
    Ok(ExpertNet {
        blocks,
        head,
        filters,
        pooled,
    })
}

impl ExpertNet {
    /// Forward pass with train-mode batch statistics (updates running stats).
    pub fn forward_train(&mut self, tape: &mut Tape, x: TRef) -> Result<TRef> {
        self.forward_inner(tape, x, Mode::Train)
    }

    /// Forward pass normalizing with running statistics; read-only.
    pub fn forward_eval(&self, tape: &mut Tape, x: TRef) -> Result<TRef> {
        let mut h = x;
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            h = conv.forward(tape, h)?;
            h = bn_eval(bn, tape, h)?;
            h = tape.elu(h);
            if self.pooled && i <= 1 {
                h = tape.avg_pool2(h)?;
            }
            if self.pooled && i >= 2 {
                h = tape.upsample2(h)?;
            }
        }
        h = self.head.forward(tape, h)?;
        Ok(tape.sigmoid(h))
    }

    fn forward_inner(&mut self, tape: &mut Tape, x: TRef, mode: Mode) -> Result<TRef> {
        let mut h = x;
        for (i, (conv, bn)) in self.blocks.iter_mut().enumerate() {
            h = conv.forward(tape, h)?;
            h = bn.forward(tape, h, mode)?;
            h = tape.elu(h);
            if self.pooled && i <= 1 {
                h = tape.avg_pool2(h)?;
            }
            if self.pooled && i >= 2 {
                h = tape.upsample2(h)?;
            }
        }
        h = self.head.forward(tape, h)?;
        Ok(tape.sigmoid(h))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for (conv, bn) in &self.blocks {
            out.extend([&conv.weight, &conv.bias, &bn.gamma, &bn.beta]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for (conv, bn) in &mut self.blocks {
            out.extend([&mut conv.weight, &mut conv.bias, &mut bn.gamma, &mut bn.beta]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// Total trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    /// Conv-weight scalar count only (no biases, no BN).
    pub fn conv_weight_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|(c, _)| c.weight.value().len())
            .sum::<usize>()
            + self.head.weight.value().len()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut entries = param_entries(&self.params());
        for (_, bn) in &self.blocks {
            entries.extend(bn.stat_entries());
        }
        checkpoint::write_tensors(path, &entries)
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        let entries = checkpoint::read_tensors(path)?;
        let mut bn_stats = Vec::new();
        restore_params(&entries, &mut self.params_mut(), &mut bn_stats)?;
        for (name, tensor) in bn_stats {
            let rest = &name[BN_STAT_PREFIX.len()..];
            let (bn_name, field) = rest
                .rsplit_once('/')
                .ok_or_else(|| Error::Contract(format!("bad bn_stat name `{name}`")))?;
            let bn = self
                .blocks
                .iter_mut()
                .map(|(_, bn)| bn)
                .find(|bn| bn.name == bn_name)
                .ok_or_else(|| Error::Contract(format!("no batch-norm layer `{bn_name}`")))?;
            bn.load_stat(field, &tensor)?;
        }
        Ok(())
    }
}

fn bn_eval(bn: &BatchNorm2d, tape: &mut Tape, x: TRef) -> Result<TRef> {
    if bn.batches_seen == 0 {
        return Err(Error::Contract(format!(
            "{}: eval-mode batch_norm before any train-mode call",
            bn.name
        )));
    }
    let gamma = tape.param(&bn.gamma);
    let beta = tape.param(&bn.beta);
    let (out, _, _) = tape.batch_norm(
        x,
        gamma,
        beta,
        BN_EPSILON,
        Mode::Eval,
        Some((&bn.running_mean, &bn.running_var)),
    )?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

pub const DISCRIMINATOR_INPUT_SIDE: usize = 32;
const DISC_CHANNELS: [usize; 7] = [16, 16, 16, 32, 32, 64, 64];
const DISC_FC_WIDTH: usize = 1024;

/// Scalar-score CNN over 32x32 images: `[3x3,16]x3, pool, [3x3,32]x2, pool,
/// [3x3,64]x2, pool, FC 1024, FC 1`, ELU activations, sigmoid output, no BN.
pub struct DiscriminatorNet {
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

pub fn build_discriminator(seed: u64) -> DiscriminatorNet {
    build_discriminator_with_lr(seed, ADAM_LR)
}

pub fn build_discriminator_with_lr(seed: u64, lr: Real) -> DiscriminatorNet {
    let mut rng = stream_rng(seed, Stream::Init, 1);
    let mut convs = Vec::with_capacity(7);
    let mut cin = 1;
    for (i, &cout) in DISC_CHANNELS.iter().enumerate() {
        convs.push(Conv2d::new(&format!("conv{}", i + 1), cin, cout, lr, &mut rng));
        cin = cout;
    }
    // 32 -> 16 -> 8 -> 4 across the three pools, so the flat width is 64*4*4.
    let fc_in = DISC_CHANNELS[6] * 4 * 4;
    let fc1 = Linear::new("fc1", fc_in, DISC_FC_WIDTH, lr, &mut rng);
    let fc2 = Linear::new("fc2", DISC_FC_WIDTH, 1, lr, &mut rng);
    DiscriminatorNet { convs, fc1, fc2 }
}

impl DiscriminatorNet {
    /// Scores in (0,1), shape `[batch, 1]`. Input must be `[b, 1, 32, 32]`.
    pub fn forward(&self, tape: &mut Tape, x: TRef) -> Result<TRef> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4
            || shape[1] != 1
            || shape[2] != DISCRIMINATOR_INPUT_SIDE
            || shape[3] != DISCRIMINATOR_INPUT_SIDE
        {
            return Err(Error::shape(
                "discriminator",
                format!("want [B,1,{DISCRIMINATOR_INPUT_SIDE},{DISCRIMINATOR_INPUT_SIDE}], got {shape:?}"),
            ));
        }
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, h)?;
            h = tape.elu(h);
            // pool after conv 3, 5 and 7
            if i == 2 || i == 4 || i == 6 {
                h = tape.avg_pool2(h)?;
            }
        }
        h = tape.flatten(h)?;
        h = self.fc1.forward(tape, h)?;
        h = tape.elu(h);
        h = self.fc2.forward(tape, h)?;
        Ok(tape.sigmoid(h))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for conv in &self.convs {
            out.extend([&conv.weight, &conv.bias]);
        }
        out.extend([&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for conv in &mut self.convs {
            out.extend([&mut conv.weight, &mut conv.bias]);
        }
        out.extend([
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]);
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::write_tensors(path, &param_entries(&self.params()))
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        let entries = checkpoint::read_tensors(path)?;
        restore_params(&entries, &mut self.params_mut(), &mut Vec::new())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing shared by all networks
// ---------------------------------------------------------------------------

fn param_entries(params: &[&Param]) -> Vec<(String, Tensor)> {
    let mut entries = Vec::with_capacity(params.len() * 4);
    for p in params {
        entries.push((p.name().to_string(), p.value().clone()));
    }
    for p in params {
        let s = p.state();
        entries.push((format!("{ADAM_PREFIX}{}/m", p.name()), s.m.clone()));
        entries.push((format!("{ADAM_PREFIX}{}/v", p.name()), s.v.clone()));
        entries.push((
            format!("{ADAM_PREFIX}{}/t", p.name()),
            Tensor::scalar_value(s.t as Real),
        ));
    }
    entries
}

fn restore_params(
    entries: &[(String, Tensor)],
    params: &mut [&mut Param],
    bn_stats_out: &mut Vec<(String, Tensor)>,
) -> Result<()> {
    use std::collections::HashMap;
    let by_name: HashMap<&str, &Tensor> =
        entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for p in params.iter_mut() {
        let name = p.name().to_string();
        let value = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Contract(format!("checkpoint missing parameter `{name}`")))?;
        p.set_value((*value).clone())?;
        if let Some(m) = by_name.get(format!("{ADAM_PREFIX}{name}/m").as_str()) {
            p.state_mut().m = (*m).clone();
        }
        if let Some(v) = by_name.get(format!("{ADAM_PREFIX}{name}/v").as_str()) {
            p.state_mut().v = (*v).clone();
        }
        if let Some(t) = by_name.get(format!("{ADAM_PREFIX}{name}/t").as_str()) {
            p.state_mut().t = t.scalar()? as u64;
        }
    }
    for (name, tensor) in entries {
        if name.starts_with(BN_STAT_PREFIX) {
            bn_stats_out.push((name.clone(), tensor.clone()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Identity pretraining
// ---------------------------------------------------------------------------

pub struct PretrainOptions {
    pub max_iterations: u64,
    pub mse_target: Real,
    pub batch_size: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            max_iterations: 500,
            mse_target: 0.002,
            batch_size: 32,
        }
    }
}

/// Train the expert to reproduce its input on minibatches drawn from the
/// transformed set, stopping at the MSE target or the iteration cap. Returns
/// the final training-batch MSE.
pub fn pretrain_identity(
    expert: &mut ExpertNet,
    transformed_images: &Tensor,
    opts: &PretrainOptions,
    rng: &mut SeedRng,
) -> Result<Real> {
    let mut last_mse = Real::INFINITY;
    for iteration in 0..opts.max_iterations {
        let batch = sample_minibatch(transformed_images, opts.batch_size, rng)?;
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let out = expert.forward_train(&mut tape, x)?;
        let loss = tape.mse(out, &batch)?;
        last_mse = tape.value(loss).scalar()?;
        if !last_mse.is_finite() || last_mse > 10.0 {
            return Err(Error::Numeric {
                network: "expert-pretrain".into(),
                iteration,
                detail: format!("identity pretraining diverged (mse {last_mse})"),
            });
        }
        if last_mse < opts.mse_target {
            return Ok(last_mse);
        }
        let grads = tape.backward(loss, crate::tensor::tape::BackwardOpts::PARAMS)?;
        for p in expert.params_mut() {
            if let Some(g) = grads.param(p.id()) {
                p.adam_step(g).map_err(|e| Error::Numeric {
                    network: format!("expert-pretrain/{}", p.name()),
                    iteration,
                    detail: e.to_string(),
                })?;
            }
        }
    }
    Ok(last_mse)
}

/// Mean squared reconstruction error of the expert on a full image stack,
/// eval-mode batch norm.
pub fn reconstruction_mse(expert: &ExpertNet, images: &Tensor) -> Result<Real> {
    let mut tape = Tape::new();
    let x = tape.input(images.clone());
    let out = expert.forward_eval(&mut tape, x)?;
    let loss = tape.mse(out, images)?;
    tape.value(loss).scalar()
}

/// Convenience for tests and examples: a committee-sized batch of experts
/// pretrained in parallel.
pub fn pretrain_committee(
    experts: &mut [ExpertNet],
    transformed_images: &Tensor,
    opts: &PretrainOptions,
    master_seed: u64,
) -> Result<Vec<Real>> {
    use rayon::prelude::*;
    experts
        .par_iter_mut()
        .enumerate()
        .map(|(k, expert)| {
            let mut rng = stream_rng(master_seed, Stream::Pretrain, k as u64);
            pretrain_identity(expert, transformed_images, opts, &mut rng)
        })
        .collect()
}

pub use helpers::expert_identity_check;

mod helpers {
    use super::*;

    /// Max |E(x) - x| over a batch; sanity probe for identity pretraining.
    pub fn expert_identity_check(expert: &ExpertNet, images: &Tensor) -> Result<Real> {
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let out = expert.forward_eval(&mut tape, x)?;
        Ok(crate::tensor::max_abs_diff(
            tape.value(out).data(),
            images.data(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::synthetic_digits;
    use crate::dataset::{preprocess, sample_minibatch};

    #[test]
    fn build_expert_is_deterministic_under_seed() {
        let a = build_expert(32, 11).unwrap();
        let b = build_expert(32, 11).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value().data(), pb.value().data(), "{}", pa.name());
        }
        let c = build_expert(32, 12).unwrap();
        assert_ne!(
            a.params()[0].value().data(),
            c.params()[0].value().data()
        );
    }

    #[test]
    fn expert_conv_weight_count_matches_shape_walk() {
        let e = build_expert(32, 0).unwrap();
        // shape walk: (1*32 + 32*32*3 + 32*1) kernels of 9 weights each
        let expect = (1 * 32 + 32 * 32 * 3 + 32 * 1) * 9;
        assert_eq!(e.conv_weight_count(), expect);
        // full parameter count stays within 20% of ~27K
        let total = e.parameter_count() as f64;
        assert!((total - 27_000.0).abs() / 27_000.0 < 0.20, "total {total}");
    }

    #[test]
    fn invalid_filter_width_is_rejected() {
        assert!(build_expert(48, 0).is_err());
    }

    #[test]
    fn expert_is_fully_convolutional_and_bounded() {
        let mut e = build_expert(32, 3).unwrap();
        for side in [32usize, 46] {
            let img = Tensor::full(vec![1, 1, side, side], 0.3);
            let mut tape = Tape::new();
            let x = tape.input(img);
            let out = e.forward_train(&mut tape, x).unwrap();
            assert_eq!(tape.value(out).shape(), &[1, 1, side, side]);
            assert!(tape
                .value(out)
                .data()
                .iter()
                .all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn eval_before_any_training_is_an_error() {
        let e = build_expert(32, 3).unwrap();
        let img = Tensor::full(vec![1, 1, 32, 32], 0.5);
        let mut tape = Tape::new();
        let x = tape.input(img);
        assert!(e.forward_eval(&mut tape, x).is_err());
    }

    #[test]
    fn discriminator_shape_walk_and_bounds() {
        let d = build_discriminator(5);
        // FC fan-in must be 64 channels * 4 * 4 after three pools
        assert_eq!(d.fc1.weight.value().shape(), &[1024, 1024]);

        let batch = Tensor::full(vec![32, 1, 32, 32], 0.4);
        let mut tape = Tape::new();
        let x = tape.input(batch);
        let out = d.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(out).shape(), &[32, 1]);
        assert!(tape.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));

        // same seed, same scores
        let d2 = build_discriminator(5);
        let mut tape2 = Tape::new();
        let x2 = tape2.input(Tensor::full(vec![32, 1, 32, 32], 0.4));
        let out2 = d2.forward(&mut tape2, x2).unwrap();
        assert_eq!(tape.value(out).data(), tape2.value(out2).data());
    }

    #[test]
    fn discriminator_rejects_wrong_input_size() {
        let d = build_discriminator(5);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(vec![1, 1, 46, 46], 0.4));
        assert!(d.forward(&mut tape, x).is_err());
    }

    #[test]
    fn zero_iteration_pretraining_changes_nothing() {
        let mut e = build_expert(32, 9).unwrap();
        let before: Vec<Vec<Real>> = e.params().iter().map(|p| p.value().data().to_vec()).collect();
        let images = Tensor::full(vec![4, 1, 32, 32], 0.5);
        let opts = PretrainOptions {
            max_iterations: 0,
            ..Default::default()
        };
        let mut rng = stream_rng(1, Stream::Pretrain, 0);
        pretrain_identity(&mut e, &images, &opts, &mut rng).unwrap();
        for (p, b) in e.params().iter().zip(&before) {
            assert_eq!(p.value().data(), b.as_slice());
        }
    }

    #[test]
    fn expert_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("expert.mxt");
        let mut e = build_expert(32, 21).unwrap();
        // a couple of pretraining steps so adam state and bn stats are non-trivial
        let set = preprocess(&synthetic_digits(8, 2).unwrap()).unwrap();
        let mut rng = stream_rng(2, Stream::Pretrain, 0);
        let opts = PretrainOptions {
            max_iterations: 2,
            mse_target: 0.0,
            batch_size: 4,
        };
        pretrain_identity(&mut e, &set.images, &opts, &mut rng).unwrap();
        e.save(&path).unwrap();

        let mut restored = build_expert(32, 99).unwrap();
        restored.load(&path).unwrap();
        let batch = sample_minibatch(&set.images, 4, &mut rng).unwrap();
        let a = reconstruction_mse(&e, &batch).unwrap();
        let b = reconstruction_mse(&restored, &batch).unwrap();
        assert_eq!(a, b);
        for (pa, pb) in e.params().iter().zip(restored.params()) {
            assert_eq!(pa.value().data(), pb.value().data());
            assert_eq!(pa.state().t, pb.state().t);
        }
    }
}
