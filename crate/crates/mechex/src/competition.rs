//! The winner-take-all adversarial training loop.
//!
//! Per iteration: every expert restores the same transformed minibatch (one
//! forward each, batch statistics); the discriminator scores all outputs;
//! each example's highest-scoring expert wins it. The discriminator takes one
//! Adam step on its cross-entropy objective over the real batch and all
//! expert outputs (losers included, uniformly weighted 1/n_experts), and each
//! winning expert takes one Adam step on `-log D(output)` averaged over the
//! examples it won. Both updates are computed from the same recorded forward
//! pass, so expert gradients flow through the pre-update discriminator and
//! the order of application cannot leak one update into the other.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::IterationMetrics;
use crate::models::{DiscriminatorNet, ExpertNet};
use crate::rng::{stream_rng, Stream};
use crate::tensor::tape::BackwardOpts;
use crate::tensor::{Grads, Param, Real, TRef, Tape, Tensor};

/// The experts, their shared discriminator, and the iteration counter.
pub struct ExpertCommittee {
    pub experts: Vec<ExpertNet>,
    pub discriminator: DiscriminatorNet,
    pub iteration: u64,
}

impl ExpertCommittee {
    pub fn new(experts: Vec<ExpertNet>, discriminator: DiscriminatorNet) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::Config("committee needs at least one expert".into()));
        }
        let filters = experts[0].filters;
        if experts.iter().any(|e| e.filters != filters) {
            return Err(Error::Config("experts must be identically shaped".into()));
        }
        Ok(ExpertCommittee {
            experts,
            discriminator,
            iteration: 0,
        })
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }
}

/// Per-example argmax over a `[batch, n_experts]` score matrix. Ties break
/// toward the lowest expert index; NaN anywhere is a numeric abort.
pub fn select_winners(scores: &Tensor) -> Result<Vec<usize>> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "select_winners",
            format!("want [batch, n_experts], got {shape:?}"),
        ));
    }
    let (batch, n) = (shape[0], shape[1]);
    let data = scores.data();
    let mut winners = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = &data[b * n..(b + 1) * n];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v.is_nan() {
                return Err(Error::Numeric {
                    network: format!("expert_{j}"),
                    iteration: 0,
                    detail: format!("NaN score for example {b}"),
                });
            }
            if v > row[best] {
                best = j;
            }
        }
        winners.push(best);
    }
    Ok(winners)
}

/// The discriminator objective value `mean log D(real) + (1/n) * sum_j mean
/// log(1 - fake_scores_j)`. Zero is its maximum; reported as `d_loss`.
pub fn discriminator_objective(real_scores: &[Real], fake_scores: &[&[Real]]) -> Real {
    let real: Real =
        real_scores.iter().map(|&p| p.ln()).sum::<Real>() / real_scores.len() as Real;
    let n = fake_scores.len() as Real;
    let fake: Real = fake_scores
        .iter()
        .map(|s| s.iter().map(|&p| (1.0 - p).ln()).sum::<Real>() / s.len() as Real)
        .sum::<Real>()
        / n;
    real + fake
}

/// A discriminator pass over one expert's detached outputs.
pub struct ScoredFakes {
    tape: Tape,
    input: TRef,
    scores: TRef,
}

impl ScoredFakes {
    /// Score a batch of (detached) expert outputs. The tape starts at the
    /// detachment boundary, so no gradient can reach expert parameters.
    pub fn new(discriminator: &DiscriminatorNet, fakes: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let input = tape.traced_input(fakes.clone());
        let scores = discriminator.forward(&mut tape, input)?;
        Ok(ScoredFakes { tape, input, scores })
    }

    pub fn scores(&self) -> &Tensor {
        self.tape.value(self.scores)
    }
}

/// Everything recorded while forwarding one iteration: per-expert tapes with
/// their outputs, and the discriminator passes over those outputs.
pub struct IterationState {
    expert_tapes: Vec<(Tape, TRef)>,
    scored: Vec<ScoredFakes>,
}

impl IterationState {
    /// Stacked `[batch, n_experts]` score matrix.
    pub fn score_matrix(&self) -> Result<Tensor> {
        let batch = self.scored[0].scores().shape()[0];
        let n = self.scored.len();
        let mut data = vec![0.0; batch * n];
        for (j, pass) in self.scored.iter().enumerate() {
            let s = pass.scores().data();
            for b in 0..batch {
                data[b * n + j] = s[b];
            }
        }
        Tensor::new(vec![batch, n], data)
    }

    pub fn expert_output(&self, j: usize) -> &Tensor {
        let (tape, out) = &self.expert_tapes[j];
        tape.value(*out)
    }
}

/// Forward every expert on the transformed batch (train-mode batch norm) and
/// score the outputs. Runs one worker per expert; the discriminator sees
/// detached copies of the outputs.
pub fn forward_and_score(
    committee: &mut ExpertCommittee,
    transformed_batch: &Tensor,
) -> Result<IterationState> {
    let ExpertCommittee {
        experts,
        discriminator,
        ..
    } = committee;
    let passes: Vec<(Tape, TRef, ScoredFakes)> = experts
        .par_iter_mut()
        .map(|expert| {
            let mut expert_tape = Tape::new();
            let x = expert_tape.input(transformed_batch.clone());
            let output = expert.forward_train(&mut expert_tape, x)?;
            let scored = ScoredFakes::new(discriminator, expert_tape.value(output))?;
            Ok((expert_tape, output, scored))
        })
        .collect::<Result<_>>()?;

    let mut expert_tapes = Vec::with_capacity(passes.len());
    let mut scored = Vec::with_capacity(passes.len());
    for (tape, out, s) in passes {
        expert_tapes.push((tape, out));
        scored.push(s);
    }
    Ok(IterationState { expert_tapes, scored })
}

fn apply_grads(params: &mut [&mut Param], grads: &Grads, network: &str, iteration: u64) -> Result<()> {
    for p in params.iter_mut() {
        if let Some(g) = grads.param(p.id()) {
            p.adam_step(g).map_err(|e| Error::Numeric {
                network: format!("{network}/{}", p.name()),
                iteration,
                detail: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// One discriminator Adam step ascending its objective: target 1 on the real
/// batch, target 0 on every expert's outputs weighted 1/n_experts. Returns
/// the objective value. With `split_steps`, the fake terms and the real term
/// are applied as two consecutive Adam steps (fakes first).
fn discriminator_update_inner(
    discriminator: &mut DiscriminatorNet,
    real_batch: &Tensor,
    scored: &mut [ScoredFakes],
    split_steps: bool,
    iteration: u64,
) -> Result<Real> {
    let weight = 1.0 / scored.len() as Real;

    let fake_grads: Vec<Grads> = scored
        .par_iter_mut()
        .map(|pass| {
            let zeros = Tensor::zeros(pass.scores().shape().to_vec());
            let loss = pass.tape.bce(pass.scores, &zeros)?;
            pass.tape.backward(loss, BackwardOpts::PARAMS)
        })
        .collect::<Result<_>>()?;

    let mut real_tape = Tape::new();
    let xr = real_tape.input(real_batch.clone());
    let real_scores = discriminator.forward(&mut real_tape, xr)?;
    let ones = Tensor::full(real_tape.value(real_scores).shape().to_vec(), 1.0);
    let real_loss = real_tape.bce(real_scores, &ones)?;
    let real_grads = real_tape.backward(real_loss, BackwardOpts::PARAMS)?;

    let fake_score_slices: Vec<&[Real]> = scored.iter().map(|p| p.scores().data()).collect();
    let objective = discriminator_objective(real_tape.value(real_scores).data(), &fake_score_slices);

    if split_steps {
        let mut fake_total = Grads::default();
        for g in &fake_grads {
            fake_total.add_scaled(g, weight);
        }
        apply_grads(&mut discriminator.params_mut(), &fake_total, "discriminator", iteration)?;
        apply_grads(&mut discriminator.params_mut(), &real_grads, "discriminator", iteration)?;
    } else {
        let mut total = Grads::default();
        total.add_scaled(&real_grads, 1.0);
        for g in &fake_grads {
            total.add_scaled(g, weight);
        }
        apply_grads(&mut discriminator.params_mut(), &total, "discriminator", iteration)?;
    }
    Ok(objective)
}

/// Spec-shaped discriminator step from already-detached expert outputs.
pub fn discriminator_step(
    discriminator: &mut DiscriminatorNet,
    real_batch: &Tensor,
    expert_outputs: &[Tensor],
    split_steps: bool,
) -> Result<Real> {
    if expert_outputs.is_empty() {
        return Err(Error::Contract("discriminator_step without expert outputs".into()));
    }
    let mut scored = expert_outputs
        .iter()
        .map(|out| ScoredFakes::new(discriminator, out))
        .collect::<Result<Vec<_>>>()?;
    discriminator_update_inner(discriminator, real_batch, &mut scored, split_steps, 0)
}

/// Per-expert masked update: each expert that won at least one example takes
/// one Adam step on the mean of `-log D(E(x'))` over its wins; zero-win
/// experts are untouched. Returns per-expert win counts and mean winning
/// scores.
fn expert_updates_inner(
    experts: &mut [ExpertNet],
    state: &mut IterationState,
    winners: &[usize],
    iteration: u64,
) -> Result<(Vec<u32>, Vec<Option<Real>>)> {
    let n = experts.len();
    let batch = winners.len();
    let mut masks: Vec<Vec<Real>> = vec![vec![0.0; batch]; n];
    let mut win_counts = vec![0u32; n];
    for (b, &w) in winners.iter().enumerate() {
        masks[w][b] = 1.0;
        win_counts[w] += 1;
    }
    let mean_scores: Vec<Option<Real>> = (0..n)
        .map(|j| {
            if win_counts[j] == 0 {
                return None;
            }
            let s = state.scored[j].scores().data();
            let total: Real = masks[j]
                .iter()
                .zip(s)
                .filter(|(m, _)| **m != 0.0)
                .map(|(_, v)| *v)
                .sum();
            Some(total / win_counts[j] as Real)
        })
        .collect();

    experts
        .par_iter_mut()
        .zip(state.expert_tapes.par_iter_mut())
        .zip(state.scored.par_iter_mut())
        .enumerate()
        .try_for_each(|(j, ((expert, (expert_tape, output)), pass))| -> Result<()> {
            if win_counts[j] == 0 {
                return Ok(());
            }
            // masked loss on the discriminator tape, gradient taken only at
            // the detachment boundary (discriminator parameters are frozen
            // for this step)
            let loss = pass.tape.masked_neg_log_mean(pass.scores, &masks[j])?;
            let seam = pass.tape.backward(loss, BackwardOpts::TRACED)?;
            let seed = seam
                .traced(pass.input)
                .ok_or_else(|| Error::Contract("missing seam gradient".into()))?;
            let grads = expert_tape.backward_seeded(*output, seed, BackwardOpts::PARAMS)?;
            apply_grads(&mut expert.params_mut(), &grads, &format!("expert_{j}"), iteration)
        })?;

    Ok((win_counts, mean_scores))
}

/// Spec-shaped expert step: forward, score, select, update the winners.
/// The discriminator is read-only here.
pub fn expert_step(
    committee: &mut ExpertCommittee,
    transformed_batch: &Tensor,
) -> Result<(Vec<usize>, Tensor)> {
    let mut state = forward_and_score(committee, transformed_batch)?;
    let matrix = state.score_matrix()?;
    let winners = select_winners(&matrix).map_err(|e| at_iteration(e, committee.iteration))?;
    expert_updates_inner(&mut committee.experts, &mut state, &winners, committee.iteration)?;
    Ok((winners, matrix))
}

fn at_iteration(e: Error, t: u64) -> Error {
    match e {
        Error::Numeric {
            network, detail, ..
        } => Error::Numeric {
            network,
            iteration: t,
            detail,
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IterationOptions {
    /// Apply the fake and real discriminator terms as two Adam steps instead
    /// of one combined step.
    pub split_d_steps: bool,
}

impl Default for IterationOptions {
    fn default() -> Self {
        IterationOptions {
            split_d_steps: false,
        }
    }
}

/// One full training iteration: expert forwards, scoring, winner selection,
/// discriminator step over all outputs plus the real batch, then the winning
/// experts' steps.
pub fn training_iteration(
    committee: &mut ExpertCommittee,
    canonical_batch: &Tensor,
    transformed_batch: &Tensor,
    opts: IterationOptions,
) -> Result<IterationMetrics> {
    let start = Instant::now();
    let t = committee.iteration;
    let mut state = forward_and_score(committee, transformed_batch)?;
    let matrix = state.score_matrix()?;
    let winners = select_winners(&matrix).map_err(|e| at_iteration(e, t))?;
    let d_loss = discriminator_update_inner(
        &mut committee.discriminator,
        canonical_batch,
        &mut state.scored,
        opts.split_d_steps,
        t,
    )?;
    let (win_counts, mean_winning_score) =
        expert_updates_inner(&mut committee.experts, &mut state, &winners, t)?;
    committee.iteration += 1;
    Ok(IterationMetrics {
        t: committee.iteration,
        win_counts,
        mean_winning_score,
        d_loss,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

// ---------------------------------------------------------------------------
// Probe evaluation and convergence detection
// ---------------------------------------------------------------------------

/// Eval-mode score matrix `[n, n_experts]` over an image stack, computed in
/// chunks. Read-only; this is also how held-out evaluation selects experts.
pub fn probe_scores(committee: &ExpertCommittee, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = images.shape()[0];
    let n_experts = committee.expert_count();
    let mut data = vec![0.0; n * n_experts];
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let indices: Vec<usize> = (at..hi).collect();
        let batch = images.gather_rows(&indices)?;
        let cols: Vec<Vec<Real>> = committee
            .experts
            .par_iter()
            .map(|expert| -> Result<Vec<Real>> {
                let mut tape = Tape::new();
                let x = tape.input(batch.clone());
                let out = expert.forward_eval(&mut tape, x)?;
                let scores = committee.discriminator.forward(&mut tape, out)?;
                Ok(tape.value(scores).data().to_vec())
            })
            .collect::<Result<_>>()?;
        for (j, col) in cols.iter().enumerate() {
            for (b, &v) in col.iter().enumerate() {
                data[(at + b) * n_experts + j] = v;
            }
        }
        at = hi;
    }
    Tensor::new(vec![n, n_experts], data)
}

pub fn probe_winners(committee: &ExpertCommittee, images: &Tensor, chunk: usize) -> Result<Vec<usize>> {
    select_winners(&probe_scores(committee, images, chunk)?)
}

/// Tracks winner assignments on a fixed probe set; converged once the vector
/// is identical for `window` consecutive checks.
#[derive(Debug, Clone)]
pub struct ConvergenceState {
    window: usize,
    last: Option<Vec<usize>>,
    streak: usize,
}

impl ConvergenceState {
    pub fn new(window: usize) -> Self {
        ConvergenceState {
            window,
            last: None,
            streak: 0,
        }
    }

    /// Record one check; true once assignments were identical for the whole
    /// window (a window of 1 is satisfied by any first check).
    pub fn check(&mut self, assignments: &[usize]) -> bool {
        match &self.last {
            Some(prev) if prev.as_slice() == assignments => self.streak += 1,
            _ => {
                self.last = Some(assignments.to_vec());
                self.streak = 1;
            }
        }
        self.streak >= self.window
    }
}

// ---------------------------------------------------------------------------
// The outer loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainingOptions {
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub split_d_steps: bool,
    /// Stop early once probe assignments are stable (requires a probe set).
    pub stop_on_stability: bool,
    pub probe_interval: u64,
    pub stability_window: usize,
    /// Invoke the observer's checkpoint hook every this many iterations
    /// (0 = only at the end).
    pub checkpoint_every: u64,
    /// Invoke the observer's accuracy hook every this many iterations
    /// (0 = never).
    pub accuracy_interval: u64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        TrainingOptions {
            iterations: 2000,
            batch_size: 32,
            seed: 0,
            split_d_steps: false,
            stop_on_stability: false,
            probe_interval: 20,
            stability_window: 10,
            checkpoint_every: 500,
            accuracy_interval: 0,
        }
    }
}

/// Callbacks for persistence and observability; all default to no-ops.
pub trait TrainingObserver {
    fn on_iteration(&mut self, _metrics: &IterationMetrics) -> Result<()> {
        Ok(())
    }
    /// Probe-set snapshot: winner per probe example plus the raw score
    /// matrix. Mechanism ids are sealed away from this path on purpose;
    /// joining scores to mechanisms happens in evaluation code.
    fn on_probe(&mut self, _t: u64, _winners: &[usize], _scores: &Tensor) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _committee: &ExpertCommittee, _t: u64) -> Result<()> {
        Ok(())
    }
    fn on_accuracy_point(&mut self, _committee: &ExpertCommittee, _t: u64) -> Result<()> {
        Ok(())
    }
}

pub struct NullObserver;
impl TrainingObserver for NullObserver {}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub metrics: Vec<IterationMetrics>,
    pub converged_at: Option<u64>,
}

/// Run up to `opts.iterations` iterations, sampling minibatches from the two
/// image stacks under the run seed. Fully deterministic given seed and
/// platform; aborts on the first non-finite value, after flushing metrics.
pub fn run_training(
    committee: &mut ExpertCommittee,
    canonical_images: &Tensor,
    transformed_images: &Tensor,
    probe_images: Option<&Tensor>,
    opts: &TrainingOptions,
    observer: &mut dyn TrainingObserver,
) -> Result<TrainingOutcome> {
    let mut metrics = Vec::with_capacity(opts.iterations as usize);
    let mut convergence = ConvergenceState::new(opts.stability_window);
    let mut converged_at = None;

    for _ in 0..opts.iterations {
        let t = committee.iteration;
        let mut canonical_rng = stream_rng(opts.seed, Stream::SampleCanonical, t);
        let mut transformed_rng = stream_rng(opts.seed, Stream::SampleTransformed, t);
        let canonical_batch =
            crate::dataset::sample_minibatch(canonical_images, opts.batch_size, &mut canonical_rng)?;
        let transformed_batch = crate::dataset::sample_minibatch(
            transformed_images,
            opts.batch_size,
            &mut transformed_rng,
        )?;

        let m = training_iteration(
            committee,
            &canonical_batch,
            &transformed_batch,
            IterationOptions {
                split_d_steps: opts.split_d_steps,
            },
        )?;
        observer.on_iteration(&m)?;
        metrics.push(m);
        let done = committee.iteration;

        if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 {
            observer.on_checkpoint(committee, done)?;
        }
        if opts.accuracy_interval > 0 && done % opts.accuracy_interval == 0 {
            observer.on_accuracy_point(committee, done)?;
        }
        if let Some(probe) = probe_images {
            if done % opts.probe_interval == 0 {
                let scores = probe_scores(committee, probe, opts.batch_size.max(64))?;
                let winners = select_winners(&scores).map_err(|e| at_iteration(e, done))?;
                observer.on_probe(done, &winners, &scores)?;
                if convergence.check(&winners) {
                    if converged_at.is_none() {
                        converged_at = Some(done);
                    }
                    if opts.stop_on_stability {
                        break;
                    }
                }
            }
        }
    }
    observer.on_checkpoint(committee, committee.iteration)?;
    Ok(TrainingOutcome {
        metrics,
        converged_at,
    })
}
