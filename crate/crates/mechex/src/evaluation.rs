//! The measurement battery: assignment matrices, specialization scoring,
//! classifier-accuracy recovery, cross-domain generalization, and mechanism
//! composition.
//!
//! Everything here is read-only over the committee. Expert selection always
//! goes through discriminator scores — exactly the signal available at
//! deployment — while the sealed mechanism ids are used only to group results
//! for reporting.

use serde::{Deserialize, Serialize};

use crate::competition::{probe_scores, select_winners, ExpertCommittee};
use crate::error::{Error, Result};
use crate::mechanisms::{apply_batch, Mechanism};
use crate::models::{classifier_accuracy, ClassifierNet, ExpertNet};
use crate::dataset::ImageSet;
use crate::tensor::{Real, Tape, Tensor};

/// Rows are mechanisms, columns experts; each entry is the proportion of that
/// mechanism's held-out examples won by that expert.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    pub mechanism_ids: Vec<String>,
    pub rows: Vec<Vec<Real>>,
}

impl AssignmentMatrix {
    pub fn expert_count(&self) -> usize {
        self.rows.first().map(|r| r.len()).unwrap_or(0)
    }
}

/// Winner proportions per mechanism over held-out sets, selected by
/// discriminator score exactly as during training.
pub fn assignment_matrix(
    committee: &ExpertCommittee,
    per_mechanism: &[(Mechanism, Tensor)],
    chunk: usize,
) -> Result<AssignmentMatrix> {
    if per_mechanism.is_empty() {
        return Err(Error::Contract("assignment_matrix with no held-out sets".into()));
    }
    let n_experts = committee.expert_count();
    let mut rows = Vec::with_capacity(per_mechanism.len());
    let mut ids = Vec::with_capacity(per_mechanism.len());
    for (mechanism, images) in per_mechanism {
        if images.shape()[0] == 0 {
            return Err(Error::Contract(format!(
                "empty held-out set for {}",
                mechanism.id()
            )));
        }
        let winners = select_winners(&probe_scores(committee, images, chunk)?)?;
        let mut counts = vec![0usize; n_experts];
        for w in &winners {
            counts[*w] += 1;
        }
        let total = winners.len() as Real;
        rows.push(counts.into_iter().map(|c| c as Real / total).collect());
        ids.push(mechanism.id().to_string());
    }
    Ok(AssignmentMatrix {
        mechanism_ids: ids,
        rows,
    })
}

/// Result of matching each mechanism to its dominant expert.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Matching {
    /// Expert index per mechanism row.
    pub matched_expert: Vec<usize>,
    /// Mean matched proportion, in [0, 1].
    pub score: Real,
    /// True when no expert is matched to two mechanisms.
    pub injective: bool,
}

/// Greedy row-wise matching: each mechanism is matched to the expert winning
/// the largest share of its data (ties to the lowest index). The matching is
/// flagged non-injective when one expert dominates several mechanisms.
pub fn specialization_score(matrix: &AssignmentMatrix) -> Matching {
    let mut matched = Vec::with_capacity(matrix.rows.len());
    let mut total = 0.0;
    for row in &matrix.rows {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        total += row[best];
        matched.push(best);
    }
    let mut seen = vec![false; matrix.expert_count()];
    let mut injective = true;
    for &m in &matched {
        if seen[m] {
            injective = false;
        }
        seen[m] = true;
    }
    Matching {
        matched_expert: matched,
        score: total / matrix.rows.len() as Real,
        injective,
    }
}

/// Classifier accuracy on (a) the transformed test digits, (b) the same
/// digits after the highest-scoring expert's restoration, (c) the original
/// digits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyTriple {
    pub acc_transformed: Real,
    pub acc_expert_output: Real,
    pub acc_original: Real,
}

/// Restore every image with its score-selected expert, in chunks. Returns
/// the restored stack, in input order.
pub fn restore_with_committee(
    committee: &ExpertCommittee,
    images: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    use rayon::prelude::*;
    let n = images.shape()[0];
    let n_experts = committee.expert_count();
    let mut restored: Vec<Tensor> = Vec::with_capacity(n);
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let indices: Vec<usize> = (at..hi).collect();
        let batch = images.gather_rows(&indices)?;
        // one forward per expert, scored by the discriminator on the spot
        let passes: Vec<(Tensor, Vec<Real>)> = committee
            .experts
            .par_iter()
            .map(|expert| -> Result<(Tensor, Vec<Real>)> {
                let mut tape = Tape::new();
                let x = tape.input(batch.clone());
                let out = expert.forward_eval(&mut tape, x)?;
                let s = committee.discriminator.forward(&mut tape, out)?;
                Ok((tape.value(out).clone(), tape.value(s).data().to_vec()))
            })
            .collect::<Result<_>>()?;
        let bs = hi - at;
        let mut score_data = vec![0.0; bs * n_experts];
        for (j, (_, s)) in passes.iter().enumerate() {
            for b in 0..bs {
                score_data[b * n_experts + j] = s[b];
            }
        }
        let winners = select_winners(&Tensor::new(vec![bs, n_experts], score_data)?)?;
        for (b, &w) in winners.iter().enumerate() {
            restored.push(passes[w].0.slice_one(b)?);
        }
        at = hi;
    }
    Tensor::concat_rows(&restored)
}

fn expert_forward(expert: &ExpertNet, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(images.clone());
    let out = expert.forward_eval(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

/// The three accuracies of the recovery experiment. Labels come from the
/// test partition; expert selection never sees them.
pub fn accuracy_recovery(
    committee: &ExpertCommittee,
    classifier: &ClassifierNet,
    transformed_test: &ImageSet,
    original_test: &ImageSet,
    chunk: usize,
) -> Result<AccuracyTriple> {
    let acc_transformed = classifier_accuracy(classifier, transformed_test, usize::MAX)?;
    let acc_original = classifier_accuracy(classifier, original_test, usize::MAX)?;
    let restored = restore_with_committee(committee, &transformed_test.images, chunk)?;
    let restored_set = ImageSet::new(
        restored.map(|v| v.clamp(0.0, 1.0)),
        transformed_test.labels.clone(),
        transformed_test.source,
    )?;
    let acc_expert_output = classifier_accuracy(classifier, &restored_set, usize::MAX)?;
    Ok(AccuracyTriple {
        acc_transformed,
        acc_expert_output,
        acc_original,
    })
}

/// Experts x mechanisms grid of restoration error on out-of-domain images,
/// plus a rendered sample strip per cell row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizationGrid {
    pub mechanism_ids: Vec<String>,
    /// `mse[expert][mechanism]`
    pub mse: Vec<Vec<Real>>,
}

/// Apply every expert to every mechanism's transformed batch. The reference
/// for invertible mechanisms is the exact inverse applied to the transformed
/// image (identical to the original away from borders); noise has no inverse,
/// so the clean original serves as reference.
pub fn generalization_grid(
    committee: &ExpertCommittee,
    images: &Tensor,
    mechanisms: &[Mechanism],
    seed: u64,
) -> Result<GeneralizationGrid> {
    let mut mse = vec![Vec::with_capacity(mechanisms.len()); committee.expert_count()];
    let mut ids = Vec::with_capacity(mechanisms.len());
    for (mi, mechanism) in mechanisms.iter().enumerate() {
        ids.push(mechanism.id().to_string());
        let transformed = apply_batch(*mechanism, images, seed, (mi * images.shape()[0]) as u64)?;
        let reference = match mechanism.exact_inverse() {
            Some(inverse) => apply_batch(inverse, &transformed, seed, 0)?,
            None => images.clone(),
        };
        for (j, expert) in committee.experts.iter().enumerate() {
            let restored = expert_forward(expert, &transformed)?;
            let err = mean_squared_error(restored.data(), reference.data());
            mse[j].push(err);
        }
    }
    Ok(GeneralizationGrid {
        mechanism_ids: ids,
        mse,
    })
}

pub fn mean_squared_error(a: &[Real], b: &[Real]) -> Real {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Real>()
        / a.len() as Real
}

/// Result of undoing a mechanism chain with the matched experts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionResult {
    pub chain: Vec<String>,
    /// MSE against the clean originals after each recovery stage; the last
    /// entry is the final error.
    pub stage_mse: Vec<Real>,
    pub final_mse: Real,
}

/// Transform clean images by the chain (left to right), then apply the
/// matched expert of each mechanism's exact inverse in reverse chain order.
/// Requires every chained mechanism to be matched.
pub fn composition_eval(
    committee: &ExpertCommittee,
    matrix: &AssignmentMatrix,
    matching: &Matching,
    images: &Tensor,
    chain: &[Mechanism],
    seed: u64,
) -> Result<(CompositionResult, Vec<Tensor>)> {
    let mut current = images.clone();
    if chain.is_empty() {
        return Ok((
            CompositionResult {
                chain: vec![],
                stage_mse: vec![],
                final_mse: 0.0,
            },
            vec![current],
        ));
    }
    for (ci, m) in chain.iter().enumerate() {
        current = apply_batch(*m, &current, seed, (ci * images.shape()[0]) as u64)?;
    }
    let mut stages = vec![current.clone()];
    let mut stage_mse = Vec::new();
    for m in chain.iter().rev() {
        let row = matrix
            .mechanism_ids
            .iter()
            .position(|id| id == m.id())
            .ok_or_else(|| {
                Error::Contract(format!("chain mechanism `{}` missing from the matrix", m.id()))
            })?;
        let expert_index = matching.matched_expert[row];
        let expert = &committee.experts[expert_index];
        current = expert_forward(expert, &current)?.map(|v| v.clamp(0.0, 1.0));
        stage_mse.push(mean_squared_error(current.data(), images.data()));
        stages.push(current.clone());
    }
    let final_mse = *stage_mse.last().unwrap();
    Ok((
        CompositionResult {
            chain: chain.iter().map(|m| m.id().to_string()).collect(),
            stage_mse,
            final_mse,
        },
        stages,
    ))
}

/// Build one held-out transformed set per mechanism from a clean test set.
pub fn held_out_sets(
    test: &ImageSet,
    mechanisms: &[Mechanism],
    per_mechanism: usize,
    seed: u64,
) -> Result<Vec<(Mechanism, Tensor)>> {
    let n = test.len().min(per_mechanism);
    let indices: Vec<usize> = (0..n).collect();
    let base = test.images.gather_rows(&indices)?;
    mechanisms
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let t = apply_batch(m, &base, seed, (1_000_000 + mi * n) as u64)?;
            Ok((m, t))
        })
        .collect()
}

/// A transformed test set labelled per example by a uniformly drawn
/// mechanism, mirroring the training mixture; used for the accuracy triple.
pub fn mixed_transformed_test(
    test: &ImageSet,
    mechanisms: &[Mechanism],
    seed: u64,
) -> Result<ImageSet> {
    use rand::Rng;
    let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Eval, 0);
    let n = test.len();
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let m = mechanisms[rng.random_range(0..mechanisms.len())];
        let img = test.images.slice_one(i)?;
        let mut noise_rng = crate::rng::stream_rng(seed, crate::rng::Stream::Eval, 1 + i as u64);
        parts.push(m.apply(&img, &mut noise_rng)?);
    }
    let images = Tensor::concat_rows(&parts)?;
    ImageSet::new(images, test.labels.clone(), test.source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<Real>>) -> AssignmentMatrix {
        AssignmentMatrix {
            mechanism_ids: (0..rows.len()).map(|i| format!("m{i}")).collect(),
            rows,
        }
    }

    #[test]
    fn identity_permutation_scores_one_and_is_injective() {
        let mut rows = vec![vec![0.0; 10]; 10];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let m = specialization_score(&matrix(rows));
        assert_eq!(m.score, 1.0);
        assert!(m.injective);
        assert_eq!(m.matched_expert, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_matrix_scores_one_over_n() {
        let rows = vec![vec![0.1; 10]; 10];
        let m = specialization_score(&matrix(rows));
        assert!((m.score - 0.1).abs() < 1e-6);
    }

    #[test]
    fn expert_owning_two_rows_is_flagged_non_injective() {
        let rows = vec![
            vec![0.9, 0.05, 0.05],
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.1, 0.8],
        ];
        let m = specialization_score(&matrix(rows));
        assert!(!m.injective);
        assert_eq!(m.matched_expert, vec![0, 0, 2]);
    }

    #[test]
    fn specialization_score_is_permutation_equivariant() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(3, crate::rng::Stream::Eval, 9);
        let n = 6;
        let rows: Vec<Vec<Real>> = (0..n)
            .map(|_| {
                let mut row: Vec<Real> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: Real = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            })
            .collect();
        let base = specialization_score(&matrix(rows.clone()));

        // rotate the expert columns by 2
        let permuted: Vec<Vec<Real>> = rows
            .iter()
            .map(|row| (0..n).map(|j| row[(j + 2) % n]).collect())
            .collect();
        let perm = specialization_score(&matrix(permuted));
        assert!((base.score - perm.score).abs() < 1e-6);
        for (a, b) in base.matched_expert.iter().zip(&perm.matched_expert) {
            assert_eq!((*a + n - 2) % n, *b);
        }
    }

    #[test]
    fn composition_with_empty_chain_is_identity() {
        let committee = crate::competition::ExpertCommittee::new(
            vec![crate::models::build_expert(32, 1).unwrap()],
            crate::models::build_discriminator(2),
        )
        .unwrap();
        let m = matrix(vec![vec![1.0]]);
        let matching = specialization_score(&m);
        let images = Tensor::full(vec![2, 1, 16, 16], 0.25);
        let (result, stages) =
            composition_eval(&committee, &m, &matching, &images, &[], 0).unwrap();
        assert_eq!(result.final_mse, 0.0);
        assert_eq!(stages.len(), 1);
        assert_eq!(stages[0].data(), images.data());
    }

    #[test]
    fn mean_squared_error_basics() {
        assert_eq!(mean_squared_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((mean_squared_error(&[1.0, 0.0], &[0.0, 0.0]) - 0.5).abs() < 1e-7);
    }
}
