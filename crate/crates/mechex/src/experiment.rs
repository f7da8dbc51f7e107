//! Config-driven experiment runner: dataset build, identity pretraining,
//! competition training, the full evaluation battery, figures, and reports.
//!
//! A run owns its output directory:
//!
//! ```text
//! out/
//!   config.json            resolved config (all defaults expanded)
//!   manifest.json          split manifest
//!   metrics.jsonl          header line + one record per iteration
//!   timing.jsonl           wall-clock sidecar (the one non-deterministic log)
//!   probe_assignments.csv  iteration, example_id, winner
//!   probe_scores.csv       iteration, example_id, one score column per expert
//!   accuracy_curve.jsonl   classifier accuracy trace
//!   checkpoints/           expert_{k}.mxt, discriminator.mxt, classifier.mxt
//!   results/               matrices, matching, accuracies, grids (JSON)
//!   figures/               SVG renditions
//!   report.json            the RunReport
//! ```

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::competition::{
    run_training, ExpertCommittee, NullObserver, TrainingObserver, TrainingOptions,
};
use crate::config::{ConvergenceMode, ExperimentConfig};
use crate::dataset::{
    idx, make_split, preprocess, synthetic, ImageSet, Source, SplitManifest, TransformedSet,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    accuracy_recovery, assignment_matrix, composition_eval, generalization_grid, held_out_sets,
    mixed_transformed_test, specialization_score, AccuracyTriple, AssignmentMatrix,
};
use crate::mechanisms::{Direction, Mechanism};
use crate::metrics::{IterationMetrics, JsonlWriter, MetricsHeader};
use crate::models::{
    build_discriminator_with_lr, build_expert_variant, pretrain_committee, train_reference_classifier,
    ClassifierNet, ClassifierOptions, PretrainOptions,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub preset: String,
    pub seed: u64,
    pub config_hash: String,
    pub iterations_run: u64,
    pub convergence_iteration: Option<u64>,
    pub specialization_score: Real,
    pub injective: bool,
    /// Experts matched to more than one mechanism.
    pub overloaded_experts: usize,
    pub matched_expert: Vec<usize>,
    /// Share of all held-out examples won by each expert.
    pub expert_win_share: Vec<Real>,
    pub accuracy: Option<AccuracyTriple>,
    pub identity_pretrain_mse: Option<Vec<Real>>,
    pub wall_clock_ms: u64,
}

/// Everything the training loop and evaluation battery need, built
/// deterministically from the config.
pub struct BuiltData {
    pub train: ImageSet,
    pub test: ImageSet,
    pub canonical: ImageSet,
    pub transformed: TransformedSet,
    pub manifest: SplitManifest,
    pub probe_images: Tensor,
    /// Sealed mechanism per probe example (evaluation-side reporting only).
    pub probe_mechanisms: Vec<Mechanism>,
    pub omniglot: Option<ImageSet>,
}

/// Load (IDX or synthetic), preprocess, split, subset, and pick the probe set.
pub fn build_data(cfg: &ExperimentConfig) -> Result<BuiltData> {
    let mechanisms = cfg.mechanism_list()?;
    let (train_raw, test_raw) = if let Some(n) = cfg.data.synthetic {
        let n_test = (n / 4).max(32);
        (
            synthetic_train_set(n, cfg.seed)?,
            synthetic_test_set(n_test, cfg.seed)?,
        )
    } else {
        let root = cfg.data_root().ok_or_else(|| {
            Error::Config(format!(
                "no data root: set data.root, ${}, or data.synthetic",
                crate::config::DATA_DIR_ENV
            ))
        })?;
        (
            idx::load_idx(
                &root.join("train-images-idx3-ubyte"),
                &root.join("train-labels-idx1-ubyte"),
                Source::MnistTrain,
            )?,
            idx::load_idx(
                &root.join("t10k-images-idx3-ubyte"),
                &root.join("t10k-labels-idx1-ubyte"),
                Source::MnistTest,
            )?,
        )
    };
    let train = preprocess(&train_raw)?;
    let test = preprocess(&test_raw)?;
    let (mut canonical, transformed, manifest) = make_split(&train, &mechanisms, cfg.seed)?;

    if let Some(k) = cfg.canonical_subset_size {
        let keep: Vec<usize> = (0..canonical.len().min(k)).collect();
        canonical = canonical.subset(&keep)?;
    }

    // fixed probe set: a seeded draw of transformed examples
    let n_t = transformed.images().len();
    let probe_n = cfg.probe_size.min(n_t);
    let mut probe_rng = stream_rng(cfg.seed, Stream::Probe, 0);
    let mut order: Vec<usize> = (0..n_t).collect();
    for i in (1..order.len()).rev() {
        let j = probe_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let probe_indices = &order[..probe_n];
    let probe_images = transformed.images().images.gather_rows(probe_indices)?;
    let probe_mechanisms = transformed
        .sealed_mechanisms()
        .map(|ids| probe_indices.iter().map(|&i| ids[i]).collect())
        .unwrap_or_default();

    let omniglot = match &cfg.data.omniglot_dir {
        Some(dir) => Some(crate::dataset::omniglot::ingest_omniglot(dir)?),
        None => None,
    };

    Ok(BuiltData {
        train,
        test,
        canonical,
        transformed,
        manifest,
        probe_images,
        probe_mechanisms,
        omniglot,
    })
}

fn synthetic_train_set(n: usize, seed: u64) -> Result<ImageSet> {
    synthetic::synthetic_digits(n, seed)
}

fn synthetic_test_set(n: usize, seed: u64) -> Result<ImageSet> {
    // disjoint stream indices from the train set (same convention as the
    // IDX writer)
    let set = synthetic::synthetic_digits(n + 1_000_000, seed)?;
    set.subset(&(1_000_000..1_000_000 + n).collect::<Vec<_>>())
}

/// Fresh committee per the config: per-expert init seeds derived from the
/// master seed, discriminator learning rate scaled by `d_lr_scale`.
pub fn build_committee(cfg: &ExperimentConfig) -> Result<ExpertCommittee> {
    let experts = (0..cfg.expert_count)
        .map(|k| {
            let expert_seed: u64 = stream_rng(cfg.seed, Stream::Init, k as u64).random();
            build_expert_variant(cfg.expert_filters, expert_seed, cfg.pooled_experts)
        })
        .collect::<Result<Vec<_>>>()?;
    let d_seed: u64 = stream_rng(cfg.seed, Stream::Init, 1_000).random();
    let d_lr = crate::tensor::adam::ADAM_LR * cfg.d_lr_scale as Real;
    let discriminator = build_discriminator_with_lr(d_seed, d_lr);
    ExpertCommittee::new(experts, discriminator)
}

/// Load or train the reference classifier. A cached checkpoint at the data
/// root (or the run's checkpoint directory) is reused as-is.
pub fn obtain_classifier(
    cfg: &ExperimentConfig,
    train: &ImageSet,
    test: &ImageSet,
) -> Result<ClassifierNet> {
    let cache = classifier_cache_path(cfg);
    if let Some(path) = cache.iter().find(|p| p.exists()) {
        let mut net = ClassifierNet::new(0);
        net.load(path)?;
        return Ok(net);
    }
    let synthetic = cfg.data.synthetic.is_some();
    let opts = ClassifierOptions {
        // the glyph corpus is small and easy; the thresholds in the
        // acceptance battery apply to the real data only
        epochs: if synthetic { 15 } else { 5 },
        accuracy_floor: if synthetic { 0.95 } else { 0.988 },
        ..Default::default()
    };
    let (net, _acc) = train_reference_classifier(train, test, cfg.seed, &opts)?;
    if let Some(path) = cache.first() {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        net.save(path)?;
    }
    Ok(net)
}

fn classifier_cache_path(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let name = if cfg.data.synthetic.is_some() {
        format!("classifier-synthetic-{}.mxt", cfg.data.synthetic.unwrap())
    } else {
        "classifier.mxt".to_string()
    };
    let mut candidates = Vec::new();
    if let Some(root) = cfg.data_root() {
        candidates.push(root.join(&name));
    }
    candidates.push(cfg.out_dir.join("checkpoints").join(&name));
    candidates
}

// ---------------------------------------------------------------------------
// The file-writing observer
// ---------------------------------------------------------------------------

struct RunObserver<'a> {
    out: PathBuf,
    metrics: JsonlWriter,
    timing: std::io::BufWriter<std::fs::File>,
    assignments_csv: std::io::BufWriter<std::fs::File>,
    scores_csv: std::io::BufWriter<std::fs::File>,
    accuracy: Option<JsonlWriter>,
    classifier: Option<&'a ClassifierNet>,
    curve_transformed: Option<ImageSet>,
    curve_original: Option<ImageSet>,
    batch: usize,
}

#[derive(Serialize, Deserialize)]
struct AccuracyPoint {
    t: u64,
    acc_transformed: Real,
    acc_expert_output: Real,
    acc_original: Real,
}

impl<'a> RunObserver<'a> {
    fn new(
        out: &Path,
        config_hash: &str,
        n_experts: usize,
        classifier: Option<&'a ClassifierNet>,
        curve_transformed: Option<ImageSet>,
        curve_original: Option<ImageSet>,
        batch: usize,
    ) -> Result<Self> {
        let header = MetricsHeader {
            schema: "metrics/1".into(),
            config_hash: config_hash.to_string(),
        };
        let metrics = JsonlWriter::create(&out.join("metrics.jsonl"), &header)?;
        let timing = std::io::BufWriter::new(std::fs::File::create(out.join("timing.jsonl"))?);
        let mut assignments_csv =
            std::io::BufWriter::new(std::fs::File::create(out.join("probe_assignments.csv"))?);
        writeln!(assignments_csv, "# config_hash={config_hash}")?;
        writeln!(assignments_csv, "iteration,example_id,winner")?;
        let mut scores_csv =
            std::io::BufWriter::new(std::fs::File::create(out.join("probe_scores.csv"))?);
        writeln!(scores_csv, "# config_hash={config_hash}")?;
        let cols: Vec<String> = (0..n_experts).map(|j| format!("score_{j}")).collect();
        writeln!(scores_csv, "iteration,example_id,{}", cols.join(","))?;
        let accuracy = if classifier.is_some() {
            Some(JsonlWriter::create(
                &out.join("accuracy_curve.jsonl"),
                &MetricsHeader {
                    schema: "accuracy/1".into(),
                    config_hash: config_hash.to_string(),
                },
            )?)
        } else {
            None
        };
        Ok(RunObserver {
            out: out.to_path_buf(),
            metrics,
            timing,
            assignments_csv,
            scores_csv,
            accuracy,
            classifier,
            curve_transformed,
            curve_original,
            batch,
        })
    }

    fn write_accuracy_point(&mut self, committee: &ExpertCommittee, t: u64) -> Result<()> {
        let (Some(classifier), Some(transformed), Some(original)) = (
            self.classifier,
            self.curve_transformed.as_ref(),
            self.curve_original.as_ref(),
        ) else {
            return Ok(());
        };
        let triple = accuracy_recovery(committee, classifier, transformed, original, self.batch)?;
        if let Some(w) = &mut self.accuracy {
            w.write(&AccuracyPoint {
                t,
                acc_transformed: triple.acc_transformed,
                acc_expert_output: triple.acc_expert_output,
                acc_original: triple.acc_original,
            })?;
        }
        Ok(())
    }
}

impl TrainingObserver for RunObserver<'_> {
    fn on_iteration(&mut self, m: &IterationMetrics) -> Result<()> {
        self.metrics.write(m)?;
        writeln!(self.timing, "{{\"t\":{},\"wall_ms\":{}}}", m.t, m.wall_ms)?;
        self.timing.flush()?;
        Ok(())
    }

    fn on_probe(&mut self, t: u64, winners: &[usize], scores: &Tensor) -> Result<()> {
        let n_experts = scores.shape()[1];
        for (i, w) in winners.iter().enumerate() {
            writeln!(self.assignments_csv, "{t},{i},{w}")?;
            let row = &scores.data()[i * n_experts..(i + 1) * n_experts];
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(self.scores_csv, "{t},{i},{}", cells.join(","))?;
        }
        self.assignments_csv.flush()?;
        self.scores_csv.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, committee: &ExpertCommittee, _t: u64) -> Result<()> {
        save_committee(committee, &self.out.join("checkpoints"))
    }

    fn on_accuracy_point(&mut self, committee: &ExpertCommittee, t: u64) -> Result<()> {
        self.write_accuracy_point(committee, t)
    }
}

/// Write every network of the committee under `dir` (atomic per file).
pub fn save_committee(committee: &ExpertCommittee, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let atomic = |name: String, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let tmp = dir.join(format!(".{name}.tmp"));
        write(&tmp)?;
        std::fs::rename(&tmp, dir.join(name))?;
        Ok(())
    };
    for (k, expert) in committee.experts.iter().enumerate() {
        atomic(format!("expert_{k}.mxt"), &|p| expert.save(p))?;
    }
    atomic("discriminator.mxt".to_string(), &|p| {
        committee.discriminator.save(p)
    })?;
    Ok(())
}

/// Load a committee saved by [`save_committee`] into freshly built networks.
pub fn load_committee(cfg: &ExperimentConfig, dir: &Path) -> Result<ExpertCommittee> {
    let mut committee = build_committee(cfg)?;
    for (k, expert) in committee.experts.iter_mut().enumerate() {
        expert.load(&dir.join(format!("expert_{k}.mxt")))?;
    }
    committee.discriminator.load(&dir.join("discriminator.mxt"))?;
    Ok(committee)
}

// ---------------------------------------------------------------------------
// run_experiment
// ---------------------------------------------------------------------------

/// Execute one configured run end to end and write every artifact into the
/// config's output directory. Reruns with the same config and seed overwrite
/// deterministic artifacts identically (timing files aside).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(out.join("checkpoints"))?;
    std::fs::create_dir_all(out.join("results"))?;
    std::fs::create_dir_all(out.join("figures"))?;
    let config_hash = cfg.hash()?;
    std::fs::write(out.join("config.json"), cfg.to_json()?)?;

    let data = build_data(cfg)?;
    write_json(&out.join("manifest.json"), &data.manifest)?;

    let classifier = obtain_classifier(cfg, &data.train, &data.test)?;
    classifier.save(&out.join("checkpoints").join("classifier.mxt"))?;

    let mut committee = build_committee(cfg)?;
    let pretrain_mse = if cfg.identity_init {
        let mse = pretrain_committee(
            &mut committee.experts,
            &data.transformed.images().images,
            &PretrainOptions {
                batch_size: cfg.batch_size,
                ..Default::default()
            },
            cfg.seed,
        )?;
        Some(mse)
    } else {
        None
    };

    let mechanisms = cfg.mechanism_list()?;
    let held_out = held_out_sets(&data.test, &mechanisms, cfg.eval.held_out_per_mechanism, cfg.seed)?;

    // before-training assignment matrix (needs eval-mode batch norm, so only
    // after identity pretraining)
    if cfg.identity_init {
        let before = assignment_matrix(&committee, &held_out, cfg.batch_size.max(64))?;
        write_json(&out.join("results").join("matrix_before.json"), &before)?;
    }

    // accuracy-curve subsets
    let (curve_transformed, curve_original) = if cfg.eval.accuracy_interval > 0 {
        let k = cfg.eval.accuracy_curve_subset.min(data.test.len());
        let indices: Vec<usize> = (0..k).collect();
        let original = data.test.subset(&indices)?;
        let mixed = mixed_transformed_test(&original, &mechanisms, cfg.seed)?;
        (Some(mixed), Some(original))
    } else {
        (None, None)
    };

    let mut observer = RunObserver::new(
        &out,
        &config_hash,
        cfg.expert_count,
        Some(&classifier),
        curve_transformed,
        curve_original,
        cfg.batch_size.max(64),
    )?;
    if cfg.identity_init && cfg.eval.accuracy_interval > 0 {
        observer.write_accuracy_point(&committee, 0)?;
    }

    let train_opts = TrainingOptions {
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        split_d_steps: cfg.split_d_steps,
        stop_on_stability: matches!(cfg.convergence, ConvergenceMode::Stability),
        probe_interval: cfg.probe_interval,
        stability_window: cfg.stability_window,
        checkpoint_every: cfg.checkpoint_every,
        accuracy_interval: cfg.eval.accuracy_interval,
    };
    let outcome = run_training(
        &mut committee,
        &data.canonical.images,
        &data.transformed.images().images,
        Some(&data.probe_images),
        &train_opts,
        &mut observer,
    )?;
    drop(observer);

    let report = evaluation_battery(
        cfg,
        &data,
        &committee,
        &classifier,
        &held_out,
        &config_hash,
        outcome.converged_at,
        committee.iteration,
        pretrain_mse,
        started.elapsed().as_millis() as u64,
    )?;
    emit_figures(&out)?;
    Ok(report)
}

/// The full post-training measurement pass; also used by the `evaluate` verb
/// on reloaded checkpoints.
#[allow(clippy::too_many_arguments)]
fn evaluation_battery(
    cfg: &ExperimentConfig,
    data: &BuiltData,
    committee: &ExpertCommittee,
    classifier: &ClassifierNet,
    held_out: &[(Mechanism, Tensor)],
    config_hash: &str,
    convergence_iteration: Option<u64>,
    iterations_run: u64,
    identity_pretrain_mse: Option<Vec<Real>>,
    wall_clock_ms: u64,
) -> Result<RunReport> {
    let out = cfg.out_dir.clone();
    let results = out.join("results");
    std::fs::create_dir_all(&results)?;
    let mechanisms = cfg.mechanism_list()?;

    let matrix = assignment_matrix(committee, held_out, cfg.batch_size.max(64))?;
    write_json(&results.join("matrix_after.json"), &matrix)?;
    let matching = specialization_score(&matrix);
    write_json(&results.join("specialization.json"), &matching)?;

    // probe mechanisms for figure grouping (sealed ids surface only here)
    if !data.probe_mechanisms.is_empty() {
        let mut csv = String::from("example_id,mechanism\n");
        for (i, m) in data.probe_mechanisms.iter().enumerate() {
            csv.push_str(&format!("{i},{}\n", m.id()));
        }
        std::fs::write(out.join("results").join("probe_mechanisms.csv"), csv)?;
    }

    let mixed = mixed_transformed_test(&data.test, &mechanisms, cfg.seed)?;
    let accuracy = accuracy_recovery(committee, classifier, &mixed, &data.test, cfg.batch_size.max(64))?;
    write_json(&results.join("accuracy.json"), &accuracy)?;

    let mut composition_strip: Option<Vec<(String, Vec<Tensor>)>> = None;
    if let Some(omniglot) = &data.omniglot {
        let k = cfg.eval.generalization_batch.min(omniglot.len());
        let batch = omniglot.images.gather_rows(&(0..k).collect::<Vec<_>>())?;
        let grid = generalization_grid(committee, &batch, &mechanisms, cfg.seed)?;
        write_json(&results.join("generalization.json"), &grid)?;

        // composition: noise, then contrast inversion, then up-left shift,
        // undone by the matched experts in reverse order
        let chain = [
            Mechanism::GaussianNoise,
            Mechanism::ContrastInvert,
            Mechanism::Translate(Direction::UpLeft),
        ];
        if chain.iter().all(|m| matrix.mechanism_ids.iter().any(|id| id == m.id())) {
            let (composition, stages) =
                composition_eval(committee, &matrix, &matching, &batch, &chain, cfg.seed + 1)?;
            write_json(&results.join("composition.json"), &composition)?;
            let strip_n = k.min(8);
            let take = |t: &Tensor| -> Result<Vec<Tensor>> {
                (0..strip_n).map(|i| t.slice_one(i)).collect()
            };
            let mut rows = vec![("input (3 mechanisms)".to_string(), take(&stages[0])?)];
            for (si, stage) in stages.iter().enumerate().skip(1) {
                let undone = chain[chain.len() - si].exact_inverse();
                let label = match undone {
                    Some(m) => format!("after {} expert", m.id()),
                    None => "after denoising expert".to_string(),
                };
                rows.push((label, take(stage)?));
            }
            rows.push(("ground truth".to_string(), take(&batch)?));
            composition_strip = Some(rows);
        }
    }

    // sample strips for the generalization figure
    if let Some(omniglot) = &data.omniglot {
        let k = cfg.eval.generalization_batch.min(omniglot.len()).min(4);
        let batch = omniglot.images.gather_rows(&(0..k).collect::<Vec<_>>())?;
        let mut rows: Vec<(String, Vec<Tensor>)> = Vec::new();
        for (mi, m) in mechanisms.iter().enumerate() {
            let transformed =
                crate::mechanisms::apply_batch(*m, &batch, cfg.seed, (7_000_000 + mi * k) as u64)?;
            let row_mech = matrix.mechanism_ids.iter().position(|id| id == m.id());
            let Some(row) = row_mech else { continue };
            let expert = &committee.experts[matching.matched_expert[row]];
            let mut tape = crate::tensor::Tape::new();
            let x = tape.input(transformed.clone());
            let restored = expert.forward_eval(&mut tape, x)?;
            let restored = tape.value(restored).clone();
            let mut imgs = Vec::new();
            for i in 0..k {
                imgs.push(transformed.slice_one(i)?);
                imgs.push(restored.slice_one(i)?);
            }
            rows.push((format!("{} (in/out)", m.id()), imgs));
        }
        let svg = crate::figures::image_strip(
            "matched experts on out-of-domain letters",
            &rows,
            &format!("config_hash={config_hash}"),
        );
        crate::figures::write_svg(&out.join("figures").join("generalization_strip.svg"), &svg)?;
    }
    if let Some(rows) = composition_strip {
        let svg = crate::figures::image_strip(
            "undoing a mechanism chain with matched experts",
            &rows,
            &format!("config_hash={config_hash}"),
        );
        crate::figures::write_svg(&out.join("figures").join("composition_strip.svg"), &svg)?;
    }

    // held-out win share per expert across all mechanisms
    let n_experts = committee.expert_count();
    let mut share = vec![0.0; n_experts];
    for row in &matrix.rows {
        for (j, &v) in row.iter().enumerate() {
            share[j] += v;
        }
    }
    let rows_n = matrix.rows.len() as Real;
    share.iter_mut().for_each(|v| *v /= rows_n);

    let mut owned = vec![0usize; n_experts];
    for &m in &matching.matched_expert {
        owned[m] += 1;
    }
    let overloaded = owned.iter().filter(|&&c| c >= 2).count();

    let report = RunReport {
        preset: cfg.preset.clone(),
        seed: cfg.seed,
        config_hash: config_hash.to_string(),
        iterations_run,
        convergence_iteration,
        specialization_score: matching.score,
        injective: matching.injective,
        overloaded_experts: overloaded,
        matched_expert: matching.matched_expert.clone(),
        expert_win_share: share,
        accuracy: Some(accuracy),
        identity_pretrain_mse,
        wall_clock_ms,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Re-run the evaluation battery on a finished run directory's checkpoints.
pub fn evaluate_run(run_dir: &Path) -> Result<RunReport> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.json"))?;
    let data = build_data(&cfg)?;
    let committee = load_committee(&cfg, &run_dir.join("checkpoints"))?;
    let mut classifier = ClassifierNet::new(0);
    classifier.load(&run_dir.join("checkpoints").join("classifier.mxt"))?;
    let mechanisms = cfg.mechanism_list()?;
    let held_out = held_out_sets(&data.test, &mechanisms, cfg.eval.held_out_per_mechanism, cfg.seed)?;
    evaluation_battery(
        &cfg,
        &data,
        &committee,
        &classifier,
        &held_out,
        &cfg.hash()?,
        None,
        committee.iteration,
        None,
        0,
    )
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteRun {
    pub preset: String,
    pub seed: u64,
    pub status: String,
    pub report: Option<RunReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub runs: Vec<SuiteRun>,
    pub injective_runs: usize,
    pub failed_runs: usize,
    pub mean_specialization: Option<Real>,
    pub max_specialization: Option<Real>,
    pub mean_expert_accuracy: Option<Real>,
}

/// Run `presets x seeds`, one subdirectory per run, continuing past
/// individual failures. Writes `suite.json` under `base_out`.
pub fn run_preset_suite(
    presets: &[String],
    seeds: &[u64],
    base_out: &Path,
    customize: impl Fn(&mut ExperimentConfig),
) -> Result<SuiteReport> {
    let mut runs = Vec::new();
    for preset_name in presets {
        for &seed in seeds {
            let out = base_out.join(preset_name).join(format!("seed_{seed}"));
            let run = match crate::config::preset(preset_name, seed, out) {
                Ok(mut cfg) => {
                    customize(&mut cfg);
                    match run_experiment(&cfg) {
                        Ok(report) => SuiteRun {
                            preset: preset_name.clone(),
                            seed,
                            status: "ok".into(),
                            report: Some(report),
                        },
                        Err(e) => SuiteRun {
                            preset: preset_name.clone(),
                            seed,
                            status: format!("failed: {e}"),
                            report: None,
                        },
                    }
                }
                Err(e) => SuiteRun {
                    preset: preset_name.clone(),
                    seed,
                    status: format!("failed: {e}"),
                    report: None,
                },
            };
            eprintln!("suite: {} seed {} -> {}", preset_name, seed, run.status);
            runs.push(run);
        }
    }
    let ok: Vec<&RunReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
    let mean = |xs: &[Real]| -> Option<Real> {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<Real>() / xs.len() as Real)
        }
    };
    let scores: Vec<Real> = ok.iter().map(|r| r.specialization_score).collect();
    let accs: Vec<Real> = ok
        .iter()
        .filter_map(|r| r.accuracy.map(|a| a.acc_expert_output))
        .collect();
    let report = SuiteReport {
        injective_runs: ok.iter().filter(|r| r.injective).count(),
        failed_runs: runs.iter().filter(|r| r.report.is_none()).count(),
        mean_specialization: mean(&scores),
        max_specialization: scores.iter().cloned().reduce(Real::max),
        mean_expert_accuracy: mean(&accs),
        runs,
    };
    std::fs::create_dir_all(base_out)?;
    write_json(&base_out.join("suite.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Figures from a finished run directory
// ---------------------------------------------------------------------------

/// Render every figure the run's artifacts support. Inputs are validated
/// before any file is written.
pub fn emit_figures(run_dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.json"))?;
    let config_hash = cfg.hash()?;
    let metrics_path = run_dir.join("metrics.jsonl");
    if !metrics_path.exists() {
        return Err(Error::Data {
            path: metrics_path,
            detail: "missing metrics log (expected metrics.jsonl, results/matrix_after.json)".into(),
        });
    }
    let metrics = crate::metrics::read_metrics(&metrics_path)?;
    if metrics.is_empty() {
        return Err(Error::Data {
            path: metrics_path,
            detail: "metrics log has no iterations".into(),
        });
    }
    let figures = run_dir.join("figures");
    std::fs::create_dir_all(&figures)?;
    let comment = format!("config_hash={config_hash}");
    let mut rendered: Vec<(PathBuf, String)> = Vec::new();

    // mean winning score per expert over iterations, 50-iteration moving avg
    let n_experts = metrics[0].win_counts.len();
    let mut series = Vec::new();
    for j in 0..n_experts {
        let ys: Vec<Real> = metrics
            .iter()
            .map(|m| m.mean_winning_score[j].unwrap_or(0.0))
            .collect();
        let sm = crate::figures::moving_average(&ys, 50);
        let offset = metrics.len() - sm.len();
        series.push(crate::figures::Series {
            name: format!("expert {j}"),
            points: sm
                .iter()
                .enumerate()
                .map(|(i, &y)| (metrics[offset + i].t as Real, y))
                .collect(),
        });
    }
    rendered.push((
        figures.join("winning_scores.svg"),
        crate::figures::LineChart {
            title: "mean winning score per expert (50-iteration moving average)".into(),
            x_label: "iteration".into(),
            y_label: "discriminator score".into(),
            series,
            reference_lines: vec![],
            y_range: Some((0.0, 1.0)),
        }
        .render(),
    ));

    // discriminator objective
    let d: Vec<Real> = metrics.iter().map(|m| m.d_loss).collect();
    let sm = crate::figures::moving_average(&d, 50);
    let offset = metrics.len() - sm.len();
    rendered.push((
        figures.join("discriminator_objective.svg"),
        crate::figures::LineChart {
            title: "discriminator objective (50-iteration moving average)".into(),
            x_label: "iteration".into(),
            y_label: "objective".into(),
            series: vec![crate::figures::Series {
                name: "objective".into(),
                points: sm
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| (metrics[offset + i].t as Real, y))
                    .collect(),
            }],
            reference_lines: vec![(-(2.0f64.ln() as Real) * 2.0, "uninformative".into())],
            y_range: None,
        }
        .render(),
    ));

    // per-mechanism probe score curves
    if let Some(curves) = per_mechanism_curves(run_dir, n_experts)? {
        for (mech, series) in curves {
            rendered.push((
                figures.join(format!("scores_{mech}.svg")),
                crate::figures::LineChart {
                    title: format!("expert scores on {mech} probes"),
                    x_label: "iteration".into(),
                    y_label: "discriminator score".into(),
                    series,
                    reference_lines: vec![],
                    y_range: Some((0.0, 1.0)),
                }
                .render(),
            ));
        }
    }

    // assignment heatmaps
    for (file, title) in [
        ("matrix_before.json", "assignment before training"),
        ("matrix_after.json", "assignment after training"),
    ] {
        let path = run_dir.join("results").join(file);
        if path.exists() {
            let matrix: AssignmentMatrix = read_json(&path)?;
            let cols: Vec<String> = (0..matrix.expert_count()).map(|j| format!("E{j}")).collect();
            rendered.push((
                figures.join(file.replace(".json", ".svg")),
                crate::figures::heatmap(title, &matrix.mechanism_ids, &cols, &matrix.rows, &comment),
            ));
        }
    }

    // accuracy curve
    let acc_path = run_dir.join("accuracy_curve.jsonl");
    if acc_path.exists() {
        let text = std::fs::read_to_string(&acc_path)?;
        let points: Vec<AccuracyPoint> = text
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        if !points.is_empty() {
            let first = &points[0];
            rendered.push((
                figures.join("accuracy_recovery.svg"),
                crate::figures::LineChart {
                    title: "classifier accuracy on expert outputs".into(),
                    x_label: "iteration".into(),
                    y_label: "accuracy".into(),
                    series: vec![crate::figures::Series {
                        name: "expert outputs".into(),
                        points: points
                            .iter()
                            .map(|p| (p.t as Real, p.acc_expert_output))
                            .collect(),
                    }],
                    reference_lines: vec![
                        (first.acc_original, "original digits".into()),
                        (first.acc_transformed, "transformed digits".into()),
                    ],
                    y_range: Some((0.0, 1.0)),
                }
                .render(),
            ));
        }
    }

    for (path, svg) in rendered {
        crate::figures::write_svg(&path, &svg)?;
    }
    Ok(())
}

type MechanismCurves = Vec<(String, Vec<crate::figures::Series>)>;

/// Join probe score snapshots with the sealed probe mechanisms (written by
/// the evaluation phase) into per-mechanism expert score curves.
fn per_mechanism_curves(run_dir: &Path, n_experts: usize) -> Result<Option<MechanismCurves>> {
    let scores_path = run_dir.join("probe_scores.csv");
    let mech_path = run_dir.join("results").join("probe_mechanisms.csv");
    if !scores_path.exists() || !mech_path.exists() {
        return Ok(None);
    }
    let mech_text = std::fs::read_to_string(&mech_path)?;
    let mechanisms: Vec<String> = mech_text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1).map(str::to_string))
        .collect();
    if mechanisms.is_empty() {
        return Ok(None);
    }

    // accumulate: iteration -> mechanism -> per-expert (sum, count)
    use std::collections::BTreeMap;
    let mut acc: BTreeMap<u64, BTreeMap<String, Vec<(Real, u32)>>> = BTreeMap::new();
    let text = std::fs::read_to_string(&scores_path)?;
    for line in text.lines().skip(2) {
        let mut parts = line.split(',');
        let (Some(t), Some(id)) = (parts.next(), parts.next()) else { continue };
        let Ok(t) = t.parse::<u64>() else { continue };
        let Ok(id) = id.parse::<usize>() else { continue };
        if id >= mechanisms.len() {
            continue;
        }
        let slot = acc
            .entry(t)
            .or_default()
            .entry(mechanisms[id].clone())
            .or_insert_with(|| vec![(0.0, 0); n_experts]);
        for (j, cell) in parts.enumerate() {
            if let Ok(v) = cell.parse::<Real>() {
                if j < n_experts {
                    slot[j].0 += v;
                    slot[j].1 += 1;
                }
            }
        }
    }

    let mut mech_ids: Vec<String> = mechanisms.clone();
    mech_ids.sort();
    mech_ids.dedup();
    let mut out = Vec::new();
    for mech in mech_ids {
        let mut series: Vec<crate::figures::Series> = (0..n_experts)
            .map(|j| crate::figures::Series {
                name: format!("expert {j}"),
                points: Vec::new(),
            })
            .collect();
        for (&t, per_mech) in &acc {
            if let Some(slot) = per_mech.get(&mech) {
                for (j, &(sum, count)) in slot.iter().enumerate() {
                    if count > 0 {
                        series[j].points.push((t as Real, sum / count as Real));
                    }
                }
            }
        }
        out.push((mech, series));
    }
    Ok(Some(out))
}

// ---------------------------------------------------------------------------
// Ingest
// ---------------------------------------------------------------------------

/// Validate the data files, build the split manifest, and cache the resized
/// Omniglot stack under the run directory.
pub fn ingest(cfg: &ExperimentConfig) -> Result<SplitManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let data = build_data(cfg)?;
    write_json(&cfg.out_dir.join("manifest.json"), &data.manifest)?;
    if let Some(omniglot) = &data.omniglot {
        crate::tensor::checkpoint::write_tensors(
            &cfg.out_dir.join("omniglot_cache.mxt"),
            &[("images".to_string(), omniglot.images.clone())],
        )?;
    }
    Ok(data.manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Train a toy committee without touching the filesystem; shared by tests.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<(ExpertCommittee, Vec<IterationMetrics>)> {
    cfg.validate()?;
    let data = build_data(cfg)?;
    let mut committee = build_committee(cfg)?;
    if cfg.identity_init {
        pretrain_committee(
            &mut committee.experts,
            &data.transformed.images().images,
            &PretrainOptions {
                batch_size: cfg.batch_size,
                ..Default::default()
            },
            cfg.seed,
        )?;
    }
    let opts = TrainingOptions {
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        split_d_steps: cfg.split_d_steps,
        stop_on_stability: matches!(cfg.convergence, ConvergenceMode::Stability),
        probe_interval: cfg.probe_interval,
        stability_window: cfg.stability_window,
        checkpoint_every: 0,
        accuracy_interval: 0,
    };
    let outcome = run_training(
        &mut committee,
        &data.canonical.images,
        &data.transformed.images().images,
        Some(&data.probe_images),
        &opts,
        &mut NullObserver,
    )?;
    Ok((committee, outcome.metrics))
}
