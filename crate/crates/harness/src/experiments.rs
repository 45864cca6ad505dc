//! Experiment drivers: dense training, ticket search, pruning a trained
//! model, fine-tuning under a mask, sweeps, evaluation and sample dumps.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;
use slt_core::engine::Tensor;
use slt_core::metrics::{EvalContext, MetricsReport};
use slt_core::mmd::{median_pairwise_distance, KernelSpec};
use slt_core::nets::{FeatureExtractor, Generator};
use slt_core::prune::{Mode, Session, SessionConfig};
use slt_core::rng;

use crate::checkpoint::{Checkpoint, Role};
use crate::config::{ExperimentConfig, ExperimentKind, Seeds};
use crate::dataset::Dataset;
use crate::report::{self, MetricsRow};
use crate::{HarnessError, WORKERS_ENV};

/// Rows used for the kernel-loss median heuristic.
const MEDIAN_BATCH: usize = 256;

/// Everything a single training run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
    /// Training loss of every step, in order.
    pub losses: Vec<f64>,
    pub initial: MetricsReport,
    pub final_report: MetricsReport,
    pub checkpoint: Checkpoint,
    /// Weight fingerprints before the first and after the last step.
    pub weights_before: u64,
    pub weights_after: u64,
    pub surviving: usize,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub run: RunOutput,
    pub before: MetricsReport,
    pub after: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellFailure {
    pub cell: usize,
    pub k_percent: f64,
    pub init_scheme: String,
    pub channel_multiplier: f64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    /// Final row of every successful cell, in grid order.
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<CellFailure>,
    /// Cell configurations in grid order.
    pub cells: Vec<ExperimentConfig>,
}

/// Dataset, frozen extractor and fixed evaluation set of one run.
struct Setup {
    dataset: Dataset,
    extractor: FeatureExtractor<f64>,
    eval: EvalContext<f64>,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, HarnessError> {
    let dataset = Dataset::open(&cfg.data)?;
    if dataset.sample_shape() != cfg.generator.output_shape {
        return Err(HarnessError::Config(format!(
            "dataset samples have shape {:?}, generator produces {:?}",
            dataset.sample_shape(),
            cfg.generator.output_shape
        )));
    }
    let extractor = FeatureExtractor::build(&cfg.extractor)?;
    let real = dataset.sample(&mut rng::seeded(cfg.seeds.eval, 1), cfg.eval.samples);
    let eval = EvalContext::new(
        extractor.clone(),
        cfg.eval.embedding,
        &real,
        cfg.generator.latent_dim,
        cfg.eval.samples,
        cfg.eval.k,
        cfg.seeds.eval,
        cfg.eval.chunk,
    )?;
    Ok(Setup {
        dataset,
        extractor,
        eval,
    })
}

/// Round every parameter to single precision, the checkpoint resolution, so
/// a saved and reloaded generator is bit-identical to the live one.
fn round_params(g: &mut Generator<f64>) {
    let mut ids: Vec<_> = g.slots().iter().map(|s| s.weight).collect();
    ids.extend_from_slice(g.norm_params());
    for id in ids {
        g.graph_mut()
            .param_value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = *x as f32 as f64);
    }
}

/// A freshly initialized generator for `cfg`.
pub fn build_generator(cfg: &ExperimentConfig) -> Result<Generator<f64>, HarnessError> {
    let mut g = Generator::build(&cfg.generator_spec(), cfg.init)?;
    round_params(&mut g);
    Ok(g)
}

fn set_masks(g: &mut Generator<f64>, masks: Vec<Tensor<f64>>) -> Result<(), HarnessError> {
    for (slot, m) in g.slots().to_vec().iter().zip(masks) {
        g.graph_mut()
            .set_param(slot.mask, m)
            .map_err(|e| HarnessError::Config(format!("mask for '{}': {e}", slot.layer_id)))?;
    }
    Ok(())
}

/// The generator stored in `cfg.checkpoint`, with masks from
/// `cfg.mask_checkpoint` when given, else from the checkpoint itself, else all ones.
pub fn load_generator(cfg: &ExperimentConfig) -> Result<(Generator<f64>, Checkpoint), HarnessError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| HarnessError::Config("no checkpoint configured".into()))?;
    let ckpt = Checkpoint::load(path)?;
    let mut g = Generator::build(&cfg.generator_spec(), cfg.init)?;
    ckpt.restore_weights(&mut g)?;
    let masks = match &cfg.mask_checkpoint {
        Some(p) => Some(Checkpoint::load(p)?.masks_for(&g)?),
        None if ckpt.has_role(Role::Mask) => Some(ckpt.masks_for(&g)?),
        None => None,
    };
    if let Some(m) = masks {
        set_masks(&mut g, m)?;
    }
    Ok((g, ckpt))
}

fn session_config(cfg: &ExperimentConfig, dataset: &Dataset, extractor: &FeatureExtractor<f64>) -> Result<SessionConfig, HarnessError> {
    let mut policy = cfg.policy.clone();
    policy.seed = cfg.seeds.scores;
    let mut sc = SessionConfig::new(policy, cfg.steps);
    sc.adam = cfg.optim.adam();
    sc.lr_min = cfg.optim.lr_min;
    sc.loss = cfg.loss;
    sc.moments = cfg.moments;
    sc.score_seed = cfg.seeds.scores;
    sc.score_gradient = cfg.score_gradient;
    if cfg.loss == slt_core::prune::LossKind::KernelMmd {
        sc.kernel = Some(if cfg.loss_bandwidths.is_empty() {
            let batch = dataset.sample(&mut rng::seeded(cfg.seeds.data, 2), MEDIAN_BATCH);
            let taps = extractor.extract(&batch)?;
            let median = median_pairwise_distance(&taps[0], MEDIAN_BATCH).map_err(|e| HarnessError::Config(e.to_string()))?;
            KernelSpec::median_mixture(median)
        } else {
            KernelSpec::mixture(1.0, &cfg.loss_bandwidths)
        });
    }
    Ok(sc)
}

/// Fingerprint of the weights whose mask entry is 0.
fn pruned_fingerprint(g: &Generator<f64>) -> u64 {
    let pruned: Vec<Tensor<f64>> = g
        .weights()
        .zip(g.mask_tensors())
        .map(|(w, m)| {
            let data = w.data().iter().zip(m.data()).map(|(&w, &m)| if m == 0.0 { w } else { 0.0 }).collect();
            Tensor::new(w.shape(), data).expect("same shape")
        })
        .collect();
    rng::fingerprint(&pruned)
}

/// Fingerprints of the state a mode must leave untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Frozen {
    weights: u64,
    norms: u64,
    masks: u64,
    scores: u64,
    pruned: u64,
}

impl Frozen {
    fn take(s: &Session<f64>) -> Self {
        let g = s.generator();
        Self {
            weights: s.weights_fingerprint(),
            norms: rng::fingerprint(g.norm_params().iter().map(|&p| g.graph().param_value(p))),
            masks: s.masks_fingerprint(),
            scores: s.scores_fingerprint(),
            pruned: pruned_fingerprint(g),
        }
    }

    fn check(&self, s: &Session<f64>, step: u64) -> Result<(), HarnessError> {
        let now = Self::take(s);
        let broken = match s.mode() {
            Mode::Search => [("weights", now.weights != self.weights), ("normalization parameters", now.norms != self.norms)]
                .into_iter()
                .find(|(_, b)| *b),
            Mode::Finetune => [
                ("masks", now.masks != self.masks),
                ("scores", now.scores != self.scores),
                ("pruned weights", now.pruned != self.pruned),
                ("normalization parameters", now.norms != self.norms),
            ]
            .into_iter()
            .find(|(_, b)| *b),
            Mode::Dense => None,
        };
        match broken {
            Some((what, _)) => Err(HarnessError::Invariant(format!("{what} changed by step {step} in {:?} mode", s.mode()))),
            None => Ok(()),
        }
    }
}

fn final_checkpoint(cfg: &ExperimentConfig, hash: &str, s: &Session<f64>) -> Checkpoint {
    let mut c = Checkpoint::new(hash, s.step_count());
    c.add_generator(s.generator());
    if s.mode() == Mode::Search {
        c.add_scores(s.generator(), s.scores());
    }
    if cfg.loss == slt_core::prune::LossKind::FeatureMatching {
        c.add_moments(s.bank());
    }
    c
}

/// Rebuild a generator from a checkpoint, exactly as a later load would.
fn reload(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Generator<f64>, HarnessError> {
    let mut g = Generator::build(&cfg.generator_spec(), cfg.init)?;
    ckpt.restore_weights(&mut g)?;
    let masks = ckpt.masks_for(&g)?;
    set_masks(&mut g, masks)?;
    Ok(g)
}

/// `config.toml` of a run directory. The output directory is left out so
/// identical configurations write identical files wherever they run.
fn write_config(out: &Path, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let mut c = cfg.clone();
    c.out_dir = None;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), c.to_toml_string())?;
    Ok(())
}

fn write_run(out: &Path, cfg: &ExperimentConfig, run: &RunOutput) -> Result<(), HarnessError> {
    write_config(out, cfg)?;
    report::write_rows(&out.join("metrics.csv"), &run.rows)?;
    #[derive(Serialize)]
    struct LossRow {
        step: usize,
        loss: f64,
    }
    let losses: Vec<LossRow> = run
        .losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow { step: i + 1, loss })
        .collect();
    report::write_rows(&out.join("losses.csv"), &losses)?;
    run.checkpoint.save(&out.join("checkpoint"))?;
    Ok(())
}

/// Train, evaluate on cadence, enforce the mode's frozen state, and
/// checkpoint. On a numerical failure the last good state is saved under
/// `checkpoint-last-good` before the error is returned.
fn drive(cfg: &ExperimentConfig, mut session: Session<f64>, setup: &Setup) -> Result<RunOutput, HarnessError> {
    let hash = cfg.hash();
    let started = Instant::now();
    let clock = || if cfg.log_wallclock { started.elapsed().as_secs_f64() } else { 0.0 };
    let frozen = Frozen::take(&session);
    let weights_before = frozen.weights;
    let initial = setup.eval.evaluate(session.generator_mut())?;
    let mut rows = vec![MetricsRow::new(cfg, &hash, 0, None, &initial, clock())];
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut data_rng = rng::seeded(cfg.seeds.data, 0);
    let mut z_rng = rng::seeded(cfg.seeds.data, 1);
    let latent = cfg.generator.latent_dim;
    for t in 1..=cfg.steps {
        let real = setup.dataset.sample(&mut data_rng, cfg.batch_size);
        let z = rng::standard_normal(&mut z_rng, &[cfg.batch_size, latent]);
        match session.step(&real, &z) {
            Ok(rep) => losses.push(rep.loss),
            Err(e) => {
                // A failed step leaves weights, scores and masks untouched.
                if e.is_numerical() {
                    if let Some(out) = &cfg.out_dir {
                        final_checkpoint(cfg, &hash, &session).save(&out.join("checkpoint-last-good"))?;
                    }
                }
                return Err(e.into());
            }
        }
        if cfg.hash_check_every > 0 && t % cfg.hash_check_every == 0 {
            frozen.check(&session, t)?;
        }
        if cfg.eval.every > 0 && t % cfg.eval.every == 0 && t != cfg.steps {
            if session.mode() == Mode::Search {
                session.refresh_masks()?;
            }
            let m = setup.eval.evaluate(session.generator_mut())?;
            rows.push(MetricsRow::new(cfg, &hash, t, losses.last().copied(), &m, clock()));
        }
    }
    if session.mode() == Mode::Search {
        session.refresh_masks()?;
    }
    frozen.check(&session, cfg.steps)?;
    let checkpoint = final_checkpoint(cfg, &hash, &session);
    let mut reloaded = reload(cfg, &checkpoint)?;
    let final_report = setup.eval.evaluate(&mut reloaded)?;
    if cfg.steps > 0 {
        rows.push(MetricsRow::new(cfg, &hash, cfg.steps, losses.last().copied(), &final_report, clock()));
    }
    let run = RunOutput {
        config_hash: hash,
        rows,
        losses,
        initial,
        final_report,
        checkpoint,
        weights_before,
        weights_after: session.weights_fingerprint(),
        surviving: session.surviving(),
    };
    if let Some(out) = &cfg.out_dir {
        write_run(out, cfg, &run)?;
    }
    Ok(run)
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<(), HarnessError> {
    if cfg.experiment != kind {
        return Err(HarnessError::Config(format!(
            "config describes a {:?} experiment, not {kind:?}",
            cfg.experiment
        )));
    }
    cfg.validate()
}

/// Dense training of every weight with the feature-matching objective.
pub fn run_train_dense(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    expect_kind(cfg, ExperimentKind::TrainDense)?;
    let setup = setup(cfg)?;
    let sc = session_config(cfg, &setup.dataset, &setup.extractor)?;
    let session = Session::dense(build_generator(cfg)?, setup.extractor.clone(), sc)?;
    drive(cfg, session, &setup)
}

/// Score search over randomly initialized, frozen weights.
pub fn run_find_slt(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    expect_kind(cfg, ExperimentKind::FindSlt)?;
    let setup = setup(cfg)?;
    let sc = session_config(cfg, &setup.dataset, &setup.extractor)?;
    let session = Session::search(build_generator(cfg)?, setup.extractor.clone(), sc)?;
    drive(cfg, session, &setup)
}

/// Score search over the frozen weights of a trained checkpoint.
pub fn run_prune_pretrained(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    expect_kind(cfg, ExperimentKind::PrunePretrained)?;
    let setup = setup(cfg)?;
    let (generator, ckpt) = load_generator(cfg)?;
    let sc = session_config(cfg, &setup.dataset, &setup.extractor)?;
    let mut session = Session::search(generator, setup.extractor.clone(), sc)?;
    if ckpt.has_role(Role::Moment) && cfg.loss == slt_core::prune::LossKind::FeatureMatching {
        ckpt.restore_moments(session.bank_mut())?;
    }
    drive(cfg, session, &setup)
}

/// Train the surviving weights of a ticket; reports metrics before and after.
pub fn run_finetune(cfg: &ExperimentConfig) -> Result<FinetuneOutput, HarnessError> {
    expect_kind(cfg, ExperimentKind::Finetune)?;
    let setup = setup(cfg)?;
    let (generator, _) = load_generator(cfg)?;
    let masks: Vec<Tensor<f64>> = generator.mask_tensors().cloned().collect();
    let sc = session_config(cfg, &setup.dataset, &setup.extractor)?;
    let session = Session::finetune(generator, setup.extractor.clone(), masks, sc)?;
    let run = drive(cfg, session, &setup)?;
    let out = FinetuneOutput {
        before: run.initial,
        after: run.final_report,
        run,
    };
    if let Some(dir) = &cfg.out_dir {
        #[derive(Serialize)]
        struct Report<'a> {
            config_hash: &'a str,
            steps: u64,
            before: &'a MetricsReport,
            after: &'a MetricsReport,
            mmd2_change: f64,
            fd_change: f64,
        }
        let json = serde_json::to_string_pretty(&Report {
            config_hash: &out.run.config_hash,
            steps: cfg.steps,
            before: &out.before,
            after: &out.after,
            mmd2_change: out.after.mmd2_eval - out.before.mmd2_eval,
            fd_change: out.after.fd - out.before.fd,
        })
        .expect("report serializes");
        fs::write(dir.join("finetune_report.json"), json + "\n")?;
    }
    Ok(out)
}

/// Metrics of a stored generator; writes a one-row `metrics.csv`.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<MetricsRow, HarnessError> {
    cfg.validate()?;
    let setup = setup(cfg)?;
    let (mut g, ckpt) = load_generator(cfg)?;
    let m = setup.eval.evaluate(&mut g)?;
    let row = MetricsRow::new(cfg, &cfg.hash(), ckpt.manifest.step, None, &m, 0.0);
    if let Some(out) = &cfg.out_dir {
        fs::create_dir_all(out)?;
        report::write_rows(&out.join("metrics.csv"), std::slice::from_ref(&row))?;
    }
    Ok(row)
}

/// `cfg.sample_count` samples from a stored generator, drawn from latents
/// fixed by `cfg.seeds.eval`. Writes `samples.csv` (flat data) or
/// `samples.pgm` (images) when an output directory is set.
pub fn generate_samples(cfg: &ExperimentConfig) -> Result<Tensor<f64>, HarnessError> {
    cfg.validate()?;
    let (mut g, _) = load_generator(cfg)?;
    let z = rng::standard_normal(&mut rng::seeded(cfg.seeds.eval, 2), &[cfg.sample_count, cfg.generator.latent_dim]);
    let samples = slt_core::prune::sample_chunked(&mut g, &z, cfg.eval.chunk).map_err(HarnessError::from)?;
    if let Some(out) = &cfg.out_dir {
        report::write_samples(out, "samples", &samples)?;
    }
    Ok(samples)
}

/// Cell configurations of a sweep grid, in `k × init × n` order.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Result<Vec<ExperimentConfig>, HarnessError> {
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| HarnessError::Config("sweep needs a [sweep] grid".into()))?;
    let mut cells = Vec::new();
    for &k in &grid.k_percent {
        for &init in &grid.init {
            for &n in &grid.channel_multiplier {
                let index = cells.len();
                let mut c = cfg.clone();
                c.experiment = ExperimentKind::FindSlt;
                c.sweep = None;
                c.policy.k_percent = k;
                c.init = init;
                c.generator.channel_multiplier = n;
                if !grid.paired_seeds {
                    c.seeds = Seeds::from_base(rng::mix(cfg.seeds.weights, index as u64));
                }
                c.out_dir = cfg.out_dir.as_ref().map(|d| d.join(format!("cell-{index:03}")));
                cells.push(c);
            }
        }
    }
    Ok(cells)
}

/// Worker count from the environment; defaults to 1.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Run every grid cell as an independent ticket search. Failed cells are
/// recorded and the remaining cells still run.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput, HarnessError> {
    expect_kind(cfg, ExperimentKind::Sweep)?;
    let cells = sweep_cells(cfg)?;
    let results: Vec<Mutex<Option<Result<MetricsRow, String>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = worker_count().min(cells.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let outcome = run_cell(cell).map_err(|e| e.to_string());
                *results[i].lock().expect("result slot") = Some(outcome);
            });
        }
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, (cell, slot)) in cells.iter().zip(results).enumerate() {
        match slot.into_inner().expect("result slot").expect("every cell ran") {
            Ok(row) => rows.push(row),
            Err(error) => failures.push(CellFailure {
                cell: i,
                k_percent: cell.policy.k_percent,
                init_scheme: cell.init.name().to_string(),
                channel_multiplier: cell.generator.channel_multiplier,
                error,
            }),
        }
    }
    if let Some(out) = &cfg.out_dir {
        write_config(out, cfg)?;
        report::write_rows(&out.join("sweep.csv"), &rows)?;
        report::write_rows(&out.join("failures.csv"), &failures)?;
    }
    Ok(SweepOutput { rows, failures, cells })
}

fn run_cell(cell: &ExperimentConfig) -> Result<MetricsRow, HarnessError> {
    let run = run_find_slt(cell)?;
    if let Some(out) = &cell.out_dir {
        let mut g = reload(cell, &run.checkpoint)?;
        let z = rng::standard_normal(&mut rng::seeded(cell.seeds.eval, 2), &[cell.sample_count, cell.generator.latent_dim]);
        let samples = slt_core::prune::sample_chunked(&mut g, &z, cell.eval.chunk).map_err(HarnessError::from)?;
        report::write_samples(out, "samples", &samples)?;
    }
    Ok(run.rows.last().cloned().expect("at least the initial row"))
}

/// Default output directory for a subcommand when none is configured.
pub fn default_out_dir(kind: &str) -> PathBuf {
    PathBuf::from("runs").join(kind)
}
