//! The progressive training loop.
//!
//! Per iteration: backbone forward, then for each stage a head forward,
//! a Grad-CAM pass on that head (detached), block ranking and mixing into
//! the next stage's input. One backward pass of the combined loss drives
//! the optimizer; attribution passes build their own gradient stores and
//! never touch it.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attribution::{attribution_passes, detach_map, grad_cam, GradCamMap};
use crate::checkpoint::{self, CursorState, RngState};
use crate::config::Config;
use crate::datapipe::{build_index, sample_identity_balanced_batch, Augment, Batch, ImageStore, Role};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, write_per_query_csv, write_results, EvalSummary, RankingResult};
use crate::featmix::{apply_strategy, hard_mix, BlockGrid, MixOutcome, MixStrategy, SourcePolicy};
use crate::losses::{total_loss, LossBreakdown, LossConfig, StageLossInput};
use crate::model::{Mode, PmmModel, StageOutput};
use crate::optim::{lr_at, Adam};

/// Stream id of the data / mixing randomness.
const DATA_STREAM: u64 = 0x6461_7461;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESULTS_FILE: &str = "results.json";
pub const PER_QUERY_FILE: &str = "per_query_ap.csv";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.safetensors";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.safetensors";

/// Mixing applied at each stage transition and where its anchor comes from.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    /// `transitions[t]` builds the input of stage `t + 1`.
    pub transitions: Vec<MixStrategy>,
    pub source_policy: SourcePolicy,
}

impl StageSchedule {
    pub fn from_config(config: &Config) -> Self {
        Self::uniform(MixStrategy::from_config(&config.mix), config.model.stages, config.mix.source_policy)
    }

    pub fn uniform(strategy: MixStrategy, stages: usize, source_policy: SourcePolicy) -> Self {
        Self {
            transitions: vec![strategy; stages.saturating_sub(1)],
            source_policy,
        }
    }
}

/// Everything the training-mode forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Raw backbone feature `F`.
    pub backbone: Tensor,
    pub outputs: Vec<StageOutput>,
    /// Detached attribution per transition, when the strategy used one.
    pub attention: Vec<Option<GradCamMap>>,
    pub mixes: Vec<MixOutcome>,
}

impl ForwardTrace {
    pub fn stage_inputs(&self) -> Vec<&Tensor> {
        self.outputs.iter().map(|o| &o.stage_input).collect()
    }
}

/// Training-mode forward: stage I sees `F`; each later stage sees the mix
/// built from the previous stage's attribution.
pub fn progressive_forward<R: rand::Rng + ?Sized>(
    model: &PmmModel,
    images: &Tensor,
    labels: &[usize],
    schedule: &StageSchedule,
    rng: &mut R,
) -> Result<ForwardTrace> {
    let stages = model.num_stages();
    if schedule.transitions.len() + 1 != stages {
        return Err(Error::StageCountMismatch {
            expected: stages,
            got: schedule.transitions.len() + 1,
        });
    }
    let f = model.backbone_forward(images, Mode::Train)?;
    let (_, _, fh, fw) = f.dims4()?;
    let grid = BlockGrid::new(fh, fw, model.block.0, model.block.1)?;
    let pids: Vec<i64> = labels.iter().map(|&l| l as i64).collect();

    let mut input = f.clone();
    let mut outputs = Vec::with_capacity(stages);
    let mut attention = Vec::with_capacity(stages - 1);
    let mut mixes = Vec::with_capacity(stages - 1);
    for t in 0..stages {
        let out = model.stage_forward(t, &input, Mode::Train)?;
        if let Some(strategy) = schedule.transitions.get(t) {
            let g = if strategy.kind.needs_attention(strategy.cutout_random) {
                Some(detach_map(&grad_cam(&model.heads[t], &out, labels)?))
            } else {
                None
            };
            let anchor = match schedule.source_policy {
                SourcePolicy::Progressive => &input,
                SourcePolicy::Fresh => &f,
            };
            let mix = apply_strategy(strategy, anchor, &pids, labels, g.as_ref(), &grid, rng)?;
            input = mix.features.clone();
            attention.push(g);
            mixes.push(mix);
        }
        outputs.push(out);
    }
    Ok(ForwardTrace {
        backbone: f,
        outputs,
        attention,
        mixes,
    })
}

/// Rebuilds a mixed stage input from a recorded outcome, without any
/// attribution or randomness.
pub fn replay_mix(outcome: &MixOutcome, anchor: &Tensor) -> Result<Tensor> {
    match (&outcome.mask, &outcome.donors) {
        (None, _) => Ok(anchor.clone()),
        (Some(mask), Some(donors)) => {
            let idx = Tensor::from_iter(donors.iter().map(|&d| d as u32), &Device::Cpu)?;
            hard_mix(anchor, &anchor.index_select(&idx, 0)?, mask)
        }
        (Some(mask), None) => hard_mix(anchor, &anchor.zeros_like()?, mask),
    }
}

/// Training forward that reuses recorded mixes instead of computing
/// attribution. Running statistics are left untouched.
pub fn replay_forward(model: &PmmModel, images: &Tensor, mixes: &[MixOutcome], policy: SourcePolicy) -> Result<Vec<StageOutput>> {
    let f = model.backbone_forward(images, Mode::TrainFrozenStats)?;
    let mut input = f.clone();
    let mut outputs = Vec::with_capacity(model.num_stages());
    for t in 0..model.num_stages() {
        let out = model.stage_forward(t, &input, Mode::TrainFrozenStats)?;
        if let Some(m) = mixes.get(t) {
            let anchor = match policy {
                SourcePolicy::Progressive => &input,
                SourcePolicy::Fresh => &f,
            };
            input = replay_mix(m, anchor)?;
        }
        outputs.push(out);
    }
    Ok(outputs)
}

/// The combined objective over a forward trace.
pub fn trace_loss(outputs: &[StageOutput], mixes: &[MixOutcome], labels: &[usize], config: &LossConfig) -> Result<LossBreakdown> {
    let inputs: Vec<StageLossInput> = outputs
        .iter()
        .enumerate()
        .map(|(t, o)| StageLossInput {
            logits: &o.logits,
            embedding: &o.embedding,
            mixes: t.checked_sub(1).and_then(|p| mixes.get(p)).and_then(|m| m.labels.as_deref()),
        })
        .collect();
    total_loss(&inputs, labels, config)
}

/// Forward, attribution and the single loss backward of one iteration.
pub struct IterationGradients {
    pub trace: ForwardTrace,
    pub loss: LossBreakdown,
    pub grads: GradStore,
    /// Attribution passes plus the loss backward.
    pub backward_passes: u64,
}

pub fn compute_gradients<R: rand::Rng + ?Sized>(
    model: &PmmModel,
    batch: &Batch,
    schedule: &StageSchedule,
    loss_config: &LossConfig,
    iteration: usize,
    rng: &mut R,
) -> Result<IterationGradients> {
    let before = attribution_passes();
    let trace = progressive_forward(model, &batch.images, &batch.labels, schedule, rng)?;
    let loss = trace_loss(&trace.outputs, &trace.mixes, &batch.labels, loss_config)?;
    if !loss.total_value()?.is_finite() {
        return Err(Error::NonFiniteLoss(iteration));
    }
    let grads = loss.total.backward()?;
    Ok(IterationGradients {
        trace,
        loss,
        grads,
        backward_passes: attribution_passes() - before + 1,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationReport {
    pub epoch: usize,
    pub iter: usize,
    pub loss_total: f64,
    pub id: Vec<f64>,
    pub triplet: Vec<f64>,
    pub lr: f64,
    pub backward_passes: u64,
}

/// One optimization step. `Ok(None)` means the batch had no valid negative
/// for some anchor and was skipped.
#[allow(clippy::too_many_arguments)]
pub fn train_iteration<R: rand::Rng + ?Sized>(
    model: &PmmModel,
    optim: &mut Adam,
    batch: &Batch,
    schedule: &StageSchedule,
    loss_config: &LossConfig,
    lr: f64,
    (epoch, iteration): (usize, usize),
    rng: &mut R,
) -> Result<Option<IterationReport>> {
    let step = match compute_gradients(model, batch, schedule, loss_config, iteration, rng) {
        Ok(s) => s,
        Err(Error::NoNegativeAvailable(anchor)) => {
            log::warn!("iteration {iteration} skipped: anchor {anchor} has no negative in the batch");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    optim.step(&model.store, &step.grads, lr)?;
    Ok(Some(IterationReport {
        epoch,
        iter: iteration,
        loss_total: step.loss.total_value()?,
        id: step.loss.id,
        triplet: step.loss.triplet,
        lr,
        backward_passes: step.backward_passes,
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub iterations: usize,
    pub skipped: usize,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_metric: f64,
    pub final_eval: Option<EvalSummary>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum MetricLine<'a> {
    Iter(&'a IterationReport),
    Epoch { epoch: usize, mean_loss: f64, skipped: usize },
    Eval {
        epoch: usize,
        #[serde(flatten)]
        summary: &'a EvalSummary,
    },
}

/// Owns the data, model, optimizer and the single rng stream of a run.
pub struct Trainer {
    pub config: Config,
    pub store: ImageStore,
    pub model: PmmModel,
    pub optim: Adam,
    pub schedule: StageSchedule,
    pub rng: ChaCha8Rng,
    /// Epochs completed.
    pub epoch: usize,
    pub iteration: usize,
    pub best_metric: f64,
    iters_per_epoch: usize,
    metrics: Option<BufWriter<File>>,
}

impl Trainer {
    /// Indexes and decodes the dataset named by the config.
    pub fn new(config: Config) -> Result<Self> {
        let store = open_store(&config)?;
        Self::with_store(config, store)
    }

    pub fn with_store(config: Config, store: ImageStore) -> Result<Self> {
        config.validate()?;
        let model = PmmModel::new(&config, store.index().num_classes())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        let iters_per_epoch = config
            .sampler
            .iters_per_epoch
            .unwrap_or_else(|| store.index().count(Role::Train).div_ceil(config.sampler.batch_size));
        Ok(Self {
            schedule: StageSchedule::from_config(&config),
            optim: Adam::new(config.optim.weight_decay),
            config,
            store,
            model,
            rng,
            epoch: 0,
            iteration: 0,
            best_metric: f64::NEG_INFINITY,
            iters_per_epoch: iters_per_epoch.max(1),
            metrics: None,
        })
    }

    /// Continues a run from a checkpoint, with the checkpoint's config.
    pub fn resume(checkpoint_path: &Path) -> Result<Self> {
        let ck = checkpoint::load(checkpoint_path)?;
        let store = open_store(&ck.config)?;
        Self::resume_with_store(checkpoint_path, store)
    }

    pub fn resume_with_store(checkpoint_path: &Path, store: ImageStore) -> Result<Self> {
        let ck = checkpoint::load(checkpoint_path)?;
        if store.index().num_classes() != ck.cursor.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} classes, dataset {}",
                ck.cursor.num_classes,
                store.index().num_classes()
            )));
        }
        let mut t = Self::with_store(ck.config.clone(), store)?;
        ck.restore_model(&t.model)?;
        ck.restore_optimizer(&mut t.optim);
        t.rng = ck.cursor.rng.restore()?;
        t.epoch = ck.cursor.epoch;
        t.iteration = ck.cursor.iteration;
        t.best_metric = ck.cursor.best_metric;
        Ok(t)
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.iters_per_epoch
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn cursor(&self) -> CursorState {
        CursorState {
            epoch: self.epoch,
            iteration: self.iteration,
            best_metric: self.best_metric,
            adam_step: self.optim.step,
            rng: RngState::capture(&self.rng),
            num_classes: self.model.num_classes(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, &self.optim, &self.config, &self.cursor())
    }

    fn log_line(&mut self, line: &MetricLine<'_>) -> Result<()> {
        if self.metrics.is_none() {
            std::fs::create_dir_all(&self.config.output_dir)?;
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.config.output_dir.join(METRICS_FILE))?;
            self.metrics = Some(BufWriter::new(f));
        }
        let w = self.metrics.as_mut().expect("opened above");
        serde_json::to_writer(&mut *w, line)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    /// Runs one epoch of training iterations.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = lr_at(&self.config.optim, epoch);
        let aug = Augment {
            flip: self.config.dataset.flip,
            pad: self.config.dataset.pad,
        };
        let (p, q) = (self.config.sampler.p, self.config.sampler.q);
        let mut total = 0.0;
        let mut done = 0;
        let mut skipped = 0;
        for _ in 0..self.iters_per_epoch {
            let indices = sample_identity_balanced_batch(self.store.index(), p, q, &mut self.rng)?;
            let batch = self.store.batch(&indices, aug, self.model.dtype, &mut self.rng)?;
            let report = train_iteration(
                &self.model,
                &mut self.optim,
                &batch,
                &self.schedule,
                &self.config.loss,
                lr,
                (epoch, self.iteration),
                &mut self.rng,
            )?;
            self.iteration += 1;
            match report {
                Some(r) => {
                    total += r.loss_total;
                    done += 1;
                    self.log_line(&MetricLine::Iter(&r))?;
                }
                None => skipped += 1,
            }
        }
        let mean_loss = if done > 0 { total / done as f64 } else { f64::NAN };
        self.log_line(&MetricLine::Epoch {
            epoch,
            mean_loss,
            skipped,
        })?;
        self.epoch += 1;
        log::info!("epoch {epoch}: mean loss {mean_loss:.4}, lr {lr:.2e}");
        Ok(EpochRecord {
            epoch,
            mean_loss,
            iterations: done,
            skipped,
            eval: None,
        })
    }

    /// Ranks the query split against the gallery in evaluation mode.
    pub fn evaluate(&self) -> Result<RankingResult> {
        Ok(evaluate_split(&self.model, &self.store, self.config.eval.batch_size)?.0)
    }

    /// Trains through `config.optim.epochs`.
    pub fn fit(&mut self) -> Result<FitSummary> {
        self.fit_until(self.config.optim.epochs)
    }

    /// Trains until `epochs` epochs are complete, evaluating on schedule and
    /// after the final configured epoch, and saving the last and the best
    /// (by mAP) checkpoints.
    pub fn fit_until(&mut self, epochs: usize) -> Result<FitSummary> {
        let out = self.config.output_dir.clone();
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join(CONFIG_SNAPSHOT), self.config.to_toml_string())?;
        let total_epochs = self.config.optim.epochs;
        let mut records = Vec::new();
        let mut final_eval = None;
        while self.epoch < epochs.min(total_epochs) {
            let mut record = self.train_epoch()?;
            let finished = self.epoch;
            if finished % self.config.eval.every == 0 || finished == total_epochs {
                let (result, query_meta) = evaluate_split(&self.model, &self.store, self.config.eval.batch_size)?;
                let summary = result.summary();
                self.log_line(&MetricLine::Eval {
                    epoch: record.epoch,
                    summary: &summary,
                })?;
                log::info!(
                    "epoch {}: rank1 {:.4}, mAP {:.4}",
                    record.epoch,
                    summary.rank1,
                    summary.map
                );
                if summary.map > self.best_metric {
                    self.best_metric = summary.map;
                    self.save_checkpoint(&out.join(BEST_CHECKPOINT))?;
                }
                if finished == total_epochs {
                    write_results(&out.join(RESULTS_FILE), &summary)?;
                    write_per_query_csv(&out.join(PER_QUERY_FILE), &result, &query_meta)?;
                    final_eval = Some(summary);
                }
                record.eval = Some(summary);
            }
            self.save_checkpoint(&out.join(LAST_CHECKPOINT))?;
            if let Some(w) = self.metrics.as_mut() {
                w.flush()?;
            }
            records.push(record);
        }
        Ok(FitSummary {
            epochs: records,
            best_metric: self.best_metric,
            final_eval,
        })
    }
}

/// Builds the index and image store for the configured dataset.
pub fn open_store(config: &Config) -> Result<ImageStore> {
    let index = build_index(&config.dataset.root, config.dataset.layout)?;
    let [h, w] = config.dataset.resolution;
    ImageStore::new(Arc::new(index), h, w)
}
