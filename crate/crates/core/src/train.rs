//! Joint training: curriculum phases, FAMO-weighted steps, optimizers, the
//! plateau learning-rate schedule, checkpoints and the metrics log.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::TaskId;
use crate::data::{load_image, patchify, DatasetManifest, Image, Label, PatchSequence};
use crate::error::{Error, Result};
use crate::famo::{FamoConfig, FamoState};
use crate::moe::{ExpertDropoutMask, RoutingCounters};
use crate::params::save_checkpoint;
use crate::pseudo::{ingest_external_generated, synthesize_pair, PseudoConfig};
use crate::rng::{derive_seed, rng_for, stream};
use crate::scoring::ScoringConfig;
use crate::tasks::{
    build_demixup_batch, build_jigsaw_batch, build_mim_batch, ClsSample, ModelConfig, MultiTaskModel, TaskBatch,
    TaskConfig,
};
use crate::tensor::{Float, Mat};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskFlags {
    pub mim: bool,
    pub jigsaw: bool,
    pub demixup: bool,
    pub augcls: bool,
    pub gencls: bool,
}

impl Default for TaskFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl TaskFlags {
    pub fn all() -> Self {
        Self {
            mim: true,
            jigsaw: true,
            demixup: true,
            augcls: true,
            gencls: true,
        }
    }

    pub fn only(tasks: &[TaskId]) -> Self {
        let mut f = Self {
            mim: false,
            jigsaw: false,
            demixup: false,
            augcls: false,
            gencls: false,
        };
        for &t in tasks {
            *f.flag_mut(t) = true;
        }
        f
    }

    pub fn get(&self, task: TaskId) -> bool {
        match task {
            TaskId::Mim => self.mim,
            TaskId::Jigsaw => self.jigsaw,
            TaskId::DeMixUp => self.demixup,
            TaskId::AugCls => self.augcls,
            TaskId::GenCls => self.gencls,
        }
    }

    fn flag_mut(&mut self, task: TaskId) -> &mut bool {
        match task {
            TaskId::Mim => &mut self.mim,
            TaskId::Jigsaw => &mut self.jigsaw,
            TaskId::DeMixUp => &mut self.demixup,
            TaskId::AugCls => &mut self.augcls,
            TaskId::GenCls => &mut self.gencls,
        }
    }

    pub fn enabled(&self) -> Vec<TaskId> {
        TaskId::ALL.into_iter().filter(|&t| self.get(t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled().is_empty() {
            return Err(Error::config("tasks", "at least one task must be enabled"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Epochs during which only the self-supervised tasks train.
    pub phase1_epochs: usize,
    pub epochs: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 50,
            epochs: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    pub factor: f64,
    pub min_lr: f64,
    /// Epochs without relative improvement beyond `threshold` before a decay.
    pub patience: usize,
    pub threshold: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            factor: 0.5,
            min_lr: 1e-6,
            patience: 5,
            threshold: 1e-3,
        }
    }
}

/// Reduce-on-plateau learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub config: ScheduleConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub triggers: usize,
}

impl PlateauSchedule {
    pub fn new(config: ScheduleConfig) -> Self {
        Self {
            lr: config.initial_lr.max(config.min_lr),
            config,
            best: None,
            bad_epochs: 0,
            triggers: 0,
        }
    }

    /// Feeds one epoch's validation metric. Returns true when the rate decayed.
    pub fn observe(&mut self, metric: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => metric < b - self.config.threshold * b.abs(),
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.config.patience {
            self.trigger();
            self.bad_epochs = 0;
            return true;
        }
        false
    }

    pub fn trigger(&mut self) {
        self.triggers += 1;
        self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
    }

    /// Forgets the best metric; used when the task set changes.
    pub fn reset_best(&mut self) {
        self.best = None;
        self.bad_epochs = 0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Mat<f32>>,
    second: Vec<Mat<f32>>,
    t: u32,
}

impl Optimizer {
    fn new(config: OptimizerConfig, store: &crate::params::ParamStore<f32>) -> Self {
        let zeros: Vec<Mat<f32>> = store
            .ids()
            .map(|id| {
                let v = store.value(id);
                Mat::zeros(v.rows, v.cols)
            })
            .collect();
        let second = if config.kind == OptimizerKind::Adam {
            zeros.clone()
        } else {
            Vec::new()
        };
        Self {
            config,
            first: zeros,
            second,
            t: 0,
        }
    }

    fn step(&mut self, store: &mut crate::params::ParamStore<f32>, lr: f64) {
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        if let Some(clip) = self.config.grad_clip {
            let norm = ids
                .iter()
                .map(|&id| store.grad(id).data.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                for &id in &ids {
                    store.grad_mut(id).data.iter_mut().for_each(|g| *g *= s);
                }
            }
        }
        let c = &self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                let mu = c.momentum as f32;
                for (k, &id) in ids.iter().enumerate() {
                    let (value, grad) = store.value_and_grad_mut(id);
                    for ((v, m), &g) in value.data.iter_mut().zip(&mut self.first[k].data).zip(&grad.data) {
                        *m = mu * *m + g;
                        *v -= lr as f32 * *m;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (c.beta1, c.beta2);
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                let step = (lr * bc2.sqrt() / bc1) as f32;
                let (b1, b2, eps) = (b1 as f32, b2 as f32, (c.eps * bc2.sqrt()) as f32);
                for (k, &id) in ids.iter().enumerate() {
                    let (value, grad) = store.value_and_grad_mut(id);
                    let m = &mut self.first[k].data;
                    let s = &mut self.second[k].data;
                    for (((v, m), s), &g) in value.data.iter_mut().zip(m).zip(s).zip(&grad.data) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *s = b2 * *s + (1.0 - b2) * g * g;
                        *v -= step * *m / (s.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Directory holding `<stem>.aug.png` / `<stem>.gen.png` corpora written
    /// by the synthesis command; synthesized in memory when absent.
    pub pseudo_dir: Option<PathBuf>,
    /// Externally generated `<stem>.gen.<ext>` images.
    pub external_gen: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub pseudo: PseudoConfig,
    pub famo: FamoConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub curriculum: CurriculumConfig,
    pub tasks: TaskFlags,
    pub batch_size: usize,
    /// Overrides `⌈train size / batch size⌉`.
    pub steps_per_epoch: Option<usize>,
    /// Stops training after this many optimization steps.
    pub max_steps: Option<usize>,
    /// Reuses one fixed batch for every step.
    pub overfit: bool,
    /// Per-task backward audit of gradient mass on other tasks' experts.
    pub audit_routing: bool,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub scoring: ScoringConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            pseudo: PseudoConfig::default(),
            famo: FamoConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            curriculum: CurriculumConfig::default(),
            tasks: TaskFlags::default(),
            batch_size: 64,
            steps_per_epoch: None,
            max_steps: None,
            overfit: false,
            audit_routing: false,
            seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            output_dir: PathBuf::from("outputs"),
            scoring: ScoringConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("{} unsupported (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        self.model.validate()?;
        self.pseudo.validate()?;
        self.tasks.validate()?;
        self.scoring.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        let c = &self.curriculum;
        if c.phase1_epochs == 0 || c.phase1_epochs >= c.epochs {
            return Err(Error::config(
                "curriculum",
                format!("need 0 < phase1_epochs ({}) < epochs ({})", c.phase1_epochs, c.epochs),
            ));
        }
        let s = &self.schedule;
        if !(s.initial_lr > 0.0 && s.min_lr > 0.0 && s.factor > 0.0 && s.factor < 1.0 && s.threshold >= 0.0) {
            return Err(Error::config("schedule", format!("{s:?}")));
        }
        let f = &self.famo;
        if !(f.beta >= 0.0 && f.eps > 0.0) {
            return Err(Error::config("famo", format!("{f:?}")));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch", "must be positive"));
        }
        Ok(())
    }

    /// Task sets of the two curriculum phases after applying the task flags.
    /// Phase 1 is empty when no self-supervised task is enabled.
    pub fn phase_tasks(&self) -> (Vec<TaskId>, Vec<TaskId>) {
        let enabled = self.tasks.enabled();
        let phase1 = enabled.iter().copied().filter(|t| t.is_self_supervised()).collect();
        (phase1, enabled)
    }

    fn needs_pseudo(&self) -> bool {
        self.tasks.augcls || self.tasks.gencls
    }
}

/// Patch sequences of a split with their pseudo-anomalous counterparts.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub names: Vec<String>,
    pub images: Vec<PatchSequence>,
    pub aug: Vec<PatchSequence>,
    pub gen: Vec<PatchSequence>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Patchifies `images` and, when a classification task is enabled,
    /// synthesizes their pseudo-anomaly pairs with seeds derived from `seed`.
    pub fn from_images(
        names: Vec<String>,
        images: &[Image],
        config: &RunConfig,
        seed: u64,
        external: &BTreeMap<String, Image>,
    ) -> Result<Self> {
        let e = &config.model.encoder;
        let mut out = TaskData {
            names,
            images: Vec::with_capacity(images.len()),
            aug: Vec::new(),
            gen: Vec::new(),
        };
        for (i, img) in images.iter().enumerate() {
            let img = img.with_channels(e.channels)?;
            out.images.push(patchify(&img, e.patch_size)?);
            if config.needs_pseudo() {
                let ext = out.names.get(i).and_then(|n| external.get(n)).map(|x| x.with_channels(e.channels)).transpose()?;
                let pair = synthesize_pair(&img, i, seed, &config.pseudo, ext.as_ref())?;
                out.aug.push(patchify(&pair.aug.with_channels(e.channels)?, e.patch_size)?);
                out.gen.push(patchify(&pair.gen.with_channels(e.channels)?, e.patch_size)?);
            }
        }
        Ok(out)
    }

    /// Loads the normal records of a manifest. Pseudo-anomalies come from
    /// `pseudo_dir` when given, otherwise they are synthesized.
    pub fn load(manifest: &DatasetManifest, config: &RunConfig, seed: u64) -> Result<Self> {
        let e = &config.model.encoder;
        let mut names = Vec::new();
        let mut images = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            if r.label == Label::Anomalous {
                continue;
            }
            names.push(record_stem(&r.image));
            images.push(load_image(&manifest.image_path(i), e.image_size)?);
        }
        if images.is_empty() {
            return Err(Error::Precondition(format!("{} split has no normal images", manifest.split)));
        }
        let external = match &config.data.external_gen {
            Some(dir) => ingest_external_generated(dir, e.image_size)?,
            None => BTreeMap::new(),
        };
        match (&config.data.pseudo_dir, config.needs_pseudo()) {
            (Some(dir), true) => {
                let mut plain = config.clone();
                plain.tasks.augcls = false;
                plain.tasks.gencls = false;
                let mut data = Self::from_images(names, &images, &plain, seed, &external)?;
                for name in &data.names {
                    let aug = load_image(&dir.join(format!("{name}.aug.png")), e.image_size)?;
                    let gen = load_image(&dir.join(format!("{name}.gen.png")), e.image_size)?;
                    data.aug.push(patchify(&aug.with_channels(e.channels)?, e.patch_size)?);
                    data.gen.push(patchify(&gen.with_channels(e.channels)?, e.patch_size)?);
                }
                Ok(data)
            }
            _ => Self::from_images(names, &images, config, seed, &external),
        }
    }
}

/// File stem of a record path, used to key pseudo-anomaly corpora.
pub fn record_stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned()
}

/// Builds one batch per task over the images `indices`. Randomness for each
/// task comes from its own stream keyed by `key`. For the classification
/// tasks a per-sample coin picks which pseudo-anomaly is shown: the chosen
/// variant is the positive of its own task, and the original image is the
/// negative of the other.
pub fn build_batches(
    tasks: &[TaskId],
    indices: &[usize],
    data: &TaskData,
    config: &TaskConfig,
    seed: u64,
    key: u64,
) -> Result<Vec<TaskBatch>> {
    let coins: Vec<bool> = {
        let mut rng = rng_for(seed, &[stream::BATCH, key, 5]);
        indices.iter().map(|_| rng.gen_bool(0.5)).collect()
    };
    tasks
        .iter()
        .map(|&task| {
            let mut rng = rng_for(seed, &[stream::BATCH, key, task.index() as u64]);
            Ok(match task {
                TaskId::Mim => TaskBatch::Mim(
                    indices
                        .iter()
                        .map(|&i| build_mim_batch(&data.images[i], config.mask_ratio, &mut rng))
                        .collect::<Result<_>>()?,
                ),
                TaskId::Jigsaw => TaskBatch::Jigsaw(
                    indices
                        .iter()
                        .map(|&i| build_jigsaw_batch(&data.images[i], config.tiles, &mut rng))
                        .collect::<Result<_>>()?,
                ),
                TaskId::DeMixUp => {
                    if data.len() < 2 {
                        return Err(Error::Precondition("de-mixing needs at least two images".into()));
                    }
                    TaskBatch::DeMixUp(
                        indices
                            .iter()
                            .map(|&i| {
                                let mut j = rng.gen_range(0..data.len() - 1);
                                if j >= i {
                                    j += 1;
                                }
                                build_demixup_batch((i, &data.images[i]), (j, &data.images[j]), config.mix_ratio, &mut rng)
                            })
                            .collect::<Result<_>>()?,
                    )
                }
                TaskId::AugCls | TaskId::GenCls => {
                    if data.aug.len() != data.len() || data.gen.len() != data.len() {
                        return Err(Error::Precondition("classification batch without pseudo-anomalies".into()));
                    }
                    let samples = indices
                        .iter()
                        .zip(&coins)
                        .map(|(&i, &aug_chosen)| {
                            let (variant, positive) = if task == TaskId::AugCls {
                                (&data.aug[i], aug_chosen)
                            } else {
                                (&data.gen[i], !aug_chosen)
                            };
                            let src = if positive { variant } else { &data.images[i] };
                            ClsSample {
                                patches: src.patches.clone(),
                                label: u8::from(positive),
                            }
                        })
                        .collect();
                    if task == TaskId::AugCls {
                        TaskBatch::AugCls(samples)
                    } else {
                        TaskBatch::GenCls(samples)
                    }
                }
            })
        })
        .collect()
}

/// One row of the metrics log. Per-task entries are indexed by
/// [`TaskId::index`] and empty for inactive tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: u8,
    pub losses: [Option<f64>; 5],
    pub weights: [Option<f64>; 5],
    pub lr: f64,
    pub combined: f64,
}

/// Pre-step losses, FAMO weights used, and post-step losses of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub losses: Vec<f64>,
    pub post_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub combined: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    /// `(epoch, validation metric)` per validated epoch.
    pub validation: Vec<(usize, f64)>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub seed: u64,
    pub model: MultiTaskModel<f32>,
    pub famo: FamoState,
    pub active: Vec<TaskId>,
    pub schedule: PlateauSchedule,
    pub counters: RoutingCounters,
    optimizer: Optimizer,
    step: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = MultiTaskModel::new(&config.model, seed)?;
        let optimizer = Optimizer::new(config.optimizer.clone(), &model.store);
        Ok(Self {
            famo: FamoState::new(0, config.famo.beta, config.famo.eps),
            active: Vec::new(),
            schedule: PlateauSchedule::new(config.schedule.clone()),
            counters: RoutingCounters::new(),
            config: config.clone(),
            seed,
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Switches the active task set. FAMO logits restart at zero unless
    /// warm-starting is configured, in which case tasks carried over keep
    /// their logits.
    pub fn set_tasks(&mut self, tasks: &[TaskId]) {
        let mut famo = FamoState::new(tasks.len(), self.config.famo.beta, self.config.famo.eps);
        if !self.config.famo.reinit_at_phase_change {
            for (i, t) in tasks.iter().enumerate() {
                if let Some(k) = self.active.iter().position(|a| a == t) {
                    famo.logits[i] = self.famo.logits[k];
                }
            }
        }
        self.famo = famo;
        self.active = tasks.to_vec();
    }

    fn check_batches(&self, batches: &[TaskBatch]) -> Result<()> {
        if batches.len() != self.active.len() || batches.iter().zip(&self.active).any(|(b, &t)| b.task() != t) {
            return Err(Error::Dispatch("batches do not match the active task set".into()));
        }
        Ok(())
    }

    /// Batch-mean losses of the active tasks without recording gradients.
    pub fn losses(&self, batches: &[TaskBatch], mask: Option<&ExpertDropoutMask>) -> Result<Vec<f64>> {
        batches
            .iter()
            .map(|b| {
                let mut tape = Tape::inference();
                let out = self.model.forward(&mut tape, b, mask, None)?;
                Ok(tape.scalar(out.loss).as_f64())
            })
            .collect()
    }

    fn diverged(&self, what: &str, losses: &[f64]) -> Error {
        let per_task: Vec<String> = self.active.iter().zip(losses).map(|(t, l)| format!("{t}={l}")).collect();
        Error::Diverged(format!(
            "{what} at step {}: losses [{}], lr {}, weights {:?}",
            self.step,
            per_task.join(", "),
            self.schedule.lr,
            self.famo.weights()
        ))
    }

    /// One optimization step: forward every active task, back-propagate the
    /// FAMO combination, update parameters, re-evaluate the same batches and
    /// update the FAMO logits. Gradients stay in the store until the next step.
    pub fn step(&mut self, batches: &[TaskBatch], mask: Option<&ExpertDropoutMask>) -> Result<StepStats> {
        self.check_batches(batches)?;
        self.model.store.zero_grads();
        let mut tapes = Vec::with_capacity(batches.len());
        let mut losses = Vec::with_capacity(batches.len());
        for b in batches {
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, b, mask, Some(&mut self.counters))?;
            losses.push(tape.scalar(out.loss).as_f64());
            tapes.push((tape, out.loss));
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(self.diverged("non-finite loss", &losses));
        }
        let weights = self.famo.weights();
        let combined = self.famo.combined(&losses);
        debug_assert!(combined.coefficients.iter().all(|&a| a > 0.0));
        debug_assert!((combined.coefficients.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for ((tape, loss), &a) in tapes.iter().zip(&combined.coefficients) {
            tape.backward(*loss, a as f32, &mut self.model.store)?;
        }
        drop(tapes);
        self.optimizer.step(&mut self.model.store, self.schedule.lr);
        self.step += 1;
        let post_losses = self.losses(batches, mask)?;
        if post_losses.iter().any(|l| !l.is_finite()) {
            return Err(self.diverged("non-finite loss after update", &post_losses));
        }
        self.famo.observe(&losses);
        self.famo.update(&post_losses);
        Ok(StepStats {
            losses,
            post_losses,
            weights,
            coefficients: combined.coefficients,
            combined: combined.value,
        })
    }

    /// Back-propagates each task alone and returns the total squared
    /// gradient on experts not assigned to that task. Leaves gradients zeroed.
    pub fn audit_routing(&mut self, batches: &[TaskBatch], mask: Option<&ExpertDropoutMask>) -> Result<f64> {
        self.check_batches(batches)?;
        let e = &self.config.model.encoder;
        let mut foreign = 0.0;
        for b in batches {
            self.model.store.zero_grads();
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, b, mask, None)?;
            tape.backward(out.loss, 1.0, &mut self.model.store)?;
            let own = self.model.assignment.experts(b.task());
            for layer in (0..e.depth).filter(|&l| e.is_moe_layer(l)) {
                for expert in (0..e.experts).filter(|x| !own.contains(x)) {
                    foreign += self.model.store.grad_mass(&crate::backbone::Encoder::expert_prefix(layer, expert));
                }
            }
        }
        self.model.store.zero_grads();
        Ok(foreign)
    }

    /// Mean validation loss per active task over `data`, without dropout.
    pub fn validation_losses(&self, data: &TaskData) -> Result<Vec<f64>> {
        let mut sums = vec![0.0; self.active.len()];
        let all: Vec<usize> = (0..data.len()).collect();
        for (k, chunk) in all.chunks(self.config.batch_size).enumerate() {
            let batches = build_batches(
                &self.active,
                chunk,
                data,
                &self.config.model.tasks,
                derive_seed(self.seed, &[stream::VALIDATION]),
                k as u64,
            )?;
            for (s, l) in sums.iter_mut().zip(self.losses(&batches, None)?) {
                *s += l * chunk.len() as f64;
            }
        }
        Ok(sums.into_iter().map(|s| s / data.len() as f64).collect())
    }

    fn checkpoint(&self, dir: &Path, epoch: usize, phase: u8, metric: Option<f64>) -> Result<()> {
        let metadata = serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "epoch": epoch,
            "phase": phase,
            "step": self.step,
            "tasks": self.active,
            "famo": self.famo,
            "lr": self.schedule.lr,
            "validation": metric,
        });
        save_checkpoint(&self.model.store, metadata, dir)
    }

    /// Runs the full curriculum. With `out`, writes `metrics.csv`,
    /// `routing.csv`, `validation.csv`, and the `last/` and `best/`
    /// checkpoints there.
    pub fn run(&mut self, train: &TaskData, val: Option<&TaskData>, out: Option<&Path>) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Precondition("empty training set".into()));
        }
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let cfg = self.config.clone();
        let (phase1, phase2) = cfg.phase_tasks();
        let bsz = cfg.batch_size.min(train.len());
        let steps_per_epoch = cfg
            .steps_per_epoch
            .unwrap_or(if cfg.overfit { 1 } else { train.len().div_ceil(bsz) });
        let mut outcome = TrainOutcome::default();
        let mut best: Option<f64> = None;
        let result = (|| -> Result<()> {
            'epochs: for epoch in 0..cfg.curriculum.epochs {
                let (phase, tasks) = if epoch < cfg.curriculum.phase1_epochs && !phase1.is_empty() {
                    (1u8, &phase1)
                } else {
                    (2u8, &phase2)
                };
                if *tasks != self.active {
                    info!("epoch {epoch}: phase {phase} with tasks {tasks:?}");
                    self.set_tasks(tasks);
                    self.schedule.reset_best();
                    best = None;
                }
                let mut order: Vec<usize> = (0..train.len()).collect();
                if !cfg.overfit {
                    order.shuffle(&mut rng_for(self.seed, &[stream::SHUFFLE, epoch as u64]));
                }
                for k in 0..steps_per_epoch {
                    if cfg.max_steps.is_some_and(|m| self.step >= m) {
                        break 'epochs;
                    }
                    let (indices, key) = if cfg.overfit {
                        (&order[..bsz], 0)
                    } else {
                        let start = (k * bsz) % order.len();
                        let end = (start + bsz).min(order.len());
                        (&order[start..end], self.step as u64)
                    };
                    let batches = build_batches(&self.active, indices, train, &cfg.model.tasks, self.seed, key)?;
                    let mask = self.model.sample_dropout(&mut rng_for(self.seed, &[stream::DROPOUT, self.step as u64]));
                    if cfg.audit_routing {
                        let foreign = self.audit_routing(&batches, Some(&mask))?;
                        if foreign != 0.0 {
                            return Err(Error::Invariant(format!(
                                "step {}: gradient mass {foreign} on unassigned experts",
                                self.step
                            )));
                        }
                    }
                    let lr = self.schedule.lr;
                    let stats = self.step(&batches, Some(&mask))?;
                    let mut rec = StepRecord {
                        epoch,
                        step: self.step,
                        phase,
                        losses: [None; 5],
                        weights: [None; 5],
                        lr,
                        combined: stats.combined,
                    };
                    for (i, t) in self.active.iter().enumerate() {
                        rec.losses[t.index()] = Some(stats.losses[i]);
                        rec.weights[t.index()] = Some(stats.weights[i]);
                    }
                    outcome.history.push(rec);
                }
                let metric = match val {
                    Some(v) => {
                        let losses = self.validation_losses(v)?;
                        let p = self.famo.weights();
                        let m: f64 = p.iter().zip(&losses).map(|(a, b)| a * b).sum();
                        if !m.is_finite() {
                            return Err(self.diverged("non-finite validation loss", &losses));
                        }
                        outcome.validation.push((epoch, m));
                        if self.schedule.observe(m) {
                            info!("epoch {epoch}: learning rate decayed to {}", self.schedule.lr);
                        }
                        Some(m)
                    }
                    None => None,
                };
                if let Some(dir) = out {
                    self.checkpoint(&dir.join("last"), epoch, phase, metric)?;
                    if let Some(m) = metric {
                        if best.is_none_or(|b| m < b) {
                            best = Some(m);
                            outcome.best_epoch = Some(epoch);
                            self.checkpoint(&dir.join("best"), epoch, phase, metric)?;
                        }
                    }
                }
            }
            Ok(())
        })();
        outcome.steps = self.step;
        if let Some(dir) = out {
            write_metrics(&outcome.history, &dir.join("metrics.csv"))?;
            write_validation(&outcome.validation, &dir.join("validation.csv"))?;
            self.counters.write_csv(&dir.join("routing.csv"))?;
            if let Err(e @ Error::Diverged(_)) = &result {
                let path = dir.join("divergence.txt");
                fs::write(&path, e.to_string()).map_err(|err| Error::io(&path, err))?;
            }
        }
        result.map(|()| outcome)
    }
}

pub const METRICS_HEADER: [&str; 15] = [
    "epoch",
    "step",
    "phase",
    "loss_mim",
    "loss_jigsaw",
    "loss_demixup",
    "loss_augcls",
    "loss_gencls",
    "weight_mim",
    "weight_jigsaw",
    "weight_demixup",
    "weight_augcls",
    "weight_gencls",
    "lr",
    "combined",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics(history: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), r.step.to_string(), r.phase.to_string()];
        row.extend(r.losses.iter().map(|&v| opt(v)));
        row.extend(r.weights.iter().map(|&v| opt(v)));
        row.push(r.lr.to_string());
        row.push(r.combined.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_validation(rows: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "metric"])?;
    for (e, m) in rows {
        w.write_record([e.to_string(), m.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads the configured splits and trains one seed into `out`.
pub fn train(config: &RunConfig, seed: u64, out: &Path) -> Result<(Trainer, TrainOutcome)> {
    config.validate()?;
    let train_path = config
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::config("data.train", "training manifest required"))?;
    let manifest = DatasetManifest::read(train_path)?;
    manifest.validate()?;
    let train_data = TaskData::load(&manifest, config, seed)?;
    let val_data = match &config.data.val {
        Some(p) => {
            let m = DatasetManifest::read(p)?;
            Some(TaskData::load(&m, config, derive_seed(seed, &[stream::VALIDATION]))?)
        }
        None => {
            warn!("no validation split; the learning rate stays constant");
            None
        }
    };
    let mut trainer = Trainer::new(config, seed)?;
    let text = serde_json::to_string_pretty(config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    let outcome = trainer.run(&train_data, val_data.as_ref(), Some(out))?;
    Ok((trainer, outcome))
}
