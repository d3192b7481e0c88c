//! Training regimes: first-order MAML, joint multi-task training,
//! fine-tuning with an extending epoch budget, and monolingual training.
//!
//! Every regime is a sequential, seeded loop over [`TrainState`], which holds
//! the parameters, optimizer accumulators, random stream and best-dev
//! checkpoint. A state can be serialized after any epoch and resumed.

mod embedding;
mod maml;
mod regimes;
mod schedule;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adcore::{GradientMap, OptimizerConfig, OptimizerKind, OptimizerState, ParamSet};
use crate::corpus::{InflectionExample, LanguageId, TaskDataset};
use crate::error::{Error, Result};
use crate::models::{DecodeOptions, EncodedExample, Model, ModelKind};
use crate::SeededRng;

pub use embedding::{init_target_language_embedding, EmbeddingInit};
pub use maml::{episode_batches, episodes_per_epoch, inner_adapt, maml_continue, maml_train, meta_step, MetaStep};
pub use regimes::{
    finetune, finetune_continue, multitask_continue, multitask_train, train_monolingual, train_monolingual_continue,
};
pub use schedule::{simulate_schedule, FineTuneSchedule, ScheduleTrace};

/// How the per-epoch development score is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DevSignal {
    /// Accuracy after `k` inner steps on each evaluation language's training
    /// data. Only meaningful for meta-training; other regimes use `Plain`.
    Adapted,
    /// Accuracy of the current parameters as they are.
    Plain,
}

/// Which languages supply the development score during pre-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DevSource {
    /// Held-out development languages passed to the trainer.
    DevelopmentLanguages,
    /// The dev splits of the training languages themselves.
    SourceSplits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner-loop learning rate.
    pub inner_lr: f64,
    /// Outer learning rate; `None` uses the outer optimizer's default.
    pub outer_lr: Option<f64>,
    /// Inner steps `k`.
    pub inner_steps: usize,
    /// Examples per inner batch `K`.
    pub inner_batch: usize,
    pub meta_epochs: usize,
    /// Tasks per episode; `None` means every source task.
    pub tasks_per_episode: Option<usize>,
    /// Episodes per epoch; `None` derives it from the data size.
    pub episodes_per_epoch: Option<usize>,
    pub seed: u64,
    pub inner_optimizer: OptimizerKind,
    /// `None` selects the architecture's native optimizer.
    pub outer_optimizer: Option<OptimizerKind>,
    pub finetune_optimizer: Option<OptimizerKind>,
    pub finetune_lr: Option<f64>,
    pub finetune_min_epochs: usize,
    /// `None` extends by 100 epochs for PG and never for MED.
    pub finetune_extension: Option<usize>,
    /// Joint multi-task epochs; `None` uses `meta_epochs`.
    pub multitask_epochs: Option<usize>,
    pub mono_epochs: usize,
    /// Batch size of the non-episodic regimes.
    pub batch_size: usize,
    /// Learning rate of the native optimizer in non-episodic regimes.
    pub lr: Option<f64>,
    pub clip_norm: Option<f64>,
    pub eval_every_epoch: bool,
    pub dev_signal: DevSignal,
    pub dev_source: DevSource,
    /// Caps the dev examples scored per language and epoch.
    pub dev_limit: Option<usize>,
    pub embedding_init: EmbeddingInit,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.1,
            outer_lr: None,
            inner_steps: 5,
            inner_batch: 20,
            meta_epochs: 60,
            tasks_per_episode: None,
            episodes_per_epoch: None,
            seed: 0,
            inner_optimizer: OptimizerKind::Sgd,
            outer_optimizer: None,
            finetune_optimizer: None,
            finetune_lr: None,
            finetune_min_epochs: 300,
            finetune_extension: None,
            multitask_epochs: None,
            mono_epochs: 300,
            batch_size: 20,
            lr: None,
            clip_norm: Some(5.0),
            eval_every_epoch: true,
            dev_signal: DevSignal::Adapted,
            dev_source: DevSource::DevelopmentLanguages,
            dev_limit: None,
            embedding_init: EmbeddingInit::Mean,
        }
    }
}

pub fn native_optimizer(kind: ModelKind) -> OptimizerKind {
    match kind {
        ModelKind::Med => OptimizerKind::Adadelta,
        ModelKind::Pg => OptimizerKind::Adam,
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1");
        }
        if self.inner_batch == 0 || self.batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        let lrs = [Some(self.inner_lr), self.outer_lr, self.finetune_lr, self.lr];
        if lrs.iter().flatten().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive and finite");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        if self.tasks_per_episode == Some(0) || self.episodes_per_epoch == Some(0) {
            return bad("tasks_per_episode and episodes_per_epoch must be at least 1");
        }
        if self.dev_limit == Some(0) {
            return bad("dev_limit must be at least 1");
        }
        Ok(())
    }

    pub fn outer_optimizer_config(&self, kind: ModelKind) -> OptimizerConfig {
        OptimizerConfig::defaults(self.outer_optimizer.unwrap_or(native_optimizer(kind)), self.outer_lr)
    }

    pub fn native_optimizer_config(&self, kind: ModelKind) -> OptimizerConfig {
        OptimizerConfig::defaults(native_optimizer(kind), self.lr)
    }

    pub fn finetune_optimizer_config(&self, kind: ModelKind) -> OptimizerConfig {
        OptimizerConfig::defaults(self.finetune_optimizer.unwrap_or(native_optimizer(kind)), self.finetune_lr)
    }

    pub fn finetune_schedule(&self, kind: ModelKind) -> FineTuneSchedule {
        let extension = self.finetune_extension.unwrap_or(match kind {
            ModelKind::Pg => 100,
            ModelKind::Med => 0,
        });
        FineTuneSchedule::new(self.finetune_min_epochs, extension)
    }

    pub fn multitask_epochs(&self) -> usize {
        self.multitask_epochs.unwrap_or(self.meta_epochs)
    }
}

/// One language's training and development data.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHandle {
    pub language: LanguageId,
    pub train: TaskDataset,
    pub dev: TaskDataset,
}

fn example_key(e: &InflectionExample) -> (&str, &[String], &str) {
    (e.lemma.as_str(), e.tags.as_slice(), e.form.as_str())
}

impl TaskHandle {
    pub fn new(train: TaskDataset, dev: TaskDataset) -> Result<Self> {
        if train.language != dev.language {
            return Err(Error::invalid(format!(
                "train data is `{}` but dev data is `{}`",
                train.language, dev.language
            )));
        }
        let seen: BTreeSet<_> = train.examples.iter().map(example_key).collect();
        if let Some(dup) = dev.examples.iter().find(|e| seen.contains(&example_key(e))) {
            return Err(Error::invalid(format!(
                "`{}`: dev example {} -> {} also occurs in train",
                train.language, dup.lemma, dup.form
            )));
        }
        Ok(Self {
            language: train.language.clone(),
            train,
            dev,
        })
    }
}

/// A loss over a task's training examples, addressed by index.
pub trait TaskLoss {
    fn train_size(&self) -> usize;
    fn loss_and_grad(&self, params: &ParamSet, batch: &[usize]) -> Result<(f64, GradientMap)>;
}

/// A [`TaskHandle`] encoded for one model.
pub struct ModelTask<'a> {
    pub model: &'a Model,
    pub language: LanguageId,
    pub train: Vec<EncodedExample>,
    pub dev: Vec<EncodedExample>,
    pub dev_forms: Vec<String>,
}

impl<'a> ModelTask<'a> {
    pub fn new(model: &'a Model, task: &TaskHandle) -> Result<Self> {
        if task.train.is_empty() {
            return Err(Error::EmptyData(format!("no training data for `{}`", task.language)));
        }
        if !model.vocab().has_language(&task.language) {
            return Err(Error::VocabMismatch(format!("language `{}` not in vocabulary", task.language)));
        }
        Ok(Self {
            model,
            language: task.language.clone(),
            train: model.encode_all(&task.train.examples),
            dev: model.encode_all(&task.dev.examples),
            dev_forms: task.dev.examples.iter().map(|e| e.form.clone()).collect(),
        })
    }
}

impl TaskLoss for ModelTask<'_> {
    fn train_size(&self) -> usize {
        self.train.len()
    }

    fn loss_and_grad(&self, params: &ParamSet, batch: &[usize]) -> Result<(f64, GradientMap)> {
        let refs: Vec<&EncodedExample> = batch.iter().map(|&i| &self.train[i]).collect();
        self.model.loss_and_grad_refs(params, &refs)
    }
}

/// Parameters and score of the best completed epoch so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub score: f64,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's updates.
    pub loss: f64,
    /// Per-language dev accuracy used for model selection.
    pub dev: BTreeMap<String, f64>,
    /// Per-language accuracy of the unadapted parameters, when `dev` is adapted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_plain: Option<BTreeMap<String, f64>>,
    /// Mean of `dev`; absent when the epoch was not evaluated.
    pub score: Option<f64>,
    pub best: bool,
}

/// Complete, serializable training progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Total epochs planned so far; fine-tuning may raise it.
    pub budget: usize,
    pub best: Option<BestCheckpoint>,
    pub rng: SeededRng,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: ParamSet, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self {
            params,
            optimizer: OptimizerState::new(optimizer),
            epoch: 0,
            budget: 0,
            best: None,
            rng: SeededRng::seed_from_u64(seed),
            history: Vec::new(),
        }
    }

    /// Best-dev parameters, or the current ones when no epoch has completed.
    pub fn best_params(&self) -> &ParamSet {
        self.best.as_ref().map_or(&self.params, |b| &b.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Records a finished epoch and updates the best checkpoint on strict
    /// improvement (the first evaluated epoch always counts).
    fn complete_epoch(&mut self, mut record: EpochRecord) -> EpochRecord {
        let improved = record
            .score
            .is_some_and(|s| self.best.as_ref().is_none_or(|b| s > b.score));
        if let (true, Some(score)) = (improved, record.score) {
            self.best = Some(BestCheckpoint {
                epoch: record.epoch,
                score,
                params: self.params.clone(),
            });
        }
        record.best = improved;
        self.epoch = record.epoch;
        self.history.push(record.clone());
        record
    }
}

/// Receives one record per completed epoch.
pub trait MetricsSink {
    fn record(&mut self, record: &EpochRecord) -> Result<()>;
}

/// Discards records.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<EpochRecord> {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Appends one JSON object per line.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, record)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

/// Independent random stream for evaluation, so scoring never perturbs the
/// training stream.
pub(crate) fn eval_rng(seed: u64, epoch: usize, task: usize) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed ^ 0x5eed_0f_e7a1);
    rng.set_stream(((epoch as u64) << 20) | task as u64);
    rng
}

/// Exact-match accuracy of `params` on a task's dev split, optionally capped.
pub(crate) fn dev_accuracy(model: &Model, params: &ParamSet, task: &ModelTask<'_>, limit: Option<usize>) -> Result<f64> {
    let n = limit.map_or(task.dev.len(), |l| l.min(task.dev.len()));
    if n == 0 {
        return Err(Error::EmptyData(format!("no dev data for `{}`", task.language)));
    }
    let decoded = model.decode(params, &task.dev[..n], &DecodeOptions::greedy())?;
    let preds: Vec<String> = decoded.into_iter().map(|d| d.text).collect();
    crate::evalkit::word_accuracy(&preds, &task.dev_forms[..n])
}

/// Scores `params` on every evaluation task and builds the epoch record.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate(
    model: &Model,
    params: &ParamSet,
    tasks: &[ModelTask<'_>],
    cfg: &MetaConfig,
    signal: DevSignal,
    epoch: usize,
    loss: f64,
    evaluate_now: bool,
) -> Result<EpochRecord> {
    let mut record = EpochRecord {
        epoch,
        loss,
        dev: BTreeMap::new(),
        dev_plain: None,
        score: None,
        best: false,
    };
    if !evaluate_now {
        return Ok(record);
    }
    if tasks.is_empty() {
        return Err(Error::Config("no development languages to evaluate on".into()));
    }
    let mut plain = BTreeMap::new();
    for (i, task) in tasks.iter().enumerate() {
        let name = task.language.0.clone();
        let acc = dev_accuracy(model, params, task, cfg.dev_limit)?;
        plain.insert(name.clone(), acc);
        let mut rng = eval_rng(cfg.seed, epoch, i);
        if let Some(adapted) = maml::adapted_params(params, task, cfg, signal, &mut rng)? {
            record.dev.insert(name, dev_accuracy(model, &adapted, task, cfg.dev_limit)?);
        }
    }
    if record.dev.is_empty() {
        record.dev = plain;
    } else {
        record.dev_plain = Some(plain);
    }
    record.score = Some(mean(record.dev.values().copied()));
    Ok(record)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            detail: format!("training loss became {loss}"),
        })
    }
}

fn clip(grads: GradientMap, norm: Option<f64>) -> GradientMap {
    match norm {
        Some(n) => grads.clip_global_norm(n),
        None => grads,
    }
}

fn check_params_finite(params: &ParamSet, epoch: usize) -> Result<()> {
    if params.all_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            detail: "parameters became non-finite".into(),
        })
    }
}
