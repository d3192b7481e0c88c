//! Non-episodic regimes: joint multi-task training, fine-tuning and
//! monolingual training. All use minibatches drawn from a shuffled pool and
//! the architecture's native optimizer unless configured otherwise.

use rand::seq::SliceRandom;

use super::{
    check_finite, check_params_finite, clip, evaluate, mean, DevSignal, DevSource, MetaConfig, MetricsSink, ModelTask,
    TaskHandle, TrainState,
};
use crate::error::{Error, Result};
use crate::models::{EncodedExample, Model};

/// One pass over `pool` in shuffled minibatches; returns the mean batch loss.
fn supervised_epoch(
    state: &mut TrainState,
    model: &Model,
    pool: &[&EncodedExample],
    cfg: &MetaConfig,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut state.rng);
    let mut losses = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| pool[i]).collect();
        let (loss, grads) = model.loss_and_grad_refs(&state.params, &batch)?;
        check_finite(loss, epoch)?;
        losses.push(loss);
        let (opt, params) = state.optimizer.step(&state.params, &clip(grads, cfg.clip_norm))?;
        state.optimizer = opt;
        state.params = params;
    }
    check_params_finite(&state.params, epoch)?;
    Ok(mean(losses))
}

fn encode<'a>(model: &'a Model, handles: &[&TaskHandle]) -> Result<Vec<ModelTask<'a>>> {
    handles.iter().map(|t| ModelTask::new(model, t)).collect()
}

/// Runs epochs until `state.epoch` reaches `epochs`.
fn run_fixed(
    mut state: TrainState,
    cfg: &MetaConfig,
    model: &Model,
    train: &[ModelTask<'_>],
    eval: &[ModelTask<'_>],
    epochs: usize,
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    cfg.validate()?;
    model.check_params(&state.params)?;
    let pool: Vec<&EncodedExample> = train.iter().flat_map(|t| &t.train).collect();
    if pool.is_empty() && epochs > state.epoch {
        return Err(Error::EmptyData("no training examples".into()));
    }
    state.budget = epochs;
    while state.epoch < epochs {
        let epoch = state.epoch + 1;
        let loss = supervised_epoch(&mut state, model, &pool, cfg, epoch)?;
        let now = cfg.eval_every_epoch || epoch == epochs;
        let record = evaluate(model, &state.params, eval, cfg, DevSignal::Plain, epoch, loss, now)?;
        sink.record(&state.complete_epoch(record))?;
    }
    Ok(state)
}

/// Joint training on the union of the source tasks, plus the target's
/// training data when `target` is given, from a fresh initialization.
/// Model selection uses `dev` (or the training languages' dev splits when
/// configured so).
pub fn multitask_train(
    cfg: &MetaConfig,
    model: &Model,
    sources: &[TaskHandle],
    target: Option<&TaskHandle>,
    dev: &[TaskHandle],
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    let mut state = TrainState::new(Default::default(), cfg.native_optimizer_config(model.kind()), cfg.seed);
    state.params = model.init_params(&mut state.rng);
    multitask_continue(state, cfg, model, sources, target, dev, sink)
}

pub fn multitask_continue(
    state: TrainState,
    cfg: &MetaConfig,
    model: &Model,
    sources: &[TaskHandle],
    target: Option<&TaskHandle>,
    dev: &[TaskHandle],
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    if sources.is_empty() && target.is_none() {
        return Err(Error::EmptyData("multi-task training needs at least one task".into()));
    }
    let train_handles: Vec<&TaskHandle> = sources.iter().chain(target).collect();
    let train = encode(model, &train_handles)?;
    let eval = match cfg.dev_source {
        DevSource::DevelopmentLanguages => encode(model, &dev.iter().collect::<Vec<_>>())?,
        DevSource::SourceSplits => encode(model, &train_handles)?,
    };
    run_fixed(state, cfg, model, &train, &eval, cfg.multitask_epochs(), sink)
}

/// Fine-tunes the best parameters of `init` on the target language alone.
///
/// The caller is expected to have initialized the target's language
/// embedding. Runs at least `finetune_min_epochs` and extends per
/// [`super::FineTuneSchedule`]; the result's best checkpoint is the
/// selected model.
pub fn finetune(
    init: &TrainState,
    cfg: &MetaConfig,
    model: &Model,
    target: &TaskHandle,
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    let state = TrainState::new(init.best_params().clone(), cfg.finetune_optimizer_config(model.kind()), cfg.seed);
    finetune_continue(state, cfg, model, target, sink)
}

pub fn finetune_continue(
    mut state: TrainState,
    cfg: &MetaConfig,
    model: &Model,
    target: &TaskHandle,
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    cfg.validate()?;
    model.check_params(&state.params)?;
    let task = ModelTask::new(model, target)?;
    let eval = std::slice::from_ref(&task);
    let pool: Vec<&EncodedExample> = task.train.iter().collect();
    let schedule = cfg.finetune_schedule(model.kind());
    loop {
        state.budget = schedule.next_budget(state.budget, state.epoch, state.best.as_ref().map(|b| b.epoch));
        if state.epoch >= state.budget {
            break;
        }
        let epoch = state.epoch + 1;
        let loss = supervised_epoch(&mut state, model, &pool, cfg, epoch)?;
        let record = evaluate(model, &state.params, eval, cfg, DevSignal::Plain, epoch, loss, true)?;
        sink.record(&state.complete_epoch(record))?;
    }
    Ok(state)
}

/// Trains a fresh model on one language for `cfg.mono_epochs` epochs.
pub fn train_monolingual(cfg: &MetaConfig, model: &Model, task: &TaskHandle, sink: &mut dyn MetricsSink) -> Result<TrainState> {
    let mut state = TrainState::new(Default::default(), cfg.native_optimizer_config(model.kind()), cfg.seed);
    state.params = model.init_params(&mut state.rng);
    train_monolingual_continue(state, cfg, model, task, sink)
}

pub fn train_monolingual_continue(
    state: TrainState,
    cfg: &MetaConfig,
    model: &Model,
    task: &TaskHandle,
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    let t = encode(model, &[task])?;
    run_fixed(state, cfg, model, &t, &t, cfg.mono_epochs, sink)
}
