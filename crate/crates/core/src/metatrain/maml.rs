//! First-order MAML.
//!
//! For every task of an episode the current parameters are copied, adapted
//! with `k` plain gradient steps on fresh batches of `K` examples, and the
//! gradient of a further held-out batch at the adapted point is applied to
//! the unadapted parameters by the outer optimizer. The second-order term
//! of the exact meta-gradient is dropped.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    check_finite, check_params_finite, clip, evaluate, mean, DevSignal, MetaConfig, MetricsSink, ModelTask, TaskHandle,
    TaskLoss, TrainState,
};
use crate::adcore::{sgd_step, GradientMap, OptimizerConfig, OptimizerKind, OptimizerState, ParamSet};
use crate::corpus::sample_indices;
use crate::error::{Error, Result};
use crate::models::Model;

/// Episodes per epoch such that one epoch draws, in expectation, as many
/// inner-loop examples per task as the mean task size.
pub fn episodes_per_epoch(task_sizes: &[usize], k: usize, batch: usize) -> usize {
    if task_sizes.is_empty() {
        return 1;
    }
    let mean = task_sizes.iter().sum::<usize>() as f64 / task_sizes.len() as f64;
    ((mean / (k * batch) as f64).ceil() as usize).max(1)
}

/// Inner batches and the outer batch of one episode for a task with `n`
/// training examples.
///
/// With at least `(k + 1) * K` examples all batches are disjoint. Smaller
/// tasks reserve up to `K` examples (about a `1 / (k + 1)` share) for the
/// outer batch and draw the inner batches from the rest. A single-example
/// task reuses it everywhere.
pub fn episode_batches<R: Rng + ?Sized>(n: usize, k: usize, batch: usize, rng: &mut R) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyData("task has no training examples".into()));
    }
    if k == 0 || batch == 0 {
        return Err(Error::invalid("inner steps and batch size must be at least 1"));
    }
    if n >= (k + 1) * batch {
        let idx = sample_indices(n, (k + 1) * batch, rng)?;
        let mut chunks: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
        let outer = chunks.pop().expect("k + 1 chunks");
        return Ok((chunks, outer));
    }
    if n == 1 {
        return Ok((vec![vec![0; batch]; k], vec![0; batch]));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let n_outer = (n / (k + 1)).clamp(1, batch);
    let (outer, pool) = perm.split_at(n_outer);
    let mut inner = Vec::with_capacity(k);
    for _ in 0..k {
        inner.push(sample_indices(pool.len(), batch, rng)?.into_iter().map(|i| pool[i]).collect());
    }
    Ok((inner, outer.to_vec()))
}

fn adapt_on<T: TaskLoss + ?Sized>(
    theta: &ParamSet,
    task: &T,
    batches: &[Vec<usize>],
    optimizer: &OptimizerConfig,
    clip_norm: Option<f64>,
) -> Result<(ParamSet, f64)> {
    let mut params = theta.clone();
    let mut state = OptimizerState::new(optimizer.clone());
    let mut losses = Vec::with_capacity(batches.len());
    for b in batches {
        let (loss, grads) = task.loss_and_grad(&params, b)?;
        losses.push(loss);
        let grads = clip(grads, clip_norm);
        params = if optimizer.kind == OptimizerKind::Sgd {
            sgd_step(&params, &grads, optimizer.lr)?
        } else {
            let (next, p) = state.step(&params, &grads)?;
            state = next;
            p
        };
    }
    Ok((params, mean(losses)))
}

/// `k` plain gradient steps with learning rate `eta`, each on a fresh batch
/// of `batch` training examples. `theta` is not modified.
pub fn inner_adapt<T: TaskLoss + ?Sized, R: Rng + ?Sized>(
    theta: &ParamSet,
    task: &T,
    k: usize,
    eta: f64,
    batch: usize,
    clip_norm: Option<f64>,
    rng: &mut R,
) -> Result<ParamSet> {
    if k == 0 {
        return Err(Error::invalid("inner_adapt needs at least one step"));
    }
    if !(eta > 0.0) {
        return Err(Error::invalid("inner learning rate must be positive"));
    }
    let n = task.train_size();
    if n == 0 {
        return Err(Error::EmptyData("task has no training examples".into()));
    }
    let batches = (0..k).map(|_| sample_indices(n, batch, rng)).collect::<Result<Vec<_>>>()?;
    Ok(adapt_on(theta, task, &batches, &OptimizerConfig::sgd(eta), clip_norm)?.0)
}

/// Result of one outer update.
#[derive(Clone, Debug)]
pub struct MetaStep {
    /// Updated parameters.
    pub params: ParamSet,
    pub optimizer: OptimizerState,
    /// Parameters after the inner loop, `theta_k`.
    pub adapted: ParamSet,
    /// Outer-batch gradient at `theta_k` as applied (after clipping).
    pub meta_grad: GradientMap,
    pub inner_loss: f64,
    pub outer_loss: f64,
}

/// One first-order MAML update of `theta` on `task`.
pub fn meta_step<T: TaskLoss + ?Sized, R: Rng + ?Sized>(
    theta: &ParamSet,
    optimizer: &OptimizerState,
    task: &T,
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<MetaStep> {
    let (inner, outer) = episode_batches(task.train_size(), cfg.inner_steps, cfg.inner_batch, rng)?;
    let inner_opt = OptimizerConfig::defaults(cfg.inner_optimizer, Some(cfg.inner_lr));
    let (adapted, inner_loss) = adapt_on(theta, task, &inner, &inner_opt, cfg.clip_norm)?;
    let (outer_loss, grads) = task.loss_and_grad(&adapted, &outer)?;
    let meta_grad = clip(grads, cfg.clip_norm);
    let (optimizer, params) = optimizer.step(theta, &meta_grad)?;
    Ok(MetaStep {
        params,
        optimizer,
        adapted,
        meta_grad,
        inner_loss,
        outer_loss,
    })
}

fn model_tasks<'a>(model: &'a Model, handles: &[TaskHandle]) -> Result<Vec<ModelTask<'a>>> {
    handles.iter().map(|t| ModelTask::new(model, t)).collect()
}

/// Meta-trains a freshly initialized model on `sources` for
/// `cfg.meta_epochs` epochs. `dev` holds the development languages.
pub fn maml_train(
    cfg: &MetaConfig,
    model: &Model,
    sources: &[TaskHandle],
    dev: &[TaskHandle],
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    let mut state = TrainState::new(ParamSet::new(), cfg.outer_optimizer_config(model.kind()), cfg.seed);
    state.params = model.init_params(&mut state.rng);
    maml_continue(state, cfg, model, sources, dev, sink)
}

/// Continues meta-training from `state` until `cfg.meta_epochs` epochs are done.
pub fn maml_continue(
    mut state: TrainState,
    cfg: &MetaConfig,
    model: &Model,
    sources: &[TaskHandle],
    dev: &[TaskHandle],
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::EmptyData("meta-training needs at least one source task".into()));
    }
    model.check_params(&state.params)?;
    let tasks = model_tasks(model, sources)?;
    let dev_tasks = match cfg.dev_source {
        super::DevSource::DevelopmentLanguages => model_tasks(model, dev)?,
        super::DevSource::SourceSplits => model_tasks(model, sources)?,
    };
    let sizes: Vec<usize> = tasks.iter().map(|t| t.train.len()).collect();
    let episodes = cfg
        .episodes_per_epoch
        .unwrap_or_else(|| episodes_per_epoch(&sizes, cfg.inner_steps, cfg.inner_batch));
    state.budget = cfg.meta_epochs;

    while state.epoch < cfg.meta_epochs {
        let epoch = state.epoch + 1;
        let mut losses = Vec::new();
        for _ in 0..episodes {
            for i in episode_tasks(tasks.len(), cfg.tasks_per_episode, &mut state.rng) {
                let step = meta_step(&state.params, &state.optimizer, &tasks[i], cfg, &mut state.rng)?;
                check_finite(step.outer_loss, epoch)?;
                losses.push(step.outer_loss);
                state.params = step.params;
                state.optimizer = step.optimizer;
            }
        }
        check_params_finite(&state.params, epoch)?;
        let loss = mean(losses);
        let evaluate_now = cfg.eval_every_epoch || epoch == cfg.meta_epochs;
        let record = evaluate(model, &state.params, &dev_tasks, cfg, cfg.dev_signal, epoch, loss, evaluate_now)?;
        sink.record(&state.complete_epoch(record))?;
    }
    Ok(state)
}

/// Task order of one episode: a shuffled sweep over all tasks by default,
/// otherwise `m` tasks drawn uniformly (without replacement while possible).
fn episode_tasks<R: Rng + ?Sized>(n: usize, per_episode: Option<usize>, rng: &mut R) -> Vec<usize> {
    match per_episode {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order
        }
        Some(m) if m <= n => rand::seq::index::sample(rng, n, m).into_vec(),
        Some(m) => (0..m).map(|_| rng.random_range(0..n)).collect(),
    }
}

/// Adapted-vs-plain scoring is only defined for meta-training; exposed for
/// the evaluation helper.
pub(crate) fn adapted_params<R: Rng + ?Sized>(
    params: &ParamSet,
    task: &ModelTask<'_>,
    cfg: &MetaConfig,
    signal: DevSignal,
    rng: &mut R,
) -> Result<Option<ParamSet>> {
    match signal {
        DevSignal::Plain => Ok(None),
        DevSignal::Adapted => inner_adapt(params, task, cfg.inner_steps, cfg.inner_lr, cfg.inner_batch, cfg.clip_norm, rng).map(Some),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::Tensor;
    use crate::seeded_rng;

    /// `0.5 * |theta - c|^2` regardless of the batch.
    struct Quadratic {
        c: Vec<f64>,
    }

    impl TaskLoss for Quadratic {
        fn train_size(&self) -> usize {
            1000
        }
        fn loss_and_grad(&self, params: &ParamSet, _: &[usize]) -> Result<(f64, GradientMap)> {
            let t = params.get("theta").unwrap();
            let d: Vec<f64> = t.data().iter().zip(&self.c).map(|(x, c)| x - c).collect();
            let loss = 0.5 * d.iter().map(|x| x * x).sum::<f64>();
            let g = GradientMap::from_map([("theta".to_string(), Tensor::vector(d))].into());
            Ok((loss, g))
        }
    }

    fn theta(v: Vec<f64>) -> ParamSet {
        ParamSet::new().with("theta", Tensor::vector(v))
    }

    #[test]
    fn episode_batches_are_disjoint_when_data_suffices() {
        let mut rng = seeded_rng(3);
        let (inner, outer) = episode_batches(200, 5, 20, &mut rng).unwrap();
        assert_eq!(inner.len(), 5);
        let mut all: Vec<usize> = inner.concat();
        all.extend(&outer);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 120);
    }

    #[test]
    fn small_tasks_keep_the_outer_batch_separate() {
        let mut rng = seeded_rng(3);
        let (inner, outer) = episode_batches(30, 5, 20, &mut rng).unwrap();
        assert_eq!(outer.len(), 5);
        assert!(inner.iter().all(|b| b.len() == 20));
        assert!(inner.iter().flatten().all(|i| !outer.contains(i)));
        assert!(episode_batches(0, 5, 20, &mut rng).is_err());
        let (inner, outer) = episode_batches(1, 2, 3, &mut rng).unwrap();
        assert_eq!((inner, outer), (vec![vec![0; 3]; 2], vec![0; 3]));
    }

    #[test]
    fn episode_count_covers_the_mean_task() {
        assert_eq!(episodes_per_epoch(&[2000, 2000], 5, 20), 20);
        assert_eq!(episodes_per_epoch(&[100, 150], 5, 20), 2);
        assert_eq!(episodes_per_epoch(&[3], 5, 20), 1);
    }

    #[test]
    fn inner_adapt_contracts_geometrically() {
        let task = Quadratic { c: vec![2.0, -1.0] };
        let th = theta(vec![0.5, 3.0]);
        let out = inner_adapt(&th, &task, 2, 0.1, 20, None, &mut seeded_rng(0)).unwrap();
        let got = out.get("theta").unwrap().data();
        for (i, (x, c)) in [0.5, 3.0].iter().zip([2.0, -1.0]).enumerate() {
            assert!((got[i] - (c + 0.81 * (x - c))).abs() < 1e-12);
        }
        assert_eq!(th.get("theta").unwrap().data(), &[0.5, 3.0]);
        assert!(inner_adapt(&th, &task, 0, 0.1, 20, None, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn meta_step_is_first_order() {
        let task = Quadratic { c: vec![0.0] };
        let cfg = MetaConfig {
            inner_steps: 1,
            inner_lr: 0.1,
            outer_lr: Some(0.1),
            outer_optimizer: Some(OptimizerKind::Sgd),
            ..Default::default()
        };
        let opt = OptimizerState::new(cfg.outer_optimizer_config(crate::models::ModelKind::Pg));
        let step = meta_step(&theta(vec![1.0]), &opt, &task, &cfg, &mut seeded_rng(0)).unwrap();
        assert!((step.adapted.get("theta").unwrap().data()[0] - 0.9).abs() < 1e-15);
        assert!((step.meta_grad.get("theta").unwrap().data()[0] - 0.9).abs() < 1e-15);
        let new = step.params.get("theta").unwrap().data()[0];
        assert!((new - 0.91).abs() < 1e-12);
        assert!((new - 0.919).abs() > 1e-3);
    }

    #[test]
    fn zero_meta_gradient_keeps_theta() {
        let task = Quadratic { c: vec![0.4] };
        let cfg = MetaConfig::default();
        let opt = OptimizerState::new(cfg.outer_optimizer_config(crate::models::ModelKind::Pg));
        let step = meta_step(&theta(vec![0.4]), &opt, &task, &cfg, &mut seeded_rng(0)).unwrap();
        assert_eq!(step.params, theta(vec![0.4]));
    }

    #[test]
    fn episode_task_selection() {
        let mut rng = seeded_rng(1);
        let mut all = episode_tasks(4, None, &mut rng);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        let some = episode_tasks(4, Some(2), &mut rng);
        assert_eq!(some.len(), 2);
        assert_ne!(some[0], some[1]);
        assert_eq!(episode_tasks(2, Some(5), &mut rng).len(), 5);
    }
}
