use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rng_for, MetricRow, RngStream, RunMetrics, TaskSpec, TaskStream};
use crate::data::{sample_reference, Dataset};
use crate::error::{Error, Result};
use crate::freeze::{apply_freeze, plan_freeze, PlanEvaluator, PlanResult, PruneConfig};
use crate::lrp::{argmax, unit_importance, ImportanceConfig};
use crate::net::{Gradients, Network};
use crate::optim::{AdamConfig, AdamState, FreezeState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fresh Adam moments at the start of every task.
    pub reset_optimizer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 128,
            adam: AdamConfig::default(),
            reset_optimizer: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TbeConfig {
    pub reference_per_class: usize,
    pub importance: ImportanceConfig,
    pub prune: PruneConfig,
    pub lr_frozen: f64,
    pub lr_irrelevant: f64,
}

impl Default for TbeConfig {
    fn default() -> Self {
        Self {
            reference_per_class: 10,
            importance: ImportanceConfig::default(),
            prune: PruneConfig::default(),
            lr_frozen: 0.0,
            lr_irrelevant: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Plain fine-tuning of every task in turn.
    Baseline,
    /// Freeze relevant units after each task.
    Tbe(TbeConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Tbe(_) => "tbe",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub freeze: FreezeState,
    /// One plan per task; empty for the baseline.
    pub plans: Vec<PlanResult>,
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (rows, classes) = (logits.rows(), logits.row_len());
    if labels.len() != rows {
        return Err(Error::Validation(format!("{} labels for {rows} rows", labels.len())));
    }
    let mut grad = Vec::with_capacity(logits.len());
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks_exact(classes).zip(labels) {
        if y >= classes {
            return Err(Error::Index { index: y, len: classes });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        loss += z.ln() - (row[y] - max);
        grad.extend(exp.iter().enumerate().map(|(k, e)| {
            let p = e / z;
            (if k == y { p - 1.0 } else { p }) / rows as f64
        }));
    }
    Ok((loss / rows as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Trains `task` for the configured epochs. Returns the last epoch's mean loss.
pub fn train_task(
    net: &mut Network,
    adam: &mut AdamState,
    freeze: &FreezeState,
    data: &Dataset,
    task: &TaskSpec,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let input_shape = net.input_shape().to_vec();
    let mut order = task.train.clone();
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = task.gather(data, batch, &input_shape)?;
            let (logits, trace) = net.forward(&x, &task.head)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            let grads = net.backward(&trace, &grad)?;
            adam.step(net, &grads, freeze)?;
            total += loss;
            batches += 1;
        }
        last = total / batches.max(1) as f64;
        if !last.is_finite() {
            return Err(Error::Eval(format!("loss diverged on task {} epoch {epoch}", task.index)));
        }
        log::debug!("task {} epoch {epoch}: loss {last:.5}", task.index);
    }
    Ok(last)
}

const EVAL_BATCH: usize = 1000;

/// Top-1 accuracy (fraction) of `task`'s head on `indices`.
pub fn evaluate(net: &Network, data: &Dataset, task: &TaskSpec, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Eval(format!("task {} has no evaluation samples", task.index)));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = task.gather(data, chunk, net.input_shape())?;
        let logits = net.predict(&x, &task.head)?;
        correct += logits
            .data()
            .chunks_exact(logits.row_len())
            .zip(&y)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

fn check_heads(net: &Network, stream: &TaskStream) -> Result<()> {
    for t in &stream.tasks {
        let h = net.head_index(&t.head)?;
        let out = net.head_specs()[h].out_dim;
        if out != t.num_classes() {
            return Err(Error::InvalidNetwork(format!(
                "head {} has {out} outputs for {} classes",
                t.head,
                t.num_classes()
            )));
        }
    }
    Ok(())
}

fn plan_task(
    net: &mut Network,
    freeze: &FreezeState,
    task: &TaskSpec,
    train: &Dataset,
    test: &Dataset,
    tbe: &TbeConfig,
    ref_seed: u64,
) -> Result<PlanResult> {
    let reference = sample_reference(train, &task.train, tbe.reference_per_class, ref_seed)?;
    let (x_ref, y_ref) = task.gather(train, &reference.indices, net.input_shape())?;
    let report = unit_importance(net, &x_ref, &y_ref, &task.head, &tbe.importance, task.index)?;
    let (eval_data, eval_idx) = if task.validation.is_empty() {
        (test, &task.test)
    } else {
        (train, &task.validation)
    };
    let (x_ev, y_ev) = task.gather(eval_data, eval_idx, net.input_shape())?;
    let evaluator = PlanEvaluator::new(net, &x_ev, &y_ev, &task.head)?;
    plan_freeze(net, &task.head, &report, freeze, &tbe.prune, |n| evaluator.accuracy(n))
}

/// Trains the stream's tasks in order, evaluating every seen task after each.
pub fn run_sequential(
    net: &mut Network,
    stream: &TaskStream,
    train: &Dataset,
    test: &Dataset,
    method: &Method,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunOutcome> {
    check_heads(net, stream)?;
    let mut freeze = FreezeState::new(net);
    let mut adam = AdamState::new(cfg.adam);
    let mut shuffle = rng_for(seed, RngStream::Shuffle);
    let mut ref_rng = rng_for(seed, RngStream::Reference);
    let mut metrics = RunMetrics::new(&stream.protocol, method.name(), seed);
    let mut plans = Vec::new();
    for (stage, task) in stream.tasks.iter().enumerate() {
        let started = Instant::now();
        if cfg.reset_optimizer && stage > 0 {
            adam = AdamState::new(cfg.adam);
        }
        train_task(net, &mut adam, &freeze, train, task, cfg, &mut shuffle)?;
        if let Method::Tbe(tbe) = method {
            let plan = plan_task(net, &freeze, task, train, test, tbe, ref_rng.random())?;
            freeze = apply_freeze(&plan, &freeze, tbe.lr_frozen, tbe.lr_irrelevant, task.index)?;
            log::info!(
                "task {}: froze {} units, free capacity {:.2}%",
                task.index,
                plan.relevant.len(),
                freeze.free_capacity()
            );
            plans.push(plan);
        }
        for seen in &stream.tasks[..=stage] {
            metrics.rows.push(MetricRow {
                stage,
                task: seen.index,
                accuracy: 100.0 * evaluate(net, test, seen, &seen.test)?,
                free_capacity: freeze.free_capacity(),
            });
        }
        metrics.stage_seconds.push(started.elapsed().as_secs_f64());
        log::info!(
            "{} stage {stage}: mean accuracy {:.2}",
            method.name(),
            metrics.mean_seen(stage).unwrap_or(f64::NAN)
        );
    }
    Ok(RunOutcome { metrics, freeze, plans })
}

/// Trains all tasks at once: each mixed batch is split by task, every part
/// goes through its own head, and the gradients are summed with weight
/// `part / batch` before one optimizer step. Reported as a single stage
/// labelled with the last task index.
pub fn run_joint_upper_bound(
    net: &mut Network,
    stream: &TaskStream,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunOutcome> {
    check_heads(net, stream)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let started = Instant::now();
    let freeze = FreezeState::new(net);
    let mut adam = AdamState::new(cfg.adam);
    let mut shuffle = rng_for(seed, RngStream::Shuffle);
    let mut pool: Vec<(usize, usize)> = stream
        .tasks
        .iter()
        .enumerate()
        .flat_map(|(t, task)| task.train.iter().map(move |&i| (t, i)))
        .collect();
    let input_shape = net.input_shape().to_vec();
    for _ in 0..cfg.epochs {
        pool.shuffle(&mut shuffle);
        for batch in pool.chunks(cfg.batch_size) {
            let mut grads = Gradients::default();
            for (t, task) in stream.tasks.iter().enumerate() {
                let idx: Vec<usize> = batch.iter().filter(|(bt, _)| *bt == t).map(|&(_, i)| i).collect();
                if idx.is_empty() {
                    continue;
                }
                let (x, y) = task.gather(train, &idx, &input_shape)?;
                let (logits, trace) = net.forward(&x, &task.head)?;
                let (_, grad) = softmax_cross_entropy(&logits, &y)?;
                let scale = idx.len() as f64 / batch.len() as f64;
                grads.accumulate(net.backward(&trace, &grad.map(|g| g * scale))?);
            }
            adam.step(net, &grads, &freeze)?;
        }
    }
    let stage = stream.tasks.len().saturating_sub(1);
    let mut metrics = RunMetrics::new(&stream.protocol, "joint", seed);
    for task in &stream.tasks {
        metrics.rows.push(MetricRow {
            stage,
            task: task.index,
            accuracy: 100.0 * evaluate(net, test, task, &task.test)?,
            free_capacity: freeze.free_capacity(),
        });
    }
    metrics.stage_seconds.push(started.elapsed().as_secs_f64());
    Ok(RunOutcome {
        metrics,
        freeze,
        plans: Vec::new(),
    })
}
