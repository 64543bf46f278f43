//! Joint training of every exit.
//!
//! The objective is the depth-weighted average `sum_j j * L_j / sum_j j` of the
//! per-exit losses (softmax cross-entropy for single-label, label-averaged
//! sigmoid BCE for multi-label), plus a small auxiliary BCE term that teaches
//! each confidence head whether its exit is correct. Parameters are updated
//! with AdamW on minibatches of per-sample graphs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{binarize_mlc, EncodedDataset, EncodedExample, Label};
use crate::error::{Error, Result};
use crate::harness::Metrics;
use crate::model::{MultiExitModel, TaskKind};
use crate::similarity::ProbDist;
use crate::tensor::{Tape, Var};

pub const GRID_BATCH_SIZES: [usize; 3] = [16, 32, 128];
pub const GRID_LEARNING_RATES: [f64; 4] = [1e-5, 2e-5, 3e-5, 5e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the confidence-head BCE relative to the exit objective.
    pub confidence_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            epochs: 20,
            weight_decay: 0.01,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            confidence_weight: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate < 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::config(
                "learning_rate and weight_decay must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    /// Mean loss of each exit over the epoch.
    pub per_layer: Vec<f64>,
    /// Depth-weighted recombination of `per_layer`.
    pub total: f64,
    pub per_layer_accuracy: Vec<f64>,
    pub confidence_loss: f64,
}

/// Normalized depth weights `j / sum_i i`, `j = 1..=n`.
pub fn layer_weights(n: usize) -> Vec<f64> {
    let denom = (n * (n + 1) / 2) as f64;
    (1..=n).map(|j| j as f64 / denom).collect()
}

/// `sum_j j * L_j / sum_j j`.
pub fn total_loss(per_layer: &[f64]) -> f64 {
    let num: f64 = per_layer
        .iter()
        .enumerate()
        .map(|(i, l)| (i + 1) as f64 * l)
        .sum();
    let denom = (per_layer.len() * (per_layer.len() + 1) / 2) as f64;
    num / denom
}

const LOG_FLOOR: f64 = 1e-12;

/// Loss of one exit's probabilities against a target.
pub fn per_layer_loss(p: &ProbDist, target: &Label) -> Result<f64> {
    match (p, target) {
        (ProbDist::Slc(probs), Label::Single(t)) => {
            let pt = probs.get(*t).ok_or_else(|| Error::Input {
                position: *t,
                msg: format!("target class out of range for {} classes", probs.len()),
            })?;
            Ok(-pt.max(LOG_FLOOR).ln())
        }
        (ProbDist::Mlc(pairs), Label::Multi(ls)) => {
            if let Some(&bad) = ls.iter().find(|&&l| l >= pairs.len()) {
                return Err(Error::Input {
                    position: bad,
                    msg: format!("label out of range for {} labels", pairs.len()),
                });
            }
            let targets = binarize_mlc(ls, pairs.len());
            let total: f64 = pairs
                .iter()
                .zip(&targets)
                .map(|(pair, &t)| {
                    -(t * pair[0].max(LOG_FLOOR).ln() + (1.0 - t) * pair[1].max(LOG_FLOOR).ln())
                })
                .sum();
            Ok(total / pairs.len() as f64)
        }
        _ => Err(Error::config("target kind does not match prediction kind")),
    }
}

/// Whether an exit's prediction counts as correct for the confidence target.
pub(crate) fn is_correct(p: &ProbDist, target: &Label) -> bool {
    match target {
        Label::Single(t) => p.argmax() == *t,
        Label::Multi(ls) => p.label_set() == crate::harness::normalized(ls),
    }
}

/// Scalar pieces of one sample's objective.
pub(crate) struct SampleObjective {
    pub loss: Var,
    pub per_layer: Vec<f64>,
    pub correct: Vec<bool>,
    pub confidence_loss: f64,
}

/// Builds the training objective for one example on `tape`.
pub(crate) fn sample_objective(
    model: &MultiExitModel,
    tape: &mut Tape,
    ex: &EncodedExample,
    confidence_weight: f64,
) -> Result<SampleObjective> {
    let task = model.task_kind();
    let n = model.n_layers();
    let out = model.build_graph(tape, &ex.tokens)?;
    let weights = layer_weights(n);
    let mut per_layer = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    let mut terms = Vec::with_capacity(2 * n);
    let mut confidence_loss = 0.0;

    for (j, (&logits, &conf)) in out.logits.iter().zip(&out.confidence_logits).enumerate() {
        let lj = match (task, &ex.label) {
            (TaskKind::Slc, Label::Single(t)) => tape.cross_entropy_logits(logits, *t)?,
            (TaskKind::Mlc, Label::Multi(ls)) => {
                let targets = binarize_mlc(ls, model.config().n_classes);
                tape.bce_logits(logits, &targets)?
            }
            _ => {
                return Err(Error::config(
                    "example label kind does not match the model task",
                ))
            }
        };
        per_layer.push(tape.value(lj).data()[0]);
        terms.push(tape.scale(lj, weights[j]));

        let probs = ProbDist::from_logits(task, tape.value(logits).data());
        let ok = is_correct(&probs, &ex.label);
        correct.push(ok);
        if confidence_weight > 0.0 {
            let c = tape.bce_logits(conf, &[if ok { 1.0 } else { 0.0 }])?;
            confidence_loss += tape.value(c).data()[0] / n as f64;
            terms.push(tape.scale(c, confidence_weight / n as f64));
        }
    }

    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    Ok(SampleObjective {
        loss,
        per_layer,
        correct,
        confidence_loss,
    })
}

/// Value of one example's objective.
pub fn objective(
    model: &MultiExitModel,
    ex: &EncodedExample,
    confidence_weight: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let obj = sample_objective(model, &mut tape, ex, confidence_weight)?;
    Ok(tape.value(obj.loss).data()[0])
}

/// One example's objective and its gradient for every parameter, in
/// parameter order.
pub fn objective_gradients(
    model: &MultiExitModel,
    ex: &EncodedExample,
    confidence_weight: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let obj = sample_objective(model, &mut tape, ex, confidence_weight)?;
    let g = tape.backward(obj.loss)?;
    let mut grads: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| vec![0.0; p.value.numel()])
        .collect();
    for (pid, pg) in g.params() {
        grads[pid].copy_from_slice(pg);
    }
    Ok((tape.value(obj.loss).data()[0], grads))
}

/// Decoupled-weight-decay Adam.
struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    fn new(model: &MultiExitModel) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MultiExitModel, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, param) in model.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in param.value.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
                *w -= cfg.learning_rate * (update + cfg.weight_decay * *w);
            }
        }
    }
}

fn check_task(model: &MultiExitModel, data: &EncodedDataset) -> Result<()> {
    if model.task_kind() != data.task {
        return Err(Error::config(format!(
            "dataset task {} does not match model task {}",
            data.task,
            model.task_kind()
        )));
    }
    if model.config().n_classes != data.n_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model has {}",
            data.n_classes,
            model.config().n_classes
        )));
    }
    Ok(())
}

/// Trains `model` in place and returns one report per epoch.
pub fn train(
    model: &mut MultiExitModel,
    data: &EncodedDataset,
    cfg: &TrainConfig,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    check_task(model, data)?;
    let n = model.n_layers();
    let mut opt = AdamW::new(model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_mul(0x9E37_79B9)
                .wrapping_add(epoch as u64),
        );
        order.shuffle(&mut rng);
        let mut loss_sums = vec![0.0; n];
        let mut correct = vec![0usize; n];
        let mut conf_sum = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = model
                .params()
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect();
            for &idx in batch {
                let mut tape = Tape::new();
                let obj =
                    sample_objective(model, &mut tape, &data.examples[idx], cfg.confidence_weight)?;
                let g = tape.backward(obj.loss)?;
                for (pid, pg) in g.params() {
                    for (acc, x) in grads[pid].iter_mut().zip(pg) {
                        *acc += x;
                    }
                }
                for j in 0..n {
                    loss_sums[j] += obj.per_layer[j];
                    correct[j] += usize::from(obj.correct[j]);
                }
                conf_sum += obj.confidence_loss;
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            opt.step(model, &grads, cfg);
        }

        let count = data.len().max(1) as f64;
        let per_layer: Vec<f64> = loss_sums.iter().map(|s| s / count).collect();
        history.push(LossReport {
            epoch: epoch + 1,
            total: total_loss(&per_layer),
            per_layer,
            per_layer_accuracy: correct.iter().map(|&c| c as f64 / count).collect(),
            confidence_loss: conf_sum / count,
        });
    }
    Ok(history)
}

/// Score of the last exit: accuracy (single-label) or micro-F1 (multi-label).
pub fn final_layer_score(model: &MultiExitModel, data: &EncodedDataset) -> Result<f64> {
    check_task(model, data)?;
    let mut metrics = Metrics::default();
    for ex in &data.examples {
        let stream = model.forward_full(&ex.tokens)?;
        metrics.add(stream.probs.last().expect("at least two layers"), &ex.label);
    }
    Ok(metrics.score(data.task))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dev_score: f64,
    pub final_train_loss: f64,
}

pub struct GridSearch {
    pub rows: Vec<GridRow>,
    pub best_index: usize,
    pub best_model: MultiExitModel,
    pub best_history: Vec<LossReport>,
}

/// Every `(batch_size, learning_rate)` pair of the two lists.
pub fn grid(batch_sizes: &[usize], learning_rates: &[f64]) -> Vec<(usize, f64)> {
    batch_sizes
        .iter()
        .flat_map(|&b| learning_rates.iter().map(move |&lr| (b, lr)))
        .collect()
}

/// Trains one fresh model per cell and keeps the best by final-exit dev score.
/// Ties keep the earlier cell.
pub fn grid_search(
    factory: impl Fn() -> Result<MultiExitModel>,
    train_data: &EncodedDataset,
    dev_data: &EncodedDataset,
    base: &TrainConfig,
    cells: &[(usize, f64)],
) -> Result<GridSearch> {
    if cells.is_empty() {
        return Err(Error::config("grid search needs at least one cell"));
    }
    let mut rows = Vec::with_capacity(cells.len());
    let mut best: Option<(usize, MultiExitModel, Vec<LossReport>)> = None;
    for (i, &(batch_size, learning_rate)) in cells.iter().enumerate() {
        let cfg = TrainConfig {
            batch_size,
            learning_rate,
            ..base.clone()
        };
        let mut model = factory()?;
        let history = train(&mut model, train_data, &cfg)?;
        let dev_score = final_layer_score(&model, dev_data)?;
        rows.push(GridRow {
            batch_size,
            learning_rate,
            dev_score,
            final_train_loss: history.last().map_or(f64::NAN, |r| r.total),
        });
        let better = best
            .as_ref()
            .is_none_or(|(b, _, _)| dev_score > rows[*b].dev_score);
        if better {
            best = Some((i, model, history));
        }
    }
    let (best_index, best_model, best_history) = best.expect("non-empty grid");
    Ok(GridSearch {
        rows,
        best_index,
        best_model,
        best_history,
    })
}
