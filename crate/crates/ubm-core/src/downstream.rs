//! Target-stage training: transfer the upstream encoder, re-initialize the
//! classifier head, and fine-tune on the target task with no bias-mitigation
//! objective, under one of three weight-plasticity regimes (plain fine-tune,
//! frozen encoder, or an L2 penalty toward the transferred starting point).

use alloc::format;
use alloc::vec::Vec;

use crate::adam::{Adam, AdamConfig};
use crate::corpus::Example;
use crate::error::{CoreError, Result};
use crate::metrics::{importance_gradient_probe, validation_metric, TracePoint};
use crate::model::{self, ModelParams, Trainable};
use crate::tape::{Tape, VarId};
use crate::upstream::{shuffled_batches, EarlyStopper, ImportanceScale, TaskSpec, TrainedModel};
use crate::model::BoundModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DownstreamMode {
    #[default]
    FineTune,
    Freeze,
    L2Sp,
}

impl core::fmt::Display for DownstreamMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DownstreamMode::FineTune => f.write_str("fine-tune"),
            DownstreamMode::Freeze => f.write_str("freeze"),
            DownstreamMode::L2Sp => f.write_str("l2sp"),
        }
    }
}

impl core::str::FromStr for DownstreamMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine-tune" => Ok(DownstreamMode::FineTune),
            "freeze" => Ok(DownstreamMode::Freeze),
            "l2sp" => Ok(DownstreamMode::L2Sp),
            other => Err(CoreError::config(format!("unknown downstream mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamConfig {
    pub mode: DownstreamMode,
    /// L2-to-starting-point strength (l2sp mode only).
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub seed: u64,
    /// When set, record the importance probe every N steps (and at step 0).
    pub trace_every: Option<u64>,
    pub importance_scale: ImportanceScale,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            mode: DownstreamMode::FineTune,
            beta: 1.0,
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 3,
            seed: 0,
            trace_every: None,
            importance_scale: ImportanceScale::Probability,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(CoreError::config("beta must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::config("epochs and batch_size must be positive"));
        }
        if self.trace_every == Some(0) {
            return Err(CoreError::config("trace interval must be positive"));
        }
        Ok(())
    }
}

/// Builds the target model from a trained source model: encoder and embedding
/// weights are copied bit-exact, every source head (task and adversarial) is
/// dropped, and exactly one fresh head for the target task is created.
pub fn transfer_init(
    source: &ModelParams,
    task_id: &str,
    classes: usize,
    harmful: &[usize],
    head_seed: u64,
) -> Result<ModelParams> {
    source.validate_shapes()?;
    let mut params = ModelParams {
        config: source.config,
        embedding: source.embedding.clone(),
        w1: source.w1.clone(),
        b1: source.b1.clone(),
        w2: source.w2.clone(),
        b2: source.b2.clone(),
        attention: source.attention.clone(),
        heads: alloc::collections::BTreeMap::new(),
        adv_heads: alloc::collections::BTreeMap::new(),
    };
    params.add_task_head(task_id, classes, harmful, head_seed)?;
    Ok(params)
}

/// `beta * sum over encoder tensors of ||w - w0||^2`, as a differentiable
/// node. The freshly initialized head has no starting point and is excluded.
pub fn l2sp_penalty_node(
    tape: &mut Tape,
    bound: &BoundModel,
    init: &ModelParams,
    beta: f64,
) -> Result<VarId> {
    if beta < 0.0 {
        return Err(CoreError::usage("l2sp beta must be non-negative"));
    }
    let mut acc: Option<VarId> = None;
    for (name, t0) in init.encoder_tensors() {
        let current = bound.var(&name)?;
        if tape.value(current).shape() != t0.shape() {
            return Err(CoreError::usage(format!(
                "l2sp structure mismatch on {name}: {:?} vs {:?}",
                tape.value(current).shape(),
                t0.shape()
            )));
        }
        let anchor = tape.constant(t0.clone());
        let diff = tape.sub(current, anchor)?;
        let sq = tape.sum_squares(diff)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    let total = acc.ok_or_else(|| CoreError::usage("no encoder tensors to regularize"))?;
    tape.scale(total, beta)
}

/// Value-level l2sp penalty, for tests and reporting.
pub fn l2sp_penalty(params: &ModelParams, init: &ModelParams, beta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, Trainable::None);
    let node = l2sp_penalty_node(&mut tape, &bound, init, beta)?;
    Ok(tape.value(node).item())
}

/// Euclidean distance between two models' encoder parameters, flattened.
pub fn encoder_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    let av = a.encoder_tensors();
    let bv = b.encoder_tensors();
    if av.len() != bv.len() {
        return Err(CoreError::usage("encoder structures differ"));
    }
    let mut total = 0.0;
    for ((name_a, ta), (name_b, tb)) in av.iter().zip(&bv) {
        if name_a != name_b || ta.shape() != tb.shape() {
            return Err(CoreError::usage(format!("encoder structures differ at {name_a}/{name_b}")));
        }
        total += ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(libm::sqrt(total))
}

/// Plain cross-entropy over a batch: the downstream loss carries no
/// explanation-regularization and no adversarial term, by construction.
pub fn downstream_batch_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    task_id: &str,
    batch: &[&Example],
) -> Result<VarId> {
    let mut total: Option<VarId> = None;
    for ex in batch {
        let z = model::encode(tape, bound, &ex.token_ids)?;
        let logits = model::classify(tape, bound, z, task_id)?;
        let ce = tape.cross_entropy(logits, &[ex.label])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| CoreError::usage("empty downstream batch"))?;
    tape.scale(total, 1.0 / batch.len() as f64)
}

fn divergence(step: u64, err: CoreError) -> CoreError {
    match err {
        CoreError::NonFinite { op } => CoreError::Diverged {
            step,
            detail: format!("non-finite value in op {op} during downstream training"),
        },
        other => other,
    }
}

/// Fine-tunes `params` on the target task. Returns the best-validation model
/// plus the importance trace (empty unless tracing was requested).
pub fn train_downstream(
    params: ModelParams,
    task: &TaskSpec,
    cfg: &DownstreamConfig,
) -> Result<(TrainedModel, Vec<TracePoint>)> {
    cfg.validate()?;
    task.validate()?;
    params.task_head(&task.task_id)?;

    let mut params = params;
    let init_snapshot = match cfg.mode {
        DownstreamMode::L2Sp => Some(params.clone()),
        _ => None,
    };
    let trainable = match cfg.mode {
        DownstreamMode::Freeze => Trainable::HeadsOnly,
        _ => Trainable::All,
    };

    let mut trace = Vec::new();
    let mut record_trace = |step: u64, params: &ModelParams| -> Result<()> {
        if let Some(stats) = importance_gradient_probe(
            params,
            &task.task_id,
            &task.splits.val,
            &task.factors,
            cfg.importance_scale,
        )? {
            trace.push(TracePoint {
                step,
                mean_abs_importance: stats.mean_abs_importance,
                mean_grad_norm: stats.mean_grad_norm,
            });
        }
        Ok(())
    };

    if cfg.trace_every.is_some() {
        record_trace(0, &params)?;
    }

    let mut adam = Adam::new(cfg.adam)?;
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params = params.clone();
    let mut val_history = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let batches = shuffled_batches(
            task.splits.train.len(),
            cfg.batch_size,
            model::derive_seed(cfg.seed, &format!("downstream-shuffle:{epoch}:{}", task.task_id)),
        );
        for batch_indices in batches {
            let batch: Vec<&Example> = batch_indices.iter().map(|i| &task.splits.train[*i]).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, trainable);
            let mut loss = downstream_batch_loss(&mut tape, &bound, &task.task_id, &batch)
                .map_err(|e| divergence(step, e))?;
            if let Some(init) = &init_snapshot {
                let penalty = l2sp_penalty_node(&mut tape, &bound, init, cfg.beta)?;
                loss = tape.add(loss, penalty).map_err(|e| divergence(step, e))?;
            }
            tape.backward(loss).map_err(|e| divergence(step, e))?;
            let grads = bound.collect_grads(&tape);
            adam.step_named(&mut params.named_tensors_mut(), &grads)?;
            step += 1;
            if let Some(every) = cfg.trace_every {
                if step % every == 0 {
                    record_trace(step, &params)?;
                }
            }
        }
        let metric = validation_metric(&params, task)?;
        val_history.push(metric);
        if stopper.observe(epoch, metric) {
            best_params = params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }

    if let Some(every) = cfg.trace_every {
        if step % every != 0 {
            record_trace(step, &params)?;
        }
    }

    Ok((
        TrainedModel {
            params: best_params,
            best_epoch: stopper.best_epoch,
            best_val_metric: stopper.best_metric,
            steps: step,
            val_history,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, EncoderConfig};

    fn source_model() -> ModelParams {
        let config = EncoderConfig {
            vocab_size: 30,
            embed_dim: 6,
            hidden_dim: 8,
            repr_dim: 5,
            kind: crate::model::EncoderKind::MeanPoolMlp,
        };
        let mut params = init_params(&config, 7).unwrap();
        params.add_task_head("src", 2, &[1], 8).unwrap();
        params.add_adv_head("dialect", 9).unwrap();
        params
    }

    #[test]
    fn transfer_copies_encoder_and_drops_source_heads() {
        let source = source_model();
        let target = transfer_init(&source, "tgt", 3, &[1, 2], 99).unwrap();
        assert_eq!(target.embedding, source.embedding);
        assert_eq!(target.w1, source.w1);
        assert_eq!(target.b1, source.b1);
        assert_eq!(target.w2, source.w2);
        assert_eq!(target.b2, source.b2);
        assert!(target.adv_heads.is_empty());
        assert_eq!(target.heads.len(), 1);
        assert_eq!(target.heads["tgt"].classes(), 3);
    }

    #[test]
    fn transfer_head_seeds_differ_encoders_match() {
        let source = source_model();
        let a = transfer_init(&source, "tgt", 2, &[1], 1).unwrap();
        let b = transfer_init(&source, "tgt", 2, &[1], 2).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.w1, b.w1);
        assert_ne!(a.heads["tgt"].linear.weight, b.heads["tgt"].linear.weight);
    }

    #[test]
    fn l2sp_zero_at_init_and_zero_beta() {
        let source = source_model();
        let target = transfer_init(&source, "tgt", 2, &[1], 1).unwrap();
        assert_eq!(l2sp_penalty(&target, &target, 1.0).unwrap(), 0.0);

        let mut moved = target.clone();
        moved.w1.values_mut()[0] += 0.5;
        assert_eq!(l2sp_penalty(&moved, &target, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn l2sp_single_coordinate_perturbation() {
        let source = source_model();
        let target = transfer_init(&source, "tgt", 2, &[1], 1).unwrap();
        let mut moved = target.clone();
        let delta = 0.37;
        moved.w2.values_mut()[3] += delta;
        let beta = 2.5;
        let penalty = l2sp_penalty(&moved, &target, beta).unwrap();
        assert!((penalty - beta * delta * delta).abs() < 1e-12);
    }

    #[test]
    fn l2sp_ignores_head_changes() {
        let source = source_model();
        let target = transfer_init(&source, "tgt", 2, &[1], 1).unwrap();
        let mut moved = target.clone();
        moved.heads.get_mut("tgt").unwrap().linear.weight.values_mut()[0] += 3.0;
        assert_eq!(l2sp_penalty(&moved, &target, 1.0).unwrap(), 0.0);
    }
}
