//! Source-stage training: multi-task optimization of the shared encoder with
//! explanation regularization (occlusion-importance penalties on lexicon
//! words) and/or adversarial de-biasing through gradient reversal.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::adam::{Adam, AdamConfig};
use crate::corpus::{BiasFactorSpec, Example, Mitigation, UNK};
use crate::error::{CoreError, Result};
use crate::metrics::validation_metric;
use crate::model::{self, BoundModel, EncoderConfig, ModelParams, Trainable};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// One domain-task pair: its data, label space, harmful subset, and the bias
/// factors attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub splits: DataSplits,
    pub classes: usize,
    pub harmful: Vec<usize>,
    pub factors: Vec<BiasFactorSpec>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.harmful.is_empty()
            || self.harmful.iter().any(|h| *h >= self.classes)
            || self.harmful.len() >= self.classes
        {
            return Err(CoreError::config(format!(
                "task {}: harmful set must be a proper non-empty subset of the label space",
                self.task_id
            )));
        }
        for factor in &self.factors {
            if factor.mitigation == Mitigation::ExplanationRegularization && factor.lexicon().is_none() {
                return Err(CoreError::config(format!(
                    "task {}: factor {} uses explanation regularization but is not lexical",
                    self.task_id, factor.name
                )));
            }
            if let Some(lex) = factor.lexicon() {
                if lex.is_empty() {
                    return Err(CoreError::config(format!(
                        "task {}: factor {} has an empty lexicon",
                        self.task_id, factor.name
                    )));
                }
            }
        }
        for ex in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if ex.label >= self.classes {
                return Err(CoreError::data(format!(
                    "task {}: example {} has label {} outside 0..{}",
                    self.task_id, ex.id, ex.label, self.classes
                )));
            }
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.classes == 2
    }

    fn er_factors(&self) -> Vec<&BiasFactorSpec> {
        self.factors
            .iter()
            .filter(|f| f.mitigation == Mitigation::ExplanationRegularization)
            .collect()
    }

    fn adv_factors(&self) -> Vec<&BiasFactorSpec> {
        self.factors
            .iter()
            .filter(|f| f.mitigation == Mitigation::Adversarial)
            .collect()
    }
}

/// Scale on which occlusion importance is measured. The default is the change
/// in harm probability; the logit scale is available for models whose raw
/// probabilities saturate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImportanceScale {
    #[default]
    Probability,
    Logit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamConfig {
    /// Explanation-regularization strength.
    pub alpha: f64,
    /// Gradient-reversal scale for adversarial factors.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub importance_scale: ImportanceScale,
}

impl Default for UpstreamConfig {
    fn default() -> Self {
        UpstreamConfig {
            alpha: 0.03,
            lambda: 1.0,
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 3,
            seed: 0,
            importance_scale: ImportanceScale::Probability,
        }
    }
}

impl UpstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.lambda < 0.0 {
            return Err(CoreError::config("alpha and lambda must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::config("epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Removes every occurrence of `w` from the sequence; an emptied sequence
/// becomes the single-token UNK sequence.
pub fn occlude(token_ids: &[u32], w: u32) -> Vec<u32> {
    let out: Vec<u32> = token_ids.iter().copied().filter(|t| *t != w).collect();
    if out.is_empty() {
        vec![UNK]
    } else {
        out
    }
}

fn importance_from_scores(
    tape: &mut Tape,
    full: VarId,
    occluded: VarId,
    scale: ImportanceScale,
) -> Result<VarId> {
    match scale {
        ImportanceScale::Probability => tape.sub(full, occluded),
        ImportanceScale::Logit => {
            let one = tape.constant(Tensor::scalar(1.0));
            let logit = |tape: &mut Tape, p: VarId| -> Result<VarId> {
                let ln_p = tape.ln(p)?;
                let comp = tape.sub(one, p)?;
                let ln_comp = tape.ln(comp)?;
                tape.sub(ln_p, ln_comp)
            };
            let lf = logit(tape, full)?;
            let lo = logit(tape, occluded)?;
            tape.sub(lf, lo)
        }
    }
}

/// Occlusion importance of token `w` in `x`, as a differentiable node:
/// `phi(w, x) = harm(x) - harm(x \ w)`, with both forward passes on the tape.
pub fn occlusion_importance_node(
    tape: &mut Tape,
    bound: &BoundModel,
    token_ids: &[u32],
    w: u32,
    task_id: &str,
    scale: ImportanceScale,
) -> Result<VarId> {
    if !token_ids.contains(&w) {
        return Err(CoreError::usage(format!(
            "occlusion target token {w} does not occur in the input"
        )));
    }
    let full = model::harm_score_graph(tape, bound, token_ids, task_id)?;
    let occluded_ids = occlude(token_ids, w);
    let occluded = model::harm_score_graph(tape, bound, &occluded_ids, task_id)?;
    importance_from_scores(tape, full, occluded, scale)
}

/// Value-level occlusion importance for one (example, word) pair.
pub fn occlusion_importance(
    params: &ModelParams,
    token_ids: &[u32],
    w: u32,
    task_id: &str,
    scale: ImportanceScale,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, Trainable::None);
    let node = occlusion_importance_node(&mut tape, &bound, token_ids, w, task_id, scale)?;
    Ok(tape.value(node).item())
}

/// Lexicon tokens of `factor` present in the sequence, as unique sorted types.
fn present_lexicon_tokens(token_ids: &[u32], factor: &BiasFactorSpec) -> Vec<u32> {
    match factor.lexicon() {
        Some(lex) => lex.iter().copied().filter(|w| token_ids.contains(w)).collect(),
        None => Vec::new(),
    }
}

/// Classification loss plus the occlusion-importance penalty:
/// `mean_i [ ce_i + alpha * sum_j sum_{w in unique(x_i) ∩ W_j} phi(w, x_i)^2 ]`.
///
/// All factors must be lexical. With `alpha = 0` this is exactly the mean
/// cross-entropy.
pub fn expl_reg_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    task_id: &str,
    batch: &[&Example],
    factors: &[&BiasFactorSpec],
    alpha: f64,
    scale: ImportanceScale,
) -> Result<VarId> {
    if batch.is_empty() {
        return Err(CoreError::usage("expl_reg_loss on an empty batch"));
    }
    if let Some(bad) = factors.iter().find(|f| f.lexicon().is_none()) {
        return Err(CoreError::usage(format!(
            "expl_reg_loss routed a non-lexical factor: {}",
            bad.name
        )));
    }
    let mut total: Option<VarId> = None;
    for ex in batch {
        let z = model::encode(tape, bound, &ex.token_ids)?;
        let logits = model::classify(tape, bound, z, task_id)?;
        let mut term = tape.cross_entropy(logits, &[ex.label])?;
        if alpha != 0.0 {
            let mut reg: Option<VarId> = None;
            let mut full_cache: Option<VarId> = None;
            for factor in factors {
                for w in present_lexicon_tokens(&ex.token_ids, factor) {
                    let full = match full_cache {
                        Some(node) => node,
                        None => {
                            let node = model::harm_score_node(tape, bound, logits, task_id)?;
                            full_cache = Some(node);
                            node
                        }
                    };
                    let occluded_ids = occlude(&ex.token_ids, w);
                    let occluded = model::harm_score_graph(tape, bound, &occluded_ids, task_id)?;
                    let phi = importance_from_scores(tape, full, occluded, scale)?;
                    let phi_sq = tape.mul(phi, phi)?;
                    reg = Some(match reg {
                        Some(acc) => tape.add(acc, phi_sq)?,
                        None => phi_sq,
                    });
                }
            }
            if let Some(reg) = reg {
                let scaled = tape.scale(reg, alpha)?;
                term = tape.add(term, scaled)?;
            }
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)
}

/// Adversarial objective: `sum_j mean_i ce(h_adv_j(grad_reverse(z_i)), a_i^j)`.
pub fn adv_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    batch: &[&Example],
    factors: &[&BiasFactorSpec],
    lambda: f64,
) -> Result<VarId> {
    if batch.is_empty() || factors.is_empty() {
        return Err(CoreError::usage("adv_loss needs a non-empty batch and at least one factor"));
    }
    let mut reprs = Vec::with_capacity(batch.len());
    for ex in batch {
        reprs.push(model::encode(tape, bound, &ex.token_ids)?);
    }
    let mut total: Option<VarId> = None;
    for factor in factors {
        let mut factor_sum: Option<VarId> = None;
        for (ex, z) in batch.iter().zip(&reprs) {
            let attr = ex.attributes.get(factor.attr_index).copied().ok_or_else(|| {
                CoreError::data(format!(
                    "example {} lacks attribute column {} required by factor {}",
                    ex.id, factor.attr_index, factor.name
                ))
            })?;
            let logits = model::adv_logits(tape, bound, *z, &factor.name, lambda)?;
            let ce = tape.cross_entropy(logits, &[attr as usize])?;
            factor_sum = Some(match factor_sum {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        let mean = tape.scale(factor_sum.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, mean)?,
            None => mean,
        });
    }
    Ok(total.expect("at least one factor"))
}

/// Full per-batch training loss for one task: cross-entropy plus whatever
/// mitigation terms its factors request.
pub fn task_batch_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    task: &TaskSpec,
    batch: &[&Example],
    cfg: &UpstreamConfig,
) -> Result<VarId> {
    let er = task.er_factors();
    let mut loss = expl_reg_loss(
        tape,
        bound,
        &task.task_id,
        batch,
        &er,
        cfg.alpha,
        cfg.importance_scale,
    )?;
    let adv = task.adv_factors();
    if !adv.is_empty() {
        let adv_term = adv_loss(tape, bound, batch, &adv, cfg.lambda)?;
        loss = tape.add(loss, adv_term)?;
    }
    Ok(loss)
}

/// Result of a training run: the best-validation parameters plus bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub steps: u64,
    pub val_history: Vec<f64>,
}

pub(crate) fn shuffled_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Deterministic size-weighted interleaving: task `t` contributing `c_t`
/// batches appears at fractional positions `(k + 0.5) / c_t`.
pub(crate) fn interleave_schedule(counts: &[usize]) -> Vec<usize> {
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (t, count) in counts.iter().enumerate() {
        for k in 0..*count {
            entries.push(((k as f64 + 0.5) / *count as f64, t, k));
        }
    }
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite keys").then(a.1.cmp(&b.1)));
    entries.into_iter().map(|(_, t, _)| t).collect()
}

pub(crate) struct EarlyStopper {
    pub best_metric: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub patience: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
            patience,
        }
    }

    /// Returns true when `metric` improves on the best seen so far.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.bad_epochs >= self.patience
    }
}

fn divergence(step: u64, task_id: &str, err: CoreError) -> CoreError {
    match err {
        CoreError::NonFinite { op } => CoreError::Diverged {
            step,
            detail: format!("non-finite value in op {op} while training task {task_id}"),
        },
        other => other,
    }
}

/// Trains the shared encoder and per-task heads on one or more source tasks,
/// drawing batches task-by-task in a size-weighted round robin. Returns the
/// checkpoint with the best mean validation metric (macro-F1 for binary
/// tasks, accuracy otherwise).
pub fn train_upstream(
    config: &EncoderConfig,
    tasks: &[TaskSpec],
    cfg: &UpstreamConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(CoreError::config("train_upstream needs at least one task"));
    }
    for task in tasks {
        task.validate()?;
    }
    for (i, a) in tasks.iter().enumerate() {
        if tasks.iter().skip(i + 1).any(|b| b.task_id == a.task_id) {
            return Err(CoreError::config(format!("duplicate task id {}", a.task_id)));
        }
    }

    let mut params = model::init_params(config, model::derive_seed(cfg.seed, "upstream-init"))?;
    for task in tasks {
        params.add_task_head(
            &task.task_id,
            task.classes,
            &task.harmful,
            model::derive_seed(cfg.seed, &format!("head:{}", task.task_id)),
        )?;
        for factor in task.adv_factors() {
            if !params.adv_heads.contains_key(&factor.name) {
                params.add_adv_head(&factor.name, model::derive_seed(cfg.seed, &format!("adv:{}", factor.name)))?;
            }
        }
    }

    let mut adam = Adam::new(cfg.adam)?;
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params = params.clone();
    let mut val_history = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let per_task_batches: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .map(|task| {
                shuffled_batches(
                    task.splits.train.len(),
                    cfg.batch_size,
                    model::derive_seed(cfg.seed, &format!("shuffle:{epoch}:{}", task.task_id)),
                )
            })
            .collect();
        let counts: Vec<usize> = per_task_batches.iter().map(|b| b.len()).collect();
        let schedule = interleave_schedule(&counts);
        let mut cursors = vec![0usize; tasks.len()];

        for t in schedule {
            let task = &tasks[t];
            let batch_indices = &per_task_batches[t][cursors[t]];
            cursors[t] += 1;
            let batch: Vec<&Example> = batch_indices.iter().map(|i| &task.splits.train[*i]).collect();

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, Trainable::All);
            let loss = task_batch_loss(&mut tape, &bound, task, &batch, cfg)
                .map_err(|e| divergence(step, &task.task_id, e))?;
            tape.backward(loss).map_err(|e| divergence(step, &task.task_id, e))?;
            let grads = bound.collect_grads(&tape);
            adam.step_named(&mut params.named_tensors_mut(), &grads)?;
            step += 1;
        }

        let mut metric_sum = 0.0;
        for task in tasks {
            metric_sum += validation_metric(&params, task)?;
        }
        let metric = metric_sum / tasks.len() as f64;
        val_history.push(metric);
        if stopper.observe(epoch, metric) {
            best_params = params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }

    Ok(TrainedModel {
        params: best_params,
        best_epoch: stopper.best_epoch,
        best_val_metric: stopper.best_metric,
        steps: step,
        val_history,
    })
}
