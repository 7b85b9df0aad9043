//! Evaluation: EER thresholding, F1/accuracy, false-positive-rate-difference
//! metrics, external-corpus accuracy, and the occlusion-importance gradient
//! probe.
//!
//! Every FPR-family metric works on binary harm decisions: the harm score is
//! thresholded once, with a threshold fitted on the validation split and then
//! applied unchanged everywhere. Undefined group rates surface as explicit
//! missing values, never as silent zeros.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{BiasFactorSpec, Example, TemplateSet};
use crate::error::{CoreError, Result};
use crate::model::{self, ModelParams, Trainable};
use crate::tape::Tape;
use crate::upstream::{occlude, ImportanceScale, TaskSpec};

/// Decision threshold equalizing overall false positive and false negative
/// rates on a validation set.
///
/// Candidates are the midpoints between consecutive distinct sorted scores
/// plus `-inf`/`+inf` sentinels; prediction is `score >= t`. The candidate
/// minimizing `|FPR - FNR|` wins, ties going to the smaller threshold.
pub fn eer_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(CoreError::metric("eer_threshold needs matching non-empty scores and labels"));
    }
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CoreError::metric("eer_threshold needs both classes present"));
    }

    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();
    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    for pair in distinct.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    candidates.push(f64::INFINITY);

    let mut best_t = f64::NEG_INFINITY;
    let mut best_diff = f64::INFINITY;
    for t in candidates {
        let mut fp = 0usize;
        let mut fnc = 0usize;
        for (s, l) in scores.iter().zip(labels) {
            let pred = *s >= t;
            if *l == 0 && pred {
                fp += 1;
            }
            if *l == 1 && !pred {
                fnc += 1;
            }
        }
        let diff = (fp as f64 / neg as f64 - fnc as f64 / pos as f64).abs();
        if diff < best_diff {
            best_diff = diff;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// False positive rate difference between the `attr = 1` and `attr = 0`
/// groups, over ground-truth negatives. Returns `None` when either group has
/// no negatives.
pub fn fprd(predictions: &[u8], labels: &[u8], attr_col: &[u8]) -> Result<Option<f64>> {
    if predictions.len() != labels.len() || labels.len() != attr_col.len() {
        return Err(CoreError::metric("fprd needs predictions, labels, and attributes of equal length"));
    }
    let mut counts = [[0usize; 2]; 2]; // [attr][fp?]
    for ((p, l), a) in predictions.iter().zip(labels).zip(attr_col) {
        if *l != 0 {
            continue;
        }
        let attr = (*a == 1) as usize;
        counts[attr][0] += 1;
        if *p == 1 {
            counts[attr][1] += 1;
        }
    }
    if counts[0][0] == 0 || counts[1][0] == 0 {
        return Ok(None);
    }
    let fpr1 = counts[1][1] as f64 / counts[1][0] as f64;
    let fpr0 = counts[0][1] as f64 / counts[0][0] as f64;
    Ok(Some(fpr1 - fpr0))
}

/// Column `j` of the examples' attribute vectors.
pub fn attr_column(examples: &[Example], j: usize) -> Result<Vec<u8>> {
    examples
        .iter()
        .map(|ex| {
            ex.attributes.get(j).copied().ok_or_else(|| {
                CoreError::data(format!("example {} lacks attribute column {j}", ex.id))
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateFprd {
    /// `sum_z |FPR_z - FPR_overall|` over identifier groups.
    pub value: f64,
    /// Groups skipped for having no negatives (signals template misuse).
    pub skipped_groups: Vec<usize>,
}

/// Per-identifier-group FPR deviation on a template test set.
pub fn template_fprd(predictions: &[u8], labels: &[u8], groups: &[usize]) -> Result<TemplateFprd> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(CoreError::metric("template_fprd needs parallel predictions, labels, and groups"));
    }
    let mut neg_total = 0usize;
    let mut fp_total = 0usize;
    let mut per_group: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((p, l), g) in predictions.iter().zip(labels).zip(groups) {
        let entry = per_group.entry(*g).or_insert((0, 0));
        if *l == 0 {
            neg_total += 1;
            entry.0 += 1;
            if *p == 1 {
                fp_total += 1;
                entry.1 += 1;
            }
        }
    }
    if neg_total == 0 {
        return Err(CoreError::metric("template_fprd needs at least one negative example"));
    }
    let overall = fp_total as f64 / neg_total as f64;
    let mut value = 0.0;
    let mut skipped = Vec::new();
    for (g, (neg, fp)) in per_group {
        if neg == 0 {
            skipped.push(g);
            continue;
        }
        value += (fp as f64 / neg as f64 - overall).abs();
    }
    Ok(TemplateFprd {
        value,
        skipped_groups: skipped,
    })
}

/// Fraction predicted negative on an all-negative corpus (equals 1 - FPR).
pub fn external_accuracy(predictions: &[u8]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(CoreError::metric("external_accuracy on an empty corpus"));
    }
    let negatives = predictions.iter().filter(|p| **p == 0).count();
    Ok(negatives as f64 / predictions.len() as f64)
}

/// F1 on the positive class. When there is neither a predicted nor an actual
/// positive, F1 is defined as 0 (callers may surface a warning).
pub fn f1_binary(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(CoreError::metric("f1_binary needs matching non-empty inputs"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fnc = 0usize;
    for (p, l) in predictions.iter().zip(labels) {
        match (*p, *l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fnc += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fnc;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// True when F1's degenerate case holds: no predicted and no actual positives.
pub fn f1_is_degenerate(predictions: &[u8], labels: &[u8]) -> bool {
    predictions.iter().all(|p| *p == 0) && labels.iter().all(|l| *l == 0)
}

/// Mean of per-class F1 over the two binary classes.
pub fn macro_f1(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    let flip = |xs: &[u8]| xs.iter().map(|x| 1 - *x).collect::<Vec<u8>>();
    let pos = f1_binary(predictions, labels)?;
    let neg = f1_binary(&flip(predictions), &flip(labels))?;
    Ok((pos + neg) / 2.0)
}

/// Fraction of exact label matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(CoreError::metric("accuracy needs matching non-empty inputs"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction held by the most common label; the floor any trained model should beat.
pub fn majority_class_fraction(labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0) += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

/// Binary harm label of each example under the task's harmful set.
pub fn binary_harm_labels(examples: &[Example], harmful: &[usize]) -> Vec<u8> {
    examples
        .iter()
        .map(|ex| harmful.contains(&ex.label) as u8)
        .collect()
}

/// Harm score of each example under the task head.
pub fn harm_scores(params: &ModelParams, examples: &[Example], task_id: &str) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|ex| model::harm_score(params, &ex.token_ids, task_id))
        .collect()
}

fn thresholded(scores: &[f64], t: f64) -> Vec<u8> {
    scores.iter().map(|s| (*s >= t) as u8).collect()
}

/// Validation metric used for model selection during training: macro-F1 of
/// argmax predictions for binary tasks, accuracy for multiclass tasks.
pub fn validation_metric(params: &ModelParams, task: &TaskSpec) -> Result<f64> {
    let mut preds = Vec::with_capacity(task.splits.val.len());
    for ex in &task.splits.val {
        preds.push(model::predict_argmax(params, &ex.token_ids, &task.task_id)?);
    }
    let labels: Vec<usize> = task.splits.val.iter().map(|ex| ex.label).collect();
    if task.is_binary() {
        let p8: Vec<u8> = preds.iter().map(|p| *p as u8).collect();
        let l8: Vec<u8> = labels.iter().map(|l| *l as u8).collect();
        macro_f1(&p8, &l8)
    } else {
        accuracy(&preds, &labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeStats {
    pub mean_abs_importance: f64,
    pub mean_grad_norm: f64,
    pub pairs: usize,
}

/// Mean `|phi|` and mean `||d phi / d theta||_2` (over encoder parameters,
/// flattened) across all (example, present lexicon word) pairs. Returns
/// `None` when no lexicon word occurs in the examples.
pub fn importance_gradient_probe(
    params: &ModelParams,
    task_id: &str,
    examples: &[Example],
    factors: &[BiasFactorSpec],
    scale: ImportanceScale,
) -> Result<Option<ProbeStats>> {
    let lexicons: Vec<_> = factors.iter().filter_map(|f| f.lexicon()).collect();
    let mut abs_sum = 0.0;
    let mut norm_sum = 0.0;
    let mut pairs = 0usize;

    for ex in examples {
        let words: Vec<u32> = lexicons
            .iter()
            .flat_map(|lex| lex.iter().copied().filter(|w| ex.token_ids.contains(w)))
            .collect();
        if words.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Trainable::All);
        let full = model::harm_score_graph(&mut tape, &bound, &ex.token_ids, task_id)?;
        for w in words {
            let occluded_ids = occlude(&ex.token_ids, w);
            let occl = model::harm_score_graph(&mut tape, &bound, &occluded_ids, task_id)?;
            let phi = match scale {
                ImportanceScale::Probability => tape.sub(full, occl)?,
                ImportanceScale::Logit => {
                    // kept consistent with the trainer's logit option
                    let one = tape.constant(crate::tensor::Tensor::scalar(1.0));
                    let lf = {
                        let ln_p = tape.ln(full)?;
                        let comp = tape.sub(one, full)?;
                        let ln_c = tape.ln(comp)?;
                        tape.sub(ln_p, ln_c)?
                    };
                    let lo = {
                        let ln_p = tape.ln(occl)?;
                        let comp = tape.sub(one, occl)?;
                        let ln_c = tape.ln(comp)?;
                        tape.sub(ln_p, ln_c)?
                    };
                    tape.sub(lf, lo)?
                }
            };
            tape.backward(phi)?;
            abs_sum += tape.value(phi).item().abs();
            norm_sum += libm::sqrt(bound.encoder_grad_sq_norm(&tape));
            tape.zero_all_grads();
            pairs += 1;
        }
    }

    if pairs == 0 {
        return Ok(None);
    }
    Ok(Some(ProbeStats {
        mean_abs_importance: abs_sum / pairs as f64,
        mean_grad_norm: norm_sum / pairs as f64,
        pairs,
    }))
}

/// One sampled point of the importance trace during downstream training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: u64,
    pub mean_abs_importance: f64,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    /// F1 (binary, EER-thresholded) or accuracy (multiclass, argmax).
    pub in_domain_metric: f64,
    pub eer_threshold: f64,
    /// In-domain test FPRD per factor; `None` marks an undefined group rate.
    pub fprd_per_factor: BTreeMap<String, Option<f64>>,
    pub template_fprd: Option<f64>,
    pub external_acc: BTreeMap<String, f64>,
    pub importance_trace: Option<Vec<TracePoint>>,
    pub warnings: Vec<String>,
}

/// Evaluation corpora beyond the task's own splits.
#[derive(Default)]
pub struct EvalExtras<'a> {
    pub templates: Option<&'a TemplateSet>,
    pub externals: &'a [(String, Vec<Example>)],
}

/// Full evaluation protocol: fit the EER threshold on the task's validation
/// split, then apply it unchanged to the in-domain test set, template set,
/// and external corpora.
pub fn evaluate(params: &ModelParams, task: &TaskSpec, extras: &EvalExtras) -> Result<MetricsReport> {
    let mut warnings = Vec::new();

    let val_scores = harm_scores(params, &task.splits.val, &task.task_id)?;
    let val_labels = binary_harm_labels(&task.splits.val, &task.harmful);
    let threshold = eer_threshold(&val_scores, &val_labels)?;

    let test_scores = harm_scores(params, &task.splits.test, &task.task_id)?;
    let test_preds = thresholded(&test_scores, threshold);
    let test_labels = binary_harm_labels(&task.splits.test, &task.harmful);

    let in_domain_metric = if task.is_binary() {
        if f1_is_degenerate(&test_preds, &test_labels) {
            warnings.push("in-domain F1 is degenerate: no predicted and no actual positives".into());
        }
        f1_binary(&test_preds, &test_labels)?
    } else {
        let mut preds = Vec::with_capacity(task.splits.test.len());
        for ex in &task.splits.test {
            preds.push(model::predict_argmax(params, &ex.token_ids, &task.task_id)?);
        }
        let labels: Vec<usize> = task.splits.test.iter().map(|ex| ex.label).collect();
        accuracy(&preds, &labels)?
    };

    let mut fprd_per_factor = BTreeMap::new();
    for factor in &task.factors {
        let col = attr_column(&task.splits.test, factor.attr_index)?;
        let value = fprd(&test_preds, &test_labels, &col)?;
        if value.is_none() {
            warnings.push(format!(
                "in-domain FPRD undefined for factor {}: a group has no negatives",
                factor.name
            ));
        }
        fprd_per_factor.insert(factor.name.clone(), value);
    }

    let template_value = match extras.templates {
        Some(set) => {
            let scores = harm_scores(params, &set.examples, &task.task_id)?;
            let preds = thresholded(&scores, threshold);
            let labels = binary_harm_labels(&set.examples, &task.harmful);
            let outcome = template_fprd(&preds, &labels, &set.groups)?;
            for g in &outcome.skipped_groups {
                warnings.push(format!("template group {g} skipped: no negatives"));
            }
            Some(outcome.value)
        }
        None => None,
    };

    let mut external_acc = BTreeMap::new();
    for (name, corpus) in extras.externals {
        let scores = harm_scores(params, corpus, &task.task_id)?;
        let preds = thresholded(&scores, threshold);
        external_acc.insert(name.clone(), external_accuracy(&preds)?);
    }

    Ok(MetricsReport {
        in_domain_metric,
        eer_threshold: threshold,
        fprd_per_factor,
        template_fprd: template_value,
        external_acc,
        importance_trace: None,
        warnings,
    })
}

/// Accuracy of a fresh linear probe trained to predict attribute column `j`
/// from frozen encoder representations (bias folded in as a constant feature).
/// Operationalizes "how much of the attribute is still encoded in z".
pub fn attribute_probe_accuracy(
    params: &ModelParams,
    train: &[Example],
    eval: &[Example],
    attr_index: usize,
    steps: usize,
) -> Result<f64> {
    use crate::adam::{Adam, AdamConfig};
    use crate::tensor::Tensor;

    if train.is_empty() || eval.is_empty() {
        return Err(CoreError::usage("attribute probe needs non-empty train and eval sets"));
    }
    let repr = |ex: &Example| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Trainable::None);
        let z = model::encode(&mut tape, &bound, &ex.token_ids)?;
        Ok(tape.value(z).values().to_vec())
    };
    let d = params.config.repr_dim;
    let build = |examples: &[Example]| -> Result<(Vec<f64>, Vec<usize>)> {
        let mut xs = Vec::with_capacity(examples.len() * (d + 1));
        let mut ys = Vec::with_capacity(examples.len());
        for ex in examples {
            let z = repr(ex)?;
            xs.extend_from_slice(&z);
            xs.push(1.0);
            ys.push(ex.attributes.get(attr_index).copied().ok_or_else(|| {
                CoreError::data(format!("example {} lacks attribute column {attr_index}", ex.id))
            })? as usize);
        }
        Ok((xs, ys))
    };
    let (train_x, train_y) = build(train)?;
    let (eval_x, eval_y) = build(eval)?;

    let mut weights = Tensor::zeros(alloc::vec![d + 1, 2]);
    let mut adam = Adam::new(AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    })?;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(alloc::vec![train.len(), d + 1], train_x.clone())?);
        let w = tape.leaf(weights.clone().with_requires_grad(true));
        let logits = tape.matmul(x, w)?;
        let loss = tape.cross_entropy(logits, &train_y)?;
        tape.backward(loss)?;
        let grad = tape.grad(w).expect("probe weights require grad").to_vec();
        let mut grads = BTreeMap::new();
        grads.insert(String::from("w"), grad);
        adam.step_named(&mut [(String::from("w"), &mut weights)], &grads)?;
    }

    let mut hits = 0usize;
    for (i, y) in eval_y.iter().enumerate() {
        let row = &eval_x[i * (d + 1)..(i + 1) * (d + 1)];
        let mut logits = [0.0; 2];
        for c in 0..2 {
            logits[c] = row.iter().enumerate().map(|(k, v)| v * weights.at(k, c)).sum();
        }
        let pred = (logits[1] > logits[0]) as usize;
        if pred == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / eval_y.len() as f64)
}
