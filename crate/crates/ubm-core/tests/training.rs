//! End-to-end behavior of the upstream and downstream trainers on small
//! synthetic corpora: learnability, determinism, the loss decompositions the
//! mitigation objectives promise, and the freeze/l2sp regime contracts.

use ubm_core::corpus::{
    generate_synthetic, BiasFactorSpec, Example, Injection, InjectionKind, Mitigation, SynthConfig,
    Vocab,
};
use ubm_core::downstream::{
    downstream_batch_loss, encoder_distance, train_downstream, transfer_init, DownstreamConfig,
    DownstreamMode,
};
use ubm_core::metrics::{
    attribute_probe_accuracy, evaluate, importance_gradient_probe, majority_class_fraction,
    EvalExtras,
};
use ubm_core::model::{self, EncoderConfig, Trainable};
use ubm_core::tape::Tape;
use ubm_core::upstream::{
    adv_loss, expl_reg_loss, occlusion_importance, train_upstream, ImportanceScale, TaskSpec,
    UpstreamConfig,
};

fn vocab() -> Vocab {
    Vocab::synthetic_default()
}

fn encoder_config(vocab: &Vocab) -> EncoderConfig {
    EncoderConfig::new(vocab.size())
}

fn make_task(
    vocab: &Vocab,
    task_id: &str,
    seed: u64,
    n_train: usize,
    injections: Vec<Injection>,
    mitigations: &[Mitigation],
) -> TaskSpec {
    let mut cfg = SynthConfig::binary(seed);
    cfg.n_train = n_train;
    cfg.n_val = 300;
    cfg.n_test = 300;
    cfg.injections = injections;
    let splits = generate_synthetic(vocab, &cfg).unwrap();
    let mut factors = cfg.factors(vocab).unwrap();
    for (factor, mitigation) in factors.iter_mut().zip(mitigations) {
        factor.mitigation = *mitigation;
    }
    TaskSpec {
        task_id: task_id.to_string(),
        splits: ubm_core::upstream::DataSplits {
            train: splits.train,
            val: splits.val,
            test: splits.test,
        },
        classes: cfg.classes,
        harmful: cfg.harmful,
        factors,
    }
}

fn identifier_injection(p_pos: f64, p_neg: f64) -> Injection {
    Injection {
        kind: InjectionKind::Lexicon(0),
        p_pos,
        p_neg,
    }
}

fn dialect_injection(p_pos: f64, p_neg: f64) -> Injection {
    Injection {
        kind: InjectionKind::Dialect,
        p_pos,
        p_neg,
    }
}

#[test]
fn vanilla_upstream_learns_separable_data() {
    let vocab = vocab();
    let task = make_task(&vocab, "a", 1, 600, vec![], &[]);
    let cfg = UpstreamConfig {
        epochs: 12,
        seed: 5,
        ..UpstreamConfig::default()
    };
    let trained = train_upstream(&encoder_config(&vocab), &[task], &cfg).unwrap();
    assert!(
        trained.best_val_metric > 0.95,
        "val metric {}",
        trained.best_val_metric
    );
}

#[test]
fn multi_task_training_beats_majority_on_both_heads() {
    let vocab = vocab();
    let task_a = make_task(&vocab, "a", 2, 600, vec![], &[]);
    let task_b = make_task(&vocab, "b", 3, 300, vec![], &[]);
    let cfg = UpstreamConfig {
        epochs: 12,
        seed: 6,
        ..UpstreamConfig::default()
    };
    let trained = train_upstream(&encoder_config(&vocab), &[task_a.clone(), task_b.clone()], &cfg).unwrap();
    for task in [&task_a, &task_b] {
        let labels: Vec<usize> = task.splits.val.iter().map(|e| e.label).collect();
        let majority = majority_class_fraction(&labels);
        let mut hits = 0usize;
        for ex in &task.splits.val {
            if model::predict_argmax(&trained.params, &ex.token_ids, &task.task_id).unwrap() == ex.label {
                hits += 1;
            }
        }
        let acc = hits as f64 / task.splits.val.len() as f64;
        assert!(acc > majority, "task {}: acc {acc} <= majority {majority}", task.task_id);
    }
}

#[test]
fn upstream_training_is_deterministic() {
    let vocab = vocab();
    let cfg = UpstreamConfig {
        epochs: 3,
        seed: 9,
        alpha: 0.5,
        ..UpstreamConfig::default()
    };
    let run = || {
        let task = make_task(
            &vocab,
            "a",
            4,
            200,
            vec![identifier_injection(0.8, 0.1)],
            &[Mitigation::ExplanationRegularization],
        );
        train_upstream(&encoder_config(&vocab), &[task], &cfg).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.params, b.params);
    assert_eq!(a.val_history, b.val_history);
}

#[test]
fn expl_reg_loss_decomposes_exactly() {
    let vocab = vocab();
    let task = make_task(
        &vocab,
        "a",
        14,
        64,
        vec![identifier_injection(0.9, 0.4)],
        &[Mitigation::ExplanationRegularization],
    );
    let config = encoder_config(&vocab);
    let mut params = model::init_params(&config, 77).unwrap();
    params.add_task_head("a", 2, &[1], 78).unwrap();

    let alpha = 0.3;
    let batch: Vec<&Example> = task.splits.train.iter().take(24).collect();
    let factors: Vec<&BiasFactorSpec> = task.factors.iter().collect();
    let loss_at = |alpha: f64| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Trainable::None);
        let node = expl_reg_loss(
            &mut tape,
            &bound,
            "a",
            &batch,
            &factors,
            alpha,
            ImportanceScale::Probability,
        )
        .unwrap();
        tape.value(node).item()
    };

    let with_reg = loss_at(alpha);
    let plain_ce = loss_at(0.0);

    // independent recomposition: alpha * sum over (example, word) pairs of phi^2
    let lexicon = task.factors[0].lexicon().unwrap();
    let mut reg_sum = 0.0;
    for ex in &batch {
        for w in lexicon.iter().copied().filter(|w| ex.token_ids.contains(w)) {
            let phi =
                occlusion_importance(&params, &ex.token_ids, w, "a", ImportanceScale::Probability).unwrap();
            reg_sum += phi * phi;
        }
    }
    let expected = alpha * reg_sum / batch.len() as f64;
    assert!(reg_sum > 0.0, "batch must contain lexicon words for this test");
    assert!(
        ((with_reg - plain_ce) - expected).abs() < 1e-12,
        "decomposition off: {} vs {}",
        with_reg - plain_ce,
        expected
    );

    // batches without lexicon words collapse to the plain cross-entropy
    let clean: Vec<&Example> = task
        .splits
        .train
        .iter()
        .filter(|ex| !ex.token_ids.iter().any(|t| lexicon.contains(t)))
        .take(8)
        .collect();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, Trainable::None);
    let with_alpha = expl_reg_loss(
        &mut tape,
        &bound,
        "a",
        &clean,
        &factors,
        alpha,
        ImportanceScale::Probability,
    )
    .unwrap();
    let without = expl_reg_loss(
        &mut tape,
        &bound,
        "a",
        &clean,
        &factors,
        0.0,
        ImportanceScale::Probability,
    )
    .unwrap();
    assert_eq!(tape.value(with_alpha).item(), tape.value(without).item());
}

#[test]
fn explanation_regularization_shrinks_importance() {
    let vocab = vocab();
    let make = || {
        make_task(
            &vocab,
            "a",
            31,
            500,
            vec![identifier_injection(0.8, 0.1)],
            &[Mitigation::ExplanationRegularization],
        )
    };
    let base_cfg = UpstreamConfig {
        epochs: 8,
        seed: 32,
        ..UpstreamConfig::default()
    };

    let task = make();
    let vanilla = train_upstream(
        &encoder_config(&vocab),
        &[make()],
        &UpstreamConfig {
            alpha: 0.0,
            ..base_cfg.clone()
        },
    )
    .unwrap();
    let regularized = train_upstream(
        &encoder_config(&vocab),
        &[make()],
        &UpstreamConfig {
            alpha: 1.0,
            ..base_cfg
        },
    )
    .unwrap();

    let probe = |params: &ubm_core::model::ModelParams| {
        importance_gradient_probe(params, "a", &task.splits.val, &task.factors, ImportanceScale::Probability)
            .unwrap()
            .expect("validation set contains lexicon words")
    };
    let vanilla_stats = probe(&vanilla.params);
    let reg_stats = probe(&regularized.params);
    assert!(
        reg_stats.mean_abs_importance < vanilla_stats.mean_abs_importance,
        "regularized |phi| {} not below vanilla {}",
        reg_stats.mean_abs_importance,
        vanilla_stats.mean_abs_importance
    );
}

#[test]
fn adversarial_training_reduces_attribute_predictability() {
    let vocab = vocab();
    let make = |mitigation| {
        make_task(
            &vocab,
            "a",
            41,
            500,
            vec![dialect_injection(0.8, 0.1)],
            &[mitigation],
        )
    };
    let cfg = UpstreamConfig {
        epochs: 8,
        seed: 42,
        ..UpstreamConfig::default()
    };
    let vanilla = train_upstream(&encoder_config(&vocab), &[make(Mitigation::None)], &cfg).unwrap();
    let adversarial =
        train_upstream(&encoder_config(&vocab), &[make(Mitigation::Adversarial)], &cfg).unwrap();

    let task = make(Mitigation::None);
    let probe = |params| {
        attribute_probe_accuracy(params, &task.splits.train[..300], &task.splits.val, 0, 250).unwrap()
    };
    let acc_vanilla = probe(&vanilla.params);
    let acc_adv = probe(&adversarial.params);
    assert!(
        acc_adv < acc_vanilla,
        "adv probe accuracy {acc_adv} not below vanilla {acc_vanilla}"
    );
}

#[test]
fn adversarial_head_fits_constant_attribute_quickly() {
    let vocab = vocab();
    let config = encoder_config(&vocab);
    let mut params = model::init_params(&config, 55).unwrap();
    params.add_task_head("a", 2, &[1], 56).unwrap();
    params.add_adv_head("dialect", 57).unwrap();
    let factor = BiasFactorSpec::attribute("dialect", 0, Mitigation::Adversarial).unwrap();

    let mut cfg = SynthConfig::binary(58);
    cfg.n_train = 32;
    cfg.n_val = 8;
    cfg.n_test = 8;
    let splits = generate_synthetic(&vocab, &cfg).unwrap();
    let batch: Vec<Example> = splits
        .train
        .iter()
        .map(|ex| Example {
            attributes: vec![1],
            ..ex.clone()
        })
        .collect();
    let refs: Vec<&Example> = batch.iter().collect();

    let mut adam = ubm_core::adam::Adam::new(ubm_core::adam::AdamConfig {
        lr: 0.05,
        ..Default::default()
    })
    .unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Trainable::All);
        let loss = adv_loss(&mut tape, &bound, &refs, &[&factor], 1.0).unwrap();
        tape.backward(loss).unwrap();
        let grads = bound.collect_grads(&tape);
        adam.step_named(&mut params.named_tensors_mut(), &grads).unwrap();
        last = tape.value(loss).item();
    }
    assert!(last < 0.01, "adversarial loss {last} after 200 steps");
}

#[test]
fn zero_lambda_blocks_encoder_gradients_exactly() {
    let vocab = vocab();
    let config = encoder_config(&vocab);
    let mut params = model::init_params(&config, 61).unwrap();
    params.add_task_head("a", 2, &[1], 62).unwrap();
    params.add_adv_head("dialect", 63).unwrap();
    let factor = BiasFactorSpec::attribute("dialect", 0, Mitigation::Adversarial).unwrap();
    let ex = Example {
        id: 0,
        token_ids: vec![5, 9, 200],
        label: 1,
        attributes: vec![1],
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, Trainable::All);
    let loss = adv_loss(&mut tape, &bound, &[&ex], &[&factor], 0.0).unwrap();
    tape.backward(loss).unwrap();
    let grads = bound.collect_grads(&tape);
    for name in ["embedding", "w1", "b1", "w2", "b2"] {
        if let Some(g) = grads.get(name) {
            assert!(g.iter().all(|v| *v == 0.0), "{name} received nonzero gradient");
        }
    }
    // the adversarial head itself still learns
    let head_grad = &grads["adv.dialect.weight"];
    assert!(head_grad.iter().any(|v| *v != 0.0));
}

#[test]
fn freeze_mode_keeps_encoder_bit_identical() {
    let vocab = vocab();
    let source_task = make_task(&vocab, "src", 71, 300, vec![], &[]);
    let target_task = make_task(&vocab, "tgt", 72, 300, vec![], &[]);
    let up_cfg = UpstreamConfig {
        epochs: 3,
        seed: 73,
        ..UpstreamConfig::default()
    };
    let upstream = train_upstream(&encoder_config(&vocab), &[source_task], &up_cfg).unwrap();
    let transferred = transfer_init(&upstream.params, "tgt", 2, &[1], 74).unwrap();
    let before = transferred.clone();

    let (frozen, _) = train_downstream(
        transferred.clone(),
        &target_task,
        &DownstreamConfig {
            mode: DownstreamMode::Freeze,
            epochs: 3,
            seed: 75,
            ..DownstreamConfig::default()
        },
    )
    .unwrap();
    assert_eq!(frozen.params.embedding, before.embedding);
    assert_eq!(frozen.params.w1, before.w1);
    assert_eq!(frozen.params.b1, before.b1);
    assert_eq!(frozen.params.w2, before.w2);
    assert_eq!(frozen.params.b2, before.b2);
    assert_ne!(frozen.params.heads["tgt"], before.heads["tgt"]);

    let (tuned, _) = train_downstream(
        transferred,
        &target_task,
        &DownstreamConfig {
            epochs: 3,
            seed: 75,
            ..DownstreamConfig::default()
        },
    )
    .unwrap();
    assert_ne!(tuned.params.embedding, before.embedding);
}

#[test]
fn strong_l2sp_stays_closer_to_the_starting_point() {
    let vocab = vocab();
    let source_task = make_task(&vocab, "src", 81, 300, vec![], &[]);
    let target_task = make_task(&vocab, "tgt", 82, 300, vec![], &[]);
    let upstream = train_upstream(
        &encoder_config(&vocab),
        &[source_task],
        &UpstreamConfig {
            epochs: 3,
            seed: 83,
            ..UpstreamConfig::default()
        },
    )
    .unwrap();
    let transferred = transfer_init(&upstream.params, "tgt", 2, &[1], 84).unwrap();
    let start = transferred.clone();

    let run = |mode, beta| {
        let (out, _) = train_downstream(
            transferred.clone(),
            &target_task,
            &DownstreamConfig {
                mode,
                beta,
                epochs: 4,
                seed: 85,
                ..DownstreamConfig::default()
            },
        )
        .unwrap();
        encoder_distance(&out.params, &start).unwrap()
    };
    let plain = run(DownstreamMode::FineTune, 0.0);
    let pinned = run(DownstreamMode::L2Sp, 1e3);
    assert!(pinned < plain, "l2sp distance {pinned} not below fine-tune {plain}");
}

#[test]
fn vanilla_downstream_beats_majority() {
    let vocab = vocab();
    let target_task = make_task(&vocab, "tgt", 91, 500, vec![], &[]);
    let config = encoder_config(&vocab);
    let mut params = model::init_params(&config, 92).unwrap();
    params.add_task_head("tgt", 2, &[1], 93).unwrap();
    let (out, _) = train_downstream(
        params,
        &target_task,
        &DownstreamConfig {
            epochs: 10,
            seed: 94,
            ..DownstreamConfig::default()
        },
    )
    .unwrap();
    let labels: Vec<usize> = target_task.splits.val.iter().map(|e| e.label).collect();
    assert!(out.best_val_metric > majority_class_fraction(&labels));
}

#[test]
fn downstream_loss_is_plain_cross_entropy_even_after_mitigated_upstream() {
    let vocab = vocab();
    let source_task = make_task(
        &vocab,
        "src",
        95,
        200,
        vec![identifier_injection(0.8, 0.1)],
        &[Mitigation::ExplanationRegularization],
    );
    let target_task = make_task(
        &vocab,
        "tgt",
        96,
        200,
        vec![identifier_injection(0.8, 0.1)],
        &[Mitigation::ExplanationRegularization],
    );
    let upstream = train_upstream(
        &encoder_config(&vocab),
        &[source_task],
        &UpstreamConfig {
            epochs: 2,
            seed: 97,
            alpha: 0.5,
            ..UpstreamConfig::default()
        },
    )
    .unwrap();
    let transferred = transfer_init(&upstream.params, "tgt", 2, &[1], 98).unwrap();

    let batch: Vec<&Example> = target_task.splits.train.iter().take(16).collect();
    let mut tape = Tape::new();
    let bound = transferred.bind(&mut tape, Trainable::None);
    let loss = downstream_batch_loss(&mut tape, &bound, "tgt", &batch).unwrap();

    // hand-built mean cross-entropy over the same batch
    let mut total = None;
    for ex in &batch {
        let z = model::encode(&mut tape, &bound, &ex.token_ids).unwrap();
        let logits = model::classify(&mut tape, &bound, z, "tgt").unwrap();
        let ce = tape.cross_entropy(logits, &[ex.label]).unwrap();
        total = Some(match total {
            Some(acc) => tape.add(acc, ce).unwrap(),
            None => ce,
        });
    }
    let expected = tape.scale(total.unwrap(), 1.0 / batch.len() as f64).unwrap();
    assert_eq!(tape.value(loss).item(), tape.value(expected).item());
}

#[test]
fn evaluate_produces_sane_deterministic_reports() {
    let vocab = vocab();
    let task = make_task(
        &vocab,
        "a",
        101,
        600,
        vec![identifier_injection(0.8, 0.1)],
        &[Mitigation::None],
    );
    let trained = train_upstream(
        &encoder_config(&vocab),
        &[task.clone()],
        &UpstreamConfig {
            epochs: 10,
            seed: 102,
            ..UpstreamConfig::default()
        },
    )
    .unwrap();

    let identifiers = vocab.identifier_ids(0);
    let carriers = ubm_core::corpus::default_carriers(&vocab, None, 8, 4, 8, 103).unwrap();
    let templates =
        ubm_core::corpus::generate_templates(&vocab, &identifiers, &carriers, &task.factors).unwrap();
    let externals = vec![
        (
            "identifier".to_string(),
            ubm_core::corpus::generate_external_negative(
                &vocab,
                ubm_core::corpus::ExternalVariant::IdentifierMentioning { lexicon: 0 },
                300,
                (5, 20),
                &task.factors,
                104,
            )
            .unwrap(),
        ),
        (
            "dialect".to_string(),
            ubm_core::corpus::generate_external_negative(
                &vocab,
                ubm_core::corpus::ExternalVariant::Dialect { shift: 0.8 },
                300,
                (5, 20),
                &task.factors,
                105,
            )
            .unwrap(),
        ),
    ];
    let extras = EvalExtras {
        templates: Some(&templates),
        externals: &externals,
    };

    let report = evaluate(&trained.params, &task, &extras).unwrap();
    let again = evaluate(&trained.params, &task, &extras).unwrap();
    assert_eq!(report, again);

    assert!(report.in_domain_metric > 0.9, "F1 {}", report.in_domain_metric);
    assert!((0.0..=1.0).contains(&report.in_domain_metric));
    assert!(report.eer_threshold.is_finite());
    let template = report.template_fprd.unwrap();
    assert!(template >= 0.0);
    for value in report.fprd_per_factor.values().flatten() {
        assert!((-1.0..=1.0).contains(value));
    }
    for acc in report.external_acc.values() {
        assert!((0.0..=1.0).contains(acc));
    }
    assert_eq!(report.external_acc.len(), 2);
}
