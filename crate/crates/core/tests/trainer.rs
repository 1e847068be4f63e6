mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::tiny_config;
use skillnet::synth::{
    generate_task_dataset, DatasetSizes, LanguageSpec, TaskGen, BLOCK_SIZE, CLS, MASK, NUM_SPECIAL,
    SEP,
};
use skillnet::trainer::{
    epoch_order, mlm_corrupt, sample_task, sampling_probs, scaled_loss, MetricRecord, Multitask,
    SamplingPlan, TaskSetup, TrainHyper, MLM_RATE,
};
use skillnet::{Model, SkillId, SkillMask, TaskSpec, TaskType, Taxonomy, Variant};

fn setups(lang: &LanguageSpec) -> Vec<TaskSetup> {
    let taxonomy = Taxonomy::default();
    let t = SkillId::task;
    [
        ("sent", TaskType::Classification, 3, vec![t(1), t(3), t(5)]),
        ("tags", TaskType::TokenClassification, 5, vec![t(1), t(2)]),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (id, family, classes, skills))| {
        let spec = TaskSpec::new(
            id,
            family,
            "en",
            classes,
            skills.into_iter().chain([SkillId::language(1)]),
        );
        let data = generate_task_dataset(&TaskGen {
            task_id: id,
            family,
            language: lang,
            num_classes: classes,
            sizes: DatasetSizes {
                train: 400,
                dev: 60,
            },
            seq_len: 16,
            seed: i as u64,
        })
        .unwrap();
        TaskSetup {
            mask: SkillMask::from_skills(&taxonomy, spec.skills.iter().copied()).unwrap(),
            spec,
            data,
        }
    })
    .collect()
}

fn hyper(max_steps: u64, eval_every: u64) -> TrainHyper {
    TrainHyper {
        alpha: 0.4,
        lr: 3e-3,
        batch_size: 8,
        max_steps,
        seed: 5,
        eval_every,
    }
}

fn fresh_model(tasks: &[TaskSetup]) -> Model {
    let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.spec.clone()).collect();
    let mut cfg = tiny_config(Variant::SkillFfnMha, NUM_SPECIAL + BLOCK_SIZE, 16);
    cfg.hidden = 16;
    cfg.intermediate = 32;
    Model::new(&cfg, &Taxonomy::default(), &specs, 0).unwrap()
}

fn train_losses(history: &[MetricRecord]) -> Vec<f64> {
    history
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Train { scaled_loss, .. } => Some(*scaled_loss),
            _ => None,
        })
        .collect()
}

#[test]
fn alpha_zero_samples_tasks_uniformly() {
    let plan = SamplingPlan::new(vec![10_000, 10], 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let first = (0..n).filter(|_| sample_task(&plan, &mut rng) == 0).count();
    assert!(
        (first as f64 / n as f64 - 0.5).abs() < 0.02,
        "{first} of {n}"
    );
}

#[test]
fn scaled_loss_rejects_a_single_class() {
    assert!(scaled_loss(1.0, 1).is_err());
    assert!(scaled_loss(1.0, 0).is_err());
    assert_eq!(scaled_loss(2f64.ln(), 2).unwrap(), 1.0);
}

#[test]
fn sampling_rejects_bad_inputs() {
    assert!(sampling_probs(&[], 0.5).is_err());
    assert!(sampling_probs(&[3, 0], 0.5).is_err());
    assert!(sampling_probs(&[3, 4], -0.1).is_err());
    assert!(sampling_probs(&[3, 4], f64::NAN).is_err());
    assert_eq!(sampling_probs(&[7], 0.3).unwrap(), vec![1.0]);
}

#[test]
fn loss_falls_over_two_hundred_steps() {
    let lang = LanguageSpec::new("en", 0, 1);
    let tasks = setups(&lang);
    let mut model = fresh_model(&tasks);
    let run = Multitask::from_tasks(tasks, hyper(200, 0)).unwrap();
    let mut state = run.init_state(&model);
    run.run(&mut model, &mut state, 200).unwrap();
    let losses = train_losses(&state.history);
    assert_eq!(losses.len(), 200);
    let head: f64 = losses[..40].iter().sum::<f64>() / 40.0;
    let tail: f64 = losses[160..].iter().sum::<f64>() / 40.0;
    assert!(tail < 0.8 * head, "loss {head:.3} → {tail:.3}");
}

#[test]
fn one_eval_record_per_task_per_interval() {
    let lang = LanguageSpec::new("en", 0, 2);
    let tasks = setups(&lang);
    let mut model = fresh_model(&tasks);
    let run = Multitask::from_tasks(tasks, hyper(25, 10)).unwrap();
    let mut state = run.init_state(&model);
    run.run(&mut model, &mut state, 25).unwrap();
    let mut evals: Vec<(u64, String)> = Vec::new();
    let mut summaries = Vec::new();
    for r in &state.history {
        match r {
            MetricRecord::Eval {
                step,
                task_id,
                score,
                ..
            } => {
                assert!((0.0..=1.0).contains(score));
                evals.push((*step, task_id.clone()));
            }
            MetricRecord::Summary { step, .. } => summaries.push(*step),
            MetricRecord::Train { .. } => {}
        }
    }
    let expected: Vec<(u64, String)> = [10u64, 20, 25]
        .iter()
        .flat_map(|&s| ["sent", "tags"].map(|t| (s, t.to_string())))
        .collect();
    assert_eq!(evals, expected);
    assert_eq!(summaries, vec![10, 20, 25]);
}

#[test]
fn metrics_log_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let records = vec![
        MetricRecord::Train {
            step: 1,
            task_id: "a".into(),
            raw_loss: 0.1 + 0.2,
            scaled_loss: 1.0 / 3.0,
            lr: 1e-3,
        },
        MetricRecord::Eval {
            step: 1,
            task_id: "a".into(),
            metric: "f1".into(),
            score: 0.7,
            exact_match: Some(0.5),
        },
        MetricRecord::Summary {
            step: 1,
            macro_average: 2.0 / 3.0,
        },
    ];
    skillnet::trainer::write_metrics(&path, &records).unwrap();
    assert_eq!(skillnet::trainer::read_metrics(&path).unwrap(), records);
}

#[test]
fn mlm_masks_fifteen_percent_of_maskable_tokens() {
    let t = 32;
    let vocab = NUM_SPECIAL + BLOCK_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut maskable, mut selected, mut to_mask) = (0usize, 0usize, 0usize);
    for row in 0..2000 {
        let real = 8 + row % 20;
        let mut ids: Vec<usize> = (0..t)
            .map(|i| NUM_SPECIAL + (i * 7 + row) % BLOCK_SIZE)
            .collect();
        ids[0] = CLS;
        ids[real - 1] = SEP;
        let attention: Vec<u8> = (0..t).map(|i| u8::from(i < real)).collect();
        let (out, targets) = mlm_corrupt(&ids, &attention, vocab, &mut rng);
        maskable += real - 2;
        selected += targets.len();
        for &(pos, orig) in &targets {
            assert!(pos > 0 && pos < real - 1);
            assert_eq!(orig, ids[pos]);
            to_mask += usize::from(out[pos] == MASK);
        }
        for i in 0..t {
            if !targets.iter().any(|&(p, _)| p == i) {
                assert_eq!(out[i], ids[i]);
            }
        }
    }
    let n = maskable as f64;
    let sigma = (n * MLM_RATE * (1.0 - MLM_RATE)).sqrt();
    assert!(
        (selected as f64 - n * MLM_RATE).abs() < 3.0 * sigma,
        "{selected} of {maskable}"
    );
    let k = selected as f64;
    let sigma_mask = (k * 0.8 * 0.2).sqrt();
    assert!(
        (to_mask as f64 - 0.8 * k).abs() < 3.0 * sigma_mask,
        "{to_mask} of {selected}"
    );
}

proptest! {
    #[test]
    fn probabilities_form_a_distribution(
        sizes in prop::collection::vec(1usize..100_000, 1..12),
        alpha in 0.0f64..1.5,
    ) {
        let q = sampling_probs(&sizes, alpha).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q.iter().all(|&x| x > 0.0));
        // Larger tasks never get a smaller share.
        for i in 0..sizes.len() {
            for j in 0..sizes.len() {
                if sizes[i] > sizes[j] {
                    prop_assert!(q[i] >= q[j]);
                }
            }
        }
    }

    #[test]
    fn alpha_one_is_proportional_and_zero_is_uniform(sizes in prop::collection::vec(1usize..10_000, 1..12)) {
        let total: usize = sizes.iter().sum();
        let q1 = sampling_probs(&sizes, 1.0).unwrap();
        let q0 = sampling_probs(&sizes, 0.0).unwrap();
        for (i, &s) in sizes.iter().enumerate() {
            prop_assert!((q1[i] - s as f64 / total as f64).abs() < 1e-12);
            prop_assert!((q0[i] - 1.0 / sizes.len() as f64).abs() < 1e-12);
        }
    }

    /// Lowering α moves mass toward small tasks.
    #[test]
    fn smaller_alpha_flattens(sizes in prop::collection::vec(1usize..10_000, 2..8), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let small = sizes.iter().enumerate().min_by_key(|&(_, s)| *s).unwrap().0;
        let q_lo = sampling_probs(&sizes, lo).unwrap();
        let q_hi = sampling_probs(&sizes, hi).unwrap();
        prop_assert!(q_lo[small] >= q_hi[small] - 1e-12);
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 1usize..300, seed in 0u64..1000, task in 0usize..12, epoch in 0u64..5) {
        let order = epoch_order(n, seed, task, epoch);
        prop_assert_eq!(&order, &epoch_order(n, seed, task, epoch));
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }
}
