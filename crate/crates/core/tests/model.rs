mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_batch, spec_for, tiny_config};
use skillnet::model::{best_span, build_model, Logits};
use skillnet::skills::reference_tasks;
use skillnet::{
    Model, SkillId, SkillMask, SkillMatrix, Tape, TaskSpec, TaskType, Taxonomy, Variant,
};

fn encode(model: &Model, batch: &skillnet::data::Batch, mask: &SkillMask) -> skillnet::Tensor {
    let mut tape = Tape::new();
    let h = model.encode(&mut tape, batch, mask).unwrap();
    tape.value(h).clone()
}

#[test]
fn skill_banks_have_the_reference_sizes() {
    let matrix = SkillMatrix::build(Taxonomy::default(), reference_tasks(16)).unwrap();
    let mut cfg = tiny_config(Variant::SkillFfn, 20, 16);
    cfg.layers = 2;
    assert_eq!(
        build_model(&cfg, &matrix, 0).unwrap().skill_counts(),
        (10, 0)
    );
    cfg.variant = Variant::SkillFfnMha;
    assert_eq!(
        build_model(&cfg, &matrix, 0).unwrap().skill_counts(),
        (6, 4)
    );
    for layer in 0..2 {
        let m = build_model(&cfg, &matrix, 0).unwrap();
        assert!(m.store.contains(&format!("layer{layer}.attn.l_s4.q")));
        assert!(m.store.contains(&format!("layer{layer}.ffn.t_s6.w1")));
        assert!(!m.store.contains(&format!("layer{layer}.ffn.l_s1.w1")));
    }
}

#[test]
fn same_seed_gives_identical_stores() {
    let matrix = SkillMatrix::build(Taxonomy::default(), reference_tasks(8)).unwrap();
    for variant in Variant::ALL {
        let cfg = tiny_config(variant, 20, 8);
        let a = build_model(&cfg, &matrix, 11).unwrap();
        let b = build_model(&cfg, &matrix, 11).unwrap();
        let c = build_model(&cfg, &matrix, 12).unwrap();
        assert!(a.store.bitwise_eq(&b.store));
        assert!(!a.store.bitwise_eq(&c.store));
    }
}

#[test]
fn encoder_output_shape_for_every_variant() {
    let spec = spec_for(TaskType::Classification, 6, 20);
    let mask = SkillMask::from_skills(&Taxonomy::default(), spec.skills.iter().copied()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for variant in Variant::ALL {
        let model = Model::new(
            &tiny_config(variant, 20, 6),
            &Taxonomy::default(),
            std::slice::from_ref(&spec),
            0,
        )
        .unwrap();
        let batch = random_batch(&spec, 3, 6, 20, &mut rng);
        assert_eq!(encode(&model, &batch, &mask).shape(), &[3, 6, 8]);
    }
}

/// A skill-FFN model whose only skills are one task skill and one language
/// skill, both holding copies of a dense model's FFN, computes exactly what
/// the dense model computes.
#[test]
fn dense_equals_skill_ffn_with_one_universal_skill() {
    let taxonomy = Taxonomy {
        task_skills: vec!["universal".into()],
        languages: vec!["en".into()],
    };
    let spec = TaskSpec::new(
        "cls",
        TaskType::Classification,
        "en",
        3,
        [SkillId::task(1), SkillId::language(1)],
    );
    let mask = SkillMask::from_skills(&taxonomy, spec.skills.iter().copied()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..5 {
        let mut cfg = tiny_config(Variant::Dense, 20, 6);
        cfg.layers = 2;
        let dense = Model::new(&cfg, &taxonomy, std::slice::from_ref(&spec), seed).unwrap();
        cfg.variant = Variant::SkillFfn;
        let mut skill =
            Model::new(&cfg, &taxonomy, std::slice::from_ref(&spec), seed + 100).unwrap();
        let names: Vec<String> = skill.store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let source = name
                .replace(".ffn.t_s1.", ".ffn.")
                .replace(".ffn.l_s1.", ".ffn.");
            let value = dense.store.by_name(&source).unwrap().value.clone();
            let id = skill.store.id(&name).unwrap();
            *skill.store.value_mut(id) = value;
        }
        assert_eq!(skill.store.len(), dense.store.len() + 4 * cfg.layers);

        let batch = random_batch(&spec, 4, 6, 20, &mut rng);
        assert!(encode(&dense, &batch, &mask).bitwise_eq(&encode(&skill, &batch, &mask)));
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = dense.forward_task(&mut t1, &batch, &spec, &mask).unwrap();
        let b = skill.forward_task(&mut t2, &batch, &spec, &mask).unwrap();
        assert_eq!(
            t1.value(a.loss).item().unwrap(),
            t2.value(b.loss).item().unwrap()
        );
    }
}

#[test]
fn uniform_logits_give_log_class_count_loss() {
    let spec = spec_for(TaskType::PairClassification, 5, 20);
    let mask = SkillMask::from_skills(&Taxonomy::default(), spec.skills.iter().copied()).unwrap();
    let mut model = Model::new(
        &tiny_config(Variant::Dense, 20, 5),
        &Taxonomy::default(),
        std::slice::from_ref(&spec),
        0,
    )
    .unwrap();
    let names: Vec<String> = model
        .store
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| n.starts_with("head."))
        .collect();
    for n in names {
        let id = model.store.id(&n).unwrap();
        model.store.value_mut(id).data_mut().fill(0.0);
    }
    let batch = random_batch(&spec, 4, 5, 20, &mut ChaCha8Rng::seed_from_u64(1));
    let mut tape = Tape::new();
    let out = model.forward_task(&mut tape, &batch, &spec, &mask).unwrap();
    assert!((tape.value(out.loss).item().unwrap() - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn span_head_emits_one_logit_per_position() {
    let t = 16;
    let spec = spec_for(TaskType::SpanExtraction, t, 20);
    let mask = SkillMask::from_skills(&Taxonomy::default(), spec.skills.iter().copied()).unwrap();
    let model = Model::new(
        &tiny_config(Variant::SkillFfnMha, 20, t),
        &Taxonomy::default(),
        std::slice::from_ref(&spec),
        0,
    )
    .unwrap();
    let batch = random_batch(&spec, 2, t, 20, &mut ChaCha8Rng::seed_from_u64(2));
    let mut tape = Tape::new();
    let Logits::Span { start, end } = model.logits(&mut tape, &batch, &spec, &mask).unwrap() else {
        panic!("span head must give start and end logits");
    };
    assert_eq!(tape.shape(start), &[2, t]);
    assert_eq!(tape.shape(end), &[2, t]);
}

#[test]
fn mask_must_have_one_language_and_a_task_skill() {
    let spec = spec_for(TaskType::Classification, 6, 20);
    let taxonomy = Taxonomy::default();
    let model = Model::new(
        &tiny_config(Variant::SkillFfnMha, 20, 6),
        &taxonomy,
        std::slice::from_ref(&spec),
        0,
    )
    .unwrap();
    let batch = random_batch(&spec, 2, 6, 20, &mut ChaCha8Rng::seed_from_u64(0));
    let two_languages = SkillMask::from_skills(
        &taxonomy,
        [SkillId::task(1), SkillId::language(1), SkillId::language(2)],
    )
    .unwrap();
    let no_task = SkillMask::from_skills(&taxonomy, [SkillId::language(1)]).unwrap();
    for bad in [two_languages, no_task] {
        assert!(model.encode(&mut Tape::new(), &batch, &bad).is_err());
    }
}

fn brute_force_span(start: &[f64], end: &[f64]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..start.len() {
        for e in s..end.len() {
            if start[s] + end[e] > best_score {
                best_score = start[s] + end[e];
                best = (s, e);
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Changing the ids under padding leaves every non-pad output unchanged.
    #[test]
    fn padding_does_not_leak(seed in 0u64..1000, variant_ix in 0usize..4, fill in 4usize..20) {
        let variant = Variant::ALL[variant_ix];
        let spec = spec_for(TaskType::TokenClassification, 7, 20);
        let mask = SkillMask::from_skills(&Taxonomy::default(), spec.skills.iter().copied()).unwrap();
        let model = Model::new(&tiny_config(variant, 20, 7), &Taxonomy::default(), std::slice::from_ref(&spec), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&spec, 3, 7, 20, &mut rng);
        let mut other = batch.clone();
        for (id, &real) in other.token_ids.iter_mut().zip(&batch.attention_mask) {
            if !real {
                *id = fill;
            }
        }
        let a = encode(&model, &batch, &mask);
        let b = encode(&model, &other, &mask);
        for (i, &real) in batch.attention_mask.iter().enumerate() {
            if real {
                prop_assert_eq!(&a.data()[i * 8..(i + 1) * 8], &b.data()[i * 8..(i + 1) * 8]);
            }
        }
    }

    #[test]
    fn best_span_matches_brute_force(start in prop::collection::vec(-5.0f64..5.0, 1..24), seed in 0u64..100) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let end: Vec<f64> = (0..start.len()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (s, e) = best_span(&start, &end);
        let (bs, be) = brute_force_span(&start, &end);
        prop_assert!(s <= e);
        prop_assert_eq!(start[s] + end[e], start[bs] + end[be]);
    }
}
