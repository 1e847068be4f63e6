#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use skillnet::data::{Batch, Labels};
use skillnet::synth::NUM_SPECIAL;
use skillnet::{
    finite_diff_grad, relative_error, Model, ModelConfig, ParamId, SkillId, SkillMask, Tape,
    TaskSpec, TaskType, Tensor, Variant,
};

pub fn tiny_config(variant: Variant, vocab_size: usize, seq_len: usize) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 1,
        hidden: 8,
        intermediate: 16,
        heads: 2,
        vocab_size,
        max_seq_len: seq_len,
        dropout: 0.0,
        num_experts: 4,
    }
}

/// A spec in `en` for `task_type` with a class count fitting `seq_len` and
/// `vocab_size`.
pub fn spec_for(task_type: TaskType, seq_len: usize, vocab_size: usize) -> TaskSpec {
    let t = SkillId::task;
    let (id, classes, skills) = match task_type {
        TaskType::Classification => ("cls", 2, vec![t(1), t(3), t(5)]),
        TaskType::PairClassification => ("pair", 3, vec![t(1), t(3), t(4)]),
        TaskType::TokenClassification => ("tag", 5, vec![t(1), t(2)]),
        TaskType::SpanExtraction => ("span", seq_len, vec![t(1), t(2), t(4), t(6)]),
        TaskType::Mlm => ("mlm", vocab_size, vec![t(1), t(2)]),
        TaskType::Nsp => ("nsp", 2, vec![t(1), t(3), t(4)]),
    };
    TaskSpec::new(
        id,
        task_type,
        "en",
        classes,
        skills.into_iter().chain([SkillId::language(1)]),
    )
}

pub const ALL_TASK_TYPES: [TaskType; 6] = [
    TaskType::Classification,
    TaskType::PairClassification,
    TaskType::TokenClassification,
    TaskType::SpanExtraction,
    TaskType::Mlm,
    TaskType::Nsp,
];

/// Random padded batch with labels matching `spec`.
pub fn random_batch(
    spec: &TaskSpec,
    b: usize,
    t: usize,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let mut token_ids = Vec::with_capacity(b * t);
    let mut attention_mask = Vec::with_capacity(b * t);
    let mut segment_ids = Vec::with_capacity(b * t);
    let mut classes = Vec::new();
    let mut tags = Vec::new();
    let mut spans = Vec::new();
    let mut masked = Vec::new();
    for row in 0..b {
        let len = rng.gen_range(2..=t);
        let split = rng.gen_range(1..=len);
        for i in 0..t {
            let real = i < len;
            token_ids.push(if real {
                rng.gen_range(NUM_SPECIAL..vocab_size)
            } else {
                0
            });
            attention_mask.push(real);
            segment_ids.push(usize::from(
                real && i >= split && spec.task_type.has_pair_input(),
            ));
            if spec.task_type == TaskType::TokenClassification {
                tags.push(real.then(|| rng.gen_range(0..spec.num_classes)));
            }
        }
        classes.push(rng.gen_range(0..spec.num_classes));
        let s = rng.gen_range(0..len);
        spans.push((s, rng.gen_range(s..len)));
        masked.push((
            row * t + rng.gen_range(0..len),
            rng.gen_range(0..vocab_size),
        ));
    }
    let labels = match spec.task_type {
        TaskType::TokenClassification => Labels::Tags(tags),
        TaskType::SpanExtraction => Labels::Spans(spans),
        TaskType::Mlm => Labels::Masked(masked),
        _ => Labels::Classes(classes),
    };
    let batch = Batch {
        task_id: spec.task_id.clone(),
        batch_size: b,
        seq_len: t,
        token_ids,
        attention_mask,
        segment_ids,
        labels,
    };
    batch.validate().unwrap();
    batch
}

pub fn loss_of(model: &Model, batch: &Batch, spec: &TaskSpec, mask: &SkillMask) -> f64 {
    let mut tape = Tape::new();
    let out = model.forward_task(&mut tape, batch, spec, mask).unwrap();
    tape.value(out.loss).item().unwrap()
}

/// Norm-wise relative error between backprop and central differences over
/// the concatenation of every parameter's gradient. A parameter without a
/// gradient must have a zero numerical gradient.
///
/// The error is taken over the whole vector because some tensors have a
/// gradient that is exactly zero by symmetry (a bias added to every span
/// logit, for one). Per tensor both sides are then rounding noise and their
/// ratio means nothing.
pub fn model_gradient_error(
    model: &mut Model,
    batch: &Batch,
    spec: &TaskSpec,
    mask: &SkillMask,
    eps: f64,
) -> f64 {
    let mut tape = Tape::new();
    let out = model.forward_task(&mut tape, batch, spec, mask).unwrap();
    let grads = tape.backward(out.loss).unwrap();
    let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    let mut analytic_all = Vec::new();
    let mut numeric_all = Vec::new();
    for id in ids {
        let original = model.store.value(id).clone();
        match grads.param(id) {
            Some(g) => analytic_all.extend_from_slice(g),
            None => analytic_all.extend(std::iter::repeat_n(0.0, original.len())),
        }
        let numeric = finite_diff_grad(
            |probe| {
                *model.store.value_mut(id) = probe.clone();
                Ok(loss_of(model, batch, spec, mask))
            },
            &original,
            eps,
        )
        .unwrap();
        *model.store.value_mut(id) = original;
        numeric_all.extend_from_slice(numeric.data());
    }
    relative_error(&Tensor::vector(analytic_all), &Tensor::vector(numeric_all))
}
