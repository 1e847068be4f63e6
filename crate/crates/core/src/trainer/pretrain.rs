//! Self-supervised skill pre-training with masked-token and next-sentence
//! prediction.
//!
//! MLM batches activate `t_s1`, `t_s2` and the corpus's language skill; NSP
//! batches activate `t_s1`, `t_s3`, `t_s4` and the language skill. Steps
//! cycle through the languages, alternating MLM and NSP within each.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix, train_step, TrainState};
use crate::data::{Batch, Example, Label, Labels};
use crate::error::{contract, Error, Result};
use crate::model::Model;
use crate::optim::{Adam, LinearDecay};
use crate::skills::{SkillId, SkillMask, TaskSpec, TaskType};
use crate::synth::{pack_pair, pack_single, Corpus, CLS, MASK, NUM_SPECIAL, SEP};

/// Fraction of maskable tokens selected for prediction.
pub const MLM_RATE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Languages to pre-train; each needs a corpus.
    pub languages: Vec<String>,
}

/// Selects each maskable position (real, not `[CLS]`/`[SEP]`) with
/// probability [`MLM_RATE`]; a selected token becomes `[MASK]` 80% of the
/// time, a random non-special token 10% and stays unchanged 10%.
///
/// Returns the corrupted ids and `(position, original token)` targets.
pub fn mlm_corrupt<R: Rng + ?Sized>(
    ids: &[usize],
    attention: &[u8],
    vocab_size: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut out = ids.to_vec();
    let mut targets = Vec::new();
    for (i, (&id, &m)) in ids.iter().zip(attention).enumerate() {
        if m == 0 || id == CLS || id == SEP || !rng.gen_bool(MLM_RATE) {
            continue;
        }
        targets.push((i, id));
        let r: f64 = rng.gen();
        out[i] = if r < 0.8 {
            MASK
        } else if r < 0.9 {
            rng.gen_range(NUM_SPECIAL..vocab_size)
        } else {
            id
        };
    }
    (out, targets)
}

fn random_sentence<'a, R: Rng + ?Sized>(corpus: &'a Corpus, rng: &mut R) -> &'a [usize] {
    let doc = corpus.documents.choose(rng).expect("nonempty corpus");
    doc.choose(rng).expect("nonempty document")
}

/// Sentence pair labeled 1 when the second sentence follows the first in
/// its document, 0 when drawn from a different document.
pub fn nsp_example<R: Rng + ?Sized>(
    corpus: &Corpus,
    seq_len: usize,
    rng: &mut R,
) -> Result<Example> {
    let docs = &corpus.documents;
    let multi: Vec<usize> = (0..docs.len()).filter(|&d| docs[d].len() >= 2).collect();
    let &d = multi
        .choose(rng)
        .ok_or_else(|| contract("NSP needs a document with two sentences"))?;
    let i = rng.gen_range(0..docs[d].len() - 1);
    let a = &docs[d][i];
    let (b, label) = if docs.len() > 1 && rng.gen_bool(0.5) {
        let mut other = rng.gen_range(0..docs.len() - 1);
        if other >= d {
            other += 1;
        }
        (docs[other].choose(rng).expect("nonempty document"), 0)
    } else {
        (&docs[d][i + 1], 1)
    };
    let p = pack_pair(a, b, seq_len)?;
    Ok(Example {
        token_ids: p.token_ids,
        attention_mask: p.attention_mask,
        segment_ids: p.segment_ids,
        label: Label::Class(label),
    })
}

fn mlm_batch(
    corpus: &Corpus,
    spec: &TaskSpec,
    batch_size: usize,
    seq_len: usize,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut batch = Batch {
        task_id: spec.task_id.clone(),
        batch_size,
        seq_len,
        token_ids: Vec::with_capacity(batch_size * seq_len),
        attention_mask: Vec::with_capacity(batch_size * seq_len),
        segment_ids: vec![0; batch_size * seq_len],
        labels: Labels::Masked(Vec::new()),
    };
    let mut masked = Vec::new();
    for row in 0..batch_size {
        let p = pack_single(random_sentence(corpus, rng), seq_len)?;
        let (ids, targets) = mlm_corrupt(&p.token_ids, &p.attention_mask, vocab_size, rng);
        batch.token_ids.extend(ids);
        batch
            .attention_mask
            .extend(p.attention_mask.iter().map(|&m| m == 1));
        masked.extend(targets.into_iter().map(|(i, t)| (row * seq_len + i, t)));
    }
    if masked.is_empty() {
        // Rare with real batch sizes; predict one token unmasked rather
        // than skip the step.
        let pos = 1;
        masked.push((pos, batch.token_ids[pos]));
        batch.token_ids[pos] = MASK;
    }
    batch.labels = Labels::Masked(masked);
    batch.validate()?;
    Ok(batch)
}

/// Pre-trains `model` in place and returns the run's state and log.
pub fn skill_pretrain(
    model: &mut Model,
    corpora: &[Corpus],
    hyper: &PretrainHyper,
) -> Result<TrainState> {
    if hyper.languages.is_empty() || hyper.batch_size == 0 {
        return Err(Error::Config(
            "pre-training needs languages and a batch size".into(),
        ));
    }
    let taxonomy = model.taxonomy.clone();
    for needed in 1..=4 {
        if !taxonomy.contains(SkillId::task(needed)) {
            return Err(Error::Skill(format!(
                "pre-training activates t_s1..t_s4 but the taxonomy lacks {}",
                SkillId::task(needed)
            )));
        }
    }
    let (t, v) = (model.config.max_seq_len, model.config.vocab_size);
    let mut plan = Vec::new();
    for tag in &hyper.languages {
        let corpus = corpora
            .iter()
            .find(|c| &c.language == tag)
            .ok_or_else(|| Error::Config(format!("no pre-training corpus for language `{tag}`")))?;
        let l = taxonomy.language_skill(tag)?;
        let t_ = SkillId::task;
        let mlm = TaskSpec::new("mlm", TaskType::Mlm, tag.clone(), v, [t_(1), t_(2), l]);
        let nsp = TaskSpec::new(
            "nsp",
            TaskType::Nsp,
            tag.clone(),
            2,
            [t_(1), t_(3), t_(4), l],
        );
        let mlm_mask = SkillMask::from_skills(&taxonomy, mlm.skills.iter().copied())?;
        let nsp_mask = SkillMask::from_skills(&taxonomy, nsp.skills.iter().copied())?;
        model.add_task_head(&mlm)?;
        model.add_task_head(&nsp)?;
        plan.push((corpus, mlm, mlm_mask, nsp, nsp_mask));
    }

    let mut state = TrainState {
        step: 0,
        schedule: LinearDecay {
            base: hyper.lr,
            total_steps: hyper.steps,
        },
        adam: Adam::new(&model.store),
        rng: ChaCha8Rng::seed_from_u64(mix(hyper.seed, 0x5EED)),
        noise_rng: ChaCha8Rng::seed_from_u64(mix(hyper.seed, 0xD80)),
        cursors: Vec::new(),
        history: Vec::new(),
    };
    while state.step < hyper.steps {
        let k = state.step as usize;
        let (corpus, mlm, mlm_mask, nsp, nsp_mask) = &plan[(k / 2) % plan.len()];
        let record = if k % 2 == 0 {
            let batch = mlm_batch(corpus, mlm, hyper.batch_size, t, v, &mut state.rng)?;
            train_step(model, &mut state, &batch, mlm, mlm_mask)?
        } else {
            let examples = (0..hyper.batch_size)
                .map(|_| nsp_example(corpus, t, &mut state.rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Example> = examples.iter().collect();
            let batch = Batch::from_examples(nsp, &refs)?;
            train_step(model, &mut state, &batch, nsp, nsp_mask)?
        };
        state.history.push(record);
    }
    Ok(state)
}
