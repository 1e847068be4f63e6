//! Deterministic synthetic languages, corpora and task datasets.
//!
//! Every language owns a disjoint block of [`BLOCK_SIZE`] token ids in the
//! shared vocabulary; special tokens (`[PAD]`, `[CLS]`, `[SEP]`, `[MASK]`)
//! sit below all blocks. Inside a block the layout is fixed:
//!
//! | relative ids | role                                   |
//! |--------------|----------------------------------------|
//! | 0..64        | filler words (topic-shifted Zipf)      |
//! | 64..80       | class markers                          |
//! | 80..86       | pair markers                           |
//! | 86..110      | entity names, 4 types × 6              |
//! | 110..118     | question keys                          |
//! | 118..128     | answer words                           |
//!
//! Task labels are planted through the marker tokens, so each family has a
//! rule-based decoder (see [`oracle`]) that recovers every label exactly.

use std::collections::HashSet;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, Label, TaskDataset};
use crate::error::{contract, Error, Result};
use crate::skills::TaskType;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const NUM_SPECIAL: usize = 4;

pub const BLOCK_SIZE: usize = 128;
pub const NUM_FILLER: usize = 64;
const CLASS_MARKERS: usize = 64;
pub const NUM_CLASS_MARKERS: usize = 16;
const PAIR_MARKERS: usize = 80;
pub const NUM_PAIR_MARKERS: usize = 6;
const ENTITY_NAMES: usize = 86;
pub const NUM_ENTITY_TYPES: usize = 4;
pub const NAMES_PER_TYPE: usize = 6;
const QA_KEYS: usize = 110;
pub const NUM_QA_KEYS: usize = 8;
const QA_ANSWERS: usize = 118;
pub const NUM_QA_ANSWERS: usize = 10;

const SPECIAL_TEXT: [&str; NUM_SPECIAL] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub tag: String,
    /// First token id of this language's block.
    pub offset: usize,
    /// Zipf exponent of the filler-word frequency profile.
    pub zipf_exponent: f64,
    /// Number of topics; each topic cyclically shifts the Zipf ranks.
    pub num_topics: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub seed: u64,
}

impl LanguageSpec {
    /// Language occupying block `index` with default grammar parameters.
    pub fn new(tag: impl Into<String>, index: usize, seed: u64) -> Self {
        Self {
            tag: tag.into(),
            offset: NUM_SPECIAL + index * BLOCK_SIZE,
            zipf_exponent: 1.1,
            num_topics: 4,
            min_sentence_len: 6,
            max_sentence_len: 14,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.offset < NUM_SPECIAL {
            return Err(Error::Config(format!(
                "language `{}` overlaps the special tokens",
                self.tag
            )));
        }
        if self.num_topics == 0 || self.num_topics > NUM_FILLER {
            return Err(Error::Config(format!(
                "language `{}`: bad topic count",
                self.tag
            )));
        }
        if self.min_sentence_len < 2 || self.min_sentence_len > self.max_sentence_len {
            return Err(Error::Config(format!(
                "language `{}`: bad sentence length range",
                self.tag
            )));
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(Error::Config(format!(
                "language `{}`: bad Zipf exponent",
                self.tag
            )));
        }
        Ok(())
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + BLOCK_SIZE
    }

    pub fn contains(&self, id: usize) -> bool {
        self.range().contains(&id)
    }

    pub fn filler(&self, i: usize) -> usize {
        self.offset + i
    }

    pub fn class_marker(&self, c: usize) -> usize {
        self.offset + CLASS_MARKERS + c
    }

    pub fn pair_marker(&self, i: usize) -> usize {
        self.offset + PAIR_MARKERS + i
    }

    pub fn entity_name(&self, entity_type: usize, i: usize) -> usize {
        self.offset + ENTITY_NAMES + entity_type * NAMES_PER_TYPE + i
    }

    pub fn qa_key(&self, i: usize) -> usize {
        self.offset + QA_KEYS + i
    }

    pub fn qa_answer(&self, i: usize) -> usize {
        self.offset + QA_ANSWERS + i
    }

    fn relative(&self, id: usize) -> Option<usize> {
        self.contains(id).then(|| id - self.offset)
    }

    pub fn class_of_marker(&self, id: usize) -> Option<usize> {
        self.relative(id)
            .filter(|r| (CLASS_MARKERS..CLASS_MARKERS + NUM_CLASS_MARKERS).contains(r))
            .map(|r| r - CLASS_MARKERS)
    }

    pub fn pair_marker_index(&self, id: usize) -> Option<usize> {
        self.relative(id)
            .filter(|r| (PAIR_MARKERS..PAIR_MARKERS + NUM_PAIR_MARKERS).contains(r))
            .map(|r| r - PAIR_MARKERS)
    }

    pub fn entity_type_of(&self, id: usize) -> Option<usize> {
        self.relative(id)
            .filter(|r| {
                (ENTITY_NAMES..ENTITY_NAMES + NUM_ENTITY_TYPES * NAMES_PER_TYPE).contains(r)
            })
            .map(|r| (r - ENTITY_NAMES) / NAMES_PER_TYPE)
    }

    pub fn qa_key_index(&self, id: usize) -> Option<usize> {
        self.relative(id)
            .filter(|r| (QA_KEYS..QA_KEYS + NUM_QA_KEYS).contains(r))
            .map(|r| r - QA_KEYS)
    }

    pub fn is_answer(&self, id: usize) -> bool {
        self.relative(id)
            .is_some_and(|r| (QA_ANSWERS..QA_ANSWERS + NUM_QA_ANSWERS).contains(&r))
    }

    fn zipf_weights(&self) -> Vec<f64> {
        (0..NUM_FILLER)
            .map(|r| 1.0 / ((r + 1) as f64).powf(self.zipf_exponent))
            .collect()
    }

    fn topic_shift(&self, topic: usize) -> usize {
        topic * NUM_FILLER / self.num_topics
    }

    /// Expected filler-word distribution of the corpus (topics uniform).
    pub fn unigram_profile(&self) -> Vec<f64> {
        let w = self.zipf_weights();
        let total: f64 = w.iter().sum();
        let mut p = vec![0.0; NUM_FILLER];
        for topic in 0..self.num_topics {
            let shift = self.topic_shift(topic);
            for (rank, wr) in w.iter().enumerate() {
                p[(rank + shift) % NUM_FILLER] += wr / total / self.num_topics as f64;
            }
        }
        p
    }
}

/// Samples filler sentences for one language.
struct Grammar<'a> {
    lang: &'a LanguageSpec,
    ranks: WeightedIndex<f64>,
}

impl<'a> Grammar<'a> {
    fn new(lang: &'a LanguageSpec) -> Self {
        let ranks = WeightedIndex::new(lang.zipf_weights()).expect("positive Zipf weights");
        Self { lang, ranks }
    }

    fn word<R: Rng>(&self, topic: usize, rng: &mut R) -> usize {
        let rank = self.ranks.sample(rng);
        self.lang
            .filler((rank + self.lang.topic_shift(topic)) % NUM_FILLER)
    }

    fn sentence<R: Rng>(&self, len: usize, topic: usize, rng: &mut R) -> Vec<usize> {
        (0..len).map(|_| self.word(topic, rng)).collect()
    }

    fn random_sentence<R: Rng>(&self, min: usize, max: usize, rng: &mut R) -> Vec<usize> {
        let topic = rng.gen_range(0..self.lang.num_topics);
        let len = rng.gen_range(min..=max.max(min));
        self.sentence(len, topic, rng)
    }
}

/// Shared vocabulary over all languages.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    languages: Vec<LanguageSpec>,
    size: usize,
}

impl Vocabulary {
    pub fn new(languages: Vec<LanguageSpec>) -> Result<Self> {
        let mut ranges: Vec<_> = languages.iter().map(|l| l.range()).collect();
        ranges.sort_by_key(|r| r.start);
        for w in ranges.windows(2) {
            if w[0].end > w[1].start {
                return Err(Error::Config("language token ranges overlap".into()));
            }
        }
        let mut tags = HashSet::new();
        for l in &languages {
            l.validate()?;
            if !tags.insert(l.tag.as_str()) {
                return Err(Error::Config(format!("duplicate language `{}`", l.tag)));
            }
        }
        let size = ranges.last().map_or(NUM_SPECIAL, |r| r.end);
        Ok(Self { languages, size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn languages(&self) -> &[LanguageSpec] {
        &self.languages
    }

    pub fn language(&self, tag: &str) -> Result<&LanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.tag == tag)
            .ok_or_else(|| Error::Config(format!("no language spec for `{tag}`")))
    }

    /// Language whose block contains `id`.
    pub fn language_of(&self, id: usize) -> Option<&LanguageSpec> {
        self.languages.iter().find(|l| l.contains(id))
    }

    pub fn token_text(&self, id: usize) -> Result<String> {
        if id < NUM_SPECIAL {
            return Ok(SPECIAL_TEXT[id].to_string());
        }
        self.language_of(id)
            .map(|l| format!("{}_{}", l.tag, id - l.offset))
            .ok_or_else(|| contract(format!("unknown token id {id}")))
    }

    pub fn token_id(&self, text: &str) -> Result<usize> {
        if let Some(i) = SPECIAL_TEXT.iter().position(|s| *s == text) {
            return Ok(i);
        }
        let unknown = || contract(format!("unknown token `{text}`"));
        let (tag, rel) = text.rsplit_once('_').ok_or_else(unknown)?;
        let rel: usize = rel.parse().map_err(|_| unknown())?;
        let lang = self.language(tag).map_err(|_| unknown())?;
        if rel >= BLOCK_SIZE {
            return Err(unknown());
        }
        Ok(lang.offset + rel)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.token_id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<String>> = ids.iter().map(|&i| self.token_text(i)).collect();
        Ok(words?.join(" "))
    }
}

/// A packed, padded model input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packed {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
}

/// `[CLS] ids [SEP]`, keeping the first `seq_len − 2` tokens.
pub fn pack_single(ids: &[usize], seq_len: usize) -> Result<Packed> {
    if seq_len < 2 {
        return Err(contract(
            "sequence length must leave room for [CLS] and [SEP]",
        ));
    }
    let keep = ids.len().min(seq_len - 2);
    let mut token_ids = Vec::with_capacity(seq_len);
    token_ids.push(CLS);
    token_ids.extend_from_slice(&ids[..keep]);
    token_ids.push(SEP);
    Ok(pad(token_ids, vec![0; keep + 2], seq_len))
}

/// `[CLS] a [SEP] b [SEP]`; the longer segment is truncated first.
pub fn pack_pair(a: &[usize], b: &[usize], seq_len: usize) -> Result<Packed> {
    if seq_len < 5 {
        return Err(contract("sequence length too short for a pair"));
    }
    let (mut la, mut lb) = (a.len(), b.len());
    while la + lb + 3 > seq_len {
        if la > lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let mut token_ids = Vec::with_capacity(seq_len);
    token_ids.push(CLS);
    token_ids.extend_from_slice(&a[..la]);
    token_ids.push(SEP);
    token_ids.extend_from_slice(&b[..lb]);
    token_ids.push(SEP);
    let mut segments = vec![0u8; la + 2];
    segments.extend(std::iter::repeat_n(1u8, lb + 1));
    Ok(pad(token_ids, segments, seq_len))
}

fn pad(mut token_ids: Vec<usize>, mut segment_ids: Vec<u8>, seq_len: usize) -> Packed {
    let real = token_ids.len();
    token_ids.resize(seq_len, PAD);
    segment_ids.resize(seq_len, 0);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(seq_len, 0);
    Packed {
        token_ids,
        attention_mask,
        segment_ids,
    }
}

/// Multi-sentence documents of one language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub language: String,
    pub documents: Vec<Vec<Vec<usize>>>,
}

impl Corpus {
    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(|d| d.len()).sum()
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(17) ^ 0xD1B5_4A32_D192_ED03
}

/// Documents of 3–6 sentences; each document draws one topic.
pub fn generate_corpus(lang: &LanguageSpec, num_docs: usize, seed: u64) -> Result<Corpus> {
    if num_docs == 0 {
        return Err(contract("a corpus needs at least one document"));
    }
    lang.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(lang.seed, seed));
    let grammar = Grammar::new(lang);
    let documents = (0..num_docs)
        .map(|_| {
            let topic = rng.gen_range(0..lang.num_topics);
            let n = rng.gen_range(3..=6);
            (0..n)
                .map(|_| {
                    let len = rng.gen_range(lang.min_sentence_len..=lang.max_sentence_len);
                    grammar.sentence(len, topic, &mut rng)
                })
                .collect()
        })
        .collect();
    Ok(Corpus {
        language: lang.tag.clone(),
        documents,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub train: usize,
    pub dev: usize,
}

/// Parameters of one synthetic task dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGen<'a> {
    pub task_id: &'a str,
    pub family: TaskType,
    pub language: &'a LanguageSpec,
    pub num_classes: usize,
    pub sizes: DatasetSizes,
    pub seq_len: usize,
    pub seed: u64,
}

impl TaskGen<'_> {
    fn check(&self) -> Result<()> {
        let c = self.num_classes;
        let ok = match self.family {
            TaskType::Classification => (2..=NUM_CLASS_MARKERS).contains(&c) && self.seq_len >= 5,
            TaskType::PairClassification => {
                (2..=NUM_PAIR_MARKERS).contains(&c) && self.seq_len >= 9
            }
            TaskType::TokenClassification => {
                c % 2 == 1 && (3..=1 + 2 * NUM_ENTITY_TYPES).contains(&c) && self.seq_len >= 6
            }
            TaskType::SpanExtraction => c == self.seq_len && self.seq_len >= 16,
            TaskType::Mlm | TaskType::Nsp => {
                return Err(contract(format!(
                    "{} data comes from corpora, not the task generator",
                    self.family
                )))
            }
        };
        if !ok {
            return Err(contract(format!(
                "task `{}`: {} classes / sequence length {} unsupported for {}",
                self.task_id, c, self.seq_len, self.family
            )));
        }
        Ok(())
    }
}

pub fn generate_task_dataset(gen: &TaskGen<'_>) -> Result<TaskDataset> {
    gen.check()?;
    gen.language.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(gen.language.seed, gen.seed));
    let grammar = Grammar::new(gen.language);
    let train = generate_split(gen, &grammar, gen.sizes.train, &HashSet::new(), &mut rng)?;
    let seen: HashSet<Vec<usize>> = train.iter().map(|e| e.token_ids.clone()).collect();
    let dev = generate_split(gen, &grammar, gen.sizes.dev, &seen, &mut rng)?;
    Ok(TaskDataset {
        task_id: gen.task_id.to_string(),
        train,
        dev,
    })
}

fn generate_split(
    gen: &TaskGen<'_>,
    grammar: &Grammar<'_>,
    n: usize,
    exclude: &HashSet<Vec<usize>>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    // Balanced label (or entity type) schedule, shuffled.
    let kinds = match gen.family {
        TaskType::TokenClassification => (gen.num_classes - 1) / 2,
        _ => gen.num_classes,
    };
    let mut schedule: Vec<usize> = (0..n).map(|i| i % kinds).collect();
    schedule.shuffle(rng);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    for &target in &schedule {
        loop {
            attempts += 1;
            if attempts > 50 * n + 1000 {
                return Err(contract(format!(
                    "task `{}`: could not draw enough distinct examples",
                    gen.task_id
                )));
            }
            let ex = match gen.family {
                TaskType::Classification => classification_example(gen, grammar, target, rng)?,
                TaskType::PairClassification => pair_example(gen, grammar, target, rng)?,
                TaskType::TokenClassification => tagging_example(gen, grammar, target, rng)?,
                TaskType::SpanExtraction => span_example(gen, grammar, rng)?,
                TaskType::Mlm | TaskType::Nsp => unreachable!("rejected by check"),
            };
            if !exclude.contains(&ex.token_ids) {
                out.push(ex);
                break;
            }
        }
    }
    Ok(out)
}

fn sentence_bounds(lang: &LanguageSpec, cap: usize) -> (usize, usize) {
    let max = lang.max_sentence_len.min(cap).max(1);
    (lang.min_sentence_len.min(max), max)
}

/// Label = the class whose marker appears (once or twice) in the sentence.
fn classification_example(
    gen: &TaskGen<'_>,
    grammar: &Grammar<'_>,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let (min, max) = sentence_bounds(gen.language, gen.seq_len - 2);
    let mut words = grammar.random_sentence(min, max, rng);
    let marker = gen.language.class_marker(class);
    let copies = if words.len() >= 4 && rng.gen_bool(0.3) {
        2
    } else {
        1
    };
    for _ in 0..copies {
        let pos = rng.gen_range(0..words.len());
        words[pos] = marker;
    }
    let p = pack_single(&words, gen.seq_len)?;
    Ok(example(p, Label::Class(class)))
}

/// Segment a carries pair marker `i`, segment b marker `j`; the label is
/// `(j − i) mod NUM_PAIR_MARKERS`.
fn pair_example(
    gen: &TaskGen<'_>,
    grammar: &Grammar<'_>,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let half = ((gen.seq_len - 3) / 2).min(gen.language.max_sentence_len);
    let (min, max) = (3.min(half), half);
    let mut a = grammar.random_sentence(min, max, rng);
    let mut b = grammar.random_sentence(min, max, rng);
    let i = rng.gen_range(0..NUM_PAIR_MARKERS);
    let j = (i + class) % NUM_PAIR_MARKERS;
    let pa = rng.gen_range(0..a.len());
    a[pa] = gen.language.pair_marker(i);
    let pb = rng.gen_range(0..b.len());
    b[pb] = gen.language.pair_marker(j);
    let p = pack_pair(&a, &b, gen.seq_len)?;
    Ok(example(p, Label::Class(class)))
}

/// Runs of entity-name tokens of one type, separated by filler. Tags are
/// `O = 0`, `B-t = 1 + 2t`, `I-t = 2 + 2t`; the first entity has the
/// scheduled type.
fn tagging_example(
    gen: &TaskGen<'_>,
    grammar: &Grammar<'_>,
    first_type: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let types = (gen.num_classes - 1) / 2;
    let (min, max) = sentence_bounds(gen.language, gen.seq_len - 2);
    let len = rng.gen_range(min..=max);
    let max_entities = ((len + 1) / 3).clamp(1, 3);
    let n_ent = rng.gen_range(1..=max_entities);
    let mut lens: Vec<usize> = (0..n_ent).map(|_| rng.gen_range(1..=2)).collect();
    while lens.iter().sum::<usize>() + n_ent - 1 > len {
        let longest = (0..lens.len()).max_by_key(|&i| lens[i]).unwrap();
        lens[longest] -= 1;
        if lens[longest] == 0 {
            lens.remove(longest);
        }
    }
    let n_ent = lens.len();
    let spare = len - lens.iter().sum::<usize>() - (n_ent - 1);
    let mut gaps = vec![0usize; n_ent + 1];
    for _ in 0..spare {
        gaps[rng.gen_range(0..=n_ent)] += 1;
    }
    for g in gaps.iter_mut().take(n_ent).skip(1) {
        *g += 1;
    }
    let topic = rng.gen_range(0..gen.language.num_topics);
    let mut words = Vec::with_capacity(len);
    let mut tags = Vec::with_capacity(len);
    for (k, &ent_len) in lens.iter().enumerate() {
        for _ in 0..gaps[k] {
            words.push(grammar.word(topic, rng));
            tags.push(0);
        }
        let ty = if k == 0 {
            first_type
        } else {
            rng.gen_range(0..types)
        };
        for pos in 0..ent_len {
            words.push(
                gen.language
                    .entity_name(ty, rng.gen_range(0..NAMES_PER_TYPE)),
            );
            tags.push(if pos == 0 { 1 + 2 * ty } else { 2 + 2 * ty });
        }
    }
    for _ in 0..gaps[n_ent] {
        words.push(grammar.word(topic, rng));
        tags.push(0);
    }
    let p = pack_single(&words, gen.seq_len)?;
    let mut packed_tags = vec![None; gen.seq_len];
    for (i, t) in tags.into_iter().enumerate() {
        packed_tags[i + 1] = Some(t);
    }
    Ok(example(p, Label::Tags(packed_tags)))
}

/// Question = filler plus one key; context = filler with 2–3 keyed answer
/// runs. The gold span is the answer run following the question's key.
fn span_example(gen: &TaskGen<'_>, grammar: &Grammar<'_>, rng: &mut ChaCha8Rng) -> Result<Example> {
    let lang = gen.language;
    let topic = rng.gen_range(0..lang.num_topics);
    let q_len = rng.gen_range(3..=4);
    let mut question: Vec<usize> = (0..q_len).map(|_| grammar.word(topic, rng)).collect();

    let n_keys = rng.gen_range(2..=3);
    let mut keys: Vec<usize> = (0..NUM_QA_KEYS).collect();
    keys.shuffle(rng);
    keys.truncate(n_keys);
    let target = rng.gen_range(0..n_keys);
    let qpos = rng.gen_range(0..q_len);
    question[qpos] = lang.qa_key(keys[target]);

    let budget = (gen.seq_len - 3 - q_len).min(lang.max_sentence_len + 2);
    let ans_lens: Vec<usize> = (0..n_keys).map(|_| rng.gen_range(1..=2)).collect();
    // Each keyed run needs key + answer + one separating filler word.
    let required: usize = ans_lens.iter().map(|l| l + 2).sum::<usize>() - 1;
    if required > budget {
        return Err(contract("sequence length too short for span examples"));
    }
    let ctx_len = rng.gen_range(required..=budget);
    let spare = ctx_len - required;
    let mut gaps = vec![0usize; n_keys + 1];
    for _ in 0..spare {
        gaps[rng.gen_range(0..=n_keys)] += 1;
    }
    for g in gaps.iter_mut().take(n_keys).skip(1) {
        *g += 1;
    }
    let mut context = Vec::with_capacity(ctx_len);
    let mut span = (0, 0);
    let ctx_start = 1 + q_len + 1;
    for k in 0..n_keys {
        for _ in 0..gaps[k] {
            context.push(grammar.word(topic, rng));
        }
        context.push(lang.qa_key(keys[k]));
        let start = ctx_start + context.len();
        for _ in 0..ans_lens[k] {
            context.push(lang.qa_answer(rng.gen_range(0..NUM_QA_ANSWERS)));
        }
        if k == target {
            span = (start, ctx_start + context.len() - 1);
        }
    }
    for _ in 0..gaps[n_keys] {
        context.push(grammar.word(topic, rng));
    }
    let p = pack_pair(&question, &context, gen.seq_len)?;
    debug_assert_eq!(p.token_ids[span.0 - 1], lang.qa_key(keys[target]));
    Ok(example(p, Label::Span(span.0, span.1)))
}

fn example(p: Packed, label: Label) -> Example {
    Example {
        token_ids: p.token_ids,
        attention_mask: p.attention_mask,
        segment_ids: p.segment_ids,
        label,
    }
}

/// Rule-based inverses of the generators. They read the planted markers and
/// reconstruct labels without any learned component.
pub mod oracle {
    use super::*;

    pub fn decode(
        lang: &LanguageSpec,
        family: TaskType,
        num_classes: usize,
        ex: &Example,
    ) -> Option<Label> {
        let real = &ex.token_ids[..ex.real_len()];
        match family {
            TaskType::Classification => real
                .iter()
                .find_map(|&t| lang.class_of_marker(t))
                .map(Label::Class),
            TaskType::PairClassification => {
                let marker = |seg: u8| {
                    real.iter()
                        .zip(&ex.segment_ids)
                        .find(|(&t, &s)| s == seg && lang.pair_marker_index(t).is_some())
                        .and_then(|(&t, _)| lang.pair_marker_index(t))
                };
                let (i, j) = (marker(0)?, marker(1)?);
                let c = (j + NUM_PAIR_MARKERS - i) % NUM_PAIR_MARKERS;
                (c < num_classes).then_some(Label::Class(c))
            }
            TaskType::TokenClassification => {
                let mut tags = vec![None; ex.len()];
                let mut prev_type = None;
                for (i, &t) in real.iter().enumerate() {
                    if t == CLS || t == SEP {
                        prev_type = None;
                        continue;
                    }
                    let ty = lang.entity_type_of(t);
                    tags[i] = Some(match ty {
                        None => 0,
                        Some(ty) if prev_type == Some(ty) => 2 + 2 * ty,
                        Some(ty) => 1 + 2 * ty,
                    });
                    prev_type = ty;
                }
                Some(Label::Tags(tags))
            }
            TaskType::SpanExtraction => {
                let key = real
                    .iter()
                    .zip(&ex.segment_ids)
                    .find(|(&t, &s)| s == 0 && lang.qa_key_index(t).is_some())
                    .map(|(&t, _)| t)?;
                let kpos = real
                    .iter()
                    .zip(&ex.segment_ids)
                    .position(|(&t, &s)| s == 1 && t == key)?;
                let start = kpos + 1;
                let mut end = start;
                while end + 1 < real.len() && lang.is_answer(real[end + 1]) {
                    end += 1;
                }
                lang.is_answer(real[start])
                    .then_some(Label::Span(start, end))
            }
            TaskType::Mlm | TaskType::Nsp => None,
        }
    }
}
