//! Encoder assembly for the four variants plus per-task output heads.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::data::{Batch, Labels};
use crate::error::{contract, Error, Result};
use crate::layers::{
    dense_ffn, dense_mha, ffn_init, moe_ffn, skill_ffn, skill_mha, xavier_std, FfnParams,
    MhaParams, MoeParams, QkvParams, SkillFfnBank, SkillMhaParams,
};
use crate::params::{Owner, ParamId, ParameterStore};
use crate::skills::{SkillId, SkillMask, SkillMatrix, TaskSpec, TaskType, Taxonomy};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
/// Added to span scores at padding positions.
const SPAN_PAD_PENALTY: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dense,
    Moe,
    /// Task and language skills all live in the FFN bank.
    SkillFfn,
    /// Task skills in the FFN bank, language skills as attention Q/K/V.
    SkillFfnMha,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Dense,
        Variant::Moe,
        Variant::SkillFfn,
        Variant::SkillFfnMha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Moe => "moe",
            Variant::SkillFfn => "skill-ffn",
            Variant::SkillFfnMha => "skill-ffn-mha",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Expert count of the MoE variant.
    #[serde(default = "default_experts")]
    pub num_experts: usize,
}

fn default_experts() -> usize {
    10
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.layers == 0 || self.hidden == 0 || self.intermediate == 0 || self.heads == 0 {
            return bad("layers, hidden, intermediate and heads must be positive");
        }
        if self.hidden % self.heads != 0 {
            return bad("hidden size must be divisible by the head count");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocabulary size and sequence length must be positive");
        }
        if self.variant == Variant::Moe && self.num_experts < 2 {
            return bad("the MoE variant needs at least two experts");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
enum Attention {
    Dense(MhaParams),
    Skill(SkillMhaParams),
}

#[derive(Clone, Debug, PartialEq)]
enum Ffn {
    Dense(FfnParams),
    Skill(SkillFfnBank),
    Moe(MoeParams),
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    attention: Attention,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    token: ParamId,
    position: ParamId,
    segment: ParamId,
    norm: Norm,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    task_type: TaskType,
    classes: usize,
    w: ParamId,
    b: ParamId,
}

/// Head outputs recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Logits {
    /// `[rows, C]`: one row per example (sentence-level heads), per position
    /// (tagging) or per masked position (MLM).
    Rows(Var),
    /// Start and end scores, each `[b, T]`.
    Span { start: Var, end: Var },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskOutput {
    pub logits: Logits,
    pub loss: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Predictions {
    Classes(Vec<usize>),
    /// Argmax tag for every flattened `[b * T]` position.
    Tags(Vec<usize>),
    Spans(Vec<(usize, usize)>),
    /// Argmax token for every masked position, in label order.
    Tokens(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub taxonomy: Taxonomy,
    pub store: ParameterStore,
    layout: Layout,
    heads: BTreeMap<String, Head>,
    seed: u64,
}

/// Builds a model with one head per task in `skills`.
pub fn build_model(cfg: &ModelConfig, skills: &SkillMatrix, seed: u64) -> Result<Model> {
    Model::new(cfg, skills.taxonomy(), skills.tasks(), seed)
}

fn norm(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<Norm> {
    Ok(Norm {
        gamma: store.insert(
            format!("{prefix}.gamma"),
            Owner::Shared,
            Tensor::full(&[d], 1.0),
        )?,
        beta: store.insert(format!("{prefix}.beta"), Owner::Shared, Tensor::zeros(&[d]))?,
    })
}

fn qkv_init(d: usize, rng: &mut ChaCha8Rng) -> [Tensor; 3] {
    let std = xavier_std(d, d);
    [
        Tensor::randn(&[d, d], std, rng),
        Tensor::randn(&[d, d], std, rng),
        Tensor::randn(&[d, d], std, rng),
    ]
}

fn head_seed(seed: u64, task_id: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(task_id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Model {
    pub fn new(
        cfg: &ModelConfig,
        taxonomy: &Taxonomy,
        tasks: &[TaskSpec],
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.hidden, cfg.intermediate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let emb_std = 0.1;
        let token = store.insert(
            "embed.token",
            Owner::Shared,
            Tensor::randn(&[cfg.vocab_size, d], emb_std, &mut rng),
        )?;
        let position = store.insert(
            "embed.position",
            Owner::Shared,
            Tensor::randn(&[cfg.max_seq_len, d], emb_std, &mut rng),
        )?;
        let segment = store.insert(
            "embed.segment",
            Owner::Shared,
            Tensor::randn(&[2, d], emb_std, &mut rng),
        )?;
        let embed_norm = norm(&mut store, "embed.norm", d)?;

        let mut blocks = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let p = format!("layer{layer}");
            let attention = match cfg.variant {
                Variant::SkillFfnMha => {
                    // One draw, replicated for every language.
                    let init = qkv_init(d, &mut rng);
                    let mut languages = Vec::new();
                    for l in taxonomy.language_skill_ids() {
                        let qkv = QkvParams::register(
                            &mut store,
                            &format!("{p}.attn.{l}"),
                            Owner::Skill(l),
                            init.clone(),
                        )?;
                        languages.push((l, qkv));
                    }
                    let output = store.insert(
                        format!("{p}.attn.o"),
                        Owner::Shared,
                        Tensor::randn(&[d, d], xavier_std(d, d), &mut rng),
                    )?;
                    Attention::Skill(SkillMhaParams {
                        languages,
                        output,
                        heads: cfg.heads,
                    })
                }
                _ => {
                    let qkv = QkvParams::register(
                        &mut store,
                        &format!("{p}.attn"),
                        Owner::Shared,
                        qkv_init(d, &mut rng),
                    )?;
                    let output = store.insert(
                        format!("{p}.attn.o"),
                        Owner::Shared,
                        Tensor::randn(&[d, d], xavier_std(d, d), &mut rng),
                    )?;
                    Attention::Dense(MhaParams {
                        qkv,
                        output,
                        heads: cfg.heads,
                    })
                }
            };
            let norm1 = norm(&mut store, &format!("{p}.norm1"), d)?;
            let ffn = match cfg.variant {
                Variant::Dense => Ffn::Dense(FfnParams::register(
                    &mut store,
                    &format!("{p}.ffn"),
                    Owner::Shared,
                    ffn_init(d, h, &mut rng),
                )?),
                Variant::Moe => {
                    let mut experts = Vec::with_capacity(cfg.num_experts);
                    for e in 0..cfg.num_experts {
                        experts.push(FfnParams::register(
                            &mut store,
                            &format!("{p}.moe.e{e}"),
                            Owner::Shared,
                            ffn_init(d, h, &mut rng),
                        )?);
                    }
                    let gate = store.insert(
                        format!("{p}.moe.gate"),
                        Owner::Shared,
                        Tensor::randn(
                            &[d, cfg.num_experts],
                            xavier_std(d, cfg.num_experts),
                            &mut rng,
                        ),
                    )?;
                    Ffn::Moe(MoeParams { experts, gate })
                }
                Variant::SkillFfn | Variant::SkillFfnMha => {
                    let members: Vec<SkillId> = if cfg.variant == Variant::SkillFfn {
                        taxonomy.all_skills().collect()
                    } else {
                        taxonomy.task_skill_ids().collect()
                    };
                    let init = ffn_init(d, h, &mut rng);
                    let mut bank = Vec::with_capacity(members.len());
                    for s in members {
                        let p = FfnParams::register(
                            &mut store,
                            &format!("{p}.ffn.{s}"),
                            Owner::Skill(s),
                            init.clone(),
                        )?;
                        bank.push((s, p));
                    }
                    Ffn::Skill(SkillFfnBank { members: bank })
                }
            };
            let norm2 = norm(&mut store, &format!("{p}.norm2"), d)?;
            blocks.push(Block {
                attention,
                norm1,
                ffn,
                norm2,
            });
        }

        let mut model = Model {
            config: cfg.clone(),
            taxonomy: taxonomy.clone(),
            store,
            layout: Layout {
                token,
                position,
                segment,
                norm: embed_norm,
                blocks,
            },
            heads: BTreeMap::new(),
            seed,
        };
        for spec in tasks {
            spec.validate(taxonomy)?;
            model.add_task_head(spec)?;
        }
        Ok(model)
    }

    /// Registers an output head for `spec` unless one already exists.
    ///
    /// Head initialization depends only on the model seed and the task id,
    /// so the order in which heads are added does not matter.
    pub fn add_task_head(&mut self, spec: &TaskSpec) -> Result<()> {
        let classes = self.head_classes(spec)?;
        self.add_head(&spec.task_id, spec.task_type, classes)
    }

    pub(crate) fn add_head(
        &mut self,
        task_id: &str,
        task_type: TaskType,
        classes: usize,
    ) -> Result<()> {
        if let Some(head) = self.heads.get(task_id) {
            if head.task_type != task_type || head.classes != classes {
                return Err(contract(format!(
                    "task `{task_id}` already has a head of a different shape"
                )));
            }
            return Ok(());
        }
        let d = self.config.hidden;
        let out = match task_type {
            TaskType::SpanExtraction => 2,
            _ => classes,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(head_seed(self.seed, task_id));
        let owner = Owner::Head(task_id.to_string());
        let w = self.store.insert(
            format!("head.{task_id}.w"),
            owner.clone(),
            Tensor::randn(&[d, out], xavier_std(d, out), &mut rng),
        )?;
        let b = self
            .store
            .insert(format!("head.{task_id}.b"), owner, Tensor::zeros(&[out]))?;
        self.heads.insert(
            task_id.to_string(),
            Head {
                task_type,
                classes,
                w,
                b,
            },
        );
        Ok(())
    }

    fn head_classes(&self, spec: &TaskSpec) -> Result<usize> {
        let c = match spec.task_type {
            TaskType::SpanExtraction => self.config.max_seq_len,
            TaskType::Mlm => self.config.vocab_size,
            TaskType::Nsp => 2,
            _ => spec.num_classes,
        };
        if c != spec.num_classes {
            return Err(contract(format!(
                "task `{}` declares {} classes but its head emits {}",
                spec.task_id, spec.num_classes, c
            )));
        }
        Ok(c)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn has_head(&self, task_id: &str) -> bool {
        self.heads.contains_key(task_id)
    }

    /// Task ids with heads, with their type and class count.
    pub fn head_specs(&self) -> impl Iterator<Item = (&str, TaskType, usize)> {
        self.heads
            .iter()
            .map(|(k, h)| (k.as_str(), h.task_type, h.classes))
    }

    /// Number of skill modules per layer in the FFN bank and in attention.
    pub fn skill_counts(&self) -> (usize, usize) {
        let block = &self.layout.blocks[0];
        let ffn = match &block.ffn {
            Ffn::Skill(bank) => bank.len(),
            _ => 0,
        };
        let attn = match &block.attention {
            Attention::Skill(p) => p.languages.len(),
            Attention::Dense(_) => 0,
        };
        (ffn, attn)
    }

    /// Final hidden states `[b, T, d]`.
    pub fn encode(&self, tape: &mut Tape, batch: &Batch, mask: &SkillMask) -> Result<Var> {
        self.encode_inner(tape, batch, mask, None)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let m: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = tape.leaf(Tensor::new(shape, m)?);
        tape.mul(x, m)
    }

    fn encode_inner(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mask: &SkillMask,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        batch.validate()?;
        let (b, t, d) = (batch.batch_size, batch.seq_len, self.config.hidden);
        if t > self.config.max_seq_len {
            return Err(contract(format!(
                "sequence length {t} exceeds the model maximum {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = batch
            .token_ids
            .iter()
            .find(|&&id| id >= self.config.vocab_size)
        {
            return Err(contract(format!("token id {bad} outside the vocabulary")));
        }
        if let Some(&bad) = batch.segment_ids.iter().find(|&&s| s > 1) {
            return Err(contract(format!("segment id {bad} is not 0 or 1")));
        }
        let language = self.check_mask(mask)?;

        let l = &self.layout;
        let tok = tape.param(&self.store, l.token);
        let pos = tape.param(&self.store, l.position);
        let seg = tape.param(&self.store, l.segment);
        let positions: Vec<usize> = (0..b * t).map(|i| i % t).collect();
        let e_tok = tape.gather_rows(tok, &batch.token_ids)?;
        let e_pos = tape.gather_rows(pos, &positions)?;
        let e_seg = tape.gather_rows(seg, &batch.segment_ids)?;
        let x = tape.add(e_tok, e_pos)?;
        let x = tape.add(x, e_seg)?;
        let x = tape.reshape(x, vec![b, t, d])?;
        let x = self.norm(tape, x, l.norm)?;
        let mut x = self.dropout(tape, x, &mut rng)?;

        for block in &l.blocks {
            let a = match &block.attention {
                Attention::Dense(p) => dense_mha(tape, &self.store, x, p, &batch.attention_mask)?,
                Attention::Skill(p) => {
                    skill_mha(tape, &self.store, x, p, language, &batch.attention_mask)?
                }
            };
            let a = self.dropout(tape, a, &mut rng)?;
            let r = tape.add(x, a)?;
            x = self.norm(tape, r, block.norm1)?;
            let f = match &block.ffn {
                Ffn::Dense(p) => dense_ffn(tape, &self.store, x, p)?,
                Ffn::Moe(p) => moe_ffn(tape, &self.store, x, p)?,
                Ffn::Skill(bank) => {
                    let bits = match self.config.variant {
                        Variant::SkillFfn => mask.bits(),
                        _ => mask.task_bits(),
                    };
                    skill_ffn(tape, &self.store, x, bank, bits)?
                }
            };
            let f = self.dropout(tape, f, &mut rng)?;
            let r = tape.add(x, f)?;
            x = self.norm(tape, r, block.norm2)?;
        }
        Ok(x)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Result<Var> {
        let g = tape.param(&self.store, n.gamma);
        let b = tape.param(&self.store, n.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn check_mask(&self, mask: &SkillMask) -> Result<SkillId> {
        if mask.bits().len() != self.taxonomy.num_skills() {
            return Err(Error::Skill(format!(
                "mask has {} bits, taxonomy has {} skills",
                mask.bits().len(),
                self.taxonomy.num_skills()
            )));
        }
        let language = mask.language().ok_or_else(|| {
            Error::Skill(format!(
                "mask {mask} must activate exactly one language skill"
            ))
        })?;
        if mask.task_bits().iter().all(|&b| !b) {
            return Err(Error::Skill(format!("mask {mask} activates no task skill")));
        }
        Ok(language)
    }

    fn head(&self, spec: &TaskSpec) -> Result<&Head> {
        let head = self
            .heads
            .get(&spec.task_id)
            .ok_or_else(|| Error::UnknownTask(spec.task_id.clone()))?;
        if head.task_type != spec.task_type {
            return Err(contract(format!(
                "task `{}` head is {}, spec says {}",
                spec.task_id, head.task_type, spec.task_type
            )));
        }
        Ok(head)
    }

    /// Head logits without a loss; used for prediction.
    pub fn logits(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        spec: &TaskSpec,
        mask: &SkillMask,
    ) -> Result<Logits> {
        let hidden = self.encode(tape, batch, mask)?;
        self.head_logits(tape, hidden, batch, spec)
    }

    fn head_logits(
        &self,
        tape: &mut Tape,
        hidden: Var,
        batch: &Batch,
        spec: &TaskSpec,
    ) -> Result<Logits> {
        if batch.task_id != spec.task_id {
            return Err(contract(format!(
                "batch for `{}` given to task `{}`",
                batch.task_id, spec.task_id
            )));
        }
        let head = self.head(spec)?;
        let (b, t, d) = (batch.batch_size, batch.seq_len, self.config.hidden);
        let flat = tape.reshape(hidden, vec![b * t, d])?;
        let w = tape.param(&self.store, head.w);
        let bias = tape.param(&self.store, head.b);
        let affine = |tape: &mut Tape, x: Var| -> Result<Var> {
            let y = tape.matmul(x, w)?;
            tape.add_bias(y, bias)
        };
        Ok(match head.task_type {
            TaskType::Classification | TaskType::PairClassification | TaskType::Nsp => {
                let first: Vec<usize> = (0..b).map(|i| i * t).collect();
                let pooled = tape.gather_rows(flat, &first)?;
                Logits::Rows(affine(tape, pooled)?)
            }
            TaskType::TokenClassification => Logits::Rows(affine(tape, flat)?),
            TaskType::Mlm => {
                let Labels::Masked(masked) = &batch.labels else {
                    return Err(contract("MLM batches need masked-position labels"));
                };
                let rows: Vec<usize> = masked.iter().map(|&(p, _)| p).collect();
                if rows.is_empty() {
                    return Err(contract("MLM batch without masked positions"));
                }
                let picked = tape.gather_rows(flat, &rows)?;
                Logits::Rows(affine(tape, picked)?)
            }
            TaskType::SpanExtraction => {
                let scores = affine(tape, flat)?;
                let starts: Vec<usize> = (0..b * t).map(|i| 2 * i).collect();
                let ends: Vec<usize> = (0..b * t).map(|i| 2 * i + 1).collect();
                let start = tape.gather(scores, &starts, vec![b, t])?;
                let end = tape.gather(scores, &ends, vec![b, t])?;
                let penalty: Vec<f64> = batch
                    .attention_mask
                    .iter()
                    .map(|&m| if m { 0.0 } else { SPAN_PAD_PENALTY })
                    .collect();
                let penalty = tape.leaf(Tensor::new(vec![b, t], penalty)?);
                let start = tape.add(start, penalty)?;
                let end = tape.add(end, penalty)?;
                Logits::Span { start, end }
            }
        })
    }

    /// Logits and unscaled task loss.
    pub fn forward_task(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        spec: &TaskSpec,
        mask: &SkillMask,
    ) -> Result<TaskOutput> {
        self.forward_inner(tape, batch, spec, mask, None)
    }

    /// As [`Model::forward_task`] with dropout active, drawing masks from `rng`.
    pub fn forward_task_train(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        spec: &TaskSpec,
        mask: &SkillMask,
        rng: &mut dyn RngCore,
    ) -> Result<TaskOutput> {
        self.forward_inner(tape, batch, spec, mask, Some(rng))
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        spec: &TaskSpec,
        mask: &SkillMask,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<TaskOutput> {
        let hidden = self.encode_inner(tape, batch, mask, rng)?;
        let logits = self.head_logits(tape, hidden, batch, spec)?;
        let mismatch = || {
            contract(format!(
                "labels of batch `{}` do not fit task type {}",
                batch.task_id, spec.task_type
            ))
        };
        let loss = match (logits, &batch.labels) {
            (Logits::Rows(l), Labels::Classes(c)) if spec.task_type.is_classification_style() => {
                tape.cross_entropy(l, c)?
            }
            (Logits::Rows(l), Labels::Tags(tags))
                if spec.task_type == TaskType::TokenClassification =>
            {
                let (rows, targets): (Vec<usize>, Vec<usize>) = tags
                    .iter()
                    .enumerate()
                    .filter_map(|(i, t)| t.map(|t| (i, t)))
                    .unzip();
                if rows.is_empty() {
                    return Err(contract("tagging batch without labeled positions"));
                }
                let picked = tape.gather_rows(l, &rows)?;
                tape.cross_entropy(picked, &targets)?
            }
            (Logits::Rows(l), Labels::Masked(m)) if spec.task_type == TaskType::Mlm => {
                let targets: Vec<usize> = m.iter().map(|&(_, t)| t).collect();
                tape.cross_entropy(l, &targets)?
            }
            (Logits::Span { start, end }, Labels::Spans(spans)) => {
                let s: Vec<usize> = spans.iter().map(|&(s, _)| s).collect();
                let e: Vec<usize> = spans.iter().map(|&(_, e)| e).collect();
                let ls = tape.cross_entropy(start, &s)?;
                let le = tape.cross_entropy(end, &e)?;
                let sum = tape.add(ls, le)?;
                tape.scale(sum, 0.5)
            }
            _ => return Err(mismatch()),
        };
        Ok(TaskOutput { logits, loss })
    }

    pub fn predict(&self, batch: &Batch, spec: &TaskSpec, mask: &SkillMask) -> Result<Predictions> {
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, batch, spec, mask)?;
        Ok(match logits {
            Logits::Rows(l) => {
                let v = tape.value(l);
                let am: Vec<usize> = (0..v.rows()).map(|i| argmax(v.row(i))).collect();
                match spec.task_type {
                    TaskType::TokenClassification => Predictions::Tags(am),
                    TaskType::Mlm => Predictions::Tokens(am),
                    _ => Predictions::Classes(am),
                }
            }
            Logits::Span { start, end } => {
                let (s, e) = (tape.value(start), tape.value(end));
                Predictions::Spans(
                    (0..batch.batch_size)
                        .map(|i| best_span(s.row(i), e.row(i)))
                        .collect(),
                )
            }
        })
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Highest-scoring `(start, end)` with `end >= start`, in linear time.
pub fn best_span(start: &[f64], end: &[f64]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    let mut arg_start = 0;
    for e in 0..end.len().min(start.len()) {
        if start[e] > start[arg_start] {
            arg_start = e;
        }
        let score = start[arg_start] + end[e];
        if score > best_score {
            best_score = score;
            best = (arg_start, e);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_and_span_examples() {
        assert_eq!(argmax(&[2.0, 1.0]), 0);
        let mut s = vec![0.0; 8];
        let mut e = vec![0.0; 8];
        s[3] = 5.0;
        e[5] = 5.0;
        assert_eq!(best_span(&s, &e), (3, 5));
        // The end must not precede the start.
        e[1] = 9.0;
        assert_eq!(best_span(&s, &e), (3, 5));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("sparse".parse::<Variant>().is_err());
    }
}
