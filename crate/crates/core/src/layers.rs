//! Feed-forward and attention sub-layers: dense, skill-routed and top-2 MoE.
//!
//! All layers read parameters from a [`ParameterStore`] and record onto a
//! [`Tape`]. Skill-routed layers bind only the parameters of active skills,
//! so inactive modules cost nothing and get no gradient.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::params::{Owner, ParamId, ParameterStore};
use crate::skills::SkillId;
use crate::tensor::Tensor;

/// `FFN(x) = max(0, x·W1 + b1)·W2 + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Initial values `[W1, b1, W2, b2]` for a `d → h → d` FFN.
pub fn ffn_init<R: Rng + ?Sized>(d: usize, h: usize, rng: &mut R) -> [Tensor; 4] {
    [
        Tensor::randn(&[d, h], xavier_std(d, h), rng),
        Tensor::zeros(&[h]),
        Tensor::randn(&[h, d], xavier_std(h, d), rng),
        Tensor::zeros(&[d]),
    ]
}

pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

impl FfnParams {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        owner: Owner,
        values: [Tensor; 4],
    ) -> Result<Self> {
        let [w1, b1, w2, b2] = values;
        Ok(Self {
            w1: store.insert(format!("{prefix}.w1"), owner.clone(), w1)?,
            b1: store.insert(format!("{prefix}.b1"), owner.clone(), b1)?,
            w2: store.insert(format!("{prefix}.w2"), owner.clone(), w2)?,
            b2: store.insert(format!("{prefix}.b2"), owner, b2)?,
        })
    }

    pub fn lookup(store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: store.id(&format!("{prefix}.w1"))?,
            b1: store.id(&format!("{prefix}.b1"))?,
            w2: store.id(&format!("{prefix}.w2"))?,
            b2: store.id(&format!("{prefix}.b2"))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Parallel per-skill FFNs, ordered to match their skills.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillFfnBank {
    pub members: Vec<(SkillId, FfnParams)>,
}

impl SkillFfnBank {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QkvParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
}

impl QkvParams {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        owner: Owner,
        values: [Tensor; 3],
    ) -> Result<Self> {
        let [q, k, v] = values;
        Ok(Self {
            q: store.insert(format!("{prefix}.q"), owner.clone(), q)?,
            k: store.insert(format!("{prefix}.k"), owner.clone(), k)?,
            v: store.insert(format!("{prefix}.v"), owner, v)?,
        })
    }

    pub fn lookup(store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            q: store.id(&format!("{prefix}.q"))?,
            k: store.id(&format!("{prefix}.k"))?,
            v: store.id(&format!("{prefix}.v"))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.q, self.k, self.v]
    }
}

/// Dense multi-head self-attention without projection biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhaParams {
    pub qkv: QkvParams,
    pub output: ParamId,
    pub heads: usize,
}

/// Attention whose Q/K/V projections are chosen per language skill; the
/// output projection is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillMhaParams {
    pub languages: Vec<(SkillId, QkvParams)>,
    pub output: ParamId,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeParams {
    pub experts: Vec<FfnParams>,
    /// `[d, n_experts]` gating matrix.
    pub gate: ParamId,
}

pub fn dense_ffn(tape: &mut Tape, store: &ParameterStore, x: Var, p: &FfnParams) -> Result<Var> {
    let w1 = tape.param(store, p.w1);
    let b1 = tape.param(store, p.b1);
    let w2 = tape.param(store, p.w2);
    let b2 = tape.param(store, p.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, w2)?;
    tape.add_bias(y, b2)
}

/// Mean of the active skills' FFN outputs. Only members with a set mask bit
/// are evaluated.
pub fn skill_ffn(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    bank: &SkillFfnBank,
    mask: &[bool],
) -> Result<Var> {
    if mask.len() != bank.len() {
        return Err(Error::Shape {
            op: "skill_ffn",
            left: vec![bank.len()],
            right: vec![mask.len()],
        });
    }
    let mut outputs = Vec::new();
    for ((_, p), &on) in bank.members.iter().zip(mask) {
        if on {
            outputs.push(dense_ffn(tape, store, x, p)?);
        }
    }
    if outputs.is_empty() {
        return Err(contract("skill_ffn called with no active skill"));
    }
    if outputs.len() == 1 {
        return Ok(outputs[0]);
    }
    tape.mean_of(&outputs)
}

fn check_tokens(tape: &Tape, x: Var, key_mask: &[bool], op: &'static str) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 3 || key_mask.len() != shape[0] * shape[1] {
        return Err(Error::Shape {
            op,
            left: shape.to_vec(),
            right: vec![key_mask.len()],
        });
    }
    Ok(())
}

fn attention_with(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    qkv: &QkvParams,
    output: ParamId,
    heads: usize,
    key_mask: &[bool],
) -> Result<Var> {
    let wq = tape.param(store, qkv.q);
    let wk = tape.param(store, qkv.k);
    let wv = tape.param(store, qkv.v);
    let wo = tape.param(store, output);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let a = tape.attention(q, k, v, heads, key_mask)?;
    tape.matmul(a, wo)
}

/// Multi-head self-attention over `x[b, t, d]`; `key_mask[b * t]` marks
/// non-padding positions.
pub fn dense_mha(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    p: &MhaParams,
    key_mask: &[bool],
) -> Result<Var> {
    check_tokens(tape, x, key_mask, "dense_mha")?;
    attention_with(tape, store, x, &p.qkv, p.output, p.heads, key_mask)
}

pub fn skill_mha(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    p: &SkillMhaParams,
    language: SkillId,
    key_mask: &[bool],
) -> Result<Var> {
    check_tokens(tape, x, key_mask, "skill_mha")?;
    let qkv = p
        .languages
        .iter()
        .find(|(l, _)| *l == language)
        .map(|(_, q)| *q)
        .ok_or_else(|| Error::Skill(format!("no attention projections for {language}")))?;
    attention_with(tape, store, x, &qkv, p.output, p.heads, key_mask)
}

/// Indices of the two largest entries; ties go to the lower index.
pub fn top2(logits: &[f64]) -> (usize, usize) {
    let mut first = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[first] {
            first = i;
        }
    }
    let mut second = if first == 0 { 1 } else { 0 };
    for (i, &v) in logits.iter().enumerate() {
        if i != first && v > logits[second] {
            second = i;
        }
    }
    (first, second)
}

/// Token-level top-2 mixture of experts.
///
/// Each token is sent to its two highest-scoring experts and their outputs
/// are combined with a softmax over the two selected gate logits.
pub fn moe_ffn(tape: &mut Tape, store: &ParameterStore, x: Var, p: &MoeParams) -> Result<Var> {
    let n_experts = p.experts.len();
    if n_experts < 2 {
        return Err(contract("moe_ffn needs at least two experts"));
    }
    let shape = tape.shape(x).to_vec();
    let gate = tape.param(store, p.gate);
    let logits = tape.matmul(x, gate)?;
    let n = tape.value(x).rows();

    let mut picks = Vec::with_capacity(2 * n);
    let mut routes: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_experts];
    for tok in 0..n {
        let row = tape.value(logits).row(tok);
        let (a, b) = top2(row);
        picks.push(tok * n_experts + a);
        picks.push(tok * n_experts + b);
        routes[a].push((tok, 0));
        routes[b].push((tok, 1));
    }
    let selected = tape.gather(logits, &picks, vec![n, 2])?;
    let weights = tape.softmax(selected)?;

    let flat = tape.reshape(x, vec![n, *shape.last().unwrap()])?;
    let mut out: Option<Var> = None;
    for (expert, route) in p.experts.iter().zip(&routes) {
        if route.is_empty() {
            continue;
        }
        let tokens: Vec<usize> = route.iter().map(|&(t, _)| t).collect();
        let slots: Vec<usize> = route.iter().map(|&(t, s)| t * 2 + s).collect();
        let xe = tape.gather_rows(flat, &tokens)?;
        let ye = dense_ffn(tape, store, xe, expert)?;
        let we = tape.gather(weights, &slots, vec![tokens.len()])?;
        let ye = tape.scale_rows(ye, we)?;
        let placed = tape.scatter_rows(ye, &tokens, n)?;
        out = Some(match out {
            None => placed,
            Some(acc) => tape.add(acc, placed)?,
        });
    }
    let out = out.expect("every token routes to two experts");
    tape.reshape(out, shape)
}
