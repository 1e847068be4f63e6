//! Skill taxonomy, task specifications and the task→skill routing matrix.
//!
//! Skills come in two kinds: task skills (`t_s1`, `t_s2`, ...) and language
//! skills (`l_s1`, ...). Every task activates at least one task skill and
//! exactly one language skill. The routing matrix has one row per task and
//! one column per skill, task skills first.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkillKind {
    Task,
    Language,
}

/// A skill, identified by kind and a 1-based index within that kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SkillId {
    pub kind: SkillKind,
    pub index: usize,
}

impl SkillId {
    pub const fn task(index: usize) -> Self {
        Self {
            kind: SkillKind::Task,
            index,
        }
    }

    pub const fn language(index: usize) -> Self {
        Self {
            kind: SkillKind::Language,
            index,
        }
    }

    pub fn is_language(self) -> bool {
        self.kind == SkillKind::Language
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SkillKind::Task => write!(f, "t_s{}", self.index),
            SkillKind::Language => write!(f, "l_s{}", self.index),
        }
    }
}

impl FromStr for SkillId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Skill(format!("malformed skill id `{s}` (expected t_sN or l_sN)"));
        let (kind, rest) = if let Some(rest) = s.strip_prefix("t_s") {
            (SkillKind::Task, rest)
        } else if let Some(rest) = s.strip_prefix("l_s") {
            (SkillKind::Language, rest)
        } else {
            return Err(bad());
        };
        let index: usize = rest.parse().map_err(|_| bad())?;
        if index == 0 {
            return Err(bad());
        }
        Ok(Self { kind, index })
    }
}

impl TryFrom<String> for SkillId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SkillId> for String {
    fn from(id: SkillId) -> Self {
        id.to_string()
    }
}

/// Names of the task skills and language tags of the language skills.
///
/// Language skill `l_sK` understands `languages[K-1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub task_skills: Vec<String>,
    pub languages: Vec<String>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self {
            task_skills: [
                "generic",
                "token semantics",
                "sentence semantics",
                "segment interaction",
                "sentiment",
                "question understanding",
            ]
            .map(String::from)
            .to_vec(),
            languages: ["en", "zh", "de", "es"].map(String::from).to_vec(),
        }
    }
}

impl Taxonomy {
    pub fn num_task_skills(&self) -> usize {
        self.task_skills.len()
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn num_skills(&self) -> usize {
        self.task_skills.len() + self.languages.len()
    }

    pub fn contains(&self, id: SkillId) -> bool {
        let n = match id.kind {
            SkillKind::Task => self.task_skills.len(),
            SkillKind::Language => self.languages.len(),
        };
        id.index >= 1 && id.index <= n
    }

    /// Matrix column of a skill: task skills first, then language skills.
    pub fn column(&self, id: SkillId) -> Result<usize> {
        if !self.contains(id) {
            return Err(Error::Skill(format!("{id} is not in the taxonomy")));
        }
        Ok(match id.kind {
            SkillKind::Task => id.index - 1,
            SkillKind::Language => self.task_skills.len() + id.index - 1,
        })
    }

    pub fn skill_at(&self, column: usize) -> SkillId {
        let nt = self.task_skills.len();
        if column < nt {
            SkillId::task(column + 1)
        } else {
            SkillId::language(column - nt + 1)
        }
    }

    pub fn task_skill_ids(&self) -> impl Iterator<Item = SkillId> {
        (1..=self.task_skills.len()).map(SkillId::task)
    }

    pub fn language_skill_ids(&self) -> impl Iterator<Item = SkillId> {
        (1..=self.languages.len()).map(SkillId::language)
    }

    pub fn all_skills(&self) -> impl Iterator<Item = SkillId> {
        self.task_skill_ids().chain(self.language_skill_ids())
    }

    pub fn language_skill(&self, tag: &str) -> Result<SkillId> {
        self.languages
            .iter()
            .position(|l| l == tag)
            .map(|i| SkillId::language(i + 1))
            .ok_or_else(|| Error::Skill(format!("language `{tag}` has no language skill")))
    }

    pub fn language_tag(&self, id: SkillId) -> Result<&str> {
        if id.kind != SkillKind::Language || !self.contains(id) {
            return Err(Error::Skill(format!("{id} is not a language skill")));
        }
        Ok(&self.languages[id.index - 1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    PairClassification,
    Classification,
    TokenClassification,
    SpanExtraction,
    Mlm,
    Nsp,
}

impl TaskType {
    /// Tasks scored by accuracy.
    pub fn is_classification_style(self) -> bool {
        matches!(
            self,
            TaskType::PairClassification | TaskType::Classification | TaskType::Nsp
        )
    }

    pub fn has_pair_input(self) -> bool {
        matches!(
            self,
            TaskType::PairClassification | TaskType::SpanExtraction | TaskType::Nsp
        )
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskType::PairClassification => "pair-classification",
            TaskType::Classification => "classification",
            TaskType::TokenClassification => "token-classification",
            TaskType::SpanExtraction => "span-extraction",
            TaskType::Mlm => "mlm",
            TaskType::Nsp => "nsp",
        };
        f.write_str(s)
    }
}

/// One task: its type, language, head size and activated skills.
///
/// `num_classes` is the size of every softmax the task head emits: the label
/// set for classification, the tag set for tagging, the sequence length for
/// span extraction and the vocabulary for MLM.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub task_type: TaskType,
    pub language: String,
    pub num_classes: usize,
    pub skills: BTreeSet<SkillId>,
}

impl TaskSpec {
    pub fn new(
        task_id: impl Into<String>,
        task_type: TaskType,
        language: impl Into<String>,
        num_classes: usize,
        skills: impl IntoIterator<Item = SkillId>,
    ) -> Self {
        Self {
            task_id: task_id.into(),
            task_type,
            language: language.into(),
            num_classes,
            skills: skills.into_iter().collect(),
        }
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        let languages = self.skills.iter().filter(|s| s.is_language()).count();
        if languages != 1 {
            return Err(Error::Skill(format!(
                "task `{}` activates {languages} language skills; exactly one is required",
                self.task_id
            )));
        }
        if !self.skills.iter().any(|s| !s.is_language()) {
            return Err(Error::Skill(format!(
                "task `{}` activates no task skill",
                self.task_id
            )));
        }
        for &s in &self.skills {
            if !taxonomy.contains(s) {
                return Err(Error::Skill(format!(
                    "task `{}` references unknown skill {s}",
                    self.task_id
                )));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Skill(format!(
                "task `{}` needs at least 2 classes",
                self.task_id
            )));
        }
        Ok(())
    }

    pub fn language_skill(&self) -> SkillId {
        *self
            .skills
            .iter()
            .find(|s| s.is_language())
            .expect("validated spec has a language skill")
    }
}

/// A binary activation vector over all skills of a taxonomy.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkillMask {
    bits: Vec<bool>,
    num_task: usize,
}

impl SkillMask {
    pub fn from_skills(
        taxonomy: &Taxonomy,
        skills: impl IntoIterator<Item = SkillId>,
    ) -> Result<Self> {
        let mut bits = vec![false; taxonomy.num_skills()];
        for s in skills {
            bits[taxonomy.column(s)?] = true;
        }
        Ok(Self {
            bits,
            num_task: taxonomy.num_task_skills(),
        })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn task_bits(&self) -> &[bool] {
        &self.bits[..self.num_task]
    }

    pub fn language_bits(&self) -> &[bool] {
        &self.bits[self.num_task..]
    }

    /// The single active language skill, if exactly one is active.
    pub fn language(&self) -> Option<SkillId> {
        let mut active = self
            .language_bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| SkillId::language(i + 1));
        match (active.next(), active.next()) {
            (Some(l), None) => Some(l),
            _ => None,
        }
    }

    pub fn active(&self) -> impl Iterator<Item = SkillId> + '_ {
        let nt = self.num_task;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| {
                if i < nt {
                    SkillId::task(i + 1)
                } else {
                    SkillId::language(i - nt + 1)
                }
            })
    }

    pub fn active_task_skills(&self) -> Vec<SkillId> {
        self.active().filter(|s| !s.is_language()).collect()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_active(&self, taxonomy: &Taxonomy, id: SkillId) -> bool {
        taxonomy.column(id).map(|c| self.bits[c]).unwrap_or(false)
    }
}

impl fmt::Display for SkillMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.active().map(|s| s.to_string()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Inference-time modifications of a task's skill set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Perturbation {
    Identity,
    /// Replace the task's language skill with another language skill.
    LanguageSwap {
        to: SkillId,
    },
    /// Activate every task skill, keeping the language skill.
    AllTaskSkills,
    /// Activate each task skill independently with probability `p`.
    RandomTaskSkills {
        p: f64,
        seed: u64,
    },
}

impl Perturbation {
    pub fn label(&self, taxonomy: &Taxonomy) -> String {
        match self {
            Perturbation::Identity => "identity".into(),
            Perturbation::LanguageSwap { to } => match taxonomy.language_tag(*to) {
                Ok(tag) => format!("swap->{tag}"),
                Err(_) => format!("swap->{to}"),
            },
            Perturbation::AllTaskSkills => "all-task-skills".into(),
            Perturbation::RandomTaskSkills { seed, .. } => format!("random(seed={seed})"),
        }
    }
}

/// The validated task→skill binary matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillMatrix {
    taxonomy: Taxonomy,
    tasks: Vec<TaskSpec>,
    matrix: Vec<Vec<u8>>,
}

impl SkillMatrix {
    pub fn build(taxonomy: Taxonomy, specs: Vec<TaskSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut matrix = Vec::with_capacity(specs.len());
        for spec in &specs {
            if !seen.insert(spec.task_id.as_str()) {
                return Err(Error::Skill(format!(
                    "duplicate task id `{}`",
                    spec.task_id
                )));
            }
            spec.validate(&taxonomy)?;
            let mut row = vec![0u8; taxonomy.num_skills()];
            for &s in &spec.skills {
                row[taxonomy.column(s)?] = 1;
            }
            matrix.push(row);
        }
        Ok(Self {
            taxonomy,
            tasks: specs,
            matrix,
        })
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.matrix
    }

    pub fn position(&self, task_id: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn spec(&self, task_id: &str) -> Result<&TaskSpec> {
        Ok(&self.tasks[self.position(task_id)?])
    }

    /// Row `M_(x)` for the task as a mask.
    pub fn active_skill_mask(&self, task_id: &str) -> Result<SkillMask> {
        let row = &self.matrix[self.position(task_id)?];
        Ok(SkillMask {
            bits: row.iter().map(|&b| b == 1).collect(),
            num_task: self.taxonomy.num_task_skills(),
        })
    }

    pub fn perturbed_mask(&self, task_id: &str, perturbation: &Perturbation) -> Result<SkillMask> {
        let row = self.position(task_id)?;
        let mut mask = self.active_skill_mask(task_id)?;
        let nt = self.taxonomy.num_task_skills();
        match perturbation {
            Perturbation::Identity => {}
            Perturbation::LanguageSwap { to } => {
                if !to.is_language() || !self.taxonomy.contains(*to) {
                    return Err(Error::Skill(format!(
                        "language swap target {to} is not a language skill"
                    )));
                }
                for b in &mut mask.bits[nt..] {
                    *b = false;
                }
                mask.bits[self.taxonomy.column(*to)?] = true;
            }
            Perturbation::AllTaskSkills => {
                for b in &mut mask.bits[..nt] {
                    *b = true;
                }
            }
            Perturbation::RandomTaskSkills { p, seed } => {
                if !(0.0..=1.0).contains(p) || *p == 0.0 {
                    return Err(Error::Skill(format!(
                        "activation probability {p} not in (0, 1]"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed.wrapping_add((row as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                );
                let mut attempts = 0;
                loop {
                    for b in &mut mask.bits[..nt] {
                        *b = rng.gen_bool(*p);
                    }
                    if mask.bits[..nt].iter().any(|&b| b) {
                        break;
                    }
                    attempts += 1;
                    log::info!(
                        "random task-skill draw for `{task_id}` was empty; redrawing (attempt {attempts})"
                    );
                }
            }
        }
        Ok(mask)
    }
}

/// The eleven-task reference suite and its routing rows, for a taxonomy of
/// six task skills and the languages en, zh, de, es.
///
/// `seq_len` sizes the span-extraction heads. Class counts follow the label
/// sets of the original datasets: 3-way NLI, binary QNLI/SST-2, 15 news
/// topics, 5 review ratings, BIO tags over 4 (CoNLL) or 3 (WikiANN) types.
pub fn reference_tasks(seq_len: usize) -> Vec<TaskSpec> {
    use TaskType::*;
    let t = SkillId::task;
    let l = SkillId::language;
    vec![
        TaskSpec::new(
            "mnli",
            PairClassification,
            "en",
            3,
            [t(1), t(3), t(4), l(1)],
        ),
        TaskSpec::new(
            "qnli",
            PairClassification,
            "en",
            2,
            [t(1), t(3), t(4), t(6), l(1)],
        ),
        TaskSpec::new("sst2", Classification, "en", 2, [t(1), t(3), t(5), l(1)]),
        TaskSpec::new(
            "squad",
            SpanExtraction,
            "en",
            seq_len,
            [t(1), t(2), t(4), t(6), l(1)],
        ),
        TaskSpec::new("conll03", TokenClassification, "en", 9, [t(1), t(2), l(1)]),
        TaskSpec::new("ocnli", PairClassification, "zh", 3, [t(1), t(3), l(2)]),
        TaskSpec::new("tnews", Classification, "zh", 15, [t(1), t(3), l(2)]),
        TaskSpec::new("marc-de", Classification, "de", 5, [t(1), t(3), l(3)]),
        TaskSpec::new(
            "wikiann-de",
            TokenClassification,
            "de",
            7,
            [t(1), t(2), l(3)],
        ),
        TaskSpec::new("marc-es", Classification, "es", 5, [t(1), t(3), l(4)]),
        TaskSpec::new(
            "squad-es",
            SpanExtraction,
            "es",
            seq_len,
            [t(1), t(2), t(4), t(6), l(4)],
        ),
    ]
}
