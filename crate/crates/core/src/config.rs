//! Experiment configuration files.
//!
//! A TOML document describing the model, the skill taxonomy, synthetic
//! languages and tasks with their skill rows, and the training, pre-training,
//! adaptation and sweep settings. Unknown keys are rejected. See
//! `configs/desk.toml` for a complete example; [`ExperimentConfig::desk`]
//! builds the same configuration in code.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::skills::{reference_tasks, SkillId, SkillMatrix, TaskSpec, TaskType, Taxonomy};
use crate::synth::{self, Corpus, DatasetSizes, LanguageSpec, TaskGen, Vocabulary};
use crate::trainer::{AdaptHyper, PretrainHyper, TrainHyper};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub tag: String,
    pub zipf_exponent: f64,
    pub num_topics: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task_id: String,
    pub task_type: TaskType,
    pub language: String,
    pub num_classes: usize,
    pub skills: Vec<SkillId>,
    pub train_size: usize,
    pub dev_size: usize,
}

impl TaskConfig {
    pub fn spec(&self) -> TaskSpec {
        TaskSpec::new(
            self.task_id.clone(),
            self.task_type,
            self.language.clone(),
            self.num_classes,
            self.skills.iter().copied(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub docs_per_language: usize,
    pub languages: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub lr: f64,
    pub batch_size: usize,
    /// Step budgets at which the adaptation curve is sampled; the largest is
    /// the run length.
    pub step_points: Vec<u64>,
    /// Training-set sizes for the data-size curve; `0` means all examples.
    pub train_sizes: Vec<usize>,
    /// Dev score that counts as "reached" when comparing step counts.
    pub threshold: f64,
    pub new_tasks: Vec<TaskConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for parameter init and training order.
    pub seed: u64,
    /// Seed for synthetic data; kept apart so model seeds share one dataset.
    pub data_seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub taxonomy: Taxonomy,
    pub languages: Vec<LanguageConfig>,
    pub tasks: Vec<TaskConfig>,
    pub train: TrainSection,
    pub pretrain: Option<PretrainSection>,
    pub adapt: Option<AdaptSection>,
    pub sweep: Option<SweepSection>,
}

/// Reference train-set sizes divided by 10, in reference task order.
pub const DESK_TRAIN_SIZES: [usize; 11] = [
    39300, 10500, 6730, 1150, 1400, 5000, 5300, 20000, 2000, 20000, 8800,
];

impl ExperimentConfig {
    /// Four languages, the eleven reference tasks and a 2-layer, 64-wide
    /// encoder that trains in minutes on one core.
    pub fn desk() -> Self {
        let seq_len = 24;
        let taxonomy = Taxonomy::default();
        let languages: Vec<LanguageConfig> = taxonomy
            .languages
            .iter()
            .enumerate()
            .map(|(i, tag)| LanguageConfig {
                tag: tag.clone(),
                zipf_exponent: 1.1,
                num_topics: 4,
                min_sentence_len: 6,
                max_sentence_len: 14,
                seed: 1000 + i as u64,
            })
            .collect();
        let tasks = reference_tasks(seq_len)
            .into_iter()
            .zip(DESK_TRAIN_SIZES)
            .map(|(s, n)| TaskConfig {
                task_id: s.task_id,
                task_type: s.task_type,
                language: s.language,
                num_classes: s.num_classes,
                skills: s.skills.into_iter().collect(),
                train_size: n,
                dev_size: 200,
            })
            .collect();
        let t = SkillId::task;
        let l = SkillId::language;
        let new_tasks = vec![
            TaskConfig {
                task_id: "mrpc".into(),
                task_type: TaskType::PairClassification,
                language: "en".into(),
                num_classes: 2,
                skills: vec![t(1), t(3), t(4), l(1)],
                train_size: 370,
                dev_size: 200,
            },
            TaskConfig {
                task_id: "wikiann-es".into(),
                task_type: TaskType::TokenClassification,
                language: "es".into(),
                num_classes: 7,
                skills: vec![t(1), t(2), l(4)],
                train_size: 2000,
                dev_size: 200,
            },
        ];
        Self {
            seed: 1,
            data_seed: 7,
            out_dir: PathBuf::from("runs/desk"),
            model: ModelConfig {
                variant: Variant::SkillFfnMha,
                layers: 2,
                hidden: 64,
                intermediate: 64,
                heads: 4,
                vocab_size: synth::NUM_SPECIAL + languages.len() * synth::BLOCK_SIZE,
                max_seq_len: seq_len,
                dropout: 0.0,
                num_experts: 10,
            },
            taxonomy,
            languages,
            tasks,
            train: TrainSection {
                alpha: 0.4,
                lr: 1e-3,
                batch_size: 16,
                max_steps: 5000,
                eval_every: 1000,
            },
            pretrain: Some(PretrainSection {
                lr: 1e-3,
                batch_size: 16,
                steps: 1000,
                docs_per_language: 500,
                languages: vec!["en".into(), "zh".into(), "de".into(), "es".into()],
            }),
            adapt: Some(AdaptSection {
                lr: 1e-3,
                batch_size: 16,
                step_points: vec![100, 200, 300, 500, 800, 1000],
                train_sizes: vec![100, 200, 0],
                threshold: 0.9,
                new_tasks,
            }),
            sweep: Some(SweepSection {
                alphas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
                variants: vec![Variant::SkillFfn, Variant::SkillFfnMha],
            }),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let vocab = self.vocabulary()?;
        if self.model.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "model.vocab_size is {} but the languages need {}",
                self.model.vocab_size,
                vocab.size()
            )));
        }
        for tag in &self.taxonomy.languages {
            vocab.language(tag)?;
        }
        self.skill_matrix()?;
        let all_tasks = self
            .tasks
            .iter()
            .chain(self.adapt.iter().flat_map(|a| a.new_tasks.iter()));
        let mut ids = HashSet::new();
        for t in all_tasks {
            if !ids.insert(&t.task_id) {
                return Err(Error::Config(format!("task id `{}` used twice", t.task_id)));
            }
            t.spec().validate(&self.taxonomy)?;
            vocab.language(&t.language)?;
            if self.taxonomy.language_skill(&t.language)? != t.spec().language_skill() {
                return Err(Error::Config(format!(
                    "task `{}` is in `{}` but activates {}",
                    t.task_id,
                    t.language,
                    t.spec().language_skill()
                )));
            }
            if t.train_size == 0 || t.dev_size == 0 {
                return Err(Error::Config(format!(
                    "task `{}` needs train and dev examples",
                    t.task_id
                )));
            }
        }
        self.train_hyper().validate()?;
        if let Some(p) = &self.pretrain {
            for tag in &p.languages {
                vocab.language(tag)?;
            }
            if p.docs_per_language == 0 {
                return Err(Error::Config(
                    "pretrain.docs_per_language must be positive".into(),
                ));
            }
        }
        if let Some(a) = &self.adapt {
            if a.step_points.is_empty() || a.step_points.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(
                    "adapt.step_points must be strictly increasing".into(),
                ));
            }
            if a.train_sizes.is_empty() {
                return Err(Error::Config("adapt.train_sizes must not be empty".into()));
            }
        }
        if let Some(s) = &self.sweep {
            if s.alphas.is_empty() || s.alphas.iter().any(|a| !(*a >= 0.0)) {
                return Err(Error::Config(
                    "sweep.alphas must be nonempty and ≥ 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn language_specs(&self) -> Vec<LanguageSpec> {
        self.languages
            .iter()
            .enumerate()
            .map(|(i, l)| LanguageSpec {
                tag: l.tag.clone(),
                offset: synth::NUM_SPECIAL + i * synth::BLOCK_SIZE,
                zipf_exponent: l.zipf_exponent,
                num_topics: l.num_topics,
                min_sentence_len: l.min_sentence_len,
                max_sentence_len: l.max_sentence_len,
                seed: l.seed,
            })
            .collect()
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.language_specs())
    }

    pub fn specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(TaskConfig::spec).collect()
    }

    pub fn skill_matrix(&self) -> Result<SkillMatrix> {
        SkillMatrix::build(self.taxonomy.clone(), self.specs())
    }

    pub fn generate(&self, task: &TaskConfig, index: usize) -> Result<TaskDataset> {
        let vocab = self.vocabulary()?;
        synth::generate_task_dataset(&TaskGen {
            task_id: &task.task_id,
            family: task.task_type,
            language: vocab.language(&task.language)?,
            num_classes: task.num_classes,
            sizes: DatasetSizes {
                train: task.train_size,
                dev: task.dev_size,
            },
            seq_len: self.model.max_seq_len,
            seed: self
                .data_seed
                .wrapping_mul(1_000_003)
                .wrapping_add(index as u64),
        })
    }

    /// Datasets of the multitask suite, in task order.
    pub fn datasets(&self) -> Result<Vec<TaskDataset>> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, t)| self.generate(t, i))
            .collect()
    }

    /// Datasets of the held-out adaptation tasks.
    pub fn new_task_datasets(&self) -> Result<Vec<(TaskSpec, TaskDataset)>> {
        let Some(a) = &self.adapt else {
            return Ok(Vec::new());
        };
        let offset = self.tasks.len();
        a.new_tasks
            .iter()
            .enumerate()
            .map(|(i, t)| Ok((t.spec(), self.generate(t, offset + i)?)))
            .collect()
    }

    pub fn corpora(&self) -> Result<Vec<Corpus>> {
        let p = self
            .pretrain
            .as_ref()
            .ok_or_else(|| Error::Config("no [pretrain] section".into()))?;
        let vocab = self.vocabulary()?;
        p.languages
            .iter()
            .map(|tag| {
                synth::generate_corpus(vocab.language(tag)?, p.docs_per_language, self.data_seed)
            })
            .collect()
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            alpha: self.train.alpha,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            max_steps: self.train.max_steps,
            seed: self.seed,
            eval_every: self.train.eval_every,
        }
    }

    pub fn pretrain_hyper(&self) -> Result<PretrainHyper> {
        let p = self
            .pretrain
            .as_ref()
            .ok_or_else(|| Error::Config("no [pretrain] section".into()))?;
        Ok(PretrainHyper {
            lr: p.lr,
            batch_size: p.batch_size,
            steps: p.steps,
            seed: self.seed,
            languages: p.languages.clone(),
        })
    }

    pub fn adapt_hyper(&self) -> Result<AdaptHyper> {
        let a = self
            .adapt
            .as_ref()
            .ok_or_else(|| Error::Config("no [adapt] section".into()))?;
        Ok(AdaptHyper {
            lr: a.lr,
            batch_size: a.batch_size,
            steps: *a.step_points.last().expect("validated nonempty"),
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::desk();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_keys_and_bad_references_are_rejected() {
        let text = ExperimentConfig::desk().to_toml().unwrap();
        let with_unknown = text.replacen("seed = 1\n", "seed = 1\nsede = 2\n", 1);
        assert!(ExperimentConfig::from_toml_str(&with_unknown).is_err());

        let mut cfg = ExperimentConfig::desk();
        cfg.tasks[0].skills.push(SkillId::task(9));
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk();
        cfg.tasks[0].language = "fr".into();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk();
        cfg.model.vocab_size += 1;
        assert!(cfg.validate().is_err());
    }
}
