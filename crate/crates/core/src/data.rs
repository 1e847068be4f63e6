//! Packed examples, mini-batches and the line-delimited dataset format.
//!
//! An [`Example`] is already packed to the model's sequence length:
//! `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, padded with `[PAD]`. Label
//! positions are indices into that packed sequence.
//!
//! Dataset files hold one JSON object per line:
//!
//! ```text
//! {"task_id":"mnli","split":"train","token_ids":[1,57,...],
//!  "attention_mask":[1,1,...,0],"segment_ids":[0,0,...,1],
//!  "label":{"kind":"class","value":2}}
//! ```
//!
//! `label` is one of `{"kind":"class","value":c}`,
//! `{"kind":"tags","value":[null,0,3,4,...]}` (one entry per position,
//! `null` where unlabeled) or `{"kind":"span","value":[start,end]}`
//! (inclusive packed positions).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::skills::{TaskSpec, TaskType};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Label {
    Class(usize),
    Tags(Vec<Option<usize>>),
    Span(usize, usize),
}

impl Label {
    fn fits(&self, task_type: TaskType) -> bool {
        matches!(
            (self, task_type),
            (
                Label::Class(_),
                TaskType::Classification | TaskType::PairClassification | TaskType::Nsp
            ) | (Label::Tags(_), TaskType::TokenClassification)
                | (Label::Span(..), TaskType::SpanExtraction)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
    pub label: Label,
}

impl Example {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
        }
    }

    /// Copy restricted to the first `n` training examples.
    pub fn with_train_size(&self, n: usize) -> TaskDataset {
        TaskDataset {
            task_id: self.task_id.clone(),
            train: self.train.iter().take(n).cloned().collect(),
            dev: self.dev.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    task_id: String,
    split: Split,
    #[serde(flatten)]
    example: Example,
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &TaskDataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (split, examples) in [(Split::Train, &ds.train), (Split::Dev, &ds.dev)] {
        for ex in examples {
            let rec = Record {
                task_id: ds.task_id.clone(),
                split,
                example: ex.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>, spec: &TaskSpec) -> Result<TaskDataset> {
    let mut ds = TaskDataset {
        task_id: spec.task_id.clone(),
        train: Vec::new(),
        dev: Vec::new(),
    };
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        if rec.task_id != spec.task_id {
            return Err(contract(format!(
                "record for `{}` in dataset of `{}`",
                rec.task_id, spec.task_id
            )));
        }
        if !rec.example.label.fits(spec.task_type) {
            return Err(contract(format!(
                "label {:?} does not fit task type {}",
                rec.example.label, spec.task_type
            )));
        }
        match rec.split {
            Split::Train => ds.train.push(rec.example),
            Split::Dev => ds.dev.push(rec.example),
        }
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// One optional tag per flattened `[b * T]` position.
    Tags(Vec<Option<usize>>),
    Spans(Vec<(usize, usize)>),
    /// `(flattened position, target token)` for masked-token prediction.
    Masked(Vec<(usize, usize)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub task_id: String,
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub segment_ids: Vec<usize>,
    pub labels: Labels,
}

impl Batch {
    pub fn from_examples(spec: &TaskSpec, examples: &[&Example]) -> Result<Batch> {
        let first = examples
            .first()
            .ok_or_else(|| contract("cannot build an empty batch"))?;
        let t = first.len();
        let b = examples.len();
        let mut batch = Batch {
            task_id: spec.task_id.clone(),
            batch_size: b,
            seq_len: t,
            token_ids: Vec::with_capacity(b * t),
            attention_mask: Vec::with_capacity(b * t),
            segment_ids: Vec::with_capacity(b * t),
            labels: Labels::Classes(Vec::new()),
        };
        let mut classes = Vec::new();
        let mut tags = Vec::new();
        let mut spans = Vec::new();
        for ex in examples {
            if ex.len() != t || ex.attention_mask.len() != t || ex.segment_ids.len() != t {
                return Err(Error::Shape {
                    op: "batch",
                    left: vec![t],
                    right: vec![ex.len()],
                });
            }
            if !ex.label.fits(spec.task_type) {
                return Err(contract(format!(
                    "label {:?} does not fit task `{}` of type {}",
                    ex.label, spec.task_id, spec.task_type
                )));
            }
            batch.token_ids.extend_from_slice(&ex.token_ids);
            batch
                .attention_mask
                .extend(ex.attention_mask.iter().map(|&m| m == 1));
            batch
                .segment_ids
                .extend(ex.segment_ids.iter().map(|&s| s as usize));
            match &ex.label {
                Label::Class(c) => classes.push(*c),
                Label::Tags(tg) => {
                    if tg.len() != t {
                        return Err(Error::Shape {
                            op: "batch tags",
                            left: vec![t],
                            right: vec![tg.len()],
                        });
                    }
                    tags.extend_from_slice(tg);
                }
                Label::Span(s, e) => spans.push((*s, *e)),
            }
        }
        batch.labels = match spec.task_type {
            TaskType::TokenClassification => Labels::Tags(tags),
            TaskType::SpanExtraction => Labels::Spans(spans),
            _ => Labels::Classes(classes),
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.batch_size * self.seq_len;
        if self.token_ids.len() != n
            || self.attention_mask.len() != n
            || self.segment_ids.len() != n
        {
            return Err(contract("batch buffers disagree with batch_size × seq_len"));
        }
        match &self.labels {
            Labels::Classes(c) if c.len() != self.batch_size => {
                Err(contract("one class label per example required"))
            }
            Labels::Spans(s) if s.len() != self.batch_size => {
                Err(contract("one span per example required"))
            }
            Labels::Tags(t) if t.len() != n => Err(contract("one tag slot per position required")),
            Labels::Tags(t) => {
                if t.iter()
                    .zip(&self.attention_mask)
                    .any(|(tag, &m)| tag.is_some() && !m)
                {
                    return Err(contract("tag on a padding position"));
                }
                Ok(())
            }
            Labels::Masked(m) => {
                for &(pos, _) in m {
                    if pos >= n || !self.attention_mask[pos] {
                        return Err(contract(format!("masked position {pos} is padding")));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skills::SkillId;

    fn spec(task_type: TaskType) -> TaskSpec {
        TaskSpec::new(
            "t",
            task_type,
            "en",
            3,
            [SkillId::task(1), SkillId::language(1)],
        )
    }

    fn ex(label: Label) -> Example {
        Example {
            token_ids: vec![1, 10, 11, 2, 0],
            attention_mask: vec![1, 1, 1, 1, 0],
            segment_ids: vec![0; 5],
            label,
        }
    }

    #[test]
    fn batches_carry_labels_by_task_type() {
        let a = ex(Label::Class(1));
        let b = ex(Label::Class(2));
        let batch = Batch::from_examples(&spec(TaskType::Classification), &[&a, &b]).unwrap();
        assert_eq!(batch.labels, Labels::Classes(vec![1, 2]));
        assert_eq!(batch.attention_mask.iter().filter(|&&m| m).count(), 8);

        let tags = ex(Label::Tags(vec![None, Some(0), Some(1), None, None]));
        let batch = Batch::from_examples(&spec(TaskType::TokenClassification), &[&tags]).unwrap();
        assert!(matches!(batch.labels, Labels::Tags(ref t) if t.len() == 5));

        assert!(Batch::from_examples(&spec(TaskType::SpanExtraction), &[&a]).is_err());
        let bad = ex(Label::Tags(vec![None, None, None, None, Some(1)]));
        assert!(Batch::from_examples(&spec(TaskType::TokenClassification), &[&bad]).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let ds = TaskDataset {
            task_id: "t".into(),
            train: vec![ex(Label::Class(0)), ex(Label::Class(2))],
            dev: vec![ex(Label::Class(1))],
        };
        save_dataset(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(r#"{"task_id":"t","split":"train","token_ids":[1,10,11,2,0]"#));
        assert_eq!(
            load_dataset(&path, &spec(TaskType::Classification)).unwrap(),
            ds
        );
        assert!(load_dataset(&path, &spec(TaskType::SpanExtraction)).is_err());
    }
}
