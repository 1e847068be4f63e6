//! Accuracy, entity-level F1, span F1 and dev-set evaluation.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Example, Label};
use crate::error::{contract, Result};
use crate::model::{Model, Predictions};
use crate::skills::{SkillMask, TaskSpec, TaskType};

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / gold.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall == 0.0 {
            // Both sides empty counts as a perfect match.
            if predicted == 0 && gold == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// An entity `(first, last, type)` with inclusive token positions.
pub type Entity = (usize, usize, usize);

/// Entities in a tag sequence using `O = 0`, `B-t = 1 + 2t`, `I-t = 2 + 2t`.
///
/// An `I-t` that does not continue a type-`t` entity opens a new one, as
/// conlleval does.
pub fn bio_entities(tags: &[usize]) -> Vec<Entity> {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        let (begin, ty) = match tag {
            0 => (false, None),
            t if t % 2 == 1 => (true, Some((t - 1) / 2)),
            t => (false, Some((t - 2) / 2)),
        };
        let continues = !begin && ty.is_some() && open.map(|(_, ot)| Some(ot)) == Some(ty);
        if !continues {
            if let Some((s, ot)) = open.take() {
                out.push((s, i - 1, ot));
            }
            if let Some(ty) = ty {
                open = Some((i, ty));
            }
        }
    }
    if let Some((s, ot)) = open {
        out.push((s, tags.len() - 1, ot));
    }
    out
}

/// Micro-averaged exact-match entity F1 over a corpus of tag sequences.
pub fn entity_f1(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Prf {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let pe: HashSet<Entity> = bio_entities(p).into_iter().collect();
        let ge: HashSet<Entity> = bio_entities(g).into_iter().collect();
        tp += pe.intersection(&ge).count();
        np += pe.len();
        ng += ge.len();
    }
    Prf::from_counts(tp, np, ng)
}

/// Token-overlap F1 between two inclusive spans.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if hi < lo || pred.1 < pred.0 {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let p = overlap / (pred.1 - pred.0 + 1) as f64;
    let r = overlap / (gold.1 - gold.0 + 1) as f64;
    2.0 * p * r / (p + r)
}

pub fn macro_average(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    /// Accuracy, entity F1 or span token F1 depending on the task type.
    pub primary: f64,
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    pub examples: usize,
}

/// Scores `examples` with the model under `mask`.
pub fn evaluate(
    model: &Model,
    spec: &TaskSpec,
    mask: &SkillMask,
    examples: &[Example],
    batch_size: usize,
) -> Result<TaskMetrics> {
    if examples.is_empty() || batch_size == 0 {
        return Err(contract(
            "evaluation needs examples and a positive batch size",
        ));
    }
    let mut classes = (Vec::new(), Vec::new());
    let mut tags = (Vec::new(), Vec::new());
    let mut spans = (Vec::new(), Vec::new());
    for chunk in examples.chunks(batch_size) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(spec, &refs)?;
        let t = batch.seq_len;
        match model.predict(&batch, spec, mask)? {
            Predictions::Classes(p) => {
                classes.0.extend(p);
                for ex in chunk {
                    if let Label::Class(c) = ex.label {
                        classes.1.push(c);
                    }
                }
            }
            Predictions::Tags(p) => {
                for (i, ex) in chunk.iter().enumerate() {
                    let Label::Tags(gold) = &ex.label else {
                        continue;
                    };
                    let (mut ps, mut gs) = (Vec::new(), Vec::new());
                    for (j, g) in gold.iter().enumerate() {
                        if let Some(g) = g {
                            ps.push(p[i * t + j]);
                            gs.push(*g);
                        }
                    }
                    tags.0.push(ps);
                    tags.1.push(gs);
                }
            }
            Predictions::Spans(p) => {
                spans.0.extend(p);
                for ex in chunk {
                    if let Label::Span(s, e) = ex.label {
                        spans.1.push((s, e));
                    }
                }
            }
            Predictions::Tokens(_) => return Err(contract("MLM heads are not evaluated")),
        }
    }
    let (primary, metric, exact_match) = match spec.task_type {
        TaskType::TokenClassification => (entity_f1(&tags.0, &tags.1).f1, "entity-f1", None),
        TaskType::SpanExtraction => {
            let f1: Vec<f64> = spans
                .0
                .iter()
                .zip(&spans.1)
                .map(|(&p, &g)| span_f1(p, g))
                .collect();
            let em: Vec<f64> = spans
                .0
                .iter()
                .zip(&spans.1)
                .map(|(p, g)| (p == g) as u8 as f64)
                .collect();
            (macro_average(&f1), "span-f1", Some(macro_average(&em)))
        }
        _ => (accuracy(&classes.0, &classes.1), "accuracy", None),
    };
    Ok(TaskMetrics {
        task_id: spec.task_id.clone(),
        primary,
        metric: metric.to_string(),
        exact_match,
        examples: examples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entity_f1_hand_example() {
        // PER = type 0 (B=1, I=2), LOC = type 1 (B=3, I=4).
        let gold = vec![vec![0, 1, 2, 0, 3, 4]];
        let pred = vec![vec![0, 1, 2, 0, 0, 0]];
        let prf = entity_f1(&pred, &gold);
        assert_eq!(prf.precision, 1.0);
        assert_eq!(prf.recall, 0.5);
        assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(entity_f1(&gold, &gold).f1, 1.0);
    }

    #[test]
    fn bio_decoding_follows_conlleval() {
        assert_eq!(bio_entities(&[2, 2, 0]), vec![(0, 1, 0)]);
        assert_eq!(
            bio_entities(&[1, 4, 3]),
            vec![(0, 0, 0), (1, 1, 1), (2, 2, 1)]
        );
        assert_eq!(bio_entities(&[1, 1]), vec![(0, 0, 0), (1, 1, 0)]);
        assert!(bio_entities(&[0, 0]).is_empty());
    }

    #[test]
    fn span_and_accuracy_examples() {
        assert!((span_f1((3, 5), (4, 6)) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(span_f1((3, 5), (3, 5)), 1.0);
        assert_eq!(span_f1((0, 1), (4, 6)), 0.0);
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(macro_average(&[1.0, 0.5]), 0.75);
    }
}
