//! Multitask training: temperature sampling over tasks, per-task loss
//! scaling, Adam with linear decay, and resumable state.
//!
//! Each step samples one task, draws the next mini-batch of that task and
//! updates only the parameters the task's skill mask touches. The metrics
//! log is a sequence of JSON lines:
//!
//! ```text
//! {"kind":"train","step":17,"task_id":"mnli","raw_loss":1.08,"scaled_loss":0.98,"lr":0.00099}
//! {"kind":"eval","step":500,"task_id":"mnli","metric":"accuracy","score":0.93}
//! {"kind":"summary","step":500,"macro_average":0.91}
//! ```
//!
//! `step` counts completed updates; `lr` is the rate applied in that update.
//! Span tasks add `"exact_match"` to their eval records.

mod adapt;
mod pretrain;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Batch, Example, TaskDataset};
use crate::error::{contract, Error, Result};
use crate::metrics::{evaluate, macro_average};
use crate::model::Model;
use crate::optim::{Adam, LinearDecay};
use crate::skills::{SkillMask, SkillMatrix, TaskSpec};

pub use adapt::{adapt_new_task, adaptation_curve, AdaptHyper, CurvePoint};
pub use pretrain::{mlm_corrupt, nsp_example, skill_pretrain, PretrainHyper, MLM_RATE};

/// Task-sampling probabilities `q_i = p_i^α / Σ_j p_j^α` with
/// `p_i = |T_i| / Σ_k |T_k|`.
pub fn sampling_probs(sizes: &[usize], alpha: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(contract("sampling needs at least one task"));
    }
    if sizes.contains(&0) {
        return Err(contract("every dataset size must be positive"));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(contract(format!(
            "sampling factor {alpha} must be finite and ≥ 0"
        )));
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let powered: Vec<f64> = sizes
        .iter()
        .map(|&s| (s as f64 / total).powf(alpha))
        .collect();
    let norm: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|x| x / norm).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub alpha: f64,
    pub sizes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl SamplingPlan {
    pub fn new(sizes: Vec<usize>, alpha: f64) -> Result<Self> {
        let probs = sampling_probs(&sizes, alpha)?;
        Ok(Self {
            alpha,
            sizes,
            probs,
        })
    }
}

/// Draws a task index from the plan's multinomial.
pub fn sample_task<R: Rng + ?Sized>(plan: &SamplingPlan, rng: &mut R) -> usize {
    if plan.probs.len() == 1 {
        return 0;
    }
    WeightedIndex::new(&plan.probs)
        .expect("validated probabilities")
        .sample(rng)
}

/// `raw / ln C`, so a uniform predictor scores 1 for every class count.
pub fn scaled_loss(raw_loss: f64, num_classes: usize) -> Result<f64> {
    if num_classes < 2 {
        return Err(contract(format!(
            "loss scaling needs at least 2 classes, got {num_classes}"
        )));
    }
    Ok(raw_loss / (num_classes as f64).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricRecord {
    Train {
        step: u64,
        task_id: String,
        raw_loss: f64,
        scaled_loss: f64,
        lr: f64,
    },
    Eval {
        step: u64,
        task_id: String,
        metric: String,
        score: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exact_match: Option<f64>,
    },
    Summary {
        step: u64,
        macro_average: f64,
    },
}

pub fn write_metrics(path: impl AsRef<Path>, records: &[MetricRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Evaluate every task's dev split this often; 0 evaluates only at the end.
    pub eval_every: u64,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config(
                "batch size and step count must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Position of one task's reader within its shuffled epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCursor {
    pub epoch: u64,
    pub pos: usize,
}

fn mix(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(23) ^ b.wrapping_add(0x632B_E59B_D9B4_E019)
}

/// Example order for one epoch of one task; a pure function of its inputs.
pub fn epoch_order(n: usize, seed: u64, task: usize, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, task as u64), epoch));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub schedule: LinearDecay,
    pub adam: Adam,
    /// Task-sampling stream.
    pub rng: ChaCha8Rng,
    /// Dropout and other in-step randomness.
    pub noise_rng: ChaCha8Rng,
    pub cursors: Vec<TaskCursor>,
    pub history: Vec<MetricRecord>,
}

impl TrainState {
    pub fn new(model: &Model, hyper: &TrainHyper, num_tasks: usize) -> Self {
        Self {
            step: 0,
            schedule: LinearDecay {
                base: hyper.lr,
                total_steps: hyper.max_steps,
            },
            adam: Adam::new(&model.store),
            rng: ChaCha8Rng::seed_from_u64(hyper.seed),
            noise_rng: ChaCha8Rng::seed_from_u64(mix(hyper.seed, 0xD80)),
            cursors: vec![TaskCursor { epoch: 0, pos: 0 }; num_tasks],
            history: Vec::new(),
        }
    }
}

/// One update on one batch: forward, loss scaling, backward, Adam, zeroed
/// gradients.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    batch: &Batch,
    spec: &TaskSpec,
    mask: &SkillMask,
) -> Result<MetricRecord> {
    let mut tape = Tape::new();
    let out = if model.config.dropout > 0.0 {
        model.forward_task_train(&mut tape, batch, spec, mask, &mut state.noise_rng)?
    } else {
        model.forward_task(&mut tape, batch, spec, mask)?
    };
    let raw = tape.value(out.loss).item()?;
    let scaled = scaled_loss(raw, spec.num_classes)?;
    let factor = 1.0 / (spec.num_classes as f64).ln();
    let loss = tape.scale(out.loss, factor);
    let grads = tape.backward(loss)?;
    model.store.zero_grads();
    model.store.accumulate(&grads);
    let lr = state.schedule.lr(state.step);
    state.adam.track_new(&model.store);
    state.adam.step(&mut model.store, lr)?;
    model.store.zero_grads();
    state.step += 1;
    Ok(MetricRecord::Train {
        step: state.step,
        task_id: spec.task_id.clone(),
        raw_loss: raw,
        scaled_loss: scaled,
        lr,
    })
}

/// One task prepared for training.
#[derive(Clone, Debug)]
pub struct TaskSetup {
    pub spec: TaskSpec,
    pub mask: SkillMask,
    pub data: TaskDataset,
}

/// A multitask run: tasks, sampling plan and hyperparameters.
#[derive(Clone, Debug)]
pub struct Multitask {
    pub tasks: Vec<TaskSetup>,
    pub plan: SamplingPlan,
    pub hyper: TrainHyper,
}

impl Multitask {
    /// Pairs every task of `matrix` with its dataset.
    pub fn new(matrix: &SkillMatrix, datasets: &[TaskDataset], hyper: TrainHyper) -> Result<Self> {
        hyper.validate()?;
        let mut tasks = Vec::with_capacity(matrix.tasks().len());
        for spec in matrix.tasks() {
            let data = datasets
                .iter()
                .find(|d| d.task_id == spec.task_id)
                .ok_or_else(|| contract(format!("no dataset for task `{}`", spec.task_id)))?;
            if data.train.is_empty() || data.dev.is_empty() {
                return Err(contract(format!(
                    "task `{}` has an empty split",
                    spec.task_id
                )));
            }
            tasks.push(TaskSetup {
                spec: spec.clone(),
                mask: matrix.active_skill_mask(&spec.task_id)?,
                data: data.clone(),
            });
        }
        Self::from_tasks(tasks, hyper)
    }

    pub fn from_tasks(tasks: Vec<TaskSetup>, hyper: TrainHyper) -> Result<Self> {
        hyper.validate()?;
        let sizes = tasks.iter().map(|t| t.data.train.len()).collect();
        let plan = SamplingPlan::new(sizes, hyper.alpha)?;
        Ok(Self { tasks, plan, hyper })
    }

    pub fn init_state(&self, model: &Model) -> TrainState {
        TrainState::new(model, &self.hyper, self.tasks.len())
    }

    fn next_batch(&self, state: &mut TrainState, task: usize) -> Result<Batch> {
        let setup = &self.tasks[task];
        let n = setup.data.train.len();
        let cursor = &mut state.cursors[task];
        let mut order = epoch_order(n, self.hyper.seed, task, cursor.epoch);
        let mut picked: Vec<&Example> = Vec::with_capacity(self.hyper.batch_size);
        while picked.len() < self.hyper.batch_size {
            if cursor.pos == n {
                cursor.epoch += 1;
                cursor.pos = 0;
                order = epoch_order(n, self.hyper.seed, task, cursor.epoch);
            }
            picked.push(&setup.data.train[order[cursor.pos]]);
            cursor.pos += 1;
        }
        Batch::from_examples(&setup.spec, &picked)
    }

    /// Trains until `state.step == until` (capped at `max_steps`), logging
    /// into `state.history`.
    pub fn run(&self, model: &mut Model, state: &mut TrainState, until: u64) -> Result<()> {
        for setup in &self.tasks {
            model.add_task_head(&setup.spec)?;
        }
        let until = until.min(self.hyper.max_steps);
        while state.step < until {
            let task = sample_task(&self.plan, &mut state.rng);
            let batch = self.next_batch(state, task)?;
            let setup = &self.tasks[task];
            let record = train_step(model, state, &batch, &setup.spec, &setup.mask)?;
            state.history.push(record);
            let every = self.hyper.eval_every;
            if (every > 0 && state.step % every == 0) || state.step == self.hyper.max_steps {
                let evals = self.evaluate(model, state.step)?;
                state.history.extend(evals);
            }
        }
        Ok(())
    }

    /// Dev-set eval records for every task plus a macro-average summary.
    pub fn evaluate(&self, model: &Model, step: u64) -> Result<Vec<MetricRecord>> {
        let mut out = Vec::with_capacity(self.tasks.len() + 1);
        let mut scores = Vec::with_capacity(self.tasks.len());
        for setup in &self.tasks {
            let m = evaluate(model, &setup.spec, &setup.mask, &setup.data.dev, 64)?;
            scores.push(m.primary);
            out.push(MetricRecord::Eval {
                step,
                task_id: m.task_id,
                metric: m.metric,
                score: m.primary,
                exact_match: m.exact_match,
            });
        }
        out.push(MetricRecord::Summary {
            step,
            macro_average: macro_average(&scores),
        });
        Ok(out)
    }
}

/// Full multitask run from a fresh state.
pub fn multitask_train(
    model: &mut Model,
    matrix: &SkillMatrix,
    datasets: &[TaskDataset],
    hyper: &TrainHyper,
) -> Result<TrainState> {
    let run = Multitask::new(matrix, datasets, hyper.clone())?;
    let mut state = run.init_state(model);
    run.run(model, &mut state, hyper.max_steps)?;
    Ok(state)
}

/// Latest eval scores per task from a metrics log, in log order.
pub fn final_scores(history: &[MetricRecord]) -> Vec<(String, f64)> {
    let last = history.iter().rev().find_map(|r| match r {
        MetricRecord::Summary { step, .. } => Some(*step),
        _ => None,
    });
    history
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Eval {
                step,
                task_id,
                score,
                ..
            } if Some(*step) == last => Some((task_id.clone(), *score)),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_examples() {
        let q = sampling_probs(&[10, 20, 70], 0.0).unwrap();
        assert!(q.iter().all(|&x| x == 1.0 / 3.0));
        let q = sampling_probs(&[10, 20, 70], 1.0).unwrap();
        assert!((q[2] - 0.7).abs() < 1e-15);
        assert!(sampling_probs(&[], 1.0).is_err());
        assert!(sampling_probs(&[3, 0], 1.0).is_err());
        assert!(sampling_probs(&[3], -1.0).is_err());
        let plan = SamplingPlan::new(vec![5], 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| sample_task(&plan, &mut rng) == 0));
    }

    #[test]
    fn loss_scaling_examples() {
        assert!((scaled_loss(2f64.ln(), 2).unwrap() - 1.0).abs() < 1e-15);
        assert!((scaled_loss(3f64.ln(), 3).unwrap() - 1.0).abs() < 1e-15);
        assert!(scaled_loss(1.0, 1).is_err());
    }

    #[test]
    fn epoch_orders_are_permutations_and_differ_by_epoch() {
        let a = epoch_order(50, 3, 1, 0);
        let b = epoch_order(50, 3, 1, 1);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(50, 3, 1, 0));
    }

    #[test]
    fn metric_records_use_documented_fields() {
        let r = MetricRecord::Train {
            step: 1,
            task_id: "a".into(),
            raw_loss: 0.5,
            scaled_loss: 0.25,
            lr: 0.1,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"kind":"train","step":1,"task_id":"a","raw_loss":0.5,"scaled_loss":0.25,"lr":0.1}"#
        );
    }
}
