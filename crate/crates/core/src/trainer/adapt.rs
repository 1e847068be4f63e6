//! Fine-tuning on an unseen task by composing existing skills.

use serde::{Deserialize, Serialize};

use super::{Multitask, TaskSetup, TrainHyper, TrainState};
use crate::data::TaskDataset;
use crate::error::{contract, Error, Result};
use crate::metrics::evaluate;
use crate::model::Model;
use crate::skills::{SkillMask, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
}

impl AdaptHyper {
    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            alpha: 1.0,
            lr: self.lr,
            batch_size: self.batch_size,
            max_steps: self.steps,
            seed: self.seed,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub score: f64,
}

fn setup(
    model: &mut Model,
    spec: &TaskSpec,
    dataset: &TaskDataset,
    hyper: &AdaptHyper,
) -> Result<Multitask> {
    for s in &spec.skills {
        if !model.taxonomy.contains(*s) {
            return Err(Error::Skill(format!(
                "task `{}` uses skill {s}, which the trained model does not have",
                spec.task_id
            )));
        }
    }
    spec.validate(&model.taxonomy)?;
    if dataset.task_id != spec.task_id {
        return Err(contract(format!(
            "dataset `{}` given for task `{}`",
            dataset.task_id, spec.task_id
        )));
    }
    let mask = SkillMask::from_skills(&model.taxonomy, spec.skills.iter().copied())?;
    model.add_task_head(spec)?;
    Multitask::from_tasks(
        vec![TaskSetup {
            spec: spec.clone(),
            mask,
            data: dataset.clone(),
        }],
        hyper.train_hyper(),
    )
}

/// Fine-tunes every parameter on the new task alone under its skill mask.
pub fn adapt_new_task(
    model: &mut Model,
    spec: &TaskSpec,
    dataset: &TaskDataset,
    hyper: &AdaptHyper,
) -> Result<TrainState> {
    let run = setup(model, spec, dataset, hyper)?;
    let mut state = run.init_state(model);
    run.run(model, &mut state, hyper.steps)?;
    Ok(state)
}

/// Dev score of the new task after each step count in `points` within a
/// single run of `hyper.steps` updates.
pub fn adaptation_curve(
    model: &mut Model,
    spec: &TaskSpec,
    dataset: &TaskDataset,
    hyper: &AdaptHyper,
    points: &[u64],
) -> Result<Vec<CurvePoint>> {
    let run = setup(model, spec, dataset, hyper)?;
    let mut state = run.init_state(model);
    let task = &run.tasks[0];
    let mut curve = Vec::with_capacity(points.len());
    for &p in points {
        if p > hyper.steps || p < state.step {
            return Err(contract(format!(
                "curve point {p} outside the ascending range 0..={}",
                hyper.steps
            )));
        }
        run.run(model, &mut state, p)?;
        let m = evaluate(model, &task.spec, &task.mask, &task.data.dev, 64)?;
        curve.push(CurvePoint {
            step: p,
            score: m.primary,
        });
    }
    Ok(curve)
}
