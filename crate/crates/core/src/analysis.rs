//! Experiment drivers: skill perturbation, the sampling-factor sweep and the
//! new-task suite. Every report carries the config hash and code version.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::TaskDataset;
use crate::error::{contract, Error, Result};
use crate::metrics::{evaluate, macro_average};
use crate::model::{build_model, Model, Variant};
use crate::plot::{line_plot, Series};
use crate::skills::{Perturbation, SkillId, SkillMask, SkillMatrix, TaskSpec};
use crate::trainer::{
    adaptation_curve, final_scores, multitask_train, AdaptHyper, CurvePoint, TrainHyper,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
}

impl Provenance {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            config_hash: cfg.hash()?,
            code_version: CODE_VERSION.to_string(),
        })
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn dataset_for<'a>(datasets: &'a [TaskDataset], task_id: &str) -> Result<&'a TaskDataset> {
    datasets
        .iter()
        .find(|d| d.task_id == task_id)
        .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
}

// ---------------------------------------------------------------------------
// Skill perturbation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCell {
    pub task_id: String,
    pub perturbation: String,
    pub score: f64,
    /// Score minus the unperturbed score.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSummary {
    pub perturbation: String,
    pub macro_average: f64,
    pub delta: f64,
}

/// Skills a random perturbation activated for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledMask {
    pub perturbation: String,
    pub task_id: String,
    pub skills: Vec<SkillId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub provenance: Provenance,
    pub tasks: Vec<String>,
    pub baseline: Vec<f64>,
    pub baseline_average: f64,
    pub cells: Vec<PerturbationCell>,
    pub summary: Vec<PerturbationSummary>,
    pub sampled_masks: Vec<SampledMask>,
}

impl PerturbationReport {
    pub fn summary_for(&self, perturbation: &str) -> Option<&PerturbationSummary> {
        self.summary.iter().find(|s| s.perturbation == perturbation)
    }

    /// Rows are perturbations, columns are tasks plus the macro-average.
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "config {} / version {}\n\n| | {} | Avg. |\n|---|{}---|\n",
            self.provenance.config_hash,
            self.provenance.code_version,
            self.tasks.join(" | "),
            "---|".repeat(self.tasks.len())
        );
        let base: Vec<String> = self
            .baseline
            .iter()
            .map(|v| format!("{:.1}", 100.0 * v))
            .collect();
        s.push_str(&format!(
            "| unperturbed | {} | {:.1} |\n",
            base.join(" | "),
            100.0 * self.baseline_average
        ));
        for sum in &self.summary {
            let row: Vec<String> = self
                .cells
                .iter()
                .filter(|c| c.perturbation == sum.perturbation)
                .map(|c| format!("{:.1}", 100.0 * c.score))
                .collect();
            s.push_str(&format!(
                "| {} | {} | {:.1} ({:+.1}) |\n",
                sum.perturbation,
                row.join(" | "),
                100.0 * sum.macro_average,
                100.0 * sum.delta
            ));
        }
        if !self.sampled_masks.is_empty() {
            s.push_str("\n| perturbation | task | activated skills |\n|---|---|---|\n");
            for m in &self.sampled_masks {
                let skills: Vec<String> = m.skills.iter().map(|k| k.to_string()).collect();
                s.push_str(&format!(
                    "| {} | {} | {} |\n",
                    m.perturbation,
                    m.task_id,
                    skills.join(", ")
                ));
            }
        }
        s
    }
}

/// Evaluates every task's dev split under each perturbed mask. Masks change
/// at inference only; the model is not modified.
pub fn run_perturbation_suite(
    model: &Model,
    matrix: &SkillMatrix,
    datasets: &[TaskDataset],
    task_ids: &[String],
    perturbations: &[Perturbation],
    provenance: Provenance,
) -> Result<PerturbationReport> {
    if task_ids.is_empty() {
        return Err(contract("perturbation suite needs at least one task"));
    }
    let score = |task_id: &str, mask: &SkillMask| -> Result<f64> {
        let spec = matrix.spec(task_id)?;
        let data = dataset_for(datasets, task_id)?;
        Ok(evaluate(model, spec, mask, &data.dev, EVAL_BATCH)?.primary)
    };
    let mut baseline = Vec::with_capacity(task_ids.len());
    for id in task_ids {
        baseline.push(score(id, &matrix.active_skill_mask(id)?)?);
    }
    let baseline_average = macro_average(&baseline);
    let taxonomy = matrix.taxonomy();
    let mut cells = Vec::new();
    let mut summary = Vec::new();
    let mut sampled_masks = Vec::new();
    for p in perturbations {
        let label = p.label(taxonomy);
        let mut scores = Vec::with_capacity(task_ids.len());
        for (id, base) in task_ids.iter().zip(&baseline) {
            let mask = matrix.perturbed_mask(id, p)?;
            if matches!(p, Perturbation::RandomTaskSkills { .. }) {
                sampled_masks.push(SampledMask {
                    perturbation: label.clone(),
                    task_id: id.clone(),
                    skills: mask.active_task_skills(),
                });
            }
            let s = score(id, &mask)?;
            scores.push(s);
            cells.push(PerturbationCell {
                task_id: id.clone(),
                perturbation: label.clone(),
                score: s,
                delta: s - base,
            });
        }
        let avg = macro_average(&scores);
        summary.push(PerturbationSummary {
            perturbation: label,
            macro_average: avg,
            delta: avg - baseline_average,
        });
    }
    Ok(PerturbationReport {
        provenance,
        tasks: task_ids.to_vec(),
        baseline,
        baseline_average,
        cells,
        summary,
        sampled_masks,
    })
}

// ---------------------------------------------------------------------------
// Sampling-factor sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub alpha: f64,
    pub macro_average: f64,
    pub scores: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub provenance: Provenance,
    pub rows: Vec<SweepRow>,
}

/// Trains one model per (variant, α) with the config's seed and records the
/// final dev macro-average.
pub fn run_alpha_sweep(
    cfg: &ExperimentConfig,
    alphas: &[f64],
    variants: &[Variant],
) -> Result<SweepReport> {
    if alphas.is_empty() || variants.is_empty() {
        return Err(contract("alpha sweep needs alphas and variants"));
    }
    cfg.validate()?;
    let matrix = cfg.skill_matrix()?;
    let datasets = cfg.datasets()?;
    let mut rows = Vec::with_capacity(alphas.len() * variants.len());
    for &variant in variants {
        for &alpha in alphas {
            let mut model_cfg = cfg.model.clone();
            model_cfg.variant = variant;
            let mut model = build_model(&model_cfg, &matrix, cfg.seed)?;
            let hyper = TrainHyper {
                alpha,
                ..cfg.train_hyper()
            };
            log::info!("sweep cell {variant} alpha={alpha}");
            let state = multitask_train(&mut model, &matrix, &datasets, &hyper)?;
            let scores = final_scores(&state.history);
            let values: Vec<f64> = scores.iter().map(|s| s.1).collect();
            rows.push(SweepRow {
                variant,
                alpha,
                macro_average: macro_average(&values),
                scores,
            });
        }
    }
    Ok(SweepReport {
        provenance: Provenance::new(cfg)?,
        rows,
    })
}

/// Macro-average against α, one line per variant.
pub fn sweep_plot(rows: &[SweepRow]) -> Result<String> {
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let label = r.variant.name();
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((r.alpha, r.macro_average)),
            None => series.push(Series {
                label: label.to_string(),
                points: vec![(r.alpha, r.macro_average)],
            }),
        }
    }
    line_plot(
        "Average dev score by sampling factor",
        "alpha",
        "macro-average",
        &series,
    )
}

// ---------------------------------------------------------------------------
// New tasks

/// Starting point of an adaptation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    /// The multitask-trained sparse model.
    Skillnet,
    /// Same architecture from its initialization.
    Scratch,
    /// A multitask-trained dense model.
    DenseJoint,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Skillnet => "skillnet",
            System::Scratch => "scratch",
            System::DenseJoint => "dense-joint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveAxis {
    Steps,
    TrainSize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub task_id: String,
    pub system: System,
    pub axis: CurveAxis,
    pub x: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewTaskRow {
    pub task_id: String,
    pub system: System,
    /// Dev score with all training data at the largest step budget.
    pub score: f64,
    /// First step point at which the dev score reached the threshold.
    pub steps_to_threshold: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewTaskReport {
    pub provenance: Provenance,
    pub threshold: f64,
    pub curves: Vec<CurveRecord>,
    pub table: Vec<NewTaskRow>,
}

impl NewTaskReport {
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "config {} / version {}\n\n| task | system | score | steps to {:.2} |\n|---|---|---|---|\n",
            self.provenance.config_hash, self.provenance.code_version, self.threshold
        );
        for r in &self.table {
            let steps = r
                .steps_to_threshold
                .map_or("never".to_string(), |v| v.to_string());
            s.push_str(&format!(
                "| {} | {} | {:.1} | {} |\n",
                r.task_id,
                r.system.name(),
                100.0 * r.score,
                steps
            ));
        }
        s
    }
}

/// First curve point whose score is at least `threshold`.
pub fn steps_to_threshold(curve: &[CurvePoint], threshold: f64) -> Option<u64> {
    curve.iter().find(|p| p.score >= threshold).map(|p| p.step)
}

/// Adapts `start` (a copy) and returns the step curve on all data.
pub fn adapt_copy(
    start: &Model,
    spec: &TaskSpec,
    dataset: &TaskDataset,
    hyper: &AdaptHyper,
    points: &[u64],
) -> Result<Vec<CurvePoint>> {
    let mut model = start.clone();
    adaptation_curve(&mut model, spec, dataset, hyper, points)
}

/// Same architecture as `trained`, freshly initialized with `seed`.
pub fn scratch_model(trained: &Model, seed: u64) -> Result<Model> {
    Model::new(&trained.config, &trained.taxonomy, &[], seed)
}

/// Step and data-size curves for each new task, starting from the trained
/// sparse model, from scratch, and from `dense` when given.
pub fn run_new_task_suite(
    trained: &Model,
    dense: Option<&Model>,
    cfg: &ExperimentConfig,
    new_tasks: &[(TaskSpec, TaskDataset)],
) -> Result<NewTaskReport> {
    let adapt = cfg
        .adapt
        .as_ref()
        .ok_or_else(|| Error::Config("no [adapt] section".into()))?;
    let hyper = cfg.adapt_hyper()?;
    let points = &adapt.step_points;
    let last = *points.last().expect("validated nonempty");
    let scratch = scratch_model(trained, cfg.seed)?;
    let mut systems = vec![(System::Skillnet, trained), (System::Scratch, &scratch)];
    if let Some(d) = dense {
        systems.push((System::DenseJoint, d));
    }
    let mut curves = Vec::new();
    let mut table = Vec::new();
    for (spec, data) in new_tasks {
        for &(system, start) in &systems {
            log::info!("new task `{}` from {}", spec.task_id, system.name());
            let full = adapt_copy(start, spec, data, &hyper, points)?;
            for p in &full {
                curves.push(CurveRecord {
                    task_id: spec.task_id.clone(),
                    system,
                    axis: CurveAxis::Steps,
                    x: p.step,
                    score: p.score,
                });
            }
            let final_score = full.last().expect("nonempty curve").score;
            for &size in &adapt.train_sizes {
                let n = if size == 0 {
                    data.train.len()
                } else {
                    size.min(data.train.len())
                };
                let score = if n == data.train.len() {
                    final_score
                } else {
                    let subset = data.with_train_size(n);
                    adapt_copy(start, spec, &subset, &hyper, &[last])?[0].score
                };
                curves.push(CurveRecord {
                    task_id: spec.task_id.clone(),
                    system,
                    axis: CurveAxis::TrainSize,
                    x: n as u64,
                    score,
                });
            }
            table.push(NewTaskRow {
                task_id: spec.task_id.clone(),
                system,
                score: final_score,
                steps_to_threshold: steps_to_threshold(&full, adapt.threshold),
            });
        }
    }
    Ok(NewTaskReport {
        provenance: Provenance::new(cfg)?,
        threshold: adapt.threshold,
        curves,
        table,
    })
}

/// One line per system for `task_id` along `axis`.
pub fn curve_plot(curves: &[CurveRecord], task_id: &str, axis: CurveAxis) -> Result<String> {
    let mut series: Vec<Series> = Vec::new();
    for c in curves
        .iter()
        .filter(|c| c.task_id == task_id && c.axis == axis)
    {
        let label = c.system.name();
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((c.x as f64, c.score)),
            None => series.push(Series {
                label: label.to_string(),
                points: vec![(c.x as f64, c.score)],
            }),
        }
    }
    let x_label = match axis {
        CurveAxis::Steps => "fine-tuning steps",
        CurveAxis::TrainSize => "training examples",
    };
    line_plot(
        &format!("New task {task_id}"),
        x_label,
        "dev score",
        &series,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_crossing_is_first_point_at_or_above() {
        let c = [
            CurvePoint {
                step: 100,
                score: 0.5,
            },
            CurvePoint {
                step: 200,
                score: 0.9,
            },
            CurvePoint {
                step: 300,
                score: 0.8,
            },
        ];
        assert_eq!(steps_to_threshold(&c, 0.9), Some(200));
        assert_eq!(steps_to_threshold(&c, 0.95), None);
    }

    #[test]
    fn sweep_plot_groups_by_variant() {
        let row = |variant, alpha, m| SweepRow {
            variant,
            alpha,
            macro_average: m,
            scores: vec![],
        };
        let rows = [
            row(Variant::SkillFfn, 0.2, 0.5),
            row(Variant::SkillFfn, 0.4, 0.6),
            row(Variant::SkillFfnMha, 0.2, 0.55),
        ];
        let svg = sweep_plot(&rows).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
