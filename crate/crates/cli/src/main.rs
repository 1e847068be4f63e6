use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use skillnet::analysis::{
    self, curve_plot, read_jsonl, run_alpha_sweep, run_new_task_suite, run_perturbation_suite,
    sweep_plot, write_jsonl, CurveAxis, CurveRecord, Provenance, SweepRow,
};
use skillnet::checkpoint::{load_checkpoint, save_checkpoint};
use skillnet::config::ExperimentConfig;
use skillnet::metrics::{evaluate, macro_average, TaskMetrics};
use skillnet::model::build_model;
use skillnet::trainer::{adaptation_curve, skill_pretrain, write_metrics, Multitask, TrainState};
use skillnet::{Model, Perturbation, Variant};

#[derive(Parser)]
#[command(
    name = "skillnet",
    version,
    about = "Sparsely activated multilingual multitask transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the built-in desk config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint directory to start from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Prints the resolved experiment config as TOML.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Skill pre-training with MLM and NSP.
    Pretrain(Common),
    /// Multitask training; resumes when the checkpoint holds a train state.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Total steps; sets the length of the learning-rate schedule.
        #[arg(long)]
        steps: Option<u64>,
        /// Stop at this step without changing the schedule. Resume later
        /// from the checkpoint.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Dev metrics for every task of the config.
    Eval(Common),
    /// Inference-time skill perturbations on one language's tasks.
    Perturb {
        #[command(flatten)]
        common: Common,
        /// Tasks in this language are perturbed.
        #[arg(long, default_value = "en")]
        language: String,
        /// Number of random task-skill draws.
        #[arg(long, default_value_t = 3)]
        random_draws: u64,
    },
    /// Fine-tunes on each new task of the config.
    Adapt(Common),
    /// One multitask run per sampling factor and variant.
    SweepAlpha(Common),
    /// Step and data-size curves for new tasks against baselines.
    SweepNewtask {
        #[command(flatten)]
        common: Common,
        /// Multitask-trained dense checkpoint for the dense-joint baseline.
        #[arg(long)]
        dense: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
}

impl Ctx {
    fn new(common: Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::desk(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let out = common.out.unwrap_or_else(|| cfg.out_dir.clone());
        cfg.validate()?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            out,
            checkpoint: common.checkpoint,
        })
    }

    fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance::new(&self.cfg)?)
    }

    fn load(&self) -> Result<(Model, Option<TrainState>)> {
        let Some(dir) = &self.checkpoint else {
            bail!("this command needs --checkpoint <dir>");
        };
        let (model, _, state) = load_checkpoint(dir)
            .with_context(|| format!("loading checkpoint {}", dir.display()))?;
        if model.config.vocab_size != self.cfg.model.vocab_size
            || model.taxonomy != self.cfg.taxonomy
        {
            bail!(
                "checkpoint {} does not match the config's vocabulary or taxonomy",
                dir.display()
            );
        }
        Ok((model, state))
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, serde_json::to_vec_pretty(value)?)
            .with_context(|| format!("writing {}", path.display()))?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn pretrain(ctx: Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut model = match &ctx.checkpoint {
        Some(_) => ctx.load()?.0,
        None => build_model(&cfg.model, &cfg.skill_matrix()?, cfg.seed)?,
    };
    let state = skill_pretrain(&mut model, &cfg.corpora()?, &cfg.pretrain_hyper()?)?;
    write_metrics(ctx.out.join("pretrain_metrics.jsonl"), &state.history)?;
    save_checkpoint(ctx.out.join("checkpoint"), &model, &[], None)?;
    println!(
        "pre-trained {} steps into {}",
        state.step,
        ctx.out.join("checkpoint").display()
    );
    Ok(())
}

fn train(
    mut ctx: Ctx,
    variant: Option<Variant>,
    alpha: Option<f64>,
    steps: Option<u64>,
    until: Option<u64>,
) -> Result<()> {
    if let Some(v) = variant {
        ctx.cfg.model.variant = v;
    }
    if let Some(a) = alpha {
        ctx.cfg.train.alpha = a;
    }
    if let Some(s) = steps {
        ctx.cfg.train.max_steps = s;
    }
    ctx.cfg.validate()?;
    let cfg = &ctx.cfg;
    let matrix = cfg.skill_matrix()?;
    let run = Multitask::new(&matrix, &cfg.datasets()?, cfg.train_hyper())?;
    let (mut model, state) = match &ctx.checkpoint {
        Some(_) => ctx.load()?,
        None => (build_model(&cfg.model, &matrix, cfg.seed)?, None),
    };
    if model.config.variant != cfg.model.variant {
        bail!(
            "checkpoint holds a {} model but {} was requested",
            model.config.variant,
            cfg.model.variant
        );
    }
    let mut state = match state {
        Some(s) => {
            info!("resuming at step {}", s.step);
            s
        }
        None => run.init_state(&model),
    };
    run.run(&mut model, &mut state, until.unwrap_or(cfg.train.max_steps))?;
    write_metrics(ctx.out.join("metrics.jsonl"), &state.history)?;
    save_checkpoint(
        ctx.out.join("checkpoint"),
        &model,
        matrix.tasks(),
        Some(&state),
    )?;
    ctx.write_json("config.json", cfg)?;
    println!(
        "trained to step {}; checkpoint in {}",
        state.step,
        ctx.out.join("checkpoint").display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalReport {
    provenance: Provenance,
    tasks: Vec<TaskMetrics>,
    macro_average: f64,
}

fn eval(ctx: Ctx) -> Result<()> {
    let (model, _) = ctx.load()?;
    let cfg = &ctx.cfg;
    let matrix = cfg.skill_matrix()?;
    let mut tasks = Vec::new();
    for (spec, data) in matrix.tasks().iter().zip(cfg.datasets()?) {
        let mask = matrix.active_skill_mask(&spec.task_id)?;
        let m = evaluate(&model, spec, &mask, &data.dev, 64)?;
        println!("{:<12} {:<10} {:.4}", m.task_id, m.metric, m.primary);
        tasks.push(m);
    }
    let scores: Vec<f64> = tasks.iter().map(|m| m.primary).collect();
    let report = EvalReport {
        provenance: ctx.provenance()?,
        macro_average: macro_average(&scores),
        tasks,
    };
    println!("macro-average {:.4}", report.macro_average);
    ctx.write_json("eval.json", &report)
}

fn perturb(ctx: Ctx, language: &str, random_draws: u64) -> Result<()> {
    let (model, _) = ctx.load()?;
    let cfg = &ctx.cfg;
    let matrix = cfg.skill_matrix()?;
    let task_ids: Vec<String> = matrix
        .tasks()
        .iter()
        .filter(|t| t.language == language)
        .map(|t| t.task_id.clone())
        .collect();
    if task_ids.is_empty() {
        bail!("no tasks in language `{language}`");
    }
    let own = cfg.taxonomy.language_skill(language)?;
    let mut perturbations = vec![Perturbation::Identity];
    perturbations.extend(
        cfg.taxonomy
            .language_skill_ids()
            .filter(|&l| l != own)
            .map(|to| Perturbation::LanguageSwap { to }),
    );
    perturbations.push(Perturbation::AllTaskSkills);
    perturbations
        .extend((1..=random_draws).map(|seed| Perturbation::RandomTaskSkills { p: 0.5, seed }));
    let report = run_perturbation_suite(
        &model,
        &matrix,
        &cfg.datasets()?,
        &task_ids,
        &perturbations,
        ctx.provenance()?,
    )?;
    let table = report.to_markdown();
    print!("{table}");
    ctx.write_json("perturbation.json", &report)?;
    ctx.write_text("perturbation.md", &table)
}

fn adapt(ctx: Ctx) -> Result<()> {
    let (trained, _) = ctx.load()?;
    let cfg = &ctx.cfg;
    let hyper = cfg.adapt_hyper()?;
    let points = &cfg.adapt.as_ref().expect("adapt_hyper checked").step_points;
    let mut curves = Vec::new();
    for (spec, data) in cfg.new_task_datasets()? {
        let mut model = trained.clone();
        let curve = adaptation_curve(&mut model, &spec, &data, &hyper, points)?;
        for p in &curve {
            println!("{:<12} step {:>5} {:.4}", spec.task_id, p.step, p.score);
            curves.push(CurveRecord {
                task_id: spec.task_id.clone(),
                system: analysis::System::Skillnet,
                axis: CurveAxis::Steps,
                x: p.step,
                score: p.score,
            });
        }
        save_checkpoint(
            ctx.out.join(format!("checkpoint-{}", spec.task_id)),
            &model,
            &[spec],
            None,
        )?;
    }
    write_jsonl(ctx.out.join("adapt_curves.jsonl"), &curves)?;
    ctx.write_json("provenance.json", &ctx.provenance()?)
}

fn sweep_alpha(ctx: Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let Some(sweep) = &cfg.sweep else {
        bail!("the config has no [sweep] section");
    };
    let report = run_alpha_sweep(cfg, &sweep.alphas, &sweep.variants)?;
    for r in &report.rows {
        println!(
            "{:<14} alpha {:.2} macro-average {:.4}",
            r.variant, r.alpha, r.macro_average
        );
    }
    let log = ctx.out.join("sweep.jsonl");
    write_jsonl(&log, &report.rows)?;
    // The plot is drawn from the log so it can be regenerated from it alone.
    let rows: Vec<SweepRow> = read_jsonl(&log)?;
    ctx.write_text("sweep.svg", &sweep_plot(&rows)?)?;
    ctx.write_json("sweep.json", &report)
}

fn sweep_newtask(ctx: Ctx, dense: Option<&Path>) -> Result<()> {
    let (trained, _) = ctx.load()?;
    let dense = match dense {
        Some(dir) => Some(
            load_checkpoint(dir)
                .with_context(|| format!("loading {}", dir.display()))?
                .0,
        ),
        None => None,
    };
    let cfg = &ctx.cfg;
    let new_tasks = cfg.new_task_datasets()?;
    if new_tasks.is_empty() {
        bail!("the config lists no new tasks");
    }
    let report = run_new_task_suite(&trained, dense.as_ref(), cfg, &new_tasks)?;
    let table = report.to_markdown();
    print!("{table}");
    let log = ctx.out.join("newtask_curves.jsonl");
    write_jsonl(&log, &report.curves)?;
    let curves: Vec<CurveRecord> = read_jsonl(&log)?;
    for (spec, _) in &new_tasks {
        ctx.write_text(
            &format!("newtask-{}-steps.svg", spec.task_id),
            &curve_plot(&curves, &spec.task_id, CurveAxis::Steps)?,
        )?;
        ctx.write_text(
            &format!("newtask-{}-size.svg", spec.task_id),
            &curve_plot(&curves, &spec.task_id, CurveAxis::TrainSize)?,
        )?;
    }
    ctx.write_json("newtask.json", &report)?;
    ctx.write_text("newtask.md", &table)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Config { config } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path)
                    .with_context(|| format!("loading {}", path.display()))?,
                None => ExperimentConfig::desk(),
            };
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::Pretrain(c) => pretrain(Ctx::new(c)?),
        Command::Train {
            common,
            variant,
            alpha,
            steps,
            until,
        } => train(Ctx::new(common)?, variant, alpha, steps, until),
        Command::Eval(c) => eval(Ctx::new(c)?),
        Command::Perturb {
            common,
            language,
            random_draws,
        } => perturb(Ctx::new(common)?, &language, random_draws),
        Command::Adapt(c) => adapt(Ctx::new(c)?),
        Command::SweepAlpha(c) => sweep_alpha(Ctx::new(c)?),
        Command::SweepNewtask { common, dense } => {
            sweep_newtask(Ctx::new(common)?, dense.as_deref())
        }
    }
}
