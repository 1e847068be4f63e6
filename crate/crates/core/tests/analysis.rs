use skillnet::analysis::{
    curve_plot, read_jsonl, run_alpha_sweep, run_new_task_suite, run_perturbation_suite,
    sweep_plot, write_jsonl, CurveAxis, Provenance, SweepRow, System,
};
use skillnet::config::ExperimentConfig;
use skillnet::model::build_model;
use skillnet::trainer::multitask_train;
use skillnet::{Perturbation, SkillId, Variant};

/// The desk experiment shrunk until a full pipeline takes well under a second.
fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.model.layers = 1;
    cfg.model.hidden = 8;
    cfg.model.intermediate = 16;
    cfg.model.heads = 2;
    cfg.model.num_experts = 4;
    for t in &mut cfg.tasks {
        t.train_size = 30;
        t.dev_size = 12;
    }
    cfg.train.batch_size = 4;
    cfg.train.max_steps = 6;
    cfg.train.eval_every = 0;
    let adapt = cfg.adapt.as_mut().unwrap();
    adapt.step_points = vec![2, 4];
    adapt.train_sizes = vec![10, 0];
    adapt.batch_size = 4;
    for t in &mut adapt.new_tasks {
        t.train_size = 30;
        t.dev_size = 12;
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn sweep_emits_one_row_per_variant_and_alpha_and_reruns_identically() {
    let cfg = tiny_experiment();
    let sweep = cfg.sweep.clone().unwrap();
    let a = run_alpha_sweep(&cfg, &sweep.alphas, &sweep.variants).unwrap();
    assert_eq!(a.rows.len(), 5 * 2);
    for v in &sweep.variants {
        let alphas: Vec<f64> = a
            .rows
            .iter()
            .filter(|r| r.variant == *v)
            .map(|r| r.alpha)
            .collect();
        assert_eq!(alphas, sweep.alphas);
    }
    for r in &a.rows {
        assert_eq!(r.scores.len(), cfg.tasks.len());
        assert!((0.0..=1.0).contains(&r.macro_average));
    }
    let b = run_alpha_sweep(&cfg, &sweep.alphas, &sweep.variants).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.macro_average.to_bits(), y.macro_average.to_bits());
    }
}

#[test]
fn plots_regenerate_byte_identical_from_jsonl() {
    let cfg = tiny_experiment();
    let report = run_alpha_sweep(&cfg, &[0.2, 1.0], &[Variant::SkillFfn]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.jsonl");
    write_jsonl(&path, &report.rows).unwrap();
    let back: Vec<SweepRow> = read_jsonl(&path).unwrap();
    assert_eq!(back, report.rows);
    let svg = sweep_plot(&report.rows).unwrap();
    assert_eq!(svg, sweep_plot(&back).unwrap());
    assert!(svg.starts_with("<svg") && svg.contains("skill-ffn"));
}

#[test]
fn perturbation_report_covers_every_task_and_perturbation() {
    let cfg = tiny_experiment();
    let matrix = cfg.skill_matrix().unwrap();
    let datasets = cfg.datasets().unwrap();
    let mut model = build_model(&cfg.model, &matrix, cfg.seed).unwrap();
    multitask_train(&mut model, &matrix, &datasets, &cfg.train_hyper()).unwrap();
    let before = model.store.clone();

    let tasks: Vec<String> = matrix
        .tasks()
        .iter()
        .filter(|t| t.language == "en")
        .map(|t| t.task_id.clone())
        .collect();
    assert_eq!(tasks.len(), 5);
    let perturbations = [
        Perturbation::Identity,
        Perturbation::LanguageSwap {
            to: SkillId::language(2),
        },
        Perturbation::AllTaskSkills,
        Perturbation::RandomTaskSkills { p: 0.5, seed: 1 },
        Perturbation::RandomTaskSkills { p: 0.5, seed: 2 },
    ];
    let provenance = Provenance::new(&cfg).unwrap();
    let report = run_perturbation_suite(
        &model,
        &matrix,
        &datasets,
        &tasks,
        &perturbations,
        provenance,
    )
    .unwrap();
    assert_eq!(report.cells.len(), tasks.len() * perturbations.len());
    assert_eq!(report.summary.len(), perturbations.len());
    assert_eq!(report.sampled_masks.len(), 2 * tasks.len());
    let identity = report.summary_for("identity").unwrap();
    assert_eq!(identity.delta, 0.0);
    assert!(report.summary_for("swap->zh").is_some());
    assert!(
        model.store.bitwise_eq(&before),
        "perturbations must not touch the weights"
    );
    let md = report.to_markdown();
    for t in &tasks {
        assert!(md.contains(t.as_str()));
    }
}

#[test]
fn new_task_suite_reports_each_system_on_both_axes() {
    let cfg = tiny_experiment();
    let matrix = cfg.skill_matrix().unwrap();
    let datasets = cfg.datasets().unwrap();
    let mut model = build_model(&cfg.model, &matrix, cfg.seed).unwrap();
    multitask_train(&mut model, &matrix, &datasets, &cfg.train_hyper()).unwrap();
    let new_tasks = cfg.new_task_datasets().unwrap();
    let report = run_new_task_suite(&model, None, &cfg, &new_tasks).unwrap();
    assert_eq!(report.table.len(), 2 * new_tasks.len());
    for (spec, data) in &new_tasks {
        for system in [System::Skillnet, System::Scratch] {
            let steps: Vec<u64> = report
                .curves
                .iter()
                .filter(|c| {
                    c.task_id == spec.task_id && c.system == system && c.axis == CurveAxis::Steps
                })
                .map(|c| c.x)
                .collect();
            assert_eq!(steps, vec![2, 4]);
            let sizes: Vec<u64> = report
                .curves
                .iter()
                .filter(|c| {
                    c.task_id == spec.task_id
                        && c.system == system
                        && c.axis == CurveAxis::TrainSize
                })
                .map(|c| c.x)
                .collect();
            assert_eq!(sizes, vec![10, data.train.len() as u64]);
        }
        assert!(curve_plot(&report.curves, &spec.task_id, CurveAxis::Steps).is_ok());
    }
    let again = run_new_task_suite(&model, None, &cfg, &new_tasks).unwrap();
    assert_eq!(report.curves, again.curves);
}
