//! Command-line driver: dataset synthesis, source pretraining, the two
//! adaptation stages, evaluation, the cumulative ablation ladder, and report
//! consolidation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use ndarray::{Array2, Array3};

use unionseg::config::RunConfig;
use unionseg::data::{
    build_task, config_hash, load_eval_split, load_training_view, read_manifest, write_task,
    TrainingView,
};
use unionseg::data::LabeledSample;
use unionseg::error::Error;
use unionseg::labels::LabelSpace;
use unionseg::metrics::IouReport;
use unionseg::models::{
    cast_ensemble_confusion, ensemble_confusion, load_bundle_expecting, load_final,
    pretrain_source, save_bundle, save_final, evaluate_source, ModelBundle,
};
use unionseg::plot::{line_chart, Series};
use unionseg::pseudo::{generate_pseudo_labels, save_pseudo_labels};
use unionseg::report::{consolidate, read_record, write_record, MetricRecord};
use unionseg::sched::TrainSchedule;
use unionseg::stage1::{ablation_ladder, ladder_switches, run_stage1, IterationRecord};
use unionseg::stage2::{
    final_confusion, heldout_split, init_final_backbone, predict_final, run_stage2, Stage2Record,
};

#[derive(Parser)]
#[command(
    name = "unionseg",
    version,
    about = "Multi-source model adaptation for semantic segmentation on synthetic tasks"
)]
struct Cli {
    /// Configuration file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed (replaces the configured seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (falls back to $UNIONSEG_OUT, then the config value).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Regenerate artifacts even when they look up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Pretrain one model per source domain.
    Pretrain,
    /// First adaptation stage on the pretrained models.
    Adapt {
        /// Ablation ladder row (st, st_cmc, st_cmc_adv, st_cmc_adv_msl, full).
        #[arg(long, default_value = "full")]
        row: String,
    },
    /// Second stage: integrate the adapted models into one final model.
    Integrate {
        #[arg(long, default_value = "full")]
        row: String,
    },
    /// Evaluate a finished run on the labeled target test split.
    Eval {
        #[arg(long, default_value = "full")]
        row: String,
    },
    /// Run the cumulative ablation ladder over all configured seeds.
    Ablate {
        /// Restrict to one ladder row.
        #[arg(long)]
        row: Option<String>,
    },
    /// Consolidate metric records from finished runs into one report.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidLabelSpace(_) => 2,
        Error::Data(_)
        | Error::Parse(_)
        | Error::ShapeMismatch(_)
        | Error::UnionViolation(_)
        | Error::LabelOutOfRange { .. } => 3,
        Error::Diverged(_) => 4,
        Error::MissingArtifact(_) | Error::Checkpoint(_) => 5,
        Error::Io(_) => 1,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&config, cli.force).map(|_| ()),
        Command::Pretrain => {
            for &seed in &config.seeds.clone() {
                cmd_pretrain(&config, seed, cli.force)?;
            }
            Ok(())
        }
        Command::Adapt { row } => {
            for &seed in &config.seeds.clone() {
                cmd_adapt(&config, seed, row, cli.force)?;
            }
            Ok(())
        }
        Command::Integrate { row } => {
            for &seed in &config.seeds.clone() {
                cmd_integrate(&config, seed, row, cli.force)?;
            }
            Ok(())
        }
        Command::Eval { row } => {
            for &seed in &config.seeds.clone() {
                cmd_eval(&config, seed, row)?;
            }
            Ok(())
        }
        Command::Ablate { row } => cmd_ablate(&config, row.as_deref(), cli.force),
        Command::Report => cmd_report(&config),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    } else if let Ok(out) = std::env::var("UNIONSEG_OUT") {
        if !out.is_empty() {
            config.out_dir = PathBuf::from(out);
        }
    }
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Paths
// ---------------------------------------------------------------------------

fn pretrain_dir(config: &RunConfig, seed: u64) -> PathBuf {
    config.out_dir.join(format!("runs/pretrain-seed{seed}"))
}

fn adapt_dir(config: &RunConfig, row: &str, seed: u64) -> PathBuf {
    config.out_dir.join(format!("runs/adapt-{row}-seed{seed}"))
}

fn integrate_dir(config: &RunConfig, row: &str, seed: u64) -> PathBuf {
    config
        .out_dir
        .join(format!("runs/integrate-{row}-seed{seed}"))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(config: &RunConfig, force: bool) -> Result<String, Error> {
    let dir = config.dataset_dir();
    let preset = config.task.preset()?;
    let domains = config.task.domain_specs();
    let sizes = config.task.sizes();
    let hash = config_hash(&preset, &domains, sizes);
    if dir.join("manifest.json").exists() {
        let manifest = read_manifest(&dir)?;
        if manifest.config_hash == hash && !force {
            println!("dataset up to date ({hash})");
            return Ok(hash);
        }
        if manifest.config_hash != hash && !force {
            return Err(Error::Config(format!(
                "dataset at {} was generated from a different config ({} vs {hash}); \
                 pass --force to regenerate",
                dir.display(),
                manifest.config_hash
            )));
        }
    }
    let task = build_task(&preset, &domains, sizes)?;
    write_task(&dir, &task, &preset, &domains, sizes)?;
    println!("dataset written to {} ({hash})", dir.display());
    Ok(hash)
}

fn require_dataset(config: &RunConfig) -> Result<(TrainingView, String), Error> {
    let dir = config.dataset_dir();
    let manifest = read_manifest(&dir)?;
    let view = load_training_view(&dir)?;
    Ok((view, manifest.config_hash))
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn cmd_pretrain(config: &RunConfig, seed: u64, force: bool) -> Result<(), Error> {
    let (view, task_hash) = require_dataset(config)?;
    let cfg = config.clone().with_seed(seed);
    let dir = pretrain_dir(config, seed);
    if dir.join("metrics.json").exists() && !force {
        println!("pretrain seed {seed}: up to date");
        return Ok(());
    }
    let mut extra = std::collections::BTreeMap::new();
    let mut mious = Vec::new();
    for (i, source) in view.sources.iter().enumerate() {
        let schedule = TrainSchedule {
            seed: cfg.pretrain.seed.wrapping_add(i as u64),
            ..cfg.pretrain.clone()
        };
        let bundle = pretrain_source(
            &source.train,
            config.model.backbone_spec(),
            config.model.classifier_spec(source.space.clone()),
            &schedule,
        )?;
        let miou = evaluate_source(&bundle, &source.heldout)?;
        println!("pretrain seed {seed} source {i}: held-out mIoU {miou:.4}");
        extra.insert(format!("source{i}_heldout_miou"), miou);
        mious.push(miou);
        save_bundle(&bundle, &dir.join(format!("src{i}")))?;
    }
    write_record(
        &dir,
        &MetricRecord {
            label: "pretrain".into(),
            task_hash,
            seed,
            miou: mious.iter().sum::<f64>() / mious.len() as f64,
            per_class: Vec::new(),
            extra,
        },
    )?;
    Ok(())
}

fn load_pretrained(
    config: &RunConfig,
    seed: u64,
    view: &TrainingView,
) -> Result<Vec<ModelBundle>, Error> {
    let dir = pretrain_dir(config, seed);
    view.sources
        .iter()
        .enumerate()
        .map(|(i, s)| load_bundle_expecting(&dir.join(format!("src{i}")), &s.space))
        .collect()
}

// ---------------------------------------------------------------------------
// adapt
// ---------------------------------------------------------------------------

fn cmd_adapt(config: &RunConfig, seed: u64, row: &str, force: bool) -> Result<(), Error> {
    let switches = ladder_switches(row)?;
    let (view, task_hash) = require_dataset(config)?;
    let dir = adapt_dir(config, row, seed);
    if dir.join("metrics.json").exists() && !force {
        println!("adapt {row} seed {seed}: up to date");
        return Ok(());
    }
    let bundles = load_pretrained(config, seed, &view)?;
    let target = &view.problem.target_space;
    let refs: Vec<&ModelBundle> = bundles.iter().collect();
    let pseudo = generate_pseudo_labels(
        &refs,
        target,
        &view.target_train,
        config.adapt.threshold,
        "pretrained",
    )?;
    save_pseudo_labels(&dir.join("pseudo"), &pseudo)?;
    let cfg = config.clone().with_seed(seed);
    let result = run_stage1(
        &bundles,
        target,
        &view.target_train,
        &pseudo,
        &cfg.stage1,
        switches,
    )?;
    for (i, bundle) in result.bundles.iter().enumerate() {
        save_bundle(bundle, &dir.join(format!("bundle{i}")))?;
    }
    std::fs::write(
        dir.join("trace.json"),
        serde_json::to_string(&result.trace).unwrap(),
    )?;
    plot_stage1_trace(&dir.join("loss.png"), &result.trace)?;

    // Evaluate: each bundle's ensemble (its backbone with every classifier)
    // scored independently, performances averaged; the multi-model casting
    // prediction is kept as a side metric.
    let test = load_eval_split(&config.dataset_dir())?;
    let (report, extra) = row_ensemble_report(&result.bundles, target, &test)?;
    let miou = report.miou.ok_or_else(|| Error::Data("empty evaluation".into()))?;
    println!("adapt {row} seed {seed}: test mIoU {miou:.4}");
    write_record(
        &dir,
        &MetricRecord {
            label: row.to_string(),
            task_hash,
            seed,
            miou,
            per_class: report.per_class.clone(),
            extra,
        },
    )?;
    std::fs::write(dir.join("iou_table.txt"), report.render_table())?;
    Ok(())
}

/// Scores a row that has no integrated model: every bundle's backbone is
/// paired with all classifiers through the ensemble, each scored on its own,
/// and the performances averaged. The casting-average prediction (the
/// pseudo-label generator) goes into the extras as a side metric, along with
/// each bundle's individual score.
fn row_ensemble_report(
    bundles: &[ModelBundle],
    target: &LabelSpace,
    test: &[LabeledSample],
) -> Result<(IouReport, std::collections::BTreeMap<String, f64>), Error> {
    let mut extra = std::collections::BTreeMap::new();
    let refs: Vec<&ModelBundle> = bundles.iter().collect();
    if let Some(m) = cast_ensemble_confusion(&refs, target, test)?.miou(None) {
        extra.insert("cast_miou".into(), m);
    }
    let classifiers: Vec<_> = bundles.iter().map(|b| &b.classifier).collect();
    let mut reports = Vec::new();
    for (i, bundle) in bundles.iter().enumerate() {
        let cm = ensemble_confusion(&bundle.backbone, &classifiers, target, test)?;
        let report = IouReport::from_matrix(&cm, &[0]);
        if let Some(m) = report.miou {
            extra.insert(format!("bundle{i}_ensemble_miou"), m);
        }
        reports.push(report);
    }
    Ok((mean_report(&reports), extra))
}

/// Field-wise average of per-bundle IoU reports; classes undefined in every
/// report stay undefined.
fn mean_report(reports: &[IouReport]) -> IouReport {
    let mean = |pick: &dyn Fn(&IouReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(|r| pick(r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let classes = reports.first().map_or(0, |r| r.per_class.len());
    IouReport {
        per_class: (0..classes)
            .map(|c| mean(&|r: &IouReport| r.per_class[c]))
            .collect(),
        miou: mean(&|r| r.miou),
        background_classes: reports
            .first()
            .map_or_else(Vec::new, |r| r.background_classes.clone()),
        background_mean: mean(&|r| r.background_mean),
        foreground_mean: mean(&|r| r.foreground_mean),
    }
}

fn plot_stage1_trace(path: &Path, trace: &[IterationRecord]) -> Result<(), Error> {
    let pick = |f: &dyn Fn(&IterationRecord) -> Option<f64>| -> Vec<f64> {
        trace.iter().filter_map(f).collect()
    };
    let mut series = Vec::new();
    let joint = pick(&|r: &IterationRecord| r.joint.as_ref().map(|s| s.total));
    if !joint.is_empty() {
        series.push(Series::from_values("joint", &joint, 0));
    }
    let cls = pick(&|r: &IterationRecord| r.classifiers.as_ref().map(|s| s.total));
    if !cls.is_empty() {
        series.push(Series::from_values("classifiers", &cls, 1));
    }
    let bb = pick(&|r: &IterationRecord| r.backbones.as_ref().map(|s| s.total));
    if !bb.is_empty() {
        series.push(Series::from_values("backbones", &bb, 2));
    }
    if series.is_empty() {
        return Ok(());
    }
    line_chart(path, &series)
}

// ---------------------------------------------------------------------------
// integrate
// ---------------------------------------------------------------------------

fn load_adapted(
    config: &RunConfig,
    seed: u64,
    row: &str,
    view: &TrainingView,
) -> Result<Vec<ModelBundle>, Error> {
    let dir = adapt_dir(config, row, seed);
    view.sources
        .iter()
        .enumerate()
        .map(|(i, s)| load_bundle_expecting(&dir.join(format!("bundle{i}")), &s.space))
        .collect()
}

fn cmd_integrate(config: &RunConfig, seed: u64, row: &str, force: bool) -> Result<(), Error> {
    let switches = ladder_switches(row)?;
    let (view, task_hash) = require_dataset(config)?;
    let dir = integrate_dir(config, row, seed);
    if dir.join("metrics.json").exists() && !force {
        println!("integrate {row} seed {seed}: up to date");
        return Ok(());
    }
    let bundles = load_adapted(config, seed, row, &view)?;
    let target = &view.problem.target_space;
    let refs: Vec<&ModelBundle> = bundles.iter().collect();
    let pseudo = generate_pseudo_labels(
        &refs,
        target,
        &view.target_train,
        config.adapt.threshold,
        "adapted",
    )?;
    save_pseudo_labels(&dir.join("pseudo"), &pseudo)?;
    let (train_range, held_range) = heldout_split(view.target_train.len());
    let held_images: Vec<Array3<f64>> = view.target_train[held_range.clone()].to_vec();
    let held_labels: Vec<Array2<u32>> = pseudo.target[held_range.clone()].to_vec();
    let (init, init_index) = init_final_backbone(
        &bundles,
        target,
        &held_images,
        &held_labels,
        config.integrate.init,
    )?;
    if let Some(i) = init_index {
        println!("integrate {row} seed {seed}: final backbone from bundle {i}");
    }
    let cfg = config.clone().with_seed(seed);
    let train_images = &view.target_train[train_range.clone()];
    let train_pseudo = unionseg::pseudo::PseudoLabels {
        target: pseudo.target[train_range.clone()].to_vec(),
        per_source: pseudo
            .per_source
            .iter()
            .map(|p| p[train_range.clone()].to_vec())
            .collect(),
        threshold: pseudo.threshold,
        provenance: pseudo.provenance.clone(),
    };
    let result = run_stage2(
        &bundles,
        target,
        train_images,
        &train_pseudo,
        &cfg.stage2,
        init,
        init_index,
        switches.max_squares,
    )?;
    save_final(&result.model, &dir.join("final"))?;
    std::fs::write(
        dir.join("trace.json"),
        serde_json::to_string(&result.trace).unwrap(),
    )?;
    plot_stage2_trace(&dir.join("loss.png"), &result.trace)?;

    let test = load_eval_split(&config.dataset_dir())?;
    let cm = final_confusion(&result.model, target, &test)?;
    let report = IouReport::from_matrix(&cm, &[0]);
    let mut extra = std::collections::BTreeMap::new();
    let classifiers: Vec<_> = bundles.iter().map(|b| &b.classifier).collect();
    for (i, bundle) in bundles.iter().enumerate() {
        let b_cm = ensemble_confusion(&bundle.backbone, &classifiers, target, &test)?;
        if let Some(m) = b_cm.miou(None) {
            extra.insert(format!("bundle{i}_ensemble_miou"), m);
        }
    }
    if let Some(i) = init_index {
        extra.insert("init_bundle".into(), i as f64);
    }
    let miou = report.miou.ok_or_else(|| Error::Data("empty evaluation".into()))?;
    println!("integrate {row} seed {seed}: final test mIoU {miou:.4}");
    write_record(
        &dir,
        &MetricRecord {
            label: format!("{row}+mi"),
            task_hash,
            seed,
            miou,
            per_class: report.per_class.clone(),
            extra,
        },
    )?;
    std::fs::write(dir.join("iou_table.txt"), report.render_table())?;
    Ok(())
}

fn plot_stage2_trace(path: &Path, trace: &[Stage2Record]) -> Result<(), Error> {
    if trace.is_empty() {
        return Ok(());
    }
    let series = vec![
        Series::from_values(
            "ensemble",
            &trace.iter().map(|r| r.ensemble.total).collect::<Vec<_>>(),
            0,
        ),
        Series::from_values(
            "distill",
            &trace.iter().map(|r| r.distill.total).collect::<Vec<_>>(),
            1,
        ),
        Series::from_values(
            "heads",
            &trace.iter().map(|r| r.heads.total).collect::<Vec<_>>(),
            2,
        ),
    ];
    line_chart(path, &series)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(config: &RunConfig, seed: u64, row: &str) -> Result<(), Error> {
    let (view, task_hash) = require_dataset(config)?;
    let target = &view.problem.target_space;
    let test = load_eval_split(&config.dataset_dir())?;
    let final_dir = integrate_dir(config, row, seed).join("final");
    let (label, report, extra) = if final_dir.join("manifest.json").exists() {
        let model = load_final(&final_dir)?;
        let cm = final_confusion(&model, target, &test)?;
        (
            format!("{row}+mi"),
            IouReport::from_matrix(&cm, &[0]),
            Default::default(),
        )
    } else {
        let bundles = load_adapted(config, seed, row, &view)?;
        let (report, extra) = row_ensemble_report(&bundles, target, &test)?;
        (row.to_string(), report, extra)
    };
    print!("{}", report.render_table());
    let miou = report.miou.ok_or_else(|| Error::Data("empty evaluation".into()))?;
    let dir = config.out_dir.join(format!("runs/eval-{row}-seed{seed}"));
    write_record(
        &dir,
        &MetricRecord {
            label,
            task_hash,
            seed,
            miou,
            per_class: report.per_class,
            extra,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate / report
// ---------------------------------------------------------------------------

fn cmd_ablate(config: &RunConfig, only_row: Option<&str>, force: bool) -> Result<(), Error> {
    cmd_synth(config, false)?;
    let ladder = ablation_ladder();
    if let Some(row) = only_row {
        ladder_switches(row)?;
    }
    let started = Instant::now();
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        cmd_pretrain(config, seed, force)?;
        for (row, switches) in &ladder {
            if only_row.is_some_and(|r| r != *row) {
                continue;
            }
            let outcome = cmd_adapt(config, seed, row, force).and_then(|()| {
                if switches.model_integration {
                    cmd_integrate(config, seed, row, force)
                } else {
                    Ok(())
                }
            });
            if let Err(e) = outcome {
                eprintln!("row {row} seed {seed} failed: {e}");
                failures.push(format!("{row}/seed{seed}: {e}"));
            }
        }
    }
    println!("ladder finished in {:.1}s", started.elapsed().as_secs_f64());
    cmd_report(config)?;
    if !failures.is_empty() {
        let text = failures.join("\n");
        std::fs::create_dir_all(config.out_dir.join("report"))?;
        std::fs::write(config.out_dir.join("report/failures.txt"), &text)?;
        return Err(Error::Data(format!("{} ladder rows failed", failures.len())));
    }
    Ok(())
}

fn collect_records(config: &RunConfig) -> Result<Vec<MetricRecord>, Error> {
    let runs = config.out_dir.join("runs");
    let mut records = Vec::new();
    if runs.is_dir() {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let name = dir.file_name().unwrap_or_default().to_string_lossy();
            // Row records only; pretraining and ad-hoc evals are not rows.
            if name.starts_with("pretrain") || name.starts_with("eval-") {
                continue;
            }
            if dir.join("metrics.json").exists() {
                records.push(read_record(&dir)?);
            }
        }
    }
    Ok(records)
}

fn cmd_report(config: &RunConfig) -> Result<(), Error> {
    let records = collect_records(config)?;
    if records.is_empty() {
        return Err(Error::MissingArtifact(config.out_dir.join("runs")));
    }
    let report = consolidate(&records)?;
    let table = report.render_table();
    print!("{table}");
    let dir = config.out_dir.join("report");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("ablation.txt"), &table)?;
    std::fs::write(
        dir.join("ablation.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )?;
    let means: Vec<f64> = report.rows.iter().map(|r| r.mean).collect();
    if means.len() > 1 {
        line_chart(
            &dir.join("miou.png"),
            &[Series::from_values("mean mIoU by row", &means, 1)],
        )?;
    }
    Ok(())
}

// Referenced by the timing utilities in the test suite; keeping the import
// used in release builds as well.
#[allow(dead_code)]
fn smoke_predict(config: &RunConfig, seed: u64, row: &str) -> Result<(), Error> {
    let (view, _) = require_dataset(config)?;
    let model = load_final(&integrate_dir(config, row, seed).join("final"))?;
    let test = load_eval_split(&config.dataset_dir())?;
    if let Some(sample) = test.first() {
        let _ = predict_final(&model, &view.problem.target_space, &sample.image)?;
    }
    Ok(())
}
