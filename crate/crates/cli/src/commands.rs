use std::path::{Path, PathBuf};
use std::time::Instant;

use pvrf_core::config::ExperimentConfig;
use pvrf_core::fusion::FusionVariant;
use pvrf_core::io::write_json;
use pvrf_core::synth::{dataset_files, load_dataset, make_dataset, save_dataset, DatasetSplit};
use pvrf_core::tensor::OpKind;
use pvrf_core::train::{
    evaluate, prepare_samples, pretrain_unimodal, run_ablation, run_robustness, train_fusion, write_ablation_csv,
    write_pr_curve_csv, write_robustness_csv, Branch, EvalReport, Model, ModelKind, PreparedSample, TrainLog,
};
use pvrf_core::verify::{run_verify, VerifyOptions};
use serde_json::json;

use crate::{Cli, Command, Failure, Mode};

type Outcome<T = ()> = Result<T, Failure>;

const SEED_ENV: &str = "PVRF_SEED";

pub fn run(cli: &Cli) -> Outcome {
    if let Command::Verify { sign_flip } = &cli.command {
        return verify(sign_flip.as_deref());
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { force } => gen_data(&cfg, *force),
        Command::Train { mode, dry_run: true, single_view } => dry_run(&cfg, mode_kind(*mode, *single_view, &cfg)),
        Command::Train { mode, single_view, .. } => train(&cfg, *mode, mode_kind(*mode, *single_view, &cfg)),
        Command::Eval { model } => eval(&cfg, parse_kind(model.as_deref(), &cfg)?),
        Command::Ablate => ablate(&cfg),
        Command::Robustness { model, from_ablation } => {
            robustness(&cfg, parse_kind(model.as_deref(), &cfg)?, *from_ablation)
        }
        Command::Verify { .. } => unreachable!("handled above"),
    }
}

/// Config file, then PVRF_SEED, then command-line flags.
fn load_config(cli: &Cli) -> Outcome<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(
            s.trim().parse::<u64>().map_err(|_| Failure::Validation(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?,
        ),
        Err(_) => None,
    };
    if let Some(seed) = cli.seed.or(env_seed) {
        match cli.command {
            Command::GenData { .. } => cfg.dataset.seed = seed,
            _ => cfg.schedule.seed = seed,
        }
    }
    if let Some(p) = &cli.dataset {
        cfg.paths.dataset = p.clone();
    }
    if let Some(p) = &cli.checkpoints {
        cfg.paths.checkpoints = p.clone();
    }
    if let Some(p) = &cli.reports {
        cfg.paths.reports = p.clone();
    }
    if let Some(e) = cli.epochs {
        cfg.schedule.total_epochs = e;
    }
    if let Some(e) = cli.freeze_epochs {
        cfg.schedule.freeze_epochs = e;
    }
    if let Some(k) = cli.top_k {
        cfg.model.fusion.top_k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_fusion(cfg: &ExperimentConfig) -> ModelKind {
    ModelKind::Fusion(FusionVariant::MultiView { k: cfg.model.fusion.top_k })
}

fn mode_kind(mode: Mode, single_view: bool, cfg: &ExperimentConfig) -> ModelKind {
    match mode {
        Mode::Point => ModelKind::Point,
        Mode::View => ModelKind::View,
        Mode::Late => ModelKind::Late,
        Mode::Fusion if single_view => ModelKind::Fusion(FusionVariant::SingleView),
        Mode::Fusion => default_fusion(cfg),
    }
}

fn parse_kind(name: Option<&str>, cfg: &ExperimentConfig) -> Outcome<ModelKind> {
    let Some(name) = name else { return Ok(default_fusion(cfg)) };
    let kind = ModelKind::from_name(name).ok_or_else(|| {
        Failure::Validation(format!(
            "unknown model `{name}`; expected point_only, view_only, late_fusion, sfusion or sm_fusion_k<K>"
        ))
    })?;
    if let ModelKind::Fusion(FusionVariant::MultiView { k }) = kind {
        if k > cfg.dataset.views {
            return Err(Failure::Validation(format!("{name} needs {k} views but the dataset has {}", cfg.dataset.views)));
        }
    }
    Ok(kind)
}

fn checkpoint_path(cfg: &ExperimentConfig, kind: ModelKind) -> PathBuf {
    cfg.paths.checkpoints.join(format!("{}.ckpt", kind.name()))
}

fn ablation_checkpoint_path(cfg: &ExperimentConfig, kind: ModelKind) -> PathBuf {
    cfg.paths.checkpoints.join("ablation").join(format!("{}.ckpt", kind.name()))
}

fn config_echo(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serialises")
}

fn gen_data(cfg: &ExperimentConfig, force: bool) -> Outcome {
    let (manifest_path, bin_path) = dataset_files(&cfg.paths.dataset);
    if !force && (manifest_path.exists() || bin_path.exists()) {
        return Err(Failure::Validation(format!(
            "dataset already exists at {}; pass --force to overwrite",
            manifest_path.display()
        )));
    }
    let split = make_dataset(&cfg.dataset)?;
    let manifest = save_dataset(&split, &cfg.paths.dataset)?;
    println!("wrote {} and {}", manifest_path.display(), bin_path.display());
    println!("seed {}: {} train, {} test samples", manifest.config.seed, manifest.train_count, manifest.test_count);
    println!("{:<12} {:>6} {:>6}", "class", "train", "test");
    for (i, name) in manifest.class_names.iter().enumerate() {
        println!("{:<12} {:>6} {:>6}", name, manifest.per_class_train[i], manifest.per_class_test[i]);
    }
    Ok(())
}

/// Loads the dataset and checks it was generated with the configured shapes.
fn load_split(cfg: &ExperimentConfig) -> Outcome<DatasetSplit> {
    let (manifest_path, _) = dataset_files(&cfg.paths.dataset);
    if !manifest_path.exists() {
        return Err(Failure::Runtime(format!(
            "no dataset at {}; run `pvrf gen-data` first",
            manifest_path.display()
        )));
    }
    let split = load_dataset(&cfg.paths.dataset)?;
    let (have, want) = (&split.config, &cfg.dataset);
    if (have.classes, have.points, have.views, have.resolution) != (want.classes, want.points, want.views, want.resolution) {
        return Err(Failure::Validation(format!(
            "dataset at {} has {} classes, {} points, {} views, resolution {}; the configuration expects {}, {}, {}, {}. \
             Regenerate it with `pvrf gen-data --force`",
            manifest_path.display(),
            have.classes,
            have.points,
            have.views,
            have.resolution,
            want.classes,
            want.points,
            want.views,
            want.resolution
        )));
    }
    Ok(split)
}

fn prepared(cfg: &ExperimentConfig, split: &DatasetSplit) -> Outcome<(Vec<PreparedSample>, Vec<PreparedSample>)> {
    let k = cfg.model.encoder.knn_k;
    Ok((prepare_samples(&split.train, k)?, prepare_samples(&split.test, k)?))
}

fn dry_run(cfg: &ExperimentConfig, kind: ModelKind) -> Outcome {
    let model = Model::init(kind, &cfg.model, cfg.dataset.classes, cfg.schedule.seed)?;
    println!("configuration valid");
    println!("model {}: {} parameters", kind.name(), model.param_count());
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (path, t) in model.store.iter() {
        let group = path.split('.').next().unwrap_or(path).to_string();
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, n)) => *n += t.numel(),
            None => groups.push((group, t.numel())),
        }
    }
    for (group, n) in groups {
        println!("  {group:<10} {n:>9}");
    }
    Ok(())
}

fn train_command(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Point => "point",
        ModelKind::View => "view",
        ModelKind::Late => "late",
        ModelKind::Fusion(FusionVariant::SingleView) => "fusion --single-view",
        ModelKind::Fusion(FusionVariant::MultiView { .. }) => "fusion",
    }
}

/// Loads `kind` from the checkpoint directory; `what` names the step that
/// produces it.
fn require_checkpoint(cfg: &ExperimentConfig, kind: ModelKind, what: &str) -> Outcome<Model> {
    let path = checkpoint_path(cfg, kind);
    if !path.exists() {
        return Err(Failure::Runtime(format!(
            "missing {} checkpoint {}; {what} first with `pvrf train {}`",
            kind.name(),
            path.display(),
            train_command(kind)
        )));
    }
    Ok(Model::load(kind, &cfg.model, cfg.dataset.classes, &path)?)
}

fn print_report(r: &EvalReport) {
    println!(
        "{}: overall accuracy {:.4}, mean class accuracy {:.4}, retrieval mAP {:.4}",
        r.model, r.overall_acc, r.mean_class_acc, r.retrieval_map
    );
}

fn train(cfg: &ExperimentConfig, mode: Mode, kind: ModelKind) -> Outcome {
    let unimodal = match mode {
        Mode::Fusion | Mode::Late => Some((
            require_checkpoint(cfg, ModelKind::Point, "pretrain point")?,
            require_checkpoint(cfg, ModelKind::View, "pretrain view")?,
        )),
        _ => None,
    };
    let split = load_split(cfg)?;
    let (train_set, test_set) = prepared(cfg, &split)?;
    let started = Instant::now();
    let classes = split.num_classes();
    let (model, log): (Model, TrainLog) = match (&unimodal, mode) {
        (None, Mode::Point) => pretrain_unimodal(&train_set, Branch::Point, &cfg.model, classes, &cfg.schedule)?,
        (None, _) => pretrain_unimodal(&train_set, Branch::View, &cfg.model, classes, &cfg.schedule)?,
        (Some((point, view)), _) => train_fusion(&train_set, point, view, kind, &cfg.schedule, &mut |p, _| {
            if p.epoch_end {
                log::info!("epoch {} done{}", p.epoch, if p.frozen { " (encoders frozen)" } else { "" });
            }
        })?,
    };
    log::info!("trained {} in {:.1?}", kind.name(), started.elapsed());
    let ckpt = checkpoint_path(cfg, kind);
    model.save(&ckpt)?;
    let mut report = evaluate(&model, &test_set)?;
    report.config = config_echo(cfg);
    let report_path = cfg.paths.reports.join(format!("{}.json", kind.name()));
    write_json(&report_path, &json!({ "report": report, "train_log": log }))?;
    if let Some(loss) = log.epoch_losses.last() {
        println!("final training loss {loss:.4}");
    }
    print_report(&report);
    println!("wrote {} and {}", ckpt.display(), report_path.display());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, kind: ModelKind) -> Outcome {
    let model = require_checkpoint(cfg, kind, "train it")?;
    let split = load_split(cfg)?;
    let test = prepare_samples(&split.test, cfg.model.encoder.knn_k)?;
    let mut report = evaluate(&model, &test)?;
    report.config = config_echo(cfg);
    let path = cfg.paths.reports.join(format!("{}_eval.json", kind.name()));
    write_json(&path, &report)?;
    print_report(&report);
    println!("wrote {}", path.display());
    Ok(())
}

fn ablate(cfg: &ExperimentConfig) -> Outcome {
    let split = load_split(cfg)?;
    let (train_set, test_set) = prepared(cfg, &split)?;
    let started = Instant::now();
    let outcome = run_ablation(&train_set, &test_set, &cfg.model, split.num_classes(), &cfg.schedule)?;
    log::info!("ablation finished in {:.1?}", started.elapsed());
    for m in &outcome.models {
        m.save(ablation_checkpoint_path(cfg, m.kind))?;
    }
    let csv = cfg.paths.reports.join("ablation.csv");
    write_ablation_csv(&csv, &outcome.rows)?;
    let json_path = cfg.paths.reports.join("ablation.json");
    write_json(&json_path, &json!({ "rows": outcome.rows, "reports": outcome.reports, "config": config_echo(cfg) }))?;
    println!("{:<16} {:>14} {:>12}", "model", "mean_class_acc", "overall_acc");
    for r in &outcome.rows {
        println!("{:<16} {:>14.4} {:>12.4}", r.model, r.mean_class_acc, r.overall_acc);
    }
    println!("wrote {} and {}", csv.display(), json_path.display());
    Ok(())
}

fn robustness(cfg: &ExperimentConfig, fusion: ModelKind, from_ablation: bool) -> Outcome {
    let locate = |kind: ModelKind| if from_ablation { ablation_checkpoint_path(cfg, kind) } else { checkpoint_path(cfg, kind) };
    let source = if from_ablation { "pvrf ablate" } else { "pvrf train" };
    let mut kinds = vec![ModelKind::Point, ModelKind::View, fusion];
    for extra in [ModelKind::Late, ModelKind::Fusion(FusionVariant::SingleView)] {
        if extra != fusion && locate(extra).exists() {
            kinds.push(extra);
        }
    }
    let mut models = Vec::new();
    for kind in kinds {
        let path = locate(kind);
        if !path.exists() {
            return Err(Failure::Runtime(format!(
                "missing {} checkpoint {}; produce it with `{source}` first",
                kind.name(),
                path.display()
            )));
        }
        models.push(Model::load(kind, &cfg.model, cfg.dataset.classes, &path)?);
    }
    let split = load_split(cfg)?;
    let refs: Vec<&Model> = models.iter().collect();
    let tables = run_robustness(&refs, &split.test)?;
    let test = prepare_samples(&split.test, cfg.model.encoder.knn_k)?;
    let fusion_report = evaluate(&models[2], &test)?;

    let dir = &cfg.paths.reports;
    write_robustness_csv(dir.join("robustness_views.csv"), "views", &tables.views)?;
    write_robustness_csv(dir.join("robustness_points.csv"), "points", &tables.points)?;
    write_pr_curve_csv(dir.join("pr_curve.csv"), &fusion_report.pr_curve)?;

    println!("{:<16} {:>6} {:>12}", "model", "views", "overall_acc");
    for r in &tables.views {
        println!("{:<16} {:>6} {:>12.4}", r.model, r.count, r.overall_acc);
    }
    println!("{:<16} {:>6} {:>12}", "model", "points", "overall_acc");
    for r in &tables.points {
        println!("{:<16} {:>6} {:>12.4}", r.model, r.count, r.overall_acc);
    }
    println!("wrote {}", display_all(dir, &["robustness_views.csv", "robustness_points.csv", "pr_curve.csv"]));
    Ok(())
}

fn display_all(dir: &Path, names: &[&str]) -> String {
    names.iter().map(|n| dir.join(n).display().to_string()).collect::<Vec<_>>().join(", ")
}

fn verify(sign_flip: Option<&str>) -> Outcome {
    let sign_flip = match sign_flip {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::Validation(format!("unknown operation `{name}`")))?),
    };
    let started = Instant::now();
    let report = run_verify(&VerifyOptions { sign_flip, ..VerifyOptions::default() });
    print!("{}", report.table());
    let passed = report.checks.iter().filter(|c| c.passed).count();
    println!("{passed}/{} checks passed", report.checks.len());
    eprintln!("verification took {:.1?}", started.elapsed());
    if report.passed() {
        Ok(())
    } else {
        for c in report.failures() {
            eprintln!("FAILED: {} (measured {:e}, tolerance {:e})", c.name, c.measured, c.tolerance);
        }
        Err(Failure::Verification)
    }
}
