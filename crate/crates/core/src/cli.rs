//! Command-line front end. `main.rs` only parses and calls [`run`].

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::Checkpoint;
use crate::coco::{load_dataset, split, Dataset, ANNOTATION_FILE};
use crate::config::RunConfig;
use crate::experiment::{evaluate_model, matrix_csv_row, run_experiment_matrix, MatrixConfig, MatrixRow, RowStatus, MATRIX_HEADER};
use crate::metrics::{evaluate, per_threshold_csv, ImageEval, ScoredMask, ThresholdStep};
use crate::model::{ArchConfig, ModelGraph};
use crate::report::{write_report, RunManifest};
use crate::surgery::{ledger_csv, ledger_report, ledger_table, AblationSpec};
use crate::synth::{generate, shift_suite, write_suite, ShiftSpec, SuiteConfig};
use crate::train::{write_history, TrainError, Trainer};

const SELF_PRETRAINED: &str = "self-pretrained on the synthetic source set";

#[derive(Debug, Parser)]
#[command(name = "scalpel-seg", version, about = "Surgical fine-tuning workbench for instance segmentation")]
pub struct Cli {
    /// Run configuration (TOML with [arch], [train], [augment], [eval], [detector]).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed` (and the suite seed for `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic data: the full shift suite or a single source-style set.
    Synth(SynthArgs),
    /// Train from scratch on a source dataset.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint under one ablation.
    Finetune(FinetuneArgs),
    /// Fine-tune under many ablations and evaluate on every target set.
    Matrix(MatrixArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Tuned-parameter count per ablation.
    Ledger(LedgerArgs),
    /// Markdown tables and SVG charts from a matrix output directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generate source, tune and the five target sets with a lockfile.
    #[arg(long)]
    pub suite: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Instance-count multiplier for the suite.
    #[arg(long, default_value_t = 0.25)]
    pub scale: f64,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Scene count when not generating a suite.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset directory, or a suite root (its `source` member is used).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub ablation: AblationSpec,
    /// Dataset directory, or a suite root (its `tune` member is used).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub tune: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub targets: Vec<PathBuf>,
    /// `all` or a comma-separated list of ablation names.
    #[arg(long, default_value = "all")]
    pub ablations: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
    /// Also report every ablation on the held-out tuning images.
    #[arg(long)]
    pub eval_tune: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ArchPreset {
    Full,
    Mini,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub score_floor: Option<f32>,
    /// Threshold spacing: 0.05 or 0.1.
    #[arg(long, value_parser = parse_step)]
    pub iou_step: Option<ThresholdStep>,
    /// Score the ground truth against itself (every mask at score 1.0).
    #[arg(long)]
    pub oracle: bool,
    /// Directory for summary, per-threshold CSV and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LedgerArgs {
    #[arg(long, value_enum, default_value = "full")]
    pub arch: ArchPreset,
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub plots: bool,
    /// Defaults to the input directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_step(s: &str) -> Result<ThresholdStep, String> {
    match s {
        "fine" => Ok(ThresholdStep::Fine),
        "coarse" => Ok(ThresholdStep::Coarse),
        _ => match s.parse::<f64>() {
            Ok(v) if (v - 0.05).abs() < 1e-9 => Ok(ThresholdStep::Fine),
            Ok(v) if (v - 0.1).abs() < 1e-9 => Ok(ThresholdStep::Coarse),
            _ => Err(format!("unsupported IoU step `{s}` (expected 0.05 or 0.1)")),
        },
    }
}

/// Parses an ablation list: `all` or comma-separated names.
pub fn parse_ablations(s: &str) -> anyhow::Result<Vec<AblationSpec>> {
    if s.trim() == "all" {
        return Ok(AblationSpec::ALL.to_vec());
    }
    Ok(s.split(',').map(|n| n.trim().parse::<AblationSpec>()).collect::<Result<_, _>>()?)
}

/// A dataset directory, or `root/member` when `root` is a suite.
pub fn resolve_dataset(dir: &Path, member: &str) -> anyhow::Result<Dataset> {
    let target = if dir.join(ANNOTATION_FILE).exists() { dir.to_path_buf() } else { dir.join(member) };
    load_dataset(&target).with_context(|| format!("loading dataset from {}", target.display()))
}

fn manifest_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `--config`, else the configuration recorded beside `ckpt`, else defaults.
fn resolve_config(cli: &Cli, ckpt: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut cfg = if let Some(path) = &cli.config {
        RunConfig::load(path)?
    } else if let Some(m) = ckpt.map(manifest_path).filter(|p| p.exists()) {
        let manifest = RunManifest::load(&m)?;
        RunConfig::parse(&manifest.config, &m.display().to_string())?
    } else {
        RunConfig::desk()
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn trainer(cfg: &RunConfig) -> Trainer {
    Trainer { config: cfg.train.clone(), augment: cfg.augment.clone(), detector: cfg.detector.clone() }
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> anyhow::Result<ModelGraph> {
    let mut model = ModelGraph::build(&cfg.arch, cfg.train.seed)?;
    let c = Checkpoint::load(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    model.load_checkpoint(&c).with_context(|| format!("{} does not match the [arch] configuration", ckpt.display()))?;
    Ok(model)
}

fn save_diagnostic(err: &anyhow::Error, out: &Path) {
    if let Some(TrainError::NonFiniteLoss { diagnostic, .. }) = err.downcast_ref::<TrainError>() {
        let path = sidecar(out, ".diagnostic.ckpt");
        match diagnostic.save(&path) {
            Ok(()) => eprintln!("diagnostic checkpoint written to {}", path.display()),
            Err(e) => eprintln!("could not write diagnostic checkpoint: {e}"),
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if cli.print_config {
        let ckpt = match &cli.command {
            Some(Command::Finetune(a)) => Some(a.ckpt.as_path()),
            Some(Command::Matrix(a)) => Some(a.ckpt.as_path()),
            Some(Command::Eval(a)) => a.ckpt.as_deref(),
            _ => None,
        };
        print!("{}", resolve_config(&cli, ckpt)?.to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    let Some(command) = &cli.command else {
        bail!("no subcommand given (try --help)");
    };
    match command {
        Command::Synth(a) => synth(&cli, a),
        Command::Pretrain(a) => pretrain(&cli, a),
        Command::Finetune(a) => finetune(&cli, a),
        Command::Matrix(a) => matrix(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::Ledger(a) => {
            let arch = match a.arch {
                ArchPreset::Full => ArchConfig::full_scale(),
                ArchPreset::Mini => resolve_config(&cli, None)?.arch,
            };
            let rows = ledger_report(&arch);
            print!("{}", if a.csv { ledger_csv(&rows) } else { ledger_table(&rows) });
            Ok(ExitCode::SUCCESS)
        }
        Command::Report(a) => {
            let out = a.out.clone().unwrap_or_else(|| a.input.clone());
            for p in write_report(&a.input, &out, a.plots)? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> anyhow::Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    if a.suite {
        let suite = shift_suite(&SuiteConfig { seed, scale: a.scale, image_size: a.image_size, ..SuiteConfig::default() })?;
        write_suite(&suite, &a.out)?;
        for d in suite.all() {
            println!("{:<8} {:>5} images {:>6} instances", d.name, d.samples.len(), d.instance_count());
        }
    } else {
        let d = generate(a.count, SuiteConfig::default().objects_per_scene, a.image_size, &ShiftSpec::none(seed))?;
        crate::coco::save_dataset(&d, &a.out)?;
        println!("{} images, {} instances", d.samples.len(), d.instance_count());
    }
    Ok(ExitCode::SUCCESS)
}

fn pretrain(cli: &Cli, a: &PretrainArgs) -> anyhow::Result<ExitCode> {
    let cfg = resolve_config(cli, None)?;
    let data = resolve_dataset(&a.data, "source")?;
    let (train, val) = split(&data, a.val_fraction, cfg.train.seed)?;
    let mut model = ModelGraph::build(&cfg.arch, cfg.train.seed)?;
    let out = trainer(&cfg).train(&mut model, &train.samples, &val.samples, None).map_err(anyhow::Error::from);
    let out = match out {
        Ok(o) => o,
        Err(e) => {
            save_diagnostic(&e, &a.out);
            return Err(e);
        }
    };
    finish_training(cli, &cfg, "pretrain", &a.out, &out, "random initialisation", &a.data)?;
    println!("best val loss {:.4} at check {} ({} iters)", out.best_val_loss, out.best_check, out.iters_run);
    Ok(ExitCode::SUCCESS)
}

fn finish_training(
    cli: &Cli,
    cfg: &RunConfig,
    command: &str,
    out_path: &Path,
    out: &crate::train::TrainOutcome,
    recipe: &str,
    data: &Path,
) -> anyhow::Result<()> {
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    out.checkpoint.save(out_path)?;
    let history = sidecar(out_path, ".history.csv");
    write_history(&history, &out.history)?;
    let mut m = RunManifest::new(command, cfg, recipe);
    m.seeds.insert("train".into(), cfg.train.seed);
    if let Some(s) = cli.seed {
        m.seeds.insert("cli".into(), s);
    }
    m.inputs.insert("data".into(), data.display().to_string());
    m.outputs = vec![out_path.display().to_string(), history.display().to_string()];
    m.save(manifest_path(out_path))?;
    Ok(())
}

fn finetune(cli: &Cli, a: &FinetuneArgs) -> anyhow::Result<ExitCode> {
    let cfg = resolve_config(cli, Some(&a.ckpt))?;
    let data = resolve_dataset(&a.data, "tune")?;
    let (train, val) = split(&data, a.val_fraction, cfg.train.seed)?;
    let mut model = load_model(&cfg, &a.ckpt)?;
    let out = match trainer(&cfg).train(&mut model, &train.samples, &val.samples, Some(a.ablation)) {
        Ok(o) => o,
        Err(e) => {
            let e = anyhow::Error::from(e);
            save_diagnostic(&e, &a.out);
            return Err(e);
        }
    };
    let recipe = format!("fine-tuned ({}) from {}", a.ablation, a.ckpt.display());
    finish_training(cli, &cfg, "finetune", &a.out, &out, &recipe, &a.data)?;
    println!("{}: best val loss {:.4} at check {} ({} iters)", a.ablation, out.best_val_loss, out.best_check, out.iters_run);
    Ok(ExitCode::SUCCESS)
}

fn matrix(cli: &Cli, a: &MatrixArgs) -> anyhow::Result<ExitCode> {
    let cfg = resolve_config(cli, Some(&a.ckpt))?;
    let specs = parse_ablations(&a.ablations)?;
    let pretrained = Checkpoint::load(&a.ckpt).with_context(|| format!("reading {}", a.ckpt.display()))?;
    let tune = resolve_dataset(&a.tune, "tune")?;
    let (tune_train, tune_val) = split(&tune, a.val_fraction, cfg.train.seed)?;
    let mut targets = Vec::new();
    if a.eval_tune {
        targets.push(Dataset { name: "tune".into(), ..tune_val.clone() });
    }
    for t in &a.targets {
        targets.push(load_dataset(t).with_context(|| format!("loading target {}", t.display()))?);
    }
    std::fs::create_dir_all(&a.out)?;
    let mc = MatrixConfig { trainer: trainer(&cfg), eval: cfg.eval.clone(), jobs: a.jobs, out_dir: Some(a.out.clone()) };
    let report = run_experiment_matrix(&cfg.arch, &pretrained, &tune_train.samples, &tune_val.samples, &targets, &specs, &mc)?;
    std::fs::write(a.out.join("matrix.csv"), report.to_csv())?;
    std::fs::write(a.out.join("per_threshold.csv"), report.per_threshold_csv())?;
    let mut m = RunManifest::new("matrix", &cfg, &format!("fine-tuned from {} ({})", a.ckpt.display(), SELF_PRETRAINED));
    m.seeds.insert("train".into(), cfg.train.seed);
    m.inputs.insert("pretrained".into(), a.ckpt.display().to_string());
    m.inputs.insert("pretrained_hash".into(), report.pretrained_hash.clone());
    m.inputs.insert("tune".into(), a.tune.display().to_string());
    for (i, t) in a.targets.iter().enumerate() {
        m.inputs.insert(format!("target{i}"), t.display().to_string());
    }
    m.outputs = vec!["matrix.csv".into(), "per_threshold.csv".into()];
    m.outputs.extend(specs.iter().map(|s| format!("{}/model.ckpt", s.name())));
    m.save(a.out.join("manifest.json"))?;
    print!("{}", report.to_csv());
    let failed = report.failed_rows();
    if failed > 0 {
        eprintln!("{failed} of {} rows failed", report.rows.len());
        for run in &report.runs {
            if let Err(e) = &run.outcome {
                eprintln!("  {}: {e}", run.spec);
            }
        }
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(cli: &Cli, a: &EvalArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = resolve_config(cli, a.ckpt.as_deref())?;
    if let Some(f) = a.score_floor {
        cfg.eval.score_floor = f;
    }
    if let Some(s) = a.iou_step {
        cfg.eval.iou_step = s;
    }
    let data = resolve_dataset(&a.data, "tune")?;
    let (report, ablation) = if a.oracle {
        let images: Vec<ImageEval> = data
            .samples
            .iter()
            .map(|s| {
                let gts: Vec<_> = s.instances.iter().map(|i| i.mask(s.image.height, s.image.width)).collect();
                let preds = gts.iter().map(|m| ScoredMask { score: 1.0, mask: m.clone() }).collect();
                ImageEval { gts, preds }
            })
            .collect();
        (evaluate(&images, &cfg.eval.iou_step.thresholds(), cfg.eval.score_floor)?, "oracle".to_string())
    } else {
        let ckpt = a.ckpt.as_ref().expect("clap enforces --ckpt without --oracle");
        let model = load_model(&cfg, ckpt)?;
        let name = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        (evaluate_model(&model, &data.samples, &cfg.eval, &cfg.detector)?, name)
    };
    let row = MatrixRow { testset: data.name.clone(), ablation: ablation.clone(), status: RowStatus::Ok(report.clone()) };
    let summary = format!("{MATRIX_HEADER}\n{}\n", matrix_csv_row(&row));
    print!("{summary}");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), &summary)?;
        std::fs::write(dir.join("per_threshold.csv"), per_threshold_csv(&data.name, &ablation, &report))?;
        let mut m = RunManifest::new("eval", &cfg, if a.oracle { "ground truth" } else { SELF_PRETRAINED });
        m.seeds.insert("train".into(), cfg.train.seed);
        m.inputs.insert("data".into(), a.data.display().to_string());
        if let Some(c) = &a.ckpt {
            m.inputs.insert("ckpt".into(), c.display().to_string());
        }
        m.outputs = vec!["summary.csv".into(), "per_threshold.csv".into()];
        m.save(dir.join("manifest.json"))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_parsing() {
        assert_eq!(parse_step("0.05").unwrap(), ThresholdStep::Fine);
        assert_eq!(parse_step("0.1").unwrap(), ThresholdStep::Coarse);
        assert_eq!(parse_step("coarse").unwrap(), ThresholdStep::Coarse);
        assert!(parse_step("0.2").is_err());
    }

    #[test]
    fn ablation_lists() {
        assert_eq!(parse_ablations("all").unwrap().len(), 12);
        assert_eq!(parse_ablations("res3, rpn").unwrap(), vec![AblationSpec::Res3, AblationSpec::Rpn]);
        let err = parse_ablations("res3,res9").unwrap_err().to_string();
        assert!(err.contains("res9") && err.contains("linear_probing"), "{err}");
    }

    #[test]
    fn unknown_ablation_flag_lists_names() {
        let err = Cli::try_parse_from(["scalpel-seg", "finetune", "--ckpt", "a", "--ablation", "res7", "--data", "d", "--out", "o"]).unwrap_err();
        assert!(err.to_string().contains("tune_all"), "{err}");
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
