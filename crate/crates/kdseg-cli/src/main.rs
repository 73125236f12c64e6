//! Command-line driver tying data generation, training, distillation,
//! pseudo-labeling, evaluation, benchmarking and the ablation ladder into
//! reproducible runs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
//! failure (non-finite values).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use kdseg::dataset::{generate_synthetic_dataset, netpbm, DataError, Manifest};
use kdseg::eval::{benchmark, evaluate_on_manifest, miou, pixel_accuracy, report_csv, ConfusionMatrix, EvalError};
use kdseg::losses::{LabelMap, LossWeights};
use kdseg::models::{build_network, load_checkpoint, ModelError, NetworkConfig, Role, SegNetwork};
use kdseg::pseudo::{pseudo_label_dataset, PseudoError};
use kdseg::tensor::TensorError;
use kdseg::trainer::{
    train_distill, train_distill_joint, train_standalone, TrainConfig, TrainError, TrainReport,
};
use kdseg_cli::ablation::{run_ablation, AblationConfig};
use kdseg_cli::runcfg::{
    hash_manifest_contents, train_config_record, write_run_record, TrainOverrides,
};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
    #[error("config error: {0}")]
    Config(String),
}

/// 1 usage, 2 data/config, 3 numeric (non-finite values).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ErrorClass {
    Usage,
    DataConfig,
    Numeric,
}

impl ErrorClass {
    fn code(self) -> u8 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::DataConfig => 2,
            ErrorClass::Numeric => 3,
        }
    }
}

fn classify_tensor(err: &TensorError) -> ErrorClass {
    match err {
        TensorError::NonFinite(_) => ErrorClass::Numeric,
        TensorError::Usage(_) => ErrorClass::Usage,
        _ => ErrorClass::DataConfig,
    }
}

fn classify_loss(err: &kdseg::losses::LossError) -> ErrorClass {
    match err {
        kdseg::losses::LossError::Tensor(t) => classify_tensor(t),
        _ => ErrorClass::DataConfig,
    }
}

fn classify_model(err: &ModelError) -> ErrorClass {
    match err {
        ModelError::Tensor(t) => classify_tensor(t),
        _ => ErrorClass::DataConfig,
    }
}

fn classify_eval(err: &EvalError) -> ErrorClass {
    match err {
        EvalError::Usage(_) => ErrorClass::Usage,
        EvalError::Model(m) => classify_model(m),
        _ => ErrorClass::DataConfig,
    }
}

fn classify_pseudo(err: &PseudoError) -> ErrorClass {
    match err {
        PseudoError::Model(m) => classify_model(m),
        PseudoError::Loss(l) => classify_loss(l),
        _ => ErrorClass::DataConfig,
    }
}

fn classify_train(err: &TrainError) -> ErrorClass {
    match err {
        TrainError::Model(m) => classify_model(m),
        TrainError::Loss(l) => classify_loss(l),
        TrainError::Eval(e) => classify_eval(e),
        TrainError::Tensor(t) => classify_tensor(t),
        TrainError::Pseudo(p) => classify_pseudo(p),
        _ => ErrorClass::DataConfig,
    }
}

impl CliError {
    fn class(&self) -> ErrorClass {
        match self {
            CliError::Train(e) => classify_train(e),
            CliError::Model(e) => classify_model(e),
            CliError::Eval(e) => classify_eval(e),
            CliError::Pseudo(e) => classify_pseudo(e),
            CliError::Data(_) | CliError::Config(_) => ErrorClass::DataConfig,
        }
    }

    fn exit_code(&self) -> u8 {
        self.class().code()
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "kdseg",
    version,
    about = "Teacher-student distillation for semantic segmentation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset with train/val/unlabeled splits
    GenData(GenDataArgs),
    /// Train a teacher or a plain student on cross entropy
    Train(TrainArgs),
    /// Train a student under a frozen teacher, optionally with unlabeled data
    Distill(DistillArgs),
    /// Write teacher pseudo-labels for an unlabeled manifest
    PseudoLabel(PseudoLabelArgs),
    /// Evaluate a checkpoint or a prediction manifest against ground truth
    Eval(EvalArgs),
    /// Measure single-threaded inference throughput
    Bench(BenchArgs),
    /// Run the five-row ablation ladder across seeds
    Ablation(AblationArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    val: usize,
    #[arg(long, default_value_t = 500)]
    unlabeled: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum NetRole {
    Teacher,
    Student,
}

#[derive(Args, Clone)]
struct TrainCommonArgs {
    /// Labeled training manifest
    #[arg(long)]
    data: PathBuf,
    /// Labeled validation manifest
    #[arg(long)]
    val: PathBuf,
    /// Output directory for checkpoint, reports and the run record
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lr_drops: Option<Vec<usize>>,
    #[arg(long)]
    lr_drop_factor: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Enable flip/scale-jitter augmentation
    #[arg(long)]
    augment: bool,
    /// Gradient-norm clip; 0 disables
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    role: NetRole,
    /// Student width multiplier (ignored for the teacher preset)
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[command(flatten)]
    common: TrainCommonArgs,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    teacher_ckpt: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Unlabeled manifest; when given, pseudo-labeling plus joint training
    #[arg(long)]
    unlabeled_manifest: Option<PathBuf>,
    /// Teacher confidence threshold for pseudo-labels
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    common: TrainCommonArgs,
}

#[derive(Args)]
struct PseudoLabelArgs {
    #[arg(long)]
    teacher_ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_manifest: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth manifest
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to run over the images
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Manifest whose label files are predictions (paired with --data by line)
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Write the metrics CSV here as well as stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<NetRole>,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    val: usize,
    #[arg(long, default_value_t = 500)]
    unlabeled: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 4.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.4)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Student widths to sweep, e.g. 0.5,0.75,1.0
    #[arg(long, value_delimiter = ',')]
    width_sweep: Option<Vec<f64>>,
    /// Lambda values to sweep, e.g. 0.1,0.5,1.0
    #[arg(long, value_delimiter = ',')]
    lambda_sweep: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            let mut cur = std::error::Error::source(&err);
            while let Some(src) = cur {
                eprintln!("  caused by: {}", src);
                cur = src.source();
            }
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Distill(args) => cmd_distill(args),
        Command::PseudoLabel(args) => cmd_pseudo_label(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Ablation(args) => cmd_ablation(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    generate_synthetic_dataset(
        args.train,
        args.val,
        args.unlabeled,
        args.size,
        args.classes,
        args.seed,
        &args.out,
    )?;
    for name in ["train.txt", "val.txt", "unlabeled.txt"] {
        println!("{}", args.out.join(name).display());
    }
    Ok(())
}

fn resolve_train_config(common: &TrainCommonArgs, extra: TrainOverrides, size: usize) -> Result<TrainConfig> {
    let from_file = match &common.config {
        Some(path) => TrainOverrides::from_file(path)?,
        None => TrainOverrides::default(),
    };
    let from_flags = TrainOverrides {
        batch_size: common.batch_size,
        epochs: common.epochs,
        lr_initial: common.lr,
        lr_drop_epochs: common.lr_drops.clone(),
        lr_drop_factor: common.lr_drop_factor,
        momentum: common.momentum,
        seed: common.seed,
        augment: common.augment.then_some(true),
        grad_clip_norm: common.grad_clip,
        ..extra
    };
    Ok(TrainOverrides::layered(from_file, from_flags).resolve(size))
}

fn probe_image_size(manifest: &Manifest) -> Result<usize> {
    if manifest.is_empty() {
        return Err(CliError::Config("manifest has no entries".into()));
    }
    let image = netpbm::read_ppm(&manifest.image_path(0))?;
    Ok(image.shape()[1].max(image.shape()[2]))
}

fn finish_run(
    out_dir: &Path,
    command: &str,
    cfg: &TrainConfig,
    common: &TrainCommonArgs,
    extra: &[(&str, String)],
    student: &SegNetwork<f32>,
    ckpt_name: &str,
    report: &TrainReport,
) -> Result<()> {
    student.save_checkpoint(&out_dir.join(ckpt_name))?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv()).map_err(DataError::from)?;

    let mut record = vec![("command", command.to_string())];
    record.extend(train_config_record(cfg));
    record.push(("data", common.data.display().to_string()));
    record.push(("val", common.val.display().to_string()));
    record.push((
        "input_hash",
        format!("fnv64:{:016x}", hash_manifest_contents(&common.data)?),
    ));
    for (k, v) in extra {
        record.push((k, v.clone()));
    }
    if let Some(miou) = report.final_miou {
        record.push(("final_miou", format!("{:.6}", miou)));
    }
    write_run_record(out_dir, &record)?;

    if let Some(miou) = report.final_miou {
        println!("final_miou={:.6}", miou);
    }
    println!("checkpoint={}", out_dir.join(ckpt_name).display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    std::fs::create_dir_all(&args.common.out).map_err(DataError::from)?;
    let train = Manifest::load(&args.common.data)?;
    let val = Manifest::load(&args.common.val)?;
    let size = probe_image_size(&train)?;
    let mut cfg = resolve_train_config(&args.common, TrainOverrides::default(), size)?;
    cfg.weights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        lambda: 0.0,
    };

    let (config, ckpt_name, role) = match args.role {
        NetRole::Teacher => (
            NetworkConfig::teacher_preset(args.classes),
            "teacher.ckpt",
            Role::Teacher,
        ),
        NetRole::Student => (
            NetworkConfig::student_preset(args.classes, args.width),
            "student.ckpt",
            Role::Student,
        ),
    };
    let mut net = build_network::<f32>(&config, cfg.seed)?.with_role(role);
    let report = train_standalone(&mut net, &train, &val, &cfg)?;
    finish_run(
        &args.common.out,
        "train",
        &cfg,
        &args.common,
        &[
            ("role", format!("{:?}", args.role).to_lowercase()),
            ("width", args.width.to_string()),
            ("classes", args.classes.to_string()),
        ],
        &net,
        ckpt_name,
        &report,
    )
}

fn cmd_distill(args: DistillArgs) -> Result<()> {
    std::fs::create_dir_all(&args.common.out).map_err(DataError::from)?;
    let train = Manifest::load(&args.common.data)?;
    let val = Manifest::load(&args.common.val)?;
    let size = probe_image_size(&train)?;
    let extra = TrainOverrides {
        alpha: args.alpha,
        beta: args.beta,
        lambda: args.lambda,
        threshold: args.threshold,
        ..TrainOverrides::default()
    };
    let cfg = resolve_train_config(&args.common, extra, size)?;

    let teacher = load_checkpoint(&args.teacher_ckpt)?.with_role(Role::Teacher);
    let classes = teacher.config().num_classes;
    let mut student =
        build_network::<f32>(&NetworkConfig::student_preset(classes, args.width), cfg.seed)?;

    let mut record_extra = vec![
        ("teacher_ckpt", args.teacher_ckpt.display().to_string()),
        ("width", args.width.to_string()),
        ("classes", classes.to_string()),
    ];

    let report = match &args.unlabeled_manifest {
        None => {
            if cfg.weights.alpha == 0.0 && cfg.weights.beta == 0.0 {
                train_standalone(&mut student, &train, &val, &cfg)?
            } else {
                train_distill(&mut student, &teacher, &train, &val, &cfg)?
            }
        }
        Some(unlabeled_path) => {
            let unlabeled = Manifest::load(unlabeled_path)?;
            let (pseudo, stats) = pseudo_label_dataset(
                &teacher,
                &unlabeled,
                &args.common.out.join("pseudo.txt"),
                cfg.pseudo_threshold,
            )?;
            println!("pseudo_kept_fraction={:.4}", stats.aggregate_kept);
            record_extra.push(("unlabeled", unlabeled_path.display().to_string()));
            record_extra.push(("pseudo_kept", format!("{:.6}", stats.aggregate_kept)));
            train_distill_joint(&mut student, &teacher, &train, &pseudo, &val, &cfg)?
        }
    };
    finish_run(
        &args.common.out,
        "distill",
        &cfg,
        &args.common,
        &record_extra,
        &student,
        "student.ckpt",
        &report,
    )
}

fn cmd_pseudo_label(args: PseudoLabelArgs) -> Result<()> {
    let teacher = load_checkpoint(&args.teacher_ckpt)?.with_role(Role::Teacher);
    let manifest = Manifest::load(&args.manifest)?;
    if let Some(dir) = args.out_manifest.parent() {
        std::fs::create_dir_all(dir).map_err(DataError::from)?;
    }
    let (out, stats) =
        pseudo_label_dataset(&teacher, &manifest, &args.out_manifest, args.threshold)?;
    println!("labeled_images={}", out.len());
    println!("kept_fraction={:.6}", stats.aggregate_kept);
    println!("failures={}", stats.failures.len());
    for (index, message) in &stats.failures {
        eprintln!("entry {}: {}", index, message);
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let data = Manifest::load(&args.data)?;
    let (score, accuracy) = match (&args.ckpt, &args.pred) {
        (Some(ckpt), None) => {
            let net = load_checkpoint(ckpt)?;
            let (_, score, acc) = evaluate_on_manifest(&net, &data, net.config().num_classes)?;
            (score, acc)
        }
        (None, Some(pred_path)) => {
            let pred = Manifest::load(pred_path)?;
            if pred.len() != data.len() {
                return Err(CliError::Config(format!(
                    "prediction manifest has {} entries, ground truth {}",
                    pred.len(),
                    data.len()
                )));
            }
            let mut cm = ConfusionMatrix::new(args.classes);
            for i in 0..data.len() {
                let gt_path = data.label_path(i).ok_or_else(|| {
                    CliError::Config(format!("ground-truth entry {} has no label", i))
                })?;
                let pred_path = pred.label_path(i).ok_or_else(|| {
                    CliError::Config(format!("prediction entry {} has no label", i))
                })?;
                let (h, w, gt) = netpbm::read_pgm(&gt_path)?;
                let (ph, pw, pr) = netpbm::read_pgm(&pred_path)?;
                if (h, w) != (ph, pw) {
                    return Err(CliError::Config(format!(
                        "entry {}: prediction {}x{} vs ground truth {}x{}",
                        i, ph, pw, h, w
                    )));
                }
                let gt = LabelMap::single(h, w, gt).map_err(TrainError::from)?;
                let pr = LabelMap::single(h, w, pr).map_err(TrainError::from)?;
                cm.accumulate(&pr, &gt)?;
            }
            (miou(&cm)?, pixel_accuracy(&cm)?)
        }
        _ => {
            return Err(CliError::Config(
                "pass exactly one of --ckpt or --pred".into(),
            ))
        }
    };
    let csv = report_csv(&score, accuracy, None);
    print!("{}", csv);
    if let Some(out) = &args.out {
        std::fs::write(out, csv).map_err(DataError::from)?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let net = match (&args.ckpt, args.preset) {
        (Some(ckpt), None) => load_checkpoint(ckpt)?,
        (None, Some(NetRole::Teacher)) => {
            build_network::<f32>(&NetworkConfig::teacher_preset(args.classes), 0)?
        }
        (None, Some(NetRole::Student)) => build_network::<f32>(
            &NetworkConfig::student_preset(args.classes, args.width),
            0,
        )?,
        _ => {
            return Err(CliError::Config(
                "pass exactly one of --ckpt or --preset".into(),
            ))
        }
    };
    let result = benchmark(&net, (args.size, args.size), args.iterations, args.warmup)?;
    println!(
        "images_per_second={:.3} input={}x{} iterations={} warmup={}",
        result.images_per_second,
        result.input_size.0,
        result.input_size.1,
        result.iterations,
        result.warmup
    );
    Ok(())
}

fn cmd_ablation(args: AblationArgs) -> Result<()> {
    let mut cfg = AblationConfig::new(args.out.clone());
    cfg.seeds = args.seeds;
    cfg.epochs = args.epochs;
    cfg.num_train = args.train;
    cfg.num_val = args.val;
    cfg.num_unlabeled = args.unlabeled;
    cfg.size = args.size;
    cfg.num_classes = args.classes;
    cfg.data_seed = args.data_seed;
    cfg.alpha = args.alpha;
    cfg.beta = args.beta;
    cfg.lambda = args.lambda;
    cfg.threshold = args.threshold;
    cfg.batch_size = args.batch_size;
    cfg.width_sweep = args.width_sweep.unwrap_or_default();
    cfg.lambda_sweep = args.lambda_sweep.unwrap_or_default();

    let outcome = run_ablation(&cfg)?;
    println!();
    print!("{}", outcome.to_markdown());
    if !outcome.lambda_sweep.is_empty() {
        println!();
        print!("{}", outcome.lambda_sweep_csv());
    }
    if !outcome.teacher_frozen {
        return Err(CliError::Config(
            "teacher checkpoint changed during distillation".into(),
        ));
    }
    println!();
    println!("table_csv={}", args.out.join("ablation.csv").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let usage = CliError::Eval(EvalError::Usage("no iterations".into()));
        assert_eq!(usage.exit_code(), 1);

        let numeric = CliError::Train(TrainError::Tensor(TensorError::NonFinite(
            "conv2d output".into(),
        )));
        assert_eq!(numeric.exit_code(), 3);

        let nested_numeric = CliError::Train(TrainError::Loss(
            kdseg::losses::LossError::Tensor(TensorError::NonFinite("mul output".into())),
        ));
        assert_eq!(nested_numeric.exit_code(), 3);

        let config = CliError::Config("bad flag value".into());
        assert_eq!(config.exit_code(), 2);
    }
}
