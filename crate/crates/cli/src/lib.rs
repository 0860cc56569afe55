//! `gkd` command-line driver: corpus generation, training, distillation,
//! evaluation, compression and model inspection.
//!
//! Exit codes: 0 on success, 1 on usage errors (rejected before any work
//! starts), 2 on data or model file errors.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gkd_core::compression::{
    load_model, prune, save_model, sparsity_report, threshold_from_exp, CompressedModel, DEFAULT_PRUNE_EXP,
};
use gkd_core::data::{self, synth_generate, Dataset, InputMode, Split, SplitCounts, CLASS_NAMES};
use gkd_core::distill::{distill_train_with_progress, DistillConfig, DEFAULT_ALPHA, DEFAULT_TEMPERATURE};
use gkd_core::models::{build_model, ArchSpec, Family, ModelParams, WidthScale};
use gkd_core::train::{evaluate_with, train_with_progress, AdamConfig, EpochRecord, TrainConfig, TrainOutcome};
use gkd_core::Parallelism;
use thiserror::Error;

/// Class count of the synthetic motion vocabulary.
pub const CLASS_COUNT: usize = 8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}", file_message(path, source))]
    File {
        path: PathBuf,
        #[source]
        source: gkd_core::Error,
    },
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn file_message(path: &Path, source: &gkd_core::Error) -> String {
    match source {
        gkd_core::Error::Io { source, .. } => format!("{}: {source}", path.display()),
        other => format!("{}: {other}", path.display()),
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    fn usage(flag: &str, msg: impl Display) -> Self {
        CliError::Usage(format!("{flag}: {msg}"))
    }

    fn file(path: &Path) -> impl FnOnce(gkd_core::Error) -> Self + '_ {
        move |source| CliError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    fn data(path: &Path) -> impl FnOnce(gkd_core::Error) -> Self + '_ {
        move |e| CliError::Data {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "gkd",
    version,
    about = "Gesture recognition with knowledge distillation and model compression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic gesture corpus (.gkdd).
    GenData(GenDataArgs),
    /// Train a classifier from scratch.
    Train(TrainArgs),
    /// Train a student against a trained teacher.
    Distill(DistillArgs),
    /// Accuracy and confusion matrix of a model on a dataset split.
    Eval(EvalArgs),
    /// Prune and optionally store in half precision.
    Compress(CompressArgs),
    /// Parameter count, per-tensor sparsity and file size.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train: usize,
    #[arg(long)]
    val: usize,
    #[arg(long)]
    test: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arch {
    Cnn3d,
    Lstm,
    Joint,
}

impl From<Arch> for Family {
    fn from(a: Arch) -> Family {
        match a {
            Arch::Cnn3d => Family::BaselineCnn3d,
            Arch::Lstm => Family::BaselineLstm,
            Arch::Joint => Family::Joint,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Input {
    Hand,
    #[value(name = "upper_body")]
    UpperBody,
    Combined,
}

impl From<Input> for InputMode {
    fn from(i: Input) -> InputMode {
        match i {
            Input::Hand => InputMode::Hand,
            Input::UpperBody => InputMode::UpperBody,
            Input::Combined => InputMode::Combined,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Options shared by `train` and `distill`.
#[derive(Debug, Args)]
struct LoopArgs {
    /// Apply the corpus augmentation to training samples.
    #[arg(long)]
    augment: bool,
    /// Clip the global gradient norm.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Also write the per-epoch history as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Run batch items on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    arch: Arch,
    #[arg(long, value_parser = parse_width)]
    width: WidthScale,
    #[arg(long, value_enum)]
    input: Input,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    batch: usize,
    #[arg(long)]
    lr: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Output classes (defaults to the corpus class count).
    #[arg(long)]
    classes: Option<usize>,
    #[command(flatten)]
    common: LoopArgs,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, value_enum)]
    arch: Arch,
    #[arg(long, value_parser = parse_width)]
    width: WidthScale,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the soft loss by T².
    #[arg(long)]
    t_squared: bool,
    /// Precompute teacher logits once per training sample.
    #[arg(long)]
    cache_teacher: bool,
    #[command(flatten)]
    common: LoopArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    /// Prune weights with |w| < 2^EXP.
    #[arg(long, default_value_t = DEFAULT_PRUNE_EXP, allow_negative_numbers = true)]
    prune_exp: i32,
    /// Store dense tensors as binary16.
    #[arg(long)]
    half: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PRUNE_EXP, allow_negative_numbers = true)]
    prune_exp: i32,
}

fn parse_width(s: &str) -> Result<WidthScale, String> {
    let w: WidthScale = s.parse().map_err(|e: gkd_core::Error| e.to_string())?;
    if ![WidthScale::FULL, WidthScale::HALF, WidthScale::QUARTER].contains(&w) {
        return Err(format!("width {w} is not one of 1, 1/2, 1/4"));
    }
    Ok(w)
}

/// Parses `args` (including the program name) and runs the command,
/// writing reports to `out` and diagnostics to `err`.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// [`run_with`] on the process's standard streams.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    run_with(args, &mut out, &mut err)
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Distill(a) => distill_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Compress(a) => compress_cmd(a, out),
        Command::Inspect(a) => inspect_cmd(a, out),
    }
}

fn emit(out: &mut dyn Write, text: impl Display) -> CliResult<()> {
    writeln!(out, "{text}").map_err(|source| CliError::Write {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    data::load(path).map_err(CliError::file(path))
}

fn load_params(path: &Path) -> CliResult<(CompressedModel, ModelParams)> {
    let stored = load_model(path).map_err(CliError::file(path))?;
    let params = stored.to_model().map_err(CliError::file(path))?;
    Ok((stored, params))
}

fn file_len(path: &Path) -> CliResult<u64> {
    std::fs::metadata(path)
        .map(|m| m.len())
        .map_err(|source| CliError::Write {
            path: path.to_path_buf(),
            source,
        })
}

fn save_params(model: &ModelParams, path: &Path) -> CliResult<usize> {
    save_model(&CompressedModel::dense(model), path).map_err(CliError::file(path))
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    for (flag, n) in [("--train", a.train), ("--val", a.val), ("--test", a.test)] {
        if n == 0 {
            return Err(CliError::usage(flag, "must be at least 1"));
        }
    }
    let counts = SplitCounts {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    let dataset = synth_generate(CLASS_COUNT, counts, a.seed, Parallelism::Parallel)
        .map_err(|e| CliError::usage("--train/--val/--test", e))?;
    data::save(&dataset, &a.out).map_err(CliError::file(&a.out))?;
    emit(
        out,
        format_args!(
            "wrote {} samples (train {}, val {}, test {}) to {} ({} bytes)",
            counts.total(),
            a.train,
            a.val,
            a.test,
            a.out.display(),
            file_len(&a.out)?
        ),
    )
}

fn loop_config(
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    common: &LoopArgs,
    dataset: &Dataset,
) -> CliResult<TrainConfig> {
    if epochs == 0 {
        return Err(CliError::usage("--epochs", "must be at least 1"));
    }
    if batch == 0 {
        return Err(CliError::usage("--batch", "must be at least 1"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(CliError::usage("--lr", format_args!("{lr} must be positive")));
    }
    if let Some(c) = common.clip_norm {
        if !(c > 0.0 && c.is_finite()) {
            return Err(CliError::usage("--clip-norm", format_args!("{c} must be positive")));
        }
    }
    Ok(TrainConfig {
        epochs,
        batch_size: batch,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        seed,
        augment: common.augment.then_some(dataset.manifest.augmentation),
        clip_norm: common.clip_norm,
        parallelism: if common.sequential {
            Parallelism::Sequential
        } else {
            Parallelism::Parallel
        },
        ..TrainConfig::default()
    })
}

fn check_classes(spec: &ArchSpec, dataset: &Dataset, data_path: &Path) -> CliResult<()> {
    if dataset.class_count() > spec.class_count {
        return Err(CliError::Data {
            path: data_path.to_path_buf(),
            message: format!(
                "dataset has {} classes, model only {}",
                dataset.class_count(),
                spec.class_count
            ),
        });
    }
    Ok(())
}

/// Prints each epoch and collects the records for the optional CSV.
fn epoch_printer<'a>(out: &'a mut dyn Write, failed: &'a mut Option<std::io::Error>) -> impl FnMut(&EpochRecord) + 'a {
    move |r| {
        if let Err(e) = writeln!(
            out,
            "epoch={} train_loss={:.6} train_accuracy={:.4} val_accuracy={:.4}",
            r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy
        ) {
            failed.get_or_insert(e);
        }
    }
}

fn write_history(path: &Path, history: &[EpochRecord]) -> CliResult<()> {
    let to_err = |e: csv::Error| CliError::Write {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in history {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn finish_training(
    outcome: CliResult<TrainOutcome>,
    failed: Option<std::io::Error>,
    common: &LoopArgs,
    model_out: &Path,
    out: &mut dyn Write,
) -> CliResult<()> {
    let outcome = outcome?;
    if let Some(source) = failed {
        return Err(CliError::Write {
            path: PathBuf::from("<stdout>"),
            source,
        });
    }
    if let Some(h) = &common.history {
        write_history(h, &outcome.history)?;
    }
    let bytes = save_params(&outcome.model, model_out)?;
    emit(
        out,
        format_args!(
            "best_epoch={} saved {} ({} parameters, {} bytes)",
            outcome.best_epoch,
            model_out.display(),
            outcome.model.param_count(),
            bytes
        ),
    )
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let dataset = load_data(&a.data)?;
    let config = loop_config(a.epochs, a.batch, a.lr, a.seed, &a.common, &dataset)?;
    let classes = a.classes.unwrap_or(dataset.class_count());
    if classes < dataset.class_count() {
        return Err(CliError::usage(
            "--classes",
            format_args!("{classes} is fewer than the corpus's {} classes", dataset.class_count()),
        ));
    }
    let spec = ArchSpec::new(a.arch.into(), a.width)
        .with_classes(classes)
        .with_input_mode(a.input.into());
    let model = build_model(spec, a.seed).map_err(|e| CliError::usage("--width", e))?;
    let mut failed = None;
    let outcome = train_with_progress(model, &dataset, &config, &mut epoch_printer(out, &mut failed))
        .map_err(CliError::data(&a.data));
    finish_training(outcome, failed, &a.common, &a.out, out)
}

fn distill_cmd(a: DistillArgs, out: &mut dyn Write) -> CliResult<()> {
    if !(a.temperature > 0.0 && a.temperature.is_finite()) {
        return Err(CliError::usage(
            "--temperature",
            format_args!("{} must be positive", a.temperature),
        ));
    }
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(CliError::usage(
            "--alpha",
            format_args!("{} must lie in [0, 1]", a.alpha),
        ));
    }
    let (_, teacher) = load_params(&a.teacher)?;
    let dataset = load_data(&a.data)?;
    check_classes(&teacher.spec, &dataset, &a.data)?;
    let config = loop_config(a.epochs, a.batch, a.lr, a.seed, &a.common, &dataset)?;
    let student = ArchSpec::new(a.arch.into(), a.width)
        .with_classes(teacher.spec.class_count)
        .with_input_mode(teacher.spec.input_mode);
    let mut dc = DistillConfig::new(teacher, student);
    dc.temperature = a.temperature;
    dc.alpha = a.alpha;
    dc.t_squared = a.t_squared;
    dc.cache_teacher = a.cache_teacher;
    let mut failed = None;
    let outcome = distill_train_with_progress(&dc, &dataset, &config, &mut epoch_printer(out, &mut failed))
        .map_err(CliError::data(&a.data));
    finish_training(outcome, failed, &a.common, &a.out, out)
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let (_, model) = load_params(&a.model)?;
    let dataset = load_data(&a.data)?;
    check_classes(&model.spec, &dataset, &a.data)?;
    let samples = dataset.split(a.split.into());
    let e = evaluate_with(&model, samples, Parallelism::Parallel).map_err(CliError::data(&a.data))?;
    emit(out, format_args!("samples={} correct={}", e.total, e.correct))?;
    emit(out, format_args!("accuracy={:.2}", 100.0 * e.accuracy))?;
    emit(out, "confusion (rows = true class, columns = predicted class):")?;
    let names: Vec<String> = (0..model.spec.class_count)
        .map(|c| {
            CLASS_NAMES
                .get(c)
                .map_or_else(|| format!("class_{c}"), |n| n.to_string())
        })
        .collect();
    for (name, row) in names.iter().zip(&e.confusion) {
        let cells: Vec<String> = row.iter().map(|n| format!("{n:>4}")).collect();
        emit(out, format_args!("{name:>18} {}", cells.join(" ")))?;
    }
    Ok(())
}

fn compress_cmd(a: CompressArgs, out: &mut dyn Write) -> CliResult<()> {
    let threshold = threshold_from_exp(a.prune_exp).map_err(|e| CliError::usage("--prune-exp", e))?;
    let (stored, model) = load_params(&a.model)?;
    let (pruned, stats) = prune(&model, threshold).map_err(|e| CliError::usage("--prune-exp", e))?;
    let result = if a.half { pruned.to_half().0 } else { pruned };
    let bytes = save_model(&result, &a.out).map_err(CliError::file(&a.out))?;
    emit(
        out,
        format_args!(
            "pruned {} of {} parameters below 2^{}",
            stats.removed, stats.total, a.prune_exp
        ),
    )?;
    let sparse = stats.tensors.iter().filter(|t| t.sparse).count();
    emit(out, format_args!("sparse tensors: {sparse} of {}", stats.tensors.len()))?;
    emit(
        out,
        format_args!(
            "payload bytes: {} -> {} ({:.4}x)",
            stored.payload_bytes(),
            result.payload_bytes(),
            result.payload_bytes() as f64 / stored.payload_bytes() as f64
        ),
    )?;
    emit(
        out,
        format_args!("file bytes: {} -> {} ({})", file_len(&a.model)?, bytes, a.out.display()),
    )
}

fn inspect_cmd(a: InspectArgs, out: &mut dyn Write) -> CliResult<()> {
    let threshold = threshold_from_exp(a.prune_exp).map_err(|e| CliError::usage("--prune-exp", e))?;
    let (stored, model) = load_params(&a.model)?;
    let spec = model.spec;
    emit(
        out,
        format_args!(
            "family={} width={} classes={} input={} frame_size={}",
            spec.family, spec.width, spec.class_count, spec.input_mode, spec.frame_size
        ),
    )?;
    emit(out, format_args!("param_count={}", model.param_count()))?;
    let report = sparsity_report(&model, threshold).map_err(|e| CliError::usage("--prune-exp", e))?;
    emit(
        out,
        format_args!("sparsity at 2^{} (|w| < threshold, exact zeros):", a.prune_exp),
    )?;
    for t in &report.tensors {
        emit(
            out,
            format_args!(
                "  {:<16} {:>10} below={:<10} zeros={:<10} fraction={:.6}",
                t.name,
                t.total,
                t.below,
                t.exact_zeros,
                t.fraction_below()
            ),
        )?;
    }
    emit(
        out,
        format_args!(
            "total below={} of {} fraction={:.6}",
            report.below,
            report.total,
            report.fraction_below()
        ),
    )?;
    emit(out, format_args!("payload_bytes={}", stored.payload_bytes()))?;
    emit(out, format_args!("file_bytes={}", file_len(&a.model)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Command, clap::Error> {
        Cli::try_parse_from(std::iter::once("gkd").chain(args.iter().copied())).map(|c| c.command)
    }

    #[test]
    fn widths_are_the_three_rationals() {
        assert_eq!(parse_width("1"), Ok(WidthScale::FULL));
        assert_eq!(parse_width("1/2"), Ok(WidthScale::HALF));
        assert_eq!(parse_width("1/4"), Ok(WidthScale::QUARTER));
        for bad in ["1/3", "2", "0.25", "", "1/0"] {
            assert!(parse_width(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn prune_exponent_takes_negative_values() {
        match parse(&["compress", "--model", "a", "--prune-exp", "-8", "--out", "b"]).unwrap() {
            Command::Compress(a) => {
                assert_eq!(a.prune_exp, -8);
                assert!(!a.half);
            }
            other => panic!("{other:?}"),
        }
        match parse(&["inspect", "--model", "a"]).unwrap() {
            Command::Inspect(a) => assert_eq!(a.prune_exp, DEFAULT_PRUNE_EXP),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn input_modes_use_snake_case() {
        let args = |input| {
            parse(&[
                "train", "--arch", "joint", "--width", "1/4", "--input", input, "--data", "d", "--epochs", "1",
                "--batch", "1", "--lr", "0.1", "--seed", "0", "--out", "m",
            ])
        };
        match args("upper_body").unwrap() {
            Command::Train(a) => assert_eq!(InputMode::from(a.input), InputMode::UpperBody),
            other => panic!("{other:?}"),
        }
        assert!(args("upper-body").is_err());
    }

    #[test]
    fn only_usage_errors_exit_one() {
        assert_eq!(CliError::usage("--lr", "must be positive").exit_code(), 1);
        let path = Path::new("m.gkdm");
        let bad = || gkd_core::data::decode_dataset(b"nope").unwrap_err();
        assert_eq!(CliError::file(path)(bad()).exit_code(), 2);
        assert_eq!(CliError::data(path)(bad()).exit_code(), 2);
    }

    #[test]
    fn io_errors_name_the_path_once() {
        let path = Path::new("missing.gkdm");
        let e = gkd_core::compression::load_model(path).unwrap_err();
        let msg = CliError::file(path)(e).to_string();
        assert_eq!(msg.matches("missing.gkdm").count(), 1, "{msg}");
    }
}
