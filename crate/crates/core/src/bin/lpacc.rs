//! Command-line front end: bounds, simulation, training, verification, and
//! the two canned experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lpacc::accsim::{overflow_sweep, AccMode};
use lpacc::bounds::{datatype_bound, weight_bound, DotShape};
use lpacc::dataio::{
    load_checkpoint, load_mnist_split, save_checkpoint, synth_dataset, write_report, Dataset,
    ReportFormat, ReportRow, Split,
};
use lpacc::error::Error;
use lpacc::repro;
use lpacc::trainkit::{
    evaluate, train_with_hook, ActivationKind, Arch, Metrics, Model, ModelConfig, TrainConfig,
};

/// Environment variable naming the directory with the raw MNIST IDX files.
const MNIST_DIR_ENV: &str = "LPACC_MNIST_DIR";

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_VERIFY_FAILED: u8 = 4;
const EXIT_DIVERGENCE: u8 = 5;

#[derive(Parser)]
#[command(
    name = "lpacc",
    about = "Accumulator bit-width bounds, accumulator-aware quantized training, and bit-exact overflow simulation",
    version
)]
struct Cli {
    /// Seed for every randomized behavior (init, shuffling, synthetic data,
    /// permutations).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Report output path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format: csv or jsonl.
    #[arg(long, global = true, default_value = "csv")]
    format: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print accumulator bit-width lower bounds.
    Bound(BoundArgs),
    /// Sweep a checkpoint over accumulator widths and overflow modes.
    Simulate(SimulateArgs),
    /// Train a quantized classifier (baseline QAT, or accumulator-aware when
    /// --acc-bits is given).
    Train(TrainArgs),
    /// Check the exact overflow-avoidance certificate of a checkpoint.
    Verify(VerifyArgs),
    /// Run a canned experiment (fig2 | associativity).
    Repro(ReproArgs),
}

#[derive(Args)]
struct BoundArgs {
    /// Dot-product length K.
    #[arg(long)]
    k: u64,
    /// Input activation bits N.
    #[arg(long)]
    input_bits: u32,
    /// Treat inputs as signed integers.
    #[arg(long)]
    signed_input: bool,
    /// Weight bits M.
    #[arg(long)]
    weight_bits: u32,
    /// Checkpoint (JSON) or CSV of integer weight codes (one channel per
    /// line); adds per-channel weight bounds and the layer maximum.
    #[arg(long)]
    weights_file: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory with raw MNIST IDX files; falls back to $LPACC_MNIST_DIR.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Use the seeded synthetic dataset instead of files.
    #[arg(long)]
    synth: bool,
    /// MNIST classes to binarize into labels 0 and 1.
    #[arg(long, num_args = 2, value_names = ["A", "B"], default_values_t = [0u32, 1])]
    classes: Vec<u32>,
    /// Binarization threshold on [0,1]-normalized pixels.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 784)]
    synth_k: usize,
    #[arg(long, default_value_t = 1)]
    synth_bits: u32,
    #[arg(long)]
    synth_signed: bool,
    #[arg(long, default_value_t = 2)]
    synth_classes: u32,
    #[arg(long, default_value_t = 2048)]
    synth_train_samples: usize,
    #[arg(long, default_value_t = 512)]
    synth_test_samples: usize,
    /// Max absolute integer noise added to class prototypes.
    #[arg(long, default_value_t = 1)]
    synth_noise: i64,
}

impl DataArgs {
    fn mnist_dir(&self) -> Option<PathBuf> {
        self.dataset
            .clone()
            .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
    }

    fn load(&self, split: Split, seed: u64) -> Result<Dataset, Error> {
        if self.synth {
            let samples = match split {
                Split::Train => self.synth_train_samples,
                Split::Test => self.synth_test_samples,
            };
            return synth_dataset(
                self.synth_k,
                self.synth_bits,
                self.synth_signed,
                samples,
                self.synth_classes,
                self.synth_noise,
                split,
                seed,
            );
        }
        let dir = self.mnist_dir().ok_or_else(|| {
            Error::InvalidParam(format!(
                "no dataset source: pass --dataset DIR, set ${MNIST_DIR_ENV}, or use --synth"
            ))
        })?;
        load_mnist_split(
            dir,
            split,
            (self.classes[0], self.classes[1]),
            self.threshold,
        )
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Accumulator widths: "16", "10,12,14", or a range "8..20" (inclusive).
    #[arg(long, default_value = "8..20")]
    acc_bits: String,
    /// Comma-separated modes (exact, wraparound, saturate).
    #[arg(long, default_value = "exact,wraparound,saturate")]
    mode: String,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// "linear" or "mlp:H1,H2,..." hidden widths.
    #[arg(long, default_value = "linear")]
    arch: String,
    #[arg(long, default_value_t = 8)]
    weight_bits: u32,
    #[arg(long, default_value_t = 1)]
    act_bits: u32,
    /// Target accumulator width; enables accumulator-aware training.
    #[arg(long)]
    acc_bits: Option<u32>,
    #[arg(long, default_value_t = 10)]
    epochs: u32,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Weight on the norm-cap hinge regularizer.
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Pin first/last layer weights to 8 bits.
    #[arg(long)]
    pin_io_8bit: bool,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Accumulator width to certify.
    #[arg(long)]
    acc_bits: u32,
}

#[derive(Args)]
struct ReproArgs {
    /// fig2 | associativity
    #[arg(long)]
    experiment: String,
    /// Width range for fig2.
    #[arg(long, default_value_t = repro::FIG2_P_RANGE.0)]
    p_min: u32,
    #[arg(long, default_value_t = repro::FIG2_P_RANGE.1)]
    p_max: u32,
    /// Sub-bound width for the associativity study.
    #[arg(long, default_value_t = 14)]
    acc_bits: u32,
    #[arg(long, default_value_t = 1000)]
    trials: u32,
    /// Test rows evaluated per permutation trial.
    #[arg(long, default_value_t = 256)]
    max_samples: usize,
    #[arg(long, default_value_t = 10)]
    epochs: u32,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[command(flatten)]
    data: DataArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. }
        | Error::IdxBadMagic(_)
        | Error::IdxUnsupportedDtype(_)
        | Error::IdxTruncated { .. }
        | Error::CheckpointFormat(_)
        | Error::MissingClass(_) => EXIT_IO,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_USAGE,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let format: ReportFormat = cli.format.parse()?;
    match &cli.command {
        Command::Bound(args) => cmd_bound(args),
        Command::Simulate(args) => cmd_simulate(args, cli.seed, cli.out.as_deref(), format),
        Command::Train(args) => cmd_train(args, cli.seed, cli.out.as_deref(), format),
        Command::Verify(args) => cmd_verify(args),
        Command::Repro(args) => cmd_repro(args, cli.seed, cli.out.as_deref(), format),
    }
}

fn emit_report(
    rows: &[ReportRow],
    out: Option<&std::path::Path>,
    format: ReportFormat,
) -> Result<(), Error> {
    match out {
        Some(path) => write_report(rows, path, format),
        None => {
            print!("{}", lpacc::dataio::report_to_string(rows, format)?);
            Ok(())
        }
    }
}

fn cmd_bound(args: &BoundArgs) -> Result<ExitCode, Error> {
    let shape = DotShape::new(args.k, args.input_bits, args.signed_input, args.weight_bits)?;
    let b = datatype_bound(&shape);
    println!(
        "data-type bound: K={} N={} {} M={} -> real {:.6} bits, min {} bits",
        args.k,
        args.input_bits,
        if args.signed_input {
            "signed"
        } else {
            "unsigned"
        },
        args.weight_bits,
        b.real_bound,
        b.min_bits
    );
    if let Some(path) = &args.weights_file {
        let channel_sets = load_weight_channels(path, args.input_bits, args.signed_input)?;
        for (label, input_bits, input_signed, channels) in &channel_sets {
            let mut layer_max = 0u32;
            for (i, w) in channels.iter().enumerate() {
                let wb = weight_bound(w, *input_bits, *input_signed)?;
                layer_max = layer_max.max(wb.min_bits);
                println!(
                    "{label} channel {i}: l1={} -> real {:.6} bits, min {} bits{}",
                    w.iter().map(|v| v.unsigned_abs()).sum::<u64>(),
                    wb.real_bound,
                    wb.min_bits,
                    if wb.degenerate {
                        " (degenerate: all-zero)"
                    } else {
                        ""
                    }
                );
            }
            println!("{label} bound (max over channels): {layer_max} bits");
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Weight codes grouped per layer: (label, input_bits, input_signed, rows).
/// Checkpoints carry their own per-layer input types; a bare CSV of codes
/// uses the flag values.
type WeightChannels = Vec<(String, u32, bool, Vec<Vec<i64>>)>;

fn load_weight_channels(
    path: &std::path::Path,
    flag_input_bits: u32,
    flag_input_signed: bool,
) -> Result<WeightChannels, Error> {
    if path.extension().is_some_and(|e| e == "json") {
        let ck = load_checkpoint(path)?;
        let model = Model::from_checkpoint(&ck)?;
        let types = model.layer_input_types();
        let mut out = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            let codes = layer.forward_weights_strict()?;
            let rows = codes
                .codes()
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect();
            out.push((format!("layer {l}"), types[l].0, types[l].1, rows));
        }
        Ok(out)
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: Result<Vec<i64>, _> =
                line.split(',').map(|f| f.trim().parse::<i64>()).collect();
            rows.push(row.map_err(|e| {
                Error::InvalidParam(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?);
        }
        if rows.is_empty() {
            return Err(Error::InvalidParam("weights file has no rows".into()));
        }
        Ok(vec![(
            "weights".into(),
            flag_input_bits,
            flag_input_signed,
            rows,
        )])
    }
}

fn parse_acc_bits(spec: &str) -> Result<Vec<u32>, Error> {
    let spec = spec.trim();
    let bad = || Error::InvalidParam(format!("bad accumulator width spec '{spec}'"));
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u32 = hi
            .trim()
            .trim_start_matches('=')
            .parse()
            .map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',')
        .map(|f| f.trim().parse::<u32>().map_err(|_| bad()))
        .collect()
}

fn parse_modes(spec: &str) -> Result<Vec<AccMode>, Error> {
    spec.split(',').map(|m| m.trim().parse()).collect()
}

fn cmd_simulate(
    args: &SimulateArgs,
    seed: u64,
    out: Option<&std::path::Path>,
    format: ReportFormat,
) -> Result<ExitCode, Error> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let model = Model::from_checkpoint(&ck)?;
    let test = args.data.load(Split::Test, seed)?;
    let widths = parse_acc_bits(&args.acc_bits)?;
    let modes = parse_modes(&args.mode)?;
    let sparsity = model.sparsity();
    let rows_raw = overflow_sweep(
        |p, mode| {
            let (metrics, report) = evaluate(&model, &test, Some(p), mode)?;
            Ok((report, metrics.top1_accuracy))
        },
        widths,
        &modes,
    )?;
    let rows: Vec<ReportRow> = rows_raw
        .iter()
        .map(|r| ReportRow {
            p: r.report.acc_bits,
            mode: r.report.mode.as_str().into(),
            overflow_events: r.report.overflow_events,
            total_macs: r.report.total_macs,
            dot_products_with_overflow: r.report.dot_products_with_overflow,
            total_dot_products: r.report.total_dot_products,
            logit_mae: r.report.logit_mae,
            top1_accuracy: r.top1_accuracy,
            sparsity,
        })
        .collect();
    emit_report(&rows, out, format)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_arch(spec: &str) -> Result<Arch, Error> {
    let spec = spec.trim();
    if spec.eq_ignore_ascii_case("linear") {
        return Ok(Arch::Linear);
    }
    if let Some(rest) = spec.strip_prefix("mlp:") {
        let hidden: Result<Vec<usize>, _> = rest.split(',').map(|h| h.trim().parse()).collect();
        return match hidden {
            Ok(h) if !h.is_empty() => Ok(Arch::Mlp(h)),
            _ => Err(Error::InvalidParam(format!("bad mlp spec '{spec}'"))),
        };
    }
    Err(Error::InvalidParam(format!(
        "unknown arch '{spec}' (linear | mlp:H1,H2,...)"
    )))
}

fn cmd_train(
    args: &TrainArgs,
    seed: u64,
    out: Option<&std::path::Path>,
    format: ReportFormat,
) -> Result<ExitCode, Error> {
    let train_split = args.data.load(Split::Train, seed)?;
    let model_config = ModelConfig {
        arch: parse_arch(&args.arch)?,
        weight_bits: args.weight_bits,
        act_bits: args.act_bits,
        acc_bits: args.acc_bits,
        input_signed: train_split.range.signed(),
        activation: ActivationKind::ReluUnsigned,
        pin_io_8bit: args.pin_io_8bit,
    };
    let train_config = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        lambda: args.lambda,
        weight_decay: args.weight_decay,
        seed,
        lr_schedule: lpacc::trainkit::LrSchedule::Constant,
    };
    let (model, history) = train_with_hook(&model_config, &train_config, &train_split, |event| {
        if let lpacc::trainkit::TrainEvent::Epoch { epoch, metrics, .. } = event {
            println!(
                "epoch {epoch}: task_loss={} reg_loss={} accuracy={} sparsity={}",
                metrics.task_loss, metrics.reg_loss, metrics.top1_accuracy, metrics.sparsity
            );
        }
    })?;

    let test = args.data.load(Split::Test, seed)?;
    let (test_metrics, _) = evaluate(&model, &test, None, AccMode::Exact)?;
    println!("test accuracy: {}", test_metrics.top1_accuracy);

    if let Some(path) = &args.checkpoint_out {
        save_checkpoint(&model.to_checkpoint(&train_config), path)?;
        println!("checkpoint written to {}", path.display());
    }
    if out.is_some() {
        let rows: Vec<ReportRow> = history
            .iter()
            .enumerate()
            .map(|(i, m)| metrics_row(i, m, args.acc_bits))
            .collect();
        emit_report(&rows, out, format)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn metrics_row(epoch: usize, m: &Metrics, acc_bits: Option<u32>) -> ReportRow {
    ReportRow {
        p: acc_bits.unwrap_or(lpacc::trainkit::DEFAULT_ACC_BITS),
        mode: format!("train-epoch-{epoch}"),
        overflow_events: 0,
        total_macs: 0,
        dot_products_with_overflow: 0,
        total_dot_products: 0,
        logit_mae: 0.0,
        top1_accuracy: m.top1_accuracy,
        sparsity: m.sparsity,
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode, Error> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let model = Model::from_checkpoint(&ck)?;
    let types = model.layer_input_types();
    let mut all_pass = true;
    for (l, layer) in model.layers.iter().enumerate() {
        let (input_bits, input_signed) = types[l];
        let codes = layer.forward_weights_strict()?;
        for (i, row) in codes.codes().rows().into_iter().enumerate() {
            let row_slice = row.as_slice().expect("row-major");
            let fits =
                lpacc::bounds::worst_case_fits(row_slice, input_bits, input_signed, args.acc_bits);
            let l1: u64 = row_slice.iter().map(|v| v.unsigned_abs()).sum();
            println!(
                "layer {l} channel {i}: l1={l1} at P={} -> {}",
                args.acc_bits,
                if fits { "PASS" } else { "FAIL" }
            );
            all_pass &= fits;
        }
    }
    if all_pass {
        println!("all channels PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("verification FAILED");
        Ok(ExitCode::from(EXIT_VERIFY_FAILED))
    }
}

fn cmd_repro(
    args: &ReproArgs,
    seed: u64,
    out: Option<&std::path::Path>,
    format: ReportFormat,
) -> Result<ExitCode, Error> {
    let train_split = args.data.load(Split::Train, seed)?;
    let test_split = args.data.load(Split::Test, seed)?;
    let model_config = ModelConfig {
        arch: Arch::Linear,
        weight_bits: 8,
        act_bits: train_split.range.bit_width(),
        acc_bits: None,
        input_signed: train_split.range.signed(),
        activation: ActivationKind::ReluUnsigned,
        pin_io_8bit: false,
    };
    let train_config = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        seed,
        ..TrainConfig::default()
    };
    match args.experiment.as_str() {
        "fig2" => {
            let cells = repro::fig2(
                &train_split,
                &test_split,
                &model_config,
                &train_config,
                (args.p_min, args.p_max),
            )?;
            let rows: Vec<ReportRow> = cells.iter().map(|c| c.to_report_row()).collect();
            emit_report(&rows, out, format)?;
        }
        "associativity" => {
            let (baseline, _) = lpacc::trainkit::train(&model_config, &train_config, &train_split)?;
            let study = repro::associativity(
                &baseline,
                &test_split,
                args.acc_bits,
                AccMode::Saturate,
                args.trials,
                seed,
                args.max_samples,
            )?;
            println!(
                "P={} saturate over {} permutations: logit MAE mean {} min {} max {}; outer-loop MAE {}; exact top1 {}",
                study.acc_bits,
                study.per_trial.len(),
                study.mean_logit_mae(),
                study.min_logit_mae(),
                study.max_logit_mae(),
                study.outer_loop.logit_mae,
                study.exact_top1,
            );
            let rows = study.to_report_rows(
                (test_split.len().min(args.max_samples) * baseline.num_classes as usize) as u64,
                (test_split.len().min(args.max_samples)
                    * baseline.num_classes as usize
                    * test_split.feature_count()) as u64,
            );
            emit_report(&rows, out, format)?;
        }
        other => {
            return Err(Error::InvalidParam(format!(
                "unknown experiment '{other}' (fig2 | associativity)"
            )));
        }
    }
    Ok(ExitCode::SUCCESS)
}
