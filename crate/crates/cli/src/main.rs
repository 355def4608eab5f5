//! `gsf`: generate synthetic clips, train and evaluate toy GSF networks,
//! count GSF costs, time the module and run the oracle suites.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;

use gsf_core::accounting::{self, BackboneManifest};
use gsf_core::data::{generate, ClipDataset, Protocol, SyntheticSpec, Task};
use gsf_core::gsf::{FusionMode, GateMode};
use gsf_core::nets::{ArchConfig, ArchKind};
use gsf_core::rng::seeded;
use gsf_core::train::{evaluate, fit, log_text, TrainConfig};
use gsf_core::{bench, selftest, weights, GsfError};

const TASK_FILE: &str = "task";

#[derive(Parser, Debug)]
#[command(
    name = "gsf",
    version,
    about = "Gate-Shift-Fuse kernels, toy training and cost accounting"
)]
struct Cli {
    /// Human-readable tables instead of tab-separated output.
    #[arg(long, global = true)]
    pretty: bool,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (train and eval listings plus clips).
    Gen(GenArgs),
    /// Train a toy network; writes weights, `<out>.arch` and `<out>.log`.
    Train(TrainArgs),
    /// Print top-1 accuracy of trained weights.
    Eval(EvalArgs),
    /// Print GSF parameter and MAC overhead.
    Count(CountArgs),
    /// Time each stage of one GSF forward.
    Bench(BenchArgs),
    /// Run every oracle suite.
    Selftest,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    task: Task,
    /// Training clips.
    #[arg(long)]
    n: usize,
    /// Evaluation clips; half of `--n` by default.
    #[arg(long)]
    eval_n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Clip geometry `T×H×W` (`x` also accepted).
    #[arg(long, default_value = "8x16x16")]
    size: String,
    /// Pixel noise standard deviation in grey levels.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "inception_toy")]
    arch: ArchKind,
    /// `off` trains the same net in TSN mode (gates 0, sum fusion).
    #[arg(long, default_value = "on", value_parser = ["on", "off"])]
    gsf: String,
    #[arg(long, allow_hyphen_values = true)]
    gate: Option<GateMode>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    /// Frames sampled per clip; the clip length by default.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Exempt GSF kernels from weight decay.
    #[arg(long)]
    no_gsf_decay: bool,
    /// Weight file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory written by `gen` (its eval listing is used) or a listing.
    #[arg(long)]
    data: PathBuf,
    /// Weight file; its architecture is read from `<weights>.arch`.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "efficiency")]
    protocol: Protocol,
    /// Permute every clip's frames with a `--seed` permutation first.
    #[arg(long)]
    shuffle_frames: bool,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false, id = "target")]
struct CountTarget {
    /// Manifest file, or `resnet50` / `bninception` for the built-ins.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Toy architecture to build and count.
    #[arg(long)]
    arch: Option<ArchKind>,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    target: CountTarget,
    /// Override every site's (or the toy net's) fraction.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, default_value = "learned", allow_hyphen_values = true)]
    gate: GateMode,
    #[arg(long, default_value = "learned")]
    fusion: FusionMode,
    /// Toy net: width.
    #[arg(long)]
    width: Option<usize>,
    /// Toy net: input geometry `T×H×W`.
    #[arg(long, default_value = "8x16x16")]
    size: String,
    /// Toy net: classes.
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Input `B×C×T×H×W`.
    #[arg(long, default_value = "1x64x8x28x28")]
    shape: String,
    #[arg(long, default_value_t = 20)]
    iters: usize,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(GsfError),
    /// Checks ran but did not all pass.
    Checks(String),
}

impl From<GsfError> for Failure {
    fn from(e: GsfError) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(e) => match e {
                GsfError::Usage(_) | GsfError::Config(_) | GsfError::Dimension(_) => 1,
                GsfError::Data(_) | GsfError::Io(_) => 2,
                GsfError::Numeric(_) | GsfError::Oracle(_) => 3,
            },
            Failure::Checks(_) => 3,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Checks(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
        }
    }
}

type CmdResult = Result<String, Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

/// Splits `a×b×…` (or `axb…`) into exactly `N` positive integers.
fn parse_dims<const N: usize>(s: &str) -> Result<[usize; N], Failure> {
    let parts: Vec<&str> = s.split(['x', 'X', '×']).map(str::trim).collect();
    if parts.len() != N {
        return usage(format!("`{s}` should have {N} dimensions"));
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = match p.parse::<usize>() {
            Ok(v) if v > 0 => v,
            _ => return usage(format!("`{p}` in `{s}` is not a positive integer")),
        };
    }
    Ok(out)
}

fn gen(args: &GenArgs, seed: u64) -> CmdResult {
    let [t, h, w] = parse_dims::<3>(&args.size)?;
    let mut spec = SyntheticSpec::new(args.task, t, h, w, seed);
    if let Some(noise) = args.noise {
        spec.noise = noise;
    }
    let eval_n = args.eval_n.unwrap_or((args.n / 2).max(args.task.num_classes()));
    let train = ClipDataset::new(generate(&spec, args.n)?)?;
    let eval_spec = SyntheticSpec {
        seed: seed.wrapping_add(1),
        ..spec.clone()
    };
    let eval = ClipDataset::new(generate(&eval_spec, eval_n)?)?;
    let train_path = train.save(&args.out, "train")?;
    let eval_path = eval.save(&args.out, "eval")?;
    fs::write(args.out.join(TASK_FILE), format!("{}\n", args.task)).map_err(GsfError::from)?;
    Ok(format!(
        "train\t{}\t{}\neval\t{}\t{}\n",
        train_path.display(),
        train.len(),
        eval_path.display(),
        eval.len()
    ))
}

fn read_task(dir: &Path) -> Result<Option<Task>, Failure> {
    let path = dir.join(TASK_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(GsfError::from)?;
    Ok(Some(text.trim().parse().map_err(|_| {
        GsfError::Data(format!("{} does not name a task", path.display()))
    })?))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(args: &TrainArgs, seed: u64, pretty: bool) -> CmdResult {
    let train = ClipDataset::load(&args.data.join("train.tsv"))?;
    let eval = ClipDataset::load(&args.data.join("eval.tsv"))?;
    let task = read_task(&args.data)?;
    let (len, channels, _, _) = train.dims();
    let classes = task
        .map_or(0, Task::num_classes)
        .max(train.num_classes())
        .max(eval.num_classes());

    let mut arch = ArchConfig::new(args.arch, classes, args.frames.unwrap_or(len));
    arch.in_channels = channels;
    arch.seed = seed;
    if let Some(w) = args.width {
        arch.width = w;
    }
    if let Some(f) = args.fraction {
        arch.fraction = f;
    }
    if args.gsf == "off" {
        if args.gate.is_some_and(|g| g != GateMode::Zero) || args.fusion.is_some_and(|f| f != FusionMode::Sum) {
            return usage("--gsf off fixes the gate at 0 with sum fusion");
        }
        arch.gate = GateMode::Zero;
        arch.fusion = FusionMode::Sum;
    } else {
        arch.gate = args.gate.unwrap_or(GateMode::Learned);
        arch.fusion = args.fusion.unwrap_or(FusionMode::Learned);
    }
    let mut model = arch.build::<f32>()?;

    let mut cfg = TrainConfig::new(args.epochs);
    cfg.seed = seed;
    cfg.flip = task;
    cfg.decay_gsf = !args.no_gsf_decay;
    if let Some(lr) = args.lr {
        cfg.lr0 = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(d) = args.dropout {
        cfg.dropout = d;
    }
    let logs = fit(&mut model, &train, &eval, &cfg, |log| {
        if pretty {
            eprintln!(
                "epoch {:>3}  lr {:.5}  loss {:.4}  eval {:.2}%",
                log.epoch,
                log.lr,
                log.train_loss,
                100.0 * log.eval_acc
            );
        }
    })?;
    weights::save(&args.out, &model)?;
    fs::write(with_suffix(&args.out, ".arch"), arch.to_text()).map_err(GsfError::from)?;
    let text = log_text(&logs);
    fs::write(with_suffix(&args.out, ".log"), &text).map_err(GsfError::from)?;
    Ok(if pretty { String::new() } else { text })
}

fn eval(args: &EvalArgs, seed: u64, pretty: bool) -> CmdResult {
    let listing = if args.data.is_dir() {
        args.data.join("eval.tsv")
    } else {
        args.data.clone()
    };
    let mut data = ClipDataset::load(&listing)?;
    let arch_text = fs::read_to_string(with_suffix(&args.weights, ".arch")).map_err(GsfError::from)?;
    let arch = ArchConfig::parse(&arch_text)?;
    let mut model = arch.build::<f32>()?;
    weights::load_into(&args.weights, &mut model)?;
    if args.shuffle_frames {
        let mut rng = seeded(seed);
        for clip in &mut data.clips {
            let mut order: Vec<usize> = (0..clip.t).collect();
            order.shuffle(&mut rng);
            *clip = clip.reordered(&order);
        }
    }
    let acc = evaluate(&model, &data, args.protocol, None)?;
    Ok(if pretty {
        format!(
            "top-1 accuracy {:.2}% on {} clips ({} protocol)\n",
            100.0 * acc,
            data.len(),
            args.protocol
        )
    } else {
        format!("top1\t{acc:.6}\nclips\t{}\nprotocol\t{}\n", data.len(), args.protocol)
    })
}

fn count(args: &CountArgs, seed: u64, pretty: bool) -> CmdResult {
    if let Some(path) = &args.target.manifest {
        let mut manifest = BackboneManifest::load(path)?;
        if let Some(f) = args.fraction {
            manifest = manifest.with_fraction(f);
        }
        let report = accounting::report_with_modes(&manifest, args.gate, args.fusion, true)?;
        return Ok(if pretty { report.to_pretty() } else { report.to_tsv() });
    }
    let Some(kind) = args.target.arch else {
        return usage("count needs --manifest or --arch");
    };
    let [t, h, w] = parse_dims::<3>(&args.size)?;
    let mut arch = ArchConfig::new(kind, args.classes, t);
    arch.seed = seed;
    arch.gate = args.gate;
    arch.fusion = args.fusion;
    if let Some(width) = args.width {
        arch.width = width;
    }
    if let Some(f) = args.fraction {
        arch.fraction = f;
    }
    let with = arch.build::<f32>()?;
    let without = ArchConfig {
        gsf: false,
        ..arch.clone()
    }
    .build::<f32>()?;
    let rows = [
        (
            "params",
            accounting::model_params(&without) as f64,
            accounting::model_params(&with) as f64,
        ),
        (
            "macs",
            accounting::model_macs(&without, 1, h, w) as f64,
            accounting::model_macs(&with, 1, h, w) as f64,
        ),
    ];
    let mut s = String::new();
    if pretty {
        let _ = writeln!(
            s,
            "{kind}, {t}x{h}x{w} input, gate {}, fusion {}",
            args.gate, args.fusion
        );
        let _ = writeln!(
            s,
            "{:<8}{:>14}{:>14}{:>12}{:>10}",
            "", "baseline", "with GSF", "delta", "overhead"
        );
        for (name, base, full) in rows {
            let pct = 100.0 * (full - base) / base;
            let _ = writeln!(s, "{name:<8}{base:>14}{full:>14}{:>12}{pct:>9.3}%", full - base);
        }
    } else {
        let _ = writeln!(s, "quantity\tbaseline\twith_gsf\tdelta\toverhead_pct");
        for (name, base, full) in rows {
            let _ = writeln!(
                s,
                "{name}\t{base}\t{full}\t{}\t{:.4}",
                full - base,
                100.0 * (full - base) / base
            );
        }
    }
    Ok(s)
}

fn run_bench(args: &BenchArgs, seed: u64, pretty: bool) -> CmdResult {
    let shape = parse_dims::<5>(&args.shape)?;
    let report = bench::bench(shape, args.iters, seed)?;
    Ok(if pretty { report.to_pretty() } else { report.to_tsv() })
}

fn run_selftest(seed: u64, pretty: bool) -> CmdResult {
    let results = selftest::run_all(seed)?;
    let mut s = String::new();
    for r in &results {
        if pretty {
            let verdict = if r.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{:<22}{verdict:<6}{:>6}  {}", r.name, r.cases, r.detail);
        } else {
            let _ = writeln!(s, "{}", r.line());
        }
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(s)
    } else {
        print!("{s}");
        Err(Failure::Checks(format!("failed suites: {}", failed.join(", "))))
    }
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Gen(a) => gen(a, cli.seed),
        Command::Train(a) => train(a, cli.seed, cli.pretty),
        Command::Eval(a) => eval(a, cli.seed, cli.pretty),
        Command::Count(a) => count(a, cli.seed, cli.pretty),
        Command::Bench(a) => run_bench(a, cli.seed, cli.pretty),
        Command::Selftest => run_selftest(cli.seed, cli.pretty),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("gsf: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
