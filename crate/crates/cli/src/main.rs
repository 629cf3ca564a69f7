use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand, ValueEnum};

use arnn::bench::{self, Mechanism};
use arnn::data::{self, SynthConfig};
use arnn::gradcheck::{self, GradcheckProblem, Preset};
use arnn::io::write_atomic;
use arnn::model::{ArnnModel, ModelConfig};
use arnn::training::{self, Metrics, TrainConfig};

#[derive(Parser)]
#[command(name = "arnn", version, about = "Attention-recurrent classifier for multichannel segments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic burst-vs-background dataset
    Synth(SynthArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split of a dataset
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients
    Gradcheck(GradcheckArgs),
    /// Time windowed versus full attention
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 1024)]
    length: usize,
    /// Segments per class
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of local windows per segment
    #[arg(long, default_value_t = 16)]
    windows: usize,
    /// Number of state vectors
    #[arg(long, default_value_t = 32)]
    states: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
    /// Fraction of segments used for training
    #[arg(long, default_value_t = 0.75)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "model.arnn")]
    out: PathBuf,
    #[arg(long, default_value = "log.csv")]
    log: PathBuf,
    /// Min-max normalize every channel of every segment before training
    #[arg(long)]
    minmax: bool,
    /// Print per-batch losses
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Seed used to rebuild the train/test split
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.75)]
    split: f64,
    /// Evaluate every segment instead of the held-out split
    #[arg(long)]
    all: bool,
    /// Min-max normalize segments, as done for training with --minmax
    #[arg(long)]
    minmax: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Small,
    Default,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = PresetArg::Small)]
    config: PresetArg,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Scale the analytic gradient of the named tensor by 1.01
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// CSV with header c,n,l,s
    #[arg(long, conflicts_with = "default_grid", required_unless_present = "default_grid")]
    grid: Option<PathBuf>,
    #[arg(long)]
    default_grid: bool,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

fn show(key: &str, value: impl Display) {
    println!("  {key:<12} {value}");
}

fn show_path(key: &str, value: &Path) {
    show(key, value.display());
}

fn show_metrics(m: &Metrics) {
    println!("accuracy  {}", m.accuracy);
    println!("precision {}", m.precision);
    println!("recall    {}", m.recall);
    println!("f1        {}", m.f1);
    println!("confusion tp={} fp={} fn={} tn={}", m.tp, m.fp, m.fn_, m.tn);
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        c: args.channels,
        n: args.length,
        count_per_class: args.count,
        seed: args.seed,
        ..SynthConfig::default()
    };
    println!("synth");
    show_path("out", &args.out);
    show("channels", cfg.c);
    show("length", cfg.n);
    show("count", cfg.count_per_class);
    show("band", format!("{}..{}", cfg.band.0, cfg.band.1));
    show("amplitude", cfg.amplitude_ratio);
    show("seed", cfg.seed);
    let ds = data::synth_generate(&cfg)?;
    data::write_segments(&args.out, &ds.segments)?;
    println!("wrote {} segments to {}", ds.segments.len(), args.out.display());
    Ok(())
}

fn load_dataset(dir: &Path, minmax: bool) -> anyhow::Result<data::Dataset> {
    let mut ds = data::load_manifest(dir, None)?;
    if minmax {
        data::normalize_all(&mut ds.segments);
    }
    Ok(ds)
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = TrainConfig {
        batch_size: args.batch,
        lr0: args.lr,
        epochs: args.epochs,
        dropout_p: args.dropout,
        seed: args.seed,
        split: args.split,
        verbose: args.verbose,
        ..TrainConfig::default()
    };
    println!("train");
    show_path("data", &args.data);
    show("windows", args.windows);
    show("states", args.states);
    show("epochs", cfg.epochs);
    show("batch", cfg.batch_size);
    show("lr", cfg.lr0);
    show("decay", format!("x{} every {} epochs", cfg.decay_factor, cfg.decay_every));
    show("dropout", cfg.dropout_p);
    show("split", cfg.split);
    show("minmax", args.minmax);
    show("seed", cfg.seed);
    show_path("out", &args.out);
    show_path("log", &args.log);
    cfg.validate()?;

    let ds = load_dataset(&args.data, args.minmax)?;
    let model_cfg = ModelConfig::new(ds.c, ds.n, args.windows, args.states, cfg.dropout_p)?;
    let split = training::split_train_test(&ds.segments, cfg.split, cfg.seed)?;
    if let Some(w) = &split.warning {
        eprintln!("warning: {w}");
    }
    println!(
        "dataset: c={} n={} segments={} train={} test={}",
        ds.c,
        ds.n,
        ds.segments.len(),
        split.train.len(),
        split.test.len()
    );
    let mut model = ArnnModel::new(model_cfg, cfg.seed);
    println!("parameters: {}", model.param_count());
    let log = training::train(&mut model, &split.train, &split.test, &cfg)?;
    for r in &log.epochs {
        match &r.test {
            Some(m) => println!(
                "epoch {:>3}  lr {:.0e}  loss {:.6}  test acc {:.4}  f1 {:.4}",
                r.epoch, r.lr, r.train_loss, m.accuracy, m.f1
            ),
            None => println!("epoch {:>3}  lr {:.0e}  loss {:.6}", r.epoch, r.lr, r.train_loss),
        }
    }
    model.save(&args.out)?;
    write_atomic(&args.log, log.to_csv().as_bytes())?;
    if let Some(last) = log.last() {
        println!("final train loss {}", last.train_loss);
        if let Some(m) = &last.test {
            println!("final test accuracy {}", m.accuracy);
            println!("final test f1 {}", m.f1);
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    println!("eval");
    show_path("model", &args.model);
    show_path("data", &args.data);
    show("split", if args.all { "all".to_string() } else { args.split.to_string() });
    show("minmax", args.minmax);
    show("seed", args.seed);
    if let Some(p) = &args.predictions {
        show_path("predictions", p);
    }
    let model = ArnnModel::load(&args.model)?;
    let cfg = model.config;
    let ds = load_dataset(&args.data, args.minmax)?;
    if (ds.c, ds.n) != (cfg.c, cfg.n) {
        bail!(arnn::Error::Config(format!(
            "checkpoint expects c={} n={} but data has c={} n={}",
            cfg.c, cfg.n, ds.c, ds.n
        )));
    }
    let set = if args.all {
        ds.segments
    } else {
        training::split_train_test(&ds.segments, args.split, args.seed)?.test
    };
    let preds = training::predict_all(&model, &set)?;
    if preds.is_empty() {
        bail!(arnn::Error::Data {
            path: args.data.clone(),
            line: None,
            msg: "no segments to evaluate".into(),
        });
    }
    let metrics = Metrics::from_pairs(preds.iter().map(|p| (p.label, p.pred)));
    println!("segments  {}", preds.len());
    show_metrics(&metrics);
    if let Some(path) = &args.predictions {
        let mut csv = String::from("path,label,prob,pred\n");
        for p in &preds {
            csv.push_str(&format!("{},{},{},{}\n", p.id, p.label, p.prob, p.pred));
        }
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug)]
struct GradcheckFailed(Vec<&'static str>);

impl Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradcheckFailed {}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let preset = match args.config {
        PresetArg::Small => Preset::Small,
        PresetArg::Default => Preset::Default,
    };
    let mc = preset.config();
    println!("gradcheck");
    show("config", format!("c={} n={} l={} s={} dropout={}", mc.c, mc.n, mc.l, mc.s, mc.dropout_p));
    show("eps", args.eps);
    show("tol", args.tol);
    show("seed", args.seed);
    if !(args.eps > 0.0 && args.eps.is_finite()) {
        bail!(arnn::Error::Param(format!("eps must be positive, got {}", args.eps)));
    }
    let problem = GradcheckProblem::seeded(mc, args.seed);
    let mut analytic = problem.analytic()?;
    if let Some(name) = &args.corrupt {
        let idx = ArnnModel::param_names()
            .position(|n| n == name)
            .ok_or_else(|| arnn::Error::Param(format!("unknown tensor {name:?}")))?;
        analytic[idx] = analytic[idx].scale(1.01);
    }
    let reports = gradcheck::compare(&analytic, &problem.numeric(args.eps)?);
    println!("{:<8} {:>8} {:>12} {:>12}", "tensor", "entries", "worst_rel", "worst_abs");
    let mut failing = Vec::new();
    for r in &reports {
        let flag = if r.worst_rel <= args.tol { "" } else { "  FAIL" };
        println!("{:<8} {:>8} {:>12.3e} {:>12.3e}{flag}", r.name, r.entries, r.worst_rel, r.worst_abs);
        if r.worst_rel > args.tol {
            failing.push(r.name);
        }
    }
    if failing.is_empty() {
        println!("all {} tensors within tolerance", reports.len());
        Ok(())
    } else {
        Err(GradcheckFailed(failing).into())
    }
}

fn run_bench(args: BenchArgs) -> anyhow::Result<()> {
    println!("bench");
    match &args.grid {
        Some(p) => show_path("grid", p),
        None => show("grid", "default"),
    }
    show("repeats", args.repeats);
    show("warmup", bench::WARMUP);
    show("seed", args.seed);
    show_path("out", &args.out);
    let grid = match &args.grid {
        Some(p) => bench::read_grid(p)?,
        None => bench::default_grid(),
    };
    let records = bench::sweep(&grid, args.repeats, args.seed)?;
    write_atomic(&args.out, bench::records_to_csv(&records).as_bytes())?;
    println!(
        "{:>4} {:>6} {:>4} {:>4} {:>14} {:>14} {:>10}",
        "c", "n", "l", "s", "arnn ms", "full ms", "speedup"
    );
    for pair in records.chunks(2) {
        let (a, f) = (&pair[0], &pair[1]);
        debug_assert!(a.mechanism == Mechanism::Arnn && f.mechanism == Mechanism::FullAttention);
        println!(
            "{:>4} {:>6} {:>4} {:>4} {:>14} {:>14} {:>10.2}",
            a.c,
            a.n,
            a.l,
            a.s,
            format!("{:.3}±{:.3}", a.median_ms(), a.std_ms()),
            format!("{:.3}±{:.3}", f.median_ms(), f.std_ms()),
            f.median() / a.median()
        );
    }
    println!("wrote {} rows to {}", records.len(), args.out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<GradcheckFailed>() {
        return 1;
    }
    match err.downcast_ref::<arnn::Error>() {
        Some(arnn::Error::State(_)) => 2,
        Some(_) => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
