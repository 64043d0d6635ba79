use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use radix_compact::bench::{
    default_fixtures, load_fixtures, reports_to_csv, run_bench, run_verify, select_cases, sweep_specs,
    write_fixtures, BenchOptions, SyntheticSpec, VerifyRow, VerifyTolerance,
};
use radix_compact::cost::{predict, CostInputs, SpeedupPrediction};
use radix_compact::trie::encode_binary;
use radix_compact::{
    build_plan, pad_plan, should_enable, BatchFile, DType, ModelConfig, PlanFile, Scalar, DEFAULT_THRESHOLD,
};

#[derive(Parser)]
#[command(name = "radix-compact", version, about = "Prefix-shared token compaction planner and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a compaction plan for a batch file.
    Plan(PlanArgs),
    /// Compare logits and gradients with and without compaction on fixture patterns.
    Verify(VerifyArgs),
    /// Time plan building (and optionally the model) over synthetic batches.
    Bench(BenchArgs),
    /// Predict compression and speedup from model and workload shape.
    Predict(PredictArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanFormat {
    Json,
    Binary,
}

#[derive(Args)]
struct PlanArgs {
    /// Batch JSON: {"token_ids", "position_ids"?, "cu_seqlens"}.
    batch: PathBuf,
    /// Write the plan here.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: PlanFormat,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Pad compact rows to a multiple of this. The binary format stores the unpadded plan.
    #[arg(long, default_value_t = 1)]
    bucket_size: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Fixture directory.
    dir: PathBuf,
    /// Write default fixtures into the directory first.
    #[arg(long)]
    init: bool,
    /// Only these patterns, comma separated.
    #[arg(long, value_delimiter = ',')]
    patterns: Vec<String>,
    #[arg(long, default_value = "f64")]
    dtype: DType,
    /// Weight seed for `--init`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON list of specs, or {"specs": [...], "model": {...}}. Defaults to the B=32 prefix/suffix sweep.
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f64")]
    dtype: DType,
    /// Also time the reference model forward in both modes.
    #[arg(long)]
    forward: bool,
    /// Run each spec through the pipelined scheduler too.
    #[arg(long)]
    pipeline: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// JSON object or list with keys d, d_int, L?, B, P, S, f_c?.
    inputs: Option<PathBuf>,
    #[arg(long)]
    d: Option<u64>,
    #[arg(long)]
    d_int: Option<u64>,
    #[arg(long = "seq-len")]
    seq_len: Option<u64>,
    #[arg(short = 'B', long)]
    batch: Option<u64>,
    #[arg(short = 'P', long)]
    prefix: Option<u64>,
    #[arg(short = 'S', long)]
    suffix: Option<u64>,
    #[arg(long)]
    f_c: Option<f64>,
    #[arg(long)]
    json: bool,
}

enum Failure {
    /// Exit 2: bad input. The message starts with the error name.
    Input(String),
    /// Exit 1: ran fine but a tolerance was not met.
    Tolerance,
}

fn input<E: Display>(e: E) -> Failure {
    Failure::Input(e.to_string())
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("IoError: {}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Input(format!("IoError: {}: {e}", path.display())))
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure::Input(format!("ParseError: {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn check_threshold(t: f64) -> Result<(), Failure> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Failure::Input(format!("InvalidArgument: threshold must be in [0, 1], got {t}")))
    }
}

#[derive(Serialize)]
struct PlanSummary {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "N_compact")]
    n_compact: usize,
    rows: usize,
    gamma: f64,
    enabled: bool,
}

fn cmd_plan(args: PlanArgs) -> Result<(), Failure> {
    check_threshold(args.threshold)?;
    if args.bucket_size == 0 {
        return Err(Failure::Input("InvalidArgument: bucket size must be at least 1".into()));
    }
    let file: BatchFile = parse(&args.batch, &read(&args.batch)?)?;
    let batch = file.into_batch(Default::default()).map_err(input)?;
    let mut plan = build_plan(&batch).map_err(input)?;
    if args.bucket_size > 1 {
        plan = pad_plan(&plan, args.bucket_size).map_err(input)?;
    }
    let enabled = should_enable(&plan, args.threshold);
    if let Some(out) = &args.output {
        match args.format {
            PlanFormat::Json => write(out, to_json(&PlanFile::from(&plan)))?,
            PlanFormat::Binary => write(out, encode_binary(&plan))?,
        }
    }
    let summary = PlanSummary {
        n: plan.n_original(),
        n_compact: plan.n_compact(),
        rows: plan.compact_rows(),
        gamma: plan.gamma(),
        enabled,
    };
    if args.json {
        println!("{}", to_json(&summary));
    } else {
        println!("N={} N'={} gamma={:.3} enabled={}", summary.n, summary.n_compact, summary.gamma, summary.enabled);
    }
    Ok(())
}

fn verify_as<T: Scalar>(args: &VerifyArgs) -> Result<Vec<VerifyRow>, Failure> {
    if args.init {
        fs::create_dir_all(&args.dir).map_err(|e| Failure::Input(format!("IoError: {}: {e}", args.dir.display())))?;
        write_fixtures(&args.dir, &default_fixtures::<f64>(args.seed).map_err(input)?).map_err(input)?;
    }
    let mut fixtures = load_fixtures::<T>(&args.dir).map_err(input)?;
    if !args.patterns.is_empty() {
        fixtures.cases = select_cases(fixtures.cases, &args.patterns).map_err(input)?;
    }
    run_verify(&fixtures, VerifyTolerance::for_dtype::<T>()).map_err(input)
}

fn cmd_verify(args: VerifyArgs) -> Result<(), Failure> {
    let rows = match args.dtype {
        DType::F32 => verify_as::<f32>(&args)?,
        DType::F64 => verify_as::<f64>(&args)?,
    };
    if args.json {
        println!("{}", to_json(&rows));
    } else {
        println!(
            "{:<20} {:>6} {:>4} {:>12} {:>12} {:>12} {:>12} {:>10}  status",
            "pattern", "tokens", "N'", "max|dlogit|", "mean|dlogit|", "max|dgrad|", "mean|dgrad|", "rel|dgrad|"
        );
        for r in &rows {
            println!(
                "{:<20} {:>6} {:>4} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>10.2e}  {}",
                r.pattern,
                r.tokens,
                r.n_compact,
                r.logit_max,
                r.logit_mean,
                r.grad_max,
                r.grad_mean,
                r.grad_rel,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
    }
    if rows.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Tolerance)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BenchFile {
    Specs(Vec<SyntheticSpec>),
    Full { specs: Vec<SyntheticSpec>, model: Option<ModelConfig> },
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    check_threshold(args.threshold)?;
    let (specs, model) = match &args.spec {
        Some(path) => match parse::<BenchFile>(path, &read(path)?)? {
            BenchFile::Specs(specs) => (specs, None),
            BenchFile::Full { specs, model } => (specs, model),
        },
        None => (Vec::new(), None),
    };
    let model = model.unwrap_or_default();
    model.validate().map_err(input)?;
    let specs = if args.spec.is_none() { sweep_specs(model.vocab_size as u32, args.seed) } else { specs };
    let opts = BenchOptions {
        model,
        repeats: args.repeats,
        threshold: args.threshold,
        forward: args.forward,
        seed: args.seed,
        pipeline: args.pipeline,
    };
    let reports = match args.dtype {
        DType::F32 => run_bench::<f32>(&specs, &opts),
        DType::F64 => run_bench::<f64>(&specs, &opts),
    }
    .map_err(input)?;
    let text = if args.json { to_json(&reports) } else { reports_to_csv(&reports) };
    match &args.output {
        Some(out) => write(out, &text)?,
        None => print!("{text}{}", if args.json { "\n" } else { "" }),
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PredictFile {
    One(CostInputs),
    Many(Vec<CostInputs>),
}

#[derive(Serialize)]
struct PredictRow {
    #[serde(flatten)]
    inputs: CostInputs,
    #[serde(flatten)]
    prediction: SpeedupPrediction,
}

fn cmd_predict(args: PredictArgs) -> Result<(), Failure> {
    let inputs = match &args.inputs {
        Some(path) => match parse::<PredictFile>(path, &read(path)?)? {
            PredictFile::One(i) => vec![i],
            PredictFile::Many(v) => v,
        },
        None => {
            let need = |v: Option<u64>, flag: &str| {
                v.ok_or_else(|| Failure::Input(format!("InvalidArgument: --{flag} is required without an inputs file")))
            };
            vec![CostInputs {
                hidden_size: need(args.d, "d")?,
                intermediate_size: need(args.d_int, "d-int")?,
                seq_len: args.seq_len,
                batch: need(args.batch, "batch")?,
                prefix: need(args.prefix, "prefix")?,
                suffix: need(args.suffix, "suffix")?,
                positionwise_fraction: args.f_c,
            }]
        }
    };
    let rows = inputs
        .into_iter()
        .map(|inputs| predict(&inputs).map(|prediction| PredictRow { inputs, prediction }))
        .collect::<Result<Vec<_>, _>>()
        .map_err(input)?;
    if args.json {
        println!("{}", to_json(&rows));
    } else {
        println!("{:>5} {:>6} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7} {:>8}", "B", "P", "S", "d", "L", "f_c", "r", "gamma", "speedup");
        for row in &rows {
            let (i, p) = (&row.inputs, &row.prediction);
            println!(
                "{:>5} {:>6} {:>6} {:>6} {:>6} {:>7.4} {:>7.3} {:>7.3} {:>8.3}",
                i.batch,
                i.prefix,
                i.suffix,
                i.hidden_size,
                i.seq_len(),
                p.f_c,
                p.r,
                p.gamma,
                p.predicted_speedup
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tolerance) => ExitCode::from(1),
        Err(Failure::Input(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
