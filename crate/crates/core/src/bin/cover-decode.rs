use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cover_decode::baseline::{dcbs_calibrate, dcbs_decode, DCBSCalibration};
use cover_decode::cover::{self, evaluate_paths, CoverConfig, LambdaSchedule, TradeoffRule};
use cover_decode::harness::{self, ExperimentConfig, Method, ReportFormat};
use cover_decode::pac::{self, BoundVariant, HoeffdingSampleSize};
use cover_decode::scorer::{make_longtail_model, sample_dataset, LongTailConfig, TabularARModel};
use cover_decode::{load_traces, save_traces, CalibratedModel, ClusteringConfig, Error, Result, Token, DEFAULT_MAX_NODES};

#[derive(Parser)]
#[command(name = "cover-decode", version, about = "Conformal decoding with cluster-step thresholds")]
struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a long-tail toy model (or load one) and sample traces from it.
    Simulate(SimulateArgs),
    /// Calibrate cluster-step thresholds.
    Calibrate(CalibrateArgs),
    /// Calibrate dynamic conformal beam search thresholds.
    Dcbs(DcbsArgs),
    /// Expand the prediction set of a calibrated model on a toy model.
    Decode(DecodeArgs),
    /// Calibrate one method and score it on held-out traces.
    Evaluate(EvaluateArgs),
    /// Evaluate several methods on the same held-out traces.
    Compare(CompareArgs),
    /// Finite-sample non-coverage bound for a calibrated model.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Sample from an existing model document instead of building one.
    #[arg(long)]
    ar_model: Option<PathBuf>,
    /// Generator configuration document; replaces the shape flags below.
    #[arg(long, conflicts_with = "ar_model")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    head: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 0.05)]
    tail_mass: f64,
    #[arg(long, default_value_t = 3.0)]
    head_skew: f64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Where to write the generated model document.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Where to write the generator configuration (lists the tail tokens).
    #[arg(long)]
    config_out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Scale lambda by each pair's share of calibration traces.
    #[arg(long)]
    lambda_count_scaled: bool,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 2000)]
    budget: usize,
    #[arg(long)]
    increment: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 1)]
    bucket_width: usize,
    #[arg(long, default_value_t = 20)]
    min_count: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
    tau_grid: Vec<f64>,
    #[arg(long, value_enum, default_value_t = RuleArg::RaiseOnly)]
    tradeoff_rule: RuleArg,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Also write the optimizer audit log here.
    #[arg(long)]
    audit_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    RaiseOnly,
    AnchorTransfer,
}

#[derive(Args)]
struct DcbsArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
}

#[derive(Args)]
struct DecodeArgs {
    /// Cluster-step model from `calibrate`.
    #[arg(long, conflicts_with = "dcbs")]
    model: Option<PathBuf>,
    /// Thresholds from `dcbs`.
    #[arg(long)]
    dcbs: Option<PathBuf>,
    #[arg(long)]
    ar_model: PathBuf,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_NODES)]
    max_nodes: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    ar_model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// Tail tokens for the retention metric, e.g. `4-19` or `4,7,9`.
    #[arg(long)]
    tail_tokens: Option<String>,
    /// Generator configuration written by `simulate`; supplies tail tokens.
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Experiment configuration document; replaces the method flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 1)]
    bucket_width: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 8)]
    beam_width: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, default_value = "cover")]
    method: String,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, value_delimiter = ',', default_value = "dcbs,cover")]
    methods: Vec<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    zeta: f64,
    #[arg(long, value_enum, default_value_t = VariantArg::Main)]
    variant: VariantArg,
    #[arg(long, value_enum, default_value_t = HoeffdingArg::PerPair)]
    hoeffding_n: HoeffdingArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Main,
    Appendix,
}

#[derive(Clone, Copy, ValueEnum)]
enum HoeffdingArg {
    PerPair,
    Total,
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn parse_tokens(spec: &str) -> Result<BTreeSet<Token>> {
    let bad = || Error::InvalidInput(format!("bad token list `{spec}`"));
    let mut out = BTreeSet::new();
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u32, u32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                out.extend((a..=b).map(Token));
            }
            None => {
                out.insert(Token(part.trim().parse().map_err(|_| bad())?));
            }
        }
    }
    Ok(out)
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let model = match &args.ar_model {
        Some(p) => TabularARModel::load(p)?,
        None => {
            let cfg = match &args.config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => {
                    let mut cfg = LongTailConfig::standard(args.vocab, args.head, args.max_len, args.tail_mass, cli.seed);
                    cfg.head_skew = args.head_skew;
                    cfg
                }
            };
            if let Some(p) = &args.config_out {
                fs::write(p, serde_json::to_string_pretty(&cfg)?)?;
            }
            make_longtail_model(&cfg)?
        }
    };
    if let Some(p) = &args.model_out {
        model.save(p)?;
    }
    let traces = sample_dataset(&model, args.n, cli.seed)?;
    match &cli.out {
        Some(p) => save_traces(p, &traces)?,
        None => {
            let mut w = BufWriter::new(std::io::stdout().lock());
            for t in &traces {
                serde_json::to_writer(&mut w, t)?;
                writeln!(w)?;
            }
        }
    }
    log::info!("sampled {} traces", traces.len());
    Ok(())
}

fn calibrate(cli: &Cli, args: &CalibrateArgs) -> Result<()> {
    let traces = load_traces(&args.traces)?;
    let config = CoverConfig {
        alpha: args.alpha,
        gamma: args.gamma,
        lambda: if args.lambda_count_scaled {
            LambdaSchedule::CountScaled(args.lambda)
        } else {
            LambdaSchedule::Uniform(args.lambda)
        },
        clustering: ClusteringConfig {
            clusters: args.clusters,
            min_count: args.min_count,
            bucket_width: args.bucket_width,
            tau_grid: args.tau_grid.clone(),
            seed: cli.seed,
            ..ClusteringConfig::default()
        },
        budget: args.budget,
        increment: args.increment,
        init_coord: None,
        rule: match args.tradeoff_rule {
            RuleArg::RaiseOnly => TradeoffRule::RaiseOnly,
            RuleArg::AnchorTransfer => TradeoffRule::AnchorTransfer,
        },
        split_seed: cli.seed,
        optimizer_seed: cli.seed,
        max_len: args.max_len,
    };
    let result = cover::calibrate(&traces, &config)?;
    if let Some(p) = &args.audit_out {
        fs::write(p, serde_json::to_string_pretty(&result.outcome)?)?;
    }
    log::info!(
        "calibration coverage {}/{}; {} accepted trade-offs",
        result.model.counts.calibration_covered,
        result.model.counts.calibration,
        result.model.counts.accepted_tradeoffs
    );
    write_output(cli.out.as_deref(), &result.model.to_json()?)
}

fn dcbs(cli: &Cli, args: &DcbsArgs) -> Result<()> {
    let traces = load_traces(&args.traces)?;
    let calib = dcbs_calibrate(&traces, args.alpha, args.max_len)?;
    write_output(cli.out.as_deref(), &serde_json::to_string_pretty(&calib)?)
}

fn decode(cli: &Cli, args: &DecodeArgs) -> Result<()> {
    let scorer = TabularARModel::load(&args.ar_model)?;
    let set = match (&args.model, &args.dcbs) {
        (Some(p), None) => {
            let model = CalibratedModel::load(p)?;
            cover::cover_decode(&scorer, &model, args.max_len.unwrap_or(model.max_len), args.max_nodes)?
        }
        (None, Some(p)) => {
            let calib: DCBSCalibration = serde_json::from_str(&fs::read_to_string(p)?)?;
            dcbs_decode(&scorer, &calib, args.max_len.unwrap_or(calib.max_len()), args.max_nodes)?
        }
        _ => return Err(Error::InvalidInput("pass exactly one of --model and --dcbs".into())),
    };
    if set.truncated {
        log::warn!("expansion stopped at {} nodes; the set is incomplete", set.expanded_nodes);
    }
    let mut text = String::new();
    for s in &set.sequences {
        text += &serde_json::to_string(s)?;
        text.push('\n');
    }
    write_output(cli.out.as_deref(), &text)?;
    log::info!("{} sequences, {} expanded nodes", set.len(), set.expanded_nodes);
    Ok(())
}

struct Loaded {
    scorer: TabularARModel,
    calib: Vec<cover_decode::ScoreTrace>,
    eval: Vec<cover_decode::ScoreTrace>,
    tail: BTreeSet<Token>,
    base: ExperimentConfig,
    format: ReportFormat,
}

fn load_run(cli: &Cli, args: &RunArgs) -> Result<Loaded> {
    let tail = match (&args.tail_tokens, &args.generator) {
        (Some(s), _) => parse_tokens(s)?,
        (None, Some(p)) => {
            let cfg: LongTailConfig = serde_json::from_str(&fs::read_to_string(p)?)?;
            cfg.tail_tokens
        }
        (None, None) => BTreeSet::new(),
    };
    let base = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => ExperimentConfig {
            alpha: args.alpha,
            lambda: LambdaSchedule::Uniform(args.lambda),
            clusters: args.clusters,
            bucket_width: args.bucket_width,
            max_len: args.max_len,
            beam_width: args.beam_width,
            seed: cli.seed,
            ..ExperimentConfig::default()
        },
    };
    Ok(Loaded {
        scorer: TabularARModel::load(&args.ar_model)?,
        calib: load_traces(&args.calib)?,
        eval: load_traces(&args.eval)?,
        tail,
        base,
        format: match args.format {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        },
    })
}

fn emit(cli: &Cli, format: ReportFormat, json: impl FnOnce() -> Result<String>, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    match (&cli.out, format) {
        (Some(p), _) => write(p),
        (None, ReportFormat::Json) => write_output(None, &(json()? + "\n")),
        (None, ReportFormat::Csv) => Err(Error::InvalidInput("csv output needs --out".into())),
    }
}

fn evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let run = load_run(cli, &args.run)?;
    let config = ExperimentConfig {
        method: args.method.parse()?,
        ..run.base.clone()
    };
    let (_, report) = harness::run_experiment(&config, &run.scorer, &run.calib, &run.eval, None, &run.tail)?;
    emit(
        cli,
        run.format,
        || Ok(serde_json::to_string_pretty(&report)?),
        |p| harness::emit_report(&report, run.format, p),
    )
}

fn compare(cli: &Cli, args: &CompareArgs) -> Result<()> {
    let run = load_run(cli, &args.run)?;
    let mut reports = Vec::new();
    for m in &args.methods {
        let method: Method = m.parse()?;
        let config = ExperimentConfig {
            method,
            ..run.base.clone()
        };
        let (_, report) = harness::run_experiment(&config, &run.scorer, &run.calib, &run.eval, None, &run.tail)?;
        reports.push(report);
    }
    let cmp = harness::compare(reports)?;
    emit(
        cli,
        run.format,
        || Ok(serde_json::to_string_pretty(&cmp)?),
        |p| harness::emit_comparison(&cmp, run.format, p),
    )
}

fn bounds(cli: &Cli, args: &BoundsArgs) -> Result<()> {
    let model = CalibratedModel::load(&args.model)?;
    let traces = load_traces(&args.traces)?;
    let refs: Vec<_> = traces.iter().collect();
    let records = evaluate_paths(&refs, &model.rule(), &model.assignment);
    let stats = pac::pair_stats_from_records(&records, model.assignment.clusters, model.max_len, args.delta, args.zeta)?;
    let (variant, base) = match args.variant {
        VariantArg::Main => (BoundVariant::Main, model.alpha),
        VariantArg::Appendix => (BoundVariant::Appendix, pac::empirical_noncoverage(&records)),
    };
    let hoeffding_n = match args.hoeffding_n {
        HoeffdingArg::PerPair => HoeffdingSampleSize::PerPair,
        HoeffdingArg::Total => HoeffdingSampleSize::Total,
    };
    let report = pac::full_path_bound(&stats, base, variant, hoeffding_n)?;
    write_output(cli.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Calibrate(a) => calibrate(cli, a),
        Command::Dcbs(a) => dcbs(cli, a),
        Command::Decode(a) => decode(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Compare(a) => compare(cli, a),
        Command::Bounds(a) => bounds(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
