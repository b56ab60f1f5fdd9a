//! `acckv`: generate traces, replay compression policies, sweep budgets and
//! thresholds, check the uniform-attention identity and evaluate the cost model.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use acckv::cost::{self, CostQuery, LogBase};
use acckv::harness::{self, Budget, InjectedFault, TAU_GRID};
use acckv::trace::{self, GeneratorSpec, Regime, Trace};
use acckv::{CompressionConfig, Error, MergeStrategy, Policy};

#[derive(Parser)]
#[command(name = "acckv", version, about = "Multimodal KV-cache compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic `.avtrace` file.
    Gen(GenArgs),
    /// Compress every layer of a trace with one policy.
    Compress(CompressArgs),
    /// Run a grid of policies, budgets and thresholds; write CSV.
    Sweep(SweepArgs),
    /// Check the redistribution identity on uniform attention for l = 1..=max-l.
    VerifyProof(ProofArgs),
    /// Evaluate the decode-cost model.
    Cost(CostArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    video: usize,
    #[arg(long)]
    audio: usize,
    #[arg(long)]
    text: usize,
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    dk: usize,
    #[arg(long, default_value = "balanced")]
    regime: Regime,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of layers after which the regime's high-layer behaviour starts.
    #[arg(long, default_value_t = 0.5)]
    convergence_start: f64,
    /// Correlation between audio keys and paired video keys.
    #[arg(long, default_value_t = 0.0)]
    av_mixing: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, default_value = "average")]
    merge_strategy: MergeStrategy,
    /// SnapKV observation window.
    #[arg(long, default_value_t = acckv::model::DEFAULT_SNAPKV_WINDOW)]
    window: usize,
    /// First layer evicted by the `-high` eviction policies
    /// (default: half the layers, rounded up).
    #[arg(long)]
    high_layer_start: Option<usize>,
}

#[derive(Args)]
struct CompressArgs {
    trace: PathBuf,
    /// acckv, h2o, snapkv, naive-merge, evict-video, evict-audio,
    /// evict-video-high, evict-audio-high or full.
    #[arg(long, default_value = "acckv")]
    policy: String,
    /// Token count, fraction in (0, 1] or percentage of multimodal tokens.
    #[arg(long, default_value = "0.2")]
    budget: Budget,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[command(flatten)]
    opts: PolicyArgs,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the compacted caches as an `.avkv` file.
    #[arg(long)]
    kv_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    trace: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "acckv")]
    policy: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.2")]
    budget: Vec<Budget>,
    /// Defaults to 0.01, 0.1, 0.2, ..., 1.0.
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    #[command(flatten)]
    opts: PolicyArgs,
    /// CSV destination; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ProofArgs {
    #[arg(long, default_value_t = 256)]
    max_l: usize,
    /// Corrupt one redistributed entry, as `l,row,col`.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    l: u64,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    dk: u64,
    #[arg(long, default_value = "base2")]
    log_base: LogBase,
    #[arg(long)]
    json: bool,
}

/// Raised when a run completes but breaks an invariant.
#[derive(Debug)]
struct InvariantViolation(String);

impl std::fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvariantViolation {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Compress(a) => compress(a),
        Command::Sweep(a) => sweep(a),
        Command::VerifyProof(a) => verify_proof(a),
        Command::Cost(a) => cost_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<InvariantViolation>().is_some() {
        return 5;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Layout(_)) => 2,
        Some(Error::Budget { .. }) => 3,
        Some(_) => 4,
        None if e.downcast_ref::<io::Error>().is_some() => 4,
        None => 2,
    }
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    let mut spec = GeneratorSpec::new(a.video, a.audio, a.text, a.layers, a.dk).regime(a.regime).seed(a.seed);
    spec.convergence_start_fraction = a.convergence_start;
    spec.av_key_mixing = a.av_mixing;
    let t = trace::generate_trace(&spec)?;
    trace::write_trace(&t, &a.output)?;
    println!(
        "wrote {}: {} layers, video {:?}, audio {:?}, text {:?}, d_k {}",
        a.output.display(),
        t.num_layers(),
        t.layout.video(),
        t.layout.audio(),
        t.layout.text(),
        t.d_k
    );
    println!("sha256 {}", sha256_file(&a.output)?);
    Ok(())
}

/// Parses a policy name. `evict-*-high` variants only evict from
/// `high_layer_start` onwards.
fn policy_config(name: &str, opts: &PolicyArgs, num_layers: usize) -> anyhow::Result<CompressionConfig> {
    let (base, gated) = match name.strip_suffix("-high") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let policy: Policy = base.parse()?;
    if gated && !matches!(policy, Policy::EvictModality(_)) {
        return Err(Error::Config(format!("unknown policy {name:?}")).into());
    }
    let mut cfg = CompressionConfig::new(policy, 0, 0.0).with_merge_strategy(opts.merge_strategy);
    cfg.snapkv_window = opts.window;
    if gated {
        cfg.high_layer_start = Some(opts.high_layer_start.unwrap_or(num_layers.div_ceil(2)));
    }
    Ok(cfg)
}

fn read_trace(path: &Path) -> anyhow::Result<Trace> {
    trace::read_trace(path).with_context(|| format!("reading trace {}", path.display()))
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn compress(a: CompressArgs) -> anyhow::Result<()> {
    let t = read_trace(&a.trace)?;
    let mut cfg = policy_config(&a.policy, &a.opts, t.num_layers())?;
    cfg.tau = a.tau;
    let (report, results) = harness::run_trace(&t, cfg, a.budget)?;

    let mut w = output(a.report.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;

    if let Some(path) = &a.kv_out {
        let caches: Vec<_> = results.into_iter().map(|r| r.final_kv).collect();
        trace::write_compacted(&caches, t.d_k, path)?;
    }
    let agg = &report.aggregate;
    eprintln!(
        "{}: {} -> {} rows (ratio {:.4}), budget_k {}",
        report.policy, agg.total_rows, agg.final_rows, agg.retained_token_ratio, report.config.budget_k
    );
    if agg.budget_violations > 0 {
        bail!(InvariantViolation(format!("{} layers exceeded the budget", agg.budget_violations)));
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let t = read_trace(&a.trace)?;
    let configs = a
        .policy
        .iter()
        .map(|p| policy_config(p.trim(), &a.opts, t.num_layers()))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let taus = if a.tau.is_empty() { TAU_GRID.to_vec() } else { a.tau };
    let rows = harness::sweep(&t, &configs, &a.budget, &taus)?;

    let mut csv = csv::Writer::from_writer(output(a.output.as_deref())?);
    for row in &rows {
        csv.serialize(row)?;
    }
    csv.flush()?;

    let violations: usize = rows.iter().map(|r| r.budget_violations).sum();
    if violations > 0 {
        bail!(InvariantViolation(format!("{violations} layer runs exceeded the budget")));
    }
    Ok(())
}

fn parse_fault(s: &str) -> anyhow::Result<InjectedFault> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad fault {s:?}, expected l,row,col")))?;
    match parts[..] {
        [l, row, col] => Ok(InjectedFault { l, row, col }),
        _ => Err(Error::Config(format!("bad fault {s:?}, expected l,row,col")).into()),
    }
}

fn verify_proof(a: ProofArgs) -> anyhow::Result<()> {
    if a.max_l == 0 {
        return Err(Error::Config("max-l must be >= 1".into()).into());
    }
    let fault = a.inject_fault.as_deref().map(parse_fault).transpose()?;
    let report = harness::verify_proof(a.max_l, fault);
    println!("l = 1..={}, tolerance {:e}", report.max_l, report.tolerance);
    println!("worst raw deviation           {:e}", report.worst_raw_deviation);
    println!("worst redistributed deviation {:e}", report.worst_redistributed_deviation);
    for f in report.failures.iter().take(10) {
        println!("FAIL l={} column={} {:?} deviation {:e}", f.l, f.column, f.check, f.deviation);
    }
    if !report.passed() {
        bail!(InvariantViolation(format!("{} checks failed", report.failures.len())));
    }
    println!("PASS");
    Ok(())
}

fn cost_cmd(a: CostArgs) -> anyhow::Result<()> {
    let q = CostQuery::new(a.l, a.n, a.dk)?;
    let raw = cost::cost_raw(&q);
    let oracle = cost::cost_raw_oracle(&q);
    let acc = cost::cost_acckv(&q, a.log_base);
    let s = cost::cost_savings(&q, a.log_base);
    let breakeven = cost::breakeven_tokens(a.l, a.dk, a.log_base);
    let oracle_ok = raw.to_bits() == oracle.to_bits();
    if a.json {
        let v = serde_json::json!({
            "query": q,
            "log_base": a.log_base,
            "cost_raw": raw,
            "cost_raw_oracle": oracle,
            "oracle_match": oracle_ok,
            "cost_acckv": acc,
            "savings": s,
            "breakeven_n": breakeven,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!("cost_raw        {raw}");
        println!("oracle          {}", if oracle_ok { "OK" } else { "MISMATCH" });
        println!("cost_acckv      {acc}");
        println!("savings         {}", s.exact);
        println!("per_token_form  {}", s.per_token_form);
        println!("ratio           {}", s.ratio);
        println!("breakeven_n     {breakeven}");
    }
    if !oracle_ok {
        bail!(InvariantViolation(format!("closed form {raw} != summation {oracle}")));
    }
    Ok(())
}
