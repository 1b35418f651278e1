use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use toml::Value;

use rollkv::error::{Error, Result};
use rollkv::harness::config::ConfigDoc;
use rollkv::harness::{compare, run};
use rollkv::synth::{StreamGenerator, TraceHeader, TraceReader, TraceWriter};
use rollkv::PolicyKind;

#[derive(Parser)]
#[command(name = "rollkv", version, about = "Bounded KV cache experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic stream to an RKV1 trace.
    Gen(GenArgs),
    /// Run one policy over a stream and report metrics.
    Run(RunArgs),
    /// Run several arms over the same stream.
    Compare(CompareArgs),
    /// Print a trace header.
    Inspect {
        trace: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set stream.novelty_rho=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seeds the stream and the random policy.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EngineFlags {
    /// Replay an RKV1 trace instead of generating a stream.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Initial token budget per (layer, head).
    #[arg(long)]
    b_init: Option<usize>,
    /// Layer allocation temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Treat the first frame as ordinary candidates.
    #[arg(long)]
    no_anchor: bool,
    /// Same budget for every layer.
    #[arg(long)]
    uniform_layers: bool,
    /// Frames between prune events.
    #[arg(long)]
    prune_interval: Option<u32>,
    /// Compare against the unpruned cache every K frames; 0 disables.
    #[arg(long)]
    fidelity_every: Option<u32>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineFlags,
    /// diversity, attn-oracle, random or recency.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineFlags,
    /// One arm per policy, named after it.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
    /// A named arm with its own overrides: `NAME:key=value,key=value`.
    #[arg(long = "arm", value_name = "SPEC")]
    arms: Vec<String>,
    /// Also write the paired per-frame fidelity table here.
    #[arg(long)]
    paired_out: Option<PathBuf>,
}

fn load(common: &Common) -> Result<ConfigDoc> {
    let mut doc = match &common.config {
        Some(path) => ConfigDoc::load(path)?,
        None => ConfigDoc::default(),
    };
    if let Some(seed) = common.seed {
        doc.set_value("seed", Value::Integer(seed as i64))?;
    }
    for s in &common.set {
        doc.apply(s)?;
    }
    Ok(doc)
}

fn apply_engine_flags(doc: &mut ConfigDoc, f: &EngineFlags) -> Result<()> {
    if let Some(t) = &f.trace {
        doc.set_value("trace", Value::String(t.display().to_string()))?;
    }
    if let Some(b) = f.b_init {
        doc.set_value("engine.b_init_per_head", Value::Integer(b as i64))?;
    }
    if let Some(t) = f.tau {
        doc.set_value("engine.tau", Value::Float(t))?;
    }
    if f.no_anchor {
        doc.set_value("engine.anchor_enabled", Value::Boolean(false))?;
    }
    if f.uniform_layers {
        doc.set_value("engine.layer_allocation", Value::String("uniform".into()))?;
    }
    if let Some(k) = f.prune_interval {
        doc.set_value("engine.prune_interval", Value::Integer(k as i64))?;
    }
    if let Some(k) = f.fidelity_every {
        doc.set_value("fidelity_every", Value::Integer(k as i64))?;
    }
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn gen(args: &GenArgs) -> Result<()> {
    let doc = load(&args.common)?;
    let spec = doc.stream_spec()?;
    let out = args.common.out.as_ref().ok_or_else(|| Error::Config("gen needs --out".into()))?;
    let mut w = TraceWriter::create(out, TraceHeader::for_spec(&spec))?;
    for (kv, q) in StreamGenerator::new(spec)? {
        w.write_frame(&kv, &q)?;
    }
    w.finish()?.flush()?;
    Ok(())
}

fn run_cmd(args: &RunArgs) -> Result<()> {
    let mut doc = load(&args.common)?;
    apply_engine_flags(&mut doc, &args.engine)?;
    if let Some(p) = &args.policy {
        p.parse::<PolicyKind>()?;
        doc.set_value("policy", Value::String(p.clone()))?;
    }
    let metrics = run(&doc.resolve()?)?;
    let mut out = output(args.common.out.as_deref())?;
    match args.engine.format {
        Format::Json => writeln!(out, "{}", metrics.to_json()?)?,
        Format::Csv => metrics.write_frame_csv(&mut out)?,
    }
    out.flush()?;
    Ok(())
}

fn compare_cmd(args: &CompareArgs) -> Result<()> {
    let mut doc = load(&args.common)?;
    apply_engine_flags(&mut doc, &args.engine)?;
    let mut arms = Vec::new();
    for p in &args.policies {
        let policy: PolicyKind = p.trim().parse()?;
        let mut d = doc.clone();
        d.set_value("policy", Value::String(policy.name().into()))?;
        arms.push((policy.name().to_string(), d.resolve()?));
    }
    for spec in &args.arms {
        let (name, overrides) = spec.split_once(':').unwrap_or((spec.as_str(), ""));
        let mut d = doc.clone();
        for o in overrides.split(',').filter(|s| !s.trim().is_empty()) {
            d.apply(o)?;
        }
        arms.push((name.to_string(), d.resolve()?));
    }
    if arms.is_empty() {
        return Err(Error::Config("compare needs --policies or --arm".into()));
    }
    let cmp = compare(&arms)?;
    let mut out = output(args.common.out.as_deref())?;
    match args.engine.format {
        Format::Json => writeln!(out, "{}", cmp.to_json()?)?,
        Format::Csv => cmp.write_summary_csv(&mut out)?,
    }
    out.flush()?;
    if let Some(p) = &args.paired_out {
        cmp.write_paired_csv(BufWriter::new(File::create(p)?))?;
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let header = *TraceReader::open(path)?.header();
    println!("{}", serde_json::to_string_pretty(&header).map_err(io::Error::other)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Inspect { trace } => inspect(trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rollkv: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
