use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bpre_core::experiments::{self, ExperimentConfig, Pipeline};
use bpre_core::golden::golden_suite;
use bpre_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Monte Carlo checks of the conditional limit laws of critical
/// linear-fractional branching processes in random environment.
///
/// Flag values take precedence over the config file, which takes
/// precedence over built-in defaults.
#[derive(Parser, Debug)]
#[command(name = "bpre", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Conditional pgf of Z at the bottlenecks against the limit sampler.
    Theorem1(RunArgs),
    /// Laplace transform of Z_{nt}/O_{nt,n} against 1/(1+lambda)^2.
    Theorem2(RunArgs),
    /// Deviation probabilities and regressions for the convergence lemmas.
    Diagnostics(RunArgs),
    /// Position of the walk minimum and the renewal table.
    Fluctuation(RunArgs),
    /// Draws of the limit variables from the conditioned environments.
    Limits(RunArgs),
    /// Closed-form checks on the critical geometric environment.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON config; unknown keys are rejected.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's replicas per n.
    #[arg(long)]
    replicas: Option<usize>,
    /// Worker threads; defaults to the available hardware threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Format of the per-replica rows.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Also write selftest.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config_path: String,
    /// SHA-256 of the config file bytes.
    config_digest: String,
    seed: u64,
    replicas: usize,
    threads: usize,
    tool_version: String,
    started: String,
    finished: Option<String>,
    status: String,
    outputs: Vec<String>,
    warnings: Vec<String>,
}

/// Exit code plus message.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn load_config(args: &RunArgs) -> Result<(ExperimentConfig, String), Failure> {
    let bytes = fs::read(&args.config).map_err(|e| Failure::usage(format!("cannot read {}: {e}", args.config.display())))?;
    let digest = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect::<String>();
    let text = String::from_utf8(bytes).map_err(|_| Failure::usage("config is not UTF-8"))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(replicas) = args.replicas {
        cfg.replicas = replicas;
    }
    cfg.validate()?;
    Ok((cfg, digest))
}

fn run_pipeline(pipeline: Pipeline, args: &RunArgs) -> Result<(), Failure> {
    let (cfg, digest) = load_config(args)?;
    let threads = match args.threads {
        Some(0) => return Err(Failure::usage("--threads must be positive")),
        Some(t) => t,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Failure::usage(e.to_string()))?;
    fs::create_dir_all(&args.out)?;
    let rows_name = match args.format {
        Format::Csv => "report.csv",
        Format::Json => "report.json",
    };
    let mut manifest = RunManifest {
        command: pipeline.name().into(),
        config_path: args.config.display().to_string(),
        config_digest: digest,
        seed: cfg.seed,
        replicas: cfg.replicas,
        threads,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started: now(),
        finished: None,
        status: "running".into(),
        outputs: [rows_name, "aggregates.json"].iter().map(|f| args.out.join(f).display().to_string()).collect(),
        warnings: Vec::new(),
    };
    let manifest_path = args.out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;

    let result = pool.install(|| experiments::run(pipeline, &cfg));
    manifest.finished = Some(now());
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            manifest.status = format!("failed: {e}");
            write_json(&manifest_path, &manifest)?;
            return Err(e.into());
        }
    };
    let mut out = BufWriter::new(fs::File::create(args.out.join(rows_name))?);
    match args.format {
        Format::Csv => report.write_csv(&mut out)?,
        Format::Json => {
            serde_json::to_writer(&mut out, &report.rows).map_err(|e| Failure::usage(e.to_string()))?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    fs::write(args.out.join("aggregates.json"), report.aggregates_json() + "\n")?;
    manifest.status = "ok".into();
    manifest.warnings = report.warnings.clone();
    write_json(&manifest_path, &manifest)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn selftest(args: &SelftestArgs) -> Result<(), Failure> {
    let suite = golden_suite()?;
    let mut failed = 0;
    for c in &suite {
        println!(
            "{} {:<16} computed {:.17e} expected {:.17e} rel {:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.computed,
            c.expected,
            c.rel_error
        );
        failed += usize::from(!c.passed);
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("selftest.json"), &suite)?;
    }
    if failed > 0 {
        return Err(Failure { code: 3, message: format!("{failed} of {} golden checks failed", suite.len()) });
    }
    println!("{} golden checks passed", suite.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Theorem1(a) => run_pipeline(Pipeline::Theorem1, a),
        Command::Theorem2(a) => run_pipeline(Pipeline::Theorem2, a),
        Command::Diagnostics(a) => run_pipeline(Pipeline::Diagnostics, a),
        Command::Fluctuation(a) => run_pipeline(Pipeline::Fluctuation, a),
        Command::Limits(a) => run_pipeline(Pipeline::Limits, a),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
