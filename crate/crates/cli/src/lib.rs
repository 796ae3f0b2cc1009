//! Command implementations for the `ttvm` binary.
//!
//! Every command writes to a caller-supplied sink and returns a [`CliError`]
//! carrying the exit status, so the whole surface is testable in-process.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use ttvm_core::bench::{self, BenchCase, BenchConfig, BenchReport};
use ttvm_core::cfg::block_cfg;
use ttvm_core::tracer::TraceOp;
use ttvm_core::{assemble, disassemble, validate, CallKind, LinearTrace, Mode, Outcome, Pc, Program, StitchedCode, TierPolicy, Value, VmSession};

/// Failure with the process exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    /// The program ran and failed, or asked-for output does not exist. Exit 1.
    Program(anyhow::Error),
    /// Bad arguments or unreadable input. Exit 2.
    Usage(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Program(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Program(e) | CliError::Usage(e) => write!(f, "{e:#}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn program_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Program(e.into())
}

fn io(e: std::io::Error) -> CliError {
    CliError::Program(e.into())
}

#[derive(Debug, Parser)]
#[command(name = "ttvm", version, about = "Two-tier trace-based JIT for TLA bytecode")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a program and print its result.
    Run(RunArgs),
    /// Compile a program and dump its traces.
    Trace(TraceArgs),
    /// Run the benchmark protocols.
    Bench(BenchArgs),
    /// Export a graph of a program.
    Export(ExportArgs),
    /// Assemble a text listing into raw bytecode.
    Asm(AsmArgs),
    /// Print a listing of a program.
    Disasm(DisasmArgs),
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: ttvm_core::tiers::ParseModeError| e.to_string())
}

fn parse_entry(s: &str) -> Result<CallKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "call" => Ok(CallKind::Call),
        "normal" | "call_normal" => Ok(CallKind::Normal),
        "jit" | "call_jit" => Ok(CallKind::Jit),
        _ => Err(format!("unknown entry kind `{s}` (expected call, normal or jit)")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct Thresholds {
    /// Calls before a method is compiled by tier 1.
    #[arg(long = "t1-threshold")]
    pub t1: Option<u64>,
    /// Back-edges before a loop is traced by tier 2.
    #[arg(long = "t2-threshold")]
    pub t2: Option<u64>,
    /// Guard failures before a bridge is recorded.
    #[arg(long = "bridge-threshold")]
    pub bridge: Option<u64>,
    /// How the program entry is treated in annotated mode.
    #[arg(long, value_parser = parse_entry, default_value = "call")]
    pub entry: CallKind,
    /// Instruction budget per run.
    #[arg(long)]
    pub fuel: Option<u64>,
}

impl Thresholds {
    fn apply(&self, base: TierPolicy) -> TierPolicy {
        TierPolicy {
            t1_call_threshold: self.t1.unwrap_or(base.t1_call_threshold),
            t2_loop_threshold: self.t2.unwrap_or(base.t2_loop_threshold),
            bridge_threshold: self.bridge.unwrap_or(base.bridge_threshold),
            fuel: self.fuel.unwrap_or(base.fuel),
            entry_kind: self.entry,
            ..base
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub file: PathBuf,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub arg: i64,
    #[arg(long, env = "TTVM_MODE", value_parser = parse_mode, default_value = "annotated")]
    pub mode: Mode,
    #[command(flatten)]
    pub thresholds: Thresholds,
    /// Print session counters as JSON on stderr.
    #[arg(long)]
    pub stats: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Linear,
    Stitched,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    pub file: PathBuf,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub arg: i64,
    #[arg(long, env = "TTVM_MODE", value_parser = parse_mode, default_value = "t1")]
    pub mode: Mode,
    /// Thresholds default to 1 so one run compiles everything it touches.
    #[command(flatten)]
    pub thresholds: Thresholds,
    /// Runs before dumping.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[arg(long, value_enum, default_value = "stitched")]
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Programs to benchmark; the built-in suite is used when neither
    /// files nor `--suite` are given.
    pub files: Vec<PathBuf>,
    /// TOML suite file with `[[case]]` tables.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Argument for programs given on the command line.
    #[arg(long, default_value_t = 1000, allow_negative_numbers = true)]
    pub arg: i64,
    /// Modes to run, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub modes: Vec<Mode>,
    #[arg(long, default_value_t = 101)]
    pub iterations: usize,
    #[arg(long = "startup-runs", default_value_t = 100)]
    pub startup_runs: usize,
    #[arg(long, value_enum, default_value = "json")]
    pub out: OutFormat,
    /// Write the report here instead of stdout.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    /// Measure startup by spawning `ttvm run` processes.
    #[arg(long)]
    pub spawn: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum What {
    Cfg,
    Stitched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphFormat {
    Dot,
    Json,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub file: PathBuf,
    #[arg(long, value_enum, default_value = "cfg")]
    pub what: What,
    #[arg(long, value_enum, default_value = "dot")]
    pub format: GraphFormat,
    /// Function entry to export; defaults to the program entry.
    #[arg(long = "at")]
    pub at: Option<Pc>,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub arg: i64,
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AsmArgs {
    pub file: PathBuf,
    /// Output path; defaults to the input with a `.tlb` extension.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DisasmArgs {
    pub file: PathBuf,
}

/// Read a program: `.tlb` files are raw bytecode, anything else is an
/// assembly listing.
pub fn load_program(path: &Path) -> CliResult<Program> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut program = if path.extension().is_some_and(|e| e == "tlb") {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display())).map_err(usage)?;
        Program::new(bytes)
    } else {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(usage)?;
        assemble(&text).map_err(|e| usage(anyhow!("{}: {e}", path.display())))?
    };
    program.source_name = name;
    let report = validate(&program);
    if !report.is_valid() {
        return Err(usage(anyhow!("{}: invalid program: {report}", path.display())));
    }
    Ok(program)
}

fn session(program: Program, policy: TierPolicy) -> CliResult<VmSession> {
    VmSession::new(program, policy).map_err(usage)
}

fn outcome_value(out: Outcome) -> CliResult<Value> {
    match out {
        Outcome::Done(v) => Ok(v),
        Outcome::Error(e) => Err(program_err(anyhow!("{e}"))),
        Outcome::Deopt(pc, _) => Err(program_err(anyhow!("left compiled code at pc {pc}"))),
    }
}

pub fn cmd_run(a: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let program = load_program(&a.file)?;
    let policy = a.thresholds.apply(TierPolicy::with_mode(a.mode));
    let mut s = session(program, policy)?;
    let result = s.run(Value::Int(a.arg));
    if a.stats {
        let json = serde_json::to_string(s.metrics()).map_err(program_err)?;
        writeln!(err, "{json}").map_err(io)?;
    }
    let v = outcome_value(result)?;
    writeln!(out, "{v}").map_err(io)
}

/// Every compiled artefact of a session, in a stable order.
pub struct Compiled {
    pub methods: Vec<(Pc, Arc<StitchedCode>)>,
    pub traces: Vec<Arc<LinearTrace>>,
}

pub fn compile(program: Program, policy: TierPolicy, arg: i64, runs: usize) -> CliResult<Compiled> {
    let mut s = session(program, policy)?;
    for _ in 0..runs.max(1) {
        outcome_value(s.run(Value::Int(arg)))?;
    }
    let methods = s
        .compiled_methods()
        .into_iter()
        .map(|pc| (pc, Arc::clone(s.method(pc).expect("listed method"))))
        .collect::<Vec<_>>();
    let mut traces: Vec<Arc<LinearTrace>> = s
        .compiled_methods()
        .into_iter()
        .map(|pc| Arc::clone(s.method_trace(pc).expect("listed method")))
        .collect();
    traces.extend(s.traces().iter().cloned());
    Ok(Compiled { methods, traces })
}

/// A linear trace as a chain of ops; guard failures point at the op that
/// resumes at their pc when one is in the same trace.
pub fn linear_dot(trace: &LinearTrace, name: &str) -> String {
    let mut out = format!("digraph {name} {{\n  node [shape=box fontname=monospace];\n");
    for (i, op) in trace.ops.iter().enumerate() {
        let label = op.to_string().trim_start().replace('"', "\\\"");
        let _ = writeln!(out, "  o{i} [label=\"{label}\"];");
        if i + 1 < trace.ops.len() {
            let _ = writeln!(out, "  o{i} -> o{};", i + 1);
        }
        if let TraceOp::Guard { guard_id, resume_pc, .. } = op {
            let target = trace.ops.iter().position(|o| !o.is_synthetic() && o.origin_pc() == *resume_pc);
            if let Some(t) = target {
                let _ = writeln!(out, "  o{i} -> o{t} [label=\"g{guard_id}\" style=dashed];");
            }
        }
    }
    out.push_str("}\n");
    out
}

/// Render stitched methods; `export --what stitched` uses the same code.
pub fn render_stitched(methods: &[(Pc, Arc<StitchedCode>)], format: Format) -> CliResult<String> {
    Ok(match format {
        Format::Text => methods
            .iter()
            .map(|(pc, m)| format!("method @{pc}\n{}", m.to_text()))
            .collect::<Vec<_>>()
            .join("\n"),
        Format::Dot => methods.iter().map(|(_, m)| m.to_dot()).collect(),
        Format::Json => {
            let all: Vec<_> = methods.iter().map(|(_, m)| m.to_json()).collect();
            serde_json::to_string_pretty(&all).map_err(program_err)? + "\n"
        }
    })
}

fn render_linear(traces: &[Arc<LinearTrace>], format: Format) -> CliResult<String> {
    Ok(match format {
        Format::Text => traces.iter().map(|t| t.to_text()).collect::<Vec<_>>().join("\n"),
        Format::Dot => traces
            .iter()
            .enumerate()
            .map(|(i, t)| linear_dot(t, &format!("trace{i}")))
            .collect(),
        Format::Json => {
            let all: Vec<&LinearTrace> = traces.iter().map(|t| t.as_ref()).collect();
            serde_json::to_string_pretty(&all).map_err(program_err)? + "\n"
        }
    })
}

fn eager_thresholds(t: &Thresholds, mode: Mode) -> TierPolicy {
    t.apply(TierPolicy::eager(mode))
}

pub fn cmd_trace(a: &TraceArgs, out: &mut dyn Write) -> CliResult {
    let program = load_program(&a.file)?;
    let compiled = compile(program, eager_thresholds(&a.thresholds, a.mode), a.arg, a.runs)?;
    let text = match a.stage {
        Stage::Stitched if compiled.methods.is_empty() => {
            return Err(program_err(anyhow!("no method was compiled by tier 1 in mode {}", a.mode)))
        }
        Stage::Linear if compiled.traces.is_empty() => {
            return Err(program_err(anyhow!("nothing was compiled in mode {}", a.mode)))
        }
        Stage::Stitched => render_stitched(&compiled.methods, a.format)?,
        Stage::Linear => render_linear(&compiled.traces, a.format)?,
    };
    out.write_all(text.as_bytes()).map_err(io)
}

pub fn cmd_export(a: &ExportArgs, out: &mut dyn Write) -> CliResult {
    let program = load_program(&a.file)?;
    let at = a.at.unwrap_or(program.entry_pc);
    let text = match a.what {
        What::Cfg => {
            let cfg = block_cfg(&program, at).map_err(usage)?;
            match a.format {
                GraphFormat::Dot => cfg.to_dot(),
                GraphFormat::Json => serde_json::to_string_pretty(&cfg).map_err(program_err)? + "\n",
            }
        }
        What::Stitched => {
            let policy = TierPolicy::eager(Mode::T1);
            let compiled = compile(program, policy, a.arg, 1)?;
            let methods: Vec<_> = compiled.methods.into_iter().filter(|(pc, _)| a.at.is_none() || *pc == at).collect();
            if methods.is_empty() {
                return Err(program_err(anyhow!("no compiled method at pc {at}")));
            }
            let format = match a.format {
                GraphFormat::Dot => Format::Dot,
                GraphFormat::Json => Format::Json,
            };
            render_stitched(&methods, format)?
        }
    };
    match &a.output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display())).map_err(program_err),
        None => out.write_all(text.as_bytes()).map_err(io),
    }
}

pub fn cmd_asm(a: &AsmArgs, out: &mut dyn Write) -> CliResult {
    let program = load_program(&a.file)?;
    let path = a.output.clone().unwrap_or_else(|| a.file.with_extension("tlb"));
    std::fs::write(&path, &program.code)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(program_err)?;
    writeln!(out, "{} bytes -> {}", program.len(), path.display()).map_err(io)
}

pub fn cmd_disasm(a: &DisasmArgs, out: &mut dyn Write) -> CliResult {
    let program = load_program(&a.file)?;
    let text = disassemble(&program).map_err(program_err)?;
    out.write_all(text.as_bytes()).map_err(io)
}

/// One `[[case]]` table of a suite file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteCase {
    /// Path relative to the suite file.
    pub program: PathBuf,
    pub arg: i64,
    pub modes: Vec<String>,
    pub group: Option<String>,
    pub name: Option<String>,
    #[serde(default)]
    pub entry: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub iterations: Option<usize>,
    pub startup_runs: Option<usize>,
    #[serde(rename = "case")]
    pub cases: Vec<SuiteCase>,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "program".into())
}

fn expand(program: Program, prefix: &str, group: &str, arg: i64, modes: &[Mode], entry: CallKind) -> Vec<BenchCase> {
    let program = Arc::new(program);
    modes
        .iter()
        .map(|&mode| BenchCase {
            name: format!("{prefix}_{mode}"),
            group: group.to_string(),
            program: Arc::clone(&program),
            arg,
            mode,
            entry_kind: entry,
        })
        .collect()
}

pub fn load_suite(path: &Path) -> CliResult<(Suite, Vec<BenchCase>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(usage)?;
    let suite: Suite = toml::from_str(&text).map_err(|e| usage(anyhow!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::new();
    for c in &suite.cases {
        let program = load_program(&base.join(&c.program))?;
        let modes = c.modes.iter().map(|m| parse_mode(m).map_err(|e| usage(anyhow!(e)))).collect::<CliResult<Vec<_>>>()?;
        let entry = match &c.entry {
            Some(e) => parse_entry(e).map_err(|e| usage(anyhow!(e)))?,
            None => CallKind::Call,
        };
        let s = stem(&c.program);
        let prefix = c.name.clone().unwrap_or_else(|| s.clone());
        let group = c.group.clone().unwrap_or(s);
        cases.extend(expand(program, &prefix, &group, c.arg, &modes, entry));
    }
    Ok((suite, cases))
}

/// Startup protocol with real processes: each run spawns `ttvm run`.
pub fn startup_spawned(exe: PathBuf) -> impl Fn(&BenchCase, &BenchConfig) -> Result<Duration, String> {
    move |case, cfg| {
        let file = std::env::temp_dir().join(format!("ttvm-bench-{}-{}.tlb", std::process::id(), case.name));
        std::fs::write(&file, &case.program.code).map_err(|e| e.to_string())?;
        let entry = match case.entry_kind {
            CallKind::Call => "call",
            CallKind::Normal => "normal",
            CallKind::Jit => "jit",
        };
        let mut total = Duration::ZERO;
        let result = (|| {
            for _ in 0..cfg.startup_runs {
                let t0 = Instant::now();
                let status = Command::new(&exe)
                    .arg("run")
                    .arg(&file)
                    .args(["--arg", &case.arg.to_string(), "--mode", case.mode.name(), "--entry", entry])
                    .args(["--t1-threshold", &cfg.policy.t1_call_threshold.to_string()])
                    .args(["--t2-threshold", &cfg.policy.t2_loop_threshold.to_string()])
                    .args(["--bridge-threshold", &cfg.policy.bridge_threshold.to_string()])
                    .stdout(std::process::Stdio::null())
                    .status()
                    .map_err(|e| e.to_string())?;
                total += t0.elapsed();
                if !status.success() {
                    return Err(format!("spawned run exited with {status}"));
                }
            }
            Ok(total)
        })();
        let _ = std::fs::remove_file(&file);
        result
    }
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = BenchConfig {
        iterations: a.iterations,
        startup_runs: a.startup_runs,
        ..BenchConfig::default()
    };
    let mut cases = Vec::new();
    if let Some(path) = &a.suite {
        let (suite, loaded) = load_suite(path)?;
        cfg.iterations = suite.iterations.unwrap_or(cfg.iterations);
        cfg.startup_runs = suite.startup_runs.unwrap_or(cfg.startup_runs);
        cases.extend(loaded);
    }
    let modes = if a.modes.is_empty() {
        vec![Mode::Interp, Mode::T1, Mode::T2]
    } else {
        a.modes.clone()
    };
    for file in &a.files {
        let program = load_program(file)?;
        let s = stem(file);
        cases.extend(expand(program, &s, &s, a.arg, &modes, CallKind::Call));
    }
    if a.suite.is_none() && a.files.is_empty() {
        cases = bench::default_suite();
        if !a.modes.is_empty() {
            cases.retain(|c| a.modes.contains(&c.mode));
        }
    }
    if cfg.iterations < 2 {
        return Err(usage(anyhow!("--iterations must be at least 2 (the first run is discarded)")));
    }
    let report: BenchReport = if a.spawn {
        let exe = std::env::current_exe().map_err(|e| usage(anyhow!(e)))?;
        bench::run_suite(&cases, &cfg, &startup_spawned(exe))
    } else {
        bench::run_suite(&cases, &cfg, &bench::startup_in_process)
    };
    let text = match a.out {
        OutFormat::Json => report.to_json() + "\n",
        OutFormat::Csv => report.to_csv(),
    };
    match &a.output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display())).map_err(program_err),
        None => out.write_all(text.as_bytes()).map_err(io),
    }
}

/// Dispatch a parsed command line.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match &cli.command {
        Cmd::Run(a) => cmd_run(a, out, err),
        Cmd::Trace(a) => cmd_trace(a, out),
        Cmd::Bench(a) => cmd_bench(a, out),
        Cmd::Export(a) => cmd_export(a, out),
        Cmd::Asm(a) => cmd_asm(a, out),
        Cmd::Disasm(a) => cmd_disasm(a, out),
    }
}
