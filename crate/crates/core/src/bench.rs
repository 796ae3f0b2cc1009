//! Benchmark protocols and reports.
//!
//! Stable time: one session runs the case `iterations` times; the first run
//! is dropped and the rest are summed. Startup time: `startup_runs` fresh
//! sessions each build and run the case once. Speeds are normalised against
//! the interpreter-only row of the same group.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::bytecode::{assemble, Opcode, Program};
use crate::interp::{CallKind, Outcome, Value};
use crate::programs;
use crate::tiers::{Mode, TierPolicy, VmSession};

pub const SCHEMA_VERSION: u32 = 1;

/// CSV column order. Fixed.
pub const COLUMNS: [&str; 20] = [
    "name",
    "group",
    "mode",
    "entry",
    "arg",
    "result",
    "error",
    "stable_ms",
    "startup_ms",
    "normalized_stable",
    "normalized_startup",
    "trace_ops",
    "guards",
    "compilations",
    "compile_ms",
    "deopts",
    "tier_transitions",
    "decodes",
    "handler_dispatches",
    "inline_ops",
];

#[derive(Clone, Debug)]
pub struct BenchCase {
    pub name: String,
    pub group: String,
    pub program: Arc<Program>,
    pub arg: i64,
    pub mode: Mode,
    pub entry_kind: CallKind,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchConfig {
    pub iterations: usize,
    pub startup_runs: usize,
    /// Thresholds and limits; `mode` and `entry_kind` come from each case.
    pub policy: TierPolicy,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            iterations: 101,
            startup_runs: 100,
            policy: TierPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub name: String,
    pub group: String,
    pub mode: Mode,
    pub entry: CallKind,
    pub arg: i64,
    pub result: Option<String>,
    pub error: Option<String>,
    pub stable_ms: f64,
    pub startup_ms: f64,
    pub normalized_stable: Option<f64>,
    pub normalized_startup: Option<f64>,
    pub trace_ops: usize,
    pub guards: usize,
    pub compilations: usize,
    pub compile_ms: f64,
    pub deopts: u64,
    pub tier_transitions: u64,
    pub decodes: u64,
    pub handler_dispatches: u64,
    pub inline_ops: u64,
}

impl BenchRow {
    fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.name.clone(),
            self.group.clone(),
            self.mode.to_string(),
            format!("{:?}", self.entry).to_lowercase(),
            self.arg.to_string(),
            self.result.clone().unwrap_or_default(),
            self.error.clone().unwrap_or_default(),
            self.stable_ms.to_string(),
            self.startup_ms.to_string(),
            opt(self.normalized_stable),
            opt(self.normalized_startup),
            self.trace_ops.to_string(),
            self.guards.to_string(),
            self.compilations.to_string(),
            self.compile_ms.to_string(),
            self.deopts.to_string(),
            self.tier_transitions.to_string(),
            self.decodes.to_string(),
            self.handler_dispatches.to_string(),
            self.inline_ops.to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub iterations: usize,
    pub startup_runs: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).expect("write to memory");
        for row in &self.rows {
            w.write_record(row.csv_record()).expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn policy_for(case: &BenchCase, cfg: &BenchConfig) -> TierPolicy {
    TierPolicy {
        mode: case.mode,
        entry_kind: case.entry_kind,
        ..cfg.policy
    }
}

/// Time `startup_runs` fresh sessions in this process.
pub fn startup_in_process(case: &BenchCase, cfg: &BenchConfig) -> Result<Duration, String> {
    let policy = policy_for(case, cfg);
    let mut total = Duration::ZERO;
    for _ in 0..cfg.startup_runs {
        let t0 = Instant::now();
        let mut s = VmSession::new(Arc::clone(&case.program), policy).map_err(|e| e.to_string())?;
        let out = s.run(Value::Int(case.arg));
        total += t0.elapsed();
        if let Outcome::Error(e) = out {
            return Err(e.to_string());
        }
    }
    Ok(total)
}

/// Run both protocols for one case. `startup` measures the startup protocol;
/// pass [`startup_in_process`] unless real processes are wanted.
pub fn run_case(
    case: &BenchCase,
    cfg: &BenchConfig,
    startup: &dyn Fn(&BenchCase, &BenchConfig) -> Result<Duration, String>,
) -> BenchRow {
    let mut row = BenchRow {
        name: case.name.clone(),
        group: case.group.clone(),
        mode: case.mode,
        entry: case.entry_kind,
        arg: case.arg,
        result: None,
        error: None,
        stable_ms: 0.0,
        startup_ms: 0.0,
        normalized_stable: None,
        normalized_startup: None,
        trace_ops: 0,
        guards: 0,
        compilations: 0,
        compile_ms: 0.0,
        deopts: 0,
        tier_transitions: 0,
        decodes: 0,
        handler_dispatches: 0,
        inline_ops: 0,
    };
    let mut session = match VmSession::new(Arc::clone(&case.program), policy_for(case, cfg)) {
        Ok(s) => s,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    let mut stable = Duration::ZERO;
    for i in 0..cfg.iterations {
        let t0 = Instant::now();
        let out = session.run(Value::Int(case.arg));
        let dt = t0.elapsed();
        match out {
            Outcome::Done(v) => row.result = Some(v.to_string()),
            Outcome::Error(e) => {
                row.error = Some(e.to_string());
                return row;
            }
            Outcome::Deopt(pc, _) => {
                row.error = Some(format!("unexpected deopt at {pc}"));
                return row;
            }
        }
        if i > 0 {
            stable += dt;
        }
    }
    row.stable_ms = ms(stable);
    let m = session.metrics();
    row.trace_ops = m.total_trace_ops();
    row.guards = m.compilations.iter().map(|c| c.guard_count).sum();
    row.compilations = m.compilations.len();
    row.compile_ms = m.compile_nanos() as f64 / 1e6;
    row.deopts = m.counters.deopts;
    row.tier_transitions = m.counters.tier_transitions;
    row.decodes = m.counters.decodes;
    row.handler_dispatches = m.counters.handler_dispatches;
    row.inline_ops = m.counters.inline_ops;

    match startup(case, cfg) {
        Ok(d) => row.startup_ms = ms(d),
        Err(e) => row.error = Some(e),
    }
    row
}

/// Fill in normalised speeds: interpreter time over row time, per group.
pub fn normalize(rows: &mut [BenchRow]) {
    let groups: Vec<String> = rows.iter().map(|r| r.group.clone()).collect();
    for group in groups {
        let base = rows
            .iter()
            .find(|r| r.group == group && r.mode == Mode::Interp && r.error.is_none())
            .map(|r| (r.stable_ms, r.startup_ms));
        for r in rows.iter_mut().filter(|r| r.group == group) {
            if r.error.is_some() {
                continue;
            }
            if r.mode == Mode::Interp && Some((r.stable_ms, r.startup_ms)) == base {
                r.normalized_stable = Some(1.0);
                r.normalized_startup = Some(1.0);
                continue;
            }
            if let Some((stable, startup)) = base {
                r.normalized_stable = (r.stable_ms > 0.0).then(|| stable / r.stable_ms);
                r.normalized_startup = (r.startup_ms > 0.0).then(|| startup / r.startup_ms);
            }
        }
    }
}

pub fn run_suite(
    cases: &[BenchCase],
    cfg: &BenchConfig,
    startup: &dyn Fn(&BenchCase, &BenchConfig) -> Result<Duration, String>,
) -> BenchReport {
    let mut rows: Vec<BenchRow> = cases.iter().map(|c| run_case(c, cfg, startup)).collect();
    normalize(&mut rows);
    BenchReport {
        schema_version: SCHEMA_VERSION,
        iterations: cfg.iterations,
        startup_runs: cfg.startup_runs,
        rows,
    }
}

fn case(name: &str, group: &str, src: &str, arg: i64, mode: Mode, entry_kind: CallKind) -> BenchCase {
    let mut program = assemble(src).expect("bundled program assembles");
    program.source_name = format!("{name}.tla");
    BenchCase {
        name: name.to_string(),
        group: group.to_string(),
        program: Arc::new(program),
        arg,
        mode,
        entry_kind,
    }
}

/// The five callabit variants, labelled `a` to `e`, plus the
/// interpreter-only anchor.
pub fn callabit_cases(arg: i64) -> Vec<BenchCase> {
    use CallKind::{Call, Jit};
    let g = "callabit";
    vec![
        case("callabit_interp", g, programs::CALLABIT, arg, Mode::Interp, Call),
        case("callabit_a_baseline_interp", g, &programs::callabit(Opcode::CallNormal), arg, Mode::Annotated, Call),
        case("callabit_b_baseline_baseline", g, &programs::callabit(Opcode::Call), arg, Mode::Annotated, Call),
        case("callabit_c_baseline_tracing", g, &programs::callabit(Opcode::CallJit), arg, Mode::Annotated, Call),
        case("callabit_d_tracing_baseline", g, &programs::callabit(Opcode::Call), arg, Mode::Annotated, Jit),
        case("callabit_e_tracing_tracing", g, &programs::callabit(Opcode::CallJit), arg, Mode::T2, Call),
    ]
}

/// The bundled programs in every tier configuration.
pub fn default_suite() -> Vec<BenchCase> {
    let mut out = Vec::new();
    for (name, src, arg) in [("loop", programs::LOOP, 10_000), ("loopabit", programs::LOOPABIT, 300)] {
        for mode in [Mode::Interp, Mode::T1, Mode::T2] {
            out.push(case(&format!("{name}_{mode}"), name, src, arg, mode, CallKind::Call));
        }
    }
    out.extend(callabit_cases(200));
    out
}
