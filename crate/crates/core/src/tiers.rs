//! Session state: tier policy, call dispatch, hotness profiling, code caches
//! and metrics.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bytecode::{validate, Pc, Program, ValidationReport};
use crate::interp::{CallKind, ErrorKind, Flow, Frame, Outcome, Value, VmError};
use crate::stitcher::{stitch, Cursor, StitchedCode};
use crate::tracer::{
    trace_method, AbortReason, BridgeLink, GuardFailure, GuardId, LinearTrace, RecordLimits, RecordStatus, Recorder,
    TraceKind, TraceOp, TraverseStack, DEFAULT_MAX_TRACE_OPS,
};

pub type TraceId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Never compile.
    Interp,
    /// Baseline only: methods are compiled by traversal and stitching.
    T1,
    /// Loop tracing only.
    T2,
    /// The call opcode chooses the tier of each callee.
    Annotated,
    /// Methods go to tier 1 and loops to tier 2 by hotness alone.
    Auto,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Interp, Mode::T1, Mode::T2, Mode::Annotated, Mode::Auto];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Interp => "interp",
            Mode::T1 => "t1",
            Mode::T2 => "t2",
            Mode::Annotated => "annotated",
            Mode::Auto => "auto",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("unknown mode `{0}` (expected interp, t1, t2, annotated or auto)")]
pub struct ParseModeError(String);

impl FromStr for Mode {
    type Err = ParseModeError;

    fn from_str(s: &str) -> Result<Mode, ParseModeError> {
        match s.to_ascii_lowercase().as_str() {
            "interp" | "interp-only" => Ok(Mode::Interp),
            "t1" | "t1-only" => Ok(Mode::T1),
            "t2" | "t2-only" => Ok(Mode::T2),
            "annotated" => Ok(Mode::Annotated),
            "auto" => Ok(Mode::Auto),
            _ => Err(ParseModeError(s.to_string())),
        }
    }
}

/// How one activation is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    Interp,
    Baseline,
    Tracing,
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HotKind {
    FunctionEntry,
    BackEdge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    T1,
    T2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TierPolicy {
    pub mode: Mode,
    pub t1_call_threshold: u64,
    pub t2_loop_threshold: u64,
    pub bridge_threshold: u64,
    /// Annotation assumed for the program entry in annotated mode.
    pub entry_kind: CallKind,
    pub max_trace_ops: usize,
    pub max_trace_calls: usize,
    pub max_call_depth: usize,
    pub fuel: u64,
}

impl Default for TierPolicy {
    fn default() -> Self {
        TierPolicy {
            mode: Mode::Annotated,
            t1_call_threshold: 2,
            t2_loop_threshold: 100,
            bridge_threshold: 16,
            entry_kind: CallKind::Call,
            max_trace_ops: DEFAULT_MAX_TRACE_OPS,
            max_trace_calls: 32,
            max_call_depth: 400,
            fuel: 100_000_000,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("{0} must be at least 1")]
    ZeroThreshold(&'static str),
}

impl TierPolicy {
    pub fn with_mode(mode: Mode) -> TierPolicy {
        TierPolicy {
            mode,
            ..TierPolicy::default()
        }
    }

    /// Every threshold at 1: compile on first sight.
    pub fn eager(mode: Mode) -> TierPolicy {
        TierPolicy {
            mode,
            t1_call_threshold: 1,
            t2_loop_threshold: 1,
            bridge_threshold: 1,
            ..TierPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for (name, v) in [
            ("t1_call_threshold", self.t1_call_threshold),
            ("t2_loop_threshold", self.t2_loop_threshold),
            ("bridge_threshold", self.bridge_threshold),
        ] {
            if v == 0 {
                return Err(PolicyError::ZeroThreshold(name));
            }
        }
        Ok(())
    }

    pub fn record_limits(&self) -> RecordLimits {
        RecordLimits {
            max_ops: self.max_trace_ops,
            max_calls: self.max_trace_calls,
        }
    }

    pub fn regime_for(&self, kind: CallKind) -> Regime {
        match self.mode {
            Mode::Interp => Regime::Interp,
            Mode::T1 => Regime::Baseline,
            Mode::T2 => Regime::Tracing,
            Mode::Auto => Regime::Auto,
            Mode::Annotated => match kind {
                CallKind::Call => Regime::Baseline,
                CallKind::Normal => Regime::Interp,
                CallKind::Jit => Regime::Tracing,
            },
        }
    }
}

/// A hotness threshold was reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "trigger", content = "pc", rename_all = "snake_case")]
pub enum Trigger {
    Method(Pc),
    Loop(Pc),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CompileKind {
    Method,
    Loop,
    Bridge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CompileRecord {
    pub tier: Tier,
    pub kind: CompileKind,
    pub pc: Pc,
    pub op_count: usize,
    pub guard_count: usize,
    pub segment_count: usize,
    pub nanos: u64,
}

/// Monotone event counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub decodes: u64,
    pub handler_dispatches: u64,
    pub inline_ops: u64,
    pub guard_checks: u64,
    pub deopts: u64,
    pub tier_transitions: u64,
    pub aborts: u64,
}

impl Counters {
    /// Bytecode decodes plus handler calls.
    pub fn dispatch_events(&self) -> u64 {
        self.decodes + self.handler_dispatches
    }

    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            decodes: self.decodes - earlier.decodes,
            handler_dispatches: self.handler_dispatches - earlier.handler_dispatches,
            inline_ops: self.inline_ops - earlier.inline_ops,
            guard_checks: self.guard_checks - earlier.guard_checks,
            deopts: self.deopts - earlier.deopts,
            tier_transitions: self.tier_transitions - earlier.tier_transitions,
            aborts: self.aborts - earlier.aborts,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Metrics {
    #[serde(flatten)]
    pub counters: Counters,
    pub compilations: Vec<CompileRecord>,
    pub abort_log: Vec<(Pc, AbortReason)>,
}

impl Metrics {
    pub fn total_trace_ops(&self) -> usize {
        self.compilations.iter().map(|c| c.op_count).sum()
    }

    pub fn compile_nanos(&self) -> u64 {
        self.compilations.iter().map(|c| c.nanos).sum()
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("invalid program:\n{0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum AttachError {
    #[error("no tier-2 guard g{0}")]
    UnknownGuard(GuardId),
    #[error("guard g{0} already has a bridge")]
    AlreadyAttached(GuardId),
    #[error("bridge starts at {entry_pc} but guard g{guard} resumes at {resume_pc}")]
    EntryMismatch { guard: GuardId, resume_pc: Pc, entry_pc: Pc },
    #[error("trace is not a bridge")]
    NotBridge,
}

/// Work left for the interpreter after compiled code gives up control.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pending {
    RecordBridge(GuardId),
    RecordLoop(Pc),
}

/// How compiled code finished.
#[derive(Clone, Debug, PartialEq)]
pub enum Exit {
    Flow(Flow),
    /// Resume interpreting at `frame.pc`.
    Deopt(Option<Pending>),
}

/// Execution state for one program: caches, profiles and counters.
#[derive(Debug)]
pub struct VmSession {
    program: Arc<Program>,
    policy: TierPolicy,
    headers: Vec<bool>,
    pub(crate) methods: HashMap<Pc, Arc<StitchedCode>>,
    method_traces: HashMap<Pc, Arc<LinearTrace>>,
    pub(crate) loops: HashMap<Pc, TraceId>,
    pub(crate) traces: Vec<Arc<LinearTrace>>,
    pub(crate) guards: Vec<GuardFailure>,
    hotness: HashMap<(Pc, HotKind), u64>,
    blacklist: HashSet<(Pc, Tier)>,
    bridge_blacklist: HashSet<GuardId>,
    traverse: TraverseStack,
    pub(crate) metrics: Metrics,
    fuel_left: u64,
    depth: usize,
}

impl VmSession {
    pub fn new(program: impl Into<Arc<Program>>, policy: TierPolicy) -> Result<VmSession, SessionError> {
        let program = program.into();
        let report = validate(&program);
        if !report.is_valid() {
            return Err(SessionError::Invalid(report));
        }
        policy.validate()?;
        let mut headers = vec![false; program.len()];
        for pc in program.loop_headers() {
            headers[pc] = true;
        }
        Ok(VmSession {
            program,
            policy,
            headers,
            methods: HashMap::new(),
            method_traces: HashMap::new(),
            loops: HashMap::new(),
            traces: Vec::new(),
            guards: Vec::new(),
            hotness: HashMap::new(),
            blacklist: HashSet::new(),
            bridge_blacklist: HashSet::new(),
            traverse: TraverseStack::new(),
            metrics: Metrics::default(),
            fuel_left: policy.fuel,
            depth: 0,
        })
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn program_arc(&self) -> Arc<Program> {
        Arc::clone(&self.program)
    }

    pub fn policy(&self) -> &TierPolicy {
        &self.policy
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn counters(&self) -> Counters {
        self.metrics.counters
    }

    pub fn reset_metrics(&mut self) {
        self.metrics = Metrics::default();
    }

    pub fn traverse_stack(&self) -> &TraverseStack {
        &self.traverse
    }

    pub fn is_header(&self, pc: Pc) -> bool {
        self.headers.get(pc).copied().unwrap_or(false)
    }

    pub fn method(&self, entry: Pc) -> Option<&Arc<StitchedCode>> {
        self.methods.get(&entry)
    }

    pub fn method_trace(&self, entry: Pc) -> Option<&Arc<LinearTrace>> {
        self.method_traces.get(&entry)
    }

    /// Entry pcs of compiled methods, ascending.
    pub fn compiled_methods(&self) -> Vec<Pc> {
        let mut v: Vec<Pc> = self.methods.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn loop_trace(&self, header: Pc) -> Option<&Arc<LinearTrace>> {
        self.loops.get(&header).map(|&id| &self.traces[id])
    }

    /// Every tier-2 trace, loops and bridges, in installation order.
    pub fn traces(&self) -> &[Arc<LinearTrace>] {
        &self.traces
    }

    pub fn guard(&self, id: GuardId) -> Option<&GuardFailure> {
        self.guards.get(id)
    }

    pub fn tier2_guards(&self) -> &[GuardFailure] {
        &self.guards
    }

    pub fn hotness(&self, pc: Pc, kind: HotKind) -> u64 {
        self.hotness.get(&(pc, kind)).copied().unwrap_or(0)
    }

    pub fn is_blacklisted(&self, pc: Pc, tier: Tier) -> bool {
        self.blacklist.contains(&(pc, tier))
    }

    pub fn regime_for(&self, kind: CallKind) -> Regime {
        self.policy.regime_for(kind)
    }

    // -- running --------------------------------------------------------------

    /// Run the program from its entry with `arg` as the only stack value.
    pub fn run(&mut self, arg: Value) -> Outcome {
        let entry = self.program.entry_pc;
        self.run_at(entry, arg)
    }

    /// Run the function at `entry`. The regime of the outermost activation
    /// follows the policy's entry annotation.
    pub fn run_at(&mut self, entry: Pc, arg: Value) -> Outcome {
        self.fuel_left = self.policy.fuel;
        self.depth = 0;
        let regime = self.policy.regime_for(self.policy.entry_kind);
        match self.enter_function(entry, regime, arg) {
            Ok(Flow::Exited(v)) => Outcome::Done(v),
            Ok(Flow::Returned(vals)) => match vals.last() {
                Some(&v) => Outcome::Done(v),
                None => Outcome::Error(VmError::new(entry, ErrorKind::NoReturnValue)),
            },
            Err(e) => Outcome::Error(e),
        }
    }

    /// Execute a call instruction's callee under the regime its annotation
    /// and the session mode select.
    pub fn dispatch_call(&mut self, callee: Pc, kind: CallKind, arg: Value) -> Result<Flow, VmError> {
        if self.depth >= self.policy.max_call_depth {
            return Err(VmError::new(callee, ErrorKind::CallDepthExceeded));
        }
        self.depth += 1;
        let regime = self.policy.regime_for(kind);
        let r = self.enter_function(callee, regime, arg);
        self.depth -= 1;
        r
    }

    fn enter_function(&mut self, entry: Pc, regime: Regime, arg: Value) -> Result<Flow, VmError> {
        let mut frame = Frame::new(entry, arg);
        if matches!(regime, Regime::Baseline | Regime::Auto) {
            if !self.methods.contains_key(&entry) {
                if let Some(trigger) = self.record_hot(entry, HotKind::FunctionEntry) {
                    self.maybe_compile(trigger);
                }
            }
            if let Some(code) = self.methods.get(&entry).cloned() {
                self.metrics.counters.tier_transitions += 1;
                let start = Cursor { segment: 0, offset: 0 };
                match self.run_stitched(&code, start, &mut frame, regime)? {
                    Exit::Flow(flow) => return Ok(flow),
                    Exit::Deopt(pending) => {
                        let rec = self.pending_recorder(pending, &frame);
                        return self.interpret_frame(&mut frame, regime, rec, true);
                    }
                }
            }
        }
        self.interpret_frame(&mut frame, regime, None, false)
    }

    pub(crate) fn charge_fuel(&mut self, pc: Pc) -> Result<(), VmError> {
        if self.fuel_left == 0 {
            return Err(VmError::new(pc, ErrorKind::FuelExhausted));
        }
        self.fuel_left -= 1;
        Ok(())
    }

    pub(crate) fn decode(&self, pc: Pc) -> Result<crate::bytecode::Instruction, VmError> {
        self.program
            .decode_at(pc)
            .map_err(|e| VmError::new(pc, ErrorKind::Decode(e)))
    }

    // -- profiling and compilation ---------------------------------------------

    /// Count one event at `pc`. Returns a trigger exactly once, when the count
    /// reaches the threshold for its kind.
    pub fn record_hot(&mut self, pc: Pc, kind: HotKind) -> Option<Trigger> {
        let threshold = match kind {
            HotKind::FunctionEntry => self.policy.t1_call_threshold,
            HotKind::BackEdge => self.policy.t2_loop_threshold,
        };
        let count = self.hotness.entry((pc, kind)).or_insert(0);
        *count += 1;
        if *count != threshold {
            return None;
        }
        Some(match kind {
            HotKind::FunctionEntry => Trigger::Method(pc),
            HotKind::BackEdge => Trigger::Loop(pc),
        })
    }

    /// Act on a trigger. Method triggers compile immediately. Loop triggers
    /// need a live frame, so they come back as a recording request for the
    /// interpreter. Returns whether there is work for the interpreter.
    pub fn maybe_compile(&mut self, trigger: Trigger) -> Option<Pending> {
        match trigger {
            Trigger::Method(entry) => {
                self.compile_method(entry);
                None
            }
            Trigger::Loop(header) => {
                if self.loops.contains_key(&header) || self.is_blacklisted(header, Tier::T2) {
                    None
                } else {
                    Some(Pending::RecordLoop(header))
                }
            }
        }
    }

    /// Trace and stitch the method at `entry`, caching the result. A failed
    /// compilation blacklists the method.
    pub fn compile_method(&mut self, entry: Pc) -> Option<Arc<StitchedCode>> {
        if let Some(code) = self.methods.get(&entry) {
            return Some(Arc::clone(code));
        }
        if self.is_blacklisted(entry, Tier::T1) {
            return None;
        }
        let t0 = Instant::now();
        let traced = trace_method(&self.program, entry, &mut self.traverse, self.policy.max_trace_ops);
        let trace = match traced {
            Ok(t) => t,
            Err(err) => {
                let reason = match err {
                    crate::tracer::TraceError::Aborted(r) => r,
                    _ => AbortReason::TraceTooLong,
                };
                self.abort(entry, Tier::T1, reason);
                return None;
            }
        };
        let code = match stitch(&trace) {
            Ok(code) => Arc::new(code),
            Err(_) => {
                self.blacklist.insert((entry, Tier::T1));
                self.metrics.counters.aborts += 1;
                return None;
            }
        };
        let nanos = t0.elapsed().as_nanos() as u64;
        self.metrics.compilations.push(CompileRecord {
            tier: Tier::T1,
            kind: CompileKind::Method,
            pc: entry,
            op_count: trace.op_count(),
            guard_count: trace.guard_count(),
            segment_count: code.segments.len(),
            nanos,
        });
        self.method_traces.insert(entry, Arc::new(trace));
        self.methods.insert(entry, Arc::clone(&code));
        Some(code)
    }

    fn abort(&mut self, pc: Pc, tier: Tier, reason: AbortReason) {
        self.blacklist.insert((pc, tier));
        self.metrics.counters.aborts += 1;
        self.metrics.abort_log.push((pc, reason));
    }

    /// Give the trace's guards session-wide ids and store it.
    fn install(&mut self, mut trace: LinearTrace, nanos: u64) -> TraceId {
        let base = self.guards.len();
        for op in &mut trace.ops {
            if let TraceOp::Guard {
                guard_id,
                expected,
                resume_pc,
                ..
            } = op
            {
                *guard_id += base;
                self.guards.push(GuardFailure {
                    guard_id: *guard_id,
                    resume_pc: *resume_pc,
                    expected: *expected,
                    failure_count: 0,
                    bridge: None,
                });
            }
        }
        let (kind, pc) = match trace.kind {
            TraceKind::Tier2Bridge { .. } => (CompileKind::Bridge, trace.entry_pc),
            _ => (CompileKind::Loop, trace.entry_pc),
        };
        self.metrics.compilations.push(CompileRecord {
            tier: Tier::T2,
            kind,
            pc,
            op_count: trace.op_count(),
            guard_count: trace.guard_count(),
            segment_count: 1,
            nanos,
        });
        self.traces.push(Arc::new(trace));
        self.traces.len() - 1
    }

    /// Cache a recorded loop trace under its header.
    pub fn install_loop(&mut self, trace: LinearTrace) -> Option<TraceId> {
        self.install_loop_timed(trace, 0)
    }

    fn install_loop_timed(&mut self, trace: LinearTrace, nanos: u64) -> Option<TraceId> {
        let TraceKind::Tier2Loop { header } = trace.kind else {
            return None;
        };
        if self.loops.contains_key(&header) {
            return None;
        }
        let id = self.install(trace, nanos);
        self.loops.insert(header, id);
        Some(id)
    }

    /// Link a recorded bridge to the tier-2 guard it starts from.
    pub fn attach_bridge(&mut self, guard: GuardId, bridge: LinearTrace) -> Result<TraceId, AttachError> {
        self.attach_bridge_timed(guard, bridge, 0)
    }

    fn attach_bridge_timed(&mut self, guard: GuardId, bridge: LinearTrace, nanos: u64) -> Result<TraceId, AttachError> {
        if !matches!(bridge.kind, TraceKind::Tier2Bridge { .. }) {
            return Err(AttachError::NotBridge);
        }
        let g = self.guards.get(guard).ok_or(AttachError::UnknownGuard(guard))?;
        if g.bridge.is_some() {
            return Err(AttachError::AlreadyAttached(guard));
        }
        if bridge.entry_pc != g.resume_pc {
            return Err(AttachError::EntryMismatch {
                guard,
                resume_pc: g.resume_pc,
                entry_pc: bridge.entry_pc,
            });
        }
        let id = self.install(bridge, nanos);
        self.guards[guard].bridge = Some(BridgeLink::Trace(id));
        Ok(id)
    }

    pub(crate) fn start_loop_recording(&self, header: Pc, frame: &Frame) -> Recorder {
        Recorder::for_loop(header, frame.stack.len(), self.policy.record_limits())
    }

    pub(crate) fn pending_recorder(&self, pending: Option<Pending>, frame: &Frame) -> Option<Recorder> {
        match pending? {
            Pending::RecordLoop(header) => Some(self.start_loop_recording(header, frame)),
            Pending::RecordBridge(g) => Some(Recorder::for_bridge(
                g,
                self.guards[g].resume_pc,
                frame.stack.len(),
                self.policy.record_limits(),
            )),
        }
    }

    pub(crate) fn finish_recording(&mut self, rec: Recorder, status: RecordStatus) {
        let nanos = rec.elapsed_nanos();
        match (rec.kind(), status) {
            (TraceKind::Tier2Loop { .. }, RecordStatus::Closed(trace)) => {
                self.install_loop_timed(trace, nanos);
            }
            (TraceKind::Tier2Bridge { guard }, RecordStatus::Closed(trace)) => {
                if self.attach_bridge_timed(guard, trace, nanos).is_err() {
                    self.bridge_blacklist.insert(guard);
                    self.metrics.counters.aborts += 1;
                }
            }
            (TraceKind::Tier2Loop { header }, RecordStatus::Aborted(reason)) => self.abort(header, Tier::T2, reason),
            (TraceKind::Tier2Bridge { guard }, RecordStatus::Aborted(reason)) => {
                self.bridge_blacklist.insert(guard);
                self.metrics.counters.aborts += 1;
                let pc = self.guards[guard].resume_pc;
                self.metrics.abort_log.push((pc, reason));
            }
            (TraceKind::Tier1Method, _) => unreachable!("method traces are not recorded at run time"),
        }
    }

    pub(crate) fn bridge_blacklisted(&self, guard: GuardId) -> bool {
        self.bridge_blacklist.contains(&guard)
    }

    pub(crate) fn loop_trace_at(&self, pc: Pc) -> Option<TraceId> {
        self.loops.get(&pc).copied()
    }

    pub(crate) fn method_cursor(&self, func: Pc, pc: Pc) -> Option<(Arc<StitchedCode>, Cursor)> {
        let code = self.methods.get(&func)?;
        let cursor = code.cursor_at(pc)?;
        Some((Arc::clone(code), cursor))
    }
}
