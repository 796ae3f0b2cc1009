//! Trace recording.
//!
//! Tier 1 records a whole method abstractly by walking both arms of every
//! branch ([`trace_method`]). Tier 2 records the path the interpreter actually
//! takes through a hot loop ([`Recorder`], [`trace_loop`]).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::bytecode::{DecodeError, Opcode, Pc, Program};
use crate::interp::{exec_handler, handler_body, Effect, ErrorKind, Frame, MicroOp, VmError};
use crate::tiers::VmSession;

pub type GuardId = usize;
pub type TokenId = usize;

// ---------------------------------------------------------------------------
// Traverse stack
// ---------------------------------------------------------------------------

/// Handle to an interned traverse-stack node. Two handles are the same node
/// exactly when they compare equal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StackRef(u32);

impl StackRef {
    pub const EMPTY: StackRef = StackRef(0);
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("pop of empty traverse stack")]
pub struct EmptyStack;

/// Persistent stack of pending pcs with hash-consed nodes.
#[derive(Clone, Debug)]
pub struct TraverseStack {
    // nodes[0] is the empty stack; its contents are never read.
    nodes: Vec<(Pc, StackRef)>,
    memo: HashMap<(Pc, StackRef), StackRef>,
}

impl Default for TraverseStack {
    fn default() -> Self {
        Self::new()
    }
}

impl TraverseStack {
    pub fn new() -> TraverseStack {
        TraverseStack {
            nodes: vec![(0, StackRef::EMPTY)],
            memo: HashMap::new(),
        }
    }

    pub fn empty(&self) -> StackRef {
        StackRef::EMPTY
    }

    pub fn t_push(&mut self, pc: Pc, next: StackRef) -> StackRef {
        let key = (pc, next);
        if let Some(&node) = self.memo.get(&key) {
            return node;
        }
        let node = StackRef(self.nodes.len() as u32);
        self.nodes.push(key);
        self.memo.insert(key, node);
        node
    }

    pub fn t_pop(&self, stack: StackRef) -> Result<(Pc, StackRef), EmptyStack> {
        if self.t_is_empty(stack) {
            return Err(EmptyStack);
        }
        Ok(self.nodes[stack.0 as usize])
    }

    pub fn t_is_empty(&self, stack: StackRef) -> bool {
        stack == StackRef::EMPTY
    }

    /// Number of non-empty nodes ever allocated.
    pub fn node_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn depth(&self, mut stack: StackRef) -> usize {
        let mut n = 0;
        while let Ok((_, next)) = self.t_pop(stack) {
            n += 1;
            stack = next;
        }
        n
    }

    pub fn to_vec(&self, mut stack: StackRef) -> Vec<Pc> {
        let mut out = Vec::new();
        while let Ok((pc, next)) = self.t_pop(stack) {
            out.push(pc);
            stack = next;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Trace representation
// ---------------------------------------------------------------------------

/// What a return terminator hands back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "slot", content = "count", rename_all = "snake_case")]
pub enum RetSlot {
    /// `RET k`: the top `k` values go to the caller.
    Ret(u8),
    /// `EXIT`: the top value ends the program.
    Exit,
}

impl RetSlot {
    pub fn opcode(self) -> Opcode {
        match self {
            RetSlot::Ret(_) => Opcode::Ret,
            RetSlot::Exit => Opcode::Exit,
        }
    }

    pub fn operand(self) -> Option<u8> {
        match self {
            RetSlot::Ret(k) => Some(k),
            RetSlot::Exit => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceOp {
    /// Call to the opcode's handler.
    CallHandler {
        origin_pc: Pc,
        opcode: Opcode,
        #[serde(skip_serializing_if = "Option::is_none")]
        operand: Option<u8>,
    },
    /// Checks the branch condition at a `JUMP_IF`. `expected` is whether the
    /// branch is taken on the recorded path; `resume_pc` is the other arm.
    Guard {
        origin_pc: Pc,
        guard_id: GuardId,
        expected: bool,
        resume_pc: Pc,
        marked: bool,
    },
    /// One micro-op of an inlined handler body.
    Inline { origin_pc: Pc, op: MicroOp },
    /// Cut point: control continues at `target_pc`, which was traced before.
    /// Synthetic emits mark a fall-through (or a popped arm) into an already
    /// visited pc and carry that pc as their origin.
    EmitJump {
        origin_pc: Pc,
        target_pc: Pc,
        synthetic: bool,
    },
    /// Cut point at `RET`/`EXIT`.
    EmitRet { origin_pc: Pc, slot: RetSlot },
    JumpOp {
        origin_pc: Pc,
        target_pc: Pc,
        #[serde(skip_serializing_if = "Option::is_none")]
        token: Option<TokenId>,
        synthetic: bool,
    },
    RetOp { origin_pc: Pc, slot: RetSlot },
}

impl TraceOp {
    pub fn origin_pc(&self) -> Pc {
        match *self {
            TraceOp::CallHandler { origin_pc, .. }
            | TraceOp::Guard { origin_pc, .. }
            | TraceOp::Inline { origin_pc, .. }
            | TraceOp::EmitJump { origin_pc, .. }
            | TraceOp::EmitRet { origin_pc, .. }
            | TraceOp::JumpOp { origin_pc, .. }
            | TraceOp::RetOp { origin_pc, .. } => origin_pc,
        }
    }

    pub fn is_emit(&self) -> bool {
        matches!(self, TraceOp::EmitJump { .. } | TraceOp::EmitRet { .. })
    }

    pub fn is_terminator(&self) -> bool {
        matches!(self, TraceOp::JumpOp { .. } | TraceOp::RetOp { .. })
    }

    pub fn is_marked_guard(&self) -> bool {
        matches!(self, TraceOp::Guard { marked: true, .. })
    }

    /// Ops with a `synthetic` flag stand for no instruction of their own.
    pub fn is_synthetic(&self) -> bool {
        matches!(
            self,
            TraceOp::EmitJump { synthetic: true, .. } | TraceOp::JumpOp { synthetic: true, .. }
        )
    }

    pub fn guard_failure(&self) -> Option<GuardFailure> {
        match *self {
            TraceOp::Guard {
                guard_id,
                expected,
                resume_pc,
                ..
            } => Some(GuardFailure {
                guard_id,
                resume_pc,
                expected,
                failure_count: 0,
                bridge: None,
            }),
            _ => None,
        }
    }
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceOp::CallHandler {
                origin_pc,
                opcode,
                operand,
            } => match operand {
                Some(n) => write!(f, "{origin_pc:>4}: call {opcode} {n}"),
                None => write!(f, "{origin_pc:>4}: call {opcode}"),
            },
            TraceOp::Guard {
                origin_pc,
                guard_id,
                expected,
                resume_pc,
                marked,
            } => write!(
                f,
                "{origin_pc:>4}: guard g{guard_id} expect={expected} resume={resume_pc}{}",
                if *marked { " marked" } else { "" }
            ),
            TraceOp::Inline { origin_pc, op } => write!(f, "{origin_pc:>4}: {op:?}"),
            TraceOp::EmitJump {
                origin_pc,
                target_pc,
                synthetic,
            } => write!(
                f,
                "{origin_pc:>4}: emit_jump {target_pc}{}",
                if *synthetic { " (fall-through)" } else { "" }
            ),
            TraceOp::EmitRet { origin_pc, slot } => write!(f, "{origin_pc:>4}: emit_ret {slot:?}"),
            TraceOp::JumpOp {
                origin_pc,
                target_pc,
                token,
                ..
            } => match token {
                Some(t) => write!(f, "{origin_pc:>4}: jump {target_pc} (token {t})"),
                None => write!(f, "{origin_pc:>4}: jump {target_pc}"),
            },
            TraceOp::RetOp { origin_pc, slot } => write!(f, "{origin_pc:>4}: ret {slot:?}"),
        }
    }
}

/// Where a failing guard continues once compiled code exists for its exit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "to", content = "index", rename_all = "snake_case")]
pub enum BridgeLink {
    /// Index of a segment in the same stitched method.
    Segment(usize),
    /// Id of a tier-2 trace in the session.
    Trace(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GuardFailure {
    pub guard_id: GuardId,
    pub resume_pc: Pc,
    pub expected: bool,
    pub failure_count: u64,
    pub bridge: Option<BridgeLink>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct InputArgs {
    pub entry_pc: Pc,
    /// Operand-stack depth at entry, when known. Method traces start with the
    /// single argument.
    pub stack_depth: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "tier", rename_all = "snake_case")]
pub enum TraceKind {
    Tier1Method,
    Tier2Loop { header: Pc },
    Tier2Bridge { guard: GuardId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LinearTrace {
    pub kind: TraceKind,
    pub entry_pc: Pc,
    pub inputargs: InputArgs,
    pub ops: Vec<TraceOp>,
}

impl LinearTrace {
    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    pub fn guard_count(&self) -> usize {
        self.ops.iter().filter(|op| matches!(op, TraceOp::Guard { .. })).count()
    }

    pub fn marked_guard_count(&self) -> usize {
        self.ops.iter().filter(|op| op.is_marked_guard()).count()
    }

    pub fn emit_count(&self) -> usize {
        self.ops.iter().filter(|op| op.is_emit()).count()
    }

    pub fn guards(&self) -> impl Iterator<Item = GuardFailure> + '_ {
        self.ops.iter().filter_map(TraceOp::guard_failure)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:?} entry={}\n", self.kind, self.entry_pc);
        for op in &self.ops {
            out.push_str(&op.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbortReason {
    TraceTooLong,
    LeftLoop,
    CallDepth,
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbortReason::TraceTooLong => "trace-too-long",
            AbortReason::LeftLoop => "left-loop",
            AbortReason::CallDepth => "call-depth",
        })
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("trace aborted: {0}")]
    Aborted(AbortReason),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Vm(#[from] VmError),
}

// ---------------------------------------------------------------------------
// Tier 1: method traversal
// ---------------------------------------------------------------------------

pub const DEFAULT_MAX_TRACE_OPS: usize = 4096;

/// Record every path of the method starting at `entry` into one linear trace.
///
/// The walk follows the fall-through arm of each `JUMP_IF`, pushing the
/// target on the traverse stack behind a marked guard. A `JUMP` to a pc not yet
/// traced is followed; anything that reaches a traced pc, and every
/// `RET`/`EXIT`, ends the current path with an emit op, after which the walk
/// resumes at the most recently pushed arm.
pub fn trace_method(
    program: &Program,
    entry: Pc,
    stack: &mut TraverseStack,
    max_ops: usize,
) -> Result<LinearTrace, TraceError> {
    let mut ops = Vec::new();
    let mut visited = HashSet::new();
    let mut pending = stack.empty();
    let mut next_guard: GuardId = 0;
    let mut pc = entry;

    loop {
        if ops.len() >= max_ops {
            return Err(TraceError::Aborted(AbortReason::TraceTooLong));
        }
        let mut path_done = false;
        if !visited.insert(pc) {
            ops.push(TraceOp::EmitJump {
                origin_pc: pc,
                target_pc: pc,
                synthetic: true,
            });
            path_done = true;
        } else {
            let instr = program.decode_at(pc)?;
            match instr.opcode {
                Opcode::JumpIf => {
                    let target = instr.operand_or_zero() as Pc;
                    ops.push(TraceOp::Guard {
                        origin_pc: pc,
                        guard_id: next_guard,
                        expected: false,
                        resume_pc: target,
                        marked: true,
                    });
                    next_guard += 1;
                    pending = stack.t_push(target, pending);
                    pc = instr.next_pc();
                }
                Opcode::Jump => {
                    let target = instr.operand_or_zero() as Pc;
                    if visited.contains(&target) {
                        ops.push(TraceOp::EmitJump {
                            origin_pc: pc,
                            target_pc: target,
                            synthetic: false,
                        });
                        path_done = true;
                    } else {
                        ops.push(TraceOp::CallHandler {
                            origin_pc: pc,
                            opcode: Opcode::Jump,
                            operand: instr.operand,
                        });
                        pc = target;
                    }
                }
                Opcode::Ret | Opcode::Exit => {
                    let slot = match instr.opcode {
                        Opcode::Ret => RetSlot::Ret(instr.operand_or_zero()),
                        _ => RetSlot::Exit,
                    };
                    ops.push(TraceOp::EmitRet { origin_pc: pc, slot });
                    path_done = true;
                }
                _ => {
                    ops.push(TraceOp::CallHandler {
                        origin_pc: pc,
                        opcode: instr.opcode,
                        operand: instr.operand,
                    });
                    pc = instr.next_pc();
                }
            }
        }
        if path_done {
            match stack.t_pop(pending) {
                Ok((next_pc, rest)) => {
                    pc = next_pc;
                    pending = rest;
                }
                Err(EmptyStack) => break,
            }
        }
    }

    Ok(LinearTrace {
        kind: TraceKind::Tier1Method,
        entry_pc: entry,
        inputargs: InputArgs {
            entry_pc: entry,
            stack_depth: Some(1),
        },
        ops,
    })
}

// ---------------------------------------------------------------------------
// Tier 2: runtime recording
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordLimits {
    pub max_ops: usize,
    /// Residual calls allowed in one trace.
    pub max_calls: usize,
}

impl Default for RecordLimits {
    fn default() -> Self {
        RecordLimits {
            max_ops: DEFAULT_MAX_TRACE_OPS,
            max_calls: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecordStatus {
    Closed(LinearTrace),
    Aborted(AbortReason),
}

/// Builds a tier-2 trace from the instructions the interpreter executes.
///
/// Handler bodies are copied into the trace: a taken or untaken branch
/// becomes a guard on the observed direction, a `JUMP` disappears, and a
/// call stays a call. Guard ids are local to the trace until installed.
#[derive(Clone, Debug)]
pub struct Recorder {
    kind: TraceKind,
    entry_pc: Pc,
    entry_depth: usize,
    ops: Vec<TraceOp>,
    next_guard: GuardId,
    calls: usize,
    last_pc: Pc,
    limits: RecordLimits,
    started: Instant,
}

impl Recorder {
    pub fn for_loop(header: Pc, stack_depth: usize, limits: RecordLimits) -> Recorder {
        Recorder::new(TraceKind::Tier2Loop { header }, header, stack_depth, limits)
    }

    pub fn for_bridge(guard: GuardId, resume_pc: Pc, stack_depth: usize, limits: RecordLimits) -> Recorder {
        Recorder::new(TraceKind::Tier2Bridge { guard }, resume_pc, stack_depth, limits)
    }

    fn new(kind: TraceKind, entry_pc: Pc, entry_depth: usize, limits: RecordLimits) -> Recorder {
        Recorder {
            kind,
            entry_pc,
            entry_depth,
            ops: Vec::new(),
            next_guard: 0,
            calls: 0,
            last_pc: entry_pc,
            limits,
            started: Instant::now(),
        }
    }

    pub fn kind(&self) -> TraceKind {
        self.kind
    }

    pub fn elapsed_nanos(&self) -> u64 {
        self.started.elapsed().as_nanos() as u64
    }

    fn is_bridge(&self) -> bool {
        matches!(self.kind, TraceKind::Tier2Bridge { .. })
    }

    fn finish(&mut self, last: TraceOp) -> RecordStatus {
        self.ops.push(last);
        RecordStatus::Closed(LinearTrace {
            kind: self.kind,
            entry_pc: self.entry_pc,
            inputargs: InputArgs {
                entry_pc: self.entry_pc,
                stack_depth: Some(self.entry_depth),
            },
            ops: std::mem::take(&mut self.ops),
        })
    }

    /// Called when the interpreter is about to execute `pc`. Closes the trace
    /// on arrival at a loop header. A loop trace needs at least one
    /// instruction first; a bridge closes even at its own entry.
    pub fn before_instruction(&mut self, pc: Pc, is_header: bool) -> Option<RecordStatus> {
        if !is_header || (!self.is_bridge() && self.ops.is_empty()) {
            return None;
        }
        let synthetic = self.ops.is_empty();
        let origin_pc = if synthetic { pc } else { self.last_pc };
        Some(self.finish(TraceOp::JumpOp {
            origin_pc,
            target_pc: pc,
            token: None,
            synthetic,
        }))
    }

    /// Called after the interpreter ran `instr` with the given effect.
    pub fn record(&mut self, instr: &crate::bytecode::Instruction, effect: &Effect) -> Option<RecordStatus> {
        let origin_pc = instr.pc;
        self.last_pc = origin_pc;
        for op in handler_body(instr).as_slice() {
            match *op {
                MicroOp::Branch { target, fallthrough } => {
                    let taken = matches!(effect, Effect::Branch { taken: true });
                    self.ops.push(TraceOp::Guard {
                        origin_pc,
                        guard_id: self.next_guard,
                        expected: taken,
                        resume_pc: if taken { fallthrough } else { target },
                        marked: false,
                    });
                    self.next_guard += 1;
                }
                MicroOp::Jump { .. } => {}
                MicroOp::Return { count } => return Some(self.leave(origin_pc, RetSlot::Ret(count))),
                MicroOp::Exit => return Some(self.leave(origin_pc, RetSlot::Exit)),
                MicroOp::Call { .. } => {
                    self.calls += 1;
                    if self.calls > self.limits.max_calls {
                        return Some(RecordStatus::Aborted(AbortReason::CallDepth));
                    }
                    self.ops.push(TraceOp::Inline { origin_pc, op: *op });
                }
                _ => self.ops.push(TraceOp::Inline { origin_pc, op: *op }),
            }
        }
        if self.ops.len() >= self.limits.max_ops {
            return Some(RecordStatus::Aborted(AbortReason::TraceTooLong));
        }
        None
    }

    fn leave(&mut self, origin_pc: Pc, slot: RetSlot) -> RecordStatus {
        if self.is_bridge() {
            self.finish(TraceOp::RetOp { origin_pc, slot })
        } else {
            RecordStatus::Aborted(AbortReason::LeftLoop)
        }
    }
}

/// Record one pass through the loop at `header`, executing on `frame` as the
/// interpreter would. Calls made along the way run through the session.
pub fn trace_loop(session: &mut VmSession, header: Pc, frame: &mut Frame) -> Result<LinearTrace, TraceError> {
    let limits = session.policy().record_limits();
    let mut rec = Recorder::for_loop(header, frame.stack.len(), limits);
    loop {
        let pc = frame.pc;
        if let Some(status) = rec.before_instruction(pc, session.is_header(pc)) {
            return into_trace(status);
        }
        let instr = session.program().decode_at(pc).map_err(|e| VmError::new(pc, ErrorKind::Decode(e)))?;
        let effect = exec_handler(&instr, frame)?;
        if let Some(status) = rec.record(&instr, &effect) {
            return into_trace(status);
        }
        if let Effect::Call { kind, target, arg } = effect {
            match session.dispatch_call(target, kind, arg)? {
                crate::interp::Flow::Returned(vals) => frame.stack.extend(vals),
                crate::interp::Flow::Exited(_) => return Err(TraceError::Aborted(AbortReason::LeftLoop)),
            }
        }
    }
}

fn into_trace(status: RecordStatus) -> Result<LinearTrace, TraceError> {
    match status {
        RecordStatus::Closed(trace) => Ok(trace),
        RecordStatus::Aborted(reason) => Err(TraceError::Aborted(reason)),
    }
}
