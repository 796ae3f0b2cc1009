//! Values, frames and opcode handlers, plus the tier-0 dispatch loop.
//!
//! Each opcode's semantics is written once, as a short body of micro-ops
//! ([`handler_body`]). The interpreter and tier-1 threaded code both run a
//! body as one handler call ([`exec_handler`]); tier-2 traces copy the body
//! into the trace instead of calling it.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bytecode::{DecodeError, Instruction, Opcode, Pc};
pub use crate::tiers::Regime;
use crate::tiers::{HotKind, Tier, VmSession};
use crate::tracer::Recorder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Bool(bool),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Bool(_) => "bool",
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

/// `Bool(b)` is `b`; an `Int` is true when nonzero.
pub fn truthy(v: Value) -> bool {
    match v {
        Value::Bool(b) => b,
        Value::Int(n) => n != 0,
    }
}

/// How a call instruction asks for its callee to be executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    /// `CALL`: baseline (tier-1) eligible.
    Call,
    /// `CALL_NORMAL`: always interpreted.
    Normal,
    /// `CALL_JIT`: loops traced by tier 2.
    Jit,
}

impl CallKind {
    pub fn from_opcode(op: Opcode) -> Option<CallKind> {
        match op {
            Opcode::Call => Some(CallKind::Call),
            Opcode::CallNormal => Some(CallKind::Normal),
            Opcode::CallJit => Some(CallKind::Jit),
            _ => None,
        }
    }

    pub fn opcode(self) -> Opcode {
        match self {
            CallKind::Call => Opcode::Call,
            CallKind::Normal => Opcode::CallNormal,
            CallKind::Jit => Opcode::CallJit,
        }
    }
}

/// An activation record. The caller chain lives on the host stack, one
/// dispatch per nested call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub stack: Vec<Value>,
    pub pc: Pc,
    /// Entry pc of the function this frame is running.
    pub func_entry: Pc,
}

impl Frame {
    pub fn new(entry: Pc, arg: Value) -> Frame {
        Frame {
            stack: vec![arg],
            pc: entry,
            func_entry: entry,
        }
    }

    pub fn with_stack(entry: Pc, stack: Vec<Value>) -> Frame {
        Frame {
            stack,
            pc: entry,
            func_entry: entry,
        }
    }

    fn pop(&mut self) -> Result<Value, ErrorKind> {
        self.stack.pop().ok_or(ErrorKind::StackUnderflow)
    }

    fn peek(&self) -> Result<Value, ErrorKind> {
        self.stack.last().copied().ok_or(ErrorKind::StackUnderflow)
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ErrorKind {
    #[error("stack underflow")]
    StackUnderflow,
    #[error("{op} expects int operands, found {found}")]
    TypeError { op: Opcode, found: &'static str },
    #[error("step limit exhausted")]
    FuelExhausted,
    #[error("call depth limit exceeded")]
    CallDepthExceeded,
    #[error("top-level return produced no value")]
    NoReturnValue,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("pc {pc}: {kind}")]
pub struct VmError {
    pub pc: Pc,
    pub kind: ErrorKind,
}

impl VmError {
    pub fn new(pc: Pc, kind: ErrorKind) -> VmError {
        VmError { pc, kind }
    }
}

/// Result of running a frame to completion, or of leaving compiled code.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Done(Value),
    Deopt(Pc, Frame),
    Error(VmError),
}

// ---------------------------------------------------------------------------
// Handler bodies
// ---------------------------------------------------------------------------

/// Scratch registers of a handler body. Dead between handlers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Reg {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MicroOp {
    Pop { dst: Reg },
    Peek { dst: Reg },
    Push { src: Reg },
    Const { dst: Reg, value: i64 },
    /// `A = A + B`
    Add,
    Sub,
    Lt,
    Eq,
    /// Branch to `target` when `A` is truthy.
    Branch { target: Pc, fallthrough: Pc },
    Jump { target: Pc },
    /// Call with the argument in `A`; execution resumes at `ret`.
    Call { kind: CallKind, target: Pc, ret: Pc },
    Return { count: u8 },
    Exit,
}

impl MicroOp {
    /// Micro-ops that transfer control out of the handler.
    pub fn is_control(&self) -> bool {
        matches!(
            self,
            MicroOp::Branch { .. }
                | MicroOp::Jump { .. }
                | MicroOp::Call { .. }
                | MicroOp::Return { .. }
                | MicroOp::Exit
        )
    }
}

/// A handler body: at most four micro-ops.
#[derive(Clone, Copy, Debug)]
pub struct HandlerBody {
    ops: [MicroOp; 4],
    len: u8,
}

impl HandlerBody {
    fn of(ops: &[MicroOp]) -> HandlerBody {
        let mut buf = [MicroOp::Exit; 4];
        buf[..ops.len()].copy_from_slice(ops);
        HandlerBody {
            ops: buf,
            len: ops.len() as u8,
        }
    }

    pub fn as_slice(&self) -> &[MicroOp] {
        &self.ops[..self.len as usize]
    }
}

/// The semantics of one instruction.
///
/// Binary operators pop the right operand first, so `LT` on `[.., l, r]`
/// pushes `l < r`.
pub fn handler_body(instr: &Instruction) -> HandlerBody {
    use MicroOp::*;
    let operand = instr.operand_or_zero();
    let target = operand as Pc;
    let binary = |op: MicroOp| HandlerBody::of(&[Pop { dst: Reg::B }, Pop { dst: Reg::A }, op, Push { src: Reg::A }]);
    match instr.opcode {
        Opcode::ConstInt => HandlerBody::of(&[
            Const {
                dst: Reg::A,
                value: operand as i64,
            },
            Push { src: Reg::A },
        ]),
        Opcode::Dup => HandlerBody::of(&[Peek { dst: Reg::A }, Push { src: Reg::A }]),
        Opcode::Pop => HandlerBody::of(&[Pop { dst: Reg::A }]),
        Opcode::Add => binary(Add),
        Opcode::Sub => binary(Sub),
        Opcode::Lt => binary(Lt),
        Opcode::Eq => binary(Eq),
        Opcode::Jump => HandlerBody::of(&[Jump { target }]),
        Opcode::JumpIf => HandlerBody::of(&[
            Pop { dst: Reg::A },
            Branch {
                target,
                fallthrough: instr.next_pc(),
            },
        ]),
        Opcode::Call | Opcode::CallNormal | Opcode::CallJit => HandlerBody::of(&[
            Pop { dst: Reg::A },
            Call {
                kind: CallKind::from_opcode(instr.opcode).expect("call opcode"),
                target,
                ret: instr.next_pc(),
            },
        ]),
        Opcode::Ret => HandlerBody::of(&[Return { count: operand }]),
        Opcode::Exit => HandlerBody::of(&[Exit]),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Regs {
    pub a: Value,
    pub b: Value,
}

impl Default for Regs {
    fn default() -> Regs {
        Regs {
            a: Value::Int(0),
            b: Value::Int(0),
        }
    }
}

impl Regs {
    fn get(&self, r: Reg) -> Value {
        match r {
            Reg::A => self.a,
            Reg::B => self.b,
        }
    }

    fn set(&mut self, r: Reg, v: Value) {
        match r {
            Reg::A => self.a = v,
            Reg::B => self.b = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MicroEffect {
    Continue,
    Jump(Pc),
    Branch { taken: bool, next: Pc },
    Call { kind: CallKind, target: Pc, ret: Pc, arg: Value },
    Return(Vec<Value>),
    Exit(Value),
}

fn ints(op: Opcode, regs: &Regs) -> Result<(i64, i64), ErrorKind> {
    match (regs.a, regs.b) {
        (Value::Int(a), Value::Int(b)) => Ok((a, b)),
        (Value::Int(_), other) | (other, _) => Err(ErrorKind::TypeError {
            op,
            found: other.type_name(),
        }),
    }
}

/// Execute a single micro-op against a live frame.
pub fn run_micro(op: &MicroOp, frame: &mut Frame, regs: &mut Regs) -> Result<MicroEffect, ErrorKind> {
    match *op {
        MicroOp::Pop { dst } => {
            let v = frame.pop()?;
            regs.set(dst, v);
        }
        MicroOp::Peek { dst } => {
            let v = frame.peek()?;
            regs.set(dst, v);
        }
        MicroOp::Push { src } => frame.stack.push(regs.get(src)),
        MicroOp::Const { dst, value } => regs.set(dst, Value::Int(value)),
        MicroOp::Add => {
            let (a, b) = ints(Opcode::Add, regs)?;
            regs.a = Value::Int(a.wrapping_add(b));
        }
        MicroOp::Sub => {
            let (a, b) = ints(Opcode::Sub, regs)?;
            regs.a = Value::Int(a.wrapping_sub(b));
        }
        MicroOp::Lt => {
            let (a, b) = ints(Opcode::Lt, regs)?;
            regs.a = Value::Bool(a < b);
        }
        MicroOp::Eq => {
            let (a, b) = ints(Opcode::Eq, regs)?;
            regs.a = Value::Bool(a == b);
        }
        MicroOp::Branch { target, fallthrough } => {
            let taken = truthy(regs.a);
            return Ok(MicroEffect::Branch {
                taken,
                next: if taken { target } else { fallthrough },
            });
        }
        MicroOp::Jump { target } => return Ok(MicroEffect::Jump(target)),
        MicroOp::Call { kind, target, ret } => {
            return Ok(MicroEffect::Call {
                kind,
                target,
                ret,
                arg: regs.a,
            })
        }
        MicroOp::Return { count } => {
            let count = count as usize;
            if frame.stack.len() < count {
                return Err(ErrorKind::StackUnderflow);
            }
            let split = frame.stack.len() - count;
            return Ok(MicroEffect::Return(frame.stack.split_off(split)));
        }
        MicroOp::Exit => return Ok(MicroEffect::Exit(frame.peek()?)),
    }
    Ok(MicroEffect::Continue)
}

/// What a handler asks its dispatcher to do next. Intra-frame control flow is
/// already reflected in `frame.pc`.
#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    Next,
    Branch { taken: bool },
    /// `frame.pc` already holds the return address.
    Call { kind: CallKind, target: Pc, arg: Value },
    Return(Vec<Value>),
    Exit(Value),
}

/// Run one instruction's handler on `frame`. Shared verbatim by the
/// interpreter and by tier-1 threaded code.
pub fn exec_handler(instr: &Instruction, frame: &mut Frame) -> Result<Effect, VmError> {
    let body = handler_body(instr);
    let mut regs = Regs::default();
    for op in body.as_slice() {
        let effect = run_micro(op, frame, &mut regs).map_err(|k| VmError::new(instr.pc, k))?;
        match effect {
            MicroEffect::Continue => {}
            MicroEffect::Jump(t) => {
                frame.pc = t;
                return Ok(Effect::Next);
            }
            MicroEffect::Branch { taken, next } => {
                frame.pc = next;
                return Ok(Effect::Branch { taken });
            }
            MicroEffect::Call { kind, target, ret, arg } => {
                frame.pc = ret;
                return Ok(Effect::Call { kind, target, arg });
            }
            MicroEffect::Return(vals) => return Ok(Effect::Return(vals)),
            MicroEffect::Exit(v) => return Ok(Effect::Exit(v)),
        }
    }
    frame.pc = instr.next_pc();
    Ok(Effect::Next)
}

// ---------------------------------------------------------------------------
// Dispatch loop
// ---------------------------------------------------------------------------

/// How a function activation finished.
#[derive(Clone, Debug, PartialEq)]
pub enum Flow {
    /// `RET k` with the returned values, bottom first.
    Returned(Vec<Value>),
    /// `EXIT` terminates the whole program.
    Exited(Value),
}

/// Run the function at `entry` with `arg` on its stack, under the session's
/// policy.
pub fn interpret(session: &mut VmSession, entry: Pc, arg: Value) -> Outcome {
    session.run_at(entry, arg)
}

pub(crate) enum MergeAction {
    Continue,
    /// Compiled code ran and handed back control at `frame.pc`.
    Resumed,
    Record(Recorder),
    Finished(Flow),
}

impl VmSession {
    /// Tier-0 dispatch loop for one activation. Runs until the frame returns
    /// or the program exits. At loop headers the regime decides whether to
    /// profile, record, or enter compiled code.
    pub(crate) fn interpret_frame(
        &mut self,
        frame: &mut Frame,
        regime: Regime,
        mut recorder: Option<Recorder>,
        resumed: bool,
    ) -> Result<Flow, VmError> {
        // Set after compiled code hands back control, so the instruction it
        // stopped at is interpreted before compiled code is tried again.
        let mut just_resumed = resumed;
        loop {
            let pc = frame.pc;
            if let Some(rec) = recorder.as_mut() {
                if let Some(status) = rec.before_instruction(pc, self.is_header(pc)) {
                    let rec = recorder.take().expect("active recorder");
                    self.finish_recording(rec, status);
                }
            }
            if !just_resumed && recorder.is_none() && regime != Regime::Interp && self.is_header(pc) {
                match self.merge_point(frame, regime)? {
                    MergeAction::Continue => {}
                    MergeAction::Resumed => {
                        just_resumed = true;
                        continue;
                    }
                    MergeAction::Record(rec) => {
                        recorder = Some(rec);
                        just_resumed = true;
                        continue;
                    }
                    MergeAction::Finished(flow) => return Ok(flow),
                }
            }
            just_resumed = false;

            self.charge_fuel(pc)?;
            let instr = self.decode(pc)?;
            self.metrics.counters.decodes += 1;
            self.metrics.counters.handler_dispatches += 1;
            let effect = exec_handler(&instr, frame)?;
            if let Some(rec) = recorder.as_mut() {
                if let Some(status) = rec.record(&instr, &effect) {
                    let rec = recorder.take().expect("active recorder");
                    self.finish_recording(rec, status);
                }
            }
            match effect {
                Effect::Next | Effect::Branch { .. } => {}
                Effect::Call { kind, target, arg } => match self.dispatch_call(target, kind, arg)? {
                    Flow::Returned(vals) => frame.stack.extend(vals),
                    exit @ Flow::Exited(_) => return Ok(exit),
                },
                Effect::Return(vals) => return Ok(Flow::Returned(vals)),
                Effect::Exit(v) => return Ok(Flow::Exited(v)),
            }
        }
    }

    /// Profiling hook at a loop header.
    fn merge_point(&mut self, frame: &mut Frame, regime: Regime) -> Result<MergeAction, VmError> {
        let pc = frame.pc;
        match regime {
            Regime::Interp => Ok(MergeAction::Continue),
            Regime::Tracing | Regime::Auto => {
                if let Some(id) = self.loop_trace_at(pc) {
                    return self.enter_tier2(id, frame);
                }
                if !self.is_blacklisted(pc, Tier::T2) {
                    if let Some(trigger) = self.record_hot(pc, HotKind::BackEdge) {
                        if let Some(pending) = self.maybe_compile(trigger) {
                            let rec = self.pending_recorder(Some(pending), frame).expect("recorder");
                            return Ok(MergeAction::Record(rec));
                        }
                    }
                }
                if regime == Regime::Auto {
                    if let Some((code, cursor)) = self.method_cursor(frame.func_entry, pc) {
                        return self.enter_tier1(code, cursor, frame, regime);
                    }
                }
                Ok(MergeAction::Continue)
            }
            Regime::Baseline => {
                // A hot back-edge compiles the enclosing method and enters it
                // here, mid-activation.
                let func = frame.func_entry;
                if self.method(func).is_none()
                    && !self.is_blacklisted(func, Tier::T1)
                    && self.record_hot(pc, HotKind::BackEdge).is_some()
                {
                    self.compile_method(func);
                }
                match self.method_cursor(func, pc) {
                    Some((code, cursor)) => self.enter_tier1(code, cursor, frame, regime),
                    None => Ok(MergeAction::Continue),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instr(opcode: Opcode, operand: Option<u8>) -> Instruction {
        Instruction {
            pc: 0,
            opcode,
            operand,
        }
    }

    fn run(opcode: Opcode, operand: Option<u8>, stack: &[Value]) -> (Result<Effect, VmError>, Frame) {
        let mut frame = Frame::with_stack(0, stack.to_vec());
        let r = exec_handler(&instr(opcode, operand), &mut frame);
        (r, frame)
    }

    use Value::{Bool, Int};

    #[test]
    fn lt_pops_rhs_first() {
        let (r, f) = run(Opcode::Lt, None, &[Int(100), Int(100), Int(1)]);
        assert_eq!(r.unwrap(), Effect::Next);
        assert_eq!(f.stack, vec![Int(100), Bool(false)]);
    }

    #[test]
    fn dup_copies_top() {
        let (_, f) = run(Opcode::Dup, None, &[Int(5)]);
        assert_eq!(f.stack, vec![Int(5), Int(5)]);
    }

    #[test]
    fn sub_is_lhs_minus_rhs() {
        let (_, f) = run(Opcode::Sub, None, &[Int(0), Int(10)]);
        assert_eq!(f.stack, vec![Int(-10)]);
    }

    #[test]
    fn add_and_eq() {
        let (_, f) = run(Opcode::Add, None, &[Int(2), Int(3)]);
        assert_eq!(f.stack, vec![Int(5)]);
        let (_, f) = run(Opcode::Eq, None, &[Int(4), Int(4)]);
        assert_eq!(f.stack, vec![Bool(true)]);
    }

    #[test]
    fn truthiness() {
        assert!(truthy(Bool(true)));
        assert!(!truthy(Int(0)));
        assert!(truthy(Int(-3)));
    }

    #[test]
    fn jump_if_pops_condition_and_branches() {
        let mut frame = Frame::with_stack(0, vec![Int(7), Bool(true)]);
        let i = Instruction {
            pc: 4,
            opcode: Opcode::JumpIf,
            operand: Some(11),
        };
        assert_eq!(exec_handler(&i, &mut frame).unwrap(), Effect::Branch { taken: true });
        assert_eq!((frame.pc, frame.stack.clone()), (11, vec![Int(7)]));

        frame.stack.push(Int(0));
        assert_eq!(exec_handler(&i, &mut frame).unwrap(), Effect::Branch { taken: false });
        assert_eq!(frame.pc, 6);
    }

    #[test]
    fn underflow_and_type_errors_carry_pc() {
        let mut frame = Frame::with_stack(0, vec![]);
        let i = Instruction {
            pc: 9,
            opcode: Opcode::Dup,
            operand: None,
        };
        assert_eq!(
            exec_handler(&i, &mut frame).unwrap_err(),
            VmError::new(9, ErrorKind::StackUnderflow)
        );
        let (r, _) = run(Opcode::Lt, None, &[Bool(true), Int(1)]);
        assert_eq!(
            r.unwrap_err().kind,
            ErrorKind::TypeError {
                op: Opcode::Lt,
                found: "bool"
            }
        );
    }

    #[test]
    fn call_leaves_return_address_in_pc() {
        let mut frame = Frame::with_stack(0, vec![Int(3), Int(4)]);
        let i = Instruction {
            pc: 1,
            opcode: Opcode::CallJit,
            operand: Some(16),
        };
        let effect = exec_handler(&i, &mut frame).unwrap();
        assert_eq!(
            effect,
            Effect::Call {
                kind: CallKind::Jit,
                target: 16,
                arg: Int(4)
            }
        );
        assert_eq!((frame.pc, frame.stack.len()), (3, 1));
    }

    #[test]
    fn ret_hands_back_top_values_in_order() {
        let (r, f) = run(Opcode::Ret, Some(2), &[Int(1), Int(2), Int(3)]);
        assert_eq!(r.unwrap(), Effect::Return(vec![Int(2), Int(3)]));
        assert_eq!(f.stack, vec![Int(1)]);
    }

    #[test]
    fn handler_bodies_fit_and_end_in_control_only_at_the_end() {
        for op in Opcode::ALL {
            let i = instr(op, op.arity().checked_sub(1).map(|_| 3));
            let body = handler_body(&i);
            let ops = body.as_slice();
            assert!(!ops.is_empty());
            assert!(ops[..ops.len() - 1].iter().all(|m| !m.is_control()), "{op}");
        }
    }

    fn run_program(src: &str, arg: i64) -> Outcome {
        let p = crate::bytecode::assemble(src).unwrap();
        let policy = crate::tiers::TierPolicy::with_mode(crate::tiers::Mode::Interp);
        let mut s = VmSession::new(p, policy).unwrap();
        interpret(&mut s, 0, Int(arg))
    }

    #[test]
    fn bundled_programs_interpret() {
        use crate::programs;
        assert_eq!(run_program(programs::LOOP, 100), Outcome::Done(Int(-10)));
        assert_eq!(run_program(programs::LOOPABIT, 10), Outcome::Done(Int(0)));
        assert_eq!(run_program(programs::CALLABIT, 10), Outcome::Done(Int(0)));
    }

    #[test]
    fn fuel_bounds_nontermination() {
        let p = crate::bytecode::assemble("top: JUMP top").unwrap();
        let policy = crate::tiers::TierPolicy {
            fuel: 1000,
            ..crate::tiers::TierPolicy::with_mode(crate::tiers::Mode::Interp)
        };
        let mut s = VmSession::new(p, policy).unwrap();
        match s.run(Int(0)) {
            Outcome::Error(e) => assert_eq!(e.kind, ErrorKind::FuelExhausted),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn interpretation_is_deterministic() {
        let p = crate::bytecode::assemble(crate::programs::LOOPABIT).unwrap();
        let policy = crate::tiers::TierPolicy::with_mode(crate::tiers::Mode::Interp);
        let mut a = VmSession::new(p.clone(), policy).unwrap();
        let mut b = VmSession::new(p, policy).unwrap();
        assert_eq!(a.run(Int(17)), b.run(Int(17)));
        assert_eq!(a.counters(), b.counters());
    }
}
