//! Running compiled code.
//!
//! Stitched methods call the interpreter's handlers op by op. Tier-2 traces
//! run the inlined handler bodies directly. Both work on the live frame, so
//! leaving compiled code only needs the pc to resume at.

use std::sync::Arc;

use crate::bytecode::{Instruction, Opcode, Pc};
use crate::interp::{exec_handler, run_micro, truthy, Effect, Flow, Frame, MergeAction, MicroEffect, Outcome, Regime, Regs, VmError};
use crate::stitcher::{Cursor, StitchedCode};
use crate::tiers::{Exit, HotKind, Pending, Tier, TraceId, VmSession};
use crate::tracer::{BridgeLink, GuardId, RetSlot, TokenId, TraceOp};

/// Where a jump in stitched code lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JumpTarget {
    Cursor(Cursor),
    /// No op was recorded at the token's pc; resume interpreting there.
    Deopt(Pc),
}

pub fn resolve_jump_target(code: &StitchedCode, token: TokenId, target_pc: Pc) -> JumpTarget {
    match code.resolve(token) {
        Some(c) => JumpTarget::Cursor(c),
        None => JumpTarget::Deopt(target_pc),
    }
}

/// What a failed tier-2 guard leads to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuardContinuation {
    Bridge(TraceId),
    Deopt { resume_pc: Pc, pending: Option<Pending> },
}

/// Run stitched code from the start of its body on `frame`.
pub fn execute_stitched(code: &Arc<StitchedCode>, mut frame: Frame, session: &mut VmSession) -> Outcome {
    let regime = session.regime_for(session.policy().entry_kind);
    let start = Cursor { segment: 0, offset: 0 };
    match session.run_stitched(code, start, &mut frame, regime) {
        Ok(Exit::Flow(Flow::Exited(v))) => Outcome::Done(v),
        Ok(Exit::Flow(Flow::Returned(vals))) => match vals.last() {
            Some(&v) => Outcome::Done(v),
            None => Outcome::Error(VmError::new(frame.pc, crate::interp::ErrorKind::NoReturnValue)),
        },
        Ok(Exit::Deopt(_)) => Outcome::Deopt(frame.pc, frame),
        Err(e) => Outcome::Error(e),
    }
}

fn ret_instr(origin_pc: Pc, slot: RetSlot) -> Instruction {
    Instruction {
        pc: origin_pc,
        opcode: slot.opcode(),
        operand: slot.operand(),
    }
}

impl VmSession {
    fn call_out(&mut self, target: Pc, kind: crate::interp::CallKind, arg: crate::interp::Value, frame: &mut Frame) -> Result<Option<Flow>, VmError> {
        match self.dispatch_call(target, kind, arg)? {
            Flow::Returned(vals) => {
                frame.stack.extend(vals);
                Ok(None)
            }
            exit @ Flow::Exited(_) => Ok(Some(exit)),
        }
    }

    /// Threaded execution of a stitched method starting at `cursor`.
    pub(crate) fn run_stitched(
        &mut self,
        code: &Arc<StitchedCode>,
        mut cur: Cursor,
        frame: &mut Frame,
        regime: Regime,
    ) -> Result<Exit, VmError> {
        loop {
            let op = code.op(cur);
            self.charge_fuel(op.origin_pc())?;
            match *op {
                TraceOp::CallHandler {
                    origin_pc,
                    opcode,
                    operand,
                } => {
                    self.metrics.counters.handler_dispatches += 1;
                    let instr = Instruction {
                        pc: origin_pc,
                        opcode,
                        operand,
                    };
                    if let Effect::Call { kind, target, arg } = exec_handler(&instr, frame)? {
                        if let Some(exit) = self.call_out(target, kind, arg, frame)? {
                            return Ok(Exit::Flow(exit));
                        }
                    }
                    cur.offset += 1;
                }
                TraceOp::Guard {
                    origin_pc,
                    guard_id,
                    expected,
                    resume_pc,
                    ..
                } => {
                    self.metrics.counters.handler_dispatches += 1;
                    self.metrics.counters.guard_checks += 1;
                    let instr = Instruction {
                        pc: origin_pc,
                        opcode: Opcode::JumpIf,
                        operand: Some(resume_pc as u8),
                    };
                    let taken = matches!(exec_handler(&instr, frame)?, Effect::Branch { taken: true });
                    if taken == expected {
                        cur.offset += 1;
                    } else {
                        match code.link(guard_id) {
                            Some(segment) => cur = Cursor { segment, offset: 0 },
                            None => {
                                // Only hand-built code has guards without a
                                // bridge. The handler already left frame.pc
                                // on the arm actually taken.
                                self.metrics.counters.deopts += 1;
                                return Ok(Exit::Deopt(None));
                            }
                        }
                    }
                }
                TraceOp::JumpOp { target_pc, token, .. } => {
                    frame.pc = target_pc;
                    if regime == Regime::Auto && self.is_header(target_pc) {
                        if let Some(id) = self.loop_trace_at(target_pc) {
                            self.metrics.counters.tier_transitions += 1;
                            return self.run_trace(id, frame);
                        }
                        if !self.is_blacklisted(target_pc, Tier::T2) {
                            if let Some(trigger) = self.record_hot(target_pc, HotKind::BackEdge) {
                                if let Some(p) = self.maybe_compile(trigger) {
                                    self.metrics.counters.tier_transitions += 1;
                                    return Ok(Exit::Deopt(Some(p)));
                                }
                            }
                        }
                    }
                    let target = match token {
                        Some(t) => resolve_jump_target(code, t, target_pc),
                        None => JumpTarget::Deopt(target_pc),
                    };
                    match target {
                        JumpTarget::Cursor(c) => cur = c,
                        JumpTarget::Deopt(_) => {
                            self.metrics.counters.deopts += 1;
                            return Ok(Exit::Deopt(None));
                        }
                    }
                }
                TraceOp::RetOp { origin_pc, slot } => {
                    self.metrics.counters.handler_dispatches += 1;
                    return match exec_handler(&ret_instr(origin_pc, slot), frame)? {
                        Effect::Return(vals) => Ok(Exit::Flow(Flow::Returned(vals))),
                        Effect::Exit(v) => Ok(Exit::Flow(Flow::Exited(v))),
                        other => unreachable!("return handler produced {other:?}"),
                    };
                }
                TraceOp::Inline { .. } | TraceOp::EmitJump { .. } | TraceOp::EmitRet { .. } => {
                    unreachable!("{op} in stitched code")
                }
            }
        }
    }

    /// Execute tier-2 trace `id` (and any bridges and loops it reaches).
    pub(crate) fn run_trace(&mut self, mut id: TraceId, frame: &mut Frame) -> Result<Exit, VmError> {
        let mut trace = Arc::clone(&self.traces[id]);
        let mut regs = Regs::default();
        let mut off = 0;
        let mut last_origin = usize::MAX;
        loop {
            let op = &trace.ops[off];
            let origin = op.origin_pc();
            if origin != last_origin || op.is_terminator() {
                self.charge_fuel(origin)?;
                last_origin = origin;
            }
            match *op {
                TraceOp::Inline { origin_pc, op: micro } => {
                    self.metrics.counters.inline_ops += 1;
                    match run_micro(&micro, frame, &mut regs).map_err(|k| VmError::new(origin_pc, k))? {
                        MicroEffect::Continue | MicroEffect::Jump(_) | MicroEffect::Branch { .. } => {}
                        MicroEffect::Call { kind, target, ret, arg } => {
                            frame.pc = ret;
                            if let Some(exit) = self.call_out(target, kind, arg, frame)? {
                                return Ok(Exit::Flow(exit));
                            }
                        }
                        MicroEffect::Return(vals) => return Ok(Exit::Flow(Flow::Returned(vals))),
                        MicroEffect::Exit(v) => return Ok(Exit::Flow(Flow::Exited(v))),
                    }
                    off += 1;
                }
                TraceOp::Guard {
                    guard_id,
                    expected,
                    resume_pc,
                    ..
                } => {
                    self.metrics.counters.guard_checks += 1;
                    if truthy(regs.a) == expected {
                        off += 1;
                        continue;
                    }
                    frame.pc = resume_pc;
                    match self.handle_guard_failure(guard_id) {
                        GuardContinuation::Bridge(b) => {
                            id = b;
                            trace = Arc::clone(&self.traces[id]);
                            off = 0;
                            last_origin = usize::MAX;
                        }
                        GuardContinuation::Deopt { pending, .. } => return Ok(Exit::Deopt(pending)),
                    }
                }
                TraceOp::JumpOp { target_pc, .. } => {
                    frame.pc = target_pc;
                    match self.loop_trace_at(target_pc) {
                        Some(next) => {
                            if next != id {
                                trace = Arc::clone(&self.traces[next]);
                                id = next;
                            }
                            off = 0;
                            last_origin = usize::MAX;
                        }
                        None => {
                            self.metrics.counters.deopts += 1;
                            return Ok(Exit::Deopt(None));
                        }
                    }
                }
                TraceOp::RetOp { origin_pc, slot } => {
                    let mut regs = Regs::default();
                    let micro = match slot {
                        RetSlot::Ret(count) => crate::interp::MicroOp::Return { count },
                        RetSlot::Exit => crate::interp::MicroOp::Exit,
                    };
                    self.metrics.counters.inline_ops += 1;
                    return match run_micro(&micro, frame, &mut regs).map_err(|k| VmError::new(origin_pc, k))? {
                        MicroEffect::Return(vals) => Ok(Exit::Flow(Flow::Returned(vals))),
                        MicroEffect::Exit(v) => Ok(Exit::Flow(Flow::Exited(v))),
                        other => unreachable!("return produced {other:?}"),
                    };
                }
                TraceOp::CallHandler { .. } | TraceOp::EmitJump { .. } | TraceOp::EmitRet { .. } => {
                    unreachable!("{op} in a tier-2 trace")
                }
            }
        }
    }

    /// A tier-2 guard failed. Follow its bridge if there is one; otherwise
    /// count the failure and leave compiled code, asking for a bridge to be
    /// recorded once the guard has failed often enough.
    pub fn handle_guard_failure(&mut self, guard: GuardId) -> GuardContinuation {
        let threshold = self.policy().bridge_threshold;
        let blacklisted = self.bridge_blacklisted(guard);
        let g = &mut self.guards[guard];
        if let Some(BridgeLink::Trace(b)) = g.bridge {
            return GuardContinuation::Bridge(b);
        }
        g.failure_count += 1;
        let resume_pc = g.resume_pc;
        let pending = (g.failure_count >= threshold && !blacklisted).then_some(Pending::RecordBridge(guard));
        self.metrics.counters.deopts += 1;
        GuardContinuation::Deopt { resume_pc, pending }
    }

    pub(crate) fn enter_tier1(
        &mut self,
        code: Arc<StitchedCode>,
        cursor: Cursor,
        frame: &mut Frame,
        regime: Regime,
    ) -> Result<MergeAction, VmError> {
        self.metrics.counters.tier_transitions += 1;
        let exit = self.run_stitched(&code, cursor, frame, regime)?;
        Ok(self.after_exit(exit, frame))
    }

    pub(crate) fn enter_tier2(&mut self, id: TraceId, frame: &mut Frame) -> Result<MergeAction, VmError> {
        self.metrics.counters.tier_transitions += 1;
        let exit = self.run_trace(id, frame)?;
        Ok(self.after_exit(exit, frame))
    }

    fn after_exit(&mut self, exit: Exit, frame: &Frame) -> MergeAction {
        match exit {
            Exit::Flow(flow) => MergeAction::Finished(flow),
            Exit::Deopt(None) => MergeAction::Resumed,
            Exit::Deopt(pending) => match self.pending_recorder(pending, frame) {
                Some(rec) => MergeAction::Record(rec),
                None => MergeAction::Resumed,
            },
        }
    }
}
