//! Turns a tier-1 linear trace into executable stitched code.
//!
//! The trace is cut at each emit op. The first piece is the body; every later
//! piece is a bridge hanging off one marked guard. Guards are pushed as the
//! scan meets them and popped at each cut, so the guard popped when piece `k`
//! is closed owns piece `k + 1`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::bytecode::Pc;
use crate::cfg::Cfg;
use crate::tracer::{BridgeLink, GuardFailure, GuardId, InputArgs, LinearTrace, TokenId, TraceKind, TraceOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TargetToken {
    pub id: TokenId,
    /// `None` for the return token.
    pub pc: Option<Pc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TokenMap {
    jumps: BTreeMap<Pc, TargetToken>,
    ret: TargetToken,
}

impl TokenMap {
    pub fn get(&self, pc: Pc) -> Option<&TargetToken> {
        self.jumps.get(&pc)
    }

    pub fn return_token(&self) -> &TargetToken {
        &self.ret
    }

    pub fn jump_pcs(&self) -> impl Iterator<Item = Pc> + '_ {
        self.jumps.keys().copied()
    }

    pub fn jump_tokens(&self) -> impl Iterator<Item = &TargetToken> {
        self.jumps.values()
    }

    /// Number of tokens, the return token included.
    pub fn len(&self) -> usize {
        self.jumps.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One token per distinct emit-jump target, numbered in order of first use,
/// then the return token.
pub fn create_token_map(ops: &[TraceOp]) -> TokenMap {
    let mut jumps = BTreeMap::new();
    let mut next = 0;
    for op in ops {
        if let TraceOp::EmitJump { target_pc, .. } = *op {
            jumps.entry(target_pc).or_insert_with(|| {
                let token = TargetToken {
                    id: next,
                    pc: Some(target_pc),
                };
                next += 1;
                token
            });
        }
    }
    TokenMap {
        jumps,
        ret: TargetToken { id: next, pc: None },
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GuardFailureStack {
    items: Vec<GuardFailure>,
}

impl GuardFailureStack {
    pub fn new() -> GuardFailureStack {
        GuardFailureStack::default()
    }

    pub fn push(&mut self, g: GuardFailure) {
        self.items.push(g);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Pops the most recent guard failure, or returns `None` on an empty stack.
pub fn pop_guard_failure(stack: &mut GuardFailureStack) -> Option<GuardFailure> {
    stack.items.pop()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub index: usize,
    pub entry_pc: Pc,
    pub ops: Vec<TraceOp>,
}

impl Segment {
    pub fn terminator(&self) -> &TraceOp {
        self.ops.last().expect("segments are never empty")
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum StitchError {
    #[error("emit at pc {pc} has no preceding op")]
    EmitWithoutOp { pc: Pc },
    #[error("no token for jump target {pc}")]
    MissingToken { pc: Pc },
    #[error("trace ends without a terminator")]
    Unterminated,
    #[error("{remaining} guard failure(s) left on the stack")]
    GuardStackNotEmpty { remaining: usize },
    #[error("guard g{guard} has no bridge")]
    GuardUnlinked { guard: GuardId },
    #[error("segment {segment} is not reached from any guard")]
    BridgeWithoutGuard { segment: usize },
    #[error("guard g{guard} resumes at {resume_pc} but its bridge starts at {entry_pc}")]
    EntryMismatch { guard: GuardId, resume_pc: Pc, entry_pc: Pc },
    #[error("pc {pc} recorded twice")]
    DuplicatePc { pc: Pc },
    #[error("nothing to stitch")]
    Empty,
    #[error("only tier-1 method traces can be stitched")]
    NotTier1,
}

/// Rewrite an emit-jump into a jump terminator naming its target token.
pub fn handle_emit_jump(op: &TraceOp, token_map: &TokenMap) -> Result<TraceOp, StitchError> {
    match *op {
        TraceOp::EmitJump {
            origin_pc,
            target_pc,
            synthetic,
        } => {
            let token = token_map
                .get(target_pc)
                .ok_or(StitchError::MissingToken { pc: target_pc })?;
            Ok(TraceOp::JumpOp {
                origin_pc,
                target_pc,
                token: Some(token.id),
                synthetic,
            })
        }
        _ => panic!("handle_emit_jump called on {op:?}"),
    }
}

/// Rewrite an emit-ret into a return terminator.
pub fn handle_emit_ret(op: &TraceOp) -> TraceOp {
    match *op {
        TraceOp::EmitRet { origin_pc, slot } => TraceOp::RetOp { origin_pc, slot },
        _ => panic!("handle_emit_ret called on {op:?}"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stitching {
    pub token_map: TokenMap,
    pub pairs: Vec<(Segment, Option<GuardFailure>)>,
}

/// Single scan over a method trace that cuts it into segments and pairs each
/// segment with the guard failure popped when it was closed.
pub fn do_trace_stitching(_inputargs: &InputArgs, ops: &[TraceOp]) -> Result<Stitching, StitchError> {
    let token_map = create_token_map(ops);
    let mut stack = GuardFailureStack::new();
    let mut pairs: Vec<(Segment, Option<GuardFailure>)> = Vec::new();
    let mut current: Vec<TraceOp> = Vec::new();

    let mut close = |current: &mut Vec<TraceOp>, stack: &mut GuardFailureStack| {
        let ops = std::mem::take(current);
        let segment = Segment {
            index: pairs.len(),
            entry_pc: ops[0].origin_pc(),
            ops,
        };
        let popped = pop_guard_failure(stack);
        pairs.push((segment, popped));
    };

    for (i, op) in ops.iter().enumerate() {
        match op {
            TraceOp::Guard { marked: true, .. } => {
                stack.push(op.guard_failure().expect("guard"));
                current.push(op.clone());
            }
            TraceOp::EmitJump { origin_pc, .. } | TraceOp::EmitRet { origin_pc, .. } => {
                if i == 0 {
                    return Err(StitchError::EmitWithoutOp { pc: *origin_pc });
                }
                let term = match op {
                    TraceOp::EmitJump { .. } => handle_emit_jump(op, &token_map)?,
                    _ => handle_emit_ret(op),
                };
                current.push(term);
                close(&mut current, &mut stack);
            }
            TraceOp::JumpOp { .. } | TraceOp::RetOp { .. } => {
                current.push(op.clone());
                close(&mut current, &mut stack);
                break;
            }
            _ => current.push(op.clone()),
        }
    }
    if !current.is_empty() {
        return Err(StitchError::Unterminated);
    }
    if !stack.is_empty() {
        return Err(StitchError::GuardStackNotEmpty { remaining: stack.len() });
    }
    Ok(Stitching { token_map, pairs })
}

/// Position of an op inside stitched code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Cursor {
    pub segment: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StitchedCode {
    pub entry_pc: Pc,
    pub inputargs: InputArgs,
    /// Segment 0 is the body; the rest are bridges.
    pub segments: Vec<Segment>,
    /// Guard failures with their bridge links filled in.
    pub guards: BTreeMap<GuardId, GuardFailure>,
    pub token_map: TokenMap,
    pub pc_index: BTreeMap<Pc, Cursor>,
    /// Token pcs with no recorded op; jumps to them leave compiled code.
    pub unresolved: Vec<Pc>,
    links: Vec<Option<usize>>,
    resolved: Vec<Option<Cursor>>,
}

/// Build stitched code from the pairs produced by [`do_trace_stitching`].
pub fn link_segments(
    pairs: Vec<(Segment, Option<GuardFailure>)>,
    token_map: TokenMap,
    inputargs: InputArgs,
) -> Result<StitchedCode, StitchError> {
    if pairs.is_empty() {
        return Err(StitchError::Empty);
    }
    let n = pairs.len();
    let mut segments = Vec::with_capacity(n);
    let mut popped = Vec::with_capacity(n);
    for (seg, g) in pairs {
        segments.push(seg);
        popped.push(g);
    }

    let mut guards = BTreeMap::new();
    for (k, g) in popped.into_iter().enumerate() {
        match g {
            Some(mut g) => {
                let Some(bridge) = segments.get(k + 1) else {
                    return Err(StitchError::GuardUnlinked { guard: g.guard_id });
                };
                if bridge.entry_pc != g.resume_pc {
                    return Err(StitchError::EntryMismatch {
                        guard: g.guard_id,
                        resume_pc: g.resume_pc,
                        entry_pc: bridge.entry_pc,
                    });
                }
                g.bridge = Some(BridgeLink::Segment(k + 1));
                guards.insert(g.guard_id, g);
            }
            None if k + 1 < n => return Err(StitchError::BridgeWithoutGuard { segment: k + 1 }),
            None => {}
        }
    }
    for op in segments.iter().flat_map(|s| &s.ops) {
        if let TraceOp::Guard {
            marked: true, guard_id, ..
        } = *op
        {
            if !guards.contains_key(&guard_id) {
                return Err(StitchError::GuardUnlinked { guard: guard_id });
            }
        }
    }
    let max_guard = guards.keys().next_back().map_or(0, |g| g + 1);
    let mut links = vec![None; max_guard];
    for (id, g) in &guards {
        if let Some(BridgeLink::Segment(s)) = g.bridge {
            links[*id] = Some(s);
        }
    }

    let mut pc_index = BTreeMap::new();
    for seg in &segments {
        for (offset, op) in seg.ops.iter().enumerate() {
            if op.is_synthetic() {
                continue;
            }
            let cursor = Cursor {
                segment: seg.index,
                offset,
            };
            if pc_index.insert(op.origin_pc(), cursor).is_some() {
                return Err(StitchError::DuplicatePc { pc: op.origin_pc() });
            }
        }
    }

    let mut resolved = vec![None; token_map.len()];
    let mut unresolved = Vec::new();
    for token in token_map.jump_tokens() {
        let pc = token.pc.expect("jump token");
        match pc_index.get(&pc) {
            Some(&c) => resolved[token.id] = Some(c),
            None => unresolved.push(pc),
        }
    }

    Ok(StitchedCode {
        entry_pc: inputargs.entry_pc,
        inputargs,
        segments,
        guards,
        token_map,
        pc_index,
        unresolved,
        links,
        resolved,
    })
}

/// Stitch a tier-1 method trace in one go.
pub fn stitch(trace: &LinearTrace) -> Result<StitchedCode, StitchError> {
    if trace.kind != TraceKind::Tier1Method {
        return Err(StitchError::NotTier1);
    }
    let Stitching { token_map, pairs } = do_trace_stitching(&trace.inputargs, &trace.ops)?;
    link_segments(pairs, token_map, trace.inputargs)
}

/// Stitch and report the wall time taken.
pub fn stitch_timed(trace: &LinearTrace) -> (Result<StitchedCode, StitchError>, u128) {
    let t0 = Instant::now();
    let r = stitch(trace);
    (r, t0.elapsed().as_nanos())
}

impl StitchedCode {
    pub fn body(&self) -> &Segment {
        &self.segments[0]
    }

    pub fn bridges(&self) -> &[Segment] {
        &self.segments[1..]
    }

    /// Bridge segment for a failing guard.
    pub fn link(&self, guard: GuardId) -> Option<usize> {
        self.links.get(guard).copied().flatten()
    }

    pub fn links(&self) -> impl Iterator<Item = (GuardId, usize)> + '_ {
        self.links.iter().enumerate().filter_map(|(g, s)| s.map(|s| (g, s)))
    }

    /// Cursor a jump token lands on, if its pc was recorded.
    pub fn resolve(&self, token: TokenId) -> Option<Cursor> {
        self.resolved.get(token).copied().flatten()
    }

    pub fn cursor_at(&self, pc: Pc) -> Option<Cursor> {
        self.pc_index.get(&pc).copied()
    }

    pub fn op(&self, c: Cursor) -> &TraceOp {
        &self.segments[c.segment].ops[c.offset]
    }

    pub fn op_count(&self) -> usize {
        self.segments.iter().map(|s| s.ops.len()).sum()
    }

    pub fn guard_count(&self) -> usize {
        self.guards.len()
    }

    /// The control-flow graph the stitched code implements, over instruction
    /// pcs. Each op flows to the next op in its segment, a guard also flows to
    /// its bridge, and a jump flows to its target.
    pub fn reconstruct_cfg(&self) -> Cfg {
        let mut cfg = Cfg::new(self.entry_pc);
        cfg.nodes.insert(self.entry_pc);
        for seg in &self.segments {
            for (i, op) in seg.ops.iter().enumerate() {
                let from = op.origin_pc();
                cfg.nodes.insert(from);
                match op {
                    TraceOp::JumpOp {
                        target_pc,
                        synthetic: false,
                        ..
                    } => cfg.add_edge(from, *target_pc),
                    TraceOp::JumpOp { .. } | TraceOp::RetOp { .. } => {}
                    _ => {
                        if let Some(next) = seg.ops.get(i + 1) {
                            cfg.add_edge(from, next.origin_pc());
                        }
                        if let TraceOp::Guard { guard_id, .. } = op {
                            if let Some(s) = self.link(*guard_id) {
                                cfg.add_edge(from, self.segments[s].entry_pc);
                            }
                        }
                    }
                }
            }
        }
        cfg
    }

    pub fn to_json(&self) -> serde_json::Value {
        let segments: Vec<_> = self
            .segments
            .iter()
            .map(|s| {
                json!({
                    "index": s.index,
                    "role": if s.index == 0 { "body" } else { "bridge" },
                    "entry_pc": s.entry_pc,
                    "ops": s.ops,
                })
            })
            .collect();
        let links: Vec<_> = self
            .links()
            .map(|(g, s)| json!({ "guard_id": g, "segment": s }))
            .collect();
        let mut tokens: Vec<_> = self.token_map.jump_tokens().map(|t| json!(t)).collect();
        tokens.push(json!(self.token_map.return_token()));
        json!({
            "entry_pc": self.entry_pc,
            "inputargs": self.inputargs,
            "segments": segments,
            "links": links,
            "guards": self.guards.values().collect::<Vec<_>>(),
            "tokens": tokens,
            "unresolved": self.unresolved,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            let role = if s.index == 0 { "body" } else { "bridge" };
            let _ = writeln!(out, "segment {} ({role}) entry={}", s.index, s.entry_pc);
            for op in &s.ops {
                let _ = writeln!(out, "  {op}");
            }
        }
        for (g, s) in self.links() {
            let _ = writeln!(out, "g{g} -> segment {s}");
        }
        out
    }

    /// Body and bridges as boxes; dashed edges for guard failures labelled
    /// with the guard id, dotted edges for jumps between segments.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph stitched {\n  node [shape=box fontname=monospace];\n");
        for s in &self.segments {
            let role = if s.index == 0 { "body" } else { "bridge" };
            let mut label = format!("{role} {} @{}\\l", s.index, s.entry_pc);
            for op in &s.ops {
                let _ = write!(label, "{}\\l", op.to_string().trim_start());
            }
            let _ = writeln!(out, "  s{} [label=\"{label}\"];", s.index);
        }
        for (g, s) in self.links() {
            let from = self
                .segments
                .iter()
                .find(|seg| {
                    seg.ops
                        .iter()
                        .any(|op| matches!(op, TraceOp::Guard { guard_id, .. } if *guard_id == g))
                })
                .map_or(0, |seg| seg.index);
            let _ = writeln!(out, "  s{from} -> s{s} [label=\"g{g}\" style=dashed];");
        }
        let mut seen = HashSet::new();
        for s in &self.segments {
            if let TraceOp::JumpOp { token: Some(t), .. } = s.terminator() {
                if let Some(c) = self.resolve(*t) {
                    if seen.insert((s.index, c.segment, c.offset)) {
                        let _ = writeln!(
                            out,
                            "  s{} -> s{} [label=\"jump +{}\" style=dotted];",
                            s.index, c.segment, c.offset
                        );
                    }
                }
            }
        }
        out.push_str("}\n");
        out
    }
}
