//! The TLA instruction set: opcodes, decoding, a small assembler and
//! disassembler, and static validation.
//!
//! Every instruction is one opcode byte optionally followed by a single
//! unsigned operand byte. Jump and call operands are absolute byte offsets
//! into the code, so programs are limited to 256 bytes.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Byte offset into a program's code.
pub type Pc = usize;

/// Largest program the single-byte operand encoding can address.
pub const MAX_PROGRAM_LEN: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum Opcode {
    ConstInt = 0,
    Dup = 1,
    Pop = 2,
    Add = 3,
    Sub = 4,
    Lt = 5,
    Eq = 6,
    Jump = 7,
    JumpIf = 8,
    Call = 9,
    CallNormal = 10,
    CallJit = 11,
    Ret = 12,
    Exit = 13,
}

impl Opcode {
    pub const ALL: [Opcode; 14] = [
        Opcode::ConstInt,
        Opcode::Dup,
        Opcode::Pop,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Lt,
        Opcode::Eq,
        Opcode::Jump,
        Opcode::JumpIf,
        Opcode::Call,
        Opcode::CallNormal,
        Opcode::CallJit,
        Opcode::Ret,
        Opcode::Exit,
    ];

    pub fn from_byte(byte: u8) -> Option<Opcode> {
        Opcode::ALL.get(byte as usize).copied()
    }

    pub fn to_byte(self) -> u8 {
        self as u8
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::ConstInt => "CONST_INT",
            Opcode::Dup => "DUP",
            Opcode::Pop => "POP",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::Lt => "LT",
            Opcode::Eq => "EQ",
            Opcode::Jump => "JUMP",
            Opcode::JumpIf => "JUMP_IF",
            Opcode::Call => "CALL",
            Opcode::CallNormal => "CALL_NORMAL",
            Opcode::CallJit => "CALL_JIT",
            Opcode::Ret => "RET",
            Opcode::Exit => "EXIT",
        }
    }

    /// Case-insensitive mnemonic lookup.
    pub fn from_mnemonic(text: &str) -> Option<Opcode> {
        Opcode::ALL
            .into_iter()
            .find(|op| op.mnemonic().eq_ignore_ascii_case(text))
    }

    /// Number of immediate operand bytes (0 or 1).
    pub fn arity(self) -> usize {
        match self {
            Opcode::ConstInt
            | Opcode::Jump
            | Opcode::JumpIf
            | Opcode::Call
            | Opcode::CallNormal
            | Opcode::CallJit
            | Opcode::Ret => 1,
            _ => 0,
        }
    }

    pub fn width(self) -> usize {
        1 + self.arity()
    }

    pub fn is_call(self) -> bool {
        matches!(self, Opcode::Call | Opcode::CallNormal | Opcode::CallJit)
    }

    /// Whether the operand is a code offset.
    pub fn has_target(self) -> bool {
        matches!(self, Opcode::Jump | Opcode::JumpIf) || self.is_call()
    }

    /// Instructions after which control never falls through.
    pub fn is_terminal(self) -> bool {
        matches!(self, Opcode::Jump | Opcode::Ret | Opcode::Exit)
    }

    /// Values consumed from the operand stack (RET consumes its operand count).
    pub fn pops(self, operand: Option<u8>) -> usize {
        match self {
            Opcode::ConstInt | Opcode::Jump => 0,
            Opcode::Dup | Opcode::Pop | Opcode::JumpIf | Opcode::Exit => 1,
            Opcode::Call | Opcode::CallNormal | Opcode::CallJit => 1,
            Opcode::Add | Opcode::Sub | Opcode::Lt | Opcode::Eq => 2,
            Opcode::Ret => operand.unwrap_or(0) as usize,
        }
    }

    /// Values pushed, for opcodes that continue in the same frame. Calls push
    /// whatever the callee returns and are not covered here.
    pub fn pushes(self) -> usize {
        match self {
            Opcode::ConstInt => 1,
            Opcode::Dup => 2,
            Opcode::Add | Opcode::Sub | Opcode::Lt | Opcode::Eq => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub pc: Pc,
    pub opcode: Opcode,
    pub operand: Option<u8>,
}

impl Instruction {
    pub fn width(&self) -> usize {
        self.opcode.width()
    }

    pub fn next_pc(&self) -> Pc {
        self.pc + self.width()
    }

    /// Jump or call target, if the opcode has one.
    pub fn target(&self) -> Option<Pc> {
        if self.opcode.has_target() {
            self.operand.map(usize::from)
        } else {
            None
        }
    }

    pub fn operand_or_zero(&self) -> u8 {
        self.operand.unwrap_or(0)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.operand {
            Some(op) => write!(f, "{}: {} {}", self.pc, self.opcode, op),
            None => write!(f, "{}: {}", self.pc, self.opcode),
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("pc {0} is past the end of the code")]
    OutOfBounds(Pc),
    #[error("unknown opcode byte {byte:#04x} at pc {pc}")]
    UnknownOpcode { pc: Pc, byte: u8 },
    #[error("truncated operand for {opcode} at pc {pc}")]
    TruncatedOperand { pc: Pc, opcode: Opcode },
}

/// Decoded TLA bytecode. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub code: Vec<u8>,
    pub entry_pc: Pc,
    pub source_name: String,
}

impl Program {
    pub fn new(code: Vec<u8>) -> Program {
        Program {
            code,
            entry_pc: 0,
            source_name: String::from("<anonymous>"),
        }
    }

    pub fn named(code: Vec<u8>, name: impl Into<String>) -> Program {
        Program {
            source_name: name.into(),
            ..Program::new(code)
        }
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    pub fn decode_at(&self, pc: Pc) -> Result<Instruction, DecodeError> {
        let byte = *self.code.get(pc).ok_or(DecodeError::OutOfBounds(pc))?;
        let opcode = Opcode::from_byte(byte).ok_or(DecodeError::UnknownOpcode { pc, byte })?;
        let operand = if opcode.arity() == 1 {
            Some(
                *self
                    .code
                    .get(pc + 1)
                    .ok_or(DecodeError::TruncatedOperand { pc, opcode })?,
            )
        } else {
            None
        };
        Ok(Instruction {
            pc,
            opcode,
            operand,
        })
    }

    /// Linear sweep from offset 0 to the end of the code.
    pub fn linear_decode(&self) -> Result<Vec<Instruction>, DecodeError> {
        let mut out = Vec::new();
        let mut pc = 0;
        while pc < self.code.len() {
            let instr = self.decode_at(pc)?;
            pc = instr.next_pc();
            out.push(instr);
        }
        Ok(out)
    }

    /// Targets of backward jumps (`JUMP`/`JUMP_IF` whose target is at or before
    /// the jump). These are the merge points where the interpreter profiles
    /// loop hotness.
    pub fn loop_headers(&self) -> BTreeSet<Pc> {
        self.reachable_instructions()
            .values()
            .filter(|i| matches!(i.opcode, Opcode::Jump | Opcode::JumpIf))
            .filter_map(|i| i.target().filter(|&t| t <= i.pc))
            .collect()
    }

    /// Function entry points: the program entry plus every call target.
    pub fn function_entries(&self) -> BTreeSet<Pc> {
        let mut entries: BTreeSet<Pc> = self
            .reachable_instructions()
            .values()
            .filter(|i| i.opcode.is_call())
            .filter_map(|i| i.target())
            .collect();
        entries.insert(self.entry_pc);
        entries
    }

    /// Instructions reachable from the entry and from every jump/call target,
    /// keyed by pc. Undecodable locations are skipped (see [`validate`]).
    pub fn reachable_instructions(&self) -> HashMap<Pc, Instruction> {
        let mut seen = HashMap::new();
        let mut work = vec![self.entry_pc];
        while let Some(pc) = work.pop() {
            if seen.contains_key(&pc) {
                continue;
            }
            let Ok(instr) = self.decode_at(pc) else {
                continue;
            };
            seen.insert(pc, instr);
            if let Some(t) = instr.target() {
                work.push(t);
            }
            if !instr.opcode.is_terminal() && instr.next_pc() < self.code.len() {
                work.push(instr.next_pc());
            }
        }
        seen
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    EntryOutOfRange,
    UnknownOpcode { byte: u8 },
    TruncatedOperand,
    TargetOutOfRange { target: Pc },
    TargetNotAtBoundary { target: Pc },
    OverlappingInstructions { other: Pc },
    FallsOffEnd,
    TooLarge { len: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub pc: Pc,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::EntryOutOfRange => write!(f, "pc {}: entry point out of range", self.pc),
            ViolationKind::UnknownOpcode { byte } => {
                write!(f, "pc {}: unknown opcode byte {byte:#04x}", self.pc)
            }
            ViolationKind::TruncatedOperand => write!(f, "pc {}: truncated operand", self.pc),
            ViolationKind::TargetOutOfRange { target } => {
                write!(f, "pc {}: target {target} out of range", self.pc)
            }
            ViolationKind::TargetNotAtBoundary { target } => {
                write!(f, "pc {}: target {target} is not an instruction boundary", self.pc)
            }
            ViolationKind::OverlappingInstructions { other } => {
                write!(f, "pc {}: overlaps the instruction at {other}", self.pc)
            }
            ViolationKind::FallsOffEnd => write!(f, "pc {}: control falls off the end", self.pc),
            ViolationKind::TooLarge { len } => {
                write!(f, "program is {len} bytes, limit is {MAX_PROGRAM_LEN}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Check that decoding from the entry and from every jump/call target tiles
/// the reachable code. Violations are reported as data.
pub fn validate(program: &Program) -> ValidationReport {
    let mut report = ValidationReport::default();
    let len = program.code.len();
    if len > MAX_PROGRAM_LEN {
        report.violations.push(Violation {
            pc: 0,
            kind: ViolationKind::TooLarge { len },
        });
    }
    if program.entry_pc >= len {
        report.violations.push(Violation {
            pc: program.entry_pc,
            kind: ViolationKind::EntryOutOfRange,
        });
        return report;
    }

    // Pass 1: decode every boundary reachable from the entry.
    let mut boundaries: BTreeSet<Pc> = BTreeSet::new();
    let mut decoded: Vec<Instruction> = Vec::new();
    let mut work = vec![program.entry_pc];
    while let Some(pc) = work.pop() {
        if !boundaries.insert(pc) {
            continue;
        }
        let instr = match program.decode_at(pc) {
            Ok(i) => i,
            Err(DecodeError::UnknownOpcode { byte, .. }) => {
                report.violations.push(Violation {
                    pc,
                    kind: ViolationKind::UnknownOpcode { byte },
                });
                continue;
            }
            Err(DecodeError::TruncatedOperand { .. }) => {
                report.violations.push(Violation {
                    pc,
                    kind: ViolationKind::TruncatedOperand,
                });
                continue;
            }
            Err(DecodeError::OutOfBounds(_)) => continue,
        };
        decoded.push(instr);
        if let Some(t) = instr.target() {
            if t >= len {
                report.violations.push(Violation {
                    pc,
                    kind: ViolationKind::TargetOutOfRange { target: t },
                });
            } else {
                work.push(t);
            }
        }
        if !instr.opcode.is_terminal() {
            if instr.next_pc() >= len {
                report.violations.push(Violation {
                    pc,
                    kind: ViolationKind::FallsOffEnd,
                });
            } else {
                work.push(instr.next_pc());
            }
        }
    }

    // Pass 2: no boundary may sit inside another instruction's operand bytes.
    let mut owner: HashMap<Pc, Pc> = HashMap::new();
    for instr in &decoded {
        for interior in instr.pc + 1..instr.next_pc() {
            owner.insert(interior, instr.pc);
        }
    }
    for instr in &decoded {
        if let Some(&other) = owner.get(&instr.pc) {
            report.violations.push(Violation {
                pc: instr.pc,
                kind: ViolationKind::OverlappingInstructions { other },
            });
        }
        if let Some(t) = instr.target() {
            if owner.contains_key(&t) {
                report.violations.push(Violation {
                    pc: instr.pc,
                    kind: ViolationKind::TargetNotAtBoundary { target: t },
                });
            }
        }
    }
    report.violations.sort_by_key(|v| v.pc);
    report.violations.dedup();
    report
}

// ---------------------------------------------------------------------------
// Static stack-depth check
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum StackCheckError {
    #[error("pc {pc}: stack underflow (depth {depth}, needs {needs})")]
    Underflow { pc: Pc, depth: usize, needs: usize },
    #[error("pc {pc}: inconsistent stack depth at join ({first} vs {second})")]
    Inconsistent { pc: Pc, first: usize, second: usize },
    #[error("function at {entry}: returns differing value counts")]
    MixedReturnCounts { entry: Pc },
    #[error("function at {entry}: recursive call chain")]
    Recursive { entry: Pc },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Abstract interpretation of operand-stack depth for the function at
/// `entry`, called with `initial` values on its stack. Returns the depth at
/// every reachable pc. Calls are charged with the callee's (uniform) return
/// count.
pub fn check_stack_depth(
    program: &Program,
    entry: Pc,
    initial: usize,
) -> Result<HashMap<Pc, usize>, StackCheckError> {
    let mut returns = HashMap::new();
    check_function(program, entry, initial, &mut returns, &mut Vec::new())
}

fn check_function(
    program: &Program,
    entry: Pc,
    initial: usize,
    returns: &mut HashMap<Pc, usize>,
    active: &mut Vec<Pc>,
) -> Result<HashMap<Pc, usize>, StackCheckError> {
    if active.contains(&entry) {
        return Err(StackCheckError::Recursive { entry });
    }
    active.push(entry);
    let mut depth_at: HashMap<Pc, usize> = HashMap::new();
    let mut ret_count: Option<usize> = None;
    let mut work = vec![(entry, initial)];
    while let Some((pc, depth)) = work.pop() {
        if let Some(&seen) = depth_at.get(&pc) {
            if seen != depth {
                return Err(StackCheckError::Inconsistent {
                    pc,
                    first: seen,
                    second: depth,
                });
            }
            continue;
        }
        depth_at.insert(pc, depth);
        let instr = program.decode_at(pc)?;
        let needs = instr.opcode.pops(instr.operand).max(match instr.opcode {
            Opcode::Dup => 1,
            _ => 0,
        });
        if depth < needs {
            return Err(StackCheckError::Underflow { pc, depth, needs });
        }
        match instr.opcode {
            Opcode::Ret => {
                let k = instr.operand_or_zero() as usize;
                match ret_count {
                    Some(prev) if prev != k => {
                        return Err(StackCheckError::MixedReturnCounts { entry })
                    }
                    _ => ret_count = Some(k),
                }
            }
            Opcode::Exit => {}
            Opcode::Jump => work.push((instr.target().unwrap_or(0), depth)),
            Opcode::JumpIf => {
                work.push((instr.target().unwrap_or(0), depth - 1));
                work.push((instr.next_pc(), depth - 1));
            }
            op if op.is_call() => {
                let callee = instr.target().unwrap_or(0);
                let k = match returns.get(&callee) {
                    Some(&k) => k,
                    None => {
                        check_function(program, callee, 1, returns, active)?;
                        returns.get(&callee).copied().unwrap_or(0)
                    }
                };
                work.push((instr.next_pc(), depth - 1 + k));
            }
            op => work.push((instr.next_pc(), depth - op.pops(None) + op.pushes())),
        }
    }
    returns.insert(entry, ret_count.unwrap_or(0));
    active.pop();
    Ok(depth_at)
}

// ---------------------------------------------------------------------------
// Assembler / disassembler
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("operand {0} out of byte range (0-255)")]
    OperandOutOfRange(String),
    #[error("{0} requires an operand")]
    MissingOperand(Opcode),
    #[error("{0} takes no operand")]
    UnexpectedOperand(Opcode),
    #[error("pc annotation {written} does not match offset {actual}")]
    PcMismatch { written: usize, actual: usize },
    #[error("program exceeds {MAX_PROGRAM_LEN} bytes")]
    TooLarge,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("{line}:{column}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub column: usize,
    pub kind: AsmErrorKind,
}

enum OperandRef {
    Number(u8),
    Label(String, usize, usize),
}

struct AsmLine {
    opcode: Opcode,
    operand: Option<OperandRef>,
}

fn is_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Assemble TLA text.
///
/// Each line is `[label:] MNEMONIC [operand] [# comment]`; mnemonics are
/// case-insensitive and operands are decimal bytes or label names. A numeric
/// prefix such as `14:` is accepted as a pc annotation and checked against
/// the running offset, so disassembler output assembles back. Commas and a
/// `tla.` mnemonic prefix are tolerated so listings written as Python byte
/// arrays can be pasted in directly.
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut labels: HashMap<String, Pc> = HashMap::new();
    let mut lines: Vec<AsmLine> = Vec::new();
    let mut offset: usize = 0;

    for (lineno, raw) in source.lines().enumerate() {
        let line_no = lineno + 1;
        let text = raw.split('#').next().unwrap_or("");
        // (column, token) pairs; commas count as whitespace.
        let mut tokens: Vec<(usize, &str)> = Vec::new();
        let mut start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            let sep = c.is_whitespace() || c == ',';
            match (sep, start) {
                (true, Some(s)) => {
                    tokens.push((s, &text[s..i]));
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            tokens.push((s, &text[s..]));
        }
        // Split `label:MNEMONIC` glued tokens.
        let mut expanded: Vec<(usize, String)> = Vec::new();
        for (col, tok) in tokens {
            if let Some(idx) = tok.find(':') {
                if idx + 1 < tok.len() {
                    expanded.push((col, tok[..=idx].to_string()));
                    expanded.push((col + idx + 1, tok[idx + 1..].to_string()));
                    continue;
                }
            }
            expanded.push((col, tok.to_string()));
        }

        let mut rest = expanded.as_slice();
        while let Some((col, tok)) = rest.first() {
            let Some(name) = tok.strip_suffix(':') else {
                break;
            };
            let err = |kind| AsmError {
                line: line_no,
                column: col + 1,
                kind,
            };
            if !name.is_empty() && name.bytes().all(|b| b.is_ascii_digit()) {
                let written: usize = name
                    .parse()
                    .map_err(|_| err(AsmErrorKind::Syntax(format!("bad pc `{name}`"))))?;
                if written != offset {
                    return Err(err(AsmErrorKind::PcMismatch {
                        written,
                        actual: offset,
                    }));
                }
            } else if is_label_name(name) {
                if labels.insert(name.to_string(), offset).is_some() {
                    return Err(err(AsmErrorKind::DuplicateLabel(name.to_string())));
                }
            } else {
                return Err(err(AsmErrorKind::Syntax(format!("bad label `{name}`"))));
            }
            rest = &rest[1..];
        }
        let Some((mcol, mnemonic)) = rest.first() else {
            continue;
        };
        let at = |column: usize, kind| AsmError {
            line: line_no,
            column: column + 1,
            kind,
        };
        let bare = mnemonic
            .strip_prefix("tla.")
            .or_else(|| mnemonic.strip_prefix("TLA."))
            .unwrap_or(mnemonic);
        let opcode = Opcode::from_mnemonic(bare)
            .ok_or_else(|| at(*mcol, AsmErrorKind::UnknownMnemonic(mnemonic.clone())))?;
        let operand = match (&rest[1..], opcode.arity()) {
            ([], 0) => None,
            ([], _) => return Err(at(*mcol, AsmErrorKind::MissingOperand(opcode))),
            ([(ocol, _), ..], 0) => return Err(at(*ocol, AsmErrorKind::UnexpectedOperand(opcode))),
            ([(ocol, tok)], _) => {
                if tok.bytes().all(|b| b.is_ascii_digit()) || tok.starts_with('-') {
                    let value: i64 = tok
                        .parse()
                        .map_err(|_| at(*ocol, AsmErrorKind::OperandOutOfRange(tok.clone())))?;
                    let byte = u8::try_from(value)
                        .map_err(|_| at(*ocol, AsmErrorKind::OperandOutOfRange(tok.clone())))?;
                    Some(OperandRef::Number(byte))
                } else if is_label_name(tok) {
                    Some(OperandRef::Label(tok.clone(), line_no, ocol + 1))
                } else {
                    return Err(at(*ocol, AsmErrorKind::Syntax(format!("bad operand `{tok}`"))));
                }
            }
            ([_, (extra, tok), ..], _) => {
                return Err(at(*extra, AsmErrorKind::Syntax(format!("unexpected `{tok}`"))))
            }
        };
        offset += opcode.width();
        if offset > MAX_PROGRAM_LEN {
            return Err(at(*mcol, AsmErrorKind::TooLarge));
        }
        lines.push(AsmLine { opcode, operand });
    }

    let mut code = Vec::with_capacity(offset);
    for line in lines {
        code.push(line.opcode.to_byte());
        match line.operand {
            None => {}
            Some(OperandRef::Number(b)) => code.push(b),
            Some(OperandRef::Label(name, line, column)) => {
                let &target = labels.get(&name).ok_or_else(|| AsmError {
                    line,
                    column,
                    kind: AsmErrorKind::UndefinedLabel(name.clone()),
                })?;
                let byte = u8::try_from(target).map_err(|_| AsmError {
                    line,
                    column,
                    kind: AsmErrorKind::OperandOutOfRange(target.to_string()),
                })?;
                code.push(byte);
            }
        }
    }
    Ok(Program::new(code))
}

/// One instruction per line, each prefixed with its pc.
pub fn disassemble(program: &Program) -> Result<String, DecodeError> {
    let mut out = String::new();
    for instr in program.linear_decode()? {
        out.push_str(&instr.to_string());
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::programs;

    fn ops(p: &Program) -> Vec<(Opcode, Option<u8>)> {
        p.linear_decode()
            .unwrap()
            .into_iter()
            .map(|i| (i.opcode, i.operand))
            .collect()
    }

    #[test]
    fn loop_listing_assembles_to_fifteen_bytes() {
        let p = assemble(programs::LOOP).unwrap();
        assert_eq!(p.len(), 15);
        use Opcode::*;
        assert_eq!(
            ops(&p),
            vec![
                (Dup, None),
                (ConstInt, Some(1)),
                (Lt, None),
                (JumpIf, Some(11)),
                (ConstInt, Some(1)),
                (Sub, None),
                (Jump, Some(0)),
                (ConstInt, Some(10)),
                (Sub, None),
                (Exit, None),
            ]
        );
    }

    #[test]
    fn python_style_listing_is_accepted() {
        let text = "# loop.tla\ntla.DUP,\ntla.CONST_INT, 1,\ntla.LT,\ntla.JUMP_IF, 11,\n\
                    tla.CONST_INT, 1,\ntla.SUB,\ntla.JUMP, 0,\ntla.CONST_INT, 10\ntla.SUB,\ntla.EXIT,\n";
        let p = assemble(text).unwrap();
        assert_eq!(p.code, assemble(programs::LOOP).unwrap().code);
    }

    #[test]
    fn exit_alone_is_one_byte() {
        let p = assemble("EXIT").unwrap();
        assert_eq!(p.code, vec![Opcode::Exit.to_byte()]);
        assert!(validate(&p).is_valid());
    }

    #[test]
    fn loopabit_targets_land_on_named_instructions() {
        let p = assemble(programs::LOOPABIT).unwrap();
        assert_eq!(p.len(), 26);
        assert_eq!(p.decode_at(8).unwrap().operand, Some(12));
        assert_eq!(p.decode_at(12).unwrap().opcode, Opcode::Pop);
        assert_eq!(p.decode_at(21).unwrap().operand, Some(25));
        assert_eq!(p.decode_at(25).unwrap().opcode, Opcode::Exit);
    }

    #[test]
    fn bundled_programs_validate_and_branch_where_listed() {
        let lp = assemble(programs::LOOP).unwrap();
        assert!(validate(&lp).is_valid());
        assert_eq!(lp.decode_at(11).unwrap().opcode, Opcode::ConstInt);
        let cb = assemble(&programs::callabit(Opcode::Call)).unwrap();
        assert!(validate(&cb).is_valid());
        assert_eq!(cb.decode_at(15).unwrap().opcode, Opcode::Exit);
        assert_eq!(cb.decode_at(27).unwrap().opcode, Opcode::Ret);
    }

    #[test]
    fn disassembly_of_loop_ends_with_exit() {
        let text = disassemble(&assemble(programs::LOOP).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(*lines.last().unwrap(), "14: EXIT");
    }

    #[test]
    fn disassembly_of_callabit_names_call_and_ret() {
        let text = disassemble(&assemble(&programs::callabit(Opcode::Call)).unwrap()).unwrap();
        assert!(text.contains("1: CALL 16\n"));
        assert!(text.contains("27: RET 1\n"));
    }

    #[test]
    fn empty_code_disassembles_to_nothing() {
        assert_eq!(disassemble(&Program::new(vec![])).unwrap(), "");
    }

    #[test]
    fn disassembler_rejects_unknown_byte() {
        let err = disassemble(&Program::new(vec![0xff])).unwrap_err();
        assert_eq!(err, DecodeError::UnknownOpcode { pc: 0, byte: 0xff });
    }

    #[test]
    fn jump_out_of_range_is_reported() {
        let p = Program::new(vec![Opcode::Jump.to_byte(), 200]);
        let report = validate(&p);
        assert_eq!(
            report.violations,
            vec![Violation {
                pc: 0,
                kind: ViolationKind::TargetOutOfRange { target: 200 }
            }]
        );
    }

    #[test]
    fn missing_operand_byte_is_reported() {
        let p = Program::new(vec![Opcode::JumpIf.to_byte()]);
        let report = validate(&p);
        assert_eq!(report.violations[0].kind, ViolationKind::TruncatedOperand);
    }

    #[test]
    fn jump_into_operand_is_reported() {
        // 0: CONST_INT 7 / 2: JUMP 1 -- lands inside the CONST_INT operand
        let p = Program::new(vec![0, 7, Opcode::Jump.to_byte(), 1]);
        let report = validate(&p);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::TargetNotAtBoundary { target: 1 }));
    }

    #[test]
    fn falling_off_the_end_is_reported() {
        let p = assemble("CONST_INT 1").unwrap();
        assert_eq!(validate(&p).violations[0].kind, ViolationKind::FallsOffEnd);
    }

    #[test]
    fn labels_resolve_to_offsets() {
        let p = assemble("top: DUP\n JUMP_IF done\n JUMP top\ndone: EXIT\n").unwrap();
        assert_eq!(p.code, vec![1, 8, 5, 7, 0, 13]);
    }

    #[test]
    fn assembler_errors_carry_positions() {
        let e = assemble("DUP\n  FROB 3\n").unwrap_err();
        assert_eq!((e.line, e.column), (2, 3));
        assert!(matches!(e.kind, AsmErrorKind::UnknownMnemonic(_)));

        let e = assemble("JUMP nowhere").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::UndefinedLabel("nowhere".into()));

        let e = assemble("CONST_INT 256").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::OperandOutOfRange(_)));

        let e = assemble("CONST_INT -1").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::OperandOutOfRange(_)));

        let e = assemble("DUP 3").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::UnexpectedOperand(Opcode::Dup));

        let e = assemble("JUMP").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::MissingOperand(Opcode::Jump));

        let e = assemble("5: EXIT").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::PcMismatch { written: 5, actual: 0 });
    }

    #[test]
    fn oversized_programs_are_rejected() {
        let text = "DUP\n".repeat(MAX_PROGRAM_LEN + 1);
        assert_eq!(assemble(&text).unwrap_err().kind, AsmErrorKind::TooLarge);
    }

    #[test]
    fn mnemonics_are_case_insensitive() {
        assert_eq!(assemble("const_int 3\nexit").unwrap().code, vec![0, 3, 13]);
    }

    #[test]
    fn loop_headers_are_backward_targets() {
        let lp = assemble(programs::LOOPABIT).unwrap();
        assert_eq!(lp.loop_headers().into_iter().collect::<Vec<_>>(), vec![1]);
        let cb = assemble(&programs::callabit(Opcode::Call)).unwrap();
        assert_eq!(cb.loop_headers().into_iter().collect::<Vec<_>>(), vec![0, 16]);
        assert_eq!(cb.function_entries().into_iter().collect::<Vec<_>>(), vec![0, 16]);
    }

    #[test]
    fn stack_check_accepts_bundled_programs() {
        for src in [programs::LOOP.to_string(), programs::LOOPABIT.to_string(), programs::callabit(Opcode::CallJit)] {
            let p = assemble(&src).unwrap();
            check_stack_depth(&p, 0, 1).unwrap();
        }
        let depths = check_stack_depth(&assemble(programs::LOOPABIT).unwrap(), 0, 1).unwrap();
        assert_eq!(depths[&1], 2);
        assert_eq!(depths[&25], 2);
    }

    #[test]
    fn stack_check_rejects_underflow_and_growth() {
        let p = assemble("POP\nPOP\nEXIT").unwrap();
        assert!(matches!(
            check_stack_depth(&p, 0, 1),
            Err(StackCheckError::Underflow { pc: 1, .. })
        ));
        let p = assemble("top: DUP\nJUMP top").unwrap();
        assert!(matches!(
            check_stack_depth(&p, 0, 1),
            Err(StackCheckError::Inconsistent { pc: 0, .. })
        ));
    }
}
