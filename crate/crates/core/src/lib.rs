//! A two-tier trace-based JIT for the TLA stack bytecode language.
//!
//! Tier 1 compiles whole methods by tracing every path once and stitching the
//! resulting linear trace back into a body with bridges. Tier 2 records hot
//! loops at run time and guards on the path it saw. Both tiers run on the
//! interpreter's own opcode handlers.

pub mod bench;
pub mod bytecode;
pub mod cfg;
pub mod executor;
pub mod interp;
pub mod programs;
pub mod stitcher;
pub mod tiers;
pub mod tracer;

pub use bytecode::{assemble, disassemble, validate, Instruction, Opcode, Pc, Program};
pub use interp::{interpret, truthy, CallKind, Frame, Outcome, Value, VmError};
pub use stitcher::StitchedCode;
pub use tiers::{Metrics, Mode, TierPolicy, VmSession};
pub use tracer::{LinearTrace, TraceOp};
