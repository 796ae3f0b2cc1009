//! Benchmark programs shipped with the VM, as assembly text.

use crate::bytecode::Opcode;

pub const LOOP: &str = include_str!("../programs/loop.tla");
pub const LOOPABIT: &str = include_str!("../programs/loopabit.tla");
pub const CALLABIT: &str = include_str!("../programs/callabit.tla");
pub const CALLABIT_NORMAL: &str = include_str!("../programs/callabit_normal.tla");
pub const CALLABIT_JIT: &str = include_str!("../programs/callabit_jit.tla");
/// A method with two nested branches whose arms rejoin at a loop header.
pub const NESTED_BRANCHES: &str = include_str!("../programs/nested_branches.tla");

/// callabit with `main`'s call annotated by `kind` (one of the three call
/// opcodes).
pub fn callabit(kind: Opcode) -> String {
    match kind {
        Opcode::CallNormal => CALLABIT_NORMAL,
        Opcode::CallJit => CALLABIT_JIT,
        Opcode::Call => CALLABIT,
        other => panic!("{other} is not a call opcode"),
    }
    .to_string()
}
