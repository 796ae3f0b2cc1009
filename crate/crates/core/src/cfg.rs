//! Control-flow graphs decoded directly from bytecode.
//!
//! [`instruction_cfg`] has one node per reachable instruction and is what
//! stitched code is compared against. [`block_cfg`] groups instructions into
//! basic blocks for display.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::Serialize;

use crate::bytecode::{DecodeError, Instruction, Opcode, Pc, Program};

/// Intra-procedural successors of one instruction. Calls fall through.
pub fn successors(instr: &Instruction) -> Vec<Pc> {
    match instr.opcode {
        Opcode::Jump => vec![instr.operand_or_zero() as Pc],
        Opcode::JumpIf => vec![instr.next_pc(), instr.operand_or_zero() as Pc],
        Opcode::Ret | Opcode::Exit => vec![],
        _ => vec![instr.next_pc()],
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cfg {
    pub entry: Pc,
    pub nodes: BTreeSet<Pc>,
    pub edges: BTreeSet<(Pc, Pc)>,
}

impl Cfg {
    pub fn new(entry: Pc) -> Cfg {
        Cfg {
            entry,
            ..Cfg::default()
        }
    }

    pub fn add_edge(&mut self, from: Pc, to: Pc) {
        self.nodes.insert(from);
        self.nodes.insert(to);
        self.edges.insert((from, to));
    }
}

/// Instruction-level CFG of the function entered at `entry`.
pub fn instruction_cfg(program: &Program, entry: Pc) -> Result<Cfg, DecodeError> {
    let mut cfg = Cfg::new(entry);
    let mut work = VecDeque::from([entry]);
    cfg.nodes.insert(entry);
    while let Some(pc) = work.pop_front() {
        let instr = program.decode_at(pc)?;
        for s in successors(&instr) {
            if cfg.nodes.insert(s) {
                work.push_back(s);
            }
            cfg.edges.insert((pc, s));
        }
    }
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Fall,
    Jump,
    /// The taken side of a `JUMP_IF`.
    Cond,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Block {
    pub leader: Pc,
    pub instrs: Vec<Instruction>,
    pub succs: Vec<(Pc, EdgeKind)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockCfg {
    pub entry: Pc,
    pub blocks: BTreeMap<Pc, Block>,
}

impl BlockCfg {
    pub fn leaders(&self) -> BTreeSet<Pc> {
        self.blocks.keys().copied().collect()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Pc, Pc, EdgeKind)> + '_ {
        self.blocks
            .values()
            .flat_map(|b| b.succs.iter().map(move |&(to, kind)| (b.leader, to, kind)))
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph cfg {\n  node [shape=box fontname=monospace];\n");
        for b in self.blocks.values() {
            let mut label = String::new();
            for i in &b.instrs {
                let _ = write!(label, "{i}\\l");
            }
            let _ = writeln!(out, "  b{} [label=\"{label}\"];", b.leader);
        }
        for (from, to, kind) in self.edges() {
            let attrs = match kind {
                EdgeKind::Fall => "",
                EdgeKind::Jump => " [style=bold]",
                EdgeKind::Cond => " [label=\"T\" style=dashed]",
            };
            let _ = writeln!(out, "  b{from} -> b{to}{attrs};");
        }
        out.push_str("}\n");
        out
    }
}

/// Basic blocks of the function entered at `entry`. A `JUMP_IF` always sits
/// in a block of its own so the branch point is its own node.
pub fn block_cfg(program: &Program, entry: Pc) -> Result<BlockCfg, DecodeError> {
    let icfg = instruction_cfg(program, entry)?;
    let mut instrs = BTreeMap::new();
    for &pc in &icfg.nodes {
        instrs.insert(pc, program.decode_at(pc)?);
    }
    let mut leaders = BTreeSet::from([entry]);
    for instr in instrs.values() {
        match instr.opcode {
            Opcode::Jump | Opcode::JumpIf => {
                leaders.insert(instr.operand_or_zero() as Pc);
                if instrs.contains_key(&instr.next_pc()) {
                    leaders.insert(instr.next_pc());
                }
                if instr.opcode == Opcode::JumpIf {
                    leaders.insert(instr.pc);
                }
            }
            _ => {}
        }
    }

    let mut blocks = BTreeMap::new();
    for &leader in &leaders {
        let mut body = Vec::new();
        let mut pc = leader;
        let succs = loop {
            let instr = instrs[&pc];
            body.push(instr);
            let next = instr.next_pc();
            match instr.opcode {
                Opcode::Jump => break vec![(instr.operand_or_zero() as Pc, EdgeKind::Jump)],
                Opcode::JumpIf => {
                    break vec![(next, EdgeKind::Fall), (instr.operand_or_zero() as Pc, EdgeKind::Cond)]
                }
                Opcode::Ret | Opcode::Exit => break vec![],
                _ if leaders.contains(&next) => break vec![(next, EdgeKind::Fall)],
                _ => pc = next,
            }
        };
        blocks.insert(
            leader,
            Block {
                leader,
                instrs: body,
                succs,
            },
        );
    }
    Ok(BlockCfg { entry, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::assemble;
    use crate::programs;

    #[test]
    fn loopabit_blocks() {
        let p = assemble(programs::LOOPABIT).unwrap();
        let cfg = block_cfg(&p, 0).unwrap();
        assert_eq!(cfg.leaders(), BTreeSet::from([0, 1, 8, 10, 12, 21, 23, 25]));
        let conds: Vec<_> = cfg.edges().filter(|e| e.2 == EdgeKind::Cond).collect();
        assert_eq!(conds, vec![(8, 12, EdgeKind::Cond), (21, 25, EdgeKind::Cond)]);
    }

    #[test]
    fn loop_has_one_back_edge_and_one_exit() {
        let p = assemble(programs::LOOP).unwrap();
        let cfg = block_cfg(&p, 0).unwrap();
        let edges: Vec<_> = cfg.edges().collect();
        let back: Vec<_> = edges.iter().filter(|e| e.1 <= e.0).collect();
        assert_eq!(back, vec![&(6, 0, EdgeKind::Jump)]);
        let exits: Vec<_> = cfg.blocks.values().filter(|b| b.succs.is_empty()).collect();
        assert_eq!(exits.len(), 1);
        assert_eq!(exits[0].leader, 11);
        assert!(cfg.to_dot().starts_with("digraph cfg {"));
    }

    #[test]
    fn instruction_cfg_is_intraprocedural() {
        let p = assemble(programs::CALLABIT).unwrap();
        let main = instruction_cfg(&p, 0).unwrap();
        assert!(main.edges.contains(&(1, 3)));
        assert!(!main.nodes.contains(&16));
        let sub = instruction_cfg(&p, 16).unwrap();
        assert_eq!(sub.nodes.iter().next(), Some(&16));
        assert!(sub.edges.contains(&(23, 27)) && sub.edges.contains(&(25, 16)));
    }
}
