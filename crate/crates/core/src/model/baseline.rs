//! The prior-work call-site rule: a block that pushes a return address and
//! then jumps directly calls the jump target.

use std::collections::BTreeSet;

use crate::disasm::Program;
use crate::opcode::Opcode;
use crate::segment::{BlockGraph, JumpKind};
use crate::Offset;

/// Targets of direct `JUMP`s whose basic block pushes at least one
/// JUMPDEST-valued constant besides the target itself.
pub fn baseline_entries(program: &Program, graph: &BlockGraph) -> BTreeSet<Offset> {
    let mut out = BTreeSet::new();
    for (b, kind) in graph.blocks.iter().zip(&graph.jumps) {
        let Some(JumpKind::Direct { target }) = *kind else { continue };
        if b.last(program).opcode != Opcode::JUMP {
            continue;
        }
        let dest_pushes: Vec<Offset> =
            b.instructions(program).iter().filter_map(|i| i.push?.as_offset()).filter(|&o| program.is_jumpdest(o)).collect();
        let others = dest_pushes.len() - dest_pushes.contains(&target) as usize;
        if others >= 1 {
            out.insert(target);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disasm::decode;

    fn run(hex: &str) -> BTreeSet<Offset> {
        let p = decode(hex).unwrap();
        baseline_entries(&p, &BlockGraph::new(&p))
    }

    #[test]
    fn same_block_call_detected() {
        // PUSH1 ret PUSH1 ff PUSH1 foo JUMP | ret: JUMPDEST STOP | foo: JUMPDEST JUMP
        let p = "6008 60ff 600b 56 00 5b 00 00 5b 56".replace(' ', "");
        assert_eq!(run(&p), BTreeSet::from([0x0b]));
    }

    #[test]
    fn no_calls_is_empty() {
        // PUSH1 4 JUMP STOP JUMPDEST STOP: plain jump, no return address
        assert!(run("600456005b00").is_empty());
    }
}
