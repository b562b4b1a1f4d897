//! Basic blocks, reachable blocks and local jump classification.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::Serialize;

use crate::disasm::{Instruction, Program};
use crate::opcode::Opcode;
use crate::symbolic::{SymStack, SymbolicValue};
use crate::word::Word;
use crate::Offset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Terminator {
    Jump,
    ConditionalJump,
    Halt,
    FallThrough,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub entry: Offset,
    /// Instruction index range into `Program::instructions`.
    pub range: Range<usize>,
    pub terminator: Terminator,
}

impl BasicBlock {
    pub fn instructions<'p>(&self, program: &'p Program) -> &'p [Instruction] {
        &program.instructions()[self.range.clone()]
    }

    pub fn last<'p>(&self, program: &'p Program) -> &'p Instruction {
        &program.instructions()[self.range.end - 1]
    }

    /// Offset just past the block.
    pub fn end_offset(&self, program: &Program) -> Offset {
        self.last(program).next_offset()
    }
}

/// Splits the program into maximal single-entry, single-exit runs.
pub fn basic_blocks(program: &Program) -> Vec<BasicBlock> {
    let ins = program.instructions();
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 0..ins.len() {
        let op = ins[i].opcode;
        let next_is_dest = ins.get(i + 1).is_some_and(|n| n.opcode == Opcode::JUMPDEST);
        let ends = op.alters_control() || next_is_dest || i + 1 == ins.len();
        if ends {
            let terminator = if op == Opcode::JUMP {
                Terminator::Jump
            } else if op == Opcode::JUMPI {
                Terminator::ConditionalJump
            } else if op.is_halting() {
                Terminator::Halt
            } else {
                Terminator::FallThrough
            };
            blocks.push(BasicBlock { entry: ins[start].offset, range: start..i + 1, terminator });
            start = i + 1;
        }
    }
    blocks
}

/// Runs that start at offset 0 or a JUMPDEST and extend to the next
/// JUMPDEST. JUMP/JUMPI may appear in the interior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachableBlock {
    pub entry: Offset,
    pub range: Range<usize>,
    /// Index of the first halting instruction; anything after it up to the
    /// next JUMPDEST cannot execute and is kept only so blocks tile the code.
    pub exit: Option<usize>,
    /// Ground-truth entry label, when attached.
    pub label: Option<bool>,
}

pub fn reachable_blocks(program: &Program) -> Vec<ReachableBlock> {
    let ins = program.instructions();
    let mut blocks: Vec<ReachableBlock> = Vec::new();
    for (i, inst) in ins.iter().enumerate() {
        if i == 0 || inst.opcode == Opcode::JUMPDEST {
            blocks.push(ReachableBlock { entry: inst.offset, range: i..i + 1, exit: None, label: None });
        } else {
            let b = blocks.last_mut().expect("first instruction opens a block");
            b.range.end = i + 1;
        }
        let b = blocks.last_mut().unwrap();
        if b.exit.is_none() && inst.opcode.is_halting() {
            b.exit = Some(i);
        }
    }
    blocks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JumpKind {
    /// Destination pushed inside the block and a JUMPDEST.
    Direct {
        target: Offset,
    },
    Indirect,
    /// Destination resolved to a constant that is not a JUMPDEST; executing
    /// it reverts.
    #[serde(serialize_with = "ser_word")]
    Dead(Word),
}

fn ser_word<S: serde::Serializer>(w: &Word, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&w.to_string())
}

/// Classifies the jump ending `block` by simulating the block in isolation.
/// Returns `None` if the block does not end in JUMP/JUMPI.
pub fn classify_jump(program: &Program, block: &BasicBlock) -> Option<JumpKind> {
    let ins = block.instructions(program);
    let (last, body) = ins.split_last()?;
    if !last.opcode.is_jump() {
        return None;
    }
    let mut stack = SymStack::new();
    for i in body {
        if stack.apply(i).is_err() {
            return Some(JumpKind::Indirect);
        }
    }
    Some(match stack.pop() {
        SymbolicValue::Const(w) => match w.as_offset() {
            Some(t) if program.is_jumpdest(t) => JumpKind::Direct { target: t },
            _ => JumpKind::Dead(w),
        },
        _ => JumpKind::Indirect,
    })
}

/// Basic blocks with their jump classification and intra-block successor
/// edges, indexed by entry offset.
#[derive(Debug, Clone)]
pub struct BlockGraph {
    pub blocks: Vec<BasicBlock>,
    pub jumps: Vec<Option<JumpKind>>,
    by_entry: BTreeMap<Offset, usize>,
}

impl BlockGraph {
    pub fn new(program: &Program) -> Self {
        let blocks = basic_blocks(program);
        let jumps = blocks.iter().map(|b| classify_jump(program, b)).collect();
        let by_entry = blocks.iter().enumerate().map(|(i, b)| (b.entry, i)).collect();
        BlockGraph { blocks, jumps, by_entry }
    }

    pub fn block_at(&self, entry: Offset) -> Option<usize> {
        self.by_entry.get(&entry).copied()
    }

    /// Index of the block containing the instruction at `offset`.
    pub fn block_containing(&self, offset: Offset) -> Option<usize> {
        self.by_entry.range(..=offset).next_back().map(|(_, &i)| i)
    }

    /// Successor entry offsets using only locally resolved jumps. Indirect
    /// jumps contribute nothing; the fall-through successor of a block that
    /// runs off the end of code does not exist.
    pub fn local_successors(&self, idx: usize) -> Vec<Offset> {
        let b = &self.blocks[idx];
        let next = self.blocks.get(idx + 1).map(|n| n.entry);
        let mut out = Vec::new();
        match b.terminator {
            Terminator::Halt => {}
            Terminator::FallThrough => out.extend(next),
            Terminator::Jump | Terminator::ConditionalJump => {
                if let Some(JumpKind::Direct { target }) = self.jumps[idx] {
                    out.push(target);
                }
                if b.terminator == Terminator::ConditionalJump {
                    out.extend(next);
                }
            }
        }
        out
    }
}

#[derive(Debug, Serialize)]
pub struct BlockJson {
    pub entry: Offset,
    pub end: Offset,
    pub terminator: Terminator,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jump: Option<JumpKind>,
    pub instructions: usize,
}

impl BlockGraph {
    pub fn to_json(&self, program: &Program) -> Vec<BlockJson> {
        self.blocks
            .iter()
            .zip(&self.jumps)
            .map(|(b, j)| BlockJson {
                entry: b.entry,
                end: b.end_offset(program),
                terminator: b.terminator,
                jump: *j,
                instructions: b.range.len(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disasm::decode;
    use proptest::prelude::*;

    #[test]
    fn jump_then_dest() {
        // PUSH1 3, JUMP, JUMPDEST, STOP
        let p = decode("6003565b00").unwrap();
        let bbs = basic_blocks(&p);
        assert_eq!(bbs.len(), 2);
        assert_eq!((bbs[0].entry, bbs[0].range.clone(), bbs[0].terminator), (0, 0..2, Terminator::Jump));
        assert_eq!((bbs[1].entry, bbs[1].terminator), (3, Terminator::Halt));
        assert_eq!(classify_jump(&p, &bbs[0]), Some(JumpKind::Direct { target: 3 }));
    }

    #[test]
    fn straight_line_is_one_block() {
        let p = decode("6001600201600055").unwrap();
        let bbs = basic_blocks(&p);
        assert_eq!(bbs.len(), 1);
        assert_eq!(bbs[0].terminator, Terminator::FallThrough);
        assert_eq!(reachable_blocks(&p).len(), 1);
    }

    #[test]
    fn reachable_blocks_keep_interior_jumps() {
        // JUMPDEST, PUSH1 5, JUMP, PUSH1 7, JUMPDEST, STOP
        let p = decode("5b6005566007 5b00".replace(' ', "").as_str()).unwrap();
        let rbs = reachable_blocks(&p);
        assert_eq!(rbs.iter().map(|b| b.entry).collect::<Vec<_>>(), vec![0, 6]);
        assert_eq!(rbs[0].range, 0..4);
        assert_eq!(rbs[1].exit, Some(5));
    }

    #[test]
    fn halts_close_live_region() {
        for halt in ["00", "f3", "fd", "fe", "ff"] {
            let p = decode(&format!("6001{halt}60025b00")).unwrap();
            let rbs = reachable_blocks(&p);
            assert_eq!(rbs.len(), 2, "{halt}");
            assert_eq!(rbs[0].exit, Some(1), "{halt}");
            let bbs = basic_blocks(&p);
            assert_eq!(bbs[0].terminator, Terminator::Halt);
            assert_eq!(bbs.len(), 3);
        }
    }

    #[test]
    fn classify_examples() {
        let mut code = vec![0x5b; 0x4f];
        code.extend([0x61, 0x00, 0x4e, 0x56]);
        let p = Program::from_bytes(code);
        let g = BlockGraph::new(&p);
        let last = g.blocks.last().unwrap();
        assert_eq!(classify_jump(&p, last), Some(JumpKind::Direct { target: 0x4e }));

        let p = decode("5b9056").unwrap();
        let bbs = basic_blocks(&p);
        assert_eq!(classify_jump(&p, &bbs[0]), Some(JumpKind::Indirect));

        let p = decode("60ff600856005b5b5b00").unwrap();
        let bbs = basic_blocks(&p);
        assert_eq!(classify_jump(&p, &bbs[0]), Some(JumpKind::Direct { target: 8 }));

        // constant into a non-JUMPDEST
        let p = decode("600156").unwrap();
        assert!(matches!(classify_jump(&p, &basic_blocks(&p)[0]), Some(JumpKind::Dead(_))));
    }

    #[test]
    fn masked_and_swapped_targets() {
        // PUSH1 0x0a, PUSH1 0x00, SWAP1, PUSH2 0xffff, AND, JUMP ... JUMPDEST at 0x0a
        let p = decode("600a60009061ffff16565b00").unwrap();
        let bbs = basic_blocks(&p);
        assert_eq!(classify_jump(&p, &bbs[0]), Some(JumpKind::Direct { target: 0x0a }));
    }

    fn tiles<T>(items: &[T], range: impl Fn(&T) -> Range<usize>, n: usize) -> bool {
        let mut next = 0;
        for it in items {
            let r = range(it);
            if r.start != next || r.is_empty() {
                return false;
            }
            next = r.end;
        }
        next == n
    }

    proptest! {
        #[test]
        fn blocks_tile_and_entries_match(code in proptest::collection::vec(
            prop_oneof![Just(0x5bu8), Just(0x56), Just(0x57), Just(0x00), Just(0x60), any::<u8>()], 0..200)) {
            let p = Program::from_bytes(code);
            let n = p.instructions().len();
            let bbs = basic_blocks(&p);
            let rbs = reachable_blocks(&p);
            prop_assert!(tiles(&bbs, |b| b.range.clone(), n));
            prop_assert!(tiles(&rbs, |b| b.range.clone(), n));
            let mut expected: Vec<Offset> = p.jumpdests().iter().copied().collect();
            if n > 0 && !expected.contains(&0) {
                expected.insert(0, 0);
            }
            prop_assert_eq!(rbs.iter().map(|b| b.entry).collect::<Vec<_>>(), expected);
            for b in &bbs {
                for (k, i) in b.instructions(&p).iter().enumerate() {
                    prop_assert!(k == 0 || i.opcode != Opcode::JUMPDEST);
                    prop_assert!(k + 1 == b.range.len() || !i.opcode.alters_control());
                }
            }
            let g = BlockGraph::new(&p);
            for j in g.jumps.iter().flatten() {
                if let JumpKind::Direct { target } = j {
                    prop_assert!(p.is_jumpdest(*target));
                }
            }
        }
    }
}
