//! Context-sensitive symbolic traversal from one entry.
//!
//! States are `(pc, ctx, operand stack)`. Bytes executed with an empty call
//! context belong to the traversed function. A locally direct jump (or a
//! fall-through) into a known entry is a call and pushes `(callee, site)`;
//! a locally indirect jump is a return. States are merged on
//! `(pc, ctx, tag stack)`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::time::Instant;

use serde::Serialize;

use crate::disasm::Program;
use crate::opcode::Opcode;
use crate::segment::{BlockGraph, JumpKind};
use crate::symbolic::{SymStack, SymbolicValue};
use crate::Offset;

/// One activation on the call-context stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Frame {
    pub callee: Offset,
    pub site: Offset,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisState {
    /// Instruction index.
    pub pc: usize,
    pub ctx: Vec<Frame>,
    pub stack: SymStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Signal {
    /// A return consumed caller data inside a callee: the call at `site`
    /// was not a call.
    SpuriousCall { entry: Offset, site: Offset },
    /// A return consumed a constant with no open call: some call into the
    /// code leading here was missed. `target` is the consumed address.
    MissingCall { entry: Offset, pc: Offset, target: Offset },
}

impl Signal {
    pub fn entry(&self) -> Offset {
        match *self {
            Signal::SpuriousCall { entry, .. } | Signal::MissingCall { entry, .. } => entry,
        }
    }
}

/// What a return-position jump means given the value it consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnVerdict {
    /// `PARAM` with no open call.
    Exit,
    /// Constant with an open call: pop the frame and resume.
    Return(Offset),
    Spurious(Offset),
    /// Constant with no open call; traversal continues at the address.
    Missing(Offset),
    Unresolved,
    InvalidTarget,
}

/// Classifies an indirect jump from the value it consumed and the context.
pub fn validate_return(program: &Program, consumed: SymbolicValue, ctx: &[Frame]) -> ReturnVerdict {
    match consumed {
        SymbolicValue::Param => match ctx.last() {
            Some(f) => ReturnVerdict::Spurious(f.site),
            None => ReturnVerdict::Exit,
        },
        SymbolicValue::Unknown => ReturnVerdict::Unresolved,
        SymbolicValue::Const(w) => match w.as_offset().filter(|&o| program.is_jumpdest(o)) {
            None => ReturnVerdict::InvalidTarget,
            Some(t) if ctx.is_empty() => ReturnVerdict::Missing(t),
            Some(t) => ReturnVerdict::Return(t),
        },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Diagnostics {
    pub unresolved_jumps: BTreeSet<Offset>,
    pub invalid_targets: BTreeSet<Offset>,
    pub depth_exceeded: BTreeSet<Offset>,
    pub stack_overflows: BTreeSet<Offset>,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.unresolved_jumps.extend(&other.unresolved_jumps);
        self.invalid_targets.extend(&other.invalid_targets);
        self.depth_exceeded.extend(&other.depth_exceeded);
        self.stack_overflows.extend(&other.stack_overflows);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_states: usize,
    pub deadline: Option<Instant>,
    pub max_depth: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_states: 100_000, deadline: None, max_depth: 16 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Traversal {
    pub entry: Offset,
    pub bytes: BTreeSet<Offset>,
    /// Calls made with an empty context: `(site, callee)` to return sites.
    pub calls: BTreeMap<(Offset, Offset), BTreeSet<Offset>>,
    pub signals: BTreeSet<Signal>,
    /// Every site where a frame was pushed, at any depth.
    pub used_sites: BTreeSet<Offset>,
    pub diagnostics: Diagnostics,
    pub states: usize,
    pub budget_exceeded: bool,
}

/// Locally classified jumps by instruction offset.
pub struct JumpTable {
    kinds: HashMap<Offset, JumpKind>,
}

impl JumpTable {
    pub fn new(program: &Program, graph: &BlockGraph) -> Self {
        let kinds = graph.blocks.iter().zip(&graph.jumps).filter_map(|(b, j)| Some((b.last(program).offset, (*j)?))).collect();
        JumpTable { kinds }
    }

    pub fn kind(&self, pc: Offset) -> Option<JumpKind> {
        self.kinds.get(&pc).copied()
    }
}

/// Call sites and return sites implied by an entry set: direct jumps and
/// fall-throughs into an entry, and every indirect jump.
pub fn infer_call_return_sites(
    program: &Program,
    graph: &BlockGraph,
    entries: &BTreeSet<Offset>,
) -> (BTreeSet<Offset>, BTreeSet<Offset>) {
    let mut calls = BTreeSet::new();
    let mut rets = BTreeSet::new();
    for (i, (b, j)) in graph.blocks.iter().zip(&graph.jumps).enumerate() {
        let last = b.last(program);
        match j {
            Some(JumpKind::Direct { target }) if entries.contains(target) => {
                calls.insert(last.offset);
            }
            Some(JumpKind::Indirect) => {
                rets.insert(last.offset);
            }
            _ => {}
        }
        let falls = !last.opcode.alters_control() || last.opcode == Opcode::JUMPI;
        if falls && !last.opcode.is_halting() {
            if let Some(next) = graph.blocks.get(i + 1) {
                if entries.contains(&next.entry) {
                    calls.insert(last.offset);
                }
            }
        }
    }
    (calls, rets)
}

type MergeKey = (usize, Vec<Frame>, Vec<Offset>);

pub struct Traverser<'a> {
    pub program: &'a Program,
    pub jumps: &'a JumpTable,
    pub entries: &'a BTreeSet<Offset>,
    pub blacklist: &'a BTreeSet<Offset>,
    pub limits: Limits,
}

impl Traverser<'_> {
    pub fn traverse(&self, entry: Offset) -> Traversal {
        let mut out = Traversal { entry, ..Default::default() };
        let Some(start) = self.program.index_of(entry) else {
            return out;
        };
        let mut seen: HashSet<MergeKey> = HashSet::new();
        let mut work = vec![AnalysisState { pc: start, ctx: Vec::new(), stack: SymStack::new() }];
        while let Some(state) = work.pop() {
            let key = (state.pc, state.ctx.clone(), state.stack.tag_stack(self.program.jumpdests()));
            if !seen.insert(key) {
                continue;
            }
            out.states += 1;
            if out.states > self.limits.max_states
                || (out.states.is_multiple_of(256) && self.limits.deadline.is_some_and(|d| Instant::now() >= d))
            {
                out.budget_exceeded = true;
                break;
            }
            let mut next = self.run_block(state, &mut out);
            // depth-first, lower offsets first
            next.reverse();
            work.extend(next);
        }
        out
    }

    fn is_call_target(&self, target: Offset, site: Offset) -> bool {
        self.entries.contains(&target) && !self.blacklist.contains(&site)
    }

    fn call(&self, mut st: AnalysisState, callee: Offset, site: Offset, out: &mut Traversal) -> Option<AnalysisState> {
        if st.ctx.len() >= self.limits.max_depth {
            out.diagnostics.depth_exceeded.insert(site);
            return None;
        }
        if st.ctx.is_empty() {
            out.calls.entry((site, callee)).or_default();
        }
        out.used_sites.insert(site);
        st.ctx.push(Frame { callee, site });
        st.pc = self.program.index_of(callee).expect("entries are instruction starts");
        Some(st)
    }

    /// Runs one basic block and returns the successor states.
    fn run_block(&self, mut st: AnalysisState, out: &mut Traversal) -> Vec<AnalysisState> {
        let ins = self.program.instructions();
        loop {
            let i = &ins[st.pc];
            if st.ctx.is_empty() {
                out.bytes.insert(i.offset);
            }
            let op = i.opcode;
            if op.is_jump() {
                return self.jump(st, out);
            }
            if op.is_halting() {
                return Vec::new();
            }
            if st.stack.apply(i).is_err() {
                out.diagnostics.stack_overflows.insert(i.offset);
                return Vec::new();
            }
            st.pc += 1;
            let Some(n) = ins.get(st.pc) else {
                // running off the end of code halts
                return Vec::new();
            };
            if n.opcode == Opcode::JUMPDEST {
                if self.is_call_target(n.offset, i.offset) {
                    return self.call(st, n.offset, i.offset, out).into_iter().collect();
                }
                return vec![st];
            }
        }
    }

    fn goto(&self, mut st: AnalysisState, target: Offset) -> AnalysisState {
        st.pc = self.program.index_of(target).expect("jumpdest is an instruction start");
        st
    }

    fn jump(&self, mut st: AnalysisState, out: &mut Traversal) -> Vec<AnalysisState> {
        let ins = &self.program.instructions()[st.pc];
        let site = ins.offset;
        let conditional = ins.opcode == Opcode::JUMPI;
        let consumed = st.stack.pop();
        if conditional {
            st.stack.pop();
        }
        let mut succ = Vec::new();
        let fall = if conditional && st.pc + 1 < self.program.instructions().len() {
            let mut f = st.clone();
            f.pc += 1;
            Some(f)
        } else {
            None
        };
        match self.jumps.kind(site) {
            Some(JumpKind::Indirect) => match validate_return(self.program, consumed, &st.ctx) {
                ReturnVerdict::Exit => {}
                ReturnVerdict::Return(t) => {
                    let frame = st.ctx.pop().expect("return with open call");
                    if st.ctx.is_empty() {
                        out.calls.entry((frame.site, frame.callee)).or_default().insert(t);
                    }
                    succ.push(self.goto(st, t));
                }
                ReturnVerdict::Spurious(s) => {
                    out.signals.insert(Signal::SpuriousCall { entry: out.entry, site: s });
                }
                ReturnVerdict::Missing(t) => {
                    out.signals.insert(Signal::MissingCall { entry: out.entry, pc: site, target: t });
                    succ.push(self.goto(st, t));
                }
                ReturnVerdict::Unresolved => {
                    out.diagnostics.unresolved_jumps.insert(site);
                }
                ReturnVerdict::InvalidTarget => {
                    out.diagnostics.invalid_targets.insert(site);
                }
            },
            Some(JumpKind::Direct { target }) => {
                if self.is_call_target(target, site) {
                    succ.extend(self.call(st, target, site, out));
                } else {
                    succ.push(self.goto(st, target));
                }
            }
            Some(JumpKind::Dead(_)) | None => {
                out.diagnostics.invalid_targets.insert(site);
            }
        }
        if let Some(f) = fall {
            let next = &self.program.instructions()[f.pc];
            if next.opcode == Opcode::JUMPDEST && self.is_call_target(next.offset, site) {
                succ.extend(self.call(f, next.offset, site, out));
            } else {
                succ.push(f);
            }
        }
        succ.sort_by_key(|s| s.pc);
        succ
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disasm::decode;

    fn run(hex: &str, entry: Offset, entries: &[Offset]) -> Traversal {
        let p = decode(hex).unwrap();
        let g = BlockGraph::new(&p);
        let jt = JumpTable::new(&p, &g);
        let entries: BTreeSet<Offset> = entries.iter().copied().collect();
        let bl = BTreeSet::new();
        Traverser { program: &p, jumps: &jt, entries: &entries, blacklist: &bl, limits: Limits::default() }.traverse(entry)
    }

    #[test]
    fn straight_line_clean_exit() {
        // JUMPDEST PUSH1 1 POP SWAP1 JUMP
        let t = run("5b6001509056", 0, &[0]);
        assert_eq!(t.bytes, BTreeSet::from([0, 1, 3, 4, 5]));
        assert!(t.signals.is_empty());
        assert!(t.diagnostics.unresolved_jumps.is_empty());
    }

    #[test]
    fn verdicts() {
        let p = decode("5b00").unwrap();
        let f = [Frame { callee: 0, site: 7 }];
        assert_eq!(validate_return(&p, SymbolicValue::Param, &[]), ReturnVerdict::Exit);
        assert_eq!(validate_return(&p, SymbolicValue::Param, &f), ReturnVerdict::Spurious(7));
        let zero = SymbolicValue::Const(crate::Word::ZERO);
        assert_eq!(validate_return(&p, zero, &[]), ReturnVerdict::Missing(0));
        assert_eq!(validate_return(&p, zero, &f), ReturnVerdict::Return(0));
        assert_eq!(validate_return(&p, SymbolicValue::Unknown, &f), ReturnVerdict::Unresolved);
        let one = SymbolicValue::Const(crate::Word::from_u64(1));
        assert_eq!(validate_return(&p, one, &[]), ReturnVerdict::InvalidTarget);
    }

    #[test]
    fn caller_excludes_callee() {
        // 0: PUSH1 ret(0x07) PUSH1 foo(0x09) JUMP
        // 5: STOP STOP
        // 7: ret: JUMPDEST STOP
        // 9: foo: JUMPDEST JUMP
        let hex = "6007600956 0000 5b00 5b56".replace(' ', "");
        let t = run(&hex, 0, &[0, 9]);
        assert_eq!(t.bytes, BTreeSet::from([0, 2, 4, 7, 8]));
        assert_eq!(t.calls, BTreeMap::from([((4, 9), BTreeSet::from([7]))]));
        let callee = run(&hex, 9, &[0, 9]);
        assert_eq!(callee.bytes, BTreeSet::from([9, 10]));
        // without foo as an entry the return looks like a missed call
        let t = run(&hex, 0, &[0]);
        assert!(t.bytes.contains(&9));
        assert_eq!(t.signals, BTreeSet::from([Signal::MissingCall { entry: 0, pc: 10, target: 7 }]));
        let (calls, rets) =
            infer_call_return_sites(&decode(&hex).unwrap(), &BlockGraph::new(&decode(&hex).unwrap()), &BTreeSet::from([9]));
        assert_eq!((calls, rets), (BTreeSet::from([4]), BTreeSet::from([10])));
    }

    #[test]
    fn loops_terminate_and_budget_flags() {
        // 0: JUMPDEST PUSH1 0 JUMP -- infinite loop
        let t = run("5b600056", 0, &[]);
        assert_eq!(t.bytes, BTreeSet::from([0, 1, 3]));
        let p = decode("5b600056").unwrap();
        let g = BlockGraph::new(&p);
        let jt = JumpTable::new(&p, &g);
        let e = BTreeSet::new();
        let limits = Limits { max_states: 0, ..Default::default() };
        let t = Traverser { program: &p, jumps: &jt, entries: &e, blacklist: &e, limits }.traverse(0);
        assert!(t.budget_exceeded);
    }
}
