//! Abstract operand stack shared by jump classification, dispatcher
//! recognition and the boundary traversal.
//!
//! Only PUSH, AND, DUP and SWAP are modelled exactly. Every other instruction
//! pops its inputs and pushes `Unknown` results. Reading below the bottom of
//! the stack yields `Param`: the frame is treated as sitting on an unbounded
//! run of caller-prepared values.

use std::collections::BTreeSet;
use std::fmt;

use crate::disasm::Instruction;
use crate::opcode::Opcode;
use crate::word::Word;
use crate::Offset;

pub const MAX_STACK: usize = 1024;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymbolicValue {
    Const(Word),
    /// Caller-prepared data (`$`).
    Param,
    /// Any runtime value (`⊤`).
    Unknown,
}

impl SymbolicValue {
    pub fn as_const(&self) -> Option<Word> {
        match self {
            SymbolicValue::Const(w) => Some(*w),
            _ => None,
        }
    }
}

impl fmt::Debug for SymbolicValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymbolicValue::Const(w) => write!(f, "{w}"),
            SymbolicValue::Param => f.write_str("$"),
            SymbolicValue::Unknown => f.write_str("⊤"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("operand stack exceeds {MAX_STACK} entries")]
pub struct StackOverflow;

/// Operand stack, bottom first.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct SymStack {
    items: Vec<SymbolicValue>,
}

impl fmt::Debug for SymStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.items).finish()
    }
}

impl SymStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(items: Vec<SymbolicValue>) -> Self {
        SymStack { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn values(&self) -> &[SymbolicValue] {
        &self.items
    }

    pub fn push(&mut self, v: SymbolicValue) -> Result<(), StackOverflow> {
        if self.items.len() >= MAX_STACK {
            return Err(StackOverflow);
        }
        self.items.push(v);
        Ok(())
    }

    pub fn pop(&mut self) -> SymbolicValue {
        self.items.pop().unwrap_or(SymbolicValue::Param)
    }

    /// Element `depth` positions below the top (0 = top).
    pub fn peek(&self, depth: usize) -> SymbolicValue {
        let n = self.items.len();
        if depth < n {
            self.items[n - 1 - depth]
        } else {
            SymbolicValue::Param
        }
    }

    fn materialize(&mut self, depth: usize) {
        let n = self.items.len();
        if depth >= n {
            let missing = depth + 1 - n;
            self.items.splice(0..0, std::iter::repeat_n(SymbolicValue::Param, missing));
        }
    }

    pub fn dup(&mut self, n: usize) -> Result<(), StackOverflow> {
        let v = self.peek(n - 1);
        self.push(v)
    }

    pub fn swap(&mut self, n: usize) -> Result<(), StackOverflow> {
        self.materialize(n);
        if self.items.len() > MAX_STACK {
            return Err(StackOverflow);
        }
        let top = self.items.len() - 1;
        self.items.swap(top, top - n);
        Ok(())
    }

    /// Applies a non-jump instruction. JUMP/JUMPI operands must be popped by
    /// the caller, which decides what to do with the target.
    pub fn apply(&mut self, ins: &Instruction) -> Result<(), StackOverflow> {
        let op = ins.opcode;
        if let Some(w) = ins.push {
            return self.push(SymbolicValue::Const(w));
        }
        if op == Opcode::PUSH0 {
            return self.push(SymbolicValue::Const(Word::ZERO));
        }
        if let Some(n) = op.dup_depth() {
            return self.dup(n);
        }
        if let Some(n) = op.swap_depth() {
            return self.swap(n);
        }
        if op == Opcode::AND {
            let a = self.pop();
            let b = self.pop();
            let r = match (a, b) {
                (SymbolicValue::Const(x), SymbolicValue::Const(y)) => SymbolicValue::Const(x & y),
                _ => SymbolicValue::Unknown,
            };
            return self.push(r);
        }
        let (pops, pushes) = op.stack_arity();
        for _ in 0..pops {
            self.pop();
        }
        for _ in 0..pushes {
            self.push(SymbolicValue::Unknown)?;
        }
        Ok(())
    }

    /// The jump-destination-valued constants on the stack, bottom first.
    pub fn tag_stack(&self, jumpdests: &BTreeSet<Offset>) -> Vec<Offset> {
        self.items.iter().filter_map(|v| v.as_const()?.as_offset()).filter(|o| jumpdests.contains(o)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disasm::decode;
    use SymbolicValue::*;

    fn run(hex: &str) -> SymStack {
        let p = decode(hex).unwrap();
        let mut s = SymStack::new();
        for ins in p.instructions() {
            s.apply(ins).unwrap();
        }
        s
    }

    #[test]
    fn and_of_constants() {
        let s = run("61ffff61123416");
        assert_eq!(s.values(), &[Const(Word::from_u64(0x1234))]);
        let s = run("6112343416");
        assert_eq!(s.values(), &[Unknown]);
    }

    #[test]
    fn underflow_yields_param() {
        let mut s = SymStack::new();
        assert_eq!(s.pop(), Param);
        s.push(Const(Word::from_u64(8))).unwrap();
        s.swap(2).unwrap();
        assert_eq!(s.values(), &[Const(Word::from_u64(8)), Param, Param]);
        let s = run("82");
        assert_eq!(s.values(), &[Param]);
    }

    #[test]
    fn generic_ops_push_unknown() {
        let s = run("6001600201");
        assert_eq!(s.values(), &[Unknown]);
        let s = run("50");
        assert!(s.is_empty());
    }

    #[test]
    fn overflow_is_reported() {
        let mut s = SymStack::new();
        for _ in 0..MAX_STACK {
            s.push(Unknown).unwrap();
        }
        assert_eq!(s.push(Unknown), Err(StackOverflow));
    }
}
