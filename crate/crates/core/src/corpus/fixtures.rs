//! Small hand-written contracts with exact labels: the textbook call
//! shapes, a solc-style dispatcher, and the two repair scenarios.

use std::collections::{BTreeMap, BTreeSet};

use super::asm::{assemble, AsmError};
use super::{GroundTruthContract, GtCallSite, GtFunction, Provenance, Visibility, SCHEMA_VERSION};
use crate::disasm::Program;
use crate::dispatcher::Selector;
use crate::Offset;

struct Func {
    name: &'static str,
    vis: Visibility,
    /// Label of the entry; empty for the dispatcher at 0.
    entry: &'static str,
    selector: Option<u32>,
    iface: Option<&'static str>,
}

const fn func(name: &'static str, vis: Visibility, entry: &'static str) -> Func {
    Func { name, vis, entry, selector: None, iface: None }
}

const DISPATCHER: Func = func("dispatcher", Visibility::Dispatcher, "");

/// Owner ids in the text are indices into `funcs`. Each call is
/// `(caller entry, callee entry, return label)`; the call site is the
/// instruction right before the return label.
fn build(id: &str, text: &str, funcs: &[Func], calls: &[(&str, &str, &str)]) -> Result<GroundTruthContract, AsmError> {
    let out = assemble(text)?;
    let at = |l: &str| if l.is_empty() { 0 } else { out.at(l) };
    let mut bytes: Vec<BTreeSet<Offset>> = vec![BTreeSet::new(); funcs.len()];
    for (off, owners) in &out.owners {
        for &o in owners {
            bytes[o as usize].insert(*off);
        }
    }
    let functions = funcs
        .iter()
        .zip(bytes)
        .map(|(f, b)| GtFunction {
            name: f.name.to_string(),
            visibility: f.vis,
            entry: at(f.entry),
            selector: f.selector.map(Selector),
            interface_entry: f.iface.map(at),
            bytes: b.into_iter().collect(),
        })
        .collect();
    let program = Program::from_bytes(out.code.clone());
    let call_sites = calls
        .iter()
        .map(|&(caller, callee, ret)| {
            let r = at(ret);
            let idx = program.index_of(r).expect("return label is an instruction");
            GtCallSite { caller: at(caller), site: program.instructions()[idx - 1].offset, callee: at(callee), return_site: r }
        })
        .collect();
    Ok(GroundTruthContract {
        schema: SCHEMA_VERSION.to_string(),
        id: id.to_string(),
        code: out.code,
        functions,
        call_sites,
        abi: None,
        provenance: Provenance::External { source: "fixture".into() },
    })
}

/// A caller pushes its return address and arguments, then jumps.
pub fn simple_call() -> GroundTruthContract {
    let text = "
        .owners 0
        PUSH1 @ret PUSH1 0xff PUSH1 0x00 PUSH1 @foo JUMP
        ret: STOP
        .owners 1
        foo: POP POP JUMP
    ";
    build("simple-call", text, &[DISPATCHER, func("foo", Visibility::Internal, "foo")], &[("", "foo", "ret")])
        .expect("fixture assembles")
}

/// The return address is pushed in one block and the jump into the callee
/// happens in another, after a branch has merged.
pub fn split_call() -> GroundTruthContract {
    let text = "
        .owners 0
        PUSH1 @ret PUSH1 0x05 PUSH1 0x07 DUP2 DUP2 GT PUSH1 @else JUMPI
        POP PUSH1 @join JUMP
        else: SWAP1 POP
        join: PUSH1 @foo JUMP
        ret: STOP
        .owners 1
        foo: POP JUMP
    ";
    build("split-call", text, &[DISPATCHER, func("foo", Visibility::Internal, "foo")], &[("", "foo", "ret")])
        .expect("fixture assembles")
}

/// Two functions share a tail block, and one of them has a block laid out
/// before its own entry.
pub fn shared_tail() -> GroundTruthContract {
    let text = "
        .owners 0
        PUSH1 @r1 PUSH1 0x03 PUSH1 0x04 PUSH1 @mul JUMP
        r1: PUSH1 @r2 PUSH1 0x03 PUSH1 0x04 PUSH1 @add JUMP
        r2: STOP
        .owners 1
        mul: MUL PUSH1 @tail JUMP
        .owners 2
        addpre: ADD PUSH1 @tail JUMP
        add: PUSH1 @addpre JUMP
        .owners 1 2
        tail: SWAP1 JUMP
    ";
    let funcs = [DISPATCHER, func("mul", Visibility::Internal, "mul"), func("add", Visibility::Internal, "add")];
    build("shared-tail", text, &funcs, &[("", "mul", "r1"), ("", "add", "r2")]).expect("fixture assembles")
}

/// A solc 0.4 style dispatcher with interface entries at 0x4e and 0x62 and
/// the body of `withdraw()` at 0xa2.
pub fn dispatcher() -> GroundTruthContract {
    let text = "
        .owners 0
        PUSH1 0x80 PUSH1 0x40 MSTORE
        PUSH1 0x04 CALLDATASIZE LT PUSH2 @fallback JUMPI
        PUSH4 0xffffffff
        PUSH29 0x0100000000000000000000000000000000000000000000000000000000
        PUSH1 0x00 CALLDATALOAD DIV AND
        PUSH4 0x3ccfd60b DUP2 EQ PUSH2 @withdraw_if JUMPI
        DUP1 PUSH4 0xf66c7281 EQ PUSH2 @other_if JUMPI
        fallback: STOP
        .org 0x4e
        .owners 0
        withdraw_if: PUSH2 @withdraw_ret PUSH2 @withdraw JUMP
        withdraw_ret: STOP
        .org 0x62
        .owners 0
        other_if: PUSH2 @other_ret PUSH2 @other JUMP
        other_ret: PUSH1 0x00 MSTORE PUSH1 0x20 PUSH1 0x00 RETURN
        .owners 2
        other: PUSH1 0x2a SWAP1 JUMP
        .org 0xa2
        .owners 1
        withdraw: PUSH1 0x00 SLOAD POP JUMP
    ";
    let funcs = [
        DISPATCHER,
        Func { selector: Some(0x3ccfd60b), iface: Some("withdraw_if"), ..func("withdraw()", Visibility::Public, "withdraw") },
        Func { selector: Some(0xf66c7281), iface: Some("other_if"), ..func("0xf66c7281", Visibility::Public, "other") },
    ];
    let calls = [("", "withdraw", "withdraw_ret"), ("", "other", "other_ret")];
    build("dispatcher", text, &funcs, &calls).expect("fixture assembles")
}

/// A caller whose internal jump target looks like a function entry: the
/// candidate at 0xa3 consumes the caller's return address.
pub fn spurious_call() -> (GroundTruthContract, BTreeMap<Offset, f64>) {
    let text = "
        .owners 0
        PUSH1 @ret PUSH1 @f JUMP
        ret: STOP
        .org 0x8e
        .owners 1
        f: PUSH1 0x01 PUSH1 @join JUMP
        .org 0xa3
        .owners 1
        join: POP JUMP
    ";
    let gt = build("spurious-call", text, &[DISPATCHER, func("f", Visibility::Internal, "f")], &[("", "f", "ret")])
        .expect("fixture assembles");
    (gt, BTreeMap::from([(0x8e, 0.9), (0xa3, 0.7)]))
}

/// A callee whose entry scores below the initial threshold: its return
/// consumes the caller's continuation at 0x43.
pub fn missing_call() -> (GroundTruthContract, BTreeMap<Offset, f64>) {
    let text = "
        .owners 0
        PUSH1 @ret PUSH1 @g JUMP
        ret: STOP
        .org 0x2a
        .owners 1
        g: PUSH1 @back PUSH1 @h JUMP
        .org 0x43
        .owners 1
        back: JUMP
        .org 0x5a
        .owners 2
        h: JUMP
    ";
    let funcs = [DISPATCHER, func("g", Visibility::Internal, "g"), func("h", Visibility::Internal, "h")];
    let gt = build("missing-call", text, &funcs, &[("", "g", "ret"), ("g", "h", "back")]).expect("fixture assembles");
    (gt, BTreeMap::from([(0x2a, 0.9), (0x5a, 0.3)]))
}

pub fn all() -> Vec<GroundTruthContract> {
    vec![simple_call(), split_call(), shared_tail(), dispatcher(), spurious_call().0, missing_call().0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{identify_boundaries, oracle_probs, BoundaryConfig, Signal};
    use crate::dispatcher::public_entries;
    use crate::model::baseline_entries;
    use crate::segment::BlockGraph;

    fn matches_truth(gt: &GroundTruthContract, probs: &BTreeMap<Offset, f64>) -> crate::boundary::BoundaryResult {
        let p = gt.program();
        let r = identify_boundaries(&p, &public_entries(&p), probs, &BoundaryConfig::default());
        assert_eq!(r.entries(), gt.all_entries(), "{}", gt.id);
        for f in &gt.functions {
            let want: BTreeSet<Offset> = f.bytes.iter().copied().collect();
            assert_eq!(r.function_at(f.entry).unwrap().bytes, want, "{} {}", gt.id, f.name);
        }
        r
    }

    #[test]
    fn fixtures_are_valid_and_exact_under_oracle_entries() {
        for gt in all() {
            gt.validate().unwrap();
            let r = matches_truth(&gt, &oracle_probs(gt.internal_entries()));
            assert!(r.signals.is_empty(), "{}: {:?}", gt.id, r.signals);
        }
    }

    #[test]
    fn baseline_needs_the_return_address_in_the_jump_block() {
        let simple = simple_call();
        let p = simple.program();
        assert_eq!(baseline_entries(&p, &BlockGraph::new(&p)), simple.internal_entries());
        let split = split_call();
        let p = split.program();
        assert!(baseline_entries(&p, &BlockGraph::new(&p)).is_empty());
    }

    #[test]
    fn shared_tail_belongs_to_both() {
        let gt = shared_tail();
        let mul = gt.function_at(gt.functions[1].entry).unwrap();
        let add = gt.function_at(gt.functions[2].entry).unwrap();
        let shared: Vec<_> = mul.bytes.iter().filter(|b| add.bytes.contains(b)).collect();
        assert_eq!(shared.len(), 3);
        assert!(add.bytes[0] < add.entry);
    }

    #[test]
    fn dispatcher_offsets() {
        let gt = dispatcher();
        let d = public_entries(&gt.program());
        let got: Vec<_> = d.functions.iter().map(|f| (f.selector.0, f.interface_entry, f.body_entry)).collect();
        assert_eq!(got, vec![(0x3ccfd60b, 0x4e, Some(0xa2)), (0xf66c7281, 0x62, Some(0x73))]);
        assert_eq!(d.fallback, Some(0x4b));
    }

    #[test]
    fn spurious_call_is_blacklisted() {
        let (gt, probs) = spurious_call();
        let r = matches_truth(&gt, &probs);
        assert!(r.signals.iter().any(|s| matches!(s, Signal::SpuriousCall { entry: 0x8e, .. })), "{:?}", r.signals);
        assert_eq!(r.blacklist.len(), 1);
        assert!(r.uncalled.contains(&0xa3));
    }

    #[test]
    fn missing_call_lowers_threshold() {
        let (gt, probs) = missing_call();
        let r = matches_truth(&gt, &probs);
        assert!(r.signals.iter().any(|s| matches!(s, Signal::MissingCall { entry: 0x2a, target: 0x43, .. })), "{:?}", r.signals);
        assert_eq!(r.rho, 0.3);
        assert_eq!(r.lowerings, 2);
    }
}
