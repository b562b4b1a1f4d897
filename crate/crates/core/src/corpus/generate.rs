//! Synthetic contract generator with exact function labels.
//!
//! Output mimics the layout of an unoptimised solc 0.4/0.5 runtime: a
//! selector dispatcher at offset 0, non-payable interface stubs that decode
//! calldata and call the shared body, and internal functions using the
//! jump-based calling convention
//!
//! ```text
//! caller:  PUSH ret; PUSH/DUP args...; PUSH callee; JUMP; ret: JUMPDEST
//! callee:  [ret, a1..an] -> ... -> [retval?]   (JUMP consumes ret)
//! ```
//!
//! Every instruction is tagged with the function(s) that own it while it is
//! emitted, so byte labels come from construction rather than analysis.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::asm::{Asm, Label};
use super::{GroundTruthContract, GtCallSite, GtFunction, Provenance, Visibility, SCHEMA_VERSION};
use crate::dispatcher::Selector;
use crate::opcode::Opcode;
use crate::word::Word;
use crate::Offset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizeStyle {
    #[default]
    Plain,
    /// Shared revert blocks and a binary-search dispatcher, as produced by
    /// the deduplicating optimiser.
    Dedup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    pub n_public: usize,
    pub n_internal: usize,
    pub max_call_depth: usize,
    /// Chance that an internal function joins an earlier one's shared tail.
    pub share_probability: f64,
    /// Chance that an epilogue or branch body is laid out after all functions.
    pub noncontiguous_probability: f64,
    pub modifier_probability: f64,
    /// Chance that a call pushes its return address in an earlier block.
    #[serde(default)]
    pub split_call_probability: f64,
    pub optimize_style: OptimizeStyle,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            n_public: 3,
            n_internal: 3,
            max_call_depth: 3,
            share_probability: 0.0,
            noncontiguous_probability: 0.2,
            modifier_probability: 0.3,
            split_call_probability: 0.2,
            optimize_style: OptimizeStyle::Plain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("infeasible generator spec: {0}")]
pub struct InfeasibleSpec(pub String);

impl GenSpec {
    pub fn validate(&self) -> Result<(), InfeasibleSpec> {
        let probs = [
            ("share_probability", self.share_probability),
            ("noncontiguous_probability", self.noncontiguous_probability),
            ("modifier_probability", self.modifier_probability),
            ("split_call_probability", self.split_call_probability),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(InfeasibleSpec(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.share_probability > 0.0 && self.n_internal < 2 {
            return Err(InfeasibleSpec("sharing needs at least two internal functions".into()));
        }
        if self.n_internal > 0 && self.n_public == 0 {
            return Err(InfeasibleSpec("internal functions need a public caller".into()));
        }
        if self.n_internal > 0 && self.max_call_depth == 0 {
            return Err(InfeasibleSpec("internal functions need max_call_depth >= 1".into()));
        }
        if self.n_public > 200 || self.n_internal > 200 {
            return Err(InfeasibleSpec("at most 200 public and 200 internal functions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Item {
    Op(Opcode),
    Push(usize, u64),
    PushWord(usize, Word),
    Tag(Label),
    Bind(Label),
    /// Records the offset of the next instruction under a numbered mark.
    Mark(usize),
}

struct Fragment {
    owners: Vec<u32>,
    items: Vec<Item>,
}

#[derive(Clone)]
struct FnPlan {
    id: u32,
    name: String,
    visibility: Visibility,
    n_args: usize,
    returns: bool,
    entry: Label,
    callees: Vec<u32>,
    modifier: Option<u8>,
    tail_group: Option<usize>,
    selector: Option<Selector>,
    signature: Option<String>,
    iface: Option<Label>,
}

struct PendingCall {
    caller: u32,
    callee: u32,
    site: usize,
    ret: Label,
}

struct Gen {
    rng: ChaCha8Rng,
    asm: Asm,
    spec: GenSpec,
    fns: Vec<FnPlan>,
    deferred: Vec<Fragment>,
    marks: usize,
    calls: Vec<PendingCall>,
    shared_revert: Option<Label>,
    revert_users: Vec<u32>,
}

// A few frequently used opcodes.
const ADD: Opcode = Opcode(0x01);
const LT: Opcode = Opcode(0x10);
const EQ: Opcode = Opcode(0x14);
const ISZERO: Opcode = Opcode(0x15);
const DIV: Opcode = Opcode(0x04);
const CALLVALUE: Opcode = Opcode(0x34);
const CALLDATALOAD: Opcode = Opcode(0x35);
const CALLDATASIZE: Opcode = Opcode(0x36);
const CALLER: Opcode = Opcode(0x33);
const GAS: Opcode = Opcode(0x5a);
const MLOAD: Opcode = Opcode(0x51);
const MSTORE: Opcode = Opcode(0x52);
const SLOAD: Opcode = Opcode(0x54);
const SSTORE: Opcode = Opcode(0x55);
const KECCAK256: Opcode = Opcode(0x20);
const MUL: Opcode = Opcode(0x02);
const SUB: Opcode = Opcode(0x03);
const OR: Opcode = Opcode(0x17);
const LOG1: Opcode = Opcode(0xa1);

fn dup(n: usize) -> Opcode {
    assert!((1..=16).contains(&n), "DUP{n}");
    Opcode(0x7f + n as u8)
}

fn swap(n: usize) -> Opcode {
    assert!((1..=16).contains(&n), "SWAP{n}");
    Opcode(0x8f + n as u8)
}

pub(crate) const TRAILER_LEN: usize = 43;

/// Emission state for one function body: items plus the number of stack
/// slots sitting above the arguments.
struct Body {
    items: Vec<Item>,
    fid: u32,
    n_args: usize,
    depth: usize,
    nesting: usize,
}

impl Body {
    fn op(&mut self, o: Opcode) {
        self.items.push(Item::Op(o));
    }
    fn push(&mut self, w: usize, v: u64) {
        self.items.push(Item::Push(w, v));
    }
    fn tag(&mut self, l: Label) {
        self.items.push(Item::Tag(l));
    }
    fn bind(&mut self, l: Label) {
        self.items.push(Item::Bind(l));
    }
    /// DUP index reaching argument `i` (0 = deepest).
    fn arg_dup(&self, i: usize) -> Option<Opcode> {
        let pos = (self.n_args - 1 - i) + self.depth + 1;
        (pos <= 16).then(|| dup(pos))
    }
}

impl Gen {
    fn label(&mut self, name: String) -> Label {
        self.asm.label(name)
    }

    fn mark(&mut self) -> usize {
        self.marks += 1;
        self.marks - 1
    }

    fn plan(&mut self) {
        let s = self.spec.clone();
        let mut fns = Vec::new();
        let dispatcher_entry = self.label("dispatcher".into());
        fns.push(FnPlan {
            id: 0,
            name: "dispatcher".into(),
            visibility: Visibility::Dispatcher,
            n_args: 0,
            returns: false,
            entry: dispatcher_entry,
            callees: Vec::new(),
            modifier: None,
            tail_group: None,
            selector: None,
            signature: None,
            iface: None,
        });
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..s.n_public {
            let n_args = self.rng.gen_range(0..=3);
            let returns = self.rng.gen_bool(0.5);
            let mut name = format!("fn_{i}");
            let mut sig = format!("{name}({})", vec!["uint256"; n_args].join(","));
            while !seen.insert(Selector::of_signature(&sig)) {
                name.push('_');
                sig = format!("{name}({})", vec!["uint256"; n_args].join(","));
            }
            let entry = self.label(format!("{name}.body"));
            fns.push(FnPlan {
                id: fns.len() as u32,
                name,
                visibility: Visibility::Public,
                n_args,
                returns,
                entry,
                callees: Vec::new(),
                modifier: None,
                tail_group: None,
                selector: Some(Selector::of_signature(&sig)),
                signature: Some(sig),
                iface: None,
            });
        }
        let first_internal = fns.len();
        let mut depth: Vec<usize> = vec![0; fns.len()];
        let mut groups: Vec<Vec<u32>> = Vec::new();
        for j in 0..s.n_internal {
            let id = fns.len() as u32;
            let mut n_args = self.rng.gen_range(0..=3);
            let mut returns = self.rng.gen_bool(0.5);
            let mut tail_group = None;
            if j > 0 && self.rng.gen_bool(s.share_probability) {
                let k = first_internal + self.rng.gen_range(0..j);
                n_args = fns[k].n_args;
                returns = fns[k].returns;
                let g = match fns[k].tail_group {
                    Some(g) => g,
                    None => {
                        groups.push(vec![k as u32]);
                        fns[k].tail_group = Some(groups.len() - 1);
                        groups.len() - 1
                    }
                };
                groups[g].push(id);
                tail_group = Some(g);
            }
            // Primary caller: any earlier public or internal function with room below the depth cap.
            let callers: Vec<usize> = (1..fns.len()).filter(|&c| depth[c] < s.max_call_depth).collect();
            let caller = *callers.choose(&mut self.rng).expect("publics have depth 0");
            depth.push(depth[caller] + 1);
            fns[caller].callees.push(id);
            let name = format!("internal_{j}");
            let entry = self.label(name.clone());
            fns.push(FnPlan {
                id,
                name,
                visibility: Visibility::Internal,
                n_args,
                returns,
                entry,
                callees: Vec::new(),
                modifier: None,
                tail_group,
                selector: None,
                signature: None,
                iface: None,
            });
        }
        // Extra call edges keep the graph acyclic by only calling deeper functions.
        for f in 1..fns.len() {
            if self.rng.gen_bool(0.3) {
                let options: Vec<usize> = (first_internal..fns.len()).filter(|&g| depth[g] > depth[f] && g != f).collect();
                if let Some(&g) = options.choose(&mut self.rng) {
                    fns[f].callees.push(g as u32);
                }
            }
        }
        for f in fns.iter_mut().skip(1) {
            f.callees.shuffle(&mut self.rng);
            if self.rng.gen_bool(s.modifier_probability) {
                f.modifier = Some(0x80 + (f.id as u8 & 0x7f));
            }
        }
        self.fns = fns;
    }

    fn dedup(&self) -> bool {
        self.spec.optimize_style == OptimizeStyle::Dedup
    }

    /// `require(cond)`: the condition is on top of the stack.
    fn emit_require(&mut self, b: &mut Body) {
        if self.dedup() {
            let target = match self.shared_revert {
                Some(l) => l,
                None => {
                    let l = self.label("shared_revert".into());
                    self.shared_revert = Some(l);
                    l
                }
            };
            if !self.revert_users.contains(&b.fid) {
                self.revert_users.push(b.fid);
            }
            b.op(ISZERO);
            b.tag(target);
            b.op(Opcode::JUMPI);
        } else {
            let ok = self.label(format!("f{}.ok", b.fid));
            b.tag(ok);
            b.op(Opcode::JUMPI);
            b.push(1, 0);
            b.op(dup(1));
            b.op(Opcode::REVERT);
            b.bind(ok);
        }
    }

    /// A condition that holds when called without value.
    fn push_true_condition(&mut self, b: &mut Body) {
        match self.rng.gen_range(0..3) {
            0 => {
                b.op(CALLVALUE);
                b.op(ISZERO);
            }
            1 => {
                b.op(GAS);
                b.op(ISZERO);
                b.op(ISZERO);
            }
            _ => {
                b.push(1, self.rng.gen_range(1..=0x40));
            }
        }
    }

    /// Pushes one value (depth +1).
    fn push_value(&mut self, b: &mut Body) {
        let choice = self.rng.gen_range(0..4);
        if choice == 0 && b.n_args > 0 {
            let i = self.rng.gen_range(0..b.n_args);
            if let Some(d) = b.arg_dup(i) {
                b.op(d);
                b.depth += 1;
                return;
            }
        }
        match choice {
            1 => {
                b.push(1, self.rng.gen_range(0..0x60));
                b.op(SLOAD);
            }
            2 => {
                b.op(CALLER);
            }
            _ => {
                let w = if self.rng.gen_bool(0.8) { 1 } else { 2 };
                let v = self.rng.gen_range(0..(1u64 << (8 * w)));
                b.push(w, v);
            }
        }
        b.depth += 1;
    }

    fn emit_statement(&mut self, b: &mut Body, pending_calls: &mut Vec<u32>) {
        if !pending_calls.is_empty() && self.rng.gen_bool(0.5) {
            let callee = pending_calls.pop().unwrap();
            self.emit_call(b, callee);
            return;
        }
        let kind = self.rng.gen_range(0..10);
        match kind {
            0..=2 => {
                // storage write
                self.push_value(b);
                if self.rng.gen_bool(0.3) {
                    self.push_value(b);
                    b.op([ADD, MUL, SUB, OR][self.rng.gen_range(0..4)]);
                    b.depth -= 1;
                }
                b.push(1, self.rng.gen_range(0..0x60));
                b.op(SSTORE);
                b.depth -= 1;
            }
            3 => {
                // memory write + hash + log
                self.push_value(b);
                b.push(1, 0x80);
                b.op(MSTORE);
                b.depth -= 1;
                b.push(1, 0x20);
                b.push(1, 0x80);
                b.op(KECCAK256);
                if self.rng.gen_bool(0.5) {
                    b.push(1, 0x20);
                    b.push(1, 0x80);
                    b.op(LOG1);
                } else {
                    b.push(1, self.rng.gen_range(0..0x60));
                    b.op(SSTORE);
                }
            }
            4 | 5 if b.nesting < 2 => self.emit_if(b, pending_calls),
            6 if b.nesting < 2 && b.depth < 8 => self.emit_loop(b),
            7 => {
                self.push_true_condition(b);
                self.emit_require(b);
            }
            _ => {
                b.push(1, 0x40);
                b.op(MLOAD);
                b.push(1, self.rng.gen_range(1..0x20));
                b.op(ADD);
                b.push(1, 0x40);
                b.op(MSTORE);
            }
        }
    }

    fn emit_if(&mut self, b: &mut Body, pending_calls: &mut Vec<u32>) {
        // condition: either a storage flag (false on a fresh account) or callvalue == 0
        if self.rng.gen_bool(0.5) {
            b.push(1, self.rng.gen_range(0x60..0x70));
            b.op(SLOAD);
        } else {
            b.op(CALLVALUE);
            b.op(ISZERO);
        }
        let inner = self.rng.gen_range(1..=2);
        b.nesting += 1;
        if self.rng.gen_bool(self.spec.noncontiguous_probability) {
            // then-branch laid out after all functions
            let chunk = self.label(format!("f{}.then", b.fid));
            let back = self.label(format!("f{}.join", b.fid));
            b.tag(chunk);
            b.op(Opcode::JUMPI);
            b.bind(back);
            let mut c = Body { items: Vec::new(), fid: b.fid, n_args: b.n_args, depth: b.depth, nesting: b.nesting };
            c.bind(chunk);
            for _ in 0..inner {
                self.emit_statement(&mut c, pending_calls);
            }
            c.tag(back);
            c.op(Opcode::JUMP);
            let owners = vec![b.fid];
            self.deferred.push(Fragment { owners, items: c.items });
        } else {
            let skip = self.label(format!("f{}.endif", b.fid));
            b.op(ISZERO);
            b.tag(skip);
            b.op(Opcode::JUMPI);
            for _ in 0..inner {
                self.emit_statement(b, pending_calls);
            }
            b.bind(skip);
        }
        b.nesting -= 1;
    }

    fn emit_loop(&mut self, b: &mut Body) {
        let head = self.label(format!("f{}.loop", b.fid));
        let end = self.label(format!("f{}.loopend", b.fid));
        let n = self.rng.gen_range(1..=3);
        b.push(1, 0);
        b.depth += 1;
        b.bind(head);
        b.push(1, n);
        b.op(dup(2));
        b.op(LT);
        b.op(ISZERO);
        b.tag(end);
        b.op(Opcode::JUMPI);
        b.nesting += 1;
        let mut none = Vec::new();
        for _ in 0..self.rng.gen_range(1..=2) {
            self.emit_statement(b, &mut none);
        }
        b.nesting -= 1;
        b.push(1, 1);
        b.op(ADD);
        b.tag(head);
        b.op(Opcode::JUMP);
        b.bind(end);
        b.op(Opcode::POP);
        b.depth -= 1;
    }

    fn emit_call(&mut self, b: &mut Body, callee: u32) {
        let (n, returns, entry) = {
            let f = &self.fns[callee as usize];
            (f.n_args, f.returns, f.entry)
        };
        let ret = self.label(format!("f{}.ret", b.fid));
        let depth0 = b.depth;
        b.tag(ret);
        b.depth += 1;
        let split = self.rng.gen_bool(self.spec.split_call_probability);
        let direct_args = if split && n > 0 { n - 1 } else { n };
        for _ in 0..direct_args {
            self.push_value(b);
        }
        if split {
            let join = self.label(format!("f{}.join", b.fid));
            if n > 0 {
                // last argument is `x < y ? x : y` style, chosen in its own blocks
                let other = self.label(format!("f{}.else", b.fid));
                self.push_value(b);
                self.push_value(b);
                b.op(dup(2));
                b.op(dup(2));
                b.op(LT);
                b.tag(other);
                b.op(Opcode::JUMPI);
                b.op(Opcode::POP);
                b.tag(join);
                b.op(Opcode::JUMP);
                b.bind(other);
                b.op(swap(1));
                b.op(Opcode::POP);
                b.depth -= 1;
            } else {
                b.tag(join);
                b.op(Opcode::JUMP);
            }
            b.bind(join);
        }
        b.tag(entry);
        let site = self.mark();
        b.items.push(Item::Mark(site));
        b.op(Opcode::JUMP);
        b.bind(ret);
        b.depth = depth0 + usize::from(returns);
        self.calls.push(PendingCall { caller: b.fid, callee, site, ret });
        if returns {
            b.push(1, self.rng.gen_range(0..0x60));
            b.op(SSTORE);
            b.depth -= 1;
        }
    }

    /// Stack `[ret, a1..an, retval?]` -> jump to ret leaving `[retval?]`.
    fn epilogue(b: &mut Body, n_args: usize, returns: bool) {
        if returns {
            b.op(swap(n_args + 1));
            for _ in 0..n_args {
                b.op(swap(1));
                b.op(Opcode::POP);
            }
        } else {
            for _ in 0..n_args {
                b.op(Opcode::POP);
            }
        }
        b.op(Opcode::JUMP);
    }

    fn emit_function(&mut self, fid: u32, tails: &mut BTreeMap<usize, Label>) -> Fragment {
        let f = self.fns[fid as usize].clone();
        let mut b = Body { items: Vec::new(), fid, n_args: f.n_args, depth: 0, nesting: 0 };
        b.bind(f.entry);
        if f.returns {
            b.push(1, 0);
            b.depth += 1;
        }
        if let Some(slot) = f.modifier {
            b.push(1, slot as u64);
            b.op(SLOAD);
            b.op(ISZERO);
            self.emit_require(&mut b);
            b.push(1, 1);
            b.push(1, slot as u64);
            b.op(SSTORE);
        }
        let mut pending = f.callees.clone();
        let n_stmts = self.rng.gen_range(1..=4);
        for _ in 0..n_stmts {
            self.emit_statement(&mut b, &mut pending);
        }
        while let Some(c) = pending.pop() {
            self.emit_call(&mut b, c);
        }
        if let Some(slot) = f.modifier {
            b.push(1, 0);
            b.push(1, slot as u64);
            b.op(SSTORE);
        }
        if f.returns {
            self.push_value(&mut b);
            b.op(swap(1));
            b.op(Opcode::POP);
            b.depth -= 1;
        }
        debug_assert_eq!(b.depth, usize::from(f.returns));
        if let Some(g) = f.tail_group {
            let tail = match tails.get(&g) {
                Some(&l) => l,
                None => {
                    let l = self.label(format!("tail{g}"));
                    tails.insert(g, l);
                    let owners: Vec<u32> = self.fns.iter().filter(|h| h.tail_group == Some(g)).map(|h| h.id).collect();
                    let mut t = Body { items: Vec::new(), fid, n_args: f.n_args, depth: b.depth, nesting: 0 };
                    t.bind(l);
                    t.push(1, self.rng.gen_range(0..0x60));
                    t.op(SLOAD);
                    t.op(Opcode::POP);
                    Self::epilogue(&mut t, f.n_args, f.returns);
                    self.deferred.push(Fragment { owners, items: t.items });
                    l
                }
            };
            b.tag(tail);
            b.op(Opcode::JUMP);
        } else if self.rng.gen_bool(self.spec.noncontiguous_probability) {
            let epi = self.label(format!("f{fid}.epilogue"));
            b.tag(epi);
            b.op(Opcode::JUMP);
            let mut t = Body { items: Vec::new(), fid, n_args: f.n_args, depth: b.depth, nesting: 0 };
            t.bind(epi);
            Self::epilogue(&mut t, f.n_args, f.returns);
            self.deferred.push(Fragment { owners: vec![fid], items: t.items });
        } else {
            Self::epilogue(&mut b, f.n_args, f.returns);
        }
        Fragment { owners: vec![fid], items: b.items }
    }

    fn emit_dispatcher(&mut self) -> Fragment {
        let mut b = Body { items: Vec::new(), fid: 0, n_args: 0, depth: 0, nesting: 0 };
        let fallback = self.label("fallback".into());
        b.push(1, 0x80);
        b.push(1, 0x40);
        b.op(MSTORE);
        b.push(1, 4);
        b.op(CALLDATASIZE);
        b.op(LT);
        b.tag(fallback);
        b.op(Opcode::JUMPI);
        b.push(4, 0xffff_ffff);
        b.items.push(Item::PushWord(29, Word::pow2(224)));
        b.push(1, 0);
        b.op(CALLDATALOAD);
        b.op(DIV);
        b.op(Opcode::AND);

        let selectors: Vec<(Selector, u32)> = self.fns[1..].iter().filter_map(|f| Some((f.selector?, f.id))).collect();
        let mut publics: Vec<(Selector, u32, Label)> = Vec::new();
        for (sel, id) in selectors {
            let l = self.label(format!("iface.{sel}"));
            self.fns[id as usize].iface = Some(l);
            publics.push((sel, id, l));
        }
        publics.sort();
        let chain = |b: &mut Body, slice: &[(Selector, u32, Label)]| {
            for (sel, _, iface) in slice {
                b.op(dup(1));
                b.push(4, sel.0 as u64);
                b.op(EQ);
                b.tag(*iface);
                b.op(Opcode::JUMPI);
            }
        };
        if self.dedup() && publics.len() >= 5 {
            let mid = publics.len() / 2;
            let upper = self.label("dispatch.upper".into());
            b.op(dup(1));
            b.push(4, publics[mid - 1].0 .0 as u64);
            b.op(LT);
            b.tag(upper);
            b.op(Opcode::JUMPI);
            chain(&mut b, &publics[..mid]);
            b.tag(fallback);
            b.op(Opcode::JUMP);
            b.bind(upper);
            chain(&mut b, &publics[mid..]);
        } else {
            chain(&mut b, &publics);
        }
        b.bind(fallback);
        b.push(1, 0);
        b.op(dup(1));
        b.op(Opcode::REVERT);

        for (_, fid, iface) in publics.clone() {
            let f = self.fns[fid as usize].clone();
            let ok = self.label(format!("iface.{}.ok", f.name));
            let ret = self.label(format!("iface.{}.ret", f.name));
            b.bind(iface);
            b.op(CALLVALUE);
            b.op(dup(1));
            b.op(ISZERO);
            b.tag(ok);
            b.op(Opcode::JUMPI);
            b.push(1, 0);
            b.op(dup(1));
            b.op(Opcode::REVERT);
            b.bind(ok);
            b.op(Opcode::POP);
            b.tag(ret);
            for a in 0..f.n_args {
                b.push(1, 4 + 32 * a as u64);
                b.op(CALLDATALOAD);
            }
            b.tag(f.entry);
            let site = self.mark();
            b.items.push(Item::Mark(site));
            b.op(Opcode::JUMP);
            self.calls.push(PendingCall { caller: 0, callee: fid, site, ret });
            b.bind(ret);
            if f.returns {
                b.push(1, 0);
                b.op(MSTORE);
                b.push(1, 0x20);
                b.push(1, 0);
                b.op(Opcode::RETURN);
            } else {
                b.op(Opcode::STOP);
            }
        }
        Fragment { owners: vec![0], items: b.items }
    }

    fn lay_out(&mut self, frags: Vec<Fragment>) -> BTreeMap<usize, Offset> {
        let mut marks = BTreeMap::new();
        for frag in frags {
            self.asm.set_owners(&frag.owners);
            for item in frag.items {
                match item {
                    Item::Op(o) => {
                        self.asm.op(o);
                    }
                    Item::PushWord(w, v) => {
                        self.asm.push_word(w, v).expect("constant fits push width");
                    }
                    Item::Push(w, v) => {
                        self.asm.push(w, v);
                    }
                    Item::Tag(l) => {
                        self.asm.push_label(2, l);
                    }
                    Item::Bind(l) => {
                        self.asm.bind(l).expect("each label bound once");
                    }
                    Item::Mark(m) => {
                        marks.insert(m, self.asm.here());
                    }
                }
            }
        }
        // metadata-style trailer: never executed, owned by nobody
        let mut trailer = vec![0xa1, 0x65, b'b', b'z', b'z', b'r', b'0', 0x58, 0x20];
        trailer.extend((0..32).map(|_| self.rng.gen::<u8>()));
        trailer.extend([0x00, 0x29]);
        debug_assert_eq!(trailer.len(), TRAILER_LEN);
        self.asm.raw(&trailer);
        marks
    }
}

/// Generates one labelled contract. Pure in `spec`.
pub fn generate(spec: &GenSpec) -> Result<GroundTruthContract, InfeasibleSpec> {
    spec.validate()?;
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        asm: Asm::new(),
        spec: spec.clone(),
        fns: Vec::new(),
        deferred: Vec::new(),
        marks: 0,
        calls: Vec::new(),
        shared_revert: None,
        revert_users: Vec::new(),
    };
    g.plan();
    let mut tails = BTreeMap::new();
    let dispatcher = g.emit_dispatcher();
    let mut bodies = Vec::new();
    for fid in 1..g.fns.len() as u32 {
        bodies.push(g.emit_function(fid, &mut tails));
    }
    bodies.shuffle(&mut g.rng);
    let mut deferred = std::mem::take(&mut g.deferred);
    deferred.shuffle(&mut g.rng);

    let mut frags = vec![dispatcher];
    if let Some(l) = g.shared_revert {
        let mut owners = g.revert_users.clone();
        owners.sort_unstable();
        frags.push(Fragment { owners, items: vec![Item::Bind(l), Item::Push(1, 0), Item::Op(dup(1)), Item::Op(Opcode::REVERT)] });
    }
    frags.extend(bodies);
    frags.extend(deferred);
    let marks = g.lay_out(frags);

    let at = |l: Label| g.asm.offset_of(l).expect("label bound during layout");
    let entry_of = |fid: u32| if fid == 0 { 0 } else { at(g.fns[fid as usize].entry) };
    let call_sites: Vec<GtCallSite> = g
        .calls
        .iter()
        .map(|c| GtCallSite {
            caller: entry_of(c.caller),
            site: marks[&c.site],
            callee: entry_of(c.callee),
            return_site: at(c.ret),
        })
        .collect();
    let mut functions: Vec<GtFunction> = g
        .fns
        .iter()
        .map(|f| GtFunction {
            name: f.signature.clone().unwrap_or_else(|| f.name.clone()),
            visibility: f.visibility,
            entry: entry_of(f.id),
            selector: f.selector,
            interface_entry: f.iface.map(at),
            bytes: Vec::new(),
        })
        .collect();
    let abi = serde_json::Value::Array(
        g.fns
            .iter()
            .filter(|f| f.selector.is_some())
            .map(|f| {
                serde_json::json!({
                    "type": "function",
                    "name": f.name,
                    "inputs": vec![serde_json::json!({"type": "uint256"}); f.n_args],
                })
            })
            .collect(),
    );
    let out = g.asm.finish().expect("generator binds every label it uses");
    for (off, owners) in &out.owners {
        for &o in owners {
            functions[o as usize].bytes.push(*off);
        }
    }
    Ok(GroundTruthContract {
        schema: SCHEMA_VERSION.into(),
        id: format!("gen-{:016x}", spec.seed),
        code: out.code,
        functions,
        call_sites,
        abi: Some(abi),
        provenance: Provenance::Generator { spec: spec.clone() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(seed: u64) -> GenSpec {
        GenSpec { seed, n_public: 4, n_internal: 5, ..GenSpec::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate(&spec(11)).unwrap();
        let b = generate(&spec(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.code, b.code);
        assert_ne!(a.code, generate(&spec(12)).unwrap().code);
    }

    #[test]
    fn degenerate_spec_covers_code_once() {
        let c = generate(&GenSpec { n_public: 1, n_internal: 0, ..spec(3) }).unwrap();
        c.validate().unwrap();
        assert_eq!(c.functions.len(), 2);
        let mut all: Vec<Offset> = c.functions.iter().flat_map(|f| f.bytes.iter().copied()).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n, "an instruction was labelled twice");
        // everything before the 43-byte trailer is labelled
        let p = c.program();
        let body_end = (c.code.len() - TRAILER_LEN) as Offset;
        let covered: BTreeSet<Offset> = all.into_iter().collect();
        for ins in p.instructions().iter().take_while(|i| i.offset < body_end) {
            assert!(covered.contains(&ins.offset), "0x{:x} unlabelled", ins.offset);
        }
        assert!(covered.iter().all(|&o| o < body_end));
    }

    #[test]
    fn forced_sharing_overlaps() {
        let c = generate(&GenSpec { n_internal: 2, share_probability: 1.0, ..spec(5) }).unwrap();
        c.validate().unwrap();
        let internal: Vec<&GtFunction> = c.functions.iter().filter(|f| f.visibility == Visibility::Internal).collect();
        let a: BTreeSet<_> = internal[0].bytes.iter().collect();
        assert!(internal[1].bytes.iter().any(|o| a.contains(o)));
    }

    #[test]
    fn infeasible_specs() {
        assert!(generate(&GenSpec { n_internal: 1, share_probability: 0.5, ..spec(1) }).is_err());
        assert!(generate(&GenSpec { n_public: 0, n_internal: 2, ..spec(1) }).is_err());
        assert!(generate(&GenSpec { modifier_probability: 1.5, ..spec(1) }).is_err());
    }

    #[test]
    fn many_seeds_validate() {
        for seed in 0..200 {
            for style in [OptimizeStyle::Plain, OptimizeStyle::Dedup] {
                let s = GenSpec {
                    seed,
                    n_public: 1 + (seed as usize % 7),
                    n_internal: seed as usize % 8,
                    share_probability: if seed % 8 >= 2 { 0.5 } else { 0.0 },
                    optimize_style: style,
                    ..GenSpec::default()
                };
                let c = generate(&s).unwrap();
                c.validate().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
                let called: BTreeSet<Offset> = c.call_sites.iter().map(|s| s.callee).collect();
                assert_eq!(called, c.labeled_entries(), "seed {seed}: some function is never called");
            }
        }
    }
}
