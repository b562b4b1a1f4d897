//! Public function recovery from the selector dispatcher at offset 0.
//!
//! The dispatcher is walked symbolically rather than matched byte-for-byte,
//! so both linear `EQ` chains and `LT`/`GT` split trees are recognised
//! regardless of how the selector was extracted (`DIV` by 2^224 followed by
//! a mask, or `SHR 0xe0`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tiny_keccak::{Hasher, Keccak};

use crate::disasm::Program;
use crate::opcode::Opcode;
use crate::symbolic::{SymStack, SymbolicValue};
use crate::word::Word;
use crate::Offset;

const WALK_LIMIT: usize = 20_000;

/// Four-byte function selector.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Selector(pub u32);

impl Selector {
    /// First four bytes of keccak-256 of a canonical signature such as
    /// `transfer(address,uint256)`.
    pub fn of_signature(signature: &str) -> Self {
        let mut k = Keccak::v256();
        let mut out = [0u8; 32];
        k.update(signature.as_bytes());
        k.finalize(&mut out);
        Selector(u32::from_be_bytes([out[0], out[1], out[2], out[3]]))
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:08x}", self.0)
    }
}

impl fmt::Debug for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let h = s.strip_prefix("0x").unwrap_or(s);
        if h.len() != 8 {
            return Err(format!("selector must be 8 hex digits: {s:?}"));
        }
        u32::from_str_radix(h, 16).map(Selector).map_err(|e| format!("{s:?}: {e}"))
    }
}

impl Serialize for Selector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PublicFunction {
    pub selector: Selector,
    /// Target of the dispatcher comparison.
    pub interface_entry: Offset,
    /// Shared body entered after argument decoding; also the entry used by
    /// internal callers.
    pub body_entry: Option<Offset>,
}

impl PublicFunction {
    /// The offset treated as the function's entry by boundary analysis.
    pub fn entry(&self) -> Offset {
        self.body_entry.unwrap_or(self.interface_entry)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Dispatch {
    /// Sorted by selector.
    pub functions: Vec<PublicFunction>,
    /// Where calls that match no selector continue.
    pub fallback: Option<Offset>,
    pub diagnostics: Vec<String>,
}

impl Dispatch {
    pub fn interface_entries(&self) -> BTreeSet<Offset> {
        self.functions.iter().map(|f| f.interface_entry).collect()
    }

    pub fn body_entries(&self) -> BTreeSet<Offset> {
        self.functions.iter().filter_map(|f| f.body_entry).collect()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum DVal {
    Const(Word),
    CalldataHead,
    CalldataSize,
    Selector,
    SelectorEq(u32),
    SelectorCmp,
    SizeCmp,
    Other,
}

#[derive(Default)]
struct DStack(Vec<DVal>);

impl DStack {
    fn pop(&mut self) -> DVal {
        self.0.pop().unwrap_or(DVal::Other)
    }
    fn peek(&self, depth: usize) -> DVal {
        let n = self.0.len();
        if depth < n {
            self.0[n - 1 - depth]
        } else {
            DVal::Other
        }
    }
}

fn is_selector_mask(v: DVal) -> bool {
    matches!(v, DVal::Const(w) if w == Word::from_u64(0xffff_ffff))
}

/// Recovers `(selector, interface entry)` pairs and the fallback path.
pub fn public_entries(program: &Program) -> Dispatch {
    let mut found: BTreeMap<Selector, Offset> = BTreeMap::new();
    let mut size_guard: Option<Offset> = None;
    let mut last_compare: Option<Offset> = None;
    let mut diagnostics = Vec::new();
    let mut visited = BTreeSet::new();
    let mut work: Vec<(usize, DStack)> = Vec::new();
    if !program.instructions().is_empty() {
        work.push((0, DStack::default()));
    }
    let mut steps = 0usize;

    'paths: while let Some((mut idx, mut st)) = work.pop() {
        loop {
            let Some(ins) = program.instructions().get(idx) else { continue 'paths };
            if !visited.insert(ins.offset) {
                continue 'paths;
            }
            steps += 1;
            if steps > WALK_LIMIT {
                diagnostics.push("dispatcher walk limit reached".into());
                break 'paths;
            }
            let op = ins.opcode;
            let next = idx + 1;
            if let Some(w) = ins.push {
                st.0.push(DVal::Const(w));
            } else if op == Opcode::PUSH0 {
                st.0.push(DVal::Const(Word::ZERO));
            } else if let Some(n) = op.dup_depth() {
                let v = st.peek(n - 1);
                st.0.push(v);
            } else if let Some(n) = op.swap_depth() {
                while st.0.len() <= n {
                    st.0.insert(0, DVal::Other);
                }
                let top = st.0.len() - 1;
                st.0.swap(top, top - n);
            } else {
                match op.0 {
                    // CALLDATALOAD
                    0x35 => {
                        let at = st.pop();
                        st.0.push(if at == DVal::Const(Word::ZERO) { DVal::CalldataHead } else { DVal::Other });
                    }
                    // CALLDATASIZE
                    0x36 => st.0.push(DVal::CalldataSize),
                    // DIV
                    0x04 => {
                        let num = st.pop();
                        let den = st.pop();
                        let r = if num == DVal::CalldataHead && den == DVal::Const(Word::pow2(224)) {
                            DVal::Selector
                        } else {
                            DVal::Other
                        };
                        st.0.push(r);
                    }
                    // SHR
                    0x1c => {
                        let shift = st.pop();
                        let v = st.pop();
                        let r = if v == DVal::CalldataHead && shift == DVal::Const(Word::from_u64(224)) {
                            DVal::Selector
                        } else {
                            DVal::Other
                        };
                        st.0.push(r);
                    }
                    // AND
                    0x16 => {
                        let a = st.pop();
                        let b = st.pop();
                        let r = match (a, b) {
                            (DVal::Const(x), DVal::Const(y)) => DVal::Const(x & y),
                            (DVal::Selector, m) | (m, DVal::Selector) if is_selector_mask(m) => DVal::Selector,
                            _ => DVal::Other,
                        };
                        st.0.push(r);
                    }
                    // EQ
                    0x14 => {
                        let a = st.pop();
                        let b = st.pop();
                        let r = match (a, b) {
                            (DVal::Selector, DVal::Const(k)) | (DVal::Const(k), DVal::Selector) => {
                                match k.as_u64().and_then(|v| u32::try_from(v).ok()) {
                                    Some(k) => DVal::SelectorEq(k),
                                    None => DVal::Other,
                                }
                            }
                            _ => DVal::Other,
                        };
                        st.0.push(r);
                    }
                    // LT GT SLT SGT
                    0x10..=0x13 => {
                        let a = st.pop();
                        let b = st.pop();
                        let r = if a == DVal::Selector || b == DVal::Selector {
                            DVal::SelectorCmp
                        } else if a == DVal::CalldataSize || b == DVal::CalldataSize {
                            DVal::SizeCmp
                        } else {
                            DVal::Other
                        };
                        st.0.push(r);
                    }
                    _ if op == Opcode::JUMPI => {
                        let target = st.pop();
                        let cond = st.pop();
                        let t = match target {
                            DVal::Const(w) => w.as_offset().filter(|&o| program.is_jumpdest(o)),
                            _ => None,
                        };
                        match (cond, t) {
                            (DVal::SelectorEq(k), Some(t)) => {
                                let sel = Selector(k);
                                if let Some(prev) = found.insert(sel, t) {
                                    if prev != t {
                                        diagnostics.push(format!("selector {sel} dispatched to both 0x{prev:x} and 0x{t:x}"));
                                    }
                                }
                                last_compare = Some(last_compare.map_or(ins.offset, |l| l.max(ins.offset)));
                            }
                            (DVal::SizeCmp, Some(t)) => {
                                size_guard.get_or_insert(t);
                            }
                            (_, Some(t)) => {
                                if let Some(ti) = program.index_of(t) {
                                    work.push((ti, DStack(st.0.clone())));
                                }
                            }
                            (_, None) => {}
                        }
                        idx = next;
                        continue;
                    }
                    _ if op == Opcode::JUMP => {
                        let target = st.pop();
                        match target {
                            DVal::Const(w) => match w.as_offset().filter(|&o| program.is_jumpdest(o)) {
                                Some(t) => {
                                    idx = program.index_of(t).expect("jumpdest is an instruction");
                                    continue;
                                }
                                None => continue 'paths,
                            },
                            _ => continue 'paths,
                        }
                    }
                    _ if op.is_halting() => continue 'paths,
                    _ => {
                        let (pops, pushes) = op.stack_arity();
                        for _ in 0..pops {
                            st.pop();
                        }
                        for _ in 0..pushes {
                            st.0.push(DVal::Other);
                        }
                    }
                }
            }
            if st.0.len() > crate::symbolic::MAX_STACK {
                continue 'paths;
            }
            idx = next;
        }
    }

    if found.is_empty() {
        diagnostics.push("no selector dispatcher recognised at offset 0".into());
    }
    let fallback = size_guard.or_else(|| match last_compare {
        Some(pc) => chain_continuation(program, pc),
        None => (!program.is_empty()).then_some(0),
    });
    let functions = found
        .into_iter()
        .map(|(selector, interface_entry)| PublicFunction {
            selector,
            interface_entry,
            body_entry: body_entry(program, interface_entry),
        })
        .collect();
    Dispatch { functions, fallback, diagnostics }
}

/// Where the no-match path goes after the comparison at `pc`: the next
/// instruction, or the target of an immediate `PUSH tag; JUMP`.
fn chain_continuation(program: &Program, pc: Offset) -> Option<Offset> {
    let i = program.index_of(pc)? + 1;
    let ins = program.instructions();
    let first = ins.get(i)?;
    if let (Some(w), Some(j)) = (first.push, ins.get(i + 1)) {
        if j.opcode == Opcode::JUMP {
            return w.as_offset().filter(|&o| program.is_jumpdest(o));
        }
    }
    Some(first.offset)
}

/// Follows the argument-decoding prologue from an interface entry to the
/// first jump that looks like a call: a direct jump taken while another
/// JUMPDEST constant (the return address) sits on the stack.
pub fn body_entry(program: &Program, interface_entry: Offset) -> Option<Offset> {
    let start = program.index_of(interface_entry)?;
    let mut visited = BTreeSet::new();
    let mut work = vec![(start, SymStack::new())];
    let mut steps = 0usize;
    let as_dest = |v: SymbolicValue| v.as_const()?.as_offset().filter(|&o| program.is_jumpdest(o));

    while let Some((mut idx, mut st)) = work.pop() {
        loop {
            let Some(ins) = program.instructions().get(idx) else { break };
            if !visited.insert(ins.offset) {
                break;
            }
            steps += 1;
            if steps > WALK_LIMIT {
                return None;
            }
            let op = ins.opcode;
            if op == Opcode::JUMP {
                let Some(t) = as_dest(st.pop()) else { break };
                let has_return = st.values().iter().any(|&v| as_dest(v).is_some());
                if has_return && t != interface_entry {
                    return Some(t);
                }
                idx = program.index_of(t).expect("jumpdest");
                continue;
            }
            if op == Opcode::JUMPI {
                let target = st.pop();
                st.pop();
                if let Some(t) = as_dest(target) {
                    work.push((program.index_of(t).expect("jumpdest"), st.clone()));
                }
                idx += 1;
                continue;
            }
            if op.is_halting() || st.apply(ins).is_err() {
                break;
            }
            idx += 1;
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed ABI: {0}")]
pub struct MalformedAbi(pub String);

#[derive(Debug, Clone, Default, Serialize)]
pub struct AbiMatch {
    /// Signature text for selectors found in both bytecode and ABI.
    pub named: BTreeMap<Selector, String>,
    /// Bytecode selectors without an ABI entry.
    pub unmatched_selectors: Vec<Selector>,
    /// ABI signatures whose selector the dispatcher does not contain.
    pub unmatched_abi: Vec<String>,
}

impl AbiMatch {
    pub fn name_of(&self, sel: Selector) -> String {
        self.named.get(&sel).cloned().unwrap_or_else(|| sel.to_string())
    }
}

#[derive(Deserialize)]
struct AbiParam {
    #[serde(rename = "type")]
    ty: String,
    #[serde(default)]
    components: Vec<AbiParam>,
}

#[derive(Deserialize)]
struct AbiItem {
    #[serde(rename = "type", default = "default_item_type")]
    ty: String,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    inputs: Vec<AbiParam>,
}

fn default_item_type() -> String {
    "function".into()
}

fn canonical_type(p: &AbiParam) -> Result<String, MalformedAbi> {
    if let Some(suffix) = p.ty.strip_prefix("tuple") {
        if p.components.is_empty() {
            return Err(MalformedAbi("tuple parameter without components".into()));
        }
        let inner: Result<Vec<_>, _> = p.components.iter().map(canonical_type).collect();
        return Ok(format!("({}){}", inner?.join(","), suffix));
    }
    if p.ty.is_empty() || p.ty.chars().any(|c| c.is_whitespace() || c == ',' || c == '(' || c == ')') {
        return Err(MalformedAbi(format!("bad parameter type {:?}", p.ty)));
    }
    Ok(p.ty.clone())
}

/// Canonical `name(type,...)` signatures for every function in an ABI document.
pub fn abi_signatures(abi_json: &str) -> Result<Vec<String>, MalformedAbi> {
    let items: Vec<AbiItem> = serde_json::from_str(abi_json).map_err(|e| MalformedAbi(e.to_string()))?;
    let mut out = Vec::new();
    for item in items.iter().filter(|i| i.ty == "function") {
        let name = item.name.as_deref().filter(|n| !n.is_empty()).ok_or_else(|| MalformedAbi("function without name".into()))?;
        let tys: Result<Vec<_>, _> = item.inputs.iter().map(canonical_type).collect();
        out.push(format!("{name}({})", tys?.join(",")));
    }
    Ok(out)
}

/// Joins recovered selectors with ABI signatures by hashing each signature.
pub fn match_abi(publics: &[PublicFunction], abi_json: &str) -> Result<AbiMatch, MalformedAbi> {
    let present: BTreeSet<Selector> = publics.iter().map(|f| f.selector).collect();
    let mut m = AbiMatch::default();
    for sig in abi_signatures(abi_json)? {
        let sel = Selector::of_signature(&sig);
        if present.contains(&sel) {
            m.named.insert(sel, sig);
        } else {
            m.unmatched_abi.push(sig);
        }
    }
    m.unmatched_selectors = present.into_iter().filter(|s| !m.named.contains_key(s)).collect();
    Ok(m)
}
