//! Function boundaries from entries: traversal, validation of returns and
//! iterative repair of the entry and call-site sets.

pub mod traverse;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::disasm::Program;
use crate::dispatcher::Dispatch;
use crate::opcode::Opcode;
use crate::segment::{BlockGraph, JumpKind};
use crate::Offset;
pub use traverse::{
    infer_call_return_sites, validate_return, Diagnostics, Frame, JumpTable, Limits, ReturnVerdict, Signal, Traversal, Traverser,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConfig {
    pub rho0: f64,
    pub delta: f64,
    pub rho_min: f64,
    pub max_lowerings: usize,
    pub max_states: usize,
    pub timeout: Duration,
    pub max_depth: usize,
    /// On a missed call, also register the targets of direct jumps whose
    /// block pushes the consumed return address.
    pub register_missing: bool,
    pub max_iterations: usize,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            rho0: 0.5,
            delta: 0.1,
            rho_min: 0.1,
            max_lowerings: 5,
            max_states: 100_000,
            timeout: Duration::from_secs(60),
            max_depth: 16,
            register_missing: false,
            max_iterations: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionKind {
    Dispatcher,
    PublicBody,
    Internal,
}

fn hex_off<S: Serializer>(o: &Offset, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("0x{o:x}"))
}

fn hex_offs<'a, I, S>(v: I, s: S) -> Result<S::Ok, S::Error>
where
    I: IntoIterator<Item = &'a Offset>,
    S: Serializer,
{
    s.collect_seq(v.into_iter().map(|o| format!("0x{o:x}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallEdge {
    #[serde(serialize_with = "hex_off")]
    pub site: Offset,
    #[serde(serialize_with = "hex_off")]
    pub callee: Offset,
    #[serde(serialize_with = "hex_offs")]
    pub return_sites: BTreeSet<Offset>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FunctionRecord {
    #[serde(serialize_with = "hex_off")]
    pub entry: Offset,
    pub kind: FunctionKind,
    #[serde(serialize_with = "hex_offs")]
    pub bytes: BTreeSet<Offset>,
    /// Call-site pcs in retained functions that call this one.
    #[serde(serialize_with = "hex_offs")]
    pub callers: BTreeSet<Offset>,
    pub calls: Vec<CallEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryResult {
    pub functions: Vec<FunctionRecord>,
    /// Final threshold.
    pub rho: f64,
    pub lowerings: usize,
    pub iterations: usize,
    #[serde(serialize_with = "hex_offs")]
    pub blacklist: BTreeSet<Offset>,
    /// Every signal raised, in iteration order.
    pub signals: Vec<Signal>,
    /// Candidates dropped because nothing calls them.
    #[serde(serialize_with = "hex_offs")]
    pub uncalled: BTreeSet<Offset>,
    pub diagnostics: Diagnostics,
    pub budget_exceeded: bool,
    pub refinement_budget_exceeded: bool,
    /// Traversals run and states visited over all iterations.
    pub traversals: usize,
    pub states: usize,
}

impl BoundaryResult {
    pub fn function_at(&self, entry: Offset) -> Option<&FunctionRecord> {
        self.functions.iter().find(|f| f.entry == entry)
    }

    pub fn entries(&self) -> BTreeSet<Offset> {
        self.functions.iter().map(|f| f.entry).collect()
    }
}

/// Public function entries used for boundaries and the interface entries
/// that are folded into the dispatcher.
pub fn public_split(dispatch: &Dispatch) -> (BTreeSet<Offset>, BTreeSet<Offset>) {
    let bodies: BTreeSet<Offset> = dispatch.functions.iter().map(|f| f.entry()).collect();
    let ifaces = dispatch.interface_entries().difference(&bodies).copied().collect();
    (bodies, ifaces)
}

/// Direct-jump targets whose block also pushes `ret`.
fn callers_pushing(program: &Program, graph: &BlockGraph, ret: Offset) -> BTreeSet<Offset> {
    graph
        .blocks
        .iter()
        .zip(&graph.jumps)
        .filter_map(|(b, j)| match j {
            Some(JumpKind::Direct { target }) if b.last(program).opcode == Opcode::JUMP => {
                let pushes = b.instructions(program).iter().any(|i| i.push.and_then(|w| w.as_offset()) == Some(ret));
                pushes.then_some(*target)
            }
            _ => None,
        })
        .collect()
}

/// Refinement loop. `probs` maps candidate internal entries to their
/// probability; pass probability 1 for a fixed (oracle) entry list.
pub fn identify_boundaries(
    program: &Program,
    dispatch: &Dispatch,
    probs: &BTreeMap<Offset, f64>,
    cfg: &BoundaryConfig,
) -> BoundaryResult {
    let start = Instant::now();
    let deadline = start + cfg.timeout;
    let graph = BlockGraph::new(program);
    let jumps = JumpTable::new(program, &graph);
    let (publics, ifaces) = public_split(dispatch);
    let limits = Limits { max_states: cfg.max_states, deadline: Some(deadline), max_depth: cfg.max_depth };

    let mut rho = cfg.rho0;
    let mut lowerings = 0;
    let mut blacklist = BTreeSet::new();
    let mut registered: BTreeSet<Offset> = BTreeSet::new();
    let mut signals = Vec::new();
    let mut cache: BTreeMap<Offset, Traversal> = BTreeMap::new();
    let mut last_entries = BTreeSet::new();
    let mut iterations = 0;
    let mut refinement_budget_exceeded = false;
    let (mut traversals, mut states) = (0, 0);

    let legal = |o: &Offset| *o == 0 || program.is_jumpdest(*o);
    loop {
        iterations += 1;
        let mut entries: BTreeSet<Offset> = BTreeSet::from([0]);
        entries.extend(publics.iter().copied().filter(legal));
        entries.extend(probs.iter().filter(|(_, &p)| p >= rho).map(|(&o, _)| o).filter(legal));
        entries.extend(registered.iter().copied());
        entries.retain(|o| !ifaces.contains(o));
        if entries != last_entries {
            cache.clear();
            last_entries = entries.clone();
        }
        let stale: Vec<Offset> = entries.iter().copied().filter(|e| !cache.contains_key(e)).collect();
        let tr = Traverser { program, jumps: &jumps, entries: &entries, blacklist: &blacklist, limits };
        let fresh: Vec<Traversal> = stale.par_iter().map(|&e| tr.traverse(e)).collect();
        for t in fresh {
            traversals += 1;
            states += t.states;
            signals.extend(t.signals.iter().copied());
            cache.insert(t.entry, t);
        }

        let mut new_black = BTreeSet::new();
        let mut missing = Vec::new();
        for t in cache.values() {
            for s in &t.signals {
                match *s {
                    Signal::SpuriousCall { site, .. } if !blacklist.contains(&site) => {
                        new_black.insert(site);
                    }
                    Signal::MissingCall { target, .. } => missing.push(target),
                    _ => {}
                }
            }
        }
        let mut changed = false;
        if !new_black.is_empty() {
            cache.retain(|_, t| t.used_sites.is_disjoint(&new_black));
            blacklist.extend(new_black);
            changed = true;
        }
        if !missing.is_empty() {
            if lowerings < cfg.max_lowerings && rho > cfg.rho_min {
                lowerings += 1;
                // computed from the start so repeated steps do not drift
                let r = cfg.rho0 - lowerings as f64 * cfg.delta;
                rho = ((r * 1e9).round() / 1e9).max(cfg.rho_min);
                changed = true;
            }
            if cfg.register_missing {
                for ret in missing {
                    for t in callers_pushing(program, &graph, ret) {
                        if !ifaces.contains(&t) && registered.insert(t) {
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
        if iterations >= cfg.max_iterations || Instant::now() >= deadline {
            refinement_budget_exceeded = true;
            break;
        }
    }

    // keep only functions reachable over calls from the dispatcher and
    // public bodies; this also drops candidates that only call each other
    let fixed: Vec<Offset> = cache.keys().copied().filter(|e| *e == 0 || publics.contains(e)).collect();
    let mut retained: BTreeSet<Offset> = fixed.iter().copied().collect();
    let mut work = fixed;
    while let Some(e) = work.pop() {
        for &(_, callee) in cache[&e].calls.keys() {
            if cache.contains_key(&callee) && retained.insert(callee) {
                work.push(callee);
            }
        }
    }
    let uncalled = cache.keys().copied().filter(|e| !retained.contains(e)).collect();

    let mut diagnostics = Diagnostics::default();
    let mut budget_exceeded = false;
    let mut functions: Vec<FunctionRecord> = retained
        .iter()
        .map(|&e| {
            let t = &cache[&e];
            diagnostics.merge(&t.diagnostics);
            budget_exceeded |= t.budget_exceeded;
            let kind = if e == 0 {
                FunctionKind::Dispatcher
            } else if publics.contains(&e) {
                FunctionKind::PublicBody
            } else {
                FunctionKind::Internal
            };
            let calls =
                t.calls.iter().map(|(&(site, callee), rets)| CallEdge { site, callee, return_sites: rets.clone() }).collect();
            FunctionRecord { entry: e, kind, bytes: t.bytes.clone(), callers: BTreeSet::new(), calls }
        })
        .collect();
    let mut callers: BTreeMap<Offset, BTreeSet<Offset>> = BTreeMap::new();
    for f in &functions {
        for c in &f.calls {
            callers.entry(c.callee).or_default().insert(c.site);
        }
    }
    for f in &mut functions {
        f.callers = callers.remove(&f.entry).unwrap_or_default();
    }
    BoundaryResult {
        functions,
        rho,
        lowerings,
        iterations,
        blacklist,
        signals,
        uncalled,
        diagnostics,
        budget_exceeded,
        refinement_budget_exceeded,
        traversals,
        states,
    }
}

/// Probability table that accepts exactly `entries`.
pub fn oracle_probs(entries: impl IntoIterator<Item = Offset>) -> BTreeMap<Offset, f64> {
    entries.into_iter().map(|e| (e, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate::{generate, GenSpec};
    use crate::dispatcher::public_entries;

    #[test]
    fn oracle_mode_matches_generator() {
        for seed in 0..40 {
            let gt = generate(&GenSpec { seed, n_public: 3, n_internal: 4, ..Default::default() }).unwrap();
            let p = gt.program();
            let d = public_entries(&p);
            let r = identify_boundaries(&p, &d, &oracle_probs(gt.internal_entries()), &BoundaryConfig::default());
            for f in &gt.functions {
                let got = r.function_at(f.entry).unwrap_or_else(|| panic!("seed {seed}: missing 0x{:x}", f.entry));
                let want: BTreeSet<Offset> = f.bytes.iter().copied().collect();
                assert_eq!(got.bytes, want, "seed {seed} fn {} 0x{:x}", f.name, f.entry);
            }
            assert_eq!(r.functions.len(), gt.functions.len());
            assert!(r.signals.is_empty(), "seed {seed}: {:?}", r.signals);
        }
    }

    #[test]
    fn no_internals_gives_publics_only() {
        let gt = generate(&GenSpec { seed: 2, n_public: 2, n_internal: 0, ..Default::default() }).unwrap();
        let p = gt.program();
        let r = identify_boundaries(&p, &public_entries(&p), &BTreeMap::new(), &BoundaryConfig::default());
        assert_eq!(r.entries(), gt.all_entries());
    }
}
