//! Per-function CFGs, acyclic path sets and the call graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::boundary::FunctionRecord;
use crate::disasm::Program;
use crate::segment::{BlockGraph, JumpKind, Terminator};
use crate::Offset;

/// Synthetic exit node.
pub const EXIT: Offset = Offset::MAX;

/// Default cap on enumerated paths.
pub const PATH_CAP: usize = 10_000;

fn node_name(o: Offset) -> String {
    if o == EXIT {
        "exit".into()
    } else {
        format!("0x{o:x}")
    }
}

/// Directed graph over offsets with deterministic ordering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Digraph {
    pub nodes: BTreeSet<Offset>,
    pub edges: BTreeSet<(Offset, Offset)>,
}

impl Digraph {
    pub fn successors(&self, n: Offset) -> impl Iterator<Item = Offset> + '_ {
        self.edges.range((n, 0)..=(n, Offset::MAX)).map(|&(_, b)| b)
    }

    pub fn add_edge(&mut self, a: Offset, b: Offset) {
        self.nodes.insert(a);
        self.nodes.insert(b);
        self.edges.insert((a, b));
    }

    /// Edges closing a cycle in a DFS from `roots` (in order), visiting
    /// successors in ascending order.
    pub fn back_edges(&self, roots: impl IntoIterator<Item = Offset>) -> BTreeSet<(Offset, Offset)> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Active,
            Done,
        }
        let mut mark: BTreeMap<Offset, Mark> = BTreeMap::new();
        let mut back = BTreeSet::new();
        for root in roots {
            if mark.contains_key(&root) {
                continue;
            }
            // iterative DFS: (node, successors, next index)
            let mut stack: Vec<(Offset, Vec<Offset>, usize)> = vec![(root, self.successors(root).collect(), 0)];
            mark.insert(root, Mark::Active);
            while let Some((n, succ, i)) = stack.last_mut() {
                if let Some(&s) = succ.get(*i) {
                    *i += 1;
                    match mark.get(&s) {
                        Some(Mark::Active) => {
                            back.insert((*n, s));
                        }
                        Some(Mark::Done) => {}
                        None => {
                            mark.insert(s, Mark::Active);
                            let ss = self.successors(s).collect();
                            stack.push((s, ss, 0));
                        }
                    }
                } else {
                    mark.insert(*n, Mark::Done);
                    stack.pop();
                }
            }
        }
        back
    }

    pub fn is_acyclic(&self) -> bool {
        self.back_edges(self.nodes.iter().copied()).is_empty()
    }

    /// Simple paths from `from` to `to`, at most `cap` of them; the flag
    /// reports truncation.
    pub fn simple_paths(&self, from: Offset, to: Offset, cap: usize) -> (BTreeSet<Vec<Offset>>, bool) {
        let mut out = BTreeSet::new();
        let mut path = vec![from];
        let mut on: BTreeSet<Offset> = BTreeSet::from([from]);
        let mut truncated = false;
        self.paths_rec(to, cap, &mut path, &mut on, &mut out, &mut truncated);
        (out, truncated)
    }

    fn paths_rec(
        &self,
        to: Offset,
        cap: usize,
        path: &mut Vec<Offset>,
        on: &mut BTreeSet<Offset>,
        out: &mut BTreeSet<Vec<Offset>>,
        truncated: &mut bool,
    ) {
        let n = *path.last().unwrap();
        if n == to {
            if out.len() >= cap {
                *truncated = true;
            } else {
                out.insert(path.clone());
            }
            return;
        }
        for s in self.successors(n).collect::<Vec<_>>() {
            if *truncated {
                return;
            }
            if on.insert(s) {
                path.push(s);
                self.paths_rec(to, cap, path, on, out, truncated);
                path.pop();
                on.remove(&s);
            }
        }
    }

    pub fn to_dot(&self, name: &str, label: impl Fn(Offset) -> String) -> String {
        let mut s = format!("digraph \"{name}\" {{\n  node [shape=box, fontname=monospace];\n");
        for &n in &self.nodes {
            let _ = writeln!(s, "  \"{}\" [label=\"{}\"];", node_name(n), label(n));
        }
        for &(a, b) in &self.edges {
            let _ = writeln!(s, "  \"{}\" -> \"{}\";", node_name(a), node_name(b));
        }
        s.push_str("}\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntraCfg {
    pub entry: Offset,
    pub graph: Digraph,
}

/// Builds the CFG of `record` from basic blocks inside its bytes. Call
/// edges go to the return sites seen during traversal, or to the block
/// after the call when none was seen; halts and returns go to [`EXIT`].
pub fn intra_cfg(program: &Program, blocks: &BlockGraph, record: &FunctionRecord) -> IntraCfg {
    let mut g = Digraph::default();
    g.nodes.insert(record.entry);
    g.nodes.insert(EXIT);
    let calls: BTreeMap<Offset, &BTreeSet<Offset>> = record.calls.iter().map(|c| (c.site, &c.return_sites)).collect();
    let inside = |o: Offset| record.bytes.contains(&o);
    for (i, b) in blocks.blocks.iter().enumerate() {
        if !inside(b.entry) {
            continue;
        }
        g.nodes.insert(b.entry);
        let last = b.last(program).offset;
        let next = blocks.blocks.get(i + 1).map(|n| n.entry).filter(|&n| inside(n));
        if let Some(rets) = calls.get(&last) {
            let rets: Vec<Offset> = rets.iter().copied().filter(|&r| inside(r)).collect();
            if rets.is_empty() {
                g.add_edge(b.entry, next.unwrap_or(EXIT));
            }
            for r in rets {
                g.add_edge(b.entry, r);
            }
            // a conditional call keeps its intra-procedural fall-through
            if b.terminator == Terminator::ConditionalJump {
                if let Some(n) = next {
                    g.add_edge(b.entry, n);
                }
            }
            continue;
        }
        match b.terminator {
            Terminator::Halt => g.add_edge(b.entry, EXIT),
            Terminator::FallThrough => match next {
                Some(n) => g.add_edge(b.entry, n),
                None => g.add_edge(b.entry, EXIT),
            },
            Terminator::Jump | Terminator::ConditionalJump => {
                match blocks.jumps[i] {
                    Some(JumpKind::Direct { target }) if inside(target) => g.add_edge(b.entry, target),
                    Some(JumpKind::Indirect) => g.add_edge(b.entry, EXIT),
                    _ => {}
                }
                if b.terminator == Terminator::ConditionalJump {
                    if let Some(n) = next {
                        g.add_edge(b.entry, n);
                    }
                }
            }
        }
    }
    IntraCfg { entry: record.entry, graph: g }
}

/// Replaces every DFS back edge `w -> v` by `entry -> v` and `w -> EXIT`.
pub fn acyclic_surrogate(g: &Digraph, entry: Offset) -> Digraph {
    let back = g.back_edges([entry]);
    let mut out = g.clone();
    for &(w, v) in &back {
        out.edges.remove(&(w, v));
        if v != entry {
            out.add_edge(entry, v);
        }
        out.add_edge(w, EXIT);
    }
    debug_assert!(out.back_edges([entry]).is_empty());
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSet {
    pub paths: BTreeSet<Vec<Offset>>,
    pub truncated: bool,
}

pub fn acyclic_paths(cfg: &IntraCfg, cap: usize) -> PathSet {
    let g = acyclic_surrogate(&cfg.graph, cfg.entry);
    let (paths, truncated) = g.simple_paths(cfg.entry, EXIT, cap);
    PathSet { paths, truncated }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallEdgeOut {
    pub caller: String,
    pub callee: String,
    pub site: String,
    pub surrogate: bool,
}

/// Call graph rooted at the dispatcher (offset 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallGraph {
    pub graph: Digraph,
    /// `(caller, callee) -> sites`; surrogate edges keep their original site.
    pub sites: BTreeMap<(Offset, Offset), BTreeSet<Offset>>,
    pub surrogates: BTreeSet<(Offset, Offset)>,
    /// Display label per node; publics carry interface and body entries.
    pub labels: BTreeMap<Offset, String>,
}

pub const DISPATCHER: Offset = 0;

/// `publics` maps body entry to interface entry. Recursive edges (DFS back
/// edges from the dispatcher, then from remaining nodes in ascending order)
/// become dispatcher edges.
pub fn call_graph(records: &[FunctionRecord], publics: &BTreeMap<Offset, Offset>) -> CallGraph {
    let mut g = Digraph::default();
    let mut sites: BTreeMap<(Offset, Offset), BTreeSet<Offset>> = BTreeMap::new();
    g.nodes.insert(DISPATCHER);
    for r in records {
        g.nodes.insert(r.entry);
    }
    for r in records {
        for c in &r.calls {
            if g.nodes.contains(&c.callee) {
                g.add_edge(r.entry, c.callee);
                sites.entry((r.entry, c.callee)).or_default().insert(c.site);
            }
        }
    }
    for (&body, &iface) in publics {
        g.add_edge(DISPATCHER, body);
        sites.entry((DISPATCHER, body)).or_default().insert(iface);
    }
    let roots = std::iter::once(DISPATCHER).chain(g.nodes.iter().copied().filter(|&n| n != DISPATCHER)).collect::<Vec<_>>();
    let back = g.back_edges(roots);
    let mut surrogates = BTreeSet::new();
    for &(a, b) in &back {
        g.edges.remove(&(a, b));
        let moved = sites.remove(&(a, b)).unwrap_or_default();
        if b != DISPATCHER {
            g.add_edge(DISPATCHER, b);
            sites.entry((DISPATCHER, b)).or_default().extend(moved);
            surrogates.insert((DISPATCHER, b));
        }
    }
    let mut labels = BTreeMap::new();
    for &n in &g.nodes {
        let l = if n == DISPATCHER {
            "dispatcher".to_string()
        } else if let Some(i) = publics.get(&n) {
            format!("public iface 0x{i:x} body 0x{n:x}")
        } else {
            format!("internal 0x{n:x}")
        };
        labels.insert(n, l);
    }
    CallGraph { graph: g, sites, surrogates, labels }
}

impl CallGraph {
    pub fn edges_json(&self) -> Vec<CallEdgeOut> {
        self.sites
            .iter()
            .flat_map(|(&(a, b), ss)| {
                ss.iter().map(move |s| CallEdgeOut {
                    caller: node_name(a),
                    callee: node_name(b),
                    site: node_name(*s),
                    surrogate: self.surrogates.contains(&(a, b)),
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "nodes": self.graph.nodes.iter().map(|n| serde_json::json!({"entry": node_name(*n), "label": self.labels[n]})).collect::<Vec<_>>(),
            "edges": self.edges_json(),
        })
    }

    pub fn to_dot(&self) -> String {
        self.graph.to_dot("callgraph", |n| self.labels[&n].clone())
    }
}

/// For every node other than the dispatcher, the dispatcher-to-node paths
/// (excluding the dispatcher itself).
pub fn callgraph_paths(cg: &CallGraph, cap: usize) -> (BTreeMap<Offset, BTreeSet<Vec<Offset>>>, bool) {
    let mut out = BTreeMap::new();
    let mut truncated = false;
    for &n in &cg.graph.nodes {
        if n == DISPATCHER {
            continue;
        }
        let (ps, t) = cg.graph.simple_paths(DISPATCHER, n, cap);
        truncated |= t;
        out.insert(n, ps.into_iter().map(|p| p[1..].to_vec()).collect());
    }
    (out, truncated)
}

impl IntraCfg {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "entry": node_name(self.entry),
            "nodes": self.graph.nodes.iter().map(|n| node_name(*n)).collect::<Vec<_>>(),
            "edges": self.graph.edges.iter().map(|(a, b)| [node_name(*a), node_name(*b)]).collect::<Vec<_>>(),
        })
    }

    pub fn to_dot(&self) -> String {
        self.graph.to_dot(&format!("fn_{}", node_name(self.entry)), node_name)
    }
}
