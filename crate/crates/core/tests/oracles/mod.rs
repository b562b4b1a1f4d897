//! Reference implementations the oracle suites compare against. Each one
//! is deliberately naive: exhaustive enumeration, a different traversal
//! order, or a third-party table.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use evmfunc::graphs::EXIT;
use evmfunc::Program;
use rand::Rng;
use revm::bytecode::opcode::OpCode;

pub type Edges = BTreeSet<(u32, u32)>;

/// Bytes revm assigns from forks after Cancun; random inputs skip them.
pub const REVM_ONLY: [u8; 5] = [0x1e, 0x4b, 0xe6, 0xe7, 0xe8];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefIns {
    pub offset: u32,
    pub name: &'static str,
    /// Immediate bytes present in the code (may be short at the end).
    pub imm: Vec<u8>,
}

/// Linear sweep driven by revm's opcode table.
pub fn revm_sweep(code: &[u8]) -> Vec<RefIns> {
    let mut out = Vec::new();
    let mut pc = 0;
    while pc < code.len() {
        let (name, n) = match OpCode::new(code[pc]) {
            Some(op) => (op.as_str(), op.info().immediate_size() as usize),
            None => ("INVALID", 0),
        };
        let end = (pc + 1 + n).min(code.len());
        out.push(RefIns { offset: pc as u32, name, imm: code[pc + 1..end].to_vec() });
        pc += 1 + n;
    }
    out
}

pub fn agrees_with_revm(code: &[u8]) -> Result<(), String> {
    let p = Program::from_bytes(code.to_vec());
    let want = revm_sweep(code);
    if p.instructions().len() != want.len() {
        return Err(format!("{} instructions vs {}", p.instructions().len(), want.len()));
    }
    for (ins, r) in p.instructions().iter().zip(&want) {
        let full = ins.opcode.push_width();
        let mut imm = r.imm.clone();
        imm.resize(full, 0);
        let ours = ins.push.map(|w| w.to_be_bytes()[32 - full..].to_vec()).unwrap_or_default();
        let ok = ins.offset == r.offset
            && ins.opcode.mnemonic() == r.name
            && ours == imm
            && ins.width as usize == 1 + r.imm.len()
            && ins.truncated == (r.imm.len() < full);
        if !ok {
            return Err(format!("at 0x{:x}: {ins:?} vs {r:?}", ins.offset));
        }
    }
    Ok(())
}

pub fn random_code(rng: &mut impl Rng, max_len: usize) -> Vec<u8> {
    let len = rng.gen_range(0..=max_len);
    (0..len)
        .map(|_| loop {
            let b: u8 = rng.gen();
            if !REVM_ONLY.contains(&b) {
                break b;
            }
        })
        .collect()
}

/// Score of one labelling, summed term by term.
pub fn crf_path_score(em: &[[f64; 2]], tr: &[[f64; 2]; 2], y: &[u8]) -> f64 {
    let unary: f64 = y.iter().zip(em).map(|(&l, e)| e[l as usize]).sum();
    let pair: f64 = y.windows(2).map(|w| tr[w[0] as usize][w[1] as usize]).sum();
    unary + pair
}

pub struct CrfBrute {
    pub log_z: f64,
    /// P(label = 1) per position.
    pub marginals: Vec<f64>,
    pub best: Vec<u8>,
}

/// Enumerates all 2^n labellings.
pub fn crf_brute(em: &[[f64; 2]], tr: &[[f64; 2]; 2]) -> CrfBrute {
    let n = em.len();
    let paths: Vec<Vec<u8>> = (0..1u32 << n).map(|m| (0..n).map(|k| ((m >> (n - 1 - k)) & 1) as u8).collect()).collect();
    let scores: Vec<f64> = paths.iter().map(|y| crf_path_score(em, tr, y)).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let mut marginals = vec![0.0; n];
    for (y, s) in paths.iter().zip(&scores) {
        let p = (s - log_z).exp();
        for k in 0..n {
            if y[k] == 1 {
                marginals[k] += p;
            }
        }
    }
    let best_i = (0..paths.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    CrfBrute { log_z, marginals, best: paths[best_i].clone() }
}

/// Every simple path from `from` that ends at its first visit to `to`,
/// grown one edge at a time from a worklist of partial paths.
pub fn brute_paths(edges: &Edges, from: u32, to: u32) -> BTreeSet<Vec<u32>> {
    let mut out = BTreeSet::new();
    let mut work = vec![vec![from]];
    while let Some(p) = work.pop() {
        let last = *p.last().unwrap();
        if last == to {
            out.insert(p);
            continue;
        }
        for &(a, b) in edges {
            if a == last && !p.contains(&b) {
                let mut q = p.clone();
                q.push(b);
                work.push(q);
            }
        }
    }
    out
}

/// Back edges of a recursive DFS from `roots` in order, successors
/// ascending.
pub fn dfs_back_edges(edges: &Edges, roots: &[u32]) -> Edges {
    fn visit(n: u32, edges: &Edges, state: &mut BTreeMap<u32, bool>, back: &mut Edges) {
        state.insert(n, true);
        let succ: Vec<u32> = edges.iter().filter(|e| e.0 == n).map(|e| e.1).collect();
        for s in succ {
            match state.get(&s) {
                Some(true) => {
                    back.insert((n, s));
                }
                Some(false) => {}
                None => visit(s, edges, state, back),
            }
        }
        state.insert(n, false);
    }
    let mut state = BTreeMap::new();
    let mut back = BTreeSet::new();
    for &r in roots {
        if !state.contains_key(&r) {
            visit(r, edges, &mut state, &mut back);
        }
    }
    back
}

pub fn reachable(edges: &Edges, root: u32) -> BTreeSet<u32> {
    let mut seen = BTreeSet::from([root]);
    let mut work = vec![root];
    while let Some(n) = work.pop() {
        for &(a, b) in edges {
            if a == n && seen.insert(b) {
                work.push(b);
            }
        }
    }
    seen
}

/// Dominator sets by the textbook fixed point over reachable nodes.
pub fn dominators(edges: &Edges, root: u32) -> BTreeMap<u32, BTreeSet<u32>> {
    let nodes = reachable(edges, root);
    let mut dom: BTreeMap<u32, BTreeSet<u32>> = nodes.iter().map(|&n| (n, nodes.clone())).collect();
    dom.insert(root, BTreeSet::from([root]));
    loop {
        let mut changed = false;
        for &n in nodes.iter().filter(|&&n| n != root) {
            let mut d: Option<BTreeSet<u32>> = None;
            for &(p, _) in edges.iter().filter(|e| e.1 == n && nodes.contains(&e.0)) {
                d = Some(match d {
                    None => dom[&p].clone(),
                    Some(x) => x.intersection(&dom[&p]).copied().collect(),
                });
            }
            let mut d = d.unwrap_or_default();
            d.insert(n);
            if d != dom[&n] {
                dom.insert(n, d);
                changed = true;
            }
        }
        if !changed {
            return dom;
        }
    }
}

/// Edges whose target dominates their source, restricted to reachable
/// nodes; the graph is reducible iff removing them leaves it acyclic.
pub fn dominator_back_edges(edges: &Edges, root: u32) -> (Edges, bool) {
    let dom = dominators(edges, root);
    let live: Edges = edges.iter().copied().filter(|e| dom.contains_key(&e.0)).collect();
    let back: Edges = live.iter().copied().filter(|(a, b)| dom[a].contains(b)).collect();
    let rest: Edges = live.difference(&back).copied().collect();
    let nodes: BTreeSet<u32> = dom.keys().copied().collect();
    (back, kahn_acyclic(&nodes, &rest))
}

/// Acyclicity by repeatedly removing sources.
pub fn kahn_acyclic(nodes: &BTreeSet<u32>, edges: &Edges) -> bool {
    let mut indeg: BTreeMap<u32, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    for &(_, b) in edges {
        *indeg.entry(b).or_default() += 1;
    }
    let mut ready: Vec<u32> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
    let mut removed = 0;
    while let Some(n) = ready.pop() {
        removed += 1;
        for &(a, b) in edges {
            if a == n {
                let d = indeg.get_mut(&b).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(b);
                }
            }
        }
    }
    removed == indeg.len()
}

/// Random digraph on `0..n` with self loops allowed.
pub fn random_edges(rng: &mut impl Rng, n: u32, p: f64) -> Edges {
    let mut e = BTreeSet::new();
    for a in 0..n {
        for b in 0..n {
            if rng.gen_bool(p) {
                e.insert((a, b));
            }
        }
    }
    e
}

/// Surrogate rewriting applied to the oracle's own back-edge set.
pub fn oracle_acyclic_paths(edges: &Edges, back: &Edges, entry: u32) -> BTreeSet<Vec<u32>> {
    let mut e = edges.clone();
    for &(w, v) in back {
        e.remove(&(w, v));
        if v != entry {
            e.insert((entry, v));
        }
        e.insert((w, EXIT));
    }
    brute_paths(&e, entry, EXIT)
}
