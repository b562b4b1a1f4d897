//! Acyclic path sets and call-graph paths against brute-force enumeration.

mod oracles;

use std::collections::{BTreeMap, BTreeSet};

use evmfunc::boundary::{CallEdge, FunctionKind, FunctionRecord};
use evmfunc::corpus::{generate, GenSpec};
use evmfunc::graphs::{acyclic_paths, call_graph, callgraph_paths, intra_cfg, Digraph, IntraCfg, EXIT, PATH_CAP};
use evmfunc::metrics::pathset_score;
use evmfunc::pipeline::gt_records;
use evmfunc::segment::BlockGraph;
use oracles::{brute_paths, dfs_back_edges, dominator_back_edges, kahn_acyclic, oracle_acyclic_paths, random_edges, Edges};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn digraph(edges: &Edges, nodes: impl IntoIterator<Item = u32>) -> Digraph {
    let mut g = Digraph::default();
    g.nodes.extend(nodes);
    for &(a, b) in edges {
        g.add_edge(a, b);
    }
    g
}

#[test]
fn random_cfgs_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a7);
    let mut reducible = 0;
    for i in 0..300 {
        let n = rng.gen_range(1..=7);
        let mut edges = random_edges(&mut rng, n, 0.3);
        for a in 0..n {
            if rng.gen_bool(0.3) {
                edges.insert((a, EXIT));
            }
        }
        let cfg = IntraCfg { entry: 0, graph: digraph(&edges, 0..n) };
        let got = acyclic_paths(&cfg, usize::MAX);
        assert!(!got.truncated);
        let back = dfs_back_edges(&edges, &[0]);
        assert_eq!(got.paths, oracle_acyclic_paths(&edges, &back, 0), "graph {i}: {edges:?}");

        let (dom_back, is_reducible) = dominator_back_edges(&edges, 0);
        if is_reducible {
            reducible += 1;
            assert_eq!(back, dom_back, "graph {i}: back edges of a reducible graph are order-free");
        }
    }
    assert!(reducible > 100, "only {reducible} reducible samples");
}

fn record(entry: u32, calls: &[(u32, u32)]) -> FunctionRecord {
    FunctionRecord {
        entry,
        kind: if entry == 0 { FunctionKind::Dispatcher } else { FunctionKind::Internal },
        bytes: BTreeSet::new(),
        callers: BTreeSet::new(),
        calls: calls.iter().map(|&(site, callee)| CallEdge { site, callee, return_sites: BTreeSet::new() }).collect(),
    }
}

#[test]
fn random_call_graphs_match_enumeration_and_are_acyclic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xca11);
    for i in 0..300 {
        let n = rng.gen_range(1..=7u32);
        let nodes: Vec<u32> = (0..n).map(|k| k * 16).collect();
        let mut recs = Vec::new();
        let mut edges = Edges::new();
        for &a in &nodes {
            let mut calls = Vec::new();
            for &b in &nodes {
                if b != 0 && rng.gen_bool(0.3) {
                    calls.push((a + 1 + calls.len() as u32, b));
                    edges.insert((a, b));
                }
            }
            recs.push(record(a, &calls));
        }
        let publics: BTreeMap<u32, u32> =
            nodes.iter().copied().filter(|&b| b != 0 && rng.gen_bool(0.4)).map(|b| (b, b + 8)).collect();
        for &b in publics.keys() {
            edges.insert((0, b));
        }

        let cg = call_graph(&recs, &publics);
        let node_set: BTreeSet<u32> = nodes.iter().copied().collect();
        assert!(kahn_acyclic(&node_set, &cg.graph.edges), "graph {i} has a cycle");

        let roots: Vec<u32> = std::iter::once(0).chain(nodes.iter().copied().filter(|&x| x != 0)).collect();
        let back = dfs_back_edges(&edges, &roots);
        let mut want_edges = edges.clone();
        for &(a, b) in &back {
            want_edges.remove(&(a, b));
            if b != 0 {
                want_edges.insert((0, b));
            }
        }
        assert_eq!(cg.graph.edges, want_edges, "graph {i}");
        let (got, cut) = callgraph_paths(&cg, usize::MAX);
        assert!(!cut);
        for &x in nodes.iter().filter(|&&x| x != 0) {
            let want: BTreeSet<Vec<u32>> = brute_paths(&want_edges, 0, x).into_iter().map(|p| p[1..].to_vec()).collect();
            assert_eq!(got[&x], want, "graph {i} node {x}");
        }
    }
}

#[test]
fn removing_an_edge_drops_the_score_by_the_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    for seed in 0..40 {
        let gt = generate(&GenSpec { seed, n_internal: 4, ..Default::default() }).unwrap();
        let p = gt.program();
        let blocks = BlockGraph::new(&p);
        for r in gt_records(&gt) {
            let cfg = intra_cfg(&p, &blocks, &r);
            if cfg.graph.edges.is_empty() {
                continue;
            }
            let truth = acyclic_paths(&cfg, PATH_CAP).paths;
            let victim = *cfg.graph.edges.iter().nth(rng.gen_range(0..cfg.graph.edges.len())).unwrap();
            let mut cut = cfg.clone();
            cut.graph.edges.remove(&victim);
            let pred = acyclic_paths(&cut, PATH_CAP).paths;

            let back = dfs_back_edges(&cut.graph.edges, &[cut.entry]);
            let brute = oracle_acyclic_paths(&cut.graph.edges, &back, cut.entry);
            assert_eq!(pred, brute);
            let tp = brute.intersection(&truth).count();
            let s = pathset_score(&pred, &truth);
            assert_eq!((s.tp, s.fp, s.fn_), (tp, brute.len() - tp, truth.len() - tp));
            checked += 1;
        }
    }
    assert!(checked > 100);
}
