//! End-to-end analysis of one contract and scoring against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::boundary::{
    identify_boundaries, oracle_probs, BoundaryConfig, BoundaryResult, CallEdge, FunctionKind, FunctionRecord,
};
use crate::corpus::{GroundTruthContract, Visibility};
use crate::disasm::Program;
use crate::dispatcher::{public_entries, Dispatch};
use crate::graphs::{acyclic_paths, call_graph, callgraph_paths, intra_cfg, PATH_CAP};
use crate::metrics::{
    aggregate, boundary_bytes_score, boundary_score, entry_score, pathset_score, table, Aggregation, Boundary, Score,
};
use crate::model::{baseline_entries, FsiModel};
use crate::segment::BlockGraph;
use crate::Offset;

/// Where candidate internal entries come from.
#[derive(Debug, Clone, Copy)]
pub enum EntrySource<'a> {
    Model(&'a FsiModel),
    Oracle(&'a BTreeSet<Offset>),
    Baseline,
}

#[derive(Debug, Clone, Serialize)]
pub struct Analysis {
    pub dispatch: Dispatch,
    /// Candidate probabilities (1.0 for oracle and baseline candidates).
    pub probabilities: BTreeMap<Offset, f64>,
    pub boundaries: BoundaryResult,
}

impl Analysis {
    /// Public body entry to interface entry.
    pub fn publics(&self) -> BTreeMap<Offset, Offset> {
        self.dispatch.functions.iter().map(|f| (f.entry(), f.interface_entry)).collect()
    }

    /// Candidates at the initial threshold, before refinement.
    pub fn initial_candidates(&self, rho: f64) -> BTreeSet<Offset> {
        self.probabilities.iter().filter(|(_, &p)| p >= rho).map(|(&o, _)| o).collect()
    }
}

pub fn candidate_probs(program: &Program, dispatch: &Dispatch, source: EntrySource) -> BTreeMap<Offset, f64> {
    let ifaces = crate::boundary::public_split(dispatch).1;
    match source {
        EntrySource::Model(m) => m.probabilities(program, &ifaces),
        EntrySource::Oracle(set) => oracle_probs(set.iter().copied()),
        EntrySource::Baseline => {
            let mut b = baseline_entries(program, &BlockGraph::new(program));
            b.retain(|o| !ifaces.contains(o));
            oracle_probs(b)
        }
    }
}

pub fn analyze(program: &Program, source: EntrySource, cfg: &BoundaryConfig) -> Analysis {
    let dispatch = public_entries(program);
    let probabilities = candidate_probs(program, &dispatch, source);
    let boundaries = identify_boundaries(program, &dispatch, &probabilities, cfg);
    Analysis { dispatch, probabilities, boundaries }
}

/// Ground-truth functions in the same shape as analysis output.
pub fn gt_records(gt: &GroundTruthContract) -> Vec<FunctionRecord> {
    let mut recs: Vec<FunctionRecord> = gt
        .functions
        .iter()
        .map(|f| FunctionRecord {
            entry: f.entry,
            kind: match f.visibility {
                Visibility::Dispatcher => FunctionKind::Dispatcher,
                Visibility::Public => FunctionKind::PublicBody,
                Visibility::Internal => FunctionKind::Internal,
            },
            bytes: f.bytes.iter().copied().collect(),
            callers: BTreeSet::new(),
            calls: Vec::new(),
        })
        .collect();
    for c in &gt.call_sites {
        if let Some(r) = recs.iter_mut().find(|r| r.entry == c.caller) {
            r.calls.push(CallEdge { site: c.site, callee: c.callee, return_sites: BTreeSet::from([c.return_site]) });
        }
        if let Some(r) = recs.iter_mut().find(|r| r.entry == c.callee) {
            r.callers.insert(c.site);
        }
    }
    recs
}

pub fn gt_publics(gt: &GroundTruthContract) -> BTreeMap<Offset, Offset> {
    gt.functions.iter().filter_map(|f| Some((f.entry, f.interface_entry?))).collect()
}

fn boundaries_of(recs: &[FunctionRecord]) -> Vec<Boundary> {
    recs.iter().map(|r| (r.entry, r.bytes.clone())).collect()
}

/// Union of acyclic paths over all functions, and whether any set was cut.
pub fn cfg_paths(program: &Program, recs: &[FunctionRecord], cap: usize) -> (BTreeSet<Vec<Offset>>, bool) {
    let blocks = BlockGraph::new(program);
    let mut all = BTreeSet::new();
    let mut cut = false;
    for r in recs {
        let ps = acyclic_paths(&intra_cfg(program, &blocks, r), cap);
        cut |= ps.truncated;
        all.extend(ps.paths);
    }
    (all, cut)
}

pub fn cg_paths(recs: &[FunctionRecord], publics: &BTreeMap<Offset, Offset>, cap: usize) -> (BTreeSet<Vec<Offset>>, bool) {
    let cg = call_graph(recs, publics);
    let (per, cut) = callgraph_paths(&cg, cap);
    (per.into_values().flatten().collect(), cut)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Analyzed,
    Timeout,
    Fatal,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractScores {
    /// Internal entries only.
    pub entry_internal: Score,
    /// Internal entries and public body entries.
    pub entry_all: Score,
    /// Raw model candidates at the initial threshold, internal and bodies.
    pub entry_candidates: Score,
    pub boundary: Score,
    pub boundary_bytes: Score,
    pub cfg_paths: Score,
    pub callgraph_paths: Score,
}

impl ContractScores {
    pub fn failure(gt: &GroundTruthContract, cap: usize) -> Self {
        let recs = gt_records(gt);
        let n_paths = cfg_paths(&gt.program(), &recs, cap).0.len();
        let n_cg = cg_paths(&recs, &gt_publics(gt), cap).0.len();
        ContractScores {
            entry_internal: Score::failure(gt.internal_entries().len()),
            entry_all: Score::failure(gt.labeled_entries().len()),
            entry_candidates: Score::failure(gt.labeled_entries().len()),
            boundary: Score::failure(gt.functions.len()),
            boundary_bytes: Score::failure(gt.functions.len()),
            cfg_paths: Score::failure(n_paths),
            callgraph_paths: Score::failure(n_cg),
        }
    }
}

pub fn score_contract(gt: &GroundTruthContract, a: &Analysis, rho0: f64, cap: usize) -> ContractScores {
    let program = gt.program();
    let recs = &a.boundaries.functions;
    let truth = gt_records(gt);
    let internal: BTreeSet<Offset> = recs.iter().filter(|r| r.kind == FunctionKind::Internal).map(|r| r.entry).collect();
    let all: BTreeSet<Offset> = recs.iter().filter(|r| r.kind != FunctionKind::Dispatcher).map(|r| r.entry).collect();
    let mut cands = a.initial_candidates(rho0);
    cands.extend(a.publics().keys());
    let (pp, _) = cfg_paths(&program, recs, cap);
    let (tp, _) = cfg_paths(&program, &truth, cap);
    let (pc, _) = cg_paths(recs, &a.publics(), cap);
    let (tc, _) = cg_paths(&truth, &gt_publics(gt), cap);
    ContractScores {
        entry_internal: entry_score(&internal, &gt.internal_entries()),
        entry_all: entry_score(&all, &gt.labeled_entries()),
        entry_candidates: entry_score(&cands, &gt.labeled_entries()),
        boundary: boundary_score(&boundaries_of(recs), &boundaries_of(&truth)),
        boundary_bytes: boundary_bytes_score(&boundaries_of(recs), &boundaries_of(&truth)),
        cfg_paths: pathset_score(&pp, &tp),
        callgraph_paths: pathset_score(&pc, &tc),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Wall-clock limit per contract.
    pub cutoff: Duration,
    /// Per-function cap on enumerated paths.
    pub path_cap: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { cutoff: Duration::from_secs(120), path_cap: PATH_CAP }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractEval {
    pub id: String,
    pub status: Status,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub scores: ContractScores,
}

/// Analyzes and scores one contract. Panics become `Fatal`; exceeding the
/// wall-clock cutoff or a traversal budget becomes `Timeout`. Failed
/// contracts score zero.
pub fn evaluate_contract(
    gt: &GroundTruthContract,
    source: EntrySource,
    cfg: &BoundaryConfig,
    opts: &EvalOptions,
) -> ContractEval {
    let t = Instant::now();
    let run = catch_unwind(AssertUnwindSafe(|| {
        let a = analyze(&gt.program(), source, cfg);
        let s = score_contract(gt, &a, cfg.rho0, opts.path_cap);
        (a.boundaries.budget_exceeded || a.boundaries.refinement_budget_exceeded, s)
    }));
    let seconds = t.elapsed().as_secs_f64();
    let (status, error, scores) = match run {
        Ok((over, s)) if !over && seconds <= opts.cutoff.as_secs_f64() => (Status::Analyzed, None, s),
        Ok(_) => (Status::Timeout, Some("budget exceeded".to_string()), ContractScores::failure(gt, opts.path_cap)),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (Status::Fatal, Some(msg), ContractScores::failure(gt, opts.path_cap))
        }
    };
    ContractEval { id: gt.id.clone(), status, seconds, error, scores }
}

/// Evaluates contracts in parallel on the current rayon pool; results
/// keep input order.
pub fn evaluate_corpus(
    gts: &[GroundTruthContract],
    source: EntrySource,
    cfg: &BoundaryConfig,
    opts: &EvalOptions,
) -> Vec<ContractEval> {
    gts.par_iter().map(|gt| evaluate_contract(gt, source, cfg, opts)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub micro: Score,
    #[serde(rename = "macro")]
    pub macro_: Score,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub total: usize,
    pub analyzed: usize,
    pub timeouts: usize,
    pub fatal: usize,
    pub success_rate: f64,
    /// Mode used for `headline`.
    pub aggregation: Aggregation,
    pub headline: BTreeMap<String, Score>,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub seconds_total: f64,
    pub seconds_max: f64,
}

impl Report {
    pub fn new(evals: &[ContractEval], mode: Aggregation) -> Self {
        let count = |st| evals.iter().filter(|e| e.status == st).count();
        let total = evals.len();
        let analyzed = count(Status::Analyzed);
        let mut metrics = BTreeMap::new();
        let mut headline = BTreeMap::new();
        let pick: [(&str, fn(&ContractScores) -> Score); 7] = [
            ("entry_internal", |s| s.entry_internal),
            ("entry_all", |s| s.entry_all),
            ("entry_candidates", |s| s.entry_candidates),
            ("boundary", |s| s.boundary),
            ("boundary_bytes", |s| s.boundary_bytes),
            ("cfg_paths", |s| s.cfg_paths),
            ("callgraph_paths", |s| s.callgraph_paths),
        ];
        for (name, f) in pick {
            let scores: Vec<Score> = evals.iter().map(|e| f(&e.scores)).collect();
            let (Some(micro), Some(macro_)) = (aggregate(&scores, Aggregation::Micro), aggregate(&scores, Aggregation::Macro))
            else {
                continue;
            };
            headline.insert(name.to_string(), if mode == Aggregation::Micro { micro } else { macro_ });
            metrics.insert(name.to_string(), MetricSummary { micro, macro_ });
        }
        Report {
            total,
            analyzed,
            timeouts: count(Status::Timeout),
            fatal: count(Status::Fatal),
            success_rate: if total == 0 { 0.0 } else { analyzed as f64 / total as f64 },
            aggregation: mode,
            headline,
            metrics,
            seconds_total: evals.iter().map(|e| e.seconds).sum(),
            seconds_max: evals.iter().map(|e| e.seconds).fold(0.0, f64::max),
        }
    }

    pub fn f1(&self, metric: &str) -> f64 {
        self.headline.get(metric).map_or(0.0, |s| s.f1)
    }

    pub fn table(&self) -> String {
        let rows: Vec<(&str, Score)> = self.headline.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        table(&rows)
    }
}
