//! Command implementations behind the `evmfunc` binary.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use evmfunc::boundary::public_split;
use evmfunc::config::ConfigError;
use evmfunc::corpus::{self, CorpusError, GenSpec, GroundTruthContract, InfeasibleSpec, OptimizeStyle, SplitName};
use evmfunc::disasm::{parse_hex, DisasmError};
use evmfunc::dispatcher::public_entries;
use evmfunc::graphs::{call_graph, intra_cfg};
use evmfunc::metrics::Aggregation;
use evmfunc::model::io::ModelFileError;
use evmfunc::model::{self, baseline_entries, labeled_sequence, FsiModel, TrainError, Vocab};
use evmfunc::pipeline::{analyze, evaluate_corpus, Analysis, ContractEval, EntrySource, Report};
use evmfunc::segment::BlockGraph;
use evmfunc::{Offset, Program};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "evmfunc", version, about = "Function entries and boundaries in EVM bytecode")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: Global,
}

#[derive(Debug, Args, Default)]
pub struct Global {
    /// `key = value` run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Trained model file.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Initial entry threshold.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Per-contract wall-clock cutoff.
    #[arg(long, global = true)]
    pub timeout_secs: Option<f64>,
    /// Worker threads (0: one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub aggregation: Option<Aggregation>,
}

#[derive(Debug, Args)]
pub struct Source {
    /// Runtime bytecode as hex; `-` reads stdin.
    pub input: PathBuf,
    /// Comma-separated internal entries to use instead of a model.
    #[arg(long, value_delimiter = ',')]
    pub oracle_entries: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSource {
    Model,
    Oracle,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Instruction listing.
    Disasm {
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Basic blocks with terminators and jump kinds.
    Segment { input: PathBuf },
    /// Public functions and predicted internal entries.
    Entries(Source),
    /// Function boundaries after refinement.
    Boundaries(Source),
    /// Intra-procedural CFGs of every identified function.
    Cfg {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        dot: bool,
    },
    /// Call graph rooted at the dispatcher.
    Callgraph {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        dot: bool,
    },
    /// Writes a labeled synthetic corpus to `--out`.
    GenCorpus {
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Optimiser-style sharing of blocks between functions.
        #[arg(long)]
        dedup: bool,
        /// Fraction assigned to the training split.
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
    },
    /// Trains a model on a corpus's training split.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Runs the pipeline over a corpus split and scores it.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        source: Option<EvalSource>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
    },
    /// Entries found by the return-address heuristic.
    Baseline { input: PathBuf },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Decode(#[from] DisasmError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelFileError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Generate(#[from] InfeasibleSpec),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Input(_) => "input",
            CliError::Decode(_) => "decode",
            CliError::Config(_) => "config",
            CliError::Model(_) => "model",
            CliError::Corpus(_) => "corpus",
            CliError::Train(_) => "train",
            CliError::Generate(_) => "generate",
            CliError::Csv(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        if matches!(self, CliError::Usage(_)) {
            2
        } else {
            1
        }
    }

    pub fn to_json(&self) -> Value {
        error_json(self.kind(), &self.to_string())
    }
}

pub fn error_json(kind: &str, message: &str) -> Value {
    json!({ "error": { "kind": kind, "message": message } })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// What a command produced: text for stdout and files for `--out`.
#[derive(Debug, Default)]
pub struct Output {
    pub stdout: String,
    pub files: Vec<(String, Vec<u8>)>,
}

impl Output {
    fn json(name: &str, v: &impl Serialize) -> Self {
        let text = serde_json::to_string_pretty(v).expect("output serialises");
        Output { stdout: format!("{text}\n"), files: vec![(name.to_string(), text.into_bytes())] }
    }

    fn with_file(mut self, name: &str, bytes: impl Into<Vec<u8>>) -> Self {
        self.files.push((name.to_string(), bytes.into()));
        self
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, bytes) in &self.files {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(io_err(&p))?;
        }
        Ok(())
    }
}

/// Merges defaults, the config file and flags.
pub fn resolve_config(g: &Global) -> Result<RunConfig, CliError> {
    let mut c = match &g.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => RunConfig::default(),
    };
    if g.model.is_some() {
        c.model.clone_from(&g.model);
    }
    if g.out.is_some() {
        c.out.clone_from(&g.out);
    }
    if let Some(t) = g.threshold {
        c.rho0 = t;
        c.rho_min = c.rho_min.min(t);
    }
    if let Some(t) = g.timeout_secs {
        c.timeout_secs = t;
    }
    if let Some(j) = g.jobs {
        c.jobs = j;
    }
    if let Some(s) = g.seed {
        c.seed = s;
        c.train.seed = s;
    }
    if let Some(a) = g.aggregation {
        c.aggregation = a;
    }
    c.check()?;
    Ok(c)
}

/// Parses and runs a command line, writing outputs under `--out` when set.
pub fn run(cli: Cli) -> Result<Output, CliError> {
    let cfg = resolve_config(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let out = pool.install(|| dispatch(cli.command, &cfg))?;
    if let Some(dir) = &cfg.out {
        out.write(dir)?;
    }
    Ok(out)
}

fn dispatch(cmd: Command, cfg: &RunConfig) -> Result<Output, CliError> {
    match cmd {
        Command::Disasm { input, json } => {
            let p = read_program(&input)?;
            let out = Output::json("disasm.json", &p.to_listing_json());
            Ok(if json { out } else { Output { stdout: p.listing(), ..out } })
        }
        Command::Segment { input } => {
            let p = read_program(&input)?;
            Ok(Output::json("segments.json", &BlockGraph::new(&p).to_json(&p)))
        }
        Command::Entries(src) => entries(&src, cfg),
        Command::Boundaries(src) => {
            let (p, label, a) = analyze_source(&src, cfg)?;
            Ok(Output::json("boundaries.json", &boundaries_json(&p, label, &a)))
        }
        Command::Cfg { source, dot } => {
            let (p, _, a) = analyze_source(&source, cfg)?;
            let blocks = BlockGraph::new(&p);
            let cfgs: Vec<_> = a.boundaries.functions.iter().map(|r| intra_cfg(&p, &blocks, r)).collect();
            let v: Vec<Value> = cfgs.iter().map(|c| c.to_json()).collect();
            let dots: String = cfgs.iter().map(|c| c.to_dot()).collect();
            let out = Output::json("cfg.json", &v).with_file("cfg.dot", dots.clone());
            Ok(if dot { Output { stdout: dots, ..out } } else { out })
        }
        Command::Callgraph { source, dot } => {
            let (_, _, a) = analyze_source(&source, cfg)?;
            let cg = call_graph(&a.boundaries.functions, &a.publics());
            let out = Output::json("callgraph.json", &cg.to_json()).with_file("callgraph.dot", cg.to_dot());
            Ok(if dot { Output { stdout: cg.to_dot(), ..out } } else { out })
        }
        Command::GenCorpus { count, dedup, train_fraction } => gen_corpus(count, dedup, train_fraction, cfg),
        Command::Train { corpus } => train(corpus.as_ref().or(cfg.corpus.as_ref()), cfg),
        Command::Eval { corpus, source, split } => eval(corpus.as_ref().or(cfg.corpus.as_ref()), source, split, cfg),
        Command::Baseline { input } => {
            let p = read_program(&input)?;
            let d = public_entries(&p);
            let mut found = baseline_entries(&p, &BlockGraph::new(&p));
            let ifaces = public_split(&d).1;
            found.retain(|o| !ifaces.contains(o));
            let v = json!({
                "source": "baseline",
                "publics": publics_json(&d),
                "internal": found.iter().map(|&o| json!({ "entry": hex(o), "p": 1.0 })).collect::<Vec<_>>(),
            });
            Ok(Output::json("entries.json", &v))
        }
    }
}

fn hex(o: Offset) -> String {
    format!("0x{o:x}")
}

fn read_input(path: &Path) -> Result<String, CliError> {
    let mut bytes = Vec::new();
    if path == Path::new("-") {
        std::io::stdin().read_to_end(&mut bytes).map_err(io_err(path))?;
    } else {
        bytes = fs::read(path).map_err(io_err(path))?;
    }
    String::from_utf8(bytes).map_err(|_| CliError::Input(format!("{}: not UTF-8 hex text", path.display())))
}

pub fn read_program(path: &Path) -> Result<Program, CliError> {
    Ok(Program::from_bytes(parse_hex(&read_input(path)?)?))
}

fn parse_offset(s: &str) -> Result<Offset, CliError> {
    let t = s.trim();
    let r = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(h) => Offset::from_str_radix(h, 16),
        None => t.parse(),
    };
    r.map_err(|_| CliError::Usage(format!("bad offset {s:?}")))
}

fn load_model(cfg: &RunConfig) -> Result<FsiModel, CliError> {
    let path = cfg.model.as_ref().ok_or_else(|| CliError::Usage("need --model or --oracle-entries".into()))?;
    Ok(model::io::load(path)?)
}

enum Loaded {
    Model(FsiModel),
    Oracle(BTreeSet<Offset>),
}

impl Loaded {
    fn from_source(src: &Source, cfg: &RunConfig) -> Result<Self, CliError> {
        match &src.oracle_entries {
            Some(list) => Ok(Loaded::Oracle(
                list.iter().filter(|s| !s.trim().is_empty()).map(|s| parse_offset(s)).collect::<Result<_, _>>()?,
            )),
            None => Ok(Loaded::Model(load_model(cfg)?)),
        }
    }

    fn as_source(&self) -> EntrySource<'_> {
        match self {
            Loaded::Model(m) => EntrySource::Model(m),
            Loaded::Oracle(s) => EntrySource::Oracle(s),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Loaded::Model(_) => "model",
            Loaded::Oracle(_) => "oracle",
        }
    }
}

fn analyze_source(src: &Source, cfg: &RunConfig) -> Result<(Program, &'static str, Analysis), CliError> {
    let p = read_program(&src.input)?;
    let loaded = Loaded::from_source(src, cfg)?;
    let a = analyze(&p, loaded.as_source(), &cfg.boundary());
    Ok((p, loaded.label(), a))
}

fn publics_json(d: &evmfunc::dispatcher::Dispatch) -> Value {
    let fns: Vec<Value> = d
        .functions
        .iter()
        .map(|f| {
            json!({
                "selector": f.selector.to_string(),
                "interface_entry": hex(f.interface_entry),
                "body_entry": f.body_entry.map(hex),
            })
        })
        .collect();
    json!({ "functions": fns, "fallback": d.fallback.map(hex), "diagnostics": d.diagnostics })
}

fn entries(src: &Source, cfg: &RunConfig) -> Result<Output, CliError> {
    let p = read_program(&src.input)?;
    let loaded = Loaded::from_source(src, cfg)?;
    let d = public_entries(&p);
    let probs = evmfunc::pipeline::candidate_probs(&p, &d, loaded.as_source());
    let kept = model::threshold(&probs, cfg.rho0);
    let v = json!({
        "source": loaded.label(),
        "threshold": cfg.rho0,
        "publics": publics_json(&d),
        "internal": kept.iter().map(|(&o, &p)| json!({ "entry": hex(o), "p": p })).collect::<Vec<_>>(),
    });
    Ok(Output::json("entries.json", &v))
}

fn boundaries_json(p: &Program, label: &str, a: &Analysis) -> Value {
    let b = &a.boundaries;
    json!({
        "source": label,
        "code_len": p.code().len(),
        "publics": publics_json(&a.dispatch),
        "partial": b.budget_exceeded || b.refinement_budget_exceeded,
        "result": b,
    })
}

fn need_out(cfg: &RunConfig) -> Result<&PathBuf, CliError> {
    cfg.out.as_ref().ok_or_else(|| CliError::Usage("this command needs --out".into()))
}

fn need_corpus(corpus: Option<&PathBuf>) -> Result<&PathBuf, CliError> {
    corpus.ok_or_else(|| CliError::Usage("this command needs --corpus".into()))
}

/// Template used by `gen-corpus --dedup`.
pub fn dedup_template() -> GenSpec {
    GenSpec { share_probability: 0.5, split_call_probability: 0.4, optimize_style: OptimizeStyle::Dedup, ..GenSpec::default() }
}

fn gen_corpus(count: usize, dedup: bool, fraction: f64, cfg: &RunConfig) -> Result<Output, CliError> {
    let dir = need_out(cfg)?;
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let template = if dedup { dedup_template() } else { GenSpec::default() };
    let gts = corpus::corpus_specs(count, cfg.seed, &template).iter().map(corpus::generate).collect::<Result<Vec<_>, _>>()?;
    let (train, test) =
        if count > 1 { corpus::split(&gts, |g| g.id.as_str(), fraction, cfg.seed)? } else { (gts.clone(), Vec::new()) };
    let splits: BTreeMap<String, SplitName> = train
        .iter()
        .map(|g| (g.id.clone(), SplitName::Train))
        .chain(test.iter().map(|g| (g.id.clone(), SplitName::Test)))
        .collect();
    corpus::save_corpus(dir, &gts, &splits)?;
    let v = json!({ "corpus": dir, "count": gts.len(), "train": train.len(), "test": test.len(), "dedup": dedup });
    Ok(Output { stdout: format!("{}\n", serde_json::to_string_pretty(&v).expect("json")), files: Vec::new() })
}

fn load_split(dir: &Path, which: SplitChoice) -> Result<Vec<GroundTruthContract>, CliError> {
    let (m, gts) = corpus::load(dir)?;
    let want = match which {
        SplitChoice::All => return Ok(gts),
        SplitChoice::Train => SplitName::Train,
        SplitChoice::Test => SplitName::Test,
    };
    if m.contracts.iter().all(|e| e.split.is_none()) {
        return Ok(gts);
    }
    Ok(m.contracts.iter().zip(gts).filter(|(e, _)| e.split == Some(want)).map(|(_, g)| g).collect())
}

fn train(corpus: Option<&PathBuf>, cfg: &RunConfig) -> Result<Output, CliError> {
    let dir = need_corpus(corpus)?;
    need_out(cfg)?;
    let gts = load_split(dir, SplitChoice::Train)?;
    let programs: Vec<Program> = gts.iter().map(|g| g.program()).collect();
    let vocab = Vocab::build(&programs);
    let data: Vec<_> = gts.iter().map(|g| labeled_sequence(&vocab, g)).collect();
    let (m, hist) = model::train(vocab, &data, &cfg.train)?;
    let summary = json!({
        "contracts": gts.len(),
        "vocab": m.vocab.len(),
        "loss": hist.loss,
        "pretrain_loss": hist.pretrain_loss,
        "final_lr": hist.final_lr,
        "config": cfg.train.to_kv(),
    });
    Ok(Output::json("train.json", &summary).with_file("model.bin", model::io::to_bytes(&m)))
}

#[derive(Serialize)]
struct TimingRow<'a> {
    id: &'a str,
    status: &'a str,
    seconds: f64,
    entry_f1: f64,
    boundary_f1: f64,
    error: &'a str,
}

fn timings_csv(evals: &[ContractEval]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in evals {
        let status = serde_json::to_value(e.status).expect("status serialises");
        w.serialize(TimingRow {
            id: &e.id,
            status: status.as_str().unwrap_or(""),
            seconds: e.seconds,
            entry_f1: e.scores.entry_all.f1,
            boundary_f1: e.scores.boundary.f1,
            error: e.error.as_deref().unwrap_or(""),
        })?;
    }
    w.into_inner().map_err(|e| CliError::Input(e.to_string()))
}

fn eval(corpus: Option<&PathBuf>, source: Option<EvalSource>, split: SplitChoice, cfg: &RunConfig) -> Result<Output, CliError> {
    let dir = need_corpus(corpus)?;
    let gts = load_split(dir, split)?;
    if gts.is_empty() {
        return Err(CliError::Input(format!("{}: no contracts in the selected split", dir.display())));
    }
    let source = source.unwrap_or(if cfg.model.is_some() { EvalSource::Model } else { EvalSource::Baseline });
    let bcfg = cfg.boundary();
    let opts = cfg.eval_options();
    let evals: Vec<ContractEval> = match source {
        EvalSource::Model => evaluate_corpus(&gts, EntrySource::Model(&load_model(cfg)?), &bcfg, &opts),
        EvalSource::Baseline => evaluate_corpus(&gts, EntrySource::Baseline, &bcfg, &opts),
        EvalSource::Oracle => gts
            .par_iter()
            .map(|g| {
                let truth = g.internal_entries();
                evmfunc::pipeline::evaluate_contract(g, EntrySource::Oracle(&truth), &bcfg, &opts)
            })
            .collect(),
    };
    let report = Report::new(&evals, cfg.aggregation);
    let src_name = format!("{source:?}").to_lowercase();
    let v = json!({ "source": src_name, "report": report });
    let text = serde_json::to_string_pretty(&v).expect("report serialises");
    Ok(Output {
        stdout: format!(
            "source {src_name}: {} contracts, {} analyzed, {} timeouts, {} fatal\n{}",
            report.total,
            report.analyzed,
            report.timeouts,
            report.fatal,
            report.table()
        ),
        files: vec![
            ("report.json".into(), text.into_bytes()),
            ("contracts.json".into(), serde_json::to_vec_pretty(&evals).expect("evals serialise")),
            ("timings.csv".into(), timings_csv(&evals)?),
        ],
    })
}
