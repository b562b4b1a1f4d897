//! Ground-truth contracts: schema, file I/O, splitting, and the generator.
//!
//! On disk a corpus directory holds `<id>.hex` (runtime bytecode),
//! `<id>.gt.json` (function labels) and a `manifest.json` listing ids and
//! split assignments.

pub mod asm;
pub mod fixtures;
pub mod generate;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disasm::{parse_hex, Program};
use crate::dispatcher::Selector;
use crate::Offset;
pub use generate::{generate, GenSpec, InfeasibleSpec, OptimizeStyle};

pub const SCHEMA_VERSION: &str = "1.0";
const SCHEMA_MAJOR: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    /// The code at offset 0: dispatcher, interface stubs and fallback.
    Dispatcher,
    Public,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtFunction {
    pub name: String,
    pub visibility: Visibility,
    pub entry: Offset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector: Option<Selector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interface_entry: Option<Offset>,
    /// Instruction-start offsets, ascending.
    pub bytes: Vec<Offset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GtCallSite {
    pub caller: Offset,
    /// Offset of the JUMP that enters the callee.
    pub site: Offset,
    pub callee: Offset,
    pub return_site: Offset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Generator { spec: GenSpec },
    External { source: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthContract {
    pub schema: String,
    pub id: String,
    #[serde(skip)]
    pub code: Vec<u8>,
    pub functions: Vec<GtFunction>,
    #[serde(default)]
    pub call_sites: Vec<GtCallSite>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abi: Option<serde_json::Value>,
    pub provenance: Provenance,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{id}: malformed ground truth: {msg}")]
    Malformed { id: String, msg: String },
    #[error("duplicate contract id {0}")]
    DuplicateId(String),
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("cannot make {k} folds from {n} contracts")]
    BadFolds { k: usize, n: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

impl GroundTruthContract {
    pub fn program(&self) -> Program {
        Program::from_bytes(self.code.clone())
    }

    pub fn hex(&self) -> String {
        hex::encode(&self.code)
    }

    pub fn function_at(&self, entry: Offset) -> Option<&GtFunction> {
        self.functions.iter().find(|f| f.entry == entry)
    }

    fn entries_of(&self, pred: impl Fn(Visibility) -> bool) -> BTreeSet<Offset> {
        self.functions.iter().filter(|f| pred(f.visibility)).map(|f| f.entry).collect()
    }

    /// Entries of every function including the dispatcher at 0.
    pub fn all_entries(&self) -> BTreeSet<Offset> {
        self.entries_of(|_| true)
    }

    pub fn internal_entries(&self) -> BTreeSet<Offset> {
        self.entries_of(|v| v == Visibility::Internal)
    }

    pub fn public_body_entries(&self) -> BTreeSet<Offset> {
        self.entries_of(|v| v == Visibility::Public)
    }

    /// Entries the labeler is trained to find: internal and public bodies.
    pub fn labeled_entries(&self) -> BTreeSet<Offset> {
        self.entries_of(|v| v != Visibility::Dispatcher)
    }

    pub fn interface_entries(&self) -> BTreeSet<Offset> {
        self.functions.iter().filter_map(|f| f.interface_entry).collect()
    }

    /// Checks the structural invariants of a label file against its code.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| CorpusError::Malformed { id: self.id.clone(), msg };
        let major = self.schema.split('.').next().unwrap_or("");
        if major != SCHEMA_MAJOR {
            return Err(bad(format!("unsupported schema version {:?}", self.schema)));
        }
        let program = self.program();
        let mut entries = BTreeSet::new();
        for f in &self.functions {
            if !entries.insert(f.entry) {
                return Err(bad(format!("entry 0x{:x} listed twice", f.entry)));
            }
            if f.entry != 0 && !program.is_jumpdest(f.entry) {
                return Err(bad(format!("entry 0x{:x} of {} is not a JUMPDEST", f.entry, f.name)));
            }
            if !f.bytes.windows(2).all(|w| w[0] < w[1]) {
                return Err(bad(format!("bytes of {} are not strictly ascending", f.name)));
            }
            if f.bytes.binary_search(&f.entry).is_err() {
                return Err(bad(format!("entry 0x{:x} of {} is not among its bytes", f.entry, f.name)));
            }
            if let Some(&o) = f.bytes.iter().find(|&&o| !program.is_instruction_start(o)) {
                let what = if o as usize >= program.len() { "out of range" } else { "not an instruction start" };
                return Err(bad(format!("offset 0x{o:x} of {} is {what}", f.name)));
            }
            if let Some(i) = f.interface_entry {
                if !program.is_jumpdest(i) {
                    return Err(bad(format!("interface entry 0x{i:x} is not a JUMPDEST")));
                }
            }
        }
        for c in &self.call_sites {
            if !entries.contains(&c.caller) || !entries.contains(&c.callee) {
                return Err(bad(format!("call site 0x{:x} references an unknown function", c.site)));
            }
            if !program.is_instruction_start(c.site) || !program.is_instruction_start(c.return_site) {
                return Err(bad(format!("call site 0x{:x} is out of range", c.site)));
            }
        }
        Ok(())
    }

    /// Writes `<id>.hex` and `<id>.gt.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        let hex_path = dir.join(format!("{}.hex", self.id));
        fs::write(&hex_path, self.hex() + "\n").map_err(io_err(&hex_path))?;
        let gt_path = dir.join(format!("{}.gt.json", self.id));
        let json = serde_json::to_string_pretty(self).expect("ground truth serialises");
        fs::write(&gt_path, json).map_err(io_err(&gt_path))
    }

    /// Parses a label document and its bytecode, then validates them.
    pub fn from_parts(gt_json: &str, hex_text: &str) -> Result<Self, CorpusError> {
        let mut gt: GroundTruthContract =
            serde_json::from_str(gt_json).map_err(|e| CorpusError::Malformed { id: "?".into(), msg: e.to_string() })?;
        gt.code = parse_hex(hex_text).map_err(|e| CorpusError::Malformed { id: gt.id.clone(), msg: e.to_string() })?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn load(dir: &Path, id: &str) -> Result<Self, CorpusError> {
        let gt_path = dir.join(format!("{id}.gt.json"));
        let hex_path = dir.join(format!("{id}.hex"));
        let gt = fs::read_to_string(&gt_path).map_err(io_err(&gt_path))?;
        let hx = fs::read_to_string(&hex_path).map_err(io_err(&hex_path))?;
        let c = Self::from_parts(&gt, &hx)?;
        if c.id != id {
            return Err(CorpusError::Malformed { id: id.into(), msg: format!("file declares id {:?}", c.id) });
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitName>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub contracts: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, CorpusError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| CorpusError::Malformed { id: "manifest".into(), msg: e.to_string() })?;
        if m.schema.split('.').next() != Some(SCHEMA_MAJOR) {
            return Err(CorpusError::Malformed { id: "manifest".into(), msg: format!("unsupported schema {:?}", m.schema) });
        }
        let mut seen = BTreeSet::new();
        for c in &m.contracts {
            if !seen.insert(c.id.as_str()) {
                return Err(CorpusError::DuplicateId(c.id.clone()));
            }
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<(), CorpusError> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serialises")).map_err(io_err(&path))
    }
}

/// Writes contracts plus a manifest; `splits` assigns ids to halves.
pub fn save_corpus(
    dir: &Path,
    contracts: &[GroundTruthContract],
    splits: &BTreeMap<String, SplitName>,
) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    for c in contracts {
        c.save(dir)?;
        entries.push(ManifestEntry { id: c.id.clone(), split: splits.get(&c.id).copied(), provenance: c.provenance.clone() });
    }
    Manifest { schema: SCHEMA_VERSION.into(), contracts: entries }.write(dir)
}

/// Loads every contract listed in the manifest, in manifest order.
pub fn load(dir: &Path) -> Result<(Manifest, Vec<GroundTruthContract>), CorpusError> {
    let m = Manifest::read(dir)?;
    let contracts = m.contracts.iter().map(|e| GroundTruthContract::load(dir, &e.id)).collect::<Result<_, _>>()?;
    Ok((m, contracts))
}

/// Seeded random split into `(train, test)`; `fraction` goes to train.
pub fn split<T: Clone>(items: &[T], id: impl Fn(&T) -> &str, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let mut seen = BTreeSet::new();
    for it in items {
        if !seen.insert(id(it)) {
            return Err(CorpusError::DuplicateId(id(it).to_string()));
        }
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (items.len() as f64 * fraction).round() as usize;
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

/// Partitions `0..n` into `k` disjoint folds of near-equal size.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, CorpusError> {
    if k < 2 || k > n {
        return Err(CorpusError::BadFolds { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, x) in order.into_iter().enumerate() {
        folds[i % k].push(x);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Specs for a corpus of `count` contracts with sizes drawn from `seed`.
pub fn corpus_specs(count: usize, seed: u64, template: &GenSpec) -> Vec<GenSpec> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut s = template.clone();
            s.seed = rng.gen();
            s.n_public = rng.gen_range(1..=6);
            s.n_internal = rng.gen_range(0..=7);
            if s.n_internal < 2 {
                s.share_probability = 0.0;
            }
            s
        })
        .collect()
}
