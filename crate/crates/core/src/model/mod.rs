//! Internal-entry labeler: token-level bi-LSTM, block-level bi-LSTM and a
//! two-label CRF over reachable blocks, plus the heuristic baseline.

pub mod baseline;
pub mod crf;
pub mod io;
pub mod lstm;
pub mod net;
pub mod token;
pub mod train;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::corpus::GroundTruthContract;
use crate::disasm::Program;
use crate::Offset;
pub use baseline::baseline_entries;
pub use net::{Dims, FsiParams};
pub use token::{Encoded, Vocab};
pub use train::{train, LabeledSequence, TrainConfig, TrainError, TrainHistory};

/// Default token budget per window.
pub const TOKEN_CAP: usize = 50_000;

/// Trained parameters together with the vocabulary they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct FsiModel {
    pub params: FsiParams,
    pub vocab: Vocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntryPrediction {
    pub entry: Offset,
    /// Posterior probability that the block starts a function.
    pub p: f64,
    pub viterbi: u8,
}

impl FsiModel {
    /// Scores every reachable block. Long programs are processed in
    /// overlapping windows; overlapping marginals are averaged and the
    /// Viterbi label comes from the first window covering the block.
    pub fn score(&self, program: &Program, token_cap: usize) -> Vec<EntryPrediction> {
        let enc = Encoded::new(&self.vocab, program);
        let n = enc.len();
        let mut sum = vec![0.0; n];
        let mut count = vec![0u32; n];
        let mut label: Vec<Option<u8>> = vec![None; n];
        let trans = self.params.transitions();
        for w in enc.windows(token_cap) {
            let sub = enc.slice(w.clone());
            let em = net::emissions(&self.params, &sub).expect("windows are nonempty");
            let m = crf::marginals(&em, &trans);
            let v = crf::viterbi(&em, &trans);
            for (k, i) in w.enumerate() {
                sum[i] += m[k];
                count[i] += 1;
                label[i].get_or_insert(v[k]);
            }
        }
        (0..n)
            .map(|i| EntryPrediction { entry: enc.entries[i], p: sum[i] / count[i] as f64, viterbi: label[i].unwrap_or(0) })
            .collect()
    }

    /// Block probabilities for every legal candidate: JUMPDEST blocks other
    /// than offset 0 and the excluded (interface) entries.
    pub fn probabilities(&self, program: &Program, exclude: &BTreeSet<Offset>) -> BTreeMap<Offset, f64> {
        self.score(program, TOKEN_CAP)
            .into_iter()
            .filter(|s| s.entry != 0 && program.is_jumpdest(s.entry) && !exclude.contains(&s.entry))
            .map(|s| (s.entry, s.p))
            .collect()
    }

    /// Candidates with probability at least `rho`.
    pub fn predict(&self, program: &Program, rho: f64, exclude: &BTreeSet<Offset>) -> BTreeMap<Offset, f64> {
        threshold(&self.probabilities(program, exclude), rho)
    }
}

pub fn threshold(probs: &BTreeMap<Offset, f64>, rho: f64) -> BTreeMap<Offset, f64> {
    probs.iter().filter(|(_, &p)| p >= rho).map(|(&o, &p)| (o, p)).collect()
}

/// Training labels: 1 on internal entries and public body entries, 0
/// elsewhere (including block 0).
pub fn labels_for(enc: &Encoded, gt: &GroundTruthContract) -> Vec<u8> {
    let pos = gt.labeled_entries();
    enc.entries.iter().map(|e| (*e != 0 && pos.contains(e)) as u8).collect()
}

pub fn labeled_sequence(vocab: &Vocab, gt: &GroundTruthContract) -> LabeledSequence {
    let enc = Encoded::new(vocab, &gt.program());
    let labels = labels_for(&enc, gt);
    LabeledSequence { enc, labels }
}
