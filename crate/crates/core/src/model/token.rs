//! Symbolic instruction tokens and the closed vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use sha2::{Digest, Sha256};

use crate::disasm::{Instruction, Program};
use crate::segment::reachable_blocks;
use crate::Offset;

pub const UNK: &str = "<unk>";

/// Mnemonic, except that a push whose operand is a jump destination becomes
/// `PUSHk_DEST`. Other operands are dropped.
pub fn token(program: &Program, ins: &Instruction) -> String {
    let name = ins.opcode.mnemonic();
    match ins.push.and_then(|w| w.as_offset()) {
        Some(o) if program.is_jumpdest(o) => format!("{name}_DEST"),
        _ => name.to_string(),
    }
}

/// Tokens grouped by reachable block.
pub fn preprocess(program: &Program) -> Vec<(Offset, Vec<String>)> {
    reachable_blocks(program)
        .into_iter()
        .map(|b| (b.entry, program.instructions()[b.range].iter().map(|i| token(program, i)).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("vocabulary must start with {UNK}")]
    MissingUnk,
    #[error("duplicate vocabulary token {0:?}")]
    Duplicate(String),
}

impl Vocab {
    /// Sorted token set of the training programs, with UNK at index 0.
    pub fn build<'a>(programs: impl IntoIterator<Item = &'a Program>) -> Self {
        let mut set = BTreeSet::new();
        for p in programs {
            for ins in p.instructions() {
                set.insert(token(p, ins));
            }
        }
        set.remove(UNK);
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(set);
        Self::from_tokens(tokens).expect("sorted unique tokens")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(VocabError::MissingUnk);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, tok: &str) -> u32 {
        self.index.get(tok).copied().unwrap_or(0)
    }

    /// SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }
}

/// Model input for one contract: token ids plus each block's token range.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub blocks: Vec<Range<usize>>,
    pub entries: Vec<Offset>,
}

impl Encoded {
    pub fn new(vocab: &Vocab, program: &Program) -> Self {
        let mut ids = Vec::with_capacity(program.instructions().len());
        let mut blocks = Vec::new();
        let mut entries = Vec::new();
        for (entry, toks) in preprocess(program) {
            let start = ids.len();
            ids.extend(toks.iter().map(|t| vocab.id(t)));
            blocks.push(start..ids.len());
            entries.push(entry);
        }
        Encoded { ids, blocks, entries }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Blocks `range` re-based to start at token 0.
    pub fn slice(&self, range: Range<usize>) -> Encoded {
        let base = self.blocks[range.start].start;
        let end = self.blocks[range.end - 1].end;
        Encoded {
            ids: self.ids[base..end].to_vec(),
            blocks: self.blocks[range.clone()].iter().map(|r| r.start - base..r.end - base).collect(),
            entries: self.entries[range].to_vec(),
        }
    }

    /// Consecutive block windows of at most `cap` tokens, overlapping by
    /// one block. A single block longer than `cap` gets its own window.
    pub fn windows(&self, cap: usize) -> Vec<Range<usize>> {
        let n = self.blocks.len();
        if n == 0 {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            let base = self.blocks[start].start;
            let mut end = start + 1;
            while end < n && self.blocks[end].end - base <= cap {
                end += 1;
            }
            out.push(start..end);
            if end == n {
                return out;
            }
            start = if end - start > 1 { end - 1 } else { end };
        }
    }

    /// The longest prefix of whole blocks within `cap` tokens (at least one block).
    pub fn truncated(&self, cap: usize) -> Encoded {
        match self.windows(cap).first() {
            Some(r) if r.end < self.blocks.len() => self.slice(r.clone()),
            _ => self.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disasm::decode;

    #[test]
    fn dest_marker_only_for_jumpdests() {
        // PUSH1 0x60 PUSH1 0x05 JUMP JUMPDEST STOP
        let p = decode("6060600556 5b00".replace(' ', "").as_str()).unwrap();
        let toks: Vec<String> = p.instructions().iter().map(|i| token(&p, i)).collect();
        assert_eq!(toks, vec!["PUSH1", "PUSH1_DEST", "JUMP", "JUMPDEST", "STOP"]);
        let blocks = preprocess(&p);
        assert_eq!(blocks.iter().map(|b| b.1.len()).sum::<usize>(), p.instructions().len());
    }

    #[test]
    fn vocab_unk_and_hash() {
        let p = decode("600156").unwrap();
        let v = Vocab::build([&p]);
        assert_eq!(v.tokens()[0], UNK);
        assert_eq!(v.id("JUMP"), v.tokens().iter().position(|t| t == "JUMP").unwrap() as u32);
        assert_eq!(v.id("SSTORE"), 0);
        let w = Vocab::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(v.hash(), w.hash());
        assert!(Vocab::from_tokens(vec!["JUMP".into()]).is_err());
        assert!(Vocab::from_tokens(vec![UNK.into(), "A".into(), "A".into()]).is_err());
    }

    #[test]
    fn windows_overlap_by_one_block() {
        let e = Encoded { ids: vec![0; 10], blocks: vec![0..3, 3..6, 6..8, 8..10], entries: vec![0, 3, 6, 8] };
        assert_eq!(e.windows(100), vec![0..4]);
        assert_eq!(e.windows(6), vec![0..2, 1..3, 2..4]);
        // a block longer than the cap still gets a window
        assert_eq!(e.windows(2), vec![0..1, 1..2, 2..3, 3..4]);
        let t = e.truncated(6);
        assert_eq!(t.blocks, vec![0..3, 3..6]);
        assert_eq!(e.slice(1..3).blocks, vec![0..3, 3..5]);
    }
}
