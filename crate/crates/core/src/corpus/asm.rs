//! Label-aware EVM assembler with explicit push widths.
//!
//! Widths are fixed at emission time, so every label's offset is known the
//! moment it is bound and no relaxation pass is needed. Each emitted
//! instruction can be tagged with the functions that own it, which is how
//! the generator produces exact byte labels.

use std::collections::BTreeMap;

use crate::opcode::Opcode;
use crate::word::Word;
use crate::Offset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(u32);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("label {0} used but never bound")]
    Unbound(String),
    #[error("label {0} bound twice")]
    Rebound(String),
    #[error("value {value} does not fit in PUSH{width}")]
    TooWide { value: String, width: usize },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

#[derive(Debug, Default, Clone)]
pub struct Asm {
    code: Vec<u8>,
    labels: Vec<Option<Offset>>,
    names: Vec<String>,
    fixups: Vec<(usize, usize, Label)>,
    owners: Vec<u32>,
    /// (instruction offset, owning function ids)
    tagged: Vec<(Offset, Vec<u32>)>,
}

impl Asm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn here(&self) -> Offset {
        self.code.len() as Offset
    }

    pub fn label(&mut self, name: impl Into<String>) -> Label {
        self.labels.push(None);
        self.names.push(name.into());
        Label(self.labels.len() as u32 - 1)
    }

    pub fn offset_of(&self, l: Label) -> Option<Offset> {
        self.labels[l.0 as usize]
    }

    /// Instructions emitted from now on are attributed to `owners`.
    pub fn set_owners(&mut self, owners: &[u32]) {
        self.owners = owners.to_vec();
    }

    fn tag(&mut self) {
        let at = self.here();
        self.tagged.push((at, self.owners.clone()));
    }

    /// Binds `l` here and emits the JUMPDEST it names.
    pub fn bind(&mut self, l: Label) -> Result<Offset, AsmError> {
        let at = self.here();
        let slot = &mut self.labels[l.0 as usize];
        if slot.is_some() {
            return Err(AsmError::Rebound(self.names[l.0 as usize].clone()));
        }
        *slot = Some(at);
        self.op(Opcode::JUMPDEST);
        Ok(at)
    }

    pub fn op(&mut self, op: Opcode) -> &mut Self {
        self.tag();
        self.code.push(op.0);
        self
    }

    pub fn ops(&mut self, ops: &[Opcode]) -> &mut Self {
        for &o in ops {
            self.op(o);
        }
        self
    }

    pub fn push_word(&mut self, width: usize, value: Word) -> Result<&mut Self, AsmError> {
        assert!((1..=32).contains(&width), "push width {width}");
        if value.byte_len() > width {
            return Err(AsmError::TooWide { value: value.to_string(), width });
        }
        self.tag();
        self.code.push(0x5f + width as u8);
        self.code.extend_from_slice(&value.to_be_bytes()[32 - width..]);
        Ok(self)
    }

    /// PUSHn with a small constant; panics if it does not fit, which is a
    /// generator bug rather than an input error.
    pub fn push(&mut self, width: usize, value: u64) -> &mut Self {
        self.push_word(width, Word::from_u64(value)).expect("constant fits push width")
    }

    pub fn push_label(&mut self, width: usize, l: Label) -> &mut Self {
        self.tag();
        self.code.push(0x5f + width as u8);
        self.fixups.push((self.code.len(), width, l));
        self.code.extend(std::iter::repeat_n(0, width));
        self
    }

    /// Appends bytes that belong to no function and are never executed.
    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.code.extend_from_slice(bytes);
        self
    }

    pub fn finish(self) -> Result<Assembled, AsmError> {
        let mut code = self.code;
        for (at, width, l) in self.fixups {
            let target = self.labels[l.0 as usize].ok_or_else(|| AsmError::Unbound(self.names[l.0 as usize].clone()))?;
            let w = Word::from_u64(target as u64);
            if w.byte_len() > width {
                return Err(AsmError::TooWide { value: w.to_string(), width });
            }
            code[at..at + width].copy_from_slice(&w.to_be_bytes()[32 - width..]);
        }
        let labels = self.names.into_iter().zip(self.labels).filter_map(|(n, o)| Some((n, o?))).collect();
        Ok(Assembled { code, labels, owners: self.tagged })
    }
}

#[derive(Debug, Clone)]
pub struct Assembled {
    pub code: Vec<u8>,
    pub labels: BTreeMap<String, Offset>,
    pub owners: Vec<(Offset, Vec<u32>)>,
}

impl Assembled {
    pub fn hex(&self) -> String {
        hex::encode(&self.code)
    }

    pub fn at(&self, name: &str) -> Offset {
        self.labels[name]
    }
}

/// Assembles whitespace-separated text. `name:` binds a label (emitting a
/// JUMPDEST), `PUSHn @name` pushes a label, `PUSHn 0x..` a constant, and
/// `;` starts a comment. Two directives take the rest of their line:
/// `.owners 0 2` attributes what follows to functions 0 and 2 (no ids:
/// nobody), and `.org 0x40` pads with unowned INVALID bytes up to 0x40.
pub fn assemble(text: &str) -> Result<Assembled, AsmError> {
    let mut a = Asm::new();
    let mut by_name: BTreeMap<String, Label> = BTreeMap::new();
    let mut label = |a: &mut Asm, n: &str| *by_name.entry(n.to_string()).or_insert_with(|| a.label(n));
    for (ln, line) in text.lines().enumerate() {
        let line = line.split(';').next().unwrap_or("");
        let mut toks = line.split_whitespace();
        let err = |msg: String| AsmError::Syntax { line: ln + 1, msg };
        while let Some(tok) = toks.next() {
            if tok == ".owners" {
                let ids = toks.by_ref().map(|t| t.parse::<u32>()).collect::<Result<Vec<_>, _>>();
                a.set_owners(&ids.map_err(|_| err("owner ids must be integers".into()))?);
                continue;
            }
            if tok == ".org" {
                let at = toks
                    .next()
                    .and_then(|t| t.strip_prefix("0x"))
                    .and_then(|h| u32::from_str_radix(h, 16).ok())
                    .ok_or_else(|| err(".org needs a 0x offset".into()))?;
                if at < a.here() || at > 0x6000 {
                    return Err(err(format!(".org 0x{at:x} is behind 0x{:x} or too far", a.here())));
                }
                let pad = vec![Opcode::INVALID.0; (at - a.here()) as usize];
                a.raw(&pad);
                continue;
            }
            if let Some(name) = tok.strip_suffix(':') {
                if name.is_empty() {
                    return Err(err("empty label".into()));
                }
                let l = label(&mut a, name);
                a.bind(l)?;
                continue;
            }
            let op = Opcode::from_mnemonic(tok).ok_or_else(|| err(format!("unknown mnemonic {tok:?}")))?;
            if !op.is_push() {
                a.op(op);
                continue;
            }
            let width = op.push_width();
            let arg = toks.next().ok_or_else(|| err(format!("{tok} needs an operand")))?;
            if let Some(name) = arg.strip_prefix('@') {
                let l = label(&mut a, name);
                a.push_label(width, l);
            } else {
                let h = arg.strip_prefix("0x").ok_or_else(|| err(format!("operand {arg:?} must be 0x-prefixed")))?;
                if h.is_empty() || h.len() > 64 || !h.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(err(format!("bad operand {arg:?}")));
                }
                let padded = if h.len() % 2 == 1 { format!("0{h}") } else { h.to_string() };
                let bytes = hex::decode(padded).expect("validated");
                a.push_word(width, Word::from_be_slice(&bytes))?;
            }
        }
    }
    a.finish()
}
