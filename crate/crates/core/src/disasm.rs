//! Hex decoding and linear-sweep disassembly.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::opcode::Opcode;
use crate::word::Word;
use crate::Offset;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DisasmError {
    #[error("malformed hex: odd number of digits ({0})")]
    OddLength(usize),
    #[error("malformed hex: invalid character {ch:?} at position {position}")]
    InvalidChar { ch: char, position: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub offset: Offset,
    pub opcode: Opcode,
    /// Operand of PUSH1..PUSH32.
    pub push: Option<Word>,
    /// Encoded bytes actually consumed from the code.
    pub width: u8,
    /// The operand ran past the end of code and was zero-padded.
    pub truncated: bool,
}

impl Instruction {
    pub fn next_offset(&self) -> Offset {
        self.offset + self.width as Offset
    }
}

/// Decoded runtime bytecode.
#[derive(Debug, Clone)]
pub struct Program {
    code: Vec<u8>,
    instructions: Vec<Instruction>,
    jumpdests: BTreeSet<Offset>,
    /// code offset -> instruction index, for instruction-start offsets only.
    index: Vec<Option<u32>>,
}

/// Parses hex text, accepting an optional `0x` prefix and surrounding whitespace.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, DisasmError> {
    let t = text.trim();
    let t = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
    let prefix = text.len() - text.trim_start().len() + (text.trim().len() - t.len());
    if let Some((i, ch)) = t.char_indices().find(|(_, c)| !c.is_ascii_hexdigit()) {
        return Err(DisasmError::InvalidChar { ch, position: prefix + i });
    }
    if !t.len().is_multiple_of(2) {
        return Err(DisasmError::OddLength(t.len()));
    }
    Ok(hex::decode(t).expect("validated hex"))
}

pub fn decode(hex_text: &str) -> Result<Program, DisasmError> {
    Ok(Program::from_bytes(parse_hex(hex_text)?))
}

impl Program {
    pub fn from_bytes(code: Vec<u8>) -> Self {
        let mut instructions = Vec::new();
        let mut jumpdests = BTreeSet::new();
        let mut index = vec![None; code.len()];
        let mut pc = 0usize;
        while pc < code.len() {
            let opcode = Opcode(code[pc]);
            let want = opcode.push_width();
            let avail = want.min(code.len() - pc - 1);
            let push = opcode.is_push().then(|| {
                let mut buf = [0u8; 32];
                buf[..avail].copy_from_slice(&code[pc + 1..pc + 1 + avail]);
                Word::from_be_slice(&buf[..want])
            });
            if opcode == Opcode::JUMPDEST {
                jumpdests.insert(pc as Offset);
            }
            index[pc] = Some(instructions.len() as u32);
            instructions.push(Instruction {
                offset: pc as Offset,
                opcode,
                push,
                width: (1 + avail) as u8,
                truncated: avail < want,
            });
            pc += 1 + avail;
        }
        Program { code, instructions, jumpdests, index }
    }

    pub fn code(&self) -> &[u8] {
        &self.code
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn jumpdests(&self) -> &BTreeSet<Offset> {
        &self.jumpdests
    }

    pub fn is_jumpdest(&self, offset: Offset) -> bool {
        self.jumpdests.contains(&offset)
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    /// Index of the instruction starting at `offset`.
    pub fn index_of(&self, offset: Offset) -> Option<usize> {
        self.index.get(offset as usize).copied().flatten().map(|i| i as usize)
    }

    pub fn at(&self, offset: Offset) -> Option<&Instruction> {
        self.index_of(offset).map(|i| &self.instructions[i])
    }

    /// Whether `offset` is the start of a decoded instruction.
    pub fn is_instruction_start(&self, offset: Offset) -> bool {
        self.index_of(offset).is_some()
    }

    /// Re-encodes the instruction stream.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.code.len());
        for ins in &self.instructions {
            out.push(ins.opcode.0);
            if let Some(w) = ins.push {
                let bytes = w.to_be_bytes();
                let width = ins.opcode.push_width();
                let present = ins.width as usize - 1;
                out.extend_from_slice(&bytes[32 - width..32 - width + present]);
            }
        }
        out
    }

    /// One instruction per line: offset, mnemonic, operand.
    pub fn listing(&self) -> String {
        let mut s = String::new();
        for ins in &self.instructions {
            let _ = write!(s, "0x{:04x}  {:?}", ins.offset, ins.opcode);
            if let Some(w) = ins.push {
                let _ = write!(s, " 0x{}", hex::encode(&w.to_be_bytes()[32 - ins.opcode.push_width()..]));
                if ins.truncated {
                    s.push_str(" (truncated)");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_listing_json(&self) -> Vec<InstructionJson> {
        self.instructions
            .iter()
            .map(|ins| InstructionJson {
                offset: ins.offset,
                mnemonic: format!("{:?}", ins.opcode),
                operand: ins.push.map(|w| w.to_string()),
                width: ins.width,
                truncated: ins.truncated,
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
pub struct InstructionJson {
    pub offset: Offset,
    pub mnemonic: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operand: Option<String>,
    pub width: u8,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}
