//! Binary model container.
//!
//! ```text
//! magic    8 bytes  "EVMFSI\0\0"
//! version  u32
//! dims     4 x u32  vocab, embed, hidden1, hidden2
//! vocab    u32 count, then (u32 len, utf-8 bytes) per token
//! hash     32 bytes SHA-256 of the vocabulary
//! tensors  u32 count, then (u32 name len, name, u32 rows, u32 cols, f64 data)
//! ```
//!
//! Integers and floats are little-endian. Trailing bytes are an error.

use std::path::Path;

use super::net::{layout, Dims, FsiParams, Tensor};
use super::token::{Vocab, VocabError};
use super::FsiModel;

pub const MAGIC: &[u8; 8] = b"EVMFSI\0\0";
pub const VERSION: u32 = 1;

/// Upper bound on any single length field, to keep hostile files from
/// triggering huge allocations.
const MAX_LEN: usize = 1 << 28;

#[derive(Debug, thiserror::Error)]
pub enum ModelFileError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("file ends early")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("vocabulary hash mismatch")]
    VocabHash,
    #[error("vocabulary: {0}")]
    Vocab(#[from] VocabError),
    #[error("vocabulary token is not utf-8")]
    Utf8,
    #[error("tensor layout mismatch: {0}")]
    Layout(String),
    #[error("non-finite weight in {0}")]
    NonFinite(String),
}

pub fn to_bytes(model: &FsiModel) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let d = model.params.dims;
    for v in [d.vocab, d.embed, d.hidden1, d.hidden2] {
        u32le(&mut out, v);
    }
    u32le(&mut out, model.vocab.len());
    for t in model.vocab.tokens() {
        u32le(&mut out, t.len());
        out.extend_from_slice(t.as_bytes());
    }
    out.extend_from_slice(&model.vocab.hash());
    u32le(&mut out, model.params.tensors.len());
    for t in &model.params.tensors {
        u32le(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        u32le(&mut out, t.rows);
        u32le(&mut out, t.cols);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        if self.buf.len() < n {
            return Err(ModelFileError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, ModelFileError> {
        let n = self.u32()? as usize;
        if n > MAX_LEN {
            return Err(ModelFileError::Truncated);
        }
        Ok(n)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<FsiModel, ModelFileError> {
    let mut r = Reader { buf: bytes };
    if r.take(8).map_err(|_| ModelFileError::BadMagic)? != MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelFileError::Version { found: version });
    }
    let dims = Dims { vocab: r.len()?, embed: r.len()?, hidden1: r.len()?, hidden2: r.len()? };
    let n_tokens = r.len()?;
    if n_tokens != dims.vocab {
        return Err(ModelFileError::Layout(format!("{n_tokens} tokens but vocab dim {}", dims.vocab)));
    }
    let mut tokens = Vec::with_capacity(n_tokens.min(4096));
    for _ in 0..n_tokens {
        let n = r.len()?;
        let s = std::str::from_utf8(r.take(n)?).map_err(|_| ModelFileError::Utf8)?;
        tokens.push(s.to_string());
    }
    let vocab = Vocab::from_tokens(tokens)?;
    if r.take(32)? != vocab.hash() {
        return Err(ModelFileError::VocabHash);
    }
    let expected = layout(&dims);
    let n_tensors = r.len()?;
    if n_tensors != expected.len() {
        return Err(ModelFileError::Layout(format!("{n_tensors} tensors, expected {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for &(name, rows, cols) in &expected {
        let n = r.len()?;
        let got = r.take(n)?;
        let (fr, fc) = (r.len()?, r.len()?);
        if got != name.as_bytes() || fr != rows || fc != cols {
            return Err(ModelFileError::Layout(format!(
                "expected {name} {rows}x{cols}, found {} {fr}x{fc}",
                String::from_utf8_lossy(got)
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelFileError::NonFinite(name.to_string()));
        }
        tensors.push(Tensor { name, rows, cols, data });
    }
    if !r.buf.is_empty() {
        return Err(ModelFileError::Trailing(r.buf.len()));
    }
    Ok(FsiModel { params: FsiParams { dims, tensors }, vocab })
}

pub fn save(model: &FsiModel, path: &Path) -> Result<(), ModelFileError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FsiModel, ModelFileError> {
    from_bytes(&std::fs::read(path)?)
}
