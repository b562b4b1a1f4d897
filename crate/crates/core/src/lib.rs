//! Function entry and boundary identification for stripped EVM bytecode.
//!
//! The pipeline decodes runtime bytecode ([`disasm`]), partitions it into
//! blocks ([`segment`]), recovers public functions from the selector
//! dispatcher ([`dispatcher`]), scores internal-entry candidates with a
//! two-level bi-LSTM + CRF labeler ([`model`]), and attributes bytes to
//! functions with a context-sensitive symbolic traversal ([`boundary`]).
//! [`graphs`] derives per-function CFGs and the call graph, [`corpus`]
//! generates labeled contracts, and [`metrics`] scores results.

pub mod boundary;
pub mod config;
pub mod corpus;
pub mod disasm;
pub mod dispatcher;
pub mod graphs;
pub mod metrics;
pub mod model;
pub mod opcode;
pub mod pipeline;
pub mod segment;
pub mod symbolic;
pub mod word;

/// Byte offset into runtime code.
pub type Offset = u32;

pub use disasm::{decode, Instruction, Program};
pub use opcode::Opcode;
pub use word::Word;
