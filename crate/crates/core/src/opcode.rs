//! EVM opcode table (legacy bytecode, Cancun instruction set).
//!
//! Stack arities are the δ/α columns of the EVM specification. Bytes that are
//! not assigned an instruction decode as `INVALID`.

use std::fmt;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Opcode(pub u8);

struct Info {
    name: &'static str,
    pops: u8,
    pushes: u8,
}

const fn op(name: &'static str, pops: u8, pushes: u8) -> Option<Info> {
    Some(Info { name, pops, pushes })
}

static TABLE: [Option<Info>; 256] = build_table();

const fn build_table() -> [Option<Info>; 256] {
    let mut t: [Option<Info>; 256] = [const { None }; 256];
    t[0x00] = op("STOP", 0, 0);
    t[0x01] = op("ADD", 2, 1);
    t[0x02] = op("MUL", 2, 1);
    t[0x03] = op("SUB", 2, 1);
    t[0x04] = op("DIV", 2, 1);
    t[0x05] = op("SDIV", 2, 1);
    t[0x06] = op("MOD", 2, 1);
    t[0x07] = op("SMOD", 2, 1);
    t[0x08] = op("ADDMOD", 3, 1);
    t[0x09] = op("MULMOD", 3, 1);
    t[0x0a] = op("EXP", 2, 1);
    t[0x0b] = op("SIGNEXTEND", 2, 1);
    t[0x10] = op("LT", 2, 1);
    t[0x11] = op("GT", 2, 1);
    t[0x12] = op("SLT", 2, 1);
    t[0x13] = op("SGT", 2, 1);
    t[0x14] = op("EQ", 2, 1);
    t[0x15] = op("ISZERO", 1, 1);
    t[0x16] = op("AND", 2, 1);
    t[0x17] = op("OR", 2, 1);
    t[0x18] = op("XOR", 2, 1);
    t[0x19] = op("NOT", 1, 1);
    t[0x1a] = op("BYTE", 2, 1);
    t[0x1b] = op("SHL", 2, 1);
    t[0x1c] = op("SHR", 2, 1);
    t[0x1d] = op("SAR", 2, 1);
    t[0x20] = op("KECCAK256", 2, 1);
    t[0x30] = op("ADDRESS", 0, 1);
    t[0x31] = op("BALANCE", 1, 1);
    t[0x32] = op("ORIGIN", 0, 1);
    t[0x33] = op("CALLER", 0, 1);
    t[0x34] = op("CALLVALUE", 0, 1);
    t[0x35] = op("CALLDATALOAD", 1, 1);
    t[0x36] = op("CALLDATASIZE", 0, 1);
    t[0x37] = op("CALLDATACOPY", 3, 0);
    t[0x38] = op("CODESIZE", 0, 1);
    t[0x39] = op("CODECOPY", 3, 0);
    t[0x3a] = op("GASPRICE", 0, 1);
    t[0x3b] = op("EXTCODESIZE", 1, 1);
    t[0x3c] = op("EXTCODECOPY", 4, 0);
    t[0x3d] = op("RETURNDATASIZE", 0, 1);
    t[0x3e] = op("RETURNDATACOPY", 3, 0);
    t[0x3f] = op("EXTCODEHASH", 1, 1);
    t[0x40] = op("BLOCKHASH", 1, 1);
    t[0x41] = op("COINBASE", 0, 1);
    t[0x42] = op("TIMESTAMP", 0, 1);
    t[0x43] = op("NUMBER", 0, 1);
    t[0x44] = op("DIFFICULTY", 0, 1);
    t[0x45] = op("GASLIMIT", 0, 1);
    t[0x46] = op("CHAINID", 0, 1);
    t[0x47] = op("SELFBALANCE", 0, 1);
    t[0x48] = op("BASEFEE", 0, 1);
    t[0x49] = op("BLOBHASH", 1, 1);
    t[0x4a] = op("BLOBBASEFEE", 0, 1);
    t[0x50] = op("POP", 1, 0);
    t[0x51] = op("MLOAD", 1, 1);
    t[0x52] = op("MSTORE", 2, 0);
    t[0x53] = op("MSTORE8", 2, 0);
    t[0x54] = op("SLOAD", 1, 1);
    t[0x55] = op("SSTORE", 2, 0);
    t[0x56] = op("JUMP", 1, 0);
    t[0x57] = op("JUMPI", 2, 0);
    t[0x58] = op("PC", 0, 1);
    t[0x59] = op("MSIZE", 0, 1);
    t[0x5a] = op("GAS", 0, 1);
    t[0x5b] = op("JUMPDEST", 0, 0);
    t[0x5c] = op("TLOAD", 1, 1);
    t[0x5d] = op("TSTORE", 2, 0);
    t[0x5e] = op("MCOPY", 3, 0);
    t[0x5f] = op("PUSH0", 0, 1);
    t[0xa0] = op("LOG0", 2, 0);
    t[0xa1] = op("LOG1", 3, 0);
    t[0xa2] = op("LOG2", 4, 0);
    t[0xa3] = op("LOG3", 5, 0);
    t[0xa4] = op("LOG4", 6, 0);
    t[0xf0] = op("CREATE", 3, 1);
    t[0xf1] = op("CALL", 7, 1);
    t[0xf2] = op("CALLCODE", 7, 1);
    t[0xf3] = op("RETURN", 2, 0);
    t[0xf4] = op("DELEGATECALL", 6, 1);
    t[0xf5] = op("CREATE2", 4, 1);
    t[0xfa] = op("STATICCALL", 6, 1);
    t[0xfd] = op("REVERT", 2, 0);
    t[0xfe] = op("INVALID", 0, 0);
    t[0xff] = op("SELFDESTRUCT", 1, 0);

    const PUSH: [&str; 32] = [
        "PUSH1", "PUSH2", "PUSH3", "PUSH4", "PUSH5", "PUSH6", "PUSH7", "PUSH8", "PUSH9", "PUSH10", "PUSH11", "PUSH12", "PUSH13",
        "PUSH14", "PUSH15", "PUSH16", "PUSH17", "PUSH18", "PUSH19", "PUSH20", "PUSH21", "PUSH22", "PUSH23", "PUSH24", "PUSH25",
        "PUSH26", "PUSH27", "PUSH28", "PUSH29", "PUSH30", "PUSH31", "PUSH32",
    ];
    const DUP: [&str; 16] = [
        "DUP1", "DUP2", "DUP3", "DUP4", "DUP5", "DUP6", "DUP7", "DUP8", "DUP9", "DUP10", "DUP11", "DUP12", "DUP13", "DUP14",
        "DUP15", "DUP16",
    ];
    const SWAP: [&str; 16] = [
        "SWAP1", "SWAP2", "SWAP3", "SWAP4", "SWAP5", "SWAP6", "SWAP7", "SWAP8", "SWAP9", "SWAP10", "SWAP11", "SWAP12", "SWAP13",
        "SWAP14", "SWAP15", "SWAP16",
    ];
    let mut i = 0;
    while i < 32 {
        t[0x60 + i] = op(PUSH[i], 0, 1);
        i += 1;
    }
    let mut i = 0;
    while i < 16 {
        let n = i as u8 + 1;
        t[0x80 + i] = op(DUP[i], n, n + 1);
        t[0x90 + i] = op(SWAP[i], n + 1, n + 1);
        i += 1;
    }
    t
}

impl Opcode {
    pub const STOP: Opcode = Opcode(0x00);
    pub const AND: Opcode = Opcode(0x16);
    pub const POP: Opcode = Opcode(0x50);
    pub const JUMP: Opcode = Opcode(0x56);
    pub const JUMPI: Opcode = Opcode(0x57);
    pub const JUMPDEST: Opcode = Opcode(0x5b);
    pub const PUSH0: Opcode = Opcode(0x5f);
    pub const PUSH1: Opcode = Opcode(0x60);
    pub const PUSH2: Opcode = Opcode(0x61);
    pub const PUSH4: Opcode = Opcode(0x63);
    pub const RETURN: Opcode = Opcode(0xf3);
    pub const REVERT: Opcode = Opcode(0xfd);
    pub const INVALID: Opcode = Opcode(0xfe);
    pub const SELFDESTRUCT: Opcode = Opcode(0xff);

    /// Whether the byte is an assigned instruction (the designated `0xfe`
    /// INVALID counts as assigned).
    pub fn is_defined(self) -> bool {
        TABLE[self.0 as usize].is_some()
    }

    pub fn mnemonic(self) -> &'static str {
        TABLE[self.0 as usize].as_ref().map_or("INVALID", |i| i.name)
    }

    /// Looks up an opcode by mnemonic (case-insensitive).
    pub fn from_mnemonic(name: &str) -> Option<Opcode> {
        (0..=255u8).map(Opcode).find(|o| o.is_defined() && o.mnemonic().eq_ignore_ascii_case(name))
    }

    /// Number of immediate operand bytes (1..=32 for PUSH1..PUSH32).
    pub fn push_width(self) -> usize {
        match self.0 {
            0x60..=0x7f => (self.0 - 0x5f) as usize,
            _ => 0,
        }
    }

    /// PUSH1..PUSH32; PUSH0 has no operand and is not included.
    pub fn is_push(self) -> bool {
        (0x60..=0x7f).contains(&self.0)
    }

    /// `n` for DUPn.
    pub fn dup_depth(self) -> Option<usize> {
        (0x80..=0x8f).contains(&self.0).then(|| (self.0 - 0x7f) as usize)
    }

    /// `n` for SWAPn.
    pub fn swap_depth(self) -> Option<usize> {
        (0x90..=0x9f).contains(&self.0).then(|| (self.0 - 0x8f) as usize)
    }

    pub fn is_jump(self) -> bool {
        self == Opcode::JUMP || self == Opcode::JUMPI
    }

    /// Instructions after which execution cannot continue. Unassigned bytes
    /// behave like INVALID.
    pub fn is_halting(self) -> bool {
        matches!(self.0, 0x00 | 0xf3 | 0xfd | 0xfe | 0xff) || !self.is_defined()
    }

    /// Terminates a basic block: jumps and halts.
    pub fn alters_control(self) -> bool {
        self.is_jump() || self.is_halting()
    }

    /// Stack effect `(pops, pushes)`. Unassigned bytes report `(0, 0)`.
    pub fn stack_arity(self) -> (usize, usize) {
        TABLE[self.0 as usize].as_ref().map_or((0, 0), |i| (i.pops as usize, i.pushes as usize))
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

impl fmt::Debug for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_defined() {
            f.write_str(self.mnemonic())
        } else {
            write!(f, "INVALID(0x{:02x})", self.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arity_constants() {
        assert_eq!(Opcode(0x01).stack_arity(), (2, 1));
        assert_eq!(Opcode(0x82).stack_arity(), (3, 4));
        assert_eq!(Opcode(0x90).stack_arity(), (2, 2));
        assert_eq!(Opcode(0x0c).stack_arity(), (0, 0));
        assert_eq!(Opcode::INVALID.stack_arity(), (0, 0));
    }

    #[test]
    fn families() {
        assert_eq!(Opcode(0x7f).push_width(), 32);
        assert_eq!(Opcode::PUSH0.push_width(), 0);
        assert_eq!(Opcode(0x8f).dup_depth(), Some(16));
        assert_eq!(Opcode(0x9f).swap_depth(), Some(16));
        assert!(Opcode(0x0c).is_halting());
        assert!(!Opcode::JUMPDEST.alters_control());
        assert_eq!(Opcode::from_mnemonic("swap1"), Some(Opcode(0x90)));
    }

    #[test]
    fn counts_defined() {
        let n = (0..=255u8).filter(|&b| Opcode(b).is_defined()).count();
        assert_eq!(n, 149);
    }
}
