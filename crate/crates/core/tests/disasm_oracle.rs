//! Disassembly agrees with revm's opcode table and re-encodes exactly.

mod oracles;

use evmfunc::corpus::{generate, GenSpec, OptimizeStyle};
use evmfunc::Program;
use oracles::{agrees_with_revm, random_code};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_bytes_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xd15a);
    for i in 0..500 {
        let code = random_code(&mut rng, 300);
        agrees_with_revm(&code).unwrap_or_else(|e| panic!("case {i} {}: {e}", hex::encode(&code)));
        assert_eq!(Program::from_bytes(code.clone()).encode(), code);
    }
}

#[test]
fn every_single_byte_and_push_tail() {
    for b in 0..=255u8 {
        if oracles::REVM_ONLY.contains(&b) {
            continue;
        }
        for tail in 0..3 {
            let mut code = vec![b];
            code.extend(std::iter::repeat_n(0xaa, tail));
            agrees_with_revm(&code).unwrap();
        }
    }
}

#[test]
fn generated_contracts_round_trip() {
    for seed in 0..60 {
        let style = if seed % 2 == 0 { OptimizeStyle::Plain } else { OptimizeStyle::Dedup };
        let gt = generate(&GenSpec { seed, optimize_style: style, share_probability: 0.3, ..Default::default() }).unwrap();
        let p = gt.program();
        assert_eq!(p.encode(), gt.code);
        // the metadata trailer may hold bytes revm decodes with immediates
        if p.instructions().iter().all(|i| !oracles::REVM_ONLY.contains(&i.opcode.0)) {
            agrees_with_revm(&gt.code).unwrap();
        }
    }
}
