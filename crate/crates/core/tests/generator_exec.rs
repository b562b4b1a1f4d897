//! Generated contracts run their happy path on revm without faulting.

use evmfunc::corpus::{generate, GenSpec, OptimizeStyle, Visibility};
use revm::context::result::ExecutionResult;
use revm::context::TxEnv;
use revm::database::{BenchmarkDB, BENCH_CALLER, BENCH_TARGET};
use revm::primitives::{Bytes, TxKind};
use revm::state::Bytecode;
use revm::{Context, ExecuteEvm, MainBuilder, MainContext};

fn call(code: &[u8], calldata: Vec<u8>) -> ExecutionResult {
    let bytecode = Bytecode::new_legacy(Bytes::copy_from_slice(code));
    let mut evm = Context::mainnet().with_db(BenchmarkDB::new_bytecode(bytecode)).build_mainnet();
    let tx = TxEnv::builder()
        .caller(BENCH_CALLER)
        .kind(TxKind::Call(BENCH_TARGET))
        .data(Bytes::from(calldata))
        .gas_limit(5_000_000)
        .build()
        .unwrap();
    evm.transact(tx).expect("transaction is valid").result
}

#[test]
fn happy_paths_execute() {
    let mut runs = 0;
    for seed in 0..60u64 {
        let spec = GenSpec {
            seed,
            n_public: 1 + (seed as usize % 6),
            n_internal: seed as usize % 7,
            share_probability: if seed % 7 >= 2 { 0.6 } else { 0.0 },
            noncontiguous_probability: 0.4,
            modifier_probability: 0.5,
            split_call_probability: 0.5,
            optimize_style: if seed % 2 == 0 { OptimizeStyle::Plain } else { OptimizeStyle::Dedup },
            ..GenSpec::default()
        };
        let c = generate(&spec).unwrap();
        for f in c.functions.iter().filter(|f| f.visibility == Visibility::Public) {
            let mut data = f.selector.unwrap().0.to_be_bytes().to_vec();
            data.extend(std::iter::repeat_n(0u8, 32 * 3));
            data[35] = 7;
            let r = call(&c.code, data);
            assert!(r.is_success(), "seed {seed} {}: {r:?}", f.name);
            runs += 1;
        }
        // unknown selector and short calldata both take the fallback, which reverts
        let r = call(&c.code, vec![0xde, 0xad, 0xbe, 0xef]);
        assert!(matches!(r, ExecutionResult::Revert { .. }), "seed {seed}: {r:?}");
        let r = call(&c.code, vec![]);
        assert!(matches!(r, ExecutionResult::Revert { .. }), "seed {seed}: {r:?}");
    }
    assert!(runs > 100);
}
