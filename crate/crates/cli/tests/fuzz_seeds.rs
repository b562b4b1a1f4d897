//! Replays the checked-in fuzz seeds through the fuzzed entry points.

use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use evmfunc::boundary::BoundaryConfig;
use evmfunc::corpus::GroundTruthContract;
use evmfunc::pipeline::{analyze, EntrySource};
use evmfunc::Program;
use evmfunc_cli::RunConfig;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| fs::read(e.unwrap().path()).unwrap()).collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(b: &[u8]) -> &str {
    std::str::from_utf8(b).unwrap()
}

#[test]
fn seeds_replay() {
    let decoded = seeds("decode_hex").iter().filter(|s| evmfunc::decode(text(s)).is_ok()).count();
    assert!(decoded >= 4);
    assert!(seeds("asm_text").iter().any(|s| evmfunc::corpus::asm::assemble(text(s)).is_ok()));
    assert!(seeds("model_load").iter().any(|s| evmfunc::model::io::from_bytes(s).is_ok()));
    for s in seeds("ground_truth_json") {
        let (json, hex) = text(&s).split_once('\0').unwrap();
        GroundTruthContract::from_parts(json, hex).unwrap().validate().unwrap();
    }
    assert!(seeds("abi_json").iter().all(|s| evmfunc::dispatcher::abi_signatures(text(s)).is_ok()));
    assert!(seeds("kv_config").iter().any(|s| RunConfig::parse(text(s)).is_ok_and(|c| c.check().is_ok())));
    let cfg = BoundaryConfig { max_states: 20_000, timeout: Duration::from_secs(2), ..Default::default() };
    for s in seeds("analyze_bytes") {
        analyze(&Program::from_bytes(s), EntrySource::Baseline, &cfg);
    }
}
