#![no_main]

use std::time::Duration;

use evmfunc::boundary::BoundaryConfig;
use evmfunc::pipeline::{analyze, EntrySource};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let p = evmfunc::Program::from_bytes(data.to_vec());
    let cfg = BoundaryConfig { max_states: 20_000, timeout: Duration::from_secs(2), ..Default::default() };
    let _ = analyze(&p, EntrySource::Baseline, &cfg);
    let every_dest = p.instructions().iter().filter(|i| i.opcode.0 == 0x5b).map(|i| i.offset).collect();
    let _ = analyze(&p, EntrySource::Oracle(&every_dest), &cfg);
});
