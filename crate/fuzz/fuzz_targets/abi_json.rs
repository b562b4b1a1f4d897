#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = evmfunc::dispatcher::abi_signatures(text);
    let _ = evmfunc::dispatcher::match_abi(&[], text);
});
