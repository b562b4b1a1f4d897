#![no_main]

use libfuzzer_sys::fuzz_target;

// Input is the label JSON, a NUL byte, then the code hex.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (json, hex) = text.split_once('\0').unwrap_or((text, ""));
    if let Ok(gt) = evmfunc::corpus::GroundTruthContract::from_parts(json, hex) {
        let _ = gt.validate();
    }
});
