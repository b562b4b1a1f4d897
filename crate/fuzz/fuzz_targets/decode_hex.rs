#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = evmfunc::decode(text) {
        let bytes = p.encode();
        assert_eq!(evmfunc::Program::from_bytes(bytes.clone()).encode(), bytes);
    }
});
