#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = evmfunc::config::KeyValues::parse(text);
    let _ = evmfunc::model::TrainConfig::parse(text);
    if let Ok(c) = evmfunc_cli::RunConfig::parse(text) {
        let _ = c.check();
    }
});
