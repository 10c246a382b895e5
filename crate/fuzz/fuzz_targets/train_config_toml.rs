#![no_main]

use libfuzzer_sys::fuzz_target;
use splatpose::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = toml::from_str::<TrainConfig>(text) {
        let _ = cfg.validate();
        let _ = cfg.hash();
    }
});
