#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = svco::train::TrainConfig::from_text(text) {
            let again = svco::train::TrainConfig::from_text(&cfg.to_text()).expect("rendered config parses");
            assert_eq!(again, cfg);
        }
    }
});
