#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = svco::model::checkpoint::decode(data) {
        let again = svco::model::checkpoint::decode(&svco::model::checkpoint::encode(&p)).expect("re-encoded checkpoint decodes");
        assert_eq!(again, p);
    }
});
