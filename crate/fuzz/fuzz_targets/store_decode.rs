#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = svco::mvc::store::decode(data) {
        let bytes = svco::mvc::store::encode(&records).expect("decoded records re-encode");
        assert_eq!(svco::mvc::store::decode(&bytes).expect("re-encoded store decodes"), records);
    }
});
