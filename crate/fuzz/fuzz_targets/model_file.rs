#![no_main]

use ctxrnn::model::Ensemble;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(e) = Ensemble::from_bytes(data) {
        let bytes = e.to_bytes().expect("a decoded ensemble encodes");
        let again = Ensemble::from_bytes(&bytes).expect("encoded ensemble decodes");
        assert_eq!(again.to_bytes().expect("re-encodes"), bytes);
    }
});
