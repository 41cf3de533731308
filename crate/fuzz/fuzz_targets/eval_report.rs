#![no_main]

use ctxrnn::eval::EvalReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = EvalReport::from_json(text) {
        let json = r.to_json().expect("a valid report serializes");
        assert_eq!(EvalReport::from_json(&json).expect("serialized report parses"), r);
    }
});
