#![no_main]

use ctxrnn::select::ContextMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = ContextMap::parse(text) {
        let again = ContextMap::parse(&m.to_string()).expect("printed map parses");
        assert_eq!(again, m);
        let _ = m.validate(64);
    }
});
