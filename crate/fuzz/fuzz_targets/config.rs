#![no_main]

use ctxrnn::config::{KeyValues, TrainConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KeyValues::parse(text) {
        if let Ok(c) = TrainConfig::from_key_values(&kv) {
            let _ = c.validate();
        }
    }
});
