#![no_main]

use ctxrnn::data::SeriesPanel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = SeriesPanel::from_csv_reader(data) {
        let mut out = Vec::new();
        p.write_csv(&mut out).expect("a parsed panel writes back");
        let again = SeriesPanel::from_csv_reader(out.as_slice()).expect("written panel parses");
        assert_eq!(again.n(), p.n());
        assert_eq!(again.len(), p.len());
    }
});
