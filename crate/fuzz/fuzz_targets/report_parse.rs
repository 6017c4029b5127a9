#![no_main]

use libfuzzer_sys::fuzz_target;
use resprune::store::Report;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = Report::<serde_json::Value>::from_json(text, None);
});
