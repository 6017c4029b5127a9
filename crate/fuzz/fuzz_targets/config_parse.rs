#![no_main]

use libfuzzer_sys::fuzz_target;
use resprune::store::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        let again = RunConfig::parse(&cfg.to_toml()).expect("re-parse of emitted config");
        assert_eq!(again.digest(), cfg.digest());
    }
});
