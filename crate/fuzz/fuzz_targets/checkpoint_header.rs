#![no_main]

use libfuzzer_sys::fuzz_target;
use resprune::store::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let _ = Checkpoint::parse_header(data);
});
