#![no_main]

use libfuzzer_sys::fuzz_target;
use resprune::store::Checkpoint;

// First two bytes give the header length, the rest is split into header and blob.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = (u16::from_le_bytes([data[0], data[1]]) as usize).min(data.len() - 2);
    let (json, blob) = data[2..].split_at(n);
    if let Ok(ck) = Checkpoint::decode(json, blob) {
        let (j, b) = ck.encode().expect("re-encode");
        assert_eq!(Checkpoint::decode(&j, &b).expect("decode of encoded"), ck);
    }
});
