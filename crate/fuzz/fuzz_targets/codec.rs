#![no_main]

use libfuzzer_sys::fuzz_target;
use resprune::store::{manifest_from_checkpoint, teacher_from_checkpoint, Checkpoint};

fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = (u16::from_le_bytes([data[0], data[1]]) as usize).min(data.len() - 2);
    let (json, blob) = data[2..].split_at(n);
    if let Ok(ck) = Checkpoint::decode(json, blob) {
        let _ = teacher_from_checkpoint(&ck);
        let _ = manifest_from_checkpoint(&ck);
    }
});
