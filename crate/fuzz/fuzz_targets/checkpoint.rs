#![no_main]

use hiproto::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

// Input layout: JSON manifest, a NUL byte, then the tensor blob.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(manifest) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let blob = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(ck) = Checkpoint::from_parts(manifest, blob) {
        let (m, b) = ck.to_parts();
        assert!(Checkpoint::from_parts(&m, &b).is_ok());
    }
});
