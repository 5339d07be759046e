#![no_main]

use hiproto::pnm::{decode_pgm, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = decode_pgm(data) {
        assert_eq!(r.data.len(), r.width * r.height);
        assert_eq!(decode_pgm(&encode(&r)).unwrap(), r);
    }
});
