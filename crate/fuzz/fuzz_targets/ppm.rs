#![no_main]

use hiproto::pnm::{decode_ppm, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = decode_ppm(data) {
        assert_eq!(r.data.len(), r.width * r.height * r.channels);
        // a decoded raster re-encodes to something that decodes identically
        assert_eq!(decode_ppm(&encode(&r)).unwrap(), r);
    }
});
