#![no_main]

use std::path::Path;

use hiproto::data::parse_annotations;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_annotations(text, Path::new("annotations.jsonl"));
    }
});
