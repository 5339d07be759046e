// Replays the checked-in fuzz seeds: each must parse cleanly.
use std::fs;
use std::path::{Path, PathBuf};

use hiproto::checkpoint::Checkpoint;
use hiproto::data::{parse_annotations, parse_manifest};
use hiproto::pnm::{decode_pgm, decode_ppm};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn image_seeds_decode() {
    for (p, b) in seeds("ppm") {
        decode_ppm(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("pgm") {
        decode_pgm(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn text_seeds_parse() {
    for (p, b) in seeds("annotations") {
        parse_annotations(std::str::from_utf8(&b).unwrap(), &p).unwrap();
    }
    for (p, b) in seeds("manifest") {
        parse_manifest(std::str::from_utf8(&b).unwrap(), &p).unwrap();
    }
}

#[test]
fn checkpoint_seeds_load() {
    for (p, b) in seeds("checkpoint") {
        let split = b.iter().position(|&x| x == 0).unwrap();
        let manifest = std::str::from_utf8(&b[..split]).unwrap();
        Checkpoint::from_parts(manifest, &b[split + 1..]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
