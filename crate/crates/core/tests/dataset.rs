use hiproto::data::{dataset_digest, read_dataset, synth_dataset, write_dataset, DatasetSpec};

fn small() -> DatasetSpec {
    DatasetSpec {
        seed: 5,
        train: 4,
        test: 2,
        ..DatasetSpec::default()
    }
}

#[test]
fn written_dataset_reads_back() {
    let ds = synth_dataset(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    for (id, s) in &ds.samples {
        let b = &back.samples[id];
        assert_eq!(b.boxes, s.boxes);
        // 8-bit quantization is the only loss
        let worst = s.image.data.iter().zip(&b.image.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{id}: {worst}");
    }
    // rewriting the read-back copy reproduces the same bytes
    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &back).unwrap();
    assert_eq!(dataset_digest(dir.path()).unwrap(), dataset_digest(again.path()).unwrap());
}

#[test]
fn golden_digest() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &synth_dataset(&small()).unwrap()).unwrap();
    let want = include_str!("fixtures/small_dataset.sha256").trim();
    assert_eq!(dataset_digest(dir.path()).unwrap(), want);
}
