use std::path::Path;

use reefpipe_core::ingest::{
    open_source, DirectorySpec, Frame, FrameRecordWriter, SourceSpec, SyntheticScene, SyntheticSpec,
};

fn frames(spec: &SourceSpec) -> (Vec<Frame>, u64) {
    let mut src = open_source(spec).unwrap();
    let out: Vec<Frame> = src.by_ref().collect();
    (out, src.skipped())
}

fn write_corpus(dir: &Path, n: u64) {
    let scene = SyntheticScene::new(SyntheticSpec {
        frames: n,
        width: 64,
        height: 48,
        objects: 1,
        min_size: 8,
        max_size: 12,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut w = FrameRecordWriter::create(dir).unwrap();
    for id in 0..n {
        w.write(&scene.render(id)).unwrap();
    }
}

#[test]
fn directory_yields_every_frame_in_order() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 10);
    let (fs, skipped) = frames(&SourceSpec::Directory(DirectorySpec::new(dir.path())));
    assert_eq!(fs.iter().map(|f| f.frame_id).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
    assert_eq!(skipped, 0);
    // Timestamps come from the recorded metadata.
    assert_eq!(fs[3].timestamp_ms, SyntheticSpec::default().start_ms + 3 * 33);
    assert!(fs[3].geo.is_some());
}

#[test]
fn truncated_frame_is_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 10);
    let victim = dir.path().join("frames/frame_000003.jpg");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() / 3]).unwrap();
    let (fs, skipped) = frames(&SourceSpec::Directory(DirectorySpec::new(dir.path())));
    assert_eq!(fs.len(), 9);
    assert!(fs.iter().all(|f| f.frame_id != 3));
    assert_eq!(skipped, 1);
}

#[test]
fn directory_replay_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 6);
    let spec = SourceSpec::Directory(DirectorySpec::new(dir.path()));
    let (a, _) = frames(&spec);
    let (b, _) = frames(&spec);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.frame_id, x.timestamp_ms), (y.frame_id, y.timestamp_ms));
        assert_eq!(x.pixels, y.pixels);
    }
}

#[test]
fn synthetic_source_is_byte_identical_across_opens() {
    let spec: SourceSpec = "synthetic:seed=7,frames=5".parse().unwrap();
    let (a, _) = frames(&spec);
    let (b, _) = frames(&spec);
    assert_eq!(a.len(), 5);
    assert!(a.iter().zip(&b).all(|(x, y)| x.pixels == y.pixels));
}
