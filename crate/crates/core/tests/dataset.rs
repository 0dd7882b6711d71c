//! On-disk dataset format: round trips and corruption handling.

use std::fs;
use std::path::Path;

use hperl_core::synthgen::{generate_dataset, read_dataset, read_scene, write_dataset, write_scene, DatasetConfig};
use hperl_core::Error;

fn small(scenes: usize, seed: u64) -> DatasetConfig {
    DatasetConfig { scenes, seed, ..DatasetConfig::default() }
}

fn scene_file(dir: &Path) -> std::path::PathBuf {
    dir.join("scenes").join("scene_00000.bin")
}

#[test]
fn dataset_round_trips_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_dataset(&small(5, 11)).unwrap();
    write_dataset(&data, tmp.path()).unwrap();
    let back = read_dataset(tmp.path()).unwrap();
    assert_eq!(back, data);
    assert!(tmp.path().join("labels").join("scene_00004.csv").exists());

    // writing what was read reproduces the bytes
    let again = tempfile::tempdir().unwrap();
    write_dataset(&back, again.path()).unwrap();
    for rel in ["manifest.txt", "scenes/scene_00003.bin", "labels/scene_00003.csv"] {
        assert_eq!(fs::read(tmp.path().join(rel)).unwrap(), fs::read(again.path().join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn generation_is_seed_deterministic() {
    assert_eq!(generate_dataset(&small(4, 2)).unwrap(), generate_dataset(&small(4, 2)).unwrap());
    assert_ne!(generate_dataset(&small(4, 2)).unwrap(), generate_dataset(&small(4, 3)).unwrap());
}

#[test]
fn empty_dataset_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_dataset(&small(0, 0)).unwrap();
    assert!(data.scenes.is_empty());
    write_dataset(&data, tmp.path()).unwrap();
    assert_eq!(read_dataset(tmp.path()).unwrap(), data);
}

#[test]
fn single_scene_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_dataset(&small(1, 5)).unwrap();
    let path = tmp.path().join("one.bin");
    write_scene(&data.scenes[0], &path).unwrap();
    assert_eq!(read_scene(&path).unwrap(), data.scenes[0]);
}

fn written_scene() -> (tempfile::TempDir, std::path::PathBuf, Vec<u8>) {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_dataset(&small(1, 8)).unwrap();
    write_dataset(&data, tmp.path()).unwrap();
    let path = scene_file(tmp.path());
    let bytes = fs::read(&path).unwrap();
    (tmp, path, bytes)
}

#[test]
fn truncated_scene_is_reported() {
    let (_tmp, path, bytes) = written_scene();
    for keep in [0, 10, bytes.len() - 1] {
        fs::write(&path, &bytes[..keep]).unwrap();
        assert!(matches!(read_scene(&path), Err(Error::Truncated { .. })), "keep {keep}");
    }
}

#[test]
fn flipped_payload_bit_fails_checksum() {
    let (tmp, path, mut bytes) = written_scene();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_scene(&path), Err(Error::Checksum { .. })));
    assert!(matches!(read_dataset(tmp.path()), Err(Error::Checksum { .. })));
}

#[test]
fn version_and_magic_are_checked() {
    let (_tmp, path, bytes) = written_scene();
    let mut v = bytes.clone();
    v[8] = v[8].wrapping_add(1);
    fs::write(&path, &v).unwrap();
    match read_scene(&path) {
        Err(Error::VersionMismatch { found, expected, .. }) => assert_eq!(found, expected + 1),
        other => panic!("expected version mismatch, got {other:?}"),
    }

    let mut m = bytes.clone();
    m[0] = b'X';
    fs::write(&path, &m).unwrap();
    assert!(matches!(read_scene(&path), Err(Error::Format { .. })));

    let mut extra = bytes;
    extra.push(0);
    fs::write(&path, &extra).unwrap();
    assert!(matches!(read_scene(&path), Err(Error::Format { .. })));
}

#[test]
fn missing_files_are_io_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(tmp.path()), Err(Error::Io { .. })));
    let (tmp, path, _) = written_scene();
    fs::remove_file(&path).unwrap();
    assert!(matches!(read_dataset(tmp.path()), Err(Error::Io { .. })));
}
