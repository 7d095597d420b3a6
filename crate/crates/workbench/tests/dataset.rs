use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use tmsnet_core::volume::{read_mask, read_volume};
use tmsnet_workbench::dataset::{
    check_ranges, default_ranges, load_split, make_dataset, make_dataset_with, read_manifest, referenced_files,
    regenerate, SeedRange, Split,
};

#[test]
fn dataset_has_every_sample_and_a_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(4, 1, 2, 100, 32, dir.path()).unwrap();
    assert_eq!(m.samples.len(), 7);
    assert_eq!(m.split(Split::Train).count(), 4);
    assert_eq!(m.split(Split::Val).count(), 1);
    assert_eq!(m.split(Split::Test).count(), 2);
    assert_eq!(read_manifest(dir.path()).unwrap(), m);

    let on_disk: BTreeSet<PathBuf> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| PathBuf::from(e.unwrap().file_name()))
        .collect();
    let referenced: BTreeSet<PathBuf> = referenced_files(&m).into_iter().collect();
    assert_eq!(on_disk, referenced);
    assert_eq!(referenced.len(), 1 + 7 * 4);

    let seeds: BTreeSet<u64> = m.samples.iter().map(|s| s.seed).collect();
    assert_eq!(seeds.len(), 7);
}

#[test]
fn regeneration_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(2, 1, 1, 7, 32, dir.path()).unwrap();
    let again = regenerate(&read_manifest(dir.path()).unwrap()).unwrap();
    for (entry, sample) in m.samples.iter().zip(&again) {
        assert_eq!(read_volume(&dir.path().join(&entry.volume)).unwrap().data(), sample.volume.data());
        assert_eq!(read_mask(&dir.path().join(&entry.mask)).unwrap().data(), sample.mask.data());
    }
    let other = tempfile::tempdir().unwrap();
    make_dataset(2, 1, 1, 7, 32, other.path()).unwrap();
    for f in referenced_files(&m) {
        assert_eq!(fs::read(dir.path().join(&f)).unwrap(), fs::read(other.path().join(&f)).unwrap(), "{f:?}");
    }
}

#[test]
fn overlapping_seed_ranges_are_rejected() {
    let ranges = [
        SeedRange {
            split: Split::Train,
            start: 0,
            count: 5,
        },
        SeedRange {
            split: Split::Test,
            start: 4,
            count: 2,
        },
    ];
    assert!(check_ranges(&ranges).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(make_dataset_with(&ranges, 32, dir.path()).is_err());
    assert!(check_ranges(&default_ranges([3, 3, 3], 0)).is_ok());
}

#[test]
fn sizes_the_network_cannot_take_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for size in [0, 8, 24, 40] {
        assert!(make_dataset(1, 0, 0, 0, size, dir.path()).is_err(), "{size}");
    }
}

#[test]
fn splits_load_as_cases() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(1, 0, 2, 3, 32, dir.path()).unwrap();
    let test = load_split(dir.path(), Split::Test).unwrap();
    assert_eq!(test.len(), 2);
    assert_eq!(test[0].id, "test_000");
    assert_eq!(test[0].volume.dims(), [32, 32, 32]);
    assert!(load_split(dir.path(), Split::Val).unwrap().is_empty());
    assert!(load_split(&dir.path().join("nope"), Split::Test).is_err());
}
