//! Phantom datasets on disk: one volume/mask pair per sample plus a JSON
//! manifest recording seeds, parameters and split membership.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmsnet_core::model::INPUT_MULTIPLE;
use tmsnet_core::qc::Case;
use tmsnet_core::volume::{read_mask, read_volume, write_mask, write_volume};
use tmsnet_core::{Error, Result};

use crate::phantom::{generate_phantom, PhantomParams, PhantomSample};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Seed offset between consecutive splits.
pub const SPLIT_STRIDE: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Seeds `start .. start + count` of one split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub split: Split,
    pub start: u64,
    pub count: usize,
}

impl SeedRange {
    fn end(&self) -> u64 {
        self.start + self.count as u64
    }

    fn overlaps(&self, other: &SeedRange) -> bool {
        self.count > 0 && other.count > 0 && self.start < other.end() && other.start < self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub volume: String,
    pub mask: String,
    pub params: PhantomParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub size: usize,
    pub ranges: Vec<SeedRange>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Seed ranges for `(train, val, test)` counts, `SPLIT_STRIDE` apart.
pub fn default_ranges(counts: [usize; 3], base_seed: u64) -> Vec<SeedRange> {
    Split::ALL
        .iter()
        .zip(counts)
        .enumerate()
        .map(|(k, (&split, count))| SeedRange {
            split,
            start: base_seed.wrapping_add(k as u64 * SPLIT_STRIDE),
            count,
        })
        .collect()
}

pub fn check_ranges(ranges: &[SeedRange]) -> Result<()> {
    for (i, a) in ranges.iter().enumerate() {
        if a.start.checked_add(a.count as u64).is_none() {
            return Err(Error::Dataset(format!("{} seed range overflows", a.split.name())));
        }
        for b in &ranges[i + 1..] {
            if a.overlaps(b) {
                return Err(Error::Dataset(format!(
                    "seed ranges of {} and {} overlap",
                    a.split.name(),
                    b.split.name()
                )));
            }
        }
    }
    Ok(())
}

/// Generates every sample of `ranges` (without touching the disk).
pub fn generate_samples(ranges: &[SeedRange], size: usize) -> Result<Vec<(String, Split, PhantomSample)>> {
    check_ranges(ranges)?;
    let mut out = Vec::new();
    for r in ranges {
        for k in 0..r.count {
            let seed = r.start + k as u64;
            let sample = generate_phantom(seed, &PhantomParams::sample(seed, size))?;
            out.push((format!("{}_{k:03}", r.split.name()), r.split, sample));
        }
    }
    Ok(out)
}

/// Writes a dataset under `out_dir` and returns its manifest.
pub fn make_dataset_with(ranges: &[SeedRange], size: usize, out_dir: &Path) -> Result<Manifest> {
    if size == 0 || size % INPUT_MULTIPLE != 0 {
        return Err(Error::Indivisible {
            dim: size,
            factor: INPUT_MULTIPLE,
        });
    }
    let samples = generate_samples(ranges, size)?;
    fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (id, split, s) in samples {
        let volume = format!("{id}_image.json");
        let mask = format!("{id}_mask.json");
        write_volume(&s.volume, &out_dir.join(&volume))?;
        write_mask(&s.mask, &out_dir.join(&mask))?;
        entries.push(SampleEntry {
            id,
            split,
            seed: s.seed,
            volume,
            mask,
            params: s.params,
        });
    }
    let manifest = Manifest {
        size,
        ranges: ranges.to_vec(),
        samples: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, json).map_err(|e| io_error(&path, e))?;
    Ok(manifest)
}

pub fn make_dataset(n_train: usize, n_val: usize, n_test: usize, base_seed: u64, size: usize, out_dir: &Path) -> Result<Manifest> {
    make_dataset_with(&default_ranges([n_train, n_val, n_test], base_seed), size, out_dir)
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Regenerates a manifest's samples from their recorded seeds and params.
pub fn regenerate(manifest: &Manifest) -> Result<Vec<PhantomSample>> {
    manifest
        .samples
        .iter()
        .map(|e| generate_phantom(e.seed, &e.params))
        .collect()
}

/// Loads every sample of a split as labelled cases.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Case>> {
    let manifest = read_manifest(dir)?;
    manifest
        .split(split)
        .map(|e| {
            Ok(Case {
                id: e.id.clone(),
                volume: read_volume(&dir.join(&e.volume))?,
                mask: read_mask(&dir.join(&e.mask))?,
            })
        })
        .collect()
}

/// Files a dataset directory should contain according to its manifest.
pub fn referenced_files(manifest: &Manifest) -> Vec<PathBuf> {
    let mut files = vec![PathBuf::from(MANIFEST_FILE)];
    for e in &manifest.samples {
        for f in [&e.volume, &e.mask] {
            let p = PathBuf::from(f);
            files.push(tmsnet_core::volume::payload_path(&p));
            files.push(p);
        }
    }
    files.sort();
    files
}
