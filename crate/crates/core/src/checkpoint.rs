//! Checkpoint directories: `manifest.json` describing every parameter plus a
//! `params.bin` payload of little-endian values in manifest order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tms_autograd::{Element, Tensor};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TmsNet, Variant};

pub const FORMAT: &str = "tmsnet-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub precision: String,
    pub variant: Variant,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint<T: Element>(net: &TmsNet<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::with_capacity(net.parameter_count() * T::BYTES);
    let mut params = Vec::with_capacity(net.store().len());
    let mut offset = 0;
    for (_, p) in net.store().iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len();
        for &v in p.value.data() {
            v.write_le(&mut payload);
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        precision: T::DTYPE.to_string(),
        variant: net.variant(),
        config: net.config().clone(),
        params,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(PAYLOAD_FILE);
    fs::write(&path, payload).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", manifest.format)));
    }
    if manifest.variant != manifest.config.variant {
        return Err(Error::Checkpoint("variant tag disagrees with config".into()));
    }
    Ok(manifest)
}

/// Rebuilds the network from the manifest configuration, then assigns every
/// stored parameter by name.
pub fn load_checkpoint<T: Element>(dir: &Path) -> Result<TmsNet<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.precision != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {} cannot be loaded as {}",
            manifest.precision,
            T::DTYPE
        )));
    }
    let path = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut net = TmsNet::<T>::new(manifest.config.clone())?;
    let expected: usize = net.store().len();
    if manifest.params.len() != expected {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, the architecture has {expected}",
            manifest.params.len()
        )));
    }
    let total: usize = manifest.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != total * T::BYTES {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, the manifest describes {}",
            payload.len(),
            total * T::BYTES
        )));
    }
    let mut seen = HashSet::new();
    for entry in &manifest.params {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::Checkpoint(format!("parameter {} listed twice", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * T::BYTES;
        let end = start + n * T::BYTES;
        let bytes = payload.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("parameter {} lies outside the payload", entry.name))
        })?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        let value = Tensor::new(entry.shape.clone(), data)?;
        net.store_mut()
            .assign(&entry.name, value)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
    }
    Ok(net)
}

/// [`load_checkpoint`] that also insists on a variant.
pub fn load_checkpoint_as<T: Element>(dir: &Path, variant: Variant) -> Result<TmsNet<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.variant != variant {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {} network, expected {variant}",
            manifest.variant
        )));
    }
    load_checkpoint(dir)
}
