//! On-disk dataset: `<name>.manifest.json` plus `<name>.bin`.
//!
//! The binary file reuses the checkpoint tensor record encoding:
//!
//! ```text
//! "PVRD"  magic
//! u32     version
//! u32     train count, u32 test count
//! per sample:
//!   u64 sample_id, u32 class_id, u64 generator_seed
//!   u32 view count, f64[view count] azimuths
//!   record "points"  (N×3)
//!   record "views"   (V×Dv)
//! [u8; 32] SHA-256 of everything above
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetConfig, DatasetSplit, ShapeSample};
use crate::error::{Error, Result};
use crate::io::{atomic_write, write_json};
use crate::tensor::{put_record, put_u32, Reader};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PVRD";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub class_names: Vec<String>,
    pub train_count: usize,
    pub test_count: usize,
    pub per_class_train: Vec<usize>,
    pub per_class_test: Vec<usize>,
    pub sha256: String,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (base.with_file_name(format!("{name}.manifest.json")), base.with_file_name(format!("{name}.bin")))
}

/// Manifest and blob paths for a dataset stored under `base`.
pub fn dataset_files(base: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    paths(base.as_ref())
}

fn histogram(samples: &[ShapeSample], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for s in samples {
        h[s.class_id] += 1;
    }
    h
}

fn encode(split: &DatasetSplit) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, DATASET_VERSION);
    put_u32(&mut buf, split.train.len() as u32);
    put_u32(&mut buf, split.test.len() as u32);
    for s in split.train.iter().chain(&split.test) {
        buf.extend_from_slice(&s.sample_id.to_le_bytes());
        put_u32(&mut buf, s.class_id as u32);
        buf.extend_from_slice(&s.generator_seed.to_le_bytes());
        put_u32(&mut buf, s.azimuths.len() as u32);
        for a in &s.azimuths {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        put_record(&mut buf, "points", &s.points);
        put_record(&mut buf, "views", &s.view_descriptors);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn manifest_for(split: &DatasetSplit, bytes: &[u8]) -> DatasetManifest {
    let c = split.num_classes();
    DatasetManifest {
        format_version: DATASET_VERSION,
        config: split.config.clone(),
        class_names: split.class_names.clone(),
        train_count: split.train.len(),
        test_count: split.test.len(),
        per_class_train: histogram(&split.train, c),
        per_class_test: histogram(&split.test, c),
        sha256: hex::encode(Sha256::digest(bytes)),
    }
}

/// Writes `<base>.manifest.json` and `<base>.bin`; returns the manifest.
pub fn save_dataset(split: &DatasetSplit, base: impl AsRef<Path>) -> Result<DatasetManifest> {
    let (manifest_path, bin_path) = paths(base.as_ref());
    let bytes = encode(split);
    let manifest = manifest_for(split, &bytes);
    atomic_write(&bin_path, &bytes)?;
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

fn decode(bytes: &[u8], manifest: &DatasetManifest) -> Result<DatasetSplit> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(Error::Format("dataset file truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if &body[..4] != MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("dataset checksum mismatch (truncated or corrupted file)".into()));
    }
    if hex::encode(Sha256::digest(bytes)) != manifest.sha256 {
        return Err(Error::Format("dataset file does not match its manifest checksum".into()));
    }
    let train_count = r.u32()? as usize;
    let test_count = r.u32()? as usize;
    let mut samples = Vec::with_capacity(train_count + test_count);
    for _ in 0..train_count + test_count {
        let sample_id = r.u64()?;
        let class_id = r.u32()? as usize;
        let generator_seed = r.u64()?;
        let nviews = r.u32()? as usize;
        let mut azimuths = Vec::with_capacity(nviews.min(4096));
        for _ in 0..nviews {
            azimuths.push(r.f64()?);
        }
        let (pname, points) = r.record()?;
        let (vname, view_descriptors) = r.record()?;
        if pname != "points" || vname != "views" {
            return Err(Error::Format(format!("unexpected records `{pname}`/`{vname}`")));
        }
        if class_id >= manifest.class_names.len() {
            return Err(Error::Format(format!("class id {class_id} out of range")));
        }
        samples.push(ShapeSample { class_id, points, view_descriptors, azimuths, sample_id, generator_seed });
    }
    if !r.at_end() {
        return Err(Error::Format("trailing bytes in dataset file".into()));
    }
    if train_count != manifest.train_count || test_count != manifest.test_count {
        return Err(Error::Format("sample counts disagree with manifest".into()));
    }
    let test = samples.split_off(train_count);
    Ok(DatasetSplit { train: samples, test, class_names: manifest.class_names.clone(), config: manifest.config.clone() })
}

pub fn load_manifest(base: impl AsRef<Path>) -> Result<DatasetManifest> {
    let (manifest_path, _) = paths(base.as_ref());
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest {}: {e}", manifest_path.display())))?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", manifest.format_version)));
    }
    Ok(manifest)
}

pub fn load_dataset(base: impl AsRef<Path>) -> Result<DatasetSplit> {
    let manifest = load_manifest(base.as_ref())?;
    let (_, bin_path) = paths(base.as_ref());
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    decode(&bytes, &manifest)
}
