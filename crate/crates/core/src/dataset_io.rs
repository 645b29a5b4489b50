//! On-disk datasets: one little-endian binary file per grid plus a JSON manifest
//! with SHA-256 checksums.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid3};
use crate::synth::{AnnotatedCase, DatasetSplit, PhantomSpec, UnlabeledCase, Volume};

const GRID_MAGIC: &[u8; 8] = b"VXDGRID\0";
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

fn header(dtype: u8, dims: Dims, spacing: [f64; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 1 + 24 + 24);
    out.extend_from_slice(GRID_MAGIC);
    out.push(dtype);
    for d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn encode_f64(grid: &Grid3<f64>, spacing: [f64; 3]) -> Vec<u8> {
    let mut out = header(DTYPE_F64, grid.dims(), spacing);
    for v in grid.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_u8(grid: &Grid3<u8>, spacing: [f64; 3]) -> Vec<u8> {
    let mut out = header(DTYPE_U8, grid.dims(), spacing);
    out.extend_from_slice(grid.as_slice());
    out
}

struct Decoded<'a> {
    dims: Dims,
    spacing: [f64; 3],
    payload: &'a [u8],
}

fn decode<'a>(bytes: &'a [u8], dtype: u8, path: &Path) -> Result<Decoded<'a>> {
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 57 || &bytes[..8] != GRID_MAGIC {
        return Err(bad("not a grid file"));
    }
    if bytes[8] != dtype {
        return Err(bad(&format!("dtype tag {} where {dtype} was expected", bytes[8])));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let dims = [u64_at(9) as usize, u64_at(17) as usize, u64_at(25) as usize];
    let spacing = [
        f64::from_bits(u64_at(33)),
        f64::from_bits(u64_at(41)),
        f64::from_bits(u64_at(49)),
    ];
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("dims overflow"))?;
    let width = if dtype == DTYPE_F64 { 8 } else { 1 };
    let payload = &bytes[57..];
    if payload.len() != n * width {
        return Err(bad(&format!("payload has {} bytes, dims {dims:?} need {}", payload.len(), n * width)));
    }
    Ok(Decoded { dims, spacing, payload })
}

pub fn decode_f64(bytes: &[u8], path: &Path) -> Result<(Grid3<f64>, [f64; 3])> {
    let d = decode(bytes, DTYPE_F64, path)?;
    let data = d
        .payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Grid3::from_vec(d.dims, data)?, d.spacing))
}

pub fn decode_u8(bytes: &[u8], path: &Path) -> Result<(Grid3<u8>, [f64; 3])> {
    let d = decode(bytes, DTYPE_U8, path)?;
    Ok((Grid3::from_vec(d.dims, d.payload.to_vec())?, d.spacing))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    f.read_to_end(&mut out)?;
    Ok(out)
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub seed: u64,
    pub shape: Dims,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub phantom: PhantomSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: usize,
    pub role: SplitRole,
    pub volume: FileEntry,
    pub mask: Option<FileEntry>,
    pub sdm: Option<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: GeneratorParams,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn counts(&self) -> (usize, usize, usize) {
        let count = |r: SplitRole| self.cases.iter().filter(|c| c.role == r).count();
        (count(SplitRole::Labeled), count(SplitRole::Unlabeled), count(SplitRole::Test))
    }
}

/// All files of a split, encoded in memory, with their manifest.
pub fn encode_split(split: &DatasetSplit, generator: &GeneratorParams) -> (DatasetManifest, Vec<(String, Vec<u8>)>) {
    let mut files = Vec::new();
    let mut cases = Vec::new();
    let mut add = |name: String, bytes: Vec<u8>| -> FileEntry {
        let entry = FileEntry {
            path: name.clone(),
            sha256: sha256_hex(&bytes),
        };
        files.push((name, bytes));
        entry
    };
    let labeled = |c: &AnnotatedCase, role: SplitRole, add: &mut dyn FnMut(String, Vec<u8>) -> FileEntry| {
        let sp = c.volume.spacing();
        CaseEntry {
            id: c.id,
            role,
            volume: add(format!("case_{:04}_volume.bin", c.id), encode_f64(c.volume.voxels(), sp)),
            mask: Some(add(format!("case_{:04}_mask.bin", c.id), encode_u8(&c.mask, sp))),
            sdm: Some(add(format!("case_{:04}_sdm.bin", c.id), encode_f64(&c.sdm, sp))),
        }
    };
    for c in &split.labeled {
        cases.push(labeled(c, SplitRole::Labeled, &mut add));
    }
    for c in &split.unlabeled {
        cases.push(CaseEntry {
            id: c.id,
            role: SplitRole::Unlabeled,
            volume: add(
                format!("case_{:04}_volume.bin", c.id),
                encode_f64(c.volume.voxels(), c.volume.spacing()),
            ),
            mask: None,
            sdm: None,
        });
    }
    for c in &split.test {
        cases.push(labeled(c, SplitRole::Test, &mut add));
    }
    (
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            generator: generator.clone(),
            cases,
        },
        files,
    )
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = read_file(&path)?;
    let m: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::format(&path, format!("unsupported manifest version {}", m.format_version)));
    }
    Ok(m)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    write_atomic(&dir.join(MANIFEST_NAME), text.as_bytes())
}

fn load_checked(dir: &Path, entry: &FileEntry) -> Result<(Vec<u8>, PathBuf)> {
    let path = dir.join(&entry.path);
    let bytes = read_file(&path)?;
    let sum = sha256_hex(&bytes);
    if sum != entry.sha256 {
        return Err(Error::format(&path, format!("checksum {sum} does not match manifest {}", entry.sha256)));
    }
    Ok((bytes, path))
}

/// Reads a dataset directory, verifying every checksum.
pub fn load_split(dir: &Path) -> Result<(DatasetSplit, DatasetManifest)> {
    let manifest = read_manifest(dir)?;
    let mut split = DatasetSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
        seed: manifest.generator.seed,
    };
    for entry in &manifest.cases {
        let (bytes, path) = load_checked(dir, &entry.volume)?;
        let (voxels, spacing) = decode_f64(&bytes, &path)?;
        let volume = Volume::new(voxels, spacing)?;
        if entry.role == SplitRole::Unlabeled {
            split.unlabeled.push(UnlabeledCase { id: entry.id, volume });
            continue;
        }
        let missing = |what: &str| Error::format(dir.join(MANIFEST_NAME), format!("case {} lacks a {what} file", entry.id));
        let (mb, mp) = load_checked(dir, entry.mask.as_ref().ok_or_else(|| missing("mask"))?)?;
        let (sb, spath) = load_checked(dir, entry.sdm.as_ref().ok_or_else(|| missing("sdm"))?)?;
        let case = AnnotatedCase {
            id: entry.id,
            volume,
            mask: decode_u8(&mb, &mp)?.0,
            sdm: decode_f64(&sb, &spath)?.0,
        };
        case.volume.voxels().ensure_same_dims(&case.mask)?;
        case.volume.voxels().ensure_same_dims(&case.sdm)?;
        match entry.role {
            SplitRole::Labeled => split.labeled.push(case),
            _ => split.test.push(case),
        }
    }
    Ok((split, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_codecs_round_trip() {
        let g = Grid3::from_fn([3, 4, 5], |h, w, d| (h * 20 + w * 5 + d) as f64 / 7.0);
        let bytes = encode_f64(&g, [1.0, 0.5, 2.0]);
        let (back, sp) = decode_f64(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, g);
        assert_eq!(sp, [1.0, 0.5, 2.0]);
        let m = g.map(|v| (v > 3.0) as u8);
        assert_eq!(decode_u8(&encode_u8(&m, [1.0; 3]), Path::new("x")).unwrap().0, m);
    }

    #[test]
    fn truncated_and_mistyped_files_are_rejected() {
        let g = Grid3::filled([2, 2, 2], 1u8);
        let bytes = encode_u8(&g, [1.0; 3]);
        assert!(decode_u8(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode_f64(&bytes, Path::new("x")).is_err());
    }
}
