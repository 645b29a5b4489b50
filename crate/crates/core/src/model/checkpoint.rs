//! Versioned binary checkpoint: magic, version, JSON header, raw little-endian f64s.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ArchDescriptor, ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VXDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScalars {
    pub t: usize,
    pub t_max: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scalars: CheckpointScalars,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub momentum: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: ArchDescriptor,
    scalars: CheckpointScalars,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.student.check_compatible(&self.teacher)?;
        self.student.check_compatible(&self.momentum)?;
        let header = Header {
            version: CHECKPOINT_VERSION,
            arch: self.student.arch.clone(),
            scalars: self.scalars.clone(),
            tensors: self
                .student
                .tensors
                .iter()
                .map(|t| (t.name.clone(), t.shape.clone()))
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            out.write_all(MAGIC)?;
            out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            out.write_all(&(header.len() as u64).to_le_bytes())?;
            out.write_all(&header)?;
            for set in [&self.student, &self.teacher, &self.momentum] {
                for t in &set.tensors {
                    for v in &t.data {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            out.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a checkpoint; when `expected` is given its descriptor must match exactly.
    pub fn load(path: &Path, expected: Option<&ArchDescriptor>) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        if let Some(arch) = expected {
            if *arch != header.arch {
                return Err(Error::ArchitectureMismatch(format!(
                    "checkpoint descriptor {:?} != expected {:?}",
                    header.arch, arch
                )));
            }
        }
        let reference = ParamSet::zeros(&header.arch);
        for (t, (name, shape)) in reference.tensors.iter().zip(&header.tensors) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::ArchitectureMismatch(name.clone()));
            }
        }
        let mut read_set = || -> Result<ParamSet> {
            let mut set = reference.clone();
            for Tensor { data, .. } in set.tensors.iter_mut() {
                let mut bytes = vec![0u8; data.len() * 8];
                input.read_exact(&mut bytes)?;
                for (v, chunk) in data.iter_mut().zip(bytes.chunks_exact(8)) {
                    *v = f64::from_le_bytes(chunk.try_into().unwrap());
                }
            }
            Ok(set)
        };
        let student = read_set()?;
        let teacher = read_set()?;
        let momentum = read_set()?;
        Ok(Self {
            scalars: header.scalars,
            student,
            teacher,
            momentum,
        })
    }
}
