//! Versioned weight archive: named arrays serialized little-endian, with
//! stable ordering so save -> load -> save is byte-identical. Values are
//! stored as f64 regardless of the in-memory dtype, which round-trips f32
//! weights losslessly.

use crate::autodiff::Scalar;
use crate::nn::ParamStore;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SCRWARC1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a weight archive (bad magic)")]
    BadMagic,
    #[error("archive is missing entry {0}")]
    Missing(String),
    #[error("entry {name}: shape {got:?} does not match expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

/// In-memory archive contents.
pub struct Archive<F: Scalar> {
    pub entries: Vec<(String, ArrayD<F>)>,
}

impl<F: Scalar> Archive<F> {
    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, arr) in &self.entries {
            let bytes = name.as_bytes();
            w.write_u32::<LittleEndian>(bytes.len() as u32)?;
            w.write_all(bytes)?;
            w.write_u32::<LittleEndian>(arr.ndim() as u32)?;
            for &d in arr.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in arr.iter() {
                w.write_f64::<LittleEndian>(v.to_f64())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| CheckpointError::BadMagic)?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(F::from_f64(r.read_f64::<LittleEndian>()?));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|_| CheckpointError::BadMagic)?;
            entries.push((name, arr));
        }
        Ok(Archive { entries })
    }
}

/// Snapshot a parameter store (in declaration order).
pub fn params_to_entries<F: Scalar>(params: &ParamStore<F>) -> Vec<(String, ArrayD<F>)> {
    params
        .iter()
        .map(|(name, value)| (name.to_string(), value.clone()))
        .collect()
}

/// Restore every parameter from an archive; names and shapes must match.
pub fn load_params<F: Scalar>(
    params: &mut ParamStore<F>,
    archive: &Archive<F>,
) -> Result<(), CheckpointError> {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let stored = archive
            .get(&name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if stored.shape() != params.value(id).shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                got: stored.shape().to_vec(),
                want: params.value(id).shape().to_vec(),
            });
        }
        *params.value_mut(id) = stored.clone();
    }
    Ok(())
}
