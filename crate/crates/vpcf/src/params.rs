//! Flat parameter storage with a named-tensor layout, seeded initialization,
//! and binary checkpoint IO.
//!
//! All learnable state lives in one `Vec<f64>`; the layout maps tensor names
//! to offsets so the optimizer, the gradient checker, and checkpoint files all
//! agree on block boundaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPCF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at offset 0: expected \"VPCF\"")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("unexpected end at offset {0}")]
    UnexpectedEnd(usize),
    #[error("malformed checkpoint at offset {offset}: {what}")]
    Malformed { offset: usize, what: String },
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Immutable name -> (dims, offset) table shared by parameters and gradients.
#[derive(Debug)]
pub struct ParamLayout {
    entries: Vec<TensorEntry>,
    by_name: BTreeMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn build(specs: impl IntoIterator<Item = (String, Vec<usize>)>) -> Arc<Self> {
        let mut entries = Vec::new();
        let mut by_name = BTreeMap::new();
        let mut offset = 0usize;
        for (name, dims) in specs {
            let len: usize = dims.iter().product();
            assert!(
                by_name.insert(name.clone(), entries.len()).is_none(),
                "duplicate tensor name {name}"
            );
            entries.push(TensorEntry { name, dims, offset });
            offset += len;
        }
        Arc::new(Self { entries, by_name, total: offset })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> &TensorEntry {
        &self.entries[*self.by_name.get(name).unwrap_or_else(|| panic!("unknown tensor {name}"))]
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        self.entry(name).range()
    }
}

/// Parameter vector bound to a layout.
#[derive(Debug, Clone)]
pub struct ParamVec {
    pub layout: Arc<ParamLayout>,
    pub data: Vec<f64>,
}

impl ParamVec {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![0.0; layout.len()];
        Self { layout, data }
    }

    /// Weights drawn from a seeded normal with scale 0.02; tensors whose name
    /// ends in `.b` or `_b` (biases) start at zero.
    pub fn seeded_init(layout: Arc<ParamLayout>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; layout.len()];
        for entry in layout.entries() {
            let leaf = entry.name.rsplit('.').next().unwrap_or(&entry.name);
            let bias = leaf.starts_with('b') || leaf.ends_with("_b");
            for v in &mut data[entry.range()] {
                // Box-Muller keeps us independent of distribution crates.
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let n = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                *v = if bias { 0.0 } else { 0.02 * n };
            }
        }
        Self { layout, data }
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        &self.data[self.layout.range(name)]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout.range(name);
        &mut self.data[r]
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    /// Serialize as little-endian binary: magic, version, then per tensor:
    /// name length u32, UTF-8 name, rank u32, dims u32 each, f32 values
    /// row-major.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for entry in self.layout.entries() {
            buf.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(entry.name.as_bytes());
            buf.extend_from_slice(&(entry.dims.len() as u32).to_le_bytes());
            for &d in &entry.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &self.data[entry.range()] {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Load a checkpoint into the given layout, verifying every tensor's shape
    /// and presence.
    pub fn load(path: &Path, layout: Arc<ParamLayout>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut reader = ByteReader::new(&bytes);
        let magic = reader.take(4).map_err(|_| CheckpointError::BadMagic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = reader.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        while !reader.at_end() {
            let name_offset = reader.offset();
            let name_len = reader.u32()? as usize;
            let name = String::from_utf8(reader.take(name_len)?.to_vec()).map_err(|_| {
                CheckpointError::Malformed { offset: name_offset, what: "tensor name is not UTF-8".into() }
            })?;
            let rank = reader.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(reader.u32()? as usize);
            }
            let len: usize = dims.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(reader.f32()? as f64);
            }
            tensors.insert(name, (dims, values));
        }
        let mut out = Self::zeros(layout.clone());
        for entry in layout.entries() {
            let (dims, values) = tensors
                .get(&entry.name)
                .ok_or_else(|| CheckpointError::MissingTensor(entry.name.clone()))?;
            if dims != &entry.dims {
                return Err(CheckpointError::ShapeMismatch {
                    name: entry.name.clone(),
                    expected: entry.dims.clone(),
                    found: dims.clone(),
                });
            }
            out.data[entry.range()].copy_from_slice(values);
        }
        Ok(out)
    }
}

/// Little-endian cursor that reports the offset of any truncation.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn at_end(&self) -> bool {
        self.offset == self.bytes.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.offset + n > self.bytes.len() {
            return Err(CheckpointError::UnexpectedEnd(self.offset));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    pub fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self) -> Result<f32, CheckpointError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
