//! Named parameter registry partitioned into base (φ), teacher-only (θ_t)
//! and student-only (θ_s) tensors, with per-tensor Adam moment buffers and a
//! versioned binary checkpoint format.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 8] = b"RAMCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("invalid tag byte {0}")]
    BadTag(u8),
    #[error("tensor `{name}`: dims {dims:?} do not match value count {values}")]
    ShapeMismatch {
        name: String,
        dims: Vec<u64>,
        values: usize,
    },
}

/// Ownership tag deciding in which training phase a tensor updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamTag {
    /// φ: embeddings, doc/ctx encoders, cross-attention, decoder.
    Base,
    /// θ_t: response encoder (only the teacher sees R).
    Teacher,
    /// θ_s: bilinear attention, estimation MLP, bilinear form.
    Student,
}

impl ParamTag {
    fn byte(self) -> u8 {
        match self {
            ParamTag::Base => 0,
            ParamTag::Teacher => 1,
            ParamTag::Student => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self, CheckpointError> {
        match b {
            0 => Ok(ParamTag::Base),
            1 => Ok(ParamTag::Teacher),
            2 => Ok(ParamTag::Student),
            other => Err(CheckpointError::BadTag(other)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub tag: ParamTag,
    /// Adam first/second moment estimates; zeroed whenever the tensor
    /// transitions frozen → trainable.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    /// Tape shape: rank-1 tensors bind as a single row.
    pub fn matrix_shape(&self) -> [usize; 2] {
        match self.shape.len() {
            1 => [1, self.shape[0]],
            2 => [self.shape[0], self.shape[1]],
            _ => panic!("parameters are rank 1 or 2, got {:?}", self.shape),
        }
    }
}

/// Deterministically ordered (by name) parameter map.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tag: ParamTag, shape: Vec<usize>, values: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "{name}: shape/value mismatch"
        );
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter {name}"
        );
        let n = values.len();
        self.params.insert(
            name.to_string(),
            Param {
                shape,
                values,
                tag,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names_with_tag(&self, tag: ParamTag) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.tag == tag)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Zero Adam moments for every tensor the predicate selects.
    pub fn reset_moments(&mut self, select: impl Fn(ParamTag) -> bool) {
        for p in self.params.values_mut() {
            if select(p.tag) {
                p.m.iter_mut().for_each(|x| *x = 0.0);
                p.v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Total parameter count (scalars).
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes();
        std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, p) in &self.params {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u64).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(p.tag.byte());
            out.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
        let mut file = std::fs::File::open(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|source| CheckpointError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = r.u64("tensor count")?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u64("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| CheckpointError::Truncated("name utf-8"))?;
            let tag = ParamTag::from_byte(r.take(1, "tag")?[0])?;
            let rank = r.u64("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("dims")?);
            }
            let n: u64 = dims.iter().product();
            let mut values = Vec::with_capacity(n as usize);
            for _ in 0..n {
                values.push(f64::from_le_bytes(
                    r.take(8, "values")?.try_into().unwrap(),
                ));
            }
            let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
            if shape.iter().product::<usize>() != values.len() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    dims,
                    values: values.len(),
                });
            }
            store.insert(&name, tag, shape, values);
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
