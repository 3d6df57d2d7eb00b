//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "LLV3CKPT" | version | float width (4 or 8) | config length | config JSON
//! | tensor count | { name length | name | ndims | dims... | values } *
//! ```
//!
//! Values are `f32` or `f64` according to the float width. A model whose
//! parameters are all representable in the chosen width round-trips
//! bit-exactly.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::heads::TaskHeadConfig;

const MAGIC: &[u8; 8] = b"LLV3CKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn width(self) -> u32 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    task: Option<TaskHeadConfig>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub task: Option<TaskHeadConfig>,
    pub precision: Precision,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, precision: Precision) -> Self {
        Self {
            config: model.config.clone(),
            task: model.task.as_ref().map(|t| t.config.clone()),
            precision,
            tensors: model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION);
        put(&mut out, self.precision.width());
        let header = serde_json::to_vec(&Header { model: self.config.clone(), task: self.task.clone() })
            .expect("config serializes");
        put(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        put(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put(&mut out, 2);
            put(&mut out, t.nrows() as u32);
            put(&mut out, t.ncols() as u32);
            for &v in t.iter() {
                match self.precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let precision = match r.u32()? {
            4 => Precision::F32,
            8 => Precision::F64,
            w => return Err(Error::Format(format!("unsupported float width {w}"))),
        };
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndims = r.u32()? as usize;
            let dims: Vec<usize> = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => return Err(Error::Format(format!("tensor {name} has {ndims} dims"))),
            };
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                values.push(match precision {
                    Precision::F32 => f64::from(f32::from_le_bytes(r.take(4)?.try_into().unwrap())),
                    Precision::F64 => f64::from_le_bytes(r.take(8)?.try_into().unwrap()),
                });
            }
            tensors.push((name, Array2::from_shape_vec((rows, cols), values).expect("sized")));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config: header.model, task: header.task, precision, tensors })
    }

    /// Rebuilds the model, requiring every parameter to be present.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), self.task.clone(), 0)?;
        let loaded = model.load_matching(&self)?;
        if loaded != model.params.len() || self.tensors.len() != loaded {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, {loaded} matched a model with {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Model {
    /// Copies every checkpoint tensor whose name exists here; shapes must
    /// agree. Returns how many were copied.
    pub fn load_matching(&mut self, ckpt: &Checkpoint) -> Result<usize> {
        let mut n = 0;
        for (name, t) in &ckpt.tensors {
            if let Some(id) = self.params.find(name) {
                let dst = self.params.get_mut(id);
                if dst.dim() != t.dim() {
                    return Err(Error::Shape(format!("tensor {name}: checkpoint {:?}, model {:?}", t.dim(), dst.dim())));
                }
                dst.assign(t);
                n += 1;
            }
        }
        Ok(n)
    }
}

pub fn save_checkpoint(model: &Model, precision: Precision, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_model(model, precision).to_bytes();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
