//! Little-endian binary archive of named `f64` arrays.
//!
//! Layout:
//!
//! ```text
//! magic     4 bytes  "SFOS"
//! version   u32
//! count     u32      number of entries
//! entry*    name_len u32, name (UTF-8), rank u32, dims u64 * rank,
//!           payload f64 * prod(dims)
//! ```
//!
//! Model parameters, the EMA shadow and optimizer velocities are stored under
//! the `param/`, `ema/` and `velocity/` prefixes; scalar run state under `state/`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Linear, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFOS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.push(ArchiveEntry {
            name: name.into(),
            dims,
            data,
        });
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push(name, vec![t.rows(), t.cols()], t.data().to_vec());
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&ArchiveEntry> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.require(name)?;
        match e.dims.as_slice() {
            [r, c] => Tensor::new(*r, *c, e.data.clone()),
            other => Err(Error::Checkpoint(format!(
                "entry `{name}` has rank {} (expected 2)",
                other.len()
            ))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
            for &d in &e.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = read_u32(&mut r)?;
        let mut entries = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(&mut r)? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` is too large")))?;
            let mut data = Vec::with_capacity(n.min(1 << 24));
            let mut buf = [0u8; 8];
            for _ in 0..n {
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            entries.push(ArchiveEntry { name, dims, data });
        }
        Ok(Self { entries })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Stores every parameter of `params` as `{prefix}/{name}`.
    pub fn push_params(&mut self, prefix: &str, params: &ModelParams) {
        for e in params.entries() {
            self.push_tensor(format!("{prefix}/{}", e.name), e.tensor);
        }
    }

    /// Rebuilds a [`ModelParams`] stored under `prefix`.
    pub fn params(&self, prefix: &str) -> Result<ModelParams> {
        let layer = |name: &str| -> Result<Linear> {
            Ok(Linear {
                weight: self.tensor(&format!("{prefix}/{name}.weight"))?,
                bias: self.tensor(&format!("{prefix}/{name}.bias"))?,
            })
        };
        let mut backbone = Vec::new();
        while self.get(&format!("{prefix}/f.{}.weight", backbone.len())).is_some() {
            backbone.push(layer(&format!("f.{}", backbone.len()))?);
        }
        let params = ModelParams {
            backbone,
            head: layer("g")?,
            projection: layer("h")?,
        };
        params
            .validate()
            .map_err(|e| Error::Checkpoint(format!("inconsistent parameters under `{prefix}`: {e}")))?;
        Ok(params)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
