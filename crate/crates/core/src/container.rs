//! Binary container for model and search checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NMLG" | version u32 | config length u32 | config JSON bytes
//! tensor count u64
//! per tensor: name length u32 | name bytes | rank u32 | dims u64 × rank | values f64 × Π dims
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NMLG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            dims,
            values,
        }
    }

    pub fn vector(name: impl Into<String>, values: Vec<f64>) -> Self {
        let n = values.len();
        NamedTensor::new(name, vec![n], values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32_len(cfg.len())?.to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for t in &self.tensors {
            let numel: usize = t.dims.iter().product();
            if numel != t.values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has {} values for dims {:?}",
                    t.name,
                    t.values.len(),
                    t.dims
                )));
            }
            w.write_all(&u32_len(t.name.len())?.to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&u32_len(t.dims.len())?.to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = read_u32(r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config = serde_json::from_slice(&cfg)?;
        let count = read_u64(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, dims, values });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Container { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let c = Container {
            config: serde_json::json!({"a": 1, "b": [0.1, "x"]}),
            tensors: vec![
                NamedTensor::new("w", vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, 0.1, -7.25]),
                NamedTensor::vector("empty", vec![]),
            ],
        };
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NMLG");
        let back = Container::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensors[0].values[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(Container::read_from(&mut &b"XXXX\x01\0\0\0"[..]).is_err());
        let c = Container {
            config: serde_json::json!({}),
            tensors: vec![NamedTensor::vector("v", vec![1.0, 2.0])],
        };
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Container::read_from(&mut buf.as_slice()).is_err());
    }
}
