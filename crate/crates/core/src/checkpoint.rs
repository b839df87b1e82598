//! Binary tensor container used for model checkpoints and optimizer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UHDR" | version u32 | dtype u8 (0 = f32, 1 = f64) | count u32
//! count x { name_len u16 | name (UTF-8) | rank u8 | extents u32 x rank | scalars }
//! crc32 u32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UHDR";
pub const VERSION: u32 = 1;

/// Serialises named tensors (written in the given order).
pub fn encode<T: Scalar>(entries: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too high: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent too large: {name}")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a container whose element type must be `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a UHDR container".into()));
    }
    if bytes.len() < 4 + 4 + 1 + 4 + 4 {
        return Err(Error::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let mut r = Reader { buf: &bytes[..bytes.len() - 4], pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown element type tag {tag}")))?;
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
    let count = r.u32()?;
    let mut map = BTreeMap::new();
    let parsed = (|| -> Result<()> {
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let size = dtype.size_of();
            let raw = r.take(n.checked_mul(size).ok_or_else(|| Error::Format(format!("entry `{name}` is too large")))?)?;
            if dtype == T::DTYPE {
                let data = raw.chunks_exact(size).map(T::read_le).collect();
                map.insert(name, Tensor::from_vec(&shape, data)?);
            }
        }
        Ok(())
    })();
    // a short body is reported as truncation even if the checksum also fails
    parsed?;
    if r.pos != r.buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last entry", r.buf.len() - r.pos)));
    }
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if dtype != T::DTYPE {
        return Err(Error::DTypeMismatch {
            found: dtype,
            expected: T::DTYPE,
        });
    }
    Ok(map)
}

pub fn write_file<T: Scalar>(path: &Path, entries: &[(&str, &Tensor<T>)]) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_file<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

/// Copies every entry into `store`. The key sets must match exactly and
/// every shape must agree; nothing is modified on error.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, mut entries: BTreeMap<String, Tensor<T>>) -> Result<()> {
    let names: Vec<String> = store.named_tensors().iter().map(|(n, _)| n.to_string()).collect();
    if let Some(missing) = names.iter().find(|n| !entries.contains_key(*n)) {
        return Err(Error::MissingKey(missing.clone()));
    }
    if let Some(unknown) = entries.keys().find(|k| store.lookup(k).is_none()) {
        return Err(Error::UnknownKey(unknown.clone()));
    }
    for (name, t) in store.named_tensors() {
        let found = entries[name].shape();
        if found != t.shape() {
            return Err(Error::KeyShape {
                key: name.to_string(),
                found: found.to_vec(),
                expected: t.shape().to_vec(),
            });
        }
    }
    for name in names {
        let t = entries.remove(&name).expect("checked above");
        store.assign(&name, t)?;
    }
    Ok(())
}
