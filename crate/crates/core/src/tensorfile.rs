//! Named-tensor container used for every on-disk artifact that must round-trip
//! bit-exactly: basis archives, model checkpoints, direction sets, cached
//! intermediates and float images.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"FETF"
//! u32     container version (currently 1)
//! u64     metadata length, followed by that many bytes of UTF-8 JSON
//! u32     entry count
//! entry:  u16 name length + name bytes
//!         u8  dtype (0 = f64, 1 = u32)
//!         u8  ndim, then ndim x u64 dims
//!         raw data, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FETF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid metadata: {0}")]
    BadMetadata(#[from] serde_json::Error),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("entry {name}: declared size {declared} does not match data length {actual}")]
    SizeMismatch {
        name: String,
        declared: usize,
        actual: usize,
    },
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error("entry {name}: expected dtype {expected}, found {found}")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        found: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    fn dtype_tag(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::U32(_) => 1,
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F64(_) => "f64",
            TensorData::U32(_) => "u32",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

/// An ordered collection of named tensors plus a JSON metadata blob.
/// Entry order is preserved on write so files are byte-reproducible.
#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    entries: Vec<Entry>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn insert_f64(&mut self, name: &str, dims: &[usize], data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.push(Entry {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: TensorData::F64(data),
        });
    }

    pub fn insert_u32(&mut self, name: &str, dims: &[usize], data: Vec<u32>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.push(Entry {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: TensorData::U32(data),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn f64_entry(&self, name: &str) -> Result<(&[usize], &[f64]), TensorFileError> {
        let e = self
            .get(name)
            .ok_or_else(|| TensorFileError::MissingEntry(name.to_string()))?;
        match &e.data {
            TensorData::F64(v) => Ok((&e.dims, v)),
            other => Err(TensorFileError::DtypeMismatch {
                name: name.to_string(),
                expected: "f64",
                found: other.dtype_name(),
            }),
        }
    }

    pub fn u32_entry(&self, name: &str) -> Result<(&[usize], &[u32]), TensorFileError> {
        let e = self
            .get(name)
            .ok_or_else(|| TensorFileError::MissingEntry(name.to_string()))?;
        match &e.data {
            TensorData::U32(v) => Ok((&e.dims, v)),
            other => Err(TensorFileError::DtypeMismatch {
                name: name.to_string(),
                expected: "u32",
                found: other.dtype_name(),
            }),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), TensorFileError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.data.dtype_tag(), e.dims.len() as u8])?;
            for &d in &e.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &e.data {
                TensorData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::U32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, TensorFileError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorFileError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(TensorFileError::UnsupportedVersion(version));
        }
        let meta_len = read_u64(r)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta_buf)?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8_lossy(&name_buf).into_owned();
            let mut tag = [0u8; 2];
            r.read_exact(&mut tag)?;
            let ndim = tag[1] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(r)? as usize);
            }
            let n: usize = dims.iter().product();
            let data = match tag[0] {
                0 => {
                    let mut v = vec![0f64; n];
                    let mut buf = [0u8; 8];
                    for x in v.iter_mut() {
                        r.read_exact(&mut buf)?;
                        *x = f64::from_le_bytes(buf);
                    }
                    TensorData::F64(v)
                }
                1 => {
                    let mut v = vec![0u32; n];
                    let mut buf = [0u8; 4];
                    for x in v.iter_mut() {
                        r.read_exact(&mut buf)?;
                        *x = u32::from_le_bytes(buf);
                    }
                    TensorData::U32(v)
                }
                t => return Err(TensorFileError::UnknownDtype(t)),
            };
            if data.len() != n {
                return Err(TensorFileError::SizeMismatch {
                    name,
                    declared: n,
                    actual: data.len(),
                });
            }
            entries.push(Entry { name, dims, data });
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorFileError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorFileError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16, std::io::Error> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, std::io::Error> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, std::io::Error> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut tf = TensorFile::new(serde_json::json!({"kind": "test", "version": 1}));
        // Values chosen to exercise sign, subnormal-ish and non-representable decimals.
        tf.insert_f64("a", &[2, 3], vec![0.1, -2.5, 1e-300, 3.7, f64::MIN_POSITIVE, 9.9]);
        tf.insert_u32("idx", &[4], vec![0, 7, 42, u32::MAX]);

        let mut buf = Vec::new();
        tf.write_to(&mut buf).unwrap();
        let back = TensorFile::read_from(&mut buf.as_slice()).unwrap();

        let (dims, data) = back.f64_entry("a").unwrap();
        assert_eq!(dims, &[2, 3]);
        let (odims, odata) = tf.f64_entry("a").unwrap();
        assert_eq!(dims, odims);
        for (x, y) in data.iter().zip(odata) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let (_, idx) = back.u32_entry("idx").unwrap();
        assert_eq!(idx, &[0, 7, 42, u32::MAX]);
        assert_eq!(back.meta["kind"], "test");

        // A second serialization of the parsed file is byte-identical.
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn missing_and_mismatched_entries_error() {
        let mut tf = TensorFile::new(serde_json::Value::Null);
        tf.insert_u32("faces", &[1, 3], vec![0, 1, 2]);
        assert!(matches!(
            tf.f64_entry("nope"),
            Err(TensorFileError::MissingEntry(_))
        ));
        assert!(matches!(
            tf.f64_entry("faces"),
            Err(TensorFileError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE....".to_vec();
        assert!(matches!(
            TensorFile::read_from(&mut buf.as_slice()),
            Err(TensorFileError::BadMagic)
        ));
    }
}
