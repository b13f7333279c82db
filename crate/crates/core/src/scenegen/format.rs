//! Raw-array container used for samples and checkpoints.
//!
//! ```text
//! "DGFS" | version u16 | H u32 | W u32 | block*
//! block := name_len u8 | name utf-8 | dtype u8 | rank u8 | dim u32 * rank | payload | crc32(payload) u32
//! ```
//! All integers and payload elements are little-endian; payloads are row-major.
//! Blocks run until end of file.

use std::path::Path;

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"DGFS";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U16(Vec<u16>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 0,
            ArrayData::U16(_) => 1,
            ArrayData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U16(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockFile {
    pub height: u32,
    pub width: u32,
    pub arrays: Vec<Array>,
}

impl BlockFile {
    pub fn new(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: ArrayData) -> Result<()> {
        if name.is_empty() || name.len() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "array name `{name}` must be 1..=255 bytes"
            )));
        }
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(Error::Format(format!("duplicate array `{name}`")));
        }
        if dims.len() > u8::MAX as usize || dims.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!(
                "array `{name}`: dims {dims:?} do not match payload"
            )));
        }
        self.arrays.push(Array {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Array {
                dims,
                data: ArrayData::F64(v),
                ..
            } => Ok((dims, v)),
            _ => Err(Error::Format(format!("array `{name}` is not f64"))),
        }
    }

    pub fn u16s(&self, name: &str) -> Result<(&[usize], &[u16])> {
        match self.get(name)? {
            Array {
                dims,
                data: ArrayData::U16(v),
                ..
            } => Ok((dims, v)),
            _ => Err(Error::Format(format!("array `{name}` is not u16"))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.get(name)? {
            Array {
                dims,
                data: ArrayData::U8(v),
                ..
            } => Ok((dims, v)),
            _ => Err(Error::Format(format!("array `{name}` is not u8"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        for a in &self.arrays {
            out.push(a.name.len() as u8);
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.tag());
            out.push(a.dims.len() as u8);
            for &d in &a.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let start = out.len();
            match &a.data {
                ArrayData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U16(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let height = u32::from_le_bytes(r.array("height")?);
        let width = u32::from_le_bytes(r.array("width")?);
        let mut file = BlockFile::new(height, width);
        while r.pos < bytes.len() {
            let name_len = r.take(1, "name length")?[0] as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(r.array("dims")?) as usize);
            }
            let n: usize = dims.iter().product();
            let width = match tag {
                0 => 8,
                1 => 2,
                2 => 1,
                t => {
                    return Err(Error::Format(format!(
                        "array `{name}`: unknown dtype tag {t}"
                    )))
                }
            };
            let nbytes = n
                .checked_mul(width)
                .ok_or_else(|| Error::Format(format!("array `{name}`: size overflow")))?;
            let payload = r.take(nbytes, "payload")?;
            let crc = u32::from_le_bytes(r.array("checksum")?);
            if crc32fast::hash(payload) != crc {
                return Err(Error::Format(format!("array `{name}`: checksum mismatch")));
            }
            let data = match tag {
                0 => ArrayData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                        .collect(),
                ),
                1 => ArrayData::U16(
                    payload
                        .chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().expect("chunk of 2")))
                        .collect(),
                ),
                _ => ArrayData::U8(payload.to_vec()),
            };
            file.push(&name, &dims, data)?;
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BlockFile {
        let mut f = BlockFile::new(2, 3);
        f.push(
            "a",
            &[2, 3],
            ArrayData::F64(vec![0.5, -1.0, 3.25, f64::MIN_POSITIVE, 0.0, 7.0]),
        )
        .unwrap();
        f.push("ids", &[3], ArrayData::U16(vec![1, 255, 65535]))
            .unwrap();
        f.push("m", &[2], ArrayData::U8(vec![0, 1])).unwrap();
        f
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        assert_eq!(BlockFile::from_bytes(&f.to_bytes()).unwrap(), f);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(BlockFile::from_bytes(&[]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(
            matches!(BlockFile::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic"))
        );
        assert!(BlockFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(BlockFile::from_bytes(&flipped).is_err());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"DGFS");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 3);
        // first block: name "a", f64, rank 2
        assert_eq!(&bytes[14..18], &[1, b'a', 0, 2]);
    }
}
