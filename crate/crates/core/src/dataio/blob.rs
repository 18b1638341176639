//! Named, checksummed little-endian arrays.
//!
//! Layout of one blob:
//! `name_len u32 | name utf8 | dtype u8 | ndim u32 | dims u64×ndim | crc32 u32 | data`.
//! The checksum covers `data` only.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(Error::Corrupt(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// In-memory blob. Values are held as f64; `dtype` selects the encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Blob {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { name: name.into(), dtype, shape, values }
    }

    fn encode_data(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * self.dtype.size());
        match self.dtype {
            DType::F32 => self.values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            DType::F64 => self.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let data = self.encode_data();
        w.write_all(&(self.name.len() as u32).to_le_bytes())?;
        w.write_all(self.name.as_bytes())?;
        w.write_all(&[self.dtype as u8])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for d in &self.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&crc32fast::hash(&data).to_le_bytes())?;
        w.write_all(&data)?;
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        4 + self.name.len() + 1 + 4 + 8 * self.shape.len() + 4 + self.values.len() * self.dtype.size()
    }

    /// Reads one blob; any short read or checksum mismatch is a corrupt-file
    /// error.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(Error::Corrupt(format!("blob name length {name_len}")));
        }
        let mut name = vec![0; name_len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Corrupt("blob name not utf-8".into()))?;
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag)?;
        let dtype = DType::from_tag(tag[0])?;
        let ndim = read_u32(r)? as usize;
        if ndim > 8 {
            return Err(Error::Corrupt(format!("blob `{name}` has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = count
            .and_then(|c| c.checked_mul(dtype.size()))
            .filter(|b| *b <= 1 << 40)
            .ok_or_else(|| Error::Corrupt(format!("blob `{name}` shape {shape:?} too large")))?;
        let crc = read_u32(r)?;
        let mut data = vec![0; bytes];
        read_exact(r, &mut data)?;
        if crc32fast::hash(&data) != crc {
            return Err(Error::Corrupt(format!("checksum mismatch in blob `{name}`")));
        }
        let values = match dtype {
            DType::F32 => data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        Ok(Self { name, dtype, shape, values })
    }
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt("unexpected end of file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
