//! Little-endian binary framing shared by the model and index files.
//!
//! Every file is `magic[4] | version:u16 | reserved:u16 | body | crc32:u32`,
//! where the checksum covers everything before it. See `docs/formats.md`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch")]
    Checksum,
    #[error("unexpected end of data")]
    Truncated,
    #[error("invalid utf-8 string")]
    Utf8,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: [u8; 4], version: u16) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn len(&mut self, n: usize) -> &mut Self {
        self.u32(u32::try_from(n).expect("length exceeds u32"))
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        self.len(v.len());
        for x in v {
            self.f64(*x);
        }
        self
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub struct Decoder<'a> {
    body: &'a [u8],
    pos: usize,
    pub version: u16,
}

impl<'a> Decoder<'a> {
    /// Validates magic, version ceiling and checksum.
    pub fn new(data: &'a [u8], magic: [u8; 4], max_version: u16) -> Result<Self, CodecError> {
        if data.len() < 12 {
            return Err(CodecError::Truncated);
        }
        if data[..4] != magic {
            return Err(CodecError::BadMagic { expected: magic });
        }
        let (payload, crc) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(CodecError::Checksum);
        }
        let version = u16::from_le_bytes([data[4], data[5]]);
        if version == 0 || version > max_version {
            return Err(CodecError::UnsupportedVersion(version));
        }
        Ok(Self {
            body: payload,
            pos: 8,
            version,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated)?;
        if end > self.body.len() {
            return Err(CodecError::Truncated);
        }
        let out = &self.body[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn len(&mut self) -> Result<usize, CodecError> {
        Ok(self.u32()? as usize)
    }

    pub fn str(&mut self) -> Result<String, CodecError> {
        let n = self.len()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CodecError::Utf8)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, CodecError> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<(), CodecError> {
        if self.pos != self.body.len() {
            return Err(CodecError::Invalid("trailing bytes".into()));
        }
        Ok(())
    }
}
