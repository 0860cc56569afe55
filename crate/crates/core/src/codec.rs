//! Little-endian byte cursor and atomic file writes shared by the model and
//! dataset formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::DecodeError;
use crate::{Error, Result};

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8, DecodeError> {
        Ok(self.array::<1>(what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Checks magic and version of a `MAGIC | u32 version` header.
    pub(crate) fn header(&mut self, magic: [u8; 4], version: u32) -> Result<(), DecodeError> {
        let found = self.array::<4>("magic")?;
        if found != magic {
            return Err(DecodeError::BadMagic { expected: magic, found });
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(DecodeError::UnsupportedVersion(v));
        }
        Ok(())
    }

    /// `u32 length + UTF-8` JSON block.
    pub(crate) fn json<T: serde::de::DeserializeOwned>(&mut self, what: &'static str) -> Result<T, DecodeError> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        serde_json::from_slice(raw).map_err(|e| DecodeError::Descriptor(format!("{what}: {e}")))
    }

    pub(crate) fn finish(self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

pub(crate) fn put_json<T: serde::Serialize>(out: &mut Vec<u8>, value: &T) -> Result<()> {
    let json = serde_json::to_vec(value).map_err(|e| Error::invalid(format!("descriptor: {e}")))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::invalid("descriptor too large"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(())
}

/// Writes to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reader_reports_truncation() {
        let mut r = ByteReader::new(&[1, 0, 0]);
        assert_eq!(r.u16("a").unwrap(), 1);
        assert_eq!(r.u16("b"), Err(DecodeError::Truncated("b")));
    }

    #[test]
    fn header_checks() {
        let mut buf = b"GKDM".to_vec();
        buf.extend_from_slice(&2u32.to_le_bytes());
        assert_eq!(
            ByteReader::new(&buf).header(*b"GKDM", 1),
            Err(DecodeError::UnsupportedVersion(2))
        );
        assert!(matches!(
            ByteReader::new(&buf).header(*b"GKDD", 1),
            Err(DecodeError::BadMagic { .. })
        ));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
