//! Little-endian binary IO helpers shared by the snapshot and checkpoint
//! formats. Readers treat any structural surprise (bad magic, short reads,
//! trailing bytes) as a format error so corrupt artifacts fail loudly.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug)]
pub(crate) struct Reader<R> {
    inner: R,
    context: String,
}

impl Reader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingInput(format!(
                    "{} does not exist",
                    path.display()
                )))
            }
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            inner: BufReader::new(file),
            context: path.display().to_string(),
        })
    }
}

impl<R: Read> Reader<R> {
    fn fail(&self, what: &str) -> Error {
        Error::Format(format!("{}: {what}", self.context))
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let mut got = vec![0u8; magic.len()];
        self.inner
            .read_exact(&mut got)
            .map_err(|_| self.fail("file too short for its magic header"))?;
        if got != magic {
            return Err(self.fail(&format!(
                "bad magic {:02x?}, expected {:02x?}",
                got, magic
            )));
        }
        Ok(())
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.fail(&format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn i64(&mut self, what: &str) -> Result<i64> {
        Ok(self.u64(what)? as i64)
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_bits(self.u32(what)?))
    }

    pub fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        if len > 1 << 20 {
            return Err(self.fail(&format!("implausible {what} length {len}")));
        }
        let raw = self.bytes(len, what)?;
        String::from_utf8(raw).map_err(|_| self.fail(&format!("{what} is not valid UTF-8")))
    }

    /// Asserts the stream is fully consumed.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.fail("trailing bytes after the last field")),
            Err(e) => Err(e.into()),
        }
    }
}

pub(crate) struct Writer {
    inner: BufWriter<File>,
}

impl Writer {
    pub fn magic(&mut self, m: &[u8]) -> Result<()> {
        self.inner.write_all(m)?;
        Ok(())
    }
    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }
    pub fn u16(&mut self, v: u16) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    pub fn i64(&mut self, v: i64) -> Result<()> {
        self.u64(v as u64)
    }
    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.u32(v.to_bits())
    }
    pub fn f32_slice(&mut self, vs: &[f32]) -> Result<()> {
        for &v in vs {
            self.f32(v)?;
        }
        Ok(())
    }
    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }
    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }
}

/// Writes through a temporary sibling file and renames into place, so a
/// crash mid-write never leaves a half-written artifact at `path`.
pub(crate) fn atomic_write(
    path: &Path,
    body: impl FnOnce(&mut Writer) -> Result<()>,
) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("bin")
    ));
    let mut writer = Writer {
        inner: BufWriter::new(File::create(&tmp)?),
    };
    let run = body(&mut writer).and_then(|()| {
        writer.inner.flush()?;
        writer.inner.get_ref().sync_all()?;
        Ok(())
    });
    match run {
        Ok(()) => {
            std::fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}
