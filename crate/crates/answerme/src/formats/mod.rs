//! On-disk artifacts: vocabulary, checkpoints, example records and the
//! write-once file helper every command uses.

pub mod checkpoint;
pub mod records;

use std::fs;
use std::io::Write;
use std::path::Path;

use answerme_core::text::Vocab;

use crate::error::{AppError, Result};

/// Writes `bytes` to a new file. An existing file with identical content is
/// accepted (reruns are idempotent); anything else is refused.
pub fn write_once(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    match fs::OpenOptions::new().write(true).create_new(true).open(path) {
        Ok(mut f) => f.write_all(bytes).map_err(|e| AppError::io(path, e)),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            let old = fs::read(path).map_err(|e| AppError::io(path, e))?;
            if old == bytes {
                Ok(())
            } else {
                Err(AppError::Overwrite { path: path.to_path_buf() })
            }
        }
        Err(e) => Err(AppError::io(path, e)),
    }
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AppError::io(path, e))
}

/// One token per line, in id order.
pub fn vocab_to_text(vocab: &Vocab) -> String {
    let mut s = String::new();
    for t in vocab.tokens() {
        s.push_str(t);
        s.push('\n');
    }
    s
}

pub fn vocab_from_text(path: &Path, text: &str) -> Result<Vocab> {
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Vocab::from_tokens(tokens).map_err(|e| AppError::format(path, e.to_string()))
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    vocab_from_text(path, &text)
}

/// Little-endian cursor over a byte buffer with format errors naming the file.
pub(crate) struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        Self { path, buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(AppError::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.bytes(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }

    pub fn expect(&mut self, magic: &[u8]) -> Result<()> {
        if self.bytes(magic.len()).ok() != Some(magic) {
            return Err(self.err("bad magic bytes"));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }

    pub fn err(&self, reason: &str) -> AppError {
        AppError::format(self.path, reason)
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}
