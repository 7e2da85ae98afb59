//! Write-ahead log framing and log devices.
//!
//! Each record is `len: u32 LE | crc32: u32 LE | payload`, where `len` counts
//! the payload only. Recovery stops at the first record that is truncated or
//! fails its checksum; everything after it is discarded.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

pub fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits a log into intact payloads. The second value is the byte length of
/// the valid prefix.
pub fn unframe(log: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while log.len() - pos >= 8 {
        let len = u32::from_le_bytes(log[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(log[pos + 4..pos + 8].try_into().unwrap());
        let start = pos + 8;
        if log.len() - start < len {
            break;
        }
        let payload = &log[start..start + len];
        if crc32fast::hash(payload) != crc {
            break;
        }
        out.push(payload);
        pos = start + len;
    }
    (out, pos)
}

pub trait LogDevice: Send {
    fn append(&mut self, record: &[u8]) -> io::Result<()>;
    fn read_log(&mut self) -> io::Result<Vec<u8>>;
    /// Replaces the whole log with `contents`.
    fn reset_log(&mut self, contents: &[u8]) -> io::Result<()>;
    fn write_snapshot(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn read_snapshot(&mut self) -> io::Result<Option<Vec<u8>>>;
}

/// Log and snapshot files in a data directory.
#[derive(Debug)]
pub struct FileLog {
    dir: PathBuf,
    log: File,
    fsync: bool,
}

impl FileLog {
    pub fn open(dir: impl AsRef<Path>, fsync: bool) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(dir.join("wal.log"))?;
        Ok(FileLog { dir, log, fsync })
    }

    fn log_path(&self) -> PathBuf {
        self.dir.join("wal.log")
    }

    fn snapshot_path(&self) -> PathBuf {
        self.dir.join("snapshot.bin")
    }
}

impl LogDevice for FileLog {
    fn append(&mut self, record: &[u8]) -> io::Result<()> {
        self.log.write_all(record)?;
        if self.fsync {
            self.log.sync_data()?;
        }
        Ok(())
    }

    fn read_log(&mut self) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        File::open(self.log_path())?.read_to_end(&mut buf)?;
        Ok(buf)
    }

    fn reset_log(&mut self, contents: &[u8]) -> io::Result<()> {
        let tmp = self.dir.join("wal.log.tmp");
        fs::write(&tmp, contents)?;
        fs::rename(&tmp, self.log_path())?;
        self.log = OpenOptions::new()
            .append(true)
            .read(true)
            .open(self.log_path())?;
        Ok(())
    }

    fn write_snapshot(&mut self, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.dir.join("snapshot.bin.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            if self.fsync {
                f.sync_all()?;
            }
        }
        fs::rename(tmp, self.snapshot_path())
    }

    fn read_snapshot(&mut self) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.snapshot_path()) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Default)]
struct MemoryState {
    log: Vec<u8>,
    snapshot: Option<Vec<u8>>,
}

/// In-memory device. Clones share the same bytes, so a store reopened on a
/// clone sees exactly what the crashed instance made durable.
#[derive(Debug, Clone, Default)]
pub struct MemoryLog {
    inner: Arc<Mutex<MemoryState>>,
}

impl MemoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log_len(&self) -> usize {
        self.inner.lock().unwrap().log.len()
    }

    /// Cuts the log to `len` bytes, simulating a torn write.
    pub fn truncate(&self, len: usize) {
        self.inner.lock().unwrap().log.truncate(len);
    }
}

impl LogDevice for MemoryLog {
    fn append(&mut self, record: &[u8]) -> io::Result<()> {
        self.inner.lock().unwrap().log.extend_from_slice(record);
        Ok(())
    }

    fn read_log(&mut self) -> io::Result<Vec<u8>> {
        Ok(self.inner.lock().unwrap().log.clone())
    }

    fn reset_log(&mut self, contents: &[u8]) -> io::Result<()> {
        self.inner.lock().unwrap().log = contents.to_vec();
        Ok(())
    }

    fn write_snapshot(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.inner.lock().unwrap().snapshot = Some(bytes.to_vec());
        Ok(())
    }

    fn read_snapshot(&mut self) -> io::Result<Option<Vec<u8>>> {
        Ok(self.inner.lock().unwrap().snapshot.clone())
    }
}
