//! Checksummed frame log.
//!
//! ```text
//! SEGMENT := FRAME*
//! FRAME   := LEN:u32le CRC32(PAYLOAD):u32le PAYLOAD
//! ```
//!
//! A frame cut short by a crash is a torn tail and is dropped on recovery.
//! A complete frame whose checksum does not match is corruption.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::StoreError;

pub(crate) const HEADER_LEN: usize = 8;

pub(crate) fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

pub(crate) enum ReadOutcome {
    /// Every byte parsed into frames.
    Clean,
    /// The file ends inside a frame starting at this offset.
    TornTail(u64),
}

/// Calls `visit(offset, payload)` for each frame. `visit` returns `false` to stop early.
pub(crate) fn read_frames(
    path: &Path,
    mut visit: impl FnMut(u64, &[u8]) -> Result<bool, StoreError>,
) -> Result<ReadOutcome, StoreError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| StoreError::io(path, e))?;
    let mut off = 0usize;
    while off < bytes.len() {
        if bytes.len() - off < HEADER_LEN {
            return Ok(ReadOutcome::TornTail(off as u64));
        }
        let len = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        let crc = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().expect("4 bytes"));
        let start = off + HEADER_LEN;
        if bytes.len() - start < len {
            return Ok(ReadOutcome::TornTail(off as u64));
        }
        let payload = &bytes[start..start + len];
        if crc32fast::hash(payload) != crc {
            return Err(StoreError::CorruptSegment {
                path: path.display().to_string(),
                offset: off as u64,
            });
        }
        if !visit(off as u64, payload)? {
            return Ok(ReadOutcome::Clean);
        }
        off = start + len;
    }
    Ok(ReadOutcome::Clean)
}

pub(crate) fn truncate(path: &Path, len: u64) -> Result<(), StoreError> {
    let f = OpenOptions::new()
        .write(true)
        .open(path)
        .map_err(|e| StoreError::io(path, e))?;
    f.set_len(len).map_err(|e| StoreError::io(path, e))?;
    f.sync_all().map_err(|e| StoreError::io(path, e))
}

pub(crate) fn segment_name(index: u32) -> String {
    format!("segment-{index}.log")
}

pub(crate) fn parse_segment_name(name: &str) -> Option<u32> {
    name.strip_prefix("segment-")?.strip_suffix(".log")?.parse().ok()
}

/// Segments in a partition directory, ascending by index.
pub(crate) fn list_segments(dir: &Path) -> Result<Vec<(u32, PathBuf)>, StoreError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| StoreError::io(dir, e))? {
        let entry = entry.map_err(|e| StoreError::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(parse_segment_name) {
            out.push((i, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Append handle for one log file.
pub(crate) struct SegmentWriter {
    pub(crate) path: PathBuf,
    pub(crate) index: u32,
    pub(crate) frames: u64,
    file: File,
}

impl SegmentWriter {
    pub(crate) fn open(path: PathBuf, index: u32, frames: u64) -> Result<SegmentWriter, StoreError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        Ok(SegmentWriter {
            path,
            index,
            frames,
            file,
        })
    }

    pub(crate) fn len(&self) -> Result<u64, StoreError> {
        Ok(self
            .file
            .metadata()
            .map_err(|e| StoreError::io(&self.path, e))?
            .len())
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) -> Result<(), StoreError> {
        self.file
            .write_all(bytes)
            .map_err(|e| StoreError::io(&self.path, e))
    }

    pub(crate) fn sync(&mut self) -> Result<(), StoreError> {
        self.file.sync_data().map_err(|e| StoreError::io(&self.path, e))
    }
}
