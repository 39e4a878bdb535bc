//! On-disk formats: the framed op log and the full snapshot file.
//!
//! Op-log frame: `[u32 LE length][payload][u64 LE FNV-1a(payload)]`, payload is
//! the JSON form of a [`LogEntry`]. A frame cut short at the end of the file is
//! a torn write and is discarded on load; a complete frame whose digest does not
//! match is corruption.
//!
//! Snapshot file: first line `{"seq":N}`, second line a JSON array of document
//! forms in key order.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::index::IndexError;
use crate::model::{fnv1a64, MetadataRecord, RecordKey};

const LEN_BYTES: usize = 4;
const DIGEST_BYTES: usize = 8;

/// A replicated index mutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum WriteOp {
    Upsert {
        doc: MetadataRecord,
    },
    Delete {
        key: RecordKey,
    },
    /// Publishes every earlier op to new snapshots.
    Commit,
}

impl WriteOp {
    pub fn upsert(doc: MetadataRecord) -> Self {
        WriteOp::Upsert { doc }
    }

    pub fn delete(key: RecordKey) -> Self {
        WriteOp::Delete { key }
    }

    /// The record key this op targets; `None` for commits.
    pub fn key(&self) -> Option<RecordKey> {
        match self {
            WriteOp::Upsert { doc } => Some(doc.key()),
            WriteOp::Delete { key } => Some(key.clone()),
            WriteOp::Commit => None,
        }
    }
}

/// One op-log entry: a mutation and its sequence number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub op: WriteOp,
}

impl LogEntry {
    pub fn new(seq: u64, op: WriteOp) -> Self {
        Self { seq, op }
    }
}

pub fn encode_frame(entry: &LogEntry) -> Vec<u8> {
    let payload = serde_json::to_vec(entry).expect("log entries always serialize");
    let mut frame = Vec::with_capacity(LEN_BYTES + payload.len() + DIGEST_BYTES);
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    frame
}

/// Decoded frames plus the byte length of the valid prefix.
#[derive(Debug)]
pub struct DecodedLog {
    pub entries: Vec<LogEntry>,
    pub valid_len: usize,
    pub torn_tail: bool,
}

pub fn decode_frames(bytes: &[u8]) -> Result<DecodedLog, IndexError> {
    let mut entries = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < LEN_BYTES {
            return Ok(DecodedLog { entries, valid_len: pos, torn_tail: true });
        }
        let len = u32::from_le_bytes(rest[..LEN_BYTES].try_into().unwrap()) as usize;
        let frame_len = LEN_BYTES + len + DIGEST_BYTES;
        if rest.len() < frame_len {
            return Ok(DecodedLog { entries, valid_len: pos, torn_tail: true });
        }
        let payload = &rest[LEN_BYTES..LEN_BYTES + len];
        let stored = u64::from_le_bytes(rest[LEN_BYTES + len..frame_len].try_into().unwrap());
        if stored != fnv1a64(payload) {
            return Err(IndexError::CorruptLog { offset: pos as u64, reason: "digest mismatch".into() });
        }
        let entry = serde_json::from_slice(payload)
            .map_err(|e| IndexError::CorruptLog { offset: pos as u64, reason: e.to_string() })?;
        entries.push(entry);
        pos += frame_len;
    }
    Ok(DecodedLog { entries, valid_len: pos, torn_tail: false })
}

/// Append handle on an op-log file.
pub(crate) struct OpLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl OpLogWriter {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn append(&mut self, entry: &LogEntry) -> io::Result<()> {
        self.out.write_all(&encode_frame(entry))
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()
    }

    /// Drops every frame; called once a snapshot covers them.
    pub fn reset(&mut self) -> io::Result<()> {
        self.out.flush()?;
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(&self.path)?;
        file.sync_all()?;
        self.out = BufWriter::new(OpenOptions::new().append(true).open(&self.path)?);
        Ok(())
    }
}

/// Reads an op-log file, truncating a torn final frame in place.
pub(crate) fn load_log(path: &Path) -> Result<Vec<LogEntry>, IndexError> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    }
    let decoded = decode_frames(&bytes)?;
    if decoded.torn_tail {
        tracing::warn!(path = %path.display(), valid = decoded.valid_len, "discarding torn op-log tail");
        OpenOptions::new().write(true).open(path)?.set_len(decoded.valid_len as u64)?;
    }
    Ok(decoded.entries)
}

/// Full doc set of an index as of `seq`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SnapshotImage {
    pub seq: u64,
    pub docs: Vec<MetadataRecord>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    seq: u64,
}

impl SnapshotImage {
    /// Docs must already be in key order for the output to be byte-stable.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&SnapshotHeader { seq: self.seq }).unwrap();
        out.push(b'\n');
        out.extend(serde_json::to_vec(&self.docs).unwrap());
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let text = std::str::from_utf8(bytes).map_err(|e| IndexError::CorruptSnapshot(e.to_string()))?;
        let (header, body) =
            text.split_once('\n').ok_or_else(|| IndexError::CorruptSnapshot("missing header line".into()))?;
        let header: SnapshotHeader =
            serde_json::from_str(header).map_err(|e| IndexError::CorruptSnapshot(format!("header: {e}")))?;
        let docs = serde_json::from_str(body.trim_end())
            .map_err(|e| IndexError::CorruptSnapshot(format!("documents: {e}")))?;
        Ok(Self { seq: header.seq, docs })
    }

    pub fn read(path: &Path) -> Result<Option<Self>, IndexError> {
        match fs::read(path) {
            Ok(bytes) => Self::from_bytes(&bytes).map(Some),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Write-temp-then-rename.
    pub fn write_atomic(&self, path: &Path) -> io::Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
