use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::index::write_atomic;

/// High-water timestamp of what has been pulled from one source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestCursor {
    pub source_id: String,
    pub last_sync_ms: i64,
}

/// Per-source cursors, one small JSON file each when backed by a directory.
///
/// Cursors only move forward; [`CursorStore::advance`] keeps the larger value.
pub struct CursorStore {
    dir: Option<PathBuf>,
    cursors: Mutex<BTreeMap<String, HarvestCursor>>,
}

impl CursorStore {
    pub fn in_memory() -> Self {
        Self { dir: None, cursors: Mutex::new(BTreeMap::new()) }
    }

    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut cursors = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let cursor: HarvestCursor = serde_json::from_slice(&fs::read(&path)?)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
                cursors.insert(cursor.source_id.clone(), cursor);
            }
        }
        Ok(Self { dir: Some(dir.to_path_buf()), cursors: Mutex::new(cursors) })
    }

    pub fn get(&self, source_id: &str) -> Option<HarvestCursor> {
        self.cursors.lock().get(source_id).cloned()
    }

    pub fn all(&self) -> Vec<HarvestCursor> {
        self.cursors.lock().values().cloned().collect()
    }

    /// Moves the cursor to `max(current, ms)`, creating it if absent, and persists it.
    pub fn advance(&self, source_id: &str, ms: i64) -> io::Result<HarvestCursor> {
        let mut cursors = self.cursors.lock();
        let last_sync_ms = cursors.get(source_id).map_or(ms, |c| c.last_sync_ms.max(ms));
        let cursor = HarvestCursor { source_id: source_id.to_string(), last_sync_ms };
        if let Some(dir) = &self.dir {
            write_atomic(&dir.join(format!("{source_id}.json")), &serde_json::to_vec(&cursor).unwrap())?;
        }
        cursors.insert(source_id.to_string(), cursor.clone());
        Ok(cursor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_and_durable() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = CursorStore::open(dir.path()).unwrap();
            assert_eq!(store.get("n1"), None);
            assert_eq!(store.advance("n1", 100).unwrap().last_sync_ms, 100);
            assert_eq!(store.advance("n1", 50).unwrap().last_sync_ms, 100);
            store.advance("n2", 0).unwrap();
        }
        let text = fs::read_to_string(dir.path().join("n1.json")).unwrap();
        assert_eq!(text, r#"{"source_id":"n1","last_sync_ms":100}"#);
        let store = CursorStore::open(dir.path()).unwrap();
        assert_eq!(store.get("n1").unwrap().last_sync_ms, 100);
        assert_eq!(store.all().len(), 2);
    }
}
