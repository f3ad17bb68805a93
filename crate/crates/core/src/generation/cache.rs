//! Generations file keyed by (record id, setting, sample index).

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use super::{GeneratedExplanation, SettingId};
use crate::claims::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};

type Key = (String, SettingId, usize);

/// In-memory view of a generations file.
#[derive(Debug, Default, Clone)]
pub struct GenerationCache {
    rows: BTreeMap<Key, GeneratedExplanation>,
}

impl GenerationCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a generations file; a missing file gives an empty cache.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cache = GenerationCache::new();
        if path.exists() {
            let rows: Vec<GeneratedExplanation> = read_jsonl(path)?;
            cache.insert_all(rows);
        }
        Ok(cache)
    }

    /// Writes all rows in canonical order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<&GeneratedExplanation> = self.rows.values().collect();
        write_jsonl(&rows, path)
    }

    /// Appends rows to an existing file without rewriting it.
    pub fn append(rows: &[GeneratedExplanation], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(format!("appending {}", path.display()), e))
    }

    pub fn insert_all(&mut self, rows: impl IntoIterator<Item = GeneratedExplanation>) {
        for r in rows {
            self.rows
                .insert((r.record_id.clone(), r.setting, r.sample_index), r);
        }
    }

    /// All `n` samples for a (record, setting), or `None` if any is missing.
    pub fn lookup(
        &self,
        record_id: &str,
        setting: SettingId,
        n: usize,
    ) -> Option<Vec<GeneratedExplanation>> {
        (0..n)
            .map(|i| self.rows.get(&(record_id.to_string(), setting, i)).cloned())
            .collect()
    }

    /// Every cached sample for a (record, setting), in sample order.
    pub fn samples(&self, record_id: &str, setting: SettingId) -> Vec<&GeneratedExplanation> {
        let lo = (record_id.to_string(), setting, 0);
        let hi = (record_id.to_string(), setting, usize::MAX);
        self.rows.range(lo..=hi).map(|(_, v)| v).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &GeneratedExplanation> {
        self.rows.values()
    }
}
