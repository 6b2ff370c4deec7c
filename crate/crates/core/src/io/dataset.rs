//! Dataset index: which volumes exist, their masks, vendor and split.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::metaimage::{read_mask, read_volume};
use crate::io::volume::{LabelMask, Vendor, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub volume: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub vendor: Vendor,
    pub split: Split,
}

impl IndexEntry {
    /// Stable identifier derived from the volume file name.
    pub fn id(&self) -> String {
        self.volume
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Entries plus the directory that relative paths are resolved against.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    pub root: PathBuf,
}

impl DatasetIndex {
    pub fn new(entries: Vec<IndexEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        let index = DatasetIndex {
            entries,
            root: root.into(),
        };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.volume) {
                return Err(Error::Config(format!(
                    "duplicate volume path {}",
                    e.volume.display()
                )));
            }
            if let Some(m) = &e.mask {
                if !seen.insert(m) {
                    return Err(Error::Config(format!("duplicate mask path {}", m.display())));
                }
            }
            if e.split == Split::Train && e.mask.is_none() {
                return Err(Error::Config(format!(
                    "train entry {} has no mask",
                    e.volume.display()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<IndexEntry> =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetIndex::new(entries, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(&self.entries)
            .map_err(|e| Error::json("dataset index", e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn train_entries(&self) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    /// New index keeping only entries that satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&IndexEntry) -> bool) -> DatasetIndex {
        DatasetIndex {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
            root: self.root.clone(),
        }
    }

    pub fn load_volume(&self, entry: &IndexEntry) -> Result<Volume> {
        let path = self.resolve(&entry.volume);
        if !path.exists() {
            return Err(Error::Missing(path));
        }
        let mut v = read_volume(&path)?;
        v.meta
            .entry("vendor".into())
            .or_insert_with(|| entry.vendor.to_string());
        Ok(v)
    }

    pub fn load_mask(&self, entry: &IndexEntry) -> Result<Option<LabelMask>> {
        match &entry.mask {
            None => Ok(None),
            Some(m) => {
                let path = self.resolve(m);
                if !path.exists() {
                    return Err(Error::Missing(path));
                }
                Ok(Some(read_mask(&path)?))
            }
        }
    }

    /// Loads every train entry as a (volume, mask) pair, in index order.
    pub fn load_train_pairs(&self) -> Result<Vec<(Volume, LabelMask)>> {
        let mut out = Vec::new();
        for e in self.train_entries() {
            let v = self.load_volume(e)?;
            let m = self
                .load_mask(e)?
                .ok_or_else(|| Error::Config(format!("train entry {} has no mask", e.id())))?;
            m.check_pairs_with(&v)?;
            out.push((v, m));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: &str, m: Option<&str>, split: Split) -> IndexEntry {
        IndexEntry {
            volume: v.into(),
            mask: m.map(Into::into),
            vendor: Vendor::Phantom,
            split,
        }
    }

    #[test]
    fn duplicate_paths_rejected() {
        let r = DatasetIndex::new(
            vec![
                entry("a.mhd", Some("am.mhd"), Split::Train),
                entry("a.mhd", Some("bm.mhd"), Split::Train),
            ],
            ".",
        );
        assert!(r.is_err());
    }

    #[test]
    fn train_entry_requires_mask() {
        assert!(DatasetIndex::new(vec![entry("a.mhd", None, Split::Train)], ".").is_err());
        assert!(DatasetIndex::new(vec![entry("a.mhd", None, Split::Test)], ".").is_ok());
    }

    #[test]
    fn json_roundtrip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let idx = DatasetIndex::new(
            vec![
                entry("a.mhd", Some("a_mask.mhd"), Split::Train),
                entry("b.mhd", None, Split::Test),
            ],
            dir.path(),
        )
        .unwrap();
        let p = dir.path().join("index.json");
        idx.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"split\": \"train\""));
        assert!(!text.contains("\"mask\": null"));
        let back = DatasetIndex::load(&p).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.resolve(Path::new("a.mhd")), dir.path().join("a.mhd"));
    }
}
