//! Dataset manifests: the single source of truth for which paired
//! volume/label files exist, where they came from and which split they
//! belong to. Paths are stored relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fvol::{read_label, read_volume};
use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

pub const MANIFEST_VERSION: u32 = 1;

/// Flag set on synthetic pairs whose generated label has no liver voxels.
pub const FLAG_DEGENERATE_LABEL: &str = "degenerate_label";
pub const FLAG_TUMOR: &str = "tumor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Phantom,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub volume_path: String,
    pub label_path: String,
    pub provenance: Provenance,
    pub split: Split,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub flags: Vec<String>,
    /// Content hashes of every checkpoint that produced this record.
    #[serde(default)]
    pub lineage: BTreeMap<String, String>,
}

impl ManifestRecord {
    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub records: Vec<ManifestRecord>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            records: Vec::new(),
        }
    }
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same records with `prefix/` prepended to every path, for use from
    /// a parent directory.
    pub fn with_prefix(&self, prefix: &str) -> DatasetManifest {
        let join = |p: &str| format!("{}/{p}", prefix.trim_end_matches('/'));
        DatasetManifest {
            format_version: self.format_version,
            records: self
                .records
                .iter()
                .map(|r| ManifestRecord {
                    volume_path: join(&r.volume_path),
                    label_path: join(&r.label_path),
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn provenance_count(&self, p: Provenance) -> usize {
        self.records.iter().filter(|r| r.provenance == p).count()
    }

    /// Concatenate two manifests that live in the same directory.
    pub fn merged(&self, other: &DatasetManifest) -> Result<DatasetManifest> {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        let m = DatasetManifest::new(records);
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate manifest id `{}`", r.id)));
            }
        }
        Ok(())
    }

    /// Ids unique, every referenced file present under `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "unsupported manifest version {}",
                self.format_version
            )));
        }
        self.check_ids()?;
        for r in &self.records {
            for p in [&r.volume_path, &r.label_path] {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(Error::Validation(format!(
                        "record `{}` references missing file {}",
                        r.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.check_ids()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.check_ids()?;
        Ok(m)
    }
}

/// Load the volume/label pair referenced by `record`, resolving paths
/// against `base`.
pub fn load_pair(base: &Path, record: &ManifestRecord) -> Result<(Volume, LabelMap)> {
    let v = read_volume(&base.join(&record.volume_path))?;
    let l = read_label(&base.join(&record.label_path))?;
    l.same_grid(&v)?;
    Ok((v, l))
}

/// A manifest together with the directory its relative paths resolve from.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    pub base: PathBuf,
    pub manifest: DatasetManifest,
}

impl ManifestSource {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(ManifestSource { base, manifest })
    }

    pub fn pairs(&self, split: Split) -> Result<Vec<(Volume, LabelMap)>> {
        self.manifest.split(split).map(|r| load_pair(&self.base, r)).collect()
    }
}
