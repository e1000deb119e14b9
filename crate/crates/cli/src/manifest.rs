//! Artifact manifest: every produced file with its content hash, grouped by
//! the stage that wrote it. Contains no timestamps or absolute paths, so two
//! runs of the same config produce identical manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use pulseprog::dataset::sha256_hex;

use crate::config::StageName;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileRecord {
    pub fn hash(out: &Path, rel: &str) -> anyhow::Result<Self> {
        let full = out.join(rel);
        let data = fs::read(&full).with_context(|| format!("reading artifact {}", full.display()))?;
        Ok(Self {
            path: rel.to_string(),
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: StageName,
    /// Hash of the stage's config and input artifacts.
    pub fingerprint: String,
    pub files: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Failure {
    pub stage: StageName,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// Sorted by stage order.
    pub stages: Vec<StageRecord>,
    pub failed: Option<Failure>,
}

/// State of a recorded stage's files on disk.
#[derive(Debug, PartialEq, Eq)]
pub enum Verified {
    Intact,
    Missing(PathBuf),
}

impl Manifest {
    pub fn new(seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed,
            stages: Vec::new(),
            failed: None,
        }
    }

    pub fn path(out: &Path) -> PathBuf {
        out.join(MANIFEST_FILE)
    }

    /// The manifest in `out`, or `None` if there is none yet.
    pub fn load(out: &Path) -> anyhow::Result<Option<Self>> {
        let path = Self::path(out);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
        };
        let m: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.format_version != FORMAT_VERSION {
            bail!("{}: unsupported manifest version {}", path.display(), m.format_version);
        }
        Ok(Some(m))
    }

    /// Write via a temporary file and rename, so a crash never leaves a
    /// truncated manifest.
    pub fn save(&self, out: &Path) -> anyhow::Result<()> {
        let path = Self::path(out);
        let tmp = out.join(format!(".{MANIFEST_FILE}.tmp"));
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn get(&self, stage: StageName) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    pub fn upsert(&mut self, record: StageRecord) {
        self.stages.retain(|r| r.stage != record.stage);
        self.stages.push(record);
        self.stages.sort_by_key(|r| r.stage);
    }

    pub fn remove(&mut self, stage: StageName) {
        self.stages.retain(|r| r.stage != stage);
    }
}

impl StageRecord {
    /// Check the recorded files. A file whose bytes no longer match its
    /// hash is an error naming the file; regenerating it silently would
    /// hide the corruption.
    pub fn verify(&self, out: &Path) -> anyhow::Result<Verified> {
        for f in &self.files {
            let full = out.join(&f.path);
            let data = match fs::read(&full) {
                Ok(d) => d,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Verified::Missing(full)),
                Err(e) => return Err(e).with_context(|| format!("reading {}", full.display())),
            };
            if data.len() as u64 != f.bytes || sha256_hex(&data) != f.sha256 {
                bail!(
                    "artifact {} does not match the sha256 recorded in {MANIFEST_FILE}; \
                     it is corrupt or was modified (delete it to regenerate)",
                    full.display()
                );
            }
        }
        Ok(Verified::Intact)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(out: &Path, stage: StageName, name: &str, body: &[u8]) -> StageRecord {
        fs::write(out.join(name), body).unwrap();
        StageRecord {
            stage,
            fingerprint: "f".into(),
            files: vec![FileRecord::hash(out, name).unwrap()],
        }
    }

    #[test]
    fn save_load_round_trip_keeps_stage_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new(7);
        m.upsert(record(dir.path(), StageName::Train, "b.csv", b"b"));
        m.upsert(record(dir.path(), StageName::Dataset, "a.csv", b"a"));
        m.save(dir.path()).unwrap();
        let back = Manifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(back, m);
        assert_eq!(back.stages[0].stage, StageName::Dataset);
    }

    #[test]
    fn verify_reports_missing_and_names_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = record(dir.path(), StageName::Dataset, "data.bin", b"payload");
        assert_eq!(r.verify(dir.path()).unwrap(), Verified::Intact);
        fs::write(dir.path().join("data.bin"), b"paylaod").unwrap();
        let err = r.verify(dir.path()).unwrap_err().to_string();
        assert!(err.contains("data.bin"), "{err}");
        fs::remove_file(dir.path().join("data.bin")).unwrap();
        assert!(matches!(r.verify(dir.path()).unwrap(), Verified::Missing(_)));
    }

    #[test]
    fn absent_manifest_loads_as_none() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Manifest::load(dir.path()).unwrap().is_none());
    }
}
