//! JSON Lines corpus manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utt_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: String,
    pub group_id: String,
    pub duration_s: f64,
}

/// Ordered records with unique ids, plus the directory paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utt_id {:?}", r.utt_id)));
            }
            if !(r.duration_s > 0.0 && r.duration_s.is_finite()) {
                return Err(Error::Manifest(format!(
                    "{}: duration_s must be positive, got {}",
                    r.utt_id, r.duration_s
                )));
            }
        }
        Ok(Self {
            root: root.into(),
            records,
        })
    }

    /// Same root, different records. Used by the splitters.
    pub fn with_records(&self, records: Vec<UtteranceRecord>) -> Self {
        Self {
            root: self.root.clone(),
            records,
        }
    }

    /// Reads a JSONL manifest and checks every audio path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: UtteranceRecord = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let m = Self::new(root, records)?;
        for r in &m.records {
            if !m.resolve(r).is_file() {
                return Err(Error::Manifest(format!(
                    "{}: audio file {} not found",
                    r.utt_id,
                    m.resolve(r).display()
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, r: &UtteranceRecord) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<UtteranceRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, UtteranceRecord> {
        self.records.iter()
    }

    /// Sorted distinct labels.
    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Record indices per label, in manifest order.
    pub fn by_label(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.label.as_str()).or_default().push(i);
        }
        map
    }
}

impl<'a> IntoIterator for &'a Manifest {
    type Item = &'a UtteranceRecord;
    type IntoIter = std::slice::Iter<'a, UtteranceRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: &str) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: id.into(),
            path: format!("{id}.wav"),
            label: label.into(),
            group_id: "g".into(),
            duration_s: 1.0,
        }
    }

    #[test]
    fn rejects_duplicates_and_bad_durations() {
        assert!(Manifest::new(".", vec![rec("a", "x"), rec("a", "y")]).is_err());
        let mut r = rec("a", "x");
        r.duration_s = 0.0;
        assert!(Manifest::new(".", vec![r]).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_missing_audio() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(dir.path(), vec![rec("a", "x"), rec("b", "y")]).unwrap();
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"utt_id":"a","path":"a.wav","label":"x","group_id":"g","duration_s":1.0}"#));
        assert!(matches!(Manifest::load(&path), Err(Error::Manifest(_))));
        fs::write(dir.path().join("a.wav"), b"").unwrap();
        fs::write(dir.path().join("b.wav"), b"").unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), m);
        assert_eq!(m.labels(), vec!["x", "y"]);
    }
}
