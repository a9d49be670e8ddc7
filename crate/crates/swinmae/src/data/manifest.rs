//! Manifest loading.
//!
//! A manifest is UTF-8 JSON-lines: one object per record with keys
//! {id, path, modality, class_label?, mask_path?}. An optional leading meta
//! object (recognized by the absence of "id") may set
//! {class_count?, target_size?, policy?}.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::splits::SplitPolicy;
use super::Modality;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_size: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<SplitPolicy>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Number of distinct class indices (background included for
    /// segmentation corpora). Inferred from labels when the meta line is
    /// absent.
    pub class_count: usize,
    pub target_size: Option<(usize, usize)>,
    /// Explicit split-policy override; otherwise the entry-count rule picks.
    pub policy: Option<SplitPolicy>,
    /// Directory all relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Entries restricted to one modality.
    pub fn filter_modality(&self, modality: Modality) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .filter(|e| e.modality == modality)
                .cloned()
                .collect(),
            class_count: self.class_count,
            target_size: self.target_size,
            policy: self.policy,
            root: self.root.clone(),
        }
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut meta = ManifestMeta::default();
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut first_object = true;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| Error::ManifestParse {
                path: path.to_path_buf(),
                line: lineno,
                msg: e.to_string(),
            })?;
        if first_object && value.get("id").is_none() {
            meta = serde_json::from_value(value).map_err(|e| Error::ManifestParse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("invalid meta line: {e}"),
            })?;
            first_object = false;
            continue;
        }
        first_object = false;
        let entry: ManifestEntry =
            serde_json::from_value(value).map_err(|e| Error::ManifestParse {
                path: path.to_path_buf(),
                line: lineno,
                msg: e.to_string(),
            })?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::DuplicateId(entry.id));
        }
        if let Some(mask) = &entry.mask_path {
            let resolved = if mask.is_absolute() {
                mask.clone()
            } else {
                root.join(mask)
            };
            if !resolved.exists() {
                return Err(Error::DanglingMask {
                    id: entry.id,
                    path: resolved,
                });
            }
        }
        entries.push(entry);
    }

    let max_label = entries.iter().filter_map(|e| e.class_label).max();
    let class_count = match (meta.class_count, max_label) {
        (Some(k), Some(max)) => {
            if max >= k {
                return Err(Error::ManifestParse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("class label {max} exceeds declared class_count {k}"),
                });
            }
            k
        }
        (Some(k), None) => k,
        (None, Some(max)) => max + 1,
        (None, None) => 0,
    };

    Ok(DatasetManifest {
        entries,
        class_count,
        target_size: meta.target_size,
        policy: meta.policy,
        root,
    })
}

/// Serialize a manifest back to JSON-lines (meta line first).
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    let meta = ManifestMeta {
        class_count: Some(manifest.class_count),
        target_size: manifest.target_size,
        policy: manifest.policy,
    };
    out.push_str(&serde_json::to_string(&meta).expect("meta serializes"));
    out.push('\n');
    for e in &manifest.entries {
        out.push_str(&serde_json::to_string(e).expect("entry serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        p
    }

    #[test]
    fn well_formed_manifest_loads() {
        let dir = tempdir();
        let p = write_lines(
            &dir,
            "m.jsonl",
            &[
                r#"{"id":"a","path":"a.png","modality":"MR"}"#,
                r#"{"id":"b","path":"b.png","modality":"CT_PET","class_label":1}"#,
                r#"{"id":"c","path":"c.png","modality":"US","class_label":2}"#,
            ],
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.class_count, 3);
        assert_eq!(m.target_size, None);
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempdir();
        let p = write_lines(
            &dir,
            "m.jsonl",
            &[
                r#"{"id":"a","path":"a.png","modality":"MR"}"#,
                r#"{"id":"a","path":"b.png","modality":"MR"}"#,
            ],
        );
        match load_manifest(&p) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn declared_class_count_accepts_consistent_labels() {
        let dir = tempdir();
        let p = write_lines(
            &dir,
            "m.jsonl",
            &[
                r#"{"class_count":3}"#,
                r#"{"id":"a","path":"a.png","modality":"MR","class_label":0}"#,
                r#"{"id":"b","path":"b.png","modality":"MR","class_label":1}"#,
                r#"{"id":"c","path":"c.png","modality":"MR","class_label":2}"#,
            ],
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.class_count, 3);

        let p2 = write_lines(
            &dir,
            "m2.jsonl",
            &[
                r#"{"class_count":2}"#,
                r#"{"id":"a","path":"a.png","modality":"MR","class_label":2}"#,
            ],
        );
        assert!(load_manifest(&p2).is_err());
    }

    #[test]
    fn parse_error_reports_line_number() {
        let dir = tempdir();
        let p = write_lines(
            &dir,
            "m.jsonl",
            &[r#"{"id":"a","path":"a.png","modality":"MR"}"#, "not json"],
        );
        match load_manifest(&p) {
            Err(Error::ManifestParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_mask_path_rejected() {
        let dir = tempdir();
        let p = write_lines(
            &dir,
            "m.jsonl",
            &[r#"{"id":"a","path":"a.png","modality":"MR","mask_path":"missing.png"}"#],
        );
        assert!(matches!(load_manifest(&p), Err(Error::DanglingMask { .. })));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempdir();
        let p = write_lines(
            &dir,
            "m.jsonl",
            &[
                r#"{"class_count":4,"target_size":[64,64],"policy":"KFOLD_CV"}"#,
                r#"{"id":"a","path":"a.png","modality":"SYNTH","class_label":1}"#,
            ],
        );
        let m = load_manifest(&p).unwrap();
        let p2 = dir.join("copy.jsonl");
        write_manifest(&m, &p2).unwrap();
        let m2 = load_manifest(&p2).unwrap();
        assert_eq!(m.entries, m2.entries);
        assert_eq!(m.class_count, m2.class_count);
        assert_eq!(m.policy, m2.policy);
    }

    fn tempdir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "swinmae-manifest-test-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
