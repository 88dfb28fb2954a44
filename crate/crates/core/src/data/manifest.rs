//! Line-oriented dataset manifest: `# key = value` metadata followed by one
//! `path<TAB>label<TAB>split` record per line. Paths are relative to the
//! manifest's directory.

use crate::data::sample::{read_sample, SkeletonSequence};
use crate::data::transform::pad_repeat;
use crate::error::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub label: usize,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub spec_name: String,
    pub channels: usize,
    /// Canonical frame count; samples are cyclically padded to it on load.
    pub frames: usize,
    pub persons: usize,
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
    /// Directory the record paths are resolved against. Not serialized.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::invalid("manifest: need at least 2 classes"));
        }
        if self.frames == 0 || self.persons == 0 {
            return Err(Error::invalid("manifest: frames and persons must be positive"));
        }
        for r in &self.records {
            if r.label >= self.class_names.len() {
                return Err(Error::invalid(format!(
                    "manifest: record '{}' has label {} but only {} classes",
                    r.path,
                    r.label,
                    self.class_names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn split_records(&self, split: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Loads every sample of one split in manifest order, validating its
    /// shape against the metadata and padding it to the canonical length.
    pub fn load_split(&self, split: &str) -> Result<Vec<SkeletonSequence>> {
        let mut out = Vec::new();
        for record in self.split_records(split) {
            let path = self.base_dir.join(&record.path);
            let seq = read_sample(&path)?;
            if seq.channels() != self.channels || seq.persons() != self.persons {
                return Err(Error::invalid(format!(
                    "manifest: sample '{}' is C={} M={}, manifest says C={} M={}",
                    record.path,
                    seq.channels(),
                    seq.persons(),
                    self.channels,
                    self.persons
                )));
            }
            if seq.label != record.label {
                return Err(Error::invalid(format!(
                    "manifest: sample '{}' stores label {}, manifest says {}",
                    record.path, seq.label, record.label
                )));
            }
            out.push(pad_repeat(&seq, self.frames)?);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# skeleton = {}\n", self.spec_name));
        out.push_str(&format!("# channels = {}\n", self.channels));
        out.push_str(&format!("# frames = {}\n", self.frames));
        out.push_str(&format!("# persons = {}\n", self.persons));
        out.push_str(&format!("# classes = {}\n", self.class_names.join(",")));
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\n", r.path, r.label, r.split));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, base_dir)
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self> {
        let mut spec_name = None;
        let mut channels = None;
        let mut frames = None;
        let mut persons = None;
        let mut class_names = None;
        let mut records = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let (key, value) = meta.split_once('=').ok_or_else(|| {
                    Error::format(format!(
                        "manifest line {}: metadata must be '# key = value'",
                        lineno + 1
                    ))
                })?;
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "skeleton" => spec_name = Some(value.to_string()),
                    "channels" => channels = Some(parse_usize(value, lineno, "channels")?),
                    "frames" => frames = Some(parse_usize(value, lineno, "frames")?),
                    "persons" => persons = Some(parse_usize(value, lineno, "persons")?),
                    "classes" => {
                        class_names =
                            Some(value.split(',').map(|s| s.trim().to_string()).collect())
                    }
                    other => {
                        return Err(Error::format(format!(
                            "manifest line {}: unknown metadata key '{other}'",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let mut fields = line.split('\t');
            let (path, label, split) = match (fields.next(), fields.next(), fields.next()) {
                (Some(p), Some(l), Some(s)) if fields.next().is_none() => (p, l, s),
                _ => {
                    return Err(Error::format(format!(
                        "manifest line {}: expected 'path<TAB>label<TAB>split'",
                        lineno + 1
                    )))
                }
            };
            records.push(ManifestRecord {
                path: path.to_string(),
                label: parse_usize(label, lineno, "label")?,
                split: split.to_string(),
            });
        }
        let manifest = DatasetManifest {
            spec_name: spec_name.ok_or_else(|| Error::format("manifest: missing '# skeleton'"))?,
            channels: channels.ok_or_else(|| Error::format("manifest: missing '# channels'"))?,
            frames: frames.ok_or_else(|| Error::format("manifest: missing '# frames'"))?,
            persons: persons.ok_or_else(|| Error::format("manifest: missing '# persons'"))?,
            class_names: class_names
                .ok_or_else(|| Error::format("manifest: missing '# classes'"))?,
            records,
            base_dir,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Labels for a list of score-file ids, matched against record file
    /// stems within one split.
    pub fn labels_for_ids(&self, split: &str, ids: &[String]) -> Result<Vec<usize>> {
        let mut by_stem = std::collections::BTreeMap::new();
        for r in self.split_records(split) {
            let stem = Path::new(&r.path)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(&r.path)
                .to_string();
            by_stem.insert(stem, r.label);
        }
        ids.iter()
            .map(|id| {
                by_stem.get(id).copied().ok_or_else(|| {
                    Error::invalid(format!("manifest: no record in split '{split}' for id '{id}'"))
                })
            })
            .collect()
    }
}

fn parse_usize(value: &str, lineno: usize, what: &str) -> Result<usize> {
    value.trim().parse().map_err(|_| {
        Error::format(format!(
            "manifest line {}: bad {what} '{value}'",
            lineno + 1
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = DatasetManifest {
            spec_name: "toy9".into(),
            channels: 3,
            frames: 32,
            persons: 1,
            class_names: vec!["still".into(), "wave".into(), "walk".into(), "spin".into()],
            records: vec![
                ManifestRecord {
                    path: "train_c0_0000.skl".into(),
                    label: 0,
                    split: "train".into(),
                },
                ManifestRecord {
                    path: "val_c1_0000.skl".into(),
                    label: 1,
                    split: "val".into(),
                },
            ],
            base_dir: PathBuf::from("."),
        };
        let text = m.to_text();
        let back = DatasetManifest::parse(&text, PathBuf::from(".")).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.split_records("train").len(), 1);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let text = "# skeleton = toy9\n# channels = 3\n# frames = 8\n# persons = 1\n# classes = a,b\nx.skl\t2\ttrain\n";
        assert!(DatasetManifest::parse(text, PathBuf::from(".")).is_err());
    }

    #[test]
    fn unknown_metadata_key_rejected() {
        let text = "# skeleton = toy9\n# bogus = 1\n";
        assert!(DatasetManifest::parse(text, PathBuf::from(".")).is_err());
    }
}
