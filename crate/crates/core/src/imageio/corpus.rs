use super::{ImageBatch, ImageError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Ordered list of decodable images under a root directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub root_path: PathBuf,
    pub entries: Vec<String>,
    pub split: Split,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn path_of(&self, index: usize) -> PathBuf {
        self.root_path.join(&self.entries[index])
    }

    pub fn load(&self, index: usize) -> Result<ImageBatch, ImageError> {
        ImageBatch::open(self.path_of(index))
    }

    /// SHA-256 over every entry name and its file bytes, in manifest order.
    pub fn digest(&self) -> Result<String, ImageError> {
        let mut h = Sha256::new();
        for (i, name) in self.entries.iter().enumerate() {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(std::fs::read(self.path_of(i))?);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// The on-disk form is a bare JSON list of paths relative to the root.
    pub fn to_json(&self) -> Result<String, ImageError> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn from_json(root: impl Into<PathBuf>, split: Split, json: &str) -> Result<Self, ImageError> {
        let root_path = root.into();
        let entries: Vec<String> = serde_json::from_str(json)?;
        if entries.is_empty() {
            return Err(ImageError::EmptyCorpus(root_path.display().to_string()));
        }
        Ok(Self { root_path, entries, split })
    }
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Scans `root/<split>` when that directory exists, otherwise `root` itself.
///
/// Files that fail to decode are skipped with a warning.
pub fn load_corpus(root: impl AsRef<Path>, split: Split) -> Result<CorpusManifest, ImageError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(ImageError::MissingDirectory(root.display().to_string()));
    }
    let split_dir = root.join(split.as_str());
    let dir = if split_dir.is_dir() { split_dir } else { root.to_path_buf() };

    let mut names = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        if path.is_file() && is_png(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_owned());
            }
        }
    }
    names.sort();

    let entries: Vec<String> = names
        .into_iter()
        .filter(|name| match image::image_dimensions(dir.join(name)) {
            Ok(_) => true,
            Err(e) => {
                log::warn!("skipping undecodable image {}: {e}", dir.join(name).display());
                false
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(ImageError::EmptyCorpus(dir.display().to_string()));
    }
    Ok(CorpusManifest {
        root_path: dir,
        entries,
        split,
    })
}
