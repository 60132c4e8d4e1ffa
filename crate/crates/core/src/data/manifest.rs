//! Dataset manifests: a TOML file listing image, label and optional FOV
//! paths relative to the manifest's directory.
//!
//! ```toml
//! split = "train"
//! channels = 1
//!
//! [[samples]]
//! image = "images/000.png"
//! label = "labels/000.png"
//! fov = "fov/000.png"      # optional
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{load_image, load_labels, load_mask};
use super::LabeledSample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub channels: usize,
    pub samples: Vec<ManifestEntry>,
    /// Directory the sample paths are relative to.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Parses manifest text; paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Manifest(e.message().to_string()))?;
        if m.channels != 1 && m.channels != 3 {
            return Err(Error::Manifest(format!("channels must be 1 or 3, got {}", m.channels)));
        }
        if m.samples.is_empty() {
            return Err(Error::Manifest("no samples listed".into()));
        }
        m.base_dir = base_dir.into();
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, dir).map_err(|e| match e {
            Error::Manifest(msg) => Error::Manifest(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Checks that every referenced file exists before anything is decoded.
    pub fn check_files(&self) -> Result<()> {
        let missing: Vec<String> = self
            .samples
            .iter()
            .flat_map(|s| [Some(&s.image), Some(&s.label), s.fov.as_ref()])
            .flatten()
            .map(|p| self.resolve(p))
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(format!("missing files: {}", missing.join(", "))))
        }
    }

    /// Decodes every sample, checking channel count, congruence and label
    /// range.
    pub fn load_samples(&self, num_classes: usize) -> Result<Vec<LabeledSample>> {
        self.check_files()?;
        self.samples
            .iter()
            .enumerate()
            .map(|(i, entry)| {
                let id = entry.id.clone().unwrap_or_else(|| {
                    entry
                        .image
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| i.to_string())
                });
                let image = load_image(self.resolve(&entry.image))?;
                if image.shape().c() != self.channels {
                    return Err(Error::Manifest(format!(
                        "{}: {} channels, manifest declares {}",
                        entry.image.display(),
                        image.shape().c(),
                        self.channels
                    )));
                }
                let labels = load_labels(self.resolve(&entry.label), num_classes)?;
                let fov = match &entry.fov {
                    Some(p) => {
                        let (h, w, m) = load_mask(self.resolve(p))?;
                        if (h, w) != (labels.h, labels.w) {
                            return Err(Error::Data(format!("{}: FOV is {h}x{w}", p.display())));
                        }
                        Some(m)
                    }
                    None => None,
                };
                let sample = LabeledSample::new(id, image, labels, fov)?;
                sample.check_classes(num_classes)?;
                Ok(sample)
            })
            .collect()
    }
}
