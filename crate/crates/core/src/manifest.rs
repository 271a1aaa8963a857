//! CSV image manifests: `image_path,label_id,split,role`.
//!
//! Image paths are stored relative to the manifest's directory. The image id
//! of a row is the file stem of its path.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Which view of an image a row holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Unmodified image.
    Orig,
    /// Foreground crop padded to a square.
    Disc,
    /// Image with the object region blurred, labeled as background.
    Bg,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Orig => "orig",
            Role::Disc => "disc",
            Role::Bg => "bg",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_path: String,
    pub label_id: usize,
    pub split: Split,
    pub role: Role,
}

impl ManifestRow {
    pub fn id(&self) -> String {
        image_id(Path::new(&self.image_path))
    }
}

/// File stem used as the image id (`images/c003_0012.ppm` → `c003_0012`).
pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory image paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, rows: Vec<ManifestRow>) -> Self {
        Manifest {
            root: root.into(),
            rows,
        }
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<ManifestRow>().enumerate() {
            let row = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(i + 2, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            rows.push(row);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, rows })
    }

    /// Writes the rows with paths relative to `path`'s directory, which must
    /// equal [`Manifest::root`].
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.image_path)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `1 + max label`, or 0 for an empty manifest.
    pub fn num_classes(&self) -> usize {
        self.rows.iter().map(|r| r.label_id + 1).max().unwrap_or(0)
    }

    pub fn filter(&self, keep: impl Fn(&ManifestRow) -> bool) -> Manifest {
        Manifest {
            root: self.root.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}
