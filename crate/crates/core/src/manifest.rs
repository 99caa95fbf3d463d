//! Line-delimited dataset manifests.
//!
//! Three row kinds cover the three synthetic datasets: sorting triplets,
//! prompt-count rows, and density rows. Rows are one JSON object per line;
//! parse failures report the 1-based line number. Writers are append-only
//! for the duration of a build.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {msg}")]
    Line {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("manifest {0} is empty")]
    ManifestEmpty(String),
}

/// One ranked triplet: three image paths with rank labels (0=fewer,
/// 1=reference, 2=more).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SortingRow {
    pub triplet_id: u64,
    pub paths: [String; 3],
    pub ranks: [u8; 3],
    /// Oracle backends know the true counts; generated data does not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_counts: Option<[u32; 3]>,
}

impl SortingRow {
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = [false; 3];
        for &r in &self.ranks {
            if r > 2 {
                return Err(format!("rank {r} outside {{0,1,2}}"));
            }
            seen[r as usize] = true;
        }
        if seen != [true; 3] {
            return Err(format!("ranks {:?} are not a permutation of {{0,1,2}}", self.ranks));
        }
        Ok(())
    }
}

/// One prompt-count training row. `prompt_count` is the count stated in the
/// generation prompt (the pseudo label); `true_count` is only known for
/// oracle-rendered images.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CountRow {
    pub path: String,
    pub prompt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_count: Option<u32>,
    pub kept: bool,
}

/// One density-classification row; label 0=no_crowd, 1=sparse, 2=dense.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DensityRow {
    pub path: String,
    pub density_label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_count: Option<u32>,
}

impl DensityRow {
    pub fn validate(&self) -> Result<(), String> {
        if self.density_label > 2 {
            return Err(format!("density_label {} outside {{0,1,2}}", self.density_label));
        }
        Ok(())
    }
}

/// Append-only JSONL writer.
pub struct ManifestWriter {
    file: File,
    path: PathBuf,
    rows: usize,
}

impl ManifestWriter {
    /// Truncate and start a fresh manifest.
    pub fn create(path: &Path) -> Result<Self, ManifestError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| ManifestError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| ManifestError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
            rows: 0,
        })
    }

    pub fn append<T: Serialize>(&mut self, row: &T) -> Result<(), ManifestError> {
        let mut line = serde_json::to_string(row).map_err(|e| ManifestError::Line {
            path: self.path.display().to_string(),
            line: self.rows + 1,
            msg: e.to_string(),
        })?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| ManifestError::Io {
                path: self.path.display().to_string(),
                source: e,
            })?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

fn load_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let file = File::open(path).map_err(|e| ManifestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ManifestError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(&line).map_err(|e| ManifestError::Line {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn validated<T>(
    path: &Path,
    rows: Vec<T>,
    check: impl Fn(&T) -> Result<(), String>,
) -> Result<Vec<T>, ManifestError> {
    for (idx, row) in rows.iter().enumerate() {
        check(row).map_err(|msg| ManifestError::Line {
            path: path.display().to_string(),
            line: idx + 1,
            msg,
        })?;
    }
    Ok(rows)
}

pub fn load_sorting(path: &Path) -> Result<Vec<SortingRow>, ManifestError> {
    validated(path, load_rows(path)?, SortingRow::validate)
}

pub fn load_count(path: &Path) -> Result<Vec<CountRow>, ManifestError> {
    load_rows(path)
}

pub fn load_density(path: &Path) -> Result<Vec<DensityRow>, ManifestError> {
    validated(path, load_rows(path)?, DensityRow::validate)
}

/// Write a full set of rows, replacing any existing manifest.
pub fn write_all<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ManifestError> {
    let mut writer = ManifestWriter::create(path)?;
    for row in rows {
        writer.append(row)?;
    }
    Ok(())
}

/// Canonical on-disk layout of a dataset root. Manifest rows store paths
/// relative to the root so a dataset directory can be moved wholesale.
#[derive(Debug, Clone)]
pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn sorting_manifest(&self) -> PathBuf {
        self.root.join("sorting.jsonl")
    }

    pub fn count_manifest(&self) -> PathBuf {
        self.root.join("count.jsonl")
    }

    pub fn filtered_count_manifest(&self) -> PathBuf {
        self.root.join("count_filtered.jsonl")
    }

    pub fn density_manifest(&self) -> PathBuf {
        self.root.join("density.jsonl")
    }

    /// Labeled evaluation set (count rows with ground truth).
    pub fn test_manifest(&self) -> PathBuf {
        self.root.join("test.jsonl")
    }

    pub fn images_dir(&self, kind: &str) -> PathBuf {
        self.root.join("images").join(kind)
    }

    /// Absolute path for a manifest-relative one.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Manifest-relative form of a path under the root.
    pub fn relative(&self, abs: &Path) -> String {
        abs.strip_prefix(&self.root)
            .unwrap_or(abs)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_sorting_row(id: u64) -> SortingRow {
        SortingRow {
            triplet_id: id,
            paths: [
                format!("img/{id}_fewer.png"),
                format!("img/{id}_ref.png"),
                format!("img/{id}_more.png"),
            ],
            ranks: [0, 1, 2],
            true_counts: Some([3, 5, 9]),
        }
    }

    #[test]
    fn round_trip_preserves_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sorting.jsonl");
        let rows: Vec<SortingRow> = (0..5).map(sample_sorting_row).collect();
        write_all(&path, &rows).unwrap();
        let back = load_sorting(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn field_names_are_stable() {
        let row = sample_sorting_row(7);
        let json = serde_json::to_string(&row).unwrap();
        for key in ["triplet_id", "paths", "ranks", "true_counts"] {
            assert!(json.contains(&format!("\"{key}\"")), "{json}");
        }
        let count = CountRow {
            path: "a.png".into(),
            prompt_count: 12,
            true_count: None,
            kept: true,
        };
        let json = serde_json::to_string(&count).unwrap();
        for key in ["path", "prompt_count", "kept"] {
            assert!(json.contains(&format!("\"{key}\"")), "{json}");
        }
        assert!(!json.contains("true_count\""), "{json}");
        let density = DensityRow {
            path: "b.png".into(),
            density_label: 2,
            true_count: Some(80),
        };
        let json = serde_json::to_string(&density).unwrap();
        for key in ["path", "density_label", "true_count"] {
            assert!(json.contains(&format!("\"{key}\"")), "{json}");
        }
    }

    #[test]
    fn bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        let good = serde_json::to_string(&sample_sorting_row(0)).unwrap();
        fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match load_sorting(&path) {
            Err(ManifestError::Line { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_ranks_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranks.jsonl");
        let mut row = sample_sorting_row(0);
        row.ranks = [0, 0, 2];
        write_all(&path, &[row]).unwrap();
        match load_sorting(&path) {
            Err(ManifestError::Line { line: 1, msg, .. }) => {
                assert!(msg.contains("permutation"), "{msg}");
            }
            other => panic!("expected rank validation error, got {other:?}"),
        }
    }

    #[test]
    fn appending_after_create_accumulates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("count.jsonl");
        let mut w = ManifestWriter::create(&path).unwrap();
        for i in 0..3 {
            w.append(&CountRow {
                path: format!("{i}.png"),
                prompt_count: i,
                true_count: Some(i),
                kept: true,
            })
            .unwrap();
        }
        assert_eq!(w.rows(), 3);
        drop(w);
        assert_eq!(load_count(&path).unwrap().len(), 3);
    }

    #[test]
    fn optional_true_count_defaults_to_none() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"path\":\"x.png\",\"prompt_count\":4,\"kept\":false}\n").unwrap();
        let rows = load_count(&path).unwrap();
        assert_eq!(rows[0].true_count, None);
        assert!(!rows[0].kept);
    }
}
