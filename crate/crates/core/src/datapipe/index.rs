use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::filename::{parse_generic_filename, parse_market_filename};
use crate::error::{Error, Result};

pub const TRAIN_DIR: &str = "bounding_box_train";
pub const QUERY_DIR: &str = "query";
pub const GALLERY_DIR: &str = "bounding_box_test";

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Market,
    Duke,
    Cuhk03,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Query,
    Gallery,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Query => "query",
            Role::Gallery => "gallery",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub path: PathBuf,
    /// Raw identity; `-1` marks junk.
    pub pid: i64,
    /// 1-based camera index.
    pub cam_id: usize,
    pub role: Role,
}

/// Immutable listing of a dataset root.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub layout: Layout,
    pub entries: Vec<Entry>,
    /// Raw training pid to contiguous label `0..num_classes`.
    pub pid_map: BTreeMap<i64, usize>,
    by_label: Vec<Vec<usize>>,
}

impl DatasetIndex {
    /// Builds an index from explicit entries. Train entries with pid `-1`
    /// are dropped.
    pub fn from_entries(layout: Layout, entries: Vec<Entry>) -> Result<Self> {
        let entries: Vec<Entry> = entries
            .into_iter()
            .filter(|e| !(e.role == Role::Train && e.pid < 0))
            .collect();
        for role in [Role::Train, Role::Query, Role::Gallery] {
            if !entries.iter().any(|e| e.role == role) {
                return Err(Error::EmptySplit(role.as_str().to_string()));
            }
        }
        let pid_map: BTreeMap<i64, usize> = entries
            .iter()
            .filter(|e| e.role == Role::Train)
            .map(|e| e.pid)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(label, pid)| (pid, label))
            .collect();
        let mut by_label = vec![Vec::new(); pid_map.len()];
        for (i, e) in entries.iter().enumerate() {
            if e.role == Role::Train {
                by_label[pid_map[&e.pid]].push(i);
            }
        }
        Ok(Self {
            layout,
            entries,
            pid_map,
            by_label,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.pid_map.len()
    }

    /// Contiguous training label of an entry, if its pid was seen in training.
    pub fn label(&self, entry: usize) -> Option<usize> {
        self.pid_map.get(&self.entries[entry].pid).copied()
    }

    /// Entry indices of one training label.
    pub fn train_entries_of(&self, label: usize) -> &[usize] {
        &self.by_label[label]
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].role == role)
            .collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.entries.iter().filter(|e| e.role == role).count()
    }
}

/// Lists `bounding_box_train/`, `query/` and `bounding_box_test/` under
/// `root`. Files whose names do not parse are skipped with a warning.
pub fn build_index(root: &Path, layout: Layout) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    let parse: fn(&str) -> Result<(i64, usize)> = match layout {
        Layout::Market | Layout::Synthetic => parse_market_filename,
        Layout::Duke | Layout::Cuhk03 => parse_generic_filename,
    };
    let mut entries = Vec::new();
    for (dir, role) in [
        (TRAIN_DIR, Role::Train),
        (QUERY_DIR, Role::Query),
        (GALLERY_DIR, Role::Gallery),
    ] {
        let dir = root.join(dir);
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir));
        }
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        names.sort();
        for path in names {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            match parse(name) {
                Ok((pid, cam_id)) => entries.push(Entry {
                    path,
                    pid,
                    cam_id,
                    role,
                }),
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
    }
    DatasetIndex::from_entries(layout, entries)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, names: &[&str]) {
        std::fs::create_dir_all(dir).unwrap();
        for n in names {
            std::fs::write(dir.join(n), b"").unwrap();
        }
    }

    #[test]
    fn market_layout_requires_query_dir() {
        let tmp = tempfile::tempdir().unwrap();
        touch(&tmp.path().join(TRAIN_DIR), &["0002_c1s1_000451_03.jpg"]);
        touch(&tmp.path().join(GALLERY_DIR), &["0002_c2s1_000451_03.jpg"]);
        match build_index(tmp.path(), Layout::Market) {
            Err(Error::MissingDirectory(p)) => assert!(p.ends_with(QUERY_DIR)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn all_junk_training_split_is_empty() {
        let tmp = tempfile::tempdir().unwrap();
        touch(
            &tmp.path().join(TRAIN_DIR),
            &["-1_c1s1_000001_00.jpg", "-1_c2s1_000002_00.jpg"],
        );
        touch(&tmp.path().join(QUERY_DIR), &["0002_c1s1_000451_03.jpg"]);
        touch(&tmp.path().join(GALLERY_DIR), &["0002_c2s1_000451_03.jpg"]);
        assert!(matches!(
            build_index(tmp.path(), Layout::Market),
            Err(Error::EmptySplit(s)) if s == "train"
        ));
    }

    #[test]
    fn labels_are_contiguous_and_junk_kept_in_gallery() {
        let tmp = tempfile::tempdir().unwrap();
        touch(
            &tmp.path().join(TRAIN_DIR),
            &[
                "0007_c1s1_000001_00.jpg",
                "0003_c2s1_000002_00.jpg",
                "0150_c1s1_000003_00.jpg",
                "Thumbs.db",
            ],
        );
        touch(&tmp.path().join(QUERY_DIR), &["0003_c1s1_000451_03.jpg"]);
        touch(
            &tmp.path().join(GALLERY_DIR),
            &["0003_c2s1_000451_03.jpg", "-1_c2s1_000451_03.jpg", "0000_c3s1_000001_00.jpg"],
        );
        let index = build_index(tmp.path(), Layout::Market).unwrap();
        let labels: Vec<usize> = index.pid_map.values().copied().collect();
        assert_eq!(labels, vec![0, 1, 2]);
        assert_eq!(index.pid_map[&3], 0);
        assert_eq!(index.count(Role::Gallery), 3);
        assert!(index.entries.iter().any(|e| e.role == Role::Gallery && e.pid == -1));
        let q: Vec<&PathBuf> = index.indices(Role::Query).iter().map(|&i| &index.entries[i].path).collect();
        let g: Vec<&PathBuf> = index.indices(Role::Gallery).iter().map(|&i| &index.entries[i].path).collect();
        assert!(q.iter().all(|p| !g.contains(p)));
    }

    #[test]
    fn duke_names_use_generic_parser() {
        let tmp = tempfile::tempdir().unwrap();
        touch(&tmp.path().join(TRAIN_DIR), &["0001_c2_f0046182.jpg", "0005_c3_f0000001.jpg"]);
        touch(&tmp.path().join(QUERY_DIR), &["0010_c1_f0000001.jpg"]);
        touch(&tmp.path().join(GALLERY_DIR), &["0010_c5_f0000002.jpg"]);
        let index = build_index(tmp.path(), Layout::Duke).unwrap();
        assert_eq!(index.num_classes(), 2);
        assert_eq!(index.entries[0].cam_id, 2);
    }
}
