//! Directory-backed datasets: `<root>/<class>/<image>.ppm`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub label: Option<usize>,
    pub domain: Domain,
}

/// Samples plus the ordered class vocabulary. Ordering is lexicographic by
/// code point for both classes and file names, so two loads of the same tree
/// always agree.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub domain: Domain,
    /// Unreadable files, skipped with their reasons.
    pub skipped: Vec<(PathBuf, String)>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> =
        fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?.iter().map(|e| e.path()).collect();
    entries.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(entries)
}

fn is_ppm(path: &Path) -> bool {
    path.extension().map(|e| e == "ppm").unwrap_or(false)
}

fn check_readable(path: &Path) -> std::result::Result<(), String> {
    fs::File::open(path).map(|_| ()).map_err(|e| e.to_string())
}

/// Loads a dataset. `labeled` expects one subdirectory per class; otherwise
/// every `.ppm` under the root (recursively) forms one unlabeled pool.
pub fn load_dataset(dir: &Path, labeled: bool, domain: Domain) -> Result<DomainDataset> {
    if !dir.is_dir() {
        return Err(Error::EmptyDataset(format!("{} is not a directory", dir.display())));
    }
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut class_names = Vec::new();

    if labeled {
        for entry in sorted_entries(dir)? {
            if entry.is_dir() {
                class_names.push(
                    entry
                        .file_name()
                        .and_then(|n| n.to_str())
                        .ok_or_else(|| Error::Config(format!("non-UTF8 class dir {entry:?}")))?
                        .to_string(),
                );
            }
        }
        if class_names.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "{} has no class subdirectories",
                dir.display()
            )));
        }
        for (label, class) in class_names.iter().enumerate() {
            for file in sorted_entries(&dir.join(class))? {
                if !file.is_file() || !is_ppm(&file) {
                    continue;
                }
                match check_readable(&file) {
                    Ok(()) => samples.push(Sample { path: file, label: Some(label), domain }),
                    Err(reason) => skipped.push((file, reason)),
                }
            }
        }
    } else {
        let mut stack = vec![dir.to_path_buf()];
        let mut files = Vec::new();
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d)?.collect::<std::io::Result<Vec<_>>>()? {
                let p = entry.path();
                if p.is_dir() {
                    stack.push(p);
                } else if is_ppm(&p) {
                    files.push(p);
                }
            }
        }
        files.sort();
        for file in files {
            match check_readable(&file) {
                Ok(()) => samples.push(Sample { path: file, label: None, domain }),
                Err(reason) => skipped.push((file, reason)),
            }
        }
    }

    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("no samples under {}", dir.display())));
    }
    Ok(DomainDataset { root: dir.to_path_buf(), samples, class_names, domain, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_tree(root: &Path) {
        for class in ["a", "b"] {
            let d = root.join(class);
            fs::create_dir_all(&d).unwrap();
            for i in 0..2 {
                fs::write(d.join(format!("img_{i}.ppm")), b"P6\n1 1\n255\n\x00\x00\x00").unwrap();
            }
            // non-image noise that must be ignored
            fs::write(d.join("notes.txt"), b"ignore me").unwrap();
        }
    }

    #[test]
    fn labeled_load_orders_classes_and_files() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path());
        let ds = load_dataset(tmp.path(), true, Domain::Source).unwrap();
        assert_eq!(ds.class_names, vec!["a", "b"]);
        assert_eq!(ds.len(), 4);
        assert!(ds.is_labeled());
        assert_eq!(ds.samples[0].label, Some(0));
        assert_eq!(ds.samples[3].label, Some(1));
    }

    #[test]
    fn unlabeled_load_pools_everything() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path());
        let ds = load_dataset(tmp.path(), false, Domain::Target).unwrap();
        assert_eq!(ds.len(), 4);
        assert!(ds.samples.iter().all(|s| s.label.is_none()));
        assert!(ds.class_names.is_empty());
    }

    #[test]
    fn ordering_is_stable_across_loads() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path());
        let a = load_dataset(tmp.path(), true, Domain::Source).unwrap();
        let b = load_dataset(tmp.path(), true, Domain::Source).unwrap();
        let paths = |ds: &DomainDataset| ds.samples.iter().map(|s| s.path.clone()).collect::<Vec<_>>();
        assert_eq!(paths(&a), paths(&b));
    }

    #[test]
    fn empty_directory_errors() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(tmp.path(), false, Domain::Source),
            Err(Error::EmptyDataset(_))
        ));
        assert!(matches!(
            load_dataset(tmp.path(), true, Domain::Source),
            Err(Error::EmptyDataset(_))
        ));
    }
}
