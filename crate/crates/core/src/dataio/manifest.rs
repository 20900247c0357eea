use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Relative split sizes; normalised on use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    /// Everything goes to training.
    pub fn all_train() -> Self {
        Self {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || parts.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid split ratios {self:?}")));
        }
        Ok(())
    }

    /// Split for a file name: a SHA-256 derived fraction in `[0, 1)` compared
    /// against the cumulative ratios.
    pub fn assign(&self, name: &str) -> Split {
        let digest = Sha256::digest(name.as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        let u = (u64::from_be_bytes(head) >> 11) as f64 / (1u64 << 53) as f64;
        let total = self.train + self.val + self.test;
        if u < self.train / total {
            Split::Train
        } else if u < (self.train + self.val) / total {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub name: String,
    pub clean: PathBuf,
    pub degraded: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairManifest {
    pub entries: Vec<PairEntry>,
    /// Files present in only one of the two directories.
    pub unmatched: Vec<PathBuf>,
}

impl PairManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,clean,degraded,split\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.name,
                e.clean.display(),
                e.degraded.display(),
                e.split.as_str()
            );
        }
        out
    }
}

/// Sorted `.png` file names (case-insensitive extension) in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(format!("read directory {}", dir.display()), e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(format!("read directory {}", dir.display()), e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Pairs files with equal names in the two directories.
pub fn build_manifest(clean_dir: &Path, degraded_dir: &Path, ratios: SplitRatios) -> Result<PairManifest> {
    ratios.validate()?;
    let clean: BTreeSet<String> = list_pngs(clean_dir)?.into_iter().collect();
    let degraded: BTreeSet<String> = list_pngs(degraded_dir)?.into_iter().collect();

    let entries: Vec<PairEntry> = clean
        .intersection(&degraded)
        .map(|name| PairEntry {
            name: name.clone(),
            clean: clean_dir.join(name),
            degraded: degraded_dir.join(name),
            split: ratios.assign(name),
        })
        .collect();
    let mut unmatched: Vec<PathBuf> = clean.difference(&degraded).map(|n| clean_dir.join(n)).collect();
    unmatched.extend(degraded.difference(&clean).map(|n| degraded_dir.join(n)));

    for path in &unmatched {
        log::warn!("unmatched file skipped: {}", path.display());
    }
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no matching PNG names in {} and {}",
            clean_dir.display(),
            degraded_dir.display()
        )));
    }
    Ok(PairManifest { entries, unmatched })
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
    fn identical_lists_fully_paired() {
        let root = tempfile::tempdir().unwrap();
        let (c, d) = (root.path().join("clean"), root.path().join("degraded"));
        touch(&c, &["b.png", "a.png", "c.PNG"]);
        touch(&d, &["a.png", "c.PNG", "b.png"]);
        let m = build_manifest(&c, &d, SplitRatios::default()).unwrap();
        let names: Vec<_> = m.entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["a.png", "b.png", "c.PNG"]);
        assert!(m.unmatched.is_empty());
    }

    #[test]
    fn extra_file_reported() {
        let root = tempfile::tempdir().unwrap();
        let (c, d) = (root.path().join("clean"), root.path().join("degraded"));
        touch(&c, &["a.png", "extra.png", "notes.txt"]);
        touch(&d, &["a.png"]);
        let m = build_manifest(&c, &d, SplitRatios::default()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.unmatched, vec![c.join("extra.png")]);
    }

    #[test]
    fn empty_intersection_errors() {
        let root = tempfile::tempdir().unwrap();
        let (c, d) = (root.path().join("clean"), root.path().join("degraded"));
        touch(&c, &["a.png"]);
        touch(&d, &["b.png"]);
        assert!(build_manifest(&c, &d, SplitRatios::default()).is_err());
    }

    #[test]
    fn splits_deterministic_and_roughly_proportional() {
        let r = SplitRatios::default();
        let names: Vec<String> = (0..2000).map(|i| format!("img_{i:05}.png")).collect();
        let a: Vec<Split> = names.iter().map(|n| r.assign(n)).collect();
        let b: Vec<Split> = names.iter().map(|n| r.assign(n)).collect();
        assert_eq!(a, b);
        let train = a.iter().filter(|s| **s == Split::Train).count() as f64 / 2000.0;
        assert!((train - 0.8).abs() < 0.05, "train fraction {train}");
        assert!(names.iter().all(|n| SplitRatios::all_train().assign(n) == Split::Train));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let m = PairManifest {
            entries: vec![PairEntry {
                name: "x.png".into(),
                clean: "c/x.png".into(),
                degraded: "d/x.png".into(),
                split: Split::Val,
            }],
            unmatched: vec![],
        };
        assert_eq!(m.to_csv(), "name,clean,degraded,split\nx.png,c/x.png,d/x.png,val\n");
    }
}
