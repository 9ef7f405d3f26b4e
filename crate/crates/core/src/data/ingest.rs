use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{ClassLabel, DataError, ImageRecord, Manifest, Split};

/// Maps a directory pattern (relative to the corpus root) to a label.
///
/// Pattern components are matched against the leading directories of a
/// file's relative path; `*` matches any single component. When
/// `generator` is absent the tag is taken from the directory matched by the
/// last pattern component, so `gan/*` tags `gan/stylegan2/x.png` as
/// `stylegan2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub pattern: String,
    pub label: ClassLabel,
    #[serde(default)]
    pub generator: Option<String>,
}

impl LabelRule {
    pub fn new(pattern: &str, label: ClassLabel, generator: Option<&str>) -> Self {
        Self {
            pattern: pattern.to_string(),
            label,
            generator: generator.map(str::to_string),
        }
    }

    /// `real/*`, `gan/*`, `dm/*` with generator tags from the subdirectory.
    pub fn default_layout() -> Vec<LabelRule> {
        ClassLabel::ALL
            .iter()
            .map(|&c| LabelRule::new(&format!("{c}/*"), c, None))
            .collect()
    }

    fn apply(&self, dirs: &[&str]) -> Option<(ClassLabel, String)> {
        let pat: Vec<&str> = self.pattern.split('/').filter(|s| !s.is_empty()).collect();
        if pat.is_empty() || pat.len() > dirs.len() {
            return None;
        }
        let matched = pat.iter().zip(dirs).all(|(p, d)| *p == "*" || p == d);
        if !matched {
            return None;
        }
        let tag = match &self.generator {
            Some(g) => g.clone(),
            None => dirs[pat.len() - 1].to_string(),
        };
        Some((self.label, tag))
    }
}

#[derive(Debug)]
pub struct IngestReport {
    pub manifest: Manifest,
    /// Files that matched a rule but failed to decode.
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Walks `root`, labels image files by the first matching rule and decodes
/// each one to record its dimensions. Undecodable files are skipped and
/// reported.
pub fn ingest(root: &Path, rules: &[LabelRule]) -> Result<IngestReport, DataError> {
    let mut candidates = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| DataError::Io(e.into()))?;
        if !entry.file_type().is_file() || !is_image(entry.path()) {
            continue;
        }
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        let dirs: Vec<&str> = rel
            .parent()
            .into_iter()
            .flat_map(|p| p.components())
            .filter_map(|c| match c {
                Component::Normal(s) => s.to_str(),
                _ => None,
            })
            .collect();
        if let Some((label, generator)) = rules.iter().find_map(|r| r.apply(&dirs)) {
            candidates.push((entry.path().to_path_buf(), label, generator));
        }
    }

    let decoded: Vec<Result<ImageRecord, (PathBuf, String)>> = candidates
        .into_par_iter()
        .map(|(path, label, generator)| match image::open(&path) {
            Ok(img) => Ok(ImageRecord {
                width: img.width(),
                height: img.height(),
                path,
                label,
                generator,
                split: Split::Unassigned,
                binary: None,
            }),
            Err(e) => Err((path, e.to_string())),
        })
        .collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for d in decoded {
        match d {
            Ok(r) => records.push(r),
            Err(s) => skipped.push(s),
        }
    }
    if records.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let manifest = Manifest::sorted(
        records,
        0,
        format!("ingest {} ({} skipped)", root.display(), skipped.len()),
    )?;
    Ok(IngestReport { manifest, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_matching() {
        let r = LabelRule::new("gan/*", ClassLabel::Gan, None);
        assert_eq!(
            r.apply(&["gan", "stylegan2"]),
            Some((ClassLabel::Gan, "stylegan2".into()))
        );
        assert_eq!(r.apply(&["gan"]), None);
        assert_eq!(r.apply(&["dm", "ddpm"]), None);
        let fixed = LabelRule::new("real/celeba", ClassLabel::Real, Some("celeba-hq"));
        assert_eq!(
            fixed.apply(&["real", "celeba", "deep"]),
            Some((ClassLabel::Real, "celeba-hq".into()))
        );
    }

    #[test]
    fn empty_dir_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest(dir.path(), &LabelRule::default_layout()),
            Err(DataError::EmptyCorpus)
        ));
    }

    #[test]
    fn ingest_labels_and_skips_broken_files() {
        let dir = tempfile::tempdir().unwrap();
        let gdir = dir.path().join("gan/stylegan2");
        std::fs::create_dir_all(&gdir).unwrap();
        for i in 0..3 {
            image::RgbImage::new(5, 4)
                .save(gdir.join(format!("{i}.png")))
                .unwrap();
        }
        std::fs::write(gdir.join("broken.png"), b"not an image").unwrap();
        let rep = ingest(
            dir.path(),
            &[LabelRule::new("gan/stylegan2", ClassLabel::Gan, None)],
        )
        .unwrap();
        assert_eq!(rep.manifest.len(), 3);
        assert_eq!(rep.skipped.len(), 1);
        for r in rep.manifest.iter() {
            assert_eq!(r.label, ClassLabel::Gan);
            assert_eq!(r.generator, "stylegan2");
            assert_eq!((r.width, r.height), (5, 4));
            assert_eq!(r.split, Split::Unassigned);
        }
    }
}
