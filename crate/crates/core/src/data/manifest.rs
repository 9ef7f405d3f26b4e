use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Image origin class. The derived order `Real < Gan < Dm` is also the
/// logit index order used throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Real,
    Gan,
    Dm,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Real, ClassLabel::Gan, ClassLabel::Dm];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Real => "real",
            ClassLabel::Gan => "gan",
            ClassLabel::Dm => "dm",
        }
    }

    pub fn is_fake(self) -> bool {
        self != ClassLabel::Real
    }

    /// The two classes other than `self`, in label order.
    pub fn others(self) -> [ClassLabel; 2] {
        match self {
            ClassLabel::Real => [ClassLabel::Gan, ClassLabel::Dm],
            ClassLabel::Gan => [ClassLabel::Real, ClassLabel::Dm],
            ClassLabel::Dm => [ClassLabel::Real, ClassLabel::Gan],
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "real" => Ok(ClassLabel::Real),
            "gan" => Ok(ClassLabel::Gan),
            "dm" => Ok(ClassLabel::Dm),
            other => Err(DataError::Parse(format!("unknown class label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    BaseTrain,
    HeadTrain,
    Test,
    Unassigned,
}

/// Relabeling used by base-model subsets. Index 1 (`Predominant`) is the
/// positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Others,
    Predominant,
}

impl BinaryLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn against(label: ClassLabel, predominant: ClassLabel) -> Self {
        if label == predominant {
            BinaryLabel::Predominant
        } else {
            BinaryLabel::Others
        }
    }
}

/// One image in a manifest. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: ClassLabel,
    /// Generator name for fakes, source dataset tag for real images.
    pub generator: String,
    pub split: Split,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<BinaryLabel>,
}

pub const MANIFEST_MAGIC: &str = "#deepfeaturex-manifest v1";

/// Ordered, path-unique list of image records plus how it was made.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    records: Vec<ImageRecord>,
    pub seed: u64,
    pub provenance: String,
}

impl Manifest {
    pub fn new(
        records: Vec<ImageRecord>,
        seed: u64,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.generator.is_empty() {
                return Err(DataError::InvalidRecord(format!(
                    "{}: empty generator tag",
                    r.path.display()
                )));
            }
            if !seen.insert(r.path.as_path()) {
                return Err(DataError::DuplicatePath(r.path.clone()));
            }
        }
        Ok(Self {
            records,
            seed,
            provenance: provenance.into(),
        })
    }

    /// Builds a manifest whose records are sorted by path.
    pub fn sorted(
        mut records: Vec<ImageRecord>,
        seed: u64,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        records.sort_by(|a, b| a.path.cmp(&b.path));
        Self::new(records, seed, provenance)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ImageRecord> {
        self.records.iter()
    }

    /// Record counts indexed by [`ClassLabel::index`].
    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.label.index()] += 1;
        }
        c
    }

    pub fn count(&self, label: ClassLabel) -> usize {
        self.class_counts()[label.index()]
    }

    pub fn of_class(&self, label: ClassLabel) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.label == label)
    }

    pub fn require_all_classes(&self) -> Result<(), DataError> {
        let counts = self.class_counts();
        match ClassLabel::ALL.iter().find(|c| counts[c.index()] == 0) {
            Some(&c) => Err(DataError::MissingClass(c)),
            None => Ok(()),
        }
    }

    /// Copy with every record's binary label set against `predominant`.
    pub fn relabel_binary(&self, predominant: ClassLabel) -> Manifest {
        let records = self
            .records
            .iter()
            .cloned()
            .map(|mut r| {
                r.binary = Some(BinaryLabel::against(r.label, predominant));
                r
            })
            .collect();
        Manifest {
            records,
            seed: self.seed,
            provenance: format!("{}; binary relabel vs {predominant}", self.provenance),
        }
    }

    pub fn with_split(&self, split: Split) -> Manifest {
        let records = self
            .records
            .iter()
            .cloned()
            .map(|mut r| {
                r.split = split;
                r
            })
            .collect();
        Manifest {
            records,
            seed: self.seed,
            provenance: self.provenance.clone(),
        }
    }

    /// JSON-lines form: magic header, provenance comment, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = format!("{MANIFEST_MAGIC} seed={}\n", self.seed);
        out.push_str("#provenance ");
        out.push_str(&self.provenance.replace('\n', " "));
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DataError> {
        Self::read_from(text.as_bytes())
    }

    pub fn read_from(reader: impl std::io::Read) -> Result<Self, DataError> {
        let mut lines = BufReader::new(reader).lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| DataError::Parse("empty manifest".into()))?;
        let seed = header
            .strip_prefix(MANIFEST_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix("seed="))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Parse(format!("bad manifest header {header:?}")))?;
        let mut provenance = String::new();
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if let Some(p) = line.strip_prefix("#provenance ") {
                provenance = p.to_string();
            } else if line.starts_with('#') || line.trim().is_empty() {
                continue;
            } else {
                let rec = serde_json::from_str(&line)
                    .map_err(|e| DataError::Parse(format!("line {}: {e}", lineno + 2)))?;
                records.push(rec);
            }
        }
        Self::new(records, seed, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::read_from(fs::File::open(path)?)
    }
}

impl<'a> IntoIterator for &'a Manifest {
    type Item = &'a ImageRecord;
    type IntoIter = std::slice::Iter<'a, ImageRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}
