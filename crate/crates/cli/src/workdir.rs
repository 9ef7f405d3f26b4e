use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deepfeaturex::data::{ClassLabel, Manifest};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Invalid;

/// Directory layout under `--workdir`.
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.manifests().join(format!("{name}.jsonl"))
    }

    pub fn subset(&self, class: ClassLabel) -> PathBuf {
        self.manifest(&format!("subset_{class}"))
    }

    pub fn base_model(&self, class: ClassLabel) -> PathBuf {
        self.root.join("models").join(format!("base_{class}"))
    }

    pub fn fusion_model(&self) -> PathBuf {
        self.root.join("models").join("fusion")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn jpeg(&self) -> PathBuf {
        self.root.join("jpeg")
    }

    pub fn lock(&self) -> Result<Lock> {
        fs::create_dir_all(&self.root)
            .with_context(|| format!("creating workdir {}", self.root.display()))?;
        let path = self.root.join(".dfx.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Lock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "workdir is locked by another run ({}); remove it if no run is active",
                path.display()
            ),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save_manifest(&self, name: &str, m: &Manifest) -> Result<PathBuf> {
        let path = self.manifest(name);
        fs::create_dir_all(self.manifests())?;
        m.save(&path)?;
        Ok(path)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(Invalid(format!(
            "missing input {}; run the producing subcommand first",
            path.display()
        ))
        .into());
    }
    Ok(Manifest::load(path)?)
}

/// Removes the lockfile on drop.
pub struct Lock {
    path: PathBuf,
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// SHA-256 of a file, or of every file below a directory in path order.
pub fn digest(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect(path, &mut files)?;
        files.sort();
        for f in files {
            h.update(
                f.strip_prefix(path)
                    .unwrap_or(&f)
                    .to_string_lossy()
                    .as_bytes(),
            );
            h.update(fs::read(&f)?);
        }
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("run-") {
            continue;
        }
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Writes `run-<command>.json` into `dir`: the config snapshot, seed, and
/// digests of everything read and written.
pub fn write_run_meta(
    wd: &Workdir,
    dir: &Path,
    command: &str,
    config: &RunConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let rel = |p: &Path| {
        p.strip_prefix(wd.root())
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let table = |ps: &[PathBuf]| -> Result<BTreeMap<String, String>> {
        ps.iter().map(|p| Ok((rel(p), digest(p)?))).collect()
    };
    let meta = RunMeta {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config,
        inputs: table(inputs)?,
        outputs: table(outputs)?,
    };
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join(format!("run-{command}.json")), text)?;
    Ok(())
}
