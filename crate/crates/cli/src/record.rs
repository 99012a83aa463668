//! File discovery, hashing and the provenance records written next to outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Config echo, seed and artifact digests of one command invocation.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl RunRecord {
    pub fn new(command: &'static str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            tool: "lacune",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: serde_json::to_value(config)?,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            extra: serde_json::Value::Null,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// `<path>.provenance.json`
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Reads a JSON file, or returns the type's defaults when no path is given.
pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn nifti_stem(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

/// Subdirectories that look like case directories, sorted by name.
pub fn case_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && lacune::nifti_io::case_files(p).is_ok())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no case directories (with t1/t2/flair volumes) in {}", root.display());
    }
    Ok(dirs)
}

/// Mask files keyed by case id. A directory entry contributes its `truth` volume; a file
/// `<id>_seg.nii[.gz]` or `<id>.nii[.gz]` contributes itself; `_unc` files are skipped.
pub fn mask_files(root: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(root).with_context(|| format!("listing {}", root.display()))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if path.is_dir() {
            let truth = ["truth.nii.gz", "truth.nii"].iter().map(|f| path.join(f)).find(|p| p.exists());
            if let Some(t) = truth {
                out.insert(name, t);
            }
        } else if let Some(stem) = nifti_stem(&name) {
            if stem.ends_with("_unc") {
                continue;
            }
            let id = stem.strip_suffix("_seg").unwrap_or(stem).to_string();
            if out.insert(id.clone(), path.clone()).is_some() {
                bail!("two masks for case `{id}` in {}", root.display());
            }
        }
    }
    if out.is_empty() {
        bail!("no masks found in {}", root.display());
    }
    Ok(out)
}
