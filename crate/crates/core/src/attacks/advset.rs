//! On-disk adversarial sets.
//!
//! A set is a directory with one JSON record per sample under `samples/`
//! and an append-only `manifest.jsonl`. The first manifest line is a header
//! carrying the manifest id, attack description and source model; each
//! following line names one sample file with its SHA-256. Reading verifies
//! every checksum.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdversarialExample, AttackSpec};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRecord {
    pub id: String,
    /// Ground-truth class of the original signal.
    pub label: usize,
    /// Target class for targeted (boundary) attacks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    pub example: AdversarialExample,
}

/// Adversarial samples generated by one attack against one source model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSet {
    pub manifest_id: String,
    pub spec: AttackSpec,
    pub source_model: String,
    pub records: Vec<AdversarialRecord>,
}

impl AdversarialSet {
    pub fn new(spec: AttackSpec, source_model: String, records: Vec<AdversarialRecord>) -> Self {
        let manifest_id = manifest_id(&spec, &source_model, &records);
        Self {
            manifest_id,
            spec,
            source_model,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn signals(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.example.adversarial.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// Content id over the attack description, source model and sample ids.
fn manifest_id(spec: &AttackSpec, source_model: &str, records: &[AdversarialRecord]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("serializable spec"));
    h.update(source_model.as_bytes());
    for r in records {
        h.update(r.id.as_bytes());
        h.update([0]);
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ManifestLine {
    Header {
        manifest_id: String,
        spec: AttackSpec,
        source_model: String,
    },
    Sample {
        index: usize,
        id: String,
        file: String,
        sha256: String,
    },
}

fn file_name(index: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:06}_{safe}.json")
}

/// Writes `set` into `dir`. An existing manifest must carry the same id;
/// samples already listed are left untouched and new ones are appended.
pub fn write_set(set: &AdversarialSet, dir: &Path) -> Result<()> {
    let samples = dir.join("samples");
    fs::create_dir_all(&samples).at(&samples)?;
    let manifest = dir.join("manifest.jsonl");
    let mut listed = 0usize;
    if manifest.exists() {
        let lines = read_manifest(&manifest)?;
        match lines.first() {
            Some(ManifestLine::Header { manifest_id, .. }) if *manifest_id == set.manifest_id => {}
            _ => {
                return Err(Error::Format {
                    path: manifest,
                    detail: format!("existing manifest does not belong to set {}", set.manifest_id),
                })
            }
        }
        listed = lines.len() - 1;
    }
    let mut out = OpenOptions::new().create(true).append(true).open(&manifest).at(&manifest)?;
    if listed == 0 && fs::metadata(&manifest).at(&manifest)?.len() == 0 {
        let header = ManifestLine::Header {
            manifest_id: set.manifest_id.clone(),
            spec: set.spec.clone(),
            source_model: set.source_model.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?).at(&manifest)?;
    }
    for (index, rec) in set.records.iter().enumerate().skip(listed) {
        let name = file_name(index, &rec.id);
        let bytes = serde_json::to_vec(rec)?;
        let path = samples.join(&name);
        fs::write(&path, &bytes).at(&path)?;
        let line = ManifestLine::Sample {
            index,
            id: rec.id.clone(),
            file: format!("samples/{name}"),
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?).at(&manifest)?;
    }
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestLine>> {
    let f = fs::File::open(path).at(path)?;
    let mut lines = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?);
    }
    Ok(lines)
}

/// Reads a set back, verifying every sample checksum and the manifest id.
pub fn read_set(dir: &Path) -> Result<AdversarialSet> {
    let manifest = dir.join("manifest.jsonl");
    let mut lines = read_manifest(&manifest)?.into_iter();
    let Some(ManifestLine::Header {
        manifest_id,
        spec,
        source_model,
    }) = lines.next()
    else {
        return Err(Error::Format {
            path: manifest,
            detail: "missing header line".into(),
        });
    };
    let mut records = Vec::new();
    for line in lines {
        let ManifestLine::Sample { index, file, sha256, .. } = line else {
            return Err(Error::Format {
                path: manifest.clone(),
                detail: "duplicate header line".into(),
            });
        };
        if index != records.len() {
            return Err(Error::Format {
                path: manifest.clone(),
                detail: format!("sample index {index} out of order"),
            });
        }
        let path = dir.join(&file);
        let bytes = fs::read(&path).at(&path)?;
        if hex::encode(Sha256::digest(&bytes)) != sha256 {
            return Err(Error::Format {
                path,
                detail: "checksum mismatch".into(),
            });
        }
        let rec: AdversarialRecord = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        records.push(rec);
    }
    let set = AdversarialSet::new(spec, source_model, records);
    if set.manifest_id != manifest_id {
        return Err(Error::Format {
            path: manifest,
            detail: format!("manifest id {manifest_id} does not match contents ({})", set.manifest_id),
        });
    }
    Ok(set)
}
