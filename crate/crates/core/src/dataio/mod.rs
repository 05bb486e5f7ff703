//! ECG record loading, length canonicalization, class rebalancing,
//! train/test splitting, and synthetic desk-scale corpora.
//!
//! On-disk layout: a directory of `<id>.txt` files (one sample per line)
//! plus an `index.csv` with `id,label` rows. Labels use the short
//! tokens `N`, `A`, `O`, `~`; full names are accepted on input.

mod mat;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub use mat::{convert_native, read_mat_v4};
pub use synth::synthesize_ecg;

/// Canonical record length.
pub const RECORD_LENGTH: usize = 9000;

/// The four rhythm classes, in confusion-matrix order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Normal = 0,
    Af = 1,
    Other = 2,
    Noise = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Normal, Class::Af, Class::Other, Class::Noise];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Label token in the index.
    pub fn token(self) -> &'static str {
        match self {
            Class::Normal => "N",
            Class::Af => "A",
            Class::Other => "O",
            Class::Noise => "~",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Normal => "Normal",
            Class::Af => "AF",
            Class::Other => "Other",
            Class::Noise => "Noise",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "N" | "Normal" | "normal" => Ok(Class::Normal),
            "A" | "AF" | "af" => Ok(Class::Af),
            "O" | "Other" | "other" => Ok(Class::Other),
            "~" | "P" | "Noise" | "noise" => Ok(Class::Noise),
            other => Err(Error::Data(format!("unknown label token '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub samples: Vec<f64>,
    pub label: Class,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<Record>,
    /// Source followed by every transform applied, in order.
    pub provenance: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<Record>, source: impl Into<String>) -> Self {
        Self {
            records,
            provenance: vec![source.into()],
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in &self.records {
            c[r.label.index()] += 1;
        }
        c
    }

    pub fn signals(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.samples.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label.index()).collect()
    }

    fn derived(&self, records: Vec<Record>, step: String) -> Self {
        let mut provenance = self.provenance.clone();
        provenance.push(step);
        Self { records, provenance }
    }
}

/// Strips a duplicate suffix added by [`rebalance`].
pub fn base_id(id: &str) -> &str {
    id.split_once("#dup").map_or(id, |(b, _)| b)
}

/// `id,label` rows of an index file (an optional `id,label` header is skipped).
pub fn read_index(index_file: &Path) -> Result<Vec<(String, Class)>> {
    let text = fs::read_to_string(index_file).at(index_file)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or_else(|| Error::Format {
            path: index_file.to_path_buf(),
            detail: format!("line {} is not 'id,label'", n + 1),
        })?;
        if n == 0 && id.trim() == "id" {
            continue;
        }
        out.push((id.trim().to_string(), label.parse()?));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("index {} lists no records", index_file.display())));
    }
    Ok(out)
}

fn read_samples(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).at(path)?;
    let samples = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>().map_err(|e| Error::Format {
                path: path.to_path_buf(),
                detail: format!("'{l}': {e}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "no samples".into(),
        });
    }
    Ok(samples)
}

/// One record per index row, in index order. Every referenced file must exist.
pub fn load_records(dir: &Path, index_file: &Path) -> Result<Dataset> {
    let index = read_index(index_file)?;
    let missing: Vec<String> = index
        .iter()
        .filter(|(id, _)| !dir.join(format!("{id}.txt")).is_file())
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingRecords(missing));
    }
    let records = index
        .par_iter()
        .map(|(id, label)| {
            Ok(Record {
                id: id.clone(),
                samples: read_samples(&dir.join(format!("{id}.txt")))?,
                label: *label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(records, format!("records:{}", dir.display())))
}

/// Writes `dataset` in the directory layout read by [`load_records`].
pub fn save_records(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut index = String::from("id,label\n");
    for r in &dataset.records {
        let path = dir.join(format!("{}.txt", r.id));
        let mut body = String::with_capacity(r.samples.len() * 12);
        for v in &r.samples {
            body.push_str(&v.to_string());
            body.push('\n');
        }
        fs::write(&path, body).at(&path)?;
        index.push_str(&format!("{},{}\n", r.id, r.label.token()));
    }
    let path = dir.join("index.csv");
    fs::write(&path, index).at(&path)?;
    let path = dir.join("provenance.json");
    fs::write(&path, serde_json::to_vec_pretty(&dataset.provenance)?).at(&path)
}

/// Fixes the record length to `len`: shorter records get zeros on both
/// sides (an odd deficit puts the extra zero on the right), longer records
/// keep their first `len` samples.
pub fn canonicalize_length(record: &Record, len: usize) -> Record {
    let n = record.samples.len();
    let samples = if n >= len {
        record.samples[..len].to_vec()
    } else {
        let deficit = len - n;
        let left = deficit / 2;
        let mut v = vec![0.0; left];
        v.extend_from_slice(&record.samples);
        v.resize(len, 0.0);
        v
    };
    Record {
        id: record.id.clone(),
        samples,
        label: record.label,
    }
}

/// [`canonicalize_length`] to 9000 samples.
pub fn preprocess_record(record: &Record) -> Record {
    canonicalize_length(record, RECORD_LENGTH)
}

pub fn preprocess_dataset(dataset: &Dataset, len: usize) -> Dataset {
    let records = dataset.records.par_iter().map(|r| canonicalize_length(r, len)).collect();
    dataset.derived(records, format!("length:{len}"))
}

/// How many extra copies of each Noise record rebalancing adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDuplication {
    /// Original plus five copies (6x).
    #[default]
    AddFive,
    /// Five in total (original plus four copies).
    FiveTotal,
}

/// Duplicates Noise records (see [`NoiseDuplication`]) and doubles AF
/// records. Originals keep their position; copies are appended with
/// `#dupK` id suffixes.
pub fn rebalance(dataset: &Dataset, noise: NoiseDuplication) -> Dataset {
    let noise_copies = match noise {
        NoiseDuplication::AddFive => 5,
        NoiseDuplication::FiveTotal => 4,
    };
    let mut records = dataset.records.clone();
    for r in &dataset.records {
        let copies = match r.label {
            Class::Noise => noise_copies,
            Class::Af => 1,
            _ => 0,
        };
        for k in 1..=copies {
            records.push(Record {
                id: format!("{}#dup{k}", r.id),
                samples: r.samples.clone(),
                label: r.label,
            });
        }
    }
    dataset.derived(records, format!("rebalance:{noise:?}"))
}

/// Deterministic shuffled split into `floor(n * fraction)` training records
/// and the rest.
pub fn split_dataset(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction must be in (0,1), got {train_fraction}")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.records[i].clone()).collect::<Vec<_>>();
    Ok((
        dataset.derived(pick(&order[..n_train]), format!("split:train:{train_fraction}:{seed}")),
        dataset.derived(pick(&order[n_train..]), format!("split:test:{train_fraction}:{seed}")),
    ))
}

/// Full preparation options for a raw four-class dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub length: usize,
    pub noise_duplication: NoiseDuplication,
    pub train_fraction: f64,
    pub seed: u64,
    /// Split before duplication so copies of a record never straddle the split.
    pub split_before_duplication: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            length: RECORD_LENGTH,
            noise_duplication: NoiseDuplication::AddFive,
            train_fraction: 0.9,
            seed: 0,
            split_before_duplication: false,
        }
    }
}

/// Canonicalize, rebalance and split.
pub fn prepare(dataset: &Dataset, opts: &PrepareOptions) -> Result<(Dataset, Dataset)> {
    let ids: HashSet<&str> = dataset.records.iter().map(|r| r.id.as_str()).collect();
    if ids.len() != dataset.len() {
        return Err(Error::Data("record ids are not unique".into()));
    }
    let fixed = preprocess_dataset(dataset, opts.length);
    if opts.split_before_duplication {
        let (train, test) = split_dataset(&fixed, opts.train_fraction, opts.seed)?;
        Ok((
            rebalance(&train, opts.noise_duplication),
            rebalance(&test, opts.noise_duplication),
        ))
    } else {
        split_dataset(&rebalance(&fixed, opts.noise_duplication), opts.train_fraction, opts.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, n: usize, label: Class) -> Record {
        Record {
            id: id.into(),
            samples: (1..=n).map(|v| v as f64).collect(),
            label,
        }
    }

    #[test]
    fn length_canonicalization() {
        let r = rec("a", RECORD_LENGTH, Class::Normal);
        assert_eq!(preprocess_record(&r), r);

        let p = preprocess_record(&rec("b", 8998, Class::Normal));
        assert_eq!(p.samples.len(), RECORD_LENGTH);
        assert_eq!(p.samples[0], 0.0);
        assert_eq!(p.samples[1], 1.0);
        assert_eq!(p.samples[8999], 0.0);
        assert_eq!(p.samples[8998], 8998.0);

        let p = preprocess_record(&rec("c", 12000, Class::Normal));
        assert_eq!(p.samples, (1..=9000).map(|v| v as f64).collect::<Vec<_>>());

        // Odd deficit: extra zero on the right.
        let p = canonicalize_length(&rec("d", 4, Class::Af), 7);
        assert_eq!(p.samples, vec![0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn rebalance_counts() {
        let mut records = Vec::new();
        for (c, n) in [(Class::Normal, 7), (Class::Af, 3), (Class::Other, 4), (Class::Noise, 2)] {
            for i in 0..n {
                records.push(rec(&format!("{}{i}", c.token()), 5, c));
            }
        }
        let d = Dataset::new(records, "t");
        let r = rebalance(&d, NoiseDuplication::AddFive);
        assert_eq!(r.class_counts(), [7, 6, 4, 12]);
        assert_eq!(&r.records[..d.len()], &d.records[..]);
        assert_eq!(rebalance(&d, NoiseDuplication::FiveTotal).class_counts(), [7, 6, 4, 10]);
        assert!(r.records.iter().all(|x| {
            let orig = d.records.iter().find(|o| o.id == base_id(&x.id)).unwrap();
            orig.samples == x.samples && orig.label == x.label
        }));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = Dataset::new((0..100).map(|i| rec(&format!("r{i}"), 3, Class::Other)).collect(), "t");
        let (a, b) = split_dataset(&d, 0.9, 7).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        let (a2, b2) = split_dataset(&d, 0.9, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let mut ids: Vec<_> = a.records.iter().chain(&b.records).map(|r| r.id.clone()).collect();
        ids.sort();
        let mut orig: Vec<_> = d.records.iter().map(|r| r.id.clone()).collect();
        orig.sort();
        assert_eq!(ids, orig);
        assert!(split_dataset(&d, 1.0, 0).is_err());
    }

    #[test]
    fn load_and_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::new(
            vec![rec("x1", 4, Class::Noise), rec("x0", 3, Class::Normal), rec("x2", 5, Class::Af)],
            "t",
        );
        save_records(&d, dir.path()).unwrap();
        let back = load_records(dir.path(), &dir.path().join("index.csv")).unwrap();
        assert_eq!(back.records, d.records);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let idx = dir.path().join("index.csv");
        fs::write(&idx, "").unwrap();
        assert!(load_records(dir.path(), &idx).is_err());
        fs::write(&idx, "a,N\nb,Q\n").unwrap();
        assert!(matches!(load_records(dir.path(), &idx), Err(Error::Data(_))));
        fs::write(&idx, "a,N\nb,A\n").unwrap();
        match load_records(dir.path(), &idx) {
            Err(Error::MissingRecords(ids)) => assert_eq!(ids, vec!["a".to_string(), "b".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
