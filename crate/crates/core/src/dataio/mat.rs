//! Minimal MATLAB level-4 reader for native `.mat` records.

use std::fs;
use std::path::Path;

use super::{save_records, Dataset, Record};
use crate::error::{Error, IoContext, Result};

fn i32_at(bytes: &[u8], at: usize) -> Option<i32> {
    bytes.get(at..at + 4).map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Decodes the first (real, little-endian) matrix of a level-4 MAT file,
/// returned in column-major order.
pub fn read_mat_v4(bytes: &[u8]) -> std::result::Result<Vec<f64>, String> {
    let header: Vec<i32> = (0..5)
        .map(|k| i32_at(bytes, 4 * k))
        .collect::<Option<_>>()
        .ok_or("truncated header")?;
    let (mopt, rows, cols, imag, namlen) = (header[0], header[1], header[2], header[3], header[4]);
    if !(0..10000).contains(&mopt) || rows < 0 || cols < 0 || namlen < 0 {
        return Err(format!("not a level-4 MAT header (type {mopt})"));
    }
    let (m, o, p, t) = (mopt / 1000, (mopt / 100) % 10, (mopt / 10) % 10, mopt % 10);
    if m != 0 {
        return Err("only little-endian MAT files are supported".into());
    }
    if o != 0 || t != 0 || imag != 0 {
        return Err("only real full numeric matrices are supported".into());
    }
    let width = match p {
        0 => 8,
        1 | 2 => 4,
        3 | 4 => 2,
        5 => 1,
        _ => return Err(format!("unknown precision code {p}")),
    };
    let count = rows as usize * cols as usize;
    let start = 20 + namlen as usize;
    let data = bytes
        .get(start..start + count * width)
        .ok_or_else(|| format!("expected {count} values, file too short"))?;
    Ok(data
        .chunks_exact(width)
        .map(|c| match p {
            0 => f64::from_le_bytes(c.try_into().unwrap()),
            1 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            2 => i32::from_le_bytes(c.try_into().unwrap()) as f64,
            3 => i16::from_le_bytes(c.try_into().unwrap()) as f64,
            4 => u16::from_le_bytes(c.try_into().unwrap()) as f64,
            _ => c[0] as f64,
        })
        .collect())
}

/// Converts a native directory (`REFERENCE.csv` plus `<id>.mat`)
/// into the text layout under `out`.
pub fn convert_native(src: &Path, out: &Path) -> Result<Dataset> {
    let reference = src.join("REFERENCE.csv");
    let index = super::read_index(&reference)?;
    let missing: Vec<String> = index
        .iter()
        .filter(|(id, _)| !src.join(format!("{id}.mat")).is_file())
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingRecords(missing));
    }
    let mut records = Vec::with_capacity(index.len());
    for (id, label) in index {
        let path = src.join(format!("{id}.mat"));
        let bytes = fs::read(&path).at(&path)?;
        let samples = read_mat_v4(&bytes).map_err(|detail| Error::Format { path, detail })?;
        records.push(Record { id, samples, label });
    }
    let ds = Dataset::new(records, format!("native:{}", src.display()));
    save_records(&ds, out)?;
    Ok(ds)
}
