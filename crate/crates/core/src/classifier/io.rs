//! Versioned binary model files.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header (architecture, seed, temperature, parameter names and lengths),
//! then every parameter as little-endian `f64` in header order. Parameters
//! are stored as raw bits, so a save/load round trip is exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ClassifierModel, LayerDesc, ModelKind};
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"ECGRMDL\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelKind,
    seed: u64,
    input_len: usize,
    classes: usize,
    temperature: f64,
    layers: Vec<LayerDesc>,
    params: Vec<(String, usize)>,
}

pub fn write_model(model: &ClassifierModel, out: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        spec: model.kind,
        seed: model.seed,
        input_len: model.input_len,
        classes: model.classes,
        temperature: model.temperature,
        layers: model.layers.clone(),
        params: model.param_names.iter().cloned().zip(model.params.iter().map(Vec::len)).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for p in &model.params {
        for v in p {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model(bytes: &[u8]) -> std::result::Result<ClassifierModel, String> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != MAGIC {
        return Err("not a model file (bad magic)".into());
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|e| e.to_string())?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(format!("unsupported model format version {version}"));
    }
    r.read_exact(&mut word).map_err(|e| e.to_string())?;
    let hlen = u32::from_le_bytes(word) as usize;
    if r.len() < hlen {
        return Err("truncated header".into());
    }
    let header: Header = serde_json::from_slice(&r[..hlen]).map_err(|e| e.to_string())?;
    r = &r[hlen..];

    let mut model = ClassifierModel::from_layers(header.spec, header.layers, header.input_len, header.classes, header.seed)
        .map_err(|e| e.to_string())?;
    model.set_temperature(header.temperature).map_err(|e| e.to_string())?;
    if header.params.len() != model.params.len() {
        return Err("parameter list does not match architecture".into());
    }
    for (i, (name, len)) in header.params.into_iter().enumerate() {
        if model.params[i].len() != len || model.param_names[i] != name {
            return Err(format!("parameter {name} has unexpected shape"));
        }
        let mut buf = [0u8; 8];
        for v in model.params[i].iter_mut() {
            r.read_exact(&mut buf).map_err(|_| "truncated parameter data".to_string())?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if !r.is_empty() {
        return Err(format!("{} trailing bytes after parameters", r.len()));
    }
    Ok(model)
}

pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf).at(path)?;
    fs::write(path, buf).at(path)
}

pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    let bytes = fs::read(path).at(path)?;
    read_model(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

impl ClassifierModel {
    /// Short content hash of the serialized model, used as its id.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        write_model(self, &mut buf).expect("in-memory write");
        hex::encode(&Sha256::digest(&buf)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::build_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = build_model("desk", 128, 4, 11).unwrap();
        m.set_temperature(20.0).unwrap();
        m.params_mut()[0][0] = 1.0 / 3.0;
        m.params_mut()[1][0] = -0.0;
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(&buf).unwrap();
        assert_eq!(back.temperature(), 20.0);
        for (a, b) in m.params().iter().zip(back.params()) {
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(m.fingerprint(), back.fingerprint());
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_model(b"not a model at all").is_err());
        let m = build_model("desk", 64, 4, 1).unwrap();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_model(&buf).is_err());
    }
}
