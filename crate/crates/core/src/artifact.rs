//! On-disk formats: NumPy `.npy` arrays, JSON documents, and model directories
//! (`manifest.json` + `params.bin` little-endian `f64` blob + SHA-256).
//!
//! The `.npy` files follow format version 1.0: the magic string `\x93NUMPY`,
//! version bytes `1 0`, a little-endian `u16` header length, then an ASCII
//! dict `{'descr': '<f4', 'fortran_order': False, 'shape': (...), }` padded
//! with spaces and a trailing newline to a 64-byte boundary, then raw data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{checksum_params, LayerSpec, Network};

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_npy_f32(path: &Path, array: &NpyArray) -> Result<()> {
    let expected: usize = array.shape.iter().product();
    if expected != array.data.len() {
        return Err(Error::Shape(format!(
            "npy shape {:?} does not match {} values",
            array.shape,
            array.data.len()
        )));
    }
    let dims = match array.shape.len() {
        1 => format!("({},)", array.shape[0]),
        _ => format!(
            "({})",
            array.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat(unpadded.next_multiple_of(64) - unpadded));
    header.push('\n');

    let mut out = Vec::with_capacity(unpadded + 64 + array.data.len() * 4);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in &array.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_npy_f32(path: &Path) -> Result<NpyArray> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |why: &str| Error::Artifact(format!("{}: {why}", path.display()));
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("missing npy magic"));
    }
    if bytes[6] != 1 {
        return Err(bad("unsupported npy version"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not ASCII"))?;
    if !header.contains("'descr': '<f4'") {
        return Err(bad("only little-endian f4 arrays are supported"));
    }
    if header.contains("'fortran_order': True") {
        return Err(bad("fortran order is not supported"));
    }
    let start = header.find("'shape': (").ok_or_else(|| bad("no shape"))? + "'shape': (".len();
    let end = start + header[start..].find(')').ok_or_else(|| bad("unterminated shape"))?;
    let shape = header[start..end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape entry")))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[10 + hlen..];
    let count: usize = shape.iter().product();
    if body.len() != count * 4 {
        return Err(bad("data length does not match shape"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(NpyArray { shape, data })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One named network inside a model directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkManifest {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub num_params: usize,
    pub checksum: String,
}

/// `manifest.json` of a model directory. `extra` carries model-specific
/// configuration (kept as JSON so each model owns its schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: String,
    pub networks: Vec<NetworkManifest>,
    pub extra: serde_json::Value,
}

/// Writes the networks' parameters as one blob and a manifest describing them.
pub fn save_model(
    dir: &Path,
    kind: &str,
    networks: &[(&str, &Network)],
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(networks.len());
    for (name, net) in networks {
        for p in net.params() {
            blob.extend_from_slice(&p.to_le_bytes());
        }
        entries.push(NetworkManifest {
            name: name.to_string(),
            layers: net.specs(),
            num_params: net.num_params(),
            checksum: net.checksum(),
        });
    }
    fs::write(dir.join("params.bin"), &blob)?;
    let manifest = ModelManifest {
        kind: kind.to_string(),
        networks: entries,
        extra,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Loads a model directory, validating every network's shape and checksum.
pub fn load_model(dir: &Path, kind: &str) -> Result<(ModelManifest, Vec<Network>)> {
    let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.kind != kind {
        return Err(Error::Artifact(format!(
            "{} holds a `{}` model, expected `{kind}`",
            dir.display(),
            manifest.kind
        )));
    }
    let blob = fs::read(dir.join("params.bin"))?;
    let total: usize = manifest.networks.iter().map(|n| n.num_params).sum();
    if blob.len() != total * 8 {
        return Err(Error::Artifact(format!(
            "{}: parameter blob holds {} bytes, manifest expects {}",
            dir.display(),
            blob.len(),
            total * 8
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut nets = Vec::with_capacity(manifest.networks.len());
    for entry in &manifest.networks {
        let mut net = Network::zeroed(&entry.layers)?;
        if net.num_params() != entry.num_params {
            return Err(Error::Artifact(format!(
                "network `{}` architecture has {} parameters, manifest says {}",
                entry.name,
                net.num_params(),
                entry.num_params
            )));
        }
        let params: Vec<f64> = values.by_ref().take(entry.num_params).collect();
        let found = checksum_params(&params);
        if found != entry.checksum {
            return Err(Error::ChecksumMismatch {
                what: format!("network `{}`", entry.name),
                expected: entry.checksum.clone(),
                found,
            });
        }
        net.set_params(params)?;
        nets.push(net);
    }
    Ok((manifest, nets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;

    #[test]
    fn npy_header_is_padded_and_parsable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let arr = NpyArray {
            shape: vec![2, 3],
            data: vec![0.0, 1.0, 2.0, 3.0, 4.5, -1.0],
        };
        write_npy_f32(&path, &arr).unwrap();
        let bytes = fs::read(&path).unwrap();
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes[10 + hlen - 1], b'\n');
        assert_eq!(read_npy_f32(&path).unwrap(), arr);
    }

    #[test]
    fn npy_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npy");
        fs::write(&path, b"not an array").unwrap();
        assert!(matches!(read_npy_f32(&path), Err(Error::Artifact(_))));
    }

    #[test]
    fn model_round_trip_and_tamper_detection() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = Network::new(
            &[
                LayerSpec::Dense { inputs: 3, outputs: 4 },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Dense { inputs: 4, outputs: 1 },
            ],
            &mut rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), "toy", &[("body", &net)], serde_json::json!({"x": 1})).unwrap();
        let (manifest, nets) = load_model(dir.path(), "toy").unwrap();
        assert_eq!(manifest.extra["x"], 1);
        assert_eq!(nets[0].params(), net.params());
        assert!(load_model(dir.path(), "other").is_err());

        let mut blob = fs::read(dir.path().join("params.bin")).unwrap();
        blob[3] ^= 0x40;
        fs::write(dir.path().join("params.bin"), blob).unwrap();
        assert!(matches!(
            load_model(dir.path(), "toy"),
            Err(Error::ChecksumMismatch { .. })
        ));
    }
}
