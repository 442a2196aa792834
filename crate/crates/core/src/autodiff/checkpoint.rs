//! Checkpoints: a JSON manifest plus one raw little-endian float64 blob
//! holding every parameter in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Element (not byte) offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub values: Vec<Mat>,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    names: &[String],
    values: &[Mat],
    hyperparameters: serde_json::Value,
    seed: u64,
) -> Result<()> {
    assert_eq!(names.len(), values.len());
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(names.len());
    let mut offset = 0usize;
    let mut blob: Vec<u8> = Vec::new();
    for (name, value) in names.iter().zip(values) {
        params.push(ParamRecord {
            name: name.clone(),
            rows: value.rows(),
            cols: value.cols(),
            offset,
        });
        offset += value.data().len();
        for x in value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: 1,
        seed,
        hyperparameters,
        params,
    };
    let mut mf = std::fs::File::create(dir.join("manifest.json"))?;
    mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    let mut bf = std::fs::File::create(dir.join("params.bin"))?;
    bf.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut blob = Vec::new();
    std::fs::File::open(dir.join("params.bin"))?.read_to_end(&mut blob)?;
    let total: usize = manifest.params.iter().map(|p| p.rows * p.cols).sum();
    if blob.len() != total * 8 {
        return Err(Error::StaleCache(format!(
            "checkpoint blob holds {} bytes, manifest expects {}",
            blob.len(),
            total * 8
        )));
    }
    let mut values = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let n = p.rows * p.cols;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = (p.offset + i) * 8;
            let bytes: [u8; 8] = blob[at..at + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(bytes));
        }
        values.push(Mat::from_vec(p.rows, p.cols, data));
    }
    Ok(Checkpoint { manifest, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_and_deterministic() {
        let dir = std::env::temp_dir().join("geotok-ckpt-test");
        let names = vec!["a.w".to_string(), "b.bias".to_string()];
        let values = vec![
            Mat::from_vec(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]),
            Mat::from_vec(1, 3, vec![0.1, 0.2, 0.3]),
        ];
        save_checkpoint(&dir, &names, &values, serde_json::json!({"lr": 1e-3}), 7).unwrap();
        let blob1 = std::fs::read(dir.join("params.bin")).unwrap();
        save_checkpoint(&dir, &names, &values, serde_json::json!({"lr": 1e-3}), 7).unwrap();
        let blob2 = std::fs::read(dir.join("params.bin")).unwrap();
        assert_eq!(blob1, blob2);

        let ck = load_checkpoint(&dir).unwrap();
        assert_eq!(ck.manifest.seed, 7);
        assert_eq!(ck.values.len(), 2);
        for (a, b) in ck.values.iter().zip(&values) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_blob_is_detected() {
        let dir = std::env::temp_dir().join("geotok-ckpt-trunc");
        let names = vec!["w".to_string()];
        let values = vec![Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0])];
        save_checkpoint(&dir, &names, &values, serde_json::json!({}), 0).unwrap();
        let blob = std::fs::read(dir.join("params.bin")).unwrap();
        std::fs::write(dir.join("params.bin"), &blob[..blob.len() - 8]).unwrap();
        assert!(load_checkpoint(&dir).is_err());
    }
}
