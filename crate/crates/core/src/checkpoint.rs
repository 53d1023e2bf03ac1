//! Parameter checkpoints: a little-endian binary tensor file plus a JSON manifest.
//!
//! Layout of `params.bin`: magic `VIDP`, format version, tensor count, then per tensor
//! the name length and UTF-8 bytes, rank, dimensions as `u64`, and `f32` values.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::evalkit::{ReidConfig, ToyClassifier};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VIDP";
const VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// What the parameters belong to, e.g. `denoiser` or `reid`.
    pub kind: String,
    pub config_hash: String,
    pub step: usize,
    pub seed: u64,
    /// Full model configuration, enough to rebuild the layer inventory.
    pub config: serde_json::Value,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_store(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(store.len() as u32).map_err(io)?;
    for (_, name, t) in store.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32).map_err(io)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_store(path: &Path) -> Result<ParamStore<f32>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let trunc = |_| bad(path, "truncated file");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(bad(path, "not a parameter file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(trunc)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(trunc)?;
        let name = String::from_utf8(name).map_err(|_| bad(path, "tensor name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<usize>>>()
            .map_err(trunc)?;
        let mut data = vec![0.0f32; shape.iter().product()];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(trunc)?;
        store
            .insert(name, Tensor::from_vec(&shape, data)?)
            .map_err(|e| bad(path, e.to_string()))?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad(path, "trailing bytes"));
    }
    Ok(store)
}

/// Writes `<dir>/params.bin` and `<dir>/manifest.json`.
pub fn save(dir: &Path, store: &ParamStore<f32>, manifest: &CheckpointManifest) -> Result<()> {
    write_store(&dir.join(PARAMS_FILE), store)?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<(ParamStore<f32>, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::MissingPath(mpath));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| bad(&mpath, e.to_string()))?;
    let store = read_store(&dir.join(PARAMS_FILE))?;
    Ok((store, manifest))
}

pub fn save_denoiser(dir: &Path, params: &DenoiserParams<f32>, step: usize, seed: u64) -> Result<()> {
    let manifest = CheckpointManifest {
        kind: "denoiser".into(),
        config_hash: params.config().hash(),
        step,
        seed,
        config: serde_json::to_value(params.config()).expect("config serializes"),
    };
    save(dir, params.store(), &manifest)
}

/// Loads a denoiser checkpoint, checking that the stored config matches its hash.
pub fn load_denoiser(dir: &Path) -> Result<(DenoiserParams<f32>, CheckpointManifest)> {
    let (store, manifest) = load(dir)?;
    if manifest.kind != "denoiser" {
        return Err(bad(dir, format!("expected a denoiser checkpoint, found `{}`", manifest.kind)));
    }
    let config: DenoiserConfig =
        serde_json::from_value(manifest.config.clone()).map_err(|e| bad(dir, e.to_string()))?;
    if config.hash() != manifest.config_hash {
        return Err(bad(dir, "config hash mismatch"));
    }
    let params = DenoiserParams::from_store(&config, store).map_err(|e| bad(dir, e.to_string()))?;
    Ok((params, manifest))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ReidLayout {
    reid: ReidConfig,
    in_channels: usize,
    num_classes: usize,
}

pub fn save_reid(dir: &Path, clf: &ToyClassifier, reid: &ReidConfig, step: usize) -> Result<()> {
    let layout = ReidLayout {
        reid: *reid,
        in_channels: clf.in_channels,
        num_classes: clf.num_classes,
    };
    let config = serde_json::to_value(layout).expect("layout serializes");
    let manifest = CheckpointManifest {
        kind: "reid".into(),
        config_hash: hash_json(&config),
        step,
        seed: reid.seed,
        config,
    };
    save(dir, &clf.store, &manifest)
}

pub fn load_reid(dir: &Path) -> Result<(ToyClassifier, CheckpointManifest)> {
    let (store, manifest) = load(dir)?;
    if manifest.kind != "reid" {
        return Err(bad(dir, format!("expected a reid checkpoint, found `{}`", manifest.kind)));
    }
    if hash_json(&manifest.config) != manifest.config_hash {
        return Err(bad(dir, "config hash mismatch"));
    }
    let layout: ReidLayout = serde_json::from_value(manifest.config.clone()).map_err(|e| bad(dir, e.to_string()))?;
    let clf = ToyClassifier::from_store(layout.in_channels, layout.num_classes, &layout.reid, &store)
        .map_err(|e| bad(dir, e.to_string()))?;
    Ok((clf, manifest))
}

fn hash_json(v: &serde_json::Value) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            image_size: (8, 16),
            base_channels: 8,
            embedding_dim: 16,
            max_groups: 4,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn denoiser_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = DenoiserParams::<f32>::init(&small(), 3).unwrap();
        // perturb so zero-initialized tensors are covered too
        for id in p.store().ids().collect::<Vec<_>>() {
            for (i, v) in p.store_mut().get_mut(id).data_mut().iter_mut().enumerate() {
                *v += (i as f32 * 0.37).sin() * 1e-3;
            }
        }
        save_denoiser(dir.path(), &p, 42, 7).unwrap();
        let (q, m) = load_denoiser(dir.path()).unwrap();
        assert_eq!(m.step, 42);
        assert_eq!(m.seed, 7);
        assert_eq!(q.config(), p.config());
        for ((_, na, a), (_, nb, b)) in p.store().iter().zip(q.store().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn missing_and_corrupt_checkpoints_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_denoiser(dir.path()), Err(Error::MissingPath(_))));
        let p = DenoiserParams::<f32>::init(&small(), 0).unwrap();
        save_denoiser(dir.path(), &p, 0, 0).unwrap();
        let bin = dir.path().join(PARAMS_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_denoiser(dir.path()), Err(Error::Checkpoint { .. })));
        fs::write(&bin, b"XXXX").unwrap();
        assert!(matches!(load_denoiser(dir.path()), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn tampered_config_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = DenoiserParams::<f32>::init(&small(), 0).unwrap();
        save_denoiser(dir.path(), &p, 0, 0).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m.config["base_channels"] = serde_json::json!(16);
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_denoiser(dir.path()), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn reid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ReidConfig::default();
        let clf = ToyClassifier::new(3, 4, &ReidConfig { seed: 5, ..cfg }).unwrap();
        save_reid(dir.path(), &clf, &cfg, 10).unwrap();
        let (back, m) = load_reid(dir.path()).unwrap();
        assert_eq!(m.kind, "reid");
        assert_eq!(back.store, clf.store);
        assert_eq!(back.num_classes, 4);
        assert!(matches!(load_denoiser(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
