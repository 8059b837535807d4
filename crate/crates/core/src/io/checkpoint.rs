//! Checkpoints: a JSON manifest plus a blob of little-endian `f32` values
//! laid out in manifest order.

use super::{format_err, read, read_json, write, write_json, Result};
use crate::net::{ClassifierModel, Variant};
use crate::supervision::PpeTypeConfig;
use crate::train::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub variant: Variant,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    pub train_config: TrainConfig,
    pub ppe: PpeTypeConfig,
    #[serde(default)]
    pub split_ratios: Option<[f64; 3]>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

/// Blob written next to `manifest_path`: same stem, `.bin` extension.
pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn encode_blob(model: &ClassifierModel<f32>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    for p in model.params() {
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (entries, bytes)
}

pub struct CheckpointMeta {
    pub train_config: TrainConfig,
    pub ppe: PpeTypeConfig,
    pub split_ratios: Option<[f64; 3]>,
    pub metrics: BTreeMap<String, f64>,
}

pub fn save(manifest_path: &Path, model: &ClassifierModel<f32>, meta: CheckpointMeta) -> Result<CheckpointManifest> {
    let (tensors, bytes) = encode_blob(model);
    let blob = blob_path(manifest_path);
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        variant: model.variant,
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| format_err(manifest_path, "checkpoint path has no file name"))?,
        tensors,
        train_config: meta.train_config,
        ppe: meta.ppe,
        split_ratios: meta.split_ratios,
        metrics: meta.metrics,
    };
    write(&blob, &bytes)?;
    write_json(manifest_path, &manifest)?;
    Ok(manifest)
}

pub fn load(manifest_path: &Path) -> Result<(ClassifierModel<f32>, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(manifest_path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(
            manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let blob_file = manifest_path.with_file_name(&manifest.blob);
    let bytes = read(&blob_file)?;
    let mut model = ClassifierModel::<f32>::init(manifest.variant, &mut ChaCha8Rng::seed_from_u64(0));
    let params = model.params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(format_err(
            manifest_path,
            format!(
                "variant {} has {} tensors, manifest lists {}",
                manifest.variant,
                params.len(),
                manifest.tensors.len()
            ),
        ));
    }
    let mut expected_offset = 0;
    for (p, entry) in params.into_iter().zip(&manifest.tensors) {
        if p.name != entry.name || p.shape() != entry.shape.as_slice() {
            return Err(format_err(
                manifest_path,
                format!(
                    "expected {} {:?}, found {} {:?}",
                    p.name,
                    p.shape(),
                    entry.name,
                    entry.shape
                ),
            ));
        }
        if entry.offset != expected_offset {
            return Err(format_err(manifest_path, format!("{}: offset {} should be {expected_offset}", entry.name, entry.offset)));
        }
        let len = p.value.len() * 4;
        let chunk = bytes
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| format_err(&blob_file, format!("truncated at {}", entry.name)))?;
        for (dst, b) in p.value.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        expected_offset += len;
    }
    if bytes.len() != expected_offset {
        return Err(format_err(&blob_file, format!("{} trailing bytes", bytes.len() - expected_offset)));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            train_config: TrainConfig::default(),
            ppe: PpeTypeConfig::helmet(),
            split_ratios: Some([0.7, 0.15, 0.15]),
            metrics: [("val_accuracy".to_string(), 0.5)].into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        for v in Variant::ALL {
            let model = ClassifierModel::<f32>::init(v, &mut ChaCha8Rng::seed_from_u64(9));
            save(&path, &model, meta()).unwrap();
            let (back, m) = load(&path).unwrap();
            assert_eq!(m.variant, v);
            assert_eq!(back, model);
            let img = Tensor::from_fn(&[3, 64, 64], |i| ((i * 37) % 101) as f32 / 100.0);
            let a = model.classify_crop(&img).unwrap();
            let b = back.classify_crop(&img).unwrap();
            assert_eq!(a.probability.to_bits(), b.probability.to_bits());
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn layout_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = ClassifierModel::<f32>::init(Variant::Sam, &mut ChaCha8Rng::seed_from_u64(1));
        let m = save(&path, &model, meta()).unwrap();
        let bytes = std::fs::read(blob_path(&path)).unwrap();
        assert_eq!(bytes.len(), model.num_parameters() * 4);
        assert_eq!(m.tensors[0].name, "conv1.weight");
        let w0 = model.params()[0].value.data()[0];
        assert_eq!(&bytes[..4], &w0.to_le_bytes());

        std::fs::write(blob_path(&path), &bytes[..bytes.len() - 4]).unwrap();
        assert!(load(&path).is_err());
        assert!(load(&dir.path().join("missing.json")).is_err());
    }
}
