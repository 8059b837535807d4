//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.json        generator config, sample count, person box
//! <dir>/labels.jsonl         {"id", "label", "keypoints": {name: [x, y]}} per line
//! <dir>/images/<id:06>.ppm   one P6 crop per sample
//! ```

use super::netpbm::{read_ppm, write_ppm};
use super::{format_err, fs_err, prepare_output_dir, read, read_json, write, write_json, IoError, Result};
use crate::supervision::{Rect, Skeleton};
use crate::synth::{Sample, SynthConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_samples: usize,
    pub seed: u64,
    pub person_box: Rect,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelLine {
    pub id: u64,
    pub label: u8,
    pub keypoints: Skeleton,
}

pub fn image_path(dir: &Path, id: u64) -> PathBuf {
    dir.join("images").join(format!("{id:06}.ppm"))
}

/// Writes `samples` under `dir`. Refuses a non-empty directory unless
/// `force`, in which case previous dataset files are replaced.
pub fn write_dataset(dir: &Path, samples: &[Sample], config: &SynthConfig, force: bool) -> Result<()> {
    prepare_output_dir(dir, force)?;
    let images = dir.join("images");
    if images.exists() {
        std::fs::remove_dir_all(&images).map_err(fs_err(&images))?;
    }
    std::fs::create_dir_all(&images).map_err(fs_err(&images))?;
    let mut lines = String::new();
    for s in samples {
        write_ppm(&image_path(dir, s.id), &s.image)?;
        let line = LabelLine {
            id: s.id,
            label: s.label,
            keypoints: s.skeleton.clone(),
        };
        lines.push_str(&serde_json::to_string(&line).expect("label lines serialize"));
        lines.push('\n');
    }
    write(&dir.join("labels.jsonl"), lines.as_bytes())?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        n_samples: samples.len(),
        seed: config.seed,
        person_box: config.person_box(),
        synth: config.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let m: DatasetManifest = read_json(&path)?;
    if m.format_version != FORMAT_VERSION {
        return Err(format_err(&path, format!("unsupported format_version {}", m.format_version)));
    }
    Ok(m)
}

/// Reads a dataset. Malformed label lines are reported with their line
/// number.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join("labels.jsonl");
    let text = String::from_utf8(read(&path)?).map_err(|_| format_err(&path, "not UTF-8"))?;
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line_err = |msg: String| IoError::Line {
            path: path.clone(),
            line: i + 1,
            msg,
        };
        let line: LabelLine = serde_json::from_str(raw).map_err(|e| line_err(e.to_string()))?;
        if line.label > 1 {
            return Err(line_err(format!("label must be 0 or 1, got {}", line.label)));
        }
        let keypoints = Skeleton::new(line.keypoints.keypoints().clone()).map_err(|e| line_err(e.to_string()))?;
        let image = read_ppm(&image_path(dir, line.id))?;
        samples.push(Sample {
            id: line.id,
            image,
            label: line.label,
            skeleton: keypoints,
            person_box: manifest.person_box,
        });
    }
    if samples.len() != manifest.n_samples {
        return Err(format_err(
            &path,
            format!("{} samples listed but manifest says {}", samples.len(), manifest.n_samples),
        ));
    }
    Ok((manifest, samples))
}
