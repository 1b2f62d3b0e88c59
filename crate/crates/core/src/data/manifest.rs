use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NUM_CLASSES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    #[serde(rename = "image")]
    pub image_path: String,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub captions: Vec<String>,
}

impl Sample {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.class_id >= NUM_CLASSES {
            return Err(format!("class {} outside [0, {NUM_CLASSES})", self.class_id));
        }
        if self.captions.is_empty() {
            return Err("no captions".into());
        }
        if let Some(i) = self.captions.iter().position(|c| c.trim().is_empty()) {
            return Err(format!("caption {i} is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory that image paths are relative to.
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, samples: Vec<Sample>) -> Self {
        Self {
            root: root.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn caption_count(&self) -> usize {
        self.samples.iter().map(|s| s.captions.len()).sum()
    }

    /// Samples per class id, indexed 0..NUM_CLASSES.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.class_id] += 1;
        }
        counts
    }

    pub fn image_path(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.image_path)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// Parses JSON Lines text. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_manifest(text: &str, root: &Path, path: &Path) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let sample: Sample = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        sample.validate().map_err(bad)?;
        samples.push(sample);
    }
    Ok(DatasetManifest::new(root, samples))
}

/// Reads a manifest; image paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &root, path)
}

/// Seeded shuffle, then the first `round(n * val_fraction)` samples go to
/// validation. Both halves keep manifest order.
pub fn split_dataset(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let n = manifest.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * val_fraction).round() as usize;
    let (val, train) = order.split_at(n_val);
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    Ok((manifest.subset(&train), manifest.subset(&val)))
}
