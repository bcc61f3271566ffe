use std::path::Path;

use evlight_core::synth::{load_sequence, Manifest, Sequence, Split};
use evlight_core::Tensor;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// A sequence with its frames and per-frame raw voxel grids as tensors.
#[derive(Clone, Debug)]
pub struct SequenceData {
    pub id: String,
    pub low: Vec<Tensor>,
    pub gt: Vec<Tensor>,
    pub voxels: Vec<Tensor>,
}

impl SequenceData {
    pub fn from_sequence(seq: &Sequence, bins: usize) -> Result<Self> {
        let voxels = (0..seq.len())
            .map(|k| Ok(seq.voxel_grid(k, bins)?.data().clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: seq.id.clone(),
            low: seq.low.iter().map(|f| f.to_tensor()).collect(),
            gt: seq.normal.iter().map(|f| f.to_tensor()).collect(),
            voxels,
        })
    }

    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.low[0].shape();
        (s[1], s[2])
    }
}

/// Loads every sequence of `split`; only that split's files are touched.
pub fn load_split(manifest_path: &Path, split: Split, bins: usize) -> Result<Vec<SequenceData>> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(""));
    let samples: Vec<_> = manifest.split(split).collect();
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "{} has no {split:?} samples",
            manifest_path.display()
        )));
    }
    samples
        .par_iter()
        .map(|s| SequenceData::from_sequence(&load_sequence(root, s)?, bins))
        .collect()
}
