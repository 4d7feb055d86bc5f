use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::phantom::{read_study, DceStudy};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.case_id.as_str())
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

/// Shuffle `ids` with `seed` and cut them into train / val / test blocks.
pub fn make_manifest(ids: &[String], ratios: SplitRatios, seed: u64) -> Result<Manifest> {
    let total = ratios.train + ratios.val + ratios.test;
    if [ratios.train, ratios.val, ratios.test].iter().any(|r| !(*r >= 0.0)) || !(total > 0.0) {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let mut order: Vec<&String> = ids.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len() as f64;
    let n_train = (n * ratios.train / total).round() as usize;
    let n_val = ((n * ratios.val / total).round() as usize).min(ids.len() - n_train);
    let cases = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| ManifestEntry {
            case_id: id.clone(),
            split: if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            },
        })
        .collect();
    Ok(Manifest { cases })
}

/// Read every study of one split from `dir`.
pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<DceStudy>> {
    manifest.ids(split).par_iter().map(|id| read_study(dir, id)).collect()
}
