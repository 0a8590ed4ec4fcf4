//! Dataset construction: generate scenes across seeds, write OCCSEQ files,
//! and record a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occ::SceneSequence;
use crate::synth::occseq::{read_occseq, write_occseq};
use crate::synth::scene::{generate_scene, SceneConfig};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Template the per-scene configs were derived from.
    pub config: SceneConfig,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn paths(&self, dir: &Path, split: Split) -> Vec<PathBuf> {
        self.scenes
            .iter()
            .filter(|e| e.split == split)
            .map(|e| dir.join(&e.path))
            .collect()
    }
}

/// Generate `n_scenes` scenes with seeds `base_seed..base_seed+n`, split by
/// `train_ratio` (train fraction; the remainder is test), and write OCCSEQ
/// files plus the manifest into `dir`. Refuses to clobber an existing
/// manifest unless `overwrite` is set.
pub fn make_dataset(
    template: &SceneConfig,
    n_scenes: usize,
    train_ratio: f64,
    base_seed: u64,
    dir: &Path,
    overwrite: bool,
) -> Result<Manifest> {
    if n_scenes == 0 {
        return Err(Error::config("n_scenes must be >= 1"));
    }
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(Error::config(format!(
            "train_ratio {train_ratio} must lie in [0, 1]"
        )));
    }
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST_NAME);
    if manifest_path.exists() && !overwrite {
        return Err(Error::config(format!(
            "{} already exists; pass overwrite to regenerate",
            manifest_path.display()
        )));
    }
    let n_train = (n_scenes as f64 * train_ratio).round() as usize;
    let mut scenes = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let seed = base_seed + i as u64;
        let cfg = SceneConfig { seed, ..*template };
        let seq = generate_scene(&cfg)?;
        let name = format!("scene_{i:04}.occseq");
        write_occseq(&seq, &dir.join(&name))?;
        scenes.push(ManifestEntry {
            path: name,
            split: if i < n_train { Split::Train } else { Split::Test },
            seed,
        });
    }
    let manifest = Manifest {
        version: 1,
        config: *template,
        scenes,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let raw = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    Ok(serde_json::from_str(&raw)?)
}

pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<SceneSequence>> {
    manifest
        .paths(dir, split)
        .iter()
        .map(|p| read_occseq(p))
        .collect()
}
