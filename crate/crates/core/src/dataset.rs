//! In-memory training examples and the on-disk data directory:
//! `manifest.jsonl`, `dataset.json`, and one feature file per grid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenes::{
    read_features, read_manifest, write_features, write_manifest, Caption, Cell, ChangeType,
    DatasetSpec, DistractorConfig, FeatureGrid, ManifestRecord, PairSample,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INFO_FILE: &str = "dataset.json";

/// One before/after pair with its reference caption and change metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub before: FeatureGrid,
    pub after: FeatureGrid,
    pub caption: Caption,
    pub change_type: ChangeType,
    pub change_cells: Vec<Cell>,
    pub distractor: DistractorConfig,
    pub seed: u64,
}

impl From<PairSample> for Example {
    fn from(p: PairSample) -> Self {
        let change_cells = p.change_cells();
        Self {
            before: p.before,
            after: p.after,
            caption: p.caption,
            change_type: p.change.change_type,
            change_cells,
            distractor: p.distractor,
            seed: p.seed,
        }
    }
}

/// Generates a dataset in memory.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Example>> {
    Ok(spec.generate()?.into_iter().map(Example::from).collect())
}

/// Writes grids, manifest and generator metadata under `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    spec: Option<&DatasetSpec>,
    examples: &[Example],
) -> Result<()> {
    let dir = dir.as_ref();
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let mut records = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let before_path = format!("features/{i:06}_before.feat");
        let after_path = format!("features/{i:06}_after.feat");
        write_features(&ex.before, dir.join(&before_path))?;
        write_features(&ex.after, dir.join(&after_path))?;
        records.push(ManifestRecord {
            seed: ex.seed,
            change_type: ex.change_type,
            caption: ex.caption.text(),
            before_path,
            after_path,
            change_cells: ex.change_cells.clone(),
            distractor: ex.distractor,
        });
    }
    write_manifest(&records, dir.join(MANIFEST_FILE))?;
    if let Some(spec) = spec {
        let path = dir.join(INFO_FILE);
        let json = serde_json::to_string_pretty(&DatasetInfo::from(spec)).expect("info serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads every manifest record and its grids. Relative feature paths are
/// resolved against `dir`.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<Example>> {
    let dir = dir.as_ref();
    let records = read_manifest(dir.join(MANIFEST_FILE))?;
    if records.is_empty() {
        return Err(Error::Contract(format!(
            "{} lists no examples",
            dir.join(MANIFEST_FILE).display()
        )));
    }
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            dir.join(p)
        }
    };
    records
        .into_iter()
        .map(|r| {
            Ok(Example {
                before: read_features(resolve(&r.before_path))?,
                after: read_features(resolve(&r.after_path))?,
                caption: Caption::parse(&r.caption),
                change_type: r.change_type,
                change_cells: r.change_cells,
                distractor: r.distractor,
                seed: r.seed,
            })
        })
        .collect()
}

/// Generator metadata stored beside the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub grid_size: usize,
    pub channels: usize,
    pub codebook_seed: u64,
    pub count: usize,
    pub seed: u64,
    pub change_mix: Vec<ChangeType>,
    pub max_shift: i32,
    pub gain_min: f64,
    pub gain_max: f64,
    pub noise_sigma: f64,
}

impl From<&DatasetSpec> for DatasetInfo {
    fn from(s: &DatasetSpec) -> Self {
        Self {
            grid_size: s.generator.grid_size,
            channels: s.generator.channels,
            codebook_seed: s.generator.codebook_seed,
            count: s.count,
            seed: s.seed,
            change_mix: s.change_mix.clone(),
            max_shift: s.distractor.max_shift,
            gain_min: s.distractor.gain_min,
            gain_max: s.distractor.gain_max,
            noise_sigma: s.distractor.noise_sigma,
        }
    }
}
