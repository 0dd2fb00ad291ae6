pub mod eval;
pub mod gradcheck;
pub mod predict;
pub mod profile;
pub mod synth;
pub mod train;

use std::fs;
use std::path::Path;

use lsat_core::data::{load_sample, BiTemporalSample, DatasetManifest, Split};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn load_manifest(data: &Path) -> CliResult<DatasetManifest> {
    if !data.is_dir() {
        return Err(CliError::Runtime(format!(
            "data directory {} does not exist",
            data.display()
        )));
    }
    Ok(DatasetManifest::load(&data.join(MANIFEST_FILE))?)
}

/// Every sample of `split`, in manifest order.
pub fn load_split(data: &Path, manifest: &DatasetManifest, split: Split) -> CliResult<Vec<BiTemporalSample>> {
    manifest
        .ids(split)
        .into_iter()
        .map(|id| load_sample(data, id).map_err(CliError::from))
        .collect()
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}
