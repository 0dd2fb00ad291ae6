use std::io::Write;
use std::path::Path;

use lsat_core::data::Split;
use lsat_core::network::load_checkpoint;
use lsat_core::train::{evaluate, MetricsReport};

use super::{load_manifest, load_split, split_name, write_file};
use crate::error::{CliError, CliResult};
use crate::EvalArgs;

pub fn evaluate_split(checkpoint: &Path, data: &Path, split: Split, threshold: f64) -> CliResult<MetricsReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Usage(format!(
            "--threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let model = load_checkpoint::<f32>(checkpoint)?;
    let manifest = load_manifest(data)?;
    let samples = load_split(data, &manifest, split)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(format!(
            "split {} of {} is empty",
            split_name(split),
            data.display()
        )));
    }
    Ok(evaluate(&model, &samples, threshold, 8)?)
}

pub fn run(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let report = evaluate_split(&args.checkpoint, &args.data, args.split, args.threshold)?;
    let json = serde_json::to_string(&report).expect("report serializes");
    if let Some(path) = &args.json {
        write_file(path, &(json.clone() + "\n"))?;
    }
    let _ = write!(out, "{}", report.table(split_name(args.split)));
    let _ = writeln!(out, "{json}");
    Ok(())
}
