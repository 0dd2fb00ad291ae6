use std::io::Write;

use lsat_core::network::LsatModel;
use lsat_core::profile::{count_flops, count_params, scaling_report, FlopReport, ParamReport, ScalingFit};
use serde::Serialize;

use super::write_file;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::ProfileArgs;

#[derive(Debug, Serialize)]
pub struct ModelProfile {
    pub flops: FlopReport,
    /// Counted from an instantiated parameter store.
    pub params: ParamReport,
}

/// Side lengths for token counts that must be perfect squares.
pub fn sides_for(sizes: &[usize]) -> CliResult<Vec<usize>> {
    if sizes.len() < 2 {
        return Err(CliError::Usage("--sizes needs at least two token counts".into()));
    }
    sizes
        .iter()
        .map(|&n| {
            let s = (n as f64).sqrt().round() as usize;
            if n == 0 || s * s != n {
                Err(CliError::Usage(format!(
                    "--sizes entry {n} is not a positive perfect square"
                )))
            } else {
                Ok(s)
            }
        })
        .collect()
}

pub fn attention_scaling(channels: usize, sizes: &[usize]) -> CliResult<(String, Vec<ScalingFit>)> {
    if channels == 0 {
        return Err(CliError::Usage("--channels must be positive".into()));
    }
    Ok(scaling_report(channels, &sides_for(sizes)?)?)
}

pub fn model_profile(cfg: &RunConfig, tile: usize) -> CliResult<ModelProfile> {
    let model = LsatModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    Ok(ModelProfile {
        flops: count_flops(&cfg.model, tile, 1)?,
        params: count_params(&model),
    })
}

pub fn run(args: &ProfileArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.attention_only {
        let (csv, fits) = attention_scaling(args.channels, &args.sizes)?;
        if let Some(path) = &args.out {
            write_file(path, &csv)?;
        }
        let _ = write!(out, "{csv}");
        for f in &fits {
            let _ = writeln!(
                out,
                "# {} C={}: attention-core slope {:.4}, total slope {:.4} (log-log in N)",
                f.kind, f.channels, f.slope_core, f.slope_total
            );
        }
        return Ok(());
    }
    let cfg = RunConfig::load(args.config.as_deref())?;
    let tile = args.tile.unwrap_or(cfg.model.tile);
    let report = model_profile(&cfg, tile)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = &args.out {
        write_file(path, &(json.clone() + "\n"))?;
    }
    let f = &report.flops;
    let _ = writeln!(out, "# {} | tile {} batch {}", f.convention, f.tile, f.batch);
    let _ = writeln!(out, "{:<8} {:>14} {:>14} {:>10}", "module", "MACs", "FLOPs", "params");
    for (name, cost) in &f.per_module {
        let _ = writeln!(
            out,
            "{name:<8} {:>14} {:>14} {:>10}",
            cost.macs, cost.flops, cost.params
        );
    }
    let _ = writeln!(
        out,
        "{:<8} {:>14} {:>14} {:>10}",
        "total", f.totals.macs, f.totals.flops, f.totals.params
    );
    let _ = writeln!(out, "{json}");
    Ok(())
}
