use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lsat_core::data::{BiTemporalSample, Split};
use lsat_core::network::{save_checkpoint, LsatModel};
use lsat_core::train::{evaluate, train_epoch, EpochOptions, OptimState};
use serde::{Deserialize, Serialize};

use super::{create_dir, load_manifest, load_split, write_file};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::TrainArgs;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
const EVAL_BATCH: usize = 8;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// `None` when the manifest has no validation split.
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose weights are in the best checkpoint.
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub model: LsatModel<f32>,
}

/// Shuffle and augmentation seed of zero-based epoch `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64)
}

fn check_sizes(samples: &[BiTemporalSample], tile: usize, what: &str) -> CliResult<()> {
    match samples.iter().find(|s| s.height() != tile || s.width() != tile) {
        Some(s) => Err(CliError::Config(format!(
            "{what} sample {} is {}x{} but model.tile is {tile}",
            s.id,
            s.height(),
            s.width()
        ))),
        None => Ok(()),
    }
}

/// Trains on `train`, scoring `val` after every epoch. The best-F1 weights
/// (the last ones when `val` is empty) go to `out/best.ckpt`, the final ones
/// to `out/last.ckpt`, and one [`EpochRecord`] per epoch to
/// `out/train_log.jsonl`.
pub fn train_on(
    cfg: &RunConfig,
    train: &[BiTemporalSample],
    val: &[BiTemporalSample],
    out: &Path,
    progress: &mut dyn Write,
) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CliError::Runtime("no training samples".into()));
    }
    let tile = cfg.model.tile;
    let augment_crops = cfg.augmentation && cfg.augment.crop.is_some();
    if !augment_crops {
        check_sizes(train, tile, "train")?;
    }
    check_sizes(val, tile, "val")?;
    create_dir(out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(
        File::create(&log_path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", log_path.display())))?,
    );

    let mut model = LsatModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut optim = OptimState::new(cfg.optim, &model.params)?;
    let opts = EpochOptions {
        batch_size: cfg.batch_size,
        augmentation: cfg.augmentation.then(|| cfg.augment.clone()),
    };
    let (best_path, last_path) = (out.join(BEST_CHECKPOINT), out.join(LAST_CHECKPOINT));
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(
            &mut model,
            train,
            &mut optim,
            &cfg.loss,
            &opts,
            epoch_seed(cfg.seed, epoch),
        )?;
        let val_f1 = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, val, cfg.threshold, EVAL_BATCH)?.f1)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: stats.mean_loss,
            val_f1,
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", log_path.display())))?;
        let improved = match (val_f1, best) {
            (None, _) => true,
            (Some(f), Some((_, b))) => f > b,
            (Some(_), None) => true,
        };
        if improved {
            best = Some((epoch + 1, val_f1.unwrap_or(f64::NAN)));
            save_checkpoint(&model, &best_path)?;
        }
        let _ = writeln!(
            progress,
            "epoch {:>4}/{}  loss {:.5}  val_f1 {}  {:.1}s",
            epoch + 1,
            cfg.epochs,
            stats.mean_loss,
            val_f1.map_or("-".into(), |f| format!("{f:.4}")),
            start.elapsed().as_secs_f64()
        );
        records.push(record);
    }
    save_checkpoint(&model, &last_path)?;
    Ok(TrainOutcome {
        records,
        best_epoch: best.map_or(cfg.epochs, |(e, _)| e),
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        model,
    })
}

/// Loads the manifest's train and val splits from `data` and trains.
pub fn train_dir(cfg: &RunConfig, data: &Path, out: &Path, progress: &mut dyn Write) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(data)?;
    let train = load_split(data, &manifest, Split::Train)?;
    let val = load_split(data, &manifest, Split::Val)?;
    train_on(cfg, &train, &val, out, progress)
}

pub fn run(args: &TrainArgs, out: &mut dyn Write, progress: &mut dyn Write) -> CliResult<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    let outcome = train_dir(&cfg, &args.data, &args.out, progress)?;
    let last = outcome.records.last().expect("at least one epoch");
    let _ = writeln!(
        out,
        "trained {} epochs, final loss {:.5}; best checkpoint (epoch {}) at {}",
        last.epoch,
        last.loss,
        outcome.best_epoch,
        outcome.best_checkpoint.display()
    );
    Ok(())
}
