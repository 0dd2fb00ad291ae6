//! Parameter-free SimAM attention.
//!
//! Per batch item and channel, with `mu` the spatial mean and
//! `v = sum((x - mu)^2) / (HW - 1)`:
//!
//! ```text
//! weight = sigmoid((x - mu)^2 / (4 (v + lambda)) + 0.5)
//! out    = weight * x
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, PoolKind, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimamParams {
    pub lambda_s: f64,
}

impl Default for SimamParams {
    fn default() -> Self {
        Self { lambda_s: 1e-4 }
    }
}

impl SimamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s > 0.0) {
            return Err(Error::Config(format!(
                "simam.lambda_s must be positive, got {}",
                self.lambda_s
            )));
        }
        Ok(())
    }
}

fn spatial_mean<T: Element>(tape: &Tape<'_, T>, x: &Var<T>) -> Result<Var<T>> {
    tape.pool(&tape.pool(x, 3, PoolKind::Avg)?, 2, PoolKind::Avg)
}

/// The attention weights alone.
pub fn simam_weights<T: Element>(tape: &Tape<'_, T>, x: &Var<T>, p: &SimamParams) -> Result<Var<T>> {
    let (h, w) = match x.shape() {
        &[_, _, h, w] => (h, w),
        s => return Err(Error::shape(format!("simam expects BCHW, got {s:?}"))),
    };
    let n = h * w;
    if n < 2 {
        return Err(Error::invalid(format!(
            "simam needs at least 2 spatial positions for the variance, got {h}x{w}"
        )));
    }
    let mu = spatial_mean(tape, x)?;
    let d = tape.sub(x, &mu)?;
    let d2 = tape.mul(&d, &d)?;
    let v = tape.scale(&spatial_mean(tape, &d2)?, n as f64 / (n - 1) as f64);
    let denom = tape.scale(&tape.add_scalar(&v, p.lambda_s), 4.0);
    let energy = tape.add_scalar(&tape.mul(&d2, &tape.recip(&denom))?, 0.5);
    Ok(tape.sigmoid(&energy))
}

pub fn simam<T: Element>(tape: &Tape<'_, T>, x: &Var<T>, p: &SimamParams) -> Result<Var<T>> {
    let w = simam_weights(tape, x, p)?;
    tape.mul(&w, x)
}
