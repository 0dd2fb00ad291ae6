//! Binary change losses on logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, PoolKind, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            bce_weight: 1.0,
            dice_weight: 1.0,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bce_weight < 0.0 || self.dice_weight < 0.0 || self.bce_weight + self.dice_weight == 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not both zero, got bce {} dice {}",
                self.bce_weight, self.dice_weight
            )));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!(
                "loss.dice_smooth must be positive, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }
}

fn check_target<T: Element>(logits: &Var<T>, target: &Tensor<T>) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(format!(
            "loss: logits {:?} and target {:?} differ",
            logits.shape(),
            target.shape()
        )));
    }
    if !matches!(logits.shape(), [_, 1, _, _]) {
        return Err(Error::shape(format!(
            "loss expects B x 1 x H x W logits, got {:?}",
            logits.shape()
        )));
    }
    if let Some(v) = target.data().iter().find(|v| {
        let f = v.to_f64();
        f != 0.0 && f != 1.0
    }) {
        return Err(Error::invalid(format!("loss target must be binary, found {v}")));
    }
    Ok(())
}

/// Mean over pixels of `max(z, 0) - z t + ln(1 + exp(-|z|))`.
pub fn bce_loss<T: Element>(tape: &Tape<'_, T>, logits: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    check_target(logits, target)?;
    let n = target.numel() as f64;
    let z = logits.value();
    let total: f64 = z
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| {
            let (z, t) = (z.to_f64(), t.to_f64());
            z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
        })
        .sum();
    let t = target.clone();
    let zv = z.clone();
    Ok(tape.custom(
        "bce_with_logits",
        &[logits],
        Tensor::scalar(T::from_f64(total / n)),
        move |g| {
            let scale = T::from_f64(g.item().to_f64() / n);
            let grad = zv.zip_map(&t, |z, t| (kernels::sigmoid(z) - t) * scale);
            vec![Some(grad)]
        },
    ))
}

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)` per batch item, averaged.
pub fn dice_loss<T: Element>(tape: &Tape<'_, T>, logits: &Var<T>, target: &Tensor<T>, eps: f64) -> Result<Var<T>> {
    check_target(logits, target)?;
    let b = logits.shape()[0];
    let n = target.numel() / b;
    let p = tape.reshape(&tape.sigmoid(logits), &[b, n])?;
    let t = tape.constant(target.reshape(&[b, n])?);
    let per_item_sum = |x: &Var<T>| -> Result<Var<T>> { Ok(tape.scale(&tape.pool(x, 1, PoolKind::Avg)?, n as f64)) };
    let inter = per_item_sum(&tape.mul(&p, &t)?)?;
    let num = tape.add_scalar(&tape.scale(&inter, 2.0), eps);
    let den = tape.add_scalar(&tape.add(&per_item_sum(&p)?, &per_item_sum(&t)?)?, eps);
    let ratio = tape.div(&num, &den)?;
    Ok(tape.add_scalar(&tape.scale(&tape.mean(&ratio), -1.0), 1.0))
}

/// Weighted sum of the two losses; a zero weight drops its term entirely.
pub fn combined_loss<T: Element>(
    tape: &Tape<'_, T>,
    logits: &Var<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var<T>> {
    cfg.validate()?;
    let bce = (cfg.bce_weight > 0.0)
        .then(|| bce_loss(tape, logits, target).map(|l| tape.scale(&l, cfg.bce_weight)))
        .transpose()?;
    let dice = (cfg.dice_weight > 0.0)
        .then(|| dice_loss(tape, logits, target, cfg.dice_smooth).map(|l| tape.scale(&l, cfg.dice_weight)))
        .transpose()?;
    match (bce, dice) {
        (Some(a), Some(b)) => tape.add(&a, &b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => unreachable!("validated: at least one weight is positive"),
    }
}
