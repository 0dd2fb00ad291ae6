use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Disk,
}

/// A co-registered image pair and its change mask.
///
/// Images are `3 x H x W` in `[0, 1]`; the mask is `1 x H x W` holding
/// exactly `0.0` or `1.0`.
#[derive(Debug, Clone)]
pub struct BiTemporalSample {
    pub id: String,
    pub source: Source,
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl BiTemporalSample {
    pub fn new(
        id: impl Into<String>,
        source: Source,
        image_a: Tensor<f32>,
        image_b: Tensor<f32>,
        mask: Tensor<f32>,
    ) -> Result<Self> {
        let id = id.into();
        let (h, w) = match image_a.shape() {
            &[3, h, w] => (h, w),
            s => {
                return Err(Error::shape(format!(
                    "sample {id}: image_a must be 3 x H x W, got {s:?}"
                )))
            }
        };
        if image_b.shape() != [3, h, w] {
            return Err(Error::shape(format!(
                "sample {id}: image_b is {:?}, image_a is {:?}",
                image_b.shape(),
                image_a.shape()
            )));
        }
        if mask.shape() != [1, h, w] {
            return Err(Error::shape(format!(
                "sample {id}: mask is {:?}, expected [1, {h}, {w}]",
                mask.shape()
            )));
        }
        if !is_binary(&mask) {
            return Err(Error::invalid(format!("sample {id}: mask is not strictly binary")));
        }
        Ok(Self {
            id,
            source,
            image_a,
            image_b,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[2]
    }

    pub fn changed_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

pub fn is_binary(mask: &Tensor<f32>) -> bool {
    mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Stacks equally sized samples into `B x 3 x H x W` image batches and a
/// `B x 1 x H x W` mask batch.
pub fn stack_batch<T: Element>(samples: &[&BiTemporalSample]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut a = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut b = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut m = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape(format!(
                "batch mixes {}x{} ({}) with {}x{} ({})",
                h,
                w,
                first.id,
                s.height(),
                s.width(),
                s.id
            )));
        }
        a.extend(s.image_a.data().iter().map(|&v| T::from_f64(v as f64)));
        b.extend(s.image_b.data().iter().map(|&v| T::from_f64(v as f64)));
        m.extend(s.mask.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let n = samples.len();
    Ok((
        Tensor::new(&[n, 3, h, w], a)?,
        Tensor::new(&[n, 3, h, w], b)?,
        Tensor::new(&[n, 1, h, w], m)?,
    ))
}
