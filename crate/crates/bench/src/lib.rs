//! Deterministic inputs shared by the benchmarks.

use lsat_core::attention::{CisaConfig, CisaWeights, VanillaWeights};
use lsat_core::tensor::{seeded_rng, ParamBuilder};
use lsat_core::{ParamStore, Tensor};

/// A `shape` tensor of values in `[-1, 1)` from a multiplicative hash.
pub fn input(shape: &[usize], salt: u64) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let h = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
        h as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
    })
}

pub fn cisa(channels: usize) -> (ParamStore<f32>, CisaWeights, CisaConfig) {
    let cfg = CisaConfig::new(channels);
    let mut store = ParamStore::new();
    let w = CisaWeights::build(&mut ParamBuilder::new(&mut store, &mut seeded_rng(0)), &cfg).expect("valid config");
    (store, w, cfg)
}

pub fn vanilla(channels: usize) -> (ParamStore<f32>, VanillaWeights) {
    let mut store = ParamStore::new();
    let w =
        VanillaWeights::build(&mut ParamBuilder::new(&mut store, &mut seeded_rng(0)), channels).expect("valid config");
    (store, w)
}
