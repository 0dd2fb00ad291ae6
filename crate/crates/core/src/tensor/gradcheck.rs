//! Central-difference gradient checking at 64-bit precision.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)` where `a`
//! is the tape gradient and `n` the central difference. A difference no larger
//! than the rounding resolution of the central difference itself,
//! `8 eps (|f(x+h)| + |f(x-h)|) / 2h`, counts as zero: below it the two values
//! cannot be told apart (a structurally zero gradient reads as `+-1 ulp / 2h`).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error after the rounding-resolution rule.
    pub max_rel_err: f64,
    /// Largest relative error with no allowance for rounding.
    pub raw_max_rel_err: f64,
    /// Coordinate with the largest error (or the first non-finite one).
    pub worst_coord: Option<usize>,
    pub checked: usize,
    pub pass: bool,
    pub failure: Option<String>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Central {
    value: f64,
    resolution: f64,
}

impl Central {
    fn new(plus: f64, minus: f64, h: f64) -> Self {
        Self {
            value: (plus - minus) / (2.0 * h),
            resolution: 8.0 * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h),
        }
    }
}

fn compare(
    analytic: &[f64],
    mut numeric_at: impl FnMut(usize) -> Result<Central>,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        raw_max_rel_err: 0.0,
        worst_coord: None,
        checked: 0,
        pass: true,
        failure: None,
    };
    let mut worst = (0.0, 0.0);
    for (k, &a) in analytic.iter().enumerate() {
        let Central { value: n, resolution } = numeric_at(k)?;
        report.checked += 1;
        if !a.is_finite() || !n.is_finite() {
            report.pass = false;
            report.max_rel_err = f64::INFINITY;
            report.raw_max_rel_err = f64::INFINITY;
            report.worst_coord = Some(k);
            report.failure = Some(format!(
                "non-finite gradient at coordinate {k}: analytic {a}, numeric {n}"
            ));
            return Ok(report);
        }
        let raw = rel_err(a, n);
        report.raw_max_rel_err = report.raw_max_rel_err.max(raw);
        let e = if (a - n).abs() <= resolution { 0.0 } else { raw };
        if e > report.max_rel_err || report.worst_coord.is_none() {
            report.max_rel_err = e;
            report.worst_coord = Some(k);
            worst = (a, n);
        }
    }
    report.pass = report.max_rel_err < tol;
    if !report.pass {
        report.failure = Some(format!(
            "max relative error {:.3e} at coordinate {:?} (analytic {:.6e}, numeric {:.6e}) exceeds {tol:e}",
            report.max_rel_err, report.worst_coord, worst.0, worst.1
        ));
    }
    Ok(report)
}

fn scalar_of(v: &Var<f64>) -> Result<f64> {
    if v.value().numel() != 1 {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.value().item())
}

/// Checks the gradient of scalar `f` with respect to every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, &coords, h, tol)
}

/// As [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor<f64>, coords: &[usize], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    input_check(None, f, x, coords, h, tol)
}

/// Input-gradient check for a function that also reads parameters from
/// `store` (held fixed).
pub fn finite_diff_check_input_with_params<F>(
    store: &ParamStore<f64>,
    f: F,
    x: &Tensor<f64>,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    input_check(Some(store), f, x, coords, h, tol)
}

fn input_check<F>(
    store: Option<&ParamStore<f64>>,
    f: F,
    x: &Tensor<f64>,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let new_tape = || store.map_or_else(Tape::new, Tape::with_params);
    let tape = new_tape();
    let xv = tape.input(x.clone());
    let out = f(&tape, &xv)?;
    scalar_of(&out)?;
    let grads = tape.backward(&out)?;
    let full = grads
        .wrt(&xv)
        .map(|g| g.to_f64_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let analytic: Vec<f64> = coords.iter().map(|&c| full[c]).collect();
    let eval = |data: Vec<f64>| -> Result<f64> {
        let tape = new_tape();
        let xv = tape.constant(Tensor::new(x.shape(), data)?);
        scalar_of(&f(&tape, &xv)?)
    };
    compare(
        &analytic,
        |k| {
            let c = coords[k];
            let mut plus = x.to_vec();
            plus[c] += h;
            let mut minus = x.to_vec();
            minus[c] -= h;
            Ok(Central::new(eval(plus)?, eval(minus)?, h))
        },
        tol,
    )
}

/// Checks parameter gradients of scalar `f` at the listed
/// `(parameter, flat index)` coordinates.
pub fn finite_diff_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    coords: &[(ParamId, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::with_params(store);
    let out = f(&tape)?;
    scalar_of(&out)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, i)| grads.param(id).map_or(0.0, |g| g.data()[i]))
        .collect();
    let eval = |id: ParamId, i: usize, delta: f64| -> Result<f64> {
        let mut perturbed = store.clone();
        let p = store.get(id);
        let mut data = p.value.to_vec();
        data[i] += delta;
        perturbed.set_value(id, Tensor::new(p.value.shape(), data)?)?;
        let tape = Tape::with_params(&perturbed);
        scalar_of(&f(&tape)?)
    };
    compare(
        &analytic,
        |k| {
            let (id, i) = coords[k];
            Ok(Central::new(eval(id, i, h)?, eval(id, i, -h)?, h))
        },
        tol,
    )
}

/// `n` distinct random `(parameter, index)` coordinates, seed-determined.
pub fn sample_param_coords(store: &ParamStore<f64>, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let total = store.total_elements();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<usize> = Vec::with_capacity(n);
    while flat.len() < n.min(total) {
        let k = rng.random_range(0..total);
        if !flat.contains(&k) {
            flat.push(k);
        }
    }
    flat.sort_unstable();
    let mut out = Vec::with_capacity(flat.len());
    let mut base = 0;
    let mut it = flat.into_iter().peekable();
    for (id, p) in store.iter() {
        let n = p.value.numel();
        while let Some(&k) = it.peek() {
            if k < base + n {
                out.push((id, k - base));
                it.next();
            } else {
                break;
            }
        }
        base += n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let r = finite_diff_check(|t, x| Ok(t.sum(x)), &x, DEFAULT_STEP, 1e-10).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_rel_err < 1e-10);
    }

    #[test]
    fn sigmoid_at_zero_is_quarter() {
        let x = Tensor::<f64>::zeros(&[4]);
        let tape = Tape::new();
        let xv = tape.input(x.clone());
        let s = tape.sigmoid(&xv);
        let out = tape.sum(&s);
        let g = tape.backward(&out).unwrap();
        assert!(g.wrt(&xv).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let r = finite_diff_check(|t, x| Ok(t.sum(&t.sigmoid(x))), &x, DEFAULT_STEP, 1e-8).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn wrong_adjoint_is_caught() {
        let x = Tensor::from_fn(&[3], |i| i as f64 + 0.5);
        let r = finite_diff_check(
            |t, x| {
                let y = x.value().map(|v| 2.0 * v);
                let doubled = t.custom("bad_double", &[x], y, |g| vec![Some(g.map(|v| 3.0 * v))]);
                Ok(t.sum(&doubled))
            },
            &x,
            DEFAULT_STEP,
            1e-6,
        )
        .unwrap();
        assert!(!r.pass);
        assert!(r.failure.unwrap().contains("exceeds"));
    }

    #[test]
    fn non_finite_reported_with_coordinate() {
        let x = Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let y = x.value().clone();
                let id = t.custom("nan_adjoint", &[x], y, |g| {
                    vec![Some(Tensor::from_fn(
                        g.shape(),
                        |i| if i == 1 { f64::NAN } else { 1.0 },
                    ))]
                });
                Ok(t.sum(&id))
            },
            &x,
            DEFAULT_STEP,
            1e-6,
        )
        .unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst_coord, Some(1));
    }

    #[test]
    fn rejects_non_scalar() {
        let x = Tensor::zeros(&[2]);
        assert!(finite_diff_check(|_, x| Ok(x.clone()), &x, DEFAULT_STEP, 1e-6).is_err());
    }

    #[test]
    fn sampled_coords_are_in_range_and_distinct() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::zeros(&[3, 3])).unwrap();
        s.add("b", Tensor::zeros(&[5])).unwrap();
        let c = sample_param_coords(&s, 10, 1);
        assert_eq!(c.len(), 10);
        for &(id, i) in &c {
            assert!(i < s.get(id).value.numel());
        }
        let mut d = c.clone();
        d.dedup();
        assert_eq!(d.len(), 10);
        assert_eq!(sample_param_coords(&s, 100, 1).len(), 14);
    }
}
