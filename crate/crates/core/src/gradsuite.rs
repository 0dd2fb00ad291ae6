//! Finite-difference sweep over primitives, modules and the full model at
//! 64-bit precision.
//!
//! Every case reduces its output to a scalar through a fixed random weighting,
//! `sum(f(x) * R)`, so each output coordinate reaches the gradient with a
//! distinct coefficient.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    block_forward, cisa_forward, vanilla_attention, BlockWeights, CisaConfig, CisaWeights, VanillaWeights,
};
use crate::enhance::{afm_forward, saem_forward, simam, AfmWeights, SaemWeights, SimamParams};
use crate::error::{Error, Result};
use crate::network::{lsat_forward, LsatConfig, LsatModel};
use crate::tensor::gradcheck::{
    finite_diff_check, finite_diff_check_coords, finite_diff_check_input_with_params, finite_diff_check_params,
    sample_param_coords, GradCheckReport, DEFAULT_STEP,
};
use crate::tensor::{seeded_rng, Conv2dSpec, ParamBuilder, ParamId, ParamStore, PoolKind, Tape, Tensor, Var};
use crate::train::{bce_loss, combined_loss, dice_loss, LossConfig};

pub const OP_TOL: f64 = 1e-6;
pub const MODULE_TOL: f64 = 1e-4;
/// Parameter coordinates sampled per module and model case.
pub const PARAM_SAMPLES: usize = 20;
/// Input coordinates sampled for the full-model case.
pub const MODEL_INPUT_SAMPLES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Op,
    Module,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Op, Scope::Module, Scope::Model];

    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Op => OP_TOL,
            Scope::Module | Scope::Model => MODULE_TOL,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Module => "module",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "module" => Ok(Scope::Module),
            "model" => Ok(Scope::Model),
            other => Err(Error::invalid(format!(
                "unknown gradcheck scope {other:?} (expected op, module or model)"
            ))),
        }
    }
}

type CaseFn = Box<dyn Fn(u64, f64) -> Result<GradCheckReport>>;

/// One named gradient check.
pub struct GradCase {
    pub name: &'static str,
    pub scope: Scope,
    run: CaseFn,
}

impl GradCase {
    fn new(name: &'static str, scope: Scope, run: impl Fn(u64, f64) -> Result<GradCheckReport> + 'static) -> Self {
        Self {
            name,
            scope,
            run: Box::new(run),
        }
    }

    pub fn run(&self, seed: u64) -> CaseResult {
        let tol = self.scope.tolerance();
        let start = Instant::now();
        let report = (self.run)(seed, tol);
        CaseResult {
            name: self.name,
            scope: self.scope,
            tol,
            report,
            elapsed: start.elapsed(),
        }
    }
}

#[derive(Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub scope: Scope,
    pub tol: f64,
    pub report: Result<GradCheckReport>,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.pass)
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Magnitudes in `[0.2, 1.2]` with random sign: clear of the kinks of
/// `abs`/`relu` and the pole of `recip`.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.2);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn weighted_sum(t: &Tape<f64>, y: &Var<f64>, r: &Tensor<f64>) -> Result<Var<f64>> {
    Ok(t.sum(&t.mul(y, &t.constant(r.clone()))?))
}

/// Output shape of `f` at `x`, for drawing the reduction weights.
fn output_shape(
    store: Option<&ParamStore<f64>>,
    x: &Tensor<f64>,
    f: &impl Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
) -> Result<Vec<usize>> {
    let tape = store.map_or_else(Tape::new, Tape::with_params);
    Ok(f(&tape, &tape.constant(x.clone()))?.shape().to_vec())
}

#[derive(Clone, Copy)]
enum Domain {
    Uniform,
    AwayFromZero,
}

/// A primitive checked at every input coordinate. `consts` are drawn once
/// from the seed and passed to `f` as constants.
fn op_case(
    name: &'static str,
    shape: &'static [usize],
    domain: Domain,
    consts: &'static [&'static [usize]],
    f: impl Fn(&Tape<f64>, &Var<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'static,
) -> GradCase {
    GradCase::new(name, Scope::Op, move |seed, tol| {
        let mut rng = seeded_rng(seed);
        let x = match domain {
            Domain::Uniform => uniform(shape, &mut rng),
            Domain::AwayFromZero => away_from_zero(shape, &mut rng),
        };
        let cs: Vec<Tensor<f64>> = consts.iter().map(|s| uniform(s, &mut rng)).collect();
        let g = |t: &Tape<f64>, x: &Var<f64>| {
            let vars: Vec<Var<f64>> = cs.iter().map(|c| t.constant(c.clone())).collect();
            f(t, x, &vars)
        };
        let r = away_from_zero(&output_shape(None, &x, &g)?, &mut rng);
        finite_diff_check(|t, x| weighted_sum(t, &g(t, x)?, &r), &x, DEFAULT_STEP, tol)
    })
}

fn op_cases() -> Vec<GradCase> {
    use Domain::*;
    let same = Conv2dSpec {
        stride: 1,
        padding: 1,
        groups: 1,
    };
    let strided = Conv2dSpec {
        stride: 2,
        ..Conv2dSpec::default()
    };
    let depthwise = Conv2dSpec {
        stride: 1,
        padding: 1,
        groups: 3,
    };
    vec![
        op_case(
            "conv2d.input",
            &[2, 3, 5, 4],
            Uniform,
            &[&[4, 3, 3, 3], &[4]],
            move |t, x, c| t.conv2d(x, &c[0], Some(&c[1]), same),
        ),
        op_case(
            "conv2d.weight",
            &[4, 3, 3, 3],
            Uniform,
            &[&[2, 3, 5, 4]],
            move |t, w, c| t.conv2d(&c[0], w, None, same),
        ),
        op_case(
            "conv2d.bias",
            &[4],
            Uniform,
            &[&[1, 3, 4, 4], &[4, 3, 1, 1]],
            |t, b, c| t.conv2d(&c[0], &c[1], Some(b), Conv2dSpec::default()),
        ),
        op_case(
            "conv2d.strided",
            &[1, 2, 8, 8],
            Uniform,
            &[&[3, 2, 2, 2]],
            move |t, x, c| t.conv2d(x, &c[0], None, strided),
        ),
        op_case(
            "conv2d.depthwise",
            &[1, 3, 5, 5],
            Uniform,
            &[&[3, 1, 3, 3]],
            move |t, x, c| t.conv2d(x, &c[0], None, depthwise),
        ),
        op_case("matmul.lhs", &[2, 3, 4], Uniform, &[&[2, 4, 5]], |t, a, c| {
            t.matmul(a, &c[0])
        }),
        op_case("matmul.rhs", &[2, 4, 5], Uniform, &[&[2, 3, 4]], |t, b, c| {
            t.matmul(&c[0], b)
        }),
        op_case("softmax_lastdim", &[3, 6], Uniform, &[], |t, x, _| {
            t.softmax_lastdim(&t.scale(x, 3.0))
        }),
        op_case("add.broadcast", &[2, 3, 1, 1], Uniform, &[&[2, 3, 2, 2]], |t, x, c| {
            t.add(x, &c[0])
        }),
        op_case("sub", &[2, 3], Uniform, &[&[2, 3]], |t, x, c| t.sub(&c[0], x)),
        op_case("mul.broadcast", &[1, 3], Uniform, &[&[4, 3]], |t, x, c| t.mul(x, &c[0])),
        op_case("div.numerator", &[2, 3], Uniform, &[], |t, x, _| {
            t.div(x, &t.constant(Tensor::from_fn(&[2, 3], |i| 0.5 + i as f64 * 0.25)))
        }),
        op_case("div.denominator", &[2, 3], AwayFromZero, &[&[2, 3]], |t, x, c| {
            t.div(&c[0], x)
        }),
        op_case("abs", &[10], AwayFromZero, &[], |t, x, _| Ok(t.abs(x))),
        op_case("relu", &[10], AwayFromZero, &[], |t, x, _| Ok(t.relu(x))),
        op_case(
            "sigmoid",
            &[10],
            Uniform,
            &[],
            |t, x, _| Ok(t.sigmoid(&t.scale(x, 3.0))),
        ),
        op_case("gelu", &[10], Uniform, &[], |t, x, _| Ok(t.gelu(&t.scale(x, 3.0)))),
        op_case("exp", &[10], Uniform, &[], |t, x, _| Ok(t.exp(x))),
        op_case("recip", &[10], AwayFromZero, &[], |t, x, _| Ok(t.recip(x))),
        op_case("scale_add_scalar", &[10], Uniform, &[], |t, x, _| {
            Ok(t.add_scalar(&t.scale(x, -1.7), 0.3))
        }),
        op_case("permute", &[2, 3, 4], Uniform, &[], |t, x, _| t.permute(x, &[2, 0, 1])),
        op_case("reshape", &[2, 6], Uniform, &[], |t, x, _| t.reshape(x, &[3, 4])),
        op_case("pool.max", &[2, 5, 3], Uniform, &[], |t, x, _| {
            t.pool(x, 1, PoolKind::Max)
        }),
        op_case("pool.avg", &[2, 5, 3], Uniform, &[], |t, x, _| {
            t.pool(x, 2, PoolKind::Avg)
        }),
        op_case("concat", &[2, 2, 3], Uniform, &[&[2, 1, 3]], |t, x, c| {
            t.concat(&[&c[0], x, x], 1)
        }),
        op_case("narrow", &[2, 5, 3], Uniform, &[], |t, x, _| t.narrow(x, 1, 1, 3)),
        op_case("upsample_bilinear2x", &[1, 2, 3, 4], Uniform, &[], |t, x, _| {
            t.upsample_bilinear2x(x)
        }),
        op_case("layer_norm.input", &[2, 4, 2, 3], Uniform, &[&[4], &[4]], |t, x, c| {
            t.layer_norm_channels(x, &c[0], &c[1], 1e-5)
        }),
        op_case("layer_norm.affine", &[4], Uniform, &[&[2, 4, 2, 3], &[4]], |t, g, c| {
            t.layer_norm_channels(&c[0], g, &c[1], 1e-5)
        }),
        op_case("sum_mean", &[3, 4], Uniform, &[], |t, x, _| {
            let m = t.mean(x);
            t.mul(x, &t.reshape(&m, &[1, 1])?)
        }),
    ]
}

type Forward<W> = dyn Fn(&Tape<f64>, &Var<f64>, &W, &Var<f64>) -> Result<Var<f64>>;

struct ModuleSetup<W> {
    store: ParamStore<f64>,
    weights: W,
    x: Tensor<f64>,
    other: Tensor<f64>,
    rng: ChaCha8Rng,
}

fn module_setup<W>(
    seed: u64,
    shape: &[usize],
    build: fn(&mut ParamBuilder<'_, f64>) -> Result<W>,
) -> Result<ModuleSetup<W>> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let weights = build(&mut ParamBuilder::new(&mut store, &mut rng))?;
    // zero-initialised biases would otherwise make every check start from
    // the same special point
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let value = store.get(id).value.clone();
        let data = value
            .to_vec()
            .into_iter()
            .map(|v| v + rng.random_range(-0.1..0.1))
            .collect();
        store.set_value(id, Tensor::new(value.shape(), data)?)?;
    }
    let x = uniform(shape, &mut rng);
    let other = uniform(shape, &mut rng);
    Ok(ModuleSetup {
        store,
        weights,
        x,
        other,
        rng,
    })
}

/// A module checked at every input coordinate (parameters fixed) and at
/// [`PARAM_SAMPLES`] parameter coordinates (input fixed). The last forward
/// argument is a second, fixed input for two-stream modules.
fn module_cases<W: 'static>(
    names: [&'static str; 2],
    build: fn(&mut ParamBuilder<'_, f64>) -> Result<W>,
    forward: impl Fn(&Tape<f64>, &Var<f64>, &W, &Var<f64>) -> Result<Var<f64>> + 'static,
) -> [GradCase; 2] {
    let forward: Rc<Forward<W>> = Rc::new(forward);
    let fwd = forward.clone();
    let input = GradCase::new(names[0], Scope::Module, move |seed, tol| {
        let mut s = module_setup(seed, MODULE_SHAPE, build)?;
        let g = |t: &Tape<f64>, x: &Var<f64>| fwd(t, x, &s.weights, &t.constant(s.other.clone()));
        let r = away_from_zero(&output_shape(Some(&s.store), &s.x, &g)?, &mut s.rng);
        let coords: Vec<usize> = (0..s.x.numel()).collect();
        finite_diff_check_input_with_params(
            &s.store,
            |t, x| weighted_sum(t, &g(t, x)?, &r),
            &s.x,
            &coords,
            DEFAULT_STEP,
            tol,
        )
    });
    let params = GradCase::new(names[1], Scope::Module, move |seed, tol| {
        let mut s = module_setup(seed, MODULE_SHAPE, build)?;
        let g = |t: &Tape<f64>, x: &Var<f64>| forward(t, x, &s.weights, &t.constant(s.other.clone()));
        let r = away_from_zero(&output_shape(Some(&s.store), &s.x, &g)?, &mut s.rng);
        let coords = sample_param_coords(&s.store, PARAM_SAMPLES, seed);
        finite_diff_check_params(
            &s.store,
            |t| weighted_sum(t, &g(t, &t.constant(s.x.clone()))?, &r),
            &coords,
            DEFAULT_STEP,
            tol,
        )
    });
    [input, params]
}

const MODULE_SHAPE: &[usize] = &[2, 4, 4, 3];

type LossFn = fn(&Tape<f64>, &Var<f64>, &Tensor<f64>) -> Result<Var<f64>>;

fn loss_case(name: &'static str, loss: LossFn) -> GradCase {
    GradCase::new(name, Scope::Module, move |seed, tol| {
        let mut rng = seeded_rng(seed);
        let z = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(-3.0..3.0));
        let target = Tensor::from_fn(&[2, 1, 4, 4], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        finite_diff_check(|t, z| loss(t, z, &target), &z, DEFAULT_STEP, tol)
    })
}

fn module_cases_all() -> Vec<GradCase> {
    let simam_p = SimamParams::default();
    let mut cases = Vec::new();
    cases.extend(module_cases(
        ["cisa.input", "cisa.params"],
        |b| CisaWeights::build(b, &CisaConfig::new(4)),
        |t, x, w, _| cisa_forward(t, x, w, &CisaConfig::new(4)),
    ));
    cases.extend(module_cases(
        ["cisa_block.input", "cisa_block.params"],
        |b| BlockWeights::build(b, &CisaConfig::new(4)),
        |t, x, w, _| block_forward(t, x, w),
    ));
    cases.extend(module_cases(
        ["vanilla_attention.input", "vanilla_attention.params"],
        |b| VanillaWeights::build(b, 4),
        |t, x, w, _| vanilla_attention(t, x, w),
    ));
    cases.push(GradCase::new("simam.input", Scope::Module, move |seed, tol| {
        let mut rng = seeded_rng(seed);
        let x = uniform(MODULE_SHAPE, &mut rng);
        let g = |t: &Tape<f64>, x: &Var<f64>| simam(t, x, &simam_p);
        let r = away_from_zero(&output_shape(None, &x, &g)?, &mut rng);
        finite_diff_check(|t, x| weighted_sum(t, &g(t, x)?, &r), &x, DEFAULT_STEP, tol)
    }));
    cases.extend(module_cases(
        ["saem.input", "saem.params"],
        |b| SaemWeights::build(b, 4),
        move |t, x, w, other| saem_forward(t, x, other, w, &simam_p),
    ));
    cases.extend(module_cases(
        ["afm.input", "afm.params"],
        |b| AfmWeights::build(b, 4),
        |t, x, w, other| afm_forward(t, other, x, w),
    ));
    cases.push(loss_case("bce_loss.logits", bce_loss));
    cases.push(loss_case("dice_loss.logits", |t, z, y| dice_loss(t, z, y, 1.0)));
    cases
}

struct ModelSetup {
    model: LsatModel<f64>,
    xa: Tensor<f64>,
    xb: Tensor<f64>,
    mask: Tensor<f64>,
}

fn model_setup(seed: u64) -> Result<ModelSetup> {
    let cfg = LsatConfig::tiny();
    let model = LsatModel::<f64>::new(cfg.clone(), seed)?;
    let mut rng = seeded_rng(seed ^ 0xda7a);
    let shape = [1, 3, cfg.tile, cfg.tile];
    let xa = Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0));
    let xb = Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0));
    let mask = Tensor::from_fn(&[1, 1, cfg.tile, cfg.tile], |_| {
        if rng.random_bool(0.2) {
            1.0
        } else {
            0.0
        }
    });
    Ok(ModelSetup { model, xa, xb, mask })
}

fn model_cases() -> Vec<GradCase> {
    let loss_cfg = LossConfig::default();
    vec![
        GradCase::new("lsat_tiny.params", Scope::Model, move |seed, tol| {
            let s = model_setup(seed)?;
            let coords = sample_param_coords(&s.model.params, PARAM_SAMPLES, seed);
            finite_diff_check_params(
                &s.model.params,
                |t| {
                    let logits = lsat_forward(t, &t.constant(s.xa.clone()), &t.constant(s.xb.clone()), &s.model)?;
                    combined_loss(t, &logits, &s.mask, &loss_cfg)
                },
                &coords,
                DEFAULT_STEP,
                tol,
            )
        }),
        GradCase::new("lsat_tiny.input_a", Scope::Model, move |seed, tol| {
            let s = model_setup(seed)?;
            let mut rng = seeded_rng(seed ^ 0xc00d);
            let coords: Vec<usize> = (0..MODEL_INPUT_SAMPLES)
                .map(|_| rng.random_range(0..s.xa.numel()))
                .collect();
            finite_diff_check_input_with_params(
                &s.model.params,
                |t, x| {
                    let logits = lsat_forward(t, x, &t.constant(s.xb.clone()), &s.model)?;
                    combined_loss(t, &logits, &s.mask, &loss_cfg)
                },
                &s.xa,
                &coords,
                DEFAULT_STEP,
                tol,
            )
        }),
    ]
}

/// All cases of one scope.
pub fn cases(scope: Scope) -> Vec<GradCase> {
    match scope {
        Scope::Op => op_cases(),
        Scope::Module => module_cases_all(),
        Scope::Model => model_cases(),
    }
}

/// A primitive whose adjoint is deliberately wrong (it claims `3g` for
/// `y = 2x`), so the sweep can be shown to name a broken op.
pub fn injected_fault_case() -> GradCase {
    GradCase::new("faulty_double", Scope::Op, |seed, tol| {
        let mut rng = seeded_rng(seed);
        let x = uniform(&[6], &mut rng);
        let coords: Vec<usize> = (0..x.numel()).collect();
        finite_diff_check_coords(
            |t, x| {
                let y = t.custom("faulty_double", &[x], x.value().map(|v| 2.0 * v), |g| {
                    vec![Some(g.map(|v| 3.0 * v))]
                });
                Ok(t.sum(&y))
            },
            &x,
            &coords,
            DEFAULT_STEP,
            tol,
        )
    })
}

pub fn run_cases(cases: &[GradCase], seed: u64) -> Vec<CaseResult> {
    cases.iter().map(|c| c.run(seed)).collect()
}

/// Fixed-width table, one row per case.
pub fn format_table(results: &[CaseResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$}  {:<6}  {:>7}  {:>11}  {:>11}  {:>7}  {:>8}  status\n",
        "case", "scope", "checked", "max_rel_err", "raw_rel_err", "tol", "time_ms"
    );
    for r in results {
        let (checked, err, raw, status) = match &r.report {
            Ok(rep) => (
                rep.checked.to_string(),
                format!("{:.3e}", rep.max_rel_err),
                format!("{:.3e}", rep.raw_max_rel_err),
                if rep.pass {
                    "PASS".to_string()
                } else {
                    format!("FAIL {}", rep.failure.as_deref().unwrap_or(""))
                },
            ),
            Err(e) => ("-".into(), "-".into(), "-".into(), format!("ERROR {e}")),
        };
        out.push_str(&format!(
            "{:<width$}  {:<6}  {:>7}  {:>11}  {:>11}  {:>7.0e}  {:>8}  {status}\n",
            r.name,
            r.scope.to_string(),
            checked,
            err,
            raw,
            r.tol,
            r.elapsed.as_millis(),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn injected_fault_is_reported_by_name() {
        let r = injected_fault_case().run(0);
        assert!(!r.passed());
        let table = format_table(&[r]);
        assert!(table.contains("faulty_double") && table.contains("FAIL"), "{table}");
    }

    #[test]
    fn scope_parsing() {
        for s in Scope::ALL {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert!("layer".parse::<Scope>().is_err());
    }
}
