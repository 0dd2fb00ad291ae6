use lsat_core::data::{generate_range, BiTemporalSample, Source, SynthConfig};
use lsat_core::network::{LsatConfig, LsatModel};
use lsat_core::tensor::ParamId;
use lsat_core::train::{
    bce_loss, combined_loss, confusion, dice_loss, dip_score, evaluate, f1_score, precision_recall, train_epoch,
    AdamWConfig, ConfusionCounts, EpochOptions, LossConfig, MetricsReport, OptimState,
};
use lsat_core::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn scalar_loss(logits: &Tensor<f64>, f: impl Fn(&Tape<f64>, &lsat_core::Var<f64>) -> f64) -> f64 {
    let tape = Tape::new();
    f(&tape, &tape.constant(logits.clone()))
}

fn bce(z: &Tensor<f64>, t: &Tensor<f64>) -> f64 {
    scalar_loss(z, |tape, v| bce_loss(tape, v, t).unwrap().value().item())
}

fn dice(z: &Tensor<f64>, t: &Tensor<f64>, eps: f64) -> f64 {
    scalar_loss(z, |tape, v| dice_loss(tape, v, t, eps).unwrap().value().item())
}

fn combined(z: &Tensor<f64>, t: &Tensor<f64>, cfg: &LossConfig) -> f64 {
    scalar_loss(z, |tape, v| combined_loss(tape, v, t, cfg).unwrap().value().item())
}

fn lcg_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| {
        let r = (i as u64 ^ seed)
            .wrapping_mul(6_364_136_223_846_793_005)
            .wrapping_add(1_442_695_040_888_963_407);
        ((r >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
    })
}

fn lcg_mask(shape: &[usize], seed: u64) -> Tensor<f64> {
    lcg_tensor(shape, seed, 1.0).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

#[test]
fn bce_closed_forms_and_stability() {
    let t = lcg_mask(&[2, 1, 3, 3], 1);
    assert!((bce(&Tensor::zeros(&[2, 1, 3, 3]), &t) - std::f64::consts::LN_2).abs() < 1e-15);
    let ones = Tensor::ones(&[1, 1, 2, 2]);
    assert!(bce(&Tensor::full(&[1, 1, 2, 2], 40.0), &ones) < 1e-17);
    assert!((bce(&Tensor::full(&[1, 1, 2, 2], -800.0), &ones) - 800.0).abs() < 1e-12);
    assert!(bce(&Tensor::full(&[1, 1, 2, 2], 800.0), &ones).is_finite());
}

#[test]
fn bce_matches_naive_formula() {
    let z = lcg_tensor(&[2, 1, 4, 4], 5, 4.0);
    let t = lcg_mask(&[2, 1, 4, 4], 6);
    let naive: f64 = z
        .data()
        .iter()
        .zip(t.data())
        .map(|(&z, &t)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 32.0;
    assert!((bce(&z, &t) - naive).abs() < 1e-13);
}

#[test]
fn losses_reject_soft_or_misshapen_targets() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::<f64>::zeros(&[1, 1, 2, 2]));
    let soft = Tensor::full(&[1, 1, 2, 2], 0.5);
    assert!(bce_loss(&tape, &z, &soft).is_err());
    assert!(dice_loss(&tape, &z, &soft, 1.0).is_err());
    assert!(bce_loss(&tape, &z, &Tensor::zeros(&[1, 1, 2, 3])).is_err());
    let two = tape.constant(Tensor::<f64>::zeros(&[1, 2, 2, 2]));
    assert!(bce_loss(&tape, &two, &Tensor::zeros(&[1, 2, 2, 2])).is_err());
    let bad = LossConfig {
        bce_weight: 0.0,
        dice_weight: 0.0,
        ..LossConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(LossConfig {
        dice_smooth: 0.0,
        ..LossConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn dice_closed_forms() {
    let ones = Tensor::ones(&[1, 1, 4, 4]);
    for eps in [1e-6, 1.0, 7.0] {
        assert_eq!(dice(&Tensor::full(&[1, 1, 4, 4], 40.0), &ones, eps), 0.0);
    }
    let n = 64.0;
    let got = dice(&Tensor::zeros(&[1, 1, 8, 8]), &Tensor::zeros(&[1, 1, 8, 8]), 1.0);
    assert!((got - (1.0 - 1.0 / (n / 2.0 + 1.0))).abs() < 1e-15);
}

#[test]
fn dice_is_averaged_per_item() {
    let z = lcg_tensor(&[2, 1, 3, 3], 9, 2.0);
    let t = lcg_mask(&[2, 1, 3, 3], 10);
    let half = |k: usize, x: &Tensor<f64>| Tensor::new(&[1, 1, 3, 3], x.data()[k * 9..(k + 1) * 9].to_vec()).unwrap();
    let each = (dice(&half(0, &z), &half(0, &t), 1.0) + dice(&half(1, &z), &half(1, &t), 1.0)) / 2.0;
    assert!((dice(&z, &t, 1.0) - each).abs() < 1e-15);
}

#[test]
fn combined_weights_select_and_add() {
    let z = lcg_tensor(&[2, 1, 4, 4], 11, 3.0);
    let t = lcg_mask(&[2, 1, 4, 4], 12);
    let only_bce = LossConfig {
        dice_weight: 0.0,
        ..LossConfig::default()
    };
    let only_dice = LossConfig {
        bce_weight: 0.0,
        ..LossConfig::default()
    };
    assert_eq!(combined(&z, &t, &only_bce), bce(&z, &t));
    assert_eq!(combined(&z, &t, &only_dice), dice(&z, &t, 1.0));
    let sum = combined(&z, &t, &LossConfig::default());
    assert!((sum - bce(&z, &t) - dice(&z, &t, 1.0)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn loss_ranges(seed in 0u64..10_000, scale in 0.1f64..30.0) {
        let z = lcg_tensor(&[2, 1, 3, 3], seed, scale);
        let t = lcg_mask(&[2, 1, 3, 3], seed + 1);
        let d = dice(&z, &t, 1.0);
        prop_assert!((0.0..1.0).contains(&d));
        prop_assert!(combined(&z, &t, &LossConfig::default()) >= 0.0);
    }
}

fn one_param(value: f64) -> (ParamStore<f64>, ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::full(&[1], value)).unwrap();
    (store, id)
}

/// Leaves `g` in the parameter's gradient slot via `d/dθ sum(θ g) = g`.
fn set_grad(store: &mut ParamStore<f64>, id: ParamId, g: f64) {
    let grads = {
        let tape = Tape::with_params(store);
        let p = tape.param(id);
        let loss = tape.sum(&tape.mul(&p, &tape.constant(Tensor::full(&[1], g))).unwrap());
        tape.backward(&loss).unwrap()
    };
    store.zero_grads();
    store.accumulate(&grads);
}

fn theta(store: &ParamStore<f64>, id: ParamId) -> f64 {
    store.get(id).value.data()[0]
}

#[test]
fn adamw_first_step_closed_form() {
    let (mut store, id) = one_param(1.0);
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = OptimState::new(cfg, &store).unwrap();
    set_grad(&mut store, id, 1.0);
    opt.step(&mut store).unwrap();
    // bias correction makes m_hat = v_hat = 1 on the first step
    assert!((theta(&store, id) - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    assert_eq!(opt.step, 1);
}

#[test]
fn adamw_decay_is_decoupled() {
    let (mut store, id) = one_param(2.0);
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..AdamWConfig::default()
    };
    let mut opt = OptimState::new(cfg, &store).unwrap();
    let mut want = 2.0;
    for _ in 0..3 {
        set_grad(&mut store, id, 0.0);
        opt.step(&mut store).unwrap();
        want *= 1.0 - 0.1 * 0.5;
        assert_eq!(theta(&store, id), want);
    }
}

#[test]
fn adamw_without_momentum_takes_unit_steps() {
    let cfg = AdamWConfig {
        lr: 0.01,
        betas: [0.0, 0.0],
        weight_decay: 0.0,
        eps: 1e-8,
    };
    let (mut store, id) = one_param(0.0);
    let mut opt = OptimState::new(cfg, &store).unwrap();
    let mut prev = 0.0;
    for g in [3.0, -0.25, 1e-3, -40.0] {
        set_grad(&mut store, id, g);
        opt.step(&mut store).unwrap();
        let step = theta(&store, id) - prev;
        assert!((step + 0.01 * g.signum()).abs() < 0.01 * 1e-8 / g.abs() + 1e-17);
        prev = theta(&store, id);
    }
}

#[test]
fn adamw_rejects_non_finite_gradients_without_touching_params() {
    let (mut store, id) = one_param(1.5);
    let mut opt = OptimState::new(AdamWConfig::default(), &store).unwrap();
    set_grad(&mut store, id, f64::NAN);
    let err = opt.step(&mut store).unwrap_err().to_string();
    assert!(err.contains("theta"), "{err}");
    assert_eq!(theta(&store, id), 1.5);
    assert_eq!(opt.step, 0);
}

#[test]
fn adamw_trajectories_are_reproducible_and_lr_zero_is_inert() {
    let run = |lr: f64| {
        let (mut store, id) = one_param(0.7);
        let mut opt = OptimState::new(
            AdamWConfig {
                lr,
                ..AdamWConfig::default()
            },
            &store,
        )
        .unwrap();
        (0..20)
            .map(|k| {
                set_grad(&mut store, id, (k as f64 * 0.37).sin());
                opt.step(&mut store).unwrap();
                theta(&store, id)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(1e-2), run(1e-2));
    assert!(run(0.0).iter().all(|&v| v == 0.7));
    assert!(AdamWConfig {
        betas: [0.9, 1.0],
        ..AdamWConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn table_pairs_reproduce_printed_scores() {
    assert!((f1_score(0.9181, 0.9124) - 0.9152).abs() < 1e-4);
    assert!((f1_score(0.9702, 0.9487) - 0.9593).abs() < 1e-4);
    assert!((dip_score(0.9181, 0.9124) - 0.9152).abs() < 1e-4);
    assert!((dip_score(0.9702, 0.9487) - 0.9580).abs() < 1e-4);
    assert_eq!((f1_score(1.0, 1.0), dip_score(1.0, 1.0)), (1.0, 1.0));
}

#[test]
fn perfect_and_inverted_predictions() {
    let labels: Vec<f64> = (0..50).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
    let perfect = MetricsReport::from_counts(ConfusionCounts::from_probabilities(&labels, &labels, 0.5));
    assert_eq!(
        (perfect.pre, perfect.rec, perfect.f1, perfect.dip),
        (1.0, 1.0, 1.0, 1.0)
    );
    let inverted: Vec<f64> = labels.iter().map(|l| 1.0 - l).collect();
    let c = ConfusionCounts::from_probabilities(&inverted, &labels, 0.5);
    assert_eq!(precision_recall(&c), (0.0, 0.0));
    assert_eq!(c.total(), 50);
}

proptest! {
    #[test]
    fn merging_counts_equals_counting_the_concatenation(
        probs in proptest::collection::vec(0.0f64..1.0, 1..200),
        split in 0usize..200,
        seed in 0u64..1000,
    ) {
        let labels: Vec<f64> = (0..probs.len()).map(|i| ((i as u64 * 31 + seed) % 5 < 2) as u8 as f64).collect();
        let k = split.min(probs.len());
        let merged = ConfusionCounts::from_probabilities(&probs[..k], &labels[..k], 0.5)
            + ConfusionCounts::from_probabilities(&probs[k..], &labels[k..], 0.5);
        let whole = ConfusionCounts::from_probabilities(&probs, &labels, 0.5);
        prop_assert_eq!(merged, whole);
        prop_assert_eq!(MetricsReport::from_counts(merged), MetricsReport::from_counts(whole));
    }

    #[test]
    fn scores_are_symmetric_and_bounded(pre in 0.0f64..=1.0, rec in 0.0f64..=1.0) {
        prop_assert_eq!(f1_score(pre, rec), f1_score(rec, pre));
        prop_assert_eq!(dip_score(pre, rec), dip_score(rec, pre));
        prop_assert!(dip_score(pre, rec) <= 1.0);
        if pre > 0.0 && rec > 0.0 {
            let f = f1_score(pre, rec);
            prop_assert!(f >= pre.min(rec) - 1e-15 && f <= pre.max(rec) + 1e-15);
        }
    }
}

fn handmade(id: &str, mask: &[u8]) -> BiTemporalSample {
    let m = Tensor::new(&[1, 32, 32], mask.iter().map(|&v| v as f32).collect()).unwrap();
    let img = Tensor::full(&[3, 32, 32], 0.5);
    BiTemporalSample::new(id, Source::Synthetic, img.clone(), img, m).unwrap()
}

/// Tiny model whose head emits the constant logit `bias` everywhere.
fn constant_model(bias: f32) -> LsatModel<f32> {
    let mut m = LsatModel::<f32>::new(LsatConfig::tiny(), 0).unwrap();
    let head = m.arch.head_out;
    let shape = m.params.get(head.weight).value.shape().to_vec();
    head.set(&mut m.params, Tensor::zeros(&shape), Some(Tensor::full(&[1], bias)))
        .unwrap();
    m
}

#[test]
fn evaluation_counts_two_handmade_tiles() {
    let a: Vec<u8> = (0..1024).map(|i| (i % 32 < 8) as u8).collect();
    let b: Vec<u8> = (0..1024).map(|i| (i / 32 >= 30) as u8).collect();
    let data = [handmade("a", &a), handmade("b", &b)];
    let positives = (256 + 64) as u64;
    let all = confusion(&constant_model(5.0), &data, 0.5, 1).unwrap();
    assert_eq!(
        all,
        ConfusionCounts {
            tp: positives,
            fp: 2048 - positives,
            fn_: 0,
            tn: 0
        }
    );
    let none = confusion(&constant_model(-5.0), &data, 0.5, 2).unwrap();
    assert_eq!(
        none,
        ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: positives,
            tn: 2048 - positives
        }
    );
    let r = evaluate(&constant_model(5.0), &data, 0.5, 2).unwrap();
    assert!((r.pre - 320.0 / 2048.0).abs() < 1e-15 && r.rec == 1.0);
    assert!(evaluate(&constant_model(5.0), &[], 0.5, 2).is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_bit_exact() {
    let synth = SynthConfig {
        canvas: 32,
        ..SynthConfig::default()
    };
    let data = generate_range(&synth, 0, 4).unwrap();
    let mut m = LsatModel::<f32>::new(LsatConfig::tiny(), 1).unwrap();
    let before = m.params.clone();
    let mut opt = OptimState::new(
        AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        },
        &m.params,
    )
    .unwrap();
    train_epoch(
        &mut m,
        &data,
        &mut opt,
        &LossConfig::default(),
        &EpochOptions::default(),
        3,
    )
    .unwrap();
    for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
        assert!(a.value.bit_eq(&b.value), "{} moved", a.name);
    }
}

#[test]
fn seeded_epochs_are_reproducible() {
    let synth = SynthConfig {
        canvas: 32,
        ..SynthConfig::default()
    };
    let data = generate_range(&synth, 0, 6).unwrap();
    let run = || {
        let mut m = LsatModel::<f32>::new(LsatConfig::tiny(), 5).unwrap();
        let mut opt = OptimState::new(
            AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            &m.params,
        )
        .unwrap();
        let opts = EpochOptions {
            batch_size: 4,
            augmentation: Some(Default::default()),
        };
        let losses: Vec<f64> = (0..3)
            .map(|e| {
                train_epoch(&mut m, &data, &mut opt, &LossConfig::default(), &opts, e)
                    .unwrap()
                    .mean_loss
            })
            .collect();
        (losses, m.params)
    };
    let (l1, p1) = run();
    let (l2, p2) = run();
    assert_eq!(l1, l2);
    for ((_, a), (_, b)) in p1.iter().zip(p2.iter()) {
        assert!(a.value.bit_eq(&b.value));
    }
}

/// Recorded with seed 0 on the 16-pair toy set at the default rate.
#[test]
fn default_model_loss_decreases_on_toy_set() {
    let data = generate_range(&SynthConfig::default(), 0, 16).unwrap();
    let mut m = LsatModel::<f32>::new(LsatConfig::default(), 0).unwrap();
    let mut opt = OptimState::new(AdamWConfig::default(), &m.params).unwrap();
    let opts = EpochOptions::default();
    let losses: Vec<f64> = (0..10)
        .map(|e| {
            train_epoch(&mut m, &data, &mut opt, &LossConfig::default(), &opts, e)
                .unwrap()
                .mean_loss
        })
        .collect();
    assert!(losses[9] < losses[0], "{losses:?}");
    assert!(losses[3..].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!((losses[9] - 1.170_262).abs() < 1e-4, "{losses:?}");
}
