use lsat_core::enhance::{
    afm_forward, aggr_path_add, aggr_path_concat, detail_aggregate, diff_refine, saem_forward_detailed, simam,
    simam_weights, AfmWeights, SaemWeights, SimamParams,
};
use lsat_core::tensor::kernels;
use lsat_core::tensor::{seeded_rng, ParamBuilder, Var};
use lsat_core::{ParamStore, Tape, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-element SimAM straight from the formula.
fn simam_oracle(x: &Tensor<f64>, lambda: f64) -> Tensor<f64> {
    let [b, c, h, w] = x.shape().try_into().unwrap();
    let n = h * w;
    let mut out = x.to_vec();
    for plane in 0..b * c {
        let vals = &x.data()[plane * n..(plane + 1) * n];
        let mu = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        for (o, v) in out[plane * n..(plane + 1) * n].iter_mut().zip(vals) {
            *o = sigmoid((v - mu).powi(2) / (4.0 * (var + lambda)) + 0.5) * v;
        }
    }
    Tensor::new(&[b, c, h, w], out).unwrap()
}

fn saem_setup(c: usize, seed: u64) -> (ParamStore<f64>, SaemWeights) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let w = SaemWeights::build(&mut ParamBuilder::new(&mut store, &mut rng), c).unwrap();
    // non-zero biases so bias handling is exercised
    for layer in [w.conv_pre, w.reduce_1x1, w.concat_reduce] {
        store
            .set_value(layer.bias.unwrap(), random(&[c], seed + 1, 0.5))
            .unwrap();
    }
    (store, w)
}

fn eval2(
    store: &ParamStore<f64>,
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    f: impl FnOnce(&Tape<f64>, &Var<f64>, &Var<f64>) -> lsat_core::Result<Var<f64>>,
) -> Tensor<f64> {
    let tape = Tape::with_params(store);
    f(&tape, &tape.constant(a.clone()), &tape.constant(b.clone()))
        .unwrap()
        .value()
        .clone()
}

fn conv(store: &ParamStore<f64>, layer: &lsat_core::layers::Conv2dLayer, x: &Tensor<f64>) -> Tensor<f64> {
    let w = &store.get(layer.weight).value;
    let b = &store.get(layer.bias.unwrap()).value;
    kernels::conv2d(x, w, Some(b), layer.spec).unwrap()
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    a.zip_map(b, |x, y| x + y)
}

const P: SimamParams = SimamParams { lambda_s: 1e-4 };

#[test]
fn simam_constant_planes_scale_by_sigmoid_half() {
    let x = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| [2.0, -1.0, 0.5][i / 16]);
    let tape = Tape::new();
    let y = simam(&tape, &tape.constant(x.clone()), &P).unwrap();
    for (o, v) in y.value().data().iter().zip(x.data()) {
        assert!((o - 0.622_459_331_201_854_6 * v).abs() < 1e-15);
    }
}

#[test]
fn simam_weights_peak_at_the_largest_deviation() {
    let mut x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
    let mut d = x.to_vec();
    d[5] = 4.0;
    x = Tensor::new(&[1, 1, 3, 3], d).unwrap();
    let tape = Tape::new();
    let w = simam_weights(&tape, &tape.constant(x), &P).unwrap();
    let argmax = w
        .value()
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert_eq!(argmax, 5);

    for seed in 0..10 {
        let x = random(&[2, 3, 4, 5], seed, 2.0);
        let w = simam_weights(&tape, &tape.constant(x.clone()), &P).unwrap();
        for plane in 0..6 {
            let vals = &x.data()[plane * 20..(plane + 1) * 20];
            let mu = vals.iter().sum::<f64>() / 20.0;
            let dev = |i: usize| (vals[i] - mu).powi(2);
            let want = (0..20).max_by(|&a, &b| dev(a).total_cmp(&dev(b))).unwrap();
            let ws = &w.value().data()[plane * 20..(plane + 1) * 20];
            let got = (0..20).max_by(|&a, &b| ws[a].total_cmp(&ws[b])).unwrap();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn simam_matches_formula_and_rejects_single_pixel() {
    let x = random(&[1, 2, 3, 3], 3, 1.5);
    let tape = Tape::new();
    let y = simam(&tape, &tape.constant(x.clone()), &P).unwrap();
    assert!(y.value().max_abs_diff(&simam_oracle(&x, 1e-4)) < 1e-14);
    assert!(simam(&tape, &tape.constant(Tensor::zeros(&[1, 2, 1, 1])), &P).is_err());
    assert!(SimamParams { lambda_s: 0.0 }.validate().is_err());
}

#[test]
fn diff_refine_is_symmetric_and_vanishes_on_equal_inputs() {
    let (store, w) = saem_setup(4, 10);
    for seed in 0..5 {
        let a = random(&[2, 4, 5, 3], 100 + seed, 1.0);
        let b = random(&[2, 4, 5, 3], 200 + seed, 1.0);
        let ab = eval2(&store, &a, &b, |t, x, y| diff_refine(t, x, y, &w, &P));
        let ba = eval2(&store, &b, &a, |t, x, y| diff_refine(t, x, y, &w, &P));
        assert!(ab.bit_eq(&ba));
        let aa = eval2(&store, &a, &a, |t, x, y| diff_refine(t, x, y, &w, &P));
        assert!(aa.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn saem_paths_match_composed_oracles() {
    let (store, w) = saem_setup(4, 20);
    let a = random(&[1, 4, 4, 4], 21, 1.0);
    let b = random(&[1, 4, 4, 4], 22, 1.0);
    let (c1, c2) = (conv(&store, &w.conv_pre, &a), conv(&store, &w.conv_pre, &b));
    let lam = 1e-4;

    let diff = simam_oracle(
        &simam_oracle(&c1, lam).zip_map(&simam_oracle(&c2, lam), |x, y| (x - y).abs()),
        lam,
    );
    let got = eval2(&store, &a, &b, |t, x, y| diff_refine(t, x, y, &w, &P));
    assert!(got.max_abs_diff(&diff) < 1e-12);

    let fa1 = conv(&store, &w.reduce_1x1, &add(&c1, &c2));
    let got = eval2(&store, &a, &b, |t, x, y| aggr_path_add(t, x, y, &w));
    assert!(got.max_abs_diff(&fa1) < 1e-12);

    let fa2 = simam_oracle(
        &conv(&store, &w.concat_reduce, &kernels::concat(&[&c1, &c2], 1).unwrap()),
        lam,
    );
    let got = eval2(&store, &a, &b, |t, x, y| aggr_path_concat(t, x, y, &w, &P));
    assert!(got.max_abs_diff(&fa2) < 1e-12);

    let aggr = simam_oracle(&add(&fa1, &simam_oracle(&fa2, lam)), lam);
    let tape = Tape::with_params(&store);
    let out = saem_forward_detailed(&tape, &tape.constant(a.clone()), &tape.constant(b.clone()), &w, &P).unwrap();
    assert!(out.f_aggr.value().max_abs_diff(&aggr) < 1e-12);
    assert!(out.f_out.value().max_abs_diff(&add(&diff, &aggr)) < 1e-12);
}

#[test]
fn additive_path_commutes_and_cancels() {
    let (mut store, w) = saem_setup(3, 30);
    let a = random(&[1, 3, 4, 4], 31, 1.0);
    let b = random(&[1, 3, 4, 4], 32, 1.0);
    let ab = eval2(&store, &a, &b, |t, x, y| aggr_path_add(t, x, y, &w));
    let ba = eval2(&store, &b, &a, |t, x, y| aggr_path_add(t, x, y, &w));
    assert!(ab.bit_eq(&ba));

    // with a bias-free C3, f2 = -f1 cancels exactly and only the 1x1 bias remains
    store.set_value(w.conv_pre.bias.unwrap(), Tensor::zeros(&[3])).unwrap();
    let neg = a.map(|v| -v);
    let out = eval2(&store, &a, &neg, |t, x, y| aggr_path_add(t, x, y, &w));
    let bias = store.get(w.reduce_1x1.bias.unwrap()).value.clone();
    for ch in 0..3 {
        assert!(out.data()[ch * 16..(ch + 1) * 16]
            .iter()
            .all(|v| (v - bias.data()[ch]).abs() < 1e-12));
    }
}

#[test]
fn concat_path_is_order_sensitive() {
    let (store, w) = saem_setup(4, 40);
    let a = random(&[1, 4, 4, 4], 41, 1.0);
    let b = random(&[1, 4, 4, 4], 42, 1.0);
    let ab = eval2(&store, &a, &b, |t, x, y| aggr_path_concat(t, x, y, &w, &P));
    let ba = eval2(&store, &b, &a, |t, x, y| aggr_path_concat(t, x, y, &w, &P));
    assert!(ab.max_abs_diff(&ba) > 1e-3);
}

#[test]
fn concat_path_on_zero_inputs_is_bias_only() {
    let (store, w) = saem_setup(2, 50);
    let z = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
    let out = eval2(&store, &z, &z, |t, x, y| aggr_path_concat(t, x, y, &w, &P));
    // C3 of zeros is its bias; the 1x1 reduction of a constant map is constant;
    // SimAM of a constant plane scales it by sigmoid(0.5)
    let b3 = store.get(w.conv_pre.bias.unwrap()).value.to_vec();
    let wr = store.get(w.concat_reduce.weight).value.to_vec();
    let br = store.get(w.concat_reduce.bias.unwrap()).value.to_vec();
    for o in 0..2 {
        let cat = [b3[0], b3[1], b3[0], b3[1]];
        let v = br[o] + (0..4).map(|i| wr[o * 4 + i] * cat[i]).sum::<f64>();
        assert!(out.data()[o * 9..(o + 1) * 9]
            .iter()
            .all(|x| (x - sigmoid(0.5) * v).abs() < 1e-12));
    }
}

#[test]
fn detail_aggregate_identities() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let out = detail_aggregate(&tape, &z, &z, &P).unwrap();
    assert!(out.value().data().iter().all(|v| *v == 0.0));
    let a = random(&[1, 2, 3, 3], 60, 1.0);
    let out = detail_aggregate(&tape, &tape.constant(a.clone()), &z, &P).unwrap();
    assert!(out.value().max_abs_diff(&simam_oracle(&a, 1e-4)) < 1e-15);
    let bad = tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
    assert!(detail_aggregate(&tape, &z, &bad, &P).is_err());
}

#[test]
fn equal_inputs_leave_only_the_aggregate() {
    let (store, w) = saem_setup(4, 70);
    let a = random(&[1, 4, 4, 4], 71, 1.0);
    let tape = Tape::with_params(&store);
    let av = tape.constant(a);
    let out = saem_forward_detailed(&tape, &av, &av, &w, &P).unwrap();
    assert!(out.f_diff.value().data().iter().all(|v| *v == 0.0));
    assert!(out.f_out.value().bit_eq(out.f_aggr.value()));
}

#[test]
fn saem_stays_finite_on_large_inputs_and_rejects_mismatch() {
    let (store, w) = saem_setup(4, 80);
    let a = random(&[2, 4, 4, 4], 81, 1e3);
    let b = random(&[2, 4, 4, 4], 82, 1e3);
    let tape = Tape::with_params(&store);
    let out = saem_forward_detailed(&tape, &tape.constant(a), &tape.constant(b), &w, &P).unwrap();
    assert!(out.f_out.value().all_finite());
    let other = tape.constant(Tensor::zeros(&[2, 4, 4, 2]));
    assert!(diff_refine(&tape, &other, &tape.constant(Tensor::zeros(&[2, 4, 4, 4])), &w, &P).is_err());
}

#[test]
fn saem_parameters_are_only_convolutions() {
    for c in [1, 4, 7] {
        let (store, w) = saem_setup(c, 90);
        let convs = (9 * c * c + c) + (c * c + c) + (2 * c * c + c);
        assert_eq!(w.param_count(), convs);
        assert_eq!(store.total_elements(), convs);
    }
}

fn afm_setup(c: usize, seed: u64) -> (ParamStore<f64>, AfmWeights) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let w = AfmWeights::build(&mut ParamBuilder::new(&mut store, &mut rng), c).unwrap();
    (store, w)
}

#[test]
fn afm_with_zero_gate_logits_quarters_the_fused_map() {
    let (mut store, w) = afm_setup(4, 100);
    for layer in [w.channel_up, w.spatial_gate] {
        let shape = store.get(layer.weight).value.shape().to_vec();
        layer
            .set(&mut store, Tensor::zeros(&shape), Some(Tensor::zeros(&[layer.out_ch])))
            .unwrap();
    }
    let a = random(&[1, 4, 3, 3], 101, 1.0);
    let b = random(&[1, 4, 3, 3], 102, 1.0);
    let out = eval2(&store, &a, &b, |t, x, y| afm_forward(t, x, y, &w));
    let g = conv(&store, &w.fuse_reduce, &kernels::concat(&[&a, &b], 1).unwrap());
    assert!(out.max_abs_diff(&g.map(|v| v / 4.0)) < 1e-15);
}

#[test]
fn afm_matches_loop_oracle() {
    let (c, hw) = (4, 6);
    let (store, w) = afm_setup(c, 110);
    let a = random(&[1, c, 2, 3], 111, 1.0);
    let b = random(&[1, c, 2, 3], 112, 1.0);
    let out = eval2(&store, &a, &b, |t, x, y| afm_forward(t, x, y, &w));
    let g = conv(&store, &w.fuse_reduce, &kernels::concat(&[&a, &b], 1).unwrap());
    let gd = g.data();
    let p = |id| store.get(id).value.to_vec();
    let (wd, bd) = (p(w.channel_down.weight), p(w.channel_down.bias.unwrap()));
    let (wu, bu) = (p(w.channel_up.weight), p(w.channel_up.bias.unwrap()));
    let (ws, bs) = (p(w.spatial_gate.weight), p(w.spatial_gate.bias.unwrap()));
    let hidden_n = c / 4;
    let desc: Vec<f64> = (0..c)
        .map(|ch| gd[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let hidden: Vec<f64> = (0..hidden_n)
        .map(|j| (bd[j] + (0..c).map(|i| wd[j * c + i] * desc[i]).sum::<f64>()).max(0.0))
        .collect();
    let cgate: Vec<f64> = (0..c)
        .map(|o| sigmoid(bu[o] + (0..hidden_n).map(|j| wu[o * hidden_n + j] * hidden[j]).sum::<f64>()))
        .collect();
    for pix in 0..hw {
        let col: Vec<f64> = (0..c).map(|ch| gd[ch * hw + pix]).collect();
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let av = col.iter().sum::<f64>() / c as f64;
        let sgate = sigmoid(ws[0] * mx + ws[1] * av + bs[0]);
        for ch in 0..c {
            let want = col[ch] * cgate[ch] * sgate;
            assert!((out.data()[ch * hw + pix] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn afm_rejects_bad_channels_and_shapes() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(0);
    assert!(AfmWeights::build(&mut ParamBuilder::new(&mut store, &mut rng), 6).is_err());
    let (store, w) = afm_setup(4, 120);
    let tape = Tape::with_params(&store);
    let a = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[1, 4, 2, 3]));
    assert!(afm_forward(&tape, &a, &b, &w).is_err());
}
