mod common;

use std::collections::BTreeSet;

use qlwa::data::{gen_fixture, Arch, DEAD_CHANNEL, OUTLIER_FACTOR, OUTLIER_LAYER};
use qlwa::graph::{fold_batch_norms, load_model, save_model, BatchNorm, GraphBuilder, LayerCall, NoTap};
use qlwa::rng::Rng;
use qlwa::{Activation, Error, Tensor};

fn conv_bn_graph(seed: u64) -> (qlwa::NetworkGraph, Tensor, Tensor, BatchNorm) {
    let mut rng = Rng::new(seed);
    let w = common::random_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = common::random_tensor(&mut rng, &[4], -0.2, 0.2);
    let bn = BatchNorm {
        gamma: vec![0.5, 1.5, -0.7, 1.0],
        beta: vec![0.1, -0.2, 0.3, 0.0],
        running_mean: vec![0.2, -0.1, 0.05, 0.3],
        running_var: vec![0.4, 2.0, 0.9, 1e-3],
        epsilon: 1e-5,
    };
    let mut gb = GraphBuilder::new(vec![1, 3, 6, 6]);
    gb.input("x")
        .conv("c", "x", w.clone(), b.clone(), [1, 1], [1, 1], Activation::None)
        .batch_norm("c", bn.clone())
        .output("y", "c");
    (gb.build().unwrap(), w, b, bn)
}

#[test]
fn folded_conv_matches_batch_norm_formula() {
    let (g, w, b, bn) = conv_bn_graph(3);
    let folded = fold_batch_norms(&g).unwrap();
    assert!(!folded.has_batch_norm());
    let mut rng = Rng::new(4);
    for _ in 0..8 {
        let x = common::random_tensor(&mut rng, &[1, 3, 6, 6], 0.0, 1.0);
        let (_, conv) = common::conv2d(&x, &w, &b, [1, 1], [1, 1]);
        let plane = 36;
        let want: Vec<f64> = conv
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let c = i / plane;
                let (g, be, m, v) = (bn.gamma[c], bn.beta[c], bn.running_mean[c], bn.running_var[c]);
                f64::from(g) * (z - f64::from(m)) / (f64::from(v) + f64::from(bn.epsilon)).sqrt() + f64::from(be)
            })
            .collect();
        let got = folded.forward(&x).unwrap();
        assert!(common::max_rel_err(got.data(), &want) < 1e-4);
        let unfolded = g.forward(&x).unwrap();
        assert!(common::max_rel_err(unfolded.data(), &want) < 1e-4);
    }
}

#[test]
fn folding_is_idempotent_and_keeps_structure() {
    let g = gen_fixture(Arch::ResnetTiny, 5).unwrap();
    let f = fold_batch_norms(&g).unwrap();
    assert_eq!(fold_batch_norms(&f).unwrap(), f);
    assert_eq!(f.compute_layers(), g.compute_layers());
}

#[test]
fn non_positive_variance_is_rejected() {
    let (g, ..) = conv_bn_graph(1);
    let mut layers = g.layers().to_vec();
    layers[1].bn.as_mut().unwrap().running_var[2] = -1.0;
    layers[1].bn.as_mut().unwrap().epsilon = 0.0;
    let bad = qlwa::NetworkGraph::new(g.input_shape().to_vec(), layers, g.params().clone());
    let err = bad.and_then(|g| fold_batch_norms(&g)).unwrap_err();
    assert!(matches!(err, Error::NonPositiveVariance { channel: 2, .. }), "{err}");
}

#[test]
fn model_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for arch in Arch::ALL {
        let g = gen_fixture(arch, 9).unwrap();
        let path = dir.path().join(arch.as_str());
        save_model(&g, &path).unwrap();
        let back = load_model(&path.join("model.json")).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.fingerprint(), g.fingerprint());
    }
}

fn edit_model(edit: impl FnOnce(&mut serde_json::Value)) -> Error {
    let dir = tempfile::tempdir().unwrap();
    save_model(&gen_fixture(Arch::MlpSmall, 1).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("model.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    edit(&mut v);
    std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    load_model(dir.path()).unwrap_err()
}

#[test]
fn malformed_models_name_the_layer() {
    let err = edit_model(|v| v["layers"][1]["kind"] = "lstm".into());
    assert!(matches!(&err, Error::UnknownKind { kind, .. } if kind == "lstm"), "{err}");

    let err = edit_model(|v| v["layers"][1]["inputs"] = serde_json::json!(["fc2"]));
    assert!(matches!(&err, Error::DagViolation { input, .. } if input == "fc2"), "{err}");

    let err = edit_model(|v| v["layers"][1]["inputs"] = serde_json::json!(["ghost"]));
    assert!(matches!(&err, Error::DanglingInput { input, .. } if input == "ghost"), "{err}");

    let err = edit_model(|v| v["layers"][2]["id"] = v["layers"][1]["id"].clone());
    assert!(matches!(err, Error::DuplicateLayer(_)), "{err}");

    let err = edit_model(|v| v["layers"][1]["params"]["weight"] = "missing.qt".into());
    assert!(matches!(&err, Error::MissingParameter { reference, .. } if reference == "missing.qt") || matches!(err, Error::Io { .. }), "{err}");

    let err = edit_model(|v| v["input_shape"] = serde_json::json!([1, 7]));
    assert!(matches!(err, Error::LayerShape { .. } | Error::ShapeMismatch { .. }), "{err}");
}

#[test]
fn interceptor_sees_every_layer_once_in_order() {
    let g = fold_batch_norms(&gen_fixture(Arch::ConvSmall, 2).unwrap()).unwrap();
    let seen = std::sync::Mutex::new(Vec::new());
    let tap = |call: &LayerCall, _: &Tensor| -> qlwa::Result<Option<Tensor>> {
        seen.lock().unwrap().push(call.node.id.clone());
        Ok(None)
    };
    let x = Tensor::full(g.input_shape(), 0.5).unwrap();
    let a = g.forward_with(&x, &tap).unwrap();
    assert!(a.bit_eq(&g.forward(&x).unwrap()));
    let ids: Vec<String> = g.layers().iter().map(|l| l.id.clone()).collect();
    let seen = seen.into_inner().unwrap();
    assert_eq!(seen, ids);
}

#[test]
fn resume_reuses_cached_prefix() {
    let g = fold_batch_norms(&gen_fixture(Arch::ResnetTiny, 2).unwrap()).unwrap();
    let x = common::random_tensor(&mut Rng::new(8), g.input_shape(), 0.0, 1.0);
    let all = g.forward_all(&x, &NoTap).unwrap();
    let full = g.forward(&x).unwrap();
    for from in 1..g.layers().len() {
        assert!(g.forward_resume(&all, from, &NoTap).unwrap().bit_eq(&full), "resume at {from}");
    }
    assert!(g.forward_resume(&all, 0, &NoTap).is_err());
}

#[test]
fn fixtures_are_deterministic_and_sane() {
    for arch in Arch::ALL {
        let a = gen_fixture(arch, 7).unwrap();
        assert_eq!(a, gen_fixture(arch, 7).unwrap(), "{arch}");
        assert_ne!(a.fingerprint(), gen_fixture(arch, 8).unwrap().fingerprint());
        let x = Tensor::full(a.input_shape(), 0.5).unwrap();
        let y = a.forward(&x).unwrap();
        assert!(y.all_finite());
        let (lo, hi) = y.min_max();
        assert!(hi > lo, "{arch} output is constant");
    }
    assert!("alexnet".parse::<Arch>().is_err());
}

#[test]
fn resnet_tiny_structure() {
    let g = gen_fixture(Arch::ResnetTiny, 7).unwrap();
    let adds = g.layers().iter().filter(|l| l.kind == qlwa::LayerKind::Add).count();
    assert!(adds >= 2);
    assert!(g.layers().iter().any(|l| l.kind == qlwa::LayerKind::GlobalAvgPool));
}

#[test]
fn outlier_variant_differs_only_in_designated_layer() {
    let clean = gen_fixture(Arch::ResnetTiny, 7).unwrap();
    let outl = gen_fixture(Arch::OutlierResnetTiny, 7).unwrap();
    let differing: BTreeSet<&String> =
        clean.params().iter().filter(|(k, v)| !outl.params()[*k].bit_eq(v)).map(|(k, _)| k).collect();
    assert_eq!(differing.len(), 1);
    assert!(differing.iter().next().unwrap().starts_with(OUTLIER_LAYER));

    let (cw, _) = clean.layer_params(OUTLIER_LAYER).unwrap();
    let (ow, _) = outl.layer_params(OUTLIER_LAYER).unwrap();
    let changed: Vec<usize> = (0..cw.len()).filter(|&i| cw.data()[i] != ow.data()[i]).collect();
    assert!(!changed.is_empty() && changed.len() <= 4);
    let fan_in = cw.shape()[1];
    for &i in &changed {
        assert_eq!(i % fan_in, DEAD_CHANNEL);
        assert_eq!(ow.data()[i], cw.data()[i] * OUTLIER_FACTOR);
    }
}
