use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::net::{Conv2dSpec, ParamName};

fn head_key(l: usize) -> ParamKey {
    ParamKey {
        layer: l,
        name: ParamName::HeadWeight(0),
    }
}

fn set(net: &mut Network, key: ParamKey, vals: &[f64]) {
    net.param_mut(&key).unwrap().data_mut().copy_from_slice(vals);
}

/// Single affine head `2 -> 2` with the worked-example weights.
fn two_by_two() -> Network {
    let mut net = Network::new(&[2], vec![LayerSpec::heads(2, [(HeadId::new("h"), 2)])]).unwrap();
    set(&mut net, head_key(0), &[2.0, -1.0, 1.0, 1.0]);
    net
}

fn row(v: &[f64]) -> Tensor {
    Tensor::from_rows(&[v.to_vec()]).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn init_relevance_examples() {
    let r = init_relevance(&row(&[2.0, -1.0]), &[0]).unwrap();
    assert_eq!(r.data(), &[2.0, 0.0]);
    let r = init_relevance(&row(&[0.0, 5.0]), &[0]).unwrap();
    assert_eq!(r.data(), &[0.0, 0.0]);
    let r = init_relevance(&row(&[0.5, -3.0, 7.0]), &[2]).unwrap();
    assert_eq!(r.sum(), 7.0);
    assert!(matches!(
        init_relevance(&row(&[1.0, 2.0]), &[2]),
        Err(Error::Index { index: 2, len: 2 })
    ));
}

#[test]
fn epsilon_hand_example() {
    let net = two_by_two();
    let (z, trace) = net.forward(&row(&[1.0, 2.0]), &HeadId::new("h")).unwrap();
    assert_eq!(z.data(), &[4.0, 1.0]);
    let lower = lrp_epsilon_dense(&net, &trace, 0, &row(&[4.0, 1.0]), 0.0).unwrap();
    assert!((lower.data()[0] - 1.0).abs() < 1e-12);
    assert!((lower.data()[1] - 4.0).abs() < 1e-12);
    assert!((lower.sum() - 5.0).abs() < 1e-12);
}

#[test]
fn zplus_hand_example() {
    let net = two_by_two();
    let (_, trace) = net.forward(&row(&[1.0, 2.0]), &HeadId::new("h")).unwrap();
    let (lower, dropped) = lrp_zplus(&net, &trace, 0, &row(&[4.0, 1.0])).unwrap();
    assert_eq!(dropped, 0);
    assert!((lower.data()[0] - 2.0).abs() < 1e-12);
    assert!((lower.data()[1] - 3.0).abs() < 1e-12);
}

#[test]
fn epsilon_identity_and_limit() {
    let mut net = Network::new(&[3], vec![LayerSpec::heads(3, [(HeadId::new("h"), 3)])]).unwrap();
    set(&mut net, head_key(0), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let (_, trace) = net.forward(&row(&[0.5, 2.0, 3.0]), &HeadId::new("h")).unwrap();
    let up = row(&[1.0, -2.0, 0.25]);
    let lower = lrp_epsilon_dense(&net, &trace, 0, &up, 0.0).unwrap();
    assert_eq!(lower.data(), up.data());
    let huge = lrp_epsilon_dense(&net, &trace, 0, &up, 1e300).unwrap();
    assert!(huge.data().iter().all(|v| v.abs() < 1e-290));
}

#[test]
fn epsilon_zero_denominator_is_reported() {
    let mut net = two_by_two();
    set(&mut net, head_key(0), &[2.0, -2.0, 1.0, 1.0]);
    let (_, trace) = net.forward(&row(&[1.0, 2.0]), &HeadId::new("h")).unwrap();
    let err = lrp_epsilon_dense(&net, &trace, 0, &row(&[1.0, 1.0]), 0.0).unwrap_err();
    assert!(matches!(
        err,
        Error::DegenerateDenominator {
            layer: 0,
            sample: 0,
            index: 1
        }
    ));
    // sign(0) = +1, so a positive stabilizer rescues it
    assert!(lrp_epsilon_dense(&net, &trace, 0, &row(&[1.0, 1.0]), 1e-6).is_ok());
}

#[test]
fn zplus_negative_weights_drop() {
    let mut net = two_by_two();
    set(&mut net, head_key(0), &[-1.0, -2.0, -0.5, -3.0]);
    let (_, trace) = net.forward(&row(&[1.0, 2.0]), &HeadId::new("h")).unwrap();
    let (lower, dropped) = lrp_zplus(&net, &trace, 0, &row(&[3.0, 0.0])).unwrap();
    assert_eq!(lower.data(), &[0.0, 0.0]);
    assert_eq!(dropped, 1);
}

#[test]
fn passthrough_flatten_and_relu() {
    let net = Network::new(
        &[1, 2, 2],
        vec![
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::heads(4, [(HeadId::new("h"), 1)]),
        ],
    )
    .unwrap();
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
    let (_, trace) = net.forward(&x, &HeadId::new("h")).unwrap();
    let up = row(&[1.0, 2.0, 3.0, 4.0]);
    let lower = lrp_passthrough(&net, &trace, 1, &up).unwrap();
    assert_eq!(lower.shape(), &[1, 1, 2, 2]);
    assert_eq!(lower.data(), up.data());
    let again = lrp_passthrough(&net, &trace, 0, &lower).unwrap();
    assert_eq!(again.sum(), up.sum());
    assert!(lrp_passthrough(&net, &trace, 2, &row(&[1.0])).is_err());
}

#[test]
fn stacked_identities_return_head_relevance() {
    let mut net = Network::mlp(3, &[3], &[(HeadId::new("h"), 3)]).unwrap();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    set(&mut net, ParamKey::weight(0), &eye);
    set(&mut net, head_key(2), &eye);
    let x = row(&[0.5, 1.5, 2.5]);
    let map = attribute(&net, &x, &HeadId::new("h"), &[1], &LrpRules::with_epsilon(0.0)).unwrap();
    assert_eq!(map.input.data(), &[0.0, 1.5, 0.0]);
    assert_eq!(map.layers.len(), 3);
}

#[test]
fn shape_mismatch_is_rejected() {
    let net = two_by_two();
    let (_, trace) = net.forward(&row(&[1.0, 2.0]), &HeadId::new("h")).unwrap();
    assert!(matches!(
        lrp_epsilon_dense(&net, &trace, 0, &row(&[1.0, 2.0, 3.0]), 0.0),
        Err(Error::Dimension { .. })
    ));
}

/// Per-sample loop implementation of the ε-rule, written independently of
/// the batched kernel.
fn oracle_epsilon(a: &[f64], w: &[f64], bias: &[f64], r: &[f64], eps: f64) -> Vec<f64> {
    let (n_in, n_out) = (a.len(), r.len());
    let mut out = vec![0.0; n_in];
    for k in 0..n_out {
        let mut z = bias[k];
        for j in 0..n_in {
            z += a[j] * w[j * n_out + k];
        }
        let d = if z >= 0.0 { z + eps } else { z - eps };
        for j in 0..n_in {
            out[j] += a[j] * w[j * n_out + k] / d * r[k];
        }
    }
    out
}

fn random_mlp(rng: &mut ChaCha8Rng, dims: &[usize], zero_bias: bool) -> Network {
    let (first, rest) = dims.split_first().unwrap();
    let (last, hidden) = rest.split_last().unwrap();
    let mut net = Network::mlp(*first, hidden, &[(HeadId::new("h"), *last)]).unwrap();
    net.init_uniform(rng);
    if zero_bias {
        for k in net.param_keys() {
            if matches!(k.name, ParamName::Bias | ParamName::HeadBias(_)) {
                net.param_mut(&k).unwrap().data_mut().fill(0.0);
            }
        }
    }
    net
}

#[test]
fn epsilon_matches_oracle_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = random_mlp(&mut rng, &[5, 6, 3], false);
    let x = Tensor::new(vec![4, 5], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (logits, trace) = net.forward(&x, &HeadId::new("h")).unwrap();
    let r = init_relevance(&logits, &[0, 1, 2, 0]).unwrap();
    let eps = 0.01;
    let lower = lrp_epsilon_dense(&net, &trace, 2, &r, eps).unwrap();
    let w = net.param(&head_key(2)).unwrap().data();
    let b = net
        .param(&ParamKey {
            layer: 2,
            name: ParamName::HeadBias(0),
        })
        .unwrap()
        .data();
    for s in 0..4 {
        let want = oracle_epsilon(trace.inputs[2].row(s), w, b, r.row(s), eps);
        for (g, o) in lower.row(s).iter().zip(&want) {
            assert!(close(*g, *o, 1e-12), "{g} vs {o}");
        }
    }
}

fn positive_conv_net(rng: &mut ChaCha8Rng) -> Network {
    let mut net = Network::new(
        &[2, 6, 5],
        vec![
            LayerSpec::Conv2d(Conv2dSpec {
                in_channels: 2,
                out_channels: 3,
                kernel_h: 3,
                kernel_w: 2,
                stride: 1,
                padding: 1,
            }),
            LayerSpec::Relu,
            LayerSpec::Conv2d(Conv2dSpec {
                in_channels: 3,
                out_channels: 2,
                kernel_h: 2,
                kernel_w: 2,
                stride: 2,
                padding: 0,
            }),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(2 * 3 * 3, 4),
            LayerSpec::Relu,
            LayerSpec::heads(4, [(HeadId::new("h"), 3)]),
        ],
    )
    .unwrap();
    for k in net.param_keys() {
        let t = net.param_mut(&k).unwrap();
        let bias = matches!(k.name, ParamName::Bias | ParamName::HeadBias(_));
        for v in t.data_mut() {
            *v = if bias { 0.0 } else { rng.random_range(0.05..1.0) };
        }
    }
    net
}

#[test]
fn conv_zplus_conserves_on_positive_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = positive_conv_net(&mut rng);
    let x = Tensor::new(vec![2, 2, 6, 5], (0..120).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
    let map = attribute(&net, &x, &HeadId::new("h"), &[0, 2], &LrpRules::with_epsilon(0.0)).unwrap();
    assert_eq!(map.dropped, 0);
    let sums = map.layer_sums();
    for s in &sums {
        assert!(close(*s, sums[0], 1e-9), "{sums:?}");
    }
    assert!(map.input.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn conv_epsilon_rule_conserves_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = positive_conv_net(&mut rng);
    let x = Tensor::new(vec![1, 2, 6, 5], (0..60).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
    let rules = LrpRules {
        dense: Rule::Epsilon { epsilon: 0.0 },
        conv: Rule::Epsilon { epsilon: 0.0 },
    };
    let map = attribute(&net, &x, &HeadId::new("h"), &[1], &rules).unwrap();
    let sums = map.layer_sums();
    for s in &sums {
        assert!(close(*s, sums[0], 1e-9), "{sums:?}");
    }
}

#[test]
fn attribute_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = positive_conv_net(&mut rng);
    let x = Tensor::new(vec![3, 2, 6, 5], (0..180).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let a = attribute(&net, &x, &HeadId::new("h"), &[0, 1, 2], &LrpRules::default()).unwrap();
    let b = attribute(&net, &x, &HeadId::new("h"), &[0, 1, 2], &LrpRules::default()).unwrap();
    assert!(a.input.bit_eq(&b.input));
    for (p, q) in a.layers.iter().zip(&b.layers) {
        assert!(p.bit_eq(q));
    }
}

#[test]
fn importance_of_disconnected_unit_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = random_mlp(&mut rng, &[4, 5, 3], false);
    // unit 2 of the hidden layer feeds nothing
    let w = net.param_mut(&head_key(2)).unwrap();
    for k in 0..3 {
        w.data_mut()[2 * 3 + k] = 0.0;
    }
    let x = Tensor::new(vec![6, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let report = unit_importance(&net, &x, &[0, 1, 2, 0, 1, 2], &HeadId::new("h"), &ImportanceConfig::default(), 0).unwrap();
    assert_eq!(report.score(UnitId::new(0, 2)), Some(0.0));
    assert_eq!(report.scores.len(), 5);
    assert_eq!(report.reference_sample_count, 6);
    assert!(report.scores.values().all(|s| s.is_finite() && *s >= 0.0));
}

#[test]
fn duplicated_units_score_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = random_mlp(&mut rng, &[3, 4, 2], false);
    let w0 = net.param(&ParamKey::weight(0)).unwrap().clone();
    let b0 = net.param(&ParamKey::bias(0)).unwrap().clone();
    let wh = net.param(&head_key(2)).unwrap().clone();
    {
        let w = net.param_mut(&ParamKey::weight(0)).unwrap();
        for j in 0..3 {
            w.data_mut()[j * 4 + 1] = w0.data()[j * 4];
        }
    }
    net.param_mut(&ParamKey::bias(0)).unwrap().data_mut()[1] = b0.data()[0];
    {
        let w = net.param_mut(&head_key(2)).unwrap();
        for k in 0..2 {
            w.data_mut()[2 + k] = wh.data()[k];
        }
    }
    let x = Tensor::new(vec![5, 3], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let report = unit_importance(&net, &x, &[0, 1, 0, 1, 1], &HeadId::new("h"), &ImportanceConfig::default(), 0).unwrap();
    assert_eq!(report.score(UnitId::new(0, 0)), report.score(UnitId::new(0, 1)));
}

#[test]
fn single_sample_importance_is_positive_hidden_relevance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = random_mlp(&mut rng, &[4, 6, 3], false);
    let x = row(&[0.3, -0.7, 0.9, 0.1]);
    let cfg = ImportanceConfig::default();
    let report = unit_importance(&net, &x, &[1], &HeadId::new("h"), &cfg, 0).unwrap();
    let map = attribute(&net, &x, &HeadId::new("h"), &[1], &cfg.rules).unwrap();
    for u in 0..6 {
        assert_eq!(report.score(UnitId::new(0, u)), Some(map.layers[0].data()[u].max(0.0)));
    }
    let signed = ImportanceConfig {
        aggregation: Aggregation::Signed,
        ..cfg
    };
    let report = unit_importance(&net, &x, &[1], &HeadId::new("h"), &signed, 0).unwrap();
    for u in 0..6 {
        assert_eq!(report.score(UnitId::new(0, u)), Some(map.layers[0].data()[u]));
    }
}

#[test]
fn empty_reference_is_rejected() {
    let net = two_by_two();
    let x = row(&[1.0, 2.0]);
    assert!(matches!(
        unit_importance(&net, &x, &[], &HeadId::new("h"), &ImportanceConfig::default(), 0),
        Err(Error::EmptyReference)
    ));
}

#[test]
fn predicted_seed_uses_argmax() {
    let net = two_by_two();
    let x = row(&[1.0, 2.0]);
    let cfg = ImportanceConfig {
        seed: SeedClass::Predicted,
        ..ImportanceConfig::default()
    };
    // logits [4, 1]: predicted class 0 regardless of the label
    let a = unit_importance(&net, &x, &[1], &HeadId::new("h"), &cfg, 0).unwrap();
    assert!(a.scores.is_empty());
    let m = attribute(&net, &x, &HeadId::new("h"), &[0], &cfg.rules).unwrap();
    assert!((m.input.sum() - 4.0).abs() < 1e-5);
}

#[test]
fn ranking_is_scale_covariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = random_mlp(&mut rng, &[6, 8, 7, 3], true);
    let x = Tensor::new(vec![8, 6], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels = [0, 1, 2, 0, 1, 2, 0, 1];
    let cfg = ImportanceConfig {
        rules: LrpRules::with_epsilon(0.0),
        ..ImportanceConfig::default()
    };
    let order = |scale: f64| {
        let xs = x.map(|v| v * scale);
        let r = unit_importance(&net, &xs, &labels, &HeadId::new("h"), &cfg, 0).unwrap();
        let mut units: Vec<(UnitId, f64)> = r.scores.into_iter().collect();
        units.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        units.into_iter().map(|(u, _)| u).collect::<Vec<_>>()
    };
    assert_eq!(order(1.0), order(3.5));
    assert_eq!(order(1.0), order(0.25));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mlp_conserves_relevance(seed in any::<u64>(), h1 in 1usize..12, h2 in 1usize..12, n_in in 1usize..10, out in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_mlp(&mut rng, &[n_in, h1, h2, out], true);
        let x = Tensor::new(vec![2, n_in], (0..2 * n_in).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let targets = [rng.random_range(0..out), rng.random_range(0..out)];
        let map = match attribute(&net, &x, &HeadId::new("h"), &targets, &LrpRules::with_epsilon(0.0)) {
            Ok(m) => m,
            // an exactly-zero pre-activation has measure zero, but is legal
            Err(Error::DegenerateDenominator { .. }) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let sums = map.layer_sums();
        for s in &sums {
            prop_assert!(close(*s, sums[0], 1e-9), "{:?}", sums);
        }
    }

    #[test]
    fn epsilon_absorbs_on_positive_layers(seed in any::<u64>(), eps in 1e-6f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new(&[4], vec![LayerSpec::heads(4, [(HeadId::new("h"), 3)])]).unwrap();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        set(&mut net, head_key(0), &w);
        let x = row(&(0..4).map(|_| rng.random_range(0.1..1.0)).collect::<Vec<_>>());
        let (_, trace) = net.forward(&x, &HeadId::new("h")).unwrap();
        let up = row(&(0..3).map(|_| rng.random_range(0.0..2.0)).collect::<Vec<_>>());
        let lower = lrp_epsilon_dense(&net, &trace, 0, &up, eps).unwrap();
        prop_assert!(lower.sum().abs() <= up.sum().abs() * (1.0 + 1e-12));
    }

    #[test]
    fn zplus_keeps_sign(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new(&[5], vec![LayerSpec::heads(5, [(HeadId::new("h"), 4)])]).unwrap();
        net.init_uniform(&mut rng);
        let x = row(&(0..5).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>());
        let (_, trace) = net.forward(&x, &HeadId::new("h")).unwrap();
        let up = row(&(0..4).map(|_| rng.random_range(0.0..3.0)).collect::<Vec<_>>());
        let (lower, dropped) = lrp_zplus(&net, &trace, 0, &up).unwrap();
        prop_assert!(lower.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
        if dropped == 0 {
            prop_assert!(close(lower.sum(), up.sum(), 1e-9));
        }
    }
}
