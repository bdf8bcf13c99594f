use super::*;
use crate::data::{make_synthetic, Split};
use crate::net::Network;
use crate::optim::{AdamConfig, AdamState, FreezeState};

fn blobs(classes: usize, per_class: usize, dim: usize, sep: f64, seed: u64) -> (Dataset, Dataset) {
    (
        make_synthetic(classes, per_class, dim, sep, seed, Split::Train).unwrap(),
        make_synthetic(classes, per_class / 2, dim, sep, seed + 1, Split::Test).unwrap(),
    )
}

#[test]
fn mnist_split_digit_pairs() {
    let (train, test) = blobs(10, 20, 4, 3.0, 0);
    let s = make_mnist_split(&train, &test, 0).unwrap();
    assert_eq!(s.tasks.len(), 5);
    assert_eq!(s.tasks[0].classes, vec![0, 1]);
    assert_eq!(s.tasks[1].classes, vec![2, 3]);
    let heads = s.heads();
    assert!(heads.iter().all(|(_, n)| *n == 2));
    let mut ids: Vec<_> = heads.iter().map(|(h, _)| h.clone()).collect();
    ids.dedup();
    assert_eq!(ids.len(), 5);
    for t in &s.tasks {
        assert_eq!(t.train.len(), 40);
        assert!(t.train.iter().all(|&i| t.classes.contains(&train.labels[i])));
    }
}

#[test]
fn permuted_stream_properties() {
    let (train, test) = blobs(10, 5, 12, 3.0, 0);
    let a = make_mnist_permuted(&train, &test, 4, 17).unwrap();
    let b = make_mnist_permuted(&train, &test, 4, 17).unwrap();
    assert_eq!(a, b);
    let p0 = a.tasks[0].permutation.as_ref().unwrap();
    assert_eq!(p0, &(0..12).collect::<Vec<_>>());
    let p1 = a.tasks[1].permutation.as_ref().unwrap();
    assert_ne!(p1, p0);
    assert_ne!(p1, a.tasks[2].permutation.as_ref().unwrap());
    let twice: Vec<usize> = p1.iter().map(|&j| p1[j]).collect();
    assert_ne!(&twice, p0);
    // pixel multiset is preserved, and normalization commutes with the permutation
    let (x, y) = a.tasks[1].gather(&train, &[3], &[12]).unwrap();
    assert_eq!(y, vec![train.labels[3]]);
    let mut got = x.data().to_vec();
    let mut want = train.sample(3).to_vec();
    got.sort_by(f64::total_cmp);
    want.sort_by(f64::total_cmp);
    assert_eq!(got, want);
    let norm = crate::data::Normalization { mean: 0.3, std: 2.0 };
    let mut normed = train.clone();
    normed.normalize(norm).unwrap();
    let (xn, _) = a.tasks[1].gather(&normed, &[3], &[12]).unwrap();
    let mapped: Vec<f64> = x.data().iter().map(|&v| norm.apply(v)).collect();
    assert_eq!(xn.data(), mapped.as_slice());
    assert_ne!(make_mnist_permuted(&train, &test, 2, 18).unwrap().tasks[1], a.tasks[1]);
    assert!(make_mnist_permuted(&train, &test, 0, 1).is_err());
}

#[test]
fn class_splits() {
    let (train, test) = blobs(100, 2, 2, 1.0, 0);
    let s = make_class_split(&train, &test, &ClassSplit::Random { n_tasks: 10 }, 3).unwrap();
    assert_eq!(s.tasks.len(), 10);
    assert!(s.tasks.iter().all(|t| t.classes.len() == 10));
    let mut all: Vec<usize> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert!(make_class_split(&train, &test, &ClassSplit::Random { n_tasks: 7 }, 3).is_err());

    let sizes = [20, 20, 15, 15, 10, 10, 10];
    let mut next = 0;
    let groups: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&n| {
            next += n;
            (next - n..next).collect()
        })
        .collect();
    let s = make_class_split(&train, &test, &ClassSplit::Semantic { groups: groups.clone() }, 0).unwrap();
    assert_eq!(s.tasks.iter().map(|t| t.classes.len()).collect::<Vec<_>>(), sizes);
    let mut broken = groups;
    broken[0].push(99);
    assert!(make_class_split(&train, &test, &ClassSplit::Semantic { groups: broken }, 0).is_err());
    let one = ClassSplit::Semantic {
        groups: vec![(0..100).collect()],
    };
    assert_eq!(make_class_split(&train, &test, &one, 0).unwrap().tasks.len(), 1);
}

#[test]
fn validation_split_moves_train_indices() {
    let (train, test) = blobs(10, 20, 4, 3.0, 0);
    let s = make_mnist_split(&train, &test, 0).unwrap().with_validation(&train, 0.25).unwrap();
    for t in &s.tasks {
        assert_eq!(t.validation.len(), 10);
        assert_eq!(t.train.len(), 30);
        assert!(t.validation.iter().all(|i| !t.train.contains(i)));
    }
}

#[test]
fn cross_entropy_values() {
    let logits = Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
    let (loss, grad) = softmax_cross_entropy(&logits, &[0, 0]).unwrap();
    assert!((loss - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
    assert_eq!(grad.data(), &[-0.25, 0.25, 0.0, 0.0]);
    assert!(softmax_cross_entropy(&logits, &[0, 2]).is_err());
}

#[test]
fn cross_entropy_gradient_matches_differences() {
    let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.5, 0.1, -0.4]]).unwrap();
    let labels = [2, 1];
    let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    let h = 1e-6;
    for i in 0..logits.len() {
        let mut up = logits.clone();
        up.data_mut()[i] += h;
        let mut dn = logits.clone();
        dn.data_mut()[i] -= h;
        let fd = (softmax_cross_entropy(&up, &labels).unwrap().0 - softmax_cross_entropy(&dn, &labels).unwrap().0) / (2.0 * h);
        assert!((fd - grad.data()[i]).abs() < 1e-8);
    }
}

fn linear_net(dim: usize, classes: usize) -> Network {
    let mut net = Network::mlp(dim, &[], &[(HeadId::for_task(0), classes)]).unwrap();
    net.init_uniform(&mut rng_for(0, RngStream::Init));
    net
}

fn single_task(train: &Dataset, test: &Dataset) -> TaskStream {
    let one = ClassSplit::Semantic {
        groups: vec![(0..train.num_classes).collect()],
    };
    make_class_split(train, test, &one, 0).unwrap()
}

#[test]
fn linear_layer_separates_blobs() {
    let (train, test) = blobs(3, 300, 2, 10.0, 4);
    let stream = single_task(&train, &test);
    let mut net = linear_net(2, 3);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 32,
        adam: AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
        reset_optimizer: true,
    };
    let mut adam = AdamState::new(cfg.adam);
    let freeze = FreezeState::new(&net);
    train_task(&mut net, &mut adam, &freeze, &train, &stream.tasks[0], &cfg, &mut rng_for(1, RngStream::Shuffle)).unwrap();
    let acc = evaluate(&net, &train, &stream.tasks[0], &stream.tasks[0].train).unwrap();
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn indistinguishable_blobs_stay_at_chance() {
    let (train, test) = blobs(2, 2000, 3, 0.0, 8);
    let stream = single_task(&train, &test);
    let mut net = linear_net(3, 2);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = run_sequential(&mut net, &stream, &train, &test, &Method::Baseline, &cfg, 0).unwrap();
    let acc = out.metrics.final_mean().unwrap();
    assert!((acc - 50.0).abs() <= 5.0, "{acc}");
}

#[test]
fn single_task_methods_agree() {
    let (train, test) = blobs(3, 60, 5, 4.0, 2);
    let stream = single_task(&train, &test);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let build = || {
        let mut n = Network::mlp(5, &[8], &stream.heads()).unwrap();
        n.init_uniform(&mut rng_for(5, RngStream::Init));
        n
    };
    let mut a = build();
    let mut b = build();
    let base = run_sequential(&mut a, &stream, &train, &test, &Method::Baseline, &cfg, 5).unwrap();
    let tbe = run_sequential(&mut b, &stream, &train, &test, &Method::Tbe(TbeConfig::default()), &cfg, 5).unwrap();
    assert_eq!(base.metrics.rows[0].accuracy, tbe.metrics.rows[0].accuracy);
    assert!(a.params_bit_eq(&b.snapshot()));
    assert_eq!(tbe.plans.len(), 1);
    assert!(tbe.metrics.rows[0].free_capacity <= 100.0);
}

#[test]
fn head_count_mismatch_is_rejected() {
    let (train, test) = blobs(10, 10, 4, 3.0, 0);
    let stream = make_mnist_split(&train, &test, 0).unwrap();
    let mut net = Network::mlp(4, &[3], &[(HeadId::for_task(0), 2)]).unwrap();
    assert!(run_sequential(&mut net, &stream, &train, &test, &Method::Baseline, &TrainConfig::default(), 0).is_err());
    let mut net = Network::mlp(4, &[3], &[(HeadId::for_task(0), 3)]).unwrap();
    let one = TaskStream {
        tasks: stream.tasks[..1].to_vec(),
        ..stream
    };
    assert!(run_sequential(&mut net, &one, &train, &test, &Method::Baseline, &TrainConfig::default(), 0).is_err());
}
