//! Gaussian blobs for fast, deterministic experiments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class means for `n_classes` blobs in `dim` dimensions, pairwise at least
/// `separation` apart.
///
/// With enough dimensions class `c` sits at `separation / sqrt(2) * e_c`, so
/// every pair is exactly `separation` apart. Otherwise the means are spaced
/// `separation` apart along the first axis.
pub fn class_means(n_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if n_classes <= dim {
                m[c] = separation / std::f64::consts::SQRT_2;
            } else {
                m[0] = separation * c as f64;
            }
            m
        })
        .collect()
}

/// `n_per_class` unit-covariance samples around each class mean, shuffled.
pub fn make_synthetic(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if n_classes == 0 || n_per_class == 0 || dim == 0 {
        return Err(Error::Config("synthetic dataset needs classes, samples and dimensions".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation {separation} must be finite and non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(n_classes, dim, separation);
    let mut order: Vec<usize> = (0..n_classes * n_per_class).map(|i| i / n_per_class).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(order.len() * dim);
    for &c in &order {
        for m in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + z);
        }
    }
    Dataset::new(Tensor::new(vec![order.len(), dim], data)?, order, n_classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_by_seed() {
        let a = make_synthetic(3, 20, 4, 5.0, 9, Split::Train).unwrap();
        let b = make_synthetic(3, 20, 4, 5.0, 9, Split::Train).unwrap();
        let c = make_synthetic(3, 20, 4, 5.0, 10, Split::Train).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        assert!(!a.images.bit_eq(&c.images));
        assert_eq!(a.images.shape(), &[60, 4]);
        for k in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 20);
        }
    }

    #[test]
    fn means_are_separated() {
        for (n, d) in [(3, 5), (4, 2)] {
            let m = class_means(n, d, 10.0);
            for i in 0..n {
                for j in i + 1..n {
                    let dist: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    assert!(dist >= 10.0 - 1e-9, "{dist}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_synthetic(0, 1, 1, 1.0, 0, Split::Train).is_err());
        assert!(make_synthetic(2, 1, 1, -1.0, 0, Split::Train).is_err());
        assert!(make_synthetic(2, 1, 1, f64::NAN, 0, Split::Train).is_err());
    }
}
