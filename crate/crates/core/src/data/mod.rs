//! Datasets, normalization and deterministic sampling.

pub mod cifar;
pub mod idx;
pub mod synthetic;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cifar::load_cifar_batches;
pub use idx::{load_idx, load_mnist, read_idx_images, read_idx_labels};
pub use synthetic::make_synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

/// `x' = (x - mean) / std`, applied to every input value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    /// Global mean and population standard deviation of all values.
    pub fn fit(data: &[f64]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Validation("cannot fit normalization to no data".into()));
        }
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std == 0.0 || !std.is_finite() {
            return Err(Error::Validation(format!("degenerate standard deviation {std}")));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Images stored as `[N, ...sample_shape]` with labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Validation(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {l} at index {i} is outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Standardizes in place. Fails if a normalization was already applied.
    pub fn normalize(&mut self, norm: Normalization) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::Validation("dataset is already normalized".into()));
        }
        self.images.data_mut().iter_mut().for_each(|v| *v = norm.apply(*v));
        self.normalization = Some(norm);
        Ok(())
    }

    /// Row indices per label, ascending.
    pub fn class_indices(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization,
        })
    }

    /// Splits off `fraction` of each class as a validation set, chosen by `seed`.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction {fraction} outside (0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut keep, mut held) = (Vec::new(), Vec::new());
        for idx in self.class_indices().into_values() {
            let n = ((idx.len() as f64) * fraction).round() as usize;
            let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, idx.len(), n)
                .into_iter()
                .map(|j| idx[j])
                .collect();
            chosen.sort_unstable();
            let mut c = chosen.iter().peekable();
            for &i in &idx {
                if c.peek() == Some(&&i) {
                    held.push(i);
                    c.next();
                } else {
                    keep.push(i);
                }
            }
        }
        keep.sort_unstable();
        held.sort_unstable();
        let train = self.subset(&keep)?;
        let mut val = self.subset(&held)?;
        val.split = Split::Validation;
        Ok((train, val))
    }

    /// Writes `label,x0,x1,...` rows with round-trip float formatting.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        let dim = self.images.row_len();
        let mut header = vec!["label".to_string()];
        header.extend((0..dim).map(|j| format!("x{j}")));
        csv.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.labels[i].to_string()];
            rec.extend(self.sample(i).iter().map(|v| format!("{v:?}")));
            csv.write_record(&rec)?;
        }
        csv.flush()?;
        Ok(())
    }

    /// Reads the format written by [`Dataset::write_csv`]; samples are flat.
    pub fn read_csv(r: impl Read, num_classes: usize, split: Split) -> Result<Self> {
        let mut csv = csv::Reader::from_reader(r);
        let (mut data, mut labels) = (Vec::new(), Vec::new());
        let mut dim = None;
        for rec in csv.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let parse_err = |what: &str| Error::Validation(format!("line {line}: bad {what}"));
            let mut fields = rec.iter();
            labels.push(
                fields
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err("label"))?,
            );
            let before = data.len();
            for f in fields {
                data.push(f.parse::<f64>().map_err(|_| parse_err("value"))?);
            }
            let d = data.len() - before;
            if *dim.get_or_insert(d) != d || d == 0 {
                return Err(parse_err("row width"));
            }
        }
        let dim = dim.ok_or_else(|| Error::Validation("empty dataset CSV".into()))?;
        Self::new(Tensor::new(vec![labels.len(), dim], data)?, labels, num_classes, split)
    }

    pub fn load_csv(path: &Path, num_classes: usize, split: Split) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, num_classes, split)
    }
}

/// Labelled sample indices used to score unit importance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceSet {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws exactly `per_class` samples of every class present in `pool`,
/// uniformly without replacement. Classes are visited in ascending order
/// with one RNG stream, so the result is a pure function of the inputs.
pub fn sample_reference(dataset: &Dataset, pool: &[usize], per_class: usize, seed: u64) -> Result<ReferenceSet> {
    if per_class == 0 || pool.is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        let l = *dataset.labels.get(i).ok_or(Error::Index {
            index: i,
            len: dataset.len(),
        })?;
        by_class.entry(l).or_default().push(i);
    }
    let short: Vec<String> = by_class
        .iter()
        .filter(|(_, v)| v.len() < per_class)
        .map(|(c, v)| format!("class {c} has {} < {per_class}", v.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::InsufficientSamples(short.join(", ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ReferenceSet {
        indices: Vec::new(),
        labels: Vec::new(),
    };
    for (c, idx) in by_class {
        for j in rand::seq::index::sample(&mut rng, idx.len(), per_class) {
            out.indices.push(idx[j]);
            out.labels.push(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toy() -> Dataset {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let images = Tensor::new(vec![30, 2], (0..60).map(f64::from).collect()).unwrap();
        Dataset::new(images, labels, 3, Split::Train).unwrap()
    }

    #[test]
    fn reference_counts() {
        let d = toy();
        let all: Vec<usize> = (0..30).collect();
        let r = sample_reference(&d, &all, 10, 1).unwrap();
        assert_eq!(r.len(), 30);
        let r = sample_reference(&d, &all, 1, 1).unwrap();
        assert_eq!(r.labels, vec![0, 1, 2]);
        let pool: Vec<usize> = all.iter().copied().filter(|i| d.labels[*i] < 2).collect();
        let r = sample_reference(&d, &pool, 10, 3).unwrap();
        assert_eq!(r.len(), 20);
    }

    #[test]
    fn reference_reports_deficient_classes() {
        let d = toy();
        let pool: Vec<usize> = (0..29).collect();
        match sample_reference(&d, &pool, 10, 0) {
            Err(Error::InsufficientSamples(msg)) => {
                assert!(msg.contains("class 2 has 9"), "{msg}");
                assert!(!msg.contains("class 0"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(sample_reference(&d, &[], 1, 0), Err(Error::EmptyReference)));
    }

    proptest! {
        #[test]
        fn reference_is_deterministic_and_balanced(seed in any::<u64>()) {
            let d = toy();
            let all: Vec<usize> = (0..30).collect();
            let a = sample_reference(&d, &all, 4, seed).unwrap();
            let b = sample_reference(&d, &all, 4, seed).unwrap();
            prop_assert_eq!(&a, &b);
            for c in 0..3 {
                prop_assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 4);
            }
            let mut uniq = a.indices.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), 12);
            for (&i, &l) in a.indices.iter().zip(&a.labels) {
                prop_assert_eq!(d.labels[i], l);
            }
        }
    }

    #[test]
    fn different_seeds_usually_differ() {
        let d = toy();
        let all: Vec<usize> = (0..30).collect();
        let first = sample_reference(&d, &all, 3, 0).unwrap();
        let distinct = (1..100)
            .filter(|&s| sample_reference(&d, &all, 3, s).unwrap() != first)
            .count();
        assert!(distinct > 90);
    }

    #[test]
    fn normalization_fit_and_apply() {
        let n = Normalization::fit(&[1.0, 3.0]).unwrap();
        assert_eq!((n.mean, n.std), (2.0, 1.0));
        assert_eq!(n.apply(4.0), 2.0);
        assert!(Normalization::fit(&[5.0, 5.0]).is_err());
        let mut d = toy();
        d.normalize(n).unwrap();
        assert!(d.normalize(n).is_err());
        assert_eq!(d.sample(0), &[-2.0, -1.0]);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let mut d = toy();
        d.images.data_mut()[3] = 0.1 + 0.2;
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), 3, Split::Train).unwrap();
        assert!(back.images.bit_eq(&d.images));
        assert_eq!(back.labels, d.labels);
        assert!(Dataset::read_csv("label,x0\n1,abc\n".as_bytes(), 3, Split::Train).is_err());
        assert!(Dataset::read_csv("label,x0\n3,1.0\n".as_bytes(), 3, Split::Train).is_err());
    }

    #[test]
    fn validation_split_is_stratified() {
        let d = toy();
        let (train, val) = d.split_validation(0.2, 5).unwrap();
        assert_eq!(train.len() + val.len(), 30);
        assert_eq!(val.len(), 6);
        assert_eq!(val.split, Split::Validation);
        for c in 0..3 {
            assert_eq!(val.labels.iter().filter(|&&l| l == c).count(), 2);
        }
    }

    #[test]
    fn mismatched_labels_rejected() {
        let images = Tensor::zeros(&[2, 1]);
        assert!(Dataset::new(images.clone(), vec![0], 2, Split::Test).is_err());
        assert!(Dataset::new(images, vec![0, 2], 2, Split::Test).is_err());
    }
}
