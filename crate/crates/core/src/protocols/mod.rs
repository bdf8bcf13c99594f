//! Task-incremental streams and the sequential training loop.

mod metrics;
mod train;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::HeadId;
use crate::tensor::Tensor;

pub use metrics::{MetricRow, RunMetrics};
pub use train::{
    evaluate, run_joint_upper_bound, run_sequential, softmax_cross_entropy, train_task, Method, RunOutcome, TbeConfig,
    TrainConfig,
};

/// Independent RNG streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum RngStream {
    Init = 1,
    Shuffle = 2,
    Reference = 3,
    Permutation = 4,
    ClassOrder = 5,
    Validation = 6,
}

pub fn rng_for(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub index: usize,
    pub head: HeadId,
    /// Original labels; a label's position is its head-local class.
    pub classes: Vec<usize>,
    /// Output position `p` takes input position `permutation[p]`.
    pub permutation: Option<Vec<usize>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Held-out training indices used instead of `test` to plan freezing.
    pub validation: Vec<usize>,
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn local_label(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    /// Samples `indices` of `data` as this task sees them: permuted, shaped
    /// `[n, ...input_shape]`, with head-local labels.
    pub fn gather(&self, data: &Dataset, indices: &[usize], input_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let dim = data.images.row_len();
        if input_shape.iter().product::<usize>() != dim {
            return Err(Error::Dimension {
                layer: 0,
                expected: input_shape.to_vec(),
                actual: data.sample_shape().to_vec(),
            });
        }
        let mut x = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = data.sample(i);
            match &self.permutation {
                Some(p) => x.extend(p.iter().map(|&j| s[j])),
                None => x.extend_from_slice(s),
            }
            let l = data.labels[i];
            labels.push(self.local_label(l).ok_or_else(|| {
                Error::Validation(format!("label {l} of sample {i} is not in task {}", self.index))
            })?);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(input_shape);
        Ok((Tensor::new(shape, x)?, labels))
    }

    fn validate(&self, train: &Dataset) -> Result<()> {
        let uniq: BTreeSet<_> = self.classes.iter().collect();
        if self.classes.is_empty() || uniq.len() != self.classes.len() {
            return Err(Error::Config(format!("task {} has empty or repeated classes", self.index)));
        }
        if let Some(p) = &self.permutation {
            let mut seen = vec![false; p.len()];
            if p.len() != train.images.row_len() || p.iter().any(|&j| j >= p.len() || std::mem::replace(&mut seen[j], true)) {
                return Err(Error::Config(format!("task {} permutation is not a bijection", self.index)));
            }
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::InsufficientSamples(format!("task {} has no train or test samples", self.index)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub protocol: String,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn heads(&self) -> Vec<(HeadId, usize)> {
        self.tasks.iter().map(|t| (t.head.clone(), t.num_classes())).collect()
    }

    /// Moves a stratified `fraction` of every task's training indices into
    /// its validation set.
    pub fn with_validation(mut self, train: &Dataset, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction {fraction} outside (0, 1)")));
        }
        let mut rng = rng_for(self.seed, RngStream::Validation);
        for t in &mut self.tasks {
            let mut held = Vec::new();
            for c in &t.classes {
                let idx: Vec<usize> = t.train.iter().copied().filter(|&i| train.labels[i] == *c).collect();
                let n = ((idx.len() as f64) * fraction).round() as usize;
                held.extend(rand::seq::index::sample(&mut rng, idx.len(), n).into_iter().map(|j| idx[j]));
            }
            let held_set: BTreeSet<usize> = held.iter().copied().collect();
            t.train.retain(|i| !held_set.contains(i));
            t.validation = held_set.into_iter().collect();
        }
        Ok(self)
    }
}

fn indices_of(data: &Dataset, classes: &[usize]) -> Vec<usize> {
    let mut wanted = vec![false; data.num_classes];
    for &c in classes {
        wanted[c] = true;
    }
    (0..data.len()).filter(|&i| wanted[data.labels[i]]).collect()
}

fn class_task(index: usize, classes: Vec<usize>, train: &Dataset, test: &Dataset) -> Result<TaskSpec> {
    if let Some(&c) = classes.iter().find(|&&c| c >= train.num_classes) {
        return Err(Error::Config(format!("class {c} outside 0..{}", train.num_classes)));
    }
    let t = TaskSpec {
        index,
        head: HeadId::for_task(index),
        train: indices_of(train, &classes),
        test: indices_of(test, &classes),
        classes,
        permutation: None,
        validation: Vec::new(),
    };
    t.validate(train)?;
    Ok(t)
}

/// Five two-digit tasks: task `i` holds digits `2i` and `2i + 1`.
pub fn make_mnist_split(train: &Dataset, test: &Dataset, seed: u64) -> Result<TaskStream> {
    let tasks = (0..5)
        .map(|i| class_task(i, vec![2 * i, 2 * i + 1], train, test))
        .collect::<Result<_>>()?;
    Ok(TaskStream {
        protocol: "mnist-split".into(),
        seed,
        tasks,
    })
}

/// `n_tasks` ten-class tasks; task 0 sees unpermuted pixels, every later
/// task a fixed random pixel permutation drawn from `seed`.
pub fn make_mnist_permuted(train: &Dataset, test: &Dataset, n_tasks: usize, seed: u64) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(Error::Config("a permuted stream needs at least one task".into()));
    }
    let dim = train.images.row_len();
    let mut rng = rng_for(seed, RngStream::Permutation);
    let mut tasks = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let mut perm: Vec<usize> = (0..dim).collect();
        if i > 0 {
            perm.shuffle(&mut rng);
        }
        let t = TaskSpec {
            index: i,
            head: HeadId::for_task(i),
            classes: (0..train.num_classes).collect(),
            permutation: Some(perm),
            train: (0..train.len()).collect(),
            test: (0..test.len()).collect(),
            validation: Vec::new(),
        };
        t.validate(train)?;
        tasks.push(t);
    }
    Ok(TaskStream {
        protocol: "mnist-permuted".into(),
        seed,
        tasks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassSplit {
    /// Shuffle the classes by seed, then cut into equal tasks.
    Random { n_tasks: usize },
    /// Explicit groups; must partition the label set.
    Semantic { groups: Vec<Vec<usize>> },
}

pub fn make_class_split(train: &Dataset, test: &Dataset, split: &ClassSplit, seed: u64) -> Result<TaskStream> {
    let n = train.num_classes;
    let groups = match split {
        ClassSplit::Random { n_tasks } => {
            if *n_tasks == 0 || !n.is_multiple_of(*n_tasks) {
                return Err(Error::Config(format!("{n_tasks} tasks do not divide {n} classes")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_for(seed, RngStream::ClassOrder));
            order.chunks(n / n_tasks).map(<[usize]>::to_vec).collect::<Vec<_>>()
        }
        ClassSplit::Semantic { groups } => {
            let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
            all.sort_unstable();
            if all != (0..n).collect::<Vec<_>>() {
                return Err(Error::Config(format!("class groups do not partition 0..{n}")));
            }
            groups.clone()
        }
    };
    let tasks = groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| class_task(i, g, train, test))
        .collect::<Result<_>>()?;
    Ok(TaskStream {
        protocol: "class-split".into(),
        seed,
        tasks,
    })
}

#[cfg(test)]
mod tests;
