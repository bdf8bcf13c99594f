//! CIFAR binary batches: label byte(s) followed by 3072 pixel bytes
//! (1024 red, 1024 green, 1024 blue, row-major 32x32).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarVariant {
    /// One label byte, 10 classes.
    Cifar10,
    /// Coarse then fine label byte; the fine label (100 classes) is used.
    Cifar100Fine,
    /// Coarse label (20 superclasses).
    Cifar100Coarse,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            _ => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100Fine => 100,
            CifarVariant::Cifar100Coarse => 20,
        }
    }
}

pub fn parse_cifar(bytes: &[u8], origin: &Path, variant: CifarVariant) -> Result<(Vec<f64>, Vec<usize>)> {
    let record = variant.label_bytes() + PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        let whole = bytes.len() / record * record;
        return Err(Error::Format {
            path: origin.to_path_buf(),
            offset: whole as u64,
            message: format!(
                "expected a multiple of {record} bytes, found {} ({} trailing)",
                bytes.len(),
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = usize::from(match variant {
            CifarVariant::Cifar100Fine => rec[1],
            _ => rec[0],
        });
        if label >= variant.num_classes() {
            return Err(Error::Validation(format!(
                "{}: label {label} in record {i} is outside 0..{}",
                origin.display(),
                variant.num_classes()
            )));
        }
        labels.push(label);
        pixels.extend(rec[variant.label_bytes()..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((pixels, labels))
}

/// Concatenates batch files into one `[N, 3, 32, 32]` dataset scaled to `[0, 1]`.
pub fn load_cifar_batches(paths: &[PathBuf], variant: CifarVariant, split: Split) -> Result<Dataset> {
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DatasetMissing(format!("{} not found", p.display())),
            _ => Error::Io(e),
        })?;
        let (px, lb) = parse_cifar(&bytes, p, variant)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    if labels.is_empty() {
        return Err(Error::DatasetMissing("no CIFAR batch files given".into()));
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, variant.num_classes(), split)
}
