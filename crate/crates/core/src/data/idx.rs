//! IDX files as distributed for MNIST (big-endian header, unsigned bytes).

use std::path::Path;

use super::{Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Splits an IDX byte buffer into dimensions and payload.
pub fn parse_idx<'a>(bytes: &'a [u8], origin: &Path, magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let fail = |offset: usize, message: String| Error::Format {
        path: origin.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| {
                fail(
                    at,
                    format!("truncated header: expected {} bytes, found {}", at + 4, bytes.len()),
                )
            })
    };
    let found = word(0)?;
    if found != magic {
        return Err(fail(0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndim).map(|d| word(4 + 4 * d).map(|v| v as usize)).collect::<Result<_>>()?;
    let start = 4 + 4 * ndim;
    let expected = start + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok((dims, &bytes[start..]))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DatasetMissing(format!("{} not found", path.display())),
        _ => Error::Io(e),
    })
}

/// Images scaled to `[0, 1]`, shaped `[N, 1, H, W]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let (dims, payload) = parse_idx(&bytes, path, IMAGES_MAGIC)?;
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)
}

pub fn read_idx_labels(path: &Path, num_classes: usize) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    let (_, payload) = parse_idx(&bytes, path, LABELS_MAGIC)?;
    payload
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if usize::from(b) < num_classes {
                Ok(usize::from(b))
            } else {
                Err(Error::Validation(format!(
                    "{}: label {b} at index {i} is outside 0..{num_classes}",
                    path.display()
                )))
            }
        })
        .collect()
}

/// An image/label file pair, unnormalized.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize, split: Split) -> Result<Dataset> {
    Dataset::new(read_idx_images(images)?, read_idx_labels(labels, num_classes)?, num_classes, split)
}

/// MNIST train and test splits from `dir`, both standardized with the
/// global mean and standard deviation of the training pixels.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let missing: Vec<&str> = MNIST_FILES.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::DatasetMissing(format!(
            "MNIST files {missing:?} not found in {}; run `tbe fetch-data mnist --out {}` or point TBE_DATA_DIR at a directory holding the uncompressed IDX files",
            dir.display(),
            dir.display()
        )));
    }
    let mut train = load_idx(&dir.join(MNIST_FILES[0]), &dir.join(MNIST_FILES[1]), 10, Split::Train)?;
    let mut test = load_idx(&dir.join(MNIST_FILES[2]), &dir.join(MNIST_FILES[3]), 10, Split::Test)?;
    let norm = Normalization::fit(train.images.data())?;
    train.normalize(norm)?;
    test.normalize(norm)?;
    Ok((train, test))
}
