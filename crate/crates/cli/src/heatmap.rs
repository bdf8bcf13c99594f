use std::path::{Path, PathBuf};

use anyhow::Context;
use tbe_core::experiment::{DATA_DIR_ENV, DEFAULT_DATA_DIR};
use tbe_core::lrp::heatmap::{collapse_channels, write_heatmap};
use tbe_core::lrp::{attribute, LrpRules};
use tbe_core::{Checkpoint, HeadId, Tensor};

use crate::Usage;

#[derive(clap::Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["index", "image"])))]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index into the MNIST test set.
    #[arg(long)]
    index: Option<usize>,
    /// Grayscale PGM image (P2 or P5).
    #[arg(long)]
    image: Option<PathBuf>,
    /// MNIST directory for `--index`; defaults to $TBE_DATA_DIR, then data/mnist.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "task0")]
    head: String,
    /// Output unit of the head to explain; defaults to the predicted one.
    #[arg(long)]
    target: Option<usize>,
    /// Stabilizer of the dense-layer rule. Zero gives the plain rule and
    /// surfaces degenerate denominators as errors.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value = "heatmaps")]
    out_dir: PathBuf,
}

fn metadata_f64(ckpt: &Checkpoint, key: &str) -> anyhow::Result<Option<f64>> {
    ckpt.metadata
        .get(key)
        .map(|v| v.parse::<f64>().with_context(|| format!("checkpoint metadata {key}={v:?}")))
        .transpose()
}

/// Reads a PGM as `[height, width]` values in [0, 1].
fn read_pgm(path: &Path) -> anyhow::Result<(Vec<f64>, usize, usize)> {
    let img = image::ImageReader::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?
        .with_guessed_format()?
        .decode()
        .map_err(|e| Usage(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect(), h as usize, w as usize))
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let net = &ckpt.network;
    let head = HeadId::new(args.head.as_str());
    let out_dim = net.head_specs()[net.head_index(&head)?].out_dim;

    let (pixels, h, w, stem) = match (&args.image, args.index) {
        (Some(path), _) => {
            let (raw, h, w) = read_pgm(path)?;
            let pixels = match (metadata_f64(&ckpt, "normalization_mean")?, metadata_f64(&ckpt, "normalization_std")?) {
                (Some(m), Some(s)) => raw.iter().map(|v| (v - m) / s).collect(),
                _ => raw,
            };
            let name = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            (pixels, h, w, name)
        }
        (None, Some(i)) => {
            let dir = args
                .data_dir
                .clone()
                .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
            let (_, test) = tbe_core::data::load_mnist(&dir)?;
            if i >= test.len() {
                return Err(Usage(format!("index {i} out of range for {} test images", test.len())).into());
            }
            let shape = test.sample_shape();
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            println!("test image {i}: label {}", test.labels[i]);
            (test.sample(i).to_vec(), h, w, format!("test{i}"))
        }
        (None, None) => unreachable!("clap requires one input"),
    };

    let expected: usize = net.input_shape().iter().product();
    if pixels.len() != expected {
        return Err(Usage(format!(
            "input has {} values, network expects {:?}",
            pixels.len(),
            net.input_shape()
        ))
        .into());
    }
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    let x = Tensor::new(shape, pixels)?;
    let logits = net.predict(&x, &head)?;
    let predicted = logits
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .expect("heads have outputs");
    let target = args.target.unwrap_or(predicted);
    if target >= out_dim {
        return Err(Usage(format!("target {target} out of range for head {head} with {out_dim} outputs")).into());
    }

    let rel = attribute(net, &x, &head, &[target], &LrpRules::with_epsilon(args.epsilon))?;
    let channels = expected / (h * w);
    let plane = collapse_channels(rel.input.data(), channels);
    let stem = format!("{stem}_{head}_target{target}");
    write_heatmap(&args.out_dir, &stem, &plane, h, w)?;
    println!("predicted {predicted}, explained {target}, input relevance {:.6}", plane.iter().sum::<f64>());
    println!("wrote {}", args.out_dir.join(format!("{stem}.{{ppm,csv}}")).display());
    Ok(())
}
