use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use sha2::{Digest, Sha256};
use tbe_core::data::idx::MNIST_FILES;

use crate::Usage;

const MNIST_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

/// SHA-256 of the uncompressed IDX files, in `MNIST_FILES` order.
const MNIST_SHA256: [&str; 4] = [
    "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
];

const MAX_DOWNLOAD: u64 = 64 << 20;

#[derive(clap::ValueEnum, Clone, Copy)]
pub enum DatasetName {
    Mnist,
}

#[derive(clap::Args)]
pub struct Args {
    dataset: DatasetName,
    #[arg(long)]
    out: PathBuf,
    /// Import from a local directory holding the IDX files, raw or `.gz`,
    /// instead of downloading.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Base URL serving `<file>.gz`.
    #[arg(long, default_value = MNIST_MIRROR)]
    mirror: String,
}

fn gunzip_if_needed(bytes: Vec<u8>) -> anyhow::Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(bytes.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn local(dir: &Path, name: &str) -> anyhow::Result<Vec<u8>> {
    for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
        if candidate.is_file() {
            return fs::read(&candidate).with_context(|| format!("reading {}", candidate.display()));
        }
    }
    Err(Usage(format!("neither {name} nor {name}.gz found in {}", dir.display())).into())
}

fn download(mirror: &str, name: &str) -> anyhow::Result<Vec<u8>> {
    let url = format!("{}/{name}.gz", mirror.trim_end_matches('/'));
    log::info!("downloading {url}");
    let mut resp = ureq::get(&url).call().with_context(|| format!("GET {url}"))?;
    let bytes = resp
        .body_mut()
        .with_config()
        .limit(MAX_DOWNLOAD)
        .read_to_vec()
        .with_context(|| format!("reading {url}"))?;
    Ok(bytes)
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let DatasetName::Mnist = args.dataset;
    fs::create_dir_all(&args.out)?;
    for (name, want) in MNIST_FILES.iter().zip(MNIST_SHA256) {
        let target = args.out.join(name);
        if target.is_file() && sha256_hex(&fs::read(&target)?) == want {
            println!("{name}: present, checksum ok");
            continue;
        }
        let raw = match &args.from {
            Some(dir) => local(dir, name)?,
            None => download(&args.mirror, name)?,
        };
        let bytes = gunzip_if_needed(raw)?;
        let got = sha256_hex(&bytes);
        if got != want {
            bail!("{name}: checksum mismatch, expected {want}, got {got}");
        }
        let tmp = args.out.join(format!("{name}.partial"));
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, &target)?;
        println!("{name}: written, checksum ok");
    }
    println!("MNIST ready in {}", args.out.display());
    Ok(())
}
