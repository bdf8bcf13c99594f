//! Binary network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 8            | magic `TBECKPT\0`                                    |
//! | 4            | format version, `u32` (currently 1)                  |
//! | 8            | header length `H`, `u64`                             |
//! | `H`          | UTF-8 JSON header (see [`Header`])                   |
//! | rest         | parameter blobs, `f64` LE, in header `params` order  |
//!
//! Parameters are stored as raw IEEE-754 bits, so a save/load cycle is
//! bit-exact. The freeze state and free-form metadata ride in the header.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network, ParamKey};
use crate::error::{Error, Result};
use crate::optim::FreezeState;

pub const MAGIC: &[u8; 8] = b"TBECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<ParamEntry>,
    freeze: Option<FreezeState>,
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    key: ParamKey,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub freeze: Option<FreezeState>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            freeze: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let net = &self.network;
        let keys = net.param_keys();
        let header = Header {
            input_shape: net.input_shape().to_vec(),
            layers: net.specs().to_vec(),
            params: keys
                .iter()
                .map(|k| ParamEntry {
                    key: *k,
                    shape: net.param(k).expect("listed key").shape().to_vec(),
                })
                .collect(),
            freeze: self.freeze.clone(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for k in &keys {
            for v in net.param(k).expect("listed key").data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, origin: &Path) -> Result<Self> {
        let mut offset = 0u64;
        let fail = |offset: u64, message: String| Error::Format {
            path: origin.to_path_buf(),
            offset,
            message,
        };
        let mut read_exact = |buf: &mut [u8], offset: &mut u64| -> Result<()> {
            r.read_exact(buf)
                .map_err(|e| fail(*offset, format!("truncated checkpoint: {e}")))?;
            *offset += buf.len() as u64;
            Ok(())
        };
        let mut magic = [0u8; 8];
        read_exact(&mut magic, &mut offset)?;
        if &magic != MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        read_exact(&mut u32buf, &mut offset)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(fail(8, format!("unsupported format version {version}")));
        }
        let mut u64buf = [0u8; 8];
        read_exact(&mut u64buf, &mut offset)?;
        let len = u64::from_le_bytes(u64buf);
        if len > 1 << 30 {
            return Err(fail(12, format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        read_exact(&mut json, &mut offset)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| fail(20, format!("bad header: {e}")))?;
        let mut network = Network::new(&header.input_shape, header.layers)?;
        if header.params.len() != network.param_keys().len() {
            return Err(fail(20, "parameter list does not match layers".into()));
        }
        let mut buf = [0u8; 8];
        for entry in &header.params {
            let t = network
                .param_mut(&entry.key)
                .ok_or_else(|| fail(20, format!("unknown parameter {}", entry.key)))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(fail(20, format!("shape mismatch for {}", entry.key)));
            }
            for v in t.data_mut() {
                read_exact(&mut buf, &mut offset)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if r.read(&mut buf)? != 0 {
            return Err(fail(offset, "trailing bytes".into()));
        }
        if let Some(f) = &header.freeze {
            f.check_covers(&network)?;
        }
        Ok(Self {
            network,
            freeze: header.freeze,
            metadata: header.metadata,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?), path)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::net::{Conv2dSpec, HeadId, UnitId};

    fn net() -> Network {
        let mut n = Network::new(
            &[1, 4, 4],
            vec![
                LayerSpec::Conv2d(Conv2dSpec {
                    in_channels: 1,
                    out_channels: 2,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: 1,
                }),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(32, 5),
                LayerSpec::Relu,
                LayerSpec::heads(5, [(HeadId::new("a"), 2), (HeadId::new("b"), 3)]),
            ],
        )
        .unwrap();
        n.init_uniform(&mut ChaCha8Rng::seed_from_u64(42));
        n
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let network = net();
        let mut freeze = FreezeState::new(&network);
        freeze.set(UnitId::new(3, 1), 0.0, Some(0)).unwrap();
        let mut ckpt = Checkpoint::new(network.clone());
        ckpt.freeze = Some(freeze.clone());
        ckpt.metadata.insert("norm_mean".into(), "0.1307".into());
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice(), Path::new("mem")).unwrap();
        assert!(back.network.params_bit_eq(&network.snapshot()));
        assert_eq!(back.network.specs(), network.specs());
        assert_eq!(back.freeze, Some(freeze));
        assert_eq!(back.metadata["norm_mean"], "0.1307");
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        Checkpoint::new(net()).write_to(&mut bytes).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        let err = Checkpoint::read_from(truncated, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice(), Path::new("mem")).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::read_from(long.as_slice(), Path::new("mem")).is_err());
    }
}
