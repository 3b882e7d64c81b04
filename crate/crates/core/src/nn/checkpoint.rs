//! Checkpoint container: versioned header plus raw little-endian f32 blobs.
//!
//! Layout:
//!   bytes 0..4   magic `BACP`
//!   bytes 4..8   format version (u32 LE, currently 1)
//!   bytes 8..16  header length N (u64 LE)
//!   N bytes      JSON header: network spec, optimizer scalars, caller meta
//!   rest         f32 LE blobs: parameters, then Adam m and v when present
//!
//! Everything after the header is written in layer order, so a load followed
//! by a save reproduces the file byte for byte.

use super::{AdamParams, LrSchedule, NetError, Network, NetworkSpec, OptimizerState};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"BACP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("header error: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    optimizer: Option<OptimizerHeader>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    schedule: LrSchedule,
    adam: AdamParams,
    step: u64,
}

/// A loaded checkpoint: the network, its optimizer state when saved during
/// training, and whatever string metadata the producer attached.
pub struct CheckpointData {
    pub net: Network<f32>,
    pub optimizer: Option<OptimizerState>,
    pub meta: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    path: &Path,
    net: &Network<f32>,
    optimizer: Option<&OptimizerState>,
    meta: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    let header = Header {
        spec: net.spec.clone(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            schedule: o.schedule.clone(),
            adam: o.adam,
            step: o.step,
        }),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for ts in net.params() {
        for t in ts {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    if let Some(o) = optimizer {
        for buf in o.m.iter().flatten().chain(o.v.iter().flatten()) {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_at = 16 + hlen;
    if bytes.len() < body_at {
        return Err(CheckpointError::Corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..body_at])?;
    let shapes = header.spec.infer_shapes()?;

    let mut cursor = body_at;
    let mut take = |shape: Vec<usize>| -> Result<Tensor<f32>, CheckpointError> {
        let n: usize = shape.iter().product();
        let end = cursor + n * 4;
        if bytes.len() < end {
            return Err(CheckpointError::Corrupt("truncated parameter blob".into()));
        }
        let t = Tensor::from_le_bytes(shape, &bytes[cursor..end])
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        cursor = end;
        Ok(t)
    };

    let mut params = Vec::with_capacity(header.spec.layers.len());
    for (i, layer) in header.spec.layers.iter().enumerate() {
        let mut ts = Vec::new();
        for shape in layer.param_shapes(&shapes[i]) {
            ts.push(take(shape)?);
        }
        params.push(ts);
    }
    let net = Network::from_params(header.spec, params)?;

    let optimizer = match header.optimizer {
        None => None,
        Some(oh) => {
            let mut read_moments = || -> Result<Vec<Vec<Vec<f32>>>, CheckpointError> {
                let mut out = Vec::with_capacity(net.params().len());
                for ts in net.params() {
                    let mut group = Vec::with_capacity(ts.len());
                    for t in ts {
                        group.push(take(vec![t.len()])?.into_data());
                    }
                    out.push(group);
                }
                Ok(out)
            };
            let m = read_moments()?;
            let v = read_moments()?;
            Some(OptimizerState {
                schedule: oh.schedule,
                adam: oh.adam,
                step: oh.step,
                m,
                v,
            })
        }
    };
    if cursor != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - cursor
        )));
    }
    Ok(CheckpointData {
        net,
        optimizer,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn sample_net() -> Network<f32> {
        Network::init(NetworkSpec {
            input_shape: vec![6, 6, 1],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out: 4, bias: false },
                LayerSpec::Softmax,
            ],
            seed: 99,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = sample_net();
        let mut opt = OptimizerState::new(&net, vec![(0, 3e-4), (10, 1e-4)]).unwrap();
        opt.step = 17;
        opt.m[0][0][2] = 0.125;
        opt.v[3][0][1] = -3.5e-7;
        let mut meta = BTreeMap::new();
        meta.insert("phase".to_string(), "one".to_string());

        save_checkpoint(&path, &net, Some(&opt), &meta).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.meta["phase"], "one");
        let lopt = loaded.optimizer.unwrap();
        assert_eq!(lopt.step, 17);
        assert_eq!(lopt.schedule, opt.schedule);
        assert_eq!(lopt.m[0][0][2].to_bits(), 0.125f32.to_bits());
        assert_eq!(lopt.v[3][0][1].to_bits(), (-3.5e-7f32).to_bits());
        for (a, b) in net.params().iter().flatten().zip(loaded.net.params().iter().flatten()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        // save(load(file)) reproduces the file exactly
        let path2 = dir.path().join("net2.ckpt");
        save_checkpoint(&path2, &loaded.net, Some(&lopt), &loaded.meta).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = sample_net();
        save_checkpoint(&path, &net, None, &BTreeMap::new()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Corrupt(_))
        ));
    }
}
