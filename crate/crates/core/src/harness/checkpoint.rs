//! Versioned, checksummed binary snapshots of a trained network.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "GRADCKPT"
//! version  u32
//! length   u64      payload length in bytes
//! payload  ...      config, seed, epoch, then every stack
//! sha256   32 bytes digest of the payload
//! ```
//!
//! Floats are stored as their IEEE-754 bit patterns, so a round trip is
//! bit-exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::grad_model::{Block, GradNetwork, NetworkConfig, Stack, Variant};
use crate::nn::{BatchNormLayer, DenseLayer};

pub const MAGIC: &[u8; 8] = b"GRADCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic header)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Network parameters and batch-norm statistics at the end of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub network: GradNetwork,
    pub seed: u64,
    pub epoch: usize,
}

impl Snapshot {
    /// Hex SHA-256 of the serialized payload.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(payload(self));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn stack(&mut self, s: &Stack) {
        self.u64(s.blocks.len() as u64);
        for b in &s.blocks {
            self.tensor(&b.dense.weights);
            self.tensor(&b.dense.bias);
            match &b.norm {
                None => self.u8(0),
                Some(bn) => {
                    self.u8(1);
                    self.tensor(&bn.gamma);
                    self.tensor(&bn.beta);
                    self.tensor(&bn.running_mean);
                    self.tensor(&bn.running_var);
                    self.f64(bn.momentum);
                    self.f64(bn.eps);
                }
            }
        }
    }
}

fn payload(s: &Snapshot) -> Vec<u8> {
    let c = &s.network.config;
    let mut w = Writer(Vec::new());
    w.u8(match c.variant {
        Variant::Pred => 0,
        Variant::Auto => 1,
    });
    w.u64(c.input_dim as u64);
    w.u64(c.hidden_width as u64);
    w.u64(c.layers_per_branch as u64);
    w.f64(c.lambda);
    w.u64(c.n_protected as u64);
    w.u64(s.seed);
    w.u64(s.epoch as u64);
    w.stack(&s.network.trunk);
    w.stack(&s.network.target_branch);
    for b in &s.network.attribute_branches {
        w.stack(b);
    }
    w.0
}

pub fn to_bytes(s: &Snapshot) -> Vec<u8> {
    let body = payload(s);
    let mut out = Vec::with_capacity(body.len() + 52);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&Sha256::digest(&body));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Malformed("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.usize()?;
        if rank > 2 {
            return Err(CheckpointError::Malformed(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
    fn stack(&mut self) -> Result<Stack> {
        let n = self.usize()?;
        if n > 1024 {
            return Err(CheckpointError::Malformed(format!("{n} blocks in one stack")));
        }
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let dense = DenseLayer {
                weights: self.tensor()?,
                bias: self.tensor()?,
            };
            let norm = match self.u8()? {
                0 => None,
                1 => Some(BatchNormLayer {
                    gamma: self.tensor()?,
                    beta: self.tensor()?,
                    running_mean: self.tensor()?,
                    running_var: self.tensor()?,
                    momentum: self.f64()?,
                    eps: self.f64()?,
                }),
                t => return Err(CheckpointError::Malformed(format!("block tag {t}"))),
            };
            blocks.push(Block { dense, norm });
        }
        Ok(Stack { blocks })
    }
}

/// Checks that stored tensors have the shapes the config implies.
fn check_structure(net: &GradNetwork) -> Result<()> {
    let expected = GradNetwork::build(net.config.clone(), 0)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let same_shapes = |a: &Stack, b: &Stack| {
        a.blocks.len() == b.blocks.len()
            && a.blocks.iter().zip(&b.blocks).all(|(x, y)| {
                x.dense.weights.shape() == y.dense.weights.shape()
                    && x.dense.bias.shape() == y.dense.bias.shape()
                    && match (&x.norm, &y.norm) {
                        (None, None) => true,
                        (Some(p), Some(q)) => {
                            p.gamma.shape() == q.gamma.shape()
                                && p.beta.shape() == q.beta.shape()
                                && p.running_mean.shape() == q.running_mean.shape()
                                && p.running_var.shape() == q.running_var.shape()
                        }
                        _ => false,
                    }
            })
    };
    let ok = same_shapes(&net.trunk, &expected.trunk)
        && same_shapes(&net.target_branch, &expected.target_branch)
        && net
            .attribute_branches
            .iter()
            .zip(&expected.attribute_branches)
            .all(|(a, b)| same_shapes(a, b));
    if ok {
        Ok(())
    } else {
        Err(CheckpointError::Malformed("layer shapes disagree with the stored config".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Snapshot> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        buf: &bytes[MAGIC.len()..],
    };
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.usize()?;
    let body = r.take(len)?;
    let digest = r.take(32)?;
    if !r.buf.is_empty() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }

    let mut r = Reader { buf: body };
    let variant = match r.u8()? {
        0 => Variant::Pred,
        1 => Variant::Auto,
        v => return Err(CheckpointError::Malformed(format!("variant tag {v}"))),
    };
    let config = NetworkConfig {
        variant,
        input_dim: r.usize()?,
        hidden_width: r.usize()?,
        layers_per_branch: r.usize()?,
        lambda: r.f64()?,
        n_protected: r.usize()?,
    };
    let seed = r.u64()?;
    let epoch = r.usize()?;
    let trunk = r.stack()?;
    let target_branch = r.stack()?;
    let attribute_branches = (0..config.n_protected)
        .map(|_| r.stack())
        .collect::<Result<Vec<_>>>()?;
    if !r.buf.is_empty() {
        return Err(CheckpointError::Malformed("unread payload bytes".into()));
    }
    let network = GradNetwork {
        config,
        trunk,
        target_branch,
        attribute_branches,
    };
    check_structure(&network)?;
    Ok(Snapshot {
        network,
        seed,
        epoch,
    })
}

pub fn save_checkpoint(snapshot: &Snapshot, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(snapshot))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Snapshot> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot() -> Snapshot {
        let mut net = GradNetwork::build(NetworkConfig::new(Variant::Pred, 5, 2), 3).unwrap();
        let bn = net.trunk.blocks[0].norm.as_mut().unwrap();
        bn.running_mean.data_mut()[0] = 0.1 + 0.2;
        bn.running_var.data_mut()[3] = 1.0 / 3.0;
        Snapshot {
            network: net,
            seed: 3,
            epoch: 17,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = snapshot();
        let back = from_bytes(&to_bytes(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = to_bytes(&snapshot());
        for cut in [4, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                from_bytes(&bytes[..cut]),
                Err(CheckpointError::Truncated | CheckpointError::BadMagic)
            ));
        }
    }

    #[test]
    fn corruption_fails_checksum() {
        let mut bytes = to_bytes(&snapshot());
        let mid = 20 + (bytes.len() - 52) / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::Checksum)));
    }

    #[test]
    fn wrong_version_and_magic() {
        let mut bytes = to_bytes(&snapshot());
        bytes[8] = 9;
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::Version(9))));
        assert!(matches!(from_bytes(b"NOTACKPTxxxx"), Err(CheckpointError::BadMagic)));
    }
}
