//! Checkpoint files.
//!
//! Layout: one line of JSON header, a newline, then one line of standard
//! base64 holding every parameter as little-endian `f64`, network by network,
//! layer by layer, weights (row-major, `in × out`) before biases. The header
//! records the format version, the seed, each network's widths and activation
//! tags, the payload length in floats and a SHA-256 digest of the raw bytes.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::matrix::Matrix;
use super::mlp::{Activation, Layer, MlpParams};
use crate::error::{Error, Result};

pub const FORMAT: &str = "semcom-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub networks: Vec<(String, MlpParams)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    networks: Vec<NetworkHeader>,
    payload_floats: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkHeader {
    name: String,
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&MlpParams> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    /// Fails with [`Error::ArchitectureMismatch`] unless every named network
    /// exists with exactly the given widths.
    pub fn expect_architecture(&self, expected: &[(&str, Vec<usize>)]) -> Result<()> {
        for (name, widths) in expected {
            let p = self.get(name).ok_or_else(|| {
                Error::ArchitectureMismatch(format!("checkpoint has no network `{name}`"))
            })?;
            if &p.widths() != widths {
                return Err(Error::ArchitectureMismatch(format!(
                    "network `{name}` has widths {:?}, config expects {widths:?}",
                    p.widths()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut raw = Vec::new();
        let mut networks = Vec::with_capacity(self.networks.len());
        for (name, p) in &self.networks {
            p.validate()?;
            for v in p.flatten() {
                raw.extend_from_slice(&v.to_le_bytes());
            }
            networks.push(NetworkHeader {
                name: name.clone(),
                widths: p.widths(),
                activations: p.layers.iter().map(|l| l.activation).collect(),
            });
        }
        let header = Header {
            format: FORMAT.to_string(),
            version: VERSION,
            seed: self.seed,
            networks,
            payload_floats: raw.len() / 8,
            sha256: hex_digest(&raw),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend_from_slice(STANDARD.encode(&raw).as_bytes());
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(Error::Checkpoint {
                offset: bytes.len(),
                msg: "missing header terminator".into(),
            })?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint {
                offset: e.column().saturating_sub(1),
                msg: format!("bad header: {e}"),
            })?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: format!("unknown format `{}`", header.format),
            });
        }
        if header.version != VERSION {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: format!(
                    "unsupported version {} (expected {VERSION})",
                    header.version
                ),
            });
        }
        let payload_start = nl + 1;
        let body = &bytes[payload_start..];
        let end = body.iter().position(|&b| b == b'\n').unwrap_or(body.len());
        let raw = STANDARD.decode(&body[..end]).map_err(|e| {
            let at = match e {
                base64::DecodeError::InvalidByte(i, _)
                | base64::DecodeError::InvalidLastSymbol(i, _) => i,
                _ => end,
            };
            Error::Checkpoint {
                offset: payload_start + at,
                msg: format!("payload decode failed: {e}"),
            }
        })?;
        if raw.len() != header.payload_floats * 8 {
            return Err(Error::Checkpoint {
                offset: payload_start + end,
                msg: format!(
                    "payload holds {} bytes, header declares {} floats",
                    raw.len(),
                    header.payload_floats
                ),
            });
        }
        if hex_digest(&raw) != header.sha256 {
            return Err(Error::Checkpoint {
                offset: payload_start,
                msg: "payload checksum mismatch".into(),
            });
        }

        let mut floats = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let mut consumed = 0usize;
        let mut networks = Vec::with_capacity(header.networks.len());
        for nh in &header.networks {
            if nh.widths.len() != nh.activations.len() + 1 {
                return Err(Error::Checkpoint {
                    offset: 0,
                    msg: format!("network `{}` widths/activations disagree", nh.name),
                });
            }
            let mut layers = Vec::new();
            for (l, &activation) in nh.activations.iter().enumerate() {
                let (fin, fout) = (nh.widths[l], nh.widths[l + 1]);
                let mut take = |n: usize| -> Result<Vec<f64>> {
                    let v: Vec<f64> = floats.by_ref().take(n).collect();
                    if v.len() != n {
                        return Err(Error::Checkpoint {
                            offset: payload_start + consumed * 8,
                            msg: format!("network `{}` runs past the payload", nh.name),
                        });
                    }
                    consumed += n;
                    Ok(v)
                };
                let w = take(fin * fout)?;
                let bias = take(fout)?;
                layers.push(Layer {
                    weights: Matrix::from_vec(fin, fout, w)?,
                    bias,
                    activation,
                });
            }
            networks.push((nh.name.clone(), MlpParams { layers }));
        }
        if consumed != header.payload_floats {
            return Err(Error::Checkpoint {
                offset: payload_start,
                msg: "payload longer than the declared networks".into(),
            });
        }
        Ok(Self {
            seed: header.seed,
            networks,
        })
    }
}

fn hex_digest(raw: &[u8]) -> String {
    Sha256::digest(raw)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
