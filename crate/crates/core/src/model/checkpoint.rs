//! Binary checkpoint archive.
//!
//! Layout (little endian): magic `M2FNCKPT`, `u32` version, `u64` metadata length, metadata
//! JSON, `u32` tensor count, then per tensor: `u8` kind (0 parameter, 1 buffer), `u32` name
//! length, UTF-8 name, `u32` rank, `u64` dims, `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Network;
use super::params::{ParamStore, Weights};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"M2FNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: Weights,
    /// Free-form state needed to reproduce inputs (preprocessing, training progress).
    pub extra: serde_json::Value,
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated archive: {e}")))?;
    Ok(b)
}

impl Checkpoint {
    pub fn new(config: ModelConfig, weights: Weights, extra: serde_json::Value) -> Self {
        Self { config, weights, extra }
    }

    /// Checks the weights against the architecture the stored configuration describes.
    pub fn network(&self) -> Result<Network> {
        let net = Network::new(self.config.clone())?;
        net.check_weights(&self.weights)?;
        Ok(net)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            extra: self.extra.clone(),
        })?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        let count = self.weights.params.len() + self.weights.buffers.len();
        w.write_all(&(count as u32).to_le_bytes())?;
        for (kind, store) in [(0u8, &self.weights.params), (1u8, &self.weights.buffers)] {
            for (name, t) in store.iter() {
                w.write_all(&[kind])?;
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(t.ndim() as u32).to_le_bytes())?;
                for &d in t.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                let mut buf = Vec::with_capacity(t.len() * 4);
                for &v in t.iter() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<8>(r)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive".into()));
        }
        let version = u32::from_le_bytes(read_exact(r)?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u64::from_le_bytes(read_exact(r)?) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)
            .map_err(|e| Error::Checkpoint(format!("truncated metadata: {e}")))?;
        let meta: Meta = serde_json::from_slice(&meta)?;
        let count = u32::from_le_bytes(read_exact(r)?);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for _ in 0..count {
            let [kind] = read_exact::<1>(r)?;
            let name_len = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(read_exact(r)?) as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| read_exact(r).map(|b| u64::from_le_bytes(b) as usize))
                .collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Checkpoint(format!("truncated tensor {name}: {e}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect();
            match kind {
                0 => params.push((name, shape, data)),
                1 => buffers.push((name, shape, data)),
                k => return Err(Error::Checkpoint(format!("unknown tensor kind {k}"))),
            }
        }
        Ok(Self {
            config: meta.config,
            weights: Weights {
                params: ParamStore::from_parts(params)?,
                buffers: ParamStore::from_parts(buffers)?,
            },
            extra: meta.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Loads an archive and verifies every tensor against the stored configuration.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
        let ckpt = Self::read_from(&mut r)?;
        ckpt.network()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn round_trip_is_exact_after_f32_rounding() {
        let net = Network::new(ModelConfig::tiny(7)).unwrap();
        let mut w = net.init(11);
        w.params.round_to_f32();
        let ck = Checkpoint::new(net.config().clone(), w, serde_json::json!({"epoch": 3}));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
        assert!(Checkpoint::read_from(&mut &b"garbage!"[..]).is_err());
    }

    #[test]
    fn mismatched_shape_named() {
        let net = Network::new(ModelConfig::tiny(7)).unwrap();
        let mut w = net.init(1);
        w.params.insert("attention.fc1.weight", ArrayD::zeros(IxDyn(&[2, 2])));
        let ck = Checkpoint::new(net.config().clone(), w, serde_json::Value::Null);
        match ck.network() {
            Err(Error::ParameterShape { name, .. }) => assert_eq!(name, "attention.fc1.weight"),
            other => panic!("{other:?}"),
        }
    }
}
