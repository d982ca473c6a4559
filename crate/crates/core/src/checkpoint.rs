//! Binary training snapshots.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MTCN"  u32 version  [32] config hash
//! u32 meta length, meta JSON (iteration, spec, config, rng state, bn flags)
//! u32 tensor count, then per tensor:
//!     u32 name length, UTF-8 name, u32 rank, rank x u32 extents, f32 values
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{build, NetworkParams, NetworkSpec};
use crate::tensor::Tensor;
use crate::train::TrainingConfig;

pub const MAGIC: &[u8; 4] = b"MTCN";
pub const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, stored as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().expect("word position validated on load"));
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Number of completed SGD steps.
    pub iteration: u64,
    pub params: NetworkParams<f32>,
    /// Momentum buffers aligned with [`NetworkParams::params`].
    pub velocities: Vec<Tensor<f32>>,
    pub rng: RngState,
    pub config: TrainingConfig,
    pub config_hash: [u8; 32],
}

#[derive(Serialize, Deserialize)]
struct Meta {
    iteration: u64,
    spec: NetworkSpec,
    config: TrainingConfig,
    rng: RngState,
    bn_initialized: Vec<bool>,
}

/// Everything that shapes the parameter trajectory.
#[derive(Serialize)]
struct Hashed<'a> {
    spec: &'a NetworkSpec,
    learning_rate: f64,
    weight_decay: f64,
    momentum: f64,
    decay_interval: u64,
    decay_rate: f64,
    batch_size: usize,
    seed: u64,
    missing_data_mode: bool,
    class_balanced: bool,
}

impl Checkpoint {
    /// Iteration-0 checkpoint with zero velocities.
    pub fn new(params: NetworkParams<f32>, config: TrainingConfig, rng: &ChaCha8Rng) -> Self {
        let velocities = params.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let config_hash = Self::hash_config(&params.spec, &config);
        Checkpoint { iteration: 0, params, velocities, rng: RngState::capture(rng), config, config_hash }
    }

    /// SHA-256 of the network spec and the trajectory-relevant training
    /// settings (iteration counts and output intervals are excluded).
    pub fn hash_config(spec: &NetworkSpec, c: &TrainingConfig) -> [u8; 32] {
        let h = Hashed {
            spec,
            learning_rate: c.learning_rate,
            weight_decay: c.weight_decay,
            momentum: c.momentum,
            decay_interval: c.decay_interval,
            decay_rate: c.decay_rate,
            batch_size: c.batch_size,
            seed: c.seed,
            missing_data_mode: c.missing_data_mode,
            class_balanced: c.class_balanced,
        };
        let json = serde_json::to_vec(&h).expect("config serializes");
        Sha256::digest(&json).into()
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let info = self.params.param_info();
        let mut out: Vec<(String, &Tensor<f32>)> =
            info.iter().map(|i| i.name.clone()).zip(self.params.params()).collect();
        out.extend(self.params.buffers());
        out.extend(info.iter().map(|i| format!("velocity.{}", i.name)).zip(self.velocities.iter()));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            iteration: self.iteration,
            spec: self.params.spec.clone(),
            config: self.config.clone(),
            rng: self.rng.clone(),
            bn_initialized: self.params.branches.iter().chain(&self.params.trunk).map(|p| p.bn.initialized).collect(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let tensors = self.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write then rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.rng.word_pos.parse::<u128>().map_err(|_| Error::data("corrupt rng state"))?;
        if Self::hash_config(&meta.spec, &meta.config) != config_hash {
            return Err(Error::data("checkpoint config hash does not match its metadata"));
        }

        let count = r.u32()? as usize;
        let mut tensors = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::data("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::data("trailing bytes after checkpoint tensors"));
        }

        // build with a throwaway generator, then overwrite every tensor
        let mut params: NetworkParams<f32> = build(&meta.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut take = |name: &str, dst: &mut Tensor<f32>| -> Result<()> {
            let t = tensors.remove(name).ok_or_else(|| Error::data(format!("checkpoint lacks tensor '{name}'")))?;
            if t.shape() != dst.shape() {
                return Err(Error::data(format!("tensor '{name}' is {:?}, expected {:?}", t.shape(), dst.shape())));
            }
            *dst = t;
            Ok(())
        };
        let info = params.param_info();
        for (i, p) in info.iter().zip(params.params_mut()) {
            take(&i.name, p)?;
        }
        for (name, b) in params.buffers_mut() {
            take(&name, b)?;
        }
        let mut velocities = Vec::with_capacity(info.len());
        for i in &info {
            let mut v = Tensor::zeros(&i.shape);
            take(&format!("velocity.{}", i.name), &mut v)?;
            velocities.push(v);
        }
        let layers: Vec<_> = params.branches.iter_mut().chain(params.trunk.iter_mut()).collect();
        if layers.len() != meta.bn_initialized.len() {
            return Err(Error::data("batch-norm flags do not match the network"));
        }
        for (l, &flag) in layers.into_iter().zip(&meta.bn_initialized) {
            l.bn.initialized = flag;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::data(format!("unexpected tensor '{extra}' in checkpoint")));
        }
        Ok(Checkpoint {
            iteration: meta.iteration,
            params,
            velocities,
            rng: meta.rng,
            config: meta.config,
            config_hash,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::data("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
