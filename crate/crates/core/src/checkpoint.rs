//! Binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header, then every tensor's `f32` data in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Parameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PNGANCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Enough to rebuild a ChaCha8 generator at the same position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Checkpoint(format!("invalid rng state: {what}"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: String,
    step: usize,
    config_hash: String,
    rng: Option<RngState>,
    counters: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub step: usize,
    pub config_hash: String,
    pub rng: Option<RngState>,
    /// Small integer state such as optimizer step counts.
    pub counters: BTreeMap<String, u64>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(stage: &str, step: usize, config_hash: &str) -> Self {
        Self {
            stage: stage.into(),
            step,
            config_hash: config_hash.into(),
            rng: None,
            counters: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add_params<P: Parameters<f32>>(&mut self, prefix: &str, params: &P) {
        params.visit(prefix, &mut |name, t| self.tensors.push((name.to_string(), t.clone())));
    }

    pub fn add_adam(&mut self, prefix: &str, opt: &Adam<f32>) {
        self.counters.insert(format!("{prefix}step"), opt.step);
        for (i, (m, v)) in opt.first_moment.iter().zip(&opt.second_moment).enumerate() {
            self.tensors.push((format!("{prefix}m.{i}"), m.clone()));
            self.tensors.push((format!("{prefix}v.{i}"), v.clone()));
        }
    }

    fn lookup(&self) -> BTreeMap<&str, &Tensor<f32>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    fn fetch<'a>(map: &BTreeMap<&str, &'a Tensor<f32>>, name: &str, shape: &[usize]) -> Result<&'a Tensor<f32>> {
        let t = map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from checkpoint")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?} in checkpoint, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    /// Copies tensors into `params`. Every tensor is checked before any is
    /// written, so a failed restore leaves `params` untouched.
    pub fn restore_params<P: Parameters<f32>>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let map = self.lookup();
        let mut expected = Vec::new();
        params.visit(prefix, &mut |name, t| {
            expected.push((name.to_string(), t.shape().to_vec()))
        });
        for (name, shape) in &expected {
            Self::fetch(&map, name, shape)?;
        }
        params.visit_mut(prefix, &mut |name, t| {
            t.data_mut().copy_from_slice(map[name].data());
        });
        Ok(())
    }

    pub fn restore_adam(&self, prefix: &str, opt: &mut Adam<f32>) -> Result<()> {
        let map = self.lookup();
        let step = *self
            .counters
            .get(&format!("{prefix}step"))
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state {prefix} missing")))?;
        let mut first = Vec::with_capacity(opt.first_moment.len());
        let mut second = Vec::with_capacity(opt.second_moment.len());
        for (i, m) in opt.first_moment.iter().enumerate() {
            first.push(Self::fetch(&map, &format!("{prefix}m.{i}"), m.shape())?.clone());
            second.push(Self::fetch(&map, &format!("{prefix}v.{i}"), m.shape())?.clone());
        }
        opt.step = step;
        opt.first_moment = first;
        opt.second_moment = second;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            stage: self.stage.clone(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            rng: self.rng.clone(),
            counters: self.counters.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let data_len: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("corrupt checkpoint: {what}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let mut data = &body[header_len..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum();
        if data.len() != expected {
            return Err(corrupt(&format!(
                "expected {expected} data bytes, found {}",
                data.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let values = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[4 * n..];
            tensors.push((entry.name, Tensor::from_vec(&entry.shape, values)?));
        }
        Ok(Self {
            stage: header.stage,
            step: header.step,
            config_hash: header.config_hash,
            rng: header.rng,
            counters: header.counters,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        crate::dataset::write_file(&tmp, &self.to_bytes())?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the checkpoint was written under `config_hash`.
    pub fn check_config(&self, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written with config {} but the current config is {config_hash}",
                self.config_hash
            )));
        }
        Ok(())
    }
}
