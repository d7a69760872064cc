//! Versioned binary checkpoints: denoiser config and weights, AdamW state,
//! RNG state and the global step.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SDCK" u32 version
//! config: 7 × u64 (model_dim, num_layers, num_heads, mlp_ratio, point_count,
//!                  time_embed_dim, num_timesteps)
//! u64 global_step
//! rng: 32-byte seed, u64 stream, u128 word position
//! u64 block_count, then per block: u64 name_len, name, u64 ndim, ndim × u64,
//!                                  u64 value_count, value_count × f32
//! optimizer: 5 × f64 hyperparameters, u64 step, u64 skipped,
//!            then "m.<name>" and "v.<name>" blocks in weight order
//! u64 metadata_count, then per entry: u64 name_len, name, f64 value
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::nn::denoiser::{param_specs, DenoiserConfig, DenoiserWeights};
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: DenoiserWeights<f32>,
    pub optimizer: AdamW<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    /// Free-form scalars (schedule parameters, running loss statistics).
    pub metadata: Vec<(String, f64)>,
}

impl Checkpoint {
    pub fn metadata(&self, key: &str) -> Option<f64> {
        self.metadata.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn block(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.name(name);
        self.u64(shape.len() as u64);
        for &d in shape {
            self.u64(d as u64);
        }
        self.u64(data.len() as u64);
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, "length overflow"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "bad block name"))
    }
    fn block(&mut self, expect_name: &str, expect_shape: &[usize]) -> Result<Vec<f32>> {
        let name = self.name()?;
        if name != expect_name {
            return Err(Error::format(self.path, format!("expected block {expect_name}, found {name}")));
        }
        let ndim = self.usize()?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(self.usize()?);
        }
        if shape != expect_shape {
            return Err(Error::format(self.path, format!("block {name} has shape {shape:?}, expected {expect_shape:?}")));
        }
        let len = self.usize()?;
        if len != shape.iter().product::<usize>() {
            return Err(Error::format(self.path, format!("block {name} length mismatch")));
        }
        let raw = self.take(len.checked_mul(4).ok_or_else(|| Error::format(self.path, "length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let c = &ck.weights.config;
    for v in [
        c.model_dim,
        c.num_layers,
        c.num_heads,
        c.mlp_ratio,
        c.point_count,
        c.time_embed_dim,
        c.num_timesteps,
    ] {
        w.u64(v as u64);
    }
    w.u64(ck.step);
    w.0.extend_from_slice(&ck.rng.get_seed());
    w.u64(ck.rng.get_stream());
    w.0.extend_from_slice(&ck.rng.get_word_pos().to_le_bytes());

    let specs = param_specs(c);
    w.u64(specs.len() as u64);
    for (s, p) in specs.iter().zip(&ck.weights.params) {
        w.block(&s.name, p.shape(), p.data());
    }
    let o = &ck.optimizer;
    for v in [o.config.lr, o.config.beta1, o.config.beta2, o.config.eps, o.config.weight_decay] {
        w.f64(v);
    }
    w.u64(o.step);
    w.u64(o.skipped);
    for (s, (m, v)) in specs.iter().zip(o.m.iter().zip(&o.v)) {
        w.block(&format!("m.{}", s.name), &s.shape, m);
        w.block(&format!("v.{}", s.name), &s.shape, v);
    }
    w.u64(ck.metadata.len() as u64);
    for (k, v) in &ck.metadata {
        w.name(k);
        w.f64(*v);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let config = DenoiserConfig {
        model_dim: dims[0],
        num_layers: dims[1],
        num_heads: dims[2],
        mlp_ratio: dims[3],
        point_count: dims[4],
        time_embed_dim: dims[5],
        num_timesteps: dims[6],
    };
    config
        .validate()
        .map_err(|e| Error::format(path, format!("invalid config header: {e}")))?;
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let specs = param_specs(&config);
    if r.usize()? != specs.len() {
        return Err(Error::format(path, "weight block count does not match config"));
    }
    let mut params = Vec::with_capacity(specs.len());
    for s in &specs {
        params.push(Tensor::new(s.shape.clone(), r.block(&s.name, &s.shape)?));
    }
    let mut hp = [0.0; 5];
    for v in &mut hp {
        *v = r.f64()?;
    }
    let opt_config = AdamWConfig {
        lr: hp[0],
        beta1: hp[1],
        beta2: hp[2],
        eps: hp[3],
        weight_decay: hp[4],
    };
    let opt_step = r.u64()?;
    let skipped = r.u64()?;
    let mut m = Vec::with_capacity(specs.len());
    let mut v = Vec::with_capacity(specs.len());
    for s in &specs {
        m.push(r.block(&format!("m.{}", s.name), &s.shape)?);
        v.push(r.block(&format!("v.{}", s.name), &s.shape)?);
    }
    let count = r.usize()?;
    let mut metadata = Vec::new();
    for _ in 0..count {
        let k = r.name()?;
        metadata.push((k, r.f64()?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        weights: DenoiserWeights { config, params },
        optimizer: AdamW {
            config: opt_config,
            step: opt_step,
            skipped,
            m,
            v,
        },
        rng,
        step,
        metadata,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
