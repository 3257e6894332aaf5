//! Named parameter collections and the `FSRT` checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FSRT" | u32 version | u64 fingerprint | u32 count
//! count x { u32 name_len | name (UTF-8) | u8 rank | rank x u32 dim | f32 payload }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use facesr_tensor::{BnStats, Element, Tensor};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{data_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSRT";
pub const CHECKPOINT_VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

/// Whether a named entry is a batch-norm running statistic rather than a
/// trainable parameter.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR)
}

/// First eight bytes of SHA-256, little-endian.
pub fn fingerprint_of(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Ordered map from hierarchical parameter name to tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Element = f32> {
    entries: BTreeMap<String, Tensor<T>>,
    fingerprint: u64,
    frozen: bool,
}

impl<T: Element> ModelParams<T> {
    pub fn new(fingerprint: u64) -> Self {
        ModelParams {
            entries: BTreeMap::new(),
            fingerprint,
            frozen: false,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Frozen sets are never updated by an optimizer.
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Sum of trainable element counts whose names start with `prefix`.
    pub fn trainable_count_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| !is_buffer(n) && n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            fingerprint: self.fingerprint,
            frozen: self.frozen,
        }
    }

    /// Fold batch statistics of the batch norm at `prefix` into its running
    /// estimates: `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BnStats<T>, momentum: f64) -> Result<()> {
        let m = T::from_f64(momentum);
        let one_m = T::from_f64(1.0 - momentum);
        for (suffix, batch) in [(RUNNING_MEAN, &stats.mean), (RUNNING_VAR, &stats.var)] {
            let name = format!("{prefix}{suffix}");
            let running = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::Config(format!("missing running statistic {name}")))?;
            for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                *r = m * *r + one_m * b;
            }
        }
        Ok(())
    }
}

impl ModelParams<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(data_err!("not an FSRT checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(data_err!("unsupported checkpoint version {version}"));
        }
        let fingerprint = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()? as usize;
        let mut params = ModelParams::new(fingerprint);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| data_err!("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(data_err!("{} trailing bytes after checkpoint", bytes.len() - r.pos));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Load and reject a fingerprint other than `expected`.
    pub fn load_expecting(path: &Path, expected: u64) -> Result<Self> {
        let p = Self::load(path)?;
        if p.fingerprint != expected {
            return Err(data_err!(
                "{}: fingerprint {:016x} does not match configuration {:016x}",
                path.display(),
                p.fingerprint,
                expected
            ));
        }
        Ok(p)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| data_err!("checkpoint truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Seeded parameter construction with fan-in scaled uniform initialization.
pub struct ParamInit<R: Rng> {
    pub params: ModelParams<f32>,
    rng: R,
}

impl<R: Rng> ParamInit<R> {
    pub fn new(fingerprint: u64, rng: R) -> Self {
        ParamInit {
            params: ModelParams::new(fingerprint),
            rng,
        }
    }

    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, bound, &mut self.rng);
        self.params.insert(name, t)
    }

    /// Convolution weight `[c_out, c_in, k, k]` and optional bias.
    pub fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, bias: bool) -> Result<()> {
        let fan_in = c_in * k * k;
        self.uniform(format!("{prefix}.weight"), vec![c_out, c_in, k, k], fan_in)?;
        if bias {
            self.uniform(format!("{prefix}.bias"), vec![c_out], fan_in)?;
        }
        Ok(())
    }

    /// Transposed-convolution weight `[c_in, c_out, k, k]` and optional bias.
    pub fn deconv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, bias: bool) -> Result<()> {
        let fan_in = c_out * k * k;
        self.uniform(format!("{prefix}.weight"), vec![c_in, c_out, k, k], fan_in)?;
        if bias {
            self.uniform(format!("{prefix}.bias"), vec![c_out], fan_in)?;
        }
        Ok(())
    }

    pub fn batch_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.params.insert(format!("{prefix}.weight"), Tensor::full(vec![c], 1.0))?;
        self.params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![c]))?;
        self.params.insert(format!("{prefix}{RUNNING_MEAN}"), Tensor::zeros(vec![c]))?;
        self.params.insert(format!("{prefix}{RUNNING_VAR}"), Tensor::full(vec![c], 1.0))?;
        Ok(())
    }

    pub fn finish(self) -> ModelParams<f32> {
        self.params
    }
}
