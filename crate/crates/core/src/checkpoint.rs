//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic `CUEGCKPT`, `u32` format version, `u64` payload
//! length, the payload, then the SHA-256 digest of the payload. All integers
//! and floats are little-endian. The payload holds the run configuration as
//! text, step counters, every named parameter with its group tag and shape,
//! and the optimizer moments keyed by parameter name.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Group, ParamStore};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use tape::{Adam, Tensor};

pub const MAGIC: &[u8; 8] = b"CUEGCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub params: Vec<String>,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// completed steps per training phase
    pub counters: BTreeMap<String, u64>,
    pub params: Vec<NamedParam>,
    pub optimizers: BTreeMap<String, OptimizerState>,
}

impl OptimizerState {
    pub fn capture(adam: &Adam, store: &ParamStore, ids: &[crate::nn::ParamId]) -> Self {
        Self {
            step: adam.step,
            params: ids.iter().map(|&id| store.name(id).to_string()).collect(),
            first: adam.first.clone(),
            second: adam.second.clone(),
        }
    }

    /// Restores moments into `adam`, whose parameter list must match by name and shape.
    pub fn restore(&self, adam: &mut Adam, store: &ParamStore, ids: &[crate::nn::ParamId]) -> Result<()> {
        let names: Vec<&str> = ids.iter().map(|&id| store.name(id)).collect();
        if names != self.params.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::State("optimizer state covers a different parameter set".into()));
        }
        for (i, &id) in ids.iter().enumerate() {
            let shape = store.get(id).shape();
            if self.first[i].shape() != shape || self.second[i].shape() != shape {
                return Err(Error::State(format!("optimizer moment shape mismatch for {}", names[i])));
            }
        }
        adam.step = self.step;
        adam.first = self.first.clone();
        adam.second = self.second.clone();
        Ok(())
    }
}

impl Checkpoint {
    pub fn from_store(config: &RunConfig, store: &ParamStore) -> Self {
        Self {
            config: config.clone(),
            counters: BTreeMap::new(),
            params: store
                .ids()
                .map(|id| NamedParam {
                    name: store.name(id).to_string(),
                    group: store.group(id),
                    value: store.get(id).clone(),
                })
                .collect(),
            optimizers: BTreeMap::new(),
        }
    }

    /// Writes every stored parameter into `store`, which must declare exactly
    /// the same names, groups and shapes.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::State(format!(
                "checkpoint holds {} parameters, model declares {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .lookup(&p.name)
                .ok_or_else(|| Error::State(format!("model has no parameter {}", p.name)))?;
            if store.group(id) != p.group || store.get(id).shape() != p.value.shape() {
                return Err(Error::State(format!("parameter {} differs in group or shape", p.name)));
            }
            store.set(id, p.value.clone());
        }
        Ok(())
    }

    pub fn counter(&self, phase: &str) -> u64 {
        self.counters.get(phase).copied().unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Writer::default();
        p.string(&self.config.to_text());
        p.u32(self.counters.len() as u32);
        for (k, v) in &self.counters {
            p.string(k);
            p.u64(*v);
        }
        p.u32(self.params.len() as u32);
        for param in &self.params {
            p.string(&param.name);
            p.u8(param.group.tag());
            p.tensor(&param.value);
        }
        p.u32(self.optimizers.len() as u32);
        for (name, opt) in &self.optimizers {
            p.string(name);
            p.u64(opt.step);
            p.u32(opt.params.len() as u32);
            for i in 0..opt.params.len() {
                p.string(&opt.params[i]);
                p.tensor(&opt.first[i]);
                p.tensor(&opt.second[i]);
            }
        }
        let payload = p.buf;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        if bytes.len() != HEADER_LEN + len + DIGEST_LEN {
            return Err(corrupt("file length disagrees with the header (truncated?)"));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
        if Sha256::digest(payload).as_slice() != &bytes[HEADER_LEN + len..] {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let config = RunConfig::from_text(&r.string()?)?;
        let mut counters = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            counters.insert(k, r.u64()?);
        }
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let group = Group::from_tag(r.u8()?).ok_or_else(|| corrupt("unknown parameter group"))?;
            params.push(NamedParam {
                name,
                group,
                value: r.tensor()?,
            });
        }
        let mut optimizers = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let step = r.u64()?;
            let count = r.u32()? as usize;
            let mut state = OptimizerState {
                step,
                params: Vec::new(),
                first: Vec::new(),
                second: Vec::new(),
            };
            for _ in 0..count {
                state.params.push(r.string()?);
                state.first.push(r.tensor()?);
                state.second.push(r.tensor()?);
            }
            optimizers.insert(name, state);
        }
        if r.pos != payload.len() {
            return Err(corrupt("trailing bytes in payload"));
        }
        Ok(Self {
            config,
            counters,
            params,
            optimizers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint("payload ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid utf-8".into()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::CorruptCheckpoint(format!("implausible tensor rank {}", rank)));
        }
        let shape = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::CorruptCheckpoint("tensor extends past the payload".into()))?;
        let raw = self.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::from_vec(shape, data))
    }
}
