//! Binary checkpoint format.
//!
//! ```text
//! "FSGCKPT1" | u32 count | count x (u16 name_len, name, u8 rank, rank x u32 dims, f32 payload) | 32-byte fingerprint
//! ```
//! All integers and floats are little-endian. Tensors are written in name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::NormStats;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::{ModelParams, RunningStats};
use crate::tensor::Tensor;
use crate::unet::UNet;

pub const MAGIC: &[u8; 8] = b"FSGCKPT1";
pub const FINGERPRINT_LEN: usize = 32;
pub const STEP_NAME: &str = "optimizer.step";
const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

/// A flat set of named `f32` tensors plus the run-config fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub fingerprint: [u8; FINGERPRINT_LEN],
}

/// Parameters, normalization statistics and optimizer state of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub stats: RunningStats<f32>,
    pub adam: AdamState<f32>,
}

impl TrainState {
    pub fn fresh(net: &UNet, seed: u64) -> Self {
        let params = net.init_params(seed);
        let adam = AdamState::new(&params);
        TrainState { params, stats: net.init_stats(), adam }
    }
}

/// Every tensor name a checkpoint of `net` must contain.
pub fn expected_names(net: &UNet) -> Vec<String> {
    let mut names = Vec::new();
    for p in net.param_names() {
        names.push(format!("{p}.m"));
        names.push(format!("{p}.v"));
        names.push(p);
    }
    for (site, _) in net.norm_sites() {
        names.push(format!("{site}{RUNNING_MEAN}"));
        names.push(format!("{site}{RUNNING_VAR}"));
    }
    names.push(STEP_NAME.to_string());
    names.sort();
    names
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, fingerprint: [u8; FINGERPRINT_LEN]) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, t) in state.params.iter() {
            tensors.insert(name.to_string(), t.clone());
        }
        for (name, t) in &state.adam.m {
            tensors.insert(format!("{name}.m"), t.clone());
        }
        for (name, t) in &state.adam.v {
            tensors.insert(format!("{name}.v"), t.clone());
        }
        for (site, s) in state.stats.iter() {
            let vec = |v: &[f32]| Tensor::new(&[v.len()], v.to_vec()).expect("1-d");
            tensors.insert(format!("{site}{RUNNING_MEAN}"), vec(&s.mean));
            tensors.insert(format!("{site}{RUNNING_VAR}"), vec(&s.var));
        }
        tensors.insert(STEP_NAME.to_string(), Tensor::scalar(state.adam.step as f32));
        Checkpoint { tensors, fingerprint }
    }

    /// Splits the tensors back into a [`TrainState`] for `net`, checking the
    /// name set and every shape.
    pub fn into_state(self, net: &UNet) -> Result<TrainState> {
        let want = expected_names(net);
        let missing: Vec<String> = want.iter().filter(|n| !self.tensors.contains_key(*n)).cloned().collect();
        let extra: Vec<String> = self.tensors.keys().filter(|n| want.binary_search(n).is_err()).cloned().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::NameSet { missing, extra });
        }
        let mut tensors = self.tensors;
        let mut take = |name: &str| tensors.remove(name).expect("name set checked");
        let mut params = ModelParams::new();
        let mut adam = AdamState::new(&ModelParams::<f32>::new());
        for name in net.param_names() {
            adam.m.insert(name.clone(), take(&format!("{name}.m")));
            adam.v.insert(name.clone(), take(&format!("{name}.v")));
            params.insert(name.clone(), take(&name));
        }
        net.check_params(&params)?;
        for (name, p) in params.iter() {
            if adam.m[name].shape() != p.shape() || adam.v[name].shape() != p.shape() {
                return Err(Error::Validation(format!("optimizer moments for {name} do not match the parameter shape")));
            }
        }
        let mut stats = RunningStats::new();
        for (site, channels) in net.norm_sites() {
            let mean = take(&format!("{site}{RUNNING_MEAN}"));
            let var = take(&format!("{site}{RUNNING_VAR}"));
            if mean.shape() != [channels] || var.shape() != [channels] {
                return Err(Error::Validation(format!("running statistics for {site} must have {channels} entries")));
            }
            stats.insert(site, NormStats { mean: mean.into_data(), var: var.into_data() });
        }
        let step = take(STEP_NAME);
        let step_value = step.data().first().copied().unwrap_or(-1.0);
        if step.rank() != 0 || step_value < 0.0 || step_value.fract() != 0.0 {
            return Err(Error::Validation(format!("invalid optimizer step tensor {step:?}")));
        }
        adam.step = step_value as u64;
        Ok(TrainState { params, stats, adam })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Validation(format!("tensor name of {} bytes is too long", name.len())))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.fingerprint);
        Ok(buf)
    }

    /// Parses checkpoint bytes; `path` is only used for error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::format(path, 0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::format(path, at + 2, "tensor name is not UTF-8"))?
                .to_string();
            if name.is_empty() {
                return Err(Error::format(path, at, "empty tensor name"));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            if rank > 4 {
                return Err(Error::format(path, r.pos as u64 - 1, format!("rank {rank} of {name} exceeds 4")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.saturating_mul(4), "payload")?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let tensor = Tensor::new(&shape, data).map_err(|e| Error::format(path, at, e.to_string()))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::format(path, at, format!("duplicate tensor name {name:?}")));
            }
        }
        let fingerprint: [u8; FINGERPRINT_LEN] = r.take(FINGERPRINT_LEN, "fingerprint")?.try_into().expect("32 bytes");
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors, fingerprint })
    }

    pub fn fingerprint_hex(&self) -> String {
        hex(&self.fingerprint)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.bytes.len() as u64,
                format!("truncated while reading {what} at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
