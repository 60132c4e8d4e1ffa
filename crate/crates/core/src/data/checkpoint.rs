//! Checkpoint container.
//!
//! ```text
//! b"ACENET-CKPT\n"
//! u64 little-endian header length
//! header: TOML (format version, dtype, step, network config, optimizer
//!         settings, and one entry per stored tensor: name, kind, shape,
//!         byte offset into the payload)
//! payload: little-endian scalars, entries back to back
//! ```
//!
//! Entries are the parameters in store order, then the Adam first moments,
//! then the second moments.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Network, NetworkConfig};
use crate::tensor::adam::AdamConfig;
use crate::tensor::{AdamState, Real, Shape, Tensor};

pub const MAGIC: &[u8; 12] = b"ACENET-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Optimizer {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    dtype: String,
    step: u64,
    config: NetworkConfig,
    optimizer: Optimizer,
    entries: Vec<Entry>,
}

/// Fully validated checkpoint contents.
#[derive(Clone, Debug)]
pub struct CheckpointData<T> {
    pub step: u64,
    pub config: NetworkConfig,
    pub adam: AdamConfig,
    pub t: u64,
    pub params: Vec<(String, Tensor<T>)>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// Serializes network parameters and optimizer state.
pub fn encode_checkpoint<T: Real>(net: &Network<T>, opt: &AdamState<T>, step: u64) -> Result<Vec<u8>> {
    if opt.m.len() != net.params.len() || opt.v.len() != net.params.len() {
        return Err(Error::Usage("optimizer state does not belong to this network".into()));
    }
    let mut entries = Vec::with_capacity(3 * net.params.len());
    let mut payload = Vec::with_capacity(3 * net.params.scalar_count() * T::BYTES);
    for (kind, bufs) in [
        (Kind::Param, net.params.iter().map(|p| p.tensor.data()).collect::<Vec<_>>()),
        (Kind::AdamM, opt.m.iter().map(Vec::as_slice).collect()),
        (Kind::AdamV, opt.v.iter().map(Vec::as_slice).collect()),
    ] {
        for (p, buf) in net.params.iter().zip(bufs) {
            if buf.len() != p.tensor.len() {
                return Err(Error::Usage(format!("optimizer buffer for `{}` has the wrong length", p.name)));
            }
            entries.push(Entry {
                name: p.name.clone(),
                kind,
                shape: p.tensor.shape().0.to_vec(),
                offset: payload.len() as u64,
            });
            for &x in buf {
                x.write_le(&mut payload);
            }
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        step,
        config: net.config().clone(),
        optimizer: Optimizer {
            lr: opt.config.lr,
            beta1: opt.config.beta1,
            beta2: opt.config.beta2,
            epsilon: opt.config.epsilon,
            t: opt.t,
        },
        entries,
    };
    let text = toml::to_string(&header).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + text.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and validates checkpoint bytes against the parameter layout of
/// the configuration they carry.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<CheckpointData<T>> {
    let fmt = |m: &str| Error::CheckpointFormat(m.to_string());
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| fmt("bad magic"))?;
    if rest.len() < 8 {
        return Err(fmt("missing header length"));
    }
    let (len_bytes, rest) = rest.split_at(8);
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
    if header_len > rest.len() as u64 {
        return Err(fmt("header length exceeds file size"));
    }
    let (text, payload) = rest.split_at(header_len as usize);
    let text = std::str::from_utf8(text).map_err(|_| fmt("header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::CheckpointFormat(e.message().to_string()))?;

    if header.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if header.dtype != T::DTYPE {
        return Err(Error::CheckpointFormat(format!(
            "stored as {}, loading as {}",
            header.dtype,
            T::DTYPE
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::CheckpointConfig(format!("stored config is invalid: {e}")))?;
    let o = &header.optimizer;
    if ![o.lr, o.beta1, o.beta2, o.epsilon].iter().all(|v| v.is_finite()) {
        return Err(fmt("non-finite optimizer setting"));
    }

    let layout = Network::<T>::layout(&header.config)?;
    let kinds = [Kind::Param, Kind::AdamM, Kind::AdamV];
    if header.entries.len() != kinds.len() * layout.len() {
        return Err(Error::CheckpointNames(format!(
            "{} entries for {} parameters",
            header.entries.len(),
            layout.len()
        )));
    }
    let mut needed: u64 = 0;
    for (k, e) in header.entries.iter().enumerate() {
        let (name, shape) = &layout[k % layout.len()];
        let kind = kinds[k / layout.len()];
        if e.name != *name || e.kind != kind {
            return Err(Error::CheckpointNames(format!(
                "entry {k} is `{}` ({:?}), expected `{name}` ({kind:?})",
                e.name, e.kind
            )));
        }
        if e.shape != shape.0 {
            return Err(Error::CheckpointConfig(format!("`{name}` has shape {:?}, expected {shape}", e.shape)));
        }
        if e.offset != needed {
            return Err(Error::CheckpointFormat(format!("entry `{name}` is not contiguous")));
        }
        let bytes = (shape.numel() as u64)
            .checked_mul(T::BYTES as u64)
            .and_then(|b| b.checked_add(needed))
            .ok_or_else(|| fmt("payload size overflows"))?;
        needed = bytes;
    }
    if (payload.len() as u64) < needed {
        return Err(Error::CheckpointPayload {
            needed: usize::try_from(needed).unwrap_or(usize::MAX),
            found: payload.len(),
        });
    }
    if payload.len() as u64 > needed {
        return Err(fmt("trailing bytes after payload"));
    }

    let read = |offset: u64, n: usize| -> Vec<T> {
        let start = offset as usize;
        payload[start..start + n * T::BYTES].chunks_exact(T::BYTES).map(T::read_le).collect()
    };
    let np = layout.len();
    let mut params = Vec::with_capacity(np);
    let mut m = Vec::with_capacity(np);
    let mut v = Vec::with_capacity(np);
    for (k, e) in header.entries.iter().enumerate() {
        let shape: Shape = layout[k % np].1;
        let data = read(e.offset, shape.numel());
        match e.kind {
            Kind::Param => params.push((e.name.clone(), Tensor::new(shape, data)?)),
            Kind::AdamM => m.push(data),
            Kind::AdamV => v.push(data),
        }
    }
    Ok(CheckpointData {
        step: header.step,
        config: header.config,
        adam: AdamConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
        },
        t: o.t,
        params,
        m,
        v,
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, net: &Network<T>, opt: &AdamState<T>, step: u64) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(net, opt, step)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    let tmp = dir.join(name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Rebuilds the network and optimizer stored at `path`. Returns the step
/// counter as well.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(Network<T>, AdamState<T>, u64)> {
    let data = decode_checkpoint::<T>(&read_file(path.as_ref())?)?;
    let mut net = Network::new(data.config.clone(), 0)?;
    let mut opt = AdamState::new(&net.params, data.adam);
    let step = data.step;
    apply(data, &mut net, &mut opt);
    Ok((net, opt, step))
}

/// Restores a checkpoint into an existing network and optimizer. Nothing is
/// modified unless the file is valid and its config equals the network's.
pub fn load_into<T: Real>(path: impl AsRef<Path>, net: &mut Network<T>, opt: &mut AdamState<T>) -> Result<u64> {
    let data = decode_checkpoint::<T>(&read_file(path.as_ref())?)?;
    if data.config != *net.config() {
        return Err(Error::CheckpointConfig(config_diff(&data.config, net.config())));
    }
    if opt.m.len() != net.params.len() {
        return Err(Error::Usage("optimizer state does not belong to this network".into()));
    }
    let step = data.step;
    apply(data, net, opt);
    Ok(step)
}

fn apply<T: Real>(data: CheckpointData<T>, net: &mut Network<T>, opt: &mut AdamState<T>) {
    for (p, (_, tensor)) in net.params.iter_mut().zip(data.params) {
        p.tensor = tensor;
        p.grad = None;
    }
    opt.config = data.adam;
    opt.t = data.t;
    opt.m = data.m;
    opt.v = data.v;
}

fn config_diff(stored: &NetworkConfig, target: &NetworkConfig) -> String {
    let a = toml::to_string(stored).unwrap_or_default();
    let b = toml::to_string(target).unwrap_or_default();
    let diffs: Vec<String> = a
        .lines()
        .zip(b.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| format!("stored `{x}`, network `{y}`"))
        .collect();
    if diffs.is_empty() {
        "configs differ".into()
    } else {
        diffs.join("; ")
    }
}
