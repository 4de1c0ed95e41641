//! Binary checkpoint: magic, version, a TOML metadata block, named
//! little-endian f32 arrays, trailing CRC32 over everything before it.

use super::{AgentError, NetConfig, OptimizerState, QNetwork, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSTS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: u64,
    updates: u64,
    dims: [usize; 3],
    optimizer: String,
    adam_t: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    net: NetConfig,
    /// Free-form configuration echo.
    config: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config: String,
}

fn corrupt(m: impl Into<String>) -> AgentError {
    AgentError::CorruptFile(m.into())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

pub fn encode_checkpoint(state: &TrainState, config: &str) -> Vec<u8> {
    let (optimizer, adam_t) = match &state.optimizer {
        OptimizerState::Sgd => ("sgd", 0),
        OptimizerState::Adam { t, .. } => ("adam", *t),
    };
    let meta = Meta {
        step: state.step,
        updates: state.updates,
        dims: state.online.input_dims(),
        optimizer: optimizer.into(),
        adam_t,
        rng_seed: hex(&state.rng.get_seed()),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        net: state.online.config().clone(),
        config: config.into(),
    };
    let text = toml::to_string(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let mut arrays: Vec<(String, &[f32])> = Vec::new();
    for (prefix, net) in [("online", &state.online), ("target", &state.target)] {
        for l in net.layers() {
            arrays.push((format!("{prefix}/{}", l.name), &net.params[l.offset..l.offset + l.len]));
        }
    }
    if let OptimizerState::Adam { m, v, .. } = &state.optimizer {
        arrays.push(("adam/m".into(), m));
        arrays.push(("adam/v".into(), v));
    }
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, data) in arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        for &x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AgentError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, AgentError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, AgentError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, AgentError> {
    if bytes.len() < 12 {
        return Err(corrupt("truncated"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(AgentError::FormatVersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("metadata is not UTF-8"))?;
    let meta: Meta = toml::from_str(text).map_err(|e| corrupt(format!("metadata: {e}")))?;

    let mut online = QNetwork::<f32>::zeros(&meta.net, meta.dims).map_err(|e| corrupt(e.to_string()))?;
    let mut target = online.clone();
    let n_params = online.param_count();
    let mut adam_m = None;
    let mut adam_v = None;
    let count = r.u32()?;
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("array name"))?.to_string();
        let n = r.u32()? as usize;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt("array length"))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let (prefix, layer) = name.split_once('/').ok_or_else(|| corrupt(format!("array name {name}")))?;
        match prefix {
            "online" | "target" => {
                let net = if prefix == "online" { &mut online } else { &mut target };
                let dst = net.layer_mut(layer).ok_or_else(|| corrupt(format!("unknown layer {name}")))?;
                if dst.len() != n {
                    return Err(corrupt(format!("layer {name} has {n} values, expected {}", dst.len())));
                }
                dst.copy_from_slice(&data);
            }
            "adam" if n == n_params && layer == "m" => adam_m = Some(data),
            "adam" if n == n_params && layer == "v" => adam_v = Some(data),
            _ => return Err(corrupt(format!("unexpected array {name}"))),
        }
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    let optimizer = match meta.optimizer.as_str() {
        "sgd" => OptimizerState::Sgd,
        "adam" => OptimizerState::Adam {
            m: adam_m.ok_or_else(|| corrupt("missing adam/m"))?,
            v: adam_v.ok_or_else(|| corrupt("missing adam/v"))?,
            t: meta.adam_t,
        },
        o => return Err(corrupt(format!("unknown optimizer {o}"))),
    };
    let seed = unhex(&meta.rng_seed).ok_or_else(|| corrupt("rng seed"))?;
    let word_pos: u128 = meta.rng_word_pos.parse().map_err(|_| corrupt("rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng_stream);
    rng.set_word_pos(word_pos);

    let n = online.param_count();
    let state = TrainState {
        online,
        target,
        optimizer,
        updates: meta.updates,
        step: meta.step,
        rng,
        grad: vec![0.0; n],
        trace: Default::default(),
    };
    Ok(Checkpoint { state, config: meta.config })
}

fn io_err(path: &Path, e: std::io::Error) -> AgentError {
    AgentError::Io { path: path.display().to_string(), msg: e.to_string() }
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(state: &TrainState, config: &str, path: &Path) -> Result<(), AgentError> {
    let bytes = encode_checkpoint(state, config);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, AgentError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_checkpoint(&bytes)
}
