//! Resume file written next to each training checkpoint: the actor's RNG,
//! run counters and the replay buffer slot for slot. Beam lists shared
//! between transitions are stored once.

use super::RunError;
use crate::agent::checkpoint::{hex, unhex};
use crate::mdp::{Action, Observation, HISTORY};
use crate::replay::{BufferLayout, PrioritizedBuffer, ReplayConfig, ScenePool, Transition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

pub const RESUME_MAGIC: &[u8; 4] = b"CSRS";
pub const RESUME_VERSION: u32 = 1;

pub struct ResumeState {
    pub step: u64,
    pub episodes: u64,
    pub next_checkpoint: u64,
    pub actor_rng: ChaCha8Rng,
    pub buffer: PrioritizedBuffer<Transition>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: u64,
    episodes: u64,
    next_checkpoint: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    next: usize,
    len: usize,
    pushed: u64,
    /// f64 bit pattern in hex.
    max_priority: String,
    stale_updates: u64,
    beams: usize,
    entries: usize,
}

fn corrupt(m: impl Into<String>) -> RunError {
    RunError::CorruptResume(m.into())
}

pub fn encode_resume(state: &ResumeState, pool: &ScenePool) -> Vec<u8> {
    let layout = state.buffer.layout();
    let mut beam_ids: HashMap<*const Vec<u32>, u32> = HashMap::new();
    let mut beams: Vec<Arc<Vec<u32>>> = Vec::new();
    let mut entries = Vec::new();
    let mut beam_index = |b: &Arc<Vec<u32>>| -> u32 {
        *beam_ids.entry(Arc::as_ptr(b)).or_insert_with(|| {
            beams.push(b.clone());
            beams.len() as u32 - 1
        })
    };
    for (slot, t, generation, p) in state.buffer.slots() {
        let scene = pool
            .scenes
            .iter()
            .position(|s| Arc::ptr_eq(s, &t.state.scene))
            .expect("transition scene belongs to the pool") as u32;
        let mut ids = [0u32; 2 * HISTORY];
        for k in 0..HISTORY {
            ids[k] = beam_index(&t.state.beams[k]);
            ids[HISTORY + k] = beam_index(&t.next_state.beams[k]);
        }
        entries.push((slot, generation, p, scene, t, ids));
    }
    let meta = Meta {
        step: state.step,
        episodes: state.episodes,
        next_checkpoint: state.next_checkpoint,
        rng_seed: hex(&state.actor_rng.get_seed()),
        rng_stream: state.actor_rng.get_stream(),
        rng_word_pos: state.actor_rng.get_word_pos().to_string(),
        next: layout.next,
        len: layout.len,
        pushed: layout.pushed,
        max_priority: format!("{:016x}", layout.max_priority.to_bits()),
        stale_updates: layout.stale_updates,
        beams: beams.len(),
        entries: entries.len(),
    };
    let text = toml::to_string(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(RESUME_MAGIC);
    out.extend_from_slice(&RESUME_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for b in &beams {
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        for v in b.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (slot, generation, p, scene, t, ids) in entries {
        out.extend_from_slice(&(slot as u32).to_le_bytes());
        out.extend_from_slice(&generation.to_le_bytes());
        out.extend_from_slice(&p.to_le_bytes());
        out.extend_from_slice(&scene.to_le_bytes());
        out.push(t.action.index() as u8);
        out.extend_from_slice(&t.reward.to_le_bytes());
        out.push(t.done as u8);
        out.push(t.state.adj as u8);
        out.push(t.next_state.adj as u8);
        for id in ids {
            out.extend_from_slice(&id.to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], RunError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, RunError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, RunError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, RunError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, RunError> {
        Ok(f64::from_bits(self.u64()?))
    }
}

pub fn decode_resume(bytes: &[u8], pool: &ScenePool, replay: ReplayConfig) -> Result<ResumeState, RunError> {
    if bytes.len() < 16 || &bytes[..4] != RESUME_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != RESUME_VERSION {
        return Err(corrupt(format!("version {version}, expected {RESUME_VERSION}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("metadata is not UTF-8"))?;
    let meta: Meta = toml::from_str(text).map_err(|e| corrupt(format!("metadata: {e}")))?;

    let mut beams = Vec::with_capacity(meta.beams.min(1 << 20));
    for _ in 0..meta.beams {
        let len = r.u32()? as usize;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| corrupt("beam length"))?)?;
        beams.push(Arc::new(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>()));
    }
    let mut entries = Vec::with_capacity(meta.entries.min(replay.capacity));
    for _ in 0..meta.entries {
        let slot = r.u32()? as usize;
        let generation = r.u64()?;
        let p = r.f64()?;
        let scene = r.u32()? as usize;
        let action = Action::from_index(r.u8()? as usize).ok_or_else(|| corrupt("action"))?;
        let reward = r.f64()?;
        let done = r.u8()? != 0;
        let adj_s = r.u8()? != 0;
        let adj_n = r.u8()? != 0;
        let mut ids = [0usize; 2 * HISTORY];
        for id in ids.iter_mut() {
            *id = r.u32()? as usize;
            if *id >= beams.len() {
                return Err(corrupt("beam index"));
            }
        }
        let sc = pool.scenes.get(scene).ok_or_else(|| corrupt("scene index"))?;
        let obs = |off: usize, adj: bool| Observation {
            scene: sc.clone(),
            beams: std::array::from_fn(|k| beams[ids[off + k]].clone()),
            adj,
        };
        let t = Transition { state: obs(0, adj_s), action, reward, next_state: obs(HISTORY, adj_n), done };
        entries.push((slot, t, generation, p));
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    let bits = u64::from_str_radix(&meta.max_priority, 16).map_err(|_| corrupt("max priority"))?;
    let layout = BufferLayout {
        next: meta.next,
        len: meta.len,
        pushed: meta.pushed,
        max_priority: f64::from_bits(bits),
        stale_updates: meta.stale_updates,
    };
    let buffer = PrioritizedBuffer::from_slots(replay, layout, entries).map_err(|e| corrupt(e.to_string()))?;
    let seed = unhex(&meta.rng_seed).ok_or_else(|| corrupt("rng seed"))?;
    let word_pos: u128 = meta.rng_word_pos.parse().map_err(|_| corrupt("rng position"))?;
    let mut actor_rng = ChaCha8Rng::from_seed(seed);
    actor_rng.set_stream(meta.rng_stream);
    actor_rng.set_word_pos(word_pos);
    Ok(ResumeState {
        step: meta.step,
        episodes: meta.episodes,
        next_checkpoint: meta.next_checkpoint,
        actor_rng,
        buffer,
    })
}
