//! Prioritized experience replay and the actor side of the actor/learner
//! topology.

use crate::agent::{select_action, QNetwork, Trace};
use crate::mdp::{episode_metrics, Action, Env, MdpError, Observation, Outcome, StaticScene};
use crate::scene::SizeClass;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, SyncSender, TryRecvError};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("buffer holds {have} transitions, {want} requested")]
    Underfilled { have: usize, want: usize },
    #[error("invalid replay config: {0}")]
    InvalidConfig(String),
    #[error("channel closed")]
    ChannelClosed,
}

/// Binary tree of partial sums over `capacity` leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let cap = capacity.max(1).next_power_of_two();
        SumTree { capacity: cap, nodes: vec![0.0; 2 * cap] }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.capacity + i]
    }

    /// Sets leaf `i` and recomputes its ancestors from their children.
    pub fn set(&mut self, i: usize, value: f64) {
        let mut n = self.capacity + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative range contains `u`, skipping empty leaves.
    pub fn find(&self, mut u: f64) -> usize {
        let mut n = 1;
        while n < self.capacity {
            let left = self.nodes[2 * n];
            if (u < left && left > 0.0) || self.nodes[2 * n + 1] <= 0.0 {
                n *= 2;
            } else {
                u -= left;
                n = 2 * n + 1;
            }
        }
        n - self.capacity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eps: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig { capacity: 100_000, alpha: 0.6, beta_start: 0.4, beta_end: 1.0, eps: 1e-6 }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: &str| Err(ReplayError::InvalidConfig(m.into()));
        if self.capacity == 0 {
            return bad("capacity must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.beta_start) || !(0.0..=1.0).contains(&self.beta_end) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }

    /// Linear annealing over the run.
    pub fn beta(&self, step: u64, total: u64) -> f64 {
        let f = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
        self.beta_start + (self.beta_end - self.beta_start) * f
    }
}

/// Slot plus the generation it was sampled at, so updates to evicted slots
/// can be detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleIndex {
    pub slot: usize,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub indices: Vec<SampleIndex>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PrioritizedBuffer<T> {
    cfg: ReplayConfig,
    tree: SumTree,
    items: Vec<Option<T>>,
    generations: Vec<u64>,
    next: usize,
    len: usize,
    pushed: u64,
    /// Largest raw priority seen, given to new transitions without one.
    max_priority: f64,
    pub stale_updates: u64,
}

impl<T> PrioritizedBuffer<T> {
    pub fn new(cfg: ReplayConfig) -> Result<Self, ReplayError> {
        cfg.validate()?;
        Ok(PrioritizedBuffer {
            cfg,
            tree: SumTree::new(cfg.capacity),
            items: (0..cfg.capacity).map(|_| None).collect(),
            generations: vec![0; cfg.capacity],
            next: 0,
            len: 0,
            pushed: 0,
            max_priority: 1.0,
            stale_updates: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.cfg.capacity
    }

    pub fn total_priority(&self) -> f64 {
        self.tree.total()
    }

    /// Stored (exponentiated) priority of a slot.
    pub fn priority(&self, slot: usize) -> f64 {
        self.tree.get(slot)
    }

    pub fn get(&self, slot: usize) -> Option<&T> {
        self.items.get(slot)?.as_ref()
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    fn stored(&self, raw: f64) -> f64 {
        raw.max(self.cfg.eps).powf(self.cfg.alpha)
    }

    /// Stores `item` with `max(priority, eps)^alpha`, evicting the oldest
    /// entry when full. Without a priority the current maximum is used.
    pub fn push(&mut self, item: T, priority: Option<f64>) -> usize {
        let raw = priority.unwrap_or(self.max_priority).max(self.cfg.eps);
        self.max_priority = self.max_priority.max(raw);
        let slot = self.next;
        self.items[slot] = Some(item);
        self.pushed += 1;
        self.generations[slot] = self.pushed;
        let p = self.stored(raw);
        self.tree.set(slot, p);
        self.next = (self.next + 1) % self.cfg.capacity;
        self.len = (self.len + 1).min(self.cfg.capacity);
        slot
    }

    /// Stratified proportional sampling with normalized importance weights.
    pub fn sample(&self, batch: usize, beta: f64, rng: &mut impl Rng) -> Result<SampledBatch, ReplayError> {
        if batch == 0 || self.len < batch {
            return Err(ReplayError::Underfilled { have: self.len, want: batch });
        }
        let total = self.tree.total();
        let seg = total / batch as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for i in 0..batch {
            let u = ((i as f64 + rng.gen::<f64>()) * seg).min(total * (1.0 - 1e-12));
            let mut slot = self.tree.find(u);
            if slot >= self.cfg.capacity || self.items[slot].is_none() {
                slot = (0..self.cfg.capacity).rev().find(|&s| self.items[s].is_some()).expect("non-empty buffer");
            }
            let prob = self.tree.get(slot) / total;
            indices.push(SampleIndex { slot, generation: self.generations[slot] });
            weights.push((self.len as f64 * prob).powf(-beta));
        }
        let wmax = weights.iter().cloned().fold(0.0, f64::max);
        for w in weights.iter_mut() {
            *w /= wmax;
        }
        Ok(SampledBatch { indices, weights })
    }

    /// Sets raw priority `|td| + eps`. Slots overwritten since sampling are
    /// skipped and counted.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], td_errors: &[f64]) -> usize {
        let mut stale = 0;
        for (ix, &td) in indices.iter().zip(td_errors) {
            if self.generations.get(ix.slot) != Some(&ix.generation) || self.items[ix.slot].is_none() {
                stale += 1;
                continue;
            }
            let raw = td.abs() + self.cfg.eps;
            self.max_priority = self.max_priority.max(raw);
            let p = self.stored(raw);
            self.tree.set(ix.slot, p);
        }
        self.stale_updates += stale as u64;
        stale
    }

    /// Live entries oldest first, with their stored priorities.
    pub fn iter_ordered(&self) -> impl Iterator<Item = (&T, f64)> + '_ {
        let start = if self.len < self.cfg.capacity { 0 } else { self.next };
        (0..self.len).map(move |i| {
            let s = (start + i) % self.cfg.capacity;
            (self.items[s].as_ref().unwrap(), self.tree.get(s))
        })
    }

    /// Occupied slots with their generation and stored priority.
    pub fn slots(&self) -> impl Iterator<Item = (usize, &T, u64, f64)> + '_ {
        self.items
            .iter()
            .enumerate()
            .filter_map(move |(s, it)| it.as_ref().map(|t| (s, t, self.generations[s], self.tree.get(s))))
    }

    pub fn layout(&self) -> BufferLayout {
        BufferLayout {
            next: self.next,
            len: self.len,
            pushed: self.pushed,
            max_priority: self.max_priority,
            stale_updates: self.stale_updates,
        }
    }

    /// Rebuilds a buffer slot for slot, as captured by `slots` and `layout`.
    pub fn from_slots(
        cfg: ReplayConfig,
        layout: BufferLayout,
        entries: Vec<(usize, T, u64, f64)>,
    ) -> Result<Self, ReplayError> {
        let mut b = Self::new(cfg)?;
        if layout.next >= cfg.capacity || layout.len > cfg.capacity || entries.len() != layout.len {
            return Err(ReplayError::InvalidConfig("buffer layout does not match capacity".into()));
        }
        for (slot, item, generation, p) in entries {
            if slot >= cfg.capacity || b.items[slot].is_some() {
                return Err(ReplayError::InvalidConfig(format!("bad slot {slot}")));
            }
            b.items[slot] = Some(item);
            b.generations[slot] = generation;
            b.tree.set(slot, p);
        }
        b.next = layout.next;
        b.len = layout.len;
        b.pushed = layout.pushed;
        b.max_priority = layout.max_priority;
        b.stale_updates = layout.stale_updates;
        Ok(b)
    }
}

/// Counters needed to rebuild a buffer exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferLayout {
    pub next: usize,
    pub len: usize,
    pub pushed: u64,
    pub max_priority: f64,
    pub stale_updates: u64,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_state: Observation,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Topology {
    /// One actor runs in the learner's thread, deterministically; more
    /// actors run on their own threads.
    pub n_actors: usize,
    pub local_capacity: usize,
    pub queue_bound: usize,
    /// Learner updates between weight broadcasts.
    pub snapshot_every: u64,
}

impl Default for Topology {
    fn default() -> Self {
        Topology { n_actors: 4, local_capacity: 5000, queue_bound: 64, snapshot_every: 400 }
    }
}

impl Topology {
    pub fn validate(&self) -> Result<(), ReplayError> {
        if self.n_actors == 0 || self.local_capacity == 0 || self.queue_bound == 0 || self.snapshot_every == 0 {
            return Err(ReplayError::InvalidConfig("topology sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Scenes an actor draws its episodes from.
#[derive(Debug, Clone)]
pub struct ScenePool {
    pub scenes: Vec<Arc<StaticScene>>,
    pub size_classes: Vec<Vec<SizeClass>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub actor: usize,
    pub scene: usize,
    pub steps: usize,
    pub ret: f64,
    pub outcome: Outcome,
    pub coverage: f64,
    pub p: Option<f64>,
    pub d: Option<f64>,
}

/// One environment driven epsilon-greedily by a weight snapshot.
pub struct Actor {
    pub id: usize,
    env: Option<Env>,
    pool: Arc<ScenePool>,
    cfg: crate::mdp::EnvConfig,
    pub rng: ChaCha8Rng,
    pub net: QNetwork<f32>,
    trace: Trace<f32>,
    obs: Option<Observation>,
    scene: usize,
    ret: f64,
    pub local: Vec<Transition>,
    pub local_capacity: usize,
    pub produced: u64,
}

/// What one actor step produced.
pub struct ActorStep {
    pub transition: Transition,
    pub episode: Option<EpisodeRecord>,
}

impl Actor {
    pub fn new(
        id: usize,
        pool: Arc<ScenePool>,
        cfg: crate::mdp::EnvConfig,
        net: QNetwork<f32>,
        rng: ChaCha8Rng,
        local_capacity: usize,
    ) -> Self {
        Actor {
            id,
            env: None,
            pool,
            cfg,
            rng,
            net,
            trace: Trace::default(),
            obs: None,
            scene: 0,
            ret: 0.0,
            local: Vec::new(),
            local_capacity,
            produced: 0,
        }
    }

    pub fn set_weights(&mut self, params: &[f32]) {
        self.net.params.copy_from_slice(params);
    }

    /// Mid-episode observation, if any.
    pub fn current(&self) -> Option<&Observation> {
        self.obs.as_ref()
    }

    fn start_episode(&mut self) -> Result<(), MdpError> {
        let n = self.pool.scenes.len();
        let mut last = MdpError::ResetFailed(0);
        for _ in 0..n.max(1) * 4 {
            let s = self.rng.gen_range(0..n);
            let mut env = Env::new(self.pool.scenes[s].clone(), self.cfg.clone());
            match env.reset(&mut self.rng) {
                Ok(obs) => {
                    self.env = Some(env);
                    self.obs = Some(obs);
                    self.scene = s;
                    self.ret = 0.0;
                    return Ok(());
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    /// One epsilon-greedy environment step; the transition is also staged
    /// in the local buffer.
    pub fn step(&mut self, epsilon: f64) -> Result<ActorStep, MdpError> {
        if self.obs.is_none() {
            self.start_episode()?;
        }
        let obs = self.obs.take().unwrap();
        let q = self.net.forward_traced(&obs, &mut self.trace).expect("scene matches network input");
        let action = select_action(&q, epsilon, &mut self.rng);
        let env = self.env.as_mut().unwrap();
        let r = env.step(action)?;
        self.ret += r.reward;
        self.produced += 1;
        let t = Transition { state: obs, action, reward: r.reward, next_state: r.obs.clone(), done: r.done };
        self.local.push(t.clone());
        let episode = if r.done {
            let log = env.log().unwrap();
            let m = episode_metrics(log).ok();
            self.obs = None;
            Some(EpisodeRecord {
                actor: self.id,
                scene: self.scene,
                steps: log.steps.len(),
                ret: self.ret,
                outcome: r.outcome,
                coverage: r.info.coverage_fraction,
                p: m.map(|m| m.p),
                d: m.map(|m| m.d),
            })
        } else {
            self.obs = Some(r.obs);
            None
        };
        Ok(ActorStep { transition: t, episode })
    }

    /// The local buffer should be flushed to the learner.
    pub fn should_flush(&self, episode_ended: bool) -> bool {
        !self.local.is_empty() && (episode_ended || self.local.len() >= self.local_capacity)
    }

    pub fn take_local(&mut self) -> Vec<Transition> {
        std::mem::take(&mut self.local)
    }
}

pub enum ActorMsg {
    Transitions { actor: usize, batch: Vec<Transition> },
    Episode(EpisodeRecord),
    Done { actor: usize, produced: u64 },
}

/// Actor thread body: refresh weights when a snapshot is waiting, step,
/// flush locally staged transitions at episode ends or when full. Ends when
/// `stop` is raised or the learner hangs up.
pub fn run_actor(
    mut actor: Actor,
    weights: Receiver<Arc<Vec<f32>>>,
    out: SyncSender<ActorMsg>,
    epsilon_of: impl Fn(u64) -> f64,
    global_step: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
) -> Result<u64, ReplayError> {
    loop {
        let mut latest = None;
        loop {
            match weights.try_recv() {
                Ok(w) => latest = Some(w),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    stop.store(true, Ordering::Relaxed);
                    break;
                }
            }
        }
        if let Some(w) = latest {
            actor.set_weights(&w);
        }
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let eps = epsilon_of(global_step.load(Ordering::Relaxed));
        let step = actor.step(eps).map_err(|e| ReplayError::InvalidConfig(e.to_string()))?;
        let ended = step.episode.is_some();
        if actor.should_flush(ended) {
            let batch = actor.take_local();
            out.send(ActorMsg::Transitions { actor: actor.id, batch }).map_err(|_| ReplayError::ChannelClosed)?;
        }
        if let Some(ep) = step.episode {
            out.send(ActorMsg::Episode(ep)).map_err(|_| ReplayError::ChannelClosed)?;
        }
    }
    let batch = actor.take_local();
    if !batch.is_empty() {
        out.send(ActorMsg::Transitions { actor: actor.id, batch }).map_err(|_| ReplayError::ChannelClosed)?;
    }
    let _ = out.send(ActorMsg::Done { actor: actor.id, produced: actor.produced });
    Ok(actor.produced)
}

/// Common grid dimensions of the pool's scenes.
pub fn pool_dims(pool: &ScenePool) -> Option<[usize; 3]> {
    let d = pool.scenes.first()?.grid.dims;
    pool.scenes.iter().all(|s| s.grid.dims == d).then_some(d)
}
