//! Dueling double deep Q-learning: action selection, targets, updates and
//! checkpoints.

pub(crate) mod checkpoint;
mod net;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{DenseInput, LayerInfo, NetConfig, NetInput, QNetwork, Scalar, Trace};

use crate::mdp::{Action, N_ACTIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("input shape {got:?} does not match network input {expected:?}")]
    ShapeMismatch { expected: [usize; 3], got: [usize; 3] },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { loss: f64, step: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam { beta1: beta1(), beta2: beta2(), eps: adam_eps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub target_sync_every: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Environment steps per gradient update.
    pub train_every: u64,
    /// Environment steps before the first update.
    pub learn_start: u64,
    pub optimizer: OptimizerConfig,
    /// Optional bound on the global gradient norm.
    pub grad_clip: Option<f64>,
    pub net: NetConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            learning_rate: 7e-5,
            gamma: 0.99,
            target_sync_every: 5000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_steps: 3_000_000,
            batch_size: 32,
            total_steps: 5_000_000,
            train_every: 4,
            learn_start: 1000,
            optimizer: OptimizerConfig::Sgd,
            grad_clip: None,
            net: NetConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        let unit = |e: f64| (0.05..=1.0).contains(&e);
        if !unit(self.eps_start) || !unit(self.eps_end) {
            return bad("epsilon must lie in [0.05, 1]");
        }
        if self.batch_size == 0 || self.train_every == 0 || self.target_sync_every == 0 {
            return bad("batch_size, train_every and target_sync_every must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end`, then constant.
    pub fn epsilon(&self, step: u64) -> f64 {
        if step >= self.eps_decay_steps {
            return self.eps_end;
        }
        let f = step as f64 / self.eps_decay_steps as f64;
        self.eps_start + (self.eps_end - self.eps_start) * f
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(q: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy. Always draws the exploration coin so the random stream
/// does not depend on `q`.
pub fn select_action<T: PartialOrd + Copy>(q: &[T], epsilon: f64, rng: &mut impl Rng) -> Action {
    let explore = rng.gen::<f64>() < epsilon;
    let i = if explore { rng.gen_range(0..N_ACTIONS) } else { argmax(q) };
    Action::from_index(i).expect("nine actions")
}

/// Double-DQN target: the online net picks the action, the target net
/// evaluates it.
pub fn td_target(reward: f64, done: bool, q_online_next: &[f64], q_target_next: &[f64], gamma: f64) -> f64 {
    if done {
        return reward;
    }
    reward + gamma * q_target_next[argmax(q_online_next)]
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam { m: Vec<f32>, v: Vec<f32>, t: u64 },
}

pub struct TrainSample<'a, I> {
    pub state: &'a I,
    pub action: Action,
    pub reward: f64,
    pub next_state: &'a I,
    pub done: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    /// `|y - Q(s, a)|` per sample, before the update.
    pub td_errors: Vec<f64>,
    pub grad_norm: f64,
}

/// Online and target networks, optimizer state, update counter and the
/// learner's random stream.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub online: QNetwork<f32>,
    pub target: QNetwork<f32>,
    pub optimizer: OptimizerState,
    /// Gradient updates applied so far.
    pub updates: u64,
    /// Environment steps consumed so far.
    pub step: u64,
    pub rng: ChaCha8Rng,
    grad: Vec<f32>,
    trace: Trace<f32>,
}

impl TrainState {
    /// Online net initialized from `seed`; the target starts as an exact copy.
    pub fn new(cfg: &AgentConfig, dims: [usize; 3], seed: u64) -> Result<Self, AgentError> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(crate::seeding::derive_seed(seed, 10));
        let online = QNetwork::new(&cfg.net, dims, &mut init)?;
        Ok(Self::from_parts(cfg, online.clone(), online, ChaCha8Rng::seed_from_u64(crate::seeding::derive_seed(seed, 11))))
    }

    pub fn from_parts(cfg: &AgentConfig, online: QNetwork<f32>, target: QNetwork<f32>, rng: ChaCha8Rng) -> Self {
        let n = online.param_count();
        let optimizer = match cfg.optimizer {
            OptimizerConfig::Sgd => OptimizerState::Sgd,
            OptimizerConfig::Adam { .. } => OptimizerState::Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 },
        };
        TrainState { online, target, optimizer, updates: 0, step: 0, rng, grad: vec![0.0; n], trace: Trace::default() }
    }

    pub fn sync_target(&mut self) {
        self.target.params.copy_from_slice(&self.online.params);
    }

    /// One gradient step on the importance-weighted squared TD error.
    /// Targets are computed from the weights before the step.
    pub fn train_batch<I: NetInput>(&mut self, cfg: &AgentConfig, batch: &[TrainSample<'_, I>]) -> Result<BatchStats, AgentError> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let mut targets = Vec::with_capacity(batch.len());
        for s in batch {
            let y = if s.done {
                s.reward
            } else {
                let qo = self.online.forward_traced(s.next_state, &mut self.trace)?.map(|v| v as f64);
                let qt = self.target.forward_traced(s.next_state, &mut self.trace)?.map(|v| v as f64);
                td_target(s.reward, false, &qo, &qt, cfg.gamma)
            };
            targets.push(y);
        }
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        let b = batch.len() as f64;
        let mut loss = 0.0;
        let mut td_errors = Vec::with_capacity(batch.len());
        for (s, &y) in batch.iter().zip(&targets) {
            let q = self.online.forward_traced(s.state, &mut self.trace)?;
            let a = s.action.index();
            let td = y - q[a] as f64;
            loss += s.weight * td * td;
            td_errors.push(td.abs());
            let mut dq = [0f32; N_ACTIONS];
            dq[a] = (-2.0 * s.weight * td / b) as f32;
            self.online.backward(&self.trace, &dq, &mut self.grad);
        }
        loss /= b;
        let norm = self.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(AgentError::NonFiniteLoss { loss, step: self.step });
        }
        let scale = match cfg.grad_clip {
            Some(c) if norm > c => (c / norm) as f32,
            _ => 1.0,
        };
        let lr = cfg.learning_rate;
        match (&mut self.optimizer, cfg.optimizer) {
            (OptimizerState::Adam { m, v, t }, OptimizerConfig::Adam { beta1, beta2, eps }) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                let step = (lr * c2.sqrt() / c1) as f32;
                let (b1, b2, eps) = (beta1 as f32, beta2 as f32, (eps * c2.sqrt()) as f32);
                for i in 0..self.grad.len() {
                    let g = self.grad[i] * scale;
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    self.online.params[i] -= step * m[i] / (v[i].sqrt() + eps);
                }
            }
            _ => {
                let lr = lr as f32 * scale;
                for (w, g) in self.online.params.iter_mut().zip(&self.grad) {
                    *w -= lr * g;
                }
            }
        }
        self.updates += 1;
        Ok(BatchStats { loss, td_errors, grad_norm: norm })
    }
}
