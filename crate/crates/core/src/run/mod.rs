//! Run orchestration: configuration files, training, evaluation, heatmaps
//! and sweeps.

mod eval;
mod heatmap;
mod persist;
mod train;

pub use eval::{evaluate, trajectory, AggregateRow, EvalRecord, EvalReport, Policy, EVAL_EPISODE_STREAM};
pub use heatmap::{heatmap, HeatmapCell, HeatmapConfig, HeatmapResult};
pub use persist::{decode_resume, encode_resume, ResumeState};
pub use train::{sweep, train, write_report, SweepConfig, SweepRow, SweepRowResult, TrainOutput, ACTOR_STREAM};

use crate::agent::{AgentConfig, AgentError, NetConfig, OptimizerConfig};
use crate::mdp::{EnvConfig, MdpError, StartRule, StaticScene};
use crate::replay::{pool_dims, ReplayConfig, ReplayError, ScenePool, Topology};
use crate::scene::{
    EllipsoidSpec, RibcageParams, RibcageSource, Scenario, ScenarioConfig, SceneError, TargetSource,
};
use crate::seeding::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;

/// Seed streams for the scenes of each role.
pub const TRAIN_SCENE_STREAM: u64 = 100_000;
pub const EVAL_SCENE_STREAM: u64 = 200_000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config version {found} is not supported (expected {expected})")]
    ConfigVersion { found: u32, expected: u32 },
    #[error("cannot parse config: {0}")]
    ConfigParse(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("corrupt resume file: {0}")]
    CorruptResume(String),
    #[error("no feasible target positions")]
    NoFeasiblePositions,
    #[error("learner received {received} transitions, actors produced {produced}")]
    CountMismatch { received: u64, produced: u64 },
}

impl RunError {
    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::InvalidConfig(_) => "invalid_config",
            RunError::ConfigVersion { .. } => "config_version",
            RunError::ConfigParse(_) => "config_parse",
            RunError::Scene(_) => "scene",
            RunError::Mdp(_) => "environment",
            RunError::Agent(AgentError::FormatVersionMismatch { .. }) => "checkpoint_version",
            RunError::Agent(AgentError::CorruptFile(_)) => "checkpoint_corrupt",
            RunError::Agent(AgentError::Io { .. }) => "io",
            RunError::Agent(_) => "agent",
            RunError::Replay(_) => "replay",
            RunError::Io { .. } => "io",
            RunError::CorruptResume(_) => "resume_corrupt",
            RunError::NoFeasiblePositions => "no_feasible_positions",
            RunError::CountMismatch { .. } => "count_mismatch",
        }
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> RunError {
    RunError::Io { path: path.display().to_string(), msg: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Distinct unseen scenes the episodes cycle through.
    pub scenes: usize,
    /// Scenario for evaluation scenes; the training scenario when absent.
    pub scenario: Option<ScenarioConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 100, scenes: 10, scenario: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub scenario: ScenarioConfig,
    /// Number of procedurally seeded training scenes.
    #[serde(default = "one")]
    pub train_scenes: usize,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
    #[serde(default)]
    pub topology: Topology,
    /// Environment steps between checkpoints, 0 for none; written at the
    /// first episode boundary past each multiple.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub heatmap: Option<HeatmapConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_run_id() -> String {
    "run".into()
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, RunError> {
        let v: toml::Value = toml::from_str(text).map_err(|e| RunError::ConfigParse(one_line(&e.to_string())))?;
        match v.get("version").and_then(|v| v.as_integer()) {
            Some(found) if found == CONFIG_VERSION as i64 => {}
            Some(found) => {
                return Err(RunError::ConfigVersion { found: found.max(0) as u32, expected: CONFIG_VERSION })
            }
            None => return Err(RunError::ConfigParse("missing integer field `version`".into())),
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RunError::ConfigParse(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(RunConfig, String), RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::InvalidConfig(m));
        if self.version != CONFIG_VERSION {
            return Err(RunError::ConfigVersion { found: self.version, expected: CONFIG_VERSION });
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return bad("run_id must be a non-empty file name".into());
        }
        self.scenario.validate()?;
        if let Some(s) = &self.eval.scenario {
            s.validate()?;
            if s.grid_dim() != self.scenario.grid_dim() {
                return bad("evaluation scenario grid differs from the training grid".into());
            }
        }
        if self.train_scenes == 0 || self.eval.scenes == 0 {
            return bad("scene counts must be positive".into());
        }
        self.env.validate().map_err(RunError::InvalidConfig)?;
        self.agent.validate()?;
        let n = self.scenario.grid_dim();
        self.agent.net.validate([n; 3])?;
        self.replay.validate()?;
        self.topology.validate()?;
        if self.replay.capacity < self.agent.batch_size {
            return bad("replay capacity is smaller than the batch size".into());
        }
        if let Some(h) = &self.heatmap {
            h.validate()?;
        }
        if let Some(s) = &self.sweep {
            if s.rows.is_empty() {
                return bad("sweep has no rows".into());
            }
            for r in &s.rows {
                let mut rp = self.env.reward;
                rp.t_th = r.t_th;
                rp.alpha1 = r.alpha1;
                rp.alpha2 = r.alpha2;
                rp.validate().map_err(RunError::InvalidConfig)?;
            }
        }
        Ok(())
    }

    /// One rib pair with a 25 mm gap, a small ellipsoid centred under the
    /// gap and a fixed start beside it, sized for a few thousand updates.
    pub fn toy() -> RunConfig {
        let ribs = RibcageParams::uniform(2, 25.0, 6.0);
        let h = ribs.gap_center(0);
        let scenario = ScenarioConfig {
            ribcage: RibcageSource::Procedural(ribs),
            targets: TargetSource::Ellipsoids {
                targets: vec![EllipsoidSpec::fixed([h, 0.0, 105.0], [8.0, 8.0, 8.0], [0.0; 3])],
            },
            n_targets: 1,
            randomize_target_count: false,
            grid_extent: 120.0,
            resolution: 4.0,
            generic_radius: None,
        };
        let mut env = EnvConfig::default();
        env.start = StartRule::Fixed { pose: [0.0, -12.0, 0.0, 0.0], relative: true, jitter: [4.0, 3.0, 10.0, 0.0] };
        let agent = AgentConfig {
            learning_rate: 5e-4,
            gamma: 0.9,
            target_sync_every: 500,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_steps: 10_000,
            batch_size: 32,
            total_steps: 20_000,
            train_every: 4,
            learn_start: 500,
            optimizer: OptimizerConfig::adam(),
            grad_clip: Some(10.0),
            net: NetConfig::reduced(),
        };
        RunConfig {
            version: CONFIG_VERSION,
            run_id: "toy".into(),
            out_dir: None,
            seed: 7,
            scenario,
            train_scenes: 1,
            env,
            agent,
            replay: ReplayConfig { capacity: 20_000, ..ReplayConfig::default() },
            topology: Topology { n_actors: 1, ..Topology::default() },
            checkpoint_every: 0,
            eval: EvalConfig { episodes: 50, scenes: 1, scenario: None },
            heatmap: None,
            sweep: None,
        }
    }

    /// Three ribs leaving one wide and one 10 mm gap, for heatmap studies.
    pub fn two_gap() -> RunConfig {
        let mut cfg = Self::toy();
        cfg.run_id = "two_gap".into();
        let mut ribs = RibcageParams::uniform(3, 25.0, 6.0);
        ribs.gaps = vec![25.0, 10.0];
        let wide = ribs.gap_center(0);
        let narrow = ribs.gap_center(1);
        // targets spread over the mapped region, so both gaps are seen in training
        let (lo, hi) = (wide - 8.0, narrow + 8.0);
        let mut target = EllipsoidSpec::fixed([0.5 * (lo + hi), 0.0, 105.0], [8.0, 8.0, 8.0], [0.0; 3]);
        target.center_spread = [0.5 * (hi - lo), 8.0, 5.0];
        cfg.scenario.targets = TargetSource::Ellipsoids { targets: vec![target] };
        cfg.scenario.ribcage = RibcageSource::Procedural(ribs);
        cfg.train_scenes = 16;
        cfg.eval.scenes = 16;
        cfg.heatmap = Some(HeatmapConfig {
            semi_axes: [8.0, 8.0, 8.0],
            h: [wide - 8.0, narrow + 8.0, 4.0],
            theta: [-8.0, 8.0, 8.0],
            depth: [100.0, 110.0, 10.0],
            episodes: 20,
        });
        cfg
    }

    /// Environment configuration with the reward weights of a sweep row.
    pub fn with_reward(&self, t_th: f64, alpha1: f64, alpha2: f64) -> RunConfig {
        let mut c = self.clone();
        c.env.reward.t_th = t_th;
        c.env.reward.alpha1 = alpha1;
        c.env.reward.alpha2 = alpha2;
        c
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Builds `count` scenes with seeds derived from `seed` on the given stream.
pub fn build_pool(scn: &ScenarioConfig, seed: u64, stream: u64, count: usize) -> Result<ScenePool, RunError> {
    let mut scenes = Vec::with_capacity(count);
    let mut size_classes = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let s = Scenario::build(scn, derive_seed(seed, stream + i))?;
        size_classes.push(s.targets.iter().map(|t| t.size_class).collect());
        scenes.push(Arc::new(StaticScene::from_scenario(&s)));
    }
    let pool = ScenePool { scenes, size_classes };
    if pool_dims(&pool).is_none() {
        return Err(RunError::InvalidConfig("scene grids differ in size".into()));
    }
    Ok(pool)
}

pub fn train_pool(cfg: &RunConfig) -> Result<ScenePool, RunError> {
    build_pool(&cfg.scenario, cfg.seed, TRAIN_SCENE_STREAM, cfg.train_scenes)
}

pub fn eval_pool(cfg: &RunConfig) -> Result<ScenePool, RunError> {
    let scn = cfg.eval.scenario.as_ref().unwrap_or(&cfg.scenario);
    build_pool(scn, cfg.seed, EVAL_SCENE_STREAM, cfg.eval.scenes)
}
