//! The scanning environment: discrete probe actions on the cylinder frame,
//! mode switching, shaped rewards, termination and the stacked voxel state.

use crate::acoustics::{render_imaging_plane, GateMode, ImagingPlaneResult, ProbeModel, ShadowGate};
use crate::geometry::{
    centerline_surface_angle, probe_pose, project_to_skin, wrap_degrees, wrap_signed_degrees, Channel, CylinderFrame,
    GeometryError, Pose, SkinSurface, Vec3, VoxelGrid,
};
use crate::scene::Scenario;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

pub const N_ACTIONS: usize = 9;
pub const HISTORY: usize = 3;
pub const STATE_CHANNELS: usize = 3 * HISTORY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    HPlus = 0,
    HMinus = 1,
    ThetaPlus = 2,
    ThetaMinus = 3,
    PhiPlus = 4,
    PhiMinus = 5,
    PsiPlus = 6,
    PsiMinus = 7,
    Switch = 8,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::HPlus,
        Action::HMinus,
        Action::ThetaPlus,
        Action::ThetaMinus,
        Action::PhiPlus,
        Action::PhiMinus,
        Action::PsiPlus,
        Action::PsiMinus,
        Action::Switch,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        ["H+", "H-", "THETA+", "THETA-", "PHI+", "PHI-", "PSI+", "PSI-", "SWITCH"][self.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSteps {
    pub h: f64,
    pub theta: f64,
    pub phi: f64,
    pub psi: f64,
}

impl Default for ActionSteps {
    fn default() -> Self {
        ActionSteps { h: 4.0, theta: 3.0, phi: 2.0, psi: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndRewardDistance {
    /// `D = mean(d_t / R_c)`.
    Literal,
    /// `D = mean(exp(-d_t / R_c))`.
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalBonus {
    /// The success step earns its ordinary reward plus `r_end`.
    Additive,
    /// The success step earns `r_end` only.
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub t_th: f64,
    pub gate_mode: GateMode,
    pub k_end: f64,
    pub success_fraction: f64,
    pub switch_penalty: f64,
    pub shadow_penalty: f64,
    pub end_reward_distance_mode: EndRewardDistance,
    pub terminal_bonus: TerminalBonus,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            alpha1: 1.0,
            alpha2: 0.5,
            t_th: 0.8,
            gate_mode: GateMode::NonShadow,
            k_end: 10.0,
            success_fraction: 0.95,
            switch_penalty: -1.0,
            shadow_penalty: -0.1,
            end_reward_distance_mode: EndRewardDistance::Literal,
            terminal_bonus: TerminalBonus::Additive,
        }
    }
}

impl RewardParams {
    pub fn gate(&self) -> ShadowGate {
        ShadowGate { threshold: self.t_th, mode: self.gate_mode }
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.alpha1) || !unit(self.alpha2) || !unit(self.t_th) {
            return Err("alpha1, alpha2 and t_th must lie in [0, 1]".into());
        }
        if !(self.k_end > 0.0) {
            return Err("k_end must be positive".into());
        }
        if !(self.success_fraction > 0.0 && self.success_fraction <= 1.0) {
            return Err("success_fraction must lie in (0, 1]".into());
        }
        if !self.switch_penalty.is_finite() || !self.shadow_penalty.is_finite() {
            return Err("penalties must be finite".into());
        }
        Ok(())
    }

    /// Step reward on the examining branch with an admitted plane.
    pub fn step_reward(&self, n_t: usize, n_total: usize, d_t: f64, r_c: f64, p_t: f64) -> f64 {
        n_t as f64 / n_total as f64 + self.alpha1 * (-d_t / r_c).exp() + self.alpha2 * (1.0 - p_t)
    }

    /// Terminal bonus from the episode's mean distance and visibility terms.
    pub fn end_reward(&self, d_mean: f64, p_mean: f64) -> f64 {
        self.k_end * (1.0 + self.alpha1 * d_mean + self.alpha2 * p_mean)
    }
}

/// Probe coordinates: `h` in mm, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeState {
    pub h: f64,
    pub theta: f64,
    pub phi: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StartRule {
    /// Uniform `(h, theta)` with `phi = psi = 0`. With `around_target`, `h`
    /// and `theta` are drawn within `±[dh, dtheta]` of the target centroid
    /// instead of over the whole frame.
    Random {
        #[serde(default = "default_tries")]
        max_tries: u32,
        #[serde(default)]
        around_target: Option<[f64; 2]>,
    },
    /// A fixed pose, optionally jittered uniformly by `±jitter` per coordinate.
    /// `h` and `theta` are offsets from the target centroid when `relative`.
    Fixed {
        pose: [f64; 4],
        #[serde(default)]
        relative: bool,
        #[serde(default)]
        jitter: [f64; 4],
    },
}

fn default_tries() -> u32 {
    100
}

impl Default for StartRule {
    fn default() -> Self {
        StartRule::Random { max_tries: default_tries(), around_target: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub max_steps: u32,
    pub max_surface_angle: f64,
    pub steps: ActionSteps,
    pub probe: ProbeModel,
    pub reward: RewardParams,
    pub start: StartRule,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_steps: 80,
            max_surface_angle: 20.0,
            steps: ActionSteps::default(),
            probe: ProbeModel::default(),
            reward: RewardParams::default(),
            start: StartRule::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_steps == 0 {
            return Err("max_steps must be positive".into());
        }
        if !(self.max_surface_angle > 0.0 && self.max_surface_angle <= 90.0) {
            return Err("max_surface_angle must lie in (0, 90]".into());
        }
        let s = &self.steps;
        if !(s.h > 0.0 && s.theta > 0.0 && s.phi > 0.0 && s.psi > 0.0) {
            return Err("action step sizes must be positive".into());
        }
        self.probe.validate()?;
        self.reward.validate()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("no valid start pose after {0} tries")]
    ResetFailed(u32),
    #[error("step called on a finished episode")]
    SteppedDone,
    #[error("step called before reset")]
    NotReset,
    #[error("episode has no examining-mode steps")]
    EmptyEpisode,
    #[error("history must hold exactly {HISTORY} grids")]
    BadHistory,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Static part of the state: target and bone channels, plus what the
/// environment needs to place the probe.
#[derive(Debug, Clone)]
pub struct StaticScene {
    pub grid: VoxelGrid,
    pub target_voxels: Vec<usize>,
    pub bone_voxels: Vec<usize>,
    pub frame: CylinderFrame,
    pub skin: SkinSurface,
    /// `(h, theta)` of the target centroid.
    pub target_cyl: (f64, f64),
}

impl StaticScene {
    pub fn from_scenario(s: &Scenario) -> Self {
        let mut grid = s.grid.clone();
        grid.clear_channel(Channel::Beam);
        let target_voxels = grid.occupied(Channel::Target);
        let bone_voxels = grid.occupied(Channel::Bone);
        let mut c = Vec3::ZERO;
        for &f in &target_voxels {
            c += grid.voxel_center(grid.unflat(f));
        }
        let c = c / target_voxels.len().max(1) as f64;
        let (h, theta, _) = s.anatomy.frame.cartesian_to_cyl(c);
        StaticScene {
            grid,
            target_voxels,
            bone_voxels,
            frame: s.anatomy.frame,
            skin: s.anatomy.skin.clone(),
            target_cyl: (h, theta),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.len()
    }
}

/// Compact state: the static channels are shared, each history slot stores
/// only its beam voxels. Slot 0 is the oldest.
#[derive(Debug, Clone)]
pub struct Observation {
    pub scene: Arc<StaticScene>,
    pub beams: [Arc<Vec<u32>>; HISTORY],
    pub adj: bool,
}

impl Observation {
    pub fn dims(&self) -> [usize; 3] {
        self.scene.grid.dims
    }

    pub fn mode_scalar(&self) -> f32 {
        self.adj as u8 as f32
    }

    /// Calls `f(channel, flat)` for every set voxel of the stacked state,
    /// channel `3 * slot + c`.
    pub fn for_each_active(&self, mut f: impl FnMut(usize, usize)) {
        for (slot, beam) in self.beams.iter().enumerate() {
            for &v in &self.scene.target_voxels {
                f(3 * slot, v);
            }
            for &v in &self.scene.bone_voxels {
                f(3 * slot + 1, v);
            }
            for &v in beam.iter() {
                f(3 * slot + 2, v as usize);
            }
        }
    }

    pub fn active_count(&self) -> usize {
        let s = &self.scene;
        self.beams.iter().map(|b| s.target_voxels.len() + s.bone_voxels.len() + b.len()).sum()
    }

    /// Dense `9 × nx × ny × nz` binary tensor, channel-major.
    pub fn dense(&self) -> Vec<u8> {
        let n = self.scene.n_voxels();
        let mut t = vec![0u8; STATE_CHANNELS * n];
        self.for_each_active(|c, v| t[c * n + v] = 1);
        t
    }
}

/// Stacks three grids (oldest first) into a `9 × n` binary tensor; the mode
/// flag travels alongside as a scalar.
pub fn assemble_state_tensor(history: &[&VoxelGrid], adj: bool) -> Result<(Vec<u8>, f32), MdpError> {
    if history.len() != HISTORY || history.iter().any(|g| g.dims != history[0].dims) {
        return Err(MdpError::BadHistory);
    }
    let n = history[0].len();
    let mut t = Vec::with_capacity(STATE_CHANNELS * n);
    for g in history {
        for c in [Channel::Target, Channel::Bone, Channel::Beam] {
            t.extend_from_slice(g.channel(c));
        }
    }
    Ok((t, adj as u8 as f32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Running,
    Success,
    StepLimit,
    AngleAbort,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Running => "RUNNING",
            Outcome::Success => "SUCCESS",
            Outcome::StepLimit => "STEP_LIMIT",
            Outcome::AngleAbort => "ANGLE_ABORT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub p_t: f64,
    pub d_t: f64,
    pub n_t: usize,
    pub coverage_fraction: f64,
    pub step_reward: f64,
    pub end_reward: f64,
    pub gate_passed: bool,
    pub surface_angle: f64,
    /// The move left the skin or the frame and was undone.
    pub reverted: bool,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub outcome: Outcome,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u32,
    pub action: Action,
    pub probe: ProbeState,
    pub adj: bool,
    pub p_t: f64,
    pub d_t: f64,
    pub reward: f64,
    pub covered_fraction: f64,
    /// Counted towards `P` and `D`: examining mode and not a switch.
    pub examining: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub start: ProbeState,
    pub steps: Vec<StepLog>,
    pub outcome: Outcome,
    pub r_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub steps: usize,
    pub p: f64,
    pub d: f64,
}

/// Success, length and the mean visibility `P` and normalized distance `D`
/// over examining-mode steps.
pub fn episode_metrics(log: &EpisodeLog) -> Result<EpisodeMetrics, MdpError> {
    let ex: Vec<&StepLog> = log.steps.iter().filter(|s| s.examining).collect();
    if ex.is_empty() {
        return Err(MdpError::EmptyEpisode);
    }
    let n = ex.len() as f64;
    Ok(EpisodeMetrics {
        success: log.outcome == Outcome::Success,
        steps: log.steps.len(),
        p: ex.iter().map(|s| 1.0 - s.p_t).sum::<f64>() / n,
        d: ex.iter().map(|s| s.d_t / log.r_c).sum::<f64>() / n,
    })
}

/// Trajectory CSV: one row per step.
pub fn trajectory_csv(log: &EpisodeLog) -> String {
    let mut s = String::from("step,h,theta,phi,psi,adj,p_t,d_t,reward,covered_fraction\n");
    for r in &log.steps {
        let p = r.probe;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step, p.h, p.theta, p.phi, p.psi, r.adj as u8, r.p_t, r.d_t, r.reward, r.covered_fraction
        );
    }
    s
}

struct Episode {
    probe: ProbeState,
    pose: Pose,
    adj: bool,
    covered: Vec<bool>,
    n_covered: usize,
    history: [Arc<Vec<u32>>; HISTORY],
    outcome: Outcome,
    log: EpisodeLog,
    d_sum: f64,
    p_sum: f64,
    n_examining: usize,
}

pub struct Env {
    scene: Arc<StaticScene>,
    cfg: EnvConfig,
    ep: Option<Episode>,
}

impl Env {
    pub fn new(scene: Arc<StaticScene>, cfg: EnvConfig) -> Self {
        Env { scene, cfg, ep: None }
    }

    pub fn scene(&self) -> &Arc<StaticScene> {
        &self.scene
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn r_c(&self) -> f64 {
        self.scene.frame.radius
    }

    pub fn n_target(&self) -> usize {
        self.scene.target_voxels.len()
    }

    pub fn probe(&self) -> Option<ProbeState> {
        self.ep.as_ref().map(|e| e.probe)
    }

    pub fn pose(&self) -> Option<Pose> {
        self.ep.as_ref().map(|e| e.pose)
    }

    pub fn adj(&self) -> bool {
        self.ep.as_ref().map_or(false, |e| e.adj)
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.ep.as_ref().map(|e| e.outcome)
    }

    pub fn coverage_fraction(&self) -> f64 {
        self.ep.as_ref().map_or(0.0, |e| e.n_covered as f64 / self.n_target().max(1) as f64)
    }

    pub fn covered_mask(&self) -> Option<&[bool]> {
        self.ep.as_ref().map(|e| e.covered.as_slice())
    }

    pub fn log(&self) -> Option<&EpisodeLog> {
        self.ep.as_ref().map(|e| &e.log)
    }

    /// Pose at probe coordinates, or `None` without skin contact inside the frame.
    fn place(&self, p: &ProbeState) -> Option<(Pose, f64)> {
        let f = &self.scene.frame;
        if p.h < f.h_min || p.h > f.h_max {
            return None;
        }
        let contact = project_to_skin(f, p.h, p.theta, &self.scene.skin).ok()?;
        let pose = probe_pose(f, contact.point, p.phi, p.psi);
        let angle = centerline_surface_angle(&pose, contact.normal);
        Some((pose, angle))
    }

    fn render(&self, pose: &Pose, covered: &[bool]) -> ImagingPlaneResult {
        render_imaging_plane(
            &self.scene.grid,
            pose,
            &self.cfg.probe,
            covered,
            &self.scene.target_voxels,
            &self.cfg.reward.gate(),
        )
    }

    fn observation(&self) -> Observation {
        let e = self.ep.as_ref().expect("episode started");
        Observation { scene: self.scene.clone(), beams: e.history.clone(), adj: e.adj }
    }

    fn start_pose(&self, rng: &mut impl Rng) -> Result<(ProbeState, Pose), MdpError> {
        let f = &self.scene.frame;
        let (th, tt) = self.scene.target_cyl;
        let ok = |p: &ProbeState| self.place(p).filter(|(_, a)| *a <= self.cfg.max_surface_angle);
        match &self.cfg.start {
            StartRule::Random { max_tries, around_target } => {
                for _ in 0..*max_tries {
                    let (h, theta) = match around_target {
                        None => (rng.gen_range(f.h_min..=f.h_max), rng.gen_range(0.0..360.0)),
                        Some([dh, dt]) => (
                            (th + rng.gen_range(-1.0..=1.0) * dh).clamp(f.h_min, f.h_max),
                            wrap_degrees(tt + rng.gen_range(-1.0..=1.0) * dt),
                        ),
                    };
                    let p = ProbeState { h, theta, phi: 0.0, psi: 0.0 };
                    if let Some((pose, _)) = ok(&p) {
                        return Ok((p, pose));
                    }
                }
                Err(MdpError::ResetFailed(*max_tries))
            }
            StartRule::Fixed { pose, relative, jitter } => {
                let mut j = [0.0; 4];
                for (i, slot) in j.iter_mut().enumerate() {
                    if jitter[i] > 0.0 {
                        *slot = rng.gen_range(-1.0..=1.0) * jitter[i];
                    }
                }
                let (bh, bt) = if *relative { (th, tt) } else { (0.0, 0.0) };
                let p = ProbeState {
                    h: bh + pose[0] + j[0],
                    theta: wrap_degrees(bt + pose[1] + j[1]),
                    phi: pose[2] + j[2],
                    psi: pose[3] + j[3],
                };
                let (pose, _) = ok(&p).ok_or(MdpError::ResetFailed(1))?;
                Ok((p, pose))
            }
        }
    }

    /// Starts an episode. The initial plane fills all history slots and
    /// counts no coverage.
    pub fn reset(&mut self, rng: &mut impl Rng) -> Result<Observation, MdpError> {
        let (probe, pose) = self.start_pose(rng)?;
        self.reset_to(probe, pose)
    }

    /// Starts an episode at the given probe coordinates.
    pub fn reset_at(&mut self, probe: ProbeState) -> Result<Observation, MdpError> {
        let (pose, angle) = self.place(&probe).ok_or(MdpError::ResetFailed(1))?;
        if angle > self.cfg.max_surface_angle {
            return Err(MdpError::ResetFailed(1));
        }
        self.reset_to(probe, pose)
    }

    fn reset_to(&mut self, probe: ProbeState, pose: Pose) -> Result<Observation, MdpError> {
        let covered = vec![false; self.scene.n_voxels()];
        let plane = self.render(&pose, &covered);
        let beam: Arc<Vec<u32>> = Arc::new(plane.insonified.iter().map(|&f| f as u32).collect());
        self.ep = Some(Episode {
            probe,
            pose,
            adj: false,
            covered,
            n_covered: 0,
            history: [beam.clone(), beam.clone(), beam],
            outcome: Outcome::Running,
            log: EpisodeLog { start: probe, steps: Vec::new(), outcome: Outcome::Running, r_c: self.r_c() },
            d_sum: 0.0,
            p_sum: 0.0,
            n_examining: 0,
        });
        Ok(self.observation())
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, MdpError> {
        let steps = self.cfg.steps;
        let rp = self.cfg.reward;
        let r_c = self.r_c();
        let n_total = self.n_target().max(1);
        let (mut probe, adj_before) = match &self.ep {
            None => return Err(MdpError::NotReset),
            Some(e) if e.outcome != Outcome::Running => return Err(MdpError::SteppedDone),
            Some(e) => (e.probe, e.adj),
        };
        let previous = probe;
        let mut adj = adj_before;
        match action {
            Action::HPlus => probe.h += steps.h,
            Action::HMinus => probe.h -= steps.h,
            Action::ThetaPlus => probe.theta = wrap_degrees(probe.theta + steps.theta),
            Action::ThetaMinus => probe.theta = wrap_degrees(probe.theta - steps.theta),
            Action::PhiPlus => probe.phi = wrap_signed_degrees(probe.phi + steps.phi),
            Action::PhiMinus => probe.phi = wrap_signed_degrees(probe.phi - steps.phi),
            Action::PsiPlus => probe.psi += steps.psi,
            Action::PsiMinus => probe.psi -= steps.psi,
            Action::Switch => adj = !adj,
        }
        let (pose, angle, reverted) = match self.place(&probe) {
            Some((pose, angle)) => (pose, angle, false),
            None => {
                probe = previous;
                let e = self.ep.as_ref().unwrap();
                let angle = self.place(&previous).map_or(0.0, |(_, a)| a);
                (e.pose, angle, true)
            }
        };
        let aborted = angle > self.cfg.max_surface_angle;

        let e = self.ep.as_ref().unwrap();
        let plane = self.render(&pose, &e.covered);
        let examining = !adj && action != Action::Switch;
        let (step_reward, gained): (f64, &[usize]) = if action == Action::Switch {
            (rp.switch_penalty, &[])
        } else if adj {
            (0.0, &[])
        } else if !plane.gate_passed {
            (rp.shadow_penalty, &[])
        } else {
            let n_t = plane.covered_target.len();
            (rp.step_reward(n_t, n_total, plane.d_t, r_c, plane.p_t), &plane.covered_target)
        };
        let n_t = gained.len();

        let e = self.ep.as_mut().unwrap();
        for &f in gained {
            e.covered[f] = true;
        }
        e.n_covered += n_t;
        if examining {
            e.d_sum += match rp.end_reward_distance_mode {
                EndRewardDistance::Literal => plane.d_t / r_c,
                EndRewardDistance::Exp => (-plane.d_t / r_c).exp(),
            };
            e.p_sum += 1.0 - plane.p_t;
            e.n_examining += 1;
        }
        let coverage_fraction = e.n_covered as f64 / n_total as f64;
        let step_no = e.log.steps.len() as u32 + 1;

        let mut reward = step_reward;
        let mut end_reward = 0.0;
        let outcome = if aborted {
            Outcome::AngleAbort
        } else if !adj && e.n_covered as f64 >= rp.success_fraction * n_total as f64 {
            let k = e.n_examining.max(1) as f64;
            end_reward = rp.end_reward(e.d_sum / k, e.p_sum / k);
            reward = match rp.terminal_bonus {
                TerminalBonus::Additive => step_reward + end_reward,
                TerminalBonus::Exclusive => end_reward,
            };
            Outcome::Success
        } else if step_no >= self.cfg.max_steps {
            Outcome::StepLimit
        } else {
            Outcome::Running
        };

        e.probe = probe;
        e.pose = pose;
        e.adj = adj;
        e.outcome = outcome;
        let beam: Arc<Vec<u32>> = Arc::new(plane.insonified.iter().map(|&f| f as u32).collect());
        e.history.rotate_left(1);
        e.history[HISTORY - 1] = beam;
        e.log.outcome = outcome;
        e.log.steps.push(StepLog {
            step: step_no,
            action,
            probe,
            adj,
            p_t: plane.p_t,
            d_t: plane.d_t,
            reward,
            covered_fraction: coverage_fraction,
            examining,
        });

        Ok(StepResult {
            obs: self.observation(),
            reward,
            done: outcome != Outcome::Running,
            outcome,
            info: StepInfo {
                p_t: plane.p_t,
                d_t: plane.d_t,
                n_t,
                coverage_fraction,
                step_reward,
                end_reward,
                gate_passed: plane.gate_passed,
                surface_angle: angle,
                reverted,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_table() {
        assert_eq!(Action::ALL.len(), N_ACTIONS);
        for (i, a) in Action::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(Action::from_index(i), Some(*a));
        }
        assert_eq!(Action::from_index(9), None);
    }

    #[test]
    fn end_reward_arithmetic() {
        let rp = RewardParams::default();
        assert!((rp.end_reward(0.359, 0.924) - 18.21).abs() < 1e-9);
        let r = RewardParams { alpha1: 0.0, alpha2: 0.0, ..rp };
        assert_eq!(r.step_reward(3, 10, 17.0, 150.0, 0.4), 0.3);
        assert_eq!(rp.step_reward(10, 10, 0.0, 150.0, 0.0), 2.5);
    }

    #[test]
    fn metrics() {
        let mk = |p_t: f64, d_t: f64, examining: bool| StepLog {
            step: 1,
            action: Action::HPlus,
            probe: ProbeState { h: 0.0, theta: 0.0, phi: 0.0, psi: 0.0 },
            adj: !examining,
            p_t,
            d_t,
            reward: 0.0,
            covered_fraction: 0.0,
            examining,
        };
        let log = EpisodeLog {
            start: mk(0.0, 0.0, true).probe,
            steps: vec![mk(0.1, 150.0, true), mk(0.9, 0.0, false), mk(0.3, 150.0, true)],
            outcome: Outcome::Success,
            r_c: 150.0,
        };
        let m = episode_metrics(&log).unwrap();
        assert!((m.p - 0.8).abs() < 1e-12);
        assert!((m.d - 1.0).abs() < 1e-12);
        assert!(m.success);
        assert_eq!(m.steps, 3);
        let empty = EpisodeLog { steps: vec![mk(0.0, 0.0, false)], ..log };
        assert_eq!(episode_metrics(&empty), Err(MdpError::EmptyEpisode));
    }

    #[test]
    fn stacked_identical_grids() {
        let mut g = VoxelGrid::new(Vec3::ZERO, 4.0, [3, 3, 3]);
        g.set(Channel::Target, [0, 0, 0], true);
        g.set(Channel::Bone, [1, 1, 1], true);
        g.set(Channel::Beam, [2, 2, 2], true);
        let (t, m) = assemble_state_tensor(&[&g, &g, &g], true).unwrap();
        assert_eq!(m, 1.0);
        let n = g.len() * 3;
        assert_eq!(&t[..n], &t[n..2 * n]);
        assert_eq!(&t[n..2 * n], &t[2 * n..]);
        assert_eq!(t.iter().map(|&v| v as usize).sum::<usize>(), 9);
        assert_eq!(assemble_state_tensor(&[&g, &g], false), Err(MdpError::BadHistory));
    }
}
