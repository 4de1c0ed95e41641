use super::eval::run_episode;
use super::{Policy, RunConfig, RunError};
use crate::mdp::{Outcome, StaticScene};
use crate::scene::{build_static_channels, euler_rotation, voxelize_ellipsoid, Scenario, Target};
use crate::seeding::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write;
use std::sync::Arc;

pub const HEATMAP_STREAM: u64 = 400_000;

/// Target positions in the anatomy's cylinder frame: `h` (mm) and `theta`
/// (deg) span the map, success is averaged over `depth` (radius, mm).
/// Each range is `[start, end, step]`, end inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapConfig {
    pub semi_axes: [f64; 3],
    pub h: [f64; 3],
    pub theta: [f64; 3],
    pub depth: [f64; 3],
    #[serde(default = "default_episodes")]
    pub episodes: usize,
}

fn default_episodes() -> usize {
    20
}

fn range(r: [f64; 3]) -> Vec<f64> {
    let n = ((r[1] - r[0]) / r[2] + 1e-9).floor() as usize + 1;
    (0..n).map(|i| r[0] + i as f64 * r[2]).collect()
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::InvalidConfig(m.into()));
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) {
            return bad("heatmap semi-axes must be positive");
        }
        for r in [self.h, self.theta, self.depth] {
            if !(r[2] > 0.0) || !(r[1] >= r[0]) || r.iter().any(|v| !v.is_finite()) {
                return bad("heatmap ranges need start <= end and a positive step");
            }
            if (r[1] - r[0]) / r[2] > 10_000.0 {
                return bad("heatmap range has too many positions");
            }
        }
        if self.episodes == 0 {
            return bad("heatmap episodes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCell {
    pub h: f64,
    pub theta: f64,
    pub feasible_depths: usize,
    /// Success rate averaged over feasible depths; `None` where masked.
    pub success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapResult {
    pub hs: Vec<f64>,
    pub thetas: Vec<f64>,
    /// Row-major over `hs`, then `thetas`.
    pub cells: Vec<HeatmapCell>,
}

impl HeatmapResult {
    pub fn cell(&self, i: usize, j: usize) -> &HeatmapCell {
        &self.cells[i * self.thetas.len() + j]
    }

    pub fn is_fully_masked(&self) -> bool {
        self.cells.iter().all(|c| c.success.is_none())
    }

    /// Mean success over unmasked cells whose `h` satisfies `pred`.
    pub fn mean_where(&self, pred: impl Fn(f64) -> bool) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| pred(c.h)).filter_map(|c| c.success).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `h,theta,success,feasible` rows; success is empty where masked.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("h,theta,success,feasible\n");
        for c in &self.cells {
            let v = c.success.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", c.h, c.theta, v, c.success.is_some() as u8);
        }
        s
    }
}

/// Success-rate map over target positions. A position is feasible when the
/// voxelized target does not touch bone.
pub fn heatmap(policy: Policy<'_>, cfg: &RunConfig, hm: &HeatmapConfig) -> Result<HeatmapResult, RunError> {
    hm.validate()?;
    let base = Scenario::build(&cfg.scenario, cfg.seed)?;
    let anatomy = &base.anatomy;
    let res = anatomy.resolution;
    let rot = euler_rotation([0.0; 3]);
    let (hs, thetas, depths) = (range(hm.h), range(hm.theta), range(hm.depth));
    let mut cells = Vec::with_capacity(hs.len() * thetas.len());
    let mut position = 0u64;
    for &h in &hs {
        for &theta in &thetas {
            let mut rates = Vec::new();
            for &r in &depths {
                position += 1;
                let c = anatomy.frame.cyl_to_cartesian(h, theta, r);
                let vox = voxelize_ellipsoid(c, hm.semi_axes, &rot, res);
                if vox.is_empty() || vox.iter().any(|k| anatomy.bone.contains(k)) {
                    continue;
                }
                let targets = vec![Target::from_voxels(0, vox, res)];
                let grid = build_static_channels(anatomy, &targets, cfg.scenario.grid_extent)?;
                let s = Scenario { seed: cfg.seed, anatomy: anatomy.clone(), targets, grid };
                let scene = Arc::new(StaticScene::from_scenario(&s));
                let mut wins = 0;
                for k in 0..hm.episodes as u64 {
                    let stream = derive_seed(derive_seed(cfg.seed, HEATMAP_STREAM + position), k);
                    let mut rng = ChaCha8Rng::seed_from_u64(stream);
                    let (log, _, _) = run_episode(policy, scene.clone(), &cfg.env, &mut rng)?;
                    wins += (log.outcome == Outcome::Success) as usize;
                }
                rates.push(wins as f64 / hm.episodes as f64);
            }
            let success = (!rates.is_empty()).then(|| (rates.iter().sum::<f64>() / rates.len() as f64).clamp(0.0, 1.0));
            cells.push(HeatmapCell { h, theta, feasible_depths: rates.len(), success });
        }
    }
    Ok(HeatmapResult { hs, thetas, cells })
}
