use super::{eval_pool, RunConfig, RunError};
use crate::agent::{argmax, QNetwork, Trace};
use crate::mdp::{episode_metrics, Action, Env, EnvConfig, EpisodeLog, Outcome, StaticScene, N_ACTIONS};
use crate::scene::SizeClass;
use crate::seeding::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write;
use std::sync::Arc;

pub const EVAL_EPISODE_STREAM: u64 = 300_000;

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Greedy(&'a QNetwork<f32>),
    Random,
}

/// Runs one episode to termination from a seeded reset.
pub(crate) fn run_episode(
    policy: Policy<'_>,
    scene: Arc<StaticScene>,
    env_cfg: &EnvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(EpisodeLog, f64, f64), RunError> {
    let mut env = Env::new(scene, env_cfg.clone());
    let mut obs = env.reset(rng)?;
    let mut trace = Trace::default();
    let mut ret = 0.0;
    loop {
        let action = match policy {
            Policy::Greedy(net) => Action::ALL[argmax(&net.forward_traced(&obs, &mut trace)?)],
            Policy::Random => Action::ALL[rng.gen_range(0..N_ACTIONS)],
        };
        let r = env.step(action)?;
        ret += r.reward;
        if r.done {
            let log = env.log().expect("episode started").clone();
            return Ok((log, ret, r.info.coverage_fraction));
        }
        obs = r.obs;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub episode: usize,
    pub scene: usize,
    /// Size classes of the scene's targets joined with `+`.
    pub size_class: String,
    pub n_targets: usize,
    pub success: bool,
    pub outcome: Outcome,
    pub steps: usize,
    pub coverage: f64,
    pub ret: f64,
    /// Absent when the episode never examined.
    pub p: Option<f64>,
    pub d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub group: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub steps_mean: f64,
    pub steps_std: f64,
    pub p_mean: Option<f64>,
    pub p_std: Option<f64>,
    pub d_mean: Option<f64>,
    pub d_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((m, var.sqrt()))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "episode,scene,size_class,n_targets,success,outcome,steps,coverage,return,p,d";

    pub fn aggregate(group: &str, recs: &[&EvalRecord]) -> AggregateRow {
        let n = recs.len();
        let steps: Vec<f64> = recs.iter().map(|r| r.steps as f64).collect();
        let p: Vec<f64> = recs.iter().filter_map(|r| r.p).collect();
        let d: Vec<f64> = recs.iter().filter_map(|r| r.d).collect();
        let (sm, ss) = mean_std(&steps).unwrap_or((0.0, 0.0));
        let p = mean_std(&p);
        let d = mean_std(&d);
        AggregateRow {
            group: group.into(),
            episodes: n,
            success_rate: if n == 0 { 0.0 } else { recs.iter().filter(|r| r.success).count() as f64 / n as f64 },
            steps_mean: sm,
            steps_std: ss,
            p_mean: p.map(|x| x.0),
            p_std: p.map(|x| x.1),
            d_mean: d.map(|x| x.0),
            d_std: d.map(|x| x.1),
        }
    }

    /// All episodes, then single-target episodes by size class, then
    /// multi-target episodes.
    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let all: Vec<&EvalRecord> = self.records.iter().collect();
        let mut rows = vec![Self::aggregate("all", &all)];
        for c in [SizeClass::S, SizeClass::M, SizeClass::L] {
            let g: Vec<&EvalRecord> =
                self.records.iter().filter(|r| r.n_targets == 1 && r.size_class == c.as_str()).collect();
            if !g.is_empty() {
                rows.push(Self::aggregate(c.as_str(), &g));
            }
        }
        let multi: Vec<&EvalRecord> = self.records.iter().filter(|r| r.n_targets > 1).collect();
        if !multi.is_empty() {
            rows.push(Self::aggregate("multi", &multi));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.episode,
                r.scene,
                r.size_class,
                r.n_targets,
                r.success as u8,
                r.outcome.as_str(),
                r.steps,
                r.coverage,
                r.ret,
                opt(r.p),
                opt(r.d)
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let pct = |x: Option<f64>| x.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into());
        for a in self.aggregates() {
            let _ = writeln!(
                s,
                "{:<5} episodes {:>4}  success {:>5.1}%  steps {:.1} ({:.1})  P {} ({})  D {} ({})",
                a.group,
                a.episodes,
                100.0 * a.success_rate,
                a.steps_mean,
                a.steps_std,
                pct(a.p_mean),
                pct(a.p_std),
                pct(a.d_mean),
                pct(a.d_std)
            );
        }
        s
    }
}

/// Log of the first evaluation episode, the one `evaluate` reports first.
pub fn trajectory(policy: Policy<'_>, cfg: &RunConfig) -> Result<EpisodeLog, RunError> {
    let pool = eval_pool(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, EVAL_EPISODE_STREAM));
    Ok(run_episode(policy, pool.scenes[0].clone(), &cfg.env, &mut rng)?.0)
}

/// `episodes` episodes cycling through the evaluation scenes, each from its
/// own seed.
pub fn evaluate(policy: Policy<'_>, cfg: &RunConfig, episodes: usize) -> Result<EvalReport, RunError> {
    let pool = eval_pool(cfg)?;
    if let Policy::Greedy(net) = policy {
        let d = pool.scenes[0].grid.dims;
        if net.input_dims() != d {
            return Err(crate::agent::AgentError::ShapeMismatch { expected: net.input_dims(), got: d }.into());
        }
    }
    let mut report = EvalReport::default();
    for i in 0..episodes {
        let s = i % pool.scenes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, EVAL_EPISODE_STREAM + i as u64));
        let (log, ret, coverage) = run_episode(policy, pool.scenes[s].clone(), &cfg.env, &mut rng)?;
        let m = episode_metrics(&log).ok();
        let classes = &pool.size_classes[s];
        report.records.push(EvalRecord {
            episode: i,
            scene: s,
            size_class: classes.iter().map(|c| c.as_str()).collect::<Vec<_>>().join("+"),
            n_targets: classes.len(),
            success: log.outcome == Outcome::Success,
            outcome: log.outcome,
            steps: log.steps.len(),
            coverage,
            ret,
            p: m.map(|m| m.p),
            d: m.map(|m| m.d),
        });
    }
    Ok(report)
}
