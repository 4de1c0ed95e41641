use super::persist::{decode_resume, encode_resume, ResumeState};
use super::{evaluate, io_err, train_pool, EvalReport, Policy, RunConfig, RunError};
use crate::agent::{load_checkpoint, save_checkpoint, AgentError, BatchStats, TrainSample, TrainState};
use crate::mdp::Observation;
use crate::replay::{
    pool_dims, run_actor, Actor, ActorMsg, EpisodeRecord, PrioritizedBuffer, ScenePool, Transition,
};
use crate::seeding::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

/// Seed stream of actor `i` is `ACTOR_STREAM + i`.
pub const ACTOR_STREAM: u64 = 1_000;
/// Updates between logged losses.
const LOSS_LOG_EVERY: u64 = 50;

const EPISODES_HEADER: &str = "episode,actor,scene,step,steps,return,outcome,coverage,p,d";
const LOG_HEADER: &str = "step,updates,event,value";

#[derive(Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    /// Episodes finished in this invocation.
    pub episodes: Vec<EpisodeRecord>,
    /// Environment steps at which the target network was synchronized.
    pub syncs: Vec<u64>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub produced: u64,
    pub received: u64,
}

#[derive(Default)]
struct Tally {
    episodes: Vec<EpisodeRecord>,
    syncs: Vec<u64>,
    checkpoints: Vec<PathBuf>,
    produced: u64,
    received: u64,
}

impl Tally {
    fn finish(self, state: TrainState, config_text: &str, out: &Path) -> Result<TrainOutput, RunError> {
        let final_checkpoint = out.join("final.csts");
        save_checkpoint(&state, config_text, &final_checkpoint)?;
        Ok(TrainOutput {
            state,
            episodes: self.episodes,
            syncs: self.syncs,
            checkpoints: self.checkpoints,
            final_checkpoint,
            produced: self.produced,
            received: self.received,
        })
    }
}

struct Logs {
    episodes: File,
    log: File,
    episode_count: u64,
    episodes_path: PathBuf,
    log_path: PathBuf,
}

impl Logs {
    /// Fresh files, or existing ones cut back to the resume point.
    fn open(out: &Path, resume: Option<(u64, u64)>) -> Result<Logs, RunError> {
        let episodes_path = out.join("episodes.csv");
        let log_path = out.join("train_log.csv");
        let (ep_text, log_text) = match resume {
            None => (format!("{EPISODES_HEADER}\n"), format!("{LOG_HEADER}\n")),
            Some((episodes, step)) => {
                let keep = |path: &Path, header: &str, pred: &dyn Fn(usize, &str) -> bool| -> String {
                    let text = std::fs::read_to_string(path).unwrap_or_default();
                    let mut s = format!("{header}\n");
                    for (i, line) in text.lines().skip(1).enumerate() {
                        if pred(i, line) {
                            s.push_str(line);
                            s.push('\n');
                        }
                    }
                    s
                };
                let ep = keep(&episodes_path, EPISODES_HEADER, &|i, _| (i as u64) < episodes);
                let lg = keep(&log_path, LOG_HEADER, &|_, line| {
                    line.split(',').next().and_then(|v| v.parse::<u64>().ok()).map_or(false, |s| s <= step)
                });
                (ep, lg)
            }
        };
        std::fs::write(&episodes_path, ep_text).map_err(|e| io_err(&episodes_path, e))?;
        std::fs::write(&log_path, log_text).map_err(|e| io_err(&log_path, e))?;
        let append = |p: &Path| OpenOptions::new().append(true).open(p).map_err(|e| io_err(p, e));
        Ok(Logs {
            episodes: append(&episodes_path)?,
            log: append(&log_path)?,
            episode_count: resume.map_or(0, |r| r.0),
            episodes_path,
            log_path,
        })
    }

    fn episode(&mut self, step: u64, e: &EpisodeRecord) -> Result<(), RunError> {
        let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let line = format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            self.episode_count,
            e.actor,
            e.scene,
            step,
            e.steps,
            e.ret,
            e.outcome.as_str(),
            e.coverage,
            o(e.p),
            o(e.d)
        );
        self.episode_count += 1;
        self.episodes.write_all(line.as_bytes()).map_err(|err| io_err(&self.episodes_path, err))
    }

    fn event(&mut self, step: u64, updates: u64, event: &str, value: f64) -> Result<(), RunError> {
        let line = format!("{step},{updates},{event},{value}\n");
        self.log.write_all(line.as_bytes()).map_err(|e| io_err(&self.log_path, e))
    }

    fn flush(&mut self) -> Result<(), RunError> {
        self.episodes.flush().map_err(|e| io_err(&self.episodes_path, e))?;
        self.log.flush().map_err(|e| io_err(&self.log_path, e))
    }
}

/// One prioritized minibatch update; priorities are refreshed from the
/// returned TD errors.
fn learn(
    state: &mut TrainState,
    buffer: &mut PrioritizedBuffer<Transition>,
    cfg: &RunConfig,
) -> Result<BatchStats, RunError> {
    let beta = cfg.replay.beta(state.step, cfg.agent.total_steps);
    let batch = buffer.sample(cfg.agent.batch_size, beta, &mut state.rng)?;
    let samples: Vec<TrainSample<'_, Observation>> = batch
        .indices
        .iter()
        .zip(&batch.weights)
        .map(|(ix, &w)| {
            let t = buffer.get(ix.slot).expect("sampled slot is occupied");
            TrainSample {
                state: &t.state,
                action: t.action,
                reward: t.reward,
                next_state: &t.next_state,
                done: t.done,
                weight: w,
            }
        })
        .collect();
    let stats = state.train_batch(&cfg.agent, &samples)?;
    drop(samples);
    buffer.update_priorities(&batch.indices, &stats.td_errors);
    Ok(stats)
}

fn checkpoint_paths(out: &Path, step: u64) -> (PathBuf, PathBuf) {
    let dir = out.join("checkpoints");
    (dir.join(format!("step_{step:08}.csts")), dir.join(format!("step_{step:08}.resume")))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Trains according to `cfg`, writing into `out`:
/// `config.toml` (the verbatim configuration), `episodes.csv`,
/// `train_log.csv`, periodic checkpoints with resume files under
/// `checkpoints/`, and `final.csts`.
///
/// `resume` names a periodic checkpoint; its `.resume` sibling restores the
/// replay buffer and actor so a single-actor run continues exactly as if
/// uninterrupted.
pub fn train(cfg: &RunConfig, config_text: &str, out: &Path, resume: Option<&Path>) -> Result<TrainOutput, RunError> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join("checkpoints")).map_err(|e| io_err(out, e))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, config_text).map_err(|e| io_err(&cfg_path, e))?;
    let pool = Arc::new(train_pool(cfg)?);
    let dims = pool_dims(&pool).expect("pool grids agree");
    if cfg.topology.n_actors == 1 {
        train_sync(cfg, config_text, out, pool, dims, resume)
    } else {
        if resume.is_some() {
            return Err(RunError::InvalidConfig("resume requires a single actor".into()));
        }
        train_threaded(cfg, config_text, out, pool, dims)
    }
}

fn load_resume(
    cfg: &RunConfig,
    pool: &ScenePool,
    dims: [usize; 3],
    path: &Path,
) -> Result<(TrainState, ResumeState), RunError> {
    let ck = load_checkpoint(path)?;
    if ck.state.online.input_dims() != dims || ck.state.online.config() != &cfg.agent.net {
        return Err(AgentError::ShapeMismatch { expected: dims, got: ck.state.online.input_dims() }.into());
    }
    let rpath = path.with_extension("resume");
    let bytes = std::fs::read(&rpath).map_err(|e| io_err(&rpath, e))?;
    let rs = decode_resume(&bytes, pool, cfg.replay)?;
    if rs.step != ck.state.step {
        return Err(RunError::CorruptResume("resume file belongs to another checkpoint".into()));
    }
    Ok((ck.state, rs))
}

fn train_sync(
    cfg: &RunConfig,
    config_text: &str,
    out: &Path,
    pool: Arc<ScenePool>,
    dims: [usize; 3],
    resume: Option<&Path>,
) -> Result<TrainOutput, RunError> {
    let a = &cfg.agent;
    let (mut state, rs) = match resume {
        Some(path) => load_resume(cfg, &pool, dims, path)?,
        None => {
            let state = TrainState::new(a, dims, cfg.seed)?;
            let rs = ResumeState {
                step: 0,
                episodes: 0,
                next_checkpoint: cfg.checkpoint_every,
                actor_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ACTOR_STREAM)),
                buffer: PrioritizedBuffer::new(cfg.replay)?,
            };
            (state, rs)
        }
    };
    let mut logs = Logs::open(out, resume.map(|_| (rs.episodes, rs.step)))?;
    let mut buffer = rs.buffer;
    let mut next_checkpoint = rs.next_checkpoint;
    let mut actor =
        Actor::new(0, pool.clone(), cfg.env.clone(), state.online.clone(), rs.actor_rng, cfg.topology.local_capacity);
    let mut result = Tally::default();

    while state.step < a.total_steps {
        let st = actor.step(a.epsilon(state.step))?;
        state.step += 1;
        let ended = st.episode.is_some();
        if actor.should_flush(ended) {
            for t in actor.take_local() {
                buffer.push(t, None);
                result.received += 1;
            }
        }
        if let Some(ep) = st.episode {
            logs.episode(state.step, &ep)?;
            result.episodes.push(ep);
        }
        if state.step >= a.learn_start && state.step % a.train_every == 0 && buffer.len() >= a.batch_size {
            let stats = learn(&mut state, &mut buffer, cfg)?;
            actor.set_weights(&state.online.params);
            if state.updates % LOSS_LOG_EVERY == 0 {
                logs.event(state.step, state.updates, "loss", stats.loss)?;
            }
        }
        if state.step % a.target_sync_every == 0 {
            state.sync_target();
            result.syncs.push(state.step);
            logs.event(state.step, state.updates, "sync", 0.0)?;
        }
        if ended && cfg.checkpoint_every > 0 && state.step >= next_checkpoint {
            while next_checkpoint <= state.step {
                next_checkpoint += cfg.checkpoint_every;
            }
            let (ck, rf) = checkpoint_paths(out, state.step);
            logs.event(state.step, state.updates, "checkpoint", 0.0)?;
            logs.flush()?;
            save_checkpoint(&state, config_text, &ck)?;
            let snapshot = ResumeState {
                step: state.step,
                episodes: logs.episode_count,
                next_checkpoint,
                actor_rng: actor.rng.clone(),
                buffer,
            };
            write_atomic(&rf, &encode_resume(&snapshot, &pool))?;
            buffer = snapshot.buffer;
            result.checkpoints.push(ck);
        }
    }
    logs.flush()?;
    result.produced = actor.produced;
    result.finish(state, config_text, out)
}

fn train_threaded(
    cfg: &RunConfig,
    config_text: &str,
    out: &Path,
    pool: Arc<ScenePool>,
    dims: [usize; 3],
) -> Result<TrainOutput, RunError> {
    let a = cfg.agent.clone();
    let topo = cfg.topology;
    let mut state = TrainState::new(&a, dims, cfg.seed)?;
    let mut buffer = PrioritizedBuffer::new(cfg.replay)?;
    let mut logs = Logs::open(out, None)?;
    let mut result = Tally::default();
    let stop = Arc::new(AtomicBool::new(a.total_steps == 0));
    let global = Arc::new(AtomicU64::new(0));
    let (tx, rx) = sync_channel::<ActorMsg>(topo.queue_bound);
    let mut weight_tx = Vec::new();
    let mut handles = Vec::new();
    for id in 0..topo.n_actors {
        let (wtx, wrx) = sync_channel::<Arc<Vec<f32>>>(2);
        weight_tx.push(wtx);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ACTOR_STREAM + id as u64));
        let actor = Actor::new(id, pool.clone(), cfg.env.clone(), state.online.clone(), rng, topo.local_capacity);
        let (tx, stop, global, a) = (tx.clone(), stop.clone(), global.clone(), a.clone());
        handles.push(std::thread::spawn(move || run_actor(actor, wrx, tx, move |s| a.epsilon(s), global, stop)));
    }
    drop(tx);

    let mut next_checkpoint = cfg.checkpoint_every;
    let mut done = 0;
    let mut failure: Option<RunError> = None;
    while done < topo.n_actors {
        let Ok(msg) = rx.recv() else { break };
        match msg {
            ActorMsg::Transitions { batch, .. } => {
                for t in batch {
                    buffer.push(t, None);
                    result.received += 1;
                    if stop.load(Ordering::Relaxed) || failure.is_some() {
                        continue;
                    }
                    state.step += 1;
                    global.store(state.step, Ordering::Relaxed);
                    if state.step >= a.learn_start && state.step % a.train_every == 0 && buffer.len() >= a.batch_size
                    {
                        match learn(&mut state, &mut buffer, cfg) {
                            Ok(stats) => {
                                if state.updates % LOSS_LOG_EVERY == 0 {
                                    logs.event(state.step, state.updates, "loss", stats.loss)?;
                                }
                            }
                            Err(e) => {
                                failure = Some(e);
                                stop.store(true, Ordering::Relaxed);
                                continue;
                            }
                        }
                        if state.updates % topo.snapshot_every == 0 {
                            let w = Arc::new(state.online.params.clone());
                            for wtx in &weight_tx {
                                // A full queue means the actor has not caught up; it
                                // picks up a later snapshot.
                                let _ = wtx.try_send(w.clone());
                            }
                            logs.event(state.step, state.updates, "snapshot", 0.0)?;
                        }
                    }
                    if state.step % a.target_sync_every == 0 {
                        state.sync_target();
                        result.syncs.push(state.step);
                        logs.event(state.step, state.updates, "sync", 0.0)?;
                    }
                    if cfg.checkpoint_every > 0 && state.step >= next_checkpoint {
                        next_checkpoint += cfg.checkpoint_every;
                        let (ck, _) = checkpoint_paths(out, state.step);
                        logs.event(state.step, state.updates, "checkpoint", 0.0)?;
                        save_checkpoint(&state, config_text, &ck)?;
                        result.checkpoints.push(ck);
                    }
                    if state.step >= a.total_steps {
                        stop.store(true, Ordering::Relaxed);
                    }
                }
            }
            ActorMsg::Episode(ep) => {
                logs.episode(state.step, &ep)?;
                result.episodes.push(ep);
            }
            ActorMsg::Done { produced, .. } => {
                result.produced += produced;
                done += 1;
            }
        }
    }
    drop(weight_tx);
    for h in handles {
        match h.join() {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => failure = failure.or(Some(e.into())),
            Err(_) => failure = failure.or(Some(RunError::InvalidConfig("actor thread panicked".into()))),
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if result.received != result.produced {
        return Err(RunError::CountMismatch { received: result.received, produced: result.produced });
    }
    logs.flush()?;
    result.finish(state, config_text, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRow {
    pub t_th: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub rows: Vec<SweepRow>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let r = |t_th, alpha1, alpha2| SweepRow { t_th, alpha1, alpha2 };
        SweepConfig { rows: vec![r(0.0, 1.0, 0.5), r(0.8, 1.0, 0.5), r(0.95, 1.0, 0.5), r(0.0, 0.0, 1.0), r(0.0, 2.0, 0.0)] }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRowResult {
    pub row: SweepRow,
    pub out_dir: PathBuf,
    pub report: EvalReport,
}

/// Trains and greedily evaluates one policy per row under `out/row_<i>`,
/// then writes `sweep.csv` with the aggregates of every row.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepRowResult>, RunError> {
    let rows = cfg.sweep.clone().unwrap_or_default().rows;
    let mut results = Vec::new();
    let mut csv = String::from(
        "row,t_th,alpha1,alpha2,group,episodes,success_rate,steps_mean,steps_std,p_mean,p_std,d_mean,d_std\n",
    );
    let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for (i, row) in rows.iter().enumerate() {
        let mut rc = cfg.with_reward(row.t_th, row.alpha1, row.alpha2);
        rc.run_id = format!("{}_row{i}", cfg.run_id);
        rc.sweep = None;
        let dir = out.join(format!("row_{i}"));
        let trained = train(&rc, &rc.to_toml(), &dir, None)?;
        let report = evaluate(Policy::Greedy(&trained.state.online), &rc, rc.eval.episodes)?;
        write_report(&report, &dir)?;
        for g in report.aggregates() {
            let _ = writeln!(
                csv,
                "{i},{},{},{},{},{},{},{},{},{},{},{},{}",
                row.t_th,
                row.alpha1,
                row.alpha2,
                g.group,
                g.episodes,
                g.success_rate,
                g.steps_mean,
                g.steps_std,
                o(g.p_mean),
                o(g.p_std),
                o(g.d_mean),
                o(g.d_std)
            );
        }
        results.push(SweepRowResult { row: *row, out_dir: dir, report });
    }
    let path = out.join("sweep.csv");
    std::fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    Ok(results)
}

/// `eval.csv` with per-episode rows and `eval.txt` with the summary.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let csv = dir.join("eval.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| io_err(&csv, e))?;
    let txt = dir.join("eval.txt");
    std::fs::write(&txt, report.summary()).map_err(|e| io_err(&txt, e))
}
