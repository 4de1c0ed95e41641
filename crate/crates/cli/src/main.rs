//! `intercostal` command-line interface.
//!
//! Every command reads a TOML run configuration. Failures print a single
//! line `error kind=<kind> msg="<message>"` to stderr and exit with status 1.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use intercostal::agent::load_checkpoint;
use intercostal::mdp::trajectory_csv;
use intercostal::run::{
    evaluate, heatmap, sweep, train, trajectory, write_report, Policy, RunConfig, RunError, TRAIN_SCENE_STREAM,
};
use intercostal::scene::{Scenario, SceneFile};
use intercostal::seeding::derive_seed;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "intercostal", version, about = "Intercostal ultrasound scanning simulator and DQN trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; `--checkpoint` resumes from a periodic checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Greedy evaluation on seeded evaluation scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Without a checkpoint the uniform random policy is evaluated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Success-rate map over target positions.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episodes per position.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Write the first training scene in the text scene format.
    ExportScene {
        #[command(flatten)]
        common: Common,
    },
    /// Write the trajectory CSV of one greedy episode on the first
    /// evaluation scene.
    ExportTrajectory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate one policy per reward setting.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(RunConfig, String)> {
    let (mut cfg, mut text) = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        text = format!("{text}\n# --seed {seed}\n");
    }
    Ok((cfg, text))
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.run_id))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, checkpoint } => {
            let (cfg, text) = load(&common)?;
            let out = out_dir(&common, &cfg);
            let r = train(&cfg, &text, &out, checkpoint.as_deref())?;
            println!(
                "trained steps={} updates={} episodes={} checkpoint={}",
                r.state.step,
                r.state.updates,
                r.episodes.len(),
                r.final_checkpoint.display()
            );
        }
        Command::Eval { common, checkpoint, episodes } => {
            let (cfg, _) = load(&common)?;
            let out = out_dir(&common, &cfg);
            let n = episodes.unwrap_or(cfg.eval.episodes);
            let report = match checkpoint {
                Some(p) => {
                    let ck = load_checkpoint(&p).map_err(RunError::from)?;
                    evaluate(Policy::Greedy(&ck.state.online), &cfg, n)?
                }
                None => evaluate(Policy::Random, &cfg, n)?,
            };
            write_report(&report, &out)?;
            print!("{}", report.summary());
        }
        Command::Heatmap { common, checkpoint, episodes } => {
            let (cfg, _) = load(&common)?;
            let mut hm = cfg
                .heatmap
                .clone()
                .ok_or_else(|| RunError::InvalidConfig("config has no [heatmap] section".into()))?;
            if let Some(k) = episodes {
                hm.episodes = k;
            }
            let ck = load_checkpoint(&checkpoint).map_err(RunError::from)?;
            let map = heatmap(Policy::Greedy(&ck.state.online), &cfg, &hm)?;
            let path = out_dir(&common, &cfg).join("heatmap.csv");
            write(&path, &map.to_csv())?;
            if map.is_fully_masked() {
                return Err(RunError::NoFeasiblePositions.into());
            }
            println!("heatmap cells={} file={}", map.cells.len(), path.display());
        }
        Command::ExportScene { common } => {
            let (cfg, _) = load(&common)?;
            let seed = derive_seed(cfg.seed, TRAIN_SCENE_STREAM);
            let s = Scenario::build(&cfg.scenario, seed).map_err(RunError::from)?;
            let text = SceneFile::from_grid(&s.grid, s.anatomy.frame.radius).to_text();
            let path = common.out.clone().unwrap_or_else(|| out_dir(&common, &cfg).join("scene.txt"));
            write(&path, &text)?;
            println!("scene voxels={} file={}", text.lines().count() - 4, path.display());
        }
        Command::ExportTrajectory { common, checkpoint } => {
            let (cfg, _) = load(&common)?;
            let ck = load_checkpoint(&checkpoint).map_err(RunError::from)?;
            let log = trajectory(Policy::Greedy(&ck.state.online), &cfg)?;
            let path = common.out.clone().unwrap_or_else(|| out_dir(&common, &cfg).join("trajectory.csv"));
            write(&path, &trajectory_csv(&log))?;
            println!("trajectory steps={} outcome={} file={}", log.steps.len(), log.outcome.as_str(), path.display());
        }
        Command::Sweep { common } => {
            let (cfg, _) = load(&common)?;
            let out = out_dir(&common, &cfg);
            for r in sweep(&cfg, &out)? {
                let all = &r.report.aggregates()[0];
                println!(
                    "row t_th={} alpha1={} alpha2={} success={} p={}",
                    r.row.t_th,
                    r.row.alpha1,
                    r.row.alpha2,
                    all.success_rate,
                    all.p_mean.map(|p| p.to_string()).unwrap_or_default()
                );
            }
        }
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(r) = e.downcast_ref::<RunError>() {
        return r.kind();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "error"
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let msg = format!("{e:#}").split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'");
        eprintln!("error kind={} msg=\"{msg}\"", error_kind(&e));
        std::process::exit(1);
    }
}
