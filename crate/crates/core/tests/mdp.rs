use intercostal::geometry::*;
use intercostal::mdp::*;
use intercostal::scene::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Cylinder of radius 150 about Z with a flat target block at x in [100, 108),
/// straight below the skin at theta = 0. Optionally a bone sheet right at the skin.
fn block_scene(bone_at_skin: bool) -> Arc<StaticScene> {
    let mut grid = VoxelGrid::new(Vec3::new(40.0, -60.0, -60.0), 4.0, [30, 30, 30]);
    for i in 15..17 {
        for k in 13..17 {
            grid.set(Channel::Target, [i, 15, k], true);
        }
    }
    if bone_at_skin {
        for j in 0..30 {
            for k in 0..30 {
                grid.set(Channel::Bone, [27, j, k], true);
            }
        }
    }
    let frame = CylinderFrame::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 150.0, -40.0, 40.0).unwrap();
    Arc::new(StaticScene {
        target_voxels: grid.occupied(Channel::Target),
        bone_voxels: grid.occupied(Channel::Bone),
        grid,
        frame,
        skin: SkinSurface::HeightField(RadialHeightField::constant(150.0)),
        target_cyl: (0.0, 0.0),
    })
}

fn at(h: f64, theta: f64, phi: f64, psi: f64) -> ProbeState {
    ProbeState { h, theta, phi, psi }
}

fn gap_scenario(seed: u64) -> Scenario {
    let p = RibcageParams::uniform(3, 22.0, 6.0);
    let h = p.gap_center(0);
    let cfg = ScenarioConfig {
        ribcage: RibcageSource::Procedural(p),
        targets: TargetSource::Ellipsoids {
            targets: vec![EllipsoidSpec::fixed([h, 0.0, 100.0], [12.0, 10.0, 10.0], [0.0; 3])],
        },
        n_targets: 1,
        randomize_target_count: false,
        grid_extent: 120.0,
        resolution: 4.0,
        generic_radius: None,
    };
    Scenario::build(&cfg, seed).unwrap()
}

fn gap_env(cfg: EnvConfig) -> Env {
    Env::new(Arc::new(StaticScene::from_scenario(&gap_scenario(0))), cfg)
}

fn random_cfg() -> EnvConfig {
    EnvConfig { start: StartRule::Random { max_tries: 100, around_target: Some([20.0, 20.0]) }, ..EnvConfig::default() }
}

#[test]
fn switch_and_readjust_rewards() {
    let mut env = Env::new(block_scene(false), EnvConfig::default());
    env.reset_at(at(-36.0, 0.0, 0.0, 0.0)).unwrap();
    let r = env.step(Action::Switch).unwrap();
    assert_eq!(r.reward, -1.0);
    assert!(r.obs.adj);
    for a in [Action::HPlus, Action::HPlus, Action::HPlus, Action::HPlus, Action::HPlus] {
        let r = env.step(a).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.info.coverage_fraction, 0.0);
    }
    // now the plane sweeps the target but nothing was counted
    let r = env.step(Action::Switch).unwrap();
    assert_eq!(r.reward, -1.0);
    assert_eq!(r.info.coverage_fraction, 0.0);
    assert!(!r.obs.adj);
}

#[test]
fn fully_shadowed_plane_is_penalized() {
    let mut env = Env::new(block_scene(true), EnvConfig::default());
    env.reset_at(at(0.0, 0.0, 0.0, 0.0)).unwrap();
    let r = env.step(Action::HPlus).unwrap();
    assert_eq!(r.info.p_t, 1.0);
    assert!(!r.info.gate_passed);
    assert_eq!(r.reward, -0.1);
    assert_eq!(r.info.coverage_fraction, 0.0);
}

#[test]
fn unoccluded_coverage_reward_and_terminal_bonus() {
    let mut env = Env::new(block_scene(false), EnvConfig::default());
    env.reset_at(at(0.0, 0.0, 0.0, 0.0)).unwrap();
    let r = env.step(Action::HPlus).unwrap();
    // contact (150, 0, 4); target centroid (104, 2, 0)
    let d = (46f64.powi(2) + 2f64.powi(2) + 4f64.powi(2)).sqrt();
    assert!((r.info.d_t - d).abs() < 1e-9);
    assert_eq!(r.info.p_t, 0.0);
    assert_eq!(r.info.n_t, 8);
    let step = 1.0 + (-d / 150.0).exp() + 0.5;
    assert!((r.info.step_reward - step).abs() < 1e-12);
    let end = 10.0 * (1.0 + d / 150.0 + 0.5);
    assert!((r.info.end_reward - end).abs() < 1e-12);
    assert!((r.reward - (step + end)).abs() < 1e-12);
    assert_eq!(r.outcome, Outcome::Success);
    assert!(r.done);
    assert_eq!(env.step(Action::HPlus).unwrap_err(), MdpError::SteppedDone);
}

#[test]
fn terminal_bonus_variants() {
    let mut cfg = EnvConfig::default();
    cfg.reward.terminal_bonus = TerminalBonus::Exclusive;
    cfg.reward.end_reward_distance_mode = EndRewardDistance::Exp;
    let mut env = Env::new(block_scene(false), cfg);
    env.reset_at(at(0.0, 0.0, 0.0, 0.0)).unwrap();
    let r = env.step(Action::HPlus).unwrap();
    let e = (-r.info.d_t / 150.0).exp();
    assert!((r.reward - 10.0 * (1.0 + e + 0.5)).abs() < 1e-12);
    assert_eq!(r.reward, r.info.end_reward);
}

#[test]
fn zero_weights_reduce_to_coverage_fraction() {
    let mut cfg = EnvConfig::default();
    cfg.reward.alpha1 = 0.0;
    cfg.reward.alpha2 = 0.0;
    let mut env = Env::new(block_scene(false), cfg);
    env.reset_at(at(-25.0, 0.0, 0.0, 0.0)).unwrap();
    let r = env.step(Action::HPlus).unwrap();
    // elements at z = -41..=-1: half of the block
    assert_eq!(r.info.n_t, 4);
    assert_eq!(r.info.step_reward, 0.5);
    assert_eq!(r.outcome, Outcome::Running);
}

#[test]
fn tilting_past_the_limit_aborts() {
    let mut env = Env::new(block_scene(false), EnvConfig::default());
    env.reset_at(at(-36.0, 0.0, 0.0, 0.0)).unwrap();
    for n in 1..=11 {
        let r = env.step(Action::PsiPlus).unwrap();
        assert!((r.info.surface_angle - 2.0 * n as f64).abs() < 1e-9);
        if n < 11 {
            assert_eq!(r.outcome, Outcome::Running);
        } else {
            assert_eq!(r.outcome, Outcome::AngleAbort);
            assert!(r.done);
            assert_eq!(r.info.end_reward, 0.0);
            assert_eq!(r.reward, r.info.step_reward);
        }
    }
}

#[test]
fn leaving_the_frame_is_undone() {
    let mut env = Env::new(block_scene(false), EnvConfig::default());
    env.reset_at(at(40.0, 0.0, 0.0, 0.0)).unwrap();
    let r = env.step(Action::HPlus).unwrap();
    assert!(r.info.reverted);
    assert_eq!(env.probe().unwrap(), at(40.0, 0.0, 0.0, 0.0));
    let r = env.step(Action::HMinus).unwrap();
    assert!(!r.info.reverted);
    assert_eq!(env.probe().unwrap().h, 36.0);
}

#[test]
fn step_limit_and_lifecycle_errors() {
    let mut env = Env::new(block_scene(false), EnvConfig { max_steps: 5, ..EnvConfig::default() });
    assert_eq!(env.step(Action::HPlus).unwrap_err(), MdpError::NotReset);
    env.reset_at(at(-36.0, 0.0, 0.0, 0.0)).unwrap();
    for n in 1..=5 {
        let r = env.step(if n % 2 == 1 { Action::HMinus } else { Action::HPlus }).unwrap();
        assert_eq!(r.done, n == 5);
    }
    assert_eq!(env.outcome(), Some(Outcome::StepLimit));
    assert_eq!(env.step(Action::HPlus).unwrap_err(), MdpError::SteppedDone);
    assert_eq!(env.log().unwrap().steps.len(), 5);
}

#[test]
fn fixed_start_is_exact_and_reset_is_reproducible() {
    let scene = block_scene(false);
    let cfg = EnvConfig {
        start: StartRule::Fixed { pose: [8.0, 3.0, 10.0, -4.0], relative: false, jitter: [0.0; 4] },
        ..EnvConfig::default()
    };
    let mut env = Env::new(scene, cfg);
    env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(env.probe().unwrap(), at(8.0, 3.0, 10.0, -4.0));

    let mut a = gap_env(random_cfg());
    let mut b = gap_env(random_cfg());
    let oa = a.reset(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let ob = b.reset(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(oa.dense(), ob.dense());
    assert_eq!(a.probe(), b.probe());
}

#[test]
fn random_starts_respect_the_surface_angle() {
    // wavy skin, slopes up to ~33 degrees
    let field = RadialHeightField::from_fn(-60.0, 2.0, 61, 360, |h, t| {
        140.0 + 20.0 * (4.0 * t.to_radians()).sin() + 3.0 * (h / 15.0).sin()
    });
    let frame = CylinderFrame::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 175.0, -60.0, 60.0).unwrap();
    let grid = VoxelGrid::new(Vec3::new(-60.0, -60.0, -60.0), 4.0, [30, 30, 30]);
    let scene = Arc::new(StaticScene {
        grid,
        target_voxels: vec![0],
        bone_voxels: vec![],
        frame,
        skin: SkinSurface::HeightField(field.clone()),
        target_cyl: (0.0, 0.0),
    });
    let mut env = Env::new(scene, EnvConfig::default());
    let surface = |h: f64, t: f64| frame.cyl_to_cartesian(h, t, field.sample(h, t).0);
    let mut steep = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2000 {
        let (h, t) = (rng.gen_range(-60.0..60.0), rng.gen_range(0.0..360.0));
        let eps = 1e-7;
        let p = surface(h, t);
        let n = (surface(h + eps, t) - p).cross(surface(h, t + eps) - p);
        if n.normalized().dot(-frame.radial(t)).abs().acos().to_degrees() > 20.0 {
            steep += 1;
        }
    }
    assert!(steep > 200, "the skin should have forbidden regions");
    for seed in 0..1000 {
        env.reset(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let s = env.probe().unwrap();
        let pose = env.pose().unwrap();
        let eps = 1e-7;
        let p = surface(s.h, s.theta);
        let n = (surface(s.h + eps, s.theta) - p).cross(surface(s.h, s.theta + eps) - p).normalized();
        let angle = pose.centerline().dot(n).abs().min(1.0).acos().to_degrees();
        assert!(angle <= 20.0 + 1e-4, "seed {seed}: {angle}");
        assert_eq!((s.phi, s.psi), (0.0, 0.0));
    }
}

#[test]
fn impossible_start_fails() {
    let scene = block_scene(false);
    let cfg = EnvConfig {
        start: StartRule::Fixed { pose: [0.0, 0.0, 0.0, 30.0], relative: false, jitter: [0.0; 4] },
        ..EnvConfig::default()
    };
    let mut env = Env::new(scene, cfg);
    assert!(matches!(env.reset(&mut ChaCha8Rng::seed_from_u64(0)), Err(MdpError::ResetFailed(_))));
}

fn state_sum(o: &Observation) -> usize {
    o.dense().iter().map(|&v| v as usize).sum()
}

/// Random episodes on the rib-gap scene, checking the per-step invariants.
#[test]
fn random_episodes_keep_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for ep in 0..12 {
        let mut env = gap_env(random_cfg());
        let mut obs = env.reset(&mut ChaCha8Rng::seed_from_u64(ep)).unwrap();
        let scene = env.scene().clone();
        let n = scene.n_voxels();
        let n_target = scene.target_voxels.len();
        let rp = env.config().reward;
        let mut adj = false;
        let mut covered = 0.0;
        let mut p_vals = Vec::new();
        let mut d_vals = Vec::new();
        loop {
            let a = Action::from_index(rng.gen_range(0..9)).unwrap();
            let before = obs.dense();
            let r = env.step(a).unwrap();
            let after = r.obs.dense();
            assert_eq!(&after[..6 * n], &before[3 * n..]);
            let beams: usize = r.obs.beams.iter().map(|b| b.len()).sum();
            assert_eq!(state_sum(&r.obs), 3 * (n_target + scene.bone_voxels.len()) + beams);

            if a == Action::Switch {
                adj = !adj;
                assert_eq!(r.info.step_reward, -1.0);
            } else if adj {
                assert_eq!(r.info.step_reward, 0.0);
            } else if !r.info.gate_passed {
                assert_eq!(r.info.step_reward, -0.1);
            } else {
                assert!(r.info.step_reward >= 0.0 && r.info.step_reward <= 1.0 + rp.alpha1 + rp.alpha2);
            }
            if a == Action::Switch || adj || !r.info.gate_passed {
                assert_eq!(r.info.coverage_fraction, covered);
            }
            assert!(r.info.coverage_fraction >= covered);
            assert_eq!(r.info.end_reward > 0.0, r.outcome == Outcome::Success);
            assert!(r.reward.is_finite());
            assert_eq!(r.obs.adj, adj);
            covered = r.info.coverage_fraction;
            if !adj && a != Action::Switch {
                p_vals.push(1.0 - r.info.p_t);
                d_vals.push(r.info.d_t / env.r_c());
            }
            obs = r.obs;
            if r.done {
                break;
            }
        }
        let log = env.log().unwrap();
        match episode_metrics(log) {
            Ok(m) => {
                let k = p_vals.len() as f64;
                assert!((m.p - p_vals.iter().sum::<f64>() / k).abs() < 1e-12);
                assert!((m.d - d_vals.iter().sum::<f64>() / k).abs() < 1e-12);
                assert_eq!(m.steps, log.steps.len());
            }
            Err(e) => {
                assert_eq!(e, MdpError::EmptyEpisode);
                assert!(p_vals.is_empty());
            }
        }
    }
}

#[test]
fn episodes_are_deterministic() {
    let run = || {
        let mut env = gap_env(random_cfg());
        env.reset(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        while env.outcome() == Some(Outcome::Running) {
            env.step(Action::from_index(rng.gen_range(0..9)).unwrap()).unwrap();
        }
        trajectory_csv(env.log().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn trajectory_csv_has_one_row_per_step() {
    let mut env = gap_env(random_cfg());
    env.reset(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for a in [Action::HPlus, Action::Switch, Action::ThetaMinus, Action::Switch, Action::PhiPlus] {
        env.step(a).unwrap();
    }
    let log = env.log().unwrap();
    let text = trajectory_csv(log);
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["step", "h", "theta", "phi", "psi", "adj", "p_t", "d_t", "reward", "covered_fraction"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    for (row, s) in rows.iter().zip(&log.steps) {
        assert_eq!(row[0].parse::<u32>().unwrap(), s.step);
        assert_eq!(row[1].parse::<f64>().unwrap(), s.probe.h);
        assert_eq!(row[2].parse::<f64>().unwrap(), s.probe.theta);
        assert_eq!(&row[5] == "1", s.adj);
        assert_eq!(row[8].parse::<f64>().unwrap(), s.reward);
    }
}
