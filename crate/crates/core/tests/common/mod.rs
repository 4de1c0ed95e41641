#![allow(dead_code)]

use intercostal::acoustics::ProbeModel;
use intercostal::geometry::{Channel, Mat3, Pose, Vec3, VoxelGrid};
use intercostal::scene::random_rotation;
use rand::Rng;
use std::collections::BTreeSet;

fn cell_at(grid: &VoxelGrid, p: Vec3) -> Option<[i64; 3]> {
    let rel = (p - grid.origin) / grid.resolution;
    let mut c = [0i64; 3];
    for a in 0..3 {
        let f = rel.component(a).floor();
        if !(f >= 0.0 && f < grid.dims[a] as f64) {
            return None;
        }
        c[a] = f as i64;
    }
    Some(c)
}

fn face_adjacent(a: [i64; 3], b: [i64; 3]) -> bool {
    (0..3).map(|i| (a[i] - b[i]).abs()).sum::<i64>() <= 1
}

/// Cells of `origin + t dir`, `t ∈ [t_a, t_b]`, recovered by bisection
/// between two samples whose cells are not face neighbours.
fn refine(grid: &VoxelGrid, origin: Vec3, dir: Vec3, ta: f64, ca: Option<[i64; 3]>, tb: f64, cb: Option<[i64; 3]>, out: &mut Vec<[i64; 3]>) {
    let close = match (ca, cb) {
        (Some(a), Some(b)) => face_adjacent(a, b),
        // both outside: a 0.2 mm chord clipping a grid corner is ignored
        (None, None) => true,
        _ => false,
    };
    if close || tb - ta < 1e-9 {
        if let Some(b) = cb {
            out.push(b);
        }
        return;
    }
    let tm = 0.5 * (ta + tb);
    let cm = cell_at(grid, origin + dir * tm);
    refine(grid, origin, dir, ta, ca, tm, cm, out);
    refine(grid, origin, dir, tm, cm, tb, cb, out);
}

/// Dense sampler: ordered cells along the ray for `t ∈ [0, max_depth)`,
/// sampled every `step` with bisection where samples skip a cell.
pub fn oracle_ray(grid: &VoxelGrid, origin: Vec3, dir: Vec3, max_depth: f64, step: f64) -> Vec<usize> {
    let mut ts: Vec<f64> = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 * step;
        if t >= max_depth {
            break;
        }
        ts.push(t);
        k += 1;
    }
    ts.push(max_depth * (1.0 - 1e-12));
    let mut cells: Vec<[i64; 3]> = Vec::new();
    let mut prev_t = ts[0];
    let mut prev = cell_at(grid, origin + dir * prev_t);
    if let Some(c) = prev {
        cells.push(c);
    }
    for &t in &ts[1..] {
        let c = cell_at(grid, origin + dir * t);
        refine(grid, origin, dir, prev_t, prev, t, c, &mut cells);
        prev_t = t;
        prev = c;
    }
    cells.dedup();
    cells
        .into_iter()
        .map(|c| grid.flat([c[0] as usize, c[1] as usize, c[2] as usize]))
        .collect()
}

pub struct OraclePlane {
    pub insonified: BTreeSet<usize>,
    pub shadow: BTreeSet<usize>,
    pub blockers: BTreeSet<usize>,
}

pub fn oracle_plane(grid: &VoxelGrid, pose: &Pose, probe: &ProbeModel) -> OraclePlane {
    let mut ins = BTreeSet::new();
    let mut all = BTreeSet::new();
    let mut blockers = BTreeSet::new();
    let n = probe.element_count();
    for i in 0..n {
        let off = (i as f64 - (n - 1) as f64 / 2.0) * probe.element_pitch;
        let origin = pose.position + pose.long_axis() * off;
        let cells = oracle_ray(grid, origin, pose.centerline(), probe.imaging_depth, probe.depth_step / 10.0);
        let mut blocked = false;
        for f in cells {
            all.insert(f);
            if blocked {
                continue;
            }
            if grid.get_flat(Channel::Bone, f) {
                blocked = true;
                blockers.insert(f);
            } else {
                ins.insert(f);
            }
        }
    }
    let shadow = all.iter().copied().filter(|f| !ins.contains(f) && !blockers.contains(f)).collect();
    OraclePlane { insonified: ins, shadow, blockers }
}

/// Random 30³ grid with bone slabs, blobs and scattered voxels plus a
/// target blob, and a random probe pose near it.
pub fn random_scene(rng: &mut impl Rng) -> (VoxelGrid, Pose) {
    let origin = Vec3::new(rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0));
    let mut g = VoxelGrid::new(origin, 4.0, [30, 30, 30]);
    let kind = rng.gen_range(0..3);
    match kind {
        0 => {
            // a slab with a gap, like two ribs
            let axis = rng.gen_range(0..3);
            let at = rng.gen_range(5..25);
            let gap_lo = rng.gen_range(0..25);
            let gap_w = rng.gen_range(0..8);
            for u in 0..30 {
                for v in 0..30 {
                    if (gap_lo..gap_lo + gap_w).contains(&u) {
                        continue;
                    }
                    let mut idx = [0; 3];
                    idx[axis] = at;
                    idx[(axis + 1) % 3] = u;
                    idx[(axis + 2) % 3] = v;
                    g.set(Channel::Bone, idx, true);
                }
            }
        }
        1 => {
            for _ in 0..rng.gen_range(1..6) {
                let c = [rng.gen_range(0..30i64), rng.gen_range(0..30i64), rng.gen_range(0..30i64)];
                let r = rng.gen_range(1..5i64);
                for i in (c[0] - r).max(0)..(c[0] + r).min(30) {
                    for j in (c[1] - r).max(0)..(c[1] + r).min(30) {
                        for k in (c[2] - r).max(0)..(c[2] + r).min(30) {
                            g.set(Channel::Bone, [i as usize, j as usize, k as usize], true);
                        }
                    }
                }
            }
        }
        _ => {
            let p = rng.gen_range(0.005..0.05);
            for f in 0..g.len() {
                if rng.gen::<f64>() < p {
                    g.set_flat(Channel::Bone, f, true);
                }
            }
        }
    }
    for i in 12..18 {
        for j in 12..18 {
            for k in 12..18 {
                if !g.get(Channel::Bone, [i, j, k]) {
                    g.set(Channel::Target, [i, j, k], true);
                }
            }
        }
    }
    let rot: Mat3 = random_rotation(rng);
    let mid = origin + g.extent() * 0.5;
    let position = mid - rot.col(2) * rng.gen_range(0.0..90.0)
        + Vec3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
    (g, Pose { position, orientation: rot })
}

/// Toy run on a 12³ grid with a very small network, for fast pipeline tests.
pub fn tiny_run_config() -> intercostal::run::RunConfig {
    let mut cfg = intercostal::run::RunConfig::toy();
    cfg.run_id = "tiny".into();
    cfg.scenario.grid_extent = 48.0;
    cfg.agent.net = intercostal::agent::NetConfig { channels: vec![4, 4], pools: vec![3, 2], fc: 16 };
    cfg.agent.total_steps = 600;
    cfg.agent.learn_start = 100;
    cfg.agent.batch_size = 8;
    cfg.agent.target_sync_every = 50;
    cfg.agent.eps_decay_steps = 400;
    cfg.replay.capacity = 1000;
    cfg.eval.episodes = 6;
    cfg
}
