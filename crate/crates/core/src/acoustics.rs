//! Virtual probe physics: one ray per transducer element, blocked by the
//! first bone voxel it meets; everything behind is acoustic shadow.

use crate::geometry::{Channel, Pose, Vec3, VoxelGrid};
use serde::{Deserialize, Serialize};
use std::ops::ControlFlow;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeModel {
    pub footprint_length: f64,
    pub imaging_depth: f64,
    pub element_pitch: f64,
    /// Reference sampling step along a ray. Traversal itself is exact; this
    /// is the step the dense-sampling check refines.
    pub depth_step: f64,
}

impl Default for ProbeModel {
    fn default() -> Self {
        ProbeModel { footprint_length: 40.0, imaging_depth: 100.0, element_pitch: 2.0, depth_step: 2.0 }
    }
}

impl ProbeModel {
    pub fn element_count(&self) -> usize {
        (self.footprint_length / self.element_pitch + 1e-9).floor() as usize + 1
    }

    /// Element offsets along the footprint long axis, centred on the contact.
    pub fn element_offsets(&self) -> Vec<f64> {
        let n = self.element_count();
        let mid = (n - 1) as f64 / 2.0;
        (0..n).map(|i| (i as f64 - mid) * self.element_pitch).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.footprint_length > 0.0 && self.imaging_depth > 0.0 && self.element_pitch > 0.0 && self.depth_step > 0.0) {
            return Err("probe dimensions must be positive".into());
        }
        if self.element_count() < 2 {
            return Err("probe needs at least two elements".into());
        }
        Ok(())
    }
}

/// How the threshold on the shadow fraction admits coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// The threshold bounds the visible share: coverage counts when
    /// `1 - p_t >= T_th`, so 0 disables the gate and larger is stricter.
    NonShadow,
    /// Coverage counts when `p_t < T_th`.
    Shadow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowGate {
    pub threshold: f64,
    pub mode: GateMode,
}

impl ShadowGate {
    pub fn new(threshold: f64) -> Self {
        ShadowGate { threshold, mode: GateMode::NonShadow }
    }

    pub fn passes(&self, p_t: f64) -> bool {
        match self.mode {
            GateMode::NonShadow => 1.0 - p_t >= self.threshold,
            GateMode::Shadow => p_t < self.threshold,
        }
    }
}

/// Walks the voxels pierced by `origin + t * dir`, `t ∈ [0, max_depth)`, in
/// order (Amanatides–Woo). Calls `visit(flat, t_enter)`.
/// Axes whose boundaries are crossed at the same `t` step together.
pub fn traverse(
    grid: &VoxelGrid,
    origin: Vec3,
    dir: Vec3,
    max_depth: f64,
    mut visit: impl FnMut(usize, f64) -> ControlFlow<()>,
) {
    let res = grid.resolution;
    let lo = grid.origin.to_array();
    let o = origin.to_array();
    let d = dir.to_array();
    let dims = grid.dims;

    // clip against the grid box
    let (mut t0, mut t1) = (0.0f64, max_depth);
    for a in 0..3 {
        let hi = lo[a] + dims[a] as f64 * res;
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] >= hi {
                return;
            }
        } else {
            let (ta, tb) = ((lo[a] - o[a]) / d[a], (hi - o[a]) / d[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if !(t0 < t1) {
        return;
    }

    let mut cell = [0i64; 3];
    for a in 0..3 {
        let x = o[a] + d[a] * t0;
        let c = ((x - lo[a]) / res).floor() as i64;
        cell[a] = c.clamp(0, dims[a] as i64 - 1);
    }
    let step: [i64; 3] = std::array::from_fn(|a| if d[a] > 0.0 { 1 } else if d[a] < 0.0 { -1 } else { 0 });
    let boundary = |a: usize, c: i64| -> f64 {
        if step[a] == 0 {
            f64::INFINITY
        } else {
            let b = lo[a] + (c + (step[a] > 0) as i64) as f64 * res;
            (b - o[a]) / d[a]
        }
    };
    let mut t = t0;
    loop {
        let flat = ((cell[0] as usize * dims[1]) + cell[1] as usize) * dims[2] + cell[2] as usize;
        if visit(flat, t).is_break() {
            return;
        }
        let next: [f64; 3] = std::array::from_fn(|a| boundary(a, cell[a]));
        let t_next = next[0].min(next[1]).min(next[2]);
        if !(t_next < t1) {
            return;
        }
        for a in 0..3 {
            if next[a] == t_next {
                cell[a] += step[a];
                if cell[a] < 0 || cell[a] >= dims[a] as i64 {
                    return;
                }
            }
        }
        t = t_next;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayCast {
    /// Flat indices before the first bone voxel, in ray order.
    pub visited: Vec<usize>,
    /// Entry depth of the blocking bone voxel.
    pub blocked_at: Option<f64>,
    pub blocker: Option<usize>,
}

/// Casts one ray; stops at the first bone voxel, which is not visited.
pub fn cast_ray(grid: &VoxelGrid, origin: Vec3, dir: Vec3, max_depth: f64) -> RayCast {
    let bone = grid.channel(Channel::Bone);
    let mut out = RayCast { visited: Vec::new(), blocked_at: None, blocker: None };
    traverse(grid, origin, dir, max_depth, |f, t| {
        if bone[f] != 0 {
            out.blocked_at = Some(t);
            out.blocker = Some(f);
            ControlFlow::Break(())
        } else {
            out.visited.push(f);
            ControlFlow::Continue(())
        }
    });
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagingPlaneResult {
    /// Sorted flat indices reached by some ray before it hit bone.
    pub insonified: Vec<usize>,
    /// Sorted flat indices in the nominal plane that no ray reached,
    /// excluding the blocking voxels themselves.
    pub shadow: Vec<usize>,
    /// Sorted first bone voxels of blocked rays.
    pub blockers: Vec<usize>,
    pub n_insonified: usize,
    pub n_shadow: usize,
    pub p_t: f64,
    /// Insonified target voxels not covered before, regardless of the gate.
    pub visible_target: Vec<usize>,
    /// `visible_target` if the gate admits this plane, else empty.
    pub covered_target: Vec<usize>,
    pub gate_passed: bool,
    pub d_t: f64,
}

impl ImagingPlaneResult {
    /// Voxels of the nominal (bone-free) plane.
    pub fn plane_count(&self) -> usize {
        self.n_insonified + self.n_shadow + self.blockers.len()
    }

    pub fn write_beam(&self, grid: &mut VoxelGrid) {
        grid.clear_channel(Channel::Beam);
        for &f in &self.insonified {
            grid.set_flat(Channel::Beam, f, true);
        }
    }
}

fn sorted_unique(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Differences of sorted unique slices: `a \ b`.
fn minus(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len());
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        if j >= b.len() || b[j] != x {
            out.push(x);
        }
    }
    out
}

/// Renders the imaging plane of `pose`. `covered` flags target voxels
/// already counted this episode; `target_voxels` lists channel-0 voxels for
/// the distance term.
pub fn render_imaging_plane(
    grid: &VoxelGrid,
    pose: &Pose,
    probe: &ProbeModel,
    covered: &[bool],
    target_voxels: &[usize],
    gate: &ShadowGate,
) -> ImagingPlaneResult {
    let bone = grid.channel(Channel::Bone);
    let long = pose.long_axis();
    let dir = pose.centerline();
    let mut ins = Vec::new();
    let mut all = Vec::new();
    let mut blockers = Vec::new();
    for off in probe.element_offsets() {
        let origin = pose.position + long * off;
        let mut blocked = false;
        traverse(grid, origin, dir, probe.imaging_depth, |f, _| {
            all.push(f);
            if !blocked {
                if bone[f] != 0 {
                    blocked = true;
                    blockers.push(f);
                } else {
                    ins.push(f);
                }
            }
            ControlFlow::Continue(())
        });
    }
    let insonified = sorted_unique(ins);
    let blockers = sorted_unique(blockers);
    let all = sorted_unique(all);
    let shadow = minus(&minus(&all, &insonified), &blockers);
    let (n_insonified, n_shadow) = (insonified.len(), shadow.len());
    let p_t = n_shadow as f64 / (n_insonified + n_shadow).max(1) as f64;

    let target = grid.channel(Channel::Target);
    let visible_target: Vec<usize> = insonified.iter().copied().filter(|&f| target[f] != 0 && !covered[f]).collect();
    let gate_passed = gate.passes(p_t);
    let covered_target = if gate_passed { visible_target.clone() } else { Vec::new() };
    let d_t = probe_target_distance(pose.position, grid, target_voxels, covered);
    ImagingPlaneResult {
        insonified,
        shadow,
        blockers,
        n_insonified,
        n_shadow,
        p_t,
        visible_target,
        covered_target,
        gate_passed,
        d_t,
    }
}

/// Distance from `contact` to the centroid of the uncovered target voxels,
/// or of all target voxels once everything is covered.
pub fn probe_target_distance(contact: Vec3, grid: &VoxelGrid, target_voxels: &[usize], covered: &[bool]) -> f64 {
    let centroid = |it: &mut dyn Iterator<Item = usize>| -> Option<Vec3> {
        let mut s = Vec3::ZERO;
        let mut n = 0usize;
        for f in it {
            s += grid.voxel_center(grid.unflat(f));
            n += 1;
        }
        (n > 0).then(|| s / n as f64)
    };
    let c = centroid(&mut target_voxels.iter().copied().filter(|&f| !covered[f]))
        .or_else(|| centroid(&mut target_voxels.iter().copied()))
        .unwrap_or(contact);
    contact.distance(c)
}
