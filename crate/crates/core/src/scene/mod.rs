//! Scenario construction: anatomy, targets, size normalization and the static
//! voxel channels of the state grid.

mod io;
mod normalize;
mod ribcage;
mod targets;

pub use io::{load_segmented_meshes, SceneFile};
pub use normalize::{denormalize_trajectory, normalize_to_generic};
pub use ribcage::{generate_procedural_ribcage, RibcageParams};
pub use targets::{euler_rotation, place_targets, random_rotation, voxelize_ellipsoid, EllipsoidSpec, TargetPlacement};

use crate::geometry::{Affine, Channel, CylinderFrame, GeometryError, MeshError, SkinSurface, Vec3, VoxelGrid};
use crate::seeding::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::PathBuf;
use thiserror::Error;

/// Voxel index on the global lattice: voxel `k` covers `[k, k+1) * res` per axis.
pub type LatticeKey = [i64; 3];

pub fn lattice_key(p: Vec3, res: f64) -> LatticeKey {
    [(p.x / res).floor() as i64, (p.y / res).floor() as i64, (p.z / res).floor() as i64]
}

pub fn lattice_center(k: LatticeKey, res: f64) -> Vec3 {
    Vec3::new(k[0] as f64 + 0.5, k[1] as f64 + 0.5, k[2] as f64 + 0.5) * res
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: MeshError },
    #[error("target mesh {path} is not closed ({open_edges} open edges)")]
    OpenMesh { path: String, open_edges: usize },
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("target {target} could not be placed after {attempts} attempts")]
    PlacementFailed { target: u32, attempts: u32 },
    #[error("target voxels do not fit in the {extent} mm state grid")]
    TargetOutsideGrid { extent: f64 },
    #[error("target {0} contains no voxels")]
    EmptyTarget(u32),
    #[error("scene file line {line}: {msg}")]
    SceneFormat { line: usize, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    S,
    M,
    L,
}

impl SizeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::S => "S",
            SizeClass::M => "M",
            SizeClass::L => "L",
        }
    }
}

/// Size class of a target volume in cm³; both bounds of the medium class are
/// inclusive.
pub fn classify_target_size(volume_cm3: f64) -> SizeClass {
    if volume_cm3 < 4.0 {
        SizeClass::S
    } else if volume_cm3 <= 13.5 {
        SizeClass::M
    } else {
        SizeClass::L
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anatomy {
    pub resolution: f64,
    pub bone: BTreeSet<LatticeKey>,
    pub skin: SkinSurface,
    pub frame: CylinderFrame,
    /// Maps the original patient space into the current (generic) space.
    pub scale_to_generic: Affine,
}

impl Anatomy {
    /// Smallest and largest radial distance of bone voxel centres.
    pub fn bone_radial_range(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &k in &self.bone {
            let r = self.frame.radial_distance(lattice_center(k, self.resolution));
            lo = lo.min(r);
            hi = hi.max(r);
        }
        (lo <= hi).then_some((lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub id: u32,
    pub voxels: BTreeSet<LatticeKey>,
    pub volume_cm3: f64,
    pub size_class: SizeClass,
}

impl Target {
    pub fn from_voxels(id: u32, voxels: BTreeSet<LatticeKey>, resolution: f64) -> Self {
        let volume_cm3 = voxels.len() as f64 * resolution.powi(3) / 1000.0;
        Target { id, voxels, volume_cm3, size_class: classify_target_size(volume_cm3) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RibcageSource {
    Procedural(RibcageParams),
    Meshes { bone: PathBuf, skin: PathBuf, targets: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSource {
    Random(TargetPlacement),
    Ellipsoids { targets: Vec<EllipsoidSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub ribcage: RibcageSource,
    pub targets: TargetSource,
    /// Number of randomly placed targets, or the maximum when
    /// `randomize_target_count` is set.
    #[serde(default = "one")]
    pub n_targets: u32,
    #[serde(default)]
    pub randomize_target_count: bool,
    #[serde(default = "default_extent")]
    pub grid_extent: f64,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    /// Rescale the anatomy so the bounding cylinder has this radius.
    #[serde(default)]
    pub generic_radius: Option<f64>,
}

fn one() -> u32 {
    1
}

fn default_extent() -> f64 {
    120.0
}

fn default_resolution() -> f64 {
    4.0
}

impl ScenarioConfig {
    pub fn grid_dim(&self) -> usize {
        (self.grid_extent / self.resolution).round() as usize
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidParams(m.to_string()));
        if !(self.resolution > 0.0) || !(self.grid_extent > 0.0) {
            return bad("grid extent and resolution must be positive");
        }
        let n = self.grid_extent / self.resolution;
        if (n - n.round()).abs() > 1e-9 || n.round() < 2.0 {
            return bad("grid extent must be a multiple of the resolution");
        }
        if !(1..=3).contains(&self.n_targets) {
            return bad("n_targets must be between 1 and 3");
        }
        if let Some(r) = self.generic_radius {
            if !(r > 0.0) {
                return bad("generic radius must be positive");
            }
        }
        match &self.ribcage {
            RibcageSource::Procedural(p) => {
                let mut p = p.clone();
                p.resolution = self.resolution;
                p.validate()?;
            }
            RibcageSource::Meshes { .. } => {}
        }
        match &self.targets {
            TargetSource::Random(tp) => tp.validate()?,
            TargetSource::Ellipsoids { targets } => {
                if targets.is_empty() {
                    return bad("explicit target list is empty");
                }
                for t in targets {
                    t.validate()?;
                }
            }
        }
        Ok(())
    }
}

/// A built scenario: anatomy, targets and the static channels of the grid.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub anatomy: Anatomy,
    pub targets: Vec<Target>,
    pub grid: VoxelGrid,
}

impl Scenario {
    pub fn build(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario, SceneError> {
        cfg.validate()?;
        let (mut anatomy, mesh_targets) = match &cfg.ribcage {
            RibcageSource::Procedural(p) => {
                let mut p = p.clone();
                p.resolution = cfg.resolution;
                (generate_procedural_ribcage(&p, derive_seed(seed, 1))?, Vec::new())
            }
            RibcageSource::Meshes { bone, skin, targets } => {
                load_segmented_meshes(bone, skin, targets, cfg.resolution)?
            }
        };
        let mut targets = mesh_targets;
        if let Some(r) = cfg.generic_radius {
            let (a, t) = normalize_to_generic(&anatomy, &targets, r, None);
            anatomy = a;
            targets = t;
        }
        if targets.is_empty() {
            targets = match &cfg.targets {
                TargetSource::Random(tp) => {
                    let n = if cfg.randomize_target_count {
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, 3)).gen_range(1..=cfg.n_targets)
                    } else {
                        cfg.n_targets
                    };
                    place_targets(&anatomy, tp, n, cfg.grid_extent, derive_seed(seed, 2))?
                }
                TargetSource::Ellipsoids { targets: specs } => {
                    let mut out: Vec<Target> = Vec::new();
                    for (i, spec) in specs.iter().enumerate() {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
                        rng.set_stream(i as u64 + 1);
                        let mut vox = spec.voxelize(&anatomy, &mut rng);
                        vox.retain(|k| !anatomy.bone.contains(k) && !out.iter().any(|t| t.voxels.contains(k)));
                        if vox.is_empty() {
                            return Err(SceneError::EmptyTarget(i as u32));
                        }
                        out.push(Target::from_voxels(i as u32, vox, anatomy.resolution));
                    }
                    out
                }
            };
        }
        let grid = build_static_channels(&anatomy, &targets, cfg.grid_extent)?;
        Ok(Scenario { seed, anatomy, targets, grid })
    }

    pub fn target_voxel_count(&self) -> usize {
        self.grid.channel_sum(Channel::Target)
    }
}

/// Lattice key of the grid's first voxel for a cubic window of `n` voxels
/// centred on the centroid of the given voxels.
pub fn grid_origin_key<'a>(voxels: impl Iterator<Item = &'a LatticeKey>, n: usize) -> Option<LatticeKey> {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for k in voxels {
        for a in 0..3 {
            sum[a] += k[a] as f64 + 0.5;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let half = n as f64 / 2.0;
    Some(std::array::from_fn(|a| (sum[a] / count as f64 - half).round() as i64))
}

/// Channel 0 = union of target voxels, channel 1 = bone, channel 2 empty, on
/// an `extent`-mm cube centred on the target centroid.
pub fn build_static_channels(anatomy: &Anatomy, targets: &[Target], extent: f64) -> Result<VoxelGrid, SceneError> {
    let res = anatomy.resolution;
    let n = (extent / res).round() as usize;
    let union: BTreeSet<LatticeKey> = targets.iter().flat_map(|t| t.voxels.iter().copied()).collect();
    let origin = grid_origin_key(union.iter(), n).ok_or(SceneError::TargetOutsideGrid { extent })?;
    let local = |k: &LatticeKey| -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let d = k[a] - origin[a];
            if d < 0 || d >= n as i64 {
                return None;
            }
            idx[a] = d as usize;
        }
        Some(idx)
    };
    let origin_world = Vec3::new(origin[0] as f64, origin[1] as f64, origin[2] as f64) * res;
    let mut grid = VoxelGrid::new(origin_world, res, [n, n, n]);
    for k in &union {
        let idx = local(k).ok_or(SceneError::TargetOutsideGrid { extent })?;
        grid.set(Channel::Target, idx, true);
    }
    for k in &anatomy.bone {
        if let Some(idx) = local(k) {
            if !union.contains(k) {
                grid.set(Channel::Bone, idx, true);
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RadialHeightField;

    fn bare_anatomy(bone: BTreeSet<LatticeKey>) -> Anatomy {
        Anatomy {
            resolution: 4.0,
            bone,
            skin: SkinSurface::HeightField(RadialHeightField::constant(150.0)),
            frame: CylinderFrame::new(Vec3::ZERO, Vec3::Z, 150.0, -100.0, 100.0).unwrap(),
            scale_to_generic: Affine::IDENTITY,
        }
    }

    #[test]
    fn size_classes() {
        assert_eq!(classify_target_size(3.0), SizeClass::S);
        assert_eq!(classify_target_size(10.0), SizeClass::M);
        assert_eq!(classify_target_size(20.0), SizeClass::L);
        assert_eq!(classify_target_size(4.0), SizeClass::M);
        assert_eq!(classify_target_size(13.5), SizeClass::M);
        assert_eq!(classify_target_size(3.999), SizeClass::S);
        assert_eq!(classify_target_size(13.5001), SizeClass::L);
    }

    #[test]
    fn classify_is_monotone() {
        let mut prev = SizeClass::S;
        for i in 1..100_000 {
            let c = classify_target_size(i as f64 * 0.0003);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn eight_voxel_target_without_bone() {
        let vox: BTreeSet<LatticeKey> =
            (0..8).map(|i| [10 + (i & 1) as i64, 20 + ((i >> 1) & 1) as i64, -3 + (i >> 2) as i64]).collect();
        let target = Target::from_voxels(0, vox, 4.0);
        assert!((target.volume_cm3 - 0.512).abs() < 1e-12);
        let grid = build_static_channels(&bare_anatomy(BTreeSet::new()), &[target], 120.0).unwrap();
        assert_eq!(grid.dims, [30, 30, 30]);
        assert_eq!(grid.channel_sum(Channel::Target), 8);
        assert_eq!(grid.channel_sum(Channel::Bone), 0);
        assert_eq!(grid.channel_sum(Channel::Beam), 0);
        // centred: the 2x2x2 block straddles the grid middle
        assert!(grid.get(Channel::Target, [14, 14, 14]) && grid.get(Channel::Target, [15, 15, 15]));
    }

    #[test]
    fn target_too_wide_for_grid() {
        let vox: BTreeSet<LatticeKey> = [[0, 0, 0], [40, 0, 0]].into_iter().collect();
        let t = Target::from_voxels(0, vox, 4.0);
        assert!(matches!(
            build_static_channels(&bare_anatomy(BTreeSet::new()), &[t], 120.0),
            Err(SceneError::TargetOutsideGrid { .. })
        ));
    }

    #[test]
    fn lattice_round_trip() {
        for k in [[0, 0, 0], [-1, 5, -30], [7, -7, 100]] {
            assert_eq!(lattice_key(lattice_center(k, 4.0), 4.0), k);
        }
    }
}
