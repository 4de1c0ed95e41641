//! Mesh ingestion and the plain-text scene format.

use super::{lattice_center, lattice_key, Anatomy, LatticeKey, SceneError, Target};
use crate::geometry::{fit_bounding_cylinder, Affine, Channel, SkinSurface, TriMesh, Vec3, VoxelGrid};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

fn read_mesh(path: &Path) -> Result<TriMesh, SceneError> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::Io { path: name.clone(), msg: e.to_string() })?;
    TriMesh::parse(&text).map_err(|source| SceneError::Parse { path: name, source })
}

/// Voxels whose centres lie inside the mesh (generalized winding number).
pub fn voxelize_mesh(mesh: &TriMesh, res: f64) -> BTreeSet<LatticeKey> {
    let (lo, hi) = mesh.bounds();
    let (klo, khi) = (lattice_key(lo, res), lattice_key(hi, res));
    let mut out = BTreeSet::new();
    for i in klo[0]..=khi[0] {
        for j in klo[1]..=khi[1] {
            for k in klo[2]..=khi[2] {
                if mesh.contains(lattice_center([i, j, k], res)) {
                    out.insert([i, j, k]);
                }
            }
        }
    }
    out
}

/// Loads bone, skin and target meshes (ASCII `v`/`f` records, millimetres).
/// The cylinder axis is the z axis; target voxels overlapping bone are
/// dropped.
pub fn load_segmented_meshes(
    bone_path: &Path,
    skin_path: &Path,
    target_paths: &[impl AsRef<Path>],
    resolution: f64,
) -> Result<(Anatomy, Vec<Target>), SceneError> {
    let bone_mesh = read_mesh(bone_path)?;
    let skin_mesh = read_mesh(skin_path)?;
    let mut target_meshes = Vec::new();
    for p in target_paths {
        let p = p.as_ref();
        let m = read_mesh(p)?;
        if let Err(crate::geometry::MeshError::Open { open_edges }) = m.check_watertight() {
            return Err(SceneError::OpenMesh { path: p.display().to_string(), open_edges });
        }
        target_meshes.push(m);
    }

    let bone = voxelize_mesh(&bone_mesh, resolution);
    let hull: Vec<Vec3> = bone_mesh.vertices.iter().chain(skin_mesh.vertices.iter()).copied().collect();
    let frame = fit_bounding_cylinder(&hull, Vec3::Z)?;
    let mut targets = Vec::new();
    for (i, m) in target_meshes.iter().enumerate() {
        let mut vox = voxelize_mesh(m, resolution);
        vox.retain(|k| !bone.contains(k));
        if vox.is_empty() {
            return Err(SceneError::EmptyTarget(i as u32));
        }
        targets.push(Target::from_voxels(i as u32, vox, resolution));
    }
    let anatomy = Anatomy {
        resolution,
        bone,
        skin: SkinSurface::Mesh(skin_mesh),
        frame,
        scale_to_generic: Affine::IDENTITY,
    };
    Ok((anatomy, targets))
}

/// Text scene: `dims nx ny nz`, `res mm`, `origin x y z`, `Rc mm`, then one
/// `c i j k` line per occupied voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub dims: [usize; 3],
    pub res: f64,
    pub origin: Vec3,
    pub rc: f64,
    pub voxels: Vec<(u8, [usize; 3])>,
}

impl SceneFile {
    pub fn from_grid(grid: &VoxelGrid, rc: f64) -> Self {
        let mut voxels = Vec::new();
        for c in [Channel::Target, Channel::Bone, Channel::Beam] {
            for f in grid.occupied(c) {
                voxels.push((c as u8, grid.unflat(f)));
            }
        }
        SceneFile { dims: grid.dims, res: grid.resolution, origin: grid.origin, rc, voxels }
    }

    pub fn to_grid(&self) -> VoxelGrid {
        let mut g = VoxelGrid::new(self.origin, self.res, self.dims);
        for &(c, idx) in &self.voxels {
            let ch = [Channel::Target, Channel::Bone, Channel::Beam][c as usize];
            g.set(ch, idx, true);
        }
        g
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [nx, ny, nz] = self.dims;
        let _ = writeln!(s, "dims {nx} {ny} {nz}");
        let _ = writeln!(s, "res {}", self.res);
        let _ = writeln!(s, "origin {} {} {}", self.origin.x, self.origin.y, self.origin.z);
        let _ = writeln!(s, "Rc {}", self.rc);
        for (c, [i, j, k]) in &self.voxels {
            let _ = writeln!(s, "{c} {i} {j} {k}");
        }
        s
    }

    /// Strict parser: header order is fixed, every voxel line must be in
    /// range and no voxel may repeat within a channel.
    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let err = |line: usize, msg: String| SceneError::SceneFormat { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut header = |key: &str, n: usize| -> Result<Vec<String>, SceneError> {
            let (no, l) = lines.next().ok_or_else(|| err(0, format!("missing `{key}` header")))?;
            let mut parts = l.split_whitespace();
            if parts.next() != Some(key) {
                return Err(err(no, format!("expected `{key}`")));
            }
            let vals: Vec<String> = parts.map(str::to_string).collect();
            if vals.len() != n {
                return Err(err(no, format!("`{key}` takes {n} values")));
            }
            Ok(vals)
        };
        let num = |v: &str| -> Result<f64, SceneError> {
            v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| err(0, format!("bad number `{v}`")))
        };
        let d = header("dims", 3)?;
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = d[a].parse().map_err(|_| err(1, format!("bad dimension `{}`", d[a])))?;
        }
        let res = num(&header("res", 1)?[0])?;
        let o = header("origin", 3)?;
        let origin = Vec3::new(num(&o[0])?, num(&o[1])?, num(&o[2])?);
        let rc = num(&header("Rc", 1)?[0])?;
        if !(res > 0.0) || !(rc > 0.0) || dims.contains(&0) {
            return Err(err(2, "dims, res and Rc must be positive".into()));
        }
        drop(header);

        let mut voxels = Vec::new();
        let mut seen: BTreeSet<(u8, [usize; 3])> = BTreeSet::new();
        for (no, l) in text.lines().enumerate().skip(4) {
            let no = no + 1;
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(err(no, "voxel lines have exactly four fields".into()));
            }
            let c: u8 = parts[0].parse().map_err(|_| err(no, "bad channel".into()))?;
            if c > 2 {
                return Err(err(no, format!("channel {c} out of range")));
            }
            let mut idx = [0usize; 3];
            for a in 0..3 {
                idx[a] = parts[a + 1].parse().map_err(|_| err(no, "bad voxel index".into()))?;
                if idx[a] >= dims[a] {
                    return Err(err(no, "voxel index outside dims".into()));
                }
            }
            if !seen.insert((c, idx)) {
                return Err(err(no, "duplicate voxel".into()));
            }
            voxels.push((c, idx));
        }
        Ok(SceneFile { dims, res, origin, rc, voxels })
    }
}
