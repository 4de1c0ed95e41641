//! Ellipsoidal targets: explicit specifications and randomized placement
//! beneath the ribs.

use super::{grid_origin_key, lattice_center, lattice_key, Anatomy, LatticeKey, SceneError, SizeClass, Target};
use crate::geometry::{wrap_degrees, wrap_signed_degrees, Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Voxels whose centres lie inside the ellipsoid `center + rot * diag(semi) * unit ball`.
pub fn voxelize_ellipsoid(center: Vec3, semi: [f64; 3], rot: &Mat3, res: f64) -> BTreeSet<LatticeKey> {
    let reach = semi.iter().cloned().fold(0.0, f64::max);
    let lo = lattice_key(center - Vec3::new(reach, reach, reach), res);
    let hi = lattice_key(center + Vec3::new(reach, reach, reach), res);
    let inv = rot.transpose();
    let mut out = BTreeSet::new();
    for i in lo[0]..=hi[0] {
        for j in lo[1]..=hi[1] {
            for k in lo[2]..=hi[2] {
                let q = inv * (lattice_center([i, j, k], res) - center);
                let s = (q.x / semi[0]).powi(2) + (q.y / semi[1]).powi(2) + (q.z / semi[2]).powi(2);
                if s <= 1.0 {
                    out.insert([i, j, k]);
                }
            }
        }
    }
    out
}

/// Uniformly distributed rotation (unit quaternion method of Shoemake).
pub fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    Mat3 {
        m: [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ],
    }
}

/// Rotation from z-y-x Euler angles in degrees.
pub fn euler_rotation(deg: [f64; 3]) -> Mat3 {
    Mat3::rotation(Vec3::Z, deg[0].to_radians())
        * Mat3::rotation(Vec3::Y, deg[1].to_radians())
        * Mat3::rotation(Vec3::X, deg[2].to_radians())
}

fn draw(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

/// Ellipsoid placed at a cylinder-frame position; semi-axes are drawn from
/// the given ranges and the orientation is random unless fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsoidSpec {
    /// Centre as (h mm, theta deg, r mm) in the anatomy's cylinder frame.
    pub center: [f64; 3],
    pub semi_axes: [[f64; 2]; 3],
    #[serde(default)]
    pub rotation_deg: Option<[f64; 3]>,
    /// Per-scene uniform offset of the centre, up to +-this per coordinate.
    #[serde(default)]
    pub center_spread: [f64; 3],
}

impl EllipsoidSpec {
    pub fn fixed(center: [f64; 3], semi: [f64; 3], rotation_deg: [f64; 3]) -> Self {
        EllipsoidSpec {
            center,
            semi_axes: [[semi[0]; 2], [semi[1]; 2], [semi[2]; 2]],
            rotation_deg: Some(rotation_deg),
            center_spread: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.semi_axes.iter().any(|r| !(r[0] > 0.0) || r[1] < r[0]) {
            return Err(SceneError::InvalidParams("ellipsoid semi-axis ranges must be positive".into()));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(SceneError::InvalidParams("ellipsoid centre must be finite".into()));
        }
        if self.center_spread.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(SceneError::InvalidParams("centre spread must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn voxelize(&self, anatomy: &Anatomy, rng: &mut impl Rng) -> BTreeSet<LatticeKey> {
        let semi = [draw(rng, self.semi_axes[0]), draw(rng, self.semi_axes[1]), draw(rng, self.semi_axes[2])];
        let rot = match self.rotation_deg {
            Some(e) => euler_rotation(e),
            None => random_rotation(rng),
        };
        let mut at = self.center;
        if self.center_spread != [0.0; 3] {
            for (x, s) in at.iter_mut().zip(self.center_spread) {
                *x += draw(rng, [-s, s]);
            }
        }
        let c = anatomy.frame.cyl_to_cartesian(at[0], at[1], at[2]);
        voxelize_ellipsoid(c, semi, &rot, anatomy.resolution)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPlacement {
    #[serde(default = "default_semi_axes")]
    pub semi_axis_range: [f64; 2],
    /// Distance of the target centre below the innermost bone voxel (mm).
    #[serde(default = "default_depth")]
    pub depth_range: [f64; 2],
    #[serde(default = "all_classes")]
    pub size_classes: Vec<SizeClass>,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
}

fn default_semi_axes() -> [f64; 2] {
    [8.0, 20.0]
}

fn default_depth() -> [f64; 2] {
    [25.0, 50.0]
}

fn all_classes() -> Vec<SizeClass> {
    vec![SizeClass::S, SizeClass::M, SizeClass::L]
}

fn default_attempts() -> u32 {
    100
}

impl Default for TargetPlacement {
    fn default() -> Self {
        TargetPlacement {
            semi_axis_range: default_semi_axes(),
            depth_range: default_depth(),
            size_classes: all_classes(),
            max_attempts: default_attempts(),
        }
    }
}

impl TargetPlacement {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidParams(m.to_string()));
        if !(self.semi_axis_range[0] > 0.0) || self.semi_axis_range[1] < self.semi_axis_range[0] {
            return bad("semi-axis range must be positive and ordered");
        }
        if !(self.depth_range[0] >= 0.0) || self.depth_range[1] < self.depth_range[0] {
            return bad("depth range must be non-negative and ordered");
        }
        if self.size_classes.is_empty() {
            return bad("at least one size class must be allowed");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

/// Places `n` random ellipsoids under the rib layer. Target `i` draws from
/// its own random stream so adding targets never perturbs earlier ones.
pub fn place_targets(
    anatomy: &Anatomy,
    placement: &TargetPlacement,
    n: u32,
    grid_extent: f64,
    seed: u64,
) -> Result<Vec<Target>, SceneError> {
    placement.validate()?;
    let res = anatomy.resolution;
    let dim = (grid_extent / res).round() as usize;
    let frame = &anatomy.frame;
    let (inner, _) = anatomy
        .bone_radial_range()
        .ok_or_else(|| SceneError::InvalidParams("anatomy has no bone voxels".into()))?;

    // axial and angular span of the bone
    let cyl: Vec<(f64, f64)> = anatomy
        .bone
        .iter()
        .map(|&k| {
            let (h, t, _) = frame.cartesian_to_cyl(lattice_center(k, res));
            (h, t)
        })
        .collect();
    let (sx, sy) = cyl.iter().fold((0.0, 0.0), |(x, y), &(_, t)| (x + t.to_radians().cos(), y + t.to_radians().sin()));
    let mid = sy.atan2(sx).to_degrees();
    let (mut h_lo, mut h_hi, mut t_lo, mut t_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(h, t) in &cyl {
        h_lo = h_lo.min(h);
        h_hi = h_hi.max(h);
        let d = wrap_signed_degrees(t - mid);
        t_lo = t_lo.min(d);
        t_hi = t_hi.max(d);
    }

    let mut placed: Vec<Target> = Vec::new();
    for id in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64 + 1);
        let mut found = None;
        for _ in 0..placement.max_attempts {
            let h = draw(&mut rng, [h_lo, h_hi]);
            let theta = wrap_degrees(mid + draw(&mut rng, [t_lo, t_hi]));
            let r = inner - draw(&mut rng, placement.depth_range);
            let semi = [
                draw(&mut rng, placement.semi_axis_range),
                draw(&mut rng, placement.semi_axis_range),
                draw(&mut rng, placement.semi_axis_range),
            ];
            let rot = random_rotation(&mut rng);
            if !(r > 0.0) {
                continue;
            }
            let vox = voxelize_ellipsoid(frame.cyl_to_cartesian(h, theta, r), semi, &rot, res);
            if vox.is_empty() {
                continue;
            }
            let target = Target::from_voxels(id, vox, res);
            if !placement.size_classes.contains(&target.size_class) {
                continue;
            }
            let clear = target.voxels.iter().all(|k| {
                !anatomy.bone.contains(k)
                    && frame.radial_distance(lattice_center(*k, res)) < inner
                    && placed.iter().all(|p| !p.voxels.contains(k))
            });
            if !clear {
                continue;
            }
            let all = || placed.iter().flat_map(|t| t.voxels.iter()).chain(target.voxels.iter());
            let origin = grid_origin_key(all(), dim).unwrap();
            if !all().all(|k| (0..3).all(|a| k[a] >= origin[a] && k[a] < origin[a] + dim as i64)) {
                continue;
            }
            found = Some(target);
            break;
        }
        match found {
            Some(t) => placed.push(t),
            None => return Err(SceneError::PlacementFailed { target: id, attempts: placement.max_attempts }),
        }
    }
    Ok(placed)
}
