//! Procedural rib cages: ribs are circular-arc tubes on a cylinder around the
//! longitudinal (z) axis, separated by configurable intercostal gaps.

use super::{lattice_center, lattice_key, Anatomy, LatticeKey, SceneError};
use crate::geometry::{
    fit_bounding_cylinder, wrap_signed_degrees, Affine, CylinderFrame, RadialHeightField, SkinSurface, Vec3,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RibcageParams {
    /// Clear surface-to-surface gaps between consecutive ribs (mm); the rib
    /// count is `gaps.len() + 1`.
    pub gaps: Vec<f64>,
    pub tube_radius: f64,
    /// Radial distance of the rib centrelines from the axis (mm).
    pub rib_radius: f64,
    pub skin_radius: f64,
    /// Axial position of the first rib centreline (mm).
    pub first_rib_h: f64,
    /// Angular extent of every rib (degrees, start and end, counter-clockwise).
    pub arc: [f64; 2],
    /// Uniform random perturbation of each arc end (degrees).
    #[serde(default)]
    pub arc_jitter: f64,
    /// Skin extends this far beyond the outer ribs along the axis (mm).
    #[serde(default = "default_skin_margin")]
    pub skin_margin: f64,
    /// Voxel size; set from the scenario configuration.
    #[serde(skip, default = "default_resolution")]
    pub resolution: f64,
}

fn default_skin_margin() -> f64 {
    40.0
}

fn default_resolution() -> f64 {
    4.0
}

impl RibcageParams {
    pub fn uniform(rib_count: usize, gap: f64, tube_radius: f64) -> Self {
        RibcageParams {
            gaps: vec![gap; rib_count.saturating_sub(1)],
            tube_radius,
            rib_radius: 135.0,
            skin_radius: 150.0,
            first_rib_h: 0.0,
            arc: [-60.0, 60.0],
            arc_jitter: 0.0,
            skin_margin: default_skin_margin(),
            resolution: default_resolution(),
        }
    }

    /// As many ribs as fit in `span` mm at the given gap (at least two).
    pub fn spanning(span: f64, gap: f64, tube_radius: f64) -> Self {
        let pitch = gap + 2.0 * tube_radius;
        let count = (((span + gap) / pitch).floor() as usize).max(2);
        Self::uniform(count, gap, tube_radius)
    }

    pub fn rib_count(&self) -> usize {
        self.gaps.len() + 1
    }

    /// Axial centreline positions of all ribs.
    pub fn rib_heights(&self) -> Vec<f64> {
        let mut hs = vec![self.first_rib_h];
        for g in &self.gaps {
            let last = *hs.last().unwrap();
            hs.push(last + g + 2.0 * self.tube_radius);
        }
        hs
    }

    /// Axial centre of the `i`-th intercostal gap.
    pub fn gap_center(&self, i: usize) -> f64 {
        let hs = self.rib_heights();
        0.5 * (hs[i] + hs[i + 1])
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidParams(m));
        if self.rib_count() < 2 {
            return bad("need at least two ribs".into());
        }
        if let Some(g) = self.gaps.iter().find(|g| !(**g > 0.0)) {
            return bad(format!("intercostal gap must be positive, got {g}"));
        }
        if !(self.tube_radius > 0.0) {
            return bad("rib tube radius must be positive".into());
        }
        if !(self.resolution > 0.0) {
            return bad("resolution must be positive".into());
        }
        if !(self.rib_radius > self.tube_radius) || !(self.skin_radius > self.rib_radius + self.tube_radius) {
            return bad("ribs must lie between the axis and the skin".into());
        }
        if !(self.arc[1] > self.arc[0]) || self.arc[1] - self.arc[0] + 2.0 * self.arc_jitter >= 360.0 {
            return bad("rib arc must be a proper sub-interval of the circle".into());
        }
        if self.arc_jitter < 0.0 || self.skin_margin < 0.0 {
            return bad("jitter and margin must be non-negative".into());
        }
        Ok(())
    }
}

/// Distance from `p` to a rib centreline arc at height `h` and radius
/// `radius`, spanning `[a0, a1]` degrees around the z axis.
fn distance_to_arc(p: Vec3, h: f64, radius: f64, a0: f64, a1: f64) -> f64 {
    let theta = p.y.atan2(p.x).to_degrees();
    let mid = 0.5 * (a0 + a1);
    let half = 0.5 * (a1 - a0);
    let r = (p.x * p.x + p.y * p.y).sqrt();
    if wrap_signed_degrees(theta - mid).abs() <= half {
        ((p.z - h).powi(2) + (r - radius).powi(2)).sqrt()
    } else {
        let end = |a: f64| {
            let t = a.to_radians();
            Vec3::new(radius * t.cos(), radius * t.sin(), h)
        };
        p.distance(end(a0)).min(p.distance(end(a1)))
    }
}

pub fn generate_procedural_ribcage(params: &RibcageParams, seed: u64) -> Result<Anatomy, SceneError> {
    params.validate()?;
    let res = params.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bone: BTreeSet<LatticeKey> = BTreeSet::new();
    let reach = params.rib_radius + params.tube_radius;
    let lo_xy = lattice_key(Vec3::new(-reach, -reach, 0.0), res);
    let hi_xy = lattice_key(Vec3::new(reach, reach, 0.0), res);

    for h in params.rib_heights() {
        let j0 = rng.gen_range(-1.0..=1.0) * params.arc_jitter;
        let j1 = rng.gen_range(-1.0..=1.0) * params.arc_jitter;
        let (a0, a1) = (params.arc[0] + j0, params.arc[1] + j1);
        let z_lo = lattice_key(Vec3::new(0.0, 0.0, h - params.tube_radius), res)[2];
        let z_hi = lattice_key(Vec3::new(0.0, 0.0, h + params.tube_radius), res)[2];
        for i in lo_xy[0]..=hi_xy[0] {
            for j in lo_xy[1]..=hi_xy[1] {
                for k in z_lo..=z_hi {
                    let key = [i, j, k];
                    if distance_to_arc(lattice_center(key, res), h, params.rib_radius, a0, a1) <= params.tube_radius {
                        bone.insert(key);
                    }
                }
            }
        }
    }
    if bone.is_empty() {
        return Err(SceneError::InvalidParams("ribs are thinner than one voxel".into()));
    }

    let heights = params.rib_heights();
    let h_lo = heights[0] - params.tube_radius - params.skin_margin;
    let h_hi = heights[heights.len() - 1] + params.tube_radius + params.skin_margin;
    let mut hull: Vec<Vec3> = bone.iter().map(|&k| lattice_center(k, res)).collect();
    for d in 0..360 {
        let t = (d as f64).to_radians();
        for h in [h_lo, h_hi] {
            hull.push(Vec3::new(params.skin_radius * t.cos(), params.skin_radius * t.sin(), h));
        }
    }
    let fitted = fit_bounding_cylinder(&hull, Vec3::Z)?;
    // the skin ring is centred on the axis; snap the tiny numerical offset away
    let frame = CylinderFrame::new(Vec3::ZERO, Vec3::Z, fitted.radius, fitted.h_min, fitted.h_max)?;

    Ok(Anatomy {
        resolution: res,
        bone,
        skin: SkinSurface::HeightField(RadialHeightField::constant(params.skin_radius)),
        frame,
        scale_to_generic: Affine::IDENTITY,
    })
}
