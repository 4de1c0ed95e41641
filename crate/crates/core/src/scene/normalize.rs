//! Affine resizing of an anatomy into a generic cylinder and the inverse
//! mapping of planned poses back to the patient.

use super::{lattice_center, lattice_key, Anatomy, LatticeKey, Target};
use crate::geometry::{Affine, CylinderFrame, Mat3, Pose, SkinSurface, Vec3};
use std::collections::BTreeSet;

/// Affine that scales radial offsets by `radial` and maps axial coordinate
/// `h` to `axial * (h - h_from) + h_to`, about the frame axis.
fn cylinder_affine(frame: &CylinderFrame, radial: f64, axial: f64, h_from: f64, h_to: f64) -> Affine {
    let a = frame.axis;
    let aat = Mat3 { m: std::array::from_fn(|i| std::array::from_fn(|j| a.component(i) * a.component(j))) };
    let mut linear = Mat3::IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            linear.m[i][j] = radial * (Mat3::IDENTITY.m[i][j] - aat.m[i][j]) + axial * aat.m[i][j];
        }
    }
    let o = frame.origin;
    let translation = o - linear * o + a * (h_to - axial * h_from);
    Affine { linear, translation }
}

/// Pull-resamples a voxel set through `forward`: a destination voxel is set
/// when its centre maps back into a source voxel.
fn resample(src: &BTreeSet<LatticeKey>, forward: &Affine, inverse: &Affine, res: f64) -> BTreeSet<LatticeKey> {
    if src.is_empty() {
        return BTreeSet::new();
    }
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for k in src {
        for a in 0..3 {
            lo[a] = lo[a].min(k[a]);
            hi[a] = hi[a].max(k[a]);
        }
    }
    let mut dlo = [i64::MAX; 3];
    let mut dhi = [i64::MIN; 3];
    for c in 0..8 {
        let corner = Vec3::new(
            if c & 1 == 0 { lo[0] } else { hi[0] + 1 } as f64,
            if c & 2 == 0 { lo[1] } else { hi[1] + 1 } as f64,
            if c & 4 == 0 { lo[2] } else { hi[2] + 1 } as f64,
        ) * res;
        let k = lattice_key(forward.apply(corner), res);
        for a in 0..3 {
            dlo[a] = dlo[a].min(k[a] - 1);
            dhi[a] = dhi[a].max(k[a] + 1);
        }
    }
    let mut out = BTreeSet::new();
    for i in dlo[0]..=dhi[0] {
        for j in dlo[1]..=dhi[1] {
            for k in dlo[2]..=dhi[2] {
                if src.contains(&lattice_key(inverse.apply(lattice_center([i, j, k], res)), res)) {
                    out.insert([i, j, k]);
                }
            }
        }
    }
    out
}

/// Rescales the anatomy so its bounding cylinder has radius `generic_radius`
/// and, when given, the axial range `generic_h`. The mapping is accumulated
/// into `scale_to_generic`.
pub fn normalize_to_generic(
    anatomy: &Anatomy,
    targets: &[Target],
    generic_radius: f64,
    generic_h: Option<[f64; 2]>,
) -> (Anatomy, Vec<Target>) {
    let frame = anatomy.frame;
    let radial = generic_radius / frame.radius;
    let (axial, h_to) = match generic_h {
        Some([lo, hi]) => ((hi - lo) / (frame.h_max - frame.h_min), lo),
        None => (1.0, frame.h_min),
    };
    let forward = cylinder_affine(&frame, radial, axial, frame.h_min, h_to);
    let inverse = forward.inverse().expect("positive scale factors give an invertible map");
    let res = anatomy.resolution;

    let new_frame = CylinderFrame {
        radius: generic_radius,
        h_min: h_to,
        h_max: h_to + axial * (frame.h_max - frame.h_min),
        ..frame
    };
    let skin = match &anatomy.skin {
        SkinSurface::HeightField(f) => SkinSurface::HeightField(f.scaled(radial, axial, h_to - axial * frame.h_min)),
        SkinSurface::Mesh(m) => SkinSurface::Mesh(m.transformed(&forward)),
    };
    let out = Anatomy {
        resolution: res,
        bone: resample(&anatomy.bone, &forward, &inverse, res),
        skin,
        frame: new_frame,
        scale_to_generic: forward.compose(&anatomy.scale_to_generic),
    };
    let targets = targets
        .iter()
        .map(|t| Target::from_voxels(t.id, resample(&t.voxels, &forward, &inverse, res), res))
        .collect();
    (out, targets)
}

/// Applies `map` to a pose: positions map as points, the centerline and long
/// axis as tangent vectors, then the frame is re-orthonormalized with the
/// centerline kept exact.
pub fn transform_pose(pose: &Pose, map: &Affine) -> Pose {
    let c = map.apply_vector(pose.centerline()).normalized();
    let l = map.apply_vector(pose.long_axis());
    let l = (l - c * l.dot(c)).normalized();
    let s = c.cross(l);
    Pose { position: map.apply(pose.position), orientation: Mat3::from_cols(l, s, c) }
}

/// Maps poses planned in the generic space back to patient space.
pub fn denormalize_trajectory(traj: &[Pose], anatomy: &Anatomy) -> Vec<Pose> {
    let back = anatomy.scale_to_generic.inverse().expect("scale_to_generic is invertible");
    traj.iter().map(|p| transform_pose(p, &back)).collect()
}
