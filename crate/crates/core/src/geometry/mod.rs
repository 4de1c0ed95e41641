//! Vector math, the cylindrical probe frame, skin surfaces, probe poses and
//! voxel grids.

pub mod linalg;
pub mod mesh;
pub mod welzl;

pub use linalg::{Affine, Mat3, Vec3};
pub use mesh::{MeshError, TriMesh};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("no skin contact at h={h:.3} mm, theta={theta:.3} deg")]
    NoContact { h: f64, theta: f64 },
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn wrap_degrees(theta: f64) -> f64 {
    let t = theta.rem_euclid(360.0);
    if t >= 360.0 {
        0.0
    } else {
        t
    }
}

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn wrap_signed_degrees(a: f64) -> f64 {
    let t = wrap_degrees(a);
    if t > 180.0 {
        t - 360.0
    } else {
        t
    }
}

/// Bounding cylinder used to parameterise probe positions by `(h, theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderFrame {
    /// A point on the axis; `h = 0` there.
    pub origin: Vec3,
    pub axis: Vec3,
    pub radius: f64,
    pub h_min: f64,
    pub h_max: f64,
}

impl CylinderFrame {
    pub fn new(origin: Vec3, axis: Vec3, radius: f64, h_min: f64, h_max: f64) -> Result<Self, GeometryError> {
        let frame = CylinderFrame { origin, axis: axis.normalized(), radius, h_min, h_max };
        if !(radius > 0.0) || !(h_min < h_max) || !(axis.norm() > 0.0) || !origin.is_finite() {
            return Err(GeometryError::DegenerateInput(format!("invalid cylinder frame {frame:?}")));
        }
        Ok(frame)
    }

    /// Reference directions `(e1, e2)` with `(e1, e2, axis)` right-handed;
    /// `theta = 0` lies along `e1`.
    pub fn basis(&self) -> (Vec3, Vec3) {
        let helper = if self.axis.dot(Vec3::X).abs() < 0.9 { Vec3::X } else { Vec3::Y };
        let e1 = (helper - self.axis * helper.dot(self.axis)).normalized();
        let e2 = self.axis.cross(e1);
        (e1, e2)
    }

    /// Outward radial unit vector at azimuth `theta` (degrees).
    pub fn radial(&self, theta: f64) -> Vec3 {
        let (e1, e2) = self.basis();
        let t = theta.to_radians();
        e1 * t.cos() + e2 * t.sin()
    }

    pub fn cyl_to_cartesian(&self, h: f64, theta: f64, r: f64) -> Vec3 {
        self.origin + self.axis * h + self.radial(theta) * r
    }

    /// `(h, theta in [0, 360), r)`.
    pub fn cartesian_to_cyl(&self, p: Vec3) -> (f64, f64, f64) {
        let d = p - self.origin;
        let h = d.dot(self.axis);
        let radial = d - self.axis * h;
        let (e1, e2) = self.basis();
        let theta = wrap_degrees(radial.dot(e2).atan2(radial.dot(e1)).to_degrees());
        (h, theta, radial.norm())
    }

    pub fn radial_distance(&self, p: Vec3) -> f64 {
        let d = p - self.origin;
        (d - self.axis * d.dot(self.axis)).norm()
    }
}

/// Fits the cylinder with the given axis direction whose radius is the
/// minimum enclosing circle of the points projected onto the plane normal to
/// the axis, and whose height range spans the points' axial projections.
pub fn fit_bounding_cylinder(points: &[Vec3], axis: Vec3) -> Result<CylinderFrame, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::DegenerateInput(format!("need at least 3 points, got {}", points.len())));
    }
    if !(axis.norm() > 0.0) || points.iter().any(|p| !p.is_finite()) {
        return Err(GeometryError::DegenerateInput("non-finite input".into()));
    }
    let probe = CylinderFrame { origin: Vec3::ZERO, axis: axis.normalized(), radius: 1.0, h_min: 0.0, h_max: 1.0 };
    let (e1, e2) = probe.basis();
    let planar: Vec<[f64; 2]> = points.iter().map(|p| [p.dot(e1), p.dot(e2)]).collect();
    let circle = welzl::minimum_enclosing_circle(&planar).expect("non-empty");
    let scale = points.iter().map(|p| p.norm()).fold(1.0, f64::max);
    if circle.radius <= 1e-9 * scale {
        return Err(GeometryError::DegenerateInput("all points lie on one axis-parallel line".into()));
    }
    let origin = e1 * circle.center[0] + e2 * circle.center[1];
    let hs = points.iter().map(|p| (*p - origin).dot(probe.axis));
    let (h_min, h_max) = hs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), h| (lo.min(h), hi.max(h)));
    let (h_min, h_max) = if h_max > h_min { (h_min, h_max) } else { (h_min - 0.5, h_max + 0.5) };
    CylinderFrame::new(origin, probe.axis, circle.radius, h_min, h_max)
}

/// Radial height field `r(h, theta)` over a cylinder frame, bilinear in
/// `(h, theta)`, clamped in `h` and periodic in `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialHeightField {
    pub h_start: f64,
    pub h_step: f64,
    pub n_h: usize,
    pub n_theta: usize,
    /// Row-major `[i_h][i_theta]`.
    pub radii: Vec<f64>,
}

impl RadialHeightField {
    pub fn constant(radius: f64) -> Self {
        RadialHeightField { h_start: 0.0, h_step: 1.0, n_h: 1, n_theta: 1, radii: vec![radius] }
    }

    pub fn from_fn(h_start: f64, h_step: f64, n_h: usize, n_theta: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut radii = Vec::with_capacity(n_h * n_theta);
        for i in 0..n_h {
            for j in 0..n_theta {
                radii.push(f(h_start + i as f64 * h_step, j as f64 * 360.0 / n_theta as f64));
            }
        }
        RadialHeightField { h_start, h_step, n_h, n_theta, radii }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.radii[i * self.n_theta + (j % self.n_theta)]
    }

    /// `(r, dr/dh, dr/dtheta [per radian])`.
    pub fn sample(&self, h: f64, theta: f64) -> (f64, f64, f64) {
        let (i0, fh, dh_valid) = if self.n_h <= 1 {
            (0, 0.0, false)
        } else {
            let u = ((h - self.h_start) / self.h_step).clamp(0.0, (self.n_h - 1) as f64);
            let i0 = (u.floor() as usize).min(self.n_h - 2);
            let inside = h > self.h_start && h < self.h_start + (self.n_h - 1) as f64 * self.h_step;
            (i0, u - i0 as f64, inside)
        };
        let i1 = if self.n_h <= 1 { 0 } else { i0 + 1 };
        let dtheta = 360.0 / self.n_theta as f64;
        let v = wrap_degrees(theta) / dtheta;
        let j0 = (v.floor() as usize) % self.n_theta;
        let ft = v - v.floor();
        let j1 = j0 + 1;
        let (r00, r01, r10, r11) = (self.at(i0, j0), self.at(i0, j1), self.at(i1, j0), self.at(i1, j1));
        let r = (1.0 - fh) * ((1.0 - ft) * r00 + ft * r01) + fh * ((1.0 - ft) * r10 + ft * r11);
        let dr_dh = if dh_valid {
            ((1.0 - ft) * (r10 - r00) + ft * (r11 - r01)) / self.h_step
        } else {
            0.0
        };
        let dr_dt = ((1.0 - fh) * (r01 - r00) + fh * (r11 - r10)) / dtheta.to_radians();
        (r, dr_dh, dr_dt)
    }

    pub fn scaled(&self, radial: f64, axial: f64, h_shift: f64) -> Self {
        RadialHeightField {
            h_start: self.h_start * axial + h_shift,
            h_step: self.h_step * axial,
            radii: self.radii.iter().map(|r| r * radial).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SkinSurface {
    HeightField(RadialHeightField),
    Mesh(TriMesh),
}

/// Contact point on the skin and outward unit normal there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkinContact {
    pub point: Vec3,
    pub normal: Vec3,
}

/// First skin intersection moving radially inward from the cylinder surface
/// at `(h, theta)`.
pub fn project_to_skin(
    frame: &CylinderFrame,
    h: f64,
    theta: f64,
    skin: &SkinSurface,
) -> Result<SkinContact, GeometryError> {
    let no_contact = || GeometryError::NoContact { h, theta };
    let outward = frame.radial(theta);
    let tol = 1e-9 * frame.radius.max(1.0);
    match skin {
        SkinSurface::HeightField(field) => {
            let (r, dr_dh, dr_dt) = field.sample(h, theta);
            if !(r >= -tol && r <= frame.radius + tol) {
                return Err(no_contact());
            }
            let (e1, e2) = frame.basis();
            let t = theta.to_radians();
            let tangent_theta = -e1 * t.sin() + e2 * t.cos();
            let normal = (outward * r - tangent_theta * dr_dt - frame.axis * (r * dr_dh)).normalized();
            let normal = if normal.norm() > 0.0 { normal } else { outward };
            Ok(SkinContact { point: frame.cyl_to_cartesian(h, theta, r.max(0.0)), normal })
        }
        SkinSurface::Mesh(mesh) => {
            let start = frame.cyl_to_cartesian(h, theta, frame.radius);
            let hits = mesh.ray_hits(start, -outward, -tol, frame.radius + tol);
            let t_first = hits.iter().map(|h| h.t).fold(f64::INFINITY, f64::min);
            if !t_first.is_finite() {
                return Err(no_contact());
            }
            let mut n = Vec3::ZERO;
            for hit in hits.iter().filter(|hit| hit.t <= t_first + tol) {
                let an = hit.area_normal;
                n += if an.dot(outward) < 0.0 { -an } else { an };
            }
            let normal = if n.norm() > 0.0 { n.normalized() } else { outward };
            Ok(SkinContact { point: start - outward * t_first.max(0.0), normal })
        }
    }
}

/// Probe pose. Orientation columns: footprint long axis, footprint short
/// axis, probe centerline (pointing into the body).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Mat3,
}

impl Pose {
    pub fn long_axis(&self) -> Vec3 {
        self.orientation.col(0)
    }

    pub fn short_axis(&self) -> Vec3 {
        self.orientation.col(1)
    }

    pub fn centerline(&self) -> Vec3 {
        self.orientation.col(2)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.position.is_finite()
            && self.orientation.orthonormality_error() <= tol
            && (self.orientation.determinant() - 1.0).abs() <= tol
    }
}

/// Builds the probe pose at `contact`. The centerline starts along the inward
/// radial direction with the footprint long axis along the cylinder axis;
/// the footprint is rotated by `phi` about the centerline, then the probe is
/// tilted by `psi` about the rotated long axis. Angles in degrees.
pub fn probe_pose(frame: &CylinderFrame, contact: Vec3, phi: f64, psi: f64) -> Pose {
    let d = contact - frame.origin;
    let radial = d - frame.axis * d.dot(frame.axis);
    let outward = if radial.norm() > 1e-12 { radial.normalized() } else { frame.basis().0 };
    let center0 = -outward;
    let long0 = frame.axis;
    let short0 = center0.cross(long0);

    let spin = Mat3::rotation(center0, phi.to_radians());
    let long1 = spin * long0;
    let tilt = Mat3::rotation(long1, psi.to_radians());
    let centerline = tilt * center0;
    let short = tilt * (spin * short0);
    Pose { position: contact, orientation: Mat3::from_cols(long1, short, centerline) }
}

/// Angle in degrees between the probe centerline and the surface normal,
/// ignoring normal orientation. Range `[0, 90]`.
pub fn centerline_surface_angle(pose: &Pose, normal: Vec3) -> f64 {
    let c = pose.centerline().normalized().dot(normal.normalized()).abs().min(1.0);
    c.acos().to_degrees()
}

/// Channels of the state voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Target = 0,
    Bone = 1,
    Beam = 2,
}

pub type VoxelIndex = [usize; 3];

/// Three binary channels on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub origin: Vec3,
    pub resolution: f64,
    pub dims: [usize; 3],
    channels: [Vec<u8>; 3],
}

impl VoxelGrid {
    pub fn new(origin: Vec3, resolution: f64, dims: [usize; 3]) -> Self {
        assert!(resolution > 0.0, "resolution must be positive");
        let n = dims[0] * dims[1] * dims[2];
        VoxelGrid { origin, resolution, dims, channels: [vec![0; n], vec![0; n], vec![0; n]] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn flat(&self, idx: VoxelIndex) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    #[inline]
    pub fn unflat(&self, f: usize) -> VoxelIndex {
        let k = f % self.dims[2];
        let j = (f / self.dims[2]) % self.dims[1];
        [f / (self.dims[1] * self.dims[2]), j, k]
    }

    #[inline]
    pub fn get(&self, c: Channel, idx: VoxelIndex) -> bool {
        self.channels[c as usize][self.flat(idx)] != 0
    }

    #[inline]
    pub fn get_flat(&self, c: Channel, f: usize) -> bool {
        self.channels[c as usize][f] != 0
    }

    #[inline]
    pub fn set(&mut self, c: Channel, idx: VoxelIndex, v: bool) {
        let f = self.flat(idx);
        self.channels[c as usize][f] = v as u8;
    }

    #[inline]
    pub fn set_flat(&mut self, c: Channel, f: usize, v: bool) {
        self.channels[c as usize][f] = v as u8;
    }

    pub fn channel(&self, c: Channel) -> &[u8] {
        &self.channels[c as usize]
    }

    pub fn clear_channel(&mut self, c: Channel) {
        self.channels[c as usize].iter_mut().for_each(|v| *v = 0);
    }

    pub fn channel_sum(&self, c: Channel) -> usize {
        self.channels[c as usize].iter().map(|&v| v as usize).sum()
    }

    /// Flat indices of set voxels in a channel, ascending.
    pub fn occupied(&self, c: Channel) -> Vec<usize> {
        self.channels[c as usize].iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect()
    }

    pub fn voxel_center(&self, idx: VoxelIndex) -> Vec3 {
        self.origin
            + Vec3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * self.resolution
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.resolution
    }
}

/// `floor((p - origin) / resolution)` per axis; `None` when outside the grid
/// (upper boundary exclusive).
pub fn world_to_voxel(grid: &VoxelGrid, p: Vec3) -> Option<VoxelIndex> {
    let rel = (p - grid.origin) / grid.resolution;
    let mut idx = [0usize; 3];
    for (a, slot) in idx.iter_mut().enumerate() {
        let f = rel.component(a).floor();
        if !(f >= 0.0 && f < grid.dims[a] as f64) {
            return None;
        }
        *slot = f as usize;
    }
    Some(idx)
}
