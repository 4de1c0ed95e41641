//! Triangle meshes: ASCII ingestion, ray intersection and inside tests.

use super::linalg::{Affine, Vec3};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("mesh has no faces")]
    Empty,
    #[error("mesh is not watertight ({open_edges} open or non-manifold edges)")]
    Open { open_edges: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

/// A ray hit: parameter along the ray and the unnormalised face normal
/// (length = twice the triangle area).
#[derive(Debug, Clone, Copy)]
pub struct RayHit {
    pub t: f64,
    pub face: usize,
    pub area_normal: Vec3,
}

impl TriMesh {
    /// Parses `v x y z` / `f i j k` lines (1-based indices). `#` comments and
    /// blank lines are skipped; `f a/b/c` index groups keep the vertex index.
    pub fn parse(text: &str) -> Result<TriMesh, MeshError> {
        let mut vertices = Vec::new();
        let mut raw_faces: Vec<(usize, [i64; 3])> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let tag = it.next().unwrap_or_default();
            let rest: Vec<&str> = it.collect();
            let err = |msg: &str| MeshError::Parse { line: line_no, msg: msg.to_string() };
            match tag {
                "v" => {
                    if rest.len() != 3 {
                        return Err(err("vertex needs exactly 3 coordinates"));
                    }
                    let mut c = [0.0; 3];
                    for (slot, tok) in c.iter_mut().zip(&rest) {
                        *slot = tok.parse::<f64>().map_err(|_| err("bad coordinate"))?;
                        if !slot.is_finite() {
                            return Err(err("non-finite coordinate"));
                        }
                    }
                    vertices.push(Vec3::from_array(c));
                }
                "f" => {
                    if rest.len() != 3 {
                        return Err(err("only triangular faces are supported"));
                    }
                    let mut idx = [0i64; 3];
                    for (slot, tok) in idx.iter_mut().zip(&rest) {
                        let head = tok.split('/').next().unwrap_or_default();
                        *slot = head.parse::<i64>().map_err(|_| err("bad face index"))?;
                    }
                    raw_faces.push((line_no, idx));
                }
                _ => return Err(err(&format!("unsupported record `{tag}`"))),
            }
        }
        if raw_faces.is_empty() {
            return Err(MeshError::Empty);
        }
        let nv = vertices.len() as i64;
        let mut faces = Vec::with_capacity(raw_faces.len());
        for (line, idx) in raw_faces {
            let mut f = [0usize; 3];
            for (slot, &i) in f.iter_mut().zip(&idx) {
                if i < 1 || i > nv {
                    return Err(MeshError::Parse { line, msg: format!("face index {i} out of range") });
                }
                *slot = (i - 1) as usize;
            }
            faces.push(f);
        }
        Ok(TriMesh { vertices, faces })
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for f in &self.faces {
            s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
        s
    }

    pub fn transformed(&self, a: &Affine) -> TriMesh {
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = a.apply(*v);
        }
        if a.linear.determinant() < 0.0 {
            for f in &mut out.faces {
                f.swap(1, 2);
            }
        }
        out
    }

    #[inline]
    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Every undirected edge is shared by exactly two faces.
    pub fn check_watertight(&self) -> Result<(), MeshError> {
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let open_edges = edges.values().filter(|&&c| c != 2).count();
        if open_edges == 0 {
            Ok(())
        } else {
            Err(MeshError::Open { open_edges })
        }
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for v in &self.vertices {
            lo = Vec3::new(lo.x.min(v.x), lo.y.min(v.y), lo.z.min(v.z));
            hi = Vec3::new(hi.x.max(v.x), hi.y.max(v.y), hi.z.max(v.z));
        }
        (lo, hi)
    }

    /// All intersections of the segment `origin + t*dir`, `t in [t_min, t_max]`.
    pub fn ray_hits(&self, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64) -> Vec<RayHit> {
        (0..self.faces.len())
            .filter_map(|f| {
                let [a, b, c] = self.triangle(f);
                let t = ray_triangle(origin, dir, a, b, c)?;
                (t >= t_min && t <= t_max).then(|| RayHit { t, face: f, area_normal: (b - a).cross(c - a) })
            })
            .collect()
    }

    /// Generalised winding number at `p` (≈1 inside a closed outward-wound
    /// mesh, ≈0 outside; sign flips with inverted winding).
    pub fn winding_number(&self, p: Vec3) -> f64 {
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let (a, b, c) = (a - p, b - p, c - p);
            let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
            let num = a.dot(b.cross(c));
            let den = la * lb * lc + a.dot(b) * lc + b.dot(c) * la + c.dot(a) * lb;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * std::f64::consts::PI)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.winding_number(p).abs() > 0.5
    }

    /// Enclosed volume via the divergence theorem (signed by winding).
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    /// Axis-aligned box with outward winding.
    pub fn cuboid(lo: Vec3, hi: Vec3) -> TriMesh {
        let v = |x: bool, y: bool, z: bool| {
            Vec3::new(if x { hi.x } else { lo.x }, if y { hi.y } else { lo.y }, if z { hi.z } else { lo.z })
        };
        let vertices = vec![
            v(false, false, false),
            v(true, false, false),
            v(true, true, false),
            v(false, true, false),
            v(false, false, true),
            v(true, false, true),
            v(true, true, true),
            v(false, true, true),
        ];
        let faces = vec![
            [0, 2, 1], [0, 3, 2], // z-
            [4, 5, 6], [4, 6, 7], // z+
            [0, 1, 5], [0, 5, 4], // y-
            [3, 7, 6], [3, 6, 2], // y+
            [0, 4, 7], [0, 7, 3], // x-
            [1, 2, 6], [1, 6, 5], // x+
        ];
        TriMesh { vertices, faces }
    }

    /// UV sphere with outward winding.
    pub fn uv_sphere(center: Vec3, radius: f64, stacks: usize, slices: usize) -> TriMesh {
        let mut vertices = vec![center + Vec3::Z * radius];
        for i in 1..stacks {
            let polar = std::f64::consts::PI * i as f64 / stacks as f64;
            for j in 0..slices {
                let az = 2.0 * std::f64::consts::PI * j as f64 / slices as f64;
                vertices.push(
                    center
                        + Vec3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos()) * radius,
                );
            }
        }
        vertices.push(center - Vec3::Z * radius);
        let south = vertices.len() - 1;
        let ring = |i: usize, j: usize| 1 + i * slices + (j % slices);
        let mut faces = Vec::new();
        for j in 0..slices {
            faces.push([0, ring(0, j), ring(0, j + 1)]);
            faces.push([south, ring(stacks - 2, j + 1), ring(stacks - 2, j)]);
        }
        for i in 0..stacks - 2 {
            for j in 0..slices {
                faces.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
                faces.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
            }
        }
        TriMesh { vertices, faces }
    }

    /// Open tube surface `r = radius` around the z axis between `z0` and `z1`.
    pub fn cylinder_surface(radius: f64, z0: f64, z1: f64, slices: usize, rings: usize) -> TriMesh {
        let mut vertices = Vec::new();
        for i in 0..=rings {
            let z = z0 + (z1 - z0) * i as f64 / rings as f64;
            for j in 0..slices {
                let az = 2.0 * std::f64::consts::PI * j as f64 / slices as f64;
                vertices.push(Vec3::new(radius * az.cos(), radius * az.sin(), z));
            }
        }
        let id = |i: usize, j: usize| i * slices + j % slices;
        let mut faces = Vec::new();
        for i in 0..rings {
            for j in 0..slices {
                faces.push([id(i, j), id(i, j + 1), id(i + 1, j + 1)]);
                faces.push([id(i, j), id(i + 1, j + 1), id(i + 1, j)]);
            }
        }
        TriMesh { vertices, faces }
    }
}

/// Möller–Trumbore. Returns the ray parameter of the hit, if any (two-sided).
pub fn ray_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 * e1.norm() * e2.norm() * dir.norm() {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(p) * inv;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(q) * inv;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    Some(e2.dot(q) * inv)
}
