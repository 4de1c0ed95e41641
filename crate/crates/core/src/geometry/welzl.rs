//! Minimum enclosing circle of planar points (Welzl, iterative form).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Circle {
    fn from_point(p: [f64; 2]) -> Self {
        Circle { center: p, radius: 0.0 }
    }

    fn from_two(a: [f64; 2], b: [f64; 2]) -> Self {
        let center = [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5];
        Circle { center, radius: dist(center, a).max(dist(center, b)) }
    }

    /// Circumcircle; `None` when the points are (nearly) collinear.
    fn from_three(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<Self> {
        let bx = b[0] - a[0];
        let by = b[1] - a[1];
        let cx = c[0] - a[0];
        let cy = c[1] - a[1];
        let d = 2.0 * (bx * cy - by * cx);
        let scale = (bx * bx + by * by).max(cx * cx + cy * cy);
        if d.abs() <= 1e-12 * scale.max(1e-300) {
            return None;
        }
        let b2 = bx * bx + by * by;
        let c2 = cx * cx + cy * cy;
        let ux = (cy * b2 - by * c2) / d;
        let uy = (bx * c2 - cx * b2) / d;
        let center = [a[0] + ux, a[1] + uy];
        let radius = dist(center, a).max(dist(center, b)).max(dist(center, c));
        Some(Circle { center, radius })
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        dist(self.center, p) <= self.radius * (1.0 + 1e-12) + 1e-12
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Smallest circle containing every point. The returned radius is the exact
/// maximum distance from the centre to any input point, so enclosure holds
/// without tolerance.
pub fn minimum_enclosing_circle(points: &[[f64; 2]]) -> Option<Circle> {
    if points.is_empty() {
        return None;
    }
    let mut pts = points.to_vec();
    // fixed seed: the result must not depend on the process
    pts.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed_c1c1e));

    let mut c = Circle::from_point(pts[0]);
    for i in 1..pts.len() {
        if c.contains(pts[i]) {
            continue;
        }
        c = Circle::from_point(pts[i]);
        for j in 0..i {
            if c.contains(pts[j]) {
                continue;
            }
            c = Circle::from_two(pts[i], pts[j]);
            for k in 0..j {
                if c.contains(pts[k]) {
                    continue;
                }
                c = match Circle::from_three(pts[i], pts[j], pts[k]) {
                    Some(cc) => cc,
                    None => {
                        // collinear: the widest pair spans the circle
                        let cands = [
                            Circle::from_two(pts[i], pts[j]),
                            Circle::from_two(pts[i], pts[k]),
                            Circle::from_two(pts[j], pts[k]),
                        ];
                        cands
                            .into_iter()
                            .max_by(|a, b| a.radius.total_cmp(&b.radius))
                            .unwrap()
                    }
                };
            }
        }
    }
    let radius = pts.iter().map(|&p| dist(c.center, p)).fold(0.0, f64::max);
    Some(Circle { center: c.center, radius })
}
