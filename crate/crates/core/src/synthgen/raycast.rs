//! Ray intersection against the primitives a synthetic scene is built from.

use crate::geometry::{dot3, sub3, Box3D, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

fn add_scaled(o: Vec3, d: Vec3, t: f64) -> Vec3 {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

pub(crate) fn point_at(o: Vec3, d: Vec3, t: f64) -> Vec3 {
    add_scaled(o, d, t)
}

/// Nearest positive hit of a unit-direction ray with a sphere.
pub fn ray_sphere(o: Vec3, d: Vec3, c: Vec3, r: f64) -> Option<f64> {
    let oc = sub3(o, c);
    let b = dot3(d, oc);
    let h = b * b - (dot3(oc, oc) - r * r);
    if h < 0.0 {
        return None;
    }
    let s = h.sqrt();
    [-b - s, -b + s].into_iter().find(|t| *t > 1e-9)
}

/// Nearest positive hit with a capsule, taken as the union of its cylinder
/// and the two end spheres.
pub fn ray_capsule(o: Vec3, d: Vec3, cap: &Capsule) -> Option<f64> {
    let mut best = ray_sphere(o, d, cap.a, cap.radius);
    if let Some(t) = ray_sphere(o, d, cap.b, cap.radius) {
        best = Some(best.map_or(t, |b| b.min(t)));
    }
    let ba = sub3(cap.b, cap.a);
    let oa = sub3(o, cap.a);
    let baba = dot3(ba, ba);
    let bard = dot3(ba, d);
    let baoa = dot3(ba, oa);
    let a = baba - bard * bard;
    if a > 1e-12 && baba > 0.0 {
        let b = baba * dot3(d, oa) - baoa * bard;
        let c = baba * dot3(oa, oa) - baoa * baoa - cap.radius * cap.radius * baba;
        let h = b * b - a * c;
        if h >= 0.0 {
            let t = (-b - h.sqrt()) / a;
            let y = baoa + t * bard;
            if t > 1e-9 && y > 0.0 && y < baba {
                best = Some(best.map_or(t, |b| b.min(t)));
            }
        }
    }
    best
}

/// Slab test; returns the entry distance when the origin is outside.
pub fn ray_box(o: Vec3, d: Vec3, b: &Box3D) -> Option<f64> {
    let (lo, hi) = (b.min(), b.max());
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 1e-9).then_some(t0)
}

/// Hit distance with the horizontal plane `y = height` (y down).
pub fn ray_ground(o: Vec3, d: Vec3, height: f64) -> Option<f64> {
    if d[1] <= 1e-12 {
        return None;
    }
    let t = (height - o[1]) / d[1];
    (t > 1e-9).then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capsule_side_and_cap_hits() {
        let cap = Capsule {
            a: [0.0, -1.0, 5.0],
            b: [0.0, 1.0, 5.0],
            radius: 0.5,
        };
        let t = ray_capsule([0.0; 3], [0.0, 0.0, 1.0], &cap).unwrap();
        assert!((t - 4.5).abs() < 1e-12);
        // straight down the axis hits the end sphere
        let t = ray_capsule([0.0, -5.0, 5.0], [0.0, 1.0, 0.0], &cap).unwrap();
        assert!((t - 3.5).abs() < 1e-12);
        assert!(ray_capsule([0.0; 3], [1.0, 0.0, 0.0], &cap).is_none());
    }

    #[test]
    fn box_and_ground() {
        let b = Box3D::new([0.0, 0.0, 10.0], [2.0, 2.0, 2.0]);
        assert!((ray_box([0.0; 3], [0.0, 0.0, 1.0], &b).unwrap() - 9.0).abs() < 1e-12);
        assert!(ray_box([0.0; 3], [0.0, 0.0, -1.0], &b).is_none());
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((ray_ground([0.0; 3], [0.0, s, s], 1.5).unwrap() - 1.5 / s).abs() < 1e-12);
        assert!(ray_ground([0.0; 3], [0.0, -s, s], 1.5).is_none());
    }
}
