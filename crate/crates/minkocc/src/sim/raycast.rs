//! Analytic ray casting against the ground plane and scene primitives.

use super::scene::{Primitive, PrimitiveShape, Scene, CLASS_DRIVABLE};

const T_MIN: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HitTarget {
    Ground,
    Primitive(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter; `dir` is expected unit-length, so this is metric range.
    pub t: f64,
    pub class: i32,
    pub target: HitTarget,
}

/// Distance to the plane z = height, entering from either side.
pub fn ray_ground(origin: [f64; 3], dir: [f64; 3], height: f64) -> Option<f64> {
    if dir[2].abs() < 1e-12 {
        return None;
    }
    let t = (height - origin[2]) / dir[2];
    (t > T_MIN).then_some(t)
}

/// Slab-method intersection with a yawed box; returns the entry distance, or
/// the exit distance when the origin is inside.
pub fn ray_box(origin: [f64; 3], dir: [f64; 3], center: [f64; 3], size: [f64; 3], yaw: f64) -> Option<f64> {
    let (s, c) = yaw.sin_cos();
    let rel = [origin[0] - center[0], origin[1] - center[1], origin[2] - center[2]];
    let o = [
        c * rel[0] + s * rel[1],
        -s * rel[0] + c * rel[1],
        rel[2],
    ];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        let half = size[a] / 2.0;
        if d[a].abs() < 1e-12 {
            if o[a].abs() > half {
                return None;
            }
            continue;
        }
        let t0 = (-half - o[a]) / d[a];
        let t1 = (half - o[a]) / d[a];
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_enter > T_MIN {
        Some(t_enter)
    } else if t_exit > T_MIN {
        Some(t_exit)
    } else {
        None
    }
}

/// Vertical capped cylinder; checks the side surface and both caps.
pub fn ray_cylinder(
    origin: [f64; 3],
    dir: [f64; 3],
    center: [f64; 3],
    radius: f64,
    height: f64,
) -> Option<f64> {
    let (z0, z1) = (center[2] - height / 2.0, center[2] + height / 2.0);
    let ox = origin[0] - center[0];
    let oy = origin[1] - center[1];
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > T_MIN && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };

    let a = dir[0] * dir[0] + dir[1] * dir[1];
    if a > 1e-12 {
        let b = 2.0 * (ox * dir[0] + oy * dir[1]);
        let c = ox * ox + oy * oy - radius * radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = origin[2] + t * dir[2];
                if z >= z0 && z <= z1 {
                    consider(t);
                }
            }
        }
    }
    if dir[2].abs() > 1e-12 {
        for zcap in [z0, z1] {
            let t = (zcap - origin[2]) / dir[2];
            let x = ox + t * dir[0];
            let y = oy + t * dir[1];
            if x.hypot(y) <= radius {
                consider(t);
            }
        }
    }
    best
}

fn ray_primitive(origin: [f64; 3], dir: [f64; 3], p: &Primitive) -> Option<f64> {
    match p.shape {
        PrimitiveShape::Box { size, yaw } => ray_box(origin, dir, p.center, size, yaw),
        PrimitiveShape::Cylinder { radius, height } => {
            ray_cylinder(origin, dir, p.center, radius, height)
        }
    }
}

/// Nearest intersection along a ray against everything in the scene.
pub fn first_hit(scene: &Scene, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    if let Some(t) = ray_ground(origin, dir, scene.ground_height) {
        best = Some(Hit {
            t,
            class: CLASS_DRIVABLE,
            target: HitTarget::Ground,
        });
    }
    for (i, p) in scene.primitives.iter().enumerate() {
        if let Some(t) = ray_primitive(origin, dir, p) {
            if best.as_ref().is_none_or(|h| t < h.t) {
                best = Some(Hit {
                    t,
                    class: p.class,
                    target: HitTarget::Primitive(i),
                });
            }
        }
    }
    best
}
