//! Analytic textured scenes used as ground truth.

use serde::{Deserialize, Serialize};

use crate::geometry::{Ray, Vec3};

/// Minimum hit distance; avoids self-intersection at ray origins.
const HIT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    Solid {
        color: [f64; 3],
    },
    /// 3D checkerboard with cubic cells of `cell_mm`.
    Checker {
        a: [f64; 3],
        b: [f64; 3],
        cell_mm: f64,
    },
    /// Linear blend from `a` at `from_mm` to `b` at `to_mm` along `axis`.
    Gradient {
        a: [f64; 3],
        b: [f64; 3],
        axis: [f64; 3],
        from_mm: f64,
        to_mm: f64,
    },
}

impl Texture {
    pub fn eval(&self, p: &Vec3) -> [f64; 3] {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { a, b, cell_mm } => {
                let k = (p.x / cell_mm).floor() + (p.y / cell_mm).floor() + (p.z / cell_mm).floor();
                if (k as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Gradient {
                a,
                b,
                axis,
                from_mm,
                to_mm,
            } => {
                let axis = Vec3::from(*axis).normalize();
                let s = ((p.dot(&axis) - from_mm) / (to_mm - from_mm)).clamp(0.0, 1.0);
                [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        texture: Texture,
    },
    /// Finite rectangle spanned by `u_axis` and `normal × u_axis`.
    Plane {
        center: [f64; 3],
        normal: [f64; 3],
        u_axis: [f64; 3],
        half_extents: [f64; 2],
        texture: Texture,
    },
    /// Axis-aligned box.
    Cuboid {
        min: [f64; 3],
        max: [f64; 3],
        texture: Texture,
    },
}

impl Primitive {
    pub fn texture(&self) -> &Texture {
        match self {
            Primitive::Sphere { texture, .. }
            | Primitive::Plane { texture, .. }
            | Primitive::Cuboid { texture, .. } => texture,
        }
    }

    /// Nearest hit distance with `t > HIT_EPSILON`.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - Vec3::from(*center);
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [-b - sq, -b + sq].into_iter().find(|&t| t > HIT_EPSILON)
            }
            Primitive::Plane {
                center,
                normal,
                u_axis,
                half_extents,
                ..
            } => {
                let n = Vec3::from(*normal).normalize();
                let denom = n.dot(&ray.direction);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let c = Vec3::from(*center);
                let t = (c - ray.origin).dot(&n) / denom;
                if !(t > HIT_EPSILON) {
                    return None;
                }
                let u = Vec3::from(*u_axis).normalize();
                let v = n.cross(&u);
                let local = ray.at(t) - c;
                (local.dot(&u).abs() <= half_extents[0] && local.dot(&v).abs() <= half_extents[1]).then_some(t)
            }
            Primitive::Cuboid { min, max, .. } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    let d = ray.direction[a];
                    let o = ray.origin[a];
                    if d.abs() < 1e-300 {
                        if o < min[a] || o > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o) / d, (max[a] - o) / d);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                if t1 < t0 {
                    return None;
                }
                [t0, t1].into_iter().find(|&t| t > HIT_EPSILON)
            }
        }
    }
}

/// A set of primitives in front of a uniform background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

/// Result of shading a ray against the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shade {
    pub color: [f64; 3],
    /// Distance to the hit, `None` when the background was seen.
    pub t: Option<f64>,
}

impl AnalyticScene {
    pub fn uniform(color: [f64; 3]) -> Self {
        Self {
            primitives: Vec::new(),
            background: color,
        }
    }

    pub fn nearest_hit(&self, ray: &Ray) -> Option<(f64, usize)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(ray).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    pub fn shade(&self, ray: &Ray) -> Shade {
        match self.nearest_hit(ray) {
            Some((t, i)) => Shade {
                color: self.primitives[i].texture().eval(&ray.at(t)),
                t: Some(t),
            },
            None => Shade {
                color: self.background,
                t: None,
            },
        }
    }

    /// Textured sphere resting above a checkered floor, in front of the
    /// array plane (`z = 0`), seen against a green backdrop.
    pub fn desk() -> Self {
        Self {
            primitives: vec![
                Primitive::Sphere {
                    center: [0.0, 5.0, 170.0],
                    radius: 50.0,
                    texture: Texture::Checker {
                        a: [0.9, 0.55, 0.2],
                        b: [0.2, 0.25, 0.7],
                        cell_mm: 18.0,
                    },
                },
                Primitive::Plane {
                    center: [0.0, -45.0, 170.0],
                    normal: [0.0, 1.0, 0.0],
                    u_axis: [1.0, 0.0, 0.0],
                    half_extents: [110.0, 80.0],
                    texture: Texture::Checker {
                        a: [0.85, 0.85, 0.8],
                        b: [0.35, 0.3, 0.3],
                        cell_mm: 30.0,
                    },
                },
            ],
            background: [0.0, 0.6, 0.2],
        }
    }
}
