//! Analytic solids: exact ray intersection, signed distance and
//! area-uniform surface sampling, all in the solid's local frame.

use std::f64::consts::PI;

use rand::Rng;

use crate::geometry::{Pose, Vec3};

const T_MIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box given by half extents.
    Box { half: Vec3 },
    /// Capped cylinder along local z, `|z| ≤ half_height`.
    Cylinder { radius: f64, half_height: f64 },
    /// Segment from `-half_length` to `+half_length` on local z, swept by a ball.
    Capsule { radius: f64, half_length: f64 },
}

/// A shape placed in its parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub pose: Pose,
}

/// Ray hit: parameter along the (unnormalized) ray and outward unit normal,
/// both in the frame the ray was given in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

fn solve_quadratic(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 || a == 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // Numerically stable root pair.
    let q = if b < 0.0 { -0.5 * (b - sq) } else { -0.5 * (b + sq) };
    let (r0, r1) = (q / a, if q != 0.0 { c / q } else { -b / (2.0 * a) });
    Some(if r0 <= r1 { (r0, r1) } else { (r1, r0) })
}

fn closest(a: Option<Hit>, b: Option<Hit>) -> Option<Hit> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.t < x.t { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

fn sphere_hit(o: &Vec3, d: &Vec3, center: &Vec3, r: f64) -> Option<Hit> {
    let oc = o - center;
    let (t0, t1) = solve_quadratic(d.dot(d), 2.0 * oc.dot(d), oc.dot(&oc) - r * r)?;
    let t = if t0 > T_MIN { t0 } else if t1 > T_MIN { t1 } else { return None };
    Some(Hit { t, normal: (o + d * t - center) / r })
}

/// Infinite-cylinder side hits around local z restricted to `|z| ≤ h`.
fn side_hit(o: &Vec3, d: &Vec3, r: f64, h: f64) -> Option<Hit> {
    let a = d.x * d.x + d.y * d.y;
    let b = 2.0 * (o.x * d.x + o.y * d.y);
    let c = o.x * o.x + o.y * o.y - r * r;
    let (t0, t1) = solve_quadratic(a, b, c)?;
    [t0, t1].into_iter().filter(|&t| t > T_MIN).find_map(|t| {
        let p = o + d * t;
        (p.z.abs() <= h).then(|| Hit { t, normal: Vec3::new(p.x / r, p.y / r, 0.0) })
    })
}

impl Shape {
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        match *self {
            Shape::Sphere { radius } => sphere_hit(o, d, &Vec3::zeros(), radius),
            Shape::Box { half } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for k in 0..3 {
                    if d[k].abs() < 1e-300 {
                        if o[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let (mut t1, mut t2) = ((-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]);
                    if t1 > t2 {
                        std::mem::swap(&mut t1, &mut t2);
                    }
                    if t1 > t_near {
                        t_near = t1;
                        near_axis = k;
                    }
                    if t2 < t_far {
                        t_far = t2;
                        far_axis = k;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > T_MIN {
                    (t_near, near_axis)
                } else if t_far > T_MIN {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                let p = o + d * t;
                let mut normal = Vec3::zeros();
                normal[axis] = p[axis].signum();
                Some(Hit { t, normal })
            }
            Shape::Cylinder { radius, half_height } => {
                let mut best = side_hit(o, d, radius, half_height);
                if d.z.abs() > 1e-300 {
                    for cap in [-half_height, half_height] {
                        let t = (cap - o.z) / d.z;
                        if t > T_MIN {
                            let p = o + d * t;
                            if p.x * p.x + p.y * p.y <= radius * radius {
                                best = closest(best, Some(Hit { t, normal: Vec3::new(0.0, 0.0, cap.signum()) }));
                            }
                        }
                    }
                }
                best
            }
            Shape::Capsule { radius, half_length } => {
                let mut best = side_hit(o, d, radius, half_length);
                for end in [-half_length, half_length] {
                    let c = Vec3::new(0.0, 0.0, end);
                    if let Some(h) = sphere_hit(o, d, &c, radius) {
                        // Only the outer hemisphere belongs to the capsule surface.
                        let p = o + d * h.t;
                        if (p.z - end) * end.signum() >= -1e-12 {
                            best = closest(best, Some(h));
                        }
                    }
                }
                best
            }
        }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { half } => {
                let q = p.abs() - half;
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Shape::Cylinder { radius, half_height } => {
                let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dr.max(dz).min(0.0)
            }
            Shape::Capsule { radius, half_length } => {
                let axis_point = Vec3::new(0.0, 0.0, p.z.clamp(-half_length, half_length));
                (p - axis_point).norm() - radius
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::Box { half } => 8.0 * (half.x * half.y + half.y * half.z + half.x * half.z),
            Shape::Cylinder { radius, half_height } => 2.0 * PI * radius * (2.0 * half_height) + 2.0 * PI * radius * radius,
            Shape::Capsule { radius, half_length } => 2.0 * PI * radius * (2.0 * half_length) + 4.0 * PI * radius * radius,
        }
    }

    /// Area-uniform point on the surface.
    pub fn sample_surface<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match *self {
            Shape::Sphere { radius } => unit_sphere(rng) * radius,
            Shape::Box { half } => {
                let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (k, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = k;
                        break;
                    }
                    pick -= a;
                }
                let mut p = Vec3::new(
                    rng.gen_range(-half.x..=half.x),
                    rng.gen_range(-half.y..=half.y),
                    rng.gen_range(-half.z..=half.z),
                );
                p[axis] = if rng.gen_bool(0.5) { half[axis] } else { -half[axis] };
                p
            }
            Shape::Cylinder { radius, half_height } => {
                let side = 2.0 * radius * half_height * 2.0;
                let caps = 2.0 * radius * radius;
                let phi = rng.gen_range(0.0..2.0 * PI);
                if rng.gen_range(0.0..side + caps) < side {
                    Vec3::new(radius * phi.cos(), radius * phi.sin(), rng.gen_range(-half_height..=half_height))
                } else {
                    let r = radius * rng.gen_range(0.0f64..=1.0).sqrt();
                    let z = if rng.gen_bool(0.5) { half_height } else { -half_height };
                    Vec3::new(r * phi.cos(), r * phi.sin(), z)
                }
            }
            Shape::Capsule { radius, half_length } => {
                let side = 4.0 * PI * radius * half_length;
                let ends = 4.0 * PI * radius * radius;
                if rng.gen_range(0.0..side + ends) < side {
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    Vec3::new(radius * phi.cos(), radius * phi.sin(), rng.gen_range(-half_length..=half_length))
                } else {
                    let u = unit_sphere(rng) * radius;
                    let end = if u.z >= 0.0 { half_length } else { -half_length };
                    u + Vec3::new(0.0, 0.0, end)
                }
            }
        }
    }
}

fn unit_sphere<R: Rng>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

impl Primitive {
    pub fn new(shape: Shape, pose: Pose) -> Self {
        Self { shape, pose }
    }

    pub fn at_origin(shape: Shape) -> Self {
        Self { shape, pose: Pose::identity() }
    }

    /// Ray in the parent frame; hit normal returned in the parent frame.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let inv = self.pose.rotation.inverse();
        let lo = inv * (o - self.pose.translation);
        let ld = inv * d;
        self.shape.intersect(&lo, &ld).map(|h| Hit { t: h.t, normal: self.pose.rotation * h.normal })
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let local = self.pose.rotation.inverse() * (p - self.pose.translation);
        self.shape.signed_distance(&local)
    }

    pub fn sample_surface<R: Rng>(&self, rng: &mut R) -> Vec3 {
        self.pose.apply(&self.shape.sample_surface(rng))
    }
}
