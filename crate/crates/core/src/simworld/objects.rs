//! The eleven procedural object classes. Every object keeps its thinnest
//! extent along local x so the hand can close across it.

use std::f64::consts::FRAC_PI_2;

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::primitives::{Hit, Primitive, Shape};
use crate::geometry::{PointCloud, Pose, Vec3};

pub const OBJECT_COUNT: u16 = 11;

/// Points on one primitive closer than this to the inside of another are
/// treated as interior and dropped from the model cloud.
const INTERIOR_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    Uniform([f64; 3]),
    /// Alternating bands perpendicular to `axis`.
    Striped { axis: usize, period: f64, offset: f64, a: [f64; 3], b: [f64; 3] },
    Checker { period: f64, a: [f64; 3], b: [f64; 3] },
}

impl Texture {
    pub fn color(&self, p: &Vec3) -> [f64; 3] {
        match *self {
            Texture::Uniform(c) => c,
            Texture::Striped { axis, period, offset, a, b } => {
                if ((p[axis] + offset) / period).floor().rem_euclid(2.0) < 1.0 {
                    a
                } else {
                    b
                }
            }
            Texture::Checker { period, a, b } => {
                let s: f64 = (0..3).map(|k| (p[k] / period).floor()).sum();
                if s.rem_euclid(2.0) < 1.0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// A printed label in one corner: surface points with `p · normals[k] >
/// offsets[k]` for both k take `color`. Breaks the symmetry that box and
/// can shapes have under half turns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marker {
    pub normals: [Vec3; 2],
    pub offsets: [f64; 2],
    pub color: [f64; 3],
}

impl Marker {
    pub fn contains(&self, p: &Vec3) -> bool {
        p.dot(&self.normals[0]) > self.offsets[0] && p.dot(&self.normals[1]) > self.offsets[1]
    }
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub id: u16,
    pub name: &'static str,
    pub primitives: Vec<Primitive>,
    pub texture: Texture,
    pub marker: Option<Marker>,
    /// Surface sample in the object frame.
    pub model_cloud: PointCloud,
}

impl SceneObject {
    /// Albedo at object-frame point `p`.
    pub fn color(&self, p: &Vec3) -> [f64; 3] {
        match &self.marker {
            Some(m) if m.contains(p) => m.color,
            _ => self.texture.color(p),
        }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.primitives.iter().map(|s| s.signed_distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// Nearest hit over all primitives, ray given in the object frame.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        self.primitives
            .iter()
            .filter_map(|s| s.intersect(o, d))
            .fold(None, |best: Option<Hit>, h| match best {
                Some(b) if b.t <= h.t => Some(b),
                _ => Some(h),
            })
    }

    /// Radius of a ball about the object origin containing the whole object.
    pub fn bounding_radius(&self) -> f64 {
        self.primitives.iter().map(|p| p.pose.translation.norm() + shape_radius(&p.shape)).fold(0.0, f64::max)
    }
}

pub fn shape_radius(s: &Shape) -> f64 {
    match *s {
        Shape::Sphere { radius } => radius,
        Shape::Box { half } => half.norm(),
        Shape::Cylinder { radius, half_height } => (radius * radius + half_height * half_height).sqrt(),
        Shape::Capsule { radius, half_length } => radius + half_length,
    }
}

/// Area-uniform sample of the union surface: points on one primitive that
/// fall inside another are rejected.
pub fn sample_union_surface(primitives: &[Primitive], count: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let areas: Vec<f64> = primitives.iter().map(|p| p.shape.area()).collect();
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let mut pick = rng.gen_range(0.0..total);
        let mut k = 0;
        while k + 1 < areas.len() && pick >= areas[k] {
            pick -= areas[k];
            k += 1;
        }
        let p = primitives[k].sample_surface(&mut rng);
        let inside_other =
            primitives.iter().enumerate().any(|(j, q)| j != k && q.signed_distance(&p) < -INTERIOR_MARGIN);
        if !inside_other {
            points.push(p);
        }
    }
    PointCloud::new(points)
}

fn rot(axis: Vec3, angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
}

fn at(shape: Shape, x: f64, y: f64, z: f64) -> Primitive {
    Primitive::new(shape, Pose::from_translation(Vec3::new(x, y, z)))
}

fn placed(shape: Shape, rotation: UnitQuaternion<f64>, x: f64, y: f64, z: f64) -> Primitive {
    Primitive::new(shape, Pose::new(rotation, Vec3::new(x, y, z)))
}

fn bx(x: f64, y: f64, z: f64) -> Shape {
    Shape::Box { half: Vec3::new(x, y, z) }
}

const RED: [f64; 3] = [0.85, 0.15, 0.12];
const CREAM: [f64; 3] = [0.95, 0.92, 0.8];
const YELLOW: [f64; 3] = [0.95, 0.85, 0.1];
const BLUE: [f64; 3] = [0.15, 0.3, 0.8];
const WHITE: [f64; 3] = [0.95, 0.95, 0.95];
const GREY: [f64; 3] = [0.55, 0.56, 0.58];
const DARK: [f64; 3] = [0.12, 0.12, 0.14];
const GREEN: [f64; 3] = [0.2, 0.65, 0.3];
const MAGENTA: [f64; 3] = [0.85, 0.1, 0.75];

/// Share of the model surface covered by the label marker.
const MARKER_COVERAGE: f64 = 0.2;

fn definition(id: u16) -> Option<(&'static str, Vec<Primitive>, Texture)> {
    let y_axis = Vec3::y();
    let x_axis = Vec3::x();
    let def = match id {
        1 => (
            "cracker_box",
            vec![at(bx(0.022, 0.045, 0.06), 0.0, 0.0, 0.0)],
            Texture::Checker { period: 0.02, a: RED, b: CREAM },
        ),
        2 => (
            "sugar_box",
            vec![at(bx(0.019, 0.033, 0.05), 0.0, 0.0, 0.0)],
            Texture::Striped { axis: 2, period: 0.02, offset: 0.003, a: WHITE, b: YELLOW },
        ),
        3 => (
            "soup_can",
            vec![at(Shape::Cylinder { radius: 0.03, half_height: 0.045 }, 0.0, 0.0, 0.0)],
            Texture::Striped { axis: 1, period: 0.015, offset: 0.0, a: RED, b: WHITE },
        ),
        4 => (
            "mustard_bottle",
            vec![
                at(bx(0.022, 0.035, 0.045), 0.0, 0.0, -0.01),
                at(Shape::Cylinder { radius: 0.011, half_height: 0.012 }, 0.0, 0.014, 0.047),
            ],
            Texture::Striped { axis: 2, period: 0.03, offset: 0.01, a: YELLOW, b: BLUE },
        ),
        5 => (
            "potted_meat_can",
            vec![
                at(bx(0.02, 0.045, 0.03), 0.0, 0.0, 0.0),
                placed(Shape::Cylinder { radius: 0.018, half_height: 0.004 }, rot(x_axis, 0.0), 0.0, -0.02, 0.034),
            ],
            Texture::Striped { axis: 1, period: 0.025, offset: 0.006, a: BLUE, b: YELLOW },
        ),
        6 => (
            "gelatin_box",
            vec![at(bx(0.014, 0.04, 0.03), 0.0, 0.0, 0.0)],
            Texture::Checker { period: 0.015, a: RED, b: WHITE },
        ),
        7 => (
            "banana",
            vec![
                placed(Shape::Capsule { radius: 0.016, half_length: 0.025 }, rot(x_axis, 0.5), 0.0, -0.028, 0.0),
                placed(Shape::Capsule { radius: 0.017, half_length: 0.02 }, rot(x_axis, FRAC_PI_2), 0.0, 0.0, -0.012),
                placed(Shape::Capsule { radius: 0.015, half_length: 0.025 }, rot(x_axis, -0.5), 0.0, 0.028, 0.0),
            ],
            Texture::Striped { axis: 1, period: 0.05, offset: 0.025, a: YELLOW, b: GREEN },
        ),
        8 => (
            "bleach_bottle",
            vec![
                at(Shape::Cylinder { radius: 0.032, half_height: 0.05 }, 0.0, 0.0, -0.01),
                at(Shape::Cylinder { radius: 0.012, half_height: 0.012 }, 0.0, -0.012, 0.05),
                at(Shape::Capsule { radius: 0.007, half_length: 0.025 }, 0.0, 0.034, 0.0),
            ],
            Texture::Striped { axis: 2, period: 0.04, offset: 0.0, a: WHITE, b: BLUE },
        ),
        9 => (
            "scissors",
            vec![
                at(bx(0.006, 0.012, 0.045), 0.0, 0.0, 0.025),
                placed(Shape::Capsule { radius: 0.008, half_length: 0.012 }, rot(y_axis, 0.0), 0.0, -0.016, -0.04),
                placed(Shape::Capsule { radius: 0.008, half_length: 0.012 }, rot(y_axis, 0.0), 0.0, 0.016, -0.04),
            ],
            Texture::Striped { axis: 2, period: 0.09, offset: 0.02, a: GREY, b: BLUE },
        ),
        10 => (
            "power_drill",
            vec![
                placed(Shape::Cylinder { radius: 0.024, half_height: 0.045 }, rot(x_axis, FRAC_PI_2), 0.0, 0.01, 0.035),
                at(bx(0.018, 0.016, 0.04), 0.0, 0.0, -0.025),
                placed(Shape::Cylinder { radius: 0.01, half_height: 0.012 }, rot(x_axis, FRAC_PI_2), 0.0, -0.045, 0.035),
            ],
            Texture::Striped { axis: 2, period: 0.06, offset: 0.0, a: GREEN, b: DARK },
        ),
        11 => (
            "wrench",
            vec![
                at(bx(0.004, 0.011, 0.065), 0.0, 0.0, 0.0),
                at(bx(0.004, 0.024, 0.013), 0.0, 0.006, 0.075),
            ],
            Texture::Uniform(GREY),
        ),
        _ => return None,
    };
    Some(def)
}

/// Builds object class `id` (1..=11) with a surface sample of
/// `model_point_count` points. Deterministic in `id`.
pub fn build_object(id: u16, model_point_count: usize) -> Option<SceneObject> {
    let (name, primitives, texture) = definition(id)?;
    let model_cloud = sample_union_surface(&primitives, model_point_count, 0x5eed_0000 + id as u64);
    // The wrench stays unmarked as the low-texture object.
    let marker = (name != "wrench").then(|| {
        let normals = [Vec3::y(), Vec3::z()];
        let reference = sample_union_surface(&primitives, 4000, 0x3a4c_0000 + id as u64);
        let quantile = |mut v: Vec<f64>, q: f64| {
            v.sort_by(f64::total_cmp);
            v[((q * v.len() as f64) as usize).min(v.len() - 1)]
        };
        let first = quantile(reference.points.iter().map(|p| p.dot(&normals[0])).collect(), 0.5);
        let upper: Vec<f64> = reference.points.iter().filter(|p| p.dot(&normals[0]) > first).map(|p| p.dot(&normals[1])).collect();
        let second = quantile(upper, 1.0 - 2.0 * MARKER_COVERAGE);
        Marker { normals, offsets: [first, second], color: MAGENTA }
    });
    Some(SceneObject { id, name, primitives, texture, marker, model_cloud })
}

pub fn all_objects(model_point_count: usize) -> Vec<SceneObject> {
    (1..=OBJECT_COUNT).filter_map(|id| build_object(id, model_point_count)).collect()
}
