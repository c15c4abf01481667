//! Ray-cast RGB-D renderer with ground-truth masks.

use rand::Rng;

use super::camera::Intrinsics;
use super::objects::{shape_radius, SceneObject};
use super::primitives::{Hit, Primitive};
use crate::geometry::{Pose, Vec3};

pub const MASK_BACKGROUND: u8 = 0;
pub const MASK_GRIPPER: u8 = 255;

const GRIPPER_ALBEDO: [f64; 3] = [0.25, 0.25, 0.27];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Light {
    pub position: Vec3,
    pub color: [f64; 3],
    pub ambient: f64,
}

impl Default for Light {
    fn default() -> Self {
        Self { position: Vec3::new(0.3, -0.4, 0.0), color: [1.0; 3], ambient: 0.35 }
    }
}

/// Horizontal checkered plane `y = height` in camera coordinates (y down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Floor {
    pub height: f64,
    pub period: f64,
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl Default for Floor {
    fn default() -> Self {
        Self { height: 0.2, period: 0.1, a: [0.6, 0.55, 0.5], b: [0.45, 0.4, 0.35] }
    }
}

/// A placed object. `pose` maps object coordinates to camera coordinates.
#[derive(Debug, Clone)]
pub struct Placed<'a> {
    pub object: &'a SceneObject,
    pub pose: Pose,
}

#[derive(Debug, Clone, Default)]
pub struct Scene<'a> {
    pub object: Option<Placed<'a>>,
    /// Gripper solids already expressed in camera coordinates.
    pub gripper: Vec<Primitive>,
    pub floor: Option<Floor>,
    pub background: [f64; 3],
    pub light: Light,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes.
    pub rgb: Vec<u8>,
    /// z-depth in meters, 0 where the ray escapes.
    pub depth: Vec<f32>,
    pub mask: Vec<u8>,
}

enum Surface {
    Object,
    Gripper,
    Floor,
}

/// Bounding ball test for a ray with z-normalized direction.
fn may_hit(center: &Vec3, radius: f64, d: &Vec3) -> bool {
    let dn = d.normalize();
    let along = center.dot(&dn);
    if along < -radius {
        return false;
    }
    (center - dn * along).norm_squared() <= radius * radius
}

fn shade(albedo: [f64; 3], p: &Vec3, n: &Vec3, light: &Light) -> [f64; 3] {
    let l = (light.position - p).normalize();
    let diffuse = n.dot(&l).max(0.0) * (1.0 - light.ambient);
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = albedo[k] * (light.ambient + diffuse * light.color[k]);
    }
    out
}

fn to_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders from a camera at the origin of the scene frame looking along +z.
pub fn raycast_render(scene: &Scene, camera: &Intrinsics) -> RenderOutput {
    let n = camera.pixel_count();
    let mut rgb = vec![0u8; n * 3];
    let mut depth = vec![0f32; n];
    let mut mask = vec![MASK_BACKGROUND; n];

    let object_prims: Vec<(Primitive, f64)> = scene
        .object
        .as_ref()
        .map(|o| {
            o.object
                .primitives
                .iter()
                .map(|p| (Primitive::new(p.shape, o.pose.compose(&p.pose)), shape_radius(&p.shape)))
                .collect()
        })
        .unwrap_or_default();
    let gripper_prims: Vec<(Primitive, f64)> = scene.gripper.iter().map(|p| (*p, shape_radius(&p.shape))).collect();

    for v in 0..camera.height {
        for u in 0..camera.width {
            let d = camera.ray(u, v);
            let mut best: Option<(Hit, Surface)> = None;
            let mut consider = |h: Hit, s: Surface| {
                if best.as_ref().is_none_or(|(b, _)| h.t < b.t) {
                    best = Some((h, s));
                }
            };
            for (p, r) in &object_prims {
                if may_hit(&p.pose.translation, *r, &d) {
                    if let Some(h) = p.intersect(&Vec3::zeros(), &d) {
                        consider(h, Surface::Object);
                    }
                }
            }
            for (p, r) in &gripper_prims {
                if may_hit(&p.pose.translation, *r, &d) {
                    if let Some(h) = p.intersect(&Vec3::zeros(), &d) {
                        consider(h, Surface::Gripper);
                    }
                }
            }
            if let Some(f) = &scene.floor {
                if d.y > 0.0 {
                    consider(Hit { t: f.height / d.y, normal: -Vec3::y() }, Surface::Floor);
                }
            }
            let i = v * camera.width + u;
            let color = match best {
                None => scene.background,
                Some((h, surface)) => {
                    let p = d * h.t;
                    depth[i] = h.t as f32;
                    match surface {
                        Surface::Object => {
                            let o = scene.object.as_ref().expect("object hit implies object");
                            mask[i] = o.object.id as u8;
                            let local = o.pose.inverse().apply(&p);
                            shade(o.object.color(&local), &p, &h.normal, &scene.light)
                        }
                        Surface::Gripper => {
                            mask[i] = MASK_GRIPPER;
                            shade(GRIPPER_ALBEDO, &p, &h.normal, &scene.light)
                        }
                        Surface::Floor => {
                            let f = scene.floor.as_ref().expect("floor hit implies floor");
                            let cell = (p.x / f.period).floor() + (p.z / f.period).floor();
                            let albedo = if cell.rem_euclid(2.0) < 1.0 { f.a } else { f.b };
                            shade(albedo, &p, &h.normal, &scene.light)
                        }
                    }
                }
            };
            for k in 0..3 {
                rgb[i * 3 + k] = to_byte(color[k]);
            }
        }
    }
    RenderOutput { width: camera.width, height: camera.height, rgb, depth, mask }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

/// Redraws background, floor appearance and the light. Object and gripper
/// placement are left untouched.
pub fn randomize_domain<R: Rng>(scene: &mut Scene, rng: &mut R) {
    scene.background = random_color(rng);
    let floor = scene.floor.get_or_insert_with(Floor::default);
    floor.a = random_color(rng);
    floor.b = random_color(rng);
    floor.period = rng.gen_range(0.03..0.2);
    scene.light.position = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.6..0.0), rng.gen_range(-0.1..0.4));
    scene.light.color = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::objects::{build_object, sample_union_surface, Texture};
    use crate::simworld::primitives::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere(radius: f64) -> SceneObject {
        let primitives = vec![Primitive::at_origin(Shape::Sphere { radius })];
        let model_cloud = sample_union_surface(&primitives, 50, 1);
        SceneObject { id: 4, name: "sphere", primitives, texture: Texture::Uniform([0.8, 0.2, 0.2]), marker: None, model_cloud }
    }

    #[test]
    fn empty_scene_is_background() {
        let out = raycast_render(&Scene::default(), &Intrinsics::desk());
        assert!(out.mask.iter().all(|&m| m == MASK_BACKGROUND));
        assert!(out.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn unit_sphere_two_meters_ahead() {
        let obj = sphere(1.0);
        let scene = Scene { object: Some(Placed { object: &obj, pose: Pose::from_translation(Vec3::new(0.0, 0.0, 2.0)) }), ..Default::default() };
        let cam = Intrinsics::desk();
        let out = raycast_render(&scene, &cam);
        let center = out.depth[60 * cam.width + 80] as f64;
        assert!((center - 1.0).abs() < 1e-4, "{center}");
        assert_eq!(out.mask[60 * cam.width + 80], 4);
    }

    #[test]
    fn depth_positive_exactly_on_object_pixels_without_floor() {
        let obj = build_object(1, 50).unwrap();
        let pose = Pose::new(nalgebra::UnitQuaternion::from_euler_angles(0.4, 0.8, -0.2), Vec3::new(0.01, 0.0, 0.4));
        let scene = Scene { object: Some(Placed { object: &obj, pose }), ..Default::default() };
        let out = raycast_render(&scene, &Intrinsics::desk());
        for (d, m) in out.depth.iter().zip(&out.mask) {
            assert_eq!(*d > 0.0, *m == 1);
        }
        assert!(out.mask.contains(&1));
    }

    #[test]
    fn nearest_depth_matches_sphere_distance() {
        let cam = Intrinsics::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let r = rng.gen_range(0.02..0.05);
            let c = Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(0.3..0.6));
            let obj = sphere(r);
            let scene = Scene { object: Some(Placed { object: &obj, pose: Pose::from_translation(c) }), ..Default::default() };
            let out = raycast_render(&scene, &cam);
            let min = out.depth.iter().filter(|d| **d > 0.0).fold(f64::INFINITY, |m, d| m.min(*d as f64));
            // The closest surface point c - r z is front-facing; a pixel away
            // from it the surface rises by at most (pixel width)^2 / r.
            let pixel = c.z / cam.fx;
            assert!(min >= c.z - r - 1e-6, "{min} below {}", c.z - r);
            assert!(min - (c.z - r) <= pixel * pixel / r, "{min} vs {}", c.z - r);
        }
    }

    #[test]
    fn gripper_occludes_and_is_labelled() {
        let obj = sphere(0.03);
        let scene = Scene {
            object: Some(Placed { object: &obj, pose: Pose::from_translation(Vec3::new(0.0, 0.0, 0.5)) }),
            gripper: vec![Primitive::new(Shape::Box { half: Vec3::new(0.01, 0.01, 0.01) }, Pose::from_translation(Vec3::new(0.0, 0.0, 0.3)))],
            ..Default::default()
        };
        let cam = Intrinsics::desk();
        let out = raycast_render(&scene, &cam);
        assert_eq!(out.mask[60 * cam.width + 80], MASK_GRIPPER);
        assert!((out.depth[60 * cam.width + 80] - 0.29).abs() < 1e-6);
    }

    #[test]
    fn randomization_is_seeded_and_leaves_pose_alone() {
        let obj = sphere(0.03);
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 0.5));
        let mk = || Scene { object: Some(Placed { object: &obj, pose }), ..Default::default() };
        let (mut a, mut b) = (mk(), mk());
        randomize_domain(&mut a, &mut ChaCha8Rng::seed_from_u64(3));
        randomize_domain(&mut b, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.background, b.background);
        assert_eq!(a.light, b.light);
        assert_eq!(a.floor, b.floor);
        assert_eq!(a.object.as_ref().unwrap().pose, pose);

        let backgrounds: Vec<[f64; 3]> = (0..100)
            .map(|s| {
                let mut sc = mk();
                randomize_domain(&mut sc, &mut ChaCha8Rng::seed_from_u64(1000 + s));
                sc.background
            })
            .collect();
        let distinct = backgrounds.iter().enumerate().filter(|(i, x)| backgrounds[..*i].iter().all(|y| y != *x)).count();
        assert_eq!(distinct, 100);
    }
}
