//! Four-finger, three-phalanx hand with a virtual depth camera on every
//! phalanx pad. All geometry lives in the hand frame: palm at the origin,
//! fingers extending along +z when open.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::camera::Intrinsics;
use super::objects::SceneObject;
use super::primitives::{Primitive, Shape};
use crate::geometry::{PointCloud, Pose, Vec3};

pub const FINGERS: usize = 4;
pub const PHALANGES: usize = 3;
/// Samples along each pad line used for distance queries.
const PAD_SAMPLES: usize = 7;
const BISECTION_STEPS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandGeometry {
    pub base_radius: f64,
    pub phalanx_lengths: [f64; PHALANGES],
    pub phalanx_radius: f64,
    /// Half extents of the palm box, which sits just below z = 0.
    pub palm_half: [f64; 3],
    /// Closure increment per grasp step, radians.
    pub closure_step: f64,
    pub max_closure: f64,
    /// Distance at which a closing finger stops.
    pub grasp_gap: f64,
    pub tactile_resolution: usize,
    pub tactile_fov_deg: f64,
}

impl Default for HandGeometry {
    fn default() -> Self {
        Self {
            base_radius: 0.06,
            phalanx_lengths: [0.045, 0.035, 0.03],
            phalanx_radius: 0.009,
            palm_half: [0.075, 0.035, 0.01],
            closure_step: 0.005,
            max_closure: 1.0,
            grasp_gap: 0.001,
            tactile_resolution: 32,
            tactile_fov_deg: 100.0,
        }
    }
}

/// One phalanx in the hand frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phalanx {
    pub start: Vec3,
    pub end: Vec3,
    /// Unit normal of the gripping pad, pointing away from the phalanx.
    pub normal: Vec3,
    /// Tactile camera frame: origin on the pad, z along `normal`.
    pub camera: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gripper {
    pub geometry: HandGeometry,
    pub preshape: f64,
    /// Per-joint closure of each finger; joint k of finger f is flexed by
    /// `(k + 1) · closure[f]` relative to the palm.
    pub closure: [f64; FINGERS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspResult {
    pub gripper: Gripper,
    /// `(finger, phalanx)` pairs within the contact threshold.
    pub contacts: Vec<(usize, usize)>,
}

impl Gripper {
    pub fn open(geometry: HandGeometry, preshape: f64) -> Self {
        Self { geometry, preshape, closure: [0.0; FINGERS] }
    }

    pub fn azimuths(&self) -> [f64; FINGERS] {
        let s = self.preshape;
        [s, -s, std::f64::consts::PI - s, std::f64::consts::PI + s]
    }

    fn finger(&self, f: usize, closure: f64) -> [Phalanx; PHALANGES] {
        let g = &self.geometry;
        let phi = self.azimuths()[f];
        let u = Vec3::new(phi.cos(), phi.sin(), 0.0);
        let z = Vec3::z();
        let mut joint = u * g.base_radius;
        let mut out = [Phalanx { start: joint, end: joint, normal: z, camera: Pose::identity() }; PHALANGES];
        for (k, slot) in out.iter_mut().enumerate() {
            let alpha = (k + 1) as f64 * closure;
            let dir = z * alpha.cos() - u * alpha.sin();
            let normal = -u * alpha.cos() - z * alpha.sin();
            let end = joint + dir * g.phalanx_lengths[k];
            let origin = (joint + end) * 0.5 + normal * g.phalanx_radius;
            let y = normal.cross(&dir);
            let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[dir, y, normal]));
            *slot = Phalanx {
                start: joint,
                end,
                normal,
                camera: Pose::new(UnitQuaternion::from_rotation_matrix(&rot), origin),
            };
            joint = end;
        }
        out
    }

    pub fn phalanges(&self) -> Vec<Phalanx> {
        (0..FINGERS).flat_map(|f| self.finger(f, self.closure[f])).collect()
    }

    /// Palm box plus one capsule per phalanx, in the hand frame.
    pub fn primitives(&self) -> Vec<Primitive> {
        let g = &self.geometry;
        let mut out = vec![Primitive::new(
            Shape::Box { half: Vec3::from(g.palm_half) },
            Pose::from_translation(Vec3::new(0.0, 0.0, -g.palm_half[2])),
        )];
        for p in self.phalanges() {
            out.push(capsule_between(&p.start, &p.end, g.phalanx_radius));
        }
        out
    }

    /// Smallest signed distance from the pad line of any phalanx of finger
    /// `f` at `closure` to the object placed at `object_pose`.
    fn finger_clearance(&self, f: usize, closure: f64, object: &SceneObject, object_pose: &Pose) -> [f64; PHALANGES] {
        let inv = object_pose.inverse();
        let r = self.geometry.phalanx_radius;
        self.finger(f, closure).map(|p| {
            (0..PAD_SAMPLES)
                .map(|i| {
                    let s = i as f64 / (PAD_SAMPLES - 1) as f64;
                    let q = p.start + (p.end - p.start) * s + p.normal * r;
                    object.signed_distance(&inv.apply(&q))
                })
                .fold(f64::INFINITY, f64::min)
        })
    }

    /// Closes every finger until its nearest pad reaches the grasp gap or
    /// the joint limit, then reports the phalanges within `contact_threshold`.
    /// Returns `None` when fewer than two phalanges touch the object.
    pub fn grasp(&self, object: &SceneObject, object_pose: &Pose, contact_threshold: f64) -> Option<GraspResult> {
        let g = &self.geometry;
        let gap = g.grasp_gap;
        let mut closed = self.clone();
        let mut contacts = Vec::new();
        for f in 0..FINGERS {
            let clearance = |c: f64| self.finger_clearance(f, c, object, object_pose).iter().cloned().fold(f64::INFINITY, f64::min);
            if clearance(0.0) < gap {
                // Already touching or penetrating when open: unusable placement.
                return None;
            }
            let mut prev = 0.0;
            let mut c = 0.0;
            let mut hit = false;
            while c < g.max_closure {
                c = (c + g.closure_step).min(g.max_closure);
                if clearance(c) <= gap {
                    hit = true;
                    break;
                }
                prev = c;
            }
            if hit {
                let (mut lo, mut hi) = (prev, c);
                for _ in 0..BISECTION_STEPS {
                    let mid = 0.5 * (lo + hi);
                    if clearance(mid) <= gap {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                c = lo;
            }
            closed.closure[f] = c;
            for (k, d) in self.finger_clearance(f, c, object, object_pose).iter().enumerate() {
                if *d <= contact_threshold {
                    contacts.push((f, k));
                }
            }
        }
        if contacts.len() < 2 {
            return None;
        }
        Some(GraspResult { gripper: closed, contacts })
    }

    /// Union over all phalanx cameras of object-surface points no farther
    /// than `contact_threshold` in depth, in the hand frame. Only the object
    /// is visible to these cameras.
    pub fn tactile_capture(&self, object: &SceneObject, object_pose: &Pose, contact_threshold: f64) -> PointCloud {
        let g = &self.geometry;
        let cam = Intrinsics::square(g.tactile_resolution, g.tactile_fov_deg.to_radians());
        let inv = object_pose.inverse();
        let reach = object.bounding_radius();
        let mut points = Vec::new();
        for p in self.phalanges() {
            // Skip cameras whose whole view cone cannot reach the object.
            let origin_obj = inv.apply(&p.camera.translation);
            if origin_obj.norm() - reach > contact_threshold * 2.0 {
                continue;
            }
            for v in 0..cam.height {
                for u in 0..cam.width {
                    let d_cam = cam.ray(u, v);
                    let d_hand = p.camera.rotation * d_cam;
                    let d_obj = inv.rotation * d_hand;
                    if let Some(hit) = object.intersect(&origin_obj, &d_obj) {
                        if hit.t <= contact_threshold {
                            points.push(object_pose.apply(&(origin_obj + d_obj * hit.t)));
                        }
                    }
                }
            }
        }
        PointCloud::new(points)
    }
}

pub fn capsule_between(a: &Vec3, b: &Vec3, radius: f64) -> Primitive {
    let axis = b - a;
    let len = axis.norm();
    let rotation = UnitQuaternion::rotation_between(&Vec3::z(), &axis)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI));
    Primitive::new(Shape::Capsule { radius, half_length: len / 2.0 }, Pose::new(rotation, (a + b) * 0.5))
}
