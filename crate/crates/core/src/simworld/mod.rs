//! Procedural data collection: objects held by a four-finger hand in front
//! of a ray-cast RGB-D camera, with tactile point clouds from cameras on
//! each phalanx pad.

pub mod camera;
pub mod gripper;
pub mod objects;
pub mod primitives;
pub mod render;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use camera::Intrinsics;
pub use gripper::{Gripper, GraspResult, HandGeometry};
pub use objects::{build_object, SceneObject, Texture, OBJECT_COUNT};
pub use primitives::{Hit, Primitive, Shape};
pub use render::{randomize_domain, raycast_render, Floor, Light, Placed, RenderOutput, Scene};

use crate::dataset::{annotate_occlusion, SampleId, SampleRecord};
use crate::geometry::{PointCloud, Pose, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("object {object} has no definition")]
    UnknownObject { object: u16 },
    #[error("grasp failed for object {object} ({name}), trajectory {trajectory}, after {attempts} attempts")]
    GraspFailure { object: u16, name: &'static str, trajectory: u32, attempts: usize },
    #[error("invalid collection request: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub camera: Intrinsics,
    pub hand: HandGeometry,
    pub trajectories: usize,
    pub instances: usize,
    pub seed: u64,
    /// Fraction of trajectories rendered without domain randomization.
    pub clean_fraction: f64,
    pub contact_threshold: f64,
    pub visibility_epsilon: f64,
    pub model_point_count: usize,
    pub max_grasp_attempts: usize,
    pub floor: bool,
    pub preshape_range: [f64; 2],
    /// Rotation of the object about the hand's z axis, degrees either side.
    pub in_hand_spin_deg: f64,
    pub in_hand_tilt_deg: f64,
    pub in_hand_offset: f64,
    /// Clearance between the palm and the lowest point of the object.
    pub palm_clearance: f64,
    pub rig_yaw_deg: f64,
    pub rig_pitch_deg: f64,
    pub rig_roll_deg: f64,
    pub rig_depth: [f64; 2],
    pub rig_lateral: [f64; 2],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            camera: Intrinsics::desk(),
            hand: HandGeometry::default(),
            trajectories: 20,
            instances: 10,
            seed: 7,
            clean_fraction: 0.2,
            contact_threshold: 0.005,
            visibility_epsilon: crate::geometry::DEFAULT_VISIBILITY_EPSILON,
            model_point_count: 500,
            max_grasp_attempts: 100,
            floor: true,
            preshape_range: [0.1, 0.5],
            in_hand_spin_deg: 25.0,
            in_hand_tilt_deg: 15.0,
            in_hand_offset: 0.004,
            palm_clearance: 0.012,
            rig_yaw_deg: 50.0,
            rig_pitch_deg: 30.0,
            rig_roll_deg: 25.0,
            rig_depth: [0.38, 0.5],
            rig_lateral: [0.04, 0.03],
        }
    }
}

/// A held object: fixed for the whole trajectory.
#[derive(Debug, Clone)]
pub struct Grasp {
    pub object_in_hand: Pose,
    pub gripper: Gripper,
    pub contacts: Vec<(usize, usize)>,
    /// Tactile cloud in the hand frame.
    pub tactile: PointCloud,
}

/// Deterministic stream splitter for per-object and per-trajectory seeds.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn symmetric<R: Rng>(rng: &mut R, half_deg: f64) -> f64 {
    if half_deg <= 0.0 {
        0.0
    } else {
        rng.gen_range(-half_deg..=half_deg).to_radians()
    }
}

/// Hand z toward the camera's up (−y), hand x along camera x.
fn rig_base() -> UnitQuaternion<f64> {
    let m = Matrix3::from_columns(&[Vec3::x(), Vec3::z(), -Vec3::y()]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Draws a placement of the object in the hand and closes the fingers on
/// it, retrying up to the configured attempt budget.
pub fn grasp_object<R: Rng>(object: &SceneObject, cfg: &SimConfig, trajectory: u32, rng: &mut R) -> Result<Grasp, SimError> {
    for _ in 0..cfg.max_grasp_attempts {
        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let rotation = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), symmetric(rng, cfg.in_hand_spin_deg))
            * UnitQuaternion::from_axis_angle(&Vec3::y_axis(), symmetric(rng, cfg.in_hand_tilt_deg))
            * UnitQuaternion::from_axis_angle(&Vec3::x_axis(), theta);
        let lowest = object.model_cloud.points.iter().map(|p| (rotation * p).z).fold(f64::INFINITY, f64::min);
        let off = cfg.in_hand_offset;
        let translation = Vec3::new(
            rng.gen_range(-off..=off),
            rng.gen_range(-off..=off),
            cfg.palm_clearance - lowest + rng.gen_range(0.0..=off),
        );
        let object_in_hand = Pose::new(rotation, translation);
        let preshape = rng.gen_range(cfg.preshape_range[0]..=cfg.preshape_range[1]);
        let open = Gripper::open(cfg.hand.clone(), preshape);
        if let Some(GraspResult { gripper, contacts }) = open.grasp(object, &object_in_hand, cfg.contact_threshold) {
            let tactile = gripper.tactile_capture(object, &object_in_hand, cfg.contact_threshold);
            if !tactile.is_empty() {
                return Ok(Grasp { object_in_hand, gripper, contacts, tactile });
            }
        }
    }
    Err(SimError::GraspFailure { object: object.id, name: object.name, trajectory, attempts: cfg.max_grasp_attempts })
}

/// Pose of the hand in the camera frame for one instance.
pub fn draw_rig_pose<R: Rng>(grasp: &Grasp, cfg: &SimConfig, rng: &mut R) -> Pose {
    let rotation = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), symmetric(rng, cfg.rig_roll_deg))
        * UnitQuaternion::from_axis_angle(&Vec3::y_axis(), symmetric(rng, cfg.rig_yaw_deg))
        * UnitQuaternion::from_axis_angle(&Vec3::x_axis(), symmetric(rng, cfg.rig_pitch_deg))
        * rig_base();
    let [lx, ly] = cfg.rig_lateral;
    let center = Vec3::new(
        rng.gen_range(-lx..=lx),
        rng.gen_range(-ly..=ly),
        rng.gen_range(cfg.rig_depth[0]..=cfg.rig_depth[1]),
    );
    Pose::new(rotation, center - rotation * grasp.object_in_hand.translation)
}

/// Renders one instance and packages it as an annotated record.
pub fn record_instance<R: Rng>(
    object: &SceneObject,
    grasp: &Grasp,
    cfg: &SimConfig,
    id: SampleId,
    randomized: bool,
    rng: &mut R,
) -> SampleRecord {
    let rig = draw_rig_pose(grasp, cfg, rng);
    let gt_pose = rig.compose(&grasp.object_in_hand);
    let gripper: Vec<Primitive> =
        grasp.gripper.primitives().into_iter().map(|p| Primitive::new(p.shape, rig.compose(&p.pose))).collect();
    let mut scene = Scene {
        object: Some(Placed { object, pose: gt_pose }),
        gripper,
        floor: cfg.floor.then(Floor::default),
        background: [0.8, 0.8, 0.82],
        light: Light::default(),
    };
    if randomized {
        randomize_domain(&mut scene, rng);
    }
    let out = raycast_render(&scene, &cfg.camera);
    let tactile = grasp
        .tactile
        .points
        .iter()
        .map(|p| {
            let q = rig.apply(p);
            [q.x as f32, q.y as f32, q.z as f32]
        })
        .collect();
    let mut record = SampleRecord {
        id,
        object_id: object.id,
        width: out.width,
        height: out.height,
        rgb: out.rgb,
        depth: out.depth,
        mask: out.mask,
        tactile,
        gt_pose,
        domain_randomized: randomized,
        occlusion: 0.0,
    };
    record.occlusion = annotate_occlusion(&record, &object.model_cloud, &cfg.camera, cfg.visibility_epsilon);
    record
}

/// Indices of the trajectories rendered without randomization.
pub fn clean_trajectories(object_id: u16, cfg: &SimConfig) -> Vec<usize> {
    let t = cfg.trajectories;
    let count = ((cfg.clean_fraction * t as f64).round() as usize).min(t);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, object_id as u64, u64::MAX));
    let mut v = index::sample(&mut rng, t, count).into_vec();
    v.sort_unstable();
    v
}

pub fn generate_trajectory(object: &SceneObject, cfg: &SimConfig, trajectory: u32, randomized: bool) -> Result<Vec<SampleRecord>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, object.id as u64, trajectory as u64));
    let grasp = grasp_object(object, cfg, trajectory, &mut rng)?;
    Ok((0..cfg.instances as u32)
        .map(|i| {
            let id = SampleId { object: object.id, trajectory, instance: i };
            record_instance(object, &grasp, cfg, id, randomized, &mut rng)
        })
        .collect())
}

/// All `trajectories × instances` samples of one object, in trajectory then
/// instance order. Trajectories are generated in parallel from independent
/// seeds, so the output does not depend on scheduling.
pub fn run_collection(object_id: u16, cfg: &SimConfig) -> Result<Vec<SampleRecord>, SimError> {
    if cfg.trajectories == 0 || cfg.instances == 0 {
        return Err(SimError::Config("trajectories and instances must be at least 1".into()));
    }
    let object = build_object(object_id, cfg.model_point_count).ok_or(SimError::UnknownObject { object: object_id })?;
    let clean = clean_trajectories(object_id, cfg);
    let per_traj: Result<Vec<Vec<SampleRecord>>, SimError> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|t| generate_trajectory(&object, cfg, t as u32, clean.binary_search(&t).is_err()))
        .collect();
    Ok(per_traj?.into_iter().flatten().collect())
}
