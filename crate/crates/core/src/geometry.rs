//! Rigid transforms, point clouds and the pose error kernels shared by the
//! simulator, the training loss and evaluation.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::seq::index;
use rand::Rng;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Default visibility threshold for occlusion annotation, meters.
pub const DEFAULT_VISIBILITY_EPSILON: f64 = 0.005;

/// Quaternions closer than this to unit norm are accepted as-is.
const UNIT_TOLERANCE: f64 = 1e-6;
/// Quaternions within this of unit norm are silently renormalized.
const RENORMALIZE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("quaternion norm {0} is not close to 1")]
    NonUnitQuaternion(f64),
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("point cloud has {points} points but {colors} colors")]
    ColorCount { points: usize, colors: usize },
    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Accepts `q` if it is unit within 1e-6, renormalizes within 1e-3, and
/// rejects anything further off.
pub fn checked_unit(q: &Quaternion<f64>) -> Result<UnitQuaternion<f64>> {
    let norm = q.norm();
    if (norm - 1.0).abs() <= UNIT_TOLERANCE {
        Ok(UnitQuaternion::new_unchecked(*q))
    } else if (norm - 1.0).abs() <= RENORMALIZE_TOLERANCE {
        Ok(UnitQuaternion::new_normalize(*q))
    } else {
        Err(GeometryError::NonUnitQuaternion(norm))
    }
}

/// Rotation matrix of a (w, x, y, z) unit quaternion.
pub fn quat_to_matrix(q: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    let u = checked_unit(q)?;
    let (w, x, y, z) = (u.w, u.i, u.j, u.k);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Rigid transform: rotation as a unit quaternion, translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from raw `(w, x, y, z)` and a translation, applying the
    /// unit-norm contract of [`checked_unit`].
    pub fn from_parts(wxyz: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Ok(Self { rotation: checked_unit(&q)?, translation: Vec3::from(translation) })
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: t }
    }

    /// `(w, x, y, z)` components.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.rotation.quaternion()).expect("stored rotation is unit")
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose { rotation: inv, translation: -(inv * self.translation) }
    }
}

/// Ordered 3D points with optional per-point RGB in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, colors: None }
    }

    pub fn with_colors(points: Vec<Vec3>, colors: Vec<[f64; 3]>) -> Result<Self> {
        let c = Self { points, colors: Some(colors) };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.colors {
            if c.len() != self.points.len() {
                return Err(GeometryError::ColorCount { points: self.points.len(), colors: c.len() });
            }
        }
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        Some(self.points.iter().sum::<Vec3>() / self.points.len() as f64)
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    pub fn as_arrays(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

pub fn transform_cloud(pose: &Pose, cloud: &PointCloud) -> PointCloud {
    PointCloud { points: cloud.points.iter().map(|p| pose.apply(p)).collect(), colors: cloud.colors.clone() }
}

/// Mean distance between the model under `est` and under `gt`.
pub fn pointwise_pose_loss(est: &Pose, gt: &Pose, model: &PointCloud) -> Result<f64> {
    if model.is_empty() {
        return Err(GeometryError::Empty("model"));
    }
    let (re, rg) = (est.matrix(), gt.matrix());
    let sum: f64 = model
        .points
        .iter()
        .map(|x| ((rg * x + gt.translation) - (re * x + est.translation)).norm())
        .sum();
    Ok(sum / model.len() as f64)
}

/// Angle between two rotations given as quaternions, radians in `[0, π]`.
/// Invariant under the sign of either argument.
///
/// Equal to `acos(2⟨a, b⟩² − 1)`, evaluated as `2 atan2(|v|, |w|)` of the
/// relative rotation so that identical inputs give exactly zero.
pub fn angular_error(q_est: &Quaternion<f64>, q_gt: &Quaternion<f64>) -> Result<f64> {
    let a = checked_unit(q_est)?;
    let b = checked_unit(q_gt)?;
    // Relative rotation conj(a)·b, written out so that b = ±a cancels exactly.
    let (wa, va, wb, vb) = (a.w, a.imag(), b.w, b.imag());
    let w = wa * wb + va.dot(&vb);
    let v = vb * wa - va * wb - va.cross(&vb);
    Ok(2.0 * v.norm().atan2(w.abs()))
}

/// The textbook form `acos(2⟨a, b⟩² − 1)` with the argument clamped.
pub fn angular_error_acos(q_est: &Quaternion<f64>, q_gt: &Quaternion<f64>) -> Result<f64> {
    let a = checked_unit(q_est)?;
    let b = checked_unit(q_gt)?;
    let dot = a.coords.dot(&b.coords);
    Ok((2.0 * dot * dot - 1.0).clamp(-1.0, 1.0).acos())
}

pub fn position_error(t_est: &Vec3, t_gt: &Vec3) -> f64 {
    (t_est - t_gt).norm()
}

/// Fraction of `model` points with no `observed` point within `epsilon`.
///
/// Exact brute-force nearest neighbour; an empty observation is fully
/// occluded by definition.
pub fn knn_visibility(model: &PointCloud, observed: &PointCloud, epsilon: f64) -> f64 {
    if model.is_empty() {
        return 1.0;
    }
    if observed.is_empty() {
        return 1.0;
    }
    let eps2 = epsilon * epsilon;
    let hidden = model
        .points
        .iter()
        .filter(|m| !observed.points.iter().any(|o| (*m - o).norm_squared() <= eps2))
        .count();
    hidden as f64 / model.len() as f64
}

/// Index of the nearest point in `cloud` to `p` (first wins on ties).
pub fn nearest_index(cloud: &[Vec3], p: &Vec3) -> Option<usize> {
    cloud
        .iter()
        .enumerate()
        .map(|(i, q)| (i, (p - q).norm_squared()))
        .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((i, d)),
        })
        .map(|(i, _)| i)
}

/// `n` indices into a population of `len`: uniform without replacement when
/// `len ≥ n`, otherwise with replacement.
pub fn sample_indices<R: Rng>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(GeometryError::Empty("cloud"));
    }
    if n == 0 {
        return Err(GeometryError::Empty("sample"));
    }
    if len >= n {
        Ok(index::sample(rng, len, n).into_vec())
    } else {
        Ok((0..n).map(|_| rng.gen_range(0..len)).collect())
    }
}

pub fn sample_points<R: Rng>(cloud: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    Ok(cloud.select(&sample_indices(cloud.len(), n, rng)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let q = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        Pose::new(
            UnitQuaternion::new_normalize(q),
            Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.3..0.8)),
        )
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n).map(|_| Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05))).collect(),
        )
    }

    #[test]
    fn quat_to_matrix_examples() {
        let id = quat_to_matrix(&Quaternion::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(id, Matrix3::identity());
        let rz = quat_to_matrix(&Quaternion::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2)).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(rz, expected, epsilon = 1e-12);
    }

    #[test]
    fn quat_to_matrix_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let m = random_pose(&mut rng).matrix();
            assert_abs_diff_eq!(m.transpose() * m, Matrix3::identity(), epsilon = 1e-9);
            assert_abs_diff_eq!(m.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn near_unit_quaternions_are_renormalized_far_ones_rejected() {
        let m = quat_to_matrix(&Quaternion::new(1.0005, 0.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(m, Matrix3::identity(), epsilon = 1e-12);
        assert!(matches!(
            quat_to_matrix(&Quaternion::new(1.1, 0.0, 0.0, 0.0)),
            Err(GeometryError::NonUnitQuaternion(_))
        ));
        assert!(angular_error(&Quaternion::new(2.0, 0.0, 0.0, 0.0), &Quaternion::identity()).is_err());
    }

    #[test]
    fn transform_examples() {
        let cloud = PointCloud::with_colors(vec![Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)], vec![[0.1, 0.2, 0.3]; 2]).unwrap();
        assert_eq!(transform_cloud(&Pose::identity(), &cloud), cloud);
        let moved = transform_cloud(&Pose::from_translation(Vec3::new(0.0, 0.0, 0.1)), &cloud);
        assert_eq!(moved.points[0], Vec3::new(0.0, 0.0, 0.1));
        assert_eq!(moved.colors, cloud.colors);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let c = p.compose(&p.inverse());
            assert_abs_diff_eq!(c.translation, Vec3::zeros(), epsilon = 1e-9);
            assert!(c.rotation.angle() < 1e-9);
            let cloud = random_cloud(&mut rng, 10);
            let back = transform_cloud(&p.inverse(), &transform_cloud(&p, &cloud));
            for (a, b) in back.points.iter().zip(&cloud.points) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pose_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_cloud(&mut rng, 50);
        let gt = random_pose(&mut rng);
        assert_eq!(pointwise_pose_loss(&gt, &gt, &model).unwrap(), 0.0);
        let shifted = Pose::new(gt.rotation, gt.translation + Vec3::new(0.003, -0.004, 0.0));
        assert_abs_diff_eq!(pointwise_pose_loss(&shifted, &gt, &model).unwrap(), 0.005, epsilon = 1e-15);
        assert!(matches!(pointwise_pose_loss(&gt, &gt, &PointCloud::default()), Err(GeometryError::Empty(_))));
    }

    #[test]
    fn pose_loss_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_cloud(&mut rng, 50);
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        // Oracle: rotate with the Hamilton product q p q* instead of a matrix.
        let rotate = |q: &UnitQuaternion<f64>, p: &Vec3| {
            let qp = q.quaternion() * Quaternion::from_imag(*p) * q.quaternion().conjugate();
            qp.imag()
        };
        let mut sum = 0.0;
        for x in &model.points {
            let pa = rotate(&a.rotation, x) + a.translation;
            let pb = rotate(&b.rotation, x) + b.translation;
            let mut d2 = 0.0;
            for k in 0..3 {
                d2 += (pa[k] - pb[k]) * (pa[k] - pb[k]);
            }
            sum += d2.sqrt();
        }
        let oracle = sum / 50.0;
        assert_abs_diff_eq!(pointwise_pose_loss(&a, &b, &model).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(pointwise_pose_loss(&b, &a, &model).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn angular_error_examples() {
        let id = Quaternion::new(1.0, 0.0, 0.0, 0.0);
        assert_eq!(angular_error(&id, &id).unwrap(), 0.0);
        assert_eq!(angular_error(&-id, &id).unwrap(), 0.0);
        let rz = Quaternion::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2);
        assert_abs_diff_eq!(angular_error(&id, &rz).unwrap(), FRAC_PI_2, epsilon = 1e-9);
    }

    #[test]
    fn position_error_examples() {
        assert_eq!(position_error(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(1.0, 2.0, 3.0)), 0.0);
        assert_eq!(position_error(&Vec3::zeros(), &Vec3::new(0.0, 3.0, 4.0)), 5.0);
        let (a, b) = (Vec3::new(0.1, -0.2, 0.3), Vec3::new(-0.4, 0.5, 0.25));
        let direct = ((0.1f64 + 0.4).powi(2) + (-0.2f64 - 0.5).powi(2) + (0.3f64 - 0.25).powi(2)).sqrt();
        assert_abs_diff_eq!(position_error(&a, &b), direct, epsilon = 1e-15);
    }

    #[test]
    fn visibility_examples() {
        let grid: Vec<Vec3> = (0..10).flat_map(|i| (0..10).map(move |j| Vec3::new(i as f64 * 0.01, j as f64 * 0.01, 0.5))).collect();
        let model = PointCloud::new(grid.clone());
        assert_eq!(knn_visibility(&model, &model, 0.005), 0.0);
        assert_eq!(knn_visibility(&model, &PointCloud::default(), 0.005), 1.0);
        // Every other point observed; epsilon below the 1 cm spacing.
        let half = PointCloud::new(grid.iter().step_by(2).copied().collect());
        assert_eq!(knn_visibility(&model, &half, 0.004), 0.5);
    }

    #[test]
    fn sample_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 5000);
        let idx = sample_indices(5000, 1000, &mut rng).unwrap();
        assert_eq!(idx.iter().collect::<HashSet<_>>().len(), 1000);

        let small = random_cloud(&mut rng, 3);
        let s = sample_points(&small, 10, &mut rng).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.points.iter().all(|p| small.points.contains(p)));

        let perm = sample_indices(40, 40, &mut rng).unwrap();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..40).collect::<Vec<_>>());

        assert!(sample_points(&PointCloud::default(), 4, &mut rng).is_err());
        let a = sample_indices(100, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_indices(100, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let _ = cloud;
    }

    proptest! {
        #[test]
        fn pose_loss_self_is_zero_and_angular_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_cloud(&mut rng, 20);
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            prop_assert_eq!(pointwise_pose_loss(&a, &a, &model).unwrap(), 0.0);
            let (qa, qb) = (*a.rotation.quaternion(), *b.rotation.quaternion());
            let e = angular_error(&qa, &qb).unwrap();
            prop_assert!((e - angular_error(&qb, &qa).unwrap()).abs() < 1e-12);
            prop_assert!((e - angular_error(&-qa, &qb).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::PI).contains(&e));
            prop_assert_eq!(angular_error(&qa, &-qa).unwrap(), 0.0);
            prop_assert_eq!(angular_error(&qa, &qa).unwrap(), 0.0);
            // Away from the ill-conditioned ends the two forms agree closely.
            let textbook = angular_error_acos(&qa, &qb).unwrap();
            if e > 1e-3 && e < std::f64::consts::PI - 1e-3 {
                prop_assert!((e - textbook).abs() < 1e-9, "{} vs {}", e, textbook);
            }
        }

        #[test]
        fn transform_preserves_pairwise_distances(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = random_cloud(&mut rng, 12);
            let moved = transform_cloud(&random_pose(&mut rng), &cloud);
            for i in 0..12 {
                for j in 0..12 {
                    let before = (cloud.points[i] - cloud.points[j]).norm();
                    let after = (moved.points[i] - moved.points[j]).norm();
                    prop_assert!((before - after).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn visibility_is_non_increasing_in_epsilon(seed in any::<u64>(), e1 in 0.001f64..0.05, e2 in 0.001f64..0.05) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_cloud(&mut rng, 60);
            let observed = random_cloud(&mut rng, 30);
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(knn_visibility(&model, &observed, hi) <= knn_visibility(&model, &observed, lo));
        }
    }
}
