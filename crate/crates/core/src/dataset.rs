//! Sample files, the dataset manifest, trajectory-coherent splitting and
//! occlusion annotation.
//!
//! Sample file layout, all little-endian:
//!
//! ```text
//! "VTS1"  object_id:u16  flags:u8  H:u16  W:u16  tactile_count:u32
//! pose: 7×f64 (qw qx qy qz tx ty tz)  occlusion:f64
//! rgb: H·W·3 bytes  depth: H·W f32  mask: H·W bytes  tactile: count×3 f32
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{knn_visibility, transform_cloud, PointCloud, Pose, Vec3};
use crate::simworld::{run_collection, Intrinsics, SimConfig};

pub const SAMPLE_MAGIC: &[u8; 3] = b"VTS";
pub const SAMPLE_VERSION: u8 = b'1';
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 4 + 2 + 1 + 2 + 2 + 4 + 7 * 8 + 8;
const FLAG_RANDOMIZED: u8 = 1;

/// Mask value written over pixels hidden by the synthetic occluder.
pub const MASK_OCCLUDER: u8 = 254;

/// Lower edges of the middle and top occlusion buckets.
pub const BUCKET_EDGES: [f64; 2] = [0.80, 0.85];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("unsupported sample format version {found:?}")]
    Version { found: u8 },
    #[error("split error: {0}")]
    Split(String),
    #[error("bad sample id {0:?}")]
    BadId(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Sim(#[from] crate::simworld::SimError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleId {
    pub object: u16,
    pub trajectory: u32,
    pub instance: u32,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "o{:02}-t{:04}-i{:04}", self.object, self.trajectory, self.instance)
    }
}

impl FromStr for SampleId {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DatasetError::BadId(s.to_string());
        let mut parts = s.split('-');
        let mut field = |prefix: char| -> Result<u32> {
            let p = parts.next().ok_or_else(bad)?;
            p.strip_prefix(prefix).and_then(|n| n.parse().ok()).ok_or_else(bad)
        };
        let object = field('o')?;
        let trajectory = field('t')?;
        let instance = field('i')?;
        if parts.next().is_some() || object > u16::MAX as u32 {
            return Err(bad());
        }
        Ok(SampleId { object: object as u16, trajectory, instance })
    }
}

impl SampleId {
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(format!("obj_{:02}", self.object))
            .join(format!("traj_{:04}", self.trajectory))
            .join(format!("inst_{:04}.vts", self.instance))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: SampleId,
    pub object_id: u16,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    /// z-depth in meters, 0 where nothing was hit.
    pub depth: Vec<f32>,
    pub mask: Vec<u8>,
    /// Contact points in the main camera frame.
    pub tactile: Vec<[f32; 3]>,
    pub gt_pose: Pose,
    pub domain_randomized: bool,
    pub occlusion: f64,
}

impl SampleRecord {
    pub fn tactile_cloud(&self) -> PointCloud {
        PointCloud::new(self.tactile.iter().map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect())
    }

    pub fn object_pixels(&self) -> Vec<usize> {
        let id = self.object_id as u8;
        (0..self.mask.len()).filter(|&i| self.mask[i] == id && self.depth[i] > 0.0).collect()
    }
}

pub fn encode_sample(r: &SampleRecord) -> Vec<u8> {
    let n = r.width * r.height;
    let mut out = Vec::with_capacity(HEADER_LEN + n * 8 + r.tactile.len() * 12);
    out.extend_from_slice(SAMPLE_MAGIC);
    out.push(SAMPLE_VERSION);
    out.extend_from_slice(&r.object_id.to_le_bytes());
    out.push(if r.domain_randomized { FLAG_RANDOMIZED } else { 0 });
    out.extend_from_slice(&(r.height as u16).to_le_bytes());
    out.extend_from_slice(&(r.width as u16).to_le_bytes());
    out.extend_from_slice(&(r.tactile.len() as u32).to_le_bytes());
    let t = r.gt_pose.translation;
    for v in r.gt_pose.wxyz().into_iter().chain([t.x, t.y, t.z, r.occlusion]) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&r.rgb);
    for d in &r.depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&r.mask);
    for p in &r.tactile {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DatasetError::Format {
                offset: self.pos,
                detail: format!("need {n} bytes for {what}, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_sample(bytes: &[u8], id: SampleId) -> Result<SampleRecord> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(3, "magic")?;
    if magic != SAMPLE_MAGIC {
        return Err(DatasetError::Format { offset: 0, detail: "bad magic".into() });
    }
    let version = r.u8("version")?;
    if version != SAMPLE_VERSION {
        return Err(DatasetError::Version { found: version });
    }
    let object_id = r.u16("object id")?;
    let flags = r.u8("flags")?;
    let height = r.u16("height")? as usize;
    let width = r.u16("width")? as usize;
    let count = r.u32("tactile count")? as usize;
    let pose_at = r.pos;
    let mut v = [0.0; 8];
    for x in &mut v {
        *x = r.f64("pose")?;
    }
    let q = Quaternion::new(v[0], v[1], v[2], v[3]);
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(DatasetError::Format { offset: pose_at, detail: format!("quaternion norm {}", q.norm()) });
    }
    let gt_pose = Pose::new(UnitQuaternion::new_unchecked(q), Vec3::new(v[4], v[5], v[6]));
    let n = width * height;
    let rgb = r.take(n * 3, "rgb")?.to_vec();
    let depth = (0..n).map(|_| r.f32("depth")).collect::<Result<Vec<_>>>()?;
    let mask = r.take(n, "mask")?.to_vec();
    let mut tactile = Vec::with_capacity(count);
    for _ in 0..count {
        tactile.push([r.f32("tactile")?, r.f32("tactile")?, r.f32("tactile")?]);
    }
    if r.pos != bytes.len() {
        return Err(DatasetError::Format { offset: r.pos, detail: "trailing bytes".into() });
    }
    Ok(SampleRecord {
        id,
        object_id,
        width,
        height,
        rgb,
        depth,
        mask,
        tactile,
        gt_pose,
        domain_randomized: flags & FLAG_RANDOMIZED != 0,
        occlusion: v[7],
    })
}

pub fn write_sample(record: &SampleRecord, root: &Path) -> Result<()> {
    let path = root.join(record.id.relative_path());
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&path, encode_sample(record)).map_err(io_err(&path))
}

pub fn read_sample(root: &Path, id: SampleId) -> Result<SampleRecord> {
    let path = root.join(id.relative_path());
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    decode_sample(&bytes, id)
}

/// Camera-frame points under the object's mask, with their pixel indices.
pub fn object_depth_points(record: &SampleRecord, camera: &Intrinsics) -> (PointCloud, Vec<usize>) {
    let pixels = record.object_pixels();
    let points = pixels
        .iter()
        .map(|&i| camera.backproject(i % record.width, i / record.width, record.depth[i] as f64))
        .collect();
    (PointCloud::new(points), pixels)
}

/// Fraction of the posed model not matched by any observed object depth point.
pub fn annotate_occlusion(record: &SampleRecord, model: &PointCloud, camera: &Intrinsics, epsilon: f64) -> f64 {
    let (observed, _) = object_depth_points(record, camera);
    knn_visibility(&transform_cloud(&record.gt_pose, model), &observed, epsilon)
}

/// Hides `fraction` of the object's pixels behind a straight-edged occluder
/// entering from a seeded direction. Erased pixels get depth 0, black color
/// and the occluder mask value. Larger fractions erase supersets.
pub fn controlled_erasure(record: &SampleRecord, fraction: f64, seed: u64) -> SampleRecord {
    let mut out = record.clone();
    let pixels = record.object_pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (c, s) = (angle.cos(), angle.sin());
    let mut keyed: Vec<(f64, usize)> =
        pixels.iter().map(|&i| (((i % record.width) as f64) * c + ((i / record.width) as f64) * s, i)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let count = ((fraction.clamp(0.0, 1.0) * pixels.len() as f64).round() as usize).min(pixels.len());
    for &(_, i) in &keyed[..count] {
        out.depth[i] = 0.0;
        out.mask[i] = MASK_OCCLUDER;
        out.rgb[i * 3..i * 3 + 3].copy_from_slice(&[0, 0, 0]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub object: u16,
    pub trajectory: u32,
    pub instance: u32,
    pub split: Split,
    pub randomized: bool,
    pub occlusion: f64,
    pub tactile_points: usize,
}

impl ManifestEntry {
    pub fn sample_id(&self) -> SampleId {
        SampleId { object: self.object, trajectory: self.trajectory, instance: self.instance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub camera: Intrinsics,
    pub visibility_epsilon: f64,
    pub model_point_count: usize,
    pub split_seed: u64,
    /// Sample count per object id.
    pub counts: BTreeMap<u16, usize>,
    pub samples: Vec<ManifestEntry>,
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl DatasetManifest {
    pub fn new(config_hash: String, camera: Intrinsics, visibility_epsilon: f64, model_point_count: usize) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            config_hash,
            camera,
            visibility_epsilon,
            model_point_count,
            split_seed: 0,
            counts: BTreeMap::new(),
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, r: &SampleRecord) {
        *self.counts.entry(r.object_id).or_insert(0) += 1;
        self.samples.push(ManifestEntry {
            id: r.id.to_string(),
            object: r.id.object,
            trajectory: r.id.trajectory,
            instance: r.id.instance,
            split: Split::Train,
            randomized: r.domain_randomized,
            occlusion: r.occlusion,
            tactile_points: r.tactile.len(),
        });
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.samples.iter().filter(|e| e.split == split).collect()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        fs::create_dir_all(root).map_err(io_err(root))?;
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest(format!("format version {} not supported", m.format_version)));
        }
        Ok(m)
    }
}

/// Assigns whole trajectories to train or test, 4:1 per object, seeded.
pub fn split_dataset(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let mut trajectories: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
    for e in &manifest.samples {
        let list = trajectories.entry(e.object).or_default();
        if !list.contains(&e.trajectory) {
            list.push(e.trajectory);
        }
    }
    if trajectories.is_empty() {
        return Err(DatasetError::Split("no samples".into()));
    }
    let mut test: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
    for (object, mut list) in trajectories {
        if list.len() < 5 {
            return Err(DatasetError::Split(format!("object {object} has {} trajectories, need at least 5", list.len())));
        }
        list.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::simworld::derive_seed(seed, object as u64, 0x5911));
        list.shuffle(&mut rng);
        let n_test = list.len() - (list.len() as f64 * 0.8).round() as usize;
        test.insert(object, list[..n_test].to_vec());
    }
    let mut out = manifest.clone();
    out.split_seed = seed;
    for e in &mut out.samples {
        e.split = if test[&e.object].contains(&e.trajectory) { Split::Test } else { Split::Train };
    }
    Ok(out)
}

/// Bucket index for an occlusion level: `< 0.80`, `[0.80, 0.85)`, `≥ 0.85`.
pub fn occlusion_bucket(level: f64) -> usize {
    if level >= BUCKET_EDGES[1] {
        2
    } else if level >= BUCKET_EDGES[0] {
        1
    } else {
        0
    }
}

pub fn bucket_by_occlusion<'a>(entries: &[&'a ManifestEntry]) -> [Vec<&'a ManifestEntry>; 3] {
    let mut out: [Vec<&ManifestEntry>; 3] = Default::default();
    for e in entries {
        out[occlusion_bucket(e.occlusion)].push(e);
    }
    out
}

/// On-disk dataset: sample tree plus manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self { root: root.to_path_buf(), manifest: DatasetManifest::load(root)? })
    }

    pub fn read(&self, entry: &ManifestEntry) -> Result<SampleRecord> {
        read_sample(&self.root, entry.sample_id())
    }

    pub fn entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.manifest.split(split)
    }

    /// Reads the given entries in order.
    pub fn read_all(&self, entries: &[&ManifestEntry]) -> Result<Vec<SampleRecord>> {
        use rayon::prelude::*;
        entries.par_iter().map(|e| self.read(e)).collect()
    }
}

/// Runs the collection for each object in turn, in the order given.
pub fn collect_objects(objects: &[u16], cfg: &SimConfig) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for &o in objects {
        out.extend(run_collection(o, cfg)?);
    }
    Ok(out)
}

/// Manifest for freshly collected records, already split.
pub fn build_manifest(records: &[SampleRecord], cfg: &SimConfig, config_text: &str, split_seed: u64) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::new(config_hash(config_text), cfg.camera, cfg.visibility_epsilon, cfg.model_point_count);
    for r in records {
        m.push(r);
    }
    split_dataset(&m, split_seed)
}

/// Writes every sample file and then the manifest.
pub fn write_dataset(records: &[SampleRecord], manifest: &DatasetManifest, root: &Path) -> Result<()> {
    use rayon::prelude::*;
    records.par_iter().try_for_each(|r| write_sample(r, root))?;
    manifest.save(root)
}

/// Moves the last `per_object` training trajectories of each object (by
/// trajectory index) into a validation list.
pub fn carve_validation<'a>(train: &[&'a ManifestEntry], per_object: usize) -> (Vec<&'a ManifestEntry>, Vec<&'a ManifestEntry>) {
    let mut trajectories: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
    for e in train {
        let list = trajectories.entry(e.object).or_default();
        if !list.contains(&e.trajectory) {
            list.push(e.trajectory);
        }
    }
    let held: BTreeMap<u16, Vec<u32>> = trajectories
        .into_iter()
        .map(|(o, mut list)| {
            list.sort_unstable();
            // Keep at least one trajectory for training.
            let k = per_object.min(list.len().saturating_sub(1));
            (o, list[list.len() - k..].to_vec())
        })
        .collect();
    train.iter().partition(|e| !held[&e.object].contains(&e.trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::primitives::{Primitive, Shape};
    use crate::simworld::{objects::sample_union_surface, raycast_render, Placed, Scene, SceneObject, Texture};
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn random_record(rng: &mut ChaCha8Rng, w: usize, h: usize) -> SampleRecord {
        let n = w * h;
        let q = UnitQuaternion::new_normalize(Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ));
        SampleRecord {
            id: SampleId { object: rng.gen_range(1..=11), trajectory: rng.gen_range(0..500), instance: rng.gen_range(0..200) },
            object_id: rng.gen_range(1..=11),
            width: w,
            height: h,
            rgb: (0..n * 3).map(|_| rng.gen()).collect(),
            depth: (0..n).map(|_| rng.gen_range(0.0f32..2.0)).collect(),
            mask: (0..n).map(|_| rng.gen()).collect(),
            tactile: (0..rng.gen_range(0..40)).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
            gt_pose: Pose::new(q, Vec3::new(rng.gen(), rng.gen(), rng.gen())),
            domain_randomized: rng.gen(),
            occlusion: rng.gen(),
        }
    }

    #[test]
    fn sample_id_format() {
        let id = SampleId { object: 3, trajectory: 12, instance: 5 };
        assert_eq!(id.to_string(), "o03-t0012-i0005");
        assert_eq!("o03-t0012-i0005".parse::<SampleId>().unwrap(), id);
        assert!("o03-t0012".parse::<SampleId>().is_err());
        assert!("x03-t0012-i0005".parse::<SampleId>().is_err());
    }

    #[test]
    fn file_round_trip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_record(&mut rng, 7, 5);
        let bytes = encode_sample(&r);
        assert_eq!(&bytes[..4], b"VTS1");
        assert_eq!(bytes.len(), HEADER_LEN + 35 * 8 + r.tactile.len() * 12);
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), r.object_id);
        assert_eq!(u16::from_le_bytes([bytes[7], bytes[8]]), 5);
        assert_eq!(u16::from_le_bytes([bytes[9], bytes[10]]), 7);
        assert_eq!(decode_sample(&bytes, r.id).unwrap(), r);

        let dir = tempfile::tempdir().unwrap();
        write_sample(&r, dir.path()).unwrap();
        assert_eq!(read_sample(dir.path(), r.id).unwrap(), r);
    }

    #[test]
    fn truncation_and_version_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bytes = encode_sample(&random_record(&mut rng, 4, 4));
        let id = SampleId { object: 1, trajectory: 0, instance: 0 };
        for cut in [0, 3, 10, HEADER_LEN, bytes.len() - 1] {
            match decode_sample(&bytes[..cut], id) {
                Err(DatasetError::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut v2 = bytes.clone();
        v2[3] = b'2';
        assert!(matches!(decode_sample(&v2, id), Err(DatasetError::Version { found: b'2' })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_sample(&extra, id), Err(DatasetError::Format { .. })));
    }

    fn manifest_with(objects: &[(u16, u32, u32)]) -> DatasetManifest {
        let mut m = DatasetManifest::new("h".into(), Intrinsics::desk(), 0.005, 500);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(object, trajs, insts) in objects {
            for t in 0..trajs {
                for i in 0..insts {
                    let mut r = random_record(&mut rng, 1, 1);
                    r.id = SampleId { object, trajectory: t, instance: i };
                    r.object_id = object;
                    m.push(&r);
                }
            }
        }
        m
    }

    #[test]
    fn split_is_four_to_one_by_trajectory() {
        let m = manifest_with(&[(1, 20, 10), (2, 20, 10)]);
        assert_eq!(m.counts[&1], 200);
        let s = split_dataset(&m, 11).unwrap();
        for object in [1u16, 2] {
            let train = s.samples.iter().filter(|e| e.object == object && e.split == Split::Train).count();
            assert_eq!(train, 160);
        }
        for e in &s.samples {
            let same_traj = s.samples.iter().filter(|o| o.object == e.object && o.trajectory == e.trajectory);
            assert!(same_traj.into_iter().all(|o| o.split == e.split));
        }
        assert_eq!(split_dataset(&m, 11).unwrap(), s);
        assert_ne!(split_dataset(&m, 12).unwrap().samples, s.samples);
        assert!(matches!(split_dataset(&manifest_with(&[(1, 4, 3)]), 1), Err(DatasetError::Split(_))));
    }

    #[test]
    fn paper_scale_split_counts() {
        let m = manifest_with(&[(1, 200, 100)]);
        let s = split_dataset(&m, 5).unwrap();
        assert_eq!(s.split(Split::Train).len(), 16000);
        assert_eq!(s.split(Split::Test).len(), 4000);
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let m = split_dataset(&manifest_with(&[(4, 5, 2)]), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn validation_takes_last_trajectories_per_object() {
        let m = split_dataset(&manifest_with(&[(1, 10, 2), (2, 5, 1)]), 3).unwrap();
        let train = m.split(Split::Train);
        let (keep, val) = carve_validation(&train, 1);
        assert_eq!(keep.len() + val.len(), train.len());
        assert_eq!(val.iter().filter(|e| e.object == 1).count(), 2);
        assert_eq!(val.iter().filter(|e| e.object == 2).count(), 1);
        for v in &val {
            assert!(keep.iter().all(|k| k.object != v.object || k.trajectory < v.trajectory));
        }
        let (keep0, val0) = carve_validation(&train, 0);
        assert_eq!((keep0.len(), val0.len()), (train.len(), 0));
        let (keep_all, _) = carve_validation(&train, 99);
        assert!(keep_all.iter().any(|e| e.object == 2));
    }

    #[test]
    fn generated_dataset_reads_back() {
        let cfg = SimConfig { trajectories: 5, instances: 1, model_point_count: 100, ..Default::default() };
        let recs = collect_objects(&[3], &cfg).unwrap();
        let m = build_manifest(&recs, &cfg, "cfg", 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&recs, &m, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let all: Vec<&ManifestEntry> = ds.manifest.samples.iter().collect();
        assert_eq!(ds.read_all(&all).unwrap(), recs);
        assert!(matches!(collect_objects(&[0], &cfg), Err(DatasetError::Sim(_))));
    }

    #[test]
    fn bucket_examples() {
        let mut m = manifest_with(&[(1, 1, 4)]);
        for (e, l) in m.samples.iter_mut().zip([0.5, 0.82, 0.9, 0.80]) {
            e.occlusion = l;
        }
        let refs: Vec<&ManifestEntry> = m.samples.iter().collect();
        let b = bucket_by_occlusion(&refs);
        assert_eq!([b[0].len(), b[1].len(), b[2].len()], [1, 2, 1]);
        assert_eq!(occlusion_bucket(0.85), 2);
        assert_eq!(occlusion_bucket(0.1), 0);
    }

    fn sphere_record(camera: &Intrinsics, radius: f64, distance: f64) -> (SampleRecord, PointCloud) {
        let primitives = vec![Primitive::at_origin(Shape::Sphere { radius })];
        let model = sample_union_surface(&primitives, 3000, 4);
        let obj = SceneObject { id: 1, name: "sphere", primitives, texture: Texture::Uniform([0.5; 3]), marker: None, model_cloud: model.clone() };
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, distance));
        let out = raycast_render(&Scene { object: Some(Placed { object: &obj, pose }), ..Default::default() }, camera);
        let rec = SampleRecord {
            id: SampleId { object: 1, trajectory: 0, instance: 0 },
            object_id: 1,
            width: out.width,
            height: out.height,
            rgb: out.rgb,
            depth: out.depth,
            mask: out.mask,
            tactile: vec![],
            gt_pose: pose,
            domain_randomized: false,
            occlusion: 0.0,
        };
        (rec, model)
    }

    #[test]
    fn frontal_sphere_is_about_half_occluded() {
        let cam = Intrinsics::paper_scale();
        let (r, d) = (0.03, 0.5);
        let (rec, model) = sphere_record(&cam, r, d);
        let level = annotate_occlusion(&rec, &model, &cam, 0.0015);
        // Visible cap from distance d covers (1 - r/d)/2 of the sphere.
        let oracle = 1.0 - (1.0 - r / d) / 2.0;
        assert!((level - oracle).abs() < 0.04, "{level} vs {oracle}");

        let (cloud, _) = object_depth_points(&rec, &cam);
        for p in &cloud.points {
            assert!(((p - rec.gt_pose.translation).norm() - r).abs() < 1e-6);
        }

        let mut blank = rec.clone();
        blank.mask.iter_mut().for_each(|m| *m = 0);
        assert_eq!(annotate_occlusion(&blank, &model, &cam, 0.0015), 1.0);
    }

    #[test]
    fn erasure_is_monotone_and_deterministic() {
        let cam = Intrinsics::desk();
        let (rec, model) = sphere_record(&cam, 0.04, 0.4);
        let total = rec.object_pixels().len();
        let mut last = 0.0;
        for f in [0.0, 0.2, 0.5, 0.7, 0.9, 1.0] {
            let e = controlled_erasure(&rec, f, 9);
            assert_eq!(e, controlled_erasure(&rec, f, 9));
            assert_eq!(e.object_pixels().len(), total - (f * total as f64).round() as usize);
            let level = annotate_occlusion(&e, &model, &cam, 0.005);
            assert!(level >= last);
            last = level;
        }
        assert_eq!(last, 1.0);
    }

    proptest! {
        #[test]
        fn random_records_round_trip(seed in any::<u64>(), w in 1usize..12, h in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_record(&mut rng, w, h);
            prop_assert_eq!(decode_sample(&encode_sample(&r), r.id).unwrap(), r);
        }
    }
}
