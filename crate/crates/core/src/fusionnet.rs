//! Dense-fusion pose network with a visual (RGB-D) channel, a tactile
//! channel, a pooled global feature and per-point pose heads.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{object_depth_points, SampleId, SampleRecord};
use crate::geometry::{nearest_index, sample_indices, Pose, Vec3};
use crate::simworld::Intrinsics;
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor, TensorError, Var};

/// Lower clamp on confidences before they enter a logarithm.
pub const CONFIDENCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("sample {0} has no object pixels")]
    NoDetection(SampleId),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint tensor {name}: {detail}")]
    Mismatch { name: String, detail: String },
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Tactile point i reads the embedding of its nearest sampled depth point.
    Nearest,
    /// Tactile point i reads depth embedding i (mod n).
    Index,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NonSiamese,
    NoGlobal,
    TactileOnly,
    VisionOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Full, Ablation::NonSiamese, Ablation::NoGlobal, Ablation::TactileOnly, Ablation::VisionOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NonSiamese => "non-siamese",
            Ablation::NoGlobal => "no-global",
            Ablation::TactileOnly => "tactile-only",
            Ablation::VisionOnly => "vision-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub n_points: usize,
    pub color_hidden: usize,
    pub color_embed_dim: usize,
    pub geom_hidden: usize,
    pub geom_embed_dim: usize,
    pub global_dim: usize,
    pub head_hidden: usize,
    pub visual_on: bool,
    pub tactile_on: bool,
    pub global_on: bool,
    pub siamese_rotation: bool,
    /// Tactile points fed to the network; `None` uses `n_points`.
    pub tactile_point_budget: Option<usize>,
    pub pairing: Pairing,
    /// Multiplier applied to centered coordinates before the point networks.
    pub coord_scale: f64,
    /// Meters per unit of raw translation-head output.
    pub offset_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_points: 128,
            color_hidden: 16,
            color_embed_dim: 32,
            geom_hidden: 32,
            geom_embed_dim: 32,
            global_dim: 64,
            head_hidden: 64,
            visual_on: true,
            tactile_on: true,
            global_on: true,
            siamese_rotation: true,
            tactile_point_budget: None,
            pairing: Pairing::Nearest,
            coord_scale: 10.0,
            offset_scale: 0.05,
        }
    }
}

impl NetworkConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::Full => {}
            Ablation::NonSiamese => self.siamese_rotation = false,
            Ablation::NoGlobal => self.global_on = false,
            Ablation::TactileOnly => self.visual_on = false,
            Ablation::VisionOnly => self.tactile_on = false,
        }
        self
    }

    pub fn tactile_points(&self) -> usize {
        self.tactile_point_budget.unwrap_or(self.n_points)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.visual_on && !self.tactile_on {
            return Err(NetError::Config("at least one of visual_on, tactile_on must be set".into()));
        }
        let dims = [
            self.n_points,
            self.color_hidden,
            self.color_embed_dim,
            self.geom_hidden,
            self.geom_embed_dim,
            self.global_dim,
            self.head_hidden,
            self.tactile_points(),
        ];
        if dims.contains(&0) {
            return Err(NetError::Config("all dimensions must be at least 1".into()));
        }
        if self.siamese_rotation && self.visual_on && self.tactile_on && self.color_embed_dim != self.geom_embed_dim {
            return Err(NetError::Config("a shared rotation head needs color_embed_dim == geom_embed_dim".into()));
        }
        Ok(())
    }

    fn channel_width(&self, channel: Channel) -> usize {
        let base = match channel {
            Channel::Visual => self.color_embed_dim + self.geom_embed_dim,
            Channel::Tactile if self.visual_on => 2 * self.geom_embed_dim,
            Channel::Tactile => self.geom_embed_dim,
        };
        base + if self.global_on { self.global_dim } else { 0 }
    }

    fn global_input(&self) -> usize {
        let mut w = 0;
        if self.visual_on {
            w += self.color_embed_dim + self.geom_embed_dim;
        }
        if self.tactile_on {
            w += self.geom_embed_dim;
        }
        w
    }

    fn channels(&self) -> Vec<Channel> {
        let mut c = Vec::new();
        if self.visual_on {
            c.push(Channel::Visual);
        }
        if self.tactile_on {
            c.push(Channel::Tactile);
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Visual,
    Tactile,
}

impl Channel {
    fn tag(&self) -> &'static str {
        match self {
            Channel::Visual => "vis",
            Channel::Tactile => "tac",
        }
    }
}

/// Object crop and masked depth points extracted from one sample, kept
/// for repeated random point sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: SampleId,
    pub object_id: u16,
    pub crop_w: usize,
    pub crop_h: usize,
    /// Crop colors, channel-major `3×h×w` bytes.
    pub crop: Vec<u8>,
    /// Masked depth points in the camera frame.
    pub points: Vec<Vec3>,
    /// Crop-relative pixel index of each depth point.
    pub pixels: Vec<usize>,
    pub tactile: Vec<Vec3>,
    pub gt_pose: Pose,
    pub occlusion: f64,
}

/// Crops the object's bounding box and back-projects the masked depth.
pub fn crop_and_mask(record: &SampleRecord, camera: &Intrinsics) -> Result<PreparedSample> {
    let (cloud, pixels) = object_depth_points(record, camera);
    if pixels.is_empty() {
        return Err(NetError::NoDetection(record.id));
    }
    let w = record.width;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &i in &pixels {
        let (x, y) = (i % w, i / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut crop = vec![0u8; 3 * cw * ch];
    for y in 0..ch {
        for x in 0..cw {
            let src = ((y0 + y) * w + x0 + x) * 3;
            for c in 0..3 {
                crop[(c * ch + y) * cw + x] = record.rgb[src + c];
            }
        }
    }
    let local = pixels.iter().map(|&i| (i / w - y0) * cw + (i % w - x0)).collect();
    Ok(PreparedSample {
        id: record.id,
        object_id: record.object_id,
        crop_w: cw,
        crop_h: ch,
        crop,
        points: cloud.points,
        pixels: local,
        tactile: record.tactile_cloud().points,
        gt_pose: record.gt_pose,
        occlusion: record.occlusion,
    })
}

/// One forward pass worth of sampled inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub crop_w: usize,
    pub crop_h: usize,
    /// `3×h×w`, scaled to roughly `[-0.5, 0.5]`.
    pub crop: Vec<f64>,
    pub pixel_rows: Vec<usize>,
    pub depth: Vec<Vec3>,
    pub tactile: Vec<Vec3>,
    /// False when the sample had no contacts and `tactile` is a stand-in.
    pub tactile_valid: bool,
    pub pair: Vec<usize>,
    pub center: Vec3,
}

impl NetInput {
    /// Draws `n` depth points (with their pixels) and the tactile budget.
    pub fn sample<R: Rng>(s: &PreparedSample, cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let idx = sample_indices(s.points.len(), cfg.n_points, rng).map_err(|_| NetError::NoDetection(s.id))?;
        let depth: Vec<Vec3> = idx.iter().map(|&i| s.points[i]).collect();
        let pixel_rows = idx.iter().map(|&i| s.pixels[i]).collect();
        let m = cfg.tactile_points();
        let depth_centroid = depth.iter().sum::<Vec3>() / depth.len() as f64;
        let (tactile, tactile_valid) = if s.tactile.is_empty() {
            (vec![depth_centroid; m], false)
        } else {
            let t = sample_indices(s.tactile.len(), m, rng).expect("non-empty tactile cloud");
            (t.iter().map(|&i| s.tactile[i]).collect::<Vec<_>>(), true)
        };
        let pair = match cfg.pairing {
            Pairing::Nearest => tactile.iter().map(|p| nearest_index(&depth, p).expect("depth sampled")).collect(),
            Pairing::Index => (0..m).map(|i| i % depth.len()).collect(),
        };
        let center = match (cfg.visual_on, cfg.tactile_on && tactile_valid) {
            (true, true) => (depth.iter().sum::<Vec3>() + tactile.iter().sum::<Vec3>()) / (depth.len() + m) as f64,
            (false, _) => tactile.iter().sum::<Vec3>() / m as f64,
            (true, false) => depth_centroid,
        };
        Ok(Self {
            crop_w: s.crop_w,
            crop_h: s.crop_h,
            crop: s.crop.iter().map(|&b| b as f64 / 255.0 - 0.5).collect(),
            pixel_rows,
            depth,
            tactile,
            tactile_valid,
            pair,
            center,
        })
    }

    fn centered(&self, points: &[Vec3], scale: f64) -> Vec<f64> {
        points.iter().flat_map(|p| ((p - self.center) * scale).iter().copied().collect::<Vec<_>>()).collect()
    }
}

/// Differentiable outputs: rows are visual estimates first, then tactile.
#[derive(Debug, Clone, Copy)]
pub struct Estimates {
    /// `N×4` unit quaternions (w, x, y, z).
    pub q: Var,
    /// `N×3` translations in meters.
    pub t: Var,
    /// `N×1` confidences in `[1e-6, 1)`.
    pub c: Var,
    pub n_visual: usize,
    pub n_tactile: usize,
}

/// Intermediate tensors exposed for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct Trace {
    pub visual_features: Option<Var>,
    pub tactile_features: Option<Var>,
    pub global: Option<Var>,
    pub color_map: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerPointEstimate {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub confidence: f64,
    pub channel: Channel,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("positive shape").with_grad()
}

fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).expect("positive shape").with_grad()
}

struct Builder<'a> {
    params: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    /// He-uniform hidden layer.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let w = uniform(vec![fan_in, fan_out], (6.0 / fan_in as f64).sqrt(), self.rng);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), zeros(vec![fan_out]));
    }

    /// Smaller initialization for layers producing pose outputs.
    fn output(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: Vec<f64>) {
        let w = uniform(vec![fan_in, fan_out], 0.5 / (fan_in as f64).sqrt(), self.rng);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::new(vec![fan_out], bias).expect("bias").with_grad());
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) {
        let w = uniform(vec![c_out, c_in, 3, 3], (6.0 / (9 * c_in) as f64).sqrt(), self.rng);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), zeros(vec![c_out]));
    }
}

struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    fn linear(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.get(&format!("{name}.w")))?;
        Ok(tape.add_row(y, self.get(&format!("{name}.b")))?)
    }

    fn mlp2(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, &format!("{name}.l1"), x)?;
        let h = tape.relu(h);
        let o = self.linear(tape, &format!("{name}.l2"), h)?;
        Ok(tape.relu(o))
    }

    /// Hidden ReLU layer followed by a linear output layer.
    fn head(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, &format!("{name}.l1"), x)?;
        let h = tape.relu(h);
        self.linear(tape, &format!("{name}.l2"), h)
    }
}

impl Network {
    /// Fresh network with seeded initialization.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let mut b = Builder { params: ParamStore::new(), rng: &mut rng };
        if c.visual_on {
            b.conv("color.c1", 3, c.color_hidden);
            b.conv("color.c2", c.color_hidden, c.color_embed_dim);
            b.linear("depth.l1", 3, c.geom_hidden);
            b.linear("depth.l2", c.geom_hidden, c.geom_embed_dim);
        }
        if c.tactile_on {
            b.linear("tactile.l1", 3, c.geom_hidden);
            b.linear("tactile.l2", c.geom_hidden, c.geom_embed_dim);
        }
        if c.global_on {
            b.linear("global.l1", c.global_input(), c.global_dim);
            b.linear("global.l2", c.global_dim, c.global_dim);
        }
        let shared = c.siamese_rotation && c.visual_on && c.tactile_on;
        for ch in c.channels() {
            let width = c.channel_width(ch);
            let tag = ch.tag();
            b.linear(&format!("head.{tag}.trans.l1"), width, c.head_hidden);
            b.output(&format!("head.{tag}.trans.l2"), c.head_hidden, 3, vec![0.0; 3]);
            let rot = if shared { "head.rot".to_string() } else { format!("head.{tag}.rot") };
            if b.params.get(&format!("{rot}.l1.w")).is_none() {
                b.linear(&format!("{rot}.l1"), width, c.head_hidden);
                b.output(&format!("{rot}.l2"), c.head_hidden, 4, vec![1.0, 0.0, 0.0, 0.0]);
            }
            b.linear(&format!("head.{tag}.conf.l1"), width, c.head_hidden);
            b.output(&format!("head.{tag}.conf.l2"), c.head_hidden, 1, vec![0.0]);
        }
        let params = b.params;
        Ok(Self { config, params })
    }

    fn rotation_name(&self, ch: Channel) -> String {
        let c = &self.config;
        if c.siamese_rotation && c.visual_on && c.tactile_on {
            "head.rot".into()
        } else {
            format!("head.{}.rot", ch.tag())
        }
    }

    /// Records every parameter on `tape` (trainable when `trainable`) and
    /// returns the vars in parameter order.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> (Bound, Vec<Var>) {
        let mut vars = HashMap::new();
        let mut order = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let v = if trainable {
                tape.param(t)
            } else {
                tape.constant(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor")
            };
            vars.insert(name.to_string(), v);
            order.push(v);
        }
        (Bound { vars }, order)
    }

    /// Forward pass; returns the estimates, a trace of intermediate
    /// features and the parameter vars in [`ParamStore`] order.
    pub fn forward(&self, tape: &mut Tape, input: &NetInput, trainable: bool) -> Result<(Estimates, Trace, Vec<Var>)> {
        let c = &self.config;
        let (bound, order) = self.bind(tape, trainable);
        let n = input.depth.len();
        let m = input.tactile.len();

        let mut color_rows = None;
        let mut depth_emb = None;
        let mut color_map = None;
        if c.visual_on {
            let img = tape.constant(vec![3, input.crop_h, input.crop_w], input.crop.clone())?;
            let h = tape.conv2d(img, bound.get("color.c1.w"), 1, 1)?;
            let h = tape.add_channel(h, bound.get("color.c1.b"))?;
            let h = tape.relu(h);
            let h = tape.conv2d(h, bound.get("color.c2.w"), 1, 1)?;
            let h = tape.add_channel(h, bound.get("color.c2.b"))?;
            let map = tape.relu(h);
            color_map = Some(map);
            let flat = tape.reshape(map, vec![c.color_embed_dim, input.crop_h * input.crop_w])?;
            let per_pixel = tape.transpose(flat)?;
            color_rows = Some(tape.gather_rows(per_pixel, &input.pixel_rows)?);
            let pts = tape.constant(vec![n, 3], input.centered(&input.depth, c.coord_scale))?;
            depth_emb = Some(bound.mlp2(tape, "depth", pts)?);
        }
        let mut tactile_emb = None;
        let mut paired_depth = None;
        if c.tactile_on {
            let pts = tape.constant(vec![m, 3], input.centered(&input.tactile, c.coord_scale))?;
            let mut e = bound.mlp2(tape, "tactile", pts)?;
            if !input.tactile_valid {
                let zero = tape.constant(vec![m, c.geom_embed_dim], vec![0.0; m * c.geom_embed_dim])?;
                e = tape.mul(e, zero)?;
            }
            tactile_emb = Some(e);
            if let Some(d) = depth_emb {
                paired_depth = Some(tape.gather_rows(d, &input.pair)?);
            }
        }

        let global = if c.global_on {
            // Zero-padded rows so that every row has the full concat layout.
            let mut rows = Vec::new();
            if let (Some(cr), Some(de)) = (color_rows, depth_emb) {
                let mut parts = vec![cr, de];
                if c.tactile_on {
                    parts.push(tape.constant(vec![n, c.geom_embed_dim], vec![0.0; n * c.geom_embed_dim])?);
                }
                rows.push(tape.concat(&parts, 1)?);
            }
            if let Some(te) = tactile_emb {
                let mut parts = Vec::new();
                if let Some(pd) = paired_depth {
                    parts.push(tape.constant(vec![m, c.color_embed_dim], vec![0.0; m * c.color_embed_dim])?);
                    parts.push(pd);
                }
                parts.push(te);
                rows.push(if parts.len() == 1 { te } else { tape.concat(&parts, 1)? });
            }
            let all = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
            let h = bound.mlp2(tape, "global", all)?;
            Some(tape.mean_axis(h, 0)?)
        } else {
            None
        };

        let mut qs = Vec::new();
        let mut ts = Vec::new();
        let mut cs = Vec::new();
        let mut trace = Trace { visual_features: None, tactile_features: None, global, color_map };
        for ch in c.channels() {
            let (mut parts, anchors, rows) = match ch {
                Channel::Visual => (vec![color_rows.unwrap(), depth_emb.unwrap()], &input.depth, n),
                Channel::Tactile => {
                    let mut p = Vec::new();
                    p.push(tactile_emb.unwrap());
                    if let Some(pd) = paired_depth {
                        p.push(pd);
                    }
                    (p, &input.tactile, m)
                }
            };
            if let Some(g) = global {
                parts.push(tape.broadcast_rows(g, rows)?);
            }
            let feat = tape.concat(&parts, 1)?;
            match ch {
                Channel::Visual => trace.visual_features = Some(feat),
                Channel::Tactile => trace.tactile_features = Some(feat),
            }
            let tag = ch.tag();
            let raw_t = bound.head(tape, &format!("head.{tag}.trans"), feat)?;
            let offset = tape.scale(raw_t, c.offset_scale);
            let anchor_data = anchors.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
            let anchor = tape.constant(vec![rows, 3], anchor_data)?;
            ts.push(tape.add(anchor, offset)?);
            let raw_q = bound.head(tape, &self.rotation_name(ch), feat)?;
            qs.push(tape.normalize_rows(raw_q)?);
            let raw_c = bound.head(tape, &format!("head.{tag}.conf"), feat)?;
            let conf = tape.sigmoid(raw_c);
            cs.push(tape.clamp_min(conf, CONFIDENCE_FLOOR));
        }
        let cat = |tape: &mut Tape, v: Vec<Var>| -> Result<Var> {
            Ok(if v.len() == 1 { v[0] } else { tape.concat(&v, 0)? })
        };
        let q = cat(tape, qs)?;
        let t = cat(tape, ts)?;
        let conf = cat(tape, cs)?;
        let est = Estimates {
            q,
            t,
            c: conf,
            n_visual: if c.visual_on { n } else { 0 },
            n_tactile: if c.tactile_on { m } else { 0 },
        };
        Ok((est, trace, order))
    }

    /// Per-point estimates without recording gradients.
    pub fn estimate(&self, input: &NetInput) -> Result<Vec<PerPointEstimate>> {
        let mut tape = Tape::new();
        let (est, _, _) = self.forward(&mut tape, input, false)?;
        Ok(read_estimates(&tape, &est))
    }

    pub fn predict(&self, input: &NetInput) -> Result<PerPointEstimate> {
        select_pose(&self.estimate(input)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_checkpoint(path, &self.params)?)
    }

    /// Loads parameters for `config`, insisting on the exact tensor set
    /// and shapes the config implies.
    pub fn load(config: NetworkConfig, path: &Path) -> Result<Self> {
        let loaded = read_checkpoint(path)?;
        Self::from_params(config, loaded)
    }

    pub fn from_params(config: NetworkConfig, loaded: ParamStore) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        for (name, t) in template.params.iter() {
            match loaded.get(name) {
                None => return Err(NetError::Mismatch { name: name.into(), detail: "missing from checkpoint".into() }),
                Some(l) if l.shape() != t.shape() => {
                    return Err(NetError::Mismatch {
                        name: name.into(),
                        detail: format!("shape {:?} in checkpoint, config needs {:?}", l.shape(), t.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = loaded.names().into_iter().find(|n| template.params.get(n).is_none()) {
            return Err(NetError::Mismatch { name: extra.into(), detail: "not used by this config".into() });
        }
        let mut params = ParamStore::new();
        for name in template.params.names() {
            params.insert(name, loaded.get(name).unwrap().clone().with_grad());
        }
        Ok(Self { config, params })
    }
}

pub fn read_estimates(tape: &Tape, est: &Estimates) -> Vec<PerPointEstimate> {
    let (q, t, c) = (tape.value(est.q), tape.value(est.t), tape.value(est.c));
    (0..est.n_visual + est.n_tactile)
        .map(|i| {
            let (channel, index) = if i < est.n_visual { (Channel::Visual, i) } else { (Channel::Tactile, i - est.n_visual) };
            PerPointEstimate {
                rotation: [q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]],
                translation: [t[3 * i], t[3 * i + 1], t[3 * i + 2]],
                confidence: c[i],
                channel,
                index,
            }
        })
        .collect()
}

/// Highest-confidence estimate; ties go to the earliest in
/// (channel, index) order with visual before tactile.
pub fn select_pose(estimates: &[PerPointEstimate]) -> Result<PerPointEstimate> {
    let mut best: Option<&PerPointEstimate> = None;
    for e in estimates {
        let better = match best {
            None => true,
            Some(b) => e.confidence > b.confidence || (e.confidence == b.confidence && (e.channel, e.index) < (b.channel, b.index)),
        };
        if better {
            best = Some(e);
        }
    }
    best.copied().ok_or_else(|| NetError::Tensor(TensorError::Contract("select_pose needs at least one estimate".into())))
}

impl PerPointEstimate {
    pub fn pose(&self) -> Pose {
        let q = nalgebra::Quaternion::new(self.rotation[0], self.rotation[1], self.rotation[2], self.rotation[3]);
        Pose::new(nalgebra::UnitQuaternion::new_normalize(q), Vec3::from(self.translation))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{run_collection, SimConfig};

    pub(crate) fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            n_points: 8,
            color_hidden: 4,
            color_embed_dim: 6,
            geom_hidden: 5,
            geom_embed_dim: 6,
            global_dim: 7,
            head_hidden: 8,
            tactile_point_budget: Some(5),
            ..Default::default()
        }
    }

    pub(crate) fn prepared(object: u16) -> Vec<PreparedSample> {
        let cfg = SimConfig { trajectories: 5, instances: 2, model_point_count: 100, ..Default::default() };
        run_collection(object, &cfg).unwrap().iter().map(|r| crop_and_mask(r, &cfg.camera).unwrap()).collect()
    }

    fn input(s: &PreparedSample, cfg: &NetworkConfig, seed: u64) -> NetInput {
        NetInput::sample(s, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn crop_of_single_pixel_mask() {
        let mut rec = crate::dataset::SampleRecord {
            id: SampleId { object: 2, trajectory: 0, instance: 0 },
            object_id: 2,
            width: 4,
            height: 3,
            rgb: (0..36).map(|v| v as u8).collect(),
            depth: vec![0.0; 12],
            mask: vec![0; 12],
            tactile: vec![],
            gt_pose: Pose::identity(),
            domain_randomized: false,
            occlusion: 0.0,
        };
        assert!(matches!(crop_and_mask(&rec, &Intrinsics::desk()), Err(NetError::NoDetection(_))));
        rec.mask[6] = 2;
        rec.depth[6] = 0.5;
        let cam = Intrinsics { width: 4, height: 3, fx: 4.0, fy: 4.0, cx: 2.0, cy: 1.5 };
        let p = crop_and_mask(&rec, &cam).unwrap();
        assert_eq!((p.crop_w, p.crop_h, p.points.len()), (1, 1, 1));
        assert_eq!(p.crop, vec![18, 19, 20]);
        assert_eq!(cam.project(&p.points[0]), Some((2, 1)));
    }

    #[test]
    fn every_ablation_builds_and_runs_at_two_sizes() {
        let samples = prepared(4);
        for ablation in Ablation::ALL {
            for (n, big) in [(8, false), (128, true)] {
                let base = if big { NetworkConfig::default() } else { tiny_config() };
                let cfg = NetworkConfig { n_points: n, ..base }.with_ablation(ablation);
                let net = Network::new(cfg.clone(), 1).unwrap();
                let inp = input(&samples[0], &cfg, 2);
                let mut tape = Tape::new();
                let (est, _, vars) = net.forward(&mut tape, &inp, true).unwrap();
                let expected = if cfg.visual_on { n } else { 0 } + if cfg.tactile_on { cfg.tactile_points() } else { 0 };
                assert_eq!(tape.shape(est.q), &[expected, 4]);
                let s = tape.sum(est.t);
                tape.backward(s).unwrap();
                assert_eq!(vars.len(), net.params.len());
                let qv = tape.value(est.q);
                for row in qv.chunks(4) {
                    let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn full_network_emits_two_estimates_per_point() {
        let cfg = NetworkConfig::default();
        let net = Network::new(cfg.clone(), 3).unwrap();
        let est = net.estimate(&input(&prepared(2)[0], &cfg, 1)).unwrap();
        assert_eq!(est.len(), 256);
        assert!(est.iter().all(|e| e.confidence > 0.0 && e.confidence < 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig { visual_on: false, tactile_on: false, ..Default::default() }.validate().is_err());
        assert!(NetworkConfig { geom_embed_dim: 0, ..Default::default() }.validate().is_err());
        assert!(NetworkConfig { color_embed_dim: 16, ..Default::default() }.validate().is_err());
        assert!(NetworkConfig { color_embed_dim: 16, siamese_rotation: false, ..Default::default() }.validate().is_ok());
        assert_eq!(Ablation::parse("no-global"), Some(Ablation::NoGlobal));
        assert_eq!(Ablation::parse("bogus"), None);
    }

    #[test]
    fn point_embedding_is_permutation_equivariant() {
        let cfg = tiny_config().with_ablation(Ablation::NoGlobal);
        let net = Network::new(cfg.clone(), 5).unwrap();
        let s = &prepared(3)[0];
        let a = input(s, &cfg, 9);
        let mut b = a.clone();
        let perm: Vec<usize> = (0..8).rev().collect();
        b.depth = perm.iter().map(|&i| a.depth[i]).collect();
        b.pixel_rows = perm.iter().map(|&i| a.pixel_rows[i]).collect();
        b.pair = a.pair.iter().map(|&j| perm.iter().position(|&p| p == j).unwrap()).collect();
        let (ea, eb) = (net.estimate(&a).unwrap(), net.estimate(&b).unwrap());
        for (k, &i) in perm.iter().enumerate() {
            for d in 0..3 {
                assert!((eb[k].translation[d] - ea[i].translation[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_feature_is_invariant_to_point_order_and_selection_follows() {
        let cfg = tiny_config();
        let net = Network::new(cfg.clone(), 6).unwrap();
        let s = &prepared(5)[1];
        let a = input(s, &cfg, 4);
        let mut b = a.clone();
        b.depth.reverse();
        b.pixel_rows.reverse();
        b.pair = a.pair.iter().map(|&j| 7 - j).collect();
        b.tactile.reverse();
        b.pair.reverse();
        let run = |x: &NetInput| {
            let mut tape = Tape::new();
            let (est, tr, _) = net.forward(&mut tape, x, false).unwrap();
            (tape.value(tr.global.unwrap()).to_vec(), read_estimates(&tape, &est))
        };
        let ((ga, ea), (gb, eb)) = (run(&a), run(&b));
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-12);
        }
        let (sa, sb) = (select_pose(&ea).unwrap(), select_pose(&eb).unwrap());
        for d in 0..3 {
            assert!((sa.translation[d] - sb.translation[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn tactile_reaches_visual_features_only_through_global() {
        let s = &prepared(6)[0];
        for global_on in [true, false] {
            let cfg = NetworkConfig { global_on, ..tiny_config() };
            let net = Network::new(cfg.clone(), 8).unwrap();
            let a = input(s, &cfg, 3);
            let mut b = a.clone();
            b.tactile.iter_mut().for_each(|p| *p = Vec3::zeros());
            b.center = a.center;
            let feats = |x: &NetInput| {
                let mut tape = Tape::new();
                let (_, tr, _) = net.forward(&mut tape, x, false).unwrap();
                tape.value(tr.visual_features.unwrap()).to_vec()
            };
            let (fa, fb) = (feats(&a), feats(&b));
            let width = cfg.color_embed_dim + cfg.geom_embed_dim + if global_on { cfg.global_dim } else { 0 };
            let local = cfg.color_embed_dim + cfg.geom_embed_dim;
            let mut global_changed = false;
            for (i, (x, y)) in fa.iter().zip(&fb).enumerate() {
                if i % width < local {
                    assert_eq!(x, y);
                } else if x != y {
                    global_changed = true;
                }
            }
            assert_eq!(global_changed, global_on);
        }
    }

    #[test]
    fn color_embedding_is_shift_equivariant_in_the_interior() {
        let cfg = tiny_config();
        let net = Network::new(cfg.clone(), 2).unwrap();
        let s = &prepared(1)[0];
        let mut a = input(s, &cfg, 1);
        let (w, h) = (12usize, 10usize);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let big: Vec<f64> = (0..3 * h * (w + 1)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let crop_at = |dx: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        out.push(big[(c * h + y) * (w + 1) + x + dx]);
                    }
                }
            }
            out
        };
        a.crop_w = w;
        a.crop_h = h;
        a.pixel_rows = vec![0; 8];
        let map = |crop: Vec<f64>| {
            let mut inp = a.clone();
            inp.crop = crop;
            let mut tape = Tape::new();
            let (_, tr, _) = net.forward(&mut tape, &inp, false).unwrap();
            tape.value(tr.color_map.unwrap()).to_vec()
        };
        let (m0, m1) = (map(crop_at(0)), map(crop_at(1)));
        let e = cfg.color_embed_dim;
        assert_eq!(m0.len(), e * h * w);
        // Two stacked 3x3 layers: pixels two away from every edge are interior.
        for c in 0..e {
            for y in 2..h - 2 {
                for x in 2..w - 3 {
                    assert!((m0[(c * h + y) * w + x + 1] - m1[(c * h + y) * w + x]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn siamese_heads_share_rotation_weights() {
        let cfg = tiny_config();
        let net = Network::new(cfg.clone(), 10).unwrap();
        assert!(net.params.get("head.rot.l1.w").is_some());
        assert!(net.params.get("head.vis.rot.l1.w").is_none());
        // Same feature row through both channels' rotation path.
        let width = cfg.channel_width(Channel::Visual);
        assert_eq!(width, cfg.channel_width(Channel::Tactile));
        let mut tape = Tape::new();
        let (bound, _) = net.bind(&mut tape, false);
        let x = tape.constant(vec![1, width], (0..width).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let qa = bound.head(&mut tape, &net.rotation_name(Channel::Visual), x).unwrap();
        let qb = bound.head(&mut tape, &net.rotation_name(Channel::Tactile), x).unwrap();
        assert_eq!(tape.value(qa), tape.value(qb));

        let split = Network::new(cfg.with_ablation(Ablation::NonSiamese), 10).unwrap();
        assert!(split.params.get("head.vis.rot.l1.w").is_some() && split.params.get("head.tac.rot.l1.w").is_some());
    }

    #[test]
    fn empty_tactile_cloud_is_replaced_by_depth_centroid() {
        let cfg = tiny_config();
        let mut s = prepared(2)[0].clone();
        s.tactile.clear();
        let inp = input(&s, &cfg, 1);
        assert!(!inp.tactile_valid);
        assert_eq!(inp.tactile.len(), 5);
        let centroid = inp.depth.iter().sum::<Vec3>() / 8.0;
        assert!((inp.tactile[0] - centroid).norm() < 1e-15);
        let net = Network::new(cfg, 1).unwrap();
        assert!(net.estimate(&inp).is_ok());
    }

    #[test]
    fn select_pose_examples() {
        let mk = |c: f64, ch: Channel, i: usize| PerPointEstimate {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [i as f64, 0.0, 0.0],
            confidence: c,
            channel: ch,
            index: i,
        };
        let one = [mk(0.3, Channel::Visual, 0)];
        assert_eq!(select_pose(&one).unwrap(), one[0]);
        let three = [mk(0.2, Channel::Visual, 0), mk(0.9, Channel::Visual, 1), mk(0.5, Channel::Tactile, 0)];
        assert_eq!(select_pose(&three).unwrap().index, 1);
        let squashed: Vec<_> = three.iter().map(|e| PerPointEstimate { confidence: e.confidence.powi(3), ..*e }).collect();
        assert_eq!(select_pose(&squashed).unwrap().index, 1);
        let tie = [mk(0.5, Channel::Tactile, 0), mk(0.5, Channel::Visual, 3), mk(0.5, Channel::Visual, 2)];
        let pick = select_pose(&tie).unwrap();
        assert_eq!((pick.channel, pick.index), (Channel::Visual, 2));
        assert!(select_pose(&[]).is_err());
    }

    #[test]
    fn checkpoint_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.vtf");
        let net = Network::new(tiny_config(), 1).unwrap();
        net.save(&path).unwrap();
        let back = Network::load(tiny_config(), &path).unwrap();
        assert_eq!(back.params, net.params);
        let err = Network::load(NetworkConfig { head_hidden: 9, ..tiny_config() }, &path).unwrap_err();
        assert!(err.to_string().contains("head.vis.trans.l1.w"), "{err}");
        let err = Network::load(tiny_config().with_ablation(Ablation::VisionOnly), &path).unwrap_err();
        assert!(matches!(err, NetError::Mismatch { .. }));
    }
}
