//! Confidence-weighted pose loss, Adam and the seeded training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusionnet::{Estimates, NetError, NetInput, Network, NetworkConfig, PerPointEstimate, PreparedSample};
use crate::geometry::{Pose, Vec3};
use crate::simworld::{build_object, derive_seed};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {term} at epoch {epoch}, batch {batch} (sample {sample})")]
    NonFinite { epoch: usize, batch: usize, sample: String, term: &'static str },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceVariant {
    /// `ĉ − cₑ − w log ĉ`, sign kept as written.
    Signed,
    /// `|ĉ − cₑ| − w log ĉ`.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub w: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub model_point_count: usize,
    pub confidence_variant: ConfidenceVariant,
    /// Treat the expected confidence as a constant target.
    pub stop_gradient_expected: bool,
    pub checkpoint_every: usize,
    /// Trajectories per object held out of the train split for best-model selection.
    pub validation_trajectories: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            w: 0.015,
            batch_size: 16,
            epochs: 50,
            seed: 11,
            model_point_count: 500,
            confidence_variant: ConfidenceVariant::Signed,
            stop_gradient_expected: true,
            checkpoint_every: 10,
            validation_trajectories: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.w >= 0.0) {
            return Err(TrainError::Config("w must be non-negative".into()));
        }
        if self.batch_size == 0 || self.model_point_count == 0 {
            return Err(TrainError::Config("batch_size and model_point_count must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn expected_confidence(lp: f64) -> f64 {
    0.5f64.powf(lp)
}

pub fn confidence_loss(c_hat: f64, c_e: f64, w: f64, variant: ConfidenceVariant) -> f64 {
    let c = c_hat.max(crate::fusionnet::CONFIDENCE_FLOOR);
    let diff = c - c_e;
    let diff = match variant {
        ConfidenceVariant::Signed => diff,
        ConfidenceVariant::Absolute => diff.abs(),
    };
    diff - w * c.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mean_lp: f64,
    pub mean_lc: f64,
    pub per_point_lp: Vec<f64>,
}

/// Loss over plain estimates, without a tape.
pub fn loss_breakdown(
    estimates: &[PerPointEstimate],
    gt: &Pose,
    model: &[Vec3],
    w: f64,
    variant: ConfidenceVariant,
) -> LossBreakdown {
    let target: Vec<Vec3> = model.iter().map(|p| gt.apply(p)).collect();
    let per_point_lp: Vec<f64> = estimates
        .iter()
        .map(|e| {
            let pose = e.pose();
            model.iter().zip(&target).map(|(x, y)| (pose.apply(x) - y).norm()).sum::<f64>() / model.len() as f64
        })
        .collect();
    let n = estimates.len() as f64;
    let lc: Vec<f64> = estimates
        .iter()
        .zip(&per_point_lp)
        .map(|(e, &lp)| confidence_loss(e.confidence, expected_confidence(lp), w, variant))
        .collect();
    let mean_lp = per_point_lp.iter().sum::<f64>() / n;
    let mean_lc = lc.iter().sum::<f64>() / n;
    let total = per_point_lp.iter().zip(&lc).map(|(a, b)| a + b).sum::<f64>() / n;
    LossBreakdown { total, mean_lp, mean_lc, per_point_lp }
}

/// Differentiable loss terms for one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mean_lp: Var,
    pub mean_lc: Var,
    pub lp: Var,
}

/// Records the loss on `tape`. `target` is `model` under the ground-truth pose.
pub fn network_loss(
    tape: &mut Tape,
    est: &Estimates,
    model: Arc<[[f64; 3]]>,
    target: Arc<[[f64; 3]]>,
    w: f64,
    variant: ConfidenceVariant,
    stop_gradient_expected: bool,
) -> Result<LossVars> {
    let lp = tape.pose_distance(est.q, est.t, model, target)?;
    let lp_for_ce = if stop_gradient_expected { tape.detach(lp) } else { lp };
    let ce = tape.pow_base(0.5, lp_for_ce)?;
    let diff = tape.sub(est.c, ce)?;
    let diff = match variant {
        ConfidenceVariant::Signed => diff,
        ConfidenceVariant::Absolute => tape.abs(diff),
    };
    let log_c = tape.log(est.c)?;
    let reg = tape.scale(log_c, -w);
    let lc = tape.add(diff, reg)?;
    let per_point = tape.add(lp, lc)?;
    let total = tape.mean(per_point);
    let mean_lp = tape.mean(lp);
    let mean_lc = tape.mean(lc);
    Ok(LossVars { total, mean_lp, mean_lc, lp })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Updates `params` in place; `grads[k]` pairs with the k-th parameter.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Contract(format!("{} parameters but {} gradients", params.len(), grads.len())).into());
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(TensorError::Contract(format!("parameter {k}: {} values, gradient {}", p.len(), g.len())).into());
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(TensorError::Contract("gradient shapes changed between steps".into()).into());
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut Network, grads: &[Vec<f64>]) -> Result<()> {
        let mut slices: Vec<&mut [f64]> = net.params.iter_mut().map(|(_, t)| t.data_mut()).collect();
        self.update(&mut slices, grads)
    }
}

/// Model clouds and their ground-truth-posed copies for every sample.
#[derive(Debug, Clone, Default)]
pub struct ModelBank {
    models: BTreeMap<u16, Arc<[[f64; 3]]>>,
}

impl ModelBank {
    pub fn new(model_point_count: usize, objects: impl IntoIterator<Item = u16>) -> Self {
        let mut models = BTreeMap::new();
        for id in objects {
            if let Some(obj) = build_object(id, model_point_count) {
                models.insert(id, obj.model_cloud.as_arrays().into());
            }
        }
        Self { models }
    }

    pub fn for_samples(model_point_count: usize, samples: &[PreparedSample]) -> Self {
        Self::new(model_point_count, samples.iter().map(|s| s.object_id))
    }

    pub fn model(&self, object: u16) -> Option<Arc<[[f64; 3]]>> {
        self.models.get(&object).cloned()
    }

    pub fn points(&self, object: u16) -> Option<Vec<Vec3>> {
        self.models.get(&object).map(|m| m.iter().map(|p| Vec3::from(*p)).collect())
    }

    pub fn target(&self, object: u16, gt: &Pose) -> Option<Arc<[[f64; 3]]>> {
        self.models.get(&object).map(|m| {
            m.iter()
                .map(|p| {
                    let q = gt.apply(&Vec3::from(*p));
                    [q.x, q.y, q.z]
                })
                .collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleLoss {
    pub total: f64,
    pub lp: f64,
    pub lc: f64,
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradient(
    net: &Network,
    sample: &PreparedSample,
    bank: &ModelBank,
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<(SampleLoss, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let input = NetInput::sample(sample, &net.config, &mut rng)?;
    let mut tape = Tape::new();
    let (est, _, vars) = net.forward(&mut tape, &input, true)?;
    let model = bank.model(sample.object_id).ok_or_else(|| TrainError::Config(format!("unknown object {}", sample.object_id)))?;
    let target = bank.target(sample.object_id, &sample.gt_pose).expect("model exists");
    let lv = network_loss(&mut tape, &est, model, target, cfg.w, cfg.confidence_variant, cfg.stop_gradient_expected)?;
    let loss = SampleLoss { total: tape.scalar(lv.total), lp: tape.scalar(lv.mean_lp), lc: tape.scalar(lv.mean_lc) };
    tape.backward(lv.total)?;
    let grads = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()])).collect();
    Ok((loss, grads))
}

/// Loss without gradients, for validation.
pub fn sample_loss(net: &Network, sample: &PreparedSample, bank: &ModelBank, cfg: &TrainConfig, rng_seed: u64) -> Result<SampleLoss> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let input = NetInput::sample(sample, &net.config, &mut rng)?;
    let mut tape = Tape::new();
    let (est, _, _) = net.forward(&mut tape, &input, false)?;
    let model = bank.model(sample.object_id).ok_or_else(|| TrainError::Config(format!("unknown object {}", sample.object_id)))?;
    let target = bank.target(sample.object_id, &sample.gt_pose).expect("model exists");
    let lv = network_loss(&mut tape, &est, model, target, cfg.w, cfg.confidence_variant, cfg.stop_gradient_expected)?;
    Ok(SampleLoss { total: tape.scalar(lv.total), lp: tape.scalar(lv.mean_lp), lc: tape.scalar(lv.mean_lc) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_l: f64,
    pub mean_lp: f64,
    pub mean_lc: f64,
    pub validation_l: Option<f64>,
}

pub fn loss_curve_csv(curve: &[EpochStats]) -> String {
    let mut s = String::from("epoch,mean_L,mean_Lp,mean_Lc,validation_L\n");
    for e in curve {
        let v = e.validation_l.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{v}", e.epoch, e.mean_l, e.mean_lp, e.mean_lc);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    /// Epoch 0 is the untrained network; later rows are training-epoch means.
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best: Network,
}

/// Where checkpoints and the loss curve go; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

fn check_finite(loss: &SampleLoss, epoch: usize, batch: usize, sample: &PreparedSample) -> Result<()> {
    let term = if !loss.lp.is_finite() {
        "L^p"
    } else if !loss.lc.is_finite() {
        "L^c"
    } else if !loss.total.is_finite() {
        "L"
    } else {
        return Ok(());
    };
    Err(TrainError::NonFinite { epoch, batch, sample: sample.id.to_string(), term })
}

fn mean_losses(losses: &[SampleLoss]) -> SampleLoss {
    let n = losses.len().max(1) as f64;
    SampleLoss {
        total: losses.iter().map(|l| l.total).sum::<f64>() / n,
        lp: losses.iter().map(|l| l.lp).sum::<f64>() / n,
        lc: losses.iter().map(|l| l.lc).sum::<f64>() / n,
    }
}

fn evaluate_losses(net: &Network, samples: &[PreparedSample], bank: &ModelBank, cfg: &TrainConfig, salt: u64) -> Result<SampleLoss> {
    let losses = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_loss(net, s, bank, cfg, derive_seed(cfg.seed ^ salt, 0, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_losses(&losses))
}

/// Trains `net` on `train`, picking the best epoch on `validation` (or on
/// the training loss when `validation` is empty).
pub fn train(
    mut net: Network,
    train: &[PreparedSample],
    validation: &[PreparedSample],
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let bank = ModelBank::new(cfg.model_point_count, train.iter().chain(validation).map(|s| s.object_id));
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let initial = evaluate_losses(&net, train, &bank, cfg, 0x7a11)?;
    let score = |net: &Network, fallback: f64| -> Result<f64> {
        if validation.is_empty() {
            Ok(fallback)
        } else {
            Ok(evaluate_losses(net, validation, &bank, cfg, 0x7a1d)?.total)
        }
    };
    let v0 = score(&net, initial.total)?;
    let mut curve = vec![EpochStats {
        epoch: 0,
        mean_l: initial.total,
        mean_lp: initial.lp,
        mean_lc: initial.lc,
        validation_l: (!validation.is_empty()).then_some(v0),
    }];
    let (mut best, mut best_score, mut best_epoch) = (net.clone(), v0, 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(train.len());
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results = chunk
                .par_iter()
                .map(|&i| sample_gradient(&net, &train[i], &bank, cfg, derive_seed(cfg.seed, epoch as u64, 1 + i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let mut sum: Vec<Vec<f64>> = net.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            for (&i, (loss, grads)) in chunk.iter().zip(&results) {
                check_finite(loss, epoch, batch, &train[i])?;
                if grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(TrainError::NonFinite { epoch, batch, sample: train[i].id.to_string(), term: "gradient" });
                }
                for (s, g) in sum.iter_mut().zip(grads) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                losses.push(*loss);
            }
            let scale = 1.0 / chunk.len() as f64;
            sum.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.step_network(&mut net, &sum)?;
        }
        let m = mean_losses(&losses);
        let s = score(&net, m.total)?;
        curve.push(EpochStats {
            epoch,
            mean_l: m.total,
            mean_lp: m.lp,
            mean_lc: m.lc,
            validation_l: (!validation.is_empty()).then_some(s),
        });
        if s < best_score {
            best_score = s;
            best_epoch = epoch;
            best = net.clone();
        }
        if let Some(dir) = &out.dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                net.save(&dir.join(format!("epoch_{epoch:04}.vtf")))?;
            }
        }
    }
    if let Some(dir) = &out.dir {
        net.save(&dir.join("final.vtf"))?;
        best.save(&dir.join("best.vtf"))?;
        let path = dir.join("loss.csv");
        std::fs::write(&path, loss_curve_csv(&curve)).map_err(io(&path))?;
    }
    Ok(TrainOutcome { network: net, curve, best_epoch, best })
}

/// Convenience wrapper building a fresh network from `config`.
pub fn train_new(
    config: NetworkConfig,
    train_set: &[PreparedSample],
    validation: &[PreparedSample],
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<TrainOutcome> {
    let net = Network::new(config, derive_seed(cfg.seed, 0xbeef, 0))?;
    train(net, train_set, validation, cfg, out)
}

/// Reduced network used for finite-difference verification.
pub fn gradcheck_config() -> NetworkConfig {
    NetworkConfig {
        n_points: 8,
        color_hidden: 8,
        color_embed_dim: 16,
        geom_hidden: 16,
        geom_embed_dim: 16,
        global_dim: 16,
        head_hidden: 16,
        tactile_point_budget: Some(8),
        ..Default::default()
    }
}

/// Seeded synthetic sample with an 8×8 crop: depth and tactile points lie
/// on the object's model under a random pose.
pub fn synthetic_sample(object: u16, seed: u64) -> PreparedSample {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = build_object(object, 64).expect("known object").model_cloud;
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let rotation = nalgebra::UnitQuaternion::from_scaled_axis(axis);
    let gt = Pose::new(rotation, Vec3::new(rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(0.4..0.5)));
    let posed: Vec<Vec3> = model.points.iter().map(|p| gt.apply(p)).collect();
    let (w, h) = (8, 8);
    PreparedSample {
        id: crate::dataset::SampleId { object, trajectory: 0, instance: 0 },
        object_id: object,
        crop_w: w,
        crop_h: h,
        crop: (0..3 * w * h).map(|_| rng.gen()).collect(),
        points: posed[..24].to_vec(),
        pixels: (0..24).map(|_| rng.gen_range(0..w * h)).collect(),
        tactile: posed[24..36].to_vec(),
        gt_pose: gt,
        occlusion: 0.5,
    }
}

/// Compares every parameter gradient of the full loss with central
/// differences. `fault` corrupts one backward rule, as a negative control.
pub fn gradcheck_network(
    config: &NetworkConfig,
    seed: u64,
    fault: Option<crate::tensor::Fault>,
) -> Result<Vec<crate::tensor::gradcheck::TensorCheck>> {
    let net = Network::new(config.clone(), seed)?;
    let sample = synthetic_sample(3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = NetInput::sample(&sample, config, &mut rng)?;
    let bank = ModelBank::new(64, [sample.object_id]);
    let model = bank.model(sample.object_id).expect("model");
    let target = bank.target(sample.object_id, &sample.gt_pose).expect("model");
    // Finite differences see C^e move with the pose, so the check needs the
    // gradient through it as well.
    let cfg = TrainConfig { stop_gradient_expected: false, ..TrainConfig::default() };
    let loss_of = |net: &Network, tape: &mut Tape, trainable: bool| -> Result<(LossVars, Vec<Var>)> {
        let (est, _, vars) = net.forward(tape, &input, trainable)?;
        let lv = network_loss(tape, &est, model.clone(), target.clone(), cfg.w, cfg.confidence_variant, cfg.stop_gradient_expected)?;
        Ok((lv, vars))
    };
    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let (lv, vars) = loss_of(&net, &mut tape, true)?;
    tape.backward(lv.total)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()])).collect();
    let mut probe = net.clone();
    Ok(crate::tensor::gradcheck::check_params(&net.params, &analytic, crate::tensor::gradcheck::DEFAULT_STEP, |params| {
        probe.params = params.clone();
        let mut t = Tape::new();
        let (lv, _) = loss_of(&probe, &mut t, false).map_err(|e| TensorError::Contract(e.to_string()))?;
        Ok(t.scalar(lv.total))
    })?)
}
