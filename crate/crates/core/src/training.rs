//! Supervised and teacher-distilled training.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use nalgebra::UnitQuaternion;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::graph::Var;
use crate::kernels::sigmoid;
use crate::losses::{camera_loss, depth_loss, pointmap_loss, total_loss, track_loss, LossParts, LossValues, LossWeights};
use crate::model::{save_checkpoint, AttnMode, Model, PredictionSet};
use crate::nn::{Ctx, ParamStore};
use crate::synth::Sequence;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Window length drawn from each sequence per step.
    pub frames_per_sample: usize,
    /// Peak learning rate (1e-6 when fine-tuning a large pretrained model;
    /// from-scratch toy models need far more).
    pub peak_lr: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Supervise with a frozen teacher's predictions.
    pub distill: bool,
    /// Weight of the teacher's predictions in the targets; 1 means pure
    /// pseudo ground truth.
    pub pseudo_gt_blend: f64,
    /// Keep encoder parameters fixed.
    pub freeze_encoder: bool,
    /// Learning-rate multiplier for the prediction heads.
    pub head_lr_scale: f64,
    /// Random left-right mirroring, colour channel permutation and
    /// brightness gain of each sample. Labels are unaffected by the colour
    /// changes and transformed exactly for the mirror.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            frames_per_sample: 10,
            peak_lr: 1e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            seed: 0,
            distill: false,
            pseudo_gt_blend: 1.0,
            freeze_encoder: false,
            head_lr_scale: 30.0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, max_frames: usize) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "warmup fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if self.frames_per_sample == 0 || self.frames_per_sample > max_frames {
            return Err(Error::invalid(format!(
                "frames per sample {} outside 1..={max_frames}",
                self.frames_per_sample
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("at least one epoch is required"));
        }
        let rates = [self.peak_lr, self.head_lr_scale, self.weight_decay];
        if !rates.iter().all(|r| *r >= 0.0 && r.is_finite()) {
            return Err(Error::invalid("learning rate, head scale and weight decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.pseudo_gt_blend) {
            return Err(Error::invalid(format!(
                "pseudo ground-truth blend {} outside [0, 1]",
                self.pseudo_gt_blend
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warmup = ((cfg.warmup_fraction * total as f64).round() as usize).clamp(1, total.max(1));
    if step <= warmup {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return 0.0;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Learning-rate multiplier of one named parameter under `cfg`.
pub fn parameter_lr_scale(cfg: &TrainConfig, name: &str) -> f64 {
    if name.starts_with("encoder.") {
        if cfg.freeze_encoder {
            0.0
        } else {
            1.0
        }
    } else if ["camera.", "geometry.", "track."].iter().any(|p| name.starts_with(p)) {
        cfg.head_lr_scale
    } else {
        1.0
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.get(id).shape().to_vec())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `lr_scale` multiplies the learning rate per parameter
    /// name; parameters scaled by zero are left untouched. Any non-finite
    /// gradient aborts before anything changes.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
        weight_decay: f64,
        lr_scale: impl Fn(&str) -> f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("optimizer_step", params.get(id).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr = lr * lr_scale(params.name(id));
            if lr == 0.0 {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            let decay = T::lit(1.0 - lr * weight_decay);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mhat = m[k].as_f64() / c1;
                let vhat = v[k].as_f64() / c2;
                p[k] = p[k] * decay - T::lit(lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// Supervision for one training sample.
#[derive(Clone, Debug)]
pub struct Targets<T: Real = f32> {
    pub poses: Vec<CameraPose>,
    pub depth: Vec<Tensor<T>>,
    pub points: Vec<Tensor<T>>,
    pub valid: Vec<Tensor<T>>,
    pub tracks: Vec<Tensor<T>>,
    /// Per-frame visibility in `[0, 1]`.
    pub visibility: Vec<Tensor<T>>,
}

/// Images, queries and ground truth of the leading `frames` frames.
#[derive(Clone, Debug)]
pub struct Sample<T: Real = f32> {
    pub images: Vec<Tensor<T>>,
    pub queries: Vec<[f64; 2]>,
    pub targets: Targets<T>,
}

impl<T: Real> Sample<T> {
    pub fn from_sequence(seq: &Sequence, frames: usize) -> Result<Self> {
        if seq.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        let seq = seq.prefix(frames);
        let f = &seq.frames;
        Ok(Self {
            images: f.iter().map(|x| x.image.cast()).collect(),
            queries: seq.queries(),
            targets: Targets {
                poses: f.iter().map(|x| x.pose).collect(),
                depth: f.iter().map(|x| x.depth.cast()).collect(),
                points: f.iter().map(|x| x.points.cast()).collect(),
                valid: f.iter().map(|x| x.valid.cast()).collect(),
                tracks: f.iter().map(|x| x.tracks.cast()).collect(),
                visibility: f.iter().map(|x| x.visibility.cast()).collect(),
            },
        })
    }
}

/// Builds the loss graph of one sample. Each part is the loss sum divided by
/// its element count (frames, pixels or track observations) so that the
/// parts stay comparable across resolutions and sequence lengths.
pub fn sample_loss<T: Real>(
    model: &Model<T>,
    ctx: &mut Ctx<'_, T>,
    sample: &Sample<T>,
    weights: &LossWeights,
    mode: AttnMode,
) -> Result<(Var, LossValues)> {
    let tg = &sample.targets;
    let frames = sample.images.len();
    if [tg.poses.len(), tg.depth.len(), tg.points.len(), tg.valid.len(), tg.tracks.len(), tg.visibility.len()]
        .iter()
        .any(|&n| n != frames)
    {
        return Err(Error::invalid("targets do not cover every frame"));
    }
    let out = model.forward_sequence(ctx, &sample.images, &sample.queries, mode)?;
    let g = &mut ctx.g;
    let poses: Vec<Var> = out.frames.iter().map(|f| f.pose).collect();
    let poses = g.concat_rows(&poses)?;
    let camera = camera_loss(g, poses, &tg.poses, weights.huber_delta)?;
    let camera = g.scale(camera, T::lit(1.0 / frames as f64));

    let pixels = (frames * tg.depth[0].numel()) as f64;
    let mut depth = Vec::with_capacity(frames);
    let mut pmap = Vec::with_capacity(frames);
    let mut track = Vec::with_capacity(frames);
    for (t, f) in out.frames.iter().enumerate() {
        depth.push(depth_loss(g, f.depth, f.depth_conf, &tg.depth[t], &tg.valid[t], weights.alpha)?);
        pmap.push(pointmap_loss(g, f.point_map, f.point_conf, &tg.points[t], &tg.valid[t], weights.alpha)?);
        if let (Some(p), Some(l)) = (f.tracks, f.visibility_logits) {
            track.push(track_loss(g, p, &tg.tracks[t], l, &tg.visibility[t])?);
        }
    }
    let mut mean = |parts: Vec<Var>, count: f64| -> Result<Var> {
        if parts.is_empty() {
            return Ok(g.constant(Tensor::scalar(T::zero())));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p)?;
        }
        Ok(g.scale(acc, T::lit(1.0 / count)))
    };
    let depth = mean(depth, pixels)?;
    let pmap = mean(pmap, pixels)?;
    let track = mean(track, (frames * sample.queries.len()).max(1) as f64)?;
    total_loss(g, &LossParts { camera, depth, pmap, track }, weights)
}

/// Loss and per-parameter gradients of one supervised sample.
pub fn supervised_step<T: Real>(
    model: &Model<T>,
    sample: &Sample<T>,
    weights: &LossWeights,
    mode: AttnMode,
) -> Result<(LossValues, Vec<Tensor<T>>)> {
    let mut ctx = Ctx::train(model.params());
    let (loss, values) = sample_loss(model, &mut ctx, sample, weights, mode)?;
    Ok((values, ctx.param_grads(loss)?))
}

/// Spherical interpolation of poses: translation and field of view linearly,
/// rotation by slerp after sign alignment. `s = 0` gives `a`.
pub fn blend_pose(a: &CameraPose, b: &CameraPose, s: f64) -> CameraPose {
    if s == 0.0 {
        return *a;
    }
    if s == 1.0 {
        return *b;
    }
    let lerp = |x: f64, y: f64| (1.0 - s) * x + s * y;
    let (qa, mut qb) = (a.quaternion(), b.quaternion());
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let q = qa.slerp(&qb, s);
    let mut out = CameraPose {
        translation: std::array::from_fn(|i| lerp(a.translation[i], b.translation[i])),
        rotation: [q.i, q.j, q.k, q.w],
        fov: std::array::from_fn(|i| lerp(a.fov[i], b.fov[i])),
    };
    out.canonicalize();
    out
}

fn blend_tensor<T: Real>(gt: &Tensor<T>, teacher: &Tensor<T>, s: f64) -> Tensor<T> {
    if s == 1.0 {
        return teacher.clone();
    }
    let s = T::lit(s);
    let data = gt
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&g, &t)| (T::one() - s) * g + s * t)
        .collect();
    Tensor::new(gt.shape().to_vec(), data).expect("same shape")
}

/// Targets `blend · teacher + (1 − blend) · ground truth`. The teacher's
/// visibility enters as probabilities; the validity mask stays the ground
/// truth's.
pub fn blend_targets<T: Real>(gt: &Targets<T>, teacher: &[PredictionSet<T>], blend: f64) -> Result<Targets<T>> {
    if teacher.len() != gt.poses.len() {
        return Err(Error::invalid("teacher predictions do not cover every frame"));
    }
    if blend == 0.0 {
        return Ok(gt.clone());
    }
    Ok(Targets {
        poses: gt.poses.iter().zip(teacher).map(|(g, p)| blend_pose(g, &p.pose, blend)).collect(),
        depth: gt.depth.iter().zip(teacher).map(|(g, p)| blend_tensor(g, &p.depth, blend)).collect(),
        points: gt.points.iter().zip(teacher).map(|(g, p)| blend_tensor(g, &p.point_map, blend)).collect(),
        valid: gt.valid.clone(),
        tracks: gt.tracks.iter().zip(teacher).map(|(g, p)| blend_tensor(g, &p.tracks, blend)).collect(),
        visibility: gt
            .visibility
            .iter()
            .zip(teacher)
            .map(|(g, p)| blend_tensor(g, &p.visibility_logits.map(sigmoid), blend))
            .collect(),
    })
}

/// The teacher predicts the sample with global attention in a no-grad
/// graph; the causal student is then supervised by the blended targets.
/// Only student gradients are produced.
pub fn distill_step<T: Real>(
    student: &Model<T>,
    teacher: &Model<T>,
    sample: &Sample<T>,
    weights: &LossWeights,
    blend: f64,
) -> Result<(LossValues, Vec<Tensor<T>>)> {
    if student.config() != teacher.config() {
        return Err(Error::invalid("teacher and student configurations differ"));
    }
    let pseudo = teacher.predict_sequence(&sample.images, &sample.queries, AttnMode::Global)?;
    let blended = Sample {
        images: sample.images.clone(),
        queries: sample.queries.clone(),
        targets: blend_targets(&sample.targets, &pseudo, blend)?,
    };
    supervised_step(student, &blended, weights, AttnMode::Causal)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossValues,
}

pub const LOG_HEADER: &str = "step,lr,L_camera,L_depth,L_pmap,L_track,L_total";

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, l.camera, l.depth, l.pmap, l.track, l.total
        )
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn log(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}

/// What a run needs besides the model being trained.
pub struct TrainJob<'a> {
    pub config: &'a TrainConfig,
    pub weights: &'a LossWeights,
    /// Attention mode of the model being trained.
    pub mode: AttnMode,
    /// Frozen teacher, required when `config.distill` is set.
    pub teacher: Option<&'a Model>,
    pub output: Option<OutputPaths>,
}

/// Trains `model` in place for `config.epochs` passes over `data`, one
/// sequence per step in a seeded shuffled order. Each step draws a random
/// window of `frames_per_sample` frames from its sequence. Returns the log rows.
pub fn train(model: &mut Model, data: &[Sequence], job: &TrainJob<'_>) -> Result<Vec<LogRow>> {
    let cfg = job.config;
    cfg.validate(model.config().max_frames)?;
    job.weights.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let teacher = match (cfg.distill, job.teacher) {
        (true, Some(t)) => {
            if t.config() != model.config() {
                return Err(Error::invalid("teacher and student configurations differ"));
            }
            Some(t)
        }
        (true, None) => return Err(Error::invalid("distillation needs a teacher")),
        (false, _) => None,
    };
    if teacher.is_some() && job.mode != AttnMode::Causal {
        return Err(Error::invalid("the distilled student must use causal attention"));
    }
    if data.iter().any(|s| s.is_empty()) {
        return Err(Error::invalid("training set holds an empty sequence"));
    }
    let mut log = match &job.output {
        Some(out) => {
            fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            let path = out.log();
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };

    let total = cfg.epochs * data.len();
    let mut opt = AdamW::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(total);
    let lr_scale = |name: &str| parameter_lr_scale(cfg, name);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let lr = lr_at(step, total, cfg);
            let sample = random_window(&data[i], cfg, &mut rng)?;
            let (loss, grads) = match teacher {
                Some(t) => distill_step(model, t, &sample, job.weights, cfg.pseudo_gt_blend)?,
                None => supervised_step(model, &sample, job.weights, job.mode)?,
            };
            opt.step(model.params_mut(), &grads, lr, cfg.weight_decay, lr_scale)
                .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
            let row = LogRow { step, lr, loss };
            if let Some((w, path)) = log.as_mut() {
                writeln!(w, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
            }
            log::debug!("step {step} lr {lr:.3e} loss {:.4}", loss.total);
            rows.push(row);
            step += 1;
        }
        if let Some(out) = &job.output {
            save_checkpoint(model, &out.latest())?;
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(out) = &job.output {
        save_checkpoint(model, &out.last())?;
    }
    Ok(rows)
}

/// A sample from a random `frames`-long window of `seq`, rebased so the
/// window's first frame is the world frame. Windows whose first frame sees
/// no track fall back to the sequence start. See [`TrainConfig::augment`].
fn random_window(seq: &Sequence, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let len = cfg.frames_per_sample.min(seq.len());
    let start = rng.random_range(0..=seq.len() - len);
    let visible = seq.frames[start].visibility.data().iter().any(|&v| v > 0.5);
    let start = if visible { start } else { 0 };
    let window = seq.window(start, len)?;
    if !cfg.augment {
        return Sample::from_sequence(&window, len);
    }
    let window = if rng.random_bool(0.5) { window.mirrored() } else { window };
    let mut sample: Sample = Sample::from_sequence(&window, len)?;
    let mut channels = [0, 1, 2];
    channels.shuffle(rng);
    let gain = rng.random_range(0.7f32..1.3);
    for image in &mut sample.images {
        let src = image.clone();
        let hw = src.numel() / 3;
        for (c, &from) in channels.iter().enumerate() {
            for i in 0..hw {
                image.data_mut()[c * hw + i] = (src.data()[from * hw + i] * gain).min(1.0);
            }
        }
    }
    Ok(sample)
}

/// Point-map RMSE of `model` over held-out sequences, valid pixels only.
pub fn pointmap_rmse(model: &Model, data: &[Sequence], frames: usize, mode: AttnMode) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for seq in data {
        let s = seq.prefix(frames);
        let preds = model.predict_sequence(&s.images(), &s.queries(), mode)?;
        for (p, f) in preds.iter().zip(&s.frames) {
            let hw = f.valid.numel();
            for i in 0..hw {
                if f.valid.data()[i] == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let d = (p.point_map.data()[c * hw + i] - f.points.data()[c * hw + i]) as f64;
                    sum += d * d;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("no valid pixels to evaluate"));
    }
    Ok((sum / count as f64).sqrt())
}

