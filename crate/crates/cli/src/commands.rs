use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stream4d::dataset::{dataset_files, frame_points, load_sequence, save_dataset, save_ply, save_sequence};
use stream4d::kernels::sigmoid;
use stream4d::metrics::{cloud_metrics, depth_metrics, pose_auc30, DepthFrame, Point};
use stream4d::model::{load_checkpoint, AttnMode, Model, PredictionSet};
use stream4d::synth::{generate, SceneFrameGt, Sequence};
use stream4d::training::{train as train_model, OutputPaths, TrainJob};
use stream4d::Tensor;

use crate::config::RunConfig;

/// Exit status 1 for bad input caught before work starts, 2 for failures
/// while running.
#[derive(Debug)]
pub enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

pub fn print_config() -> Result<(), Failure> {
    let text = toml::to_string_pretty(&RunConfig::default()).runtime()?;
    print!("{text}");
    Ok(())
}

pub fn gen(cfg: &RunConfig, out: &Path, count: usize, seed: u64) -> Result<(), Failure> {
    if count == 0 {
        return Err(Failure::Invalid(anyhow!("--count must be at least 1")));
    }
    let seqs = generate(&cfg.data, count, seed).runtime()?;
    let files = save_dataset(&seqs, out).runtime()?;
    println!("wrote {} sequences of {} frames to {}", files.len(), cfg.data.frames, out.display());
    Ok(())
}

/// Named sequences from a container file or a dataset directory.
fn load_named(path: &Path) -> anyhow::Result<Vec<(String, Sequence)>> {
    let files = if path.is_dir() {
        let files = dataset_files(path)?;
        if files.is_empty() {
            bail!("no sequence files in {}", path.display());
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    files
        .into_iter()
        .map(|f| {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, load_sequence(&f)?))
        })
        .collect()
}

fn check_dims(model: &Model, name: &str, seq: &Sequence) -> anyhow::Result<()> {
    let c = model.config();
    if (seq.height(), seq.width()) != (c.image_height, c.image_width) {
        bail!(
            "{name}: {}x{} frames but the model expects {}x{}",
            seq.height(),
            seq.width(),
            c.image_height,
            c.image_width
        );
    }
    if seq.len() > c.max_frames {
        bail!("{name}: {} frames exceed the model's {}", seq.len(), c.max_frames);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student { distill: bool },
}

impl Role {
    fn dir_name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student { distill: true } => "student",
            Role::Student { distill: false } => "student_nokd",
        }
    }
}

pub fn train(mut cfg: RunConfig, role: Role, out: Option<PathBuf>) -> Result<(), Failure> {
    cfg.train.distill = role == Role::Student { distill: true };
    let named = load_named(&cfg.paths.dataset)
        .with_context(|| format!("loading dataset {}", cfg.paths.dataset.display()))
        .invalid()?;
    let (mut model, teacher, mode) = match role {
        Role::Teacher => (Model::new(cfg.model.clone(), cfg.train.seed).invalid()?, None, AttnMode::Global),
        Role::Student { distill } => {
            let path = cfg.teacher_checkpoint();
            let teacher: Model = load_checkpoint(&path)
                .with_context(|| format!("loading teacher {}", path.display()))
                .invalid()?;
            if teacher.config() != &cfg.model {
                return Err(Failure::Invalid(anyhow!("teacher {} was trained with a different [model]", path.display())));
            }
            // The student starts from the teacher's weights.
            let student = teacher.clone();
            (student, distill.then_some(teacher), AttnMode::Causal)
        }
    };
    for (name, seq) in &named {
        check_dims(&model, name, seq).invalid()?;
    }
    let data: Vec<Sequence> = named.into_iter().map(|(_, s)| s).collect();
    let dir = out.unwrap_or_else(|| cfg.paths.runs.join(role.dir_name()));
    let output = OutputPaths { dir };
    let job = TrainJob {
        config: &cfg.train,
        weights: &cfg.loss,
        mode,
        teacher: teacher.as_ref(),
        output: Some(output.clone()),
    };
    let started = Instant::now();
    let rows = train_model(&mut model, &data, &job).runtime()?;
    let last = rows.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
    println!(
        "{} trained for {} steps in {:.1}s, final loss {last:.4}",
        role.dir_name(),
        rows.len(),
        started.elapsed().as_secs_f64()
    );
    println!("checkpoint {}", output.last().display());
    Ok(())
}

/// Stores predictions in the dataset container: depth, points, pose and
/// tracks in their own fields, visibility as probabilities, and the point
/// and depth confidences in image channels 0 and 1.
fn prediction_frame(p: &PredictionSet) -> anyhow::Result<SceneFrameGt> {
    let hw = p.depth.numel();
    let (h, w) = (p.depth.shape()[0], p.depth.shape()[1]);
    let mut image = vec![0.0f32; 3 * hw];
    image[..hw].copy_from_slice(p.point_conf.data());
    image[hw..2 * hw].copy_from_slice(p.depth_conf.data());
    Ok(SceneFrameGt {
        image: Tensor::new(vec![3, h, w], image)?,
        depth: p.depth.clone(),
        points: p.point_map.clone(),
        pose: p.pose,
        tracks: p.tracks.clone(),
        visibility: p.visibility_logits.map(sigmoid),
        valid: Tensor::full(vec![h, w], 1.0),
    })
}

pub fn stream(checkpoint: &Path, data: &Path, out: &Path, emit_ply: bool, timings: Option<&Path>) -> Result<(), Failure> {
    let model: Model = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))
        .invalid()?;
    let named = load_named(data).invalid()?;
    for (name, seq) in &named {
        check_dims(&model, name, seq).invalid()?;
    }
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .runtime()?;
    let mut csv = String::from("sequence,frame,seconds\n");
    let mut total = 0.0;
    let mut frames = 0;
    for (name, seq) in &named {
        let mut session = model.session(&seq.queries()).runtime()?;
        let mut preds = Vec::with_capacity(seq.len());
        for (t, f) in seq.frames.iter().enumerate() {
            let started = Instant::now();
            let step = session.step(&f.image).runtime()?;
            let secs = started.elapsed().as_secs_f64();
            writeln!(csv, "{name},{},{secs:.9}", t + 1).expect("writing to a string");
            total += secs;
            frames += 1;
            if emit_ply {
                let p = &step.prediction;
                let stem = name.trim_end_matches(".s4dq");
                let path = out.join(format!("{stem}_{:04}.ply", t + 1));
                save_ply(&frame_points(&p.point_map, &f.image, &p.point_conf, None), &path).runtime()?;
            }
            preds.push(prediction_frame(&step.prediction).runtime()?);
        }
        save_sequence(&Sequence { frames: preds }, &out.join(name)).runtime()?;
    }
    if let Some(path) = timings {
        fs::write(path, csv)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
    }
    println!(
        "streamed {} sequences, {frames} frames, {:.2} ms per frame",
        named.len(),
        1e3 * total / frames.max(1) as f64
    );
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median timings of one sequence length.
#[derive(Clone, Copy, Debug)]
struct BenchRow {
    frames: usize,
    /// Last-frame latency with the key/value cache.
    streaming: f64,
    /// Last-frame latency when the causal model re-runs the whole prefix.
    reprocess: f64,
    /// One offline causal pass over all frames, per frame.
    causal: f64,
}

pub fn bench(checkpoint: &Path, lengths: &[usize], reps: usize, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let model: Model = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))
        .invalid()?;
    let c = model.config().clone();
    if reps == 0 {
        return Err(Failure::Invalid(anyhow!("--reps must be at least 1")));
    }
    if let Some(&t) = lengths.iter().find(|&&t| t == 0 || t > c.max_frames) {
        return Err(Failure::Invalid(anyhow!("length {t} outside 1..={}", c.max_frames)));
    }
    let longest = lengths.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<Tensor> = (0..longest)
        .map(|_| Tensor::randn(vec![3, c.image_height, c.image_width], 0.5, &mut rng))
        .collect();
    let mut rows = Vec::new();
    for &t in lengths {
        let (mut s, mut r, mut o) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..reps {
            let mut session = model.session(&[]).runtime()?;
            let mut last = 0.0;
            for image in &images[..t] {
                let started = Instant::now();
                session.step(image).runtime()?;
                last = started.elapsed().as_secs_f64();
            }
            s.push(last);
            let started = Instant::now();
            model.predict_sequence(&images[..t], &[], AttnMode::Causal).runtime()?;
            let full = started.elapsed().as_secs_f64();
            r.push(full);
            o.push(full / t as f64);
        }
        rows.push(BenchRow {
            frames: t,
            streaming: median(s),
            reprocess: median(r),
            causal: median(o),
        });
    }
    let mut csv = String::from("frames,mode,seconds\n");
    println!("{:>6} {:>12} {:>12} {:>12} {:>7}", "frames", "streaming", "reprocess", "causal/frm", "ratio");
    for b in &rows {
        for (mode, v) in [("streaming", b.streaming), ("full_reprocess", b.reprocess), ("full_causal", b.causal)] {
            writeln!(csv, "{},{mode},{v:.9}", b.frames).expect("writing to a string");
        }
        println!(
            "{:>6} {:>10.3}ms {:>10.3}ms {:>10.3}ms {:>7.3}",
            b.frames,
            1e3 * b.streaming,
            1e3 * b.reprocess,
            1e3 * b.causal,
            b.streaming / b.reprocess
        );
    }
    if let Some(path) = out {
        fs::write(path, csv)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
    }
    Ok(())
}

/// Metrics of one sequence. Pose scores need two frames and are NaN
/// otherwise.
#[derive(Clone, Copy, Debug)]
struct Report {
    acc_mean: f64,
    acc_median: f64,
    comp_mean: f64,
    comp_median: f64,
    nc_mean: f64,
    nc_median: f64,
    overall: f64,
    abs_rel: f64,
    delta_125: f64,
    auc30: f64,
}

impl Report {
    const HEADER: &'static str =
        "sequence,acc_mean,acc_median,comp_mean,comp_median,nc_mean,nc_median,overall,abs_rel,delta_125,auc30";

    fn values(&self) -> [f64; 10] {
        [
            self.acc_mean,
            self.acc_median,
            self.comp_mean,
            self.comp_median,
            self.nc_mean,
            self.nc_median,
            self.overall,
            self.abs_rel,
            self.delta_125,
            self.auc30,
        ]
    }

    fn mean(reports: &[Report]) -> [f64; 10] {
        let mut out = [0.0; 10];
        for (i, o) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = reports.iter().map(|r| r.values()[i]).filter(|v| !v.is_nan()).collect();
            *o = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        }
        out
    }
}

fn valid_points(f: &SceneFrameGt, mask: &Tensor) -> Vec<Point> {
    let hw = mask.numel();
    let p = f.points.data();
    (0..hw)
        .filter(|&i| mask.data()[i] > 0.5)
        .map(|i| [p[i] as f64, p[hw + i] as f64, p[2 * hw + i] as f64])
        .collect()
}

fn score(pred: &Sequence, gt: &Sequence) -> anyhow::Result<Report> {
    let mut pred_cloud = Vec::new();
    let mut gt_cloud = Vec::new();
    let mut depth = Vec::new();
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        pred_cloud.extend(valid_points(p, &g.valid));
        gt_cloud.extend(valid_points(g, &g.valid));
        let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let mask: Vec<bool> = g.valid.data().iter().map(|&v| v > 0.5).collect();
        depth.push((to64(&p.depth), to64(&g.depth), mask));
    }
    let cloud = cloud_metrics(&pred_cloud, &gt_cloud, None, None)?;
    let frames: Vec<DepthFrame> = depth
        .iter()
        .map(|(p, g, m)| DepthFrame { pred: p, gt: g, mask: m })
        .collect();
    let d = depth_metrics(&frames)?;
    let auc30 = if gt.len() >= 2 {
        let pp: Vec<_> = pred.frames.iter().map(|f| f.pose).collect();
        let gp: Vec<_> = gt.frames.iter().map(|f| f.pose).collect();
        pose_auc30(&pp, &gp)?.auc30
    } else {
        f64::NAN
    };
    Ok(Report {
        acc_mean: cloud.acc_mean,
        acc_median: cloud.acc_median,
        comp_mean: cloud.comp_mean,
        comp_median: cloud.comp_median,
        nc_mean: cloud.nc_mean,
        nc_median: cloud.nc_median,
        overall: cloud.overall,
        abs_rel: d.abs_rel,
        delta_125: d.delta_125,
        auc30,
    })
}

pub fn eval(predictions: &Path, data: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let preds = load_named(predictions).invalid()?;
    let gts = load_named(data).invalid()?;
    if preds.len() != gts.len() {
        return Err(Failure::Invalid(anyhow!(
            "{} prediction files for {} ground-truth files",
            preds.len(),
            gts.len()
        )));
    }
    let single = !predictions.is_dir() && !data.is_dir();
    for ((pn, p), (gn, g)) in preds.iter().zip(&gts) {
        if !single && pn != gn {
            return Err(Failure::Invalid(anyhow!("prediction {pn} has no ground truth (next is {gn})")));
        }
        if p.len() != g.len() || (p.height(), p.width()) != (g.height(), g.width()) {
            return Err(Failure::Invalid(anyhow!("{pn}: prediction and ground-truth shapes differ")));
        }
    }
    let mut reports = Vec::new();
    let mut csv = format!("{}\n", Report::HEADER);
    for ((name, p), (_, g)) in preds.iter().zip(&gts) {
        let r = score(p, g).with_context(|| format!("scoring {name}")).runtime()?;
        let vals: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(csv, "{name},{}", vals.join(",")).expect("writing to a string");
        reports.push(r);
    }
    let mean = Report::mean(&reports);
    let vals: Vec<String> = mean.iter().map(|v| format!("{v:.6}")).collect();
    writeln!(csv, "mean,{}", vals.join(",")).expect("writing to a string");
    println!(
        "{} sequences: acc {:.4} comp {:.4} nc {:.4} overall {:.4} abs_rel {:.4} delta<1.25 {:.4} auc30 {:.4}",
        reports.len(),
        mean[0],
        mean[2],
        mean[4],
        mean[6],
        mean[7],
        mean[8],
        mean[9]
    );
    if let Some(path) = out {
        fs::write(path, csv)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
    }
    Ok(())
}
