//! Procedural ray-cast scenes with exact depth, point map, pose and track
//! labels.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraPose, Intrinsics};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Infinite plane through `point` with unit `normal`.
    Plane { point: [f64; 3], normal: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    Solid([f64; 3]),
    /// 3D checkerboard of cell size `scale`.
    Checker { a: [f64; 3], b: [f64; 3], scale: f64 },
    /// Bands of width `scale` along `axis`.
    Stripes { a: [f64; 3], b: [f64; 3], scale: f64, axis: usize },
}

impl Texture {
    fn color(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let cell = |v: f64, s: f64| (v / s).floor() as i64;
        match *self {
            Texture::Solid(c) => Vector3::from(c),
            Texture::Checker { a, b, scale } => {
                let k = cell(p.x, scale) + cell(p.y, scale) + cell(p.z, scale);
                Vector3::from(if k.rem_euclid(2) == 0 { a } else { b })
            }
            Texture::Stripes { a, b, scale, axis } => {
                Vector3::from(if cell(p[axis], scale).rem_euclid(2) == 0 { a } else { b })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

/// Camera pose control point; angles in radians, applied as yaw (about y),
/// then pitch (about x), then roll (about z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub translation: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Keyframe {
    pub const IDENTITY: Keyframe = Keyframe {
        translation: [0.0; 3],
        yaw: 0.0,
        pitch: 0.0,
        roll: 0.0,
    };

    fn to_array(self) -> [f64; 6] {
        let t = self.translation;
        [t[0], t[1], t[2], self.yaw, self.pitch, self.roll]
    }

    fn from_array(a: [f64; 6]) -> Self {
        Self {
            translation: [a[0], a[1], a[2]],
            yaw: a[3],
            pitch: a[4],
            roll: a[5],
        }
    }

    fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::y_axis(), self.yaw)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), self.pitch)
            * Rotation3::from_axis_angle(&Vector3::z_axis(), self.roll)
    }
}

/// Everything needed to render a sequence deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Catmull-Rom control points, traversed uniformly over the frames. The
    /// first must be the identity so that frame 1 defines the world frame.
    pub keyframes: Vec<Keyframe>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Horizontal and vertical field of view, radians.
    pub fov: [f64; 2],
    /// Number of tracked points.
    pub tracks: usize,
    /// Rays travelling further than this count as misses.
    pub far: f64,
    pub seed: u64,
}

/// Generator settings for random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tracks: usize,
    /// Horizontal field of view in degrees; the vertical one follows from the
    /// aspect ratio.
    pub fov_degrees: f64,
    pub keyframes: usize,
    /// Largest forward camera displacement per keyframe, scene units. The
    /// camera walks forward along its heading by 0.5 to 1 step.
    pub step: f64,
    /// Largest sideways and vertical displacement per keyframe as a
    /// fraction of `step`.
    pub jitter: f64,
    /// Largest rotation per keyframe, radians.
    pub turn: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 10,
            height: 32,
            width: 32,
            tracks: 32,
            fov_degrees: 60.0,
            keyframes: 4,
            step: 0.35,
            jitter: 0.25,
            turn: 0.12,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene needs at least one frame and pixel"));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return Err(Error::invalid(format!("field of view {} outside (0, 180)", self.fov_degrees)));
        }
        if self.keyframes == 0 {
            return Err(Error::invalid("degenerate trajectory: no keyframes"));
        }
        if !(self.step >= 0.0 && self.jitter >= 0.0 && self.turn >= 0.0) {
            return Err(Error::invalid("trajectory step, jitter and turn must be non-negative"));
        }
        Ok(())
    }

    pub fn fov(&self) -> [f64; 2] {
        let h = self.fov_degrees.to_radians();
        let v = 2.0 * ((h / 2.0).tan() * self.height as f64 / self.width as f64).atan();
        [h, v]
    }
}

fn rgb<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)]
}

fn texture<R: Rng>(rng: &mut R) -> Texture {
    let (a, b) = (rgb(rng), rgb(rng));
    match rng.random_range(0..3) {
        0 => Texture::Checker { a, b, scale: rng.random_range(0.3..0.8) },
        1 => Texture::Stripes { a, b, scale: rng.random_range(0.2..0.6), axis: rng.random_range(0..3) },
        _ => Texture::Solid(a),
    }
}

impl SceneSpec {
    /// A textured room with a few spheres and boxes and a smooth random
    /// camera path.
    pub fn random(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // y points down, so the floor sits at positive y.
        let walls = [
            ([0.0, 1.6, 0.0], [0.0, -1.0, 0.0]),
            ([0.0, -2.2, 0.0], [0.0, 1.0, 0.0]),
            ([-3.5, 0.0, 0.0], [1.0, 0.0, 0.0]),
            ([3.5, 0.0, 0.0], [-1.0, 0.0, 0.0]),
            ([0.0, 0.0, 8.0], [0.0, 0.0, -1.0]),
            ([0.0, 0.0, -3.0], [0.0, 0.0, 1.0]),
        ];
        let mut primitives: Vec<Primitive> = walls
            .iter()
            .map(|&(point, normal)| Primitive {
                shape: Shape::Plane { point, normal },
                texture: texture(&mut rng),
            })
            .collect();
        for _ in 0..rng.random_range(2..=4) {
            let c = [rng.random_range(-1.8..1.8), rng.random_range(-0.8..1.0), rng.random_range(2.5..6.0)];
            let shape = if rng.random_bool(0.5) {
                Shape::Sphere { center: c, radius: rng.random_range(0.3..0.8) }
            } else {
                let h = [rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)];
                Shape::Cuboid {
                    min: [c[0] - h[0], c[1] - h[1], c[2] - h[2]],
                    max: [c[0] + h[0], c[1] + h[1], c[2] + h[2]],
                }
            };
            primitives.push(Primitive { shape, texture: texture(&mut rng) });
        }

        let mut keyframes = vec![Keyframe::IDENTITY];
        let mut k = [0.0; 6];
        let side = cfg.step * cfg.jitter;
        let sym = |rng: &mut ChaCha8Rng, lim: f64| if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
        for _ in 1..cfg.keyframes {
            for v in &mut k[3..] {
                *v += sym(&mut rng, cfg.turn);
            }
            let forward = if cfg.step > 0.0 { rng.random_range(0.5 * cfg.step..=cfg.step) } else { 0.0 };
            let (dx, dy) = (sym(&mut rng, side), sym(&mut rng, side));
            // Walk along the current heading.
            let (s, c) = k[3].sin_cos();
            k[0] += c * dx + s * forward;
            k[1] += dy;
            k[2] += -s * dx + c * forward;
            // Stay well inside the room.
            k[0] = k[0].clamp(-1.5, 1.5);
            k[1] = k[1].clamp(-1.0, 0.8);
            k[2] = k[2].clamp(-1.5, 1.5);
            keyframes.push(Keyframe::from_array(k));
        }

        Ok(Self {
            primitives,
            keyframes,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            fov: cfg.fov(),
            tracks: cfg.tracks,
            far: 30.0,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.keyframes.is_empty() {
            return Err(Error::invalid("degenerate trajectory: no keyframes"));
        }
        if self.keyframes[0] != Keyframe::IDENTITY {
            return Err(Error::invalid("the first keyframe must be the identity pose"));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene needs at least one frame and pixel"));
        }
        CameraPose::identity(self.fov).validate()?;
        if !(self.far > 0.0) {
            return Err(Error::invalid("far plane must be positive"));
        }
        Ok(())
    }

    /// Camera pose of 0-based frame `t`.
    pub fn pose(&self, t: usize) -> CameraPose {
        let k = self.keyframe_at(t);
        let pose = CameraPose::from_rt(k.rotation().matrix(), &Vector3::from(k.translation), self.fov);
        quantize(pose)
    }

    fn keyframe_at(&self, t: usize) -> Keyframe {
        let n = self.keyframes.len();
        if n == 1 || self.frames == 1 || t == 0 {
            return self.keyframes[0];
        }
        let s = t as f64 * (n - 1) as f64 / (self.frames - 1) as f64;
        let i = (s.floor() as usize).min(n - 2);
        let u = s - i as f64;
        let at = |j: isize| self.keyframes[j.clamp(0, n as isize - 1) as usize].to_array();
        let (p0, p1, p2, p3) = (at(i as isize - 1), at(i as isize), at(i as isize + 1), at(i as isize + 2));
        let mut out = [0.0; 6];
        for c in 0..6 {
            out[c] = 0.5
                * (2.0 * p1[c]
                    + (p2[c] - p0[c]) * u
                    + (2.0 * p0[c] - 5.0 * p1[c] + 4.0 * p2[c] - p3[c]) * u * u
                    + (3.0 * p1[c] - p0[c] - 3.0 * p2[c] + p3[c]) * u * u * u);
        }
        Keyframe::from_array(out)
    }
}

/// Reverses the last axis of a `[.., W]` tensor.
fn flip_columns(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("non-scalar");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Rounds every component through f32 so stored poses read back exactly.
fn quantize(p: CameraPose) -> CameraPose {
    let q = |v: f64| v as f32 as f64;
    CameraPose {
        translation: p.translation.map(q),
        rotation: p.rotation.map(q),
        fov: p.fov.map(q),
    }
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    /// Ray parameter; equals camera-frame depth because rays have unit z.
    depth: f64,
    point: Vector3<f64>,
    normal: Vector3<f64>,
    primitive: usize,
}

const EPS: f64 = 1e-9;

fn intersect(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    match *shape {
        Shape::Plane { point, normal } => {
            let n = Vector3::from(normal);
            let den = n.dot(d);
            if den.abs() < 1e-12 {
                return None;
            }
            let s = n.dot(&(Vector3::from(point) - o)) / den;
            (s > EPS).then_some((s, n))
        }
        Shape::Sphere { center, radius } => {
            let c = Vector3::from(center);
            let oc = o - c;
            let a = d.dot(d);
            let b = oc.dot(d);
            let disc = b * b - a * (oc.dot(&oc) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let r = disc.sqrt();
            let s = [(-b - r) / a, (-b + r) / a].into_iter().find(|&s| s > EPS)?;
            Some((s, (o + d * s - c) / radius))
        }
        Shape::Cuboid { min, max } => {
            let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut axis_near, mut axis_far) = (0, 0);
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > near {
                    near = t0;
                    axis_near = a;
                }
                if t1 < far {
                    far = t1;
                    axis_far = a;
                }
            }
            if near > far {
                return None;
            }
            let (s, axis) = if near > EPS {
                (near, axis_near)
            } else if far > EPS {
                (far, axis_far)
            } else {
                return None;
            };
            let mut n = Vector3::zeros();
            n[axis] = -d[axis].signum();
            Some((s, n))
        }
    }
}

/// Renders sequences from a [`SceneSpec`].
pub struct Renderer<'a> {
    spec: &'a SceneSpec,
    k: Intrinsics,
}

const LIGHT: [f64; 3] = [-0.36, -0.8, -0.48];

impl<'a> Renderer<'a> {
    pub fn new(spec: &'a SceneSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            k: Intrinsics::from_fov(spec.fov, spec.width, spec.height),
        })
    }

    fn cast(&self, pose: &CameraPose, u: f64, v: f64) -> Option<Hit> {
        let o = pose.translation_vec();
        let d = pose.rotation_matrix() * self.k.ray(u, v);
        let mut best: Option<Hit> = None;
        for (i, p) in self.spec.primitives.iter().enumerate() {
            if let Some((s, n)) = intersect(&p.shape, &o, &d) {
                if s < self.spec.far && best.is_none_or(|b| s < b.depth) {
                    best = Some(Hit {
                        depth: s,
                        point: o + d * s,
                        normal: n,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> Vector3<f64> {
        let l = Vector3::from(LIGHT).normalize();
        let lambert = 0.35 + 0.65 * hit.normal.dot(&l).abs();
        self.spec.primitives[hit.primitive].texture.color(&hit.point) * lambert
    }

    pub fn render_frame(&self, t: usize) -> FrameImage {
        let (h, w) = (self.spec.height, self.spec.width);
        let hw = h * w;
        let pose = self.spec.pose(t);
        let mut out = FrameImage {
            image: Tensor::zeros(vec![3, h, w]),
            depth: Tensor::zeros(vec![h, w]),
            points: Tensor::zeros(vec![3, h, w]),
            valid: Tensor::zeros(vec![h, w]),
            pose,
        };
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                let Some(hit) = self.cast(&pose, u as f64, v as f64) else {
                    continue;
                };
                let c = self.shade(&hit);
                for ch in 0..3 {
                    out.image.data_mut()[ch * hw + i] = c[ch] as f32;
                    out.points.data_mut()[ch * hw + i] = hit.point[ch] as f32;
                }
                out.depth.data_mut()[i] = hit.depth as f32;
                out.valid.data_mut()[i] = 1.0;
            }
        }
        out
    }

    /// Frame-1 surface points behind random sub-pixel positions.
    fn track_points(&self) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x7ac4_5eed);
        let pose = self.spec.pose(0);
        let (wmax, hmax) = ((self.spec.width - 1) as f64, (self.spec.height - 1) as f64);
        let mut pts = Vec::with_capacity(self.spec.tracks);
        let mut attempts = 0;
        while pts.len() < self.spec.tracks && attempts < 100 * self.spec.tracks.max(1) {
            attempts += 1;
            let u = if wmax > 0.0 { rng.random_range(0.0..=wmax) } else { 0.0 };
            let v = if hmax > 0.0 { rng.random_range(0.0..=hmax) } else { 0.0 };
            if let Some(hit) = self.cast(&pose, u, v) {
                pts.push(hit.point);
            }
        }
        pts
    }

    /// Projected position and visibility of a world point in frame `pose`.
    /// Visible means in bounds, in front, and the first surface along the
    /// pixel's ray.
    fn observe(&self, pose: &CameraPose, x: &Vector3<f64>) -> ([f64; 2], bool) {
        match project(x, pose, &self.k) {
            Some((u, v, z)) => {
                let visible = self.k.in_bounds(u, v)
                    && self
                        .cast(pose, u, v)
                        .is_some_and(|hit| (hit.depth - z).abs() <= VISIBILITY_TOLERANCE * z.max(1.0));
                ([u, v], visible)
            }
            None => ([-1.0, -1.0], false),
        }
    }

    /// Depth the renderer sees at a sub-pixel position, if anything is hit.
    pub fn depth_at(&self, t: usize, u: f64, v: f64) -> Option<f64> {
        self.cast(&self.spec.pose(t), u, v).map(|h| h.depth)
    }
}

/// Relative depth agreement required for a track to count as visible.
pub const VISIBILITY_TOLERANCE: f64 = 1e-6;

/// Per-pixel buffers of one rendered frame.
#[derive(Clone, Debug)]
pub struct FrameImage {
    pub image: Tensor,
    pub depth: Tensor,
    pub points: Tensor,
    pub valid: Tensor,
    pub pose: CameraPose,
}

/// Ground truth for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrameGt {
    /// `3×H×W`, colours in `[0, 1]`.
    pub image: Tensor,
    /// `H×W` camera-frame depth; 0 where nothing was hit.
    pub depth: Tensor,
    /// `3×H×W` hit points in frame-1 coordinates.
    pub points: Tensor,
    pub pose: CameraPose,
    /// `M×2` pixel positions `(x, y)` of the tracked points; `(-1, -1)` when
    /// behind the camera.
    pub tracks: Tensor,
    /// `M` flags, 1 for visible.
    pub visibility: Tensor,
    /// `H×W` flags, 1 where a surface was hit.
    pub valid: Tensor,
}

/// A labelled image sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<SceneFrameGt>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.depth.shape()[0])
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.depth.shape()[1])
    }

    pub fn track_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.visibility.numel())
    }

    /// Frame-1 track positions, the query points of the track head.
    pub fn queries(&self) -> Vec<[f64; 2]> {
        self.frames.first().map_or_else(Vec::new, |f| {
            f.tracks.data().chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect()
        })
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.frames.iter().map(|f| f.image.clone()).collect()
    }

    /// The first `n` frames.
    pub fn prefix(&self, n: usize) -> Sequence {
        Sequence {
            frames: self.frames[..n.min(self.frames.len())].to_vec(),
        }
    }

    /// The left-right mirror image of the sequence: every image column is
    /// reversed and world x is negated. Mirrored scenes render exactly like
    /// this, so the labels stay consistent.
    pub fn mirrored(&self) -> Sequence {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let w = f.valid.shape()[1] as f32;
                let mut points = flip_columns(&f.points);
                let hw = f.valid.numel();
                for v in &mut points.data_mut()[..hw] {
                    *v = -*v;
                }
                let mut tracks = f.tracks.clone();
                for uv in tracks.data_mut().chunks_mut(2) {
                    // Points behind the camera keep their placeholder.
                    if *uv != [-1.0, -1.0] {
                        uv[0] = w - 1.0 - uv[0];
                    }
                }
                let [x, y, z, qw] = f.pose.rotation;
                let [tx, ty, tz] = f.pose.translation;
                SceneFrameGt {
                    image: flip_columns(&f.image),
                    depth: flip_columns(&f.depth),
                    points,
                    pose: CameraPose { rotation: [x, -y, -z, qw], translation: [-tx, ty, tz], fov: f.pose.fov },
                    tracks,
                    visibility: f.visibility.clone(),
                    valid: flip_columns(&f.valid),
                }
            })
            .collect();
        Sequence { frames }
    }

    /// Frames `start..start + len` re-expressed with frame `start` as the
    /// world frame. Tracks hidden in that frame are dropped, so the first
    /// frame's track positions remain valid queries.
    pub fn window(&self, start: usize, len: usize) -> Result<Sequence> {
        if len == 0 || start + len > self.len() {
            return Err(Error::invalid(format!(
                "window {start}..{} outside a {}-frame sequence",
                start + len,
                self.len()
            )));
        }
        if start == 0 {
            return Ok(self.prefix(len));
        }
        let origin = self.frames[start].pose;
        let keep: Vec<usize> = self.frames[start]
            .visibility
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(j, _)| j)
            .collect();
        let frames = self.frames[start..start + len]
            .iter()
            .map(|f| {
                let hw = f.valid.numel();
                let mut points = f.points.clone();
                let data = points.data_mut();
                for i in (0..hw).filter(|&i| f.valid.data()[i] > 0.5) {
                    let p = Vector3::new(data[i] as f64, data[hw + i] as f64, data[2 * hw + i] as f64);
                    let q = origin.world_to_camera(&p);
                    for c in 0..3 {
                        data[c * hw + i] = q[c] as f32;
                    }
                }
                let tracks: Vec<f32> = keep.iter().flat_map(|&j| [f.tracks.data()[2 * j], f.tracks.data()[2 * j + 1]]).collect();
                let visibility: Vec<f32> = keep.iter().map(|&j| f.visibility.data()[j]).collect();
                Ok(SceneFrameGt {
                    image: f.image.clone(),
                    depth: f.depth.clone(),
                    points,
                    pose: f.pose.relative_to(&origin),
                    tracks: Tensor::new(vec![keep.len(), 2], tracks)?,
                    visibility: Tensor::new(vec![keep.len()], visibility)?,
                    valid: f.valid.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sequence { frames })
    }
}

/// Ray-casts every frame of `spec` and propagates the tracks.
pub fn render_sequence(spec: &SceneSpec) -> Result<Sequence> {
    let r = Renderer::new(spec)?;
    let points = r.track_points();
    let m = points.len();
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let img = r.render_frame(t);
        let mut tracks = Tensor::zeros(vec![m, 2]);
        let mut vis = Tensor::zeros(vec![m]);
        for (j, x) in points.iter().enumerate() {
            let ([u, v], visible) = r.observe(&img.pose, x);
            tracks.data_mut()[2 * j] = u as f32;
            tracks.data_mut()[2 * j + 1] = v as f32;
            vis.data_mut()[j] = if visible { 1.0 } else { 0.0 };
        }
        frames.push(SceneFrameGt {
            image: img.image,
            depth: img.depth,
            points: img.points,
            pose: img.pose,
            tracks,
            visibility: vis,
            valid: img.valid,
        });
    }
    Ok(Sequence { frames })
}

/// `count` random scenes, seeds `seed, seed + 1, ...`.
pub fn generate(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<Sequence>> {
    (0..count as u64)
        .map(|i| render_sequence(&SceneSpec::random(cfg, seed.wrapping_add(i))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catmull_rom_passes_through_keyframes() {
        let mut spec = SceneSpec::random(&SynthConfig { frames: 7, keyframes: 4, ..Default::default() }, 3).unwrap();
        spec.tracks = 0;
        // 7 frames over 3 segments: frames 0, 2, 4, 6 land on keyframes.
        for (t, k) in [(0, 0), (2, 1), (4, 2), (6, 3)] {
            let got = spec.keyframe_at(t).to_array();
            let want = spec.keyframes[k].to_array();
            assert!(got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12), "frame {t}");
        }
    }

    #[test]
    fn box_normals_face_the_ray() {
        let shape = Shape::Cuboid { min: [-1.0; 3], max: [1.0; 3] };
        let (s, n) = intersect(&shape, &Vector3::new(0.0, 0.0, -5.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((s - 4.0).abs() < 1e-12);
        assert_eq!(n, Vector3::new(0.0, 0.0, -1.0));
        let (s, _) = intersect(&shape, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
