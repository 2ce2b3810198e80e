use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::kernels::{pixel_shuffle_index, sign};
use crate::nn::{Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Default field of view the camera head starts from (60 degrees).
const FOV_INIT: f64 = PI / 3.0;

/// Camera token → translation, unit quaternion (`w ≥ 0`) and field of view.
#[derive(Clone, Debug)]
pub struct CameraHead {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl CameraHead {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let norm = LayerNorm::new(store, "camera.norm", cfg.dim)?;
        let fc1 = Linear::new(store, "camera.fc1", cfg.dim, cfg.camera_hidden, true, rng)?;
        let fc2 = Linear::new(store, "camera.fc2", cfg.camera_hidden, 9, true, rng)?;
        // Start near the identity rotation and a typical field of view.
        let b = fc2.b.expect("camera head has a bias");
        let logit = (FOV_INIT / PI / (1.0 - FOV_INIT / PI)).ln();
        let bias = store.get_mut(b).data_mut();
        bias[6] = T::one();
        bias[7] = T::lit(logit);
        bias[8] = T::lit(logit);
        Ok(Self { norm, fc1, fc2 })
    }

    /// `rows × C` camera tokens to `rows × 9` pose vectors.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, tokens: Var) -> Result<Var> {
        let h = self.norm.forward(ctx, tokens)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        let raw = self.fc2.forward(ctx, h)?;
        let t = ctx.g.slice_cols(raw, 0, 3)?;
        let q = ctx.g.slice_cols(raw, 3, 4)?;
        let q = ctx.g.normalize_rows(q)?;
        // Sign flip to the w ≥ 0 hemisphere; piecewise constant, so it is
        // applied as a constant factor.
        let rows = ctx.value(q).dims2().0;
        let flips = Tensor::from_fn(vec![rows, 4], |i| {
            let w = ctx.value(q).data()[(i / 4) * 4 + 3];
            if w < T::zero() { -T::one() } else { T::one() }
        });
        let flips = ctx.constant(flips);
        let q = ctx.g.mul(q, flips)?;
        let f = ctx.g.slice_cols(raw, 7, 2)?;
        let f = ctx.g.sigmoid(f);
        let f = ctx.g.scale(f, T::lit(PI));
        ctx.g.concat_cols(&[t, q, f])
    }
}

/// Dense outputs of the geometry head for one frame.
#[derive(Clone, Copy, Debug)]
pub struct GeometryOutputs {
    /// `3×H×W`.
    pub point_map: Var,
    /// `H×W`.
    pub point_conf: Var,
    pub depth: Var,
    pub depth_conf: Var,
    /// `HW × F`.
    pub track_features: Var,
}

/// Patch tokens → per-pixel maps, by two learned sub-pixel upsampling stages
/// (a stride-2 stage, then the remaining `p/2` factor).
#[derive(Clone, Debug)]
pub struct GeometryHead {
    norm: LayerNorm,
    up1: Linear,
    up2: Linear,
    shuffle1: Arc<Vec<usize>>,
    shuffle2: Arc<Vec<usize>>,
}

const POINT: usize = 0;
const POINT_CONF: usize = 3;
const DEPTH: usize = 4;
const DEPTH_CONF: usize = 5;
const FEATURES: usize = 6;

impl GeometryHead {
    pub fn out_channels(cfg: &ModelConfig) -> usize {
        FEATURES + cfg.track_dim
    }

    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (gh, gw) = cfg.grid();
        let c1 = cfg.head_channels;
        let s2 = cfg.patch_size / 2;
        let out = Self::out_channels(cfg);
        Ok(Self {
            norm: LayerNorm::new(store, "geometry.norm", cfg.dim)?,
            up1: Linear::new(store, "geometry.up1", cfg.dim, 4 * c1, true, rng)?,
            up2: Linear::new(store, "geometry.up2", c1, s2 * s2 * out, true, rng)?,
            shuffle1: Arc::new(pixel_shuffle_index(gh, gw, 2, c1)),
            shuffle2: Arc::new(pixel_shuffle_index(2 * gh, 2 * gw, s2, out)),
        })
    }

    /// `patches × C` decoded tokens of one frame, fused with the same
    /// patches' encoder tokens, to dense maps.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, tokens: Var, skip: Var) -> Result<GeometryOutputs> {
        let (h, w) = (cfg.image_height, cfg.image_width);
        let hw = h * w;
        let c1 = cfg.head_channels;
        let out = Self::out_channels(cfg);

        let x = ctx.g.add(tokens, skip)?;
        let x = self.norm.forward(ctx, x)?;
        let x = self.up1.forward(ctx, x)?;
        let x = ctx.g.gather(x, Arc::clone(&self.shuffle1), vec![4 * cfg.patches(), c1])?;
        let x = ctx.g.gelu(x);
        let x = self.up2.forward(ctx, x)?;
        let maps = ctx.g.gather(x, Arc::clone(&self.shuffle2), vec![hw, out])?;

        // Points: sign(x)·(exp|x| − 1), which reaches large coordinates
        // quickly while staying linear near zero.
        let raw = ctx.g.slice_cols(maps, POINT, 3)?;
        let signs = ctx.value(raw).map(sign);
        let signs = ctx.constant(signs);
        let p = ctx.g.abs(raw);
        let p = ctx.g.exp(p);
        let p = ctx.g.add_scalar(p, -T::one());
        let p = ctx.g.mul(p, signs)?;
        let p = ctx.g.transpose(p)?;
        let point_map = ctx.g.reshape(p, vec![3, h, w])?;

        let conf = |ctx: &mut Ctx<'_, T>, col: usize| -> Result<Var> {
            let c = ctx.g.slice_cols(maps, col, 1)?;
            let c = ctx.g.exp(c);
            let c = ctx.g.add_scalar(c, T::one());
            ctx.g.reshape(c, vec![h, w])
        };
        let point_conf = conf(ctx, POINT_CONF)?;
        let depth_conf = conf(ctx, DEPTH_CONF)?;

        let d = ctx.g.slice_cols(maps, DEPTH, 1)?;
        let d = ctx.g.exp(d);
        let depth = ctx.g.reshape(d, vec![h, w])?;

        let track_features = ctx.g.slice_cols(maps, FEATURES, cfg.track_dim)?;
        Ok(GeometryOutputs {
            point_map,
            point_conf,
            depth,
            depth_conf,
            track_features,
        })
    }
}

/// Fixed sampling operators for one set of query points.
#[derive(Clone, Debug)]
pub struct TrackSampler<T: Real> {
    /// `M × HW` bilinear weights at the query positions.
    weights: Tensor<T>,
    /// `HW × 2` pixel coordinates `(x, y)`.
    coords: Tensor<T>,
}

/// Correlates frame-1 query features with each frame's dense features; the
/// soft-argmax of the correlation gives the position, and a small MLP on the
/// correlation peak gives the visibility logit.
#[derive(Clone, Debug)]
pub struct TrackHead {
    log_temperature: ParamId,
    vis1: Linear,
    vis2: Linear,
}

impl TrackHead {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        Ok(Self {
            log_temperature: store.add("track.log_temperature", Tensor::full(vec![1], T::one()))?,
            vis1: Linear::new(store, "track.vis1", 1, 8, true, rng)?,
            vis2: Linear::new(store, "track.vis2", 8, 1, true, rng)?,
        })
    }

    /// `None` when there are no queries.
    pub fn sampler<T: Real>(&self, cfg: &ModelConfig, queries: &[[f64; 2]]) -> Result<Option<TrackSampler<T>>> {
        if queries.is_empty() {
            return Ok(None);
        }
        let (h, w) = (cfg.image_height, cfg.image_width);
        let mut weights = Tensor::zeros(vec![queries.len(), h * w]);
        for (i, &[x, y]) in queries.iter().enumerate() {
            if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
                return Err(Error::invalid(format!("track query ({x}, {y}) outside the image")));
            }
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let row = &mut weights.data_mut()[i * h * w..(i + 1) * h * w];
            for (yy, xx, wt) in [
                (y0, x0, (1.0 - fx) * (1.0 - fy)),
                (y0, x1, fx * (1.0 - fy)),
                (y1, x0, (1.0 - fx) * fy),
                (y1, x1, fx * fy),
            ] {
                row[yy * w + xx] += T::lit(wt);
            }
        }
        let coords = Tensor::from_fn(vec![h * w, 2], |i| {
            let p = i / 2;
            T::lit(if i % 2 == 0 { (p % w) as f64 } else { (p / w) as f64 })
        });
        Ok(Some(TrackSampler { weights, coords }))
    }

    /// Bilinearly samples `M × F` query features from frame-1 features.
    pub fn sample_queries<T: Real>(&self, ctx: &mut Ctx<'_, T>, s: &TrackSampler<T>, features: Var) -> Result<Var> {
        let wts = ctx.constant(s.weights.clone());
        ctx.g.matmul(wts, features)
    }

    /// Returns `M × 2` positions and `M × 1` visibility logits.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        s: &TrackSampler<T>,
        queries: Var,
        features: Var,
    ) -> Result<(Var, Var)> {
        let ft = ctx.g.transpose(features)?;
        let corr = ctx.g.matmul(queries, ft)?;
        let temp = ctx.p(self.log_temperature);
        let temp = ctx.g.exp(temp);
        let corr = ctx.g.scale_by(corr, temp)?;
        let prob = ctx.g.softmax(corr, None)?;
        let coords = ctx.constant(s.coords.clone());
        let tracks = ctx.g.matmul(prob, coords)?;
        let peak = ctx.g.max_lastdim(corr)?;
        let v = self.vis1.forward(ctx, peak)?;
        let v = ctx.g.gelu(v);
        let vis = self.vis2.forward(ctx, v)?;
        Ok((tracks, vis))
    }
}
