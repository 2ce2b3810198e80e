//! Patch encoder, alternating spatial/temporal decoder and task heads.

mod checkpoint;
mod heads;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use heads::{CameraHead, GeometryHead, TrackHead};

use crate::attention::{
    cached_cross_attention, global_attention, spatial_self_attention, temporal_causal_attention,
    AttentionParams, FrameKv, KvCache,
};
use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::graph::Var;
use crate::kernels::patchify;
use crate::nn::{Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    /// Token width C.
    pub dim: usize,
    /// Decoder depth; each layer is spatial attention, temporal attention, MLP.
    pub layers: usize,
    pub heads: usize,
    /// Largest frame index the temporal embedding covers.
    pub max_frames: usize,
    pub mlp_ratio: usize,
    /// Channels after the first upsampling stage of the geometry head.
    pub head_channels: usize,
    /// Dense track feature width.
    pub track_dim: usize,
    pub camera_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            dim: 64,
            layers: 4,
            heads: 4,
            max_frames: 64,
            mlp_ratio: 4,
            head_channels: 32,
            track_dim: 8,
            camera_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p < 2 || !p.is_multiple_of(2) {
            return Err(Error::invalid(format!("patch size {p} must be even and at least 2")));
        }
        if self.image_height == 0 || !self.image_height.is_multiple_of(p) || self.image_width == 0 || !self.image_width.is_multiple_of(p) {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "token dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        for (name, v) in [
            ("layers", self.layers),
            ("max_frames", self.max_frames),
            ("mlp_ratio", self.mlp_ratio),
            ("head_channels", self.head_channels),
            ("track_dim", self.track_dim),
            ("camera_hidden", self.camera_hidden),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Tokens per frame: one per patch plus the camera token.
    pub fn tokens_per_frame(&self) -> usize {
        self.patches() + 1
    }

    pub fn pixels(&self) -> usize {
        self.image_height * self.image_width
    }

    /// `key=value` lines, one per field, in declaration order.
    pub fn to_kv(&self) -> String {
        self.fields()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad value in config line {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn fields(&self) -> [(&'static str, usize); 11] {
        [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_size", self.patch_size),
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_frames", self.max_frames),
            ("mlp_ratio", self.mlp_ratio),
            ("head_channels", self.head_channels),
            ("track_dim", self.track_dim),
            ("camera_hidden", self.camera_hidden),
        ]
    }

    fn set(&mut self, key: &str, v: usize) -> Result<()> {
        let slot = match key {
            "image_height" => &mut self.image_height,
            "image_width" => &mut self.image_width,
            "patch_size" => &mut self.patch_size,
            "dim" => &mut self.dim,
            "layers" => &mut self.layers,
            "heads" => &mut self.heads,
            "max_frames" => &mut self.max_frames,
            "mlp_ratio" => &mut self.mlp_ratio,
            "head_channels" => &mut self.head_channels,
            "track_dim" => &mut self.track_dim,
            "camera_hidden" => &mut self.camera_hidden,
            other => return Err(Error::Format(format!("unknown config key {other:?}"))),
        };
        *slot = v;
        Ok(())
    }
}

/// How temporal layers mix frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    /// Frame `t` sees frames `1..=t` (student).
    Causal,
    /// Every frame sees every frame (teacher).
    Global,
}

/// Encoder output for one frame: `tokens_per_frame × dim`, camera token first.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokens<T: Real = f32> {
    pub tokens: Tensor<T>,
    /// 1-based time step.
    pub frame_index: usize,
}

/// Per-frame model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T: Real = f32> {
    pub pose: CameraPose,
    /// `3×H×W`, world (first camera) coordinates.
    pub point_map: Tensor<T>,
    /// `H×W`, ≥ 1.
    pub point_conf: Tensor<T>,
    /// `H×W`, camera-frame depth.
    pub depth: Tensor<T>,
    /// `H×W`, ≥ 1.
    pub depth_conf: Tensor<T>,
    /// `M×2` pixel coordinates `(x, y)`.
    pub tracks: Tensor<T>,
    /// `M` logits.
    pub visibility_logits: Tensor<T>,
}

/// Head outputs of one frame as graph values.
#[derive(Clone, Copy, Debug)]
pub struct FrameOutputs {
    /// `1×9`.
    pub pose: Var,
    pub point_map: Var,
    pub point_conf: Var,
    pub depth: Var,
    pub depth_conf: Var,
    /// `M×2`, absent when there are no queries.
    pub tracks: Option<Var>,
    /// `M×1`.
    pub visibility_logits: Option<Var>,
}

/// Graph values for a whole sequence.
#[derive(Clone, Debug)]
pub struct SequenceOutputs {
    /// `(T·N) × C` decoded geometry tokens.
    pub tokens: Var,
    pub frames: Vec<FrameOutputs>,
}

#[derive(Clone, Debug)]
struct Encoder {
    patch: Linear,
    position: ParamId,
    camera_first: ParamId,
    camera_rest: ParamId,
    time: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    norm_spatial: LayerNorm,
    spatial: AttentionParams,
    norm_temporal: LayerNorm,
    temporal: AttentionParams,
    norm_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn mlp<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm_mlp.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        let h = self.fc2.forward(ctx, h)?;
        ctx.g.add(x, h)
    }

    fn spatial<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, tokens: usize) -> Result<Var> {
        let h = self.norm_spatial.forward(ctx, x)?;
        let h = spatial_self_attention(ctx, &self.spatial, h, tokens)?;
        ctx.g.add(x, h)
    }
}

/// The full network. Teacher and student share this type and parameter
/// layout; they differ only in the [`AttnMode`] used at forward time.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Encoder,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    camera: CameraHead,
    geometry: GeometryHead,
    track: TrackHead,
}

impl<T: Real> Model<T> {
    /// Randomly initialised model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.dim;
        let p = config.patch_size;

        let encoder = Encoder {
            patch: Linear::new(&mut store, "encoder.patch", 3 * p * p, c, true, &mut rng)?,
            position: store.add("encoder.position", Tensor::randn(vec![config.patches(), c], 1.0, &mut rng))?,
            camera_first: store.add("encoder.camera_first", Tensor::randn(vec![1, c], 0.1, &mut rng))?,
            camera_rest: store.add("encoder.camera_rest", Tensor::randn(vec![1, c], 0.1, &mut rng))?,
            time: store.add("encoder.time", Tensor::randn(vec![config.max_frames, c], 0.1, &mut rng))?,
        };

        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("decoder.{l}.{s}");
            let hidden = c * config.mlp_ratio;
            blocks.push(Block {
                norm_spatial: LayerNorm::new(&mut store, &n("norm_spatial"), c)?,
                spatial: AttentionParams::new(&mut store, &n("spatial"), c, config.heads, &mut rng)?,
                norm_temporal: LayerNorm::new(&mut store, &n("norm_temporal"), c)?,
                temporal: AttentionParams::new(&mut store, &n("temporal"), c, config.heads, &mut rng)?,
                norm_mlp: LayerNorm::new(&mut store, &n("norm_mlp"), c)?,
                fc1: Linear::new(&mut store, &n("fc1"), c, hidden, true, &mut rng)?,
                fc2: Linear::new(&mut store, &n("fc2"), hidden, c, true, &mut rng)?,
            });
        }
        let final_norm = LayerNorm::new(&mut store, "decoder.final_norm", c)?;
        let camera = CameraHead::new(&mut store, &config, &mut rng)?;
        let geometry = GeometryHead::new(&mut store, &config, &mut rng)?;
        let track = TrackHead::new(&mut store, &mut rng)?;

        Ok(Self {
            config,
            params: store,
            encoder,
            blocks,
            final_norm,
            camera,
            geometry,
            track,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.config.tokens_per_frame()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            params.add(name, t.cast()).expect("names are unique");
        }
        Model {
            config: self.config.clone(),
            params,
            encoder: self.encoder.clone(),
            blocks: self.blocks.clone(),
            final_norm: self.final_norm.clone(),
            camera: self.camera.clone(),
            geometry: self.geometry.clone(),
            track: self.track.clone(),
        }
    }

    /// An empty key/value memory sized for this model.
    pub fn new_cache(&self) -> KvCache<T> {
        let c = &self.config;
        KvCache::new(c.layers, c.tokens_per_frame(), c.heads, c.dim / c.heads)
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let expect = [3, self.config.image_height, self.config.image_width];
        if image.shape() != expect {
            return Err(Error::shape("encode", image.shape(), &expect));
        }
        Ok(())
    }

    fn check_frame_index(&self, frame_index: usize) -> Result<()> {
        if frame_index == 0 || frame_index > self.config.max_frames {
            return Err(Error::invalid(format!(
                "frame index {frame_index} outside 1..={}",
                self.config.max_frames
            )));
        }
        Ok(())
    }

    /// Patch embedding + position embedding, camera token prepended, temporal
    /// index embedding added to every token.
    pub fn encode_var(&self, ctx: &mut Ctx<'_, T>, image: &Tensor<T>, frame_index: usize) -> Result<Var> {
        self.check_image(image)?;
        self.check_frame_index(frame_index)?;
        let cfg = &self.config;
        let p = cfg.patch_size;
        let patches = Tensor::new(
            vec![cfg.patches(), 3 * p * p],
            patchify(image.data(), cfg.image_height, cfg.image_width, p),
        )?;
        let patches = ctx.constant(patches);
        let emb = self.encoder.patch.forward(ctx, patches)?;
        let pos = ctx.p(self.encoder.position);
        let emb = ctx.g.add(emb, pos)?;
        let cam = ctx.p(if frame_index == 1 {
            self.encoder.camera_first
        } else {
            self.encoder.camera_rest
        });
        let tokens = ctx.g.concat_rows(&[cam, emb])?;
        let time = ctx.p(self.encoder.time);
        let t = ctx.g.slice_rows(time, frame_index - 1, 1)?;
        ctx.g.add_row(tokens, t)
    }

    pub fn encode(&self, image: &Tensor<T>, frame_index: usize) -> Result<FrameTokens<T>> {
        let mut ctx = Ctx::inference(&self.params);
        let v = self.encode_var(&mut ctx, image, frame_index)?;
        Ok(FrameTokens {
            tokens: ctx.value(v).clone(),
            frame_index,
        })
    }

    /// Decodes a stacked `(T·N) × C` sequence with every frame present.
    pub fn decode_sequence_var(
        &self,
        ctx: &mut Ctx<'_, T>,
        tokens: Var,
        frame_indices: &[usize],
        mode: AttnMode,
    ) -> Result<Var> {
        if frame_indices.is_empty() || frame_indices.len() > self.config.max_frames {
            return Err(Error::invalid(format!(
                "sequence of {} frames outside 1..={}",
                frame_indices.len(),
                self.config.max_frames
            )));
        }
        let n = self.tokens_per_frame();
        let mut x = tokens;
        for block in &self.blocks {
            x = block.spatial(ctx, x, n)?;
            let h = block.norm_temporal.forward(ctx, x)?;
            let h = match mode {
                AttnMode::Causal => temporal_causal_attention(ctx, &block.temporal, h, frame_indices, n)?,
                AttnMode::Global => global_attention(ctx, &block.temporal, h)?,
            };
            x = ctx.g.add(x, h)?;
            x = block.mlp(ctx, x)?;
        }
        self.final_norm.forward(ctx, x)
    }

    /// Decodes one `N × C` frame against the cached memory. Returns the
    /// geometry tokens and the frame's key/value entries for every layer.
    pub fn decode_frame_var(
        &self,
        ctx: &mut Ctx<'_, T>,
        tokens: Var,
        cache: &KvCache<T>,
    ) -> Result<(Var, Vec<FrameKv<T>>)> {
        self.check_session(cache)?;
        let n = self.tokens_per_frame();
        let mut x = tokens;
        let mut kvs = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            x = block.spatial(ctx, x, n)?;
            let h = block.norm_temporal.forward(ctx, x)?;
            let (h, kv) = cached_cross_attention(ctx, &block.temporal, h, cache, layer)?;
            kvs.push(kv);
            x = ctx.g.add(x, h)?;
            x = block.mlp(ctx, x)?;
        }
        Ok((self.final_norm.forward(ctx, x)?, kvs))
    }

    fn check_session(&self, cache: &KvCache<T>) -> Result<()> {
        let c = &self.config;
        if cache.layer_count() != c.layers
            || cache.tokens_per_frame() != c.tokens_per_frame()
            || cache.heads() != c.heads
            || cache.width() != c.dim
        {
            return Err(Error::invalid(format!(
                "session cache ({} layers, {} tokens, {}x{}) does not match the model",
                cache.layer_count(),
                cache.tokens_per_frame(),
                cache.heads(),
                cache.head_dim()
            )));
        }
        for l in 0..cache.layer_count() {
            if cache.entries(l) != cache.frames() * cache.tokens_per_frame() {
                return Err(Error::invalid(format!("session cache layer {l} is inconsistent")));
            }
        }
        if cache.frames() >= c.max_frames {
            return Err(Error::invalid(format!(
                "session already holds {} frames (max {})",
                cache.frames(),
                c.max_frames
            )));
        }
        Ok(())
    }

    /// Full-sequence decode of already-encoded frames; one geometry token
    /// matrix per frame.
    pub fn decode_training(&self, frames: &[FrameTokens<T>], mode: AttnMode) -> Result<Vec<Tensor<T>>> {
        let mut ctx = Ctx::inference(&self.params);
        let stacked: Vec<&Tensor<T>> = frames.iter().map(|f| &f.tokens).collect();
        if stacked.is_empty() {
            return Err(Error::invalid("decode of an empty sequence"));
        }
        let x = ctx.constant(Tensor::concat_rows(&stacked)?);
        let indices: Vec<usize> = frames.iter().map(|f| f.frame_index).collect();
        let g = self.decode_sequence_var(&mut ctx, x, &indices, mode)?;
        split_frames(ctx.value(g), self.tokens_per_frame())
    }

    /// Decodes the next frame of a stream and appends its key/value entries
    /// to `session` at every temporal layer.
    pub fn decode_streaming(&self, frame: &FrameTokens<T>, session: &mut KvCache<T>) -> Result<Tensor<T>> {
        if frame.frame_index != session.frames() + 1 {
            return Err(Error::invalid(format!(
                "stream expects frame {} but got frame {}",
                session.frames() + 1,
                frame.frame_index
            )));
        }
        let mut ctx = Ctx::inference(&self.params);
        let x = ctx.constant(frame.tokens.clone());
        let (g, kvs) = self.decode_frame_var(&mut ctx, x, session)?;
        session.append(&kvs)?;
        Ok(ctx.value(g).clone())
    }

    /// Encoder, decoder and heads over a whole sequence in one graph.
    /// `queries` are frame-1 pixel positions for the track head.
    pub fn forward_sequence(
        &self,
        ctx: &mut Ctx<'_, T>,
        images: &[Tensor<T>],
        queries: &[[f64; 2]],
        mode: AttnMode,
    ) -> Result<SequenceOutputs> {
        if images.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        let mut encoded = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            encoded.push(self.encode_var(ctx, img, i + 1)?);
        }
        let x = ctx.g.concat_rows(&encoded)?;
        let indices: Vec<usize> = (1..=images.len()).collect();
        let g = self.decode_sequence_var(ctx, x, &indices, mode)?;
        let n = self.tokens_per_frame();
        let sampler = self.track.sampler(&self.config, queries)?;
        let mut frames = Vec::with_capacity(images.len());
        let mut query_features = None;
        for t in 0..images.len() {
            let gt = ctx.g.slice_rows(g, t * n, n)?;
            let et = ctx.g.slice_rows(x, t * n, n)?;
            let (mut out, features) = self.frame_heads(ctx, gt, et)?;
            if let Some(s) = &sampler {
                let q = match query_features {
                    Some(q) => q,
                    None => {
                        let q = self.track.sample_queries(ctx, s, features)?;
                        query_features = Some(q);
                        q
                    }
                };
                let (tracks, vis) = self.track.forward(ctx, s, q, features)?;
                out.tracks = Some(tracks);
                out.visibility_logits = Some(vis);
            }
            frames.push(out);
        }
        Ok(SequenceOutputs { tokens: g, frames })
    }

    /// Camera and geometry heads on one frame's `N × C` decoded tokens `g`
    /// and encoder tokens `e`. Returns the outputs and the `HW × F` dense
    /// track features.
    fn frame_heads(&self, ctx: &mut Ctx<'_, T>, g: Var, e: Var) -> Result<(FrameOutputs, Var)> {
        let cam = ctx.g.slice_rows(g, 0, 1)?;
        let pose = self.camera.forward(ctx, cam)?;
        let patches = ctx.g.slice_rows(g, 1, self.config.patches())?;
        let skip = ctx.g.slice_rows(e, 1, self.config.patches())?;
        let geo = self.geometry.forward(ctx, &self.config, patches, skip)?;
        Ok((
            FrameOutputs {
                pose,
                point_map: geo.point_map,
                point_conf: geo.point_conf,
                depth: geo.depth,
                depth_conf: geo.depth_conf,
                tracks: None,
                visibility_logits: None,
            },
            geo.track_features,
        ))
    }

    /// Offline prediction over a full sequence.
    pub fn predict_sequence(
        &self,
        images: &[Tensor<T>],
        queries: &[[f64; 2]],
        mode: AttnMode,
    ) -> Result<Vec<PredictionSet<T>>> {
        let mut ctx = Ctx::inference(&self.params);
        let out = self.forward_sequence(&mut ctx, images, queries, mode)?;
        out.frames.iter().map(|f| self.extract(&ctx, f, queries.len())).collect()
    }

    /// Like [`Model::predict_sequence`] but also returns the per-frame
    /// geometry tokens.
    pub fn predict_sequence_with_tokens(
        &self,
        images: &[Tensor<T>],
        queries: &[[f64; 2]],
        mode: AttnMode,
    ) -> Result<(Vec<Tensor<T>>, Vec<PredictionSet<T>>)> {
        let mut ctx = Ctx::inference(&self.params);
        let out = self.forward_sequence(&mut ctx, images, queries, mode)?;
        let tokens = split_frames(ctx.value(out.tokens), self.tokens_per_frame())?;
        let preds = out
            .frames
            .iter()
            .map(|f| self.extract(&ctx, f, queries.len()))
            .collect::<Result<_>>()?;
        Ok((tokens, preds))
    }

    fn extract(&self, ctx: &Ctx<'_, T>, f: &FrameOutputs, queries: usize) -> Result<PredictionSet<T>> {
        let pose_vals: Vec<f64> = ctx.value(f.pose).data().iter().map(|v| v.as_f64()).collect();
        let (tracks, vis) = match (f.tracks, f.visibility_logits) {
            (Some(t), Some(v)) => (ctx.value(t).clone(), ctx.value(v).clone().reshape(vec![queries])?),
            _ => (Tensor::zeros(vec![0, 2]), Tensor::zeros(vec![0])),
        };
        Ok(PredictionSet {
            pose: CameraPose::from_vec(&pose_vals)?,
            point_map: ctx.value(f.point_map).clone(),
            point_conf: ctx.value(f.point_conf).clone(),
            depth: ctx.value(f.depth).clone(),
            depth_conf: ctx.value(f.depth_conf).clone(),
            tracks,
            visibility_logits: vis,
        })
    }

    /// Starts an incremental inference session with the given frame-1 track
    /// queries.
    pub fn session(&self, queries: &[[f64; 2]]) -> Result<StreamSession<'_, T>> {
        self.track.sampler::<T>(&self.config, queries)?;
        Ok(StreamSession {
            model: self,
            cache: self.new_cache(),
            queries: queries.to_vec(),
            query_features: None,
        })
    }
}

fn split_frames<T: Real>(tokens: &Tensor<T>, n: usize) -> Result<Vec<Tensor<T>>> {
    let rows = tokens.dims2().0;
    (0..rows / n).map(|t| tokens.slice_rows(t * n, n)).collect()
}

/// Output of one streaming step.
#[derive(Clone, Debug)]
pub struct StreamStep<T: Real = f32> {
    pub tokens: Tensor<T>,
    pub prediction: PredictionSet<T>,
}

/// One incremental inference stream. Owns its key/value cache; frames are
/// consumed strictly in order and never revisited.
pub struct StreamSession<'m, T: Real = f32> {
    model: &'m Model<T>,
    cache: KvCache<T>,
    queries: Vec<[f64; 2]>,
    query_features: Option<Tensor<T>>,
}

impl<'m, T: Real> StreamSession<'m, T> {
    pub fn frames_seen(&self) -> usize {
        self.cache.frames()
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    /// Resumes from a cache snapshot. Track queries that were sampled from
    /// frame 1 must be supplied again as features.
    pub fn resume(model: &'m Model<T>, cache: KvCache<T>, queries: &[[f64; 2]], query_features: Option<Tensor<T>>) -> Result<Self> {
        model.check_session(&cache)?;
        Ok(Self {
            model,
            cache,
            queries: queries.to_vec(),
            query_features,
        })
    }

    /// Sampled frame-1 track features (`M × F`), once frame 1 has been seen.
    pub fn query_features(&self) -> Option<&Tensor<T>> {
        self.query_features.as_ref()
    }

    /// Encodes, decodes and runs the heads on the next frame.
    pub fn step(&mut self, image: &Tensor<T>) -> Result<StreamStep<T>> {
        let model = self.model;
        let frame_index = self.cache.frames() + 1;
        let mut ctx = Ctx::inference(&model.params);
        let x = model.encode_var(&mut ctx, image, frame_index)?;
        let (g, kvs) = model.decode_frame_var(&mut ctx, x, &self.cache)?;
        let (mut out, features) = model.frame_heads(&mut ctx, g, x)?;
        if let Some(s) = model.track.sampler(&model.config, &self.queries)? {
            let q = match &self.query_features {
                Some(q) => ctx.constant(q.clone()),
                None => {
                    let q = model.track.sample_queries(&mut ctx, &s, features)?;
                    self.query_features = Some(ctx.value(q).clone());
                    q
                }
            };
            let (tracks, vis) = model.track.forward(&mut ctx, &s, q, features)?;
            out.tracks = Some(tracks);
            out.visibility_logits = Some(vis);
        }
        let prediction = model.extract(&ctx, &out, self.queries.len())?;
        self.cache.append(&kvs)?;
        Ok(StreamStep {
            tokens: ctx.value(g).clone(),
            prediction,
        })
    }
}
