//! Multi-head attention in three modes: frame-local spatial self-attention,
//! frame-causal temporal self-attention over a whole sequence, and
//! incremental cross-attention of one frame against a key/value cache.
//!
//! Tokens of a sequence are stacked frame-major into one `(T·N) × C` matrix.
//! The temporal mask is frame-level: a token of frame `t` sees every token of
//! frames `1..=t`, including the other tokens of its own frame.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{init_weight, Ctx, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Projection weights of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "token dim {dim} not divisible by head count {heads}"
            )));
        }
        let mut w = |suffix: &str, rng: &mut R| {
            store.add(format!("{name}.{suffix}"), init_weight(dim, dim, 1.0, rng))
        };
        Ok(Self {
            wq: w("wq", rng)?,
            wk: w("wk", rng)?,
            wv: w("wv", rng)?,
            wo: w("wo", rng)?,
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn check_width<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<usize> {
        let (rows, cols) = ctx.value(x).dims2();
        if cols != self.dim {
            return Err(Error::shape("attention input", ctx.g.shape(x), &[rows, self.dim]));
        }
        Ok(rows)
    }

    fn project<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var, Var)> {
        let (wq, wk, wv) = (ctx.p(self.wq), ctx.p(self.wk), ctx.p(self.wv));
        Ok((ctx.g.matmul(x, wq)?, ctx.g.matmul(x, wk)?, ctx.g.matmul(x, wv)?))
    }

    /// Multi-head attention followed by the output projection.
    fn attend<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let joined = multi_head(ctx, q, k, v, self.heads, mask)?;
        let wo = ctx.p(self.wo);
        ctx.g.matmul(joined, wo)
    }
}

/// Scaled dot-product attention per head; head outputs concatenated along
/// columns.
fn multi_head<T: Real>(
    ctx: &mut Ctx<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let hd = ctx.value(q).dims2().1 / heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ctx.g.slice_cols(q, h * hd, hd)?;
        let kh = ctx.g.slice_cols(k, h * hd, hd)?;
        let vh = ctx.g.slice_cols(v, h * hd, hd)?;
        let kt = ctx.g.transpose(kh)?;
        let scores = ctx.g.matmul(qh, kt)?;
        let scores = ctx.g.scale(scores, scale);
        let probs = ctx.g.softmax(scores, mask)?;
        outs.push(ctx.g.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        ctx.g.concat_cols(&outs)
    }
}

/// Additive `(T·N) × (T·N)` mask: `0` where the key's frame is not later
/// than the query's frame, `-inf` elsewhere.
pub fn frame_causal_mask<T: Real>(frames: usize, tokens_per_frame: usize) -> Tensor<T> {
    let n = frames * tokens_per_frame;
    Tensor::from_fn(vec![n, n], |i| {
        let (q, k) = (i / n, i % n);
        if k / tokens_per_frame <= q / tokens_per_frame {
            T::zero()
        } else {
            T::neg_infinity()
        }
    })
}

fn frames_of<T: Real>(ctx: &Ctx<'_, T>, x: Var, tokens_per_frame: usize) -> Result<usize> {
    let rows = ctx.value(x).dims2().0;
    if tokens_per_frame == 0 || rows == 0 {
        return Err(Error::invalid("attention over an empty frame"));
    }
    if !rows.is_multiple_of(tokens_per_frame) {
        return Err(Error::invalid(format!(
            "{rows} tokens do not split into frames of {tokens_per_frame}"
        )));
    }
    Ok(rows / tokens_per_frame)
}

/// Each token attends to the tokens of its own frame only.
pub fn spatial_self_attention<T: Real>(
    ctx: &mut Ctx<'_, T>,
    params: &AttentionParams,
    x: Var,
    tokens_per_frame: usize,
) -> Result<Var> {
    params.check_width(ctx, x)?;
    let frames = frames_of(ctx, x, tokens_per_frame)?;
    let (q, k, v) = params.project(ctx, x)?;
    let mut frame_outs = Vec::with_capacity(frames);
    for f in 0..frames {
        let (s, n) = (f * tokens_per_frame, tokens_per_frame);
        let (qf, kf, vf) = (
            ctx.g.slice_rows(q, s, n)?,
            ctx.g.slice_rows(k, s, n)?,
            ctx.g.slice_rows(v, s, n)?,
        );
        frame_outs.push(multi_head(ctx, qf, kf, vf, params.heads, None)?);
    }
    let joined = if frame_outs.len() == 1 {
        frame_outs[0]
    } else {
        ctx.g.concat_rows(&frame_outs)?
    };
    let wo = ctx.p(params.wo);
    ctx.g.matmul(joined, wo)
}

/// Full-sequence temporal attention with the frame-level causal mask.
/// `frame_indices` holds one time step per frame and must strictly increase.
pub fn temporal_causal_attention<T: Real>(
    ctx: &mut Ctx<'_, T>,
    params: &AttentionParams,
    x: Var,
    frame_indices: &[usize],
    tokens_per_frame: usize,
) -> Result<Var> {
    params.check_width(ctx, x)?;
    let frames = frames_of(ctx, x, tokens_per_frame)?;
    if frames != frame_indices.len() {
        return Err(Error::invalid(format!(
            "{frames} frames of tokens but {} frame indices",
            frame_indices.len()
        )));
    }
    if frame_indices.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!(
            "frame indices must strictly increase, got {frame_indices:?}"
        )));
    }
    let (q, k, v) = params.project(ctx, x)?;
    if frames == 1 {
        return params.attend(ctx, q, k, v, None);
    }
    let mask = frame_causal_mask::<T>(frames, tokens_per_frame);
    params.attend(ctx, q, k, v, Some(&mask))
}

/// All-to-all attention across every frame (no mask).
pub fn global_attention<T: Real>(ctx: &mut Ctx<'_, T>, params: &AttentionParams, x: Var) -> Result<Var> {
    params.check_width(ctx, x)?;
    let (q, k, v) = params.project(ctx, x)?;
    params.attend(ctx, q, k, v, None)
}

/// Key/value projections of one frame at one temporal layer, `N × C` each.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameKv<T: Real = f32> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

/// Queries come from the current frame; keys and values are the cached
/// frames `1..T-1` of `layer` followed by the current frame's own. Returns the
/// attention output and the frame's key/value entries, which the caller
/// appends once every layer has run.
pub fn cached_cross_attention<T: Real>(
    ctx: &mut Ctx<'_, T>,
    params: &AttentionParams,
    x: Var,
    cache: &KvCache<T>,
    layer: usize,
) -> Result<(Var, FrameKv<T>)> {
    if layer >= cache.layer_count() {
        return Err(Error::invalid(format!(
            "layer {layer} out of range for a {}-layer cache",
            cache.layer_count()
        )));
    }
    let rows = params.check_width(ctx, x)?;
    if cache.width() != params.dim {
        return Err(Error::shape(
            "cached_cross_attention",
            &[cache.tokens_per_frame(), cache.width()],
            ctx.g.shape(x),
        ));
    }
    if rows != cache.tokens_per_frame() {
        return Err(Error::shape(
            "cached_cross_attention",
            &[cache.tokens_per_frame(), cache.width()],
            ctx.g.shape(x),
        ));
    }
    let (q, k, v) = params.project(ctx, x)?;
    let kv = FrameKv {
        keys: ctx.value(k).clone(),
        values: ctx.value(v).clone(),
    };
    let (keys, values) = if cache.frames() == 0 {
        (k, v)
    } else {
        let (ck, cv) = cache.layer_tensors(layer);
        let (ck, cv) = (ctx.constant(ck), ctx.constant(cv));
        (ctx.g.concat_rows(&[ck, k])?, ctx.g.concat_rows(&[cv, v])?)
    };
    let out = params.attend(ctx, q, keys, values, None)?;
    Ok((out, kv))
}

const CACHE_MAGIC: &[u8; 4] = b"S4KV";
const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
struct LayerCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
}

/// Append-only per-layer key/value memory of the frames seen so far.
///
/// Each layer stores `frames · tokens_per_frame` rows of width
/// `heads · head_dim`; head `h` occupies columns `h·head_dim..(h+1)·head_dim`.
/// Frames are appended to every layer at once, so all layers always agree on
/// the frame count.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T: Real = f32> {
    layers: Vec<LayerCache<T>>,
    frames: usize,
    tokens_per_frame: usize,
    heads: usize,
    head_dim: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(layers: usize, tokens_per_frame: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            layers: vec![
                LayerCache {
                    keys: Vec::new(),
                    values: Vec::new(),
                };
                layers
            ],
            frames: 0,
            tokens_per_frame,
            heads,
            head_dim,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Number of cached token rows in `layer`.
    pub fn entries(&self, layer: usize) -> usize {
        self.layers[layer].keys.len() / self.width().max(1)
    }

    pub fn keys(&self, layer: usize) -> &[T] {
        &self.layers[layer].keys
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.layers[layer].values
    }

    fn layer_tensors(&self, layer: usize) -> (Tensor<T>, Tensor<T>) {
        let shape = vec![self.entries(layer), self.width()];
        let l = &self.layers[layer];
        (
            Tensor::new(shape.clone(), l.keys.clone()).expect("cache layout"),
            Tensor::new(shape, l.values.clone()).expect("cache layout"),
        )
    }

    /// Appends one frame's entries to every layer. Existing entries are never
    /// touched.
    pub fn append(&mut self, frame: &[FrameKv<T>]) -> Result<()> {
        if frame.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "append of {} layers to a {}-layer cache",
                frame.len(),
                self.layers.len()
            )));
        }
        let expect = [self.tokens_per_frame, self.width()];
        for kv in frame {
            if kv.keys.shape() != expect || kv.values.shape() != expect {
                return Err(Error::shape("cache_append", &expect, kv.keys.shape()));
            }
        }
        for (layer, kv) in self.layers.iter_mut().zip(frame) {
            layer.keys.extend_from_slice(kv.keys.data());
            layer.values.extend_from_slice(kv.values.data());
        }
        self.frames += 1;
        Ok(())
    }

    const HEADER_BYTES: usize = 4 + 4 * 7;

    /// Size of the snapshot encoding in bytes.
    pub fn byte_size(&self) -> usize {
        Self::HEADER_BYTES + self.layers.len() * 2 * self.frames * self.tokens_per_frame * self.width() * T::BYTES
    }

    /// Writes a snapshot: magic, version, element width, layer count, frame
    /// count, tokens per frame, heads, head dim (u32 LE), then per layer the
    /// key buffer followed by the value buffer, little-endian.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        for v in [
            CACHE_VERSION,
            T::BYTES as u32,
            self.layers.len() as u32,
            self.frames as u32,
            self.tokens_per_frame as u32,
            self.heads as u32,
            self.head_dim as u32,
        ] {
            w.write_u32::<LittleEndian>(v)?;
        }
        for layer in &self.layers {
            write_reals(w, &layer.keys)?;
            write_reals(w, &layer.values)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a key/value cache snapshot".into()));
        }
        let mut header = [0u32; 7];
        for h in header.iter_mut() {
            *h = r.read_u32::<LittleEndian>()?;
        }
        let [version, elem, layers, frames, tokens, heads, head_dim] = header.map(|v| v as usize);
        if version != CACHE_VERSION as usize {
            return Err(Error::Format(format!("unsupported cache snapshot version {version}")));
        }
        if elem != T::BYTES {
            return Err(Error::Format(format!(
                "snapshot holds {elem}-byte elements, expected {}",
                T::BYTES
            )));
        }
        let mut cache = Self::new(layers, tokens, heads, head_dim);
        let len = frames * tokens * cache.width();
        for layer in cache.layers.iter_mut() {
            layer.keys = read_reals(r, len)?;
            layer.values = read_reals(r, len)?;
        }
        cache.frames = frames;
        Ok(cache)
    }
}

pub(crate) fn write_reals<T: Real, W: Write>(w: &mut W, data: &[T]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * T::BYTES);
    for &x in data {
        if T::BYTES == 4 {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_reals<T: Real, R: Read>(r: &mut R, len: usize) -> Result<Vec<T>> {
    let mut buf = vec![0u8; len * T::BYTES];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated buffer".into())
        } else {
            Error::Stream(e)
        }
    })?;
    Ok(if T::BYTES == 4 {
        buf.chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    } else {
        buf.chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    })
}
