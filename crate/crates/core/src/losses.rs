//! Camera, depth, point-map and track losses.
//!
//! Each function takes predictions as graph values and targets as plain
//! tensors, and returns a one-element graph value summed over its inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, POSE_DIMS};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the track loss in the total.
    pub lambda_track: f64,
    /// Weight of the `−log Σ` confidence regulariser.
    pub alpha: f64,
    /// Huber threshold of the camera loss.
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_track: 0.05,
            alpha: 0.2,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.huber_delta > 0.0 && self.lambda_track >= 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be positive (lambda may be 0), got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Huber penalty over the 9-vector of every frame. `pred` is `T × 9`; each
/// target quaternion is sign-aligned to its prediction first, since `q` and
/// `−q` are the same rotation.
pub fn camera_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &[CameraPose], delta: f64) -> Result<Var> {
    let (rows, cols) = g.value(pred).dims2();
    if cols != POSE_DIMS || rows != target.len() {
        return Err(Error::shape("camera_loss", g.shape(pred), &[target.len(), POSE_DIMS]));
    }
    let mut t = Vec::with_capacity(rows * cols);
    for (r, pose) in target.iter().enumerate() {
        let p = g.value(pred).row(r);
        let mut v = pose.to_vec();
        let dot: f64 = (3..7).map(|i| p[i].as_f64() * v[i]).sum();
        if dot < 0.0 {
            v[3..7].iter_mut().for_each(|c| *c = -*c);
        }
        t.extend(v.iter().map(|&x| T::lit(x)));
    }
    let t = g.constant(Tensor::new(vec![rows, cols], t)?);
    let d = g.sub(pred, t)?;
    let h = g.huber(d, T::lit(delta));
    Ok(g.sum(h))
}

fn check_map<T: Real>(op: &'static str, g: &Graph<T>, v: Var, shape: &[usize]) -> Result<()> {
    if g.shape(v) != shape {
        return Err(Error::shape(op, g.shape(v), shape));
    }
    Ok(())
}

fn check_conf<T: Real>(op: &str, conf: &Tensor<T>) -> Result<()> {
    if let Some(c) = conf.data().iter().find(|&&c| !(c >= T::one())) {
        return Err(Error::Contract(format!("{op}: confidence {c:?} below 1")));
    }
    Ok(())
}

/// Masks for the forward differences along x and y: a difference is used
/// only when both of its pixels are valid.
fn gradient_masks<T: Real>(valid: &Tensor<T>, h: usize, w: usize) -> (Tensor<T>, Tensor<T>) {
    let m = valid.data();
    let gx = Tensor::from_fn(vec![h, w - 1], |i| {
        let (y, x) = (i / (w - 1), i % (w - 1));
        m[y * w + x] * m[y * w + x + 1]
    });
    let gy = Tensor::from_fn(vec![h - 1, w], |i| m[i] * m[i + w]);
    (gx, gy)
}

/// `Σ ⊙ |pred − target|` plus the same on forward differences, masked,
/// summed. `pred` and `conf` are `H × W`.
fn weighted_l1_with_gradients<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    conf: Var,
    valid: &Tensor<T>,
) -> Result<Var> {
    let (h, w) = valid.dims2();
    let mask = g.constant(valid.clone());
    let tv = g.constant(target.clone());
    let d = g.sub(pred, tv)?;
    let d = g.abs(d);
    let d = g.mul(d, conf)?;
    let d = g.mul(d, mask)?;
    let mut total = g.sum(d);

    let (mx, my) = gradient_masks(valid, h, w);
    if w > 1 {
        let term = diff_term(g, pred, tv, conf, mx, |g, v, s, n| g.slice_cols(v, s, n), w)?;
        total = g.add(total, term)?;
    }
    if h > 1 {
        let term = diff_term(g, pred, tv, conf, my, |g, v, s, n| g.slice_rows(v, s, n), h)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

type Slicer<T> = fn(&mut Graph<T>, Var, usize, usize) -> Result<Var>;

fn diff_term<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    conf: Var,
    mask: Tensor<T>,
    slice: Slicer<T>,
    len: usize,
) -> Result<Var> {
    let grad = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let hi = slice(g, v, 1, len - 1)?;
        let lo = slice(g, v, 0, len - 1)?;
        g.sub(hi, lo)
    };
    let gp = grad(g, pred)?;
    let gt = grad(g, target)?;
    let d = g.sub(gp, gt)?;
    let d = g.abs(d);
    let c = slice(g, conf, 0, len - 1)?;
    let d = g.mul(d, c)?;
    let m = g.constant(mask);
    let d = g.mul(d, m)?;
    Ok(g.sum(d))
}

fn log_term<T: Real>(g: &mut Graph<T>, conf: Var, valid: &Tensor<T>, alpha: f64) -> Result<Var> {
    let l = g.log(conf);
    let m = g.constant(valid.clone());
    let l = g.mul(l, m)?;
    let s = g.sum(l);
    Ok(g.scale(s, T::lit(-alpha)))
}

/// Confidence-weighted depth loss over the valid pixels of one `H × W` map.
pub fn depth_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    conf: Var,
    target: &Tensor<T>,
    valid: &Tensor<T>,
    alpha: f64,
) -> Result<Var> {
    let shape = target.shape().to_vec();
    if shape.len() != 2 || valid.shape() != shape.as_slice() {
        return Err(Error::shape("depth_loss", target.shape(), valid.shape()));
    }
    check_map("depth_loss", g, pred, &shape)?;
    check_map("depth_loss", g, conf, &shape)?;
    check_conf("depth_loss", g.value(conf))?;
    let data = weighted_l1_with_gradients(g, pred, target, conf, valid)?;
    let reg = log_term(g, conf, valid, alpha)?;
    g.add(data, reg)
}

/// As [`depth_loss`] on each channel of a `3 × H × W` point map, with one
/// `H × W` confidence shared by the channels (its log term counted once).
pub fn pointmap_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    conf: Var,
    target: &Tensor<T>,
    valid: &Tensor<T>,
    alpha: f64,
) -> Result<Var> {
    let &[c, h, w] = target.shape() else {
        return Err(Error::shape("pointmap_loss", target.shape(), &[3, 0, 0]));
    };
    if c != 3 || valid.shape() != [h, w] {
        return Err(Error::shape("pointmap_loss", target.shape(), valid.shape()));
    }
    check_map("pointmap_loss", g, pred, target.shape())?;
    check_map("pointmap_loss", g, conf, &[h, w])?;
    check_conf("pointmap_loss", g.value(conf))?;
    let flat = g.reshape(pred, vec![3, h * w])?;
    let mut total = None;
    for ch in 0..3 {
        let p = g.slice_rows(flat, ch, 1)?;
        let p = g.reshape(p, vec![h, w])?;
        let t = Tensor::new(vec![h, w], target.data()[ch * h * w..(ch + 1) * h * w].to_vec())?;
        let term = weighted_l1_with_gradients(g, p, &t, conf, valid)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let reg = log_term(g, conf, valid, alpha)?;
    g.add(total.expect("three channels"), reg)
}

/// L1 track error on target-visible points plus binary cross-entropy of the
/// visibility logits, for one frame. `pred` and `target` are `M × 2`;
/// `logits` is `M × 1`; `visibility` holds `M` targets in `[0, 1]` (soft
/// targets weight the L1 term proportionally).
pub fn track_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    logits: Var,
    visibility: &Tensor<T>,
) -> Result<Var> {
    let m = visibility.numel();
    if target.shape() != [m, 2] {
        return Err(Error::shape("track_loss", target.shape(), &[m, 2]));
    }
    check_map("track_loss", g, pred, &[m, 2])?;
    check_map("track_loss", g, logits, &[m, 1])?;
    if visibility.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::invalid("track_loss: visibility targets outside [0, 1]"));
    }
    let vis = visibility.data();
    let weights = g.constant(Tensor::from_fn(vec![m, 2], |i| vis[i / 2]));
    let tv = g.constant(target.clone());
    let d = g.sub(pred, tv)?;
    let d = g.abs(d);
    let d = g.mul(d, weights)?;
    let l1 = g.sum(d);

    // BCE(z, y) = softplus(z) − y·z, stable for large |z|.
    let y = g.constant(visibility.clone().reshape(vec![m, 1])?);
    let sp = g.softplus(logits);
    let yz = g.mul(logits, y)?;
    let bce = g.sub(sp, yz)?;
    let bce = g.sum(bce);
    g.add(l1, bce)
}

/// The four loss values of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub camera: Var,
    pub depth: Var,
    pub pmap: Var,
    pub track: Var,
}

/// Plain values of the parts and total, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub camera: f64,
    pub depth: f64,
    pub pmap: f64,
    pub track: f64,
    pub total: f64,
}

/// `camera + depth + pmap + λ·track`. Fails, naming the part, if any part is
/// not finite.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossValues)> {
    let mut vals = [0.0; 4];
    for (slot, (name, v)) in vals.iter_mut().zip([
        ("L_camera", parts.camera),
        ("L_depth", parts.depth),
        ("L_pmap", parts.pmap),
        ("L_track", parts.track),
    ]) {
        if g.value(v).numel() != 1 {
            return Err(Error::shape("total_loss", g.shape(v), &[1]));
        }
        let x = g.value(v).data()[0].as_f64();
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{name} is {x}")));
        }
        *slot = x;
    }
    let s = g.add(parts.camera, parts.depth)?;
    let s = g.add(s, parts.pmap)?;
    let t = g.scale(parts.track, T::lit(weights.lambda_track));
    let total = g.add(s, t)?;
    let values = LossValues {
        camera: vals[0],
        depth: vals[1],
        pmap: vals[2],
        track: vals[3],
        total: g.value(total).data()[0].as_f64(),
    };
    Ok((total, values))
}
