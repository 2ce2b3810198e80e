//! Evaluation metrics: point-cloud accuracy / completeness / normal
//! consistency, scale-aligned depth error and relative pose AUC.
//!
//! Everything runs in `f64`. Nearest neighbours come from a uniform grid;
//! ties are broken by point index, so the grid agrees exactly with a brute
//! force search.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;

pub type Point = [f64; 3];

/// Neighbours used for plane-fit normals.
pub const NORMAL_NEIGHBOURS: usize = 16;

/// Largest pose threshold in degrees.
pub const AUC_MAX_DEG: usize = 30;

/// Uniform grid over a point set answering exact k-nearest queries.
#[derive(Clone, Debug)]
pub struct Grid<'a> {
    points: &'a [Point],
    origin: Point,
    cell: f64,
    dims: [i64; 3],
    /// CSR layout: points of cell `c` are `items[starts[c]..starts[c + 1]]`.
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl<'a> Grid<'a> {
    pub fn new(points: &'a [Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("nearest-neighbour grid over an empty set"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud".into()));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as i64 + 1).max(1));
        let mut grid = Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            items: Vec::new(),
        };
        let ncells = (dims[0] * dims[1] * dims[2]) as usize;
        let cells: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = grid.cell_of(p).map(|c| c.clamp(0, i64::MAX));
                grid.flat([c[0].min(dims[0] - 1), c[1].min(dims[1] - 1), c[2].min(dims[2] - 1)])
            })
            .collect();
        let mut starts = vec![0usize; ncells + 1];
        for &c in &cells {
            starts[c + 1] += 1;
        }
        for c in 0..ncells {
            starts[c + 1] += starts[c];
        }
        let mut fill = starts.clone();
        let mut items = vec![0usize; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = starts;
        grid.items = items;
        Ok(grid)
    }

    fn cell_of(&self, p: &Point) -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        ((c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]) as usize
    }

    /// The `k` nearest points to `q` as `(squared distance, index)`, sorted
    /// by distance then index.
    pub fn nearest(&self, q: &Point, k: usize) -> Vec<(f64, usize)> {
        let k = k.min(self.points.len());
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 {
            return best;
        }
        let qc = self.cell_of(q);
        // Chebyshev distance (in cells) from the query cell to the nearest
        // and farthest grid cells.
        let gap = |a: usize| (-qc[a]).max(qc[a] - (self.dims[a] - 1)).max(0);
        let reach = |a: usize| qc[a].max(self.dims[a] - 1 - qc[a]);
        let r_start = (0..3).map(gap).max().unwrap_or(0);
        let r_end = (0..3).map(reach).max().unwrap_or(0);
        let mut r = r_start;
        while r <= r_end {
            self.visit_shell(qc, r, |i| {
                let d = dist2(q, &self.points[i]);
                push_best(&mut best, k, (d, i));
            });
            if best.len() == k {
                let bound = r as f64 * self.cell;
                if best[k - 1].0 < bound * bound {
                    break;
                }
            }
            r += 1;
        }
        best
    }

    fn visit_shell(&self, qc: [i64; 3], r: i64, mut f: impl FnMut(usize)) {
        let range = |a: usize| ((qc[a] - r).max(0), (qc[a] + r).min(self.dims[a] - 1));
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for z in z0..=z1 {
            for y in y0..=y1 {
                let edge = (z - qc[2]).abs() == r || (y - qc[1]).abs() == r;
                let mut cell = |x: i64| {
                    let c = self.flat([x, y, z]);
                    for &i in &self.items[self.starts[c]..self.starts[c + 1]] {
                        f(i);
                    }
                };
                if edge {
                    for x in x0..=x1 {
                        cell(x);
                    }
                } else {
                    if qc[0] - r >= 0 && qc[0] - r < self.dims[0] {
                        cell(qc[0] - r);
                    }
                    if r > 0 && qc[0] + r >= 0 && qc[0] + r < self.dims[0] {
                        cell(qc[0] + r);
                    }
                }
            }
        }
    }
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn push_best(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if best.len() == k && cmp(&cand, &best[k - 1]).is_ge() {
        return;
    }
    let pos = best.partition_point(|e| cmp(e, &cand).is_lt());
    best.insert(pos, cand);
    best.truncate(k);
}

/// Median; even-length inputs average the two middle values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unit normal of the least-squares plane through `points` (eigenvector of
/// the smallest covariance eigenvalue). The sign is arbitrary.
pub fn plane_normal(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let (i, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let v = eig.eigenvectors.column(i).normalize();
    [v[0], v[1], v[2]]
}

/// Normals from a plane fit to each point's 16 nearest neighbours (the
/// point itself included).
pub fn estimate_normals(points: &[Point]) -> Result<Vec<Point>> {
    let grid = Grid::new(points)?;
    Ok(points
        .iter()
        .map(|p| {
            let nb: Vec<Point> = grid.nearest(p, NORMAL_NEIGHBOURS).iter().map(|&(_, i)| points[i]).collect();
            plane_normal(&nb)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: f64,
    pub nc_median: f64,
    /// `(acc_mean + comp_mean) / 2`, the Chamfer distance.
    pub overall: f64,
}

fn abs_cos(a: &Point, b: &Point) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
    let nb = b[0] * b[0] + b[1] * b[1] + b[2] * b[2];
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt(na·na) rounds back to na exactly, so identical normals give 1.
    (dot / (na * nb).sqrt()).abs().min(1.0)
}

/// Accuracy (prediction to GT), completeness (GT to prediction) and normal
/// consistency of two clouds. Missing normals are estimated by 16-NN plane
/// fits.
pub fn cloud_metrics(
    pred: &[Point],
    gt: &[Point],
    pred_normals: Option<&[Point]>,
    gt_normals: Option<&[Point]>,
) -> Result<CloudMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::invalid("cloud metrics need non-empty clouds"));
    }
    let normals = |pts: &[Point], given: Option<&[Point]>| -> Result<Vec<Point>> {
        match given {
            Some(n) if n.len() == pts.len() => Ok(n.to_vec()),
            Some(n) => Err(Error::invalid(format!("{} normals for {} points", n.len(), pts.len()))),
            None => estimate_normals(pts),
        }
    };
    let pn = normals(pred, pred_normals)?;
    let gn = normals(gt, gt_normals)?;
    let gt_grid = Grid::new(gt)?;
    let pred_grid = Grid::new(pred)?;

    let mut acc = Vec::with_capacity(pred.len());
    let mut nc = Vec::with_capacity(pred.len() + gt.len());
    for (p, n) in pred.iter().zip(&pn) {
        let (d2, j) = gt_grid.nearest(p, 1)[0];
        acc.push(d2.sqrt());
        nc.push(abs_cos(n, &gn[j]));
    }
    let mut comp = Vec::with_capacity(gt.len());
    for (g, n) in gt.iter().zip(&gn) {
        let (d2, j) = pred_grid.nearest(g, 1)[0];
        comp.push(d2.sqrt());
        nc.push(abs_cos(n, &pn[j]));
    }
    let (acc_mean, comp_mean) = (mean(&acc), mean(&comp));
    Ok(CloudMetrics {
        acc_mean,
        acc_median: median(&acc)?,
        comp_mean,
        comp_median: median(&comp)?,
        nc_mean: mean(&nc),
        nc_median: median(&nc)?,
        overall: 0.5 * (acc_mean + comp_mean),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    /// Fraction of pixels within a factor 1.25 of the ground truth.
    pub delta_125: f64,
    /// Per-sequence alignment factor applied to the prediction.
    pub scale: f64,
}

/// One frame of depth evaluation input, all `H×W` row-major.
#[derive(Clone, Copy, Debug)]
pub struct DepthFrame<'a> {
    pub pred: &'a [f64],
    pub gt: &'a [f64],
    pub mask: &'a [bool],
}

/// Depth error of a whole sequence after aligning the prediction by the
/// median of `D / D̂` over every valid pixel.
pub fn depth_metrics(frames: &[DepthFrame<'_>]) -> Result<DepthMetrics> {
    let mut pairs = Vec::new();
    for f in frames {
        if f.pred.len() != f.gt.len() || f.mask.len() != f.gt.len() {
            return Err(Error::invalid("depth maps and mask differ in size"));
        }
        for ((&p, &d), &m) in f.pred.iter().zip(f.gt).zip(f.mask) {
            if !m {
                continue;
            }
            if !(p > 0.0 && p.is_finite() && d > 0.0 && d.is_finite()) {
                return Err(Error::invalid(format!("depth pair ({p}, {d}) is not positive and finite")));
            }
            pairs.push((p, d));
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no valid depth pixels"));
    }
    let ratios: Vec<f64> = pairs.iter().map(|&(p, d)| d / p).collect();
    let scale = median(&ratios)?;
    let n = pairs.len() as f64;
    let abs_rel = pairs.iter().map(|&(p, d)| (scale * p - d).abs() / d).sum::<f64>() / n;
    let within = pairs
        .iter()
        .filter(|&&(p, d)| {
            let sp = scale * p;
            (sp / d).max(d / sp) < 1.25
        })
        .count();
    Ok(DepthMetrics {
        abs_rel,
        delta_125: within as f64 / n,
        scale,
    })
}

/// Rotation and translation-direction errors (degrees) of one frame pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairError {
    pub rotation: f64,
    pub translation: f64,
}

/// Angle between two vectors in degrees. Zero vectors match only each
/// other; against a non-zero vector they count as 90°.
pub fn direction_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 90.0,
        _ => (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees(),
    }
}

/// Errors of every frame pair `i < j` of one sequence, comparing the
/// relative poses `g_i⁻¹ g_j`.
pub fn pair_errors(pred: &[CameraPose], gt: &[CameraPose]) -> Result<Vec<PairError>> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("{} predicted poses for {} frames", pred.len(), gt.len())));
    }
    if gt.len() < 2 {
        return Err(Error::invalid("pose metrics need at least two frames"));
    }
    let mut out = Vec::with_capacity(gt.len() * (gt.len() - 1) / 2);
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let rp = pred[j].relative_to(&pred[i]);
            let rg = gt[j].relative_to(&gt[i]);
            let rotation = rp.quaternion().angle_to(&rg.quaternion()).to_degrees();
            let translation = direction_angle_deg(&rp.translation_vec(), &rg.translation_vec());
            out.push(PairError { rotation, translation });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseMetrics {
    /// Fraction of pairs with rotation error below `τ` for `τ = 1..=30`.
    pub rra_curve: Vec<f64>,
    pub rta_curve: Vec<f64>,
    /// Mean over thresholds of the fraction of pairs passing both tests.
    pub auc30: f64,
}

pub fn pose_metrics_from_errors(errors: &[PairError]) -> Result<PoseMetrics> {
    if errors.is_empty() {
        return Err(Error::invalid("no frame pairs to score"));
    }
    let n = errors.len() as f64;
    let mut rra = Vec::with_capacity(AUC_MAX_DEG);
    let mut rta = Vec::with_capacity(AUC_MAX_DEG);
    let mut both = 0.0;
    for tau in 1..=AUC_MAX_DEG {
        let tau = tau as f64;
        let r = errors.iter().filter(|e| e.rotation < tau).count();
        let t = errors.iter().filter(|e| e.translation < tau).count();
        let b = errors.iter().filter(|e| e.rotation < tau && e.translation < tau).count();
        rra.push(r as f64 / n);
        rta.push(t as f64 / n);
        both += b as f64 / n;
    }
    Ok(PoseMetrics {
        rra_curve: rra,
        rta_curve: rta,
        auc30: both / AUC_MAX_DEG as f64,
    })
}

pub fn pose_auc30(pred: &[CameraPose], gt: &[CameraPose]) -> Result<PoseMetrics> {
    pose_metrics_from_errors(&pair_errors(pred, gt)?)
}
