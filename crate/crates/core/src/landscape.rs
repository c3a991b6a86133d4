//! Loss and disagreement surfaces over the plane through three weight vectors.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{self, Dataset};
use crate::nn::{self, Checkpoint, ModelSpec};
use crate::storage::write_atomic;
use crate::tensor::argmax;

pub const DEFAULT_RESOLUTION: usize = 25;
/// Default margin, as a fraction of the anchors' bounding-box diagonal.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Orthonormal coordinates for the plane through three anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneBasis {
    spec: ModelSpec,
    origin: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    coords: [(f64, f64); 3],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn diff(a: &Checkpoint, b: &Checkpoint) -> Vec<f64> {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(&x, y)| x as f64 - y as f64)
        .collect()
}

/// Builds `u ∥ (w1 − w0)` and `v` by Gram–Schmidt of `w2 − w0` against `u`.
pub fn plane_basis(w0: &Checkpoint, w1: &Checkpoint, w2: &Checkpoint) -> Result<PlaneBasis> {
    for (name, w) in [("w1", w1), ("w2", w2)] {
        if w.spec() != w0.spec() {
            return Err(Error::Dimension(format!(
                "anchor {name} has a different model spec than w0"
            )));
        }
    }
    let origin: Vec<f64> = w0.flatten().iter().map(|&v| v as f64).collect();
    let scale = norm(&origin).max(1.0);

    let d1 = diff(w1, w0);
    let n1 = norm(&d1);
    if n1 <= 1e-12 * scale {
        return Err(Error::Geometry("anchors w0 and w1 coincide".into()));
    }
    let u: Vec<f64> = d1.iter().map(|x| x / n1).collect();

    let d2 = diff(w2, w0);
    let n2 = norm(&d2);
    if n2 <= 1e-12 * scale {
        return Err(Error::Geometry("anchors w0 and w2 coincide".into()));
    }
    let a2 = dot(&d2, &u);
    let mut r: Vec<f64> = d2.iter().zip(&u).map(|(x, y)| x - a2 * y).collect();
    // second pass restores orthogonality lost to cancellation
    let c = dot(&r, &u);
    r.iter_mut().zip(&u).for_each(|(x, y)| *x -= c * y);
    let nr = norm(&r);
    if nr <= 1e-6 * n2 {
        return Err(Error::Geometry(
            "anchors w1 and w2 are collinear with w0 (w2 − w0 is parallel to w1 − w0)".into(),
        ));
    }
    let v: Vec<f64> = r.iter().map(|x| x / nr).collect();
    let b2 = dot(&d2, &v);

    Ok(PlaneBasis {
        spec: w0.spec().clone(),
        origin,
        u,
        v,
        coords: [(0.0, 0.0), (n1, 0.0), (a2, b2)],
    })
}

impl PlaneBasis {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Plane coordinates of `w0`, `w1`, `w2`.
    pub fn coords(&self) -> [(f64, f64); 3] {
        self.coords
    }

    /// Weights at `origin + α·u + β·v`.
    pub fn point(&self, alpha: f64, beta: f64) -> Vec<f32> {
        self.origin
            .iter()
            .zip(self.u.iter().zip(&self.v))
            .map(|(o, (u, v))| (o + alpha * u + beta * v) as f32)
            .collect()
    }

    pub fn checkpoint_at(&self, alpha: f64, beta: f64) -> Result<Checkpoint> {
        Checkpoint::unflatten(&self.spec, &self.point(alpha, beta))
    }

    /// Orthogonal projection of a checkpoint onto plane coordinates.
    pub fn project(&self, w: &Checkpoint) -> Result<(f64, f64)> {
        if w.spec() != &self.spec {
            return Err(Error::Dimension(
                "checkpoint spec differs from the plane's".into(),
            ));
        }
        let d: Vec<f64> = w
            .flatten()
            .iter()
            .zip(&self.origin)
            .map(|(&x, o)| x as f64 - o)
            .collect();
        Ok((dot(&d, &self.u), dot(&d, &self.v)))
    }
}

/// Metrics of the single model at one plane point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub nll: f64,
    /// Fraction of inputs whose argmax differs from anchor `w1`'s.
    pub disagree_1: f64,
    /// Same against anchor `w2`.
    pub disagree_2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Row-major `R×R` surfaces: entry `i·R + j` is at `(alphas[j], betas[i])`.
    pub nll: Vec<f64>,
    pub disagree_1: Vec<f64>,
    pub disagree_2: Vec<f64>,
    pub anchors: [(f64, f64); 3],
    /// `(row, col)` of each anchor's grid node.
    pub anchor_cells: [(usize, usize); 3],
}

impl LandscapeGrid {
    pub fn resolution(&self) -> usize {
        self.alphas.len()
    }

    pub fn at(&self, row: usize, col: usize) -> PointMetrics {
        let k = row * self.resolution() + col;
        PointMetrics {
            nll: self.nll[k],
            disagree_1: self.disagree_1[k],
            disagree_2: self.disagree_2[k],
        }
    }

    pub fn anchor_metrics(&self, anchor: usize) -> PointMetrics {
        let (r, c) = self.anchor_cells[anchor];
        self.at(r, c)
    }
}

fn predictions(ckpt: &Checkpoint, data: &Dataset) -> Result<(Vec<usize>, f64)> {
    let logits = nn::forward(ckpt, data.features())?;
    let nll = metrics::logit_nll(&logits, data.labels())?;
    let preds = logits.softmax().rows().map(argmax).collect();
    Ok((preds, nll))
}

fn disagreement(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

struct AnchorPreds {
    first: Vec<usize>,
    second: Vec<usize>,
}

impl AnchorPreds {
    fn new(basis: &PlaneBasis, data: &Dataset) -> Result<Self> {
        let [_, (a1, b1), (a2, b2)] = basis.coords;
        Ok(Self {
            first: predictions(&basis.checkpoint_at(a1, b1)?, data)?.0,
            second: predictions(&basis.checkpoint_at(a2, b2)?, data)?.0,
        })
    }

    fn metrics_at(
        &self,
        basis: &PlaneBasis,
        data: &Dataset,
        alpha: f64,
        beta: f64,
    ) -> Result<PointMetrics> {
        let (preds, nll) = predictions(&basis.checkpoint_at(alpha, beta)?, data)?;
        Ok(PointMetrics {
            nll,
            disagree_1: disagreement(&preds, &self.first),
            disagree_2: disagreement(&preds, &self.second),
        })
    }
}

fn check_data(basis: &PlaneBasis, data: &Dataset) -> Result<()> {
    if data.dim() != basis.spec.input_dim() {
        return Err(Error::Dimension(format!(
            "data has {} features, model expects {}",
            data.dim(),
            basis.spec.input_dim()
        )));
    }
    data.check_labels(basis.spec.num_classes())
}

/// Metrics at an arbitrary plane point.
pub fn point_metrics(
    basis: &PlaneBasis,
    data: &Dataset,
    alpha: f64,
    beta: f64,
) -> Result<PointMetrics> {
    check_data(basis, data)?;
    AnchorPreds::new(basis, data)?.metrics_at(basis, data, alpha, beta)
}

/// `R` evenly spaced values over `[lo, hi]` with each anchor value moved onto
/// its nearest free node, so anchors are evaluated exactly.
fn snapped_axis(lo: f64, hi: f64, r: usize, anchors: &[f64]) -> Vec<f64> {
    let mut axis: Vec<f64> = (0..r)
        .map(|i| lo + (hi - lo) * i as f64 / (r - 1) as f64)
        .collect();
    let mut values = anchors.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut taken = vec![false; r];
    for v in values {
        let idx = (0..r)
            .filter(|&i| !taken[i])
            .min_by(|&i, &j| (axis[i] - v).abs().total_cmp(&(axis[j] - v).abs()))
            .expect("resolution covers the anchors");
        axis[idx] = v;
        taken[idx] = true;
    }
    axis.sort_by(f64::total_cmp);
    axis
}

/// Evaluates the `R×R` grid spanning the anchors' bounding box, widened on
/// every side by `margin` times the box diagonal.
pub fn eval_grid(
    basis: &PlaneBasis,
    data: &Dataset,
    resolution: usize,
    margin: f64,
) -> Result<LandscapeGrid> {
    if resolution < 3 {
        return Err(Error::Config(format!(
            "grid resolution must be at least 3, got {resolution}"
        )));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Config(format!(
            "margin must be finite and non-negative, got {margin}"
        )));
    }
    check_data(basis, data)?;

    let alphas_a: Vec<f64> = basis.coords.iter().map(|c| c.0).collect();
    let betas_a: Vec<f64> = basis.coords.iter().map(|c| c.1).collect();
    let bounds = |xs: &[f64]| {
        (
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (a_lo, a_hi) = bounds(&alphas_a);
    let (b_lo, b_hi) = bounds(&betas_a);
    let pad = margin * (a_hi - a_lo).hypot(b_hi - b_lo);
    let alphas = snapped_axis(a_lo - pad, a_hi + pad, resolution, &alphas_a);
    let betas = snapped_axis(b_lo - pad, b_hi + pad, resolution, &betas_a);

    let anchors = AnchorPreds::new(basis, data)?;
    let cells: Vec<PointMetrics> = (0..resolution * resolution)
        .into_par_iter()
        .map(|k| {
            let (row, col) = (k / resolution, k % resolution);
            anchors.metrics_at(basis, data, alphas[col], betas[row])
        })
        .collect::<Result<_>>()?;

    let locate = |axis: &[f64], v: f64| {
        axis.iter()
            .position(|&x| x == v)
            .expect("anchor snapped onto axis")
    };
    let anchor_cells = basis
        .coords
        .map(|(a, b)| (locate(&betas, b), locate(&alphas, a)));

    Ok(LandscapeGrid {
        nll: cells.iter().map(|c| c.nll).collect(),
        disagree_1: cells.iter().map(|c| c.disagree_1).collect(),
        disagree_2: cells.iter().map(|c| c.disagree_2).collect(),
        alphas,
        betas,
        anchors: basis.coords,
        anchor_cells,
    })
}

/// Grid CSV: `alpha,beta,nll,disagree_1,disagree_2`, one row per node, rows
/// of constant beta in order.
pub fn grid_csv(grid: &LandscapeGrid) -> String {
    let mut out = String::from("alpha,beta,nll,disagree_1,disagree_2\n");
    let r = grid.resolution();
    for (i, beta) in grid.betas.iter().enumerate() {
        for (j, alpha) in grid.alphas.iter().enumerate() {
            let k = i * r + j;
            let _ = writeln!(
                out,
                "{alpha},{beta},{},{},{}",
                grid.nll[k], grid.disagree_1[k], grid.disagree_2[k]
            );
        }
    }
    out
}

/// Anchor sidecar CSV: `name,alpha,beta`.
pub fn anchors_csv(grid: &LandscapeGrid, names: [&str; 3]) -> String {
    let mut out = String::from("name,alpha,beta\n");
    for (name, (a, b)) in names.iter().zip(grid.anchors) {
        let _ = writeln!(out, "{name},{a},{b}");
    }
    out
}

pub fn write_csvs(
    grid: &LandscapeGrid,
    grid_path: &Path,
    anchors_path: &Path,
    names: [&str; 3],
) -> Result<()> {
    write_atomic(grid_path, grid_csv(grid).as_bytes())?;
    write_atomic(anchors_path, anchors_csv(grid, names).as_bytes())
}
