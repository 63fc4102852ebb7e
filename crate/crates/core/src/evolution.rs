//! Instance pipeline around the offset head: box providers, the initial box
//! contour, the iterative deformation loop, and the training losses.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::amem::Frame;
use crate::dataset::Annotation;
use crate::diff::{Graph, NodeId, ParamId, ParamSet, Tensor};
use crate::energymap::{EnergyMap, ENERGY_MAX, ENERGY_SLOPE};
use crate::error::{geom_err, Error, Result};
use crate::geometry::{pair_to_ground_truth, rasterize, resample, Contour, Mask, Point};

/// Axis-aligned box in continuous pixel coordinates. `class_id` is −1 when
/// unknown.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class_id: i64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(class_id: i64, x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(geom_err!("degenerate box [{x_min}, {x_max}] × [{y_min}, {y_max}]"));
        }
        Ok(Self {
            class_id,
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Tight box around a polygon's vertices.
    pub fn around(class_id: i64, poly: &Contour) -> Result<Self> {
        let (lo, hi) = poly.bounds();
        Self::new(class_id, lo.x, lo.y, hi.x, hi.y)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn frame(&self) -> Frame {
        Frame::from_bounds(self.x_min, self.y_min, self.x_max, self.y_max).unwrap()
    }

    pub fn intersects(&self, o: &BBox) -> bool {
        self.x_min < o.x_max && o.x_min < self.x_max && self.y_min < o.y_max && o.y_min < self.y_max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Contour vertices `N`.
    pub points: usize,
    /// Deformation iterations `T`.
    pub iterations: usize,
    /// DCIM output channels `F`.
    pub features: usize,
    pub heads: usize,
    /// Attention width `C`.
    pub width: usize,
    pub seed: u64,
    pub use_demp_dcim: bool,
    pub use_amem: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            points: 128,
            iterations: 3,
            features: 16,
            heads: 4,
            width: 32,
            seed: 42,
            use_demp_dcim: true,
            use_amem: true,
        }
    }
}

/// Circular kernel length of the offset head; contours need at least this
/// many vertices.
pub const CIRCULAR_KERNEL: usize = 9;

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points < 8.max(CIRCULAR_KERNEL) {
            return Err(Error::Config(format!("points must be at least {CIRCULAR_KERNEL}, got {}", self.points)));
        }
        if !(1..=8).contains(&self.iterations) {
            return Err(Error::Config(format!("iterations must be in 1..=8, got {}", self.iterations)));
        }
        if self.features == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

const MIN_EXTENT: f64 = 4.0;

fn widen(lo: &mut f64, hi: &mut f64) {
    if *hi - *lo < MIN_EXTENT {
        let c = (*lo + *hi) / 2.0;
        *lo = c - MIN_EXTENT / 2.0;
        *hi = c + MIN_EXTENT / 2.0;
    }
}

/// Tight box of every annotation, each side moved by
/// `uniform(−jitter, jitter)·side length`, then widened to ≥ 4 px.
pub fn boxes_from_ground_truth<R: Rng + ?Sized>(instances: &[Annotation], jitter: f64, rng: &mut R) -> Result<Vec<BBox>> {
    if !(0.0..=0.3).contains(&jitter) {
        return Err(Error::Config(format!("jitter must lie in [0, 0.3], got {jitter}")));
    }
    instances
        .iter()
        .map(|a| {
            let b = BBox::around(a.class as i64, &a.polygon)?;
            if jitter == 0.0 {
                return Ok(b);
            }
            let (w, h) = (b.width(), b.height());
            let mut j = |s: f64| s * rng.random_range(-jitter..=jitter);
            let (mut x0, mut x1) = (b.x_min + j(w), b.x_max + j(w));
            let (mut y0, mut y1) = (b.y_min + j(h), b.y_max + j(h));
            widen(&mut x0, &mut x1);
            widen(&mut y0, &mut y1);
            BBox::new(b.class_id, x0, y0, x1, y1)
        })
        .collect()
}

/// Boxes of the 8-connected components of `{e ≥ threshold}` with at least 25
/// pixels. The superlevel set is a band of half-width `d_t` around each
/// boundary, so each box is shrunk by `⌊d_t⌋` to hug the boundary itself.
pub fn boxes_from_energy(map: &EnergyMap, threshold: f64) -> Result<Vec<BBox>> {
    if !(threshold > 0.0 && threshold < ENERGY_MAX) {
        return Err(Error::Config(format!("threshold must lie in (0, 255), got {threshold}")));
    }
    let (w, h) = (map.width(), map.height());
    let band = (((ENERGY_MAX - threshold) / ENERGY_SLOPE).exp() - 1.0).floor();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || map.data()[start] < threshold {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1, mut n) = (w, h, 0, 0, 0usize);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
            n += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    if !seen[j] && map.data()[j] >= threshold {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if n < 25 {
            continue;
        }
        let (mut bx0, mut by0, mut bx1, mut by1) = (x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64);
        if bx1 - bx0 - 2.0 * band >= MIN_EXTENT && by1 - by0 - 2.0 * band >= MIN_EXTENT {
            (bx0, by0, bx1, by1) = (bx0 + band, by0 + band, bx1 - band, by1 - band);
        }
        out.push(BBox::new(-1, bx0, by0, bx1, by1)?);
    }
    Ok(out)
}

/// `n` points evenly spaced along the box outline, starting at the top-left
/// corner and running top-left → top-right → bottom-right (positive area).
pub fn initial_contour(b: &BBox, n: usize) -> Result<Contour> {
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(geom_err!("degenerate box {b:?}"));
    }
    let rect = Contour::new(vec![
        Point::new(b.x_min, b.y_min),
        Point::new(b.x_max, b.y_min),
        Point::new(b.x_max, b.y_max),
        Point::new(b.x_min, b.y_max),
    ])?;
    resample(&rect, n)
}

/// Clamps every vertex into `[0, width] × [0, height]`.
pub fn clamp_to_image(points: &[Point], width: usize, height: usize) -> Vec<Point> {
    points
        .iter()
        .map(|p| Point::new(p.x.clamp(0.0, width as f64), p.y.clamp(0.0, height as f64)))
        .collect()
}

/// One evolving object.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    pub initial: Contour,
    /// Contour after each completed iteration.
    pub contours: Vec<Contour>,
    pub mask: Mask,
}

impl Instance {
    pub fn last(&self) -> &Contour {
        self.contours.last().unwrap_or(&self.initial)
    }
}

/// Runs `iterations` deformation steps from the box contour. `offsets` gets
/// the iteration index (from 1), the current contour and the previous one
/// (equal to the current at the first step) and returns one pixel offset per
/// vertex. Vertices leaving the image are clamped back.
pub fn evolve<F>(bbox: &BBox, points: usize, iterations: usize, width: usize, height: usize, mut offsets: F) -> Result<Instance>
where
    F: FnMut(usize, &Contour, &Contour) -> Result<Vec<Point>>,
{
    let initial = Contour::separated(clamp_to_image(initial_contour(bbox, points)?.points(), width, height))?;
    let mut prev = initial.clone();
    let mut cur = initial.clone();
    let mut contours = Vec::with_capacity(iterations);
    for t in 1..=iterations {
        let off = offsets(t, &cur, &prev)?;
        if off.len() != cur.len() {
            return Err(geom_err!("{} offsets for {} vertices", off.len(), cur.len()));
        }
        if off.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Numeric(format!("non-finite offset at iteration {t}")));
        }
        let moved: Vec<Point> = cur.points().iter().zip(&off).map(|(&p, &d)| p + d).collect();
        let next = Contour::separated(clamp_to_image(&moved, width, height))?;
        prev = std::mem::replace(&mut cur, next);
        contours.push(cur.clone());
    }
    let mask = rasterize(&cur, width, height);
    Ok(Instance {
        bbox: *bbox,
        initial,
        contours,
        mask,
    })
}

/// Offsets that move every vertex onto its paired ground-truth point.
pub fn oracle_offsets(gt: &Contour) -> impl FnMut(usize, &Contour, &Contour) -> Result<Vec<Point>> + '_ {
    move |_, cur, _| {
        let k = pair_to_ground_truth(cur, gt)?;
        let aligned = gt.rotated(k);
        Ok(cur.points().iter().zip(aligned.points()).map(|(&p, &q)| q - p).collect())
    }
}

/// Ground truth resampled to `n` points and cyclically aligned with
/// `reference`.
pub fn aligned_ground_truth(reference: &Contour, gt: &Contour) -> Result<Contour> {
    let r = resample(gt, reference.len())?;
    let k = pair_to_ground_truth(reference, &r)?;
    Ok(r.rotated(k))
}

/// Topmost, bottommost, leftmost and rightmost vertices (first on ties).
pub fn extreme_points(c: &Contour) -> [Point; 4] {
    let pick = |better: &dyn Fn(Point, Point) -> bool| {
        c.points().iter().copied().reduce(|a, b| if better(b, a) { b } else { a }).unwrap()
    };
    [
        pick(&|b, a| b.y < a.y),
        pick(&|b, a| b.y > a.y),
        pick(&|b, a| b.x < a.x),
        pick(&|b, a| b.x > a.x),
    ]
}

/// Mean smooth-ℓ1 (β = 1) over the 8 coordinates of four predicted extreme
/// points `pred[4×2]` against `gt`.
pub fn box_extreme_loss(g: &mut Graph, pred: NodeId, gt: &[Point; 4]) -> Result<NodeId> {
    let t = g.constant(Tensor::new(&[4, 2], gt.iter().flat_map(|p| [p.x, p.y]).collect())?);
    let s = g.smooth_l1_sum(pred, t)?;
    Ok(g.scale(s, 1.0 / 8.0))
}

/// `(1/N) Σ_i [sl1(Δx_i) + sl1(Δy_i)]` against an already aligned `gt`.
pub fn contour_loss(g: &mut Graph, pred: NodeId, gt: &Contour) -> Result<NodeId> {
    let (n, _) = g.value(pred).dims2()?;
    if n != gt.len() {
        return Err(geom_err!("contour loss on {n} vs {} points", gt.len()));
    }
    let t = g.constant(gt.to_tensor());
    let s = g.smooth_l1_sum(pred, t)?;
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Linear map from mean-pooled point features to four extreme points,
/// expressed in the box frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtremeHead {
    pub params: ParamSet,
    w: ParamId,
    b: ParamId,
}

impl ExtremeHead {
    pub fn new<R: Rng + ?Sized>(inputs: usize, rng: &mut R) -> Self {
        let mut p = ParamSet::new();
        let w = p.add_glorot("w", &[inputs, 8], inputs, 8, rng);
        let b = p.add_zeros("b", &[8]);
        Self { params: p, w, b }
    }

    /// `features[N×(F+2)]` → `4×2` pixel positions (top, bottom, left, right).
    pub fn forward(&self, g: &mut Graph, w: &[NodeId], features: NodeId, frame: Frame) -> Result<NodeId> {
        let pooled = g.mean_rows(features)?;
        let y = g.matmul(pooled, w[self.w.index()])?;
        let y = g.add_row_bias(y, w[self.b.index()])?;
        let y = g.reshape(y, &[4, 2])?;
        g.affine_cols(y, &[frame.hx, frame.hy], &[frame.cx, frame.cy])
    }
}

/// Inference record for one instance; coordinates rounded to 1e-3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class: i64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub contour: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iterations: Option<Vec<Vec<[f64; 2]>>>,
}

fn r3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn rounded(c: &Contour) -> Vec<[f64; 2]> {
    c.points().iter().map(|p| [r3(p.x), r3(p.y)]).collect()
}

impl InstanceRecord {
    pub fn new(inst: &Instance, with_iterations: bool) -> Self {
        let b = inst.bbox;
        Self {
            class: b.class_id,
            bbox: [r3(b.x_min), r3(b.y_min), r3(b.x_max), r3(b.y_max)],
            contour: rounded(inst.last()),
            iterations: with_iterations.then(|| inst.contours.iter().map(rounded).collect()),
        }
    }
}
