use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{geom_err, Result};

/// 2-D point in continuous pixel coordinates; pixel `(i, j)` covers
/// `[i, i+1) × [j, j+1)` and has its centre at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Minimum separation between consecutive vertices.
pub const MIN_EDGE: f64 = 1e-9;

/// Closed polygon with at least three vertices and no repeated consecutive
/// vertex (the closing edge included).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Contour {
    points: Vec<Point>,
}

impl TryFrom<Vec<Point>> for Contour {
    type Error = crate::Error;
    fn try_from(points: Vec<Point>) -> Result<Self> {
        Contour::new(points)
    }
}

impl From<Contour> for Vec<Point> {
    fn from(c: Contour) -> Self {
        c.points
    }
}

impl Contour {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 3 {
            return Err(geom_err!("contour needs at least 3 vertices, got {}", points.len()));
        }
        if let Some(p) = points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(geom_err!("non-finite vertex {p:?}"));
        }
        let n = points.len();
        for i in 0..n {
            if points[i].dist(points[(i + 1) % n]) <= MIN_EDGE {
                return Err(geom_err!("vertices {i} and {} coincide", (i + 1) % n));
            }
        }
        Ok(Self { points })
    }

    /// Like [`Contour::new`], but a vertex that coincides with its
    /// predecessor is first nudged a micro-pixel towards the next distinct
    /// vertex. Keeps the vertex count when clamping piles points together.
    pub fn separated(mut points: Vec<Point>) -> Result<Self> {
        let n = points.len();
        if n >= 3 {
            for i in 0..n {
                let prev = points[(i + n - 1) % n];
                if points[i].dist(prev) > MIN_EDGE {
                    continue;
                }
                let next = (1..n).map(|j| points[(i + j) % n]).find(|q| q.dist(points[i]) > MIN_EDGE);
                match next {
                    Some(q) => {
                        let d = q - points[i];
                        let step = (1e-6f64).min(d.norm() / 2.0);
                        points[i] = points[i] + d * (step / d.norm());
                    }
                    None => {
                        // everything collapsed onto one point: spread on a tiny ring
                        let c = points[0];
                        for (k, p) in points.iter_mut().enumerate() {
                            let t = std::f64::consts::TAU * k as f64 / n as f64;
                            *p = c + Point::new(t.cos(), t.sin()) * 1e-6;
                        }
                        break;
                    }
                }
            }
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.points.len();
        (0..n).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.dist(b)).sum()
    }

    /// Shoelace area; positive for counter-clockwise vertex order
    /// (x right, y down: top-left → top-right → bottom-right).
    pub fn signed_area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a.cross(b)).sum::<f64>()
    }

    pub fn is_ccw(&self) -> bool {
        self.signed_area() > 0.0
    }

    /// True when no two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let n = self.points.len();
        let p = &self.points;
        for i in 0..n {
            for j in i + 1..n {
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_intersect(p[i], p[(i + 1) % n], p[j], p[(j + 1) % n]) {
                    return false;
                }
            }
        }
        true
    }

    /// Same polygon with vertex `k` as the new start.
    pub fn rotated(&self, k: usize) -> Contour {
        let n = self.points.len();
        Contour {
            points: (0..n).map(|i| self.points[(i + k) % n]).collect(),
        }
    }

    pub fn translated(&self, d: Point) -> Contour {
        Contour {
            points: self.points.iter().map(|&p| p + d).collect(),
        }
    }

    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }

    /// Even-odd point-in-polygon by ray casting towards +x.
    pub fn contains(&self, q: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > q.y) != (b.y > q.y) && q.x < crossing_x(a, b, q.y) {
                inside = !inside;
            }
        }
        inside
    }

    /// Distance from `q` to the nearest point on the polygon boundary.
    pub fn boundary_distance(&self, q: Point) -> f64 {
        self.edges().map(|(a, b)| segment_distance(q, a, b)).fold(f64::INFINITY, f64::min)
    }

    /// Closest point to `q` on the polygon boundary.
    pub fn project(&self, q: Point) -> Point {
        let mut best = (f64::INFINITY, q);
        for (a, b) in self.edges() {
            let p = segment_closest(q, a, b);
            let d = p.dist(q);
            if d < best.0 {
                best = (d, p);
            }
        }
        best.1
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| [p.x, p.y]).collect();
        Tensor::new(&[self.points.len(), 2], data).unwrap()
    }

    pub fn from_slice(xy: &[f64]) -> Result<Contour> {
        Contour::new(xy.chunks(2).map(|c| Point::new(c[0], c[1])).collect())
    }
}

/// x coordinate where segment `a→b` crosses the horizontal line `y`.
pub(crate) fn crossing_x(a: Point, b: Point, y: f64) -> f64 {
    a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y)
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

fn segment_closest(q: Point, a: Point, b: Point) -> Point {
    let ab = b - a;
    let t = ((q - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
    a + ab * t
}

pub fn segment_distance(q: Point, a: Point, b: Point) -> f64 {
    segment_closest(q, a, b).dist(q)
}

/// `n` points at equal arc-length spacing along the closed polygon, starting
/// at its first vertex and keeping its orientation.
pub fn resample(poly: &Contour, n: usize) -> Result<Contour> {
    if n < 3 {
        return Err(geom_err!("resample needs n >= 3, got {n}"));
    }
    let pts = poly.points();
    let m = pts.len();
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    for (a, b) in poly.edges() {
        cum.push(cum.last().unwrap() + a.dist(b));
    }
    let total = cum[m];
    if !(total > 0.0) {
        return Err(geom_err!("polygon has zero perimeter"));
    }
    let mut out = Vec::with_capacity(n);
    let mut e = 0;
    for j in 0..n {
        let s = total * j as f64 / n as f64;
        while e + 1 < m && cum[e + 1] <= s {
            e += 1;
        }
        let (a, b) = (pts[e], pts[(e + 1) % m]);
        let len = cum[e + 1] - cum[e];
        let t = ((s - cum[e]) / len).clamp(0.0, 1.0);
        out.push(if t == 0.0 { a } else { a + (b - a) * t });
    }
    Contour::new(out)
}

/// Cyclic shift `k` minimising `Σ_i ‖pred_i − gt_{(i+k) mod N}‖`; ties go to
/// the smallest `k`.
pub fn pair_to_ground_truth(pred: &Contour, gt: &Contour) -> Result<usize> {
    let n = pred.len();
    if gt.len() != n {
        return Err(geom_err!("pairing needs equal lengths, got {n} and {}", gt.len()));
    }
    let (p, g) = (pred.points(), gt.points());
    let mut best = (f64::INFINITY, 0);
    for k in 0..n {
        let cost: f64 = (0..n).map(|i| p[i].dist(g[(i + k) % n])).sum();
        if cost < best.0 {
            best = (cost, k);
        }
    }
    Ok(best.1)
}
