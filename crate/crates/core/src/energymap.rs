//! Distance energy prior: the analytic log-distance map and a small
//! encoder–decoder that learns to predict it from the image.

use rand::Rng;

use crate::diff::{Graph, NodeId, ParamId, ParamSet, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{distance_transform, Mask};
use crate::pnm::Gray;

pub const ENERGY_MAX: f64 = 255.0;
pub const ENERGY_SLOPE: f64 = 32.0;
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Distance beyond which the energy is identically zero.
pub fn energy_cutoff() -> f64 {
    (ENERGY_MAX / ENERGY_SLOPE).exp() - 1.0
}

/// `max(0, 255 − 32·ln(1 + d))`.
pub fn energy_from_distance(d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::Domain(format!("distance must be nonnegative, got {d}")));
    }
    if d >= energy_cutoff() {
        return Ok(0.0);
    }
    Ok((ENERGY_MAX - ENERGY_SLOPE * d.ln_1p()).max(0.0))
}

/// Per-pixel energy in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyMap {
    width: usize,
    height: usize,
    e: Vec<f64>,
}

impl EnergyMap {
    pub fn new(width: usize, height: usize, e: Vec<f64>) -> Result<Self> {
        if e.len() != width * height {
            return Err(shape_err!("energy map {width}×{height} with {} values", e.len()));
        }
        if let Some(v) = e.iter().find(|v| !(0.0..=ENERGY_MAX).contains(*v)) {
            return Err(Error::Domain(format!("energy {v} outside [0, 255]")));
        }
        Ok(Self { width, height, e })
    }

    /// From network output in normalised units, clamped into range.
    pub fn from_normalized(width: usize, height: usize, v: &[f64]) -> Result<Self> {
        Self::new(width, height, v.iter().map(|x| (x * ENERGY_MAX).clamp(0.0, ENERGY_MAX)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.e
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.e[y * self.width + x]
    }

    /// `1×H×W` tensor in energy units.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.e.clone()).unwrap()
    }

    /// `1×H×W` tensor scaled into `[0, 1]`.
    pub fn normalized_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.e.iter().map(|v| v / ENERGY_MAX).collect()).unwrap()
    }

    /// `1×H×W` tensor of `(e − 255) / 32`, which equals `−ln(1 + d)` below
    /// the cutoff. Differences between neighbouring pixels are of order one
    /// near a boundary instead of a few hundredths in `[0, 1]` units.
    pub fn slope_tensor(&self) -> Tensor {
        let v = self.e.iter().map(|e| (e - ENERGY_MAX) / ENERGY_SLOPE).collect();
        Tensor::new(&[1, self.height, self.width], v).unwrap()
    }

    /// 8-bit view, rounded to nearest; for visualisation only.
    pub fn to_gray(&self) -> Gray {
        Gray {
            width: self.width,
            height: self.height,
            pixels: self.e.iter().map(|v| v.round() as u8).collect(),
        }
    }
}

/// Energy of every pixel from its exact distance to the nearest boundary pixel.
pub fn analytic_energy_map(boundaries: &Mask) -> Result<EnergyMap> {
    let d = distance_transform(boundaries)?;
    let e = d.data().iter().map(|&v| energy_from_distance(v)).collect::<Result<_>>()?;
    EnergyMap::new(boundaries.width(), boundaries.height(), e)
}

/// `1×H×W` network input from an 8-bit image, scaled into `[0, 1]`.
pub fn image_tensor(img: &Gray) -> Tensor {
    Tensor::new(&[1, img.height, img.width], img.pixels.iter().map(|&p| p as f64 / 255.0).collect()).unwrap()
}

/// Mean Charbonnier penalty `√((p − t)² + ε²)` with ε = 1e-3.
pub fn charbonnier_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    g.charbonnier(pred, target, CHARBONNIER_EPS)
}

const DOWN: [usize; 2] = [8, 16];

/// Two stride-2 3×3 convolutions down, two stride-2 transposed convolutions
/// up, ReLU after each, and a 1×1 linear head. Predicts energy / 255.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyNet {
    pub params: ParamSet,
    ids: [ParamId; 10],
}

impl EnergyNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = ParamSet::new();
        let [c1, c2] = DOWN;
        let ids = [
            p.add_glorot("down1.w", &[c1, 1, 3, 3], 9, c1 * 9, rng),
            p.add_zeros("down1.b", &[c1]),
            p.add_glorot("down2.w", &[c2, c1, 3, 3], c1 * 9, c2 * 9, rng),
            p.add_zeros("down2.b", &[c2]),
            p.add_glorot("up1.w", &[c2, c1, 3, 3], c2 * 9, c1 * 9, rng),
            p.add_zeros("up1.b", &[c1]),
            p.add_glorot("up2.w", &[c1, c1, 3, 3], c1 * 9, c1 * 9, rng),
            p.add_zeros("up2.b", &[c1]),
            p.add_glorot("head.w", &[1, c1], c1, 1, rng),
            p.add_zeros("head.b", &[1]),
        ];
        Self { params: p, ids }
    }

    /// Forward pass on `image[1×H×W]`; `w` holds this net's parameter nodes
    /// in registration order. Output is `1×H×W`, unclamped.
    pub fn forward(&self, g: &mut Graph, w: &[NodeId], image: NodeId) -> Result<NodeId> {
        let (c, h, wd) = g.value(image).dims3()?;
        if c != 1 {
            return Err(shape_err!("energy net takes one channel, got {c}"));
        }
        if h % 4 != 0 || wd % 4 != 0 {
            return Err(shape_err!("image {h}×{wd} must have sides divisible by 4"));
        }
        let p = |i: usize| w[self.ids[i].index()];
        let x = g.conv2d(image, p(0), p(1), 2)?;
        let x = g.relu(x);
        let x = g.conv2d(x, p(2), p(3), 2)?;
        let x = g.relu(x);
        let x = g.conv_transpose2d(x, p(4), p(5))?;
        let x = g.relu(x);
        let x = g.conv_transpose2d(x, p(6), p(7))?;
        let x = g.relu(x);
        g.conv1x1(x, p(8), p(9))
    }

    /// Inference: clamped energy map in `[0, 255]`.
    pub fn predict(&self, image: &Tensor) -> Result<EnergyMap> {
        let mut g = Graph::new();
        let w = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, w.ids(), x)?;
        let (_, h, wd) = g.value(y).dims3()?;
        EnergyMap::from_normalized(wd, h, g.data(y))
    }
}
