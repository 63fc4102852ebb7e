use crate::error::{geom_err, Result};

use super::contour::{crossing_x, Contour};

/// Binary image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(geom_err!("mask of {width}×{height} needs {} bits, got {}", width * height, bits.len()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Sets `(x, y)` when it lies inside the image; ignores it otherwise.
    pub fn set_clipped(&mut self, x: i64, y: i64) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.set(x as usize, y as usize, true);
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_dims(&self, o: &Mask) -> Result<()> {
        if (self.width, self.height) != (o.width, o.height) {
            return Err(geom_err!(
                "mask dimensions differ: {}×{} vs {}×{}",
                self.width,
                self.height,
                o.width,
                o.height
            ));
        }
        Ok(())
    }

    pub fn intersection_count(&self, o: &Mask) -> Result<usize> {
        self.check_dims(o)?;
        Ok(self.bits.iter().zip(&o.bits).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_with(&mut self, o: &Mask) -> Result<()> {
        self.check_dims(o)?;
        self.bits.iter_mut().zip(&o.bits).for_each(|(a, b)| *a |= *b);
        Ok(())
    }

    pub fn subtract(&mut self, o: &Mask) -> Result<()> {
        self.check_dims(o)?;
        self.bits.iter_mut().zip(&o.bits).for_each(|(a, b)| *a &= !*b);
        Ok(())
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }
}

/// Even-odd fill; pixel `(x, y)` is set when its centre `(x+0.5, y+0.5)`
/// lies inside. Parts outside the image are clipped.
pub fn rasterize(poly: &Contour, width: usize, height: usize) -> Mask {
    let mut m = Mask::new(width, height);
    let mut xs = Vec::new();
    for y in 0..height {
        let py = y as f64 + 0.5;
        xs.clear();
        for (a, b) in poly.edges() {
            if (a.y > py) != (b.y > py) {
                xs.push(crossing_x(a, b, py));
            }
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        // crossings at or left of the centre; parity of the rest decides
        let mut left = 0;
        for x in 0..width {
            let px = x as f64 + 0.5;
            while left < xs.len() && xs[left] <= px {
                left += 1;
            }
            if (xs.len() - left) % 2 == 1 {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// One-pixel-thick 8-connected outline: Bresenham lines between the pixels
/// containing consecutive vertices.
pub fn outline(poly: &Contour, width: usize, height: usize) -> Mask {
    let mut m = Mask::new(width, height);
    draw_outline(&mut m, poly);
    m
}

pub fn draw_outline(m: &mut Mask, poly: &Contour) {
    for (a, b) in poly.edges() {
        let (x0, y0) = (a.x.floor() as i64, a.y.floor() as i64);
        let (x1, y1) = (b.x.floor() as i64, b.y.floor() as i64);
        bresenham(x0, y0, x1, y1, |x, y| m.set_clipped(x, y));
    }
}

pub fn bresenham(mut x0: i64, mut y0: i64, x1: i64, y1: i64, mut plot: impl FnMut(i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(x0, y0);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// `|a∩b| / |a∪b|`, defined as 1 when both masks are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2|a∩b| / (|a|+|b|)`, defined as 1 when both masks are empty.
pub fn mask_dice(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}
