use crate::error::{shape_err, Result};

use super::graph::Node;
use super::{Graph, NodeId, Tensor};

/// Interpolation cell for a continuous pixel coordinate. Pixel `i` has its
/// centre at `i + 0.5`; coordinates beyond the outermost centres clamp and
/// have zero derivative.
#[derive(Clone, Copy)]
struct Cell {
    i0: usize,
    i1: usize,
    frac: f64,
    live: bool,
}

fn cell(coord: f64, len: usize) -> Cell {
    let u = coord - 0.5;
    let hi = (len - 1) as f64;
    if len == 1 || u <= 0.0 || u >= hi || !u.is_finite() {
        let i = if len == 1 || u <= 0.0 || u.is_nan() { 0 } else { len - 1 };
        return Cell {
            i0: i,
            i1: i,
            frac: 0.0,
            live: false,
        };
    }
    let i0 = (u.floor() as usize).min(len - 2);
    Cell {
        i0,
        i1: i0 + 1,
        frac: u - i0 as f64,
        live: true,
    }
}

fn val(nodes: &[Node], id: NodeId) -> &[f64] {
    nodes[id.0].value.data()
}

impl Graph {
    /// Bilinear lookup of every channel of `maps[F×H×W]` at the points
    /// `points[N×2]` (columns x, y in pixel units). Result is `N×F`,
    /// differentiable with respect to both the maps and the positions.
    pub fn bilinear_sample(&mut self, maps: NodeId, points: NodeId) -> Result<NodeId> {
        let (f, h, w) = self.value(maps).dims3()?;
        let (n, two) = self.value(points).dims2()?;
        if two != 2 {
            return Err(shape_err!("points must be N×2, got N×{two}"));
        }
        let pv = self.data(points);
        let cells: Vec<(Cell, Cell)> = pv.chunks(2).map(|p| (cell(p[0], w), cell(p[1], h))).collect();
        let mv = self.data(maps);
        let hw = h * w;
        let mut out = vec![0.0; n * f];
        for (i, &(cx, cy)) in cells.iter().enumerate() {
            for c in 0..f {
                let m = &mv[c * hw..];
                let (a, b) = (m[cy.i0 * w + cx.i0], m[cy.i0 * w + cx.i1]);
                let (d, e) = (m[cy.i1 * w + cx.i0], m[cy.i1 * w + cx.i1]);
                let top = a + cx.frac * (b - a);
                let bot = d + cx.frac * (e - d);
                out[i * f + c] = top + cy.frac * (bot - top);
            }
        }
        Ok(self.push(
            Tensor::new(&[n, f], out)?,
            &[maps, points],
            Box::new(move |nodes, g, grads| {
                if let Some(dm) = grads.slot(maps) {
                    for (i, &(cx, cy)) in cells.iter().enumerate() {
                        let (fx, fy) = (cx.frac, cy.frac);
                        for c in 0..f {
                            let gv = g[i * f + c];
                            let m = &mut dm[c * hw..];
                            m[cy.i0 * w + cx.i0] += gv * (1.0 - fx) * (1.0 - fy);
                            m[cy.i0 * w + cx.i1] += gv * fx * (1.0 - fy);
                            m[cy.i1 * w + cx.i0] += gv * (1.0 - fx) * fy;
                            m[cy.i1 * w + cx.i1] += gv * fx * fy;
                        }
                    }
                }
                if grads.wants(points) {
                    let mv = val(nodes, maps);
                    let mut dp = vec![0.0; n * 2];
                    for (i, &(cx, cy)) in cells.iter().enumerate() {
                        for c in 0..f {
                            let gv = g[i * f + c];
                            let m = &mv[c * hw..];
                            let (a, b) = (m[cy.i0 * w + cx.i0], m[cy.i0 * w + cx.i1]);
                            let (d, e) = (m[cy.i1 * w + cx.i0], m[cy.i1 * w + cx.i1]);
                            if cx.live {
                                dp[i * 2] += gv * ((1.0 - cy.frac) * (b - a) + cy.frac * (e - d));
                            }
                            if cy.live {
                                dp[i * 2 + 1] += gv * ((1.0 - cx.frac) * (d - a) + cx.frac * (e - b));
                            }
                        }
                    }
                    grads.add(points, &dp);
                }
            }),
        ))
    }
}
