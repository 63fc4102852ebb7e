//! Momentum-aware offset head: multi-head cross-attention between current
//! and previous vertex features whose values carry the previous
//! displacement, followed by circular 1-D convolutions over the contour.

use rand::Rng;

use crate::diff::{Graph, NodeId, ParamId, ParamSet, Tensor};
use crate::error::{geom_err, shape_err, Result};

/// Box frame used to normalise vertex coordinates into roughly `[−1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Frame {
    pub fn from_bounds(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let (hx, hy) = ((x_max - x_min) / 2.0, (y_max - y_min) / 2.0);
        if !(hx > 0.0 && hy > 0.0) {
            return Err(geom_err!("degenerate box [{x_min}, {x_max}] × [{y_min}, {y_max}]"));
        }
        Ok(Self {
            cx: (x_min + x_max) / 2.0,
            cy: (y_min + y_max) / 2.0,
            hx,
            hy,
        })
    }
}

/// Bilinear samples of every map channel at `points[N×2]` (pixels), followed
/// by the box-normalised coordinates: `N×(F+2)`.
pub fn sample_features(g: &mut Graph, maps: NodeId, points: NodeId, frame: Frame) -> Result<NodeId> {
    let s = g.bilinear_sample(maps, points)?;
    let xy = g.affine_cols(points, &[1.0 / frame.hx, 1.0 / frame.hy], &[-frame.cx / frame.hx, -frame.cy / frame.hy])?;
    g.concat_cols(&[s, xy])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AmemConfig {
    /// Map channels `F`; point features have `F + 2` columns.
    pub features: usize,
    /// Attention width `C`.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub kernel: usize,
    /// When false the attention path is dropped and only the conv stack runs.
    pub use_attention: bool,
}

impl Default for AmemConfig {
    fn default() -> Self {
        Self {
            features: 16,
            width: 32,
            heads: 4,
            layers: 4,
            kernel: 9,
            use_attention: true,
        }
    }
}

/// Per-iteration inputs; all rows indexed by vertex.
#[derive(Clone, Copy, Debug)]
pub struct EvolutionState {
    pub iteration: usize,
    /// `N×(F+2)` features at the current vertices.
    pub current: NodeId,
    /// `N×(F+2)` features at the previous iteration's vertices.
    pub history: NodeId,
    /// `N×2` previous displacement in pixels (zero at the first iteration).
    pub displacement: NodeId,
    pub frame: Frame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmemHead {
    pub params: ParamSet,
    pub config: AmemConfig,
    lift_w: ParamId,
    lift_b: ParamId,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    embed: ParamId,
    convs: Vec<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

impl AmemHead {
    pub fn new<R: Rng + ?Sized>(config: AmemConfig, rng: &mut R) -> Result<Self> {
        let AmemConfig {
            features,
            width: c,
            heads,
            layers,
            kernel,
            ..
        } = config;
        if heads == 0 || c % heads != 0 {
            return Err(shape_err!("width {c} not divisible by {heads} heads"));
        }
        if kernel % 2 == 0 {
            return Err(shape_err!("circular kernel size must be odd, got {kernel}"));
        }
        let d = c / heads;
        let mut p = ParamSet::new();
        let fin = features + 2;
        let lift_w = p.add_glorot("lift.w", &[fin, c], fin, c, rng);
        let lift_b = p.add_zeros("lift.b", &[c]);
        let mut proj = |tag: &str, p: &mut ParamSet| -> Vec<ParamId> {
            (0..heads).map(|h| p.add_glorot(format!("attn.{tag}{h}"), &[c, d], c, d, rng)).collect()
        };
        let wq = proj("q", &mut p);
        let wk = proj("k", &mut p);
        let wv = proj("v", &mut p);
        let embed = p.add_glorot("attn.embed", &[2, c], 2, c, rng);
        let convs = (0..layers)
            .map(|l| {
                (
                    p.add_glorot(format!("conv{l}.w"), &[c, c, kernel], c * kernel, c * kernel, rng),
                    p.add_zeros(format!("conv{l}.b"), &[c]),
                )
            })
            .collect();
        let out_w = p.add_glorot("out.w", &[c, 2], c, 2, rng);
        let out_b = p.add_zeros("out.b", &[2]);
        Ok(Self {
            params: p,
            config,
            lift_w,
            lift_b,
            wq,
            wk,
            wv,
            embed,
            convs,
            out_w,
            out_b,
        })
    }

    fn p(w: &[NodeId], id: ParamId) -> NodeId {
        w[id.index()]
    }

    /// Linear lift of `N×(F+2)` point features to the attention width.
    pub fn lift(&self, g: &mut Graph, w: &[NodeId], f: NodeId) -> Result<NodeId> {
        let y = g.matmul(f, Self::p(w, self.lift_w))?;
        g.add_row_bias(y, Self::p(w, self.lift_b))
    }

    /// Per head: `softmax(f_c W_q (f_h W_k)ᵀ / √(C/h)) · embed(disp) W_v`;
    /// heads are concatenated back to `N×C`. `disp` is box-normalised.
    pub fn cross_attention(&self, g: &mut Graph, w: &[NodeId], fc: NodeId, fh: NodeId, disp: NodeId) -> Result<NodeId> {
        let c = self.config.width;
        for x in [fc, fh] {
            let (_, cols) = g.value(x).dims2()?;
            if cols != c {
                return Err(shape_err!("attention input has {cols} columns, expected {c}"));
            }
        }
        let scale = 1.0 / ((c / self.config.heads) as f64).sqrt();
        let e = g.matmul(disp, Self::p(w, self.embed))?;
        let mut outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = g.matmul(fc, Self::p(w, self.wq[h]))?;
            let k = g.matmul(fh, Self::p(w, self.wk[h]))?;
            let v = g.matmul(e, Self::p(w, self.wv[h]))?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s)?;
            outs.push(g.matmul(a, v)?);
        }
        g.concat_cols(&outs)
    }

    /// Circular conv stack with ReLU after every layer, then the linear
    /// 2-channel head. Input `N×C`, output `N×2` in box-normalised units.
    pub fn conv_stack(&self, g: &mut Graph, w: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut x = x;
        for &(cw, cb) in &self.convs {
            let y = g.circular_conv1d(x, Self::p(w, cw), Self::p(w, cb))?;
            x = g.relu(y);
        }
        let y = g.matmul(x, Self::p(w, self.out_w))?;
        g.add_row_bias(y, Self::p(w, self.out_b))
    }

    /// Per-vertex offsets in pixels.
    pub fn predict_offsets(&self, g: &mut Graph, w: &[NodeId], s: &EvolutionState) -> Result<NodeId> {
        let fr = s.frame;
        let fc = self.lift(g, w, s.current)?;
        let x = if self.config.use_attention {
            let fh = self.lift(g, w, s.history)?;
            let disp = g.affine_cols(s.displacement, &[1.0 / fr.hx, 1.0 / fr.hy], &[0.0, 0.0])?;
            let att = self.cross_attention(g, w, fc, fh, disp)?;
            g.add(fc, att)?
        } else {
            fc
        };
        let raw = self.conv_stack(g, w, x)?;
        g.affine_cols(raw, &[fr.hx, fr.hy], &[0.0, 0.0])
    }
}

/// Attention weights of one head, for inspection: `N×N`, rows sum to 1.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qi, ki) = (g.constant(q.clone()), g.constant(k.clone()));
    let kt = g.transpose(ki)?;
    let s = g.matmul(qi, kt)?;
    let d = q.dims2()?.1 as f64;
    let s = g.scale(s, 1.0 / d.sqrt());
    let a = g.softmax_rows(s)?;
    Ok(g.value(a).clone())
}
