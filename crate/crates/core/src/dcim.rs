//! Differential convolution inception block: stepped, diagonal and circular
//! pixel-difference branches plus an average-pooling branch, fused by a 1×1
//! convolution.

use rand::Rng;

use crate::diff::{Graph, NodeId, ParamId, ParamSet};
use crate::error::{shape_err, Result};

/// Ordered pairs `(i, i′)` of 3×3 patch indices (row-major, 4 = centre);
/// each contributes `x_i − x_i′`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPattern {
    pairs: Vec<(usize, usize)>,
}

impl PairPattern {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(shape_err!("pattern needs at least one pair"));
        }
        if let Some(p) = pairs.iter().find(|&&(a, b)| a > 8 || b > 8 || a == b) {
            return Err(shape_err!("invalid patch pair {p:?}"));
        }
        Ok(Self { pairs })
    }

    /// Axis-aligned first differences towards the centre, then one step out.
    pub fn stepped() -> Self {
        Self::new(vec![(1, 4), (7, 4), (3, 4), (5, 4), (0, 1), (2, 1), (6, 7), (8, 7)]).unwrap()
    }

    /// Diagonal differences to the centre plus the two long diagonals.
    pub fn diagonal() -> Self {
        Self::new(vec![(0, 4), (2, 4), (6, 4), (8, 4), (0, 8), (2, 6)]).unwrap()
    }

    /// Radial (neighbour − centre) and ring (clockwise neighbour steps) pairs.
    pub fn circular() -> Self {
        let mut pairs: Vec<(usize, usize)> = (0..9).filter(|&k| k != 4).map(|k| (k, 4)).collect();
        pairs.extend([(0, 1), (1, 2), (2, 5), (5, 8), (8, 7), (7, 6), (6, 3), (3, 0)]);
        Self::new(pairs).unwrap()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One differential branch: a pattern and the ids of its kernel
/// `[C_out × C_in × m]` and bias `[C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DCBranch {
    pub pattern: PairPattern,
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl DCBranch {
    pub fn forward(&self, g: &mut Graph, w: &[NodeId], x: NodeId) -> Result<NodeId> {
        g.diff_conv(x, self.pattern.pairs(), w[self.kernel.index()], w[self.bias.index()])
    }
}

/// Same-size 3×3 cross-correlation.
pub fn standard_conv3x3(g: &mut Graph, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId> {
    g.conv2d(x, k, b, 1)
}

pub const BRANCH_WIDTH: usize = 4;
pub const DEFAULT_FEATURES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Dcim {
    pub params: ParamSet,
    pub branches: [DCBranch; 3],
    fuse_w: ParamId,
    fuse_b: ParamId,
    features: usize,
}

impl Dcim {
    pub fn new<R: Rng + ?Sized>(features: usize, rng: &mut R) -> Self {
        let mut p = ParamSet::new();
        let branch = |name: &str, pattern: PairPattern, p: &mut ParamSet, rng: &mut R| {
            let m = pattern.len();
            let kernel = p.add_glorot(format!("{name}.w"), &[BRANCH_WIDTH, 1, m], m, BRANCH_WIDTH * m, rng);
            let bias = p.add_zeros(format!("{name}.b"), &[BRANCH_WIDTH]);
            DCBranch { pattern, kernel, bias }
        };
        let branches = [
            branch("sdc", PairPattern::stepped(), &mut p, rng),
            branch("ddc", PairPattern::diagonal(), &mut p, rng),
            branch("cdc", PairPattern::circular(), &mut p, rng),
        ];
        let cin = 3 * BRANCH_WIDTH + 1;
        let fuse_w = p.add_glorot("fuse.w", &[features, cin], cin, features, rng);
        let fuse_b = p.add_zeros("fuse.b", &[features]);
        Self {
            params: p,
            branches,
            fuse_w,
            fuse_b,
            features,
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// `energy[1×H×W]` → `F×H×W`.
    pub fn forward(&self, g: &mut Graph, w: &[NodeId], energy: NodeId) -> Result<NodeId> {
        let (c, h, wd) = g.value(energy).dims3()?;
        if c != 1 || h < 3 || wd < 3 {
            return Err(shape_err!("dcim takes a 1×H×W map with H, W ≥ 3, got {c}×{h}×{wd}"));
        }
        let mut parts = Vec::with_capacity(4);
        for b in &self.branches {
            parts.push(b.forward(g, w, energy)?);
        }
        parts.push(g.avg_pool3x3(energy)?);
        let cat = g.concat0(&parts)?;
        g.conv1x1(cat, w[self.fuse_w.index()], w[self.fuse_b.index()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, Tensor};
    use crate::energymap::analytic_energy_map;
    use crate::geometry::Mask;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    /// Direct evaluation with edge-replicated neighbours.
    fn oracle(x: &Tensor, pairs: &[(usize, usize)], w: &Tensor, b: &[f64]) -> Vec<f64> {
        let (c, h, wd) = x.dims3().unwrap();
        let cout = w.shape()[0];
        let m = pairs.len();
        let px = |ch: usize, y: i64, xx: i64, k: usize| {
            let yy = (y + (k / 3) as i64 - 1).clamp(0, h as i64 - 1) as usize;
            let xq = (xx + (k % 3) as i64 - 1).clamp(0, wd as i64 - 1) as usize;
            x.data()[ch * h * wd + yy * wd + xq]
        };
        let mut out = vec![0.0; cout * h * wd];
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for ch in 0..c {
                        for (j, &(a, bb)) in pairs.iter().enumerate() {
                            let d = px(ch, y as i64, xx as i64, a) - px(ch, y as i64, xx as i64, bb);
                            acc += w.data()[(o * c + ch) * m + j] * d;
                        }
                    }
                    out[o * h * wd + y * wd + xx] = acc;
                }
            }
        }
        out
    }

    fn run(x: &Tensor, pairs: &[(usize, usize)], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.diff_conv(xi, pairs, wi, bi).unwrap();
        g.data(y).to_vec()
    }

    fn patterns() -> [PairPattern; 3] {
        [PairPattern::stepped(), PairPattern::diagonal(), PairPattern::circular()]
    }

    #[test]
    fn pattern_validation() {
        assert_eq!(PairPattern::stepped().len(), 8);
        assert_eq!(PairPattern::diagonal().len(), 6);
        assert_eq!(PairPattern::circular().len(), 16);
        assert!(PairPattern::new(vec![(4, 4)]).is_err());
        assert!(PairPattern::new(vec![(9, 4)]).is_err());
        assert!(PairPattern::new(vec![]).is_err());
    }

    #[test]
    fn matches_pairwise_difference_oracle() {
        let mut r = rng();
        for p in patterns() {
            let x = Tensor::uniform(&[2, 7, 9], -1.0, 1.0, &mut r);
            let w = Tensor::uniform(&[3, 2, p.len()], -1.0, 1.0, &mut r);
            let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
            let got = run(&x, p.pairs(), &w, &b);
            let want = oracle(&x, p.pairs(), &w, b.data());
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_input_gives_bias() {
        let mut r = rng();
        for p in patterns() {
            let x = Tensor::full(&[1, 6, 5], 3.7);
            let w = Tensor::uniform(&[2, 1, p.len()], -1.0, 1.0, &mut r);
            let b = Tensor::new(&[2], vec![0.25, -1.5]).unwrap();
            let y = run(&x, p.pairs(), &w, &b);
            assert!(y[..30].iter().all(|&v| v == 0.25));
            assert!(y[30..].iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn ramp_with_east_radial_pair() {
        let x = Tensor::from_fn(&[1, 5, 6], |i| (i % 6) as f64);
        let w = Tensor::new(&[1, 1, 1], vec![1.0]).unwrap();
        let y = run(&x, &[(5, 4)], &w, &Tensor::zeros(&[1]));
        for r in 1..4 {
            for c in 1..5 {
                assert_eq!(y[r * 6 + c], 1.0);
            }
        }
    }

    #[test]
    fn kernel_pattern_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 1, 5]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(g.diff_conv(x, PairPattern::diagonal().pairs(), w, b).is_err());
    }

    #[test]
    fn standard_conv_delta_identity() {
        let x = Tensor::uniform(&[1, 5, 5], -1.0, 1.0, &mut rng());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let mut g = Graph::new();
        let (xi, ki, bi) = (g.constant(x.clone()), g.constant(k), g.constant(Tensor::zeros(&[1])));
        let y = standard_conv3x3(&mut g, xi, ki, bi).unwrap();
        assert_eq!(g.data(y), x.data());
    }

    #[test]
    fn dcim_constant_map_uniform() {
        let net = Dcim::new(DEFAULT_FEATURES, &mut rng());
        let mut g = Graph::new();
        let w = net.params.bind(&mut g, false);
        let e = g.constant(Tensor::full(&[1, 9, 11], 0.6));
        let y = net.forward(&mut g, w.ids(), e).unwrap();
        assert_eq!(g.shape(y), &[16, 9, 11]);
        for plane in g.data(y).chunks(99) {
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn dcim_channel_count_independent_of_size() {
        let net = Dcim::new(DEFAULT_FEATURES, &mut rng());
        for (h, w) in [(3, 3), (16, 16), (20, 12)] {
            let mut g = Graph::new();
            let b = net.params.bind(&mut g, false);
            let e = g.constant(Tensor::full(&[1, h, w], 0.1));
            let y = net.forward(&mut g, b.ids(), e).unwrap();
            assert_eq!(g.shape(y), &[16, h, w]);
        }
        let mut g = Graph::new();
        let b = net.params.bind(&mut g, false);
        let e = g.constant(Tensor::zeros(&[1, 2, 8]));
        assert!(net.forward(&mut g, b.ids(), e).is_err());
    }

    #[test]
    fn dcim_gradients() {
        let mut r = rng();
        let net = Dcim::new(6, &mut r);
        let e = Tensor::uniform(&[1, 6, 7], 0.0, 1.0, &mut r);
        let mut params = net.params.tensors().to_vec();
        // nonzero biases so their gradients are exercised against a probe
        for t in params.iter_mut() {
            if t.rank() == 1 {
                *t = Tensor::uniform(t.shape(), -0.5, 0.5, &mut r);
            }
        }
        params.push(e);
        let probe = Tensor::uniform(&[6, 6, 7], -1.0, 1.0, &mut r);
        let err = grad_check(
            |g, p| {
                let n = p.len();
                let y = net.forward(g, &p[..n - 1], p[n - 1])?;
                let pr = g.constant(probe.clone());
                let z = g.mul(y, pr)?;
                let s = g.sum(z);
                let q = g.square(s);
                Ok(g.add(q, s)?)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn diff_conv_gradients_all_patterns() {
        let mut r = rng();
        for p in patterns() {
            let x = Tensor::uniform(&[2, 5, 6], -1.0, 1.0, &mut r);
            let w = Tensor::uniform(&[3, 2, p.len()], -1.0, 1.0, &mut r);
            let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
            let err = grad_check(
                |g, q| {
                    let y = g.diff_conv(q[0], p.pairs(), q[1], q[2])?;
                    let s = g.square(y);
                    Ok(g.sum(s))
                },
                &[x, w, b],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn circular_response_antisymmetric_across_straight_boundary() {
        let (w, h, c0) = (41, 9, 20);
        let mut m = Mask::new(w, h);
        for y in 0..h {
            m.set(c0, y, true);
        }
        let e = analytic_energy_map(&m).unwrap().to_tensor();
        // east − west radial difference cancels curvature exactly
        let ew = run(&e, &[(5, 4), (3, 4)], &Tensor::new(&[1, 1, 2], vec![1.0, -1.0]).unwrap(), &Tensor::zeros(&[1]));
        let east = run(&e, &[(5, 4)], &Tensor::new(&[1, 1, 1], vec![1.0]).unwrap(), &Tensor::zeros(&[1]));
        let row = 4 * w;
        for d in 1..15 {
            let (l, r) = (row + c0 - d, row + c0 + d);
            assert!(ew[l] > 0.0 && ew[r] < 0.0);
            assert!((ew[l] + ew[r]).abs() < 1e-9);
            if d >= 2 {
                let slope = 32.0 / (1.0 + d as f64);
                assert!(east[l] > 0.0 && east[r] < 0.0);
                assert!((east[l] + east[r]).abs() <= 0.5 * slope, "d={d}");
            }
        }
    }

    proptest! {
        #[test]
        fn linear_up_to_bias(alpha in -2.0f64..2.0, beta in -2.0f64..2.0, seed in 0u64..500) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = PairPattern::circular();
            let x = Tensor::uniform(&[1, 5, 5], -1.0, 1.0, &mut r);
            let z = Tensor::uniform(&[1, 5, 5], -1.0, 1.0, &mut r);
            let w = Tensor::uniform(&[2, 1, p.len()], -1.0, 1.0, &mut r);
            let b = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
            let comb = Tensor::new(&[1, 5, 5], x.data().iter().zip(z.data()).map(|(a, c)| alpha * a + beta * c).collect()).unwrap();
            let lhs = run(&comb, p.pairs(), &w, &b);
            let (yx, yz) = (run(&x, p.pairs(), &w, &b), run(&z, p.pairs(), &w, &b));
            for i in 0..lhs.len() {
                let bias = b.data()[i / 25];
                let rhs = alpha * yx[i] + beta * yz[i] - (alpha + beta - 1.0) * bias;
                prop_assert!((lhs[i] - rhs).abs() < 1e-10);
            }
        }
    }
}
