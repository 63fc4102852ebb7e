//! Spatial and circular convolutions.
//!
//! Images are `C×H×W`, kernels `C_out×C_in×3×3` (transposed convolutions use
//! `C_in×C_out×3×3`). Contour sequences are `N×C` with one row per vertex.

use crate::error::{shape_err, Result};

use super::graph::Node;
use super::linalg::gemm;
use super::{Graph, NodeId, Tensor};

const K: usize = 3;

fn val(nodes: &[Node], id: NodeId) -> &[f64] {
    nodes[id.0].value.data()
}

/// Output side length of a 3×3 convolution with padding 1.
fn out_len(len: usize, stride: usize) -> usize {
    (len + 2 - K) / stride + 1
}

/// Unfolds 3×3 patches: row `c·9 + ky·3 + kx`, column `oy·ow + ox`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize, oh: usize, ow: usize, cols: &mut [f64]) {
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((ch * K + ky) * K + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, stride: usize, oh: usize, ow: usize, x: &mut [f64]) {
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ch * K + ky) * K + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn channel_sums(g: &[f64], c: usize) -> Vec<f64> {
    let plane = g.len() / c;
    g.chunks(plane).map(|p| p.iter().sum()).collect()
}

/// Offsets (dy, dx) of the 3×3 patch index `0..9`, row-major, 4 = centre.
fn patch_offset(i: usize) -> (isize, isize) {
    (i as isize / 3 - 1, i as isize % 3 - 1)
}

impl Graph {
    fn check_kernel(&self, w: NodeId, b: NodeId, cout: usize, cin: usize, inner: usize) -> Result<()> {
        if self.shape(w).iter().product::<usize>() != cout * cin * inner || self.shape(w)[0] != cout {
            return Err(shape_err!(
                "kernel shape {:?} incompatible with {cin} input channels",
                self.shape(w)
            ));
        }
        if self.value(b).len() != cout {
            return Err(shape_err!("bias of length {} for {cout} output channels", self.value(b).len()));
        }
        Ok(())
    }

    /// 3×3 cross-correlation with zero padding 1 and the given stride.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (c, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != K || ws[3] != K {
            return Err(shape_err!("conv2d kernel {ws:?} for {c} input channels"));
        }
        let cout = ws[0];
        self.check_kernel(w, b, cout, c, K * K)?;
        let (oh, ow) = (out_len(h, stride), out_len(wd, stride));
        let ckk = c * K * K;
        let mut cols = vec![0.0; ckk * oh * ow];
        im2col(self.data(x), c, h, wd, stride, oh, ow, &mut cols);
        let mut out = vec![0.0; cout * oh * ow];
        let bv = self.data(b);
        for (co, plane) in out.chunks_mut(oh * ow).enumerate() {
            plane.fill(bv[co]);
        }
        gemm(cout, ckk, oh * ow, self.data(w), false, &cols, false, &mut out, 1.0);
        Ok(self.push(
            Tensor::new(&[cout, oh, ow], out)?,
            &[x, w, b],
            Box::new(move |nodes, g, grads| {
                if let Some(dw) = grads.slot(w) {
                    gemm(cout, oh * ow, ckk, g, false, &cols, true, dw, 1.0);
                }
                if let Some(db) = grads.slot(b) {
                    db.iter_mut().zip(channel_sums(g, cout)).for_each(|(d, s)| *d += s);
                }
                if grads.wants(x) {
                    let mut dcols = vec![0.0; ckk * oh * ow];
                    gemm(ckk, cout, oh * ow, val(nodes, w), true, g, false, &mut dcols, 0.0);
                    let dx = grads.slot(x).unwrap();
                    col2im(&dcols, c, h, wd, stride, oh, ow, dx);
                }
            }),
        ))
    }

    /// Stride-2 transposed 3×3 convolution (padding 1, output padding 1):
    /// `C_in×h×w → C_out×2h×2w`. Kernel layout `C_in×C_out×3×3`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != cin || ws[2] != K || ws[3] != K {
            return Err(shape_err!("transposed kernel {ws:?} for {cin} input channels"));
        }
        let cout = ws[1];
        if self.value(b).len() != cout {
            return Err(shape_err!("bias of length {} for {cout} output channels", self.value(b).len()));
        }
        let (oh, ow) = (2 * h, 2 * wd);
        let ckk = cout * K * K;
        let mut cols = vec![0.0; ckk * h * wd];
        gemm(ckk, cin, h * wd, self.data(w), true, self.data(x), false, &mut cols, 0.0);
        let mut out = vec![0.0; cout * oh * ow];
        col2im(&cols, cout, oh, ow, 2, h, wd, &mut out);
        let bv = self.data(b);
        for (co, plane) in out.chunks_mut(oh * ow).enumerate() {
            plane.iter_mut().for_each(|v| *v += bv[co]);
        }
        Ok(self.push(
            Tensor::new(&[cout, oh, ow], out)?,
            &[x, w, b],
            Box::new(move |nodes, g, grads| {
                if let Some(db) = grads.slot(b) {
                    db.iter_mut().zip(channel_sums(g, cout)).for_each(|(d, s)| *d += s);
                }
                if !grads.wants(x) && !grads.wants(w) {
                    return;
                }
                let mut dcols = vec![0.0; ckk * h * wd];
                im2col(g, cout, oh, ow, 2, h, wd, &mut dcols);
                if let Some(dx) = grads.slot(x) {
                    gemm(cin, ckk, h * wd, val(nodes, w), false, &dcols, false, dx, 1.0);
                }
                if let Some(dw) = grads.slot(w) {
                    gemm(cin, h * wd, ckk, val(nodes, x), false, &dcols, true, dw, 1.0);
                }
            }),
        ))
    }

    /// Pointwise convolution: kernel `C_out×C_in` (any trailing 1s allowed).
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, h, wd) = self.value(x).dims3()?;
        let cout = self.shape(w)[0];
        self.check_kernel(w, b, cout, c, 1)?;
        let mut out = vec![0.0; cout * h * wd];
        let bv = self.data(b);
        for (co, plane) in out.chunks_mut(h * wd).enumerate() {
            plane.fill(bv[co]);
        }
        gemm(cout, c, h * wd, self.data(w), false, self.data(x), false, &mut out, 1.0);
        Ok(self.push(
            Tensor::new(&[cout, h, wd], out)?,
            &[x, w, b],
            Box::new(move |nodes, g, grads| {
                if let Some(dw) = grads.slot(w) {
                    gemm(cout, h * wd, c, g, false, val(nodes, x), true, dw, 1.0);
                }
                if let Some(db) = grads.slot(b) {
                    db.iter_mut().zip(channel_sums(g, cout)).for_each(|(d, s)| *d += s);
                }
                if let Some(dx) = grads.slot(x) {
                    gemm(c, cout, h * wd, val(nodes, w), true, g, false, dx, 1.0);
                }
            }),
        ))
    }

    /// Pixel-difference convolution over a 3×3 neighbourhood:
    /// `y[o, p] = b[o] + Σ_c Σ_j w[o, c, j] · (x_c[p + a_j] − x_c[p + b_j])`
    /// for pattern pairs `(a_j, b_j)` given as patch indices `0..9`. Border
    /// pixels are replicated outwards, so constant inputs give bias only.
    pub fn diff_conv(&mut self, x: NodeId, pairs: &[(usize, usize)], w: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, h, wd) = self.value(x).dims3()?;
        let m = pairs.len();
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != c || ws[2] != m {
            return Err(shape_err!(
                "difference kernel {ws:?} for {c} channels and {m} pattern pairs"
            ));
        }
        if let Some(p) = pairs.iter().find(|&&(a, bb)| a > 8 || bb > 8 || a == bb) {
            return Err(shape_err!("invalid patch pair {p:?}"));
        }
        let cout = ws[0];
        self.check_kernel(w, b, cout, c, m)?;
        let hw = h * wd;
        let offs: Vec<((isize, isize), (isize, isize))> =
            pairs.iter().map(|&(a, bb)| (patch_offset(a), patch_offset(bb))).collect();
        let clamp = move |y: usize, xx: usize, (dy, dx): (isize, isize)| -> usize {
            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            let xq = (xx as isize + dx).clamp(0, wd as isize - 1) as usize;
            yy * wd + xq
        };
        let at = |plane: &[f64], y: usize, xx: usize, o: (isize, isize)| plane[clamp(y, xx, o)];
        let xv = self.data(x);
        let mut diffs = vec![0.0; c * m * hw];
        for ch in 0..c {
            let plane = &xv[ch * hw..(ch + 1) * hw];
            for (j, &(oa, ob)) in offs.iter().enumerate() {
                let row = &mut diffs[(ch * m + j) * hw..][..hw];
                for y in 0..h {
                    for xx in 0..wd {
                        row[y * wd + xx] = at(plane, y, xx, oa) - at(plane, y, xx, ob);
                    }
                }
            }
        }
        let mut out = vec![0.0; cout * hw];
        let bv = self.data(b);
        for (co, plane) in out.chunks_mut(hw).enumerate() {
            plane.fill(bv[co]);
        }
        gemm(cout, c * m, hw, self.data(w), false, &diffs, false, &mut out, 1.0);
        Ok(self.push(
            Tensor::new(&[cout, h, wd], out)?,
            &[x, w, b],
            Box::new(move |nodes, g, grads| {
                if let Some(dw) = grads.slot(w) {
                    gemm(cout, hw, c * m, g, false, &diffs, true, dw, 1.0);
                }
                if let Some(db) = grads.slot(b) {
                    db.iter_mut().zip(channel_sums(g, cout)).for_each(|(d, s)| *d += s);
                }
                if grads.wants(x) {
                    let mut dd = vec![0.0; c * m * hw];
                    gemm(c * m, cout, hw, val(nodes, w), true, g, false, &mut dd, 0.0);
                    let dx = grads.slot(x).unwrap();
                    for ch in 0..c {
                        for (j, &(oa, ob)) in offs.iter().enumerate() {
                            let row = &dd[(ch * m + j) * hw..][..hw];
                            for y in 0..h {
                                for xx in 0..wd {
                                    let gv = row[y * wd + xx];
                                    dx[ch * hw + clamp(y, xx, oa)] += gv;
                                    dx[ch * hw + clamp(y, xx, ob)] -= gv;
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// 3×3 average pooling, stride 1, averaging only the in-image pixels.
    pub fn avg_pool3x3(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, wd) = self.value(x).dims3()?;
        let hw = h * wd;
        let count = move |y: usize, xx: usize| -> f64 {
            let ny = (y.min(1) + 1 + usize::from(y + 1 < h)) as f64;
            let nx = (xx.min(1) + 1 + usize::from(xx + 1 < wd)) as f64;
            ny * nx
        };
        let xv = self.data(x);
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let plane = &xv[ch * hw..(ch + 1) * hw];
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = 0.0;
                    for yy in y.saturating_sub(1)..(y + 2).min(h) {
                        for xq in xx.saturating_sub(1)..(xx + 2).min(wd) {
                            s += plane[yy * wd + xq];
                        }
                    }
                    out[ch * hw + y * wd + xx] = s / count(y, xx);
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[c, h, wd], out)?,
            &[x],
            Box::new(move |_, g, grads| {
                if let Some(dx) = grads.slot(x) {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..wd {
                                let gv = g[ch * hw + y * wd + xx] / count(y, xx);
                                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                                    for xq in xx.saturating_sub(1)..(xx + 2).min(wd) {
                                        dx[ch * hw + yy * wd + xq] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Circular 1-D cross-correlation along the vertex axis of `seq[N×C_in]`
    /// with kernel `C_out×C_in×k` (k odd): `y[n, o] = b[o] +
    /// Σ_c Σ_t w[o, c, t] · seq[(n + t − k/2) mod N, c]`.
    pub fn circular_conv1d(&mut self, seq: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, cin) = self.value(seq).dims2()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(shape_err!("circular kernel {ws:?} for {cin} input channels"));
        }
        let (cout, k) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return Err(shape_err!("circular kernel size {k} must be odd"));
        }
        if n < k {
            return Err(shape_err!("sequence of {n} vertices shorter than kernel {k}"));
        }
        self.check_kernel(w, b, cout, cin, k)?;
        let r = k / 2;
        let ck = cin * k;
        let idx = move |i: usize, t: usize| (i + n + t - r) % n;
        let xv = self.data(seq);
        let mut cols = vec![0.0; n * ck];
        for i in 0..n {
            let row = &mut cols[i * ck..(i + 1) * ck];
            for t in 0..k {
                let src = &xv[idx(i, t) * cin..(idx(i, t) + 1) * cin];
                for c in 0..cin {
                    row[c * k + t] = src[c];
                }
            }
        }
        let bv = self.data(b).to_vec();
        let mut out = vec![0.0; n * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(&bv);
        }
        gemm(n, ck, cout, &cols, false, self.data(w), true, &mut out, 1.0);
        Ok(self.push(
            Tensor::new(&[n, cout], out)?,
            &[seq, w, b],
            Box::new(move |nodes, g, grads| {
                if let Some(dw) = grads.slot(w) {
                    gemm(cout, n, ck, g, true, &cols, false, dw, 1.0);
                }
                if let Some(db) = grads.slot(b) {
                    for row in g.chunks(cout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                if grads.wants(seq) {
                    let mut dcols = vec![0.0; n * ck];
                    gemm(n, cout, ck, g, false, val(nodes, w), false, &mut dcols, 0.0);
                    let dx = grads.slot(seq).unwrap();
                    for i in 0..n {
                        for t in 0..k {
                            let j = idx(i, t);
                            for c in 0..cin {
                                dx[j * cin + c] += dcols[i * ck + c * k + t];
                            }
                        }
                    }
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    /// Direct nested-loop 3×3 cross-correlation with zero padding.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize) -> Vec<f64> {
        let (c, h, wd) = x.dims3().unwrap();
        let cout = w.shape()[0];
        let (oh, ow) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w.data()[((o * c + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut r = rng();
        let x = Tensor::uniform(&[1, 6, 7], -1.0, 1.0, &mut r);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.leaf(&x), g.leaf(&w), g.constant(Tensor::zeros(&[1])));
        let y = g.conv2d(xn, wn, bn, 1).unwrap();
        assert_eq!(g.data(y), x.data());
    }

    #[test]
    fn conv_ones_kernel_on_constant_interior() {
        let x = Tensor::full(&[1, 5, 5], 2.5);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.leaf(&x), g.leaf(&w), g.constant(Tensor::zeros(&[1])));
        let y = g.conv2d(xn, wn, bn, 1).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(g.data(y)[yy * 5 + xx], 22.5);
            }
        }
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut r = rng();
        for stride in [1, 2] {
            let x = Tensor::uniform(&[2, 8, 8], -1.0, 1.0, &mut r);
            let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
            let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
            let mut g = Graph::new();
            let (xn, wn, bn) = (g.leaf(&x), g.leaf(&w), g.leaf(&b));
            let y = g.conv2d(xn, wn, bn, stride).unwrap();
            let want = conv_oracle(&x, &w, b.data(), stride);
            for (a, e) in g.data(y).iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, w, b, 1).is_err());
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_conv() {
        // <tconv(x), y> == <x, conv_s2(y)> with the same kernel viewed C_out→C_in.
        let mut r = rng();
        let x = Tensor::uniform(&[2, 4, 5], -1.0, 1.0, &mut r);
        let y = Tensor::uniform(&[3, 8, 10], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let (xn, wn, b3) = (g.leaf(&x), g.leaf(&w), g.constant(Tensor::zeros(&[3])));
        let t = g.conv_transpose2d(xn, wn, b3).unwrap();
        assert_eq!(g.shape(t), &[3, 8, 10]);
        let lhs: f64 = g.data(t).iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let conv = conv_oracle(&y, &w, &[0.0, 0.0], 2);
        let rhs: f64 = conv.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_family_gradients() {
        let mut r = rng();
        let x = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let wt = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let bt = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
        let w1 = Tensor::uniform(&[2, 2], -1.0, 1.0, &mut r);
        let b1 = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
        let probe = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut r);
        let err = grad_check(
            |g, p| {
                let y = g.conv2d(p[0], p[1], p[2], 2)?;
                let t = g.conv_transpose2d(y, p[3], p[4])?;
                let o = g.conv1x1(t, p[5], p[6])?;
                let pool = g.avg_pool3x3(o)?;
                let pr = g.constant(probe.clone());
                let z = g.mul(pool, pr)?;
                Ok(g.sum(z))
            },
            &[x, w, b, wt, bt, w1, b1],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn pool_preserves_constants_everywhere() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4, 5], 7.0));
        let y = g.avg_pool3x3(x).unwrap();
        assert!(g.data(y).iter().all(|&v| (v - 7.0).abs() < 1e-14));
    }

    /// Wrap-around evaluation straight from the definition.
    fn circ_oracle(x: &Tensor, w: &Tensor, b: &[f64]) -> Vec<f64> {
        let (n, cin) = x.dims2().unwrap();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let mut out = vec![0.0; n * cout];
        for i in 0..n {
            for o in 0..cout {
                let mut s = b[o];
                for t in 0..k {
                    let j = (i as isize + t as isize - (k / 2) as isize).rem_euclid(n as isize) as usize;
                    for c in 0..cin {
                        s += w.data()[(o * cin + c) * k + t] * x.data()[j * cin + c];
                    }
                }
                out[i * cout + o] = s;
            }
        }
        out
    }

    #[test]
    fn circular_conv_cases() {
        let mut r = rng();
        let x = Tensor::uniform(&[16, 3], -1.0, 1.0, &mut r);
        // delta kernel
        let mut w = Tensor::zeros(&[3, 3, 9]);
        for c in 0..3 {
            w.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.leaf(&x), g.leaf(&w), g.constant(Tensor::zeros(&[3])));
        let y = g.circular_conv1d(xn, wn, bn).unwrap();
        assert_eq!(g.data(y), x.data());

        // constant sequence
        let c = Tensor::full(&[12, 1], 1.5);
        let kw = Tensor::new(&[1, 1, 5], vec![0.5, -1.0, 2.0, 0.25, 1.0]).unwrap();
        let (cn, kn, b1) = (g.leaf(&c), g.leaf(&kw), g.constant(Tensor::zeros(&[1])));
        let y = g.circular_conv1d(cn, kn, b1).unwrap();
        assert!(g.data(y).iter().all(|&v| (v - 2.75 * 1.5).abs() < 1e-14));

        // brute force
        let w = Tensor::uniform(&[4, 3, 9], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
        let (wn, bn) = (g.leaf(&w), g.leaf(&b));
        let y = g.circular_conv1d(xn, wn, bn).unwrap();
        for (a, e) in g.data(y).iter().zip(circ_oracle(&x, &w, b.data())) {
            assert!((a - e).abs() < 1e-12);
        }

        // too short
        let short = g.constant(Tensor::zeros(&[5, 3]));
        assert!(g.circular_conv1d(short, wn, bn).is_err());
    }
}
