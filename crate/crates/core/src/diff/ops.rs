//! Dense differentiable operations: element-wise arithmetic, matrix
//! products, row softmax, reductions and the regression losses.

use crate::error::{shape_err, Error, Result};

use super::graph::{Grads, Node};
use super::linalg::gemm;
use super::{Graph, NodeId, Tensor};

fn val(nodes: &[Node], id: NodeId) -> &[f64] {
    nodes[id.0].value.data()
}

impl Graph {
    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> NodeId {
        let xs = self.value(x);
        let shape = xs.shape().to_vec();
        let out: Vec<f64> = xs.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(&shape, out).unwrap();
        self.push(
            t,
            &[x],
            Box::new(move |nodes, g, grads| {
                let xv = val(nodes, x);
                if let Some(dx) = grads.slot(x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * df(xv[i], g[i]);
                    }
                }
            }),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            &[a, b],
            Box::new(move |_, g, grads| {
                grads.add(a, g);
                grads.add(b, g);
            }),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            &[a, b],
            Box::new(move |_, g, grads| {
                grads.add(a, g);
                if let Some(db) = grads.slot(b) {
                    db.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            &[a, b],
            Box::new(move |nodes, g, grads| {
                let (av, bv) = (val(nodes, a), val(nodes, b));
                if let Some(da) = grads.slot(a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = grads.slot(b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }),
        ))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.unary(x, |v| v * s, move |_, _| s)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, |v, _| 2.0 * v)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.data(x).iter().sum();
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(move |_, g, grads| {
                if let Some(dx) = grads.slot(x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }),
        )
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of several one-element nodes.
    pub fn add_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.iter().any(|&x| self.value(x).len() != 1) {
            return Err(shape_err!("add_scalars expects one-element tensors"));
        }
        let s: f64 = xs.iter().map(|&x| self.data(x)[0]).sum();
        let parents = xs.to_vec();
        let ps = parents.clone();
        Ok(self.push(
            Tensor::scalar(s),
            &parents,
            Box::new(move |_, g, grads| {
                for &p in &ps {
                    grads.add(p, g);
                }
            }),
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, &[x], Box::new(move |_, g, grads| grads.add(x, g))))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            &[a, b],
            Box::new(move |nodes, g, grads: &mut Grads| {
                let bv = val(nodes, b);
                let av = val(nodes, a);
                if let Some(da) = grads.slot(a) {
                    // dA += G · Bᵀ
                    gemm(m, n, k, g, false, bv, true, da, 1.0);
                }
                if let Some(db) = grads.slot(b) {
                    // dB += Aᵀ · G
                    gemm(k, m, n, av, true, g, false, db, 1.0);
                }
            }),
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let xv = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        Ok(self.push(
            Tensor::new(&[c, r], out)?,
            &[x],
            Box::new(move |_, g, grads| {
                if let Some(dx) = grads.slot(x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }),
        ))
    }

    /// Adds `bias[n]` to every row of `x[m×n]`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(shape_err!("row bias of length {} for {n} columns", self.value(bias).len()));
        }
        let bv = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&bv).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            &[x, bias],
            Box::new(move |_, g, grads| {
                grads.add(x, g);
                if let Some(db) = grads.slot(bias) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }),
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of `x[C×…]`.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if self.value(bias).len() != c {
            return Err(shape_err!("channel bias of length {} for {c} channels", self.value(bias).len()));
        }
        let plane = self.value(x).len() / c;
        let bv = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|o| *o += bv[ch]);
        }
        Ok(self.push(
            Tensor::new(&shape, out)?,
            &[x, bias],
            Box::new(move |_, g, grads| {
                grads.add(x, g);
                if let Some(db) = grads.slot(bias) {
                    for (ch, chunk) in g.chunks(plane).enumerate() {
                        db[ch] += chunk.iter().sum::<f64>();
                    }
                }
            }),
        ))
    }

    /// Row-wise softmax of `x[m×n]`, stabilised by subtracting each row max.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let xv = self.data(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = vec![0.0; m * n];
        for (row, orow) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        let y = out.clone();
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            &[x],
            Box::new(move |_, g, grads| {
                if let Some(dx) = grads.slot(x) {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }),
        ))
    }

    /// Columns `start..start+len` of `x[m×n]`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n || len == 0 {
            return Err(shape_err!("column slice {start}..{} of {n} columns", start + len));
        }
        let xv = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for row in xv.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(
            Tensor::new(&[m, len], out)?,
            &[x],
            Box::new(move |_, g, grads| {
                if let Some(dx) = grads.slot(x) {
                    for r in 0..m {
                        for j in 0..len {
                            dx[r * n + start + j] += g[r * len + j];
                        }
                    }
                }
            }),
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut widths = Vec::with_capacity(xs.len());
        let mut rows = None;
        for &x in xs {
            let (m, n) = self.value(x).dims2()?;
            if *rows.get_or_insert(m) != m {
                return Err(shape_err!("concat_cols row counts differ"));
            }
            widths.push(n);
        }
        let m = rows.ok_or_else(|| shape_err!("concat_cols of nothing"))?;
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xv = self.data(x);
            for r in 0..m {
                out[r * total + off..r * total + off + w].copy_from_slice(&xv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let parts = xs.to_vec();
        let ws = widths.clone();
        Ok(self.push(
            Tensor::new(&[m, total], out)?,
            xs,
            Box::new(move |_, g, grads| {
                let mut off = 0;
                for (&x, &w) in parts.iter().zip(&ws) {
                    if let Some(dx) = grads.slot(x) {
                        for r in 0..m {
                            for j in 0..w {
                                dx[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }),
        ))
    }

    /// Concatenation along the leading axis; trailing dimensions must agree.
    pub fn concat0(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs.first().ok_or_else(|| shape_err!("concat0 of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(shape_err!("concat0 trailing shapes {:?} and {:?}", &s[1..], tail));
            }
            lead += s[0];
            lens.push(self.value(x).len());
            out.extend_from_slice(self.data(x));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let parts = xs.to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            xs,
            Box::new(move |_, g, grads| {
                let mut off = 0;
                for (&x, &len) in parts.iter().zip(&lens) {
                    grads.add(x, &g[off..off + len]);
                    off += len;
                }
            }),
        ))
    }

    /// Mean over rows of `x[m×n]`, giving `1×n`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let mut out = vec![0.0; n];
        for row in self.data(x).chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(
            Tensor::new(&[1, n], out)?,
            &[x],
            Box::new(move |_, g, grads| {
                if let Some(dx) = grads.slot(x) {
                    for row in dx.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(d, v)| *d += v / m as f64);
                    }
                }
            }),
        ))
    }

    /// Per-column affine map `y[:, j] = x[:, j] · scale[j] + shift[j]` with
    /// constant coefficients.
    pub fn affine_cols(&mut self, x: NodeId, scale: &[f64], shift: &[f64]) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if scale.len() != n || shift.len() != n {
            return Err(shape_err!("affine_cols coefficients for {n} columns"));
        }
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            for j in 0..n {
                row[j] = row[j] * scale[j] + shift[j];
            }
        }
        let sc = scale.to_vec();
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            &[x],
            Box::new(move |_, g, grads| {
                if let Some(dx) = grads.slot(x) {
                    for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            drow[j] += grow[j] * sc[j];
                        }
                    }
                }
            }),
        ))
    }

    /// Mean over elements of `sqrt((pred - target)² + eps²)`.
    pub fn charbonnier(&mut self, pred: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
        self.same_shape(pred, target, "charbonnier")?;
        let n = self.value(pred).len() as f64;
        let loss: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| (p - t).hypot(eps) - eps)
            .sum::<f64>()
            / n
            + eps;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite Charbonnier loss".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            &[pred, target],
            Box::new(move |nodes, g, grads| {
                let (pv, tv) = (val(nodes, pred), val(nodes, target));
                let d: Vec<f64> = pv
                    .iter()
                    .zip(tv)
                    .map(|(p, t)| {
                        let r = p - t;
                        g[0] * r / r.hypot(eps) / n
                    })
                    .collect();
                grads.add(pred, &d);
                if let Some(dt) = grads.slot(target) {
                    dt.iter_mut().zip(&d).for_each(|(a, b)| *a -= b);
                }
            }),
        ))
    }

    /// Sum over elements of smooth-ℓ1 with β = 1:
    /// `0.5·r²` for `|r| < 1`, `|r| − 0.5` otherwise.
    pub fn smooth_l1_sum(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape(pred, target, "smooth_l1")?;
        let loss: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| smooth_l1(p - t))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            &[pred, target],
            Box::new(move |nodes, g, grads| {
                let (pv, tv) = (val(nodes, pred), val(nodes, target));
                let d: Vec<f64> = pv.iter().zip(tv).map(|(p, t)| g[0] * smooth_l1_grad(p - t)).collect();
                grads.add(pred, &d);
                if let Some(dt) = grads.slot(target) {
                    dt.iter_mut().zip(&d).for_each(|(a, b)| *a -= b);
                }
            }),
        ))
    }
}

pub fn smooth_l1(r: f64) -> f64 {
    let a = r.abs();
    if a < 1.0 {
        0.5 * r * r
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(r: f64) -> f64 {
    if r.abs() < 1.0 {
        r
    } else {
        r.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::new(&[r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::eye(2));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);

        let m = g.constant(mat(3, 2, &[1.0, -2.0, 0.5, 7.0, 3.0, 1.0]));
        let i3 = g.constant(Tensor::eye(3));
        let c = g.matmul(i3, m).unwrap();
        assert_eq!(g.data(c), g.data(m));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng).with_grad();
        let b = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let an = g.leaf(&a);
        let bn = g.leaf(&b);
        let c = g.matmul(an, bn).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        let da = grads.get(an).unwrap();
        // ones(4,3)·Bᵀ: every row equals the row sums of B
        for i in 0..4 {
            for p in 0..5 {
                let want: f64 = (0..3).map(|j| b.data()[p * 3 + j]).sum();
                assert!((da[i * 5 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(mat(2, 3, &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]));
        let y = g.softmax_rows(x).unwrap();
        let yv = g.data(y);
        for v in &yv[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(yv[3], 1.0);
        assert!(yv[4] >= 0.0 && yv[4] < 1e-300);
        assert!(yv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(mat(1, 2, &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |g, p| {
                let y = g.softmax_rows(p[0])?;
                let wn = g.constant(w.clone());
                let z = g.mul(y, wn)?;
                Ok(g.sum(z))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn charbonnier_values() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[4, 4], 3.0));
        let t = g.constant(Tensor::full(&[4, 4], 3.0));
        let l = g.charbonnier(p, t, 1e-3).unwrap();
        assert_eq!(g.data(l)[0], 1e-3);

        let p2 = g.constant(Tensor::full(&[4, 4], 4.0));
        let l = g.charbonnier(p2, t, 1e-3).unwrap();
        assert!((g.data(l)[0] - (1.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        assert!((g.data(l)[0] - 1.0000005).abs() < 1e-12);

        let p3 = g.constant(Tensor::full(&[4, 4], 3.001));
        let l = g.charbonnier(p3, t, 1e-3).unwrap();
        assert!((g.data(l)[0] - 2f64.sqrt() * 1e-3).abs() < 1e-12);
    }

    #[test]
    fn element_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 4], 0.2, 1.0, &mut rng);
        let bias = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |g, p| {
                let s = g.sub(p[0], p[1])?;
                let m = g.mul(s, p[1])?;
                let t = g.transpose(m)?;
                let t = g.transpose(t)?;
                let r = g.add_row_bias(t, p[2])?;
                let q = g.square(r);
                let c = g.concat_cols(&[q, p[0]])?;
                let sl = g.slice_cols(c, 2, 4)?;
                let mr = g.mean_rows(sl)?;
                let af = g.affine_cols(mr, &[1.0, 2.0, -1.0, 0.5], &[0.0; 4])?;
                Ok(g.sum(af))
            },
            &[a, b, bias],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}
