use crate::error::{geom_err, Result};

use super::raster::Mask;

/// Per-pixel Euclidean distance to the nearest boundary pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    d: Vec<f64>,
}

impl DistanceField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.d
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.d[y * self.width + x]
    }
}

/// Squared distances plus, for each pixel, the flat index of one nearest
/// boundary pixel. Meijster's two-pass algorithm in integer arithmetic.
fn meijster(boundary: &Mask) -> Result<(Vec<i64>, Vec<usize>)> {
    let (w, h) = (boundary.width(), boundary.height());
    if boundary.is_empty() {
        return Err(geom_err!("distance transform needs at least one boundary pixel"));
    }
    let inf = (w + h) as i64;
    // column pass: vertical distance and row of the nearest set pixel
    let mut g = vec![inf; w * h];
    let mut gr = vec![usize::MAX; w * h];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if boundary.get(x, y) {
                last = Some(y);
            }
            if let Some(r) = last {
                g[y * w + x] = (y - r) as i64;
                gr[y * w + x] = r;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if boundary.get(x, y) {
                next = Some(y);
            }
            if let Some(r) = next {
                if ((r - y) as i64) < g[y * w + x] {
                    g[y * w + x] = (r - y) as i64;
                    gr[y * w + x] = r;
                }
            }
        }
    }
    // row pass: lower envelope of parabolas (x − i)² + g(i)²
    let mut dist = vec![0i64; w * h];
    let mut near = vec![0usize; w * h];
    let mut s = vec![0usize; w];
    let mut t = vec![0i64; w];
    for y in 0..h {
        let gy = &g[y * w..(y + 1) * w];
        let f = |x: i64, i: usize| (x - i as i64).pow(2) + gy[i].pow(2);
        let sep = |i: usize, u: usize| {
            let (i2, u2) = ((i * i) as i64, (u * u) as i64);
            (u2 - i2 + gy[u].pow(2) - gy[i].pow(2)).div_euclid(2 * (u as i64 - i as i64))
        };
        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..w {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let wv = 1 + sep(s[q as usize], u);
                if wv < w as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = wv;
                }
            }
        }
        for x in (0..w).rev() {
            let col = s[q as usize];
            dist[y * w + x] = f(x as i64, col);
            near[y * w + x] = gr[y * w + col] * w + col;
            if x as i64 == t[q as usize] {
                q -= 1;
            }
        }
    }
    Ok((dist, near))
}

/// Exact Euclidean distance (pixel-centre metric) to the nearest set pixel.
pub fn distance_transform(boundary: &Mask) -> Result<DistanceField> {
    let (sq, _) = meijster(boundary)?;
    Ok(DistanceField {
        width: boundary.width(),
        height: boundary.height(),
        d: sq.into_iter().map(|v| (v as f64).sqrt()).collect(),
    })
}

/// For every pixel, the flat index `y·W + x` of a nearest set pixel.
pub fn nearest_boundary(boundary: &Mask) -> Result<Vec<usize>> {
    Ok(meijster(boundary)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(m: &Mask) -> Vec<f64> {
        let (w, h) = (m.width(), m.height());
        let set: Vec<(i64, i64)> =
            (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| m.get(x, y)).map(|(x, y)| (x as i64, y as i64)).collect();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x as i64, y as i64)))
            .map(|(x, y)| {
                let best = set.iter().map(|&(a, b)| (a - x).pow(2) + (b - y).pow(2)).min().unwrap();
                (best as f64).sqrt()
            })
            .collect()
    }

    #[test]
    fn three_four_five() {
        let mut m = Mask::new(8, 8);
        m.set(0, 0, true);
        let d = distance_transform(&m).unwrap();
        assert_eq!(d.get(3, 4), 5.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn full_mask_is_zero() {
        let d = distance_transform(&Mask::full(9, 5)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(distance_transform(&Mask::new(4, 4)).is_err());
    }

    #[test]
    fn random_masks_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..40 {
            let (w, h) = (1 + trial % 17, 1 + (trial * 7) % 23);
            let p = [0.01, 0.05, 0.3][trial % 3];
            let mut bits: Vec<bool> = (0..w * h).map(|_| rng.random::<f64>() < p).collect();
            if !bits.iter().any(|&b| b) {
                bits[rng.random_range(0..w * h)] = true;
            }
            let m = Mask::from_bits(w, h, bits).unwrap();
            assert_eq!(distance_transform(&m).unwrap().data(), brute(&m).as_slice(), "{w}×{h}");
            let near = nearest_boundary(&m).unwrap();
            let d = distance_transform(&m).unwrap();
            for (i, &n) in near.iter().enumerate() {
                assert!(m.bits()[n]);
                let (dx, dy) = ((i % w) as f64 - (n % w) as f64, (i / w) as f64 - (n / w) as f64);
                assert_eq!((dx * dx + dy * dy).sqrt(), d.data()[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn lipschitz_on_neighbours(bits in prop::collection::vec(prop::bool::weighted(0.05), 144)) {
            prop_assume!(bits.iter().any(|&b| b));
            let m = Mask::from_bits(12, 12, bits).unwrap();
            let d = distance_transform(&m).unwrap();
            for y in 0..12 {
                for x in 0..12 {
                    prop_assert_eq!(d.get(x, y) == 0.0, m.get(x, y));
                    if x + 1 < 12 {
                        prop_assert!((d.get(x, y) - d.get(x + 1, y)).abs() <= 1.0 + 1e-12);
                    }
                    if y + 1 < 12 {
                        prop_assert!((d.get(x, y) - d.get(x, y + 1)).abs() <= 1.0 + 1e-12);
                    }
                }
            }
        }
    }
}
