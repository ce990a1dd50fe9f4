//! Bilinear resampling with half-pixel centers, shared by image resizing and
//! the decoder up-sampling path.

use ndarray::{Array2, Array4, ArrayView2};

/// Per-output-index interpolation taps along one axis.
#[derive(Debug, Clone)]
pub struct AxisInterp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl AxisInterp {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut w_hi = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let l = src.floor() as usize;
            let h = (l + 1).min(input - 1);
            lo.push(l);
            hi.push(h);
            w_hi.push(src - l as f64);
        }
        Self { lo, hi, w_hi }
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    #[inline]
    fn taps(&self, o: usize) -> (usize, usize, f64, f64) {
        let w = self.w_hi[o];
        (self.lo[o], self.hi[o], 1.0 - w, w)
    }
}

pub fn resize_bilinear(img: ArrayView2<f64>, out: (usize, usize)) -> Array2<f64> {
    let (h, w) = img.dim();
    if (h, w) == out {
        return img.to_owned();
    }
    let ry = AxisInterp::new(h, out.0);
    let rx = AxisInterp::new(w, out.1);
    Array2::from_shape_fn(out, |(y, x)| {
        let (y0, y1, wy0, wy1) = ry.taps(y);
        let (x0, x1, wx0, wx1) = rx.taps(x);
        wy0 * (wx0 * img[[y0, x0]] + wx1 * img[[y0, x1]])
            + wy1 * (wx0 * img[[y1, x0]] + wx1 * img[[y1, x1]])
    })
}

/// Nearest-neighbour resize for label grids.
pub fn resize_nearest<T: Copy>(grid: ArrayView2<T>, out: (usize, usize)) -> Array2<T> {
    let (h, w) = grid.dim();
    let pick = |o: usize, input: usize, output: usize| {
        (((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
    };
    Array2::from_shape_fn(out, |(y, x)| grid[[pick(y, h, out.0), pick(x, w, out.1)]])
}

/// 2x bilinear up-sampling of every plane of an `(N, C, H, W)` tensor.
pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let ry = AxisInterp::new(h, 2 * h);
    let rx = AxisInterp::new(w, 2 * w);
    let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            let src = x.slice(ndarray::s![ni, ci, .., ..]);
            let mut dst = out.slice_mut(ndarray::s![ni, ci, .., ..]);
            for y in 0..2 * h {
                let (y0, y1, wy0, wy1) = ry.taps(y);
                for xx in 0..2 * w {
                    let (x0, x1, wx0, wx1) = rx.taps(xx);
                    dst[[y, xx]] = wy0 * (wx0 * src[[y0, x0]] + wx1 * src[[y0, x1]])
                        + wy1 * (wx0 * src[[y1, x0]] + wx1 * src[[y1, x1]]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`].
pub fn upsample2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let ry = AxisInterp::new(h, h2);
    let rx = AxisInterp::new(w, w2);
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = dy.slice(ndarray::s![ni, ci, .., ..]);
            let mut dst = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
            for y in 0..h2 {
                let (y0, y1, wy0, wy1) = ry.taps(y);
                for xx in 0..w2 {
                    let (x0, x1, wx0, wx1) = rx.taps(xx);
                    let v = g[[y, xx]];
                    dst[[y0, x0]] += wy0 * wx0 * v;
                    dst[[y0, x1]] += wy0 * wx1 * v;
                    dst[[y1, x0]] += wy1 * wx0 * v;
                    dst[[y1, x1]] += wy1 * wx1 * v;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn resize_to_same_size_is_identity() {
        let a = array![[0.1, 0.2], [0.3, 0.4]];
        assert_eq!(resize_bilinear(a.view(), (2, 2)), a);
    }

    #[test]
    fn constant_field_stays_constant() {
        let a = Array2::from_elem((5, 7), 0.3);
        let r = resize_bilinear(a.view(), (8, 3));
        assert!(r.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn upsample_adjoint_identity() {
        // <U x, y> == <x, U^T y>
        let x = Array4::from_shape_fn((1, 2, 3, 4), |(_, c, i, j)| (c * 12 + i * 4 + j) as f64 * 0.1);
        let y = Array4::from_shape_fn((1, 2, 6, 8), |(_, c, i, j)| ((c + i * 3 + j * 7) % 5) as f64);
        let lhs = (upsample2(&x) * &y).sum();
        let rhs = (&x * &upsample2_backward(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn nearest_keeps_label_set() {
        let m = array![[0u8, 1], [2, 0]];
        let r = resize_nearest(m.view(), (4, 4));
        assert_eq!(r[[0, 0]], 0);
        assert_eq!(r[[0, 3]], 1);
        assert_eq!(r[[3, 0]], 2);
    }
}
