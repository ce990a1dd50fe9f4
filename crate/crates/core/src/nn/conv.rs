//! Stride-1, same-padding 2D convolution lowered to a GEMM via im2col.

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2dParams {
    /// `(out_channels, in_channels, k, k)`.
    pub weight: Array4<f64>,
    pub bias: Option<Array1<f64>>,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2dParams {
    /// He-normal initialization, zero bias.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        with_bias: bool,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = Array4::from_shape_simple_fn((out_ch, in_ch, kernel, kernel), || {
            normal.sample(rng)
        });
        Self {
            weight,
            bias: with_bias.then(|| Array1::zeros(out_ch)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: self.bias.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("standard layout weight")
    }

    pub fn forward(&self, x: ArrayView4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, _, h, w) = x.dim();
        let cols = im2col(x, self.kernel());
        let out2 = self.weight_matrix().dot(&cols);
        let mut out = from_channel_major(&out2, n, h, w);
        if let Some(bias) = &self.bias {
            for (mut plane, &b) in out.axis_iter_mut(Axis(1)).zip(bias.iter()) {
                plane.mapv_inplace(|v| v + b);
            }
        }
        (
            out,
            ConvCache {
                cols,
                in_shape: x.dim(),
            },
        )
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient when requested.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array4<f64>,
        grads: &mut Conv2dParams,
        need_dx: bool,
    ) -> Option<Array4<f64>> {
        let dy2 = to_channel_major(dy);
        let dw = dy2.dot(&cache.cols.t());
        {
            let (o, i, k, _) = grads.weight.dim();
            let mut gw = grads
                .weight
                .view_mut()
                .into_shape_with_order((o, i * k * k))
                .expect("standard layout weight");
            gw += &dw;
        }
        if let Some(gb) = grads.bias.as_mut() {
            *gb += &dy2.sum_axis(Axis(1));
        }
        if !need_dx {
            return None;
        }
        let dcols = self.weight_matrix().t().dot(&dy2);
        Some(col2im(&dcols, cache.in_shape, self.kernel()))
    }
}

/// Rows are `(c, ky, kx)`, columns are `(n, y, x)`.
fn im2col(x: ArrayView4<f64>, k: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = Array2::<f64>::zeros((c * k * k, n * hw));
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("contiguous");
    let dst = cols.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_off = row * n * hw;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for ni in 0..n {
                    let plane = &src[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let out = &mut dst[row_off + ni * hw..row_off + (ni + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let (x0, x1) = valid_range(w, dx);
                        let o = &mut out[y * w + x0..y * w + x1];
                        let s0 = (x0 as isize + dx) as usize;
                        o.copy_from_slice(&plane[sy * w + s0..sy * w + s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize, usize), k: usize) -> Array4<f64> {
    let (n, c, h, w) = shape;
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = Array4::<f64>::zeros(shape);
    let src = cols.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_off = row * n * hw;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for ni in 0..n {
                    let col = &src[row_off + ni * hw..row_off + (ni + 1) * hw];
                    let plane = &mut dst[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let (x0, x1) = valid_range(w, dx);
                        let s0 = (x0 as isize + dx) as usize;
                        let target = &mut plane[sy * w + s0..sy * w + s0 + (x1 - x0)];
                        for (t, v) in target.iter_mut().zip(&col[y * w + x0..y * w + x1]) {
                            *t += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output columns `[x0, x1)` whose source column `x + dx` lies inside `[0, w)`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    (x0.min(x1), x1)
}

/// `(C, N*H*W)` -> `(N, C, H, W)`.
fn from_channel_major(m: &Array2<f64>, n: usize, h: usize, w: usize) -> Array4<f64> {
    let c = m.nrows();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    let hw = h * w;
    let src = m.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for ni in 0..n {
            dst[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .copy_from_slice(&src[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw]);
        }
    }
    out
}

/// `(N, C, H, W)` -> `(C, N*H*W)`.
fn to_channel_major(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("contiguous");
    let mut out = Array2::<f64>::zeros((c, n * hw));
    let dst = out.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for ni in 0..n {
            dst[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw]
                .copy_from_slice(&src[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]);
        }
    }
    out
}
