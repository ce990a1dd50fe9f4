use ndarray::{concatenate, s, Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its forward output.
pub fn relu_backward(out: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(out)
        .for_each(|d, &o| {
            if o <= 0.0 {
                *d = 0.0
            }
        });
    dx
}

pub struct PoolCache {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

/// 2x2 max-pool with stride 2. Ties resolve to the first element in raster order.
pub fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, PoolCache) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("contiguous");
    let mut out = Array4::zeros((n, c, oh, ow));
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let dst = out.as_slice_mut().expect("contiguous");
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                dst[k] = src[best];
                argmax.push(best);
                k += 1;
            }
        }
    }
    (
        out,
        PoolCache {
            argmax,
            in_shape: (n, c, h, w),
        },
    )
}

pub fn maxpool2_backward(cache: &PoolCache, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = Array4::zeros(cache.in_shape);
    let d = dx.as_slice_mut().expect("contiguous");
    for (&i, &g) in cache.argmax.iter().zip(dy.iter()) {
        d[i] += g;
    }
    dx
}

/// Softmax over the channel axis of an `(N, C, H, W)` tensor.
pub fn softmax_channels(logits: &Array4<f64>) -> Array4<f64> {
    let mut p = logits.clone();
    let (n, _, h, w) = logits.dim();
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut lane = p.slice_mut(s![ni, .., y, x]);
                let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                lane.mapv_inplace(|v| (v - m).exp());
                let z = lane.sum();
                lane.mapv_inplace(|v| v / z);
            }
        }
    }
    p
}

/// Gradient w.r.t. logits given the softmax output and the gradient w.r.t. probabilities.
pub fn softmax_channels_backward(p: &Array4<f64>, dp: &Array4<f64>) -> Array4<f64> {
    let dot = (p * dp).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(dp - &dot)
}

pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = dy.dim();
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| dy[[ni, ci]] * scale)
}

pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels(x: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    (
        x.slice(s![.., ..first, .., ..]).to_owned(),
        x.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        let normal = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("finite std");
        Self {
            weight: Array2::from_shape_simple_fn((output, input), || normal.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &dy.t().dot(x);
        grads.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_sums_to_one() {
        let l = Array4::from_shape_fn((2, 3, 2, 2), |(n, c, y, x)| (n + 2 * c + y * x) as f64 - 2.0);
        let p = softmax_channels(&l);
        for v in p.sum_axis(Axis(1)).iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![0.1, 0.7, 0.3, 0.2]).unwrap();
        let (y, cache) = maxpool2(&x);
        assert_eq!(y[[0, 0, 0, 0]], 0.7);
        let dx = maxpool2_backward(&cache, &Array4::from_elem((1, 1, 1, 1), 2.0));
        assert_eq!(dx.into_raw_vec_and_offset().0, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_forward_backward() {
        let lin = Linear {
            weight: array![[1.0, 2.0], [0.0, -1.0], [0.5, 0.5]],
            bias: array![0.0, 1.0, -1.0],
        };
        let x = array![[1.0, 1.0]];
        assert_eq!(lin.forward(&x), array![[3.0, 0.0, 0.0]]);
        let mut g = lin.zeros_like();
        let dx = lin.backward(&x, &array![[1.0, 0.0, 2.0]], &mut g);
        assert_eq!(dx, array![[2.0, 3.0]]);
        assert_eq!(g.bias, array![1.0, 0.0, 2.0]);
    }
}
