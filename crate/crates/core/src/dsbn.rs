//! Domain-specific batch normalization.
//!
//! Each layer keeps one set of affine parameters and running statistics per
//! domain. The convolution kernels around it are shared; only the
//! normalization is routed by [`DomainId`].

use ndarray::{Array1, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::{DomainId, Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Affine parameters and running statistics of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl DomainNorm {
    fn identity(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    fn zeros(channels: usize) -> Self {
        Self {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::zeros(channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsbnLayerState {
    /// Indexed by [`DomainId::index`].
    pub domains: [DomainNorm; 2],
    pub eps: f64,
    /// Weight kept on the old running value at each update.
    pub momentum: f64,
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

pub struct DsbnCache {
    domain: DomainId,
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    pub stats: BatchStats,
}

impl DsbnLayerState {
    /// gamma = 1, beta = 0, running mean 0 and variance 1 in both domains.
    pub fn new(channels: usize) -> Self {
        Self {
            domains: [DomainNorm::identity(channels), DomainNorm::identity(channels)],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.channels();
        Self {
            domains: [DomainNorm::zeros(c), DomainNorm::zeros(c)],
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.domains[0].gamma.len()
    }

    pub fn domain(&self, d: DomainId) -> &DomainNorm {
        &self.domains[d.index()]
    }

    pub fn domain_mut(&mut self, d: DomainId) -> &mut DomainNorm {
        &mut self.domains[d.index()]
    }
}

fn check_input(x: &Array4<f64>, channels: usize) -> Result<()> {
    if x.shape()[1] != channels {
        return Err(Error::Shape(format!(
            "normalization layer has {channels} channels, input has {}",
            x.shape()[1]
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite value entering batch normalization".into(),
        ));
    }
    Ok(())
}

/// Biased per-channel mean and variance over `N*H*W`.
pub fn batch_stats(x: &Array4<f64>) -> BatchStats {
    let (n, _, h, w) = x.dim();
    let count = (n * h * w) as f64;
    let mean = x.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / count;
    let mut var = Array1::zeros(mean.len());
    for (c, plane) in x.axis_iter(Axis(1)).enumerate() {
        let m = mean[c];
        var[c] = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
    }
    BatchStats { mean, var }
}

/// Normalizes with this batch's statistics through domain `d`'s affine
/// parameters without touching the running statistics.
pub fn normalize_batch(
    x: &Array4<f64>,
    domain: DomainId,
    state: &DsbnLayerState,
) -> Result<(Array4<f64>, DsbnCache)> {
    check_input(x, state.channels())?;
    if x.shape()[0] < 2 {
        return Err(Error::BatchSize(x.shape()[0]));
    }
    let stats = batch_stats(x);
    let inv_std = stats.var.mapv(|v| 1.0 / (v + state.eps).sqrt());
    let mut xhat = x.clone();
    for (c, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
        let (m, s) = (stats.mean[c], inv_std[c]);
        plane.mapv_inplace(|v| (v - m) * s);
    }
    let y = affine(&xhat, state.domain(domain));
    Ok((
        y,
        DsbnCache {
            domain,
            xhat,
            inv_std,
            stats,
        },
    ))
}

fn affine(xhat: &Array4<f64>, p: &DomainNorm) -> Array4<f64> {
    let mut y = xhat.clone();
    for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
        let (g, b) = (p.gamma[c], p.beta[c]);
        plane.mapv_inplace(|v| g * v + b);
    }
    y
}

/// Training-mode forward: batch statistics, then the running statistics of
/// `domain` (and only `domain`) are updated.
pub fn dsbn_forward_train(
    x: &Array4<f64>,
    domain: DomainId,
    state: &mut DsbnLayerState,
) -> Result<(Array4<f64>, DsbnCache)> {
    let (y, cache) = normalize_batch(x, domain, state)?;
    let momentum = state.momentum;
    update_running_stats(
        state,
        domain,
        &cache.stats.mean,
        &cache.stats.var,
        momentum,
    )?;
    Ok((y, cache))
}

/// Evaluation-mode forward using the running statistics of `domain`.
pub fn dsbn_forward_eval(
    x: &Array4<f64>,
    domain: DomainId,
    state: &DsbnLayerState,
) -> Result<Array4<f64>> {
    check_input(x, state.channels())?;
    let p = state.domain(domain);
    let mut y = x.clone();
    for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
        let scale = p.gamma[c] / (p.running_var[c] + state.eps).sqrt();
        let (m, b) = (p.running_mean[c], p.beta[c]);
        plane.mapv_inplace(|v| (v - m) * scale + b);
    }
    Ok(y)
}

/// `running <- momentum * running + (1 - momentum) * batch` for `domain` only.
pub fn update_running_stats(
    state: &mut DsbnLayerState,
    domain: DomainId,
    batch_mean: &Array1<f64>,
    batch_var: &Array1<f64>,
    momentum: f64,
) -> Result<()> {
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(Error::Parameter(format!(
            "running-statistics momentum must lie in (0, 1), got {momentum}"
        )));
    }
    if batch_mean.len() != state.channels() || batch_var.len() != state.channels() {
        return Err(Error::Shape("batch statistics length != channel count".into()));
    }
    let p = state.domain_mut(domain);
    Zip::from(&mut p.running_mean)
        .and(batch_mean)
        .for_each(|r, &b| *r = momentum * *r + (1.0 - momentum) * b);
    Zip::from(&mut p.running_var)
        .and(batch_var)
        .for_each(|r, &b| *r = momentum * *r + (1.0 - momentum) * b);
    Ok(())
}

/// Backward of the batch-statistics forward. Accumulates gamma/beta gradients
/// of the cached domain into `grads` and returns the input gradient.
pub fn dsbn_backward(
    state: &DsbnLayerState,
    cache: &DsbnCache,
    dy: &Array4<f64>,
    grads: &mut DsbnLayerState,
) -> Array4<f64> {
    let (n, _, h, w) = dy.dim();
    let count = (n * h * w) as f64;
    let p = state.domain(cache.domain);
    let g = grads.domain_mut(cache.domain);
    let mut dx = Array4::zeros(dy.raw_dim());
    for c in 0..state.channels() {
        let dyc = dy.index_axis(Axis(1), c);
        let xh = cache.xhat.index_axis(Axis(1), c);
        let sum_dy = dyc.sum();
        let sum_dy_xh = Zip::from(&dyc).and(&xh).fold(0.0, |a, &d, &x| a + d * x);
        g.beta[c] += sum_dy;
        g.gamma[c] += sum_dy_xh;
        let k = p.gamma[c] * cache.inv_std[c] / count;
        Zip::from(dx.index_axis_mut(Axis(1), c))
            .and(&dyc)
            .and(&xh)
            .for_each(|o, &d, &x| *o = k * (count * d - sum_dy - x * sum_dy_xh));
    }
    dx
}
