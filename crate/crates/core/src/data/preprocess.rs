use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::nn::resize_bilinear;
use crate::{Error, Result};

const BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    /// Tiles along each axis.
    pub tiles: usize,
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles: 8,
            clip_limit: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub clahe: Option<ClaheParams>,
    pub gamma: f64,
    /// `(rows, cols)` of the output.
    pub out_size: (usize, usize),
}

/// Min-max normalization, optional CLAHE, gamma correction, bilinear resize.
pub fn preprocess(
    raw: ArrayView2<f64>,
    enable_clahe: bool,
    gamma: f64,
    out_size: (usize, usize),
) -> Result<Image> {
    preprocess_with(
        raw,
        &PreprocessConfig {
            clahe: enable_clahe.then(ClaheParams::default),
            gamma,
            out_size,
        },
    )
}

pub fn preprocess_with(raw: ArrayView2<f64>, cfg: &PreprocessConfig) -> Result<Image> {
    if raw.is_empty() {
        return Err(Error::Input("cannot preprocess an empty image".into()));
    }
    if !(cfg.gamma > 0.0) || !cfg.gamma.is_finite() {
        return Err(Error::Parameter(format!(
            "gamma must be positive, got {}",
            cfg.gamma
        )));
    }
    if cfg.out_size.0 == 0 || cfg.out_size.1 == 0 {
        return Err(Error::Parameter("output size must be non-zero".into()));
    }
    if !raw.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("image contains non-finite values".into()));
    }
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut img = if hi > lo {
        raw.mapv(|v| (v - lo) / (hi - lo))
    } else {
        // A constant field has no range to stretch; keep its level inside [0, 1].
        raw.mapv(|v| v.clamp(0.0, 1.0))
    };
    if let Some(p) = cfg.clahe {
        img = clahe(img.view(), p)?;
    }
    if cfg.gamma != 1.0 {
        img.mapv_inplace(|v| v.powf(cfg.gamma));
    }
    let mut out = resize_bilinear(img.view(), cfg.out_size);
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Contrast-limited adaptive histogram equalization on a `[0, 1]` image,
/// 256 bins, bilinear blending of neighbouring tile mappings.
pub fn clahe(img: ArrayView2<f64>, params: ClaheParams) -> Result<Image> {
    if params.tiles == 0 || !(params.clip_limit > 0.0) {
        return Err(Error::Parameter(
            "CLAHE needs at least one tile and a positive clip limit".into(),
        ));
    }
    let (h, w) = img.dim();
    let ty = params.tiles.min(h);
    let tx = params.tiles.min(w);
    let bin = |v: f64| ((v.clamp(0.0, 1.0) * (BINS - 1) as f64).round()) as usize;
    let bounds = |t: usize, n: usize, len: usize| (t * len / n, (t + 1) * len / n);

    let mut luts = vec![[0.0f64; BINS]; ty * tx];
    for j in 0..ty {
        let (y0, y1) = bounds(j, ty, h);
        for i in 0..tx {
            let (x0, x1) = bounds(i, tx, w);
            let mut hist = [0.0f64; BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin(img[[y, x]])] += 1.0;
                }
            }
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            let limit = (params.clip_limit * area / BINS as f64).max(1.0);
            let mut excess = 0.0;
            for c in hist.iter_mut() {
                if *c > limit {
                    excess += *c - limit;
                    *c = limit;
                }
            }
            let share = excess / BINS as f64;
            let lut = &mut luts[j * tx + i];
            let mut cum = 0.0;
            for (k, c) in hist.iter().enumerate() {
                cum += c + share;
                lut[k] = (cum / area).min(1.0);
            }
        }
    }

    // Tile centres in pixel coordinates.
    let centre = |t: usize, n: usize, len: usize| {
        let (a, b) = bounds(t, n, len);
        (a + b) as f64 / 2.0 - 0.5
    };
    let locate = |p: f64, n: usize, len: usize| -> (usize, usize, f64) {
        if p <= centre(0, n, len) {
            return (0, 0, 0.0);
        }
        if p >= centre(n - 1, n, len) {
            return (n - 1, n - 1, 0.0);
        }
        let mut t = 0;
        while centre(t + 1, n, len) < p {
            t += 1;
        }
        let (c0, c1) = (centre(t, n, len), centre(t + 1, n, len));
        (t, t + 1, (p - c0) / (c1 - c0))
    };

    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let (j0, j1, fy) = locate(y as f64, ty, h);
        for x in 0..w {
            let (i0, i1, fx) = locate(x as f64, tx, w);
            let b = bin(img[[y, x]]);
            let v00 = luts[j0 * tx + i0][b];
            let v01 = luts[j0 * tx + i1][b];
            let v10 = luts[j1 * tx + i0][b];
            let v11 = luts[j1 * tx + i1][b];
            out[[y, x]] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    Ok(out)
}
