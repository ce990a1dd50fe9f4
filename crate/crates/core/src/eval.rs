//! Segmentation metrics and per-test-set aggregation.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{samples_hash, LabeledSample, Mask};
use crate::model::{argmax_classes, stack_images, ModelParams};
use crate::{DomainId, Error, Result};

/// Test cases predicted per forward pass.
const EVAL_CHUNK: usize = 16;

fn check_shapes(a: ArrayView2<bool>, b: ArrayView2<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!("mask shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn counts(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

/// `2|P∩G| / (|P|+|G|)` in percent; 100 when both are empty.
pub fn dice(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (tp, fp, fn_) = counts(pred, gt);
    let den = 2 * tp + fp + fn_;
    Ok(if den == 0 { 100.0 } else { 200.0 * tp as f64 / den as f64 })
}

/// `(recall, precision)` in percent; each is 100 when its denominator is 0.
pub fn recall_precision(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<(f64, f64)> {
    check_shapes(pred, gt)?;
    let (tp, fp, fn_) = counts(pred, gt);
    let pct = |num: usize, den: usize| if den == 0 { 100.0 } else { 100.0 * num as f64 / den as f64 };
    Ok((pct(tp, tp + fn_), pct(tp, tp + fp)))
}

/// Foreground pixels with at least one 4-neighbour that is background or
/// outside the image.
pub fn boundary(mask: ArrayView2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[[y - 1, x]]
                || !mask[[y + 1, x]]
                || !mask[[y, x - 1]]
                || !mask[[y, x + 1]];
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

fn mean_nearest(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let dy = y as f64 - v as f64;
                    let dx = x as f64 - u as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / from.len() as f64
}

/// Average symmetric surface distance in physical units: the mean of the two
/// directed mean boundary-to-nearest-boundary distances.
pub fn assd(pred: ArrayView2<bool>, gt: ArrayView2<bool>, spacing: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    if bp.is_empty() || bg.is_empty() {
        return Err(Error::UndefinedMetric("ASSD of an empty mask".into()));
    }
    Ok(0.5 * (mean_nearest(&bp, &bg) + mean_nearest(&bg, &bp)) * spacing)
}

pub fn class_mask(mask: &Mask, class: u8) -> Array2<bool> {
    mask.mapv(|v| v == class)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample standard deviation (n - 1); 0 for a single value.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd })
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice_pct: MeanSd,
    pub recall_pct: MeanSd,
    pub precision_pct: MeanSd,
    /// Missing when no case had both masks non-empty.
    pub assd_mm: Option<MeanSd>,
    /// Cases left out of the ASSD aggregate because a mask was empty.
    pub assd_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    /// Foreground classes `1..C`, in order.
    pub per_class: Vec<ClassMetrics>,
    /// Per-case average over foreground classes, then aggregated.
    pub mean: ClassMetrics,
    pub cases: usize,
    pub test_set_hash: String,
}

/// Per-case metric values for one case and one foreground class.
#[derive(Debug, Clone, Copy)]
struct CaseValues {
    dice: f64,
    recall: f64,
    precision: f64,
    assd: Option<f64>,
}

fn case_values(pred: &Mask, gt: &Mask, class: u8, spacing: f64) -> Result<CaseValues> {
    let (p, g) = (class_mask(pred, class), class_mask(gt, class));
    let (recall, precision) = recall_precision(p.view(), g.view())?;
    let assd = match assd(p.view(), g.view(), spacing) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CaseValues {
        dice: dice(p.view(), g.view())?,
        recall,
        precision,
        assd,
    })
}

fn aggregate(cases: &[CaseValues]) -> ClassMetrics {
    let pick = |f: fn(&CaseValues) -> f64| cases.iter().map(f).collect::<Vec<_>>();
    let assd: Vec<f64> = cases.iter().filter_map(|c| c.assd).collect();
    ClassMetrics {
        dice_pct: MeanSd::of(&pick(|c| c.dice)).unwrap_or_default(),
        recall_pct: MeanSd::of(&pick(|c| c.recall)).unwrap_or_default(),
        precision_pct: MeanSd::of(&pick(|c| c.precision)).unwrap_or_default(),
        assd_mm: MeanSd::of(&assd),
        assd_excluded: cases.len() - assd.len(),
    }
}

/// Aggregates metrics from predicted and reference masks.
pub fn metrics_from_masks(
    method: &str,
    preds: &[Mask],
    gts: &[Mask],
    classes: usize,
    spacing: f64,
    test_set_hash: String,
) -> Result<MetricsRow> {
    if preds.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Input("prediction and reference counts differ".into()));
    }
    let mut per_class_cases: Vec<Vec<CaseValues>> = vec![Vec::new(); classes - 1];
    let mut mean_cases = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let vals = (1..classes)
            .map(|c| case_values(p, g, c as u8, spacing))
            .collect::<Result<Vec<_>>>()?;
        let fg = vals.len() as f64;
        let defined: Vec<f64> = vals.iter().filter_map(|v| v.assd).collect();
        mean_cases.push(CaseValues {
            dice: vals.iter().map(|v| v.dice).sum::<f64>() / fg,
            recall: vals.iter().map(|v| v.recall).sum::<f64>() / fg,
            precision: vals.iter().map(|v| v.precision).sum::<f64>() / fg,
            assd: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        });
        for (slot, v) in per_class_cases.iter_mut().zip(vals) {
            slot.push(v);
        }
    }
    Ok(MetricsRow {
        method: method.to_string(),
        per_class: per_class_cases.iter().map(|c| aggregate(c)).collect(),
        mean: aggregate(&mean_cases),
        cases: preds.len(),
        test_set_hash,
    })
}

/// Argmax masks of the model routed through `domain`, in evaluation mode.
pub fn predict_masks(params: &ModelParams, samples: &[LabeledSample], domain: DomainId) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let x = stack_images(chunk.iter().map(|s| &s.image))?;
        let labels = argmax_classes(&params.predict(&x, domain)?);
        for i in 0..chunk.len() {
            out.push(labels.slice(s![i, .., ..]).to_owned());
        }
    }
    Ok(out)
}

/// Evaluates the student routed through `domain` on `test`.
pub fn evaluate_model(
    method: &str,
    params: &ModelParams,
    test: &[LabeledSample],
    domain: DomainId,
    spacing: f64,
) -> Result<MetricsRow> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let preds = predict_masks(params, test, domain)?;
    let gts: Vec<Mask> = test.iter().map(|s| s.mask.clone()).collect();
    metrics_from_masks(method, &preds, &gts, params.arch.classes, spacing, samples_hash(test))
}

/// Mean foreground Dice, the model-selection criterion.
pub fn mean_dice(params: &ModelParams, samples: &[LabeledSample], domain: DomainId) -> Result<f64> {
    Ok(evaluate_model("validation", params, samples, domain, 1.0)?.mean.dice_pct.mean)
}
