//! Training objectives and their gradients with respect to the network
//! outputs (probability maps and embeddings).

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied to probabilities inside the logarithm.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLossWeights {
    pub ce: f64,
    pub dice: f64,
    /// Added to the numerator and denominator of the soft Dice.
    pub smooth: f64,
}

impl Default for SegLossWeights {
    fn default() -> Self {
        Self {
            ce: 0.5,
            dice: 0.5,
            smooth: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_ct: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

fn check_masks(p: &Array4<f64>, y: &Array3<u8>) -> Result<()> {
    let (n, c, h, w) = p.dim();
    if y.dim() != (n, h, w) {
        return Err(Error::Input(format!(
            "mask batch {:?} does not match prediction batch {:?}",
            y.dim(),
            (n, h, w)
        )));
    }
    if let Some(&bad) = y.iter().find(|&&v| v as usize >= c) {
        return Err(Error::Input(format!("mask class {bad} outside 0..{c}")));
    }
    if c < 2 {
        return Err(Error::Input("need at least two classes".into()));
    }
    Ok(())
}

/// Hybrid cross-entropy plus soft-Dice loss, averaged over the batch, with
/// its gradient with respect to `p`.
pub fn seg_loss_grad(p: &Array4<f64>, y: &Array3<u8>, weights: SegLossWeights) -> Result<(f64, Array4<f64>)> {
    check_masks(p, y)?;
    let (n, c, h, w) = p.dim();
    let pixels = (h * w) as f64;
    let nf = n as f64;
    let fg = (c - 1) as f64;
    let e = weights.smooth;
    let mut grad = Array4::zeros(p.raw_dim());
    let mut total = 0.0;
    for s in 0..n {
        let mut ce = 0.0;
        for yy in 0..h {
            for xx in 0..w {
                let k = y[[s, yy, xx]] as usize;
                let pk = p[[s, k, yy, xx]];
                if pk > PROB_FLOOR {
                    ce -= pk.ln();
                    grad[[s, k, yy, xx]] -= weights.ce / (pixels * pk * nf);
                } else {
                    ce -= PROB_FLOOR.ln();
                }
            }
        }
        ce /= pixels;
        let mut dice_sum = 0.0;
        for k in 1..c {
            let (mut inter, mut pp, mut yy2) = (0.0, 0.0, 0.0);
            for yy in 0..h {
                for xx in 0..w {
                    let pv = p[[s, k, yy, xx]];
                    let yv = (y[[s, yy, xx]] as usize == k) as u8 as f64;
                    inter += pv * yv;
                    pp += pv * pv;
                    yy2 += yv;
                }
            }
            let num = 2.0 * inter + e;
            let den = pp + yy2 + e;
            dice_sum += num / den;
            let scale = -weights.dice / (fg * nf);
            for yy in 0..h {
                for xx in 0..w {
                    let pv = p[[s, k, yy, xx]];
                    let yv = (y[[s, yy, xx]] as usize == k) as u8 as f64;
                    let dd = (2.0 * yv * den - num * 2.0 * pv) / (den * den);
                    grad[[s, k, yy, xx]] += scale * dd;
                }
            }
        }
        total += weights.ce * ce + weights.dice * (1.0 - dice_sum / fg);
    }
    Ok((total / nf, grad))
}

/// Mean over the batch of `0.5 CE + 0.5 (1 - mean foreground soft Dice)`.
pub fn seg_loss(p: &Array4<f64>, y: &Array3<u8>) -> Result<f64> {
    seg_loss_grad(p, y, SegLossWeights::default()).map(|(l, _)| l)
}

/// Sum of the batch-mean segmentation losses of the labeled source and
/// labeled target batches. Either (not both) may be absent.
pub fn supervised_loss(
    source: Option<(&Array4<f64>, &Array3<u8>)>,
    target: Option<(&Array4<f64>, &Array3<u8>)>,
) -> Result<f64> {
    if source.is_none() && target.is_none() {
        return Err(Error::Input("supervised loss needs at least one labeled batch".into()));
    }
    let mut total = 0.0;
    for (p, y) in [source, target].into_iter().flatten() {
        total += seg_loss(p, y)?;
    }
    Ok(total)
}

/// Mean squared difference between probability maps and its gradient with
/// respect to the student maps. The teacher is treated as a constant.
pub fn consistency_loss_grad(student: &Array4<f64>, teacher: &Array4<f64>) -> Result<(f64, Array4<f64>)> {
    if student.dim() != teacher.dim() {
        return Err(Error::Input(format!(
            "consistency shapes differ: {:?} vs {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    let m = student.len() as f64;
    let diff = student - teacher;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / m;
    Ok((loss, diff * (2.0 / m)))
}

pub fn consistency_loss(student: &Array4<f64>, teacher: &Array4<f64>) -> Result<f64> {
    consistency_loss_grad(student, teacher).map(|(l, _)| l)
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_sim(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input("embedding lengths differ".into()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero-norm embedding".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Similarity and its gradients with respect to both arguments (unclamped).
fn cosine_grad(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero-norm embedding".into()));
    }
    let s = a.dot(&b) / (na * nb);
    let da = &b / (na * nb) - &a * (s / (na * na));
    let db = &a / (na * nb) - &b * (s / (nb * nb));
    Ok((s.clamp(-1.0, 1.0), da, db))
}

/// Gradients of a directional contrastive loss, one array per argument.
#[derive(Debug, Clone)]
pub struct DirectionalGrads {
    pub anchor: Array2<f64>,
    pub positive: Array2<f64>,
    pub negative1: Array2<f64>,
    pub negative2: Array2<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// `-log softmax_0([sim(a,p), sim(a,n1), sim(a,n2)] / tau)` averaged over
/// rows; row `k` of every argument forms one pairing.
pub fn directional_contrastive_grad(
    anchor: &Array2<f64>,
    positive: &Array2<f64>,
    negative1: &Array2<f64>,
    negative2: &Array2<f64>,
    tau: f64,
) -> Result<(f64, DirectionalGrads)> {
    check_tau(tau)?;
    let dim = anchor.raw_dim();
    if [positive, negative1, negative2].iter().any(|x| x.raw_dim() != dim) {
        return Err(Error::Input("contrastive arguments have mismatched shapes".into()));
    }
    let rows = anchor.nrows();
    if rows == 0 {
        return Err(Error::Input("contrastive loss needs at least one pair".into()));
    }
    let mut g = DirectionalGrads {
        anchor: Array2::zeros(dim.clone()),
        positive: Array2::zeros(dim.clone()),
        negative1: Array2::zeros(dim.clone()),
        negative2: Array2::zeros(dim),
    };
    let mut total = 0.0;
    let inv_rows = 1.0 / rows as f64;
    for k in 0..rows {
        let a = anchor.row(k);
        let others = [positive.row(k), negative1.row(k), negative2.row(k)];
        let mut logits = [0.0; 3];
        let mut grads = Vec::with_capacity(3);
        for (i, o) in others.iter().enumerate() {
            let (s, da, db) = cosine_grad(a, *o)?;
            logits[i] = s / tau;
            grads.push((da, db));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += -(logits[0] - max) + z.ln();
        // d loss / d logit_i = softmax_i - [i == 0]
        let targets = [
            &mut g.positive,
            &mut g.negative1,
            &mut g.negative2,
        ];
        let mut da_total = Array1::<f64>::zeros(a.len());
        for (i, target) in targets.into_iter().enumerate() {
            let coef = (exps[i] / z - (i == 0) as u8 as f64) / tau * inv_rows;
            da_total.scaled_add(coef, &grads[i].0);
            target.row_mut(k).scaled_add(coef, &grads[i].1);
        }
        g.anchor.row_mut(k).assign(&da_total);
    }
    Ok((total * inv_rows, g))
}

/// Source-to-target loss: anchor `gS_i`, positive `gT_j`, negatives
/// `gT_i` and `gS_j`.
pub fn contrastive_s2t(
    gs_i: &Array2<f64>,
    gt_j: &Array2<f64>,
    gt_i: &Array2<f64>,
    gs_j: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    directional_contrastive_grad(gs_i, gt_j, gt_i, gs_j, tau).map(|(l, _)| l)
}

/// Target-to-source loss: anchor `gT_j`, positive `gS_i`, negatives
/// `gS_j` and `gT_i`.
pub fn contrastive_t2s(
    gt_j: &Array2<f64>,
    gs_i: &Array2<f64>,
    gs_j: &Array2<f64>,
    gt_i: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    directional_contrastive_grad(gt_j, gs_i, gs_j, gt_i, tau).map(|(l, _)| l)
}

/// Gradients of [`contrastive_loss`] with respect to the four embeddings.
#[derive(Debug, Clone)]
pub struct ContrastiveGrads {
    pub gs_i: Array2<f64>,
    pub gt_i: Array2<f64>,
    pub gs_j: Array2<f64>,
    pub gt_j: Array2<f64>,
}

/// Mean of the two directional losses, with gradients.
pub fn contrastive_loss_grad(
    gs_i: &Array2<f64>,
    gt_i: &Array2<f64>,
    gs_j: &Array2<f64>,
    gt_j: &Array2<f64>,
    tau: f64,
) -> Result<(f64, ContrastiveGrads)> {
    let n = gs_i.nrows();
    if [gt_i, gs_j, gt_j].iter().any(|x| x.nrows() != n) {
        return Err(Error::Input("contrastive pair counts differ".into()));
    }
    let (l1, a) = directional_contrastive_grad(gs_i, gt_j, gt_i, gs_j, tau)?;
    let (l2, b) = directional_contrastive_grad(gt_j, gs_i, gs_j, gt_i, tau)?;
    let half = |x: Array2<f64>, y: Array2<f64>| (x + y) * 0.5;
    Ok((
        0.5 * (l1 + l2),
        ContrastiveGrads {
            gs_i: half(a.anchor, b.positive),
            gt_j: half(a.positive, b.anchor),
            gt_i: half(a.negative1, b.negative2),
            gs_j: half(a.negative2, b.negative1),
        },
    ))
}

pub fn contrastive_loss(
    gs_i: &Array2<f64>,
    gt_i: &Array2<f64>,
    gs_j: &Array2<f64>,
    gt_j: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    contrastive_loss_grad(gs_i, gt_i, gs_j, gt_j, tau).map(|(l, _)| l)
}

/// `total = l_sup + lambda1 * l_unsup + lambda2 * l_ct`.
pub fn total_loss(l_sup: f64, l_unsup: f64, l_ct: f64, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    if !(lambda1 >= 0.0) || !(lambda2 >= 0.0) {
        return Err(Error::Parameter(format!(
            "loss weights must be non-negative, got {lambda1}, {lambda2}"
        )));
    }
    Ok(LossBreakdown {
        l_sup,
        l_unsup,
        l_ct,
        total: l_sup + lambda1 * l_unsup + lambda2 * l_ct,
        lambda1,
        lambda2,
    })
}

/// One-hot encoding of a class-id batch, `N x C x H x W`.
pub fn one_hot(y: &Array3<u8>, classes: usize) -> Array4<f64> {
    let (n, h, w) = y.dim();
    let mut out = Array4::zeros((n, classes, h, w));
    Zip::indexed(y).for_each(|(s, yy, xx), &k| {
        if (k as usize) < classes {
            out[[s, k as usize, yy, xx]] = 1.0;
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn rows(v: &[&[f64]]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), v[0].len()), v.concat()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let y = Array3::from_shape_fn((2, 4, 4), |(s, a, b)| ((s + a + b) % 3) as u8);
        assert_abs_diff_eq!(seg_loss(&one_hot(&y, 3), &y).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn uniform_binary_prediction_matches_closed_form() {
        let mut y = Array3::<u8>::zeros((1, 4, 4));
        for i in 0..4 {
            y[[0, i, 0]] = 1;
        }
        let p = Array4::from_elem((1, 2, 4, 4), 0.5);
        let expected = 0.5 * 2f64.ln() + 0.5 * (1.0 - (4.0 + 1e-5) / (8.0 + 1e-5));
        assert_abs_diff_eq!(seg_loss(&p, &y).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(seg_loss(&p, &y).unwrap(), 0.5966, epsilon = 1e-4);
    }

    #[test]
    fn inverted_prediction_is_worse_than_uniform() {
        let y = Array3::from_shape_fn((1, 4, 4), |(_, a, _)| (a < 2) as u8);
        let inv = one_hot(&y.mapv(|v| 1 - v), 2).mapv(|v| v.clamp(1e-3, 1.0 - 1e-3));
        let uni = Array4::from_elem((1, 2, 4, 4), 0.5);
        assert!(seg_loss(&inv, &y).unwrap() > seg_loss(&uni, &y).unwrap());
    }

    #[test]
    fn out_of_range_class_is_input_error() {
        let y = Array3::from_elem((1, 2, 2), 2u8);
        let p = Array4::from_elem((1, 2, 2, 2), 0.5);
        assert!(matches!(seg_loss(&p, &y), Err(Error::Input(_))));
    }

    #[test]
    fn supervised_loss_sums_batch_means() {
        let y = Array3::from_shape_fn((1, 4, 4), |(_, a, _)| (a < 2) as u8);
        let p = one_hot(&y, 2);
        assert_eq!(supervised_loss(Some((&p, &y)), Some((&p, &y))).unwrap(), seg_loss(&p, &y).unwrap() * 2.0);
        let u = Array4::from_elem((1, 2, 4, 4), 0.5);
        assert_eq!(supervised_loss(Some((&u, &y)), None).unwrap(), seg_loss(&u, &y).unwrap());
        assert!(supervised_loss(None, None).is_err());
    }

    #[test]
    fn consistency_single_entry() {
        let a = Array4::zeros((1, 2, 2, 2));
        let mut b = a.clone();
        b[[0, 1, 0, 0]] = 1.0;
        assert_eq!(consistency_loss(&b, &a).unwrap(), 1.0 / 8.0);
        assert_eq!(consistency_loss(&a, &a).unwrap(), 0.0);
        assert!(consistency_loss(&a, &Array4::zeros((1, 2, 2, 1))).is_err());
    }

    #[test]
    fn cosine_cases() {
        let v = array![1.0, 2.0, -3.0];
        assert_abs_diff_eq!(cosine_sim(v.view(), v.view()).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_sim(v.view(), (-&v).view()).unwrap(), -1.0, epsilon = 1e-15);
        assert_eq!(cosine_sim(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 0.0);
        assert!(matches!(
            cosine_sim(array![0.0, 0.0].view(), v.slice(ndarray::s![..2])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn contrastive_closed_forms() {
        let v = rows(&[&[0.3, -1.0, 2.0]]);
        for tau in [0.05, 0.1, 1.0] {
            assert_abs_diff_eq!(contrastive_loss(&v, &v, &v, &v, tau).unwrap(), 3f64.ln(), epsilon = 1e-12);
        }
        let e1 = rows(&[&[1.0, 0.0]]);
        let e2 = rows(&[&[0.0, 1.0]]);
        // positive identical, both negatives orthogonal
        let l = contrastive_s2t(&e1, &e1, &e2, &e2, 0.1).unwrap();
        assert_abs_diff_eq!(l, (1.0 + 2.0 * (-10f64).exp()).ln(), epsilon = 1e-15);
        let l = contrastive_s2t(&e1, &e2, &e1, &e1, 0.1).unwrap();
        assert_abs_diff_eq!(l, (1.0 + 2.0 * 10f64.exp()).ln(), epsilon = 1e-12);
        assert!(matches!(contrastive_s2t(&e1, &e1, &e2, &e2, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn role_swap_maps_s2t_onto_t2s() {
        let a = rows(&[&[0.1, 0.4, -0.2], &[1.0, 0.0, 0.5]]);
        let b = rows(&[&[0.3, -0.4, 0.2], &[0.2, 1.0, 0.1]]);
        let c = rows(&[&[-0.5, 0.1, 0.9], &[0.7, 0.7, 0.0]]);
        let d = rows(&[&[0.0, 0.2, 0.3], &[-1.0, 0.3, 0.2]]);
        assert_eq!(contrastive_s2t(&a, &b, &c, &d, 0.1).unwrap(), contrastive_t2s(&a, &b, &c, &d, 0.1).unwrap());
        assert!(contrastive_loss(&a, &b, &c, &d.slice(ndarray::s![..1, ..]).to_owned(), 0.1).is_err());
    }

    #[test]
    fn positive_similarity_is_monotone() {
        let e = |t: f64| rows(&[&[t.cos(), t.sin()]]);
        let anchor = e(0.0);
        let (n1, n2) = (e(1.2), e(-2.0));
        let mut prev = f64::INFINITY;
        for sim in [-1.0f64, -0.5, 0.0, 0.5, 1.0] {
            let l = contrastive_s2t(&anchor, &e(sim.acos()), &n1, &n2, 0.1).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn total_loss_weighting() {
        let b = total_loss(1.0, 0.5, 0.2, 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(b.total, 1.52, epsilon = 1e-15);
        assert_eq!(total_loss(0.7, 3.0, 9.0, 0.0, 0.0).unwrap().total, 0.7);
        assert!(matches!(total_loss(1.0, 1.0, 1.0, -1.0, 0.1), Err(Error::Parameter(_))));
    }
}
