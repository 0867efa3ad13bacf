//! Point-level cross-entropy and the full-supervision loss.
//!
//! Public functions take probability maps. Training uses
//! [`loss_and_logit_grad`], which evaluates the same losses from logits over
//! the labeled pixels only and returns the exact gradient w.r.t. the logits.

use crate::data_model::{GroundTruthMask, PartialLabelMask, INFECTED, UNLABELED};
use crate::error::{Error, Result};

use super::net::ProbMap;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Smoothing constant of the IoU term.
pub const IOU_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Sum of `-log p(label)` over labeled pixels.
    Point,
    /// Class-balanced cross-entropy (mean) plus smoothed soft-IoU loss.
    FullSupervision,
}

fn check_shape(probs: &ProbMap, shape: (usize, usize)) -> Result<()> {
    if probs.shape() != shape {
        return Err(Error::invalid(format!(
            "probability map {:?} does not match labels {:?}",
            probs.shape(),
            shape
        )));
    }
    Ok(())
}

/// `-Σ log p(y_j)` over pixels with a label in `{0, 1}`; zero when nothing is labeled.
pub fn point_loss(probs: &ProbMap, labels: &PartialLabelMask) -> Result<f64> {
    check_shape(probs, labels.shape())?;
    Ok(probs
        .pixels()
        .zip(labels.labels().as_slice())
        .filter(|(_, &y)| y != UNLABELED)
        .map(|(p, &y)| -p[y as usize].max(PROB_FLOOR).ln())
        .sum())
}

/// Weighted cross-entropy plus IoU loss against a full mask.
pub fn full_sup_loss(probs: &ProbMap, mask: &GroundTruthMask) -> Result<f64> {
    masked_full_sup_loss(probs, &mask.to_partial())
}

/// [`full_sup_loss`] restricted to the labeled pixels of a tri-state mask.
/// Identical to it when every pixel is labeled.
pub fn masked_full_sup_loss(probs: &ProbMap, labels: &PartialLabelMask) -> Result<f64> {
    check_shape(probs, labels.shape())?;
    let rows: Vec<(&[f64], u8)> = probs
        .pixels()
        .zip(labels.labels().as_slice())
        .filter(|(_, &y)| y != UNLABELED)
        .map(|(p, &y)| (p, y as u8))
        .collect();
    if rows.is_empty() {
        return Ok(0.0);
    }
    let weights = class_weights(rows.iter().map(|r| r.1), probs.classes());
    let n = rows.len() as f64;
    let wbce: f64 = rows
        .iter()
        .map(|(p, y)| weights[*y as usize] * -p[*y as usize].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / n;
    let (mut inter, mut sum_p, mut sum_y) = (0.0, 0.0, 0.0);
    for (p, y) in &rows {
        let q = p[INFECTED as usize];
        let t = f64::from(*y == INFECTED);
        inter += q * t;
        sum_p += q;
        sum_y += t;
    }
    let iou = (inter + IOU_SMOOTH) / (sum_p + sum_y - inter + IOU_SMOOTH);
    Ok(wbce + 1.0 - iou)
}

/// Inverse-frequency class weights normalized to mean 1 over the pixels.
fn class_weights(labels: impl Iterator<Item = u8>, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut n = 0usize;
    for y in labels {
        counts[y as usize] += 1;
        n += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n as f64 / (present as f64 * c as f64) })
        .collect()
}

/// Loss and gradient w.r.t. `logits` (`n x classes`, row per pixel).
/// Pixels whose target is `-1` are ignored.
pub fn loss_and_logit_grad(kind: LossKind, logits: &[f64], classes: usize, targets: &[i8]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len() * classes, "logits/targets length mismatch");
    let mut grad = vec![0.0; logits.len()];
    // stable log-softmax
    let mut logp = vec![0.0; logits.len()];
    for (z, lp) in logits.chunks_exact(classes).zip(logp.chunks_exact_mut(classes)) {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in lp.iter_mut().zip(z) {
            *o = v - lse;
        }
    }
    let labeled: Vec<usize> = (0..targets.len()).filter(|&j| targets[j] != UNLABELED).collect();
    if labeled.is_empty() {
        return (0.0, grad);
    }
    match kind {
        LossKind::Point => {
            let mut loss = 0.0;
            for &j in &labeled {
                let y = targets[j] as usize;
                loss -= logp[j * classes + y];
                for c in 0..classes {
                    grad[j * classes + c] = logp[j * classes + c].exp() - f64::from(c == y);
                }
            }
            (loss, grad)
        }
        LossKind::FullSupervision => {
            let weights = class_weights(labeled.iter().map(|&j| targets[j] as u8), classes);
            let n = labeled.len() as f64;
            let mut wbce = 0.0;
            let (mut inter, mut sum_p, mut sum_y) = (0.0, 0.0, 0.0);
            for &j in &labeled {
                let y = targets[j] as usize;
                let wj = weights[y] / n;
                wbce -= wj * logp[j * classes + y];
                for c in 0..classes {
                    grad[j * classes + c] = wj * (logp[j * classes + c].exp() - f64::from(c == y));
                }
                let q = logp[j * classes + INFECTED as usize].exp();
                let t = f64::from(y == INFECTED as usize);
                inter += q * t;
                sum_p += q;
                sum_y += t;
            }
            let union = sum_p + sum_y - inter + IOU_SMOOTH;
            let num = inter + IOU_SMOOTH;
            let loss = wbce + 1.0 - num / union;
            let k = INFECTED as usize;
            for &j in &labeled {
                let t = f64::from(targets[j] as usize == k);
                // d(1 - num/union)/dq_j
                let dq = -(t * union - num * (1.0 - t)) / (union * union);
                let q = logp[j * classes + k].exp();
                for c in 0..classes {
                    let p_c = logp[j * classes + c].exp();
                    grad[j * classes + c] += dq * q * (f64::from(c == k) - p_c);
                }
            }
            (loss, grad)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Raster;
    use std::f64::consts::LN_2;

    fn map(h: usize, w: usize, infected: &[f64]) -> ProbMap {
        let data = infected.iter().flat_map(|&q| [1.0 - q, q]).collect();
        ProbMap::new(h, w, 2, data).unwrap()
    }

    fn partial(h: usize, w: usize, v: Vec<i8>) -> PartialLabelMask {
        PartialLabelMask::new("x", Raster::new(h, w, v).unwrap()).unwrap()
    }

    #[test]
    fn point_loss_examples() {
        let m = map(1, 2, &[1.0, 0.3]);
        assert_eq!(point_loss(&m, &partial(1, 2, vec![1, -1])).unwrap(), 0.0);
        let m = map(1, 2, &[0.5, 0.3]);
        assert!((point_loss(&m, &partial(1, 2, vec![0, -1])).unwrap() - LN_2).abs() < 1e-12);
        let m = map(1, 3, &[0.5, 0.25, 0.9]);
        let l = point_loss(&m, &partial(1, 3, vec![1, 1, -1])).unwrap();
        assert!((l - (2.0f64.ln() + 4.0f64.ln())).abs() < 1e-12);
        assert!((l - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn point_loss_unlabeled_is_zero_and_clamped() {
        let m = map(1, 2, &[0.0, 1.0]);
        assert_eq!(point_loss(&m, &partial(1, 2, vec![-1, -1])).unwrap(), 0.0);
        let l = point_loss(&m, &partial(1, 2, vec![1, -1])).unwrap();
        assert!((l - -PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_errors() {
        let m = map(1, 2, &[0.5, 0.5]);
        assert!(point_loss(&m, &partial(2, 1, vec![0, 0])).is_err());
        let gt = GroundTruthMask::new("x", Raster::filled(2, 2, 0)).unwrap();
        assert!(full_sup_loss(&m, &gt).is_err());
    }

    #[test]
    fn full_sup_loss_examples() {
        let gt = GroundTruthMask::new("x", Raster::new(1, 3, vec![1, 0, 0]).unwrap()).unwrap();
        let perfect = map(1, 3, &[1.0, 0.0, 0.0]);
        assert!(full_sup_loss(&perfect, &gt).unwrap().abs() < 1e-12);

        let bg = GroundTruthMask::new("x", Raster::filled(2, 2, 0)).unwrap();
        let uniform = map(2, 2, &[0.5; 4]);
        let expect = LN_2 + (1.0 - 1.0 / 3.0);
        assert!((full_sup_loss(&uniform, &bg).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn class_weights_have_unit_mean() {
        let labels = [0u8, 0, 0, 1];
        let w = class_weights(labels.iter().copied(), 2);
        let mean: f64 = labels.iter().map(|&y| w[y as usize]).sum::<f64>() / 4.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!((w[1] / w[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn logit_route_matches_probability_route() {
        let logits: [f64; 8] = [0.3, -1.2, 2.0, 0.1, -0.4, -0.4, 1.5, 2.5];
        let targets = [1i8, 0, -1, 1];
        let probs: Vec<f64> = logits
            .chunks(2)
            .flat_map(|z| {
                let e0 = z[0].exp();
                let e1 = z[1].exp();
                [e0 / (e0 + e1), e1 / (e0 + e1)]
            })
            .collect();
        let pm = ProbMap::new(1, 4, 2, probs).unwrap();
        let labels = partial(1, 4, targets.to_vec());
        let (lp, _) = loss_and_logit_grad(LossKind::Point, &logits, 2, &targets);
        assert!((lp - point_loss(&pm, &labels).unwrap()).abs() < 1e-12);
        let (lf, _) = loss_and_logit_grad(LossKind::FullSupervision, &logits, 2, &targets);
        assert!((lf - masked_full_sup_loss(&pm, &labels).unwrap()).abs() < 1e-12);
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    #[test]
    fn logit_gradients_match_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for kind in [LossKind::Point, LossKind::FullSupervision] {
            for _ in 0..10 {
                let n = rng.random_range(2..12);
                let logits: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let mut targets: Vec<i8> = (0..n).map(|_| rng.random_range(-1..2)).collect();
                targets[0] = 1;
                targets[1] = 0;
                let (_, g) = loss_and_logit_grad(kind, &logits, 2, &targets);
                let h = 1e-6;
                let num: Vec<f64> = (0..logits.len())
                    .map(|i| {
                        let mut up = logits.clone();
                        up[i] += h;
                        let mut dn = logits.clone();
                        dn[i] -= h;
                        (loss_and_logit_grad(kind, &up, 2, &targets).0 - loss_and_logit_grad(kind, &dn, 2, &targets).0) / (2.0 * h)
                    })
                    .collect();
                assert!(rel_err(&g, &num) < 1e-4, "{kind:?}: {}", rel_err(&g, &num));
            }
        }
    }

    #[test]
    fn fully_labeled_point_loss_is_plain_cross_entropy() {
        let q = [0.2, 0.7, 0.5, 0.9];
        let y = [0i8, 1, 1, 0];
        let m = map(2, 2, &q);
        let ce: f64 = q
            .iter()
            .zip(&y)
            .map(|(&q, &y)| -(if y == 1 { q } else { 1.0 - q }).ln())
            .sum();
        assert!((point_loss(&m, &partial(2, 2, y.to_vec())).unwrap() - ce).abs() < 1e-12);
    }
}
