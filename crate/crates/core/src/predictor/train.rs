//! Per-cycle training with Adam and best-validation-Dice checkpointing.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_model::{GroundTruthMask, ImageSlice, PartialLabelMask, Raster, UNLABELED};
use crate::error::{Error, Result};
use crate::evaluation::{dice, ConfusionCounts};
use crate::seed;

use super::adam::{AdamConfig, AdamState};
use super::loss::{loss_and_logit_grad, LossKind};
use super::net::{DropoutMode, PredictorParams};
use super::PixelClassifier;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dropout_rate: f64,
    /// Stop once validation Dice has not improved for this many epochs.
    pub patience: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1,
            max_epochs: 40,
            dropout_rate: 0.5,
            patience: None,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training image with its labels and the loss that applies to them.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub image: &'a ImageSlice,
    pub labels: &'a PartialLabelMask,
    pub loss: LossKind,
}

/// Which loss a label set is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Point,
    PerPixel,
}

impl Supervision {
    pub fn loss(self) -> LossKind {
        match self {
            Supervision::Point => LossKind::Point,
            Supervision::PerPixel => LossKind::FullSupervision,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: PredictorParams,
    pub optimizer: AdamState,
    pub best_val_dice: Option<f64>,
    /// Epoch (0-based) whose parameters were returned.
    pub best_epoch: usize,
    /// Mean per-example loss of every epoch that ran.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Loss of one example and its gradient w.r.t. every parameter.
///
/// Only the receptive field of labeled pixels is evaluated.
pub fn loss_and_grad(params: &PredictorParams, ex: &Example<'_>, mode: DropoutMode) -> Result<(f64, Vec<f64>)> {
    if ex.image.shape() != ex.labels.shape() {
        return Err(Error::invalid(format!(
            "image {} is {:?} but its labels are {:?}",
            ex.image.id,
            ex.image.shape(),
            ex.labels.shape()
        )));
    }
    let labels = ex.labels.labels().as_slice();
    let positions: Vec<u32> = (0..labels.len() as u32)
        .filter(|&i| labels[i as usize] != UNLABELED)
        .collect();
    if positions.is_empty() {
        return Ok((0.0, vec![0.0; params.len()]));
    }
    let targets: Vec<i8> = positions.iter().map(|&i| labels[i as usize]).collect();
    let pass = params.forward_pass(ex.image, mode, Some(&positions))?;
    let (loss, dlogits) = loss_and_logit_grad(ex.loss, &pass.logits, params.num_classes(), &targets);
    Ok((loss, params.backward(&pass, &dlogits)))
}

/// Deterministic argmax segmentation.
pub fn predict_mask<P: PixelClassifier + ?Sized>(model: &P, image: &ImageSlice) -> Result<Raster<u8>> {
    Ok(model.forward(image, DropoutMode::Off)?.argmax())
}

fn val_dice(params: &PredictorParams, val: &[(&ImageSlice, &GroundTruthMask)]) -> Result<f64> {
    let mut c = ConfusionCounts::default();
    for (img, gt) in val {
        c.add(&predict_mask(params, img)?, gt.classes())?;
    }
    Ok(dice(&c))
}

/// Train for up to `max_epochs` passes over `train`, returning the
/// parameters with the best validation Dice (last epoch if `val` is empty).
///
/// `optimizer` carries Adam moments across cycles when warm-starting.
pub fn train_cycle(
    params: PredictorParams,
    optimizer: Option<AdamState>,
    train: &[Example<'_>],
    val: &[(&ImageSlice, &GroundTruthMask)],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train_cycle needs at least one labeled image"));
    }
    let mut params = params.with_dropout(config.dropout_rate);
    let mut opt = match optimizer {
        Some(o) if o.m.len() == params.len() => o,
        Some(o) => {
            return Err(Error::invalid(format!(
                "optimizer state has {} entries, parameters have {}",
                o.m.len(),
                params.len()
            )))
        }
        None => AdamState::new(params.len()),
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(f64, usize, PredictorParams)> = None;
    let mut steps = 0u64;
    let mut grad_sum = vec![0.0; params.len()];

    for epoch in 0..config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(config.seed, &[seed::tag("shuffle"), epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad_sum.iter_mut().for_each(|g| *g = 0.0);
            for (k, &i) in batch.iter().enumerate() {
                let dseed = seed::derive(config.seed, &[seed::tag("dropout"), epoch as u64, steps, k as u64]);
                let (loss, grads) = loss_and_grad(&params, &train[i], DropoutMode::Stochastic(dseed))?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch });
                }
                total += loss;
                for (s, g) in grad_sum.iter_mut().zip(&grads) {
                    *s += g;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad_sum.iter_mut().for_each(|g| *g *= inv);
            opt.step(&config.adam, config.learning_rate, params.values_mut(), &grad_sum);
            steps += 1;
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
        }
        epoch_losses.push(total / train.len() as f64);

        if !val.is_empty() {
            let d = val_dice(&params, val)?;
            if best.as_ref().is_none_or(|b| d > b.0) {
                best = Some((d, epoch, params.clone()));
            }
            if let (Some(p), Some(b)) = (config.patience, &best) {
                if epoch - b.1 >= p {
                    break;
                }
            }
        }
    }

    let last_epoch = epoch_losses.len() - 1;
    let (best_val_dice, best_epoch, params) = match best {
        Some((d, e, p)) => (Some(d), e, p),
        None => (None, last_epoch, params),
    };
    Ok(TrainReport {
        params,
        optimizer: opt,
        best_val_dice,
        best_epoch,
        epoch_losses,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::NetSpec;

    fn image(h: usize, w: usize) -> ImageSlice {
        ImageSlice::new("img", "scan", 0, Raster::from_fn(h, w, |r, c| if r >= h / 2 { 1.0 } else { -1.0 } + 0.1 * c as f64))
    }

    fn small() -> PredictorParams {
        PredictorParams::init(&NetSpec { hidden: [4, 6, 6], classes: 2, dropout_rate: 0.5 }, 3).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { dropout_rate: 1.0, ..Default::default() },
            TrainConfig { max_epochs: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(matches!(
            train_cycle(small(), None, &[], &[], &TrainConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn empty_val_returns_last_epoch_and_is_deterministic() {
        let img = image(6, 6);
        let mut labels = PartialLabelMask::unlabeled("img", 6, 6);
        labels.set(0, 0, 0);
        labels.set(5, 5, 1);
        let ex = [Example { image: &img, labels: &labels, loss: LossKind::Point }];
        let cfg = TrainConfig { max_epochs: 5, learning_rate: 1e-2, ..Default::default() };
        let a = train_cycle(small(), None, &ex, &[], &cfg).unwrap();
        let b = train_cycle(small(), None, &ex, &[], &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.best_val_dice, None);
        assert_eq!(a.best_epoch, 4);
        assert_eq!(a.steps, 5);
    }

    #[test]
    fn unlabeled_example_has_zero_gradient() {
        let img = image(4, 4);
        let labels = PartialLabelMask::unlabeled("img", 4, 4);
        let ex = Example { image: &img, labels: &labels, loss: LossKind::Point };
        let (l, g) = loss_and_grad(&small(), &ex, DropoutMode::Off).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn best_val_params_are_returned() {
        let img = image(8, 8);
        let gt = GroundTruthMask::new("img", Raster::from_fn(8, 8, |r, _| u8::from(r >= 4))).unwrap();
        let labels = gt.to_partial();
        let ex = [Example { image: &img, labels: &labels, loss: LossKind::FullSupervision }];
        let cfg = TrainConfig { max_epochs: 6, learning_rate: 1e-2, dropout_rate: 0.0, ..Default::default() };
        let rep = train_cycle(small(), None, &ex, &[(&img, &gt)], &cfg).unwrap();
        let d = val_dice(&rep.params, &[(&img, &gt)]).unwrap();
        assert_eq!(Some(d), rep.best_val_dice);
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let img = ImageSlice::new("img", "scan", 0, Raster::from_fn(5, 6, |r, c| ((r * 7 + c * 3) as f64).sin()));
        let mut labels = PartialLabelMask::unlabeled("img", 5, 6);
        for (r, c, y) in [(0, 0, 0), (2, 3, 1), (4, 5, 1), (1, 4, 0)] {
            labels.set(r, c, y);
        }
        let full = GroundTruthMask::new("img", Raster::from_fn(5, 6, |r, c| u8::from(r + c > 4))).unwrap().to_partial();
        let base = small();
        for (kind, lab) in [(LossKind::Point, &labels), (LossKind::FullSupervision, &full), (LossKind::FullSupervision, &labels)] {
            let ex = Example { image: &img, labels: lab, loss: kind };
            let mode = DropoutMode::Stochastic(9);
            let (_, g) = loss_and_grad(&base, &ex, mode).unwrap();
            let h = 1e-6;
            let mut num = vec![0.0; base.len()];
            for (i, n) in num.iter_mut().enumerate() {
                let mut up = base.clone();
                up.values_mut()[i] += h;
                let mut dn = base.clone();
                dn.values_mut()[i] -= h;
                *n = (loss_and_grad(&up, &ex, mode).unwrap().0 - loss_and_grad(&dn, &ex, mode).unwrap().0) / (2.0 * h);
            }
            let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff / norm < 1e-4, "{kind:?}: {}", diff / norm);
        }
    }

    #[test]
    fn sparse_loss_matches_dense_probability_route() {
        let img = image(6, 7);
        let mut labels = PartialLabelMask::unlabeled("img", 6, 7);
        labels.set(1, 1, 1);
        labels.set(5, 6, 0);
        labels.set(0, 6, 1);
        let p = small();
        let probs = p.forward(&img, DropoutMode::Stochastic(2)).unwrap();
        for kind in [LossKind::Point, LossKind::FullSupervision] {
            let ex = Example { image: &img, labels: &labels, loss: kind };
            let (l, _) = loss_and_grad(&p, &ex, DropoutMode::Stochastic(2)).unwrap();
            let expect = match kind {
                LossKind::Point => crate::predictor::point_loss(&probs, &labels).unwrap(),
                LossKind::FullSupervision => crate::predictor::masked_full_sup_loss(&probs, &labels).unwrap(),
            };
            assert!((l - expect).abs() < 1e-9);
        }
    }
}
