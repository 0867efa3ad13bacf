//! Dice and specificity pooled over a slice set, and learning-curve rows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data_model::{Raster, INFECTED};
use crate::error::{Error, Result};

/// Pixel counts pooled over every evaluated image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, pred: &Raster<u8>, gt: &Raster<u8>) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::invalid(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.shape(),
                gt.shape()
            )));
        }
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            match (p == INFECTED, g == INFECTED) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
        Ok(())
    }
}

/// Micro-aggregated confusion counts over paired binary masks.
pub fn confusion(preds: &[Raster<u8>], gts: &[Raster<u8>]) -> Result<ConfusionCounts> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        counts.add(p, g)?;
    }
    Ok(counts)
}

/// `2TP / (2TP + FP + FN)`; 1.0 when there is nothing to find and nothing was predicted.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// `TN / (FP + TN)`.
pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    let neg = c.fp + c.tn;
    if neg == 0 {
        return Err(Error::UndefinedMetric(
            "specificity needs at least one negative pixel".into(),
        ));
    }
    Ok(c.tn as f64 / neg as f64)
}

/// One row of a cost-vs-score curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cycle: usize,
    pub cost_seconds: f64,
    pub regions_labeled: usize,
    pub dice: f64,
    pub specificity: f64,
    pub heuristic: String,
    pub aggregation: String,
    pub seed: u64,
}

/// Write curve rows with the fixed column schema.
pub fn write_curve_csv<W: Write>(out: W, rows: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "cycle",
            "cost_seconds",
            "regions_labeled",
            "dice",
            "specificity",
            "heuristic",
            "aggregation",
            "seed",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<curve csv>", e))?;
    Ok(())
}

pub fn read_curve_csv<R: std::io::Read>(input: R) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Trapezoidal area under `(x, y)` points taken in order.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Area under dice vs regions labeled.
pub fn curve_auc(rows: &[CurvePoint]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.regions_labeled as f64, r.dice)).collect();
    trapezoid_auc(&pts)
}

/// Dice of the last row whose cumulative cost does not exceed `cost`.
pub fn dice_at_cost(rows: &[CurvePoint], cost: f64) -> Option<f64> {
    rows.iter()
        .take_while(|r| r.cost_seconds <= cost)
        .last()
        .map(|r| r.dice)
}
