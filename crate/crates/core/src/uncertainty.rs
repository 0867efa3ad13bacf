//! MC-dropout sampling, the mean estimator and per-pixel entropy.

use serde::{Deserialize, Serialize};

use crate::data_model::{ImageSlice, Raster};
use crate::error::{Error, Result};
use crate::png_io;
use crate::predictor::{PixelClassifier, ProbMap};

/// Default number of MC-dropout samples.
pub const DEFAULT_MC_SAMPLES: usize = 8;

/// Per-pixel entropy of the mean prediction, in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyMap {
    pub image_id: String,
    pub values: Raster<f64>,
}

impl EntropyMap {
    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// 8-bit grayscale heatmap, `0 -> 0` and `ln C -> 255`.
    pub fn to_png(&self, classes: usize) -> Result<Vec<u8>> {
        let max = (classes as f64).ln();
        let img = self
            .values
            .map(|&h| ((h / max).clamp(0.0, 1.0) * 255.0).round() as u8);
        png_io::encode_gray(&img)
    }
}

/// `n` stochastic forward passes with per-sample dropout masks.
pub fn mc_samples<P: PixelClassifier + ?Sized>(model: &P, image: &ImageSlice, n: usize, seed: u64) -> Result<Vec<ProbMap>> {
    if n == 0 {
        return Err(Error::invalid("at least one MC sample is required"));
    }
    model.mc_samples(image, n, seed)
}

/// Pixelwise arithmetic mean of probability maps.
pub fn mean_estimator(samples: &[ProbMap]) -> Result<ProbMap> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("mean of zero samples"))?;
    let mut acc = vec![0.0; first.as_slice().len()];
    for s in samples {
        if s.shape() != first.shape() || s.classes() != first.classes() {
            return Err(Error::invalid(format!(
                "sample shape {:?}x{} differs from {:?}x{}",
                s.shape(),
                s.classes(),
                first.shape(),
                first.classes()
            )));
        }
        for (a, v) in acc.iter_mut().zip(s.as_slice()) {
            *a += v;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    ProbMap::new(first.height(), first.width(), first.classes(), acc)
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    // rounding can leave a -0.0 or a hair below zero on one-hot inputs
    h.max(0.0)
}

pub fn entropy_map(image_id: &str, mean: &ProbMap) -> EntropyMap {
    let values: Vec<f64> = mean.pixels().map(entropy).collect();
    EntropyMap {
        image_id: image_id.to_string(),
        values: Raster::new(mean.height(), mean.width(), values).expect("shape from prob map"),
    }
}

/// MC samples → mean → entropy in one call.
pub fn image_entropy<P: PixelClassifier + ?Sized>(model: &P, image: &ImageSlice, n: usize, seed: u64) -> Result<EntropyMap> {
    let samples = mc_samples(model, image, n, seed)?;
    Ok(entropy_map(&image.id, &mean_estimator(&samples)?))
}
