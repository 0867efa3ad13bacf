//! JSON checkpoints: layer shapes, weights, optimizer moments, seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::adam::AdamState;
use super::net::{LayerShape, PredictorParams};

pub const CHECKPOINT_FORMAT: &str = "regal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dropout_rate: f64,
    pub layers: Vec<LayerRecord>,
    pub optimizer: Option<AdamState>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(params: &PredictorParams, optimizer: Option<&AdamState>, seed: u64) -> Self {
        let layers = params
            .layers()
            .iter()
            .enumerate()
            .map(|(l, s)| LayerRecord {
                kernel: s.kernel,
                in_channels: s.in_channels,
                out_channels: s.out_channels,
                weights: params.layer_weights(l).to_vec(),
                bias: params.layer_bias(l).to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dropout_rate: params.dropout_rate(),
            layers,
            optimizer: optimizer.cloned(),
            seed,
        }
    }

    pub fn params(&self) -> Result<PredictorParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut shapes = Vec::new();
        let mut values = Vec::new();
        for r in &self.layers {
            shapes.push(LayerShape {
                kernel: r.kernel,
                in_channels: r.in_channels,
                out_channels: r.out_channels,
            });
            values.extend_from_slice(&r.weights);
            values.extend_from_slice(&r.bias);
        }
        let p = PredictorParams::from_parts(shapes, values, self.dropout_rate)?;
        if let Some(o) = &self.optimizer {
            if o.m.len() != p.len() || o.v.len() != p.len() {
                return Err(Error::invalid("optimizer moments do not match the parameter count"));
            }
        }
        Ok(p)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_vec(ckpt)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
