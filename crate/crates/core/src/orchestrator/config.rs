use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::{Aggregation, Heuristic};
use crate::data_model::{SplitMode, SplitSizes};
use crate::error::{Error, Result};
use crate::ingestion::{generate_synthetic, load_manifest, Dataset, SyntheticConfig};
use crate::oracle::{CostModel, POINT_COST_MS};
use crate::predictor::{NetSpec, Supervision, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Path to a `manifest.json` written by `ingestion::write_dataset`.
    Manifest(PathBuf),
    Synthetic(SyntheticConfig),
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Manifest(p) => Ok(load_manifest(p)?.1),
            DatasetSource::Synthetic(cfg) => generate_synthetic(cfg),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub sizes: SplitSizes,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::Mixed,
            sizes: SplitSizes::Fractions {
                train: 0.45,
                val: 0.05,
                test: 0.5,
            },
        }
    }
}

/// Everything that defines one active-learning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_id: String,
    pub dataset: DatasetSource,
    pub split: SplitSpec,
    /// K, the number of grid regions per image.
    pub regions_per_image: usize,
    pub heuristic: Heuristic,
    pub aggregation: Aggregation,
    pub supervision: Supervision,
    pub images_per_cycle: usize,
    /// Regions taken from each selected image per cycle.
    pub regions_per_selected_image: usize,
    /// Images labeled in the seed phase; defaults to `images_per_cycle`.
    pub seed_images: Option<usize>,
    /// Alternative to `seed_images`: a seed-phase budget in seconds, spent as
    /// `budget / (K * 3 s)` fully point-labeled images.
    pub seed_budget_seconds: Option<u64>,
    /// T, the number of acquisition cycles after the seed phase.
    pub cycles: usize,
    pub seed: u64,
    pub net: NetSpec,
    pub train: TrainConfig,
    /// I, MC-dropout samples per entropy map.
    pub mc_samples: usize,
    /// Pricing of per-pixel labels.
    pub cost_model: CostModel,
    /// Continue from the previous cycle's parameters instead of re-initializing.
    pub warm_start: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            dataset: DatasetSource::Synthetic(SyntheticConfig::default()),
            split: SplitSpec::default(),
            regions_per_image: 64,
            heuristic: Heuristic::Entropy,
            aggregation: Aggregation::Max,
            supervision: Supervision::Point,
            images_per_cycle: 5,
            regions_per_selected_image: 1,
            seed_images: None,
            seed_budget_seconds: None,
            cycles: 100,
            seed: 0,
            net: NetSpec::default(),
            train: TrainConfig::default(),
            mc_samples: crate::uncertainty::DEFAULT_MC_SAMPLES,
            cost_model: CostModel::Polygon,
            warm_start: true,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: 200 synthetic 64x64 slices, K=16, T=20, I=8.
    ///
    /// Lesions are faint (contrast 0.2) and small bright distractors appear
    /// about 1.5 times per slice, so intensity alone does not separate the
    /// classes.
    pub fn desk_preset(seed: u64) -> Self {
        Self {
            run_id: format!("desk-seed{seed}"),
            dataset: DatasetSource::Synthetic(SyntheticConfig {
                contrast: 0.2,
                distractors: 1.5,
                seed,
                ..SyntheticConfig::default()
            }),
            regions_per_image: 16,
            cycles: 20,
            seed,
            train: TrainConfig {
                learning_rate: 1e-3,
                max_epochs: 40,
                patience: Some(5),
                seed,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    /// The synthetic generator settings, if the dataset is synthetic.
    pub fn synthetic(&self) -> Option<&SyntheticConfig> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => Some(s),
            DatasetSource::Manifest(_) => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Number of images labeled in the seed phase.
    pub fn seed_image_count(&self) -> Result<usize> {
        match (self.seed_images, self.seed_budget_seconds) {
            (Some(_), Some(_)) => Err(Error::Config("set at most one of seed_images and seed_budget_seconds".into())),
            (Some(n), None) => Ok(n),
            (None, Some(b)) => {
                let per_image = self.regions_per_image as u64 * POINT_COST_MS / 1000;
                let n = (b / per_image) as usize;
                if n == 0 {
                    return Err(Error::Config(format!(
                        "seed budget {b} s buys no image at {per_image} s per image"
                    )));
                }
                Ok(n)
            }
            (None, None) => Ok(self.images_per_cycle),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("regions_per_image", self.regions_per_image),
            ("images_per_cycle", self.images_per_cycle),
            ("regions_per_selected_image", self.regions_per_selected_image),
            ("mc_samples", self.mc_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("run id `{}` is not a plain file name", self.run_id)));
        }
        self.seed_image_count()?;
        self.train.validate()
    }
}
