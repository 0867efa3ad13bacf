//! The active-learning state machine and selection-log replay.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    read_selection_log, score_regions, select, write_selection_log, Heuristic, ImageScores, PoolImage, SelectionLogEntry,
    Selection, SelectionRequest,
};
use crate::data_model::{
    build_grid, make_split, DatasetSplit, GroundTruthMask, ImageSlice, PartialLabelMask, RegionGrid, RegionRef, RegionState,
};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, dice, specificity, write_curve_csv, CurvePoint};
use crate::ingestion::Dataset;
use crate::oracle::{annotate_full_image, annotate_full_region, annotate_point, Annotation, BudgetLedger, CostModel, Stamp};
use crate::predictor::{
    predict_mask, save_checkpoint, train_cycle, AdamState, Checkpoint, Example, PredictorParams, Supervision, TrainReport,
};
use crate::seed;
use crate::uncertainty::image_entropy;

use super::config::RunConfig;

/// A loaded dataset with its split and region grid.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub grid: RegionGrid,
    index: HashMap<String, usize>,
}

impl PreparedData {
    pub fn new(dataset: Dataset, cfg: &RunConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let shape = dataset.entries[0].image.shape();
        if let Some(e) = dataset.entries.iter().find(|e| e.image.shape() != shape) {
            return Err(Error::Config(format!(
                "slice {} is {:?}, expected {:?} like the rest",
                e.image.id,
                e.image.shape(),
                shape
            )));
        }
        let grid = build_grid(shape.0, shape.1, cfg.regions_per_image).map_err(|e| Error::Config(e.to_string()))?;
        let split = make_split(&dataset.scans(), cfg.split.mode, cfg.split.sizes).map_err(|e| Error::Config(e.to_string()))?;
        let index: HashMap<String, usize> = dataset.entries.iter().enumerate().map(|(i, e)| (e.image.id.clone(), i)).collect();
        for id in split.train.iter().chain(&split.val).chain(&split.test) {
            if dataset.entries[index[id]].mask.is_none() {
                return Err(Error::Config(format!("slice {id} has no ground-truth mask")));
            }
        }
        Ok(Self {
            dataset,
            split,
            grid,
            index,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg.dataset.load()?, cfg)
    }

    pub fn image(&self, id: &str) -> Result<&ImageSlice> {
        self.index
            .get(id)
            .map(|&i| &self.dataset.entries[i].image)
            .ok_or_else(|| Error::invalid(format!("unknown image {id}")))
    }

    pub fn mask(&self, id: &str) -> Result<&GroundTruthMask> {
        self.index
            .get(id)
            .and_then(|&i| self.dataset.entries[i].mask.as_ref())
            .ok_or_else(|| Error::invalid(format!("no mask for image {id}")))
    }
}

/// Region states, accumulated labels and the ledger of the training pool.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelState {
    pub regions: BTreeMap<String, Vec<RegionState>>,
    pub labels: BTreeMap<String, PartialLabelMask>,
    pub ledger: BudgetLedger,
}

/// Image ids of the three pools.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Pools {
    /// Every region labeled.
    pub labeled: Vec<String>,
    /// Some regions labeled.
    pub partial: Vec<String>,
    /// No region labeled.
    pub unlabeled: Vec<String>,
}

impl LabelState {
    pub fn new(train_ids: &[String], grid: &RegionGrid) -> Self {
        let mut regions = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for id in train_ids {
            regions.insert(id.clone(), vec![RegionState::Unlabeled; grid.len()]);
            labels.insert(
                id.clone(),
                PartialLabelMask::unlabeled(id.clone(), grid.image_height, grid.image_width),
            );
        }
        Self {
            regions,
            labels,
            ledger: BudgetLedger::new(),
        }
    }

    pub fn regions_labeled(&self) -> usize {
        self.regions.values().flatten().filter(|s| s.is_labeled()).count()
    }

    pub fn total_regions(&self) -> usize {
        self.regions.values().map(Vec::len).sum()
    }

    pub fn pools(&self) -> Pools {
        let mut p = Pools::default();
        for (id, states) in &self.regions {
            let n = states.iter().filter(|s| s.is_labeled()).count();
            let dst = if n == states.len() {
                &mut p.labeled
            } else if n == 0 {
                &mut p.unlabeled
            } else {
                &mut p.partial
            };
            dst.push(id.clone());
        }
        p
    }

    /// Images that still have unlabeled regions, with their states.
    pub fn candidates(&self) -> Vec<PoolImage> {
        self.regions
            .iter()
            .filter(|(_, s)| s.contains(&RegionState::Unlabeled))
            .map(|(id, s)| PoolImage {
                image_id: id.clone(),
                states: s.clone(),
            })
            .collect()
    }

    /// Merge an annotation of one region (or, with `None`, the whole image).
    pub fn apply(&mut self, image_id: &str, region_index: Option<usize>, ann: Annotation) -> Result<()> {
        let states = self
            .regions
            .get_mut(image_id)
            .ok_or_else(|| Error::invalid(format!("image {image_id} is not in the training pool")))?;
        let indices: Vec<usize> = match region_index {
            Some(i) => vec![i],
            None => (0..states.len()).collect(),
        };
        for i in indices {
            let mut r = RegionRef {
                image_id: image_id.to_string(),
                region_index: i,
                state: states[i],
            };
            r.transition(ann.state)?;
            states[i] = r.state;
        }
        self.labels
            .get_mut(image_id)
            .expect("labels track regions")
            .merge(&ann.delta)?;
        self.ledger.extend(ann.actions);
        Ok(())
    }

    pub fn state_of(&self, image_id: &str, region_index: usize) -> Result<RegionState> {
        self.regions
            .get(image_id)
            .and_then(|s| s.get(region_index))
            .copied()
            .ok_or_else(|| Error::invalid(format!("no region {image_id}#{region_index} in the training pool")))
    }

    /// Label one region with the simulated oracle under `supervision`.
    pub fn annotate_region(
        &mut self,
        data: &PreparedData,
        supervision: Supervision,
        oracle_seed: u64,
        image_id: &str,
        region_index: usize,
        cycle: usize,
    ) -> Result<()> {
        let region = RegionRef {
            image_id: image_id.to_string(),
            region_index,
            state: self.state_of(image_id, region_index)?,
        };
        let stamp = Stamp {
            cycle,
            timestamp_ms: self.ledger.total_ms(),
        };
        let gt = data.mask(image_id)?;
        let ann = match supervision {
            Supervision::Point => annotate_point(&region, &data.grid, gt, oracle_seed, stamp)?,
            Supervision::PerPixel => annotate_full_region(&region, &data.grid, gt, stamp)?,
        };
        self.apply(image_id, Some(region_index), ann)
    }

    /// Per-pixel labels for a whole slice at the flat expert rate.
    pub fn annotate_whole_image(&mut self, data: &PreparedData, image_id: &str, cycle: usize) -> Result<()> {
        let stamp = Stamp {
            cycle,
            timestamp_ms: self.ledger.total_ms(),
        };
        let ann = annotate_full_image(data.mask(image_id)?, CostModel::ExpertSlice, stamp)?;
        self.apply(image_id, None, ann)
    }
}

fn whole_slice_seeding(cfg: &RunConfig) -> bool {
    cfg.supervision == Supervision::PerPixel && cfg.cost_model == CostModel::ExpertSlice
}

/// Re-apply a selection log to a fresh label state.
///
/// Seed-phase entries (cycle 0) of a whole-slice per-pixel run are applied
/// once per image.
pub fn replay_selections(cfg: &RunConfig, data: &PreparedData, entries: &[SelectionLogEntry]) -> Result<LabelState> {
    let mut state = LabelState::new(&data.split.train, &data.grid);
    let oracle_seed = oracle_seed(cfg);
    for e in entries {
        if e.cycle == 0 && whole_slice_seeding(cfg) {
            if !state.regions[&e.image_id].iter().any(|s| s.is_labeled()) {
                state.annotate_whole_image(data, &e.image_id, 0)?;
            }
            continue;
        }
        state.annotate_region(data, cfg.supervision, oracle_seed, &e.image_id, e.region_index, e.cycle)?;
    }
    Ok(state)
}

pub fn oracle_seed(cfg: &RunConfig) -> u64 {
    seed::derive(cfg.seed, &[seed::tag("oracle")])
}

/// Per-cycle diagnostics beyond the curve columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleLog {
    pub cycle: usize,
    pub cost_seconds: f64,
    pub regions_labeled: usize,
    pub val_dice: Option<f64>,
    pub test_dice: f64,
    pub test_specificity: f64,
    pub train_images: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub selected: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub curve_path: PathBuf,
    pub rows: Vec<CurvePoint>,
    pub cycles: Vec<CycleLog>,
    pub selections: Vec<SelectionLogEntry>,
    pub state: LabelState,
    pub params: PredictorParams,
}

impl RunOutcome {
    pub fn final_dice(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.dice)
    }
}

/// Load the dataset, run every cycle and write the run artifacts.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = PreparedData::load(cfg)?;
    run_prepared(cfg, &data)
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    data: &'a PreparedData,
    state: LabelState,
    params: PredictorParams,
    optimizer: Option<AdamState>,
    rows: Vec<CurvePoint>,
    cycles: Vec<CycleLog>,
    selections: Vec<SelectionLogEntry>,
}

impl Runner<'_> {
    fn log_selection(&mut self, cycle: usize, image_id: &str, region_index: usize, score: Option<f64>, seed: u64) {
        self.selections.push(SelectionLogEntry {
            cycle,
            heuristic: self.cfg.heuristic,
            image_id: image_id.to_string(),
            region_index,
            score,
            aggregation: self.cfg.aggregation,
            seed,
        });
    }

    fn seed_phase(&mut self) -> Result<()> {
        let (ids, seed_val) = seed_images(self.cfg, self.data)?;
        let oracle = oracle_seed(self.cfg);
        for id in ids {
            if whole_slice_seeding(self.cfg) {
                self.state.annotate_whole_image(self.data, &id, 0)?;
            }
            for r in 0..self.data.grid.len() {
                if !whole_slice_seeding(self.cfg) {
                    self.state.annotate_region(self.data, self.cfg.supervision, oracle, &id, r, 0)?;
                }
                self.log_selection(0, &id, r, None, seed_val);
            }
        }
        Ok(())
    }

    fn train_and_evaluate(&mut self, cycle: usize, selected: usize) -> Result<()> {
        let start = if self.cfg.warm_start || cycle == 0 {
            self.params.clone()
        } else {
            init_params(self.cfg)?
        };
        let opt = if self.cfg.warm_start { self.optimizer.take() } else { None };
        let (report, train_images) = train_on_labels(self.cfg, self.data, &self.state, start, opt, cycle)?;
        self.params = report.params;
        self.optimizer = Some(report.optimizer);

        let (d, spec) = evaluate_on_test(self.data, &self.params)?;
        let cost = self.state.ledger.total_seconds();
        let labeled = self.state.regions_labeled();
        self.rows.push(CurvePoint {
            cycle,
            cost_seconds: cost,
            regions_labeled: labeled,
            dice: d,
            specificity: spec,
            heuristic: self.cfg.heuristic.to_string(),
            aggregation: self.cfg.aggregation.to_string(),
            seed: self.cfg.seed,
        });
        self.cycles.push(CycleLog {
            cycle,
            cost_seconds: cost,
            regions_labeled: labeled,
            val_dice: report.best_val_dice,
            test_dice: d,
            test_specificity: spec,
            train_images,
            epochs_run: report.epoch_losses.len(),
            best_epoch: report.best_epoch,
            selected,
        });
        Ok(())
    }

    fn cycle(&mut self, t: usize) -> Result<bool> {
        let candidates = self.state.candidates();
        if candidates.is_empty() {
            return Ok(false);
        }
        let (picks, sel_seed) = select_for_cycle(self.cfg, self.data, &self.params, &candidates, t)?;
        if picks.is_empty() {
            return Ok(false);
        }
        let oracle = oracle_seed(self.cfg);
        for p in &picks {
            self.state
                .annotate_region(self.data, self.cfg.supervision, oracle, &p.region.image_id, p.region.region_index, t)?;
            self.log_selection(t, &p.region.image_id, p.region.region_index, p.score, sel_seed);
        }
        self.train_and_evaluate(t, picks.len())?;
        Ok(true)
    }
}

/// Freshly initialized parameters for `cfg`.
pub fn init_params(cfg: &RunConfig) -> Result<PredictorParams> {
    PredictorParams::init(&cfg.net, seed::derive(cfg.seed, &[seed::tag("init")]))
}

/// The seed-phase images (sorted) and the seed value logged with them.
pub fn seed_images(cfg: &RunConfig, data: &PreparedData) -> Result<(Vec<String>, u64)> {
    let n = cfg.seed_image_count()?;
    let train = &data.split.train;
    if n > train.len() {
        return Err(Error::Config(format!(
            "{n} seed images requested but the training split has {}",
            train.len()
        )));
    }
    let seed_val = seed::derive(cfg.seed, &[seed::tag("seed-images")]);
    let mut rng = seed::rng(seed_val, &[]);
    let mut picks: Vec<usize> = index::sample(&mut rng, train.len(), n).into_vec();
    picks.sort_unstable();
    Ok((picks.into_iter().map(|i| train[i].clone()).collect(), seed_val))
}

/// Train one cycle on every image that has labels. Returns the report and
/// the number of training images used.
pub fn train_on_labels(
    cfg: &RunConfig,
    data: &PreparedData,
    state: &LabelState,
    start: PredictorParams,
    optimizer: Option<AdamState>,
    cycle: usize,
) -> Result<(TrainReport, usize)> {
    let examples: Vec<Example<'_>> = state
        .labels
        .iter()
        .filter(|(_, l)| l.labeled_count() > 0)
        .map(|(id, l)| {
            Ok(Example {
                image: data.image(id)?,
                labels: l,
                loss: cfg.supervision.loss(),
            })
        })
        .collect::<Result<_>>()?;
    let val: Vec<(&ImageSlice, &GroundTruthMask)> = data
        .split
        .val
        .iter()
        .map(|id| Ok((data.image(id)?, data.mask(id)?)))
        .collect::<Result<_>>()?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed::derive(cfg.seed, &[seed::tag("train"), cfg.train.seed, cycle as u64]);
    let n = examples.len();
    Ok((train_cycle(start, optimizer, &examples, &val, &tcfg)?, n))
}

/// Dice and specificity of the argmax predictions over the test split.
pub fn evaluate_on_test(data: &PreparedData, params: &PredictorParams) -> Result<(f64, f64)> {
    let test = &data.split.test;
    let preds: Vec<_> = test
        .par_iter()
        .map(|id| predict_mask(params, data.image(id)?))
        .collect::<Result<_>>()?;
    let gts: Vec<_> = test
        .iter()
        .map(|id| Ok(data.mask(id)?.classes().clone()))
        .collect::<Result<_>>()?;
    let counts = confusion(&preds, &gts)?;
    Ok((dice(&counts), specificity(&counts)?))
}

/// Seed of the MC-dropout samples for one image in one cycle.
pub fn mc_seed(cfg: &RunConfig, cycle: usize, image_id: &str) -> u64 {
    let base = seed::derive(cfg.seed, &[seed::tag("mc"), cycle as u64]);
    seed::derive(base, &[seed::tag(image_id)])
}

/// Region entropy scores of every candidate image.
pub fn entropy_scores(
    cfg: &RunConfig,
    data: &PreparedData,
    params: &PredictorParams,
    candidates: &[PoolImage],
    cycle: usize,
) -> Result<Vec<ImageScores>> {
    candidates
        .par_iter()
        .map(|p| {
            let img = data.image(&p.image_id)?;
            let e = image_entropy(params, img, cfg.mc_samples, mc_seed(cfg, cycle, &p.image_id))?;
            Ok(ImageScores {
                image_id: p.image_id.clone(),
                regions: score_regions(&e, &data.grid, &p.states, cfg.aggregation)?,
            })
        })
        .collect()
}

/// Pick the regions to label in cycle `cycle`. Returns the picks and the
/// selection seed.
pub fn select_for_cycle(
    cfg: &RunConfig,
    data: &PreparedData,
    params: &PredictorParams,
    candidates: &[PoolImage],
    cycle: usize,
) -> Result<(Vec<Selection>, u64)> {
    let sel_seed = seed::derive(cfg.seed, &[seed::tag("select"), cycle as u64]);
    let req = SelectionRequest {
        heuristic: cfg.heuristic,
        images_per_cycle: cfg.images_per_cycle,
        regions_per_image: cfg.regions_per_selected_image,
        seed: sel_seed,
    };
    let scores = match cfg.heuristic {
        Heuristic::Entropy => Some(entropy_scores(cfg, data, params, candidates, cycle)?),
        Heuristic::Random => None,
    };
    Ok((select(&req, candidates, scores.as_deref())?, sel_seed))
}

/// Run on an already prepared dataset (lets experiments share one load).
pub fn run_prepared(cfg: &RunConfig, data: &PreparedData) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.train.patience.is_some() && data.split.val.is_empty() {
        return Err(Error::Config("early stopping needs a validation split".into()));
    }
    let mut runner = Runner {
        cfg,
        data,
        state: LabelState::new(&data.split.train, &data.grid),
        params: init_params(cfg)?,
        optimizer: None,
        rows: Vec::new(),
        cycles: Vec::new(),
        selections: Vec::new(),
    };
    runner.seed_phase()?;
    runner.train_and_evaluate(0, 0)?;
    for t in 1..=cfg.cycles {
        if !runner.cycle(t)? {
            break;
        }
    }
    let outcome = RunOutcome {
        run_dir: cfg.output_dir.join(&cfg.run_id),
        curve_path: cfg.output_dir.join("curves").join(format!("{}.csv", cfg.run_id)),
        rows: runner.rows,
        cycles: runner.cycles,
        selections: runner.selections,
        state: runner.state,
        params: runner.params,
    };
    write_outputs(cfg, &outcome, runner.optimizer.as_ref())?;
    Ok(outcome)
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_outputs(cfg: &RunConfig, out: &RunOutcome, optimizer: Option<&AdamState>) -> Result<()> {
    let curves = cfg.output_dir.join("curves");
    for d in [&curves, &out.run_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    write_curve_csv(create_file(&out.curve_path)?, &out.rows)?;
    let dir = &out.run_dir;
    let mut w = create_file(&dir.join("selection.jsonl"))?;
    write_selection_log(&mut w, &out.selections)?;
    w.flush().map_err(|e| Error::io(dir, e))?;
    let mut w = create_file(&dir.join("ledger.jsonl"))?;
    out.state.ledger.write_jsonl(&mut w)?;
    w.flush().map_err(|e| Error::io(dir, e))?;
    let mut w = create_file(&dir.join("cycles.jsonl"))?;
    for c in &out.cycles {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n").map_err(|e| Error::io(dir, e))?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&dir.join("checkpoint.json"), &Checkpoint::new(&out.params, optimizer, cfg.seed))?;
    cfg.save(&dir.join("config.json"))
}

/// Result of replaying a run directory's selection log.
#[derive(Clone, Debug)]
pub struct ReplayReport {
    pub state: LabelState,
    /// Whether the rebuilt ledger equals the stored `ledger.jsonl`, if one exists.
    pub ledger_matches: Option<bool>,
}

/// Replay `selection.jsonl` using the `config.json` stored next to it.
pub fn replay(log_path: &Path) -> Result<ReplayReport> {
    let dir = log_path.parent().unwrap_or_else(|| Path::new("."));
    let cfg = RunConfig::load(&dir.join("config.json"))?;
    let data = PreparedData::load(&cfg)?;
    let f = File::open(log_path).map_err(|e| Error::io(log_path, e))?;
    let entries = read_selection_log(BufReader::new(f))?;
    let state = replay_selections(&cfg, &data, &entries)?;
    let stored = dir.join("ledger.jsonl");
    let ledger_matches = if stored.exists() {
        Some(BudgetLedger::load(&stored)? == state.ledger)
    } else {
        None
    };
    Ok(ReplayReport {
        state,
        ledger_matches,
    })
}
