//! The three comparison designs: heuristic, region size, supervision scheme.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::acquisition::Heuristic;
use crate::error::{Error, Result};
use crate::evaluation::{curve_auc, CurvePoint};
use crate::predictor::Supervision;

use super::config::RunConfig;
use super::run::{run_prepared, PreparedData, RunOutcome};

fn write_csv<T: Serialize>(path: &PathBuf, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn with_seed(base: &RunConfig, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicSummaryRow {
    pub seed: u64,
    pub auc_random: f64,
    pub auc_entropy: f64,
    pub auc_delta: f64,
    pub final_dice_random: f64,
    pub final_dice_entropy: f64,
}

pub struct HeuristicsExperiment {
    pub random: Vec<RunOutcome>,
    pub entropy: Vec<RunOutcome>,
    pub summary: Vec<HeuristicSummaryRow>,
    pub summary_path: PathBuf,
}

/// Random vs Entropy under otherwise identical configs, one pair per seed.
pub fn experiment_heuristics(base: &RunConfig, seeds: &[u64]) -> Result<HeuristicsExperiment> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut exp = HeuristicsExperiment {
        random: Vec::new(),
        entropy: Vec::new(),
        summary: Vec::new(),
        summary_path: base.output_dir.join("heuristics_summary.csv"),
    };
    for &seed in seeds {
        let cfg = with_seed(base, seed);
        let data = PreparedData::load(&cfg)?;
        let mut outs = Vec::new();
        for h in [Heuristic::Random, Heuristic::Entropy] {
            let mut c = cfg.clone();
            c.heuristic = h;
            c.run_id = format!("{}-{h}-seed{seed}", base.run_id);
            outs.push(run_prepared(&c, &data)?);
        }
        let (e, r) = (outs.pop().expect("entropy run"), outs.pop().expect("random run"));
        let (ar, ae) = (curve_auc(&r.rows), curve_auc(&e.rows));
        exp.summary.push(HeuristicSummaryRow {
            seed,
            auc_random: ar,
            auc_entropy: ae,
            auc_delta: ae - ar,
            final_dice_random: r.final_dice(),
            final_dice_entropy: e.final_dice(),
        });
        exp.random.push(r);
        exp.entropy.push(e);
    }
    write_csv(&exp.summary_path, &exp.summary)?;
    Ok(exp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSizeSummaryRow {
    pub k: usize,
    pub seed: u64,
    pub seed_images: usize,
    pub seed_cost_seconds: f64,
    pub final_cost_seconds: f64,
    pub final_dice: f64,
    pub auc: f64,
}

pub struct RegionSizeExperiment {
    pub runs: Vec<(usize, RunOutcome)>,
    pub summary: Vec<RegionSizeSummaryRow>,
    pub summary_path: PathBuf,
}

/// One run per region count `k`, each seeded with the same budget in seconds.
pub fn experiment_region_size(base: &RunConfig, ks: &[usize], seeds: &[u64], seed_budget_seconds: u64) -> Result<RegionSizeExperiment> {
    if ks.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one k and one seed".into()));
    }
    let mut exp = RegionSizeExperiment {
        runs: Vec::new(),
        summary: Vec::new(),
        summary_path: base.output_dir.join("region_size_summary.csv"),
    };
    for &seed in seeds {
        for &k in ks {
            let mut cfg = with_seed(base, seed);
            cfg.regions_per_image = k;
            cfg.seed_images = None;
            cfg.seed_budget_seconds = Some(seed_budget_seconds);
            cfg.run_id = format!("{}-k{k}-seed{seed}", base.run_id);
            cfg.validate()?;
            let data = PreparedData::load(&cfg)?;
            let out = run_prepared(&cfg, &data)?;
            exp.summary.push(RegionSizeSummaryRow {
                k,
                seed,
                seed_images: cfg.seed_image_count()?,
                seed_cost_seconds: out.rows[0].cost_seconds,
                final_cost_seconds: out.rows.last().map_or(0.0, |r| r.cost_seconds),
                final_dice: out.final_dice(),
                auc: curve_auc(&out.rows),
            });
            exp.runs.push((k, out));
        }
    }
    write_csv(&exp.summary_path, &exp.summary)?;
    Ok(exp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRow {
    pub cost_seconds: f64,
    pub supervision: Supervision,
    pub seed: u64,
    pub cycle: usize,
    pub regions_labeled: usize,
    pub dice: f64,
}

pub struct SupervisionExperiment {
    pub point: Vec<RunOutcome>,
    pub per_pixel: Vec<RunOutcome>,
    pub comparison: Vec<SupervisionRow>,
    pub comparison_path: PathBuf,
}

/// Point-level vs per-pixel runs sharing seeds, compared on the cost axis.
pub fn experiment_supervision(base: &RunConfig, seeds: &[u64]) -> Result<SupervisionExperiment> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut exp = SupervisionExperiment {
        point: Vec::new(),
        per_pixel: Vec::new(),
        comparison: Vec::new(),
        comparison_path: base.output_dir.join("supervision_comparison.csv"),
    };
    for &seed in seeds {
        let cfg = with_seed(base, seed);
        let data = PreparedData::load(&cfg)?;
        for sup in [Supervision::Point, Supervision::PerPixel] {
            let mut c = cfg.clone();
            c.supervision = sup;
            c.run_id = format!("{}-{}-seed{seed}", base.run_id, supervision_tag(sup));
            let out = run_prepared(&c, &data)?;
            exp.comparison.extend(out.rows.iter().map(|r: &CurvePoint| SupervisionRow {
                cost_seconds: r.cost_seconds,
                supervision: sup,
                seed,
                cycle: r.cycle,
                regions_labeled: r.regions_labeled,
                dice: r.dice,
            }));
            match sup {
                Supervision::Point => exp.point.push(out),
                Supervision::PerPixel => exp.per_pixel.push(out),
            }
        }
    }
    exp.comparison.sort_by(|a, b| {
        a.cost_seconds
            .total_cmp(&b.cost_seconds)
            .then_with(|| a.seed.cmp(&b.seed))
            .then_with(|| supervision_tag(a.supervision).cmp(supervision_tag(b.supervision)))
            .then_with(|| a.cycle.cmp(&b.cycle))
    });
    write_csv(&exp.comparison_path, &exp.comparison)?;
    Ok(exp)
}

pub fn supervision_tag(s: Supervision) -> &'static str {
    match s {
        Supervision::Point => "point",
        Supervision::PerPixel => "per_pixel",
    }
}
