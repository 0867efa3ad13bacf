//! Simulated annotator, the annotation cost model and the budget ledger.
//!
//! Costs are integer milliseconds so ledger sums are exact.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contour::{components_8, polygon_vertex_count, DEFAULT_EPSILON};
use crate::data_model::{GroundTruthMask, PartialLabelMask, Raster, Rect, RegionGrid, RegionRef, RegionState};
use crate::error::{Error, Result};
use crate::seed;

/// One click or tag.
pub const POINT_COST_MS: u64 = 3_000;
/// Flat price of an expert labeling a whole slice.
pub const EXPERT_SLICE_COST_MS: u64 = 96_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    PointLabel,
    BackgroundTag,
    RegionPixelLabel,
    FullSlicePixelLabel,
}

/// What the annotator produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Point { row: usize, col: usize },
    /// Every pixel of `rect` set to background.
    Background { rect: Rect },
    /// Ground-truth classes copied over `rect`; `vertices` is the polygon total charged.
    Pixels { rect: Rect, vertices: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationAction {
    pub kind: ActionKind,
    pub image_id: String,
    /// `None` for whole-slice actions.
    pub region_index: Option<usize>,
    pub payload: Payload,
    pub cost_ms: u64,
    pub cycle: usize,
    pub timestamp_ms: u64,
}

impl AnnotationAction {
    pub fn cost_seconds(&self) -> f64 {
        self.cost_ms as f64 / 1000.0
    }
}

/// When and in which cycle an annotation happens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stamp {
    pub cycle: usize,
    pub timestamp_ms: u64,
}

/// Labels and actions produced for one target.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    /// Same shape as the image; only pixels inside the target are set.
    pub delta: PartialLabelMask,
    pub state: RegionState,
    pub actions: Vec<AnnotationAction>,
}

/// How per-pixel labeling is priced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// 3 s per simplified-polygon vertex of each infected component.
    #[default]
    Polygon,
    /// Flat 96 s per whole slice.
    ExpertSlice,
}

fn region_rect(region: &RegionRef, grid: &RegionGrid, gt: &GroundTruthMask) -> Result<Rect> {
    if region.state.is_labeled() {
        return Err(Error::InvalidState(format!(
            "region {}#{} is already {:?}",
            region.image_id, region.region_index, region.state
        )));
    }
    if gt.shape() != (grid.image_height, grid.image_width) {
        return Err(Error::invalid(format!(
            "ground truth {:?} does not match the grid over {}x{}",
            gt.shape(),
            grid.image_height,
            grid.image_width
        )));
    }
    grid.region_bounds(region.region_index)
}

/// Infected components of `gt` clipped to `rect`, in image coordinates.
fn clipped_components(gt: &GroundTruthMask, rect: Rect) -> Vec<Vec<(usize, usize)>> {
    let crop = gt.classes().crop(rect);
    components_8(&crop)
        .into_iter()
        .map(|c| c.into_iter().map(|(r, cc)| (r + rect.row0, cc + rect.col0)).collect())
        .collect()
}

fn background(image_id: &str, region_index: Option<usize>, rect: Rect, delta: &mut PartialLabelMask, stamp: Stamp) -> AnnotationAction {
    for (r, c) in rect.pixels() {
        delta.set(r, c, 0);
    }
    AnnotationAction {
        kind: ActionKind::BackgroundTag,
        image_id: image_id.to_string(),
        region_index,
        payload: Payload::Background { rect },
        cost_ms: POINT_COST_MS,
        cycle: stamp.cycle,
        timestamp_ms: stamp.timestamp_ms,
    }
}

/// Point-level labeling of one region: one random click per infected
/// component, or a background tag when the region holds no infection.
///
/// The click positions depend only on `seed`, the image id and the region
/// index, so replaying a selection reproduces them exactly.
pub fn annotate_point(region: &RegionRef, grid: &RegionGrid, gt: &GroundTruthMask, seed: u64, stamp: Stamp) -> Result<Annotation> {
    let rect = region_rect(region, grid, gt)?;
    let (h, w) = gt.shape();
    let mut delta = PartialLabelMask::unlabeled(region.image_id.clone(), h, w);
    let comps = clipped_components(gt, rect);
    if comps.is_empty() {
        let action = background(&region.image_id, Some(region.region_index), rect, &mut delta, stamp);
        return Ok(Annotation {
            delta,
            state: RegionState::BackgroundTagged,
            actions: vec![action],
        });
    }
    let mut rng = seed::rng(
        seed,
        &[seed::tag("click"), seed::tag(&region.image_id), region.region_index as u64],
    );
    let mut actions = Vec::with_capacity(comps.len());
    for comp in &comps {
        let (row, col) = comp[rng.random_range(0..comp.len())];
        delta.set(row, col, 1);
        actions.push(AnnotationAction {
            kind: ActionKind::PointLabel,
            image_id: region.image_id.clone(),
            region_index: Some(region.region_index),
            payload: Payload::Point { row, col },
            cost_ms: POINT_COST_MS,
            cycle: stamp.cycle,
            timestamp_ms: stamp.timestamp_ms,
        });
    }
    Ok(Annotation {
        delta,
        state: RegionState::PointLabeled,
        actions,
    })
}

/// Total simplified-polygon vertices of the infected components inside `rect`.
pub fn polygon_vertices_in(gt: &GroundTruthMask, rect: Rect) -> Result<usize> {
    let mut total = 0;
    for comp in clipped_components(gt, rect) {
        let mut m = Raster::filled(rect.height, rect.width, 0u8);
        for (r, c) in comp {
            m.set(r - rect.row0, c - rect.col0, 1);
        }
        total += polygon_vertex_count(&m, DEFAULT_EPSILON)?;
    }
    Ok(total)
}

fn full_labels(gt: &GroundTruthMask, rect: Rect, delta: &mut PartialLabelMask) {
    for (r, c) in rect.pixels() {
        delta.set(r, c, gt.classes().get(r, c) as i8);
    }
}

/// Per-pixel labeling of one region, priced by polygon vertices
/// (3 s for a background-only region).
pub fn annotate_full_region(region: &RegionRef, grid: &RegionGrid, gt: &GroundTruthMask, stamp: Stamp) -> Result<Annotation> {
    let rect = region_rect(region, grid, gt)?;
    let (h, w) = gt.shape();
    let mut delta = PartialLabelMask::unlabeled(region.image_id.clone(), h, w);
    let vertices = polygon_vertices_in(gt, rect)?;
    if vertices == 0 {
        let action = background(&region.image_id, Some(region.region_index), rect, &mut delta, stamp);
        return Ok(Annotation {
            delta,
            state: RegionState::PixelLabeled,
            actions: vec![action],
        });
    }
    full_labels(gt, rect, &mut delta);
    Ok(Annotation {
        delta,
        state: RegionState::PixelLabeled,
        actions: vec![AnnotationAction {
            kind: ActionKind::RegionPixelLabel,
            image_id: region.image_id.clone(),
            region_index: Some(region.region_index),
            payload: Payload::Pixels { rect, vertices },
            cost_ms: POINT_COST_MS * vertices as u64,
            cycle: stamp.cycle,
            timestamp_ms: stamp.timestamp_ms,
        }],
    })
}

/// Per-pixel labeling of a whole slice.
pub fn annotate_full_image(gt: &GroundTruthMask, model: CostModel, stamp: Stamp) -> Result<Annotation> {
    let (h, w) = gt.shape();
    let rect = Rect {
        row0: 0,
        col0: 0,
        height: h,
        width: w,
    };
    let mut delta = PartialLabelMask::unlabeled(gt.image_id.clone(), h, w);
    full_labels(gt, rect, &mut delta);
    let vertices = polygon_vertices_in(gt, rect)?;
    let cost_ms = match model {
        CostModel::ExpertSlice => EXPERT_SLICE_COST_MS,
        CostModel::Polygon => POINT_COST_MS * vertices.max(1) as u64,
    };
    Ok(Annotation {
        delta,
        state: RegionState::PixelLabeled,
        actions: vec![AnnotationAction {
            kind: ActionKind::FullSlicePixelLabel,
            image_id: gt.image_id.clone(),
            region_index: None,
            payload: Payload::Pixels { rect, vertices },
            cost_ms,
            cycle: stamp.cycle,
            timestamp_ms: stamp.timestamp_ms,
        }],
    })
}

/// What a human annotator submitted for one region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanLabel {
    /// One click per visible infected component, in slice coordinates.
    Points(Vec<(usize, usize)>),
    Background,
}

/// Apply a human label to one region: points mark infected pixels at 3 s
/// each, a background tag clears the whole region for 3 s.
pub fn annotate_human(
    image_id: &str,
    region_index: usize,
    grid: &RegionGrid,
    label: &HumanLabel,
    stamp: Stamp,
) -> Result<Annotation> {
    let rect = grid.region_bounds(region_index)?;
    let mut delta = PartialLabelMask::unlabeled(image_id, grid.image_height, grid.image_width);
    match label {
        HumanLabel::Background => {
            let action = background(image_id, Some(region_index), rect, &mut delta, stamp);
            Ok(Annotation {
                delta,
                state: RegionState::BackgroundTagged,
                actions: vec![action],
            })
        }
        HumanLabel::Points(points) => {
            if points.is_empty() {
                return Err(Error::invalid("a point label needs at least one point"));
            }
            let mut actions = Vec::with_capacity(points.len());
            for &(row, col) in points {
                if !rect.contains(row, col) {
                    return Err(Error::invalid(format!(
                        "point ({row}, {col}) is outside region {region_index} {rect:?}"
                    )));
                }
                delta.set(row, col, 1);
                actions.push(AnnotationAction {
                    kind: ActionKind::PointLabel,
                    image_id: image_id.to_string(),
                    region_index: Some(region_index),
                    payload: Payload::Point { row, col },
                    cost_ms: POINT_COST_MS,
                    cycle: stamp.cycle,
                    timestamp_ms: stamp.timestamp_ms,
                });
            }
            Ok(Annotation {
                delta,
                state: RegionState::PointLabeled,
                actions,
            })
        }
    }
}

/// `initial_images * seconds_per_point * regions_per_image + cycles * regions_per_cycle * seconds_per_point`.
pub fn scenario_cost(initial_images: u64, regions_per_image: u64, cycles: u64, regions_per_cycle: u64, seconds_per_point: u64) -> u64 {
    initial_images * seconds_per_point * regions_per_image + cycles * regions_per_cycle * seconds_per_point
}

/// Append-only record of annotation actions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BudgetLedger {
    actions: Vec<AnnotationAction>,
    total_ms: u64,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, action: AnnotationAction) {
        self.total_ms += action.cost_ms;
        self.actions.push(action);
    }

    pub fn extend(&mut self, actions: impl IntoIterator<Item = AnnotationAction>) {
        for a in actions {
            self.record(a);
        }
    }

    pub fn actions(&self) -> &[AnnotationAction] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_ms(&self) -> u64 {
        self.total_ms
    }

    pub fn total_seconds(&self) -> f64 {
        self.total_ms as f64 / 1000.0
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for a in &self.actions {
            serde_json::to_writer(&mut out, a)?;
            out.write_all(b"\n").map_err(|e| Error::io("<ledger>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut ledger = Self::new();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<ledger>", e))?;
            if !line.trim().is_empty() {
                ledger.record(serde_json::from_str(&line)?);
            }
        }
        Ok(ledger)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(&mut f)?;
        f.sync_all().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(f))
    }

    /// Append actions to a ledger file and flush them to disk.
    pub fn append_to_file(path: &Path, actions: &[AnnotationAction]) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        for a in actions {
            serde_json::to_writer(&mut buf, a)?;
            buf.push(b'\n');
        }
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        f.sync_data().map_err(|e| Error::io(path, e))
    }
}

/// Sum of action costs in seconds.
pub fn ledger_total(ledger: &BudgetLedger) -> f64 {
    ledger.total_seconds()
}
