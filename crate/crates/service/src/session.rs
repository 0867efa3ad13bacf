//! One annotation session: durable logs, in-memory state and the training job.
//!
//! Layout of a session directory:
//!
//! ```text
//! session.json     id, manifest path, run config
//! labels.jsonl     every accepted label, appended and synced before the reply
//! ledger.jsonl     the matching ledger actions, appended the same way
//! queue.json       the regions currently offered to the annotator
//! curve.csv        one row per completed training cycle
//! checkpoint.json  model and optimizer after the last cycle
//! status.json      job status (a persisted failure reason survives restarts)
//! heatmaps/        entropy PNGs of the queued images
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use regal::acquisition::{Heuristic, Selection};
use regal::data_model::{Rect, RegionState};
use regal::evaluation::{read_curve_csv, write_curve_csv, CurvePoint};
use regal::ingestion::load_manifest;
use regal::oracle::{annotate_human, ActionKind, BudgetLedger, HumanLabel, Stamp};
use regal::orchestrator::{
    evaluate_on_test, init_params, mc_seed, seed_images, select_for_cycle, train_on_labels, DatasetSource, LabelState,
    PreparedData, RunConfig,
};
use regal::predictor::{load_checkpoint, save_checkpoint, AdamState, Checkpoint, PredictorParams, Supervision};
use regal::uncertainty::image_entropy;

/// Errors surfaced to HTTP clients, each mapping to one status code.
#[derive(Debug)]
pub enum SessionError {
    NotFound(String),
    Conflict(String),
    Unprocessable(String),
    BadRequest(String),
    Internal(String),
}

impl std::fmt::Display for SessionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SessionError::NotFound(m)
            | SessionError::Conflict(m)
            | SessionError::Unprocessable(m)
            | SessionError::BadRequest(m)
            | SessionError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for SessionError {}

impl From<regal::Error> for SessionError {
    fn from(e: regal::Error) -> Self {
        match e {
            regal::Error::Config(m) => SessionError::BadRequest(m),
            regal::Error::InvalidArgument(m) => SessionError::Unprocessable(m),
            regal::Error::InvalidState(m) => SessionError::Conflict(m),
            other => SessionError::Internal(other.to_string()),
        }
    }
}

pub type SessionResult<T> = Result<T, SessionError>;

fn io_err(path: &Path, e: std::io::Error) -> SessionError {
    SessionError::Internal(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub manifest: PathBuf,
    pub config: RunConfig,
}

/// A durable record of one accepted label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub cycle: usize,
    pub image_id: String,
    pub region_index: usize,
    pub label: HumanLabel,
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub image_id: String,
    pub region_index: usize,
    pub rect: Rect,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Queue {
    /// Labeling round the queue belongs to; labels are stamped with it.
    pub cycle: usize,
    pub entries: Vec<QueueEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobStatus {
    Idle,
    Training { stage: String },
    Failed { reason: String },
}

/// Read-only view served by the query endpoints.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub id: String,
    pub config: RunConfig,
    pub data: Arc<PreparedData>,
    pub cycle: usize,
    pub budget_seconds: f64,
    pub labeled_regions: usize,
    /// Distinct regions touched by point and background actions in the ledger.
    pub ledger_regions: usize,
    pub val_dice: Option<f64>,
    pub job: JobStatus,
    pub queue: Vec<(QueueEntry, RegionState)>,
    pub rows: Vec<CurvePoint>,
    pub heatmaps: Arc<BTreeMap<String, Vec<u8>>>,
}

/// Mutable session state. Callers serialize access to it.
pub struct SessionCore {
    pub dir: PathBuf,
    pub meta: SessionMeta,
    pub data: Arc<PreparedData>,
    pub state: LabelState,
    pub params: PredictorParams,
    pub optimizer: Option<AdamState>,
    pub rows: Vec<CurvePoint>,
    pub val_dice: Option<f64>,
    pub queue: Queue,
    pub job: JobStatus,
    pub heatmaps: Arc<BTreeMap<String, Vec<u8>>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> SessionResult<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> SessionResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| SessionError::Internal(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> SessionResult<T> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| SessionError::Internal(format!("{}: {e}", path.display())))
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> SessionResult<()> {
    let mut line = serde_json::to_vec(value).map_err(|e| SessionError::Internal(e.to_string()))?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    f.write_all(&line).map_err(|e| io_err(path, e))?;
    f.sync_all().map_err(|e| io_err(path, e))
}

fn read_events(path: &Path) -> SessionResult<Vec<LabelEvent>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(ev) => out.push(ev),
            // a torn final line from a crash mid-append was never acknowledged
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(SessionError::Internal(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

fn queue_entries(data: &PreparedData, picks: impl IntoIterator<Item = (String, usize, Option<f64>)>) -> SessionResult<Vec<QueueEntry>> {
    picks
        .into_iter()
        .map(|(image_id, region_index, score)| {
            Ok(QueueEntry {
                rect: data.grid.region_bounds(region_index)?,
                image_id,
                region_index,
                score,
            })
        })
        .collect()
}

impl SessionCore {
    /// Create a new session directory under `root` with the seed-phase queue.
    pub fn create(root: &Path, id: &str, manifest: &Path, mut config: RunConfig) -> SessionResult<Self> {
        if !manifest.exists() {
            return Err(SessionError::NotFound(format!("manifest {} not found", manifest.display())));
        }
        if config.supervision != Supervision::Point {
            return Err(SessionError::BadRequest("human sessions use point supervision".into()));
        }
        config.dataset = DatasetSource::Manifest(manifest.to_path_buf());
        config.run_id = id.to_string();
        config.validate()?;
        let (_, dataset) = load_manifest(manifest)?;
        let data = PreparedData::new(dataset, &config)?;
        if config.train.patience.is_some() && data.split.val.is_empty() {
            return Err(SessionError::BadRequest("early stopping needs a validation split".into()));
        }
        let dir = root.join(id);
        fs::create_dir_all(dir.join("heatmaps")).map_err(|e| io_err(&dir, e))?;
        let meta = SessionMeta {
            id: id.to_string(),
            manifest: manifest.to_path_buf(),
            config,
        };
        let (ids, _) = seed_images(&meta.config, &data)?;
        let picks = ids
            .into_iter()
            .flat_map(|id| (0..data.grid.len()).map(move |r| (id.clone(), r, None)));
        let queue = Queue {
            cycle: 0,
            entries: queue_entries(&data, picks)?,
        };
        let core = Self {
            state: LabelState::new(&data.split.train, &data.grid),
            params: init_params(&meta.config)?,
            optimizer: None,
            rows: Vec::new(),
            val_dice: None,
            queue,
            job: JobStatus::Idle,
            heatmaps: Arc::default(),
            data: Arc::new(data),
            meta,
            dir,
        };
        write_json(&core.dir.join("session.json"), &core.meta)?;
        write_json(&core.dir.join("queue.json"), &core.queue)?;
        write_json(&core.dir.join("status.json"), &core.job)?;
        core.write_curve()?;
        Ok(core)
    }

    /// Rebuild a session from its directory by replaying the label log.
    pub fn open(dir: &Path) -> SessionResult<Self> {
        let meta: SessionMeta = read_json(&dir.join("session.json"))?;
        let (_, dataset) = load_manifest(&meta.manifest)?;
        let data = PreparedData::new(dataset, &meta.config)?;
        let mut state = LabelState::new(&data.split.train, &data.grid);
        for ev in read_events(&dir.join("labels.jsonl"))? {
            apply_event(&mut state, &data, &ev)?;
        }
        // the ledger file is derived from the label log; repair any torn tail
        let mut buf = Vec::new();
        state.ledger.write_jsonl(&mut buf)?;
        write_atomic(&dir.join("ledger.jsonl"), &buf)?;
        let ckpt_path = dir.join("checkpoint.json");
        let (params, optimizer) = if ckpt_path.exists() {
            let ckpt = load_checkpoint(&ckpt_path)?;
            (ckpt.params()?, ckpt.optimizer)
        } else {
            (init_params(&meta.config)?, None)
        };
        let curve = dir.join("curve.csv");
        let rows = read_curve_csv(File::open(&curve).map_err(|e| io_err(&curve, e))?)?;
        let queue: Queue = read_json(&dir.join("queue.json"))?;
        let job = match read_json::<JobStatus>(&dir.join("status.json"))? {
            // the job died with the previous process; its labels are still here
            JobStatus::Training { .. } => JobStatus::Idle,
            other => other,
        };
        let mut heatmaps = BTreeMap::new();
        for e in &queue.entries {
            let p = dir.join("heatmaps").join(format!("{}.png", e.image_id));
            if let Ok(bytes) = fs::read(&p) {
                heatmaps.insert(e.image_id.clone(), bytes);
            }
        }
        let val_dice = read_val_dice(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            data: Arc::new(data),
            state,
            params,
            optimizer,
            rows,
            val_dice,
            queue,
            job,
            heatmaps: Arc::new(heatmaps),
        })
    }

    pub fn cycle(&self) -> usize {
        self.rows.len()
    }

    fn write_curve(&self) -> SessionResult<()> {
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &self.rows)?;
        write_atomic(&self.dir.join("curve.csv"), &buf)
    }

    fn set_job(&mut self, job: JobStatus) -> SessionResult<()> {
        self.job = job;
        write_json(&self.dir.join("status.json"), &self.job)
    }

    pub fn snapshot(&self) -> Snapshot {
        let ledger_regions: BTreeSet<(&str, usize)> = self
            .state
            .ledger
            .actions()
            .iter()
            .filter(|a| matches!(a.kind, ActionKind::PointLabel | ActionKind::BackgroundTag))
            .filter_map(|a| a.region_index.map(|r| (a.image_id.as_str(), r)))
            .collect();
        Snapshot {
            id: self.meta.id.clone(),
            config: self.meta.config.clone(),
            data: Arc::clone(&self.data),
            cycle: self.cycle(),
            budget_seconds: self.state.ledger.total_seconds(),
            labeled_regions: self.state.regions_labeled(),
            ledger_regions: ledger_regions.len(),
            val_dice: self.val_dice,
            job: self.job.clone(),
            queue: self
                .queue
                .entries
                .iter()
                .map(|e| {
                    let s = self.state.state_of(&e.image_id, e.region_index).unwrap_or(RegionState::Unlabeled);
                    (e.clone(), s)
                })
                .collect(),
            rows: self.rows.clone(),
            heatmaps: Arc::clone(&self.heatmaps),
        }
    }

    /// Accept one label. The event is on disk before this returns `Ok`.
    pub fn label(&mut self, image_id: &str, region_index: usize, label: HumanLabel) -> SessionResult<RegionState> {
        if matches!(self.job, JobStatus::Training { .. }) {
            return Err(SessionError::Conflict("training is running; the queue is read-only".into()));
        }
        let current = self
            .state
            .state_of(image_id, region_index)
            .map_err(|_| SessionError::NotFound(format!("no region {image_id}#{region_index} in the training pool")))?;
        if current.is_labeled() {
            return Err(SessionError::Conflict(format!("region {image_id}#{region_index} is already {current:?}")));
        }
        if !self
            .queue
            .entries
            .iter()
            .any(|e| e.image_id == image_id && e.region_index == region_index)
        {
            return Err(SessionError::NotFound(format!("region {image_id}#{region_index} is not queued")));
        }
        let ev = LabelEvent {
            cycle: self.queue.cycle,
            image_id: image_id.to_string(),
            region_index,
            label,
            timestamp_ms: now_ms(),
        };
        let ann = annotate(&self.data, &ev)?;
        append_line(&self.dir.join("labels.jsonl"), &ev)?;
        BudgetLedger::append_to_file(&self.dir.join("ledger.jsonl"), &ann.actions)?;
        let state = ann.state;
        self.state.apply(image_id, Some(region_index), ann)?;
        Ok(state)
    }

    /// Regions labeled since the last completed cycle.
    pub fn new_labels(&self) -> usize {
        let before = self.rows.last().map_or(0, |r| r.regions_labeled);
        self.state.regions_labeled() - before
    }

    /// Mark the session as training and hand out what the job needs.
    pub fn start_training(&mut self) -> SessionResult<TrainJob> {
        if matches!(self.job, JobStatus::Training { .. }) {
            return Err(SessionError::Conflict("a training job is already running".into()));
        }
        if self.new_labels() == 0 {
            return Err(SessionError::Conflict("no new labels since the last cycle".into()));
        }
        self.set_job(JobStatus::Training {
            stage: "training".into(),
        })?;
        Ok(TrainJob {
            config: self.meta.config.clone(),
            data: Arc::clone(&self.data),
            state: self.state.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            cycle: self.cycle(),
        })
    }

    pub fn set_stage(&mut self, stage: &str) -> SessionResult<()> {
        self.set_job(JobStatus::Training { stage: stage.into() })
    }

    /// Install a finished job's results and persist them.
    pub fn finish_training(&mut self, result: SessionResult<TrainOutput>) -> SessionResult<()> {
        let out = match result {
            Ok(out) => out,
            Err(e) => {
                self.set_job(JobStatus::Failed { reason: e.to_string() })?;
                return Err(e);
            }
        };
        save_checkpoint(
            &self.dir.join("checkpoint.json"),
            &Checkpoint::new(&out.params, Some(&out.optimizer), self.meta.config.seed),
        )?;
        self.params = out.params;
        self.optimizer = Some(out.optimizer);
        self.val_dice = out.val_dice;
        self.rows.push(out.row);
        self.write_curve()?;
        append_line(
            &self.dir.join("cycles.jsonl"),
            &CycleRecord {
                cycle: self.rows.len() - 1,
                val_dice: self.val_dice,
            },
        )?;
        for (id, png) in &out.heatmaps {
            write_atomic(&self.dir.join("heatmaps").join(format!("{id}.png")), png)?;
        }
        self.heatmaps = Arc::new(out.heatmaps);
        self.queue = out.queue;
        write_json(&self.dir.join("queue.json"), &self.queue)?;
        self.set_job(JobStatus::Idle)
    }
}

#[derive(Serialize, Deserialize)]
struct CycleRecord {
    cycle: usize,
    val_dice: Option<f64>,
}

fn read_val_dice(dir: &Path) -> SessionResult<Option<f64>> {
    let path = dir.join("cycles.jsonl");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let last = text.lines().rev().find_map(|l| serde_json::from_str::<CycleRecord>(l).ok());
    Ok(last.and_then(|r| r.val_dice))
}

fn annotate(data: &PreparedData, ev: &LabelEvent) -> SessionResult<regal::oracle::Annotation> {
    let stamp = Stamp {
        cycle: ev.cycle,
        timestamp_ms: ev.timestamp_ms,
    };
    Ok(annotate_human(&ev.image_id, ev.region_index, &data.grid, &ev.label, stamp)?)
}

fn apply_event(state: &mut LabelState, data: &PreparedData, ev: &LabelEvent) -> SessionResult<()> {
    let ann = annotate(data, ev)?;
    state.apply(&ev.image_id, Some(ev.region_index), ann)?;
    Ok(())
}

/// Everything a training cycle needs, detached from the session lock.
pub struct TrainJob {
    config: RunConfig,
    data: Arc<PreparedData>,
    state: LabelState,
    params: PredictorParams,
    optimizer: Option<AdamState>,
    cycle: usize,
}

pub struct TrainOutput {
    pub params: PredictorParams,
    pub optimizer: AdamState,
    pub val_dice: Option<f64>,
    pub row: CurvePoint,
    pub queue: Queue,
    pub heatmaps: BTreeMap<String, Vec<u8>>,
}

impl TrainJob {
    /// Train, evaluate and pick the next queue. `progress` receives stage names.
    pub fn run(self, progress: &dyn Fn(&str)) -> SessionResult<TrainOutput> {
        let cfg = &self.config;
        let (report, _) = train_on_labels(cfg, &self.data, &self.state, self.params, self.optimizer, self.cycle)?;
        progress("evaluating");
        let (dice, specificity) = evaluate_on_test(&self.data, &report.params)?;
        let row = CurvePoint {
            cycle: self.cycle,
            cost_seconds: self.state.ledger.total_seconds(),
            regions_labeled: self.state.regions_labeled(),
            dice,
            specificity,
            heuristic: cfg.heuristic.to_string(),
            aggregation: cfg.aggregation.to_string(),
            seed: cfg.seed,
        };
        progress("scoring");
        let next = self.cycle + 1;
        let candidates = self.state.candidates();
        let mut picks: Vec<Selection> = if candidates.is_empty() {
            Vec::new()
        } else {
            select_for_cycle(cfg, &self.data, &report.params, &candidates, next)?.0
        };
        if cfg.heuristic == Heuristic::Entropy {
            picks.sort_by(|a, b| {
                b.score
                    .unwrap_or(f64::NEG_INFINITY)
                    .total_cmp(&a.score.unwrap_or(f64::NEG_INFINITY))
            });
        }
        let mut heatmaps = BTreeMap::new();
        if cfg.heuristic == Heuristic::Entropy {
            for p in &picks {
                let id = &p.region.image_id;
                if heatmaps.contains_key(id) {
                    continue;
                }
                let img = self.data.image(id)?;
                let e = image_entropy(&report.params, img, cfg.mc_samples, mc_seed(cfg, next, id))?;
                heatmaps.insert(id.clone(), e.to_png(cfg.net.classes)?);
            }
        }
        let entries = queue_entries(
            &self.data,
            picks
                .into_iter()
                .map(|p| (p.region.image_id, p.region.region_index, p.score)),
        )?;
        Ok(TrainOutput {
            params: report.params,
            optimizer: report.optimizer,
            val_dice: report.best_val_dice,
            row,
            queue: Queue { cycle: next, entries },
            heatmaps,
        })
    }
}
