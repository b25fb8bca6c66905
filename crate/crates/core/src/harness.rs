//! Experiment protocol: breathing-cycle splits, multi-instance training,
//! grid search and condition comparisons.
//!
//! Every run is a pure function of its inputs and one master seed. Instance
//! `i` uses seed `master + i` for both weight init and training; synthetic
//! recordings use seeds derived from the master with [`recording_seeds`].
//! Jobs may run on a worker pool (`OXIPIPE_THREADS`, default 1) but results
//! are assembled in job order, so the worker count never changes a report.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{self, Architecture, CnnError, CnnModel, EpochLoss, TrainConfig};
use crate::dsp::{self, DspConfig, DspError, WindowedDataset, N_STREAMS};
use crate::frameio::fmt_f64;
use crate::roi::ColorSignal;
use crate::ror::{self, FittedCalibration, ReferenceChannel, RorError};
use crate::synth::{self, PhysioTrace, SubjectProfile, SynthError};

pub const THREADS_ENV: &str = "OXIPIPE_THREADS";
pub const DEFAULT_GRID_LIMIT: usize = 36;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("need at least 3 breathing cycles, got {0}")]
    TooFewCycles(usize),
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("grid has {size} points, limit is {limit}")]
    GridTooLarge { size: usize, limit: usize },
    #[error("grid axis {0} is empty")]
    EmptyAxis(&'static str),
    #[error("profiles differ in more than one factor: {0}")]
    ConfoundedFactors(String),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("every instance failed; first error: {0}")]
    AllInstancesFailed(String),
    #[error("every grid point failed")]
    AllPointsFailed,
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Ror(#[from] RorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Train/val window indices of one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Windows straddling a boundary or lying past the third cycle.
    pub dropped: Vec<usize>,
    pub boundaries: Vec<usize>,
    /// Samples between the last train window end and the first val window start.
    pub gap: usize,
}

impl SplitPlan {
    /// True when no train window's sample span meets any val window's span.
    pub fn is_disjoint(&self, ds: &WindowedDataset) -> bool {
        self.train.iter().all(|&t| {
            let a = &ds.windows[t];
            self.val.iter().all(|&v| {
                let b = &ds.windows[v];
                a.end <= b.start || b.end <= a.start
            })
        })
    }
}

/// Windows inside cycles 1-2 train, inside cycle 3 validate; the rest drop.
/// `boundaries` are sample indices `[0, b1, b2, b3, ..]`.
pub fn split_by_cycles(ds: &WindowedDataset, boundaries: &[usize]) -> Result<SplitPlan, HarnessError> {
    if boundaries.len() < 4 {
        return Err(HarnessError::TooFewCycles(boundaries.len().saturating_sub(1)));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Invalid("cycle boundaries must increase".into()));
    }
    let (b0, b2, b3) = (boundaries[0], boundaries[2], boundaries[3]);
    let mut plan = SplitPlan {
        train: Vec::new(),
        val: Vec::new(),
        dropped: Vec::new(),
        boundaries: boundaries.to_vec(),
        gap: 0,
    };
    for (i, w) in ds.windows.iter().enumerate() {
        if w.start >= b0 && w.end <= b2 {
            plan.train.push(i);
        } else if w.start >= b2 && w.end <= b3 {
            plan.val.push(i);
        } else {
            plan.dropped.push(i);
        }
    }
    if plan.train.is_empty() {
        return Err(HarnessError::EmptyPartition("train"));
    }
    if plan.val.is_empty() {
        return Err(HarnessError::EmptyPartition("val"));
    }
    let last_train = plan.train.iter().map(|&i| ds.windows[i].end).max().unwrap_or(0);
    let first_val = plan.val.iter().map(|&i| ds.windows[i].start).min().unwrap_or(0);
    plan.gap = first_val.saturating_sub(last_train);
    Ok(plan)
}

/// Which instance wins: the lowest validation RMSE, or the paper's literal
/// wording ("highest"), kept for reproduction only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Lowest,
    Highest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub index: usize,
    pub seed: u64,
    pub val_rmse: Option<f64>,
    pub val_mae: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutcome {
    pub best: CnnModel,
    pub best_index: usize,
    /// Per-epoch losses of the selected instance.
    pub history: Vec<EpochLoss>,
    pub table: Vec<InstanceRow>,
}

/// Worker count from `OXIPIPE_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Runs `f` over `jobs` on a pool of `threads` workers, results in job order.
fn run_jobs<T, R, F>(jobs: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if threads <= 1 {
        return jobs.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| jobs.par_iter().map(&f).collect()),
        Err(_) => jobs.iter().map(f).collect(),
    }
}

fn metric(r: Result<f64, cnn::MetricError>) -> Result<f64, HarnessError> {
    r.map_err(|e| HarnessError::Invalid(e.to_string()))
}

fn train_instance(
    train: &WindowedDataset,
    val: &WindowedDataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(CnnModel, Vec<EpochLoss>, f64, f64), HarnessError> {
    let model = CnnModel::from_architecture(arch, (N_STREAMS, train.window_len), seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let out = cnn::train(&model, train, Some(val), &cfg)?;
    let labels = val
        .labels()
        .ok_or_else(|| HarnessError::Invalid("validation set is unlabeled".into()))?;
    let pred = cnn::predict_all(&out.model, val)?;
    let rmse = metric(cnn::rmse(&pred, &labels))?;
    let mae = metric(cnn::mae(&pred, &labels))?;
    Ok((out.model, out.history, rmse, mae))
}

/// Trains `n` instances with seeds `master_seed + i` and keeps one by
/// validation RMSE. Failed instances are recorded, not fatal.
#[allow(clippy::too_many_arguments)]
pub fn run_instances(
    train: &WindowedDataset,
    val: &WindowedDataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    n: usize,
    master_seed: u64,
    selection: Selection,
    threads: usize,
) -> Result<InstanceOutcome, HarnessError> {
    if n == 0 {
        return Err(HarnessError::Invalid("n_instances must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| master_seed.wrapping_add(i)).collect();
    let results = run_jobs(&seeds, threads, |&s| train_instance(train, val, arch, cfg, s));
    let mut table = Vec::with_capacity(n);
    let mut models = Vec::with_capacity(n);
    for (index, (seed, r)) in seeds.iter().zip(results).enumerate() {
        match r {
            Ok((m, h, rmse, mae)) => {
                table.push(InstanceRow {
                    index,
                    seed: *seed,
                    val_rmse: Some(rmse),
                    val_mae: Some(mae),
                    error: None,
                });
                models.push(Some((m, h)));
            }
            Err(e) => {
                table.push(InstanceRow {
                    index,
                    seed: *seed,
                    val_rmse: None,
                    val_mae: None,
                    error: Some(e.to_string()),
                });
                models.push(None);
            }
        }
    }
    let scores: Vec<Option<f64>> = table.iter().map(|r| r.val_rmse).collect();
    let Some(best_index) = select(&scores, selection) else {
        let first = table.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(HarnessError::AllInstancesFailed(first));
    };
    let (best, history) = models[best_index].take().expect("selected instance has a model");
    Ok(InstanceOutcome {
        best,
        best_index,
        history,
        table,
    })
}

/// Index of the lowest (or highest) score; ties keep the earliest.
pub fn select(scores: &[Option<f64>], selection: Selection) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        let better = match (best, selection) {
            (None, _) => true,
            (Some((_, b)), Selection::Lowest) => s < b,
            (Some((_, b)), Selection::Highest) => s > b,
        };
        if better {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Everything that defines one experiment besides the data and master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub window_s: f64,
    pub stride_s: f64,
    pub dsp: DspConfig,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub instances: usize,
    pub selection: Selection,
    pub reference: ReferenceChannel,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            window_s: 10.0,
            stride_s: 0.2,
            dsp: DspConfig::default(),
            architecture: Architecture::default(),
            train: TrainConfig {
                epochs: 20,
                oversample: false,
                weight_decay: 5.0,
                ..TrainConfig::default()
            },
            instances: 5,
            selection: Selection::Lowest,
            reference: ReferenceChannel::Blue,
        }
    }
}

/// The synthetic recording pair used by default experiments: a training
/// recording (cycles 1-2 train, cycle 3 validates) and a held-out test
/// recording with a different perfusion phase and noise seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticPair {
    pub profile: SubjectProfile,
    pub train_physio: PhysioTrace,
    pub test_physio: PhysioTrace,
    pub fps: f64,
}

impl Default for SyntheticPair {
    fn default() -> Self {
        let train_physio = PhysioTrace {
            duration_s: 120.0,
            ..PhysioTrace::default()
        };
        let test_physio = PhysioTrace {
            perfusion_phase: 1.3,
            ..train_physio.clone()
        };
        Self {
            profile: SubjectProfile::default(),
            train_physio,
            test_physio,
            fps: 30.0,
        }
    }
}

/// `(train, test)` recording seeds for a master seed.
pub fn recording_seeds(master_seed: u64) -> (u64, u64) {
    let mix = |x: u64| {
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    (mix(master_seed.wrapping_mul(2)), mix(master_seed.wrapping_mul(2) | 1))
}

impl SyntheticPair {
    pub fn generate(&self, master_seed: u64) -> Result<(ColorSignal, ColorSignal), HarnessError> {
        let (a, b) = recording_seeds(master_seed);
        let train = synth::generate_color_signal(&self.profile, &self.train_physio, self.fps, a)?;
        let test = synth::generate_color_signal(&self.profile, &self.test_physio, self.fps, b)?;
        Ok((train, test))
    }
}

/// Windowed, split data for one window length.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub plan: SplitPlan,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

pub fn prepare(
    train_signal: &ColorSignal,
    test_signal: &ColorSignal,
    window_s: f64,
    stride_s: f64,
    dsp_cfg: &DspConfig,
) -> Result<PreparedData, HarnessError> {
    let boundaries = train_signal
        .cycle_boundaries
        .as_deref()
        .ok_or(HarnessError::TooFewCycles(0))?;
    let all = dsp::make_windows(train_signal, window_s, stride_s, dsp_cfg)?;
    let plan = split_by_cycles(&all, boundaries)?;
    let test = dsp::make_windows(test_signal, window_s, stride_s, dsp_cfg)?;
    if !all.is_labeled() || !test.is_labeled() {
        return Err(HarnessError::Invalid("recordings need SpO2 labels".into()));
    }
    if test.is_empty() {
        return Err(HarnessError::EmptyPartition("test"));
    }
    Ok(PreparedData {
        train: all.subset(&plan.train),
        val: all.subset(&plan.val),
        test,
        plan,
    })
}

/// Ratio-of-ratios baseline fitted on `train`, predictions on `test`.
pub fn ror_baseline(
    train: &WindowedDataset,
    test: &WindowedDataset,
    reference: ReferenceChannel,
) -> Result<(FittedCalibration, Vec<f64>), HarnessError> {
    let feats = |ds: &WindowedDataset| -> Result<Vec<_>, RorError> {
        ds.windows.iter().map(|w| ror::ratio_of_ratios(w, reference)).collect()
    };
    let labels = train
        .labels()
        .ok_or_else(|| HarnessError::Invalid("training set is unlabeled".into()))?;
    let cal = ror::fit_features(&feats(train)?, &labels)?;
    let model = cal.model();
    let pred = feats(test)?.iter().map(|f| ror::predict_ror(&model, f)).collect();
    Ok((cal, pred))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub conv_layers: Vec<usize>,
    pub window_s: Vec<f64>,
    pub filters: Vec<usize>,
    pub filter_length: Vec<usize>,
    pub limit: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            conv_layers: vec![1, 2],
            window_s: vec![10.0],
            filters: vec![8, 16],
            filter_length: vec![9, 15],
            limit: DEFAULT_GRID_LIMIT,
        }
    }
}

/// One grid coordinate; field order is the lexicographic tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct GridPoint {
    pub conv_layers: usize,
    pub window_s: f64,
    pub filters: usize,
    pub filter_length: usize,
}

impl GridSpec {
    pub fn size(&self) -> usize {
        self.conv_layers.len() * self.window_s.len() * self.filters.len() * self.filter_length.len()
    }

    /// Cartesian product in lexicographic order of the axis values.
    pub fn points(&self) -> Result<Vec<GridPoint>, HarnessError> {
        for (name, empty) in [
            ("conv_layers", self.conv_layers.is_empty()),
            ("window_s", self.window_s.is_empty()),
            ("filters", self.filters.is_empty()),
            ("filter_length", self.filter_length.is_empty()),
        ] {
            if empty {
                return Err(HarnessError::EmptyAxis(name));
            }
        }
        if self.size() > self.limit {
            return Err(HarnessError::GridTooLarge {
                size: self.size(),
                limit: self.limit,
            });
        }
        let mut pts = Vec::with_capacity(self.size());
        for &conv_layers in &self.conv_layers {
            for &window_s in &self.window_s {
                for &filters in &self.filters {
                    for &filter_length in &self.filter_length {
                        pts.push(GridPoint {
                            conv_layers,
                            window_s,
                            filters,
                            filter_length,
                        });
                    }
                }
            }
        }
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        pts.dedup();
        Ok(pts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub point: GridPoint,
    pub val_rmse: Option<f64>,
    pub val_mae: Option<f64>,
    pub selected_instance: Option<usize>,
    pub instances: Vec<InstanceRow>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub windows: usize,
    pub cnn_rmse: f64,
    pub cnn_mae: f64,
    pub ror_rmse: f64,
    pub ror_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub label: String,
    pub seed: u64,
    pub cnn_rmse: f64,
    pub cnn_mae: f64,
    pub ror_rmse: f64,
    pub ror_mae: f64,
}

/// Test metrics per profile and seed, for the one factor the profiles vary in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionTable {
    pub factor: String,
    pub profiles: Vec<(String, SubjectProfile)>,
    pub rows: Vec<ConditionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub master_seed: u64,
    pub selection: Selection,
    pub grid: Vec<GridResult>,
    pub selected: usize,
    pub test: TestMetrics,
    pub calibration: FittedCalibration,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<ConditionTable>,
}

/// Trained winner plus the report describing how it was chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub model: CnnModel,
    pub history: Vec<EpochLoss>,
    pub test_predictions: Vec<f64>,
    pub data: PreparedData,
}

/// Evaluates every grid point with [`run_instances`], picks the lowest
/// validation RMSE (ties to the lexicographically first point) and tests only
/// the winner, alongside the ratio-of-ratios baseline.
pub fn grid_search(
    grid: &GridSpec,
    train_signal: &ColorSignal,
    test_signal: &ColorSignal,
    cfg: &ExperimentConfig,
    master_seed: u64,
    threads: usize,
) -> Result<ExperimentOutcome, HarnessError> {
    let points = grid.points()?;
    let mut data: BTreeMap<u64, Result<PreparedData, HarnessError>> = BTreeMap::new();
    for p in &points {
        data.entry(p.window_s.to_bits())
            .or_insert_with(|| prepare(train_signal, test_signal, p.window_s, cfg.stride_s, &cfg.dsp));
    }
    let results = run_jobs(&points, threads, |p| {
        let d = data[&p.window_s.to_bits()].as_ref().map_err(Clone::clone)?;
        let arch = Architecture {
            conv: vec![(p.filters, p.filter_length); p.conv_layers],
            ..cfg.architecture.clone()
        };
        let out = run_instances(
            &d.train,
            &d.val,
            &arch,
            &cfg.train,
            cfg.instances,
            master_seed,
            cfg.selection,
            1,
        )?;
        Ok::<_, HarnessError>(out)
    });
    let mut rows = Vec::with_capacity(points.len());
    let mut winners = Vec::with_capacity(points.len());
    for (p, r) in points.iter().zip(results) {
        match r {
            Ok(out) => {
                let row = &out.table[out.best_index];
                rows.push(GridResult {
                    point: *p,
                    val_rmse: row.val_rmse,
                    val_mae: row.val_mae,
                    selected_instance: Some(out.best_index),
                    instances: out.table.clone(),
                    error: None,
                });
                winners.push(Some((out.best, out.history)));
            }
            Err(e) => {
                rows.push(GridResult {
                    point: *p,
                    val_rmse: None,
                    val_mae: None,
                    selected_instance: None,
                    instances: Vec::new(),
                    error: Some(e.to_string()),
                });
                winners.push(None);
            }
        }
    }
    let scores: Vec<Option<f64>> = rows.iter().map(|r| r.val_rmse).collect();
    let selected = select(&scores, Selection::Lowest).ok_or(HarnessError::AllPointsFailed)?;
    let (model, history) = winners[selected].take().expect("winner trained");
    let d = data
        .remove(&points[selected].window_s.to_bits())
        .expect("winner data prepared")?;
    let labels = d.test.labels().expect("test labeled");
    let test_predictions = cnn::predict_all(&model, &d.test)?;
    let (calibration, ror_pred) = ror_baseline(&d.train, &d.test, cfg.reference)?;
    let test = TestMetrics {
        windows: d.test.len(),
        cnn_rmse: metric(cnn::rmse(&test_predictions, &labels))?,
        cnn_mae: metric(cnn::mae(&test_predictions, &labels))?,
        ror_rmse: metric(cnn::rmse(&ror_pred, &labels))?,
        ror_mae: metric(cnn::mae(&ror_pred, &labels))?,
    };
    Ok(ExperimentOutcome {
        report: ExperimentReport {
            master_seed,
            selection: cfg.selection,
            grid: rows,
            selected,
            test,
            calibration,
            conditions: Vec::new(),
        },
        model,
        history,
        test_predictions,
        data: d,
    })
}

impl ExperimentConfig {
    /// The single grid point described by this config's own architecture.
    /// Requires a uniform conv stack.
    pub fn as_grid(&self) -> Result<GridSpec, HarnessError> {
        let conv = &self.architecture.conv;
        let Some(&(filters, filter_length)) = conv.first() else {
            return Err(HarnessError::Invalid("architecture has no conv stage".into()));
        };
        Ok(GridSpec {
            conv_layers: vec![conv.len()],
            window_s: vec![self.window_s],
            filters: vec![filters],
            filter_length: vec![filter_length],
            limit: 1,
        })
    }
}

/// One experiment with the config's own architecture (which may mix
/// filter lengths across stages).
pub fn run_experiment(
    train_signal: &ColorSignal,
    test_signal: &ColorSignal,
    cfg: &ExperimentConfig,
    master_seed: u64,
    threads: usize,
) -> Result<ExperimentOutcome, HarnessError> {
    let d = prepare(train_signal, test_signal, cfg.window_s, cfg.stride_s, &cfg.dsp)?;
    let out = run_instances(
        &d.train,
        &d.val,
        &cfg.architecture,
        &cfg.train,
        cfg.instances,
        master_seed,
        cfg.selection,
        threads,
    )?;
    let labels = d.test.labels().expect("test labeled");
    let test_predictions = cnn::predict_all(&out.best, &d.test)?;
    let (calibration, ror_pred) = ror_baseline(&d.train, &d.test, cfg.reference)?;
    let test = TestMetrics {
        windows: d.test.len(),
        cnn_rmse: metric(cnn::rmse(&test_predictions, &labels))?,
        cnn_mae: metric(cnn::mae(&test_predictions, &labels))?,
        ror_rmse: metric(cnn::rmse(&ror_pred, &labels))?,
        ror_mae: metric(cnn::mae(&ror_pred, &labels))?,
    };
    let (&(filters, filter_length), conv_layers) = (
        cfg.architecture.conv.first().unwrap_or(&(0, 0)),
        cfg.architecture.conv.len(),
    );
    let row = &out.table[out.best_index];
    Ok(ExperimentOutcome {
        report: ExperimentReport {
            master_seed,
            selection: cfg.selection,
            grid: vec![GridResult {
                point: GridPoint {
                    conv_layers,
                    window_s: cfg.window_s,
                    filters,
                    filter_length,
                },
                val_rmse: row.val_rmse,
                val_mae: row.val_mae,
                selected_instance: Some(out.best_index),
                instances: out.table.clone(),
                error: None,
            }],
            selected: 0,
            test,
            calibration,
            conditions: Vec::new(),
        },
        model: out.best,
        history: out.history,
        test_predictions,
        data: d,
    })
}

/// Names of the profile fields in which `a` and `b` differ.
pub fn differing_factors(a: &SubjectProfile, b: &SubjectProfile) -> Vec<&'static str> {
    let mut out = Vec::new();
    if a.skin_tone != b.skin_tone {
        out.push("skin_tone");
    }
    if a.hand_side != b.hand_side {
        out.push("hand_side");
    }
    if a.base_dc != b.base_dc {
        out.push("base_dc");
    }
    if a.perfusion != b.perfusion {
        out.push("perfusion");
    }
    if a.noise_sigma != b.noise_sigma {
        out.push("noise_sigma");
    }
    if a.calibration != b.calibration {
        out.push("calibration");
    }
    out
}

/// The single factor the profiles vary in (`"none"` when all are equal).
pub fn swept_factor(profiles: &[(String, SubjectProfile)]) -> Result<String, HarnessError> {
    if profiles.len() < 2 {
        return Err(HarnessError::Invalid("need at least two profiles".into()));
    }
    let mut factor: Option<&'static str> = None;
    for (i, (la, a)) in profiles.iter().enumerate() {
        for (lb, b) in &profiles[i + 1..] {
            let d = differing_factors(a, b);
            if d.len() > 1 {
                return Err(HarnessError::ConfoundedFactors(format!("{la} vs {lb}: {}", d.join(", "))));
            }
            if let Some(&f) = d.first() {
                match factor {
                    Some(g) if g != f => {
                        return Err(HarnessError::ConfoundedFactors(format!("both {g} and {f} vary")));
                    }
                    _ => factor = Some(f),
                }
            }
        }
    }
    Ok(factor.unwrap_or("none").to_string())
}

/// Runs the same experiment for every profile and seed. Each seed uses the
/// same recording seeds for every profile, so identical profiles give
/// identical rows.
pub fn compare_conditions(
    profiles: &[(String, SubjectProfile)],
    pair: &SyntheticPair,
    cfg: &ExperimentConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<ConditionTable, HarnessError> {
    let factor = swept_factor(profiles)?;
    let jobs: Vec<(usize, u64)> = (0..profiles.len())
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results = run_jobs(&jobs, threads, |&(p, seed)| {
        let pair = SyntheticPair {
            profile: profiles[p].1.clone(),
            ..pair.clone()
        };
        let (tr, te) = pair.generate(seed)?;
        let out = run_experiment(&tr, &te, cfg, seed, 1)?;
        Ok::<_, HarnessError>(ConditionRow {
            label: profiles[p].0.clone(),
            seed,
            cnn_rmse: out.report.test.cnn_rmse,
            cnn_mae: out.report.test.cnn_mae,
            ror_rmse: out.report.test.ror_rmse,
            ror_mae: out.report.test.ror_mae,
        })
    });
    Ok(ConditionTable {
        factor,
        profiles: profiles.to_vec(),
        rows: results.into_iter().collect::<Result<_, _>>()?,
    })
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    /// One row per grid point.
    pub fn grid_csv(&self) -> String {
        let mut out = String::from("conv_layers,window_s,filters,filter_length,val_rmse,val_mae,selected,error\n");
        for (i, r) in self.grid.iter().enumerate() {
            let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.point.conv_layers,
                fmt_f64(r.point.window_s),
                r.point.filters,
                r.point.filter_length,
                opt(r.val_rmse),
                opt(r.val_mae),
                u8::from(i == self.selected),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ));
        }
        out
    }
}

impl ConditionTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},seed,cnn_rmse,cnn_mae,ror_rmse,ror_mae\n", self.factor);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.label,
                r.seed,
                fmt_f64(r.cnn_rmse),
                fmt_f64(r.cnn_mae),
                fmt_f64(r.ror_rmse),
                fmt_f64(r.ror_mae)
            ));
        }
        out
    }

    /// Rows for one profile label, in seed order.
    pub fn rows_for(&self, label: &str) -> Vec<&ConditionRow> {
        self.rows.iter().filter(|r| r.label == label).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{Window, WindowNorm};
    use crate::synth::HandSide;

    fn dataset(len: usize, window_len: usize, stride: usize) -> WindowedDataset {
        let windows = dsp::window_starts(len, window_len, stride)
            .map(|start| Window {
                start,
                end: start + window_len,
                streams: Vec::new(),
                input: Vec::new(),
                norm: WindowNorm {
                    raw_mean: [0.0; 3],
                    dc_mean: [0.0; 3],
                },
                label: Some(90.0),
            })
            .collect();
        WindowedDataset {
            fps: 30.0,
            window_len,
            stride,
            windows,
        }
    }

    #[test]
    fn split_respects_boundaries() {
        let ds = dataset(3000, 300, 6);
        let plan = split_by_cycles(&ds, &[0, 1000, 2000, 3000]).unwrap();
        assert!(plan.train.iter().all(|&i| ds.windows[i].end <= 2000));
        assert!(plan.val.iter().all(|&i| ds.windows[i].start >= 2000));
        assert!(plan.is_disjoint(&ds));
        assert_eq!(plan.train.len() + plan.val.len() + plan.dropped.len(), ds.len());
        // Train: starts 0..=1700 step 6 -> 284; val: starts 2004..=2700 -> 117.
        assert_eq!(plan.train.len(), 284);
        assert_eq!(plan.val.len(), 117);
    }

    #[test]
    fn two_cycles_rejected() {
        let ds = dataset(2000, 300, 6);
        assert_eq!(
            split_by_cycles(&ds, &[0, 1000, 2000]),
            Err(HarnessError::TooFewCycles(2))
        );
    }

    #[test]
    fn short_cycle_gives_empty_partition() {
        let ds = dataset(2200, 300, 6);
        assert_eq!(
            split_by_cycles(&ds, &[0, 1000, 2000, 2200]),
            Err(HarnessError::EmptyPartition("val"))
        );
    }

    #[test]
    fn selection_rules() {
        let s = [Some(2.1), Some(1.8), Some(2.5)];
        assert_eq!(select(&s, Selection::Lowest), Some(1));
        assert_eq!(select(&s, Selection::Highest), Some(2));
        assert_eq!(select(&[Some(1.0)], Selection::Lowest), Some(0));
        assert_eq!(select(&[None, Some(3.0), Some(3.0)], Selection::Lowest), Some(1));
        assert_eq!(select(&[None, None], Selection::Lowest), None);
    }

    #[test]
    fn grid_cartesian_and_limit() {
        let g = GridSpec {
            conv_layers: vec![2, 1],
            window_s: vec![10.0],
            filters: vec![16, 8],
            filter_length: vec![9],
            limit: 36,
        };
        let pts = g.points().unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!((pts[0].conv_layers, pts[0].filters), (1, 8));
        let big = GridSpec {
            filter_length: (1..=10).collect(),
            ..g
        };
        assert_eq!(
            big.points(),
            Err(HarnessError::GridTooLarge { size: 40, limit: 36 })
        );
    }

    #[test]
    fn factor_checks() {
        let back = SubjectProfile::default();
        let palm = SubjectProfile {
            hand_side: HandSide::Palm,
            ..back.clone()
        };
        let dark_palm = SubjectProfile {
            skin_tone: 0.9,
            ..palm.clone()
        };
        let p = |v: &[(&str, &SubjectProfile)]| -> Vec<(String, SubjectProfile)> {
            v.iter().map(|(l, p)| (l.to_string(), (*p).clone())).collect()
        };
        assert_eq!(swept_factor(&p(&[("b", &back), ("p", &palm)])).unwrap(), "hand_side");
        assert_eq!(swept_factor(&p(&[("a", &back), ("b", &back)])).unwrap(), "none");
        assert!(matches!(
            swept_factor(&p(&[("b", &back), ("dp", &dark_palm)])),
            Err(HarnessError::ConfoundedFactors(_))
        ));
        assert!(matches!(
            swept_factor(&p(&[("b", &back), ("p", &palm), ("dp", &dark_palm)])),
            Err(HarnessError::ConfoundedFactors(_))
        ));
    }

    #[test]
    fn recording_seeds_differ() {
        let (a, b) = recording_seeds(7);
        assert_ne!(a, b);
        assert_ne!(recording_seeds(8), (a, b));
    }
}
