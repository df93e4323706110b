//! End-to-end wiring shared by the command line and the bundled benchmark.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckb::{build_ckb, BuildReport, CausalKnowledgeBase, CkbConfig, CkbError};
use crate::cpn::{CpnError, ModelConfig, ModelState};
use crate::data::{chronological_split, generate_synthetic, DataError, SpeedSeries, SyntheticSpec};
use crate::dataset::{DatasetConfig, DatasetError, ForecastData, Part};
use crate::eval::{ablation_compare, sign_agreement, AblationReport, EvalError};
use crate::events::{EventError, EventRecord};
use crate::graph::{GraphError, RoadGraph};
use crate::training::{progressive_train, EpochLog, TrainConfig, TrainError};

/// Errors of any stage, prefixed with the stage that raised them.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("events: {0}")]
    Events(#[from] EventError),
    #[error("ckb: {0}")]
    Ckb(#[from] CkbError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("cpn: {0}")]
    Model(#[from] CpnError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("config: {0}")]
    Config(String),
}

impl PipelineError {
    /// Short stage name for one-line diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Data(_) => "data",
            PipelineError::Events(_) => "events",
            PipelineError::Ckb(_) => "ckb",
            PipelineError::Dataset(_) => "dataset",
            PipelineError::Graph(_) => "graph",
            PipelineError::Model(CpnError::Checkpoint { .. }) => "checkpoint",
            PipelineError::Model(_) => "cpn",
            PipelineError::Train(_) => "training",
            PipelineError::Eval(_) => "eval",
            PipelineError::Config(_) => "config",
        }
    }
}

/// Artifact locations; each is optional and overridden by command flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub speeds: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub ckb: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub ckb: CkbConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Model dimensions that must agree with the windows are taken from the
    /// dataset section.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            lookback: self.dataset.lookback,
            horizon: self.dataset.horizon,
            top_k: self.dataset.top_k,
            ..self.model.clone()
        }
    }

    /// Applies one seed to every seeded stage.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.ckb.seed = seed;
        self.train.seed = seed;
    }
}

/// Series cut to the raw steps that training windows read, and the events
/// starting before the cut, so effect estimates never see evaluation data.
pub fn training_range(series: &[SpeedSeries], events: &[EventRecord], dataset: &DatasetConfig) -> Result<(Vec<SpeedSeries>, Vec<EventRecord>), PipelineError> {
    let first = series.first().ok_or(DatasetError::Empty)?;
    let split = chronological_split(first.len(), dataset.lookback, dataset.horizon)?;
    let end = split.train_raw_end();
    let cut: Vec<SpeedSeries> = series
        .iter()
        .map(|s| SpeedSeries::new(s.segment_id.clone(), s.start, s.interval_min, s.speeds[..end].to_vec()))
        .collect::<Result<_, _>>()?;
    let limit = first.timestamp(end);
    let kept = events.iter().filter(|e| e.onset < limit).cloned().collect();
    Ok((cut, kept))
}

/// Knowledge base estimated on the training range only.
pub fn build_training_ckb(
    series: &[SpeedSeries],
    events: &[EventRecord],
    config: &PipelineConfig,
) -> Result<(CausalKnowledgeBase, BuildReport), PipelineError> {
    let (cut, kept) = training_range(series, events, &config.dataset)?;
    Ok(build_ckb(&kept, &cut, &config.ckb)?)
}

/// The bundled 50-segment synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub synthetic: SyntheticSpec,
    pub pipeline: PipelineConfig,
    /// Stride over test windows in the paired evaluation.
    pub test_stride: usize,
}

pub const BENCHMARK_JSON: &str = include_str!("../assets/benchmark_50.json");

impl Benchmark {
    pub fn bundled() -> Self {
        serde_json::from_str(BENCHMARK_JSON).expect("bundled benchmark parses")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synthetic.random_seed = seed;
        self.pipeline.reseed(seed);
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkRun {
    pub seed: u64,
    pub ckb: CausalKnowledgeBase,
    pub ablation: AblationReport,
    pub sign_agree: usize,
    pub sign_counted: usize,
    pub epochs_run: usize,
    pub best_val_mse: f64,
}

impl BenchmarkRun {
    pub fn sign_share(&self) -> f64 {
        if self.sign_counted == 0 {
            0.0
        } else {
            self.sign_agree as f64 / self.sign_counted as f64
        }
    }
}

/// Generates the data, estimates effects on the training range, trains and
/// runs the paired evaluation on the test range.
pub fn run_benchmark(bench: &Benchmark, on_epoch: impl FnMut(&EpochLog)) -> Result<BenchmarkRun, PipelineError> {
    let cfg = &bench.pipeline;
    let ds = generate_synthetic(&bench.synthetic)?;
    let (ckb, _) = build_training_ckb(&ds.series, &ds.events, cfg)?;
    let ids: Vec<String> = ds.series.iter().map(|s| s.segment_id.clone()).collect();
    let graph = RoadGraph::from_edges(&ids, &ds.edges)?;
    let data = ForecastData::build(&ds.series, &ds.events, &ckb, &graph, &cfg.dataset)?;
    let state = ModelState::init(&cfg.model_config(), cfg.seed)?;
    let out = progressive_train(state, &data, &cfg.train, on_epoch)?;
    let test = data.windows(Part::Test, bench.test_stride.max(1));
    let (ablation, rows) = ablation_compare(&out.state, &data, &test, cfg.train.batch_size)?;
    let (sign_agree, sign_counted) = sign_agreement(&rows, &data, &ds.ledger);
    Ok(BenchmarkRun {
        seed: bench.synthetic.random_seed,
        ckb,
        ablation,
        sign_agree,
        sign_counted,
        epochs_run: out.log.len(),
        best_val_mse: out.best_val_mse,
    })
}
