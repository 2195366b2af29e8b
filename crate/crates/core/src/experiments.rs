//! Desk-scale experiments driven by JSON configs, and their artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{self, DecisionDataset, ElectricitySpec, GeneratorSpec, SeriesOptions, SplitSpec};
use crate::end2end::{
    evaluate_forecaster, evaluate_two_stage, evaluate_two_stage_pto, projected_descent_saa, train_forecaster,
    train_forecaster_oracle_loop, train_two_stage, Architecture, DecisionMode, DecisionRule, DescentConfig,
    EndToEndConfig, Forecaster, OutputLayer, Samples, TwoStage,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::metatrain::{
    train_update_rule_with, Benchmark, LossHistory, MetaTrainConfig, Optimizer, TrainSchedule, UniformSource,
};
use crate::oracles::{self, knn_saa, newsvendor_saa, quadratic_newsvendor_point, PredictThenOptimize};
use crate::problems::{build_problem, ObjectiveSpec, Problem, ProblemKind, Sense};
use crate::projection::ConvexSet;
use crate::psdmap::{Construction, ModelInit, ModelMode, UpdateRuleModel};
use crate::random;
use crate::solver::{projectnet_solve, SolveConfig};

/// A run request: which experiment, its settings, seed and output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum Experiment {
    MatchingRegret(MatchingRegret),
    NewsvendorE2e(NewsvendorE2e),
    NewsvendorNofeature(NewsvendorNofeature),
    NewsvendorQuadratic(NewsvendorQuadratic),
    #[serde(rename = "crossfulfill-2stage")]
    CrossfulfillTwoStage(CrossfulfillTwoStage),
    ElectricityE2e(ElectricityE2e),
    ShortestpathE2e(ShortestpathE2e),
    ToyViz(ToyViz),
}

impl Experiment {
    pub fn id(&self) -> &'static str {
        match self {
            Experiment::MatchingRegret(_) => "matching-regret",
            Experiment::NewsvendorE2e(_) => "newsvendor-e2e",
            Experiment::NewsvendorNofeature(_) => "newsvendor-nofeature",
            Experiment::NewsvendorQuadratic(_) => "newsvendor-quadratic",
            Experiment::CrossfulfillTwoStage(_) => "crossfulfill-2stage",
            Experiment::ElectricityE2e(_) => "electricity-e2e",
            Experiment::ShortestpathE2e(_) => "shortestpath-e2e",
            Experiment::ToyViz(_) => "toy-viz",
        }
    }

    /// Default settings for experiment `id`.
    pub fn default_for(id: &str) -> Option<Self> {
        Some(match id {
            "matching-regret" => Experiment::MatchingRegret(Default::default()),
            "newsvendor-e2e" => Experiment::NewsvendorE2e(Default::default()),
            "newsvendor-nofeature" => Experiment::NewsvendorNofeature(Default::default()),
            "newsvendor-quadratic" => Experiment::NewsvendorQuadratic(Default::default()),
            "crossfulfill-2stage" => Experiment::CrossfulfillTwoStage(Default::default()),
            "electricity-e2e" => Experiment::ElectricityE2e(Default::default()),
            "shortestpath-e2e" => Experiment::ShortestpathE2e(Default::default()),
            "toy-viz" => Experiment::ToyViz(Default::default()),
            _ => return None,
        })
    }

    pub const IDS: [&'static str; 8] = [
        "matching-regret",
        "newsvendor-e2e",
        "newsvendor-nofeature",
        "newsvendor-quadratic",
        "crossfulfill-2stage",
        "electricity-e2e",
        "shortestpath-e2e",
        "toy-viz",
    ];
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment, seed: u64) -> Self {
        ExperimentConfig {
            experiment,
            seed,
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Problems the experiment builds; building checks each feasibility witness.
    pub fn problems(&self) -> Result<Vec<Problem>> {
        match &self.experiment {
            Experiment::MatchingRegret(c) => Ok(vec![build_problem(&ProblemKind::Matching { n: c.n })?]),
            Experiment::NewsvendorE2e(c) => {
                let (h, b) = c.costs();
                Ok(vec![
                    build_problem(&ProblemKind::LiftedNewsvendor {
                        h: h.clone(),
                        b: b.clone(),
                        capacity: Some(1.0),
                    })?,
                    build_problem(&ProblemKind::CapacitatedNewsvendor { h, b, capacity: Some(1.0) })?,
                ])
            }
            Experiment::NewsvendorNofeature(c) => {
                let (h, b) = c.costs();
                c.capacities
                    .iter()
                    .map(|&cap| {
                        build_problem(&ProblemKind::CapacitatedNewsvendor {
                            h: h.clone(),
                            b: b.clone(),
                            capacity: Some(cap),
                        })
                    })
                    .collect()
            }
            Experiment::NewsvendorQuadratic(c) => Ok(vec![build_problem(&c.problem_kind())?]),
            Experiment::CrossfulfillTwoStage(c) => {
                let (first, second) = c.problems()?;
                Ok(vec![first, second])
            }
            Experiment::ElectricityE2e(c) => Ok(vec![build_problem(&c.problem_kind(c.options.horizon))?]),
            Experiment::ShortestpathE2e(c) => Ok(vec![build_problem(&ProblemKind::ShortestPath { grid: c.grid })?]),
            Experiment::ToyViz(_) => Ok(vec![build_problem(&ProblemKind::ToyPolytope)?]),
        }
    }

    /// Schema, feasibility and data-availability findings; empty when the
    /// config is runnable.
    pub fn diagnose(text: &str) -> Vec<String> {
        let cfg = match Self::from_json(text) {
            Ok(c) => c,
            Err(e) => return vec![e.to_string()],
        };
        let mut out = Vec::new();
        if let Experiment::ElectricityE2e(c) = &cfg.experiment {
            if let Some(path) = &c.source {
                if !path.is_file() {
                    out.push(format!("series file not found: {}", path.display()));
                }
            }
        }
        if let Err(e) = cfg.problems() {
            out.push(format!("problem construction failed: {e}"));
        }
        if let Err(e) = cfg.check() {
            out.push(e.to_string());
        }
        out
    }

    /// Parameter checks that do not need data.
    pub fn check(&self) -> Result<()> {
        match &self.experiment {
            Experiment::MatchingRegret(c) => {
                c.meta.schedule.validate()?;
                c.meta.solver.validate()?;
                if c.train_samples == 0 || c.test_samples == 0 || c.sweep.is_empty() {
                    return Err(Error::Config("matching-regret needs samples and a nonempty sweep".into()));
                }
            }
            Experiment::NewsvendorE2e(c) => {
                c.forecast.validate()?;
                c.end_to_end.schedule.validate()?;
                c.end_to_end.solver.validate()?;
                if c.products == 0 || c.neighbours == 0 || !(c.capacity_fraction > 0.0) {
                    return Err(Error::Config("newsvendor-e2e needs products, neighbours and capacity > 0".into()));
                }
            }
            Experiment::NewsvendorNofeature(c) => {
                if c.products == 0 || c.samples == 0 || c.capacities.is_empty() {
                    return Err(Error::Config("newsvendor-nofeature needs products, samples and capacities".into()));
                }
            }
            Experiment::NewsvendorQuadratic(c) => {
                c.forecast.validate()?;
                c.end_to_end.schedule.validate()?;
                c.end_to_end.solver.validate()?;
            }
            Experiment::CrossfulfillTwoStage(c) => {
                c.forecast.validate()?;
                c.end_to_end.schedule.validate()?;
                c.end_to_end.solver.validate()?;
            }
            Experiment::ElectricityE2e(c) => {
                c.forecast.validate()?;
                c.end_to_end.schedule.validate()?;
                c.end_to_end.solver.validate()?;
                if c.width == 0 {
                    return Err(Error::Config("forecaster width must be ≥ 1".into()));
                }
            }
            Experiment::ShortestpathE2e(c) => {
                c.forecast.validate()?;
                c.end_to_end.schedule.validate()?;
                c.end_to_end.solver.validate()?;
            }
            Experiment::ToyViz(c) => {
                c.meta.schedule.validate()?;
                c.meta.solver.validate()?;
                if c.circle_points == 0 {
                    return Err(Error::Config("toy-viz needs at least one circle point".into()));
                }
            }
        }
        Ok(())
    }
}

/// Matching with `n + n` nodes: trained update rule vs projected gradient
/// descent over a sweep of evaluation iteration counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingRegret {
    pub n: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub model: ModelMode,
    pub init: ModelInit,
    /// Training settings; `solver.iterations` is the training horizon `T₀`.
    pub meta: MetaTrainConfig,
    /// Fresh uniform cost draws added per epoch.
    pub fresh_samples: usize,
    /// Evaluation iteration counts `T₁`.
    pub sweep: Vec<usize>,
}

impl Default for MatchingRegret {
    fn default() -> Self {
        MatchingRegret {
            n: 10,
            train_samples: 200,
            test_samples: 100,
            model: ModelMode::Linear,
            init: ModelInit::default(),
            meta: MetaTrainConfig {
                schedule: TrainSchedule {
                    epochs: 10,
                    learning_rate: 0.01,
                    optimizer: Optimizer::adam(),
                    ..TrainSchedule::default()
                },
                ..MetaTrainConfig::default()
            },
            fresh_samples: 100,
            sweep: vec![5, 10, 15, 20, 25, 30, 35],
        }
    }
}

/// Multi-product newsvendor with features and a shared capacity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewsvendorE2e {
    pub samples: usize,
    pub features: usize,
    pub products: usize,
    pub hidden: usize,
    /// Capacity as a fraction of the mean total training demand.
    pub capacity_fraction: f64,
    pub holding: f64,
    /// Backorder costs rise linearly from `backorder_lo` to `backorder_hi`
    /// across products.
    pub backorder_lo: f64,
    pub backorder_hi: f64,
    pub neighbours: usize,
    pub split: SplitSpec,
    pub forecast: TrainSchedule,
    pub end_to_end: EndToEndConfig,
}

impl Default for NewsvendorE2e {
    fn default() -> Self {
        NewsvendorE2e {
            samples: 600,
            features: 5,
            products: 20,
            hidden: 32,
            capacity_fraction: 0.8,
            holding: 1.0,
            backorder_lo: 2.0,
            backorder_hi: 5.0,
            neighbours: 10,
            split: SplitSpec { val: 0.1, test: 0.3 },
            forecast: TrainSchedule {
                epochs: 30,
                ..TrainSchedule::default()
            },
            end_to_end: EndToEndConfig {
                schedule: TrainSchedule {
                    epochs: 30,
                    ..TrainSchedule::default()
                },
                solver: SolveConfig {
                    iterations: 10,
                    ..SolveConfig::default()
                },
                ..EndToEndConfig::default()
            },
        }
    }
}

impl NewsvendorE2e {
    fn costs(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.products;
        let b = (0..k)
            .map(|j| self.backorder_lo + (self.backorder_hi - self.backorder_lo) * j as f64 / k.max(1) as f64)
            .collect();
        (vec![self.holding; k], b)
    }
}

/// Featureless capacitated newsvendor: projected descent vs the SAA oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewsvendorNofeature {
    pub products: usize,
    pub samples: usize,
    /// Product `j` has demand `U[0, 2 + j]`, holding `1 + 0.1 j` and
    /// backorder `2 + 0.3 j`.
    pub capacities: Vec<f64>,
    pub descent: DescentConfig,
}

impl Default for NewsvendorNofeature {
    fn default() -> Self {
        NewsvendorNofeature {
            products: 10,
            samples: 200,
            capacities: vec![10.0, 30.0, 60.0],
            descent: DescentConfig::default(),
        }
    }
}

impl NewsvendorNofeature {
    fn costs(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.products;
        (
            (0..k).map(|j| 1.0 + 0.1 * j as f64).collect(),
            (0..k).map(|j| 2.0 + 0.3 * j as f64).collect(),
        )
    }
}

/// Single-product newsvendor with quadratic costs and a discrete demand
/// support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewsvendorQuadratic {
    pub samples: usize,
    pub features: usize,
    pub support: Vec<f64>,
    pub c0: f64,
    pub q0: f64,
    pub cb: f64,
    pub qb: f64,
    pub ch: f64,
    pub qh: f64,
    pub split: SplitSpec,
    pub forecast: TrainSchedule,
    pub end_to_end: EndToEndConfig,
}

impl Default for NewsvendorQuadratic {
    fn default() -> Self {
        NewsvendorQuadratic {
            samples: 500,
            features: 5,
            support: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            c0: 10.0,
            q0: 2.0,
            cb: 30.0,
            qb: 14.0,
            ch: 10.0,
            qh: 2.0,
            split: SplitSpec { val: 0.1, test: 0.3 },
            forecast: TrainSchedule {
                epochs: 60,
                ..TrainSchedule::default()
            },
            end_to_end: EndToEndConfig {
                schedule: TrainSchedule {
                    epochs: 60,
                    learning_rate: 3e-4,
                    ..TrainSchedule::default()
                },
                solver: SolveConfig {
                    iterations: 10,
                    eta: 0.02,
                    ..SolveConfig::default()
                },
                ..EndToEndConfig::default()
            },
        }
    }
}

impl NewsvendorQuadratic {
    fn problem_kind(&self) -> ProblemKind {
        ProblemKind::QuadraticNewsvendor {
            c0: self.c0,
            q0: self.q0,
            cb: self.cb,
            qb: self.qb,
            ch: self.ch,
            qh: self.qh,
            support: self.support.clone(),
        }
    }
}

/// Orders placed before demand is seen, then fulfilled across locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossfulfillTwoStage {
    pub samples: usize,
    pub features: usize,
    pub locations: usize,
    /// Shipping cost from location `i` to `j`; empty means
    /// `0.5 + 0.25 ((i + j) mod 3)` off the diagonal and 0 on it.
    pub transport: Vec<Vec<f64>>,
    pub order_cost: f64,
    pub holding: f64,
    pub backorder: f64,
    /// Projection cycles applied to the decision rule's output.
    pub decision_cycles: usize,
    pub split: SplitSpec,
    pub forecast: TrainSchedule,
    pub end_to_end: EndToEndConfig,
}

impl Default for CrossfulfillTwoStage {
    fn default() -> Self {
        CrossfulfillTwoStage {
            samples: 400,
            features: 5,
            locations: 3,
            transport: Vec::new(),
            order_cost: 1.0,
            holding: 0.5,
            backorder: 4.0,
            decision_cycles: 10,
            split: SplitSpec { val: 0.1, test: 0.3 },
            forecast: TrainSchedule {
                epochs: 30,
                ..TrainSchedule::default()
            },
            end_to_end: EndToEndConfig {
                schedule: TrainSchedule {
                    epochs: 30,
                    ..TrainSchedule::default()
                },
                solver: SolveConfig {
                    iterations: 10,
                    ..SolveConfig::default()
                },
                ..EndToEndConfig::default()
            },
        }
    }
}

impl CrossfulfillTwoStage {
    fn transport_matrix(&self) -> Result<Matrix> {
        let n = self.locations;
        if self.transport.is_empty() {
            let mut c = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        c.set(i, j, 0.5 + 0.25 * ((i + j) % 3) as f64);
                    }
                }
            }
            return Ok(c);
        }
        if self.transport.len() != n || self.transport.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("transport must be {n} × {n}")));
        }
        Matrix::from_vec(n, n, self.transport.concat())
    }

    fn problems(&self) -> Result<(Problem, Problem)> {
        let n = self.locations;
        let second = build_problem(&ProblemKind::CrossFulfillSecondStage {
            c: self.transport_matrix()?,
            h: vec![self.holding; n],
            b: vec![self.backorder; n],
        })?;
        let first = Problem::new("orders", n, n, vec![ConvexSet::Nonneg], ObjectiveSpec::Linear, Sense::Min)?;
        Ok((first, second))
    }
}

/// Generation planning against a day-ahead load forecast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElectricityE2e {
    /// CSV with `timestamp,load[,temp]`; the synthetic series is used when
    /// absent.
    pub source: Option<PathBuf>,
    pub series: ElectricitySpec,
    pub options: SeriesOptions,
    pub ramp: f64,
    pub gamma_s: f64,
    pub gamma_e: f64,
    pub width: usize,
    pub residual: bool,
    pub split: SplitSpec,
    pub forecast: TrainSchedule,
    pub end_to_end: EndToEndConfig,
    pub bench: BenchSweep,
}

/// Horizons and sample count for the timing sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSweep {
    pub horizons: Vec<usize>,
    /// Training windows per size.
    pub samples: usize,
    /// Timed epochs per method and size.
    pub epochs: usize,
}

impl Default for BenchSweep {
    fn default() -> Self {
        BenchSweep {
            horizons: vec![24, 48, 72],
            samples: 32,
            epochs: 2,
        }
    }
}

impl Default for ElectricityE2e {
    fn default() -> Self {
        ElectricityE2e {
            source: None,
            series: ElectricitySpec {
                days: 730,
                ..ElectricitySpec::default()
            },
            options: SeriesOptions::default(),
            ramp: 0.4,
            gamma_s: 50.0,
            gamma_e: 0.5,
            width: 64,
            residual: true,
            split: SplitSpec { val: 0.1, test: 0.2 },
            forecast: TrainSchedule {
                epochs: 60,
                learning_rate: 1e-3,
                optimizer: Optimizer::adam(),
                ..TrainSchedule::default()
            },
            end_to_end: EndToEndConfig {
                schedule: TrainSchedule {
                    epochs: 60,
                    learning_rate: 3e-4,
                    optimizer: Optimizer::adam(),
                    ..TrainSchedule::default()
                },
                solver: SolveConfig {
                    iterations: 30,
                    eta: 0.02,
                    ..SolveConfig::default()
                },
                ..EndToEndConfig::default()
            },
            bench: BenchSweep::default(),
        }
    }
}

impl ElectricityE2e {
    fn problem_kind(&self, horizon: usize) -> ProblemKind {
        ProblemKind::Electricity {
            horizon,
            ramp: self.ramp,
            gamma_s: self.gamma_s,
            gamma_e: self.gamma_e,
        }
    }

    fn dataset(&self, horizon: usize, seed: u64) -> Result<DecisionDataset> {
        let options = SeriesOptions {
            horizon,
            stride: if horizon == self.options.horizon { self.options.stride } else { horizon },
            ..self.options.clone()
        };
        let spec = match &self.source {
            Some(path) => GeneratorSpec::Series {
                path: path.clone(),
                options,
            },
            None => GeneratorSpec::Electricity {
                series: self.series.clone(),
                options,
            },
        };
        datagen::generate(&spec, seed, self.split)
    }
}

/// Shortest paths on a vertex-cost grid predicted from features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShortestpathE2e {
    pub grid: usize,
    pub samples: usize,
    pub features: usize,
    pub hidden: usize,
    pub split: SplitSpec,
    pub forecast: TrainSchedule,
    pub end_to_end: EndToEndConfig,
}

impl Default for ShortestpathE2e {
    fn default() -> Self {
        ShortestpathE2e {
            grid: 5,
            samples: 300,
            features: 5,
            hidden: 32,
            split: SplitSpec { val: 0.1, test: 0.3 },
            forecast: TrainSchedule {
                epochs: 30,
                ..TrainSchedule::default()
            },
            end_to_end: EndToEndConfig {
                schedule: TrainSchedule {
                    epochs: 30,
                    ..TrainSchedule::default()
                },
                solver: SolveConfig {
                    iterations: 10,
                    ..SolveConfig::default()
                },
                ..EndToEndConfig::default()
            },
        }
    }
}

/// Trained solver outputs on cost vectors swept along a quarter circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyViz {
    /// `M`: the sweep has `M + 1` points.
    pub circle_points: usize,
    pub train_samples: usize,
    pub model: ModelMode,
    pub init: ModelInit,
    pub meta: MetaTrainConfig,
    pub vertex_tolerance: f64,
}

impl Default for ToyViz {
    fn default() -> Self {
        ToyViz {
            circle_points: 40,
            train_samples: 200,
            model: ModelMode::Linear,
            init: ModelInit::default(),
            meta: MetaTrainConfig {
                schedule: TrainSchedule {
                    epochs: 200,
                    learning_rate: 0.01,
                    optimizer: Optimizer::adam(),
                    ..TrainSchedule::default()
                },
                solver: SolveConfig {
                    iterations: 40,
                    ..SolveConfig::default()
                },
                ..MetaTrainConfig::default()
            },
            vertex_tolerance: 0.05,
        }
    }
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<String>,
    pub mean_cost: f64,
    /// Mean training wall time per epoch in seconds.
    pub epoch_time: Option<f64>,
}

impl ReportRow {
    fn new(method: &str, setting: Option<String>, mean_cost: f64, epoch_time: Option<f64>) -> Self {
        ReportRow {
            method: method.into(),
            setting,
            mean_cost,
            epoch_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub seed: u64,
    /// What `mean_cost` measures.
    pub metric: String,
    pub rows: Vec<ReportRow>,
    pub summary: BTreeMap<String, f64>,
}

impl Report {
    fn new(experiment: &str, seed: u64, metric: &str) -> Self {
        Report {
            experiment: experiment.into(),
            seed,
            metric: metric.into(),
            rows: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    /// `mean_cost` of the first row with `method` (and `setting`, if given).
    pub fn cost(&self, method: &str, setting: Option<&str>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && (setting.is_none() || r.setting.as_deref() == setting))
            .map(|r| r.mean_cost)
    }
}

/// A training run's history and its test score.
#[derive(Clone, Debug)]
pub struct Phase {
    pub name: String,
    pub history: LossHistory,
    pub test: Option<f64>,
}

/// A named numeric CSV table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(file: &str, header: &[&str]) -> Self {
        Table {
            file: file.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: Report,
    pub phases: Vec<Phase>,
    pub tables: Vec<Table>,
    pub checkpoints: Vec<(String, serde_json::Value)>,
}

impl RunOutput {
    fn new(report: Report) -> Self {
        RunOutput {
            report,
            phases: Vec::new(),
            tables: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    fn phase(&mut self, name: &str, history: &LossHistory, test: f64) {
        self.phases.push(Phase {
            name: name.into(),
            history: history.clone(),
            test: Some(test),
        });
    }

    fn checkpoint<T: Serialize>(&mut self, file: &str, value: &T) -> Result<()> {
        self.checkpoints.push((file.into(), serde_json::to_value(value)?));
        Ok(())
    }

    pub fn table(&self, file: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.file == file)
    }

    /// Per-epoch rows for every phase:
    /// `phase,epoch,train_loss,val_loss,learning_rate,oracle_calls,selected,test_metric,wall_time`.
    pub fn write_metrics<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record([
            "phase",
            "epoch",
            "train_loss",
            "val_loss",
            "learning_rate",
            "oracle_calls",
            "selected",
            "test_metric",
            "wall_time",
        ])?;
        for ph in &self.phases {
            for r in &ph.history.records {
                let selected = r.epoch == ph.history.selected_epoch;
                wr.write_record([
                    ph.name.clone(),
                    r.epoch.to_string(),
                    r.train_loss.to_string(),
                    r.val_loss.map_or_else(String::new, |v| v.to_string()),
                    r.learning_rate.to_string(),
                    r.oracle_calls.to_string(),
                    u8::from(selected).to_string(),
                    ph.test.filter(|_| selected).map_or_else(String::new, |v| v.to_string()),
                    r.wall_time.to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Writes `report.json`, `metrics.csv`, every table and checkpoint into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        self.write_metrics(std::fs::File::create(dir.join("metrics.csv"))?)?;
        for t in &self.tables {
            write_table(t, &dir.join(&t.file))?;
        }
        for (file, value) in &self.checkpoints {
            std::fs::write(dir.join(file), serde_json::to_string(value)?)?;
        }
        Ok(())
    }
}

fn write_table(t: &Table, path: &Path) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(&t.header)?;
    for r in &t.rows {
        wr.write_record(r.iter().map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

fn epoch_time(h: &LossHistory) -> Option<f64> {
    let trained = &h.records[1..];
    if trained.is_empty() {
        None
    } else {
        Some(trained.iter().map(|r| r.wall_time).sum::<f64>() / trained.len() as f64)
    }
}

struct Split {
    trx: Vec<Vec<f64>>,
    tru: Vec<Vec<f64>>,
    vx: Vec<Vec<f64>>,
    vu: Vec<Vec<f64>>,
    tex: Vec<Vec<f64>>,
    teu: Vec<Vec<f64>>,
}

impl Split {
    fn of(ds: &DecisionDataset) -> Self {
        let (trx, tru) = ds.train();
        let (vx, vu) = ds.val();
        let (tex, teu) = ds.test();
        Split {
            trx,
            tru,
            vx,
            vu,
            tex,
            teu,
        }
    }

    fn train(&self) -> Samples<'_> {
        Samples { x: &self.trx, u: &self.tru }
    }

    fn val(&self) -> Samples<'_> {
        Samples { x: &self.vx, u: &self.vu }
    }

    fn test(&self) -> Samples<'_> {
        Samples { x: &self.tex, u: &self.teu }
    }
}

/// Runs the configured experiment.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.check()?;
    let seed = cfg.seed;
    match &cfg.experiment {
        Experiment::MatchingRegret(c) => matching_regret(c, seed),
        Experiment::NewsvendorE2e(c) => newsvendor_e2e(c, seed),
        Experiment::NewsvendorNofeature(c) => newsvendor_nofeature(c, seed),
        Experiment::NewsvendorQuadratic(c) => newsvendor_quadratic(c, seed),
        Experiment::CrossfulfillTwoStage(c) => crossfulfill(c, seed),
        Experiment::ElectricityE2e(c) => electricity(c, seed),
        Experiment::ShortestpathE2e(c) => shortest_path(c, seed),
        Experiment::ToyViz(c) => toy_viz(c, seed),
    }
}

fn matching_regret(c: &MatchingRegret, seed: u64) -> Result<RunOutput> {
    let p = build_problem(&ProblemKind::Matching { n: c.n })?;
    let u_dim = p.u_dim();
    let total = c.train_samples + c.test_samples;
    let ds = datagen::generate(
        &GeneratorSpec::Uniform {
            samples: total,
            dim: u_dim,
            lo: 0.0,
            hi: 1.0,
        },
        seed,
        SplitSpec {
            val: 0.0,
            test: c.test_samples as f64 / total as f64,
        },
    )?;
    let (_, train) = ds.train();
    let (_, test) = ds.test();
    let m0 = UpdateRuleModel::new(c.model, Construction::Symmetric, p.dim(), u_dim, c.init, seed)?;
    let src = UniformSource {
        count: c.fresh_samples,
        dim: u_dim,
        lo: 0.0,
        hi: 1.0,
    };
    let source: Option<&dyn crate::metatrain::SampleSource> = (c.fresh_samples > 0).then_some(&src as _);
    let out = train_update_rule_with(&p, &train, &m0, &c.meta, source)?;
    let bench = Benchmark::new(&p, &test)?;
    let pgd = UpdateRuleModel::zero(p.dim(), u_dim);
    let mut report = Report::new("matching-regret", seed, "mean relative regret");
    let mut curve = Table::new("regret_curve.csv", &["iterations", "projectnet", "pgd"]);
    let t0 = c.meta.solver.iterations;
    for &t1 in &c.sweep {
        let s = c.meta.solver.with_iterations(t1);
        let a = bench.evaluate(&out.model, &s)?.mean_relative_regret;
        let b = bench.evaluate(&pgd, &s)?.mean_relative_regret;
        curve.rows.push(vec![t1 as f64, a, b]);
        report.rows.push(ReportRow::new("ProjectNet", Some(format!("T1={t1}")), a, epoch_time(&out.history)));
        report.rows.push(ReportRow::new("PGD", Some(format!("T1={t1}")), b, None));
        if t1 == t0 {
            report.summary.insert("projectnet_regret_t0".into(), a);
            report.summary.insert("pgd_regret_t0".into(), b);
            report.summary.insert("improvement_t0".into(), (b - a) / b);
        }
    }
    let test_t0 = bench.evaluate(&out.model, &c.meta.solver)?.mean_relative_regret;
    let mut run = RunOutput::new(report);
    run.phase("projectnet", &out.history, test_t0);
    run.tables.push(curve);
    run.checkpoint("update_rule.json", &out.model)?;
    Ok(run)
}

fn newsvendor_e2e(c: &NewsvendorE2e, seed: u64) -> Result<RunOutput> {
    let k = c.products;
    let ds = datagen::generate(
        &GeneratorSpec::Newsvendor {
            samples: c.samples,
            features: c.features,
            products: k,
            hidden: c.hidden,
            scale: 1.0,
        },
        seed,
        c.split,
    )?;
    let s = Split::of(&ds);
    let mean_total = s.tru.iter().map(|u| u.iter().sum::<f64>()).sum::<f64>() / s.tru.len().max(1) as f64;
    let cap = c.capacity_fraction * mean_total;
    let (h, b) = c.costs();
    let lifted = build_problem(&ProblemKind::LiftedNewsvendor {
        h: h.clone(),
        b: b.clone(),
        capacity: Some(cap),
    })?;
    let plain = build_problem(&ProblemKind::CapacitatedNewsvendor {
        h: h.clone(),
        b: b.clone(),
        capacity: Some(cap),
    })?;
    let mean_cost = |ws: &[Vec<f64>]| ws.iter().zip(&s.teu).map(|(w, u)| plain.cost(u, w)).sum::<f64>() / ws.len().max(1) as f64;

    let saa = newsvendor_saa(&s.tru, Some(cap), &h, &b)?;
    let saa_cost = mean_cost(&vec![saa.w.clone(); s.teu.len()]);
    let knn: Vec<Vec<f64>> = s
        .tex
        .iter()
        .map(|x| knn_saa(&s.trx, &s.tru, x, c.neighbours.min(s.trx.len()), Some(cap), &h, &b).map(|r| r.w))
        .collect::<Result<_>>()?;
    let knn_cost = mean_cost(&knn);

    let mut f0 = Forecaster::new(Architecture::Affine, OutputLayer::Identity, c.features, k, seed)?;
    f0.calibrate(&s.trx, &s.tru);
    let pto = PredictThenOptimize::fit(&f0, s.train(), s.val(), &c.forecast)?;
    let pto_cost = pto.evaluate(&plain, s.test())?;

    let m = UpdateRuleModel::zero(lifted.dim(), k);
    let e2e = train_forecaster(&lifted, &m, &pto.forecaster, s.train(), s.val(), &c.end_to_end)?;
    let eval = SolveConfig {
        polish: true,
        ..c.end_to_end.solver
    };
    let e2e_cost = evaluate_forecaster(&e2e.forecaster, &lifted, s.test(), &DecisionMode::Approximate { model: &m, solver: eval })?;
    let e2e_exact = evaluate_forecaster(&e2e.forecaster, &plain, s.test(), &DecisionMode::Exact)?;

    let mut report = Report::new("newsvendor-e2e", seed, "mean test decision cost");
    report.rows.push(ReportRow::new("SAA", None, saa_cost, None));
    report.rows.push(ReportRow::new("kNN-SAA", Some(format!("k={}", c.neighbours)), knn_cost, None));
    report.rows.push(ReportRow::new("predict-then-optimize", None, pto_cost, epoch_time(&pto.history)));
    report.rows.push(ReportRow::new("end-to-end", None, e2e_cost, epoch_time(&e2e.history)));
    report.rows.push(ReportRow::new("end-to-end", Some("exact decisions".into()), e2e_exact, None));
    report.summary.insert("capacity".into(), cap);
    report.summary.insert("oracle_calls_in_training".into(), e2e.history.oracle_calls() as f64);
    let mut run = RunOutput::new(report);
    run.phase("predict-then-optimize", &pto.history, pto_cost);
    run.phase("end-to-end", &e2e.history, e2e_cost);
    run.checkpoint("forecaster.json", &e2e.forecaster)?;
    run.checkpoint("forecaster_mse.json", &pto.forecaster)?;
    Ok(run)
}

fn newsvendor_nofeature(c: &NewsvendorNofeature, seed: u64) -> Result<RunOutput> {
    use rand::Rng;
    let k = c.products;
    let mut r = random::rng(seed);
    let us: Vec<Vec<f64>> = (0..c.samples)
        .map(|_| (0..k).map(|j| r.gen_range(0.0..(2.0 + j as f64))).collect())
        .collect();
    let (h, b) = c.costs();
    let mut report = Report::new("newsvendor-nofeature", seed, "mean sample cost");
    let mut table = Table::new("nofeature.csv", &["capacity", "saa", "projected_descent", "gap_percent"]);
    let mut worst: f64 = 0.0;
    for &cap in &c.capacities {
        let p = build_problem(&ProblemKind::CapacitatedNewsvendor {
            h: h.clone(),
            b: b.clone(),
            capacity: Some(cap),
        })?;
        let mean = |w: &[f64]| us.iter().map(|u| p.cost(u, w)).sum::<f64>() / us.len() as f64;
        let saa = mean(&newsvendor_saa(&us, Some(cap), &h, &b)?.w);
        let w = projected_descent_saa(&p, &us, &c.descent)?;
        let pd = mean(&w);
        let gap = 100.0 * (pd - saa) / saa.abs().max(1e-12);
        worst = worst.max(gap);
        table.rows.push(vec![cap, saa, pd, gap]);
        let setting = Some(format!("C={cap}"));
        report.rows.push(ReportRow::new("SAA", setting.clone(), saa, None));
        report.rows.push(ReportRow::new("projected descent", setting, pd, None));
    }
    report.summary.insert("max_gap_percent".into(), worst);
    let mut run = RunOutput::new(report);
    run.tables.push(table);
    Ok(run)
}

fn newsvendor_quadratic(c: &NewsvendorQuadratic, seed: u64) -> Result<RunOutput> {
    let k = c.support.len();
    let ds = datagen::generate(
        &GeneratorSpec::QuadraticNewsvendor {
            samples: c.samples,
            features: c.features,
            support: k,
        },
        seed,
        c.split,
    )?;
    let s = Split::of(&ds);
    let p = build_problem(&c.problem_kind())?;

    // Point forecast of the demand, then the best stock for that demand.
    let demand = |us: &[Vec<f64>]| -> Vec<Vec<f64>> {
        us.iter()
            .map(|u| vec![u.iter().zip(&c.support).map(|(a, d)| a * d).sum()])
            .collect()
    };
    let (trd, vd) = (demand(&s.tru), demand(&s.vu));
    let mut fp = Forecaster::new(Architecture::Affine, OutputLayer::Identity, c.features, 1, seed)?;
    fp.calibrate(&s.trx, &trd);
    let point = PredictThenOptimize::fit(&fp, Samples::new(&s.trx, &trd)?, Samples::new(&s.vx, &vd)?, &c.forecast)?;
    let mut point_cost = 0.0;
    for (x, u) in s.tex.iter().zip(&s.teu) {
        let d = point.forecaster.forward(x)?[0].max(0.0);
        let w = quadratic_newsvendor_point(p.objective(), d)?.w;
        point_cost += p.cost(u, &w);
    }
    point_cost /= s.tex.len().max(1) as f64;

    // Distribution forecast fitted by squared error, then the exact decision.
    let mut fd = Forecaster::new(Architecture::Affine, OutputLayer::Softmax, c.features, k, seed)?;
    fd.calibrate(&s.trx, &s.tru);
    let dist = PredictThenOptimize::fit(&fd, s.train(), s.val(), &c.forecast)?;
    let dist_cost = dist.evaluate(&p, s.test())?;

    let m = UpdateRuleModel::zero(1, k);
    let e2e = train_forecaster(&p, &m, &dist.forecaster, s.train(), s.val(), &c.end_to_end)?;
    let e2e_cost = evaluate_forecaster(
        &e2e.forecaster,
        &p,
        s.test(),
        &DecisionMode::Approximate {
            model: &m,
            solver: c.end_to_end.solver,
        },
    )?;
    let e2e_exact = evaluate_forecaster(&e2e.forecaster, &p, s.test(), &DecisionMode::Exact)?;

    let mut report = Report::new("newsvendor-quadratic", seed, "mean test decision cost");
    report.rows.push(ReportRow::new("predict-then-optimize", None, point_cost, epoch_time(&point.history)));
    report.rows.push(ReportRow::new(
        "predict-then-optimize",
        Some("distribution forecast".into()),
        dist_cost,
        epoch_time(&dist.history),
    ));
    report.rows.push(ReportRow::new("end-to-end", None, e2e_cost, epoch_time(&e2e.history)));
    report.rows.push(ReportRow::new("end-to-end", Some("exact decisions".into()), e2e_exact, None));
    let mut run = RunOutput::new(report);
    run.phase("predict-then-optimize", &point.history, point_cost);
    run.phase("distribution-mse", &dist.history, dist_cost);
    run.phase("end-to-end", &e2e.history, e2e_cost);
    run.checkpoint("forecaster.json", &e2e.forecaster)?;
    Ok(run)
}

fn crossfulfill(c: &CrossfulfillTwoStage, seed: u64) -> Result<RunOutput> {
    let n = c.locations;
    let ds = datagen::generate(
        &GeneratorSpec::CrossFulfill {
            samples: c.samples,
            features: c.features,
            clients: n,
        },
        seed,
        c.split,
    )?;
    let s = Split::of(&ds);
    let (first, second) = c.problems()?;
    let m = UpdateRuleModel::zero(second.dim(), second.u_dim());
    let stage = TwoStage::new(first, vec![c.order_cost; n], second, m)?;
    let mut f0 = Forecaster::new(Architecture::Affine, OutputLayer::Identity, c.features, n, seed)?;
    f0.calibrate(&s.trx, &s.tru);
    let pto = PredictThenOptimize::fit(&f0, s.train(), s.val(), &c.forecast)?;
    let pto_cost = evaluate_two_stage_pto(&stage, &pto.forecaster, s.test())?;
    let rule0 = DecisionRule::new(pto.forecaster.clone(), c.decision_cycles)?;
    let e2e = train_two_stage(&stage, &rule0, s.train(), s.val(), &c.end_to_end)?;
    let e2e_cost = evaluate_two_stage(&stage, &e2e.rule, s.test())?;
    let mut report = Report::new("crossfulfill-2stage", seed, "mean test first- plus second-stage cost");
    report.rows.push(ReportRow::new("predict-then-optimize", None, pto_cost, epoch_time(&pto.history)));
    report.rows.push(ReportRow::new("end-to-end", None, e2e_cost, epoch_time(&e2e.history)));
    let mut run = RunOutput::new(report);
    run.phase("predict-then-optimize", &pto.history, pto_cost);
    run.phase("end-to-end", &e2e.history, e2e_cost);
    run.checkpoint("decision_rule.json", &e2e.rule)?;
    Ok(run)
}

fn electricity_forecaster(c: &ElectricityE2e, ds: &DecisionDataset, s: &Split, seed: u64) -> Result<Forecaster> {
    let arch = Architecture::TwoLayer {
        width: c.width,
        residual: c.residual,
    };
    let mut f = Forecaster::new(arch, OutputLayer::Identity, ds.features(), ds.dim(), seed)?;
    f.calibrate(&s.trx, &s.tru);
    Ok(f)
}

fn electricity(c: &ElectricityE2e, seed: u64) -> Result<RunOutput> {
    let h = c.options.horizon;
    let ds = c.dataset(h, seed)?;
    let s = Split::of(&ds);
    let p = build_problem(&c.problem_kind(h))?;
    let f0 = electricity_forecaster(c, &ds, &s, seed)?;
    let pto = PredictThenOptimize::fit(&f0, s.train(), s.val(), &c.forecast)?;
    let pto_cost = pto.evaluate(&p, s.test())?;
    let m = UpdateRuleModel::zero(h, h);
    let e2e = train_forecaster(&p, &m, &pto.forecaster, s.train(), s.val(), &c.end_to_end)?;
    let eval = SolveConfig {
        polish: true,
        ..c.end_to_end.solver
    };
    let e2e_cost = evaluate_forecaster(&e2e.forecaster, &p, s.test(), &DecisionMode::Approximate { model: &m, solver: eval })?;
    let mut report = Report::new("electricity-e2e", seed, "mean test scheduling cost");
    report.rows.push(ReportRow::new("predict-then-optimize", None, pto_cost, epoch_time(&pto.history)));
    report.rows.push(ReportRow::new("end-to-end", None, e2e_cost, epoch_time(&e2e.history)));
    report.summary.insert("windows".into(), ds.len() as f64);
    let mut run = RunOutput::new(report);
    run.phase("predict-then-optimize", &pto.history, pto_cost);
    run.phase("end-to-end", &e2e.history, e2e_cost);
    run.checkpoint("forecaster.json", &e2e.forecaster)?;
    Ok(run)
}

fn shortest_path(c: &ShortestpathE2e, seed: u64) -> Result<RunOutput> {
    let ds = datagen::generate(
        &GeneratorSpec::GridCosts {
            samples: c.samples,
            features: c.features,
            grid: c.grid,
            hidden: c.hidden,
        },
        seed,
        c.split,
    )?;
    let s = Split::of(&ds);
    let p = build_problem(&ProblemKind::ShortestPath { grid: c.grid })?;
    let mut f0 = Forecaster::new(Architecture::Affine, OutputLayer::Identity, c.features, p.u_dim(), seed)?;
    f0.calibrate(&s.trx, &s.tru);
    let pto = PredictThenOptimize::fit(&f0, s.train(), s.val(), &c.forecast)?;
    let pto_cost = pto.evaluate(&p, s.test())?;
    let m = UpdateRuleModel::zero(p.dim(), p.u_dim());
    let e2e = train_forecaster(&p, &m, &pto.forecaster, s.train(), s.val(), &c.end_to_end)?;
    let e2e_exact = evaluate_forecaster(&e2e.forecaster, &p, s.test(), &DecisionMode::Exact)?;
    let eval = SolveConfig {
        polish: true,
        ..c.end_to_end.solver
    };
    let e2e_cost = evaluate_forecaster(&e2e.forecaster, &p, s.test(), &DecisionMode::Approximate { model: &m, solver: eval })?;
    let optimal = s
        .teu
        .iter()
        .map(|u| oracles::optimum(&p, u).map(|r| r.objective))
        .sum::<Result<f64>>()?
        / s.teu.len().max(1) as f64;
    let mut report = Report::new("shortestpath-e2e", seed, "mean test path cost");
    report.rows.push(ReportRow::new("predict-then-optimize", None, pto_cost, epoch_time(&pto.history)));
    report.rows.push(ReportRow::new("end-to-end", None, e2e_cost, epoch_time(&e2e.history)));
    report.rows.push(ReportRow::new("end-to-end", Some("exact decisions".into()), e2e_exact, None));
    report.rows.push(ReportRow::new("oracle", Some("true costs".into()), optimal, None));
    let mut run = RunOutput::new(report);
    run.phase("predict-then-optimize", &pto.history, pto_cost);
    run.phase("end-to-end", &e2e.history, e2e_cost);
    run.checkpoint("forecaster.json", &e2e.forecaster)?;
    Ok(run)
}

/// Vertices of the toy polytope `w₁ + 2w₂ ≥ 1, 2w₁ + w₂ ≥ 1, w ≥ 0`.
pub const TOY_VERTICES: [[f64; 2]; 3] = [[0.0, 1.0], [1.0 / 3.0, 1.0 / 3.0], [1.0, 0.0]];

/// Fraction of points within `tol` of a toy vertex, and the largest step
/// between consecutive points.
pub fn vertex_concentration(ws: &[Vec<f64>], tol: f64) -> (f64, f64) {
    let near = ws
        .iter()
        .filter(|w| TOY_VERTICES.iter().any(|v| linalg::dist(w, v) <= tol))
        .count();
    let jump = ws.windows(2).map(|p| linalg::dist(&p[0], &p[1])).fold(0.0, f64::max);
    (near as f64 / ws.len().max(1) as f64, jump)
}

fn toy_viz(c: &ToyViz, seed: u64) -> Result<RunOutput> {
    let p = build_problem(&ProblemKind::ToyPolytope)?;
    let ds = datagen::generate(
        &GeneratorSpec::Uniform {
            samples: c.train_samples,
            dim: 2,
            lo: 0.0,
            hi: 1.0,
        },
        seed,
        SplitSpec { val: 0.0, test: 0.0 },
    )?;
    let (_, train) = ds.train();
    let m0 = UpdateRuleModel::new(c.model, Construction::Symmetric, 2, 2, c.init, seed)?;
    let out = train_update_rule_with(&p, &train, &m0, &c.meta, None)?;
    let us = datagen::gen_circle_costs(c.circle_points)?;
    let pgd = UpdateRuleModel::zero(2, 2);
    let mut table = Table::new("toy_viz.csv", &["m", "u1", "u2", "w1", "w2", "pgd_w1", "pgd_w2"]);
    let mut ws = Vec::with_capacity(us.len());
    let mut gs = Vec::with_capacity(us.len());
    for (i, u) in us.iter().enumerate() {
        let w = projectnet_solve(&p, &out.model, u, &c.meta.solver)?.w;
        let g = projectnet_solve(&p, &pgd, u, &c.meta.solver)?.w;
        table.rows.push(vec![i as f64, u[0], u[1], w[0], w[1], g[0], g[1]]);
        ws.push(w);
        gs.push(g);
    }
    let (near, jump) = vertex_concentration(&ws, c.vertex_tolerance);
    let (pgd_near, pgd_jump) = vertex_concentration(&gs, c.vertex_tolerance);
    let objective = |ws: &[Vec<f64>]| ws.iter().zip(&us).map(|(w, u)| linalg::dot(u, w)).sum::<f64>() / us.len() as f64;
    let mut report = Report::new("toy-viz", seed, "mean objective over the circle sweep");
    report.rows.push(ReportRow::new("ProjectNet", None, objective(&ws), epoch_time(&out.history)));
    report.rows.push(ReportRow::new("PGD", None, objective(&gs), None));
    report.summary.insert("near_vertex_fraction".into(), near);
    report.summary.insert("max_jump".into(), jump);
    report.summary.insert("pgd_near_vertex_fraction".into(), pgd_near);
    report.summary.insert("pgd_max_jump".into(), pgd_jump);
    let mut run = RunOutput::new(report);
    let test = objective(&ws);
    run.phase("projectnet", &out.history, test);
    run.tables.push(table);
    run.checkpoint("update_rule.json", &out.model)?;
    Ok(run)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Per-epoch training time of the end-to-end forecaster and of the
/// oracle-in-the-loop baseline over the configured horizons.
pub fn bench(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.check()?;
    let Experiment::ElectricityE2e(c) = &cfg.experiment else {
        return Err(Error::Config(format!(
            "bench needs an electricity-e2e config, got {}",
            cfg.experiment.id()
        )));
    };
    if c.bench.horizons.is_empty() || c.bench.samples == 0 || c.bench.epochs == 0 {
        return Err(Error::Config("bench needs horizons, samples and epochs".into()));
    }
    let seed = cfg.seed;
    let schedule = TrainSchedule {
        epochs: c.bench.epochs,
        patience: 0,
        ..c.end_to_end.schedule
    };
    let mut report = Report::new("electricity-e2e", seed, "final training loss");
    let mut table = Table::new("timing.csv", &["size", "projectnet", "oracle_in_loop"]);
    for &h in &c.bench.horizons {
        let ds = c.dataset(h, seed)?;
        let s = Split::of(&ds);
        let n = c.bench.samples.min(s.trx.len());
        let (x, u) = (&s.trx[..n], &s.tru[..n]);
        let p = build_problem(&c.problem_kind(h))?;
        let f0 = electricity_forecaster(c, &ds, &s, seed)?;
        let m = UpdateRuleModel::zero(h, h);
        let none = Samples::new(&[], &[])?;
        let cfg_e2e = EndToEndConfig {
            schedule,
            ..c.end_to_end
        };
        let a = train_forecaster(&p, &m, &f0, Samples::new(x, u)?, none, &cfg_e2e)?;
        let b = train_forecaster_oracle_loop(&p, &f0, Samples::new(x, u)?, none, &schedule)?;
        let (ta, tb) = (epoch_time(&a.history).unwrap_or(0.0), epoch_time(&b.history).unwrap_or(0.0));
        table.rows.push(vec![h as f64, ta, tb]);
        let setting = Some(format!("H={h}"));
        let last = |hist: &LossHistory| hist.records.last().map_or(f64::NAN, |r| r.train_loss);
        report.rows.push(ReportRow::new("ProjectNet", setting.clone(), last(&a.history), Some(ta)));
        report.rows.push(ReportRow::new("oracle-in-loop", setting, last(&b.history), Some(tb)));
    }
    if table.rows.len() >= 2 {
        let sizes = table.column("size").expect("size column");
        let sa = loglog_slope(&sizes, &table.column("projectnet").expect("column"));
        let sb = loglog_slope(&sizes, &table.column("oracle_in_loop").expect("column"));
        report.summary.insert("projectnet_slope".into(), sa);
        report.summary.insert("oracle_in_loop_slope".into(), sb);
    }
    let mut run = RunOutput::new(report);
    run.tables.push(table);
    Ok(run)
}

/// Process exit code for a failed run: 1 for configuration and input
/// errors, 2 for divergence, 3 for infeasibility.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::IllConditioned(_) => 2,
        Error::Infeasible(_) | Error::RankDeficient { .. } => 3,
        _ => 1,
    }
}
