//! Experiment configuration, baseline/neural runs, parameter sweeps and
//! run-directory reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{CostError, CostSpec};
use crate::env::{rollout, DynamicsError, InaccuracySpec, PlantModel, PlantParams};
use crate::ilqr::{solve_model_based, IlqrError, Problem, SolveReport, SolverSettings, Trajectory};
use crate::neural::{Architecture, FilterConfig, NetworkSpec, TrainSettings};
use crate::neural_loop::{solve_neural_ilqr, LoopError, LoopRecord, LoopSettings, NeuralRun, RunMetrics};
use crate::par::Execution;
use crate::StateVector;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("corrupt run file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("no runs found in {0}")]
    NoRuns(PathBuf),
    #[error("comparison mismatch: {0}")]
    UnfairComparison(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Ilqr(#[from] IlqrError),
    #[error(transparent)]
    Loop(#[from] LoopError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// When a run counts as solving the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SuccessCriterion {
    /// `|θ| ≤ threshold` over the final `tail_fraction` of the states.
    Upright { threshold: f64, tail_fraction: f64 },
    /// Weighted distance `sqrt(Σ wᵢ (x_T,i − rᵢ)²)` of the final state from
    /// the cost reference is at most `tolerance`.
    Terminal { weights: Vec<f64>, tolerance: f64 },
}

impl SuccessCriterion {
    pub fn upright() -> Self {
        SuccessCriterion::Upright {
            threshold: 0.2,
            tail_fraction: 0.1,
        }
    }

    pub fn terminal() -> Self {
        SuccessCriterion::Terminal {
            weights: vec![0.0, 1.0, 1.0, 1.0],
            tolerance: 1e-2,
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<(), ExperimentError> {
        let ok = match self {
            SuccessCriterion::Upright {
                threshold,
                tail_fraction,
            } => *threshold > 0.0 && *tail_fraction > 0.0 && *tail_fraction <= 1.0,
            SuccessCriterion::Terminal { weights, tolerance } => {
                weights.len() == state_dim && weights.iter().all(|w| *w >= 0.0) && *tolerance > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ExperimentError::InvalidConfig(format!(
                "invalid success criterion {self:?}"
            )))
        }
    }

    /// Final states checked by the upright test (at least one).
    pub fn tail_len(tail_fraction: f64, states: usize) -> usize {
        ((tail_fraction * states as f64).ceil() as usize).clamp(1, states.max(1))
    }

    pub fn evaluate(&self, traj: &Trajectory, reference: &StateVector) -> bool {
        match self {
            SuccessCriterion::Upright {
                threshold,
                tail_fraction,
            } => {
                let n = traj.states.len();
                let tail = Self::tail_len(*tail_fraction, n);
                traj.states[n - tail..].iter().all(|x| x[0].abs() <= *threshold)
            }
            SuccessCriterion::Terminal { weights, tolerance } => {
                terminal_distance(traj, reference, weights).is_some_and(|d| d <= *tolerance)
            }
        }
    }
}

pub fn terminal_distance(traj: &Trajectory, reference: &StateVector, weights: &[f64]) -> Option<f64> {
    let x = traj.states.last()?;
    Some(
        weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * (x[i] - reference[i]).powi(2))
            .sum::<f64>()
            .sqrt(),
    )
}

/// Index of the angle whose squared error is reported as θ_error.
pub fn angle_index(plant: &PlantParams) -> usize {
    match plant.model {
        PlantModel::Cartpole(_) => 0,
        PlantModel::Vehicle(_) => 2,
    }
}

/// Mean of `(θ − θ_ref)²` over every state of the trajectory.
pub fn theta_error(traj: &Trajectory, index: usize, reference: f64) -> f64 {
    let n = traj.states.len().max(1) as f64;
    traj.states.iter().map(|x| (x[index] - reference).powi(2)).sum::<f64>() / n
}

/// `Σ_t Σ_j |u_{t+1,j} − u_{t,j}|`
pub fn total_variation(actions: &[crate::ActionVector]) -> f64 {
    actions.windows(2).map(|w| (&w[1] - &w[0]).abs().sum()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Nominal parameters: what the model-based baseline believes.
    pub plant: PlantParams,
    /// Mismatch between the nominal parameters and the executing plant.
    pub inaccuracy: InaccuracySpec,
    pub cost: CostSpec,
    pub x0: Vec<f64>,
    pub horizon: usize,
    pub network: NetworkSpec,
    #[serde(rename = "loop")]
    pub loop_settings: LoopSettings,
    pub baseline: SolverSettings,
    pub success: SuccessCriterion,
    pub repeats: usize,
    pub seed: u64,
    pub execution: Execution,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Swing-up from hanging, small network, desk-scale training budget.
    pub fn cartpole() -> Self {
        let plant = PlantParams::cartpole();
        Self {
            name: "cartpole".into(),
            inaccuracy: InaccuracySpec::none(),
            cost: CostSpec::cartpole_default(),
            x0: vec![std::f64::consts::PI, 0.0, 0.0, 0.0],
            horizon: 150,
            network: NetworkSpec::new(Architecture::SmallFcnn, 4, 1),
            loop_settings: LoopSettings {
                action_scale: vec![10.0],
                ..LoopSettings::default()
            },
            baseline: SolverSettings::default(),
            success: SuccessCriterion::upright(),
            repeats: 5,
            seed: 0,
            execution: Execution::default(),
            output_dir: None,
            plant,
        }
    }

    /// Lane keeping at `r = [0, -10, 0, 8]` from a slower, offset start.
    pub fn vehicle() -> Self {
        let plant = PlantParams::vehicle();
        Self {
            name: "vehicle".into(),
            inaccuracy: InaccuracySpec {
                fraction: 0.0,
                parameters: vec![crate::env::PlantParameter::Wheelbase],
            },
            cost: CostSpec::vehicle_default(),
            x0: vec![0.0, -9.0, 0.0, 7.0],
            horizon: 100,
            network: NetworkSpec::new(Architecture::SmallFcnn, 4, 2),
            loop_settings: LoopSettings {
                action_scale: vec![0.5, 3.0],
                ..LoopSettings::default()
            },
            baseline: SolverSettings::default(),
            success: SuccessCriterion::terminal(),
            repeats: 5,
            seed: 0,
            execution: Execution::default(),
            output_dir: None,
            plant,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "cartpole" => Some(Self::cartpole()),
            "vehicle" => Some(Self::vehicle()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let invalid = |m: String| Err(ExperimentError::InvalidConfig(m));
        self.plant.validate()?;
        self.inaccuracy.validate()?;
        self.cost.validate()?;
        let (n, m) = match self.plant.model {
            PlantModel::Cartpole(_) => (4, 1),
            PlantModel::Vehicle(_) => (4, 2),
        };
        if self.cost.state_dim() != n || self.cost.action_dim() != m {
            return invalid(format!("cost dimensions do not match the {} plant", self.plant.kind()));
        }
        if self.x0.len() != n || self.x0.iter().any(|v| !v.is_finite()) {
            return invalid(format!("x0 must have {n} finite entries"));
        }
        if self.network.state_dim != n || self.network.action_dim != m {
            return invalid("network dimensions do not match the plant".into());
        }
        if self.horizon == 0 {
            return invalid("horizon must be positive".into());
        }
        if self.repeats == 0 {
            return invalid("repeats must be positive".into());
        }
        self.network
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        self.loop_settings.validate(m)?;
        self.success.validate(n)
    }

    pub fn x0_vector(&self) -> StateVector {
        DVector::from_column_slice(&self.x0)
    }

    pub fn executing_plant(&self) -> Result<PlantParams, ExperimentError> {
        Ok(self.plant.perturbed(&self.inaccuracy)?)
    }

    pub fn problem(&self) -> Problem {
        Problem {
            x0: self.x0_vector(),
            horizon: self.horizon,
            cost: self.cost.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string(self).map_err(|e| ExperimentError::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config = Self::from_toml(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        fs::write(path, self.to_toml()?).map_err(io_err(path))
    }

    /// Copy with the given seed in both the config and the loop settings.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.loop_settings.seed = seed;
        c
    }

    /// Seeds of the configured repeats.
    pub fn repeat_seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed + i).collect()
    }

    /// What two runs must share to be compared: cost, start, horizon, step
    /// and executing plant.
    pub fn comparison_key(&self) -> Result<ComparisonKey, ExperimentError> {
        Ok(ComparisonKey {
            cost: self.cost.clone(),
            x0: self.x0.clone(),
            horizon: self.horizon,
            dt: self.plant.dt,
            executing_plant: self.executing_plant()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonKey {
    pub cost: CostSpec,
    pub x0: Vec<f64>,
    pub horizon: usize,
    pub dt: f64,
    pub executing_plant: PlantParams,
}

impl ComparisonKey {
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("comparison key serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Refuses to compare runs whose comparison keys differ.
pub fn check_comparable(a: &RunManifest, b: &RunManifest) -> Result<(), ExperimentError> {
    if a.comparison_hash == b.comparison_hash {
        Ok(())
    } else {
        Err(ExperimentError::UnfairComparison(format!(
            "{} run {} and {} run {}",
            a.method, a.comparison_hash, b.method, b.comparison_hash
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ModelBased,
    Neural,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ModelBased => "model-based",
            Method::Neural => "neural",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub seed: u64,
    pub comparison_hash: String,
    pub executing_plant: PlantParams,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, method: Method) -> Result<Self, ExperimentError> {
        let key = config.comparison_key()?;
        Ok(Self {
            method,
            seed: config.seed,
            comparison_hash: key.digest(),
            executing_plant: key.executing_plant,
            config: config.clone(),
        })
    }
}

/// One row of `iterations.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRow {
    pub iteration: usize,
    pub objective: f64,
    pub event: String,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub metrics: RunMetrics,
    pub trajectory: Trajectory,
    pub iterations: Vec<IterationRow>,
}

fn finish_metrics(metrics: &mut RunMetrics, config: &ExperimentConfig, traj: &Trajectory) {
    let reference = config.cost.effective_reference();
    let idx = angle_index(&config.plant);
    metrics.theta_error = Some(theta_error(traj, idx, reference[idx]));
    metrics.success = Some(config.success.evaluate(traj, &reference));
}

/// Plans with the nominal parameters, then executes the planned actions
/// open-loop on the executing plant. With zero inaccuracy this is a plain
/// model-based solve.
pub fn run_baseline(config: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    config.validate()?;
    let report: SolveReport = solve_model_based(&config.plant, &config.problem(), &config.baseline)?;
    let executing = config.executing_plant()?;
    let executed = if executing == config.plant {
        report.trajectory.clone()
    } else {
        rollout(&executing, &config.x0_vector(), &report.trajectory.actions)?
    };
    let executed_cost = config.cost.total_cost(&executed)?;
    let initial = report.objective_curve[0];
    let mut metrics = RunMetrics::from_curve(initial, report.objective_curve[1..].to_vec());
    // The planner's curve describes the model; the reported objective is
    // what the executing plant delivered.
    metrics.best_objective = executed_cost;
    metrics.total_time = report.wall_time;
    metrics.iteration_times = vec![report.wall_time / report.iterations.max(1) as f64; report.iterations];
    if executing != config.plant {
        metrics
            .notes
            .push("planned on nominal parameters, executed open-loop".into());
    }
    finish_metrics(&mut metrics, config, &executed);
    let iterations = report
        .records
        .iter()
        .map(|r| IterationRow {
            iteration: r.iteration,
            objective: r.objective,
            event: if r.alpha.is_some() { "accepted" } else { "stalled" }.into(),
        })
        .collect();
    Ok(RunOutput {
        manifest: RunManifest::new(config, Method::ModelBased)?,
        metrics,
        trajectory: executed,
        iterations,
    })
}

fn loop_rows(records: &[LoopRecord]) -> Vec<IterationRow> {
    records
        .iter()
        .map(|r| IterationRow {
            iteration: r.iteration,
            objective: r.objective,
            event: r.event.as_str().into(),
        })
        .collect()
}

/// Neural-model iLQR against the executing plant. Only the executing plant is
/// handed to the solver; the nominal parameters are never consulted.
pub fn run_neural(config: &ExperimentConfig) -> Result<(RunOutput, NeuralRun), ExperimentError> {
    config.validate()?;
    let executing = config.executing_plant()?;
    let mut settings = config.loop_settings.clone();
    settings.seed = config.seed;
    let run = solve_neural_ilqr(
        &executing,
        &config.cost,
        &config.x0_vector(),
        config.horizon,
        &config.network,
        &settings,
    )?;
    let mut metrics = run.metrics.clone();
    finish_metrics(&mut metrics, config, &run.trajectory);
    let out = RunOutput {
        manifest: RunManifest::new(config, Method::Neural)?,
        metrics,
        trajectory: run.trajectory.clone(),
        iterations: loop_rows(&run.records),
    };
    Ok((out, run))
}

/// Sets `neural.d` relative to `baseline` after checking the two runs are
/// comparable.
pub fn attach_deviation(neural: &mut RunOutput, baseline: &RunOutput) -> Result<(), ExperimentError> {
    check_comparable(&neural.manifest, &baseline.manifest)?;
    neural.metrics.d = Some(neural.metrics.best_objective - baseline.metrics.best_objective);
    Ok(())
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.actions.first().map_or(0, |u| u.len());
    let mut out = String::from("t");
    (0..n).for_each(|i| write!(out, ",x{i}").unwrap());
    (0..m).for_each(|j| write!(out, ",u{j}").unwrap());
    out.push('\n');
    for (t, x) in traj.states.iter().enumerate() {
        write!(out, "{t}").unwrap();
        x.iter().for_each(|v| write!(out, ",{v}").unwrap());
        match traj.actions.get(t) {
            Some(u) => u.iter().for_each(|v| write!(out, ",{v}").unwrap()),
            None => (0..m).for_each(|_| out.push(',')),
        }
        out.push('\n');
    }
    out
}

pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let cols: Vec<&str> = header.split(',').collect();
    let n = cols.iter().filter(|c| c.starts_with('x')).count();
    let m = cols.iter().filter(|c| c.starts_with('u')).count();
    if cols.first() != Some(&"t") || cols.len() != 1 + n + m {
        return Err(format!("bad header {header:?}"));
    }
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + n + m {
            return Err(format!("line {}: expected {} fields", i + 2, 1 + n + m));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2));
        let x = fields[1..=n].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
        states.push(DVector::from_vec(x));
        if fields[n + 1..].iter().all(|s| !s.is_empty()) {
            let u = fields[n + 1..].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
            actions.push(DVector::from_vec(u));
        }
    }
    let traj = Trajectory { states, actions };
    if !traj.is_consistent() {
        return Err("state and action counts disagree".into());
    }
    Ok(traj)
}

pub fn iterations_csv(rows: &[IterationRow]) -> String {
    let mut out = String::from("iteration,objective,event\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.iteration, r.objective, r.event).unwrap();
    }
    out
}

/// Writes manifest, metrics, iteration log and trajectory into `dir`.
pub fn write_run(dir: &Path, run: &RunOutput) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))
    };
    write(MANIFEST_FILE, pretty_json(&run.manifest))?;
    write(METRICS_FILE, pretty_json(&run.metrics))?;
    write(ITERATIONS_FILE, iterations_csv(&run.iterations))?;
    write(TRAJECTORY_FILE, trajectory_csv(&run.trajectory))
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    FilterSigma,
    Trials,
    Architecture,
    Inaccuracy,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::FilterSigma => "filter-sigma",
            SweepAxis::Trials => "trials",
            SweepAxis::Architecture => "architecture",
            SweepAxis::Inaccuracy => "inaccuracy",
        }
    }

    /// Config for one axis value.
    pub fn apply(self, config: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, ExperimentError> {
        let bad = || ExperimentError::InvalidConfig(format!("bad {} value {value:?}", self.as_str()));
        let mut c = config.clone();
        match self {
            SweepAxis::FilterSigma => {
                let sigma: f64 = value.parse().map_err(|_| bad())?;
                c.loop_settings.filter = FilterConfig {
                    sigma,
                    ..c.loop_settings.filter
                };
            }
            SweepAxis::Trials => c.loop_settings.trials = value.parse().map_err(|_| bad())?,
            SweepAxis::Architecture => c.network.architecture = value.parse().map_err(|_| bad())?,
            SweepAxis::Inaccuracy => c.inaccuracy.fraction = value.parse().map_err(|_| bad())?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for SweepAxis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "filter-sigma" | "sigma" => Ok(SweepAxis::FilterSigma),
            "trials" | "trials-p" | "p" => Ok(SweepAxis::Trials),
            "architecture" => Ok(SweepAxis::Architecture),
            "inaccuracy" => Ok(SweepAxis::Inaccuracy),
            _ => Err(ExperimentError::InvalidConfig(format!("unknown sweep axis {s:?}"))),
        }
    }
}

/// Outcome of one `(value, seed)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    pub total_variation: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub runs: usize,
    pub failures: usize,
    pub successes: usize,
    pub baseline_objective: Option<f64>,
    pub baseline_success: Option<bool>,
    pub pretrain_time: Option<f64>,
    pub d_min: Option<f64>,
    pub d_avg: Option<f64>,
    pub d_median: Option<f64>,
    pub k_min: Option<usize>,
    pub objective_median: Option<f64>,
    pub total_variation_median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

fn sweep_dir(out: Option<&Path>, axis: SweepAxis, value: &str) -> Option<PathBuf> {
    out.map(|o| o.join(format!("{}-{}", axis.as_str(), value)))
}

/// Runs every `(value, repeat seed)` cell and aggregates per value. Cell
/// failures are recorded and do not stop the sweep.
pub fn sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out: Option<&Path>,
) -> Result<SweepSummary, ExperimentError> {
    config.validate()?;
    let configs: Vec<Result<ExperimentConfig, String>> = values
        .iter()
        .map(|v| axis.apply(config, v).map_err(|e| e.to_string()))
        .collect();
    let baselines: Vec<Result<RunOutput, String>> = configs
        .iter()
        .map(|c| {
            c.as_ref()
                .map_err(Clone::clone)
                .and_then(|c| run_baseline(c).map_err(|e| e.to_string()))
        })
        .collect();
    for (value, baseline) in values.iter().zip(&baselines) {
        if let (Some(dir), Ok(b)) = (sweep_dir(out, axis, value), baseline) {
            write_run(&dir.join("baseline"), b)?;
        }
    }

    let jobs: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|i| config.repeat_seeds().into_iter().map(move |s| (i, s)))
        .collect();
    let cells = config.execution.map(&jobs, |&(i, seed)| {
        let mut cell = SweepCell {
            value: values[i].clone(),
            seed,
            metrics: None,
            total_variation: None,
            error: None,
        };
        let c = match &configs[i] {
            Ok(c) => c.with_seed(seed),
            Err(e) => {
                cell.error = Some(e.clone());
                return cell;
            }
        };
        let result = run_neural(&c).and_then(|(mut run, _)| {
            if let Ok(b) = &baselines[i] {
                attach_deviation(&mut run, b)?;
            }
            if let Some(dir) = sweep_dir(out, axis, &values[i]) {
                write_run(&dir.join(format!("seed-{seed}")), &run)?;
            }
            Ok(run)
        });
        match result {
            Ok(run) => {
                cell.total_variation = Some(total_variation(&run.trajectory.actions));
                cell.metrics = Some(run.metrics);
            }
            Err(e) => cell.error = Some(e.to_string()),
        }
        cell
    });

    let rows = values
        .iter()
        .zip(&baselines)
        .map(|(value, baseline)| {
            let mine: Vec<&SweepCell> = cells.iter().filter(|c| &c.value == value).collect();
            let ok: Vec<&RunMetrics> = mine.iter().filter_map(|c| c.metrics.as_ref()).collect();
            let ds: Vec<f64> = ok.iter().filter_map(|m| m.d).collect();
            let tvs: Vec<f64> = mine.iter().filter_map(|c| c.total_variation).collect();
            let objectives: Vec<f64> = ok.iter().map(|m| m.best_objective).collect();
            SweepRow {
                value: value.clone(),
                runs: mine.len(),
                failures: mine.len() - ok.len(),
                successes: ok.iter().filter(|m| m.success == Some(true)).count(),
                baseline_objective: baseline.as_ref().ok().map(|b| b.metrics.best_objective),
                baseline_success: baseline.as_ref().ok().and_then(|b| b.metrics.success),
                pretrain_time: (!ok.is_empty())
                    .then(|| ok.iter().map(|m| m.pretrain_time).sum::<f64>() / ok.len() as f64),
                d_min: ds.iter().copied().reduce(f64::min),
                d_avg: (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64),
                d_median: median(&ds),
                k_min: ok.iter().map(|m| m.k).min(),
                objective_median: median(&objectives),
                total_variation_median: median(&tvs),
            }
        })
        .collect();
    let summary = SweepSummary { axis, rows, cells };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("summary.csv");
        fs::write(&path, summary.summary_csv()).map_err(io_err(&path))?;
        let path = dir.join("cells.csv");
        fs::write(&path, summary.cells_csv()).map_err(io_err(&path))?;
    }
    Ok(summary)
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), |x| x.to_string())
}

impl SweepSummary {
    pub fn row(&self, value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!(
            "{},runs,failures,successes,baseline_objective,baseline_success,pretrain_time,d_min,d_avg,d_median,k_min,objective_median,total_variation_median\n",
            self.axis.as_str()
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.value,
                r.runs,
                r.failures,
                r.successes,
                opt(&r.baseline_objective),
                opt(&r.baseline_success),
                opt(&r.pretrain_time),
                opt(&r.d_min),
                opt(&r.d_avg),
                opt(&r.d_median),
                opt(&r.k_min),
                opt(&r.objective_median),
                opt(&r.total_variation_median),
            )
            .unwrap();
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        let mut out = format!(
            "{},seed,success,objective,d,k,theta_error,total_variation,pretrain_time,error\n",
            self.axis.as_str()
        );
        for c in &self.cells {
            let m = c.metrics.as_ref();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.value,
                c.seed,
                opt(&m.and_then(|m| m.success)),
                opt(&m.map(|m| m.best_objective)),
                opt(&m.and_then(|m| m.d)),
                opt(&m.map(|m| m.k)),
                opt(&m.and_then(|m| m.theta_error)),
                opt(&c.total_variation),
                opt(&m.map(|m| m.pretrain_time)),
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            )
            .unwrap();
        }
        out
    }
}

/// One row of a report table, recomputed from a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub method: Method,
    pub plant: String,
    pub inaccuracy: f64,
    pub seed: u64,
    pub success: bool,
    pub theta_error: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub table: String,
}

fn find_runs(dir: &Path, found: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    if entries
        .iter()
        .any(|p| p.file_name().is_some_and(|n| n == MANIFEST_FILE))
    {
        found.push(dir.to_path_buf());
    }
    for p in entries.into_iter().filter(|p| p.is_dir()) {
        find_runs(&p, found)?;
    }
    Ok(())
}

fn read_row(root: &Path, dir: &Path) -> Result<ReportRow, ExperimentError> {
    let corrupt = |path: &Path, message: String| ExperimentError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| corrupt(&mpath, e.to_string()))?;
    let tpath = dir.join(TRAJECTORY_FILE);
    let text = fs::read_to_string(&tpath).map_err(io_err(&tpath))?;
    let traj = parse_trajectory_csv(&text).map_err(|e| corrupt(&tpath, e))?;
    let config = &manifest.config;
    let reference = config.cost.effective_reference();
    let idx = angle_index(&config.plant);
    let objective = config
        .cost
        .total_cost(&traj)
        .map_err(|e| corrupt(&tpath, e.to_string()))?;
    Ok(ReportRow {
        run: dir.strip_prefix(root).unwrap_or(dir).display().to_string(),
        method: manifest.method,
        plant: config.plant.kind().into(),
        inaccuracy: config.inaccuracy.fraction,
        seed: manifest.seed,
        success: config.success.evaluate(&traj, &reference),
        theta_error: theta_error(&traj, idx, reference[idx]),
        objective,
    })
}

pub const PLOT_OBJECTIVE_SCRIPT: &str = r#"# Objective per iteration for every run below this directory.
import csv, pathlib, sys
import matplotlib.pyplot as plt

root = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else ".")
for path in sorted(root.rglob("iterations.csv")):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    if rows:
        plt.plot([int(r["iteration"]) for r in rows], [float(r["objective"]) for r in rows],
                 label=str(path.parent.relative_to(root)))
plt.xlabel("iteration")
plt.ylabel("objective")
plt.yscale("log")
plt.legend(fontsize="small")
plt.savefig(root / "objective.png", dpi=150)
"#;

pub const PLOT_TRAJECTORY_SCRIPT: &str = r#"# States and actions of every run below this directory.
import csv, pathlib, sys
import matplotlib.pyplot as plt

root = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else ".")
fig, (ax_x, ax_u) = plt.subplots(2, 1, sharex=True)
for path in sorted(root.rglob("trajectory.csv")):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    t = [int(r["t"]) for r in rows]
    label = str(path.parent.relative_to(root))
    ax_x.plot(t, [float(r["x0"]) for r in rows], label=label)
    u = [(int(r["t"]), float(r["u0"])) for r in rows if r["u0"]]
    ax_u.plot([a for a, _ in u], [b for _, b in u], label=label)
ax_x.set_ylabel("x0")
ax_u.set_ylabel("u0")
ax_u.set_xlabel("step")
ax_x.legend(fontsize="small")
fig.savefig(root / "trajectory.png", dpi=150)
"#;

/// Summarizes every run under `dir` and writes `report.txt`, `report.csv`
/// and the plot scripts next to them.
pub fn report(dir: &Path) -> Result<Report, ExperimentError> {
    if !dir.is_dir() {
        return Err(ExperimentError::NoRuns(dir.to_path_buf()));
    }
    let mut runs = Vec::new();
    find_runs(dir, &mut runs)?;
    if runs.is_empty() {
        return Err(ExperimentError::NoRuns(dir.to_path_buf()));
    }
    let rows = runs.iter().map(|r| read_row(dir, r)).collect::<Result<Vec<_>, _>>()?;

    let mut table = String::new();
    writeln!(table, "Success: |theta| <= threshold over the horizon tail (cartpole) or weighted terminal distance within tolerance (vehicle).").unwrap();
    writeln!(
        table,
        "theta_error: mean squared angle error over the trajectory. Obj.Val: total cost (x10^3)."
    )
    .unwrap();
    writeln!(table).unwrap();
    writeln!(
        table,
        "{:<40} {:<12} {:<9} {:>10} {:>6} {:>8} {:>12} {:>12}",
        "run", "method", "plant", "inaccuracy", "seed", "success", "theta_error", "obj (x1e3)"
    )
    .unwrap();
    for r in &rows {
        writeln!(
            table,
            "{:<40} {:<12} {:<9} {:>9.0}% {:>6} {:>8} {:>12.6} {:>12.3}",
            r.run,
            r.method.as_str(),
            r.plant,
            r.inaccuracy * 100.0,
            r.seed,
            if r.success { "Yes" } else { "No" },
            r.theta_error,
            r.objective / 1e3
        )
        .unwrap();
    }

    let mut groups: BTreeMap<(String, String, String), Vec<&ReportRow>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry((
                r.plant.clone(),
                format!("{:06.2}", r.inaccuracy * 100.0),
                r.method.as_str().into(),
            ))
            .or_default()
            .push(r);
    }
    writeln!(table).unwrap();
    writeln!(
        table,
        "{:<9} {:>10} {:<12} {:>9} {:>12} {:>12}",
        "plant", "inaccuracy", "method", "success", "theta_error", "obj (x1e3)"
    )
    .unwrap();
    for ((plant, _, method), members) in &groups {
        let n = members.len() as f64;
        writeln!(
            table,
            "{:<9} {:>9.0}% {:<12} {:>9} {:>12.6} {:>12.3}",
            plant,
            members[0].inaccuracy * 100.0,
            method,
            format!("{}/{}", members.iter().filter(|m| m.success).count(), members.len()),
            members.iter().map(|m| m.theta_error).sum::<f64>() / n,
            members.iter().map(|m| m.objective).sum::<f64>() / n / 1e3,
        )
        .unwrap();
    }

    let mut csv = String::from("run,method,plant,inaccuracy,seed,success,theta_error,objective\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.run, r.method, r.plant, r.inaccuracy, r.seed, r.success, r.theta_error, r.objective
        )
        .unwrap();
    }
    let files = [
        ("report.txt", table.as_str()),
        ("report.csv", csv.as_str()),
        ("plot_objective.py", PLOT_OBJECTIVE_SCRIPT),
        ("plot_trajectory.py", PLOT_TRAJECTORY_SCRIPT),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(Report { rows, table })
}

/// Training budgets small enough for a laptop-scale run; pretraining and
/// retraining epochs are the main cost.
pub fn desk_scale(config: &mut ExperimentConfig, pretrain_epochs: usize, retrain_epochs: usize, outer: usize) {
    config.loop_settings.pretrain = TrainSettings {
        epochs: pretrain_epochs,
        ..config.loop_settings.pretrain.clone()
    };
    config.loop_settings.retrain = TrainSettings {
        epochs: retrain_epochs,
        ..config.loop_settings.retrain.clone()
    };
    config.loop_settings.max_outer_iterations = outer;
}
