//! Closed-loop trajectory optimization with a learned dynamics model.
//!
//! The network supplies the linearizations for the backward pass; every
//! forward pass and every trajectory added to the dataset runs on the real
//! plant.

use std::time::Instant;

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost::{CostError, CostSpec};
use crate::dataset::{collect_random_trials, Dataset, DatasetError, SampleTag};
use crate::env::{rollout, Dynamics, DynamicsError};
use crate::ilqr::{
    backward_pass_regularized, cost_expansions, line_search, IlqrError, LineSearchOutcome, SolverSettings, Trajectory,
};
use crate::neural::{
    linearize_trajectory_with, smooth_jacobians, train, FilterConfig, Network, NetworkError, NetworkSpec, TrainReport,
    TrainSettings,
};
use crate::par::Execution;
use crate::{ActionVector, StateVector};

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error("invalid loop settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Ilqr(#[from] IlqrError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("pretraining diverged")]
    PretrainDiverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopSettings {
    /// Line search and regularization; `max_iterations` is unused here.
    pub solver: SolverSettings,
    pub pretrain: TrainSettings,
    pub retrain: TrainSettings,
    pub filter: FilterConfig,
    /// Number of random pretraining trials `p`.
    pub trials: usize,
    /// Uniform amplitude per action dimension for the random trials.
    pub action_scale: Vec<f64>,
    /// Escape-perturbation std per action dimension; `None` means 10% of
    /// `action_scale`.
    pub noise_std: Option<Vec<f64>>,
    /// Retrain when an accepted step lowers the objective by less than this
    /// fraction.
    pub retrain_tolerance: f64,
    pub max_outer_iterations: usize,
    /// Stop early after this many outer iterations without a new best.
    pub patience: Option<usize>,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for LoopSettings {
    fn default() -> Self {
        Self {
            solver: SolverSettings::default(),
            pretrain: TrainSettings::default(),
            retrain: TrainSettings::retrain_default(),
            filter: FilterConfig::default(),
            trials: 100,
            action_scale: vec![10.0],
            noise_std: None,
            retrain_tolerance: 1e-3,
            max_outer_iterations: 500,
            patience: None,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl LoopSettings {
    pub fn noise(&self) -> Vec<f64> {
        self.noise_std
            .clone()
            .unwrap_or_else(|| self.action_scale.iter().map(|s| 0.1 * s).collect())
    }

    pub fn validate(&self, action_dim: usize) -> Result<(), LoopError> {
        let bad = |msg: &str| Err(LoopError::InvalidSettings(msg.into()));
        if self.trials == 0 {
            return bad("trial count must be positive");
        }
        if self.action_scale.len() != action_dim {
            return bad("action scale length must equal the action dimension");
        }
        let noise = self.noise();
        if noise.len() != action_dim || noise.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise std must be non-negative with one entry per action dimension");
        }
        if !(self.retrain_tolerance.is_finite() && self.retrain_tolerance > 0.0) {
            return bad("retrain tolerance must be positive");
        }
        if !(self.filter.sigma >= 0.0 && self.filter.truncate > 0.0) {
            return bad("filter sigma must be non-negative and truncate positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        self.pretrain.validate()?;
        self.retrain.validate()?;
        Ok(())
    }
}

/// Independent seed for a labelled sub-task of a run.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label);
    rng.next_u64()
}

const STREAM_PRETRAIN: u64 = 1;
const STREAM_NETWORK: u64 = 2;
const STREAM_RETRAIN: u64 = 1 << 20;
const STREAM_PERTURB: u64 = 2 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopEvent {
    /// Line search accepted a step.
    Accepted,
    /// Step accepted but the decrease fell below the retrain tolerance.
    Retrain,
    /// No step accepted; actions perturbed and the model retrained.
    Perturb,
}

impl LoopEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopEvent::Accepted => "accepted",
            LoopEvent::Retrain => "retrain",
            LoopEvent::Perturb => "perturb",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub iteration: usize,
    /// Best objective after this iteration.
    pub objective: f64,
    pub event: LoopEvent,
    pub alpha: Option<f64>,
    pub mu: f64,
    pub dataset_size: usize,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Objective after each iteration (index `i` is iteration `i + 1`).
    pub objective_curve: Vec<f64>,
    pub initial_objective: f64,
    pub best_objective: f64,
    /// First iteration whose objective equals the minimum; 0 if there were no
    /// iterations.
    pub k: usize,
    /// `best_objective` minus the baseline objective, once compared.
    pub d: Option<f64>,
    pub theta_error: Option<f64>,
    pub success: Option<bool>,
    pub pretrain_time: f64,
    pub iteration_times: Vec<f64>,
    pub total_time: f64,
    pub retrains: usize,
    pub perturbations: usize,
    /// Non-fatal failures (e.g. a diverged retrain that was rolled back).
    pub notes: Vec<String>,
}

impl RunMetrics {
    pub fn from_curve(initial_objective: f64, objective_curve: Vec<f64>) -> Self {
        let mut m = RunMetrics {
            initial_objective,
            objective_curve,
            ..Default::default()
        };
        m.refresh_summary();
        m
    }

    /// Recomputes `best_objective` and `k` from the curve.
    pub fn refresh_summary(&mut self) {
        let min = self.objective_curve.iter().copied().fold(f64::INFINITY, f64::min);
        self.k = self.objective_curve.iter().position(|&v| v == min).map_or(0, |i| i + 1);
        self.best_objective = self.initial_objective.min(min);
    }

    pub fn iterations(&self) -> usize {
        self.objective_curve.len()
    }

    /// Same run modulo wall-clock measurements.
    pub fn same_outcome(&self, other: &RunMetrics) -> bool {
        let strip = |m: &RunMetrics| RunMetrics {
            pretrain_time: 0.0,
            iteration_times: Vec::new(),
            total_time: 0.0,
            ..m.clone()
        };
        strip(self) == strip(other)
    }
}

pub struct Pretrained {
    pub network: Network,
    pub dataset: Dataset,
    pub report: TrainReport,
    pub wall_time: f64,
}

/// Collects `p` random trials on `plant` and fits a fresh network to them.
pub fn pretrain<D: Dynamics + ?Sized>(
    plant: &D,
    x0: &StateVector,
    horizon: usize,
    spec: &NetworkSpec,
    settings: &LoopSettings,
) -> Result<Pretrained, LoopError> {
    settings.validate(plant.action_dim())?;
    let start = Instant::now();
    let dataset = collect_random_trials(
        plant,
        x0,
        settings.trials,
        horizon,
        &settings.action_scale,
        settings.seed,
        settings.execution,
    )?;
    let spec = spec.clone().with_seed(derive_seed(settings.seed, STREAM_NETWORK));
    let net = Network::new(spec)?;
    let train_settings = TrainSettings {
        seed: derive_seed(settings.seed, STREAM_PRETRAIN),
        ..settings.pretrain.clone()
    };
    let (network, report) = train(&net, &dataset, &train_settings)?;
    if report.diverged && report.best_epoch.is_none() {
        return Err(LoopError::PretrainDiverged);
    }
    Ok(Pretrained {
        network,
        dataset,
        report,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub enum IterationOutcome {
    Improved {
        trajectory: Trajectory,
        cost: f64,
        alpha: f64,
        mu: f64,
    },
    Stalled {
        mu: f64,
    },
}

/// One backward/forward sweep: network Jacobians along `nominal`, temporal
/// smoothing, regularized backward pass, line search on the real plant.
#[allow(clippy::too_many_arguments)]
pub fn neural_iteration<D: Dynamics + ?Sized>(
    plant: &D,
    net: &Network,
    nominal: &Trajectory,
    nominal_cost: f64,
    spec: &CostSpec,
    settings: &LoopSettings,
    mu: f64,
) -> Result<IterationOutcome, LoopError> {
    let lin = linearize_trajectory_with(net, nominal, settings.execution)?;
    let lin = smooth_jacobians(&lin, &settings.filter);
    let (stages, terminal) = cost_expansions(nominal, spec)?;
    let reg = &settings.solver.regularization;
    let (pass, mu) = match backward_pass_regularized(&lin, &stages, &terminal, mu, reg) {
        Ok(r) => r,
        Err(IlqrError::RegularizationFailed { .. }) => return Ok(IterationOutcome::Stalled { mu: reg.max }),
        Err(e) => return Err(e.into()),
    };
    Ok(
        match line_search(
            plant,
            nominal,
            nominal_cost,
            &pass.gains,
            spec,
            &settings.solver.line_search,
        ) {
            LineSearchOutcome::Accepted {
                trajectory,
                cost,
                alpha,
            } => IterationOutcome::Improved {
                trajectory,
                cost,
                alpha,
                mu: reg.relax(mu),
            },
            LineSearchOutcome::Stalled => IterationOutcome::Stalled { mu },
        },
    )
}

/// Adds i.i.d. zero-mean Gaussian noise with per-dimension std to every
/// action.
pub fn escape_perturbation(actions: &[ActionVector], noise_std: &[f64], seed: u64) -> Vec<ActionVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    actions
        .iter()
        .map(|u| {
            DVector::from_iterator(
                u.len(),
                u.iter().zip(noise_std).map(|(v, s)| v + s * normal.sample(&mut rng)),
            )
        })
        .collect()
}

pub struct NeuralRun {
    pub metrics: RunMetrics,
    pub trajectory: Trajectory,
    pub records: Vec<LoopRecord>,
    pub network: Network,
    pub dataset: Dataset,
    pub pretrain_report: TrainReport,
}

/// Pretrains, then alternates neural iterations with retraining and escape
/// perturbations. The returned trajectory is the best one executed.
pub fn solve_neural_ilqr<D: Dynamics + ?Sized>(
    plant: &D,
    spec: &CostSpec,
    x0: &StateVector,
    horizon: usize,
    net_spec: &NetworkSpec,
    settings: &LoopSettings,
) -> Result<NeuralRun, LoopError> {
    let start = Instant::now();
    spec.validate()?;
    let pre = pretrain(plant, x0, horizon, net_spec, settings)?;
    let mut net = pre.network;
    let mut dataset = pre.dataset;

    let zeros = vec![DVector::zeros(plant.action_dim()); horizon];
    let mut nominal = rollout(plant, x0, &zeros)?;
    let mut cost = spec.total_cost(&nominal)?;
    let mut nominal_in_dataset = false;
    let noise = settings.noise();
    let reg = &settings.solver.regularization;
    let mut mu = reg.initial;

    let mut metrics = RunMetrics {
        initial_objective: cost,
        pretrain_time: pre.wall_time,
        ..Default::default()
    };
    let mut records = Vec::new();
    let mut since_best = 0;

    for iteration in 1..=settings.max_outer_iterations {
        let it_start = Instant::now();
        let before = cost;
        let outcome = neural_iteration(plant, &net, &nominal, cost, spec, settings, mu)?;
        let (event, alpha) = match outcome {
            IterationOutcome::Improved {
                trajectory,
                cost: new_cost,
                alpha,
                mu: next_mu,
            } => {
                let relative = (cost - new_cost) / cost.abs().max(f64::MIN_POSITIVE);
                nominal = trajectory;
                cost = new_cost;
                nominal_in_dataset = false;
                mu = next_mu;
                if relative < settings.retrain_tolerance {
                    dataset.append_trajectory(&nominal, SampleTag::IlqrRollout)?;
                    nominal_in_dataset = true;
                    retrain(&mut net, &dataset, settings, &mut metrics)?;
                    (LoopEvent::Retrain, Some(alpha))
                } else {
                    (LoopEvent::Accepted, Some(alpha))
                }
            }
            IterationOutcome::Stalled { .. } => {
                if !nominal_in_dataset {
                    dataset.append_trajectory(&nominal, SampleTag::IlqrRollout)?;
                    nominal_in_dataset = true;
                }
                let seed = derive_seed(settings.seed, STREAM_PERTURB + metrics.perturbations as u64);
                metrics.perturbations += 1;
                let actions = escape_perturbation(&nominal.actions, &noise, seed);
                match rollout(plant, x0, &actions) {
                    Ok(perturbed) => {
                        dataset.append_trajectory(&perturbed, SampleTag::PerturbedRollout)?;
                        let perturbed_cost = spec.total_cost(&perturbed)?;
                        if perturbed_cost < cost {
                            nominal = perturbed;
                            cost = perturbed_cost;
                        }
                    }
                    Err(e) => metrics
                        .notes
                        .push(format!("iteration {iteration}: perturbed rollout failed: {e}")),
                }
                retrain(&mut net, &dataset, settings, &mut metrics)?;
                mu = reg.initial;
                (LoopEvent::Perturb, None)
            }
        };
        let wall = it_start.elapsed().as_secs_f64();
        metrics.objective_curve.push(cost);
        metrics.iteration_times.push(wall);
        records.push(LoopRecord {
            iteration,
            objective: cost,
            event,
            alpha,
            mu,
            dataset_size: dataset.len(),
            wall_time: wall,
        });
        since_best = if cost < before { 0 } else { since_best + 1 };
        if settings.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }

    metrics.refresh_summary();
    metrics.total_time = start.elapsed().as_secs_f64();
    Ok(NeuralRun {
        metrics,
        trajectory: nominal,
        records,
        network: net,
        dataset,
        pretrain_report: pre.report,
    })
}

fn retrain(
    net: &mut Network,
    dataset: &Dataset,
    settings: &LoopSettings,
    metrics: &mut RunMetrics,
) -> Result<(), LoopError> {
    let train_settings = TrainSettings {
        seed: derive_seed(settings.seed, STREAM_RETRAIN + metrics.retrains as u64),
        ..settings.retrain.clone()
    };
    metrics.retrains += 1;
    let (next, report) = train(net, dataset, &train_settings)?;
    if report.diverged && report.best_epoch.is_none() {
        metrics.notes.push(format!(
            "retrain {} diverged; kept previous parameters",
            metrics.retrains
        ));
    } else {
        *net = next;
    }
    Ok(())
}
