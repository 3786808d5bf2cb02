//! Model-agnostic iLQR engine.
//!
//! The backward pass consumes a [`LinearizationSchedule`] and never looks at
//! the dynamics directly, so the same code serves analytic/finite-difference
//! plant derivatives and neural-network Jacobians. Only first-order dynamics
//! terms enter the Q-function expansion.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostError, CostExpansion, CostSpec};
use crate::env::{rollout, Dynamics, DynamicsError};
use crate::par::Execution;
use crate::{ActionVector, StateVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IlqrError {
    #[error("Q_uu + μI is not positive definite at τ={step} (μ={mu})")]
    NotPositiveDefinite { step: usize, mu: f64 },
    #[error("regularization exceeded μ_max={mu_max} without a positive definite Q_uu")]
    RegularizationFailed { mu_max: f64 },
    #[error("non-finite value in the backward recursion at τ={step}")]
    NonFinite { step: usize },
    #[error("schedule lengths disagree: {0}")]
    Length(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Paired state/action sequences; `states.len() == actions.len() + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateVector>,
    pub actions: Vec<ActionVector>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.actions.len() + 1
            && self
                .states
                .iter()
                .chain(&self.actions)
                .all(|v| v.iter().all(|e| e.is_finite()))
    }
}

/// Dynamics Jacobians `(N_x, N_u)` at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LinearizationSchedule {
    pub steps: Vec<Linearization>,
}

impl LinearizationSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueExpansion {
    pub vx: DVector<f64>,
    pub vxx: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QExpansion {
    pub qx: DVector<f64>,
    pub qu: DVector<f64>,
    pub qxx: DMatrix<f64>,
    pub qux: DMatrix<f64>,
    pub quu: DMatrix<f64>,
}

impl QExpansion {
    /// First-order-dynamics expansion of `J_τ + V_{τ+1}∘f` around the nominal.
    pub fn new(cost: &CostExpansion, lin: &Linearization, next: &ValueExpansion) -> Self {
        let at_vxx = lin.a.transpose() * &next.vxx;
        let bt_vxx = lin.b.transpose() * &next.vxx;
        QExpansion {
            qx: &cost.jx + lin.a.transpose() * &next.vx,
            qu: &cost.ju + lin.b.transpose() * &next.vx,
            qxx: &cost.jxx + &at_vxx * &lin.a,
            qux: &cost.jux + &bt_vxx * &lin.a,
            quu: &cost.juu + &bt_vxx * &lin.b,
        }
    }
}

/// Feedforward `k(τ)` and feedback `K(τ)` for every timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct GainSchedule {
    pub feedforward: Vec<DVector<f64>>,
    pub feedback: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn zeros(horizon: usize, n: usize, m: usize) -> Self {
        Self {
            feedforward: vec![DVector::zeros(m); horizon],
            feedback: vec![DMatrix::zeros(m, n); horizon],
        }
    }

    pub fn len(&self) -> usize {
        self.feedforward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feedforward.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardPass {
    pub gains: GainSchedule,
    /// `-Σ_τ (kᵀQ_u + ½ kᵀQ_uu k)`, the model's predicted cost reduction at α=1.
    pub predicted_decrease: f64,
    /// Value expansion at τ=0.
    pub value: ValueExpansion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearchSettings {
    pub initial_step: f64,
    pub ratio: f64,
    pub max_trials: usize,
}

impl Default for LineSearchSettings {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            ratio: 0.5,
            max_trials: 10,
        }
    }
}

impl LineSearchSettings {
    /// The geometric α schedule `α₀, α₀ρ, α₀ρ², …`.
    pub fn steps(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.max_trials).map(move |i| self.initial_step * self.ratio.powi(i as i32))
    }
}

/// Adaptive additive regularization of `Q_uu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Regularization {
    pub initial: f64,
    pub min: f64,
    pub max: f64,
    /// Multiplier applied when `Q_uu + μI` fails to factor.
    pub increase: f64,
    /// Multiplier applied after an accepted step.
    pub decrease: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Self {
            initial: 1e-6,
            min: 1e-9,
            max: 1e6,
            increase: 10.0,
            decrease: 0.5,
        }
    }
}

impl Regularization {
    pub fn escalate(&self, mu: f64) -> f64 {
        (mu * self.increase).max(self.min)
    }

    pub fn relax(&self, mu: f64) -> f64 {
        (mu * self.decrease).max(self.min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub line_search: LineSearchSettings,
    pub regularization: Regularization,
    /// Stop once an accepted step lowers the objective by less than this.
    pub tolerance: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            line_search: LineSearchSettings::default(),
            regularization: Regularization::default(),
            tolerance: 1e-4,
        }
    }
}

/// Initial state, horizon and objective of a finite-horizon problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub x0: StateVector,
    pub horizon: usize,
    pub cost: CostSpec,
}

/// Stage expansions along `traj` plus the terminal expansion.
pub fn cost_expansions(traj: &Trajectory, spec: &CostSpec) -> Result<(Vec<CostExpansion>, CostExpansion), CostError> {
    let stages = traj
        .states
        .iter()
        .zip(&traj.actions)
        .map(|(x, u)| spec.cost_expansion(x, u, false))
        .collect::<Result<Vec<_>, _>>()?;
    let last = traj.states.last().expect("trajectory has at least x0");
    let terminal = spec.cost_expansion(last, &DVector::zeros(0), true)?;
    Ok((stages, terminal))
}

/// Plant Jacobians along `traj`, evaluated per timestep under `exec`.
pub fn linearize_plant<D: Dynamics + ?Sized>(
    plant: &D,
    traj: &Trajectory,
    exec: Execution,
) -> Result<LinearizationSchedule, DynamicsError> {
    let steps = exec.map_range(traj.horizon(), |tau| {
        plant
            .jacobians(&traj.states[tau], &traj.actions[tau])
            .map(|(a, b)| Linearization { a, b })
    });
    Ok(LinearizationSchedule {
        steps: steps.into_iter().collect::<Result<_, _>>()?,
    })
}

/// One backward recursion at fixed regularization `mu`.
pub fn backward_pass(
    lin: &LinearizationSchedule,
    costs: &[CostExpansion],
    terminal: &CostExpansion,
    mu: f64,
) -> Result<BackwardPass, IlqrError> {
    if lin.len() != costs.len() {
        return Err(IlqrError::Length(format!(
            "{} linearizations, {} cost expansions",
            lin.len(),
            costs.len()
        )));
    }
    let horizon = lin.len();
    let mut value = ValueExpansion {
        vx: terminal.jx.clone(),
        vxx: terminal.jxx.clone(),
    };
    let mut feedforward = vec![DVector::zeros(0); horizon];
    let mut feedback = vec![DMatrix::zeros(0, 0); horizon];
    let mut predicted = 0.0;

    for tau in (0..horizon).rev() {
        let q = QExpansion::new(&costs[tau], &lin.steps[tau], &value);
        let m = q.quu.nrows();
        let regularized = &q.quu + DMatrix::identity(m, m) * mu;
        let chol = regularized
            .cholesky()
            .ok_or(IlqrError::NotPositiveDefinite { step: tau, mu })?;
        let k = -chol.solve(&q.qu);
        let big_k = -chol.solve(&q.qux);

        let kt_quu = k.transpose() * &q.quu;
        predicted -= k.dot(&q.qu) + 0.5 * (&kt_quu * &k)[0];

        let big_kt = big_k.transpose();
        let vx = &q.qx + &big_kt * &q.quu * &k + &big_kt * &q.qu + q.qux.transpose() * &k;
        let vxx = &q.qxx + &big_kt * &q.quu * &big_k + &big_kt * &q.qux + q.qux.transpose() * &big_k;
        let vxx = 0.5 * (&vxx + vxx.transpose());

        if vx
            .iter()
            .chain(vxx.iter())
            .chain(k.iter())
            .chain(big_k.iter())
            .any(|e| !e.is_finite())
        {
            return Err(IlqrError::NonFinite { step: tau });
        }
        feedforward[tau] = k;
        feedback[tau] = big_k;
        value = ValueExpansion { vx, vxx };
    }

    Ok(BackwardPass {
        gains: GainSchedule { feedforward, feedback },
        predicted_decrease: predicted,
        value,
    })
}

/// Backward pass with `μ` escalated until `Q_uu + μI` factors at every step.
/// Returns the pass and the `μ` that succeeded.
pub fn backward_pass_regularized(
    lin: &LinearizationSchedule,
    costs: &[CostExpansion],
    terminal: &CostExpansion,
    mu: f64,
    reg: &Regularization,
) -> Result<(BackwardPass, f64), IlqrError> {
    let mut mu = mu.max(0.0);
    loop {
        match backward_pass(lin, costs, terminal, mu) {
            Ok(pass) => return Ok((pass, mu)),
            Err(IlqrError::NotPositiveDefinite { .. }) | Err(IlqrError::NonFinite { .. }) => {
                mu = reg.escalate(mu);
                if mu > reg.max {
                    return Err(IlqrError::RegularizationFailed { mu_max: reg.max });
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Closed-loop rollout `u = û + αk + K(x - x̂)` through `plant`.
pub fn forward_pass<D: Dynamics + ?Sized>(
    plant: &D,
    nominal: &Trajectory,
    gains: &GainSchedule,
    alpha: f64,
) -> Result<Trajectory, DynamicsError> {
    let horizon = nominal.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    states.push(nominal.states[0].clone());
    for tau in 0..horizon {
        let dx = &states[tau] - &nominal.states[tau];
        let u = &nominal.actions[tau] + alpha * &gains.feedforward[tau] + &gains.feedback[tau] * dx;
        let next = plant.step(&states[tau], &u)?;
        if next.iter().any(|e| !e.is_finite()) {
            return Err(DynamicsError::NonFiniteState { step: tau + 1 });
        }
        actions.push(u);
        states.push(next);
    }
    Ok(Trajectory { states, actions })
}

#[derive(Clone, Debug, PartialEq)]
pub enum LineSearchOutcome {
    Accepted {
        trajectory: Trajectory,
        cost: f64,
        alpha: f64,
    },
    /// No step in the schedule strictly lowered the objective.
    Stalled,
}

/// Tries α over the schedule and accepts the first strict improvement.
/// Candidates whose rollout fails are treated as rejected.
pub fn line_search<D: Dynamics + ?Sized>(
    plant: &D,
    nominal: &Trajectory,
    nominal_cost: f64,
    gains: &GainSchedule,
    spec: &CostSpec,
    settings: &LineSearchSettings,
) -> LineSearchOutcome {
    for alpha in settings.steps() {
        let Ok(candidate) = forward_pass(plant, nominal, gains, alpha) else {
            continue;
        };
        let Ok(cost) = spec.total_cost(&candidate) else {
            continue;
        };
        if cost.is_finite() && cost < nominal_cost {
            return LineSearchOutcome::Accepted {
                trajectory: candidate,
                cost,
                alpha,
            };
        }
    }
    LineSearchOutcome::Stalled
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    /// An accepted step lowered the objective by less than the tolerance.
    Converged,
    /// The line search found no improving step.
    Stalled,
    MaxIterations,
    RegularizationFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub alpha: Option<f64>,
    pub mu: f64,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub trajectory: Trajectory,
    pub cost: f64,
    /// Objective of the initial rollout followed by one entry per iteration.
    pub objective_curve: Vec<f64>,
    pub records: Vec<IterationRecord>,
    pub iterations: usize,
    pub status: SolveStatus,
    pub wall_time: f64,
}

/// Conventional iLQR with `plant.jacobians` as the linearization, starting
/// from zero actions.
pub fn solve_model_based<D: Dynamics + ?Sized>(
    plant: &D,
    problem: &Problem,
    settings: &SolverSettings,
) -> Result<SolveReport, IlqrError> {
    let zeros = vec![DVector::zeros(plant.action_dim()); problem.horizon];
    solve_model_based_from(plant, problem, &zeros, settings)
}

pub fn solve_model_based_from<D: Dynamics + ?Sized>(
    plant: &D,
    problem: &Problem,
    initial_actions: &[ActionVector],
    settings: &SolverSettings,
) -> Result<SolveReport, IlqrError> {
    let start = Instant::now();
    if initial_actions.len() != problem.horizon {
        return Err(IlqrError::Length(format!(
            "{} initial actions for horizon {}",
            initial_actions.len(),
            problem.horizon
        )));
    }
    let mut traj = rollout(plant, &problem.x0, initial_actions)?;
    let mut cost = problem.cost.total_cost(&traj)?;
    let reg = &settings.regularization;
    let mut mu = reg.initial;
    let mut curve = vec![cost];
    let mut records = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < settings.max_iterations {
        iterations += 1;
        let lin = linearize_plant(plant, &traj, Execution::default())?;
        let (stages, terminal) = cost_expansions(&traj, &problem.cost)?;
        let pass = match backward_pass_regularized(&lin, &stages, &terminal, mu, reg) {
            Ok((pass, used)) => {
                mu = used;
                pass
            }
            Err(IlqrError::RegularizationFailed { .. }) => {
                status = SolveStatus::RegularizationFailed;
                records.push(IterationRecord {
                    iteration: iterations,
                    objective: cost,
                    alpha: None,
                    mu,
                });
                curve.push(cost);
                break;
            }
            Err(e) => return Err(e),
        };
        match line_search(plant, &traj, cost, &pass.gains, &problem.cost, &settings.line_search) {
            LineSearchOutcome::Accepted {
                trajectory,
                cost: new_cost,
                alpha,
            } => {
                let decrease = cost - new_cost;
                traj = trajectory;
                cost = new_cost;
                mu = reg.relax(mu);
                records.push(IterationRecord {
                    iteration: iterations,
                    objective: cost,
                    alpha: Some(alpha),
                    mu,
                });
                curve.push(cost);
                if decrease < settings.tolerance {
                    status = SolveStatus::Converged;
                    break;
                }
            }
            LineSearchOutcome::Stalled => {
                records.push(IterationRecord {
                    iteration: iterations,
                    objective: cost,
                    alpha: None,
                    mu,
                });
                curve.push(cost);
                status = SolveStatus::Stalled;
                break;
            }
        }
    }

    Ok(SolveReport {
        trajectory: traj,
        cost,
        objective_curve: curve,
        records,
        iterations,
        status,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
